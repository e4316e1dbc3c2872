use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::json;

use pfm_core::config::KvConfig;
use pfm_core::encoders::EncoderConfig;
use pfm_core::eval::{
    ablation_table, check_compatible, cross_domain_from_checkpoint, cross_domain_run, evaluate_model, gradcheck_suite,
    write_ablation_csv, ChannelProjection, CrossDomainConfig, Report,
};
use pfm_core::ingest::{ingest_dataset, synth::SYNTH_KEYS, synth_generate, Dataset, IngestConfig, Label, Split, SynthConfig};
use pfm_core::metrics::bootstrap_ci;
use pfm_core::pretrain::{pretrain_run, write_loss_csv, Checkpoint, PretrainConfig};
use pfm_core::sra::{attention_profile, train_head, FeatureMode, SraConfig, SraModel};
use pfm_core::Error;

#[derive(Parser)]
#[command(name = "pfm", version, about = "Masked pretraining and attention fusion for actigraphy fitness classification")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Debug)]
struct Common {
    /// `key = value` configuration file; flags override it.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Extra `key=value` setting, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Write the JSON report here instead of stdout.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a planted-signal synthetic dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        subjects: Option<usize>,
    },
    /// Build a dataset from raw actigraphy and demographics CSV files.
    Ingest {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "CSV")]
        actigraphy: Option<PathBuf>,
        #[arg(long, value_name = "CSV")]
        demographics: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out_dir: Option<PathBuf>,
    },
    /// Masked-representation pretraining of the encoders.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Output checkpoint.
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "CSV")]
        loss_csv: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train attention fusion and the classification head on a pretrained encoder.
    TrainHead {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Pretrained encoder checkpoint.
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        /// Output model (encoder plus head).
        #[arg(long, value_name = "FILE")]
        model: Option<PathBuf>,
        /// Fine-tune the encoder together with the head.
        #[arg(long)]
        unfreeze: bool,
        #[arg(long)]
        mode: Option<String>,
    },
    /// Score a dataset split with a trained model.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        model: Option<PathBuf>,
        #[arg(long)]
        split: Option<String>,
        /// Bootstrap resamples of the evaluated samples for intervals.
        #[arg(long)]
        bootstrap: Option<usize>,
    },
    /// Feature-block ablation over several training seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        runs: Option<usize>,
        /// Comparison table CSV.
        #[arg(long, value_name = "CSV")]
        table: Option<PathBuf>,
    },
    /// Pretrain on one dataset, train and evaluate heads on another.
    CrossDomain {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        source: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        target: Option<PathBuf>,
        /// Reuse a checkpoint pretrained on the source instead of pretraining.
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        projection: Option<String>,
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Per-feature attention profile of a trained model.
    Explain {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        model: Option<PathBuf>,
        #[arg(long)]
        split: Option<String>,
        #[arg(long, value_name = "DIR")]
        out_dir: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable component.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
}

/// Failure with the exit status it maps to.
struct Failure {
    code: u8,
    category: &'static str,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let usage = match &e {
            Error::InvalidConfig(_) => true,
            Error::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
            _ => false,
        };
        Failure {
            code: if usage { 2 } else { 1 },
            category: e.category(),
            message: e.to_string(),
        }
    }
}

type Res<T> = std::result::Result<T, Failure>;

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        category: "usage",
        message: message.into(),
    }
}

/// Merged settings: config file, then `--set`, then dedicated flags.
struct Settings {
    kv: KvConfig,
}

impl Settings {
    fn build(common: &Common, flags: &[(&str, Option<String>)], allowed: &[&str]) -> Res<Self> {
        let mut kv = match &common.config {
            Some(p) => KvConfig::load(p)?,
            None => KvConfig::new(),
        };
        let mut sets = KvConfig::new();
        for s in &common.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{s}`")))?;
            sets.set(k.trim(), v.trim());
        }
        kv.overlay(&sets);
        let mut all_flags: Vec<(&str, Option<String>)> = flags.to_vec();
        all_flags.push(("seed", common.seed.map(|s| s.to_string())));
        for (k, v) in all_flags {
            if let Some(v) = v {
                if let Some(prev) = sets.get_str(k) {
                    if prev != v {
                        return Err(usage(format!("`{k}` given as both --set {k}={prev} and a flag value {v}")));
                    }
                }
                kv.set(k, v);
            }
        }
        kv.check_known(allowed)?;
        Ok(Self { kv })
    }

    fn path(&self, key: &str) -> Res<PathBuf> {
        self.kv
            .get_str(key)
            .map(PathBuf::from)
            .ok_or_else(|| usage(format!("missing required setting `{key}` (use --{} or the config file)", key.replace('_', "-"))))
    }

    fn opt_path(&self, key: &str) -> Option<PathBuf> {
        self.kv.get_str(key).map(PathBuf::from)
    }

    fn echo(&self) -> BTreeMap<String, String> {
        self.kv.entries().clone()
    }

    fn seed(&self) -> Res<u64> {
        Ok(self.kv.get("seed", 0u64)?)
    }

    fn sra(&self) -> Res<SraConfig> {
        let mut c = SraConfig::from_kv(&self.kv)?;
        if !self.kv.contains("head_seed") {
            c.seed = self.seed()?;
        }
        Ok(c)
    }

    fn split(&self, default: Split) -> Res<Split> {
        match self.kv.get_str("split") {
            None => Ok(default),
            Some(s) => s.parse().map_err(|_| usage(format!("unknown split `{s}` (expected train, val or test)"))),
        }
    }

    fn seeds(&self) -> Res<Vec<u64>> {
        let runs: usize = self.kv.get("runs", 5usize)?;
        if runs == 0 {
            return Err(usage("runs must be at least 1"));
        }
        let base = self.seed()?;
        Ok((0..runs as u64).map(|i| base + i).collect())
    }
}

fn keys<'a>(groups: &[&[&'a str]]) -> Vec<&'a str> {
    let mut v: Vec<&str> = groups.iter().flat_map(|g| g.iter().copied()).collect();
    v.push("seed");
    v
}

fn emit(report: &Report, out: Option<&Path>) -> Res<()> {
    let text = report.to_json()?;
    match out {
        Some(p) => fs::write(p, text + "\n").map_err(|e| Failure::from(Error::Io {
            path: p.to_path_buf(),
            source: e,
        })),
        None => {
            let mut stdout = std::io::stdout().lock();
            match writeln!(stdout, "{text}") {
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Failure::from(Error::Io {
                    path: PathBuf::from("<stdout>"),
                    source: e,
                })),
                _ => Ok(()),
            }
        }
    }
}

fn load_model(path: &Path) -> Res<(Checkpoint, SraModel)> {
    let ck = Checkpoint::load(path)?;
    let blob = ck
        .head
        .as_ref()
        .ok_or_else(|| usage(format!("{} holds no trained head; run train-head first", path.display())))?;
    let model = SraModel::from_blob(blob)?;
    Ok((ck, model))
}

fn run(cli: Cli) -> Res<()> {
    match cli.cmd {
        Cmd::Synth {
            common,
            out_dir,
            subjects,
        } => {
            let s = Settings::build(
                &common,
                &[
                    ("out_dir", out_dir.map(|p| p.display().to_string())),
                    ("subjects", subjects.map(|v| v.to_string())),
                ],
                &keys(&[&SYNTH_KEYS, &["out_dir"]]),
            )?;
            let cfg = SynthConfig::from_kv(&s.kv)?;
            let seed = s.seed()?;
            let dir = s.path("out_dir")?;
            let out = synth_generate(&cfg, seed)?;
            out.dataset.save(&dir)?;
            let good = out.dataset.records.iter().filter(|r| r.label == Label::Good).count();
            let mut r = Report::new("synth", s.echo(), vec![seed]);
            r.details = json!({
                "out_dir": dir,
                "subjects": out.dataset.records.len(),
                "good": good,
                "limited": out.dataset.records.len() - good,
                "train": out.dataset.manifest.splits.train.len(),
                "val": out.dataset.manifest.splits.val.len(),
                "test": out.dataset.manifest.splits.test.len(),
            });
            emit(&r, common.out.as_deref())
        }
        Cmd::Ingest {
            common,
            actigraphy,
            demographics,
            out_dir,
        } => {
            let s = Settings::build(
                &common,
                &[
                    ("actigraphy", actigraphy.map(|p| p.display().to_string())),
                    ("demographics", demographics.map(|p| p.display().to_string())),
                    ("out_dir", out_dir.map(|p| p.display().to_string())),
                ],
                &keys(&[&IngestConfig::KEYS, &["actigraphy", "demographics", "out_dir"]]),
            )?;
            let cfg = IngestConfig::from_kv(&s.kv)?;
            let ds = ingest_dataset(&s.path("actigraphy")?, &s.path("demographics")?, &cfg)?;
            let dir = s.path("out_dir")?;
            ds.save(&dir)?;
            let mut r = Report::new("ingest", s.echo(), vec![cfg.seed]);
            r.details = json!({
                "out_dir": dir,
                "kept": ds.records.len(),
                "excluded": ds.manifest.excluded,
            });
            emit(&r, common.out.as_deref())
        }
        Cmd::Pretrain {
            common,
            data,
            checkpoint,
            loss_csv,
            epochs,
        } => {
            let s = Settings::build(
                &common,
                &[
                    ("data", data.map(|p| p.display().to_string())),
                    ("checkpoint", checkpoint.map(|p| p.display().to_string())),
                    ("loss_csv", loss_csv.map(|p| p.display().to_string())),
                    ("epochs", epochs.map(|v| v.to_string())),
                ],
                &keys(&[
                    &EncoderConfig::KEYS,
                    &PretrainConfig::KEYS,
                    &["data", "checkpoint", "loss_csv", "pretrain_split"],
                ]),
            )?;
            let ds = Dataset::load(&s.path("data")?)?;
            let mut enc_cfg = EncoderConfig::from_kv(&s.kv)?;
            if !s.kv.contains("channels") {
                enc_cfg.channels = ds.channels();
            }
            let cfg = PretrainConfig::from_kv(&s.kv)?;
            let split = match s.kv.get_str("pretrain_split").unwrap_or("train") {
                "all" => None,
                other => Some(
                    other
                        .parse::<Split>()
                        .map_err(|_| usage(format!("unknown pretrain_split `{other}`")))?,
                ),
            };
            let out_path = s.path("checkpoint")?;
            let ck = pretrain_run(&ds, split, &enc_cfg, &cfg)?;
            ck.save(&out_path)?;
            if let Some(p) = s.opt_path("loss_csv") {
                write_loss_csv(&p, &ck.history)?;
            }
            let mut r = Report::new("pretrain", s.echo(), vec![cfg.seed]);
            r.details = json!({
                "checkpoint": out_path,
                "history": ck.history,
                "first_loss": ck.history.first().map(|h| h.mean_loss),
                "final_loss": ck.history.last().map(|h| h.mean_loss),
            });
            emit(&r, common.out.as_deref())
        }
        Cmd::TrainHead {
            common,
            data,
            checkpoint,
            model,
            unfreeze,
            mode,
        } => {
            let s = Settings::build(
                &common,
                &[
                    ("data", data.map(|p| p.display().to_string())),
                    ("checkpoint", checkpoint.map(|p| p.display().to_string())),
                    ("model", model.map(|p| p.display().to_string())),
                    ("unfreeze", unfreeze.then(|| "true".to_string())),
                    ("mode", mode),
                ],
                &keys(&[&SraConfig::KEYS, &["data", "checkpoint", "model"]]),
            )?;
            let ds = Dataset::load(&s.path("data")?)?;
            let mut ck = Checkpoint::load(&s.path("checkpoint")?)?;
            let cfg = s.sra()?;
            let trained = train_head(&ds, &mut ck.encoder, &cfg)?;
            let test = ds.split(Split::Test);
            let metrics = if test.is_empty() {
                None
            } else {
                Some(evaluate_model(&ck.encoder, &trained.model, &test)?)
            };
            ck.head = Some(trained.model.to_blob()?);
            let out_path = s.path("model")?;
            ck.save(&out_path)?;
            let mut r = Report::new("train-head", s.echo(), vec![cfg.seed]);
            if let Some(m) = &metrics {
                r = r.with_metrics(m);
            }
            r.details = json!({
                "model": out_path,
                "evaluated_split": if metrics.is_some() { "test" } else { "none" },
                "history": trained.history,
            });
            emit(&r, common.out.as_deref())
        }
        Cmd::Evaluate {
            common,
            data,
            model,
            split,
            bootstrap,
        } => {
            let s = Settings::build(
                &common,
                &[
                    ("data", data.map(|p| p.display().to_string())),
                    ("model", model.map(|p| p.display().to_string())),
                    ("split", split),
                    ("bootstrap", bootstrap.map(|v| v.to_string())),
                ],
                &keys(&[&["data", "model", "split", "bootstrap"]]),
            )?;
            let ds = Dataset::load(&s.path("data")?)?;
            let (ck, model) = load_model(&s.path("model")?)?;
            let split = s.split(Split::Test)?;
            let records = ds.split(split);
            if records.is_empty() {
                return Err(usage(format!("split {split:?} of the dataset is empty")));
            }
            let m = match s.kv.get_opt::<usize>("bootstrap")? {
                Some(n) => {
                    let scores = model.predict(&ck.encoder, &records)?;
                    let labels: Vec<f64> = records.iter().map(|r| r.label.as_f64()).collect();
                    bootstrap_ci(&scores, &labels, model.config.threshold, n, s.seed()?)?
                }
                None => evaluate_model(&ck.encoder, &model, &records)?,
            };
            let mut r = Report::new("evaluate", s.echo(), vec![s.seed()?]).with_metrics(&m);
            r.details = json!({ "split": format!("{split:?}").to_lowercase(), "samples": records.len() });
            emit(&r, common.out.as_deref())
        }
        Cmd::Ablate {
            common,
            data,
            checkpoint,
            runs,
            table,
        } => {
            let s = Settings::build(
                &common,
                &[
                    ("data", data.map(|p| p.display().to_string())),
                    ("checkpoint", checkpoint.map(|p| p.display().to_string())),
                    ("runs", runs.map(|v| v.to_string())),
                    ("table", table.map(|p| p.display().to_string())),
                ],
                &keys(&[&SraConfig::KEYS, &["data", "checkpoint", "runs", "table"]]),
            )?;
            let ds = Dataset::load(&s.path("data")?)?;
            let ck = Checkpoint::load(&s.path("checkpoint")?)?;
            let cfg = s.sra()?;
            let seeds = s.seeds()?;
            let rows = ablation_table(&ds, &ck.encoder, &cfg, &FeatureMode::ALL, &seeds)?;
            if let Some(p) = s.opt_path("table") {
                write_ablation_csv(&p, &rows)?;
            }
            let fused = &rows.iter().find(|(m, _)| *m == FeatureMode::Fused).expect("fused row").1;
            let mut r = Report::new("ablate", s.echo(), seeds).with_metrics(fused);
            let modes: BTreeMap<&str, _> = rows.iter().map(|(m, rep)| (m.as_str(), rep)).collect();
            r.details = json!({ "modes": modes });
            emit(&r, common.out.as_deref())
        }
        Cmd::CrossDomain {
            common,
            source,
            target,
            checkpoint,
            projection,
            runs,
        } => {
            let s = Settings::build(
                &common,
                &[
                    ("source", source.map(|p| p.display().to_string())),
                    ("target", target.map(|p| p.display().to_string())),
                    ("checkpoint", checkpoint.map(|p| p.display().to_string())),
                    ("projection", projection),
                    ("runs", runs.map(|v| v.to_string())),
                ],
                &keys(&[
                    &EncoderConfig::KEYS,
                    &PretrainConfig::KEYS,
                    &SraConfig::KEYS,
                    &["source", "target", "checkpoint", "projection", "runs"],
                ]),
            )?;
            let a = Dataset::load(&s.path("source")?)?;
            let b = Dataset::load(&s.path("target")?)?;
            let mut encoder = EncoderConfig::from_kv(&s.kv)?;
            if !s.kv.contains("channels") {
                encoder.channels = a.channels();
            }
            let cfg = CrossDomainConfig {
                encoder,
                pretrain: PretrainConfig::from_kv(&s.kv)?,
                sra: s.sra()?,
                projection: s.kv.get("projection", ChannelProjection::Strict)?,
                seeds: s.seeds()?,
            };
            let res = match s.opt_path("checkpoint") {
                Some(p) => {
                    let ck = Checkpoint::load(&p)?;
                    let mut cfg = cfg;
                    if !EncoderConfig::KEYS.iter().any(|k| s.kv.contains(k)) {
                        cfg.encoder = ck.encoder.config.clone();
                    }
                    check_compatible(&ck.encoder.config, &cfg.encoder)?;
                    cross_domain_from_checkpoint(ck, &a.manifest.name, &b, &cfg)?
                }
                None => cross_domain_run(&a, &b, &cfg)?,
            };
            let mut r = res.report;
            r.config_echo.extend(s.echo());
            emit(&r, common.out.as_deref())
        }
        Cmd::Explain {
            common,
            data,
            model,
            split,
            out_dir,
        } => {
            let s = Settings::build(
                &common,
                &[
                    ("data", data.map(|p| p.display().to_string())),
                    ("model", model.map(|p| p.display().to_string())),
                    ("split", split),
                    ("out_dir", out_dir.map(|p| p.display().to_string())),
                ],
                &keys(&[&["data", "model", "split", "out_dir"]]),
            )?;
            let ds = Dataset::load(&s.path("data")?)?;
            let (ck, model) = load_model(&s.path("model")?)?;
            let split = s.split(Split::Test)?;
            let records = ds.split(split);
            if records.is_empty() {
                return Err(usage(format!("split {split:?} of the dataset is empty")));
            }
            let profile = attention_profile(&ck.encoder, &model, &records)?;
            if let Some(dir) = s.opt_path("out_dir") {
                profile.write_csvs(&dir)?;
            }
            let mut ranking = profile.features.clone();
            ranking.sort_by_key(|f| f.rank);
            let mut r = Report::new("explain", s.echo(), vec![s.seed()?]);
            r.details = json!({
                "ranking": ranking,
                "temporal_sum": profile.temporal_sum,
                "top_demographic": profile.top_demographic(),
            });
            emit(&r, common.out.as_deref())
        }
        Cmd::Gradcheck { common } => {
            let s = Settings::build(&common, &[], &keys(&[]))?;
            let seed = s.seed()?;
            let entries = gradcheck_suite(seed)?;
            let failed: Vec<String> = entries.iter().filter(|e| !e.passed).map(|e| e.module.clone()).collect();
            let mut r = Report::new("gradcheck", s.echo(), vec![seed]);
            r.details = json!({ "modules": entries, "all_passed": failed.is_empty() });
            emit(&r, common.out.as_deref())?;
            if failed.is_empty() {
                Ok(())
            } else {
                Err(Failure {
                    code: 1,
                    category: "numeric",
                    message: format!("gradient check failed for {}", failed.join(", ")),
                })
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            info!("exiting with status {}", f.code);
            eprintln!("{}", json!({ "error": { "category": f.category, "message": f.message } }));
            ExitCode::from(f.code)
        }
    }
}
