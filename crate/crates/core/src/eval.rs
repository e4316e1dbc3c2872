//! Training/evaluation protocols, ablations, cross-domain transfer, reports
//! and the gradient-check suite.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoders::{EncoderConfig, Encoders, Grad};
use crate::error::{Error, Result};
use crate::ingest::{Dataset, NormStats, Split, SubjectRecord};
use crate::metrics::{ci_over_runs, evaluate_scores, Estimate, MetricsReport, METRIC_NAMES};
use crate::numeric::{grad_check, GradCheckConfig, GradCheckReport, Graph, ParamSet, Tensor, Var};
use crate::pretrain::{pretrain_run, Checkpoint, PretrainConfig};
use crate::sra::{sra_forward, train_head, FeatureMode, SraConfig, SraIds, SraModel};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Machine-readable run summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub run_tag: String,
    pub metrics: BTreeMap<String, Estimate>,
    pub n_runs: usize,
    pub threshold: f64,
    pub config_echo: BTreeMap<String, String>,
    pub seed_list: Vec<u64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub warnings: Vec<String>,
    #[serde(skip_serializing_if = "serde_json::Value::is_null", default)]
    pub details: serde_json::Value,
}

impl Report {
    pub fn new(run_tag: impl Into<String>, config_echo: BTreeMap<String, String>, seed_list: Vec<u64>) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            run_tag: run_tag.into(),
            metrics: BTreeMap::new(),
            n_runs: 0,
            threshold: 0.5,
            config_echo,
            seed_list,
            warnings: Vec::new(),
            details: serde_json::Value::Null,
        }
    }

    pub fn with_metrics(mut self, m: &MetricsReport) -> Self {
        for name in METRIC_NAMES {
            self.metrics.insert(name.to_string(), *m.get(name).expect("known metric"));
        }
        self.n_runs = m.n_runs;
        self.threshold = m.threshold;
        self.warnings = m.warnings.clone();
        self
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Scores `records` with a trained model and computes every metric.
pub fn evaluate_model(enc: &Encoders, model: &SraModel, records: &[&SubjectRecord]) -> Result<MetricsReport> {
    let scores = model.predict(enc, records)?;
    let labels: Vec<f64> = records.iter().map(|r| r.label.as_f64()).collect();
    evaluate_scores(&scores, &labels, model.config.threshold)
}

/// One head training per seed, each evaluated on the test split.
pub struct ProtocolResult {
    pub summary: MetricsReport,
    pub runs: Vec<MetricsReport>,
    /// Trained model of the first seed.
    pub first_model: SraModel,
    /// Encoder after the first seed's training (differs from the input only when unfrozen).
    pub first_encoder: Encoders,
}

/// Trains with each seed (concurrently) and summarizes runs with percentile intervals.
pub fn run_protocol(dataset: &Dataset, enc: &Encoders, config: &SraConfig, seeds: &[u64]) -> Result<ProtocolResult> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("protocol needs at least one seed".into()));
    }
    let test = dataset.split(Split::Test);
    if test.is_empty() {
        return Err(Error::InvalidArgument("test split is empty".into()));
    }
    let outcomes: Vec<Result<(MetricsReport, SraModel, Encoders)>> = seeds
        .par_iter()
        .map(|&seed| {
            let mut e = enc.clone();
            let cfg = SraConfig {
                seed,
                ..config.clone()
            };
            let trained = train_head(dataset, &mut e, &cfg)?;
            let m = evaluate_model(&e, &trained.model, &test)?;
            Ok((m, trained.model, e))
        })
        .collect();
    let mut runs = Vec::with_capacity(seeds.len());
    let mut first = None;
    for o in outcomes {
        let (m, model, e) = o?;
        runs.push(m);
        if first.is_none() {
            first = Some((model, e));
        }
    }
    let summary = if runs.len() >= 2 {
        ci_over_runs(&runs)?
    } else {
        runs[0].clone()
    };
    let (first_model, first_encoder) = first.expect("at least one seed");
    Ok(ProtocolResult {
        summary,
        runs,
        first_model,
        first_encoder,
    })
}

/// Trains and evaluates with the excluded feature block zeroed.
pub fn ablation_harness(
    dataset: &Dataset,
    enc: &Encoders,
    config: &SraConfig,
    mode: FeatureMode,
    seeds: &[u64],
) -> Result<MetricsReport> {
    let cfg = SraConfig {
        mode,
        ..config.clone()
    };
    Ok(run_protocol(dataset, enc, &cfg, seeds)?.summary)
}

pub fn ablation_table(
    dataset: &Dataset,
    enc: &Encoders,
    config: &SraConfig,
    modes: &[FeatureMode],
    seeds: &[u64],
) -> Result<Vec<(FeatureMode, MetricsReport)>> {
    modes
        .iter()
        .map(|&m| Ok((m, ablation_harness(dataset, enc, config, m, seeds)?)))
        .collect()
}

pub fn write_ablation_csv(path: &Path, rows: &[(FeatureMode, MetricsReport)]) -> Result<()> {
    let io = |e: csv::Error| Error::io(path, e.into());
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    let mut header = vec!["mode".to_string()];
    for name in METRIC_NAMES {
        header.extend([name.to_string(), format!("{name}_lo"), format!("{name}_hi")]);
    }
    w.write_record(&header).map_err(io)?;
    let fmt = |v: Option<f64>| v.map(|v| format!("{v:?}")).unwrap_or_default();
    for (mode, m) in rows {
        let mut rec = vec![mode.as_str().to_string()];
        for name in METRIC_NAMES {
            let e = m.get(name).expect("known metric");
            rec.extend([fmt(Some(e.point)), fmt(e.lo), fmt(e.hi)]);
        }
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// How a dataset's channels are mapped onto the encoder's channel count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelProjection {
    /// Counts must already agree.
    #[default]
    Strict,
    /// Average all channels into each target channel.
    Mean,
    /// Keep the first `m` channels, repeating the last one if there are too few.
    Select,
}

impl FromStr for ChannelProjection {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "strict" => Ok(Self::Strict),
            "mean" => Ok(Self::Mean),
            "select" => Ok(Self::Select),
            _ => Err(Error::InvalidConfig(format!(
                "unknown channel projection `{s}` (expected strict, mean or select)"
            ))),
        }
    }
}

/// Re-expresses every series with `channels` channels, keeping split
/// membership and refitting intensity statistics on the training split.
pub fn project_channels(dataset: &Dataset, channels: usize, projection: ChannelProjection) -> Result<Dataset> {
    let from = dataset.channels();
    if from == channels {
        return Ok(dataset.clone());
    }
    if projection == ChannelProjection::Strict {
        return Err(Error::InvalidConfig(format!(
            "dataset has {from} channels but the encoder expects {channels}; choose a channel projection"
        )));
    }
    let records: Vec<SubjectRecord> = dataset
        .records
        .iter()
        .map(|r| {
            let mut series = Vec::with_capacity(r.len() * channels);
            for row in r.series.chunks_exact(from) {
                for c in 0..channels {
                    series.push(match projection {
                        ChannelProjection::Mean => row.iter().sum::<f64>() / from as f64,
                        _ => row[c.min(from - 1)],
                    });
                }
            }
            SubjectRecord {
                series,
                channels,
                ..r.clone()
            }
        })
        .collect();
    let mut out = Dataset {
        manifest: dataset.manifest.clone(),
        records,
    };
    out.manifest.channels = channels;
    let train = out.split(Split::Train);
    out.manifest.stats = NormStats::fit(train.into_iter(), channels);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossDomainConfig {
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub sra: SraConfig,
    pub projection: ChannelProjection,
    pub seeds: Vec<u64>,
}

/// Rejects a checkpoint whose slice length or width disagrees with `config`.
pub fn check_compatible(checkpoint: &EncoderConfig, config: &EncoderConfig) -> Result<()> {
    if checkpoint.sigma != config.sigma || checkpoint.d_model != config.d_model {
        return Err(Error::InvalidConfig(format!(
            "checkpoint has sigma = {}, d_model = {} but the config asks for sigma = {}, d_model = {}",
            checkpoint.sigma, checkpoint.d_model, config.sigma, config.d_model
        )));
    }
    Ok(())
}

pub struct CrossDomainResult {
    pub report: Report,
    pub checkpoint: Checkpoint,
    pub protocol: ProtocolResult,
}

/// Pretrains on the training split of `a`, then trains and evaluates heads on `b`.
pub fn cross_domain_run(a: &Dataset, b: &Dataset, config: &CrossDomainConfig) -> Result<CrossDomainResult> {
    let a = project_channels(a, config.encoder.channels, config.projection)?;
    let checkpoint = pretrain_run(&a, Some(Split::Train), &config.encoder, &config.pretrain)?;
    cross_domain_from_checkpoint(checkpoint, &a.manifest.name, b, config)
}

pub fn cross_domain_from_checkpoint(
    checkpoint: Checkpoint,
    source_name: &str,
    b: &Dataset,
    config: &CrossDomainConfig,
) -> Result<CrossDomainResult> {
    check_compatible(&checkpoint.encoder.config, &config.encoder)?;
    let b = project_channels(b, checkpoint.encoder.config.channels, config.projection)?;
    let protocol = run_protocol(&b, &checkpoint.encoder, &config.sra, &config.seeds)?;
    let tag = format!("{source_name}->{}", b.manifest.name);
    let mut echo = BTreeMap::new();
    echo.insert("projection".into(), format!("{:?}", config.projection).to_lowercase());
    echo.insert("pretrain_epochs".into(), config.pretrain.epochs.to_string());
    echo.insert("mode".into(), config.sra.mode.as_str().into());
    let report = Report::new(tag, echo, config.seeds.clone()).with_metrics(&protocol.summary);
    Ok(CrossDomainResult {
        report,
        checkpoint,
        protocol,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckEntry {
    pub module: String,
    pub tolerance: f64,
    pub passed: bool,
    #[serde(flatten)]
    pub report: GradCheckReport,
}

fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        d_model: 8,
        visible_layers: 2,
        masked_layers: 1,
        heads: 2,
        ffn_width: 12,
        sigma: 3,
        channels: 2,
        max_slices: 8,
        init_std: 0.3,
        ..Default::default()
    }
}

fn only_trainable(set: &ParamSet, keep: impl Fn(&str) -> bool) -> ParamSet {
    let mut s = set.clone();
    for (id, name) in set.iter().map(|(id, n, _)| (id, n.to_string())).collect::<Vec<_>>() {
        s.set_trainable(id, keep(&name));
    }
    s
}

/// `mean(out ⊙ R)` for a fixed random `R`, so no output symmetry hides errors.
fn projected(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.value(out).shape().to_vec();
    let r = g.constant(Tensor::randn(&shape, 1.0, &mut rng));
    let m = g.mul(out, r)?;
    g.mean_all(m)
}

/// Central-difference checks of every differentiable component.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<GradCheckEntry>> {
    let cfg = GradCheckConfig {
        probes: 40,
        seed,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6C);
    let ec = tiny_encoder();
    let enc = Encoders::new(ec.clone(), seed)?;
    let n_slices = 5;
    let series = Tensor::randn(&[n_slices * ec.sigma, ec.channels], 1.0, &mut rng).into_data();
    let batch = crate::slicing::slice(&series, ec.channels, ec.sigma)?;
    let plan = crate::slicing::MaskPlan::from_masked(n_slices, &[1, 3, 4])?;
    let parts = crate::slicing::split(&batch, &plan)?;
    let mut out = Vec::new();
    let mut push = |module: &str, tol: f64, r: GradCheckReport| {
        out.push(GradCheckEntry {
            module: module.into(),
            tolerance: tol,
            passed: r.max_rel_error <= tol,
            report: r,
        })
    };

    let view = |set: ParamSet| Encoders {
        config: ec.clone(),
        params: crate::encoders::EncoderParams::from_set(&ec, set).expect("same layout"),
    };

    let e = view(only_trainable(&enc.params.set, |n| n.starts_with("conv.")));
    let r = grad_check(
        &e.params.set,
        |g| {
            let z = e.embed_slices(g, &batch.slices, Grad::Track)?;
            projected(g, z, 1)
        },
        cfg,
    )?;
    push("conv_embedding", 1e-4, r);

    let e = view(only_trainable(&enc.params.set, |n| n.starts_with("visible.") || n == "pos"));
    let r = grad_check(
        &e.params.set,
        |g| {
            let z = e.embed_slices(g, &parts.visible, Grad::Stop)?;
            let z = e.add_positional(g, z, &plan.visible_idx, Grad::Track)?;
            let h = e.encode_visible(g, z)?;
            projected(g, h, 2)
        },
        cfg,
    )?;
    push("visible_encoder", 1e-4, r);

    let e = view(only_trainable(&enc.params.set, |n| n.starts_with("decoupled.") || n == "mask_token"));
    let r = grad_check(
        &e.params.set,
        |g| {
            let z = e.embed_slices(g, &parts.visible, Grad::Stop)?;
            let z = e.add_positional(g, z, &plan.visible_idx, Grad::Stop)?;
            let h = e.encode_visible(g, z)?;
            let f = e.decode_masked(g, h, &plan.masked_idx)?;
            projected(g, f, 3)
        },
        cfg,
    )?;
    push("decoupled_encoder", 1e-4, r);

    // residuals spread over both branches, away from the kink
    let mut set = ParamSet::new();
    let pred_vals: Vec<f64> = (0..12).map(|i| [-3.5, -1.2, -0.4, 0.3, 1.1, 4.0][i % 6] * (1.0 + 0.1 * i as f64)).collect();
    let pred = set.insert("pred", Tensor::new(vec![3, 4], pred_vals)?);
    let r = grad_check(
        &set,
        |g| {
            let p = g.param(pred);
            let t = g.constant(Tensor::zeros(&[3, 4]));
            g.huber(p, t, 2.0)
        },
        cfg,
    )?;
    push("huber_loss", 1e-6, r);

    let mut set = ParamSet::new();
    let w = set.insert("w", Tensor::randn(&[5, 3], 1.0, &mut rng));
    let b = set.insert("b", Tensor::randn(&[3], 1.0, &mut rng));
    let x = Tensor::randn(&[4, 5], 1.0, &mut rng);
    let r = grad_check(
        &set,
        |g| {
            let xv = g.constant(x.clone());
            let (wv, bv) = (g.param(w), g.param(b));
            let y = g.linear(xv, wv, bv)?;
            projected(g, y, 4)
        },
        cfg,
    )?;
    push("linear_layer", 1e-6, r);

    let sc = SraConfig {
        d_k: 3,
        hidden_mult: 2,
        ..Default::default()
    };
    let p = 6;
    let mut set = ParamSet::new();
    let ids = SraIds::init_into(&mut set, p, &sc, seed);
    let x = Tensor::randn(&[7, p], 1.0, &mut rng);
    let labels = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0];
    let loss = |g: &mut Graph| -> Result<Var> {
        let xv = g.constant(x.clone());
        let f = sra_forward(g, &ids, sc.d_k, xv)?;
        g.bce_with_logits(f.logits, &labels)
    };
    let r = grad_check(&only_trainable(&set, |n| !n.starts_with("sra.head")), loss, cfg)?;
    push("sra_attention", 1e-5, r);
    let r = grad_check(&only_trainable(&set, |n| n.starts_with("sra.head")), loss, cfg)?;
    push("classification_head", 1e-5, r);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{synth_generate, SynthConfig};

    #[test]
    fn gradcheck_suite_passes() {
        let entries = gradcheck_suite(0).unwrap();
        assert_eq!(entries.len(), 7);
        for e in &entries {
            assert!(e.passed, "{}: {:?}", e.module, e.report);
        }
    }

    #[test]
    fn projection_modes() {
        let c = SynthConfig {
            subjects: 6,
            length_minutes: 10,
            channels: 3,
            ..Default::default()
        };
        let ds = synth_generate(&c, 0).unwrap().dataset;
        assert!(project_channels(&ds, 1, ChannelProjection::Strict).is_err());
        let m = project_channels(&ds, 1, ChannelProjection::Mean).unwrap();
        let r0 = &ds.records[0];
        assert_eq!(m.records[0].series[0], (r0.series[0] + r0.series[1] + r0.series[2]) / 3.0);
        assert_eq!(m.manifest.splits, ds.manifest.splits);
        let s = project_channels(&ds, 4, ChannelProjection::Select).unwrap();
        assert_eq!(&s.records[0].series[..4], &[r0.series[0], r0.series[1], r0.series[2], r0.series[2]]);
    }

    #[test]
    fn mismatched_sigma_is_a_config_error() {
        let a = EncoderConfig::default();
        let b = EncoderConfig {
            sigma: 6,
            ..Default::default()
        };
        let err = check_compatible(&a, &b).unwrap_err();
        assert_eq!(err.category(), "config");
        assert!(err.to_string().contains("sigma = 12") && err.to_string().contains("sigma = 6"));
    }

    #[test]
    fn report_schema() {
        let m = evaluate_scores(&[0.2, 0.8, 0.6], &[0.0, 1.0, 0.0], 0.5).unwrap();
        let r = Report::new("a->b", BTreeMap::new(), vec![1, 2]).with_metrics(&m);
        let v: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(v["schema_version"], 1);
        assert_eq!(v["run_tag"], "a->b");
        for name in METRIC_NAMES {
            assert!(v["metrics"][name]["point"].is_number(), "{name}");
        }
    }
}
