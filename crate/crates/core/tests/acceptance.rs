//! End-to-end acceptance criteria. Each one prints a PASS/FAIL line; the test
//! fails if any criterion fails. `PFM_ACCEPTANCE_ONLY=3,9` restricts the run
//! to the listed criteria (dependencies between criteria are recomputed).

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use pfm_core::encoders::{EncoderConfig, Encoders};
use pfm_core::eval::{cross_domain_run, gradcheck_suite, run_protocol, ChannelProjection, CrossDomainConfig, Report};
use pfm_core::ingest::{synth_generate, Dataset, Split, SynthConfig};
use pfm_core::metrics::{auroc, basic_metrics, confusion};
use pfm_core::numeric::{huber_slope, huber_value, Graph, ParamSet, Tensor};
use pfm_core::pretrain::{pretrain_observed, pretrain_run, Checkpoint, PretrainConfig};
use pfm_core::slicing::sample_mask;
use pfm_core::sra::{attention_profile, sra_forward, train_head, FeatureMode, SraConfig, SraIds, SraModel};

// Pinned tolerances and thresholds.
const GRAD_TOL: f64 = 1e-4;
const GRAD_TOL_EXACT: f64 = 1e-6;
const GRAD_RUNTIME: Duration = Duration::from_secs(60);
const HUBER_TOL: f64 = 1e-9;
const MOMENTUM_STEPS: u64 = 100;
const MASK_SEEDS: u64 = 1000;
const MASK_FREQ_TOL: f64 = 0.05;
const PRETRAIN_RATIO: f64 = 0.5;
const PRETRAIN_RUNTIME: Duration = Duration::from_secs(600);
const E2E_AUC: f64 = 0.90;
const E2E_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const E2E_MIN_PASSING: usize = 4;
const E2E_RUNTIME: Duration = Duration::from_secs(900);
const ABLATION_SLACK: f64 = 0.02;
const SINGLE_MODALITY_MARGIN: f64 = 0.1;
const BMI_SEEDS: u64 = 20;
const BMI_MIN_FRACTION: f64 = 0.9;
const SRA_DRAWS: usize = 10_000;
const AUROC_TOL: f64 = 1e-12;
const AUROC_FIXTURES: usize = 100;
const CROSS_DOMAIN_GAP: f64 = 0.05;

struct Line {
    pass: bool,
    detail: String,
}

fn line(pass: bool, detail: impl Into<String>) -> Line {
    Line {
        pass,
        detail: detail.into(),
    }
}

fn selected() -> Option<Vec<u32>> {
    std::env::var("PFM_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect())
}

/// Dual-signal cohort of 600 subjects split 400 train / 200 test.
fn dual_signal(seed: u64) -> Dataset {
    let cfg = SynthConfig {
        subjects: 600,
        length_minutes: 360,
        train_fraction: 2.0 / 3.0,
        val_fraction: 0.0,
        ..Default::default()
    };
    synth_generate(&cfg, seed).unwrap().dataset
}

struct E2eRun {
    seed: u64,
    dataset: Dataset,
    checkpoint: Checkpoint,
    fused_auc: f64,
}

struct E2e {
    runs: Vec<E2eRun>,
    elapsed: Duration,
}

fn test_auc(dataset: &Dataset, enc: &Encoders, model: &SraModel) -> f64 {
    let test = dataset.split(Split::Test);
    let labels: Vec<f64> = test.iter().map(|r| r.label.as_f64()).collect();
    auroc(&model.predict(enc, &test).unwrap(), &labels).unwrap()
}

fn e2e() -> &'static E2e {
    static CELL: OnceLock<E2e> = OnceLock::new();
    CELL.get_or_init(|| {
        let start = Instant::now();
        let runs = E2E_SEEDS
            .iter()
            .map(|&seed| {
                let dataset = dual_signal(seed);
                let pre = PretrainConfig {
                    seed,
                    ..Default::default()
                };
                let mut checkpoint = pretrain_run(&dataset, Some(Split::Train), &EncoderConfig::default(), &pre).unwrap();
                let cfg = SraConfig {
                    seed,
                    ..Default::default()
                };
                let head = train_head(&dataset, &mut checkpoint.encoder, &cfg).unwrap();
                let fused_auc = test_auc(&dataset, &checkpoint.encoder, &head.model);
                checkpoint.head = Some(head.model.to_blob().unwrap());
                E2eRun {
                    seed,
                    dataset,
                    checkpoint,
                    fused_auc,
                }
            })
            .collect();
        E2e {
            runs,
            elapsed: start.elapsed(),
        }
    })
}

fn c1_gradcheck() -> Line {
    let start = Instant::now();
    let entries = gradcheck_suite(11).unwrap();
    let elapsed = start.elapsed();
    let mut worst = BTreeMap::new();
    let mut pass = elapsed < GRAD_RUNTIME;
    for e in &entries {
        let tol = match e.module.as_str() {
            "huber_loss" | "linear_layer" => GRAD_TOL_EXACT,
            _ => GRAD_TOL,
        };
        pass &= e.report.max_rel_error <= tol;
        worst.insert(e.module.clone(), format!("{:.1e}", e.report.max_rel_error));
    }
    let expected = [
        "conv_embedding",
        "visible_encoder",
        "decoupled_encoder",
        "huber_loss",
        "linear_layer",
        "sra_attention",
        "classification_head",
    ];
    pass &= expected.iter().all(|m| worst.contains_key(*m));
    line(pass, format!("max rel errors {worst:?} in {elapsed:.1?}"))
}

fn c2_huber() -> Line {
    let d = 2.0;
    let mut pass = huber_value(0.0, d) == 0.0 && huber_value(1.0, d) == 0.5 && huber_value(3.0, d) == 4.0;
    pass &= huber_value(-3.0, d) == 4.0 && huber_value(-1.0, d) == 0.5;
    // both branches agree at |r| = δ
    let quad = 0.5 * d * d;
    let lin = d * (d - 0.5 * d);
    let eps = 1e-10;
    for sign in [1.0, -1.0] {
        let r = sign * d;
        pass &= (huber_value(r, d) - quad).abs() <= HUBER_TOL && (quad - lin).abs() <= HUBER_TOL;
        pass &= (huber_value(sign * (d - eps), d) - huber_value(sign * (d + eps), d)).abs() <= HUBER_TOL;
        let (inner, outer) = (huber_slope(sign * (d - eps), d), huber_slope(sign * (d + eps), d));
        pass &= (inner - outer).abs() <= HUBER_TOL && (outer - sign * d).abs() <= HUBER_TOL;
    }
    // the taped loss gives the same values and slopes
    let params = ParamSet::new();
    let mut g = Graph::new(&params);
    let p = g.constant(Tensor::new(vec![1, 3], vec![0.0, 0.0, 0.0]).unwrap());
    let t = g.constant(Tensor::new(vec![1, 3], vec![0.0, 1.0, 3.0]).unwrap());
    let l = g.huber(p, t, d).unwrap();
    let taped = g.value(l).item();
    pass &= (taped - 4.5 / 3.0).abs() <= HUBER_TOL;
    line(pass, format!("H(0)=0 H(1)=0.5 H(3)=4 at δ=2, taped mean {taped}"))
}

fn tiny_cohort(subjects: usize, length: usize, seed: u64) -> Dataset {
    let cfg = SynthConfig {
        subjects,
        length_minutes: length,
        train_fraction: 1.0,
        val_fraction: 0.0,
        ..Default::default()
    };
    synth_generate(&cfg, seed).unwrap().dataset
}

fn small_encoder() -> EncoderConfig {
    EncoderConfig {
        d_model: 16,
        visible_layers: 2,
        masked_layers: 1,
        heads: 2,
        ffn_width: 32,
        sigma: 12,
        ..Default::default()
    }
}

type Snapshot = (Vec<Vec<f64>>, Vec<Vec<f64>>);

fn twin_arrays(enc: &Encoders) -> Snapshot {
    let set = &enc.params.set;
    enc.params
        .twin_pairs()
        .map(|(t, v)| (set.get(t).data().to_vec(), set.get(v).data().to_vec()))
        .unzip()
}

fn momentum_log(momentum: f64) -> Vec<Snapshot> {
    let ds = tiny_cohort(20, 96, 31);
    let records: Vec<_> = ds.records.iter().collect();
    let cfg = PretrainConfig {
        epochs: 20,
        batch_size: 4,
        momentum,
        seed: 5,
        ..Default::default()
    };
    let mut log = Vec::new();
    pretrain_observed(&records, ds.stats(), &small_encoder(), &cfg, |step, enc| {
        assert_eq!(step as usize, log.len());
        log.push(twin_arrays(enc));
    })
    .unwrap();
    log
}

fn c3_momentum() -> Line {
    let m = PretrainConfig::default().momentum;
    let log = momentum_log(m);
    let steps = log.len() as u64 - 1;
    let mut replayed = log[0].0.clone();
    let mut exact = steps == MOMENTUM_STEPS;
    let mut theta_moved = false;
    for t in 1..log.len() {
        let (logged_xi, theta) = &log[t];
        theta_moved |= theta != &log[t - 1].1;
        for (xi, th) in replayed.iter_mut().zip(theta) {
            for (x, &o) in xi.iter_mut().zip(th) {
                *x = m * *x + (1.0 - m) * o;
            }
        }
        exact &= replayed
            .iter()
            .flatten()
            .zip(logged_xi.iter().flatten())
            .all(|(a, b)| a.to_bits() == b.to_bits());
    }
    let frozen_log = momentum_log(1.0);
    let frozen = frozen_log.iter().all(|(xi, _)| {
        xi.iter()
            .flatten()
            .zip(frozen_log[0].0.iter().flatten())
            .all(|(a, b)| a.to_bits() == b.to_bits())
    });
    line(
        exact && frozen && theta_moved,
        format!("{steps} steps, replay bit-exact {exact}, m=1 frozen {frozen}"),
    )
}

fn c4_masks() -> Line {
    let (s, ratio) = (10, 0.6);
    let mut counts = [0u64; 10];
    let mut exact = true;
    for seed in 0..MASK_SEEDS {
        let plan = sample_mask(s, ratio, seed).unwrap();
        exact &= plan.masked_idx.len() == 6 && plan.visible_idx.len() == 4;
        for &i in &plan.masked_idx {
            counts[i] += 1;
        }
    }
    let freqs: Vec<f64> = counts.iter().map(|&c| c as f64 / MASK_SEEDS as f64).collect();
    let within = freqs.iter().all(|f| (f - ratio).abs() <= MASK_FREQ_TOL);
    line(
        exact && within,
        format!(
            "6 of 10 masked every time: {exact}; per-index rate {:.3}..{:.3}",
            freqs.iter().cloned().fold(1.0, f64::min),
            freqs.iter().cloned().fold(0.0, f64::max)
        ),
    )
}

fn c5_pretrain_learns() -> Line {
    let ds = tiny_cohort(400, 360, 1);
    let enc = EncoderConfig::default();
    let shape_ok = enc.sigma == 12 && enc.d_model == 64 && enc.visible_layers == 4 && enc.masked_layers == 2;
    let cfg = PretrainConfig::default();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let start = Instant::now();
    let ck = pool.install(|| pretrain_run(&ds, None, &enc, &cfg)).unwrap();
    let elapsed = start.elapsed();
    let first = ck.history.first().unwrap().mean_loss;
    let last = ck.history.last().unwrap().mean_loss;
    let pass = shape_ok
        && ck.history.len() == 20
        && cfg.epochs == 20
        && last < PRETRAIN_RATIO * first
        && elapsed < PRETRAIN_RUNTIME;
    line(
        pass,
        format!(
            "loss {first:.4} -> {last:.4} (ratio {:.3}) over {} epochs, single thread {elapsed:.1?}",
            last / first,
            ck.history.len()
        ),
    )
}

fn c6_end_to_end() -> Line {
    let e = e2e();
    let aucs: Vec<String> = e.runs.iter().map(|r| format!("{}:{:.3}", r.seed, r.fused_auc)).collect();
    let passing = e.runs.iter().filter(|r| r.fused_auc >= E2E_AUC).count();
    let sizes_ok = e
        .runs
        .iter()
        .all(|r| r.dataset.split(Split::Train).len() == 400 && r.dataset.split(Split::Test).len() == 200);
    line(
        sizes_ok && passing >= E2E_MIN_PASSING && e.elapsed < E2E_RUNTIME,
        format!("test AUC by seed {aucs:?}, {passing}/5 >= {E2E_AUC}, {:.1?}", e.elapsed),
    )
}

fn c7_ablation() -> Line {
    let run = &e2e().runs[0];
    let aucs: Vec<f64> = [FeatureMode::TemporalOnly, FeatureMode::DemographicOnly]
        .par_iter()
        .map(|&mode| {
            let mut enc = run.checkpoint.encoder.clone();
            let cfg = SraConfig {
                seed: run.seed,
                mode,
                ..Default::default()
            };
            let head = train_head(&run.dataset, &mut enc, &cfg).unwrap();
            test_auc(&run.dataset, &enc, &head.model)
        })
        .collect();
    let (temporal, demographic, fused) = (aucs[0], aucs[1], run.fused_auc);
    let pass = fused >= temporal.max(demographic) - ABLATION_SLACK
        && temporal >= 0.5 + SINGLE_MODALITY_MARGIN
        && demographic >= 0.5 + SINGLE_MODALITY_MARGIN;
    line(
        pass,
        format!("fused {fused:.3}, temporal_only {temporal:.3}, demographic_only {demographic:.3}"),
    )
}

fn bmi_dominant(seed: u64) -> Dataset {
    let cfg = SynthConfig {
        subjects: 300,
        length_minutes: 360,
        motif_strength: 0.0,
        train_fraction: 2.0 / 3.0,
        val_fraction: 0.0,
        ..Default::default()
    };
    synth_generate(&cfg, 1000 + seed).unwrap().dataset
}

fn c8_interpretability() -> Line {
    let base = bmi_dominant(0);
    let shared = pretrain_run(&base, Some(Split::Train), &EncoderConfig::default(), &PretrainConfig::default()).unwrap();
    let tops: Vec<String> = (0..BMI_SEEDS)
        .into_par_iter()
        .map(|seed| {
            let ds = bmi_dominant(seed);
            let mut enc = shared.encoder.clone();
            let cfg = SraConfig {
                seed,
                ..Default::default()
            };
            let head = train_head(&ds, &mut enc, &cfg).unwrap();
            let profile = attention_profile(&enc, &head.model, &ds.split(Split::Test)).unwrap();
            profile.top_demographic().to_string()
        })
        .collect();
    let hits = tops.iter().filter(|t| *t == "bmi").count();
    let fraction = hits as f64 / BMI_SEEDS as f64;
    line(
        fraction >= BMI_MIN_FRACTION,
        format!("bmi ranked first among demographics in {hits}/{BMI_SEEDS} seeds"),
    )
}

fn c9_sra_bound() -> Line {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut in_range = true;
    let mut exact = true;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for draw in 0..SRA_DRAWS {
        let p = rng.random_range(1..=12);
        let cfg = SraConfig {
            d_k: rng.random_range(1..=8),
            hidden_mult: rng.random_range(1..=4),
            ..Default::default()
        };
        let mut params = ParamSet::new();
        let ids = SraIds::init_into(&mut params, p, &cfg, draw as u64);
        let scale = 10f64.powf(rng.random_range(-1.0..1.5));
        let all: Vec<_> = params.ids().collect();
        for id in all {
            let shape = params.get(id).shape().to_vec();
            let t = Tensor::randn(&shape, scale, &mut rng);
            params.set(id, t).unwrap();
        }
        let x_scale = 10f64.powf(rng.random_range(-2.0..2.0));
        let rows = rng.random_range(1..=3);
        let x = Tensor::randn(&[rows, p], x_scale, &mut rng);
        let mut g = Graph::new(&params);
        let xv = g.constant(x.clone());
        let f = sra_forward(&mut g, &ids, cfg.d_k, xv).unwrap();
        let a = g.value(f.attention.unwrap()).clone();
        let o = g.value(f.reinforced);
        for ((&ai, &xi), &oi) in a.data().iter().zip(x.data()).zip(o.data()) {
            in_range &= (0.0..=1.0).contains(&ai);
            exact &= oi.to_bits() == (ai * xi).to_bits();
            lo = lo.min(ai);
            hi = hi.max(ai);
        }
    }
    line(
        in_range && exact,
        format!("{SRA_DRAWS} draws, a within [{lo:.3e}, {hi:.6}], o = a*x bit-exact {exact}"),
    )
}

fn pairwise_auroc(scores: &[f64], labels: &[f64]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        if li != 1.0 {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj != 0.0 {
                continue;
            }
            pairs += 1.0;
            num += if scores[i] > scores[j] {
                1.0
            } else if scores[i] == scores[j] {
                0.5
            } else {
                0.0
            };
        }
    }
    num / pairs
}

fn c10_metrics() -> Line {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst: f64 = 0.0;
    for _ in 0..AUROC_FIXTURES {
        let n = rng.random_range(2..80);
        let levels = rng.random_range(2..12) as f64;
        let mut labels: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 }).collect();
        labels[0] = 1.0;
        labels[1] = 0.0;
        let scores: Vec<f64> = (0..n).map(|_| (rng.random::<f64>() * levels).floor() / levels).collect();
        let diff = (auroc(&scores, &labels).unwrap() - pairwise_auroc(&scores, &labels)).abs();
        worst = worst.max(diff);
    }
    let scores = [0.9, 0.8, 0.7, 0.6, 0.4, 0.3, 0.2, 0.1];
    let labels = [1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0];
    let c = confusion(&scores, &labels, 0.5).unwrap();
    let b = basic_metrics(&c).unwrap();
    let tallies = (c.tp, c.tn, c.fp, c.fn_) == (3, 2, 1, 2);
    let hand = b.accuracy == 5.0 / 8.0
        && b.recall == 3.0 / 5.0
        && b.specificity == 2.0 / 3.0
        && b.precision == 3.0 / 4.0
        && b.f1 == 6.0 / 9.0;
    line(
        worst <= AUROC_TOL && tallies && hand,
        format!("max |auroc - pairwise| {worst:.1e} over {AUROC_FIXTURES} tied fixtures; 8-sample tallies exact {}", tallies && hand),
    )
}

fn c11_cross_domain() -> Line {
    let target = &e2e().runs[0];
    let seeds = vec![1, 2, 3];
    let sra = SraConfig::default();
    let source = {
        let cfg = SynthConfig {
            subjects: 600,
            length_minutes: 420,
            class_balance: 0.4,
            train_fraction: 2.0 / 3.0,
            val_fraction: 0.0,
            ..Default::default()
        };
        synth_generate(&cfg, 77).unwrap().dataset
    };
    let cd = CrossDomainConfig {
        encoder: EncoderConfig::default(),
        pretrain: PretrainConfig {
            seed: target.seed,
            ..Default::default()
        },
        sra: sra.clone(),
        projection: ChannelProjection::Strict,
        seeds: seeds.clone(),
    };
    let a_to_b = cross_domain_run(&source, &target.dataset, &cd).unwrap();
    let b_to_b = run_protocol(&target.dataset, &target.checkpoint.encoder, &sra, &seeds).unwrap();
    let (ab, bb) = (a_to_b.protocol.summary.auroc.point, b_to_b.summary.auroc.point);
    line(
        (ab - bb).abs() <= CROSS_DOMAIN_GAP,
        format!("{} AUC {ab:.3} vs in-domain {bb:.3} (gap {:.3})", a_to_b.report.run_tag, (ab - bb).abs()),
    )
}

fn small_pipeline_report(threads: usize) -> String {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    pool.install(|| {
        let cfg = SynthConfig {
            subjects: 60,
            length_minutes: 96,
            ..Default::default()
        };
        let ds = synth_generate(&cfg, 21).unwrap().dataset;
        let pre = PretrainConfig {
            epochs: 3,
            seed: 4,
            ..Default::default()
        };
        let ck = pretrain_run(&ds, Some(Split::Train), &small_encoder(), &pre).unwrap();
        let sra = SraConfig {
            epochs: 30,
            ..Default::default()
        };
        let res = run_protocol(&ds, &ck.encoder, &sra, &[3, 4]).unwrap();
        let mut echo = BTreeMap::new();
        echo.insert("history".to_string(), format!("{:?}", ck.history));
        Report::new("determinism", echo, vec![3, 4])
            .with_metrics(&res.summary)
            .to_json()
            .unwrap()
    })
}

fn c12_determinism() -> Line {
    let a = small_pipeline_report(4);
    let b = small_pipeline_report(4);
    let c = small_pipeline_report(1);
    let reports_equal = a == b && a == c;

    let run = &e2e().runs[0];
    let model = SraModel::from_blob(run.checkpoint.head.as_ref().unwrap()).unwrap();
    let test = run.dataset.split(Split::Test);
    let before = model.predict(&run.checkpoint.encoder, &test).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    run.checkpoint.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let loaded_model = SraModel::from_blob(loaded.head.as_ref().unwrap()).unwrap();
    let after = loaded_model.predict(&loaded.encoder, &test).unwrap();
    let inference_equal = before.len() == after.len() && before.iter().zip(&after).all(|(x, y)| x.to_bits() == y.to_bits());
    let state_equal = loaded == run.checkpoint;
    line(
        reports_equal && inference_equal && state_equal,
        format!(
            "reports identical across reruns and thread counts {reports_equal}; reloaded checkpoint equal {state_equal}, inference bit-identical {inference_equal}"
        ),
    )
}

#[test]
fn acceptance_criteria() {
    let criteria: [(u32, &str, fn() -> Line); 12] = [
        (1, "gradient integrity", c1_gradcheck),
        (2, "huber exactness", c2_huber),
        (3, "momentum contract", c3_momentum),
        (4, "mask statistics", c4_masks),
        (5, "pretraining learns", c5_pretrain_learns),
        (6, "end-to-end classification", c6_end_to_end),
        (7, "ablation ordering", c7_ablation),
        (8, "interpretability", c8_interpretability),
        (9, "sra structural bound", c9_sra_bound),
        (10, "metric oracle equivalence", c10_metrics),
        (11, "cross-domain workflow", c11_cross_domain),
        (12, "determinism and persistence", c12_determinism),
    ];
    let only = selected();
    let mut failed = Vec::new();
    for (id, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            line(false, format!("panicked: {msg}"))
        });
        let verdict = if result.pass { "PASS" } else { "FAIL" };
        println!("[{verdict}] {id:>2} {name}: {} ({:.1?})", result.detail, start.elapsed());
        if !result.pass {
            failed.push(id);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
