//! Feature fusion, self-reinforcing attention and the linear classification head.
//!
//! Key and query networks end in a sigmoid, so every per-feature score
//! `a_i = (q_i · k_i) / d_k` lies in [0, 1].

use std::str::FromStr;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::KvConfig;
use crate::encoders::{Encoders, Grad};
use crate::error::{Error, Result};
use crate::ingest::{Dataset, Label, MeanStd, NormStats, Split, SubjectRecord, DEMOGRAPHIC_NAMES};
use crate::metrics::auroc;
use crate::numeric::{Adam, AdamConfig, Axis, Graph, ParamId, ParamSet, Tensor, Var};
use crate::pretrain::HeadBlob;
use crate::slicing::derive_seed;

/// Which feature blocks reach the attention layer; excluded blocks are zeroed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    #[default]
    Fused,
    TemporalOnly,
    DemographicOnly,
}

impl FeatureMode {
    pub const ALL: [FeatureMode; 3] = [FeatureMode::TemporalOnly, FeatureMode::DemographicOnly, FeatureMode::Fused];

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureMode::Fused => "fused",
            FeatureMode::TemporalOnly => "temporal_only",
            FeatureMode::DemographicOnly => "demographic_only",
        }
    }

    fn keeps_temporal(self) -> bool {
        self != FeatureMode::DemographicOnly
    }

    fn keeps_demographic(self) -> bool {
        self != FeatureMode::TemporalOnly
    }
}

impl FromStr for FeatureMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fused" => Ok(Self::Fused),
            "temporal_only" => Ok(Self::TemporalOnly),
            "demographic_only" => Ok(Self::DemographicOnly),
            _ => Err(Error::InvalidConfig(format!(
                "unknown feature mode `{s}` (expected fused, temporal_only or demographic_only)"
            ))),
        }
    }
}

/// `t0 … t{n-1}` followed by the demographic names.
pub fn feature_names(temporal_dim: usize) -> Vec<String> {
    (0..temporal_dim)
        .map(|i| format!("t{i}"))
        .chain(DEMOGRAPHIC_NAMES.iter().map(|s| s.to_string()))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedFeatures {
    pub x: Vec<f64>,
    pub names: Vec<String>,
}

impl FusedFeatures {
    pub fn temporal_dim(&self) -> usize {
        self.x.len() - DEMOGRAPHIC_NAMES.len()
    }

    /// `(temporal, demographic)` halves.
    pub fn split(&self) -> (&[f64], &[f64]) {
        self.x.split_at(self.temporal_dim())
    }
}

/// Concatenates standardized temporal features with normalized demographics.
pub fn fuse(temporal: &[f64], demographics: &[f64]) -> Result<FusedFeatures> {
    if demographics.len() != DEMOGRAPHIC_NAMES.len() {
        return Err(Error::shape("fuse", &[demographics.len()], &[DEMOGRAPHIC_NAMES.len()]));
    }
    if temporal.is_empty() {
        return Err(Error::InvalidArgument("fuse needs at least one temporal feature".into()));
    }
    let mut x = temporal.to_vec();
    x.extend_from_slice(demographics);
    Ok(FusedFeatures {
        x,
        names: feature_names(temporal.len()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SraConfig {
    /// Per-feature key/query width.
    pub d_k: usize,
    /// Hidden width of the key and query networks, as a multiple of p.
    pub hidden_mult: usize,
    /// Replace attention by a ≡ 1, leaving plain logistic regression.
    pub identity_attention: bool,
    pub epochs: usize,
    /// 0 trains full-batch.
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// L2 penalty `λ/2·Σw²` on the weight matrices of the attention networks and head.
    pub weight_decay: f64,
    pub seed: u64,
    /// Fine-tune the visible encoder, convolution and positions with the head.
    pub unfreeze: bool,
    pub mode: FeatureMode,
    /// Epochs between validation AUC evaluations.
    pub eval_every: usize,
    pub threshold: f64,
}

impl Default for SraConfig {
    fn default() -> Self {
        Self {
            d_k: 8,
            hidden_mult: 4,
            identity_attention: false,
            epochs: 150,
            batch_size: 0,
            adam: AdamConfig {
                lr: 1e-2,
                ..AdamConfig::default()
            },
            weight_decay: 0.03,
            seed: 0,
            unfreeze: false,
            mode: FeatureMode::Fused,
            eval_every: 10,
            threshold: 0.5,
        }
    }
}

impl SraConfig {
    pub const KEYS: [&'static str; 11] = [
        "d_k",
        "weight_decay",
        "hidden_mult",
        "identity_attention",
        "head_epochs",
        "head_batch_size",
        "head_lr",
        "head_seed",
        "unfreeze",
        "mode",
        "threshold",
    ];

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = Self::default();
        let c = Self {
            d_k: kv.get("d_k", d.d_k)?,
            hidden_mult: kv.get("hidden_mult", d.hidden_mult)?,
            identity_attention: kv.get("identity_attention", d.identity_attention)?,
            epochs: kv.get("head_epochs", d.epochs)?,
            batch_size: kv.get("head_batch_size", d.batch_size)?,
            adam: AdamConfig {
                lr: kv.get("head_lr", d.adam.lr)?,
                ..d.adam
            },
            weight_decay: kv.get("weight_decay", d.weight_decay)?,
            seed: kv.get("head_seed", d.seed)?,
            unfreeze: kv.get("unfreeze", d.unfreeze)?,
            mode: kv.get("mode", d.mode)?,
            eval_every: d.eval_every,
            threshold: kv.get("threshold", d.threshold)?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_k == 0 || self.hidden_mult == 0 {
            return Err(Error::InvalidConfig("d_k and hidden_mult must be positive".into()));
        }
        if !(self.adam.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig("head_lr and weight_decay must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::InvalidConfig("threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Mlp {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Handles of the attention networks and head inside some [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SraIds {
    key: Option<Mlp>,
    query: Option<Mlp>,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

const PREFIX: &str = "sra";

fn glorot(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(&[fan_in, fan_out], (2.0 / (fan_in + fan_out) as f64).sqrt(), rng)
}

impl SraIds {
    /// Adds freshly initialized SRA arrays to `set`.
    pub fn init_into(set: &mut ParamSet, p: usize, config: &SraConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hidden = config.hidden_mult * p;
        let out = p * config.d_k;
        let mut mlp = |set: &mut ParamSet, name: &str| Mlp {
            w1: set.insert(format!("{PREFIX}.{name}.w1"), glorot(p, hidden, &mut rng)),
            b1: set.insert(format!("{PREFIX}.{name}.b1"), Tensor::zeros(&[hidden])),
            w2: set.insert(format!("{PREFIX}.{name}.w2"), glorot(hidden, out, &mut rng)),
            b2: set.insert(format!("{PREFIX}.{name}.b2"), Tensor::zeros(&[out])),
        };
        let (key, query) = if config.identity_attention {
            (None, None)
        } else {
            (Some(mlp(set, "key")), Some(mlp(set, "query")))
        };
        let head_w = set.insert(format!("{PREFIX}.head.w"), glorot(p, 1, &mut rng));
        let head_b = set.insert(format!("{PREFIX}.head.b"), Tensor::zeros(&[1]));
        Self {
            key,
            query,
            head_w,
            head_b,
        }
    }

    /// Finds SRA arrays by name, checking shapes against `p` and `config`.
    pub fn lookup(set: &ParamSet, p: usize, config: &SraConfig) -> Result<Self> {
        let hidden = config.hidden_mult * p;
        let out = p * config.d_k;
        let find = |name: String, shape: &[usize]| -> Result<ParamId> {
            let id = set
                .id(&name)
                .ok_or_else(|| Error::CheckpointCorrupt(format!("missing array `{name}`")))?;
            if set.get(id).shape() != shape {
                return Err(Error::CheckpointShape {
                    name,
                    expected: shape.to_vec(),
                    found: set.get(id).shape().to_vec(),
                });
            }
            Ok(id)
        };
        let mlp = |name: &str| -> Result<Mlp> {
            Ok(Mlp {
                w1: find(format!("{PREFIX}.{name}.w1"), &[p, hidden])?,
                b1: find(format!("{PREFIX}.{name}.b1"), &[hidden])?,
                w2: find(format!("{PREFIX}.{name}.w2"), &[hidden, out])?,
                b2: find(format!("{PREFIX}.{name}.b2"), &[out])?,
            })
        };
        let (key, query) = if config.identity_attention {
            (None, None)
        } else {
            (Some(mlp("key")?), Some(mlp("query")?))
        };
        Ok(Self {
            key,
            query,
            head_w: find(format!("{PREFIX}.head.w"), &[p, 1])?,
            head_b: find(format!("{PREFIX}.head.b"), &[1])?,
        })
    }
}

pub struct SraForward {
    /// `N × p` attention; `None` in identity mode.
    pub attention: Option<Var>,
    /// Reinforced features `a ⊙ x`.
    pub reinforced: Var,
    /// `N × 1` pre-sigmoid scores.
    pub logits: Var,
}

fn bounded_net(g: &mut Graph, x: Var, m: &Mlp) -> Result<Var> {
    let (w1, b1, w2, b2) = (g.param(m.w1), g.param(m.b1), g.param(m.w2), g.param(m.b2));
    let h = g.linear(x, w1, b1)?;
    let h = g.relu(h)?;
    let o = g.linear(h, w2, b2)?;
    g.sigmoid(o)
}

impl SraIds {
    fn weights(&self) -> Vec<ParamId> {
        let mut v: Vec<ParamId> = [self.key, self.query].iter().flatten().flat_map(|m| [m.w1, m.w2]).collect();
        v.push(self.head_w);
        v
    }
}

/// BCE on `logits` plus the configured L2 penalty.
fn head_loss(g: &mut Graph, ids: &SraIds, logits: Var, labels: &[f64], weight_decay: f64) -> Result<Var> {
    let mut loss = g.bce_with_logits(logits, labels)?;
    if weight_decay > 0.0 {
        for id in ids.weights() {
            let w = g.param(id);
            let n = g.value(w).len() as f64;
            let sq = g.mul(w, w)?;
            let m = g.mean_all(sq)?;
            let pen = g.scale(m, 0.5 * weight_decay * n)?;
            loss = g.add(loss, pen)?;
        }
    }
    Ok(loss)
}

/// Attention, gating and head over a batch `x` of shape `N × p`.
pub fn sra_forward(g: &mut Graph, ids: &SraIds, d_k: usize, x: Var) -> Result<SraForward> {
    let (n, p) = {
        let s = g.value(x).shape();
        if s.len() != 2 {
            return Err(Error::shape("sra_forward", s, &[0, 0]));
        }
        (s[0], s[1])
    };
    let (attention, reinforced) = match (&ids.key, &ids.query) {
        (Some(km), Some(qm)) => {
            let k = bounded_net(g, x, km)?;
            let q = bounded_net(g, x, qm)?;
            let k = g.reshape(k, &[n * p, d_k])?;
            let q = g.reshape(q, &[n * p, d_k])?;
            let qk = g.mul(q, k)?;
            let dot = g.sum_axis(qk, Axis::Cols)?;
            let dot = g.reshape(dot, &[n, p])?;
            let a = g.scale(dot, 1.0 / d_k as f64)?;
            (Some(a), g.mul(a, x)?)
        }
        _ => (None, x),
    };
    let (w, b) = (g.param(ids.head_w), g.param(ids.head_b));
    let logits = g.linear(reinforced, w, b)?;
    Ok(SraForward {
        attention,
        reinforced,
        logits,
    })
}

/// Trained attention networks and head with everything needed for inference.
#[derive(Debug, Clone, PartialEq)]
pub struct SraModel {
    pub config: SraConfig,
    pub names: Vec<String>,
    /// Standardization of the pooled temporal features, fitted on the training split.
    pub temporal_scaler: Vec<MeanStd>,
    /// Series and demographic normalization of the head-training dataset.
    pub stats: NormStats,
    pub params: ParamSet,
    pub ids: SraIds,
}

#[derive(Serialize, Deserialize)]
struct SraMeta {
    kind: String,
    config: SraConfig,
    names: Vec<String>,
    temporal_scaler: Vec<MeanStd>,
    stats: NormStats,
}

impl SraModel {
    pub fn p(&self) -> usize {
        self.names.len()
    }

    pub fn temporal_dim(&self) -> usize {
        self.temporal_scaler.len()
    }

    pub fn to_blob(&self) -> Result<HeadBlob> {
        let meta = SraMeta {
            kind: "sra".into(),
            config: self.config.clone(),
            names: self.names.clone(),
            temporal_scaler: self.temporal_scaler.clone(),
            stats: self.stats.clone(),
        };
        Ok(HeadBlob {
            meta: serde_json::to_value(meta)?,
            params: self.params.clone(),
        })
    }

    pub fn from_blob(blob: &HeadBlob) -> Result<Self> {
        let meta: SraMeta = serde_json::from_value(blob.meta.clone())
            .map_err(|e| Error::CheckpointCorrupt(format!("head metadata: {e}")))?;
        if meta.kind != "sra" {
            return Err(Error::CheckpointCorrupt(format!("unknown head kind `{}`", meta.kind)));
        }
        if meta.names.len() != meta.temporal_scaler.len() + DEMOGRAPHIC_NAMES.len() {
            return Err(Error::CheckpointCorrupt("feature names disagree with the temporal scaler".into()));
        }
        let ids = SraIds::lookup(&blob.params, meta.names.len(), &meta.config)?;
        Ok(Self {
            config: meta.config,
            names: meta.names,
            temporal_scaler: meta.temporal_scaler,
            stats: meta.stats,
            params: blob.params.clone(),
            ids,
        })
    }

    /// Fused, mode-masked feature rows (`N × p`) for `records`.
    pub fn features(&self, enc: &Encoders, records: &[&SubjectRecord]) -> Result<Tensor> {
        let temporal = extract_temporal(enc, records, &self.stats)?;
        feature_matrix(&temporal, records, &self.temporal_scaler, &self.stats, self.config.mode)
    }

    /// Probabilities of class "good".
    pub fn predict(&self, enc: &Encoders, records: &[&SubjectRecord]) -> Result<Vec<f64>> {
        let x = self.features(enc, records)?;
        self.predict_features(&x)
    }

    pub fn predict_features(&self, x: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.params);
        let xv = g.constant(x.clone());
        let f = sra_forward(&mut g, &self.ids, self.config.d_k, xv)?;
        let prob = g.sigmoid(f.logits)?;
        Ok(g.value(prob).data().to_vec())
    }

    /// `(a, o)` for each row of `x`; identity mode gives `a ≡ 1`.
    pub fn attention(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new(&self.params);
        let xv = g.constant(x.clone());
        let f = sra_forward(&mut g, &self.ids, self.config.d_k, xv)?;
        let a = match f.attention {
            Some(a) => g.value(a).clone(),
            None => Tensor::full(x.shape(), 1.0),
        };
        Ok((a, g.value(f.reinforced).clone()))
    }
}

/// Single-sample attention and gated output.
pub fn sra_attention(x: &[f64], model: &SraModel) -> Result<(Vec<f64>, Vec<f64>)> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "sra_attention input".into() });
    }
    let (a, o) = model.attention(&Tensor::new(vec![1, x.len()], x.to_vec())?)?;
    Ok((a.into_data(), o.into_data()))
}

/// `sigmoid(w·o + b)`.
pub fn classify(o: &[f64], w: &[f64], b: f64) -> Result<f64> {
    if o.len() != w.len() {
        return Err(Error::shape("classify", &[o.len()], &[w.len()]));
    }
    let z: f64 = o.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + b;
    Ok(crate::numeric::sigmoid_scalar(z))
}

/// Pooled visible-encoder features per record, in record order.
pub fn extract_temporal(enc: &Encoders, records: &[&SubjectRecord], stats: &NormStats) -> Result<Vec<Vec<f64>>> {
    if records.iter().any(|r| r.channels != enc.config.channels) {
        return Err(Error::InvalidConfig(format!(
            "encoder expects {} channels; project the dataset first",
            enc.config.channels
        )));
    }
    records
        .par_iter()
        .map(|r| enc.extract_features(&stats.standardize_series(r)))
        .collect()
}

pub fn fit_temporal_scaler(temporal: &[Vec<f64>]) -> Vec<MeanStd> {
    let dim = temporal.first().map_or(0, Vec::len);
    (0..dim).map(|j| MeanStd::fit(temporal.iter().map(|t| t[j]))).collect()
}

pub fn feature_matrix(
    temporal: &[Vec<f64>],
    records: &[&SubjectRecord],
    scaler: &[MeanStd],
    stats: &NormStats,
    mode: FeatureMode,
) -> Result<Tensor> {
    if temporal.len() != records.len() || records.is_empty() {
        return Err(Error::InvalidArgument("feature_matrix needs one temporal row per record".into()));
    }
    let p = scaler.len() + DEMOGRAPHIC_NAMES.len();
    let mut data = Vec::with_capacity(records.len() * p);
    for (t, r) in temporal.iter().zip(records) {
        if t.len() != scaler.len() {
            return Err(Error::shape("feature_matrix", &[t.len()], &[scaler.len()]));
        }
        let ts: Vec<f64> = t
            .iter()
            .zip(scaler)
            .map(|(&v, s)| if mode.keeps_temporal() { s.apply(v) } else { 0.0 })
            .collect();
        let d = stats.normalize(&r.demographics);
        let d = if mode.keeps_demographic() { d } else { [0.0; 3] };
        data.extend(fuse(&ts, &d)?.x);
    }
    Tensor::new(vec![records.len(), p], data)
}

fn labels_of(records: &[&SubjectRecord]) -> Vec<f64> {
    records.iter().map(|r| r.label.as_f64()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auroc: Option<f64>,
}

pub struct TrainedHead {
    pub model: SraModel,
    pub history: Vec<HeadEpoch>,
}

fn check_two_classes(records: &[&SubjectRecord]) -> Result<()> {
    let good = records.iter().filter(|r| r.label == Label::Good).count();
    if good == 0 || good == records.len() {
        return Err(Error::InvalidArgument(format!(
            "training split has a single class ({} subjects, {} good); both classes are required",
            records.len(),
            good
        )));
    }
    Ok(())
}

fn batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    if batch_size == 0 || batch_size >= n {
        return vec![(0..n).collect()];
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch as u64, 0x4EAD)));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

fn gather(x: &Tensor, rows: &[usize]) -> Tensor {
    let p = x.cols();
    let mut data = Vec::with_capacity(rows.len() * p);
    for &r in rows {
        data.extend_from_slice(x.row(r));
    }
    Tensor::new(vec![rows.len(), p], data).expect("non-empty gather")
}

/// Trains attention networks and head on the training split of `dataset`.
/// With `config.unfreeze` the encoder's online arrays are fine-tuned in place;
/// otherwise `enc` is only read.
pub fn train_head(dataset: &Dataset, enc: &mut Encoders, config: &SraConfig) -> Result<TrainedHead> {
    config.validate()?;
    let train = dataset.split(Split::Train);
    if train.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    check_two_classes(&train)?;
    let val = dataset.split(Split::Val);
    let val_ok = check_two_classes(&val).is_ok() && !val.is_empty();
    let stats = dataset.stats().clone();

    let temporal = extract_temporal(enc, &train, &stats)?;
    let scaler = fit_temporal_scaler(&temporal);
    let names = feature_names(scaler.len());
    let p = names.len();
    let y = labels_of(&train);

    let mut params = ParamSet::new();
    let ids = SraIds::init_into(&mut params, p, config, config.seed);
    let mut model = SraModel {
        config: config.clone(),
        names,
        temporal_scaler: scaler,
        stats,
        params,
        ids,
    };
    let mut history = Vec::with_capacity(config.epochs);
    let val_x = if val_ok && !config.unfreeze {
        let t = extract_temporal(enc, &val, &model.stats)?;
        Some(feature_matrix(&t, &val, &model.temporal_scaler, &model.stats, config.mode)?)
    } else {
        None
    };
    let val_y = labels_of(&val);

    if config.unfreeze {
        finetune(&mut model, enc, &train, &y, &val, val_ok, &mut history)?;
    } else {
        let x = feature_matrix(&temporal, &train, &model.temporal_scaler, &model.stats, config.mode)?;
        let mut adam = Adam::new(config.adam.clone(), &model.params);
        for epoch in 0..config.epochs {
            let (mut sum, mut count) = (0.0, 0usize);
            for rows in batches(train.len(), config.batch_size, config.seed, epoch) {
                let xb = gather(&x, &rows);
                let yb: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
                let mut g = Graph::new(&model.params);
                let xv = g.constant(xb);
                let f = sra_forward(&mut g, &model.ids, config.d_k, xv)?;
                let loss = head_loss(&mut g, &model.ids, f.logits, &yb, config.weight_decay)?;
                sum += g.value(loss).item() * rows.len() as f64;
                count += rows.len();
                let grads = g.backward(loss)?;
                adam.step(&mut model.params, &grads)?;
            }
            let val_auroc = match &val_x {
                Some(vx) if (epoch + 1) % config.eval_every.max(1) == 0 || epoch + 1 == config.epochs => {
                    Some(auroc(&model.predict_features(vx)?, &val_y)?)
                }
                _ => None,
            };
            history.push(HeadEpoch {
                epoch,
                train_loss: sum / count as f64,
                val_auroc,
            });
        }
    }
    if let Some(last) = history.last() {
        info!("head training done: train loss {:.4}, val auroc {:?}", last.train_loss, last.val_auroc);
    }
    Ok(TrainedHead { model, history })
}

/// Joint training of the head and the online encoder arrays. The SRA arrays
/// are appended to a copy of the encoder set so one graph spans both.
fn finetune(
    model: &mut SraModel,
    enc: &mut Encoders,
    train: &[&SubjectRecord],
    y: &[f64],
    val: &[&SubjectRecord],
    val_ok: bool,
    history: &mut Vec<HeadEpoch>,
) -> Result<()> {
    let config = model.config.clone();
    let mut joint = enc.params.set.clone();
    let n_enc = joint.len();
    for (_, name, t) in model.params.iter() {
        joint.insert(name.to_string(), t.clone());
    }
    let ids = SraIds::lookup(&joint, model.p(), &config)?;
    let idle = std::iter::once(enc.params.mask_token)
        .chain(enc.params.decoupled.iter().flat_map(|l| l.as_array()))
        .chain(enc.params.target_ids());
    for id in idle.collect::<Vec<_>>() {
        joint.set_trainable(id, false);
    }
    let series: Vec<Vec<f64>> = train.iter().map(|r| model.stats.standardize_series(r)).collect();
    let demo: Vec<[f64; 3]> = train
        .iter()
        .map(|r| {
            if config.mode.keeps_demographic() {
                model.stats.normalize(&r.demographics)
            } else {
                [0.0; 3]
            }
        })
        .collect();
    let dt = model.temporal_dim();
    let shift = Tensor::new(vec![dt], model.temporal_scaler.iter().map(|s| -s.mean).collect())?;
    let inv: Vec<f64> = model
        .temporal_scaler
        .iter()
        .map(|s| {
            if !config.mode.keeps_temporal() {
                0.0
            } else if s.std > 1e-12 {
                1.0 / s.std
            } else {
                1.0
            }
        })
        .collect();
    let inv = Tensor::new(vec![dt], inv)?;
    let mut adam = Adam::new(config.adam.clone(), &joint);
    let view = Encoders {
        config: enc.config.clone(),
        params: enc.params.clone(),
    };
    for epoch in 0..config.epochs {
        let (mut sum, mut count) = (0.0, 0usize);
        let bs = if config.batch_size == 0 { 32 } else { config.batch_size };
        for rows in batches(train.len(), bs, config.seed, epoch) {
            let mut g = Graph::new(&joint);
            let mut pooled = Vec::with_capacity(rows.len());
            for &i in &rows {
                pooled.push(view.pooled(&mut g, &series[i], Grad::Track)?);
            }
            let h = if pooled.len() == 1 { pooled[0] } else { g.concat(&pooled, Axis::Rows)? };
            let sh = g.constant(shift.clone());
            let h = g.add_row(h, sh)?;
            let iv = g.constant(inv.clone());
            let h = g.mul_row(h, iv)?;
            let d: Vec<f64> = rows.iter().flat_map(|&i| demo[i]).collect();
            let d = g.constant(Tensor::new(vec![rows.len(), 3], d)?);
            let x = g.concat(&[h, d], Axis::Cols)?;
            let f = sra_forward(&mut g, &ids, config.d_k, x)?;
            let yb: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
            let loss = head_loss(&mut g, &ids, f.logits, &yb, config.weight_decay)?;
            sum += g.value(loss).item() * rows.len() as f64;
            count += rows.len();
            let grads = g.backward(loss)?;
            adam.step(&mut joint, &grads)?;
        }
        history.push(HeadEpoch {
            epoch,
            train_loss: sum / count as f64,
            val_auroc: None,
        });
        debug!("finetune epoch {epoch}: loss {:.5}", sum / count as f64);
    }
    for id in enc.params.set.ids().collect::<Vec<_>>() {
        enc.params.set.set(id, joint.get(id).clone())?;
    }
    for (id, name, _) in model.params.clone().iter() {
        let src = joint.id(name).expect("sra array present in joint set");
        debug_assert!(src.index() >= n_enc);
        model.params.set(id, joint.get(src).clone())?;
    }
    if val_ok {
        let scores = model.predict(enc, val)?;
        if let Some(last) = history.last_mut() {
            last.val_auroc = Some(auroc(&scores, &labels_of(val))?);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeatureAttention {
    pub feature: String,
    pub mean_attention: f64,
    /// 1 is the highest mean attention.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttentionProfile {
    pub subject_ids: Vec<String>,
    /// `N × p`.
    pub matrix: Tensor,
    pub features: Vec<FeatureAttention>,
    /// Sum of the temporal features' mean attention.
    pub temporal_sum: f64,
    /// Raw BMI and BMI attention per subject.
    pub bmi_scatter: Vec<(f64, f64)>,
}

impl AttentionProfile {
    pub fn mean_of(&self, feature: &str) -> Option<f64> {
        self.features.iter().find(|f| f.feature == feature).map(|f| f.mean_attention)
    }

    /// Highest-ranked demographic feature.
    pub fn top_demographic(&self) -> &str {
        self.features
            .iter()
            .filter(|f| DEMOGRAPHIC_NAMES.contains(&f.feature.as_str()))
            .min_by_key(|f| f.rank)
            .map(|f| f.feature.as_str())
            .expect("demographic features present")
    }

    pub fn write_csvs(&self, dir: &std::path::Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, header: Vec<String>, rows: Vec<Vec<String>>| -> Result<()> {
            let path = dir.join(name);
            let io = |e: csv::Error| Error::io(&path, e.into());
            let mut w = csv::Writer::from_path(&path).map_err(io)?;
            w.write_record(&header).map_err(io)?;
            for r in rows {
                w.write_record(&r).map_err(io)?;
            }
            w.flush().map_err(|e| Error::io(&path, e))
        };
        let mut rows: Vec<Vec<String>> = self
            .features
            .iter()
            .map(|f| vec![f.feature.clone(), format!("{:?}", f.mean_attention), f.rank.to_string()])
            .collect();
        rows.push(vec!["temporal (sum)".into(), format!("{:?}", self.temporal_sum), String::new()]);
        write("attention_means.csv", vec!["feature".into(), "mean_attention".into(), "rank".into()], rows)?;
        let header = std::iter::once("subject_id".to_string())
            .chain(self.features.iter().map(|f| f.feature.clone()))
            .collect();
        let rows = self
            .subject_ids
            .iter()
            .enumerate()
            .map(|(i, id)| {
                std::iter::once(id.clone())
                    .chain(self.matrix.row(i).iter().map(|v| format!("{v:?}")))
                    .collect()
            })
            .collect();
        write("attention_matrix.csv", header, rows)?;
        let rows = self
            .subject_ids
            .iter()
            .zip(&self.bmi_scatter)
            .map(|(id, (b, a))| vec![id.clone(), format!("{b:?}"), format!("{a:?}")])
            .collect();
        write("bmi_attention.csv", vec!["subject_id".into(), "bmi".into(), "bmi_attention".into()], rows)
    }
}

pub fn attention_profile(enc: &Encoders, model: &SraModel, records: &[&SubjectRecord]) -> Result<AttentionProfile> {
    let x = model.features(enc, records)?;
    let (a, _) = model.attention(&x)?;
    let p = model.p();
    let n = records.len();
    let means: Vec<f64> = (0..p)
        .map(|j| (0..n).map(|i| a.row(i)[j]).sum::<f64>() / n as f64)
        .collect();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&i, &j| means[j].total_cmp(&means[i]).then(i.cmp(&j)));
    let mut rank = vec![0; p];
    for (r, &j) in order.iter().enumerate() {
        rank[j] = r + 1;
    }
    let features = (0..p)
        .map(|j| FeatureAttention {
            feature: model.names[j].clone(),
            mean_attention: means[j],
            rank: rank[j],
        })
        .collect();
    let bmi_col = p - 1;
    Ok(AttentionProfile {
        subject_ids: records.iter().map(|r| r.subject_id.clone()).collect(),
        bmi_scatter: records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.demographics.bmi, a.row(i)[bmi_col]))
            .collect(),
        temporal_sum: means[..model.temporal_dim()].iter().sum(),
        matrix: a,
        features,
    })
}
