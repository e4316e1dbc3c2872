//! Masked representation regression with a momentum target encoder, and the
//! binary checkpoint container.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::KvConfig;
use crate::encoders::{EncoderConfig, EncoderParams, Encoders, Grad};
use crate::error::{Error, Result};
use crate::ingest::{Dataset, NormStats, Split, SubjectRecord};
use crate::numeric::{huber_value, Adam, AdamConfig, Gradients, Graph, ParamSet, Tensor, Var};
use crate::slicing::{self, derive_seed, sample_mask, MaskPlan};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub mask_ratio: f64,
    pub delta: f64,
    pub momentum: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Draw a fresh mask per subject every epoch; otherwise epoch 0's masks are reused.
    pub resample_masks: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            mask_ratio: 0.6,
            delta: 2.0,
            momentum: 0.99,
            adam: AdamConfig {
                lr: 2e-3,
                ..AdamConfig::default()
            },
            seed: 0,
            resample_masks: true,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) {
            return Err(Error::InvalidConfig(format!("delta must be > 0, got {}", self.delta)));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::InvalidConfig(format!("mask_ratio must lie in [0, 1), got {}", self.mask_ratio)));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!("momentum must lie in [0, 1], got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.adam.lr >= 0.0) || !(self.adam.eps > 0.0) {
            return Err(Error::InvalidConfig("lr must be >= 0 and eps > 0".into()));
        }
        Ok(())
    }

    pub const KEYS: [&'static str; 11] = [
        "epochs",
        "batch_size",
        "mask_ratio",
        "delta",
        "momentum",
        "lr",
        "beta1",
        "beta2",
        "adam_eps",
        "seed",
        "resample_masks",
    ];

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = Self::default();
        let c = Self {
            epochs: kv.get("epochs", d.epochs)?,
            batch_size: kv.get("batch_size", d.batch_size)?,
            mask_ratio: kv.get("mask_ratio", d.mask_ratio)?,
            delta: kv.get("delta", d.delta)?,
            momentum: kv.get("momentum", d.momentum)?,
            adam: AdamConfig {
                lr: kv.get("lr", d.adam.lr)?,
                beta1: kv.get("beta1", d.adam.beta1)?,
                beta2: kv.get("beta2", d.adam.beta2)?,
                eps: kv.get("adam_eps", d.adam.eps)?,
            },
            seed: kv.get("seed", d.seed)?,
            resample_masks: kv.get("resample_masks", d.resample_masks)?,
        };
        c.validate()?;
        Ok(c)
    }
}

/// Mean Huber penalty of `target − pred` over all elements.
pub fn huber_align_loss(pred: &Tensor, target: &Tensor, delta: f64) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("huber_align_loss", pred.shape(), target.shape()));
    }
    if !(delta > 0.0) {
        return Err(Error::InvalidArgument(format!("huber delta must be > 0, got {delta}")));
    }
    let total: f64 = target
        .data()
        .iter()
        .zip(pred.data())
        .map(|(t, p)| huber_value(t - p, delta))
        .sum();
    Ok(total / pred.len() as f64)
}

/// One subject's contribution to a pretraining step.
#[derive(Debug, Clone, Copy)]
pub struct PretrainItem<'a> {
    /// Standardized series, `T × m` row-major.
    pub series: &'a [f64],
    pub mask_seed: u64,
}

/// Target representations of the masked slices from the momentum encoder.
pub fn target_representations(enc: &Encoders, masked_slices: &[f64], masked_idx: &[usize]) -> Result<Tensor> {
    let mut g = Graph::new(&enc.params.set);
    let z = enc.embed_slices(&mut g, masked_slices, Grad::Stop)?;
    let z = enc.add_positional(&mut g, z, masked_idx, Grad::Stop)?;
    let out = enc.encode_target(&mut g, z)?;
    Ok(g.value(out).clone())
}

/// Builds the online-side loss for one subject on `g`.
pub fn subject_loss(g: &mut Graph, enc: &Encoders, series: &[f64], plan: &MaskPlan, delta: f64) -> Result<Var> {
    let c = &enc.config;
    let batch = slicing::slice(series, c.channels, c.sigma)?;
    let parts = slicing::split(&batch, plan)?;
    let target = target_representations(enc, &parts.masked, &plan.masked_idx)?;
    let zv = enc.embed_slices(g, &parts.visible, Grad::Track)?;
    let zv = enc.add_positional(g, zv, &plan.visible_idx, Grad::Track)?;
    let h = enc.encode_visible(g, zv)?;
    let pred = enc.decode_masked(g, h, &plan.masked_idx)?;
    let target = g.constant(target);
    g.huber(pred, target, delta)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepOutcome {
    /// Mean loss over the subjects that contributed.
    pub loss: f64,
    pub used: usize,
    pub skipped: usize,
}

/// Number of slices a series of `len` rows yields.
pub fn num_slices(len: usize, sigma: usize) -> usize {
    len.div_ceil(sigma)
}

/// Forward and backward for every item (concurrently), batch-mean gradient,
/// one optimizer step on the online parameters, then the momentum update.
pub fn pretrain_step(
    enc: &mut Encoders,
    adam: &mut Adam,
    items: &[PretrainItem<'_>],
    config: &PretrainConfig,
) -> Result<StepOutcome> {
    let c = enc.config.clone();
    let shared: &Encoders = enc;
    let results: Vec<Option<Result<(f64, Gradients)>>> = items
        .par_iter()
        .map(|item| {
            let rows = item.series.len() / c.channels;
            let s = num_slices(rows, c.sigma);
            if s < 2 {
                return None;
            }
            Some((|| {
                let plan = sample_mask(s, config.mask_ratio, item.mask_seed)?;
                let mut g = Graph::new(&shared.params.set);
                let loss = subject_loss(&mut g, shared, item.series, &plan, config.delta)?;
                let value = g.value(loss).item();
                Ok((value, g.backward(loss)?))
            })())
        })
        .collect();

    let mut total = Gradients::zeros_like(&enc.params.set);
    let (mut sum, mut used, mut skipped) = (0.0, 0usize, 0usize);
    for r in results {
        match r {
            None => skipped += 1,
            Some(r) => {
                let (l, grads) = r?;
                sum += l;
                used += 1;
                total.accumulate(&grads);
            }
        }
    }
    if skipped > 0 {
        warn!("skipped {skipped} subjects with fewer than 2 slices");
    }
    if used == 0 {
        return Ok(StepOutcome {
            loss: f64::NAN,
            used,
            skipped,
        });
    }
    total.scale(1.0 / used as f64);
    adam.step(&mut enc.params.set, &total)?;
    enc.params.momentum_update(config.momentum)?;
    Ok(StepOutcome {
        loss: sum / used as f64,
        used,
        skipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
}

/// Optional head attached to a checkpoint: opaque metadata plus arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadBlob {
    pub meta: serde_json::Value,
    pub params: ParamSet,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub encoder: Encoders,
    pub head: Option<HeadBlob>,
    pub stats: Option<NormStats>,
    pub history: Vec<EpochRecord>,
    pub seed: u64,
}

impl PartialEq for Checkpoint {
    fn eq(&self, other: &Self) -> bool {
        self.encoder.config == other.encoder.config
            && self.encoder.params.set == other.encoder.params.set
            && self.head == other.head
            && self.stats == other.stats
            && self.history == other.history
            && self.seed == other.seed
    }
}

/// Pretrains on the subjects of `split` (all subjects when `None`).
pub fn pretrain_run(
    dataset: &Dataset,
    split: Option<Split>,
    encoder_config: &EncoderConfig,
    config: &PretrainConfig,
) -> Result<Checkpoint> {
    let records: Vec<&SubjectRecord> = match split {
        Some(s) => dataset.split(s),
        None => dataset.records.iter().collect(),
    };
    if encoder_config.channels != dataset.channels() {
        return Err(Error::InvalidConfig(format!(
            "encoder expects {} channels, dataset has {}",
            encoder_config.channels,
            dataset.channels()
        )));
    }
    pretrain_records(&records, dataset.stats(), encoder_config, config)
}

pub fn pretrain_records(
    records: &[&SubjectRecord],
    stats: &NormStats,
    encoder_config: &EncoderConfig,
    config: &PretrainConfig,
) -> Result<Checkpoint> {
    pretrain_observed(records, stats, encoder_config, config, |_, _| {})
}

/// Like [`pretrain_records`], calling `observer(step, encoders)` after every
/// optimizer step (momentum update included) and once with step 0 before
/// training starts.
pub fn pretrain_observed(
    records: &[&SubjectRecord],
    stats: &NormStats,
    encoder_config: &EncoderConfig,
    config: &PretrainConfig,
    mut observer: impl FnMut(u64, &Encoders),
) -> Result<Checkpoint> {
    config.validate()?;
    if records.is_empty() {
        return Err(Error::InvalidArgument("no subjects to pretrain on".into()));
    }
    let series: Vec<Vec<f64>> = records.iter().map(|r| stats.standardize_series(r)).collect();
    let usable = series
        .iter()
        .filter(|s| num_slices(s.len() / encoder_config.channels, encoder_config.sigma) >= 2)
        .count();
    if usable == 0 {
        return Err(Error::InvalidArgument(format!(
            "every series yields fewer than 2 slices at sigma = {}; use longer series or a smaller sigma",
            encoder_config.sigma
        )));
    }
    let mut enc = Encoders::new(encoder_config.clone(), config.seed)?;
    let mut adam = Adam::new(config.adam.clone(), &enc.params.set);
    observer(0, &enc);
    let mut history = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..series.len()).collect();
    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, epoch as u64, u64::MAX));
        order.shuffle(&mut rng);
        let mask_epoch = if config.resample_masks { epoch as u64 } else { 0 };
        let (mut sum, mut count) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let items: Vec<PretrainItem> = chunk
                .iter()
                .map(|&i| PretrainItem {
                    series: &series[i],
                    mask_seed: derive_seed(config.seed, mask_epoch, i as u64),
                })
                .collect();
            let out = pretrain_step(&mut enc, &mut adam, &items, config)?;
            if out.used > 0 {
                observer(adam.step_count(), &enc);
            }
            if out.used > 0 {
                sum += out.loss * out.used as f64;
                count += out.used;
            }
        }
        let mean_loss = sum / count as f64;
        info!("epoch {epoch}: mean loss {mean_loss:.6}");
        history.push(EpochRecord { epoch, mean_loss });
    }
    debug!("pretraining finished after {} optimizer steps", adam.step_count());
    Ok(Checkpoint {
        encoder: enc,
        head: None,
        stats: Some(stats.clone()),
        history,
        seed: config.seed,
    })
}

pub fn write_loss_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let io = |e: csv::Error| Error::io(path, e.into());
    w.write_record(["epoch", "mean_loss"]).map_err(io)?;
    for r in history {
        w.write_record([r.epoch.to_string(), format!("{:?}", r.mean_loss)]).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PFMCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArrayEntry {
    group: String,
    name: String,
    shape: Vec<usize>,
    offset: u64,
    trainable: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointManifest {
    format_version: u32,
    encoder_config: EncoderConfig,
    arrays: Vec<ArrayEntry>,
    head_meta: Option<serde_json::Value>,
    stats: Option<NormStats>,
    history: Vec<EpochRecord>,
    seed: u64,
    payload_bytes: u64,
}

fn entries(group: &str, set: &ParamSet, offset: &mut u64, out: &mut Vec<ArrayEntry>) {
    for (id, name, t) in set.iter() {
        out.push(ArrayEntry {
            group: group.into(),
            name: name.into(),
            shape: t.shape().to_vec(),
            offset: *offset,
            trainable: set.is_trainable(id),
        });
        *offset += 8 * t.len() as u64;
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut arrays = Vec::new();
        let mut offset = 0u64;
        entries("encoder", &self.encoder.params.set, &mut offset, &mut arrays);
        if let Some(h) = &self.head {
            entries("head", &h.params, &mut offset, &mut arrays);
        }
        let manifest = CheckpointManifest {
            format_version: CHECKPOINT_VERSION,
            encoder_config: self.encoder.config.clone(),
            arrays,
            head_meta: self.head.as_ref().map(|h| h.meta.clone()),
            stats: self.stats.clone(),
            history: self.history.clone(),
            seed: self.seed,
            payload_bytes: offset,
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let sets = std::iter::once(&self.encoder.params.set).chain(self.head.as_ref().map(|h| &h.params));
        for set in sets {
            for (_, _, t) in set.iter() {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::CheckpointCorrupt("missing checkpoint header".into()));
        }
        let json_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json_end = 16usize
            .checked_add(json_len)
            .filter(|&e| e <= bytes.len())
            .ok_or(Error::CheckpointTruncated {
                needed: 16u64.saturating_add(json_len as u64),
                found: bytes.len() as u64,
            })?;
        // peek at the version before committing to the full schema
        let raw: serde_json::Value = serde_json::from_slice(&bytes[16..json_end])
            .map_err(|e| Error::CheckpointCorrupt(format!("manifest: {e}")))?;
        let found = raw.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found,
                expected: CHECKPOINT_VERSION,
            });
        }
        let m: CheckpointManifest =
            serde_json::from_value(raw).map_err(|e| Error::CheckpointCorrupt(format!("manifest: {e}")))?;
        let payload = &bytes[json_end..];
        if (payload.len() as u64) < m.payload_bytes {
            return Err(Error::CheckpointTruncated {
                needed: m.payload_bytes,
                found: payload.len() as u64,
            });
        }
        if payload.len() as u64 != m.payload_bytes {
            return Err(Error::CheckpointCorrupt(format!(
                "{} trailing bytes after payload",
                payload.len() as u64 - m.payload_bytes
            )));
        }
        let mut encoder_set = ParamSet::new();
        let mut head_set = ParamSet::new();
        let mut seen = BTreeSet::new();
        let mut expected_offset = 0u64;
        for a in &m.arrays {
            if !seen.insert((a.group.clone(), a.name.clone())) {
                return Err(Error::CheckpointCorrupt(format!("duplicate array `{}`", a.name)));
            }
            if a.offset != expected_offset {
                return Err(Error::CheckpointCorrupt(format!("array `{}` at unexpected offset {}", a.name, a.offset)));
            }
            let n: usize = a.shape.iter().product();
            let start = a.offset as usize;
            let end = start + 8 * n;
            if end > payload.len() {
                return Err(Error::CheckpointTruncated {
                    needed: end as u64,
                    found: payload.len() as u64,
                });
            }
            let data: Vec<f64> = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(a.shape.clone(), data)
                .map_err(|e| Error::CheckpointCorrupt(format!("array `{}`: {e}", a.name)))?;
            let set = match a.group.as_str() {
                "encoder" => &mut encoder_set,
                "head" => &mut head_set,
                other => return Err(Error::CheckpointCorrupt(format!("unknown array group `{other}`"))),
            };
            if a.trainable {
                set.insert(a.name.clone(), t);
            } else {
                set.insert_frozen(a.name.clone(), t);
            }
            expected_offset = end as u64;
        }
        let params = EncoderParams::from_set(&m.encoder_config, encoder_set)?;
        let head = match m.head_meta {
            Some(meta) => Some(HeadBlob { meta, params: head_set }),
            None if head_set.is_empty() => None,
            None => return Err(Error::CheckpointCorrupt("head arrays without head metadata".into())),
        };
        Ok(Self {
            encoder: Encoders {
                config: m.encoder_config,
                params,
            },
            head,
            stats: m.stats,
            history: m.history,
            seed: m.seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Encoder arrays by name, for bit-exact before/after comparisons.
    pub fn encoder_arrays(&self) -> BTreeMap<String, Tensor> {
        self.encoder
            .params
            .set
            .iter()
            .map(|(_, n, t)| (n.to_string(), t.clone()))
            .collect()
    }
}
