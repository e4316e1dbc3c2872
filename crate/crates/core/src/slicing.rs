//! Partitioning a series into fixed-length slices and sampling the random
//! visible/masked split used for pretraining.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// A series cut into `num_slices` windows of `sigma` steps × `channels`.
#[derive(Debug, Clone, PartialEq)]
pub struct SlicedBatch {
    /// Row-major `num_slices × sigma × channels`.
    pub slices: Vec<f64>,
    pub num_slices: usize,
    pub sigma: usize,
    pub channels: usize,
    pub original_length: usize,
    pub pad_count: usize,
}

impl SlicedBatch {
    pub fn slice_len(&self) -> usize {
        self.sigma * self.channels
    }

    pub fn slice_at(&self, i: usize) -> &[f64] {
        let n = self.slice_len();
        &self.slices[i * n..(i + 1) * n]
    }

    /// Concatenated slices with the zero padding removed.
    pub fn unpadded(&self) -> &[f64] {
        &self.slices[..self.original_length * self.channels]
    }

    /// Selects slices by index, preserving the given order.
    pub fn select(&self, idx: &[usize]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(idx.len() * self.slice_len());
        for &i in idx {
            if i >= self.num_slices {
                return Err(Error::InvalidArgument(format!(
                    "slice index {i} out of range for {} slices",
                    self.num_slices
                )));
            }
            out.extend_from_slice(self.slice_at(i));
        }
        Ok(out)
    }
}

/// Cuts a row-major `T × channels` series into `⌈T/σ⌉` slices, zero-padding the last.
pub fn slice(series: &[f64], channels: usize, sigma: usize) -> Result<SlicedBatch> {
    if sigma == 0 {
        return Err(Error::InvalidArgument("slice length must be positive".into()));
    }
    if channels == 0 || series.is_empty() || series.len() % channels != 0 {
        return Err(Error::InvalidArgument(format!(
            "series of {} values is not a non-empty multiple of {channels} channels",
            series.len()
        )));
    }
    let t = series.len() / channels;
    let num_slices = t.div_ceil(sigma);
    let pad_count = num_slices * sigma - t;
    let mut slices = series.to_vec();
    slices.resize(num_slices * sigma * channels, 0.0);
    Ok(SlicedBatch {
        slices,
        num_slices,
        sigma,
        channels,
        original_length: t,
        pad_count,
    })
}

/// Random partition of slice indices into visible and masked sets.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub visible_idx: Vec<usize>,
    pub masked_idx: Vec<usize>,
    pub ratio: f64,
    pub seed: u64,
}

impl MaskPlan {
    pub fn num_slices(&self) -> usize {
        self.visible_idx.len() + self.masked_idx.len()
    }

    /// Builds a plan from an explicit masked set.
    pub fn from_masked(num_slices: usize, masked: &[usize]) -> Result<Self> {
        let mut flags = vec![false; num_slices];
        for &i in masked {
            if i >= num_slices || flags[i] {
                return Err(Error::InvalidArgument(format!(
                    "invalid masked index {i} for {num_slices} slices"
                )));
            }
            flags[i] = true;
        }
        let masked_idx: Vec<usize> = (0..num_slices).filter(|&i| flags[i]).collect();
        let visible_idx: Vec<usize> = (0..num_slices).filter(|&i| !flags[i]).collect();
        if masked_idx.is_empty() || visible_idx.is_empty() {
            return Err(Error::InvalidArgument(
                "mask plan needs at least one visible and one masked slice".into(),
            ));
        }
        Ok(Self {
            visible_idx,
            masked_idx,
            ratio: masked.len() as f64 / num_slices as f64,
            seed: 0,
        })
    }
}

/// Number of masked slices: round-half-up of `ratio·S`, clamped to `[1, S−1]`.
pub fn mask_count(num_slices: usize, ratio: f64) -> usize {
    let raw = (ratio * num_slices as f64 + 0.5).floor();
    let raw = if raw.is_finite() && raw > 0.0 { raw as usize } else { 0 };
    raw.clamp(1, num_slices - 1)
}

pub fn sample_mask(num_slices: usize, ratio: f64, seed: u64) -> Result<MaskPlan> {
    if num_slices < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 slices to mask, got {num_slices}; use a longer series or a smaller slice length"
        )));
    }
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!("mask ratio {ratio} outside [0, 1)")));
    }
    let k = mask_count(num_slices, ratio);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masked = rand::seq::index::sample(&mut rng, num_slices, k).into_vec();
    masked.sort_unstable();
    let mut plan = MaskPlan::from_masked(num_slices, &masked)?;
    plan.ratio = ratio;
    plan.seed = seed;
    Ok(plan)
}

/// Visible and masked slices routed by `plan`, each in ascending original order.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitSlices {
    pub visible: Vec<f64>,
    pub masked: Vec<f64>,
}

pub fn split(batch: &SlicedBatch, plan: &MaskPlan) -> Result<SplitSlices> {
    if plan.num_slices() != batch.num_slices {
        return Err(Error::InvalidArgument(format!(
            "mask plan covers {} slices, batch has {}",
            plan.num_slices(),
            batch.num_slices
        )));
    }
    Ok(SplitSlices {
        visible: batch.select(&plan.visible_idx)?,
        masked: batch.select(&plan.masked_idx)?,
    })
}

/// Inverse of [`split`]: interleaves both sides back into original order.
pub fn reassemble(parts: &SplitSlices, plan: &MaskPlan, slice_len: usize) -> Vec<f64> {
    let s = plan.num_slices();
    let mut out = vec![0.0; s * slice_len];
    for (k, &i) in plan.visible_idx.iter().enumerate() {
        out[i * slice_len..(i + 1) * slice_len]
            .copy_from_slice(&parts.visible[k * slice_len..(k + 1) * slice_len]);
    }
    for (k, &i) in plan.masked_idx.iter().enumerate() {
        out[i * slice_len..(i + 1) * slice_len]
            .copy_from_slice(&parts.masked[k * slice_len..(k + 1) * slice_len]);
    }
    out
}

/// Seed for the mask of `subject` in `epoch`, mixed from the run seed.
pub fn derive_seed(base: u64, epoch: u64, subject: u64) -> u64 {
    let mut z = base
        ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ subject.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
