//! Raw actigraphy and demographics to labeled, split, normalized datasets.

pub mod actigraphy;
pub mod dataset;
pub mod demographics;
pub mod synth;
pub mod wear;

use std::collections::BTreeMap;
use std::path::Path;

use log::{info, warn};

pub use actigraphy::{load_actigraphy, magnitude_minutes, write_actigraphy, MinuteAggregation, MinuteIntensity, RawSample};
pub use dataset::{Dataset, DEMOGRAPHIC_NAMES, Demographics, Label, Manifest, MeanStd, NormStats, Split, Splits, SubjectRecord};
pub use demographics::{join_demographics, label_from_sppb, load_demographics, DemographicsRow, DEFAULT_SPPB_THRESHOLD};
pub use synth::{synth_generate, Latent, SynthConfig, SynthOutput};
pub use wear::{apply_wear_policy, WearPolicy, Weekday, WornSeries};

use crate::config::KvConfig;
use crate::error::{Error, ExclusionReason, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct IngestConfig {
    pub name: String,
    pub policy: WearPolicy,
    pub aggregation: MinuteAggregation,
    pub sppb_threshold: u8,
    /// Subjects with fewer kept minutes are excluded as too short.
    pub min_minutes: usize,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            name: "cohort".into(),
            policy: WearPolicy::default(),
            aggregation: MinuteAggregation::Mean,
            sppb_threshold: DEFAULT_SPPB_THRESHOLD,
            min_minutes: 1,
            train_fraction: 0.6,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

impl IngestConfig {
    pub const KEYS: [&'static str; 13] = [
        "name",
        "exclude_start",
        "exclude_end",
        "required_days",
        "exclude_weekends",
        "min_day_minutes",
        "utc_offset_minutes",
        "aggregation",
        "sppb_threshold",
        "min_minutes",
        "train_fraction",
        "val_fraction",
        "seed",
    ];

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = Self::default();
        let p = d.policy.clone();
        let aggregation = match kv.get_str("aggregation").unwrap_or("mean") {
            "mean" => MinuteAggregation::Mean,
            "sum" => MinuteAggregation::Sum,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown aggregation `{other}` (expected mean or sum)"
                )))
            }
        };
        let c = Self {
            name: kv.get_str("name").unwrap_or(&d.name).to_string(),
            policy: WearPolicy {
                exclude_start: kv.get("exclude_start", p.exclude_start)?,
                exclude_end: kv.get("exclude_end", p.exclude_end)?,
                required_days: kv.get("required_days", p.required_days)?,
                exclude_weekends: kv.get("exclude_weekends", p.exclude_weekends)?,
                min_day_minutes: kv.get("min_day_minutes", p.min_day_minutes)?,
                utc_offset_minutes: kv.get("utc_offset_minutes", p.utc_offset_minutes)?,
            },
            aggregation,
            sppb_threshold: kv.get("sppb_threshold", d.sppb_threshold)?,
            min_minutes: kv.get("min_minutes", d.min_minutes)?,
            train_fraction: kv.get("train_fraction", d.train_fraction)?,
            val_fraction: kv.get("val_fraction", d.val_fraction)?,
            seed: kv.get("seed", d.seed)?,
        };
        c.policy.validate()?;
        if c.sppb_threshold > 12 {
            return Err(Error::InvalidConfig("sppb_threshold must be within 0..=12".into()));
        }
        Ok(c)
    }
}

/// Runs the full ingest: minute aggregation, wear policy, demographics join,
/// split assignment. Excluded subjects are listed in the manifest with a reason.
pub fn ingest_dataset(actigraphy_path: &Path, demographics_path: &Path, config: &IngestConfig) -> Result<Dataset> {
    config.policy.validate()?;
    let samples = load_actigraphy(actigraphy_path)?;
    let table = load_demographics(demographics_path)?;

    let mut by_subject: BTreeMap<String, Vec<RawSample>> = BTreeMap::new();
    for s in samples {
        by_subject.entry(s.subject_id.clone()).or_default().push(s);
    }
    let mut records = Vec::new();
    let mut excluded = BTreeMap::new();
    for (id, samples) in &by_subject {
        let minutes = magnitude_minutes(samples, config.aggregation);
        let outcome = apply_wear_policy(&minutes, &config.policy).and_then(|worn| {
            if worn.values.len() < config.min_minutes {
                return Err(ExclusionReason::TooShort);
            }
            join_demographics(id, worn.values, 1, table.get(id), config.sppb_threshold)
        });
        match outcome {
            Ok(r) => records.push(r),
            Err(reason) => {
                warn!("excluding subject {id}: {reason}");
                excluded.insert(id.clone(), reason);
            }
        }
    }
    for id in table.keys() {
        if !by_subject.contains_key(id) {
            warn!("subject {id} has demographics but no actigraphy");
        }
    }
    info!("ingest kept {} subjects, excluded {}", records.len(), excluded.len());
    let mut ds = Dataset::build(
        &config.name,
        records,
        config.sppb_threshold,
        config.train_fraction,
        config.val_fraction,
        config.seed,
    )?;
    ds.manifest.excluded = excluded;
    Ok(ds)
}
