use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, ExclusionReason, Result};

pub const DATASET_SCHEMA_VERSION: u32 = 1;
pub const DEMOGRAPHIC_NAMES: [&str; 3] = ["age", "gender", "bmi"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Limited,
    Good,
}

impl Label {
    /// 1 for the positive class ("good").
    pub fn as_f64(self) -> f64 {
        match self {
            Label::Limited => 0.0,
            Label::Good => 1.0,
        }
    }

    pub fn as_u8(self) -> u8 {
        self.as_f64() as u8
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Demographics {
    pub age: f64,
    /// 0 = male, 1 = female.
    pub gender: f64,
    pub bmi: f64,
}

impl Demographics {
    pub fn as_array(&self) -> [f64; 3] {
        [self.age, self.gender, self.bmi]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub channels: usize,
    /// Row-major `T × channels` minute-level intensity.
    pub series: Vec<f64>,
    pub demographics: Demographics,
    pub sppb: u8,
    pub label: Label,
}

impl SubjectRecord {
    pub fn len(&self) -> usize {
        self.series.len() / self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn fit(values: impl Iterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.collect();
        if v.is_empty() {
            return Self { mean: 0.0, std: 1.0 };
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
        }
    }

    /// `(x − mean) / std`; a degenerate spread divides by 1.
    pub fn apply(&self, x: f64) -> f64 {
        let s = if self.std > 1e-12 { self.std } else { 1.0 };
        (x - self.mean) / s
    }
}

/// Training-split normalization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub age: MeanStd,
    pub gender: MeanStd,
    pub bmi: MeanStd,
    /// Per-channel intensity statistics.
    pub intensity: Vec<MeanStd>,
}

impl NormStats {
    pub fn fit<'a>(records: impl Iterator<Item = &'a SubjectRecord> + Clone, channels: usize) -> Self {
        let demo = |f: fn(&Demographics) -> f64| MeanStd::fit(records.clone().map(move |r| f(&r.demographics)));
        let intensity = (0..channels)
            .map(|c| {
                MeanStd::fit(
                    records
                        .clone()
                        .flat_map(move |r| r.series.iter().skip(c).step_by(channels).copied()),
                )
            })
            .collect();
        Self {
            age: demo(|d| d.age),
            gender: demo(|d| d.gender),
            bmi: demo(|d| d.bmi),
            intensity,
        }
    }

    /// z-scored `[age, gender, bmi]`.
    pub fn normalize(&self, d: &Demographics) -> [f64; 3] {
        [self.age.apply(d.age), self.gender.apply(d.gender), self.bmi.apply(d.bmi)]
    }

    pub fn standardize_series(&self, rec: &SubjectRecord) -> Vec<f64> {
        let ch = rec.channels;
        rec.series
            .iter()
            .enumerate()
            .map(|(i, &v)| self.intensity[i % ch].apply(v))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidArgument(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Splits {
    /// Seeded shuffle of `ids`, cut into train/val/test by rounded counts.
    pub fn assign(ids: &[String], train_fraction: f64, val_fraction: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&train_fraction)
            || !(0.0..=1.0).contains(&val_fraction)
            || train_fraction + val_fraction > 1.0 + 1e-12
        {
            return Err(Error::InvalidConfig(format!(
                "split fractions train={train_fraction} val={val_fraction} are invalid"
            )));
        }
        let mut shuffled = ids.to_vec();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n = ids.len() as f64;
        let n_train = (train_fraction * n).round() as usize;
        let n_val = ((val_fraction * n).round() as usize).min(ids.len() - n_train);
        let mut train = shuffled[..n_train].to_vec();
        let mut val = shuffled[n_train..n_train + n_val].to_vec();
        let mut test = shuffled[n_train + n_val..].to_vec();
        train.sort();
        val.sort();
        test.sort();
        Ok(Self { train, val, test })
    }

    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub name: String,
    pub channels: usize,
    pub sppb_threshold: u8,
    pub splits: Splits,
    pub stats: NormStats,
    pub excluded: BTreeMap<String, ExclusionReason>,
    pub provenance: BTreeMap<String, String>,
}

/// Labeled subjects plus split membership and normalization statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    /// Sorted by subject id.
    pub records: Vec<SubjectRecord>,
}

impl Dataset {
    /// Assembles a dataset, assigning splits and fitting statistics on the train split.
    pub fn build(
        name: &str,
        mut records: Vec<SubjectRecord>,
        sppb_threshold: u8,
        train_fraction: f64,
        val_fraction: f64,
        seed: u64,
    ) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::InvalidArgument("dataset has no subjects".into()));
        }
        records.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));
        let channels = records[0].channels;
        if records.iter().any(|r| r.channels != channels) {
            return Err(Error::InvalidArgument("subjects disagree on channel count".into()));
        }
        let ids: Vec<String> = records.iter().map(|r| r.subject_id.clone()).collect();
        let splits = Splits::assign(&ids, train_fraction, val_fraction, seed)?;
        let train: std::collections::BTreeSet<&str> = splits.train.iter().map(String::as_str).collect();
        let stats = NormStats::fit(
            records.iter().filter(|r| train.contains(r.subject_id.as_str())),
            channels,
        );
        Ok(Self {
            manifest: Manifest {
                schema_version: DATASET_SCHEMA_VERSION,
                name: name.to_string(),
                channels,
                sppb_threshold,
                splits,
                stats,
                excluded: BTreeMap::new(),
                provenance: BTreeMap::new(),
            },
            records,
        })
    }

    pub fn channels(&self) -> usize {
        self.manifest.channels
    }

    pub fn stats(&self) -> &NormStats {
        &self.manifest.stats
    }

    pub fn get(&self, id: &str) -> Option<&SubjectRecord> {
        self.records
            .binary_search_by(|r| r.subject_id.as_str().cmp(id))
            .ok()
            .map(|i| &self.records[i])
    }

    pub fn split(&self, split: Split) -> Vec<&SubjectRecord> {
        self.manifest
            .splits
            .ids(split)
            .iter()
            .filter_map(|id| self.get(id))
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(&manifest, text + "\n").map_err(|e| Error::io(&manifest, e))?;

        let subjects = dir.join("subjects.csv");
        let io = |p: &Path| {
            let p = p.to_path_buf();
            move |e| Error::io(p.clone(), e)
        };
        let mut w = BufWriter::new(File::create(&subjects).map_err(io(&subjects))?);
        writeln!(w, "subject_id,age,gender,bmi,sppb,label").map_err(io(&subjects))?;
        for r in &self.records {
            let d = &r.demographics;
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.subject_id,
                d.age,
                d.gender,
                d.bmi,
                r.sppb,
                r.label.as_u8()
            )
            .map_err(io(&subjects))?;
        }
        w.flush().map_err(io(&subjects))?;

        let series = dir.join("series.csv");
        let mut w = BufWriter::new(File::create(&series).map_err(io(&series))?);
        let cols: Vec<String> = (0..self.channels()).map(|c| format!("c{c}")).collect();
        writeln!(w, "subject_id,t,{}", cols.join(",")).map_err(io(&series))?;
        for r in &self.records {
            for (t, row) in r.series.chunks(r.channels).enumerate() {
                write!(w, "{},{t}", r.subject_id).map_err(io(&series))?;
                for v in row {
                    write!(w, ",{v}").map_err(io(&series))?;
                }
                writeln!(w).map_err(io(&series))?;
            }
        }
        w.flush().map_err(io(&series))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.json");
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.schema_version != DATASET_SCHEMA_VERSION {
            return Err(Error::InvalidArgument(format!(
                "dataset schema version {} is not supported",
                manifest.schema_version
            )));
        }
        let channels = manifest.channels;

        let subjects_path = dir.join("subjects.csv");
        let mut rdr = csv::Reader::from_path(&subjects_path).map_err(|e| parse(&subjects_path, e))?;
        let mut records: Vec<SubjectRecord> = Vec::new();
        for row in rdr.records() {
            let row = row.map_err(|e| parse(&subjects_path, e))?;
            let line = row.position().map(|p| p.line()).unwrap_or(0);
            let bad = |m: &str| Error::Parse {
                path: subjects_path.clone(),
                line,
                message: m.to_string(),
            };
            let f = |i: usize| row.get(i).and_then(|s| s.parse::<f64>().ok()).ok_or_else(|| bad("bad number"));
            let label = match row.get(5) {
                Some("0") => Label::Limited,
                Some("1") => Label::Good,
                _ => return Err(bad("bad label")),
            };
            records.push(SubjectRecord {
                subject_id: row.get(0).ok_or_else(|| bad("missing id"))?.to_string(),
                channels,
                series: Vec::new(),
                demographics: Demographics {
                    age: f(1)?,
                    gender: f(2)?,
                    bmi: f(3)?,
                },
                sppb: row.get(4).and_then(|s| s.parse().ok()).ok_or_else(|| bad("bad sppb"))?,
                label,
            });
        }
        records.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));

        let series_path = dir.join("series.csv");
        let mut rdr = csv::Reader::from_path(&series_path).map_err(|e| parse(&series_path, e))?;
        let mut cursor = 0usize;
        for row in rdr.records() {
            let row = row.map_err(|e| parse(&series_path, e))?;
            let line = row.position().map(|p| p.line()).unwrap_or(0);
            let bad = |m: &str| Error::Parse {
                path: series_path.clone(),
                line,
                message: m.to_string(),
            };
            let id = row.get(0).ok_or_else(|| bad("missing id"))?;
            if records.get(cursor).map(|r| r.subject_id.as_str()) != Some(id) {
                cursor = records
                    .binary_search_by(|r| r.subject_id.as_str().cmp(id))
                    .map_err(|_| bad("series row for unknown subject"))?;
            }
            if row.len() != 2 + channels {
                return Err(bad("wrong number of channels"));
            }
            for c in 0..channels {
                let v: f64 = row[2 + c].parse().map_err(|_| bad("bad number"))?;
                records[cursor].series.push(v);
            }
        }
        Ok(Self { manifest, records })
    }
}

fn parse(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("{other:?}"),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centering_gives_zero() {
        let s = MeanStd { mean: 70.0, std: 5.0 };
        assert_eq!(s.apply(70.0), 0.0);
        assert_eq!(s.apply(80.0), 2.0);
        assert_eq!(MeanStd { mean: 1.0, std: 0.0 }.apply(1.0), 0.0);
    }

    #[test]
    fn splits_partition_ids() {
        let ids: Vec<String> = (0..10).map(|i| format!("s{i}")).collect();
        let s = Splits::assign(&ids, 0.6, 0.2, 9).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (6, 2, 2));
        let mut all: Vec<_> = s.train.iter().chain(&s.val).chain(&s.test).cloned().collect();
        all.sort();
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(all, sorted);
        assert!(Splits::assign(&ids, 0.8, 0.3, 0).is_err());
    }
}
