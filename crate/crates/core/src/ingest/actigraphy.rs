use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ACTIGRAPHY_HEADER: [&str; 5] = ["subject_id", "timestamp", "ax", "ay", "az"];

#[derive(Debug, Clone, PartialEq)]
pub struct RawSample {
    pub subject_id: String,
    /// UTC seconds.
    pub timestamp: i64,
    pub ax: f64,
    pub ay: f64,
    pub az: f64,
}

impl RawSample {
    /// Sum of squared axes. No square root is taken.
    pub fn intensity(&self) -> f64 {
        self.ax * self.ax + self.ay * self.ay + self.az * self.az
    }
}

/// Statistic used to collapse the samples that fall in one minute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MinuteAggregation {
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinuteIntensity {
    /// UTC minutes since the epoch.
    pub minute: i64,
    pub intensity: f64,
}

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Reads a `subject_id,timestamp,ax,ay,az` file. Samples are returned grouped
/// by subject (in order of first appearance) and sorted by timestamp within
/// each subject; out-of-order input is logged and stably reordered.
pub fn load_actigraphy(path: &Path) -> Result<Vec<RawSample>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.iter().collect::<Vec<_>>() != ACTIGRAPHY_HEADER {
        return Err(parse_err(
            path,
            1,
            format!("expected header {}", ACTIGRAPHY_HEADER.join(",")),
        ));
    }
    let mut order: Vec<String> = Vec::new();
    let mut by_subject: BTreeMap<String, Vec<RawSample>> = BTreeMap::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != 5 {
            return Err(parse_err(path, line, format!("expected 5 fields, got {}", rec.len())));
        }
        let num = |i: usize| -> Result<f64> {
            let v: f64 = rec[i]
                .parse()
                .map_err(|_| parse_err(path, line, format!("bad number `{}` in column {}", &rec[i], ACTIGRAPHY_HEADER[i])))?;
            if !v.is_finite() {
                return Err(parse_err(path, line, format!("non-finite value in column {}", ACTIGRAPHY_HEADER[i])));
            }
            Ok(v)
        };
        let timestamp: i64 = rec[1]
            .parse()
            .map_err(|_| parse_err(path, line, format!("bad timestamp `{}`", &rec[1])))?;
        let sample = RawSample {
            subject_id: rec[0].to_string(),
            timestamp,
            ax: num(2)?,
            ay: num(3)?,
            az: num(4)?,
        };
        if sample.subject_id.is_empty() {
            return Err(parse_err(path, line, "empty subject_id"));
        }
        let entry = by_subject.entry(sample.subject_id.clone()).or_insert_with(|| {
            order.push(sample.subject_id.clone());
            Vec::new()
        });
        entry.push(sample);
    }
    let mut out = Vec::new();
    for id in order {
        let mut samples = by_subject.remove(&id).unwrap();
        if samples.windows(2).any(|w| w[1].timestamp < w[0].timestamp) {
            warn!("{}: timestamps for subject `{id}` are not monotone; sorting", path.display());
            samples.sort_by_key(|s| s.timestamp);
        }
        out.extend(samples);
    }
    Ok(out)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => parse_err(path, line, format!("{other:?}")),
    }
}

pub fn write_actigraphy(path: &Path, samples: &[RawSample]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "{}", ACTIGRAPHY_HEADER.join(",")).map_err(io)?;
    for s in samples {
        writeln!(w, "{},{},{},{},{}", s.subject_id, s.timestamp, s.ax, s.ay, s.az).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Per-minute intensity for one subject's samples. Minutes without samples
/// are absent from the output.
pub fn magnitude_minutes(samples: &[RawSample], agg: MinuteAggregation) -> Vec<MinuteIntensity> {
    let mut acc: BTreeMap<i64, (f64, usize)> = BTreeMap::new();
    for s in samples {
        let e = acc.entry(s.timestamp.div_euclid(60)).or_insert((0.0, 0));
        e.0 += s.intensity();
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(minute, (sum, n))| MinuteIntensity {
            minute,
            intensity: match agg {
                MinuteAggregation::Mean => sum / n as f64,
                MinuteAggregation::Sum => sum,
            },
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(ts: i64, a: (f64, f64, f64)) -> RawSample {
        RawSample {
            subject_id: "s".into(),
            timestamp: ts,
            ax: a.0,
            ay: a.1,
            az: a.2,
        }
    }

    #[test]
    fn intensity_is_sum_of_squares() {
        assert_eq!(sample(0, (3.0, 4.0, 0.0)).intensity(), 25.0);
        assert_eq!(sample(0, (0.0, 0.0, 0.0)).intensity(), 0.0);
    }

    #[test]
    fn minute_value_is_mean_of_samples() {
        let s = [
            sample(60, (1.0, 3.0, 0.0)), // 10
            sample(90, (2.0, 4.0, 0.0)), // 20
            sample(200, (1.0, 0.0, 0.0)),
        ];
        let m = magnitude_minutes(&s, MinuteAggregation::Mean);
        assert_eq!(m.len(), 2);
        assert_eq!((m[0].minute, m[0].intensity), (1, 15.0));
        assert_eq!((m[1].minute, m[1].intensity), (3, 1.0));
        let m = magnitude_minutes(&s, MinuteAggregation::Sum);
        assert_eq!(m[0].intensity, 30.0);
    }

    #[test]
    fn header_only_file_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        std::fs::write(&p, "subject_id,timestamp,ax,ay,az\n").unwrap();
        assert!(load_actigraphy(&p).unwrap().is_empty());
    }

    #[test]
    fn single_row_parses() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        std::fs::write(&p, "subject_id,timestamp,ax,ay,az\ns1,0,1.0,2.0,2.0\n").unwrap();
        let v = load_actigraphy(&p).unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].intensity(), 9.0);
    }

    #[test]
    fn malformed_row_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        std::fs::write(&p, "subject_id,timestamp,ax,ay,az\ns1,0,1,2,3\ns1,60,x,2,3\n").unwrap();
        match load_actigraphy(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn out_of_order_timestamps_are_sorted() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        std::fs::write(
            &p,
            "subject_id,timestamp,ax,ay,az\na,120,1,0,0\nb,5,0,0,0\na,60,2,0,0\n",
        )
        .unwrap();
        let v = load_actigraphy(&p).unwrap();
        let got: Vec<_> = v.iter().map(|s| (s.subject_id.as_str(), s.timestamp)).collect();
        assert_eq!(got, vec![("a", 60), ("a", 120), ("b", 5)]);
    }
}
