use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, ExclusionReason, Result};
use crate::ingest::dataset::{Demographics, Label, SubjectRecord};

pub const DEFAULT_SPPB_THRESHOLD: u8 = 9;

/// Scores at or below `threshold` are "limited", above it "good".
pub fn label_from_sppb(score: i64, threshold: u8) -> Result<Label> {
    if !(0..=12).contains(&score) {
        return Err(Error::InvalidArgument(format!("SPPB score {score} outside 0..=12")));
    }
    Ok(if score <= threshold as i64 {
        Label::Limited
    } else {
        Label::Good
    })
}

/// One row of the demographics table; absent cells are `None`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DemographicsRow {
    pub subject_id: String,
    pub age: Option<f64>,
    pub gender: Option<f64>,
    pub bmi: Option<f64>,
    pub sppb: Option<i64>,
}

fn parse_gender(s: &str) -> Option<f64> {
    match s.to_ascii_lowercase().as_str() {
        "0" | "m" | "male" => Some(0.0),
        "1" | "f" | "female" => Some(1.0),
        _ => None,
    }
}

/// Reads `subject_id,age,gender,bmi,sppb`. Empty or unparseable cells load
/// as missing so that the affected subject is excluded downstream.
pub fn load_demographics(path: &Path) -> Result<BTreeMap<String, DemographicsRow>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: e.to_string(),
        })?
        .iter()
        .map(str::to_string)
        .collect();
    if header != ["subject_id", "age", "gender", "bmi", "sppb"] {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "expected header subject_id,age,gender,bmi,sppb".into(),
        });
    }
    let mut out = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let cell = |i: usize| rec.get(i).filter(|s| !s.is_empty());
        let num = |i: usize| cell(i).and_then(|s| s.parse::<f64>().ok()).filter(|v| v.is_finite());
        let Some(id) = cell(0) else { continue };
        out.insert(
            id.to_string(),
            DemographicsRow {
                subject_id: id.to_string(),
                age: num(1),
                gender: cell(2).and_then(parse_gender),
                bmi: num(3),
                sppb: cell(4).and_then(|s| s.parse().ok()),
            },
        );
    }
    Ok(out)
}

pub fn join_demographics(
    subject_id: &str,
    series: Vec<f64>,
    channels: usize,
    row: Option<&DemographicsRow>,
    sppb_threshold: u8,
) -> std::result::Result<SubjectRecord, ExclusionReason> {
    let row = row.ok_or(ExclusionReason::MissingDemographics)?;
    let (Some(age), Some(gender), Some(bmi), Some(sppb)) = (row.age, row.gender, row.bmi, row.sppb) else {
        return Err(ExclusionReason::MissingDemographics);
    };
    if !(age > 0.0) || !(bmi > 0.0) {
        return Err(ExclusionReason::MissingDemographics);
    }
    let label = label_from_sppb(sppb, sppb_threshold).map_err(|_| ExclusionReason::InvalidSppb)?;
    Ok(SubjectRecord {
        subject_id: subject_id.to_string(),
        channels,
        series,
        demographics: Demographics { age, gender, bmi },
        sppb: sppb as u8,
        label,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::dataset::{MeanStd, NormStats};

    #[test]
    fn sppb_threshold_rule() {
        assert_eq!(label_from_sppb(8, 9).unwrap(), Label::Limited);
        assert_eq!(label_from_sppb(9, 9).unwrap(), Label::Limited);
        assert_eq!(label_from_sppb(10, 9).unwrap(), Label::Good);
        assert_eq!(label_from_sppb(11, 9).unwrap(), Label::Good);
        assert!(label_from_sppb(13, 9).is_err());
        assert!(label_from_sppb(-1, 9).is_err());
    }

    #[test]
    fn sppb_labels_are_monotone() {
        for threshold in 0..=12u8 {
            let labels: Vec<f64> = (0..=12).map(|s| label_from_sppb(s, threshold).unwrap().as_f64()).collect();
            assert!(labels.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    fn row(bmi: Option<f64>) -> DemographicsRow {
        DemographicsRow {
            subject_id: "s1".into(),
            age: Some(80.0),
            gender: Some(1.0),
            bmi,
            sppb: Some(11),
        }
    }

    #[test]
    fn missing_bmi_excludes() {
        assert_eq!(
            join_demographics("s1", vec![0.0], 1, Some(&row(None)), 9),
            Err(ExclusionReason::MissingDemographics)
        );
        assert_eq!(
            join_demographics("s1", vec![0.0], 1, None, 9),
            Err(ExclusionReason::MissingDemographics)
        );
    }

    #[test]
    fn fixture_joins_to_hand_computed_z_scores() {
        let rec = join_demographics("s1", vec![1.0, 2.0], 1, Some(&row(Some(30.0))), 9).unwrap();
        assert_eq!(rec.label, Label::Good);
        let stats = NormStats {
            age: MeanStd { mean: 76.0, std: 8.0 },
            gender: MeanStd { mean: 0.5, std: 0.5 },
            bmi: MeanStd { mean: 27.0, std: 4.0 },
            intensity: vec![MeanStd { mean: 0.0, std: 1.0 }],
        };
        // (80-76)/8, (1-0.5)/0.5, (30-27)/4
        assert_eq!(stats.normalize(&rec.demographics), [0.5, 1.0, 0.75]);
    }

    #[test]
    fn demographics_table_parses_gender_words() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(
            &p,
            "subject_id,age,gender,bmi,sppb\na,70,female,25.5,10\nb,81,male,,7\n",
        )
        .unwrap();
        let t = load_demographics(&p).unwrap();
        assert_eq!(t["a"].gender, Some(1.0));
        assert_eq!(t["b"].gender, Some(0.0));
        assert_eq!(t["b"].bmi, None);
    }
}
