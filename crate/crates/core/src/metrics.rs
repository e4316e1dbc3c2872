//! Classification metrics, rank statistics and confidence intervals.
//! Class "good" (label 1) is the positive class throughout.

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

fn check_inputs(scores: &[f64], labels: &[f64]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::InvalidArgument("no samples to evaluate".into()));
    }
    if let Some(l) = labels.iter().find(|&&l| l != 0.0 && l != 1.0) {
        return Err(Error::InvalidArgument(format!("label {l} is not 0 or 1")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite { op: "scores".into() });
    }
    Ok(())
}

/// Predicts positive when `score >= threshold`.
pub fn confusion(scores: &[f64], labels: &[f64], threshold: f64) -> Result<ConfusionCounts> {
    check_inputs(scores, labels)?;
    let mut c = ConfusionCounts::default();
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l == 1.0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasicMetrics {
    pub accuracy: f64,
    pub recall: f64,
    pub specificity: f64,
    pub precision: f64,
    pub f1: f64,
    /// Metrics whose denominator was zero and were reported as 0.
    pub warnings: Vec<String>,
}

pub fn basic_metrics(c: &ConfusionCounts) -> Result<BasicMetrics> {
    if c.total() == 0 {
        return Err(Error::InvalidArgument("confusion counts are empty".into()));
    }
    let mut warnings = Vec::new();
    let mut ratio = |name: &str, num: u64, den: u64| {
        if den == 0 {
            warn!("{name} has a zero denominator; reporting 0");
            warnings.push(format!("{name}: zero denominator, reported as 0"));
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let accuracy = ratio("accuracy", c.tp + c.tn, c.total());
    let recall = ratio("recall", c.tp, c.tp + c.fn_);
    let specificity = ratio("specificity", c.tn, c.tn + c.fp);
    let precision = ratio("precision", c.tp, c.tp + c.fp);
    // 2PR/(P+R) in count form, exact for the same tallies
    let f1 = if c.tp == 0 {
        warn!("f1 has a zero denominator; reporting 0");
        warnings.push("f1: zero denominator, reported as 0".into());
        0.0
    } else {
        (2 * c.tp) as f64 / (2 * c.tp + c.fp + c.fn_) as f64
    };
    Ok(BasicMetrics {
        accuracy,
        recall,
        specificity,
        precision,
        f1,
        warnings,
    })
}

/// Midranks (1-based) of `values`; ties share the mean of their ranks.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Mann-Whitney estimate of P(score⁺ > score⁻) + ½·P(tie).
pub fn auroc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l == 1.0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidArgument("auroc needs both classes".into()));
    }
    let ranks = midranks(scores);
    let pos_rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l == 1.0).map(|(r, _)| r).sum();
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Step-wise area under the precision-recall curve (average precision).
/// Tied scores enter as one threshold.
pub fn auprc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l == 1.0).count();
    if n_pos == 0 {
        return Err(Error::InvalidArgument("auprc needs at least one positive".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp, mut prev_recall, mut area) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1.0 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(area)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub point: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lo: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub hi: Option<f64>,
}

impl Estimate {
    pub fn point(v: f64) -> Self {
        Self {
            point: v,
            lo: None,
            hi: None,
        }
    }
}

pub const METRIC_NAMES: [&str; 7] = ["auroc", "accuracy", "recall", "specificity", "f1", "precision", "auprc"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auroc: Estimate,
    pub accuracy: Estimate,
    /// Sensitivity.
    pub recall: Estimate,
    pub specificity: Estimate,
    pub f1: Estimate,
    pub precision: Estimate,
    pub auprc: Estimate,
    pub n_runs: usize,
    pub threshold: f64,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub warnings: Vec<String>,
}

impl MetricsReport {
    pub fn get(&self, name: &str) -> Option<&Estimate> {
        Some(match name {
            "auroc" => &self.auroc,
            "accuracy" => &self.accuracy,
            "recall" => &self.recall,
            "specificity" => &self.specificity,
            "f1" => &self.f1,
            "precision" => &self.precision,
            "auprc" => &self.auprc,
            _ => return None,
        })
    }

    fn get_mut(&mut self, name: &str) -> &mut Estimate {
        match name {
            "auroc" => &mut self.auroc,
            "accuracy" => &mut self.accuracy,
            "recall" => &mut self.recall,
            "specificity" => &mut self.specificity,
            "f1" => &mut self.f1,
            "precision" => &mut self.precision,
            "auprc" => &mut self.auprc,
            _ => unreachable!("unknown metric {name}"),
        }
    }
}

/// All metrics for one set of scores.
pub fn evaluate_scores(scores: &[f64], labels: &[f64], threshold: f64) -> Result<MetricsReport> {
    let c = confusion(scores, labels, threshold)?;
    let b = basic_metrics(&c)?;
    Ok(MetricsReport {
        auroc: Estimate::point(auroc(scores, labels)?),
        accuracy: Estimate::point(b.accuracy),
        recall: Estimate::point(b.recall),
        specificity: Estimate::point(b.specificity),
        f1: Estimate::point(b.f1),
        precision: Estimate::point(b.precision),
        auprc: Estimate::point(auprc(scores, labels)?),
        n_runs: 1,
        threshold,
        warnings: b.warnings,
    })
}

/// Linear-interpolation percentile of sorted values, `q` in [0, 1].
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn summarize(values: &mut [f64]) -> Estimate {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    values.sort_by(f64::total_cmp);
    // widened to contain the mean for heavily skewed inputs
    Estimate {
        point: mean,
        lo: Some(percentile(values, 0.025).min(mean)),
        hi: Some(percentile(values, 0.975).max(mean)),
    }
}

/// Mean over runs with a 2.5–97.5 percentile interval per metric.
pub fn ci_over_runs(runs: &[MetricsReport]) -> Result<MetricsReport> {
    if runs.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "confidence intervals need at least 2 runs, got {}",
            runs.len()
        )));
    }
    let mut out = runs[0].clone();
    for name in METRIC_NAMES {
        let mut v: Vec<f64> = runs.iter().map(|r| r.get(name).expect("known metric").point).collect();
        *out.get_mut(name) = summarize(&mut v);
    }
    out.n_runs = runs.len();
    out.warnings = runs.iter().flat_map(|r| r.warnings.iter().cloned()).collect();
    out.warnings.sort();
    out.warnings.dedup();
    Ok(out)
}

/// Point estimates from the full sample, intervals from resampling test
/// samples with replacement. Resamples lacking a class are redrawn.
pub fn bootstrap_ci(scores: &[f64], labels: &[f64], threshold: f64, resamples: usize, seed: u64) -> Result<MetricsReport> {
    let full = evaluate_scores(scores, labels, threshold)?;
    if resamples < 2 {
        return Err(Error::InvalidArgument("bootstrap needs at least 2 resamples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = scores.len();
    let mut runs = Vec::with_capacity(resamples);
    let (mut s, mut l) = (vec![0.0; n], vec![0.0; n]);
    let mut attempts = 0usize;
    while runs.len() < resamples {
        attempts += 1;
        if attempts > resamples * 100 {
            return Err(Error::InvalidArgument("bootstrap resamples keep missing a class".into()));
        }
        for k in 0..n {
            let i = rng.random_range(0..n);
            s[k] = scores[i];
            l[k] = labels[i];
        }
        let pos = l.iter().filter(|&&v| v == 1.0).count();
        if pos == 0 || pos == n {
            continue;
        }
        runs.push(evaluate_scores(&s, &l, threshold)?);
    }
    let ci = ci_over_runs(&runs)?;
    let mut out = full;
    for name in METRIC_NAMES {
        let e = ci.get(name).expect("known metric");
        let p = out.get_mut(name);
        p.lo = e.lo.map(|v| v.min(p.point));
        p.hi = e.hi.map(|v| v.max(p.point));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eight_sample_fixture() {
        let scores = [0.9, 0.8, 0.7, 0.6, 0.4, 0.3, 0.2, 0.1];
        let labels = [1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0];
        let c = confusion(&scores, &labels, 0.5).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 3, tn: 2, fp: 1, fn_: 2 });
        let b = basic_metrics(&c).unwrap();
        assert_eq!(b.accuracy, 0.625);
        assert_eq!(b.recall, 0.6);
        assert_eq!(b.precision, 0.75);
        assert_eq!(b.specificity, 2.0 / 3.0);
        assert!((b.f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn tie_at_threshold_is_positive() {
        let c = confusion(&[0.5, 0.5], &[0.0, 1.0], 0.5).unwrap();
        assert_eq!((c.tp, c.fp), (1, 1));
    }

    #[test]
    fn degenerate_precision_is_zero_with_warning() {
        let b = basic_metrics(&ConfusionCounts { tp: 0, tn: 4, fp: 0, fn_: 1 }).unwrap();
        assert_eq!(b.precision, 0.0);
        assert!(!b.warnings.is_empty());
        assert!(basic_metrics(&ConfusionCounts::default()).is_err());
    }

    #[test]
    fn perfect_and_reversed_auc() {
        let s = [0.1, 0.2, 0.8, 0.9];
        let l = [0.0, 0.0, 1.0, 1.0];
        assert_eq!(auroc(&s, &l).unwrap(), 1.0);
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        assert_eq!(auroc(&neg, &l).unwrap(), 0.0);
        assert_eq!(auprc(&s, &l).unwrap(), 1.0);
        assert!(auroc(&s, &[1.0; 4]).is_err());
        assert!(auprc(&s, &[0.0; 4]).is_err());
    }

    #[test]
    fn hand_built_pr_staircase() {
        // ranked labels 1,0,1,0: precision 1 at recall .5, 2/3 at recall 1
        let s = [0.9, 0.8, 0.7, 0.6];
        let l = [1.0, 0.0, 1.0, 0.0];
        assert!((auprc(&s, &l).unwrap() - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
        // a tied block enters at once: {1,0} tied then 1 → P=.5 at R=.5, P=2/3 at R=1
        let s = [0.9, 0.9, 0.5];
        let l = [1.0, 0.0, 1.0];
        assert!((auprc(&s, &l).unwrap() - (0.25 + 1.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn ci_over_five_runs() {
        let runs: Vec<MetricsReport> = [0.70, 0.72, 0.74, 0.76, 0.78]
            .iter()
            .map(|&a| {
                let mut r = evaluate_scores(&[0.1, 0.9], &[0.0, 1.0], 0.5).unwrap();
                r.auroc = Estimate::point(a);
                r
            })
            .collect();
        let ci = ci_over_runs(&runs).unwrap();
        assert!((ci.auroc.point - 0.74).abs() < 1e-12);
        assert!((ci.auroc.lo.unwrap() - 0.702).abs() < 1e-12);
        assert!((ci.auroc.hi.unwrap() - 0.778).abs() < 1e-12);
        assert_eq!(ci.accuracy.lo, Some(1.0));
        assert!(ci_over_runs(&runs[..1]).is_err());
    }

    #[test]
    fn bootstrap_brackets_point() {
        let s: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let l: Vec<f64> = (0..40).map(|i| (i % 3 == 0) as u8 as f64).collect();
        let r = bootstrap_ci(&s, &l, 0.0, 50, 1).unwrap();
        for name in METRIC_NAMES {
            let e = r.get(name).unwrap();
            assert!(e.lo.unwrap() <= e.point && e.point <= e.hi.unwrap(), "{name}");
        }
    }
}
