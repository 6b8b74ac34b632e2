use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{accuracy_of, error_of, fpr_of, tpr_of, Rule, RuleScores};
use crate::error::{Error, Result};

/// Default number of sweep thresholds.
pub const DEFAULT_SWEEP_POINTS: usize = 512;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocRow {
    #[serde(rename = "T")]
    pub t: f64,
    pub tpr: f64,
    pub fpr: f64,
    pub accuracy: f64,
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    /// Free-form run label, e.g. the attack mode.
    pub label: String,
    pub rule: Rule,
    pub config_hash: String,
    pub seed: u64,
    pub n_natural: usize,
    pub n_perturbed: usize,
    /// Manifest of the attack that produced the perturbed set.
    #[serde(default)]
    pub attack: Option<serde_json::Value>,
    #[serde(default)]
    pub auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub meta: ReportMeta,
    pub rows: Vec<RocRow>,
}

/// `points` evenly spaced order statistics of `scores` (nearest rank),
/// ascending, from the minimum to the maximum.
pub fn quantile_thresholds(scores: &[f64], points: usize) -> Result<Vec<f64>> {
    if scores.is_empty() || points == 0 {
        return Err(Error::Empty("quantile thresholds need scores and points".into()));
    }
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if points == 1 {
        return Ok(vec![s[0]]);
    }
    Ok((0..points)
        .map(|i| {
            let pos = (i as f64 * (n - 1) as f64 / (points - 1) as f64).round() as usize;
            s[pos]
        })
        .collect())
}

/// TPR/FPR/accuracy/error at each threshold (ascending).
pub fn roc_sweep(
    nat: &RuleScores,
    nat_labels: &[usize],
    adv: &RuleScores,
    adv_labels: &[usize],
    thresholds: &[f64],
) -> Result<Vec<RocRow>> {
    if thresholds.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(Error::invalid("thresholds must be sorted ascending"));
    }
    if nat_labels.len() != nat.len() || adv_labels.len() != adv.len() {
        return Err(Error::shape("roc_sweep", "label count differs from sample count"));
    }
    Ok(thresholds
        .iter()
        .map(|&t| RocRow {
            t,
            tpr: tpr_of(nat, t),
            fpr: fpr_of(adv, adv_labels, t),
            accuracy: accuracy_of(nat, nat_labels, t),
            error: error_of(adv, adv_labels, t),
        })
        .collect())
}

impl EvalReport {
    pub fn to_json(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec_pretty(self)?)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("# config_hash={} seed={}\nthreshold,tpr,fpr,accuracy,error\n", self.meta.config_hash, self.meta.seed);
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.t, r.tpr, r.fpr, r.accuracy, r.error);
        }
        s
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_json()?)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_csv().as_bytes())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    /// Row with the largest threshold whose TPR reaches `target`.
    pub fn row_at_tpr(&self, target: f64) -> Option<&RocRow> {
        self.rows
            .iter()
            .filter(|r| r.tpr >= target)
            .max_by(|a, b| a.t.total_cmp(&b.t))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub label: String,
    pub rule: Rule,
    pub auc: Option<f64>,
    pub fpr_at_tpr95: Option<f64>,
}

/// Summarizes reports produced by one configuration; mixing hashes is an error.
pub fn aggregate_reports(reports: &[EvalReport]) -> Result<Vec<AggregateRow>> {
    let first = reports.first().ok_or_else(|| Error::Empty("no reports to aggregate".into()))?;
    for r in &reports[1..] {
        if r.meta.config_hash != first.meta.config_hash {
            return Err(Error::HashMismatch {
                expected: first.meta.config_hash.clone(),
                found: r.meta.config_hash.clone(),
            });
        }
    }
    Ok(reports
        .iter()
        .map(|r| AggregateRow {
            label: r.meta.label.clone(),
            rule: r.meta.rule,
            auc: r.meta.auc,
            fpr_at_tpr95: r.row_at_tpr(0.95).map(|row| row.fpr),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(hash: &str) -> ReportMeta {
        ReportMeta {
            label: "x".into(),
            rule: Rule::Integrated,
            config_hash: hash.into(),
            seed: 0,
            n_natural: 1,
            n_perturbed: 1,
            attack: None,
            auc: None,
        }
    }

    #[test]
    fn single_sample_sweep() {
        let nat = RuleScores { pred: vec![0], score: vec![1.0] };
        let adv = RuleScores { pred: vec![1], score: vec![0.5] };
        let rows = roc_sweep(&nat, &[0], &adv, &[0], &[0.0, 0.75, 2.0]).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!((rows[0].tpr, rows[0].fpr, rows[0].accuracy), (1.0, 1.0, 1.0));
        assert_eq!((rows[1].tpr, rows[1].fpr), (1.0, 0.0));
        assert_eq!((rows[2].tpr, rows[2].accuracy), (0.0, 0.0));
        assert!(roc_sweep(&nat, &[0], &adv, &[0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn quantiles_span_range() {
        let q = quantile_thresholds(&[3.0, 1.0, 2.0], 5).unwrap();
        assert_eq!(q.first(), Some(&1.0));
        assert_eq!(q.last(), Some(&3.0));
        assert_eq!(q.len(), 5);
    }

    #[test]
    fn mismatched_hashes_refused() {
        let a = EvalReport { meta: meta("aaaa"), rows: vec![] };
        let b = EvalReport { meta: meta("bbbb"), rows: vec![] };
        assert!(matches!(aggregate_reports(&[a.clone(), b]), Err(Error::HashMismatch { .. })));
        assert_eq!(aggregate_reports(&[a.clone(), a]).unwrap().len(), 2);
    }

    #[test]
    fn csv_header() {
        let r = EvalReport {
            meta: meta("abcd"),
            rows: vec![RocRow { t: 0.5, tpr: 1.0, fpr: 0.0, accuracy: 1.0, error: 0.0 }],
        };
        let csv = r.to_csv();
        assert!(csv.lines().nth(1) == Some("threshold,tpr,fpr,accuracy,error"));
        assert!(csv.contains("0.5,1,0,1,0"));
    }
}
