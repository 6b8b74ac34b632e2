//! Integrated and generative detection rules and their metrics.
//!
//! A sample passes a threshold `T` when its relevant detector logit is `≥ T`;
//! the same boundary convention holds for every rule. Argmax ties resolve to
//! the lowest class index.

mod auc;
mod report;

use serde::{Deserialize, Serialize};

pub use auc::auc;
pub use report::{aggregate_reports, quantile_thresholds, roc_sweep, DEFAULT_SWEEP_POINTS, AggregateRow, EvalReport, ReportMeta, RocRow};

use crate::attacks::aggregate_detector;
use crate::error::{Error, Result};
use crate::models::Model;
use crate::numerics::{argmax, Tensor};

/// Classifier `f`, one detector per class, and per-class thresholds.
#[derive(Clone, Debug)]
pub struct DetectionSystem {
    pub classifier: Model,
    pub detectors: Vec<Model>,
    pub thresholds: Vec<f64>,
}

impl DetectionSystem {
    pub fn new(classifier: Model, detectors: Vec<Model>, threshold: f64) -> Result<Self> {
        if detectors.len() != classifier.outputs() {
            return Err(Error::invalid(format!(
                "{} detectors for a classifier with {} outputs",
                detectors.len(),
                classifier.outputs()
            )));
        }
        if let Some(d) = detectors.iter().find(|d| d.outputs() != 1) {
            return Err(Error::invalid(format!("detector with {} outputs", d.outputs())));
        }
        let k = detectors.len();
        Ok(Self {
            classifier,
            detectors,
            thresholds: vec![threshold; k],
        })
    }

    pub fn classes(&self) -> usize {
        self.detectors.len()
    }

    pub fn set_universal_threshold(&mut self, t: f64) {
        self.thresholds.iter_mut().for_each(|v| *v = t);
    }

    /// `f` logits and `z(H(x))` for a batch.
    pub fn logits(&self, x: &Tensor) -> Result<SystemLogits> {
        Ok(SystemLogits {
            f: self.classifier.logits(x)?,
            h: aggregate_detector(&self.detectors, x)?,
        })
    }
}

/// Precomputed classifier and detector logits for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct SystemLogits {
    pub f: Tensor,
    pub h: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rule {
    /// Route by `f`'s prediction, threshold that class's detector.
    Integrated,
    /// Predict `argmax_k z(h_k(x))`, threshold the winning logit.
    Generative,
}

impl Rule {
    pub fn name(self) -> &'static str {
        match self {
            Rule::Integrated => "integrated",
            Rule::Generative => "generative",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Natural,
    Adversarial,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Class(usize),
    Reject,
}

/// Per sample: the predicted class and the detector logit the rule thresholds.
#[derive(Clone, Debug, PartialEq)]
pub struct RuleScores {
    pub pred: Vec<usize>,
    pub score: Vec<f64>,
}

impl RuleScores {
    pub fn from_logits(rule: Rule, logits: &SystemLogits) -> Self {
        let n = logits.h.rows();
        let pred: Vec<usize> = match rule {
            Rule::Integrated => (0..n).map(|r| argmax(logits.f.row(r))).collect(),
            Rule::Generative => (0..n).map(|r| argmax(logits.h.row(r))).collect(),
        };
        let score = pred.iter().enumerate().map(|(r, &k)| logits.h.row(r)[k]).collect();
        Self { pred, score }
    }

    pub fn len(&self) -> usize {
        self.pred.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pred.is_empty()
    }
}

fn frac(count: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        count as f64 / n as f64
    }
}

/// Fraction of naturals whose relevant logit is `≥ t`.
pub fn tpr_of(nat: &RuleScores, t: f64) -> f64 {
    frac(nat.score.iter().filter(|&&s| s >= t).count(), nat.len())
}

/// Fraction of perturbed samples that are misclassified and pass `t`; samples
/// the attack failed to push off their label never count.
pub fn fpr_of(adv: &RuleScores, labels: &[usize], t: f64) -> f64 {
    let hits = (0..adv.len())
        .filter(|&i| adv.pred[i] != labels[i] && adv.score[i] >= t)
        .count();
    frac(hits, adv.len())
}

/// Correct and not rejected, over naturals.
pub fn accuracy_of(nat: &RuleScores, labels: &[usize], t: f64) -> f64 {
    let hits = (0..nat.len())
        .filter(|&i| nat.pred[i] == labels[i] && nat.score[i] >= t)
        .count();
    frac(hits, nat.len())
}

/// Misclassified and not rejected, over perturbed samples.
pub fn error_of(adv: &RuleScores, labels: &[usize], t: f64) -> f64 {
    fpr_of(adv, labels, t)
}

/// Integrated rule with per-class thresholds: `k = argmax f`, natural iff
/// `z(h_k(x)) ≥ T_k`.
pub fn integrated_detect(sys: &DetectionSystem, x: &Tensor) -> Result<Vec<(Verdict, usize)>> {
    let s = RuleScores::from_logits(Rule::Integrated, &sys.logits(x)?);
    Ok((0..s.len())
        .map(|i| {
            let k = s.pred[i];
            let v = if s.score[i] >= sys.thresholds[k] { Verdict::Natural } else { Verdict::Adversarial };
            (v, k)
        })
        .collect())
}

/// `argmax_k z(h_k(x))`, lowest index on ties.
pub fn generative_classify(detectors: &[Model], x: &Tensor) -> Result<Vec<usize>> {
    let h = aggregate_detector(detectors, x)?;
    Ok((0..h.rows()).map(|r| argmax(h.row(r))).collect())
}

pub fn generative_detect(detectors: &[Model], x: &Tensor, t: f64) -> Result<Vec<Verdict>> {
    let h = aggregate_detector(detectors, x)?;
    Ok((0..h.rows())
        .map(|r| {
            let row = h.row(r);
            if row[argmax(row)] >= t {
                Verdict::Natural
            } else {
                Verdict::Adversarial
            }
        })
        .collect())
}

/// `f`'s prediction `k` unless `z(h_k(x)) < T_k`, in which case the sample is rejected.
pub fn integrated_classify_with_reject(sys: &DetectionSystem, x: &Tensor) -> Result<Vec<Decision>> {
    Ok(integrated_detect(sys, x)?
        .into_iter()
        .map(|(v, k)| match v {
            Verdict::Natural => Decision::Class(k),
            Verdict::Adversarial => Decision::Reject,
        })
        .collect())
}

pub fn tpr(sys: &DetectionSystem, nat: &Tensor, t: f64) -> Result<f64> {
    Ok(tpr_of(&RuleScores::from_logits(Rule::Integrated, &sys.logits(nat)?), t))
}

pub fn fpr(sys: &DetectionSystem, adv: &Tensor, labels: &[usize], t: f64) -> Result<f64> {
    check_labels(adv, labels)?;
    Ok(fpr_of(&RuleScores::from_logits(Rule::Integrated, &sys.logits(adv)?), labels, t))
}

/// `(accuracy on D, error on D′)` at a universal threshold.
pub fn accuracy_error(
    sys: &DetectionSystem,
    nat: &Tensor,
    nat_labels: &[usize],
    adv: &Tensor,
    adv_labels: &[usize],
    t: f64,
) -> Result<(f64, f64)> {
    check_labels(nat, nat_labels)?;
    check_labels(adv, adv_labels)?;
    let n = RuleScores::from_logits(Rule::Integrated, &sys.logits(nat)?);
    let a = RuleScores::from_logits(Rule::Integrated, &sys.logits(adv)?);
    Ok((accuracy_of(&n, nat_labels, t), error_of(&a, adv_labels, t)))
}

fn check_labels(x: &Tensor, labels: &[usize]) -> Result<()> {
    if x.rows() != labels.len() {
        return Err(Error::shape("detection", format!("{} labels for {} samples", labels.len(), x.rows())));
    }
    Ok(())
}

/// Fraction of correct verdicts over naturals `D` and the perturbed samples
/// that fool `f` (`f(x′) ≠ y`); routing and thresholds follow the integrated
/// rule with `sys.thresholds`.
pub fn detection_accuracy_of(nat: &RuleScores, adv: &RuleScores, adv_labels: &[usize], thresholds: &[f64]) -> f64 {
    let nat_ok = (0..nat.len()).filter(|&i| nat.score[i] >= thresholds[nat.pred[i]]).count();
    let fooling: Vec<usize> = (0..adv.len()).filter(|&i| adv.pred[i] != adv_labels[i]).collect();
    let adv_ok = fooling.iter().filter(|&&i| adv.score[i] < thresholds[adv.pred[i]]).count();
    frac(nat_ok + adv_ok, nat.len() + fooling.len())
}

/// Per-detector binary accuracy on `D_k^f ∪ D′_k^f` and its sample count.
pub fn per_detector_accuracy(
    nat: &RuleScores,
    adv: &RuleScores,
    adv_labels: &[usize],
    thresholds: &[f64],
) -> Vec<(f64, usize)> {
    (0..thresholds.len())
        .map(|k| {
            let t = thresholds[k];
            let nat_k: Vec<usize> = (0..nat.len()).filter(|&i| nat.pred[i] == k).collect();
            let adv_k: Vec<usize> = (0..adv.len())
                .filter(|&i| adv.pred[i] == k && adv.pred[i] != adv_labels[i])
                .collect();
            let ok = nat_k.iter().filter(|&&i| nat.score[i] >= t).count()
                + adv_k.iter().filter(|&&i| adv.score[i] < t).count();
            let n = nat_k.len() + adv_k.len();
            (frac(ok, n), n)
        })
        .collect()
}

pub fn detection_accuracy(sys: &DetectionSystem, nat: &Tensor, adv: &Tensor, adv_labels: &[usize]) -> Result<f64> {
    check_labels(adv, adv_labels)?;
    let n = RuleScores::from_logits(Rule::Integrated, &sys.logits(nat)?);
    let a = RuleScores::from_logits(Rule::Integrated, &sys.logits(adv)?);
    Ok(detection_accuracy_of(&n, &a, adv_labels, &sys.thresholds))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores(pred: &[usize], score: &[f64]) -> RuleScores {
        RuleScores {
            pred: pred.to_vec(),
            score: score.to_vec(),
        }
    }

    #[test]
    fn generative_rule_ties_and_shift() {
        let l = SystemLogits {
            f: Tensor::zeros(&[2, 3]),
            h: Tensor::from_rows(&[vec![0.2, 1.7, -3.0], vec![1.0, 1.0, 1.0]]).unwrap(),
        };
        let s = RuleScores::from_logits(Rule::Generative, &l);
        assert_eq!(s.pred, vec![1, 0]);
        let shifted = SystemLogits {
            f: l.f.clone(),
            h: l.h.map(|v| v + 10.0),
        };
        assert_eq!(RuleScores::from_logits(Rule::Generative, &shifted).pred, s.pred);
    }

    #[test]
    fn threshold_boundary_is_natural() {
        let s = scores(&[0, 1], &[2.0, 1.0]);
        assert_eq!(tpr_of(&s, 2.0), 0.5);
        assert_eq!(tpr_of(&s, f64::NEG_INFINITY), 1.0);
    }

    #[test]
    fn fpr_hand_count() {
        // Two fool f and pass, one fools f and is rejected, one keeps its label.
        let adv = scores(&[1, 1, 1, 0], &[5.0, 4.0, -1.0, 9.0]);
        assert_eq!(fpr_of(&adv, &[0, 0, 0, 0], 0.0), 0.5);
    }

    #[test]
    fn accuracy_error_extremes() {
        let nat = scores(&[0, 1, 1], &[0.5, -0.5, 2.0]);
        let labels = [0, 0, 1];
        assert!((accuracy_of(&nat, &labels, f64::NEG_INFINITY) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(accuracy_of(&nat, &labels, f64::INFINITY), 0.0);
        assert_eq!(error_of(&nat, &labels, f64::INFINITY), 0.0);
    }

    #[test]
    fn five_sample_enumeration() {
        let nat = scores(&[0, 1, 0], &[1.0, -2.0, 3.0]);
        let nat_y = [0, 1, 1];
        let adv = scores(&[1, 0], &[0.5, -0.5]);
        let adv_y = [0, 0];
        // naturals: correct & ≥0 -> sample 0 only
        assert!((accuracy_of(&nat, &nat_y, 0.0) - 1.0 / 3.0).abs() < 1e-15);
        // perturbed: sample 0 misclassified and passes; sample 1 keeps label
        assert_eq!(error_of(&adv, &adv_y, 0.0), 0.5);
    }

    #[test]
    fn eq1_constant_natural_detectors() {
        let nat = scores(&[0, 1, 0], &[1.0, 1.0, 1.0]);
        let adv = scores(&[1, 0, 1], &[1.0, 1.0, 1.0]);
        let adv_y = [0, 1, 1];
        // Only the first two perturbed samples fool f; all verdicts are "natural".
        let acc = detection_accuracy_of(&nat, &adv, &adv_y, &[0.0, 0.0]);
        assert!((acc - 3.0 / 5.0).abs() < 1e-15);
    }
}
