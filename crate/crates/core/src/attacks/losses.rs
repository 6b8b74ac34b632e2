//! Attack objectives, both as plain functions of logit rows and as tape graphs.

use serde::{Deserialize, Serialize};

use super::Direction;
use crate::error::{Error, Result};
use crate::models::Model;
use crate::numerics::{argmax, bce_with_logit, max_excluding, Tape, Tensor, Var};

/// `z_y − max_{i≠y} z_i`; negative iff `x′` is misclassified.
pub fn loss_classifier_cw(f: &[f64], y: usize) -> f64 {
    f[y] - max_excluding(f, y)
}

/// `−max_{i≠y} z(H)_i`.
pub fn loss_detector(h: &[f64], y: usize) -> f64 {
    -max_excluding(h, y)
}

/// Appends `(−max_{j≠y} z(H)_j + 1)·max_j z(f)_j` to `f`, then returns
/// `max_i z(g)_i − max_{i≠y} z(f)_i`.
pub fn loss_surrogate_combined(f: &[f64], h: &[f64], y: usize) -> f64 {
    let fmax = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let extra = (-max_excluding(h, y) + 1.0) * fmax;
    fmax.max(extra) - max_excluding(f, y)
}

/// The classifier margin while `f` still predicts `y` (ties included), the
/// detector loss afterwards.
pub fn loss_piecewise_combined(f: &[f64], h: &[f64], y: usize) -> f64 {
    if f[y] >= max_excluding(f, y) {
        loss_classifier_cw(f, y)
    } else {
        loss_detector(h, y)
    }
}

pub fn loss_targeted_logit(z_t: f64) -> f64 {
    -z_t
}

/// `−max_{i≠y} z(H)_i + c·‖x′ − x‖₂²`.
pub fn loss_penalized_detector(h: &[f64], y: usize, x_adv: &[f64], x_orig: &[f64], c: f64) -> f64 {
    let d2: f64 = x_adv.iter().zip(x_orig).map(|(a, b)| (a - b) * (a - b)).sum();
    loss_detector(h, y) + c * d2
}

/// BCE of a detector logit against label 0, maximized by the inner attack.
pub fn loss_inner_max_bce(z: f64) -> f64 {
    bce_with_logit(z, 0.0)
}

/// Softmax cross-entropy of the detector logits against `y`.
pub fn loss_generative_cross_entropy(h: &[f64], y: usize) -> f64 {
    let m = h.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + h.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - h[y]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum AttackLoss {
    ClassifierCw,
    Detector,
    SurrogateCombined,
    PiecewiseCombined,
    /// Logit `target` of the detectors when present, else of the classifier.
    TargetedLogit { target: usize },
    PenalizedDetector { c: f64 },
    InnerMaxBce,
    /// Softmax cross-entropy on the detector logits.
    CrossEntropy,
}

impl AttackLoss {
    pub fn name(&self) -> &'static str {
        match self {
            AttackLoss::ClassifierCw => "classifier-cw",
            AttackLoss::Detector => "detector",
            AttackLoss::SurrogateCombined => "surrogate-combined",
            AttackLoss::PiecewiseCombined => "piecewise-combined",
            AttackLoss::TargetedLogit { .. } => "targeted-logit",
            AttackLoss::PenalizedDetector { .. } => "penalized-detector",
            AttackLoss::InnerMaxBce => "inner-max-bce",
            AttackLoss::CrossEntropy => "cross-entropy",
        }
    }

    /// The direction in which the loss produces an attack.
    pub fn default_direction(&self) -> Direction {
        match self {
            AttackLoss::InnerMaxBce | AttackLoss::CrossEntropy => Direction::Maximize,
            _ => Direction::Minimize,
        }
    }

    pub fn needs_classifier(&self) -> bool {
        matches!(
            self,
            AttackLoss::ClassifierCw | AttackLoss::SurrogateCombined | AttackLoss::PiecewiseCombined
        )
    }

    pub fn needs_detectors(&self) -> bool {
        !matches!(self, AttackLoss::ClassifierCw | AttackLoss::TargetedLogit { .. })
    }

    fn uses_labels(&self) -> bool {
        !matches!(self, AttackLoss::TargetedLogit { .. } | AttackLoss::InnerMaxBce)
    }

    pub fn validate(&self, ctx: &AttackContext<'_>) -> Result<()> {
        if self.needs_classifier() && ctx.classifier.is_none() {
            return Err(Error::invalid(format!("{} loss needs a classifier", self.name())));
        }
        if self.needs_detectors() && ctx.detectors.is_empty() {
            return Err(Error::invalid(format!("{} loss needs detectors", self.name())));
        }
        match self {
            AttackLoss::InnerMaxBce if ctx.detectors.len() != 1 => Err(Error::invalid(
                "inner-max-bce attacks exactly one detector",
            )),
            AttackLoss::PenalizedDetector { c } if !(*c >= 0.0) => {
                Err(Error::invalid(format!("penalty weight must be non-negative, got {c}")))
            }
            AttackLoss::TargetedLogit { target } => {
                let width = ctx.target_width();
                if *target >= width {
                    Err(Error::invalid(format!("target {target} out of range for {width} logits")))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    /// Per-sample loss values for a batch.
    pub fn evaluate(&self, ctx: &AttackContext<'_>, x: &Tensor, x0: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let xv = tape.leaf_ref(x, false);
        let out = self.record(&mut tape, ctx, xv, x0, labels)?;
        Ok(tape.value(out).data().to_vec())
    }

    /// Records the per-sample loss `[n]` of `x` (perturbed) against `x0`.
    pub fn record<'a>(
        &self,
        tape: &mut Tape<'a>,
        ctx: &AttackContext<'a>,
        x: Var,
        x0: &Tensor,
        labels: &[usize],
    ) -> Result<Var> {
        self.validate(ctx)?;
        let n = tape.value(x).rows();
        if self.uses_labels() && labels.len() != n {
            return Err(Error::shape("attack loss", format!("{} labels for {n} samples", labels.len())));
        }
        let zf = match ctx.classifier {
            Some(f) if self.needs_classifier() || (ctx.detectors.is_empty() && !self.needs_detectors()) => {
                Some(f.forward(tape, x, false)?.0)
            }
            _ => None,
        };
        let zh = if self.needs_detectors() || matches!(self, AttackLoss::TargetedLogit { .. }) && !ctx.detectors.is_empty() {
            Some(ctx.record_h(tape, x)?)
        } else {
            None
        };
        let f = || zf.ok_or_else(|| Error::invalid("classifier logits unavailable"));
        let h = || zh.ok_or_else(|| Error::invalid("detector logits unavailable"));
        match self {
            AttackLoss::ClassifierCw => cw(tape, f()?, labels),
            AttackLoss::Detector => detector(tape, h()?, labels),
            AttackLoss::SurrogateCombined => {
                let (f, h) = (f()?, h()?);
                let fmax = tape.row_max(f, None)?;
                let hmax = tape.row_max(h, Some(labels))?;
                let one_minus = {
                    let neg = tape.neg(hmax)?;
                    tape.add_scalar(neg, 1.0)?
                };
                let extra = tape.mul(one_minus, fmax)?;
                let g = tape.concat_cols(f, extra)?;
                let gmax = tape.row_max(g, None)?;
                let fother = tape.row_max(f, Some(labels))?;
                tape.sub(gmax, fother)
            }
            AttackLoss::PiecewiseCombined => {
                let (f, h) = (f()?, h()?);
                let fz = tape.value(f).clone();
                let mask: Vec<f64> = labels
                    .iter()
                    .enumerate()
                    .map(|(r, &y)| {
                        let row = fz.row(r);
                        if row[y] >= max_excluding(row, y) {
                            1.0
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let inv: Vec<f64> = mask.iter().map(|m| 1.0 - m).collect();
                let a = cw(tape, f, labels)?;
                let b = detector(tape, h, labels)?;
                let a = tape.mul_const(a, &Tensor::vector(mask))?;
                let b = tape.mul_const(b, &Tensor::vector(inv))?;
                tape.add(a, b)
            }
            AttackLoss::TargetedLogit { target } => {
                let z = match zh {
                    Some(h) => h,
                    None => f()?,
                };
                let z = tape.gather(z, &vec![*target; n])?;
                tape.neg(z)
            }
            AttackLoss::PenalizedDetector { c } => {
                let d = detector(tape, h()?, labels)?;
                let orig = tape.constant(x0.clone());
                let diff = tape.sub(x, orig)?;
                let sq = tape.row_sum_sq(diff)?;
                let pen = tape.scale(sq, *c)?;
                tape.add(d, pen)
            }
            AttackLoss::InnerMaxBce => tape.bce_with_logits(h()?, &vec![0.0; n]),
            AttackLoss::CrossEntropy => tape.softmax_cross_entropy(h()?, labels),
        }
    }
}

fn cw(tape: &mut Tape<'_>, f: Var, labels: &[usize]) -> Result<Var> {
    let zy = tape.gather(f, labels)?;
    let other = tape.row_max(f, Some(labels))?;
    tape.sub(zy, other)
}

fn detector(tape: &mut Tape<'_>, h: Var, labels: &[usize]) -> Result<Var> {
    let other = tape.row_max(h, Some(labels))?;
    tape.neg(other)
}

/// Read-only models an attack differentiates through.
#[derive(Clone, Debug, Default)]
pub struct AttackContext<'m> {
    pub classifier: Option<&'m Model>,
    pub detectors: Vec<&'m Model>,
}

impl<'m> AttackContext<'m> {
    pub fn classifier(f: &'m Model) -> Self {
        Self {
            classifier: Some(f),
            detectors: Vec::new(),
        }
    }

    pub fn detectors(h: &'m [Model]) -> Self {
        Self {
            classifier: None,
            detectors: h.iter().collect(),
        }
    }

    pub fn detector(h: &'m Model) -> Self {
        Self {
            classifier: None,
            detectors: vec![h],
        }
    }

    pub fn combined(f: &'m Model, h: &'m [Model]) -> Self {
        Self {
            classifier: Some(f),
            detectors: h.iter().collect(),
        }
    }

    fn target_width(&self) -> usize {
        if self.detectors.is_empty() {
            self.classifier.map_or(0, Model::outputs)
        } else {
            self.detectors.len()
        }
    }

    /// Records `z(H(x))` as `[n, K]`, column `i` holding detector `i`'s logit.
    pub fn record_h<'a>(&self, tape: &mut Tape<'a>, x: Var) -> Result<Var>
    where
        'm: 'a,
    {
        let mut acc: Option<Var> = None;
        for d in &self.detectors {
            if d.outputs() != 1 {
                return Err(Error::invalid(format!("detector has {} outputs, expected 1", d.outputs())));
            }
            let (z, _) = d.forward(tape, x, false)?;
            acc = Some(match acc {
                None => z,
                Some(a) => tape.concat_cols(a, z)?,
            });
        }
        acc.ok_or_else(|| Error::invalid("no detectors in attack context"))
    }
}

/// `[n, K]` matrix whose column `i` is detector `i`'s logit.
pub fn aggregate_detector(detectors: &[Model], x: &Tensor) -> Result<Tensor> {
    if detectors.is_empty() {
        return Err(Error::invalid("no detectors to aggregate"));
    }
    let cols: Vec<Vec<f64>> = detectors.iter().map(|d| d.scores(x)).collect::<Result<_>>()?;
    let n = x.rows();
    let k = cols.len();
    let mut data = Vec::with_capacity(n * k);
    for r in 0..n {
        data.extend(cols.iter().map(|c| c[r]));
    }
    Tensor::new(vec![n, k], data)
}

/// Lowest-index argmax per row.
pub fn row_argmax(z: &Tensor) -> Vec<usize> {
    (0..z.rows()).map(|r| argmax(z.row(r))).collect()
}
