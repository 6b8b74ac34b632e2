//! Minimum-distortion attacks found by bisection over a penalty weight.
//!
//! For each sample, unconstrained PGD minimizes
//! `−max_{i≠y} z(H(x′))_i + c·‖x′ − x‖₂²`. An attempt succeeds when the
//! generative classifier no longer predicts `y` and the winning wrong logit
//! exceeds the detection threshold `T`. Success moves `c` up (penalize
//! distortion harder), failure moves it down.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attacks::{aggregate_detector, pgd, AttackContext, AttackLoss, Direction, Norm, NormBall, PgdConfig};
use crate::error::{Error, Result};
use crate::models::Model;
use crate::numerics::{argmax, l2_norm, max_excluding, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BsearchConfig {
    pub c_init: f64,
    pub c_lo: f64,
    pub c_hi: f64,
    /// Bisection rounds after the initial attempt at `c_init`.
    pub depth: usize,
    pub pgd: PgdConfig,
    pub threshold: f64,
}

impl BsearchConfig {
    /// c ∈ [0, 8] starting at the midpoint, 20 rounds, 1000 Adam steps of size 1.0, T = 3.6.
    pub fn mnist_default() -> Self {
        Self {
            c_init: 4.0,
            c_lo: 0.0,
            c_hi: 8.0,
            depth: 20,
            pgd: PgdConfig::new(1000, 1.0),
            threshold: 3.6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.c_lo && self.c_lo <= self.c_init && self.c_init <= self.c_hi) {
            return Err(Error::invalid(format!(
                "need 0 ≤ c_lo ≤ c_init ≤ c_hi, got {} / {} / {}",
                self.c_lo, self.c_init, self.c_hi
            )));
        }
        self.pgd.validate()
    }
}

/// Largest `T` such that at least `target` of `scores` are `≥ T`: the
/// `⌈target·N⌉`-th largest score.
pub fn threshold_for_tpr(scores: &[f64], target: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Empty("no natural scores".into()));
    }
    if !(target > 0.0 && target <= 1.0) {
        return Err(Error::invalid(format!("target TPR must lie in (0, 1], got {target}")));
    }
    let mut s = scores.to_vec();
    s.sort_by(|a, b| b.total_cmp(a));
    let m = ((target * s.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    Ok(s[m.min(s.len()) - 1])
}

/// Generative-rule threshold for `target` TPR on naturals: scores are `max_k z(h_k(x))`.
pub fn generative_threshold_for_tpr(detectors: &[Model], nat: &Tensor, target: f64) -> Result<f64> {
    let h = aggregate_detector(detectors, nat)?;
    let scores: Vec<f64> = (0..h.rows()).map(|r| h.row(r)[argmax(h.row(r))]).collect();
    threshold_for_tpr(&scores, target)
}

/// Whether `h` (one sample's detector logits) is an undetected misclassification of `y`.
pub fn is_false_positive(h: &[f64], y: usize, threshold: f64) -> bool {
    argmax(h) != y && max_excluding(h, y) > threshold
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub round: usize,
    pub c: f64,
    pub success: bool,
    pub l2: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BsearchOutcome {
    /// Perturbed sample from the largest successful `c`, if any.
    pub x_adv: Option<Vec<f64>>,
    pub success: bool,
    pub final_c: Option<f64>,
    pub trace: Vec<TraceRow>,
}

impl BsearchOutcome {
    pub fn l2(&self, x: &[f64]) -> Option<f64> {
        self.x_adv.as_ref().map(|a| {
            let d: Vec<f64> = a.iter().zip(x).map(|(p, q)| p - q).collect();
            l2_norm(&d)
        })
    }
}

pub fn min_distortion_attack(
    x: &[f64],
    y: usize,
    detectors: &[Model],
    cfg: &BsearchConfig,
    seed: u64,
) -> Result<BsearchOutcome> {
    cfg.validate()?;
    let ctx = AttackContext::detectors(detectors);
    let x0 = Tensor::new(vec![1, x.len()], x.to_vec())?;
    let ball = NormBall::unbounded(Norm::L2);
    let (mut lo, mut hi) = (cfg.c_lo, cfg.c_hi);
    let mut out = BsearchOutcome {
        x_adv: None,
        success: false,
        final_c: None,
        trace: Vec::with_capacity(cfg.depth + 1),
    };
    for round in 0..=cfg.depth {
        let c = if round == 0 { cfg.c_init } else { 0.5 * (lo + hi) };
        let run = pgd(
            &AttackLoss::PenalizedDetector { c },
            &ctx,
            &x0,
            &[y],
            &ball,
            &cfg.pgd,
            Direction::Minimize,
            crate::seed::derive(seed, &[round as u64]),
        )?;
        let h = aggregate_detector(detectors, &run.x)?;
        let success = is_false_positive(h.row(0), y, cfg.threshold);
        let delta: Vec<f64> = run.x.row(0).iter().zip(x).map(|(a, b)| a - b).collect();
        out.trace.push(TraceRow {
            round,
            c,
            success,
            l2: l2_norm(&delta),
        });
        if success {
            lo = c;
            out.success = true;
            out.final_c = Some(c);
            out.x_adv = Some(run.x.row(0).to_vec());
        } else {
            hi = c;
        }
    }
    Ok(out)
}

/// Every successful `c` is no larger than the next attempted `c`.
pub fn trace_has_prefix_structure(trace: &[TraceRow]) -> bool {
    trace
        .windows(2)
        .all(|w| !w[0].success || w[0].c <= w[1].c)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistortionSummary {
    /// Mean `‖x′ − x‖₂` over successful samples.
    pub mean_l2: f64,
    /// Fraction of samples turned into undetected misclassifications.
    pub fpr: f64,
    pub outcomes: Vec<BsearchOutcome>,
}

impl DistortionSummary {
    pub fn trace_csv(&self) -> String {
        let mut s = String::from("sample_id,round,c,success,l2\n");
        for (i, o) in self.outcomes.iter().enumerate() {
            for r in &o.trace {
                let _ = writeln!(s, "{i},{},{},{},{}", r.round, r.c, r.success as u8, r.l2);
            }
        }
        s
    }

    pub fn write_trace_csv(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.trace_csv().as_bytes())
    }
}

/// Runs the bisection on every row of `x`; `cfg.threshold` should come from
/// [`generative_threshold_for_tpr`] at 0.95.
pub fn mean_l2_distortion(
    detectors: &[Model],
    x: &Tensor,
    labels: &[usize],
    cfg: &BsearchConfig,
    seed: u64,
) -> Result<DistortionSummary> {
    if x.rows() != labels.len() {
        return Err(Error::shape("mean_l2_distortion", format!("{} labels for {} samples", labels.len(), x.rows())));
    }
    let outcomes = (0..x.rows())
        .map(|i| min_distortion_attack(x.row(i), labels[i], detectors, cfg, crate::seed::derive(seed, &[i as u64])))
        .collect::<Result<Vec<_>>>()?;
    let dists: Vec<f64> = outcomes.iter().enumerate().filter_map(|(i, o)| o.l2(x.row(i))).collect();
    if dists.is_empty() {
        return Err(Error::Empty("no sample was successfully attacked".into()));
    }
    Ok(DistortionSummary {
        mean_l2: dists.iter().sum::<f64>() / dists.len() as f64,
        fpr: dists.len() as f64 / x.rows() as f64,
        outcomes,
    })
}
