//! Projected gradient descent over norm balls and the attack objectives it optimizes.

mod ball;
mod export;
mod losses;
mod noise;

use serde::{Deserialize, Serialize};

pub use ball::{Norm, NormBall, PROJECTION_SLACK};
pub use export::{read_tensor_dump, write_attack_export, write_tensor_dump, AttackManifest, TENSOR_MAGIC};
pub use losses::{
    aggregate_detector, loss_classifier_cw, loss_detector, loss_generative_cross_entropy, loss_inner_max_bce,
    loss_penalized_detector, loss_piecewise_combined, loss_surrogate_combined, loss_targeted_logit, row_argmax,
    AttackContext, AttackLoss,
};
pub use noise::{synthesize_from_noise, ClassGaussian};

use crate::error::{Error, Result};
use crate::numerics::{l2_norm, Tape, Tensor};
use crate::optim::{Adam, AdamConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepRule {
    /// Fresh Adam state per attack, learning rate = step size, raw gradient.
    #[default]
    Adam,
    /// `γ·g/‖g‖₂` for L2 balls, `γ·sign(g)` for L∞ balls.
    NormalizedSteepestDescent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Minimize,
    Maximize,
}

impl Direction {
    fn sign(self) -> f64 {
        match self {
            Direction::Minimize => 1.0,
            Direction::Maximize => -1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PgdConfig {
    pub steps: usize,
    pub step_size: f64,
    #[serde(default)]
    pub step_rule: StepRule,
    #[serde(default)]
    pub random_start: bool,
    #[serde(default = "one")]
    pub restarts: usize,
    #[serde(default = "unit_interval")]
    pub clip: [f64; 2],
}

fn one() -> usize {
    1
}

fn unit_interval() -> [f64; 2] {
    [0.0, 1.0]
}

impl PgdConfig {
    pub fn new(steps: usize, step_size: f64) -> Self {
        Self {
            steps,
            step_size,
            step_rule: StepRule::Adam,
            random_start: false,
            restarts: 1,
            clip: unit_interval(),
        }
    }

    pub fn with_rule(mut self, rule: StepRule) -> Self {
        self.step_rule = rule;
        self
    }

    pub fn with_clip(mut self, clip: [f64; 2]) -> Self {
        self.clip = clip;
        self
    }

    pub fn with_restarts(mut self, restarts: usize, random_start: bool) -> Self {
        self.restarts = restarts;
        self.random_start = random_start;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.restarts == 0 {
            return Err(Error::invalid("restarts must be at least 1"));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::invalid(format!("step size must be positive, got {}", self.step_size)));
        }
        if !(self.clip[0] <= self.clip[1]) {
            return Err(Error::invalid(format!("empty clip range {:?}", self.clip)));
        }
        Ok(())
    }
}

/// Perturbed batch plus the per-sample loss at the returned point.
#[derive(Clone, Debug, PartialEq)]
pub struct PgdOutput {
    pub x: Tensor,
    pub loss: Vec<f64>,
}

/// Rows attacked per computation record.
const PGD_CHUNK: usize = 512;

/// Projects `x − x0` onto the ball, then clips `x` to the box.
fn constrain(x: &mut Tensor, x0: &Tensor, ball: &NormBall, clip: [f64; 2]) {
    let d = x.row_len();
    let mut delta = vec![0.0; d];
    for r in 0..x.rows() {
        let (row, orig) = (x.row_mut(r), x0.row(r));
        for j in 0..d {
            delta[j] = row[j] - orig[j];
        }
        ball.project_row(&mut delta);
        for j in 0..d {
            row[j] = (orig[j] + delta[j]).clamp(clip[0], clip[1]);
        }
    }
}

/// Gradient of `sign · Σ_i L_i` with respect to the batch.
fn objective_grad(
    loss: &AttackLoss,
    ctx: &AttackContext<'_>,
    x: &Tensor,
    x0: &Tensor,
    labels: &[usize],
    sign: f64,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.leaf_ref(x, true);
    let per = loss.record(&mut tape, ctx, xv, x0, labels)?;
    let total = tape.sum(per)?;
    let total = tape.scale(total, sign)?;
    let mut g = tape.backward(total)?;
    Ok(g.take(xv))
}

/// Runs one PGD trajectory from `start`, returning the final point and
/// snapshots after each step count listed in `checkpoints`.
#[allow(clippy::too_many_arguments)]
fn descend(
    loss: &AttackLoss,
    ctx: &AttackContext<'_>,
    start: Tensor,
    x0: &Tensor,
    labels: &[usize],
    ball: &NormBall,
    cfg: &PgdConfig,
    sign: f64,
    checkpoints: &[usize],
) -> Result<(Tensor, Vec<Tensor>)> {
    let mut x = start;
    constrain(&mut x, x0, ball, cfg.clip);
    let mut snaps = Vec::new();
    if checkpoints.contains(&0) {
        snaps.push(x.clone());
    }
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.step_size,
            ..AdamConfig::default()
        },
        &[x.len()],
    );
    for step in 1..=cfg.steps {
        let g = objective_grad(loss, ctx, &x, x0, labels, sign)?;
        match cfg.step_rule {
            StepRule::Adam => adam.step(&mut [x.data_mut()], &[g.data()]),
            StepRule::NormalizedSteepestDescent => {
                for r in 0..x.rows() {
                    let gr = g.row(r);
                    let row = x.row_mut(r);
                    match ball.norm {
                        Norm::L2 => {
                            let n = l2_norm(gr);
                            if n > 0.0 {
                                for (v, gv) in row.iter_mut().zip(gr) {
                                    *v -= cfg.step_size * gv / n;
                                }
                            }
                        }
                        Norm::Linf => {
                            for (v, gv) in row.iter_mut().zip(gr) {
                                if *gv != 0.0 {
                                    *v -= cfg.step_size * gv.signum();
                                }
                            }
                        }
                    }
                }
            }
        }
        constrain(&mut x, x0, ball, cfg.clip);
        if checkpoints.contains(&step) {
            snaps.push(x.clone());
        }
    }
    Ok((x, snaps))
}

/// Projected gradient attack on a batch `x0` (`[n, d]`, rows inside the clip
/// range) with per-sample `labels`.
///
/// Every restart runs the full step budget; per sample, the restart with the
/// best final loss wins (earlier restarts win ties). Random starts for
/// restart `r` and global row `i` are drawn from a stream keyed by
/// `(seed, r, i)`, so adding restarts never changes earlier ones.
#[allow(clippy::too_many_arguments)]
pub fn pgd(
    loss: &AttackLoss,
    ctx: &AttackContext<'_>,
    x0: &Tensor,
    labels: &[usize],
    ball: &NormBall,
    cfg: &PgdConfig,
    direction: Direction,
    seed: u64,
) -> Result<PgdOutput> {
    cfg.validate()?;
    loss.validate(ctx)?;
    if x0.shape().len() != 2 {
        return Err(Error::shape("pgd", format!("expected [n, d] input, got {:?}", x0.shape())));
    }
    let n = x0.rows();
    if !labels.is_empty() && labels.len() != n {
        return Err(Error::shape("pgd", format!("{} labels for {n} samples", labels.len())));
    }
    let sign = direction.sign();
    let d = x0.row_len();
    let mut out_rows = Vec::new();
    let mut out_loss = Vec::with_capacity(n);
    let mut begin = 0;
    while begin < n {
        let end = (begin + PGD_CHUNK).min(n);
        let idx: Vec<usize> = (begin..end).collect();
        let xc = x0.select_rows(&idx);
        let lc: Vec<usize> = if labels.is_empty() { vec![] } else { labels[begin..end].to_vec() };
        let mut best: Option<(Tensor, Vec<f64>)> = None;
        for r in 0..cfg.restarts {
            let mut start = xc.clone();
            if cfg.random_start {
                for (i, row) in (begin..end).enumerate() {
                    let mut rng = crate::seed::rng(seed, &[r as u64, row as u64]);
                    let delta = ball.sample(d, &mut rng);
                    start.row_mut(i).iter_mut().zip(&delta).for_each(|(v, dv)| *v += dv);
                }
            }
            let (x, _) = descend(loss, ctx, start, &xc, &lc, ball, cfg, sign, &[])?;
            let vals = loss.evaluate(ctx, &x, &xc, &lc)?;
            best = Some(match best {
                None => (x, vals),
                Some((mut bx, mut bv)) => {
                    for i in 0..vals.len() {
                        if sign * vals[i] < sign * bv[i] {
                            bv[i] = vals[i];
                            bx.row_mut(i).copy_from_slice(x.row(i));
                        }
                    }
                    (bx, bv)
                }
            });
        }
        let (bx, bv) = best.expect("restarts >= 1");
        out_rows.push(bx);
        out_loss.extend(bv);
        begin = end;
    }
    let x = if out_rows.is_empty() {
        Tensor::zeros(&[0, d])
    } else {
        Tensor::concat_rows(&out_rows.iter().collect::<Vec<_>>())?
    };
    Ok(PgdOutput { x, loss: out_loss })
}

/// Single-trajectory PGD that also returns the iterates after the listed step counts.
#[allow(clippy::too_many_arguments)]
pub fn pgd_trajectory(
    loss: &AttackLoss,
    ctx: &AttackContext<'_>,
    x0: &Tensor,
    labels: &[usize],
    ball: &NormBall,
    cfg: &PgdConfig,
    direction: Direction,
    checkpoints: &[usize],
) -> Result<Vec<Tensor>> {
    cfg.validate()?;
    loss.validate(ctx)?;
    let steps = checkpoints.iter().copied().max().unwrap_or(0).min(cfg.steps);
    let cfg = PgdConfig { steps, ..cfg.clone() };
    let (_, snaps) = descend(loss, ctx, x0.clone(), x0, labels, ball, &cfg, direction.sign(), checkpoints)?;
    Ok(snaps)
}
