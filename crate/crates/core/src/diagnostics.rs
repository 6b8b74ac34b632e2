//! Finite-difference audit of every tape primitive and attack loss.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{loss_classifier_cw, AttackContext, AttackLoss};
use crate::error::{Error, Result};
use crate::models::{ArchSpec, Model};
use crate::numerics::{finite_difference_check, Tape, Tensor, Var};

/// Central-difference half width.
pub const PROBE: f64 = 1e-5;
/// Points closer than this to a relu or max switch are redrawn.
pub const MIN_KINK_MARGIN: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckEntry {
    pub name: String,
    pub points: usize,
    /// Draws rejected for lying near a non-differentiable switch.
    pub redrawn: usize,
    pub max_rel_error: f64,
}

type Build<'m> = Box<dyn Fn(&mut Tape<'m>, Var) -> Result<Var> + 'm>;

struct Case<'m> {
    name: &'static str,
    shape: Vec<usize>,
    /// Inputs are drawn uniformly from this interval.
    range: (f64, f64),
    build: Build<'m>,
    /// Extra smoothness margin that the tape cannot see (masks chosen from values).
    margin: Option<Box<dyn Fn(&Tensor) -> f64 + 'm>>,
}

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape matches")
}

/// `Σ c ⊙ v` with a fixed random `c`, so every output entry carries a distinct weight.
fn weighted<'m>(t: &mut Tape<'m>, v: Var, c: &Tensor) -> Result<Var> {
    let w = t.mul_const(v, c)?;
    t.sum(w)
}

fn case<'m>(name: &'static str, shape: &[usize], build: impl Fn(&mut Tape<'m>, Var) -> Result<Var> + 'm) -> Case<'m> {
    Case {
        name,
        shape: shape.to_vec(),
        range: (-1.0, 1.0),
        build: Box::new(build),
        margin: None,
    }
}

fn primitive_cases<'m>(rng: &mut ChaCha8Rng) -> Vec<Case<'m>> {
    let w43 = random(&[4, 3], -1.0, 1.0, rng);
    let a24 = random(&[2, 4], -1.0, 1.0, rng);
    let c23 = random(&[2, 3], -1.0, 1.0, rng);
    let c34 = random(&[3, 4], -1.0, 1.0, rng);
    let c3 = random(&[3], -1.0, 1.0, rng);
    let c4 = random(&[4], -1.0, 1.0, rng);
    let conv_w = random(&[3, 2, 3, 3], -0.5, 0.5, rng);
    let conv_x = random(&[2, 2, 4, 4], -1.0, 1.0, rng);
    let c_conv = random(&[2, 3, 4, 4], -1.0, 1.0, rng);
    let c_pool = random(&[2, 2, 2, 2], -1.0, 1.0, rng);
    let c_cat = random(&[3, 5], -1.0, 1.0, rng);
    let c12 = random(&[12], -1.0, 1.0, rng);
    let targets: Vec<f64> = (0..4).map(|_| rng.gen::<f64>()).collect();
    let labels = vec![0usize, 3, 1];

    let mut v: Vec<Case<'m>> = Vec::new();
    {
        let (w, c) = (w43.clone(), c34.clone());
        let c = Tensor::new(vec![3, 3], c.data()[..9].to_vec()).expect("9 values");
        v.push(case("matmul.lhs", &[3, 4], move |t, x| {
            let w = t.constant(w.clone());
            let y = t.matmul(x, w)?;
            weighted(t, y, &c)
        }));
    }
    {
        let (a, c) = (a24, c23.clone());
        v.push(case("matmul.rhs", &[4, 3], move |t, x| {
            let a = t.constant(a.clone());
            let y = t.matmul(a, x)?;
            weighted(t, y, &c)
        }));
    }
    {
        let (w, c) = (conv_w.clone(), c_conv.clone());
        v.push(case("conv2d.input", &[2, 2, 4, 4], move |t, x| {
            let w = t.constant(w.clone());
            let y = t.conv2d(x, w, 1)?;
            weighted(t, y, &c)
        }));
    }
    {
        let (xin, c) = (conv_x, c_conv);
        v.push(case("conv2d.weight", &[3, 2, 3, 3], move |t, w| {
            let x = t.constant(xin.clone());
            let y = t.conv2d(x, w, 1)?;
            weighted(t, y, &c)
        }));
    }
    {
        let c = c_pool;
        v.push(case("max_pool2", &[2, 2, 4, 4], move |t, x| {
            let y = t.max_pool2(x)?;
            weighted(t, y, &c)
        }));
    }
    {
        let c = c34.clone();
        v.push(case("relu", &[3, 4], move |t, x| {
            let y = t.relu(x)?;
            weighted(t, y, &c)
        }));
    }
    {
        let c = c34.clone();
        v.push(case("sigmoid", &[3, 4], move |t, x| {
            let y = t.sigmoid(x)?;
            weighted(t, y, &c)
        }));
    }
    {
        let (b, c) = (c4.clone(), c34.clone());
        v.push(case("add_bias.input", &[3, 4], move |t, x| {
            let b = t.constant(b.clone());
            let y = t.add_bias(x, b)?;
            let y = t.sigmoid(y)?;
            weighted(t, y, &c)
        }));
    }
    {
        let c = c34.clone();
        let base = random(&[3, 4], -1.0, 1.0, rng);
        v.push(case("add_bias.bias", &[4], move |t, b| {
            let x = t.constant(base.clone());
            let y = t.add_bias(x, b)?;
            let y = t.sigmoid(y)?;
            weighted(t, y, &c)
        }));
    }
    {
        let base = random(&[2, 3, 2, 2], -1.0, 1.0, rng);
        let c = random(&[2, 3, 2, 2], -1.0, 1.0, rng);
        v.push(case("add_bias.channel", &[3], move |t, b| {
            let x = t.constant(base.clone());
            let y = t.add_bias(x, b)?;
            let y = t.sigmoid(y)?;
            weighted(t, y, &c)
        }));
    }
    {
        let labels = labels.clone();
        v.push(case("softmax_cross_entropy", &[3, 4], move |t, x| {
            let l = t.softmax_cross_entropy(x, &labels)?;
            t.sum(l)
        }));
    }
    {
        let targets = targets.clone();
        let mut c = case("bce_with_logits", &[4], move |t, x| {
            let l = t.bce_with_logits(x, &targets)?;
            t.sum(l)
        });
        c.range = (-3.0, 3.0);
        v.push(c);
    }
    {
        let c = c34.clone();
        v.push(case("add", &[3, 4], move |t, x| {
            let s = t.sigmoid(x)?;
            let y = t.add(x, s)?;
            let y = t.mul(y, y)?;
            weighted(t, y, &c)
        }));
    }
    {
        let c = c34.clone();
        v.push(case("sub", &[3, 4], move |t, x| {
            let s = t.sigmoid(x)?;
            let y = t.sub(s, x)?;
            let y = t.mul(y, x)?;
            weighted(t, y, &c)
        }));
    }
    {
        let c = c34.clone();
        v.push(case("mul", &[3, 4], move |t, x| {
            let s = t.sigmoid(x)?;
            let y = t.mul(x, s)?;
            weighted(t, y, &c)
        }));
    }
    {
        let c = c34.clone();
        v.push(case("scale", &[3, 4], move |t, x| {
            let y = t.scale(x, -2.5)?;
            let y = t.sigmoid(y)?;
            weighted(t, y, &c)
        }));
    }
    {
        let c = c34.clone();
        v.push(case("neg", &[3, 4], move |t, x| {
            let y = t.neg(x)?;
            let y = t.sigmoid(y)?;
            weighted(t, y, &c)
        }));
    }
    {
        let c = c34.clone();
        v.push(case("add_scalar", &[3, 4], move |t, x| {
            let y = t.add_scalar(x, 0.7)?;
            let y = t.mul(y, y)?;
            weighted(t, y, &c)
        }));
    }
    {
        let c = c34.clone();
        v.push(case("mul_const", &[3, 4], move |t, x| {
            let y = t.mul(x, x)?;
            weighted(t, y, &c)
        }));
    }
    v.push(case("sum", &[3, 4], |t, x| {
        let y = t.sigmoid(x)?;
        t.sum(y)
    }));
    v.push(case("mean", &[3, 4], |t, x| {
        let y = t.mul(x, x)?;
        t.mean(y)
    }));
    v.push(case("max", &[3, 4], |t, x| {
        let y = t.sigmoid(x)?;
        t.max(y)
    }));
    {
        let c = c3.clone();
        v.push(case("row_max", &[3, 4], move |t, x| {
            let y = t.row_max(x, None)?;
            weighted(t, y, &c)
        }));
    }
    {
        let (c, labels) = (c3.clone(), labels.clone());
        v.push(case("row_max.excluding", &[3, 4], move |t, x| {
            let y = t.row_max(x, Some(&labels))?;
            weighted(t, y, &c)
        }));
    }
    {
        let (c, labels) = (c3.clone(), labels.clone());
        v.push(case("gather", &[3, 4], move |t, x| {
            let s = t.sigmoid(x)?;
            let y = t.gather(s, &labels)?;
            weighted(t, y, &c)
        }));
    }
    {
        let c = c_cat;
        v.push(case("concat_cols", &[3, 4], move |t, x| {
            let col = t.row_sum_sq(x)?;
            let y = t.concat_cols(x, col)?;
            let y = t.sigmoid(y)?;
            weighted(t, y, &c)
        }));
    }
    {
        let c = c3;
        v.push(case("row_sum_sq", &[3, 4], move |t, x| {
            let y = t.row_sum_sq(x)?;
            weighted(t, y, &c)
        }));
    }
    {
        let c = c12;
        v.push(case("reshape", &[3, 4], move |t, x| {
            let s = t.sigmoid(x)?;
            let y = t.reshape(s, &[12])?;
            weighted(t, y, &c)
        }));
    }
    v
}

/// Small models the loss checks differentiate through.
pub struct LossFixture {
    pub classifier: Model,
    pub detectors: Vec<Model>,
    pub labels: Vec<usize>,
    pub x0: Tensor,
}

impl LossFixture {
    pub fn new(seed: u64) -> Result<Self> {
        let d = 6;
        let classifier = Model::init(ArchSpec::mlp(&[d, 8, 3]), crate::seed::derive(seed, &[0]))?;
        let detectors = (0..3)
            .map(|k| Model::init(ArchSpec::mlp(&[d, 8, 1]), crate::seed::derive(seed, &[1, k])))
            .collect::<Result<Vec<_>>>()?;
        let mut rng = crate::seed::rng(seed, &[3]);
        Ok(Self {
            classifier,
            detectors,
            labels: vec![0, 1, 2, 1],
            x0: random(&[4, d], 0.0, 1.0, &mut rng),
        })
    }
}

fn loss_cases<'m>(fx: &'m LossFixture) -> Vec<Case<'m>> {
    let losses = [
        AttackLoss::ClassifierCw,
        AttackLoss::Detector,
        AttackLoss::SurrogateCombined,
        AttackLoss::PiecewiseCombined,
        AttackLoss::TargetedLogit { target: 2 },
        AttackLoss::PenalizedDetector { c: 0.7 },
        AttackLoss::InnerMaxBce,
        AttackLoss::CrossEntropy,
    ];
    losses
        .into_iter()
        .map(|loss| {
            let ctx = match loss {
                AttackLoss::InnerMaxBce => AttackContext::detector(&fx.detectors[0]),
                _ => AttackContext::combined(&fx.classifier, &fx.detectors),
            };
            let labels = fx.labels.clone();
            let x0 = fx.x0.clone();
            let piecewise = matches!(loss, AttackLoss::PiecewiseCombined);
            let name = loss.name();
            let build: Build<'m> = Box::new(move |t, x| {
                let l = loss.record(t, &ctx, x, &x0, &labels)?;
                t.sum(l)
            });
            let mut c = Case {
                name,
                shape: vec![4, 6],
                range: (0.0, 1.0),
                build,
                margin: None,
                    };
            if piecewise {
                let (f, labels) = (&fx.classifier, fx.labels.clone());
                c.margin = Some(Box::new(move |x: &Tensor| match f.logits(x) {
                    Ok(z) => (0..z.rows())
                        .map(|r| loss_classifier_cw(z.row(r), labels[r]).abs())
                        .fold(f64::INFINITY, f64::min),
                    Err(_) => 0.0,
                }));
            }
            c
        })
        .collect()
}

fn kink_margin<'m>(build: &Build<'m>, x: &Tensor) -> Result<f64> {
    let mut tape: Tape<'m> = Tape::new();
    let v = tape.leaf(x.clone(), true);
    build(&mut tape, v)?;
    Ok(tape.kink_margin())
}

fn run_case(c: &Case<'_>, points: usize, rng: &mut ChaCha8Rng) -> Result<GradcheckEntry> {
    let mut worst = 0.0f64;
    let mut redrawn = 0;
    let mut done = 0;
    while done < points {
        if redrawn > 20 * points {
            return Err(Error::invalid(format!("{}: no smooth points found", c.name)));
        }
        let x = random(&c.shape, c.range.0, c.range.1, rng);
        let extra = c.margin.as_ref().map_or(f64::INFINITY, |m| m(&x));
        if kink_margin(&c.build, &x)?.min(extra) < MIN_KINK_MARGIN {
            redrawn += 1;
            continue;
        }
        worst = worst.max(finite_difference_check(|t, v| (c.build)(t, v), &x, PROBE, None, rng)?);
        done += 1;
    }
    Ok(GradcheckEntry {
        name: c.name.to_string(),
        points,
        redrawn,
        max_rel_error: worst,
    })
}

/// Checks every primitive and attack loss at `points` random smooth points.
pub fn gradcheck_suite(points: usize, seed: u64) -> Result<Vec<GradcheckEntry>> {
    let mut rng = crate::seed::rng(seed, &[0]);
    let fixture = LossFixture::new(crate::seed::derive(seed, &[1]))?;
    let mut entries = Vec::new();
    for c in primitive_cases(&mut rng).iter().chain(loss_cases(&fixture).iter()) {
        entries.push(run_case(c, points, &mut rng)?);
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_covers_losses_and_passes_on_few_points() {
        let entries = gradcheck_suite(3, 0).unwrap();
        for name in ["relu", "conv2d.weight", "piecewise-combined", "inner-max-bce", "cross-entropy"] {
            assert!(entries.iter().any(|e| e.name == name), "{name}");
        }
        for e in &entries {
            assert!(e.max_rel_error < 1e-4, "{e:?}");
        }
    }
}
