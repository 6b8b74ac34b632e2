use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{train_toy_detector, ToyTraining};
use crate::attacks::{NormBall, PgdConfig, StepRule};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{ArchSpec, Model};
use crate::numerics::Tensor;
use crate::optim::AdamConfig;

/// Planar two-class layouts; class 1 is the detector's in-class set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Toy2DKind {
    /// Class 1 on a ring of radius 1, class 0 on a ring of radius 3.
    Circles,
    /// Two interleaved half circles of radius 2.
    Moons,
    /// Class 1 in nine tight clusters on a 3×3 lattice, class 0 uniform over the square.
    GridVsScattered,
}

impl std::str::FromStr for Toy2DKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "circles" => Ok(Toy2DKind::Circles),
            "moons" => Ok(Toy2DKind::Moons),
            "grid-vs-scattered" => Ok(Toy2DKind::GridVsScattered),
            other => Err(Error::invalid(format!("unknown 2-D dataset `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Toy2DSpec {
    pub kind: Toy2DKind,
    #[serde(default = "default_points")]
    pub points_per_class: usize,
}

fn default_points() -> usize {
    1000
}

/// `points_per_class` samples of each class, class 1 first.
pub fn generate_2d(spec: &Toy2DSpec, seed: u64) -> Result<Dataset> {
    let mut rng = crate::seed::rng(seed, &[20]);
    let n = spec.points_per_class;
    let noise = |s: f64| Normal::new(0.0, s).expect("positive std");
    let tau = std::f64::consts::TAU;
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(2 * n);
    let ring = |r: f64, rng: &mut rand_chacha::ChaCha8Rng| {
        let a = rng.gen::<f64>() * tau;
        let j = noise(0.08);
        vec![(r + j.sample(rng)) * a.cos(), (r + j.sample(rng)) * a.sin()]
    };
    match spec.kind {
        Toy2DKind::Circles => {
            (0..n).for_each(|_| rows.push(ring(1.0, &mut rng)));
            (0..n).for_each(|_| rows.push(ring(3.0, &mut rng)));
        }
        Toy2DKind::Moons => {
            let j = noise(0.1);
            for _ in 0..n {
                let a = rng.gen::<f64>() * std::f64::consts::PI;
                rows.push(vec![2.0 * a.cos() - 1.0 + j.sample(&mut rng), 2.0 * a.sin() - 0.5 + j.sample(&mut rng)]);
            }
            for _ in 0..n {
                let a = rng.gen::<f64>() * std::f64::consts::PI;
                rows.push(vec![1.0 - 2.0 * a.cos() + j.sample(&mut rng), 0.5 - 2.0 * a.sin() + j.sample(&mut rng)]);
            }
        }
        Toy2DKind::GridVsScattered => {
            let j = noise(0.1);
            for i in 0..n {
                let c = i % 9;
                let (cx, cy) = (3.0 * (c % 3) as f64 - 3.0, 3.0 * (c / 3) as f64 - 3.0);
                rows.push(vec![cx + j.sample(&mut rng), cy + j.sample(&mut rng)]);
            }
            for _ in 0..n {
                rows.push(vec![rng.gen_range(-4.5..4.5), rng.gen_range(-4.5..4.5)]);
            }
        }
    }
    let y = (0..2 * n).map(|i| usize::from(i < n)).collect();
    Dataset::new(Tensor::from_rows(&rows)?, y, 2)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Synth2dConfig {
    pub data: Toy2DSpec,
    pub widths: Vec<usize>,
    pub training: ToyTraining,
    pub grid_points: usize,
    pub seed: u64,
}

impl Synth2dConfig {
    pub fn new(kind: Toy2DKind) -> Self {
        Self {
            data: Toy2DSpec {
                kind,
                points_per_class: default_points(),
            },
            widths: vec![2, 500, 500, 500, 500, 500, 1],
            training: ToyTraining {
                iterations: 300,
                batch_total: 320,
                adam: AdamConfig::with_lr(1e-4),
                ball: NormBall::linf(0.5).expect("valid radius"),
                attack: PgdConfig::new(10, 0.05).with_rule(StepRule::Adam).with_clip([f64::NEG_INFINITY, f64::INFINITY]),
            },
            grid_points: 256,
            seed: 0,
        }
    }
}

impl Default for Synth2dConfig {
    fn default() -> Self {
        Self::new(Toy2DKind::Circles)
    }
}

/// Sigmoid outputs over a regular grid; `values[j * xs.len() + i]` belongs to `(xs[i], ys[j])`.
#[derive(Clone, Debug, PartialEq)]
pub struct Field2D {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub values: Vec<f64>,
}

impl Field2D {
    pub fn csv(&self) -> String {
        let mut s = String::from("x,y,sigmoid\n");
        for (j, y) in self.ys.iter().enumerate() {
            for (i, x) in self.xs.iter().enumerate() {
                let _ = writeln!(s, "{x},{y},{}", self.values[j * self.xs.len() + i]);
            }
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.csv().as_bytes())
    }
}

#[derive(Clone, Debug)]
pub struct Synth2dResult {
    pub model: Model,
    pub field: Field2D,
    pub train: Dataset,
    /// Fresh in-class draws from the same generator.
    pub held_out: Tensor,
    pub held_out_mean_sigmoid: f64,
    /// Mean sigmoid over grid points whose L∞ distance to every in-class
    /// training point exceeds `2ε`.
    pub far_field_mean_sigmoid: f64,
    pub far_field_points: usize,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Trains the class-1 detector with AAT and maps its sigmoid output over the
/// data bounding box padded by `ε`.
pub fn train_and_map_2d(cfg: &Synth2dConfig) -> Result<Synth2dResult> {
    if cfg.widths.first() != Some(&2) || cfg.widths.last() != Some(&1) {
        return Err(Error::invalid("2-D detectors map 2 inputs to 1 logit"));
    }
    let train = generate_2d(&cfg.data, cfg.seed)?;
    let mut model = Model::init(ArchSpec::mlp(&cfg.widths), crate::seed::derive(cfg.seed, &[21]))?;
    train_toy_detector(&mut model, &train, &cfg.training, crate::seed::derive(cfg.seed, &[22]))?;

    let held = generate_2d(&cfg.data, crate::seed::derive(cfg.seed, &[23]))?;
    let held_idx = held.class_indices(1);
    let held_out = held.x.select_rows(&held_idx);
    let held_scores = model.scores(&held_out)?;
    let held_out_mean_sigmoid = held_scores.iter().map(|&z| sigmoid(z)).sum::<f64>() / held_scores.len() as f64;

    let eps = if cfg.training.ball.is_bounded() { cfg.training.ball.eps } else { 0.0 };
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for r in 0..train.len() {
        for d in 0..2 {
            lo[d] = lo[d].min(train.x.row(r)[d]);
            hi[d] = hi[d].max(train.x.row(r)[d]);
        }
    }
    let xs = super::uniform_grid(lo[0] - eps, hi[0] + eps, cfg.grid_points);
    let ys = super::uniform_grid(lo[1] - eps, hi[1] + eps, cfg.grid_points);
    let pts: Vec<f64> = ys.iter().flat_map(|&y| xs.iter().flat_map(move |&x| [x, y])).collect();
    let grid = Tensor::new(vec![xs.len() * ys.len(), 2], pts)?;
    let values: Vec<f64> = model.scores(&grid)?.into_iter().map(sigmoid).collect();

    let in_class: Vec<&[f64]> = train.class_indices(1).into_iter().map(|i| train.x.row(i)).collect();
    let mut far = Vec::new();
    for (g, &v) in values.iter().enumerate() {
        let p = grid.row(g);
        let near = in_class
            .iter()
            .any(|q| (p[0] - q[0]).abs().max((p[1] - q[1]).abs()) <= 2.0 * eps);
        if !near {
            far.push(v);
        }
    }
    let far_field_mean_sigmoid = if far.is_empty() { f64::NAN } else { far.iter().sum::<f64>() / far.len() as f64 };
    Ok(Synth2dResult {
        model,
        field: Field2D { xs, ys, values },
        train,
        held_out,
        held_out_mean_sigmoid,
        far_field_mean_sigmoid,
        far_field_points: far.len(),
    })
}
