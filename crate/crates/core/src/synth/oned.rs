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

/// Positives from a Gaussian mixture (label 1), negatives uniform on [0, 1] (label 0).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec1D {
    /// `(mean, std, count)` per component.
    pub components: Vec<(f64, f64, usize)>,
    pub negative_count: usize,
}

impl Default for MixtureSpec1D {
    fn default() -> Self {
        Self {
            components: vec![(0.4, 0.01, 250), (0.6, 0.005, 250)],
            negative_count: 500,
        }
    }
}

impl MixtureSpec1D {
    pub fn validate(&self) -> Result<()> {
        if self.components.iter().any(|c| !(c.1 > 0.0)) {
            return Err(Error::invalid("mixture standard deviations must be positive"));
        }
        if self.components.iter().map(|c| c.2).sum::<usize>() == 0 {
            return Err(Error::invalid("mixture has no samples"));
        }
        Ok(())
    }
}

pub fn sample_1d(spec: &MixtureSpec1D, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = crate::seed::rng(seed, &[0]);
    let mut x = Vec::new();
    let mut y = Vec::new();
    for &(mean, std, count) in &spec.components {
        let d = Normal::new(mean, std).map_err(|e| Error::invalid(e.to_string()))?;
        for _ in 0..count {
            x.push(d.sample(&mut rng));
            y.push(1);
        }
    }
    for _ in 0..spec.negative_count {
        x.push(rng.gen::<f64>());
        y.push(0);
    }
    let n = x.len();
    Dataset::new(Tensor::new(vec![n, 1], x)?, y, 2)
}

pub fn uniform_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    if points == 1 {
        return vec![lo];
    }
    (0..points)
        .map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64)
        .collect()
}

pub fn trapezoid(grid: &[f64], values: &[f64]) -> f64 {
    grid.windows(2)
        .zip(values.windows(2))
        .map(|(g, v)| 0.5 * (g[1] - g[0]) * (v[0] + v[1]))
        .sum()
}

/// Count-weighted mixture density of the positive class.
pub fn analytic_density_1d(spec: &MixtureSpec1D, grid: &[f64]) -> Vec<f64> {
    let total: usize = spec.components.iter().map(|c| c.2).sum();
    let norm = (2.0 * std::f64::consts::PI).sqrt();
    grid.iter()
        .map(|&x| {
            spec.components
                .iter()
                .map(|&(m, s, c)| {
                    let z = (x - m) / s;
                    (c as f64 / total as f64) * (-0.5 * z * z).exp() / (s * norm)
                })
                .sum()
        })
        .collect()
}

/// `exp(z(h(x)))` on `grid`, normalized to unit trapezoid mass.
pub fn estimate_density_1d(detector: &Model, grid: &[f64]) -> Result<Vec<f64>> {
    if grid.len() < 2 {
        return Err(Error::invalid("density grid needs at least two points"));
    }
    let x = Tensor::new(vec![grid.len(), 1], grid.to_vec())?;
    let z = detector.scores(&x)?;
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let p: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let mass = trapezoid(grid, &p);
    Ok(p.into_iter().map(|v| v / mass).collect())
}

/// Total variation `½∫|p − q|` by the trapezoid rule.
pub fn density_distance(grid: &[f64], p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != grid.len() || q.len() != grid.len() {
        return Err(Error::shape(
            "density_distance",
            format!("grid of {} points, densities of {} and {}", grid.len(), p.len(), q.len()),
        ));
    }
    let diff: Vec<f64> = p.iter().zip(q).map(|(a, b)| (a - b).abs()).collect();
    Ok(0.5 * trapezoid(grid, &diff))
}

/// Locations of the `count` highest strict local maxima, ascending by location.
pub fn find_modes(grid: &[f64], p: &[f64], count: usize) -> Vec<f64> {
    let mut peaks: Vec<(f64, f64)> = (1..p.len().saturating_sub(1))
        .filter(|&i| p[i] > p[i - 1] && p[i] >= p[i + 1])
        .map(|i| (p[i], grid[i]))
        .collect();
    peaks.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut locs: Vec<f64> = peaks.into_iter().take(count).map(|p| p.1).collect();
    locs.sort_by(f64::total_cmp);
    locs
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Synth1dConfig {
    pub mixture: MixtureSpec1D,
    pub widths: Vec<usize>,
    pub training: ToyTraining,
    pub grid_points: usize,
    pub seed: u64,
}

impl Default for Synth1dConfig {
    fn default() -> Self {
        Self {
            mixture: MixtureSpec1D::default(),
            widths: vec![1, 64, 64, 1],
            training: ToyTraining {
                iterations: 6000,
                batch_total: 1000,
                adam: AdamConfig::with_lr(1e-2),
                ball: NormBall::linf(0.3).expect("valid radius"),
                attack: PgdConfig::new(20, 0.05).with_rule(StepRule::NormalizedSteepestDescent),
            },
            grid_points: 2048,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Synth1dResult {
    pub grid: Vec<f64>,
    pub truth: Vec<f64>,
    pub aat: Vec<f64>,
    pub baseline: Vec<f64>,
    pub aat_tv: f64,
    pub baseline_tv: f64,
    pub aat_modes: Vec<f64>,
    pub aat_model: Model,
    pub baseline_model: Model,
}

impl Synth1dResult {
    /// `x,p` rows of a density.
    pub fn density_csv(grid: &[f64], p: &[f64]) -> String {
        let mut s = String::from("x,p\n");
        for (x, v) in grid.iter().zip(p) {
            let _ = writeln!(s, "{x},{v}");
        }
        s
    }

    pub fn write_csvs(&self, dir: &Path) -> Result<()> {
        for (name, p) in [("truth", &self.truth), ("aat", &self.aat), ("baseline", &self.baseline)] {
            crate::io::write_atomic(&dir.join(format!("density_{name}.csv")), Self::density_csv(&self.grid, p).as_bytes())?;
        }
        Ok(())
    }
}

/// Trains one detector with AAT and one with plain BCE (radius 0) from the
/// same initialization and data, and compares both Gibbs densities with the
/// analytic mixture.
pub fn run_1d_benchmark(cfg: &Synth1dConfig) -> Result<Synth1dResult> {
    let data = sample_1d(&cfg.mixture, cfg.seed)?;
    let init = Model::init(ArchSpec::mlp(&cfg.widths), crate::seed::derive(cfg.seed, &[10]))?;
    let mut aat_model = init.clone();
    train_toy_detector(&mut aat_model, &data, &cfg.training, crate::seed::derive(cfg.seed, &[11]))?;
    let mut baseline_model = init;
    let plain = ToyTraining {
        ball: NormBall::new(cfg.training.ball.norm, 0.0)?,
        ..cfg.training.clone()
    };
    train_toy_detector(&mut baseline_model, &data, &plain, crate::seed::derive(cfg.seed, &[11]))?;
    let grid = uniform_grid(0.0, 1.0, cfg.grid_points);
    let truth = analytic_density_1d(&cfg.mixture, &grid);
    let aat = estimate_density_1d(&aat_model, &grid)?;
    let baseline = estimate_density_1d(&baseline_model, &grid)?;
    Ok(Synth1dResult {
        aat_tv: density_distance(&grid, &aat, &truth)?,
        baseline_tv: density_distance(&grid, &baseline, &truth)?,
        aat_modes: find_modes(&grid, &aat, 2),
        grid,
        truth,
        aat,
        baseline,
        aat_model,
        baseline_model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mixture_counts() {
        let d = sample_1d(&MixtureSpec1D::default(), 0).unwrap();
        assert_eq!(d.y.iter().filter(|&&l| l == 1).count(), 500);
        assert_eq!(d.y.iter().filter(|&&l| l == 0).count(), 500);
        assert_ne!(d.x, sample_1d(&MixtureSpec1D::default(), 1).unwrap().x);
    }

    #[test]
    fn tiny_std_concentrates_at_means() {
        let spec = MixtureSpec1D {
            components: vec![(0.25, 1e-12, 3)],
            negative_count: 0,
        };
        let d = sample_1d(&spec, 0).unwrap();
        assert!(d.x.data().iter().all(|v| (v - 0.25).abs() < 1e-9));
    }

    #[test]
    fn constant_logit_is_uniform_and_normalized() {
        let mut m = Model::init(ArchSpec::mlp(&[1, 4, 1]), 0).unwrap();
        for s in m.param_slices_mut() {
            s.fill(0.0);
        }
        let grid = uniform_grid(0.0, 1.0, 2048);
        let p = estimate_density_1d(&m, &grid).unwrap();
        assert!(p.iter().all(|v| (v - 1.0).abs() < 1e-12));
        assert!((trapezoid(&grid, &p) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn tv_extremes() {
        let grid = uniform_grid(0.0, 1.0, 2001);
        let p: Vec<f64> = grid.iter().map(|&x| if x < 0.5 { 2.0 } else { 0.0 }).collect();
        let q: Vec<f64> = grid.iter().map(|&x| if x > 0.5 { 2.0 } else { 0.0 }).collect();
        assert_eq!(density_distance(&grid, &p, &p).unwrap(), 0.0);
        assert!((density_distance(&grid, &p, &q).unwrap() - 1.0).abs() < 1e-3);
        assert!(density_distance(&grid, &p, &q[1..]).is_err());
    }

    #[test]
    fn modes_of_analytic_mixture() {
        let grid = uniform_grid(0.0, 1.0, 2048);
        let p = analytic_density_1d(&MixtureSpec1D::default(), &grid);
        let m = find_modes(&grid, &p, 2);
        assert!((m[0] - 0.4).abs() < 1e-3 && (m[1] - 0.6).abs() < 1e-3);
    }
}
