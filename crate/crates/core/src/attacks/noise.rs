//! Targeted synthesis starting from class-conditional Gaussian noise.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use super::{pgd_trajectory, AttackContext, AttackLoss, Direction, NormBall, PgdConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::Model;
use crate::numerics::Tensor;

/// Multivariate normal fitted to one class: sample mean and a Cholesky factor
/// of the sample covariance plus `ridge·I`.
#[derive(Clone, Debug)]
pub struct ClassGaussian {
    mean: DVector<f64>,
    chol: DMatrix<f64>,
}

impl ClassGaussian {
    pub fn fit(data: &Dataset, class: usize, ridge: f64) -> Result<Self> {
        let idx = data.class_indices(class);
        if idx.len() < 2 {
            return Err(Error::Empty(format!("class {class} has fewer than two samples")));
        }
        let d = data.dim();
        let n = idx.len() as f64;
        let x = DMatrix::from_fn(idx.len(), d, |r, c| data.x.row(idx[r])[c]);
        let mean = DVector::from_fn(d, |c, _| x.column(c).sum() / n);
        let centered = DMatrix::from_fn(idx.len(), d, |r, c| x[(r, c)] - mean[c]);
        let mut cov = centered.transpose() * &centered / (n - 1.0);
        for i in 0..d {
            cov[(i, i)] += ridge;
        }
        let chol = cov
            .cholesky()
            .ok_or_else(|| Error::invalid("covariance is not positive definite; increase the ridge"))?
            .l();
        Ok(Self { mean, chol })
    }

    /// `n` draws clamped to `[lo, hi]`.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, clip: [f64; 2], rng: &mut R) -> Tensor {
        let d = self.mean.len();
        let mut out = Vec::with_capacity(n * d);
        for _ in 0..n {
            let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let v = &self.mean + &self.chol * z;
            out.extend(v.iter().map(|x| x.clamp(clip[0], clip[1])));
        }
        Tensor::new(vec![n, d], out).expect("n·d values")
    }
}

/// Raises a detector's logit from noise seeds by targeted PGD, returning the
/// iterates after each requested step count (step 0 is the clamped seed).
pub fn synthesize_from_noise(
    detector: &Model,
    seeds: &Tensor,
    ball: &NormBall,
    cfg: &PgdConfig,
    checkpoints: &[usize],
) -> Result<Vec<Tensor>> {
    let clamped = seeds.map(|v| v.clamp(cfg.clip[0], cfg.clip[1]));
    pgd_trajectory(
        &AttackLoss::TargetedLogit { target: 0 },
        &AttackContext::detector(detector),
        &clamped,
        &[],
        ball,
        cfg,
        Direction::Minimize,
        checkpoints,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::{Norm, StepRule};
    use crate::models::ArchSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn data() -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rows: Vec<Vec<f64>> = (0..40).map(|_| (0..3).map(|_| rng.gen::<f64>()).collect()).collect();
        Dataset::new(Tensor::from_rows(&rows).unwrap(), (0..40).map(|i| i % 2).collect(), 2).unwrap()
    }

    #[test]
    fn zero_steps_returns_clamped_seed() {
        let det = Model::init(ArchSpec::mlp(&[3, 4, 1]), 0).unwrap();
        let seeds = Tensor::from_rows(&[vec![-0.5, 0.5, 1.5]]).unwrap();
        let cfg = PgdConfig::new(0, 0.1);
        let out = synthesize_from_noise(&det, &seeds, &NormBall::unbounded(Norm::L2), &cfg, &[0]).unwrap();
        assert_eq!(out[0].data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn distinct_seeds_give_distinct_endpoints() {
        let g = ClassGaussian::fit(&data(), 1, 1e-4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let seeds = g.sample(2, [0.0, 1.0], &mut rng);
        assert_ne!(seeds.row(0), seeds.row(1));
        let det = Model::init(ArchSpec::mlp(&[3, 4, 1]), 0).unwrap();
        let cfg = PgdConfig::new(10, 0.05).with_rule(StepRule::NormalizedSteepestDescent);
        let out = synthesize_from_noise(&det, &seeds, &NormBall::unbounded(Norm::L2), &cfg, &[10]).unwrap();
        assert_ne!(out[0].row(0), out[0].row(1));
    }
}
