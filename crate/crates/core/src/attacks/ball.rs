use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{l2_norm, Tensor};

/// Feasibility slack for the L2 ball: a row counts as inside when its norm
/// is at most `eps + SLACK`, which makes projection exactly idempotent.
pub const PROJECTION_SLACK: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    L2,
    Linf,
}

impl std::str::FromStr for Norm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2" | "2" => Ok(Norm::L2),
            "linf" | "inf" => Ok(Norm::Linf),
            other => Err(Error::invalid(format!("unknown norm `{other}` (expected l2 or linf)"))),
        }
    }
}

/// `{δ : ‖δ‖_p ≤ eps}` on the 0–1 pixel scale. `eps = ∞` is the unconstrained set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormBall {
    pub norm: Norm,
    pub eps: f64,
}

impl NormBall {
    pub fn new(norm: Norm, eps: f64) -> Result<Self> {
        if !(eps >= 0.0) {
            return Err(Error::invalid(format!("eps must be non-negative, got {eps}")));
        }
        Ok(Self { norm, eps })
    }

    pub fn linf(eps: f64) -> Result<Self> {
        Self::new(Norm::Linf, eps)
    }

    pub fn l2(eps: f64) -> Result<Self> {
        Self::new(Norm::L2, eps)
    }

    pub fn unbounded(norm: Norm) -> Self {
        Self {
            norm,
            eps: f64::INFINITY,
        }
    }

    /// Builds a ball from a 0–255 scale radius.
    pub fn from_255(norm: Norm, eps_255: f64) -> Result<Self> {
        Self::new(norm, eps_255 / 255.0)
    }

    pub fn is_bounded(&self) -> bool {
        self.eps.is_finite()
    }

    /// Projects one perturbation vector in place.
    pub fn project_row(&self, delta: &mut [f64]) {
        if !self.is_bounded() {
            return;
        }
        match self.norm {
            Norm::Linf => {
                for d in delta.iter_mut() {
                    *d = d.clamp(-self.eps, self.eps);
                }
            }
            Norm::L2 => {
                let n = l2_norm(delta);
                if n > self.eps + PROJECTION_SLACK {
                    let s = self.eps / n;
                    delta.iter_mut().for_each(|d| *d *= s);
                }
            }
        }
    }

    /// Row-wise projection of a `[n, d]` batch of perturbations.
    pub fn project(&self, delta: &Tensor) -> Tensor {
        let mut out = delta.clone();
        if out.shape().len() < 2 {
            self.project_row(out.data_mut());
            return out;
        }
        for r in 0..out.rows() {
            self.project_row(out.row_mut(r));
        }
        out
    }

    /// Uniform draw from the ball: the box for L∞, radius `eps·u^{1/d}` along a
    /// uniform direction for L2. Unbounded balls yield zero.
    pub fn sample<R: Rng + ?Sized>(&self, d: usize, rng: &mut R) -> Vec<f64> {
        if !self.is_bounded() || self.eps == 0.0 || d == 0 {
            return vec![0.0; d];
        }
        match self.norm {
            Norm::Linf => (0..d).map(|_| rng.gen_range(-self.eps..=self.eps)).collect(),
            Norm::L2 => {
                let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
                let n = l2_norm(&v);
                if n == 0.0 {
                    return vec![0.0; d];
                }
                let r = self.eps * rng.gen::<f64>().powf(1.0 / d as f64);
                v.iter_mut().for_each(|x| *x *= r / n);
                v
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::linf_norm;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn l2_radial_scaling() {
        let b = NormBall::l2(1.0).unwrap();
        let mut d = [3.0, 4.0];
        b.project_row(&mut d);
        assert!((d[0] - 0.6).abs() < 1e-15 && (d[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn interior_point_unchanged() {
        let b = NormBall::l2(1.0).unwrap();
        let mut d = [0.3, 0.4];
        b.project_row(&mut d);
        assert_eq!(d, [0.3, 0.4]);
    }

    #[test]
    fn linf_clamp() {
        let b = NormBall::linf(0.3).unwrap();
        let mut d = [0.5, -0.5, 0.1];
        b.project_row(&mut d);
        assert_eq!(d, [0.3, -0.3, 0.1]);
    }

    #[test]
    fn negative_eps_rejected() {
        assert!(NormBall::linf(-0.1).is_err());
        assert!(NormBall::l2(f64::NAN).is_err());
    }

    #[test]
    fn samples_stay_inside() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for norm in [Norm::L2, Norm::Linf] {
            let b = NormBall::new(norm, 0.7).unwrap();
            for _ in 0..50 {
                let v = b.sample(9, &mut rng);
                let n = if norm == Norm::L2 { l2_norm(&v) } else { linf_norm(&v) };
                assert!(n <= 0.7 + 1e-12);
            }
        }
    }
}
