//! Density-recovery benchmarks on synthetic 1-D and 2-D data.

mod oned;
mod twod;

use serde::{Deserialize, Serialize};

pub use oned::{
    analytic_density_1d, density_distance, estimate_density_1d, find_modes, run_1d_benchmark, sample_1d, trapezoid,
    uniform_grid, MixtureSpec1D, Synth1dConfig, Synth1dResult,
};
pub use twod::{generate_2d, train_and_map_2d, Field2D, Synth2dConfig, Synth2dResult, Toy2DKind, Toy2DSpec};

use crate::aat::{aat_step, make_balanced_batch, StepLosses};
use crate::attacks::{NormBall, PgdConfig};
use crate::data::Dataset;
use crate::error::Result;
use crate::models::Model;
use crate::optim::{Adam, AdamConfig};

/// Outer-loop schedule shared by the synthetic benchmarks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyTraining {
    pub iterations: usize,
    pub batch_total: usize,
    pub adam: AdamConfig,
    pub ball: NormBall,
    pub attack: PgdConfig,
}

/// Trains `model` as the detector of class 1 with AAT (or plain BCE when the
/// ball radius is zero); returns the per-iteration losses.
pub(crate) fn train_toy_detector(model: &mut Model, data: &Dataset, cfg: &ToyTraining, seed: u64) -> Result<Vec<StepLosses>> {
    let mut adam = Adam::new(cfg.adam.clone(), &model.param_sizes());
    let mut rng = crate::seed::rng(seed, &[1]);
    let mut losses = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let (pos, neg) = make_balanced_batch(&data.y, 1, cfg.batch_total, 100, &mut rng)?;
        let l = aat_step(
            model,
            &mut adam,
            &data.x.select_rows(&pos),
            &data.x.select_rows(&neg),
            &cfg.ball,
            &cfg.attack,
            crate::seed::derive(seed, &[2, it as u64]),
        )?;
        losses.push(l);
    }
    Ok(losses)
}
