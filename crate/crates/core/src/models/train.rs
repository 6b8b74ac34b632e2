//! Softmax classifier training.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ArchSpec, Model};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor};
use crate::optim::{Adam, AdamConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_classifier_adam")]
    pub adam: AdamConfig,
    pub seed: u64,
}

fn default_classifier_adam() -> AdamConfig {
    AdamConfig::with_lr(1e-3)
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 64,
            adam: default_classifier_adam(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierTrainReport {
    /// Mean cross-entropy per epoch.
    pub epoch_loss: Vec<f64>,
}

/// Minimizes mean softmax cross-entropy with Adam over shuffled minibatches.
pub fn train_softmax_classifier(
    data: &Dataset,
    arch: ArchSpec,
    cfg: &ClassifierTrainConfig,
) -> Result<(Model, ClassifierTrainReport)> {
    if data.is_empty() {
        return Err(Error::Empty("dataset has no samples".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch_size must be positive"));
    }
    if arch.outputs() != data.classes {
        return Err(Error::invalid(format!(
            "architecture has {} outputs for {} classes",
            arch.outputs(),
            data.classes
        )));
    }
    let mut model = Model::init(arch, cfg.seed)?;
    let mut adam = Adam::new(cfg.adam.clone(), &model.param_sizes());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let x = data.x.select_rows(batch);
            let y: Vec<usize> = batch.iter().map(|&i| data.y[i]).collect();
            let grads = {
                let mut tape = Tape::new();
                let xv = tape.leaf(x, false);
                let (z, pv) = model.forward(&mut tape, xv, true)?;
                let ce = tape.softmax_cross_entropy(z, &y)?;
                let loss = tape.mean(ce)?;
                total += tape.value(loss).item() * batch.len() as f64;
                let mut g = tape.backward(loss)?;
                pv.into_iter().map(|v| g.take(v)).collect::<Vec<Tensor>>()
            };
            let gs: Vec<&[f64]> = grads.iter().map(|g| g.data()).collect();
            adam.step(&mut model.param_slices_mut(), &gs);
        }
        epoch_loss.push(total / data.len() as f64);
    }
    Ok((model, ClassifierTrainReport { epoch_loss }))
}

/// Argmax of the logits per row, lowest index on ties.
pub fn predict(model: &Model, x: &Tensor) -> Result<Vec<usize>> {
    let z = model.logits(x)?;
    Ok((0..z.rows()).map(|i| crate::numerics::argmax(z.row(i))).collect())
}

pub fn accuracy(model: &Model, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("dataset has no samples".into()));
    }
    let p = predict(model, &data.x)?;
    Ok(p.iter().zip(&data.y).filter(|(a, b)| a == b).count() as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs() -> Dataset {
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for i in 0..40 {
            let t = i as f64 / 40.0;
            rows.push(vec![1.0 + 0.1 * t, -0.5]);
            y.push(0);
            rows.push(vec![-1.0 - 0.1 * t, 0.5]);
            y.push(1);
        }
        Dataset::new(Tensor::from_rows(&rows).unwrap(), y, 2).unwrap()
    }

    #[test]
    fn separable_blobs_are_learned() {
        let cfg = ClassifierTrainConfig {
            epochs: 30,
            batch_size: 16,
            adam: AdamConfig::with_lr(1e-2),
            seed: 3,
        };
        let (m, rep) = train_softmax_classifier(&blobs(), ArchSpec::mlp(&[2, 8, 2]), &cfg).unwrap();
        assert!(rep.epoch_loss.last().unwrap() < &rep.epoch_loss[0]);
        assert_eq!(accuracy(&m, &blobs()).unwrap(), 1.0);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let d = Dataset::new(Tensor::zeros(&[0, 2]), vec![], 2).unwrap();
        let r = train_softmax_classifier(&d, ArchSpec::mlp(&[2, 2]), &ClassifierTrainConfig::default());
        assert!(matches!(r, Err(Error::Empty(_))));
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = ClassifierTrainConfig {
            epochs: 2,
            batch_size: 8,
            ..Default::default()
        };
        let a = train_softmax_classifier(&blobs(), ArchSpec::mlp(&[2, 4, 2]), &cfg).unwrap();
        let b = train_softmax_classifier(&blobs(), ArchSpec::mlp(&[2, 4, 2]), &cfg).unwrap();
        assert_eq!(a.0, b.0);
    }
}
