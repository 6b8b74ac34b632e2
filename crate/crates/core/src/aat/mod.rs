//! Asymmetrical adversarial training of per-class detectors.
//!
//! Only out-of-class negatives are attacked; in-class positives enter the
//! loss clean.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{pgd, AttackContext, AttackLoss, Direction, NormBall, PgdConfig, StepRule};
use crate::data::Dataset;
use crate::detection::auc;
use crate::error::{Error, Result};
use crate::models::{ArchSpec, Model};
use crate::numerics::{Tape, Tensor};
use crate::optim::{Adam, AdamConfig};

/// Indices of class `k` and of every other class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassPartition {
    pub k: usize,
    pub in_class: Vec<usize>,
    pub out_class: Vec<usize>,
}

impl ClassPartition {
    pub fn new(labels: &[usize], k: usize) -> Self {
        let (in_class, out_class) = (0..labels.len()).partition(|&i| labels[i] == k);
        Self { k, in_class, out_class }
    }
}

/// Draws `batch_total` distinct samples uniformly, keeps the in-class ones as
/// positives and resamples the same number of negatives from the drawn
/// out-of-class ones (with replacement only when too few were drawn).
/// Batches without positives are redrawn up to `max_attempts` times.
pub fn make_balanced_batch<R: Rng + ?Sized>(
    labels: &[usize],
    k: usize,
    batch_total: usize,
    max_attempts: usize,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if batch_total < 2 {
        return Err(Error::invalid("batch_total must be at least 2"));
    }
    let n = labels.len();
    let take = batch_total.min(n);
    for _ in 0..max_attempts.max(1) {
        let drawn = sample_indices(rng, n, take).into_vec();
        let (pos, out): (Vec<usize>, Vec<usize>) = drawn.into_iter().partition(|&i| labels[i] == k);
        if pos.is_empty() || out.is_empty() {
            continue;
        }
        let neg = if out.len() >= pos.len() {
            sample_indices(rng, out.len(), pos.len())
                .into_iter()
                .map(|j| out[j])
                .collect()
        } else {
            (0..pos.len()).map(|_| out[rng.gen_range(0..out.len())]).collect()
        };
        return Ok((pos, neg));
    }
    Err(Error::NoInClassSamples {
        class: k,
        attempts: max_attempts,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AatConfig {
    #[serde(default = "default_batch_total")]
    pub batch_total: usize,
    pub ball: NormBall,
    pub attack: PgdConfig,
    pub val_attack: PgdConfig,
    pub epochs: usize,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub seed: u64,
    /// Caps the validation positives and negatives used per epoch.
    #[serde(default)]
    pub val_limit: Option<usize>,
    /// Caps the optimizer updates per epoch; `None` makes one pass worth of batches.
    #[serde(default)]
    pub steps_per_epoch: Option<usize>,
    #[serde(default = "default_max_redraws")]
    pub max_redraws: usize,
}

fn default_batch_total() -> usize {
    320
}

fn default_max_redraws() -> usize {
    100
}

impl Default for AatConfig {
    /// L∞ ε = 0.3, 100 Adam steps of 0.01 in training, 20 steps of 0.05 for validation, 20 epochs.
    fn default() -> Self {
        Self::new(
            NormBall::linf(0.3).expect("valid radius"),
            PgdConfig::new(100, 0.01),
            PgdConfig::new(20, 0.05),
            20,
        )
    }
}

impl AatConfig {
    /// L∞ training setup with the given attack schedules and Adam (lr 1e-4) outside.
    pub fn new(ball: NormBall, attack: PgdConfig, val_attack: PgdConfig, epochs: usize) -> Self {
        Self {
            batch_total: default_batch_total(),
            ball,
            attack,
            val_attack,
            epochs,
            adam: AdamConfig::default(),
            seed: 0,
            val_limit: None,
            steps_per_epoch: None,
            max_redraws: default_max_redraws(),
        }
    }

    /// Same schedules with normalized steepest descent as the training-attack rule.
    pub fn for_finetuning(mut self) -> Self {
        self.attack.step_rule = StepRule::NormalizedSteepestDescent;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_total < 2 {
            return Err(Error::invalid("batch_total must be at least 2"));
        }
        self.attack.validate()?;
        self.val_attack.validate()
    }

    /// Cautions about attack schedules that explore too little or step too far.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        let eps = self.ball.eps;
        if !eps.is_finite() {
            return w;
        }
        for (name, cfg) in [("attack", &self.attack), ("val_attack", &self.val_attack)] {
            if cfg.step_size * (cfg.steps as f64) < 2.0 * eps {
                w.push(format!(
                    "{name}: step_size × steps = {} < 2·eps = {}; the attack cannot cross the ball",
                    cfg.step_size * cfg.steps as f64,
                    2.0 * eps
                ));
            }
            if cfg.step_size >= eps / 2.0 {
                w.push(format!(
                    "{name}: step_size {} ≥ eps/2 = {}; large steps tend to yield non-robust detectors",
                    cfg.step_size,
                    eps / 2.0
                ));
            }
        }
        w
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    /// Mean BCE of the attacked negatives against label 0.
    pub adv_bce: f64,
    /// Mean BCE of the clean positives against label 1.
    pub nat_bce: f64,
}

impl StepLosses {
    pub fn total(&self) -> f64 {
        self.adv_bce + self.nat_bce
    }
}

/// Mean BCE(h(x⁺), 1) + mean BCE(h(x⁻), 0) and its parameter gradients.
fn bce_objective(detector: &Model, pos: &Tensor, neg: &Tensor) -> Result<(StepLosses, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let xp = tape.leaf_ref(pos, false);
    let xn = tape.leaf_ref(neg, false);
    let (zp, params) = detector.forward(&mut tape, xp, true)?;
    let (zn, params_n) = detector.forward(&mut tape, xn, true)?;
    let lp = tape.bce_with_logits(zp, &vec![1.0; pos.rows()])?;
    let ln = tape.bce_with_logits(zn, &vec![0.0; neg.rows()])?;
    let mp = tape.mean(lp)?;
    let mn = tape.mean(ln)?;
    let total = tape.add(mp, mn)?;
    let losses = StepLosses {
        adv_bce: tape.value(mn).item(),
        nat_bce: tape.value(mp).item(),
    };
    let mut g = tape.backward(total)?;
    let grads = params
        .into_iter()
        .zip(params_n)
        .map(|(a, b)| {
            let (ga, gb) = (g.take(a), g.take(b));
            ga.zip_map(&gb, |x, y| x + y)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((losses, grads))
}

/// One AAT update: PGD pushes the negatives toward label 1 (maximizing
/// BCE against 0), then one optimizer step on the clean-positive plus
/// attacked-negative BCE. Returns the losses before the update.
#[allow(clippy::too_many_arguments)]
pub fn aat_step(
    detector: &mut Model,
    optimizer: &mut Adam,
    positives: &Tensor,
    negatives: &Tensor,
    ball: &NormBall,
    attack: &PgdConfig,
    seed: u64,
) -> Result<StepLosses> {
    let adv = if ball.eps == 0.0 {
        negatives.clone()
    } else {
        pgd(
            &AttackLoss::InnerMaxBce,
            &AttackContext::detector(detector),
            negatives,
            &[],
            ball,
            attack,
            Direction::Maximize,
            seed,
        )?
        .x
    };
    let (losses, grads) = bce_objective(detector, positives, &adv)?;
    let gs: Vec<&[f64]> = grads.iter().map(|g| g.data()).collect();
    optimizer.step(&mut detector.param_slices_mut(), &gs);
    Ok(losses)
}

/// AUCs of a detector on clean in-class positives against clean and attacked
/// out-of-class negatives.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessPoint {
    pub nat_auc: f64,
    pub adv_auc: f64,
}

/// Scores `detector` (for class `k`) on `data`: positives are in-class samples,
/// negatives are out-of-class samples attacked by the inner-max PGD. `limit`
/// caps both sets (first samples in stored order).
pub fn robustness_auc(
    detector: &Model,
    k: usize,
    data: &Dataset,
    ball: &NormBall,
    attack: &PgdConfig,
    seed: u64,
    limit: Option<usize>,
) -> Result<RobustnessPoint> {
    let part = ClassPartition::new(&data.y, k);
    let cap = |v: Vec<usize>| match limit {
        Some(l) => v.into_iter().take(l).collect(),
        None => v,
    };
    let (pos_idx, neg_idx) = (cap(part.in_class), cap(part.out_class));
    let pos = data.x.select_rows(&pos_idx);
    let neg = data.x.select_rows(&neg_idx);
    let pos_scores = detector.scores(&pos)?;
    let neg_scores = detector.scores(&neg)?;
    let adv = pgd(
        &AttackLoss::InnerMaxBce,
        &AttackContext::detector(detector),
        &neg,
        &[],
        ball,
        attack,
        Direction::Maximize,
        seed,
    )?;
    let adv_scores = detector.scores(&adv.x)?;
    Ok(RobustnessPoint {
        nat_auc: auc(&pos_scores, &neg_scores)?,
        adv_auc: auc(&pos_scores, &adv_scores)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_bce: f64,
    pub nat_auc: f64,
    pub adv_auc: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct DetectorTraining {
    /// Parameters from the epoch with the best validation adversarial AUC.
    pub model: Model,
    pub best_epoch: Option<usize>,
    pub history: Vec<EpochRecord>,
}

/// Per-epoch CSV without wall-clock times, so reruns reproduce it byte for byte.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_bce,nat_auc,adv_auc\n");
    for r in history {
        let _ = writeln!(s, "{},{},{},{}", r.epoch, r.train_bce, r.nat_auc, r.adv_auc);
    }
    s
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    crate::io::write_atomic(path, history_csv(history).as_bytes())
}

/// Trains detector `k` from scratch on `train`, selecting the epoch with the
/// best adversarial AUC on `val`.
pub fn train_detector(train: &Dataset, val: &Dataset, k: usize, arch: &ArchSpec, cfg: &AatConfig) -> Result<DetectorTraining> {
    if arch.outputs() != 1 {
        return Err(Error::invalid("detector architectures have a single output"));
    }
    let init = Model::init(arch.clone(), crate::seed::derive(cfg.seed, &[k as u64, 0]))?;
    run_aat(init, train, val, k, cfg)
}

/// Starts detector `k` as the subnetwork of `classifier` producing logit `k`,
/// then continues with AAT.
pub fn finetune_detector_from_classifier(
    classifier: &Model,
    train: &Dataset,
    val: &Dataset,
    k: usize,
    cfg: &AatConfig,
) -> Result<DetectorTraining> {
    let init = classifier.logit_subnetwork(k)?;
    run_aat(init, train, val, k, cfg)
}

fn run_aat(mut model: Model, train: &Dataset, val: &Dataset, k: usize, cfg: &AatConfig) -> Result<DetectorTraining> {
    cfg.validate()?;
    if k >= train.classes {
        return Err(Error::invalid(format!("class {k} out of range for {} classes", train.classes)));
    }
    for w in cfg.warnings() {
        log::warn!("{w}");
    }
    let mut history = Vec::with_capacity(cfg.epochs);
    if cfg.epochs == 0 {
        return Ok(DetectorTraining {
            model,
            best_epoch: None,
            history,
        });
    }
    let mut adam = Adam::new(cfg.adam.clone(), &model.param_sizes());
    let mut rng = crate::seed::rng(cfg.seed, &[k as u64, 1]);
    let steps = cfg
        .steps_per_epoch
        .unwrap_or_else(|| train.len().div_ceil(cfg.batch_total).max(1));
    let mut best: Option<(f64, usize, Model)> = None;
    let started = Instant::now();
    for epoch in 0..cfg.epochs {
        let mut sum = 0.0;
        for step in 0..steps {
            let (pos, neg) = make_balanced_batch(&train.y, k, cfg.batch_total, cfg.max_redraws, &mut rng)?;
            let seed = crate::seed::derive(cfg.seed, &[k as u64, 2, epoch as u64, step as u64]);
            let l = aat_step(
                &mut model,
                &mut adam,
                &train.x.select_rows(&pos),
                &train.x.select_rows(&neg),
                &cfg.ball,
                &cfg.attack,
                seed,
            )?;
            sum += l.total();
        }
        let point = robustness_auc(
            &model,
            k,
            val,
            &cfg.ball,
            &cfg.val_attack,
            crate::seed::derive(cfg.seed, &[k as u64, 3]),
            cfg.val_limit,
        )?;
        let rec = EpochRecord {
            epoch,
            train_bce: sum / steps as f64,
            nat_auc: point.nat_auc,
            adv_auc: point.adv_auc,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "detector {k} epoch {epoch}: bce {:.4} nat-auc {:.4} adv-auc {:.4}",
            rec.train_bce,
            rec.nat_auc,
            rec.adv_auc
        );
        if best.as_ref().map_or(true, |b| rec.adv_auc > b.0) {
            best = Some((rec.adv_auc, epoch, model.clone()));
        }
        history.push(rec);
    }
    let (_, best_epoch, model) = best.expect("at least one epoch");
    Ok(DetectorTraining {
        model,
        best_epoch: Some(best_epoch),
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn line_data(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let label = i % 2;
            let center = if label == 0 { 0.25 } else { 0.75 };
            x.push(vec![center + rng.gen_range(-0.05..0.05)]);
            y.push(label);
        }
        Dataset::new(Tensor::from_rows(&x).unwrap(), y, 2).unwrap()
    }

    #[test]
    fn partition_is_disjoint_cover() {
        let p = ClassPartition::new(&[0, 1, 2, 1], 1);
        assert_eq!(p.in_class, vec![1, 3]);
        assert_eq!(p.out_class, vec![0, 2]);
    }

    #[test]
    fn balanced_batch_counts() {
        let labels: Vec<usize> = (0..1000).map(|i| if i % 10 == 0 { 3 } else { i % 3 }).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (pos, neg) = make_balanced_batch(&labels, 3, 320, 10, &mut rng).unwrap();
        assert_eq!(pos.len(), neg.len());
        assert!(pos.iter().all(|&i| labels[i] == 3));
        assert!(neg.iter().all(|&i| labels[i] != 3));
    }

    #[test]
    fn absent_class_errors_after_redraws() {
        let labels = vec![0; 50];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = make_balanced_batch(&labels, 1, 10, 5, &mut rng);
        assert!(matches!(r, Err(Error::NoInClassSamples { class: 1, attempts: 5 })));
    }

    #[test]
    fn step_lowers_bce_and_leaves_positives() {
        let data = line_data(64, 0);
        let part = ClassPartition::new(&data.y, 1);
        let pos = data.x.select_rows(&part.in_class);
        let neg = data.x.select_rows(&part.out_class);
        let pos_before = pos.clone();
        let mut m = Model::init(ArchSpec::mlp(&[1, 16, 1]), 5).unwrap();
        let mut adam = Adam::new(AdamConfig::with_lr(1e-2), &m.param_sizes());
        let ball = NormBall::linf(0.05).unwrap();
        let cfg = PgdConfig::new(5, 0.01);
        let first = aat_step(&mut m, &mut adam, &pos, &neg, &ball, &cfg, 0).unwrap();
        let mut last = first;
        for s in 1..30 {
            last = aat_step(&mut m, &mut adam, &pos, &neg, &ball, &cfg, s).unwrap();
        }
        assert!(last.total() < first.total());
        assert_eq!(pos, pos_before);
    }

    #[test]
    fn zero_eps_is_plain_binary_training() {
        let data = line_data(32, 1);
        let part = ClassPartition::new(&data.y, 0);
        let pos = data.x.select_rows(&part.in_class);
        let neg = data.x.select_rows(&part.out_class);
        let m0 = Model::init(ArchSpec::mlp(&[1, 8, 1]), 2).unwrap();
        let (mut a, mut b) = (m0.clone(), m0.clone());
        let mut oa = Adam::new(AdamConfig::default(), &a.param_sizes());
        aat_step(&mut a, &mut oa, &pos, &neg, &NormBall::linf(0.0).unwrap(), &PgdConfig::new(10, 0.1), 0).unwrap();
        let (_, grads) = bce_objective(&b, &pos, &neg).unwrap();
        let mut ob = Adam::new(AdamConfig::default(), &b.param_sizes());
        let gs: Vec<&[f64]> = grads.iter().map(|g| g.data()).collect();
        ob.step(&mut b.param_slices_mut(), &gs);
        assert_eq!(a, b);
    }

    #[test]
    fn zero_epochs_returns_init() {
        let data = line_data(16, 2);
        let cfg = AatConfig::new(NormBall::linf(0.1).unwrap(), PgdConfig::new(1, 0.1), PgdConfig::new(1, 0.1), 0);
        let arch = ArchSpec::mlp(&[1, 4, 1]);
        let out = train_detector(&data, &data, 0, &arch, &cfg).unwrap();
        assert!(out.history.is_empty());
        assert_eq!(out.model, Model::init(arch, crate::seed::derive(0, &[0, 0])).unwrap());
    }

    #[test]
    fn finetune_starts_from_logit_subnetwork() {
        let f = Model::init(ArchSpec::mlp(&[1, 6, 3]), 9).unwrap();
        let data = line_data(16, 3);
        let cfg = AatConfig::new(NormBall::linf(0.1).unwrap(), PgdConfig::new(1, 0.1), PgdConfig::new(1, 0.1), 0);
        let out = finetune_detector_from_classifier(&f, &data, &data, 1, &cfg).unwrap();
        assert_eq!(out.model.scores(&data.x).unwrap(), f.logits(&data.x).unwrap().column(1));
        assert!(finetune_detector_from_classifier(&f, &data, &data, 3, &cfg).is_err());
    }

    #[test]
    fn warnings_fire_on_weak_or_coarse_schedules() {
        let ball = NormBall::linf(0.3).unwrap();
        let ok = AatConfig::new(ball, PgdConfig::new(100, 0.01), PgdConfig::new(200, 0.01), 1);
        assert!(ok.warnings().is_empty());
        let short = AatConfig::new(ball, PgdConfig::new(10, 0.01), PgdConfig::new(200, 0.01), 1);
        assert_eq!(short.warnings().len(), 1);
        let coarse = AatConfig::new(ball, PgdConfig::new(100, 1.0), PgdConfig::new(200, 0.01), 1);
        assert_eq!(coarse.warnings().len(), 1);
    }

    #[test]
    fn training_is_reproducible() {
        let data = line_data(40, 4);
        let mut cfg = AatConfig::new(NormBall::linf(0.05).unwrap(), PgdConfig::new(3, 0.02), PgdConfig::new(3, 0.02), 2);
        cfg.batch_total = 16;
        cfg.adam = AdamConfig::with_lr(1e-2);
        let arch = ArchSpec::mlp(&[1, 8, 1]);
        let a = train_detector(&data, &data, 1, &arch, &cfg).unwrap();
        let b = train_detector(&data, &data, 1, &arch, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.history.len(), 2);
    }
}
