//! Targeted synthesis: starts from class-conditional Gaussian noise and
//! ascends one detector's logit without a norm bound.

use aat::aat::{train_detector, AatConfig};
use aat::attacks::{synthesize_from_noise, ClassGaussian, Norm, NormBall, PgdConfig};
use aat::data::{bundled_data_dir, PresetSpec};
use aat::models::ArchSpec;
use aat::optim::AdamConfig;
use rand::SeedableRng;

fn main() {
    let splits = PresetSpec::mnist_mini().load(&bundled_data_dir()).unwrap();
    let mut cfg = AatConfig::new(NormBall::linf(0.3).unwrap(), PgdConfig::new(40, 0.02), PgdConfig::new(20, 0.05), 3);
    cfg.adam = AdamConfig::with_lr(1e-3);
    cfg.val_limit = Some(100);
    let det = train_detector(&splits.train, &splits.val, 1, &ArchSpec::mlp(&[784, 128, 128, 1]), &cfg).unwrap().model;

    let gauss = ClassGaussian::fit(&splits.train, 1, 1e-2).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let seeds = gauss.sample(4, [0.0, 1.0], &mut rng);
    let pgd = PgdConfig::new(200, 0.01);
    let checkpoints = [0, 50, 200];
    let iterates = synthesize_from_noise(&det, &seeds, &NormBall::unbounded(Norm::L2), &pgd, &checkpoints).unwrap();
    for (step, x) in checkpoints.iter().zip(&iterates) {
        let z: Vec<String> = det.scores(x).unwrap().iter().map(|v| format!("{v:7.2}")).collect();
        println!("step {step:>3}: detector logits {}", z.join(" "));
    }
}
