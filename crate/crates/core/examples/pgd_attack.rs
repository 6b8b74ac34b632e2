//! Trains a small classifier on mnist-mini, then attacks it with the
//! logit-margin loss inside an L∞ ball of 0.1.

use aat::attacks::{pgd, AttackContext, AttackLoss, Direction, NormBall, PgdConfig};
use aat::data::{bundled_data_dir, PresetSpec};
use aat::models::{accuracy, predict, train_softmax_classifier, ArchSpec, ClassifierTrainConfig};

fn main() {
    let splits = PresetSpec::mnist_mini().load(&bundled_data_dir()).unwrap();
    let cfg = ClassifierTrainConfig { epochs: 2, ..Default::default() };
    let (f, _) = train_softmax_classifier(&splits.train, ArchSpec::mlp(&[784, 64, 2]), &cfg).unwrap();
    let test = splits.test.take(200);
    println!("clean accuracy {:.3}", accuracy(&f, &test).unwrap());

    let ball = NormBall::linf(0.1).unwrap();
    for steps in [5, 20, 100] {
        let out = pgd(
            &AttackLoss::ClassifierCw,
            &AttackContext::classifier(&f),
            &test.x,
            &test.y,
            &ball,
            &PgdConfig::new(steps, 0.01),
            Direction::Minimize,
            0,
        )
        .unwrap();
        let pred = predict(&f, &out.x).unwrap();
        let acc = pred.iter().zip(&test.y).filter(|(a, b)| a == b).count() as f64 / test.len() as f64;
        println!("{steps:>3} steps: adversarial accuracy {acc:.3}");
    }
}
