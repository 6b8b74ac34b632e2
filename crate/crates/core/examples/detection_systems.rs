//! Integrated detection (classifier plus detectors), generative
//! classification, and classify-with-reject on mnist-mini.

use aat::aat::{train_detector, AatConfig};
use aat::attacks::{aggregate_detector, pgd, AttackContext, AttackLoss, Direction, NormBall, PgdConfig};
use aat::data::{bundled_data_dir, PresetSpec};
use aat::detection::{
    generative_classify, integrated_classify_with_reject, DetectionSystem, Decision, Rule, RuleScores,
};
use aat::distortion::threshold_for_tpr;
use aat::models::{train_softmax_classifier, ArchSpec, ClassifierTrainConfig};
use aat::optim::AdamConfig;

fn main() {
    let splits = PresetSpec::mnist_mini().load(&bundled_data_dir()).unwrap();
    let (f, _) = train_softmax_classifier(&splits.train, ArchSpec::mlp(&[784, 128, 2]), &ClassifierTrainConfig::default()).unwrap();
    let ball = NormBall::linf(0.3).unwrap();
    let mut cfg = AatConfig::new(ball, PgdConfig::new(40, 0.02), PgdConfig::new(20, 0.05), 3);
    cfg.adam = AdamConfig::with_lr(1e-3);
    cfg.val_limit = Some(100);
    let arch = ArchSpec::mlp(&[784, 128, 128, 1]);
    let detectors: Vec<_> = (0..2)
        .map(|k| train_detector(&splits.train, &splits.val, k, &arch, &cfg).unwrap().model)
        .collect();
    let test = splits.test.take(200);

    // Threshold for a 95% natural TPR under the integrated rule.
    let mut sys = DetectionSystem::new(f.clone(), detectors.clone(), 0.0).unwrap();
    let nat = RuleScores::from_logits(Rule::Integrated, &sys.logits(&test.x).unwrap());
    sys.set_universal_threshold(threshold_for_tpr(&nat.score, 0.95).unwrap());

    for loss in [AttackLoss::ClassifierCw, AttackLoss::PiecewiseCombined] {
        let adv = pgd(&loss, &AttackContext::combined(&f, &detectors), &test.x, &test.y, &ball, &PgdConfig::new(100, 0.01), Direction::Minimize, 0)
            .unwrap();
        let decisions = integrated_classify_with_reject(&sys, &adv.x).unwrap();
        let undetected = decisions
            .iter()
            .zip(&test.y)
            .filter(|(d, &y)| matches!(d, Decision::Class(c) if *c != y))
            .count();
        println!("{}: {undetected}/{} adversarial inputs misclassified and accepted", loss.name(), test.len());
    }

    let gen = generative_classify(&detectors, &test.x).unwrap();
    let acc = gen.iter().zip(&test.y).filter(|(a, b)| a == b).count() as f64 / test.len() as f64;
    println!("generative classifier accuracy {acc:.3}");
    let h = aggregate_detector(&detectors, &test.x.select_rows(&[0])).unwrap();
    println!("detector logits of the first test digit: {:?}", h.row(0));
}
