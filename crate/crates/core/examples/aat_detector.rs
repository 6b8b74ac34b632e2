//! Asymmetrical adversarial training of the digit-0 detector on mnist-mini,
//! then its AUC against attacks stronger than the one used in training.

use aat::aat::{robustness_auc, train_detector, AatConfig};
use aat::attacks::{NormBall, PgdConfig};
use aat::data::{bundled_data_dir, PresetSpec};
use aat::models::ArchSpec;
use aat::optim::AdamConfig;

fn main() {
    let splits = PresetSpec::mnist_mini().load(&bundled_data_dir()).unwrap();
    let ball = NormBall::linf(0.3).unwrap();
    let mut cfg = AatConfig::new(ball, PgdConfig::new(40, 0.02), PgdConfig::new(20, 0.05), 4);
    cfg.adam = AdamConfig::with_lr(1e-3);
    cfg.val_limit = Some(100);
    let run = train_detector(&splits.train, &splits.val, 0, &ArchSpec::mlp(&[784, 128, 128, 1]), &cfg).unwrap();
    for r in &run.history {
        println!("epoch {} bce {:.4} val nat-auc {:.4} adv-auc {:.4}", r.epoch, r.train_bce, r.nat_auc, r.adv_auc);
    }
    println!("kept epoch {:?}", run.best_epoch);
    for (steps, restarts) in [(40, 1), (200, 1), (100, 5)] {
        let attack = PgdConfig::new(steps, 0.01).with_restarts(restarts, restarts > 1);
        let p = robustness_auc(&run.model, 0, &splits.test, &ball, &attack, 1, Some(200)).unwrap();
        println!("test: {steps} steps x {restarts} restarts -> nat {:.4} adv {:.4}", p.nat_auc, p.adv_auc);
    }
}
