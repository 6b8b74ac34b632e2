use aat::detection::{auc, quantile_thresholds, roc_sweep, RuleScores};

fn main() {
    let pos = [0.9, 0.8, 0.8, 0.35, 0.7];
    let neg = [0.1, 0.8, 0.4, 0.2];
    // Ties between a positive and a negative count half.
    println!("AUC = {:.4}", auc(&pos, &neg).unwrap());

    // A detection ROC: naturals are correctly classified with these scores,
    // perturbed samples all carry a wrong prediction.
    let nat = RuleScores { pred: vec![0, 1, 0, 1, 0], score: pos.to_vec() };
    let adv = RuleScores { pred: vec![1, 0, 1, 0], score: neg.to_vec() };
    let thresholds = quantile_thresholds(&nat.score, 5).unwrap();
    let rows = roc_sweep(&nat, &[0, 1, 0, 1, 0], &adv, &[0, 1, 0, 1], &thresholds).unwrap();
    println!("{:>8} {:>6} {:>6}", "T", "TPR", "FPR");
    for r in rows {
        println!("{:>8.3} {:>6.2} {:>6.2}", r.t, r.tpr, r.fpr);
    }
}
