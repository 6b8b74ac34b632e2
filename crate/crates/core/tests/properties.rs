use aat::attacks::{pgd, AttackContext, AttackLoss, Direction, Norm, NormBall, PgdConfig, PROJECTION_SLACK};
use aat::detection::{
    accuracy_of, auc, detection_accuracy_of, per_detector_accuracy, quantile_thresholds, roc_sweep, tpr_of, Rule,
    RuleScores, SystemLogits,
};
use aat::models::{ArchSpec, Model, Param};
use aat::numerics::Tensor;
use proptest::prelude::*;

/// Linear map picking input coordinates `cols` as its outputs.
fn selector(inputs: usize, cols: &[usize]) -> Model {
    let mut w = vec![0.0; inputs * cols.len()];
    for (o, &c) in cols.iter().enumerate() {
        w[c * cols.len() + o] = 1.0;
    }
    let params = vec![
        Param {
            name: "layer0.weight".into(),
            value: Tensor::new(vec![inputs, cols.len()], w).unwrap(),
        },
        Param {
            name: "layer0.bias".into(),
            value: Tensor::vector(vec![0.0; cols.len()]),
        },
    ];
    Model::from_params(ArchSpec::mlp(&[inputs, cols.len()]), params).unwrap()
}

/// Classifier reading `f` from the first K inputs, detector k reading input K + k.
fn logit_readers(k: usize) -> (Model, Vec<Model>) {
    let f = selector(2 * k, &(0..k).collect::<Vec<_>>());
    let h = (0..k).map(|i| selector(2 * k, &[k + i])).collect();
    (f, h)
}

fn eval(loss: AttackLoss, f: &[f64], h: &[f64], y: usize) -> f64 {
    let k = f.len();
    let (fm, hm) = logit_readers(k);
    let x = Tensor::new(vec![1, 2 * k], f.iter().chain(h).copied().collect()).unwrap();
    loss.evaluate(&AttackContext::combined(&fm, &hm), &x, &x, &[y]).unwrap()[0]
}

fn max_excl(v: &[f64], y: usize) -> f64 {
    v.iter()
        .enumerate()
        .filter(|(i, _)| *i != y)
        .map(|(_, &x)| x)
        .fold(f64::NEG_INFINITY, f64::max)
}

fn logit_case() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, usize)> {
    (2usize..6).prop_flat_map(|k| {
        (
            prop::collection::vec(-5.0f64..5.0, k),
            prop::collection::vec(-5.0f64..5.0, k),
            0..k,
        )
    })
}

fn score_sets() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (
        prop::collection::vec((-20i32..20).prop_map(|v| f64::from(v) / 4.0), 1..40),
        prop::collection::vec((-20i32..20).prop_map(|v| f64::from(v) / 4.0), 1..40),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn projection_is_idempotent_and_feasible(
        delta in prop::collection::vec(-2.0f64..2.0, 1..30),
        eps in 0.0f64..1.0,
        l2 in any::<bool>(),
    ) {
        let ball = NormBall::new(if l2 { Norm::L2 } else { Norm::Linf }, eps).unwrap();
        let mut once = delta.clone();
        ball.project_row(&mut once);
        let mut twice = once.clone();
        ball.project_row(&mut twice);
        prop_assert_eq!(&once, &twice);
        let norm = if l2 {
            once.iter().map(|v| v * v).sum::<f64>().sqrt()
        } else {
            once.iter().fold(0.0f64, |m, v| m.max(v.abs()))
        };
        prop_assert!(norm <= eps + PROJECTION_SLACK);
    }

    #[test]
    fn auc_ignores_monotone_transforms((pos, neg) in score_sets(), a in 0.1f64..5.0, b in -3.0f64..3.0) {
        let base = auc(&pos, &neg).unwrap();
        let tp: Vec<f64> = pos.iter().map(|v| (a * v + b).exp()).collect();
        let tn: Vec<f64> = neg.iter().map(|v| (a * v + b).exp()).collect();
        prop_assert!((auc(&tp, &tn).unwrap() - base).abs() < 1e-12);
        prop_assert!((auc(&neg, &pos).unwrap() + base - 1.0).abs() < 1e-12);
    }

    #[test]
    fn roc_sweep_is_monotone(
        (nat, adv) in score_sets(),
        points in 2usize..50,
        seed in any::<u64>(),
    ) {
        let pred = |n: usize, off: u64| -> Vec<usize> { (0..n).map(|i| ((seed >> (i % 60)) as usize + off as usize) % 3).collect() };
        let nat = RuleScores { pred: pred(nat.len(), 0), score: nat };
        let adv = RuleScores { pred: pred(adv.len(), 1), score: adv };
        let nat_y = vec![0; nat.len()];
        let adv_y = vec![0; adv.len()];
        let t = quantile_thresholds(&nat.score, points).unwrap();
        let rows = roc_sweep(&nat, &nat_y, &adv, &adv_y, &t).unwrap();
        for w in rows.windows(2) {
            prop_assert!(w[1].tpr <= w[0].tpr);
            prop_assert!(w[1].fpr <= w[0].fpr);
            prop_assert!(w[1].accuracy <= w[0].accuracy);
        }
        for r in &rows {
            prop_assert!(r.accuracy <= r.tpr);
        }
    }

    #[test]
    fn accuracy_never_exceeds_tpr(
        scores in prop::collection::vec(-5.0f64..5.0, 1..60),
        labels_seed in any::<u64>(),
        t in -5.0f64..5.0,
    ) {
        let n = scores.len();
        let pred: Vec<usize> = (0..n).map(|i| ((labels_seed >> (i % 60)) & 1) as usize).collect();
        let labels: Vec<usize> = (0..n).map(|i| ((labels_seed >> ((i + 7) % 60)) & 1) as usize).collect();
        let nat = RuleScores { pred, score: scores };
        prop_assert!(accuracy_of(&nat, &labels, t) <= tpr_of(&nat, t));
    }

    #[test]
    fn generative_rule_is_shift_invariant(
        rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 1..10),
        c in -10.0f64..10.0,
    ) {
        let h = Tensor::from_rows(&rows).unwrap();
        let logits = SystemLogits { f: h.clone(), h: h.clone() };
        let shifted = SystemLogits { f: h.clone(), h: h.map(|v| v + c) };
        let a = RuleScores::from_logits(Rule::Generative, &logits);
        let b = RuleScores::from_logits(Rule::Generative, &shifted);
        prop_assert_eq!(&a.pred, &b.pred);
        for (x, y) in a.score.iter().zip(&b.score) {
            prop_assert!((y - x - c).abs() < 1e-9);
        }
    }

    #[test]
    fn detection_accuracy_decomposes_per_detector(
        nat in prop::collection::vec((0usize..3, -3.0f64..3.0), 1..30),
        adv in prop::collection::vec((0usize..3, 0usize..3, -3.0f64..3.0), 0..30),
        thresholds in prop::collection::vec(-2.0f64..2.0, 3),
    ) {
        let nat = RuleScores { pred: nat.iter().map(|p| p.0).collect(), score: nat.iter().map(|p| p.1).collect() };
        let adv_y: Vec<usize> = adv.iter().map(|p| p.1).collect();
        let adv = RuleScores { pred: adv.iter().map(|p| p.0).collect(), score: adv.iter().map(|p| p.2).collect() };
        let total = detection_accuracy_of(&nat, &adv, &adv_y, &thresholds);
        let parts = per_detector_accuracy(&nat, &adv, &adv_y, &thresholds);
        let n: usize = parts.iter().map(|p| p.1).sum();
        let fooling = (0..adv.pred.len()).filter(|&i| adv.pred[i] != adv_y[i]).count();
        prop_assert_eq!(n, nat.pred.len() + fooling);
        let ok: f64 = parts.iter().map(|p| p.0 * p.1 as f64).sum();
        prop_assert!((ok / n as f64 - total).abs() < 1e-12);
    }

    #[test]
    fn surrogate_matches_direct_transcription((f, h, y) in logit_case()) {
        let fmax = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut g = f.clone();
        g.push((-max_excl(&h, y) + 1.0) * fmax);
        let gmax = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let expected = gmax - max_excl(&f, y);
        prop_assert_eq!(eval(AttackLoss::SurrogateCombined, &f, &h, y), expected);
    }

    #[test]
    fn piecewise_selects_its_branch((f, h, y) in logit_case()) {
        let piecewise = eval(AttackLoss::PiecewiseCombined, &f, &h, y);
        if f[y] >= max_excl(&f, y) {
            prop_assert_eq!(piecewise, eval(AttackLoss::ClassifierCw, &f, &h, y));
        } else {
            prop_assert_eq!(piecewise, eval(AttackLoss::Detector, &f, &h, y));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn more_restarts_never_worsen_the_loss(model_seed in 0u64..1000, seed in any::<u64>(), extra in 1usize..4) {
        let m = Model::init(ArchSpec::mlp(&[4, 8, 1]), model_seed).unwrap();
        let x = Tensor::from_rows(&[vec![0.2, 0.4, 0.6, 0.8], vec![0.5, 0.5, 0.1, 0.9]]).unwrap();
        let ctx = AttackContext::detector(&m);
        let ball = NormBall::linf(0.2).unwrap();
        let loss = AttackLoss::TargetedLogit { target: 0 };
        let run = |r: usize| {
            let cfg = PgdConfig::new(5, 0.02).with_restarts(r, true);
            pgd(&loss, &ctx, &x, &[], &ball, &cfg, Direction::Minimize, seed).unwrap().loss
        };
        let few = run(1);
        let many = run(1 + extra);
        for (a, b) in few.iter().zip(&many) {
            prop_assert!(b <= a);
        }
    }
}
