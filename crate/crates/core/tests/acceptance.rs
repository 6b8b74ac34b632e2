//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.
//!
//! Criteria 5–9 run through the experiment runner; the whole pipeline then
//! runs a second time in the same directory and both output trees are
//! compared byte for byte (criterion 11).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use aat::attacks::{pgd, AttackContext, AttackLoss, Direction, Norm, NormBall, PgdConfig, StepRule};
use aat::detection::{auc, EvalReport};
use aat::diagnostics::gradcheck_suite;
use aat::distortion::{mean_l2_distortion, trace_has_prefix_structure, BsearchConfig};
use aat::experiment::{run, ExperimentConfig};
use aat::models::{ArchSpec, Model, Param};
use aat::numerics::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

const GRADCHECK_POINTS: usize = 100;
const GRADCHECK_MAX_REL_ERROR: f64 = 1e-4;
const GRADCHECK_BUDGET: Duration = Duration::from_secs(60);

const AUC_SETS: usize = 1000;
const AUC_MAX_SET: usize = 50;
const AUC_TOLERANCE: f64 = 1e-12;

const CONVEX_STEPS: usize = 200;
const CONVEX_TOLERANCE: f64 = 1e-3;

const UPPER_BOUND_INSTANCES: usize = 100;

const MODE_TOLERANCE: f64 = 0.02;
const TRUE_MODES: [f64; 2] = [0.4, 0.6];
const MAX_TV: f64 = 0.15;
const SYNTH_1D_BUDGET: Duration = Duration::from_secs(5 * 60);

const HELD_OUT_MIN_SIGMOID: f64 = 0.9;
const FAR_FIELD_MAX_SIGMOID: f64 = 0.5;
const SYNTH_2D_BUDGET: Duration = Duration::from_secs(15 * 60);

const AUC_GAP: f64 = 0.02;
const ROBUSTNESS_BUDGET: Duration = Duration::from_secs(2 * 3600);

const MATCHED_TPR: f64 = 0.95;
const CLASSIFIER_ONLY_MAX_FPR: f64 = 0.02;

struct Tally {
    failed: usize,
}

impl Tally {
    fn record(&mut self, id: usize, name: &str, pass: bool, detail: String) {
        let verdict = if pass { "PASS" } else { "FAIL" };
        println!("criterion {id:>2} {verdict}: {name}: {detail}");
        if !pass {
            self.failed += 1;
        }
    }
}

fn criterion_1() -> (bool, String) {
    let start = Instant::now();
    let entries = match gradcheck_suite(GRADCHECK_POINTS, 1) {
        Ok(e) => e,
        Err(e) => return (false, format!("suite error: {e}")),
    };
    let elapsed = start.elapsed();
    let worst = entries
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .expect("non-empty suite");
    let pass = worst.max_rel_error < GRADCHECK_MAX_REL_ERROR && elapsed < GRADCHECK_BUDGET;
    (
        pass,
        format!(
            "{} checks x {GRADCHECK_POINTS} points, worst {:.2e} ({}), {:.1}s",
            entries.len(),
            worst.max_rel_error,
            worst.name,
            elapsed.as_secs_f64()
        ),
    )
}

/// Probability that a random positive outscores a random negative, ties counted half.
fn brute_force_auc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut total = 0.0;
    for p in pos {
        for n in neg {
            total += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    total / (pos.len() * neg.len()) as f64
}

fn criterion_2() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for i in 0..AUC_SETS {
        let np = rng.gen_range(1..=AUC_MAX_SET);
        let nn = rng.gen_range(1..=AUC_MAX_SET);
        // Every other set draws from a small integer range to force ties.
        let draw = |rng: &mut ChaCha8Rng| {
            if i % 2 == 0 {
                f64::from(rng.gen_range(0..6))
            } else {
                rng.gen_range(-3.0..3.0)
            }
        };
        let pos: Vec<f64> = (0..np).map(|_| draw(&mut rng)).collect();
        let neg: Vec<f64> = (0..nn).map(|_| draw(&mut rng)).collect();
        match auc(&pos, &neg) {
            Ok(a) => worst = worst.max((a - brute_force_auc(&pos, &neg)).abs()),
            Err(e) => return (false, format!("set {i}: {e}")),
        }
    }
    (worst <= AUC_TOLERANCE, format!("{AUC_SETS} sets, max |rank - brute| = {worst:.1e}"))
}

/// Pair of linear detectors on `d` inputs: detector 0 is constant, detector 1
/// is `w·x`. With label 0, `−z_1(x) + ‖x − x0‖²` equals `‖x − t‖²` up to a
/// constant when `w = 2(t − x0)`.
fn quadratic_pair(x0: &[f64], t: &[f64]) -> Vec<Model> {
    let d = x0.len();
    let linear = |w: Vec<f64>| {
        Model::from_params(
            ArchSpec::mlp(&[d, 1]),
            vec![
                Param {
                    name: "layer0.weight".into(),
                    value: Tensor::new(vec![d, 1], w).unwrap(),
                },
                Param {
                    name: "layer0.bias".into(),
                    value: Tensor::vector(vec![0.0]),
                },
            ],
        )
        .unwrap()
    };
    let w: Vec<f64> = t.iter().zip(x0).map(|(a, b)| 2.0 * (a - b)).collect();
    vec![linear(vec![0.0; d]), linear(w)]
}

fn criterion_3() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (d, eps, step) = (5, 0.05, 5e-4);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for norm in [Norm::L2, Norm::Linf] {
        let ball = NormBall::new(norm, eps).unwrap();
        let cfg = PgdConfig::new(CONVEX_STEPS, step).with_rule(StepRule::NormalizedSteepestDescent);
        for _ in 0..20 {
            let x0: Vec<f64> = (0..d).map(|_| rng.gen_range(0.3..0.7)).collect();
            let t: Vec<f64> = x0.iter().map(|v| v + rng.gen_range(-2.0 * eps..2.0 * eps)).collect();
            let detectors = quadratic_pair(&x0, &t);
            let ctx = AttackContext::detectors(&detectors);
            let xt = Tensor::new(vec![1, d], x0.clone()).unwrap();
            let out = pgd(&AttackLoss::PenalizedDetector { c: 1.0 }, &ctx, &xt, &[0], &ball, &cfg, Direction::Minimize, 0);
            let out = match out {
                Ok(o) => o,
                Err(e) => return (false, format!("pgd error: {e}")),
            };
            let mut delta: Vec<f64> = t.iter().zip(&x0).map(|(a, b)| a - b).collect();
            ball.project_row(&mut delta);
            let err: Vec<f64> = out.x.row(0).iter().zip(&x0).zip(&delta).map(|((x, o), p)| x - o - p).collect();
            let e = match norm {
                Norm::L2 => err.iter().map(|v| v * v).sum::<f64>().sqrt(),
                Norm::Linf => err.iter().fold(0.0, |m: f64, v| m.max(v.abs())),
            };
            worst = worst.max(e);
            cases += 1;
        }
    }
    (
        worst <= CONVEX_TOLERANCE,
        format!("{cases} instances (L2 and Linf), max distance to projected optimum {worst:.2e}"),
    )
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn criterion_4() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let side = 41;
    let mut violations = 0;
    let mut constrained_sets = 0;
    for i in 0..UPPER_BOUND_INSTANCES {
        let f = Model::init(ArchSpec::mlp(&[2, 8, 2]), 100 + i as u64).unwrap();
        let h = Model::init(ArchSpec::mlp(&[2, 8, 1]), 200 + i as u64).unwrap();
        let x = [rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8)];
        let eps = rng.gen_range(0.05..0.3);
        let k = rng.gen_range(0..2);
        let mut pts = Vec::with_capacity(2 * side * side);
        for a in 0..side {
            for b in 0..side {
                let da = -eps + 2.0 * eps * a as f64 / (side - 1) as f64;
                let db = -eps + 2.0 * eps * b as f64 / (side - 1) as f64;
                pts.extend([x[0] + da, x[1] + db]);
            }
        }
        let grid = Tensor::new(vec![side * side, 2], pts).unwrap();
        let zf = f.logits(&grid).unwrap();
        let loss: Vec<f64> = h.scores(&grid).unwrap().into_iter().map(softplus).collect();
        let unconstrained = loss.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let constrained = (0..grid.rows())
            .filter(|&r| {
                let row = zf.row(r);
                let pred = if row[1] > row[0] { 1 } else { 0 };
                pred == k
            })
            .map(|r| loss[r])
            .fold(f64::NEG_INFINITY, f64::max);
        if constrained.is_finite() {
            constrained_sets += 1;
        }
        if constrained > unconstrained {
            violations += 1;
        }
    }
    (
        violations == 0,
        format!("{UPPER_BOUND_INSTANCES} instances ({constrained_sets} with a non-empty constrained set), {violations} violations"),
    )
}

/// Linear detectors `h_0 = a(0.5 − x₁)`, `h_1 = a(x₁ − 0.5)`.
fn linear_pair(a: f64) -> Vec<Model> {
    let make = |s: f64| {
        Model::from_params(
            ArchSpec::mlp(&[2, 1]),
            vec![
                Param {
                    name: "layer0.weight".into(),
                    value: Tensor::new(vec![2, 1], vec![s * a, 0.0]).unwrap(),
                },
                Param {
                    name: "layer0.bias".into(),
                    value: Tensor::vector(vec![-s * a * 0.5]),
                },
            ],
        )
        .unwrap()
    };
    vec![make(-1.0), make(1.0)]
}

fn criterion_10() -> (bool, String) {
    let (a, threshold) = (4.0, 0.4);
    // Label-0 samples fool the generative classifier only past x₁ = 0.5 + T/a.
    let boundary = 0.5 + threshold / a;
    let detectors = linear_pair(a);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let n = 20;
    let rows: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.gen_range(0.1..0.45), rng.gen_range(0.1..0.9)]).collect();
    let x = Tensor::from_rows(&rows).unwrap();
    let cfg = BsearchConfig {
        c_init: 4.0,
        c_lo: 0.0,
        c_hi: 8.0,
        depth: 12,
        pgd: PgdConfig::new(200, 0.01),
        threshold,
    };
    let summary = match mean_l2_distortion(&detectors, &x, &vec![0; n], &cfg, 10) {
        Ok(s) => s,
        Err(e) => return (false, format!("distortion error: {e}")),
    };
    let margins: Vec<f64> = summary
        .outcomes
        .iter()
        .zip(&rows)
        .filter(|(o, _)| o.success)
        .map(|(_, r)| boundary - r[0])
        .collect();
    let margin = margins.iter().sum::<f64>() / margins.len().max(1) as f64;
    let prefix = summary.outcomes.iter().all(|o| trace_has_prefix_structure(&o.trace));
    let pass = !margins.is_empty() && summary.mean_l2 >= margin && prefix;
    (
        pass,
        format!(
            "{}/{n} attacked, mean L2 {:.4} vs analytic margin {margin:.4}, prefix structure {}",
            margins.len(),
            summary.mean_l2,
            if prefix { "holds" } else { "violated" }
        ),
    )
}

const BALL: &str = r#"{ norm = "linf", eps = 0.3 }"#;

fn stage_configs(root: &Path) -> Vec<(&'static str, String)> {
    let dir = |name: &str| root.join(name).display().to_string();
    let attack = |mode: &str| format!("[[evaluate.attacks]]\nmode = \"{mode}\"\nball = {BALL}\npgd = {{ steps = 100, step_size = 0.01 }}\n");
    vec![
        ("synth1d", format!("seed = 0\nout_dir = '{}'\nsteps = [\"synth-1d\"]\n", dir("synth1d"))),
        ("synth2d", format!("seed = 0\nout_dir = '{}'\nsteps = [\"synth-2d\"]\n", dir("synth2d"))),
        (
            "mini",
            format!(
                "seed = 0\nout_dir = '{}'\nsteps = [\"train-classifier\", \"train-detector\", \"robustness-sweep\", \"evaluate\"]\n\n\
                 [detector.aat]\nepochs = 20\nball = {BALL}\nattack = {{ steps = 100, step_size = 0.01 }}\n\
                 val_attack = {{ steps = 20, step_size = 0.05 }}\nval_limit = 100\nadam = {{ lr = 1e-3 }}\n\n\
                 [robustness]\nclasses = [0, 1]\nball = {BALL}\nsteps = [100, 200]\nstep_sizes = [0.01]\nrestarts = [1]\n\n\
                 [evaluate]\nmode = \"integrated\"\n{}{}",
                dir("mini"),
                attack("classifier"),
                attack("combined")
            ),
        ),
        (
            "restarts",
            format!(
                "seed = 0\nout_dir = '{}'\nmodels_dir = '{}'\nsteps = [\"robustness-sweep\"]\n\n\
                 [robustness]\nclasses = [0, 1]\nball = {BALL}\nsteps = [100]\nstep_sizes = [0.01]\nrestarts = [50]\n",
                dir("restarts"),
                dir("mini")
            ),
        ),
        (
            "generative",
            format!(
                "seed = 0\nout_dir = '{}'\nmodels_dir = '{}'\nsteps = [\"evaluate\"]\n\n[evaluate]\nmode = \"generative\"\n{}{}",
                dir("generative"),
                dir("mini"),
                attack("detectors"),
                attack("cross-entropy")
            ),
        ),
    ]
}

/// Runs every stage under `root`, returning wall time per stage.
fn run_pipeline(root: &Path) -> Result<BTreeMap<&'static str, Duration>, String> {
    let mut times = BTreeMap::new();
    for (name, text) in stage_configs(root) {
        let cfg = ExperimentConfig::from_toml(&text).map_err(|e| format!("{name} config: {e}"))?;
        let start = Instant::now();
        run(&cfg).map_err(|e| format!("{name}: {e}"))?;
        times.insert(name, start.elapsed());
    }
    Ok(times)
}

fn read_json(path: &Path) -> Result<Value, String> {
    let bytes = fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_slice(&bytes).map_err(|e| format!("{}: {e}", path.display()))
}

fn field(v: &Value, key: &str) -> f64 {
    v[key].as_f64().unwrap_or(f64::NAN)
}

fn criterion_5(root: &Path, took: Duration) -> Result<(bool, String), String> {
    let v = read_json(&root.join("synth1d/synth_1d.json"))?;
    let (tv, base) = (field(&v, "aat_tv"), field(&v, "baseline_tv"));
    let modes: Vec<f64> = v["aat_modes"].as_array().into_iter().flatten().filter_map(Value::as_f64).collect();
    let near = |m: f64| TRUE_MODES.iter().any(|t| (m - t).abs() <= MODE_TOLERANCE);
    let covered = TRUE_MODES.iter().all(|t| modes.iter().any(|m| (m - t).abs() <= MODE_TOLERANCE));
    let modes_ok = covered && modes.iter().all(|&m| near(m));
    let pass = modes_ok && tv < MAX_TV && tv < base && took < SYNTH_1D_BUDGET;
    Ok((
        pass,
        format!("modes {modes:.4?}, TV {tv:.4} (baseline {base:.4}), {:.0}s", took.as_secs_f64()),
    ))
}

fn criterion_6(root: &Path, took: Duration) -> Result<(bool, String), String> {
    let v = read_json(&root.join("synth2d/synth_2d.json"))?;
    let (held, far) = (field(&v, "held_out_mean_sigmoid"), field(&v, "far_field_mean_sigmoid"));
    let pass = held > HELD_OUT_MIN_SIGMOID && far < FAR_FIELD_MAX_SIGMOID && took < SYNTH_2D_BUDGET;
    Ok((
        pass,
        format!("held-out {held:.4}, far-field {far:.4}, {:.0}s", took.as_secs_f64()),
    ))
}

fn adv_auc(v: &Value, class: u64, steps: u64, restarts: u64) -> Option<f64> {
    v["points"].as_array()?.iter().find_map(|p| {
        (p["class"].as_u64() == Some(class) && p["steps"].as_u64() == Some(steps) && p["restarts"].as_u64() == Some(restarts))
            .then(|| p["adv_auc"].as_f64())
            .flatten()
    })
}

fn criterion_7(root: &Path, took: Duration) -> Result<(bool, String), String> {
    let base = read_json(&root.join("mini/robustness.json"))?;
    let rest = read_json(&root.join("restarts/robustness.json"))?;
    let mut pass = took < ROBUSTNESS_BUDGET;
    let mut parts = Vec::new();
    for k in 0..2 {
        let (a100, a200, a50r) = match (adv_auc(&base, k, 100, 1), adv_auc(&base, k, 200, 1), adv_auc(&rest, k, 100, 50)) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => return Err(format!("missing robustness points for class {k}")),
        };
        pass &= (a200 - a100).abs() < AUC_GAP && (a50r - a100).abs() < AUC_GAP;
        parts.push(format!("k={k}: 100-step {a100:.4}, 200-step {a200:.4}, 50 restarts {a50r:.4}"));
    }
    parts.push(format!("{:.0}s", took.as_secs_f64()));
    Ok((pass, parts.join("; ")))
}

fn fpr_at_tpr(path: &Path) -> Result<f64, String> {
    let report = EvalReport::read_json(path).map_err(|e| format!("{}: {e}", path.display()))?;
    report
        .row_at_tpr(MATCHED_TPR)
        .map(|r| r.fpr)
        .ok_or_else(|| format!("{}: no threshold reaches TPR {MATCHED_TPR}", path.display()))
}

fn criterion_8(root: &Path) -> Result<(bool, String), String> {
    let fpr = fpr_at_tpr(&root.join("mini/eval_integrated_classifier.json"))?;
    Ok((fpr <= CLASSIFIER_ONLY_MAX_FPR, format!("FPR {fpr:.4} at TPR {MATCHED_TPR}")))
}

fn criterion_9(root: &Path) -> Result<(bool, String), String> {
    let classifier = fpr_at_tpr(&root.join("mini/eval_integrated_classifier.json"))?;
    let combined = fpr_at_tpr(&root.join("mini/eval_integrated_combined.json"))?;
    let detectors = fpr_at_tpr(&root.join("generative/eval_generative_detectors.json"))?;
    let ce = fpr_at_tpr(&root.join("generative/eval_generative_cross-entropy.json"))?;
    Ok((
        combined >= classifier && detectors >= ce,
        format!(
            "integrated: piecewise {combined:.4} vs classifier-only {classifier:.4}; generative: detector loss {detectors:.4} vs cross-entropy {ce:.4}"
        ),
    ))
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).into_iter().flatten().flatten() {
            let p = entry.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).expect("under root").to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn criterion_11(first: &Path, second: &Path) -> (bool, String) {
    let (a, b) = (files_under(first), files_under(second));
    if a != b {
        return (false, format!("file sets differ ({} vs {} files)", a.len(), b.len()));
    }
    let differing: Vec<String> = a
        .iter()
        .filter(|rel| fs::read(first.join(rel)).ok() != fs::read(second.join(rel)).ok())
        .map(|rel| rel.display().to_string())
        .collect();
    (
        differing.is_empty() && !a.is_empty(),
        if differing.is_empty() {
            format!("{} files byte-identical across two runs", a.len())
        } else {
            format!("differing: {}", differing.join(", "))
        },
    )
}

fn main() -> ExitCode {
    let mut tally = Tally { failed: 0 };
    let (p, d) = criterion_1();
    tally.record(1, "gradient check", p, d);
    let (p, d) = criterion_2();
    tally.record(2, "AUC oracle", p, d);
    let (p, d) = criterion_3();
    tally.record(3, "PGD convex oracle", p, d);
    let (p, d) = criterion_4();
    tally.record(4, "constrained max upper bound", p, d);

    let tmp = tempfile::tempdir().expect("temp dir");
    let work = tmp.path().join("run");
    let first = tmp.path().join("first");
    let pipeline = run_pipeline(&work).and_then(|times| {
        fs::rename(&work, &first).map_err(|e| e.to_string())?;
        Ok(times)
    });
    let names = [
        (5, "1D density recovery"),
        (6, "2D field"),
        (7, "robustness to stronger attacks"),
        (8, "classifier-only attack detectability"),
        (9, "attack strength ordering"),
    ];
    match pipeline {
        Err(e) => {
            for (id, name) in names {
                tally.record(id, name, false, format!("pipeline failed: {e}"));
            }
        }
        Ok(times) => {
            let results = [
                criterion_5(&first, times["synth1d"]),
                criterion_6(&first, times["synth2d"]),
                criterion_7(&first, times["mini"] + times["restarts"]),
                criterion_8(&first),
                criterion_9(&first),
            ];
            for ((id, name), r) in names.into_iter().zip(results) {
                let (p, d) = r.unwrap_or_else(|e| (false, e));
                tally.record(id, name, p, d);
            }
        }
    }

    let (p, d) = criterion_10();
    tally.record(10, "distortion protocol", p, d);

    let (p, d) = match run_pipeline(&work) {
        Ok(_) if first.exists() => criterion_11(&first, &work),
        Ok(_) => (false, "first run missing".into()),
        Err(e) => (false, format!("rerun failed: {e}")),
    };
    tally.record(11, "determinism", p, d);

    if tally.failed == 0 {
        println!("acceptance: all criteria pass");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {} criteria failed", tally.failed);
        ExitCode::FAILURE
    }
}
