use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;

use super::config::{AttackMode, AttackSpec, EvalMode, ExperimentConfig, Step};
use crate::aat::{finetune_detector_from_classifier, history_csv, robustness_auc, train_detector, DetectorTraining};
use crate::attacks::{
    aggregate_detector, pgd, synthesize_from_noise, write_attack_export, write_tensor_dump, AttackContext, AttackManifest, ClassGaussian,
    PgdConfig,
};
use crate::data::{Dataset, Splits};
use crate::detection::{auc, quantile_thresholds, roc_sweep, EvalReport, ReportMeta, Rule, RuleScores, SystemLogits};
use crate::distortion::{generative_threshold_for_tpr, mean_l2_distortion};
use crate::error::{Error, Result, ResultExt};
use crate::models::{
    accuracy, load_checkpoint, save_checkpoint, train_softmax_classifier, ArchSpec, Model, TrainingMeta,
};
use crate::numerics::Tensor;
use crate::synth::{run_1d_benchmark, train_and_map_2d, Synth1dResult};

/// Hash and files written by [`run`].
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub config_hash: String,
    pub artifacts: Vec<PathBuf>,
}

/// `# config_hash=<hash> seed=<seed>` header line used by every CSV artifact.
pub fn stamp_line(hash: &str, seed: u64) -> String {
    format!("# config_hash={hash} seed={seed}\n")
}

struct Runner<'c> {
    cfg: &'c ExperimentConfig,
    hash: String,
    splits: Option<Splits>,
    artifacts: Vec<PathBuf>,
}

/// Executes the configured steps in order. Every artifact carries the config
/// hash and seed: CSVs in a leading comment line, JSON in dedicated fields,
/// checkpoints in their metadata.
pub fn run(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let mut r = Runner {
        cfg,
        hash: cfg.hash()?,
        splits: None,
        artifacts: Vec::new(),
    };
    fs::create_dir_all(&cfg.out_dir)?;
    let text = format!("{}{}", stamp_line(&r.hash, cfg.seed), cfg.to_toml()?);
    r.write("config.toml", text.as_bytes())?;
    for &step in &cfg.steps {
        log::info!("step {} (config {})", step.name(), r.hash);
        r.step(step).context(|| format!("step `{}` of config {}", step.name(), r.hash))?;
    }
    Ok(RunSummary {
        config_hash: r.hash,
        artifacts: r.artifacts,
    })
}

fn detector_file(k: usize) -> String {
    format!("detector_{k}.ckpt")
}

fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

impl<'c> Runner<'c> {
    fn step(&mut self, step: Step) -> Result<()> {
        match step {
            Step::TrainClassifier => self.train_classifier(),
            Step::TrainDetector => self.train_detectors(false),
            Step::FinetuneDetector => self.train_detectors(true),
            Step::Attack => self.attack(),
            Step::Evaluate => self.evaluate(),
            Step::Distortion => self.distortion(),
            Step::RobustnessSweep => self.robustness(),
            Step::Synth1d => self.synth_1d(),
            Step::Synth2d => self.synth_2d(),
            Step::Gradcheck => self.gradcheck(),
        }
    }

    fn seed(&self, parts: &[u64]) -> u64 {
        crate::seed::derive(self.cfg.seed, parts)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.cfg.out_dir.join(name)
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let p = self.path(name);
        crate::io::write_atomic(&p, bytes)?;
        self.artifacts.push(p);
        Ok(())
    }

    fn write_csv(&mut self, name: &str, body: &str) -> Result<()> {
        let text = format!("{}{body}", stamp_line(&self.hash, self.cfg.seed));
        self.write(name, text.as_bytes())
    }

    fn write_json(&mut self, name: &str, mut value: serde_json::Value) -> Result<()> {
        if let Some(obj) = value.as_object_mut() {
            obj.insert("config_hash".into(), json!(self.hash));
            obj.insert("seed".into(), json!(self.cfg.seed));
        }
        self.write(name, &serde_json::to_vec_pretty(&value)?)
    }

    fn meta(&self, epochs: usize, attack: Option<serde_json::Value>, note: &str) -> TrainingMeta {
        TrainingMeta {
            seed: self.cfg.seed,
            epochs,
            attack,
            config_hash: Some(self.hash.clone()),
            note: note.into(),
        }
    }

    fn splits(&mut self) -> Result<&Splits> {
        if self.splits.is_none() {
            self.splits = Some(self.cfg.data.load()?);
        }
        Ok(self.splits.as_ref().expect("loaded"))
    }

    fn test_set(&mut self, limit: Option<usize>) -> Result<Dataset> {
        let test = &self.splits()?.test;
        Ok(match limit {
            Some(n) => test.take(n),
            None => test.clone(),
        })
    }

    fn load_model(&self, name: &str) -> Result<Model> {
        let p = self.cfg.models_dir().join(name);
        load_checkpoint(&p)
            .map(|(m, _)| m)
            .context(|| format!("loading {}", p.display()))
    }

    fn load_detectors(&mut self) -> Result<Vec<Model>> {
        let classes = self.splits()?.train.classes;
        (0..classes).map(|k| self.load_model(&detector_file(k))).collect()
    }

    fn train_classifier(&mut self) -> Result<()> {
        let splits = self.splits()?.clone();
        let c = splits.train.classes;
        let arch = self
            .cfg
            .classifier
            .arch
            .clone()
            .unwrap_or_else(|| ArchSpec::mlp(&[splits.train.dim(), 256, 256, c]));
        let mut tc = self.cfg.classifier.train.clone();
        tc.seed = self.seed(&[1]);
        let (model, report) = train_softmax_classifier(&splits.train, arch, &tc)?;
        let meta = self.meta(tc.epochs, None, "softmax classifier");
        let p = self.path("classifier.ckpt");
        save_checkpoint(&p, &model, &meta)?;
        self.artifacts.push(p);
        let mut csv = String::from("epoch,loss\n");
        for (e, l) in report.epoch_loss.iter().enumerate() {
            let _ = writeln!(csv, "{e},{l}");
        }
        self.write_csv("classifier_loss.csv", &csv)?;
        let (val, test) = (accuracy(&model, &splits.val)?, accuracy(&model, &splits.test)?);
        log::info!("classifier accuracy: val {val:.4} test {test:.4}");
        self.write_json("classifier.json", json!({"val_accuracy": val, "test_accuracy": test}))
    }

    fn train_detectors(&mut self, finetune: bool) -> Result<()> {
        let splits = self.splits()?.clone();
        let section = &self.cfg.detector;
        let classes = section.classes.clone().unwrap_or_else(|| (0..splits.train.classes).collect());
        let mut aat = section.aat.clone();
        aat.seed = self.seed(&[2]);
        if finetune {
            aat = aat.for_finetuning();
        }
        let arch = section
            .arch
            .clone()
            .unwrap_or_else(|| ArchSpec::mlp(&[splits.train.dim(), 256, 256, 1]));
        let classifier = if finetune { Some(self.load_model("classifier.ckpt")?) } else { None };
        for k in classes {
            let DetectorTraining {
                model,
                best_epoch,
                history,
            } = match &classifier {
                Some(f) => finetune_detector_from_classifier(f, &splits.train, &splits.val, k, &aat)?,
                None => train_detector(&splits.train, &splits.val, k, &arch, &aat)?,
            };
            let note = format!(
                "{} detector for class {k}, best epoch {best_epoch:?}",
                if finetune { "fine-tuned" } else { "AAT" }
            );
            let meta = self.meta(aat.epochs, Some(serde_json::to_value(&aat)?), &note);
            let p = self.path(&detector_file(k));
            save_checkpoint(&p, &model, &meta)?;
            self.artifacts.push(p);
            self.write_csv(&format!("detector_{k}_history.csv"), &history_csv(&history))?;
        }
        Ok(())
    }

    fn models_for(&mut self, mode: AttackMode) -> Result<(Option<Model>, Vec<Model>)> {
        let f = match mode {
            AttackMode::Classifier | AttackMode::Combined | AttackMode::CombinedSurrogate => {
                Some(self.load_model("classifier.ckpt")?)
            }
            _ => None,
        };
        let h = match mode {
            AttackMode::Classifier => Vec::new(),
            _ => self.load_detectors()?,
        };
        Ok((f, h))
    }

    /// Attacks `data` per `spec`; targeted attacks skip samples already of the target class.
    fn perturb(
        &self,
        spec: &AttackSpec,
        f: Option<&Model>,
        h: &[Model],
        data: &Dataset,
        seed: u64,
    ) -> Result<(Dataset, Tensor, AttackManifest)> {
        let data = if spec.mode == AttackMode::Targeted {
            let keep: Vec<usize> = (0..data.len()).filter(|&i| data.y[i] != spec.target).collect();
            data.subset(&keep)
        } else {
            data.clone()
        };
        let ctx = match (spec.mode, f) {
            (AttackMode::Classifier, Some(f)) => AttackContext::classifier(f),
            (AttackMode::Combined | AttackMode::CombinedSurrogate, Some(f)) => AttackContext::combined(f, h),
            _ => AttackContext::detectors(h),
        };
        let loss = spec.mode.loss(spec.target);
        let direction = loss.default_direction();
        let out = pgd(&loss, &ctx, &data.x, &data.y, &spec.ball, &spec.pgd, direction, seed)?;
        let mut manifest = AttackManifest::new(
            loss,
            direction,
            spec.ball,
            spec.pgd.clone(),
            seed,
            &data.x,
            &out.x,
            out.loss,
        )?;
        manifest.config_hash = Some(self.hash.clone());
        Ok((data, out.x, manifest))
    }

    fn attack(&mut self) -> Result<()> {
        let section = self.cfg.attack.clone();
        let spec = &section.spec;
        let label = sanitize(&spec.label());
        let seed = self.seed(&[3]);
        if spec.mode == AttackMode::NoiseSynthesize {
            let train = self.splits()?.train.clone();
            let detectors = self.load_detectors()?;
            let det = detectors
                .get(spec.target)
                .ok_or_else(|| Error::invalid(format!("no detector for class {}", spec.target)))?;
            let gauss = ClassGaussian::fit(&train, spec.target, 1e-2)?;
            let seeds = gauss.sample(section.noise_samples, spec.pgd.clip, &mut crate::seed::rng(seed, &[0]));
            let checkpoints = if section.checkpoints.is_empty() {
                vec![0, spec.pgd.steps]
            } else {
                section.checkpoints.clone()
            };
            let iterates = synthesize_from_noise(det, &seeds, &spec.ball, &spec.pgd, &checkpoints)?;
            let mut logits = Vec::new();
            for (step, x) in checkpoints.iter().zip(&iterates) {
                let p = self.path(&format!("attack_{label}_step{step}.tensor"));
                write_tensor_dump(&p, x)?;
                self.artifacts.push(p);
                logits.push(json!({"step": step, "target_logit": det.scores(x)?}));
            }
            return self.write_json(
                &format!("attack_{label}.json"),
                json!({
                    "mode": spec.mode.name(),
                    "target": spec.target,
                    "ball": spec.ball,
                    "pgd": spec.pgd,
                    "attack_seed": seed,
                    "noise_samples": section.noise_samples,
                    "checkpoints": logits,
                }),
            );
        }
        let (f, h) = self.models_for(spec.mode)?;
        let test = self.test_set(section.limit)?;
        let (_, x_adv, manifest) = self.perturb(spec, f.as_ref(), &h, &test, seed)?;
        let stem = self.path(&format!("attack_{label}"));
        write_attack_export(&stem, &x_adv, &manifest)?;
        self.artifacts.push(stem.with_extension("tensor"));
        self.artifacts.push(stem.with_extension("json"));
        Ok(())
    }

    fn evaluate(&mut self) -> Result<()> {
        let section = self.cfg.evaluate.clone();
        let rule = match section.mode {
            EvalMode::Generative => Rule::Generative,
            EvalMode::Integrated | EvalMode::ClassifyReject => Rule::Integrated,
        };
        let test = self.test_set(section.limit)?;
        let detectors = self.load_detectors()?;
        let needs_f = rule == Rule::Integrated
            || section
                .attacks
                .iter()
                .any(|a| matches!(a.mode, AttackMode::Classifier | AttackMode::Combined | AttackMode::CombinedSurrogate));
        let classifier = if needs_f { Some(self.load_model("classifier.ckpt")?) } else { None };
        let logits = |x: &Tensor| -> Result<SystemLogits> {
            let h = aggregate_detector(&detectors, x)?;
            let f = match &classifier {
                Some(f) => f.logits(x)?,
                None => h.clone(),
            };
            Ok(SystemLogits { f, h })
        };
        let nat = RuleScores::from_logits(rule, &logits(&test.x)?);
        let thresholds = quantile_thresholds(&nat.score, section.threshold_points)?;
        for (i, spec) in section.attacks.iter().enumerate() {
            let seed = self.seed(&[4, i as u64]);
            let (attacked, x_adv, manifest) = self.perturb(spec, classifier.as_ref(), &detectors, &test, seed)?;
            let adv = RuleScores::from_logits(rule, &logits(&x_adv)?);
            let rows = roc_sweep(&nat, &test.y, &adv, &attacked.y, &thresholds)?;
            let fooling: Vec<f64> = (0..adv.len())
                .filter(|&r| adv.pred[r] != attacked.y[r])
                .map(|r| adv.score[r])
                .collect();
            let auc = if fooling.is_empty() { None } else { Some(auc(&nat.score, &fooling)?) };
            let report = EvalReport {
                meta: ReportMeta {
                    label: spec.label(),
                    rule,
                    config_hash: self.hash.clone(),
                    seed: self.cfg.seed,
                    n_natural: test.len(),
                    n_perturbed: attacked.len(),
                    attack: Some(json!({
                        "mode": spec.mode.name(),
                        "loss": manifest.loss,
                        "direction": manifest.direction,
                        "ball": manifest.ball,
                        "pgd": manifest.pgd,
                        "attack_seed": seed,
                        "evaluation": section.mode.name(),
                    })),
                    auc,
                },
                rows,
            };
            let stem = format!("eval_{}_{}", section.mode.name(), sanitize(&spec.label()));
            self.write(&format!("{stem}.json"), &report.to_json()?)?;
            self.write(&format!("{stem}.csv"), report.to_csv().as_bytes())?;
        }
        Ok(())
    }

    fn distortion(&mut self) -> Result<()> {
        let section = self.cfg.distortion.clone();
        let detectors = self.load_detectors()?;
        let test = self.test_set(None)?;
        let mut bs = section.bsearch.clone();
        if let Some(t) = section.target_tpr {
            bs.threshold = generative_threshold_for_tpr(&detectors, &test.x, t)?;
        }
        let sample = test.take(section.limit);
        let summary = mean_l2_distortion(&detectors, &sample.x, &sample.y, &bs, self.seed(&[5]))?;
        self.write_csv("distortion_trace.csv", &summary.trace_csv())?;
        self.write_json(
            "distortion.json",
            json!({
                "mean_l2": summary.mean_l2,
                "fpr": summary.fpr,
                "threshold": bs.threshold,
                "target_tpr": section.target_tpr,
                "samples": sample.len(),
            }),
        )
    }

    fn robustness(&mut self) -> Result<()> {
        let section = self.cfg.robustness.clone();
        let test = self.test_set(None)?;
        let classes = section.classes.clone().unwrap_or_else(|| (0..test.classes).collect());
        let mut csv = String::from("class,steps,step_size,restarts,nat_auc,adv_auc\n");
        let mut points = Vec::new();
        for k in classes {
            let det = self.load_model(&detector_file(k))?;
            let mut i = 0u64;
            for &steps in &section.steps {
                for &size in &section.step_sizes {
                    for &restarts in &section.restarts {
                        let cfg = PgdConfig::new(steps, size)
                            .with_rule(section.step_rule)
                            .with_restarts(restarts, restarts > 1);
                        let seed = self.seed(&[6, k as u64, i]);
                        let p = robustness_auc(&det, k, &test, &section.ball, &cfg, seed, section.limit)?;
                        let _ = writeln!(csv, "{k},{steps},{size},{restarts},{},{}", p.nat_auc, p.adv_auc);
                        points.push(json!({
                            "class": k, "steps": steps, "step_size": size, "restarts": restarts,
                            "nat_auc": p.nat_auc, "adv_auc": p.adv_auc,
                        }));
                        i += 1;
                    }
                }
            }
        }
        self.write_csv("robustness.csv", &csv)?;
        self.write_json("robustness.json", json!({"ball": section.ball, "points": points}))
    }

    fn synth_1d(&mut self) -> Result<()> {
        let mut cfg = self.cfg.synth_1d.clone();
        cfg.seed = self.cfg.seed;
        let r = run_1d_benchmark(&cfg)?;
        for (name, p) in [("truth", &r.truth), ("aat", &r.aat), ("baseline", &r.baseline)] {
            self.write_csv(&format!("density_{name}.csv"), &Synth1dResult::density_csv(&r.grid, p))?;
        }
        self.write_json(
            "synth_1d.json",
            json!({"aat_tv": r.aat_tv, "baseline_tv": r.baseline_tv, "aat_modes": r.aat_modes}),
        )
    }

    fn synth_2d(&mut self) -> Result<()> {
        let mut cfg = self.cfg.synth_2d.clone();
        cfg.seed = self.cfg.seed;
        let r = train_and_map_2d(&cfg)?;
        self.write_csv("field_2d.csv", &r.field.csv())?;
        self.write_json(
            "synth_2d.json",
            json!({
                "kind": cfg.data.kind,
                "held_out_mean_sigmoid": r.held_out_mean_sigmoid,
                "far_field_mean_sigmoid": r.far_field_mean_sigmoid,
                "far_field_points": r.far_field_points,
            }),
        )
    }

    fn gradcheck(&mut self) -> Result<()> {
        let entries = crate::diagnostics::gradcheck_suite(self.cfg.gradcheck.points, self.cfg.seed)?;
        let worst = entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max);
        log::info!("gradcheck: worst relative error {worst:e} over {} checks", entries.len());
        self.write_json("gradcheck.json", json!({"worst": worst, "entries": entries}))
    }
}


/// Reads the stamp line of a CSV artifact.
pub fn read_stamp(path: &Path) -> Result<(String, u64)> {
    let text = fs::read_to_string(path)?;
    let line = text.lines().next().unwrap_or_default();
    let parse = || -> Option<(String, u64)> {
        let rest = line.strip_prefix("# config_hash=")?;
        let (hash, seed) = rest.split_once(" seed=")?;
        Some((hash.to_string(), seed.trim().parse().ok()?))
    };
    parse().ok_or_else(|| Error::format(path, "missing config stamp"))
}
