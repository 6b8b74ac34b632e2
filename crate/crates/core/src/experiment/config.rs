use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aat::AatConfig;
use crate::attacks::{AttackLoss, NormBall, PgdConfig, StepRule};
use crate::data::{load_mnist_pair, split_mnist_train, PresetSpec, Splits};
use crate::detection::DEFAULT_SWEEP_POINTS;
use crate::distortion::BsearchConfig;
use crate::error::{Error, Result};
use crate::models::{ArchSpec, ClassifierTrainConfig};
use crate::synth::{Synth1dConfig, Synth2dConfig};

/// One experiment: which steps to run and every setting they read.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Where checkpoints are read from; defaults to `out_dir`.
    #[serde(default)]
    pub models_dir: Option<PathBuf>,
    #[serde(default)]
    pub steps: Vec<Step>,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub classifier: ClassifierSection,
    #[serde(default)]
    pub detector: DetectorSection,
    #[serde(default)]
    pub attack: AttackSection,
    #[serde(default)]
    pub evaluate: EvaluateSection,
    #[serde(default)]
    pub robustness: RobustnessSection,
    #[serde(default)]
    pub distortion: DistortionSection,
    #[serde(default)]
    pub synth_1d: Synth1dConfig,
    #[serde(default)]
    pub synth_2d: Synth2dConfig,
    #[serde(default)]
    pub gradcheck: GradcheckSection,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Step {
    TrainClassifier,
    TrainDetector,
    FinetuneDetector,
    Attack,
    Evaluate,
    Distortion,
    RobustnessSweep,
    #[serde(rename = "synth-1d")]
    Synth1d,
    #[serde(rename = "synth-2d")]
    Synth2d,
    Gradcheck,
}

impl Step {
    pub fn name(self) -> &'static str {
        match self {
            Step::TrainClassifier => "train-classifier",
            Step::TrainDetector => "train-detector",
            Step::FinetuneDetector => "finetune-detector",
            Step::Attack => "attack",
            Step::Evaluate => "evaluate",
            Step::Distortion => "distortion",
            Step::RobustnessSweep => "robustness-sweep",
            Step::Synth1d => "synth-1d",
            Step::Synth2d => "synth-2d",
            Step::Gradcheck => "gradcheck",
        }
    }
}

/// Full MNIST as four IDX files (optionally gzip-compressed).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MnistFiles {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Bundled desk-scale preset, used when `mnist` is absent.
    #[serde(default = "default_preset")]
    pub preset: String,
    /// Overrides the bundled data directory.
    #[serde(default)]
    pub dir: Option<PathBuf>,
    #[serde(default)]
    pub mnist: Option<MnistFiles>,
    /// Digits kept from full MNIST (relabeled in order); all ten when absent.
    #[serde(default)]
    pub classes: Option<Vec<usize>>,
}

fn default_preset() -> String {
    "mnist-mini".into()
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            preset: default_preset(),
            dir: None,
            mnist: None,
            classes: None,
        }
    }
}

impl DataConfig {
    pub fn load(&self) -> Result<Splits> {
        match &self.mnist {
            Some(files) => {
                let full = load_mnist_pair(&files.train_images, &files.train_labels)?;
                let test = load_mnist_pair(&files.test_images, &files.test_labels)?;
                let (train, val) = split_mnist_train(full)?;
                let keep = |d: crate::data::Dataset| match &self.classes {
                    Some(c) => d.filter_classes(c),
                    None => d,
                };
                Ok(Splits {
                    train: keep(train.data),
                    val: keep(val.data),
                    test: keep(test),
                })
            }
            None => {
                let dir = self.dir.clone().unwrap_or_else(crate::data::bundled_data_dir);
                PresetSpec::by_name(&self.preset)?.load(&dir)
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierSection {
    /// Defaults to an MLP 784-256-256-C.
    #[serde(default)]
    pub arch: Option<ArchSpec>,
    #[serde(default)]
    pub train: ClassifierTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSection {
    /// Defaults to an MLP 784-256-256-1.
    #[serde(default)]
    pub arch: Option<ArchSpec>,
    /// Classes to train; all classes when absent.
    #[serde(default)]
    pub classes: Option<Vec<usize>>,
    #[serde(default)]
    pub aat: AatConfig,
}

impl Default for DetectorSection {
    fn default() -> Self {
        Self {
            arch: None,
            classes: None,
            aat: AatConfig::default(),
        }
    }
}

/// Attack modes exposed on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackMode {
    /// Logit margin of the classifier only.
    Classifier,
    /// Strongest wrong-class detector logit.
    Detectors,
    /// Piecewise classifier/detector loss.
    Combined,
    /// Smooth surrogate of the combined loss.
    CombinedSurrogate,
    /// Raise one class's detector logit.
    Targeted,
    /// Targeted synthesis starting from class-conditional Gaussian noise.
    NoiseSynthesize,
    /// Softmax cross-entropy on the detector logits.
    CrossEntropy,
}

impl AttackMode {
    pub fn name(self) -> &'static str {
        match self {
            AttackMode::Classifier => "classifier",
            AttackMode::Detectors => "detectors",
            AttackMode::Combined => "combined",
            AttackMode::CombinedSurrogate => "combined-surrogate",
            AttackMode::Targeted => "targeted",
            AttackMode::NoiseSynthesize => "noise-synthesize",
            AttackMode::CrossEntropy => "cross-entropy",
        }
    }

    pub fn loss(self, target: usize) -> AttackLoss {
        match self {
            AttackMode::Classifier => AttackLoss::ClassifierCw,
            AttackMode::Detectors => AttackLoss::Detector,
            AttackMode::Combined => AttackLoss::PiecewiseCombined,
            AttackMode::CombinedSurrogate => AttackLoss::SurrogateCombined,
            AttackMode::Targeted | AttackMode::NoiseSynthesize => AttackLoss::TargetedLogit { target },
            AttackMode::CrossEntropy => AttackLoss::CrossEntropy,
        }
    }
}

impl std::str::FromStr for AttackMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [
            AttackMode::Classifier,
            AttackMode::Detectors,
            AttackMode::Combined,
            AttackMode::CombinedSurrogate,
            AttackMode::Targeted,
            AttackMode::NoiseSynthesize,
            AttackMode::CrossEntropy,
        ]
        .into_iter()
        .find(|m| m.name() == s)
        .ok_or_else(|| Error::invalid(format!("unknown attack mode `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub mode: AttackMode,
    pub ball: NormBall,
    pub pgd: PgdConfig,
    /// Target class of `targeted` and `noise-synthesize`.
    #[serde(default)]
    pub target: usize,
    /// Artifact label; defaults to the mode name.
    #[serde(default)]
    pub label: Option<String>,
}

impl AttackSpec {
    pub fn new(mode: AttackMode, ball: NormBall, pgd: PgdConfig) -> Self {
        Self {
            mode,
            ball,
            pgd,
            target: 0,
            label: None,
        }
    }

    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.mode.name().to_string())
    }
}

fn default_attack() -> AttackSpec {
    AttackSpec::new(
        AttackMode::Combined,
        NormBall::linf(0.3).expect("valid radius"),
        PgdConfig::new(100, 0.01),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    #[serde(default = "default_attack")]
    pub spec: AttackSpec,
    /// First test samples attacked; all when absent.
    #[serde(default)]
    pub limit: Option<usize>,
    /// Noise seeds drawn by `noise-synthesize`.
    #[serde(default = "default_noise_samples")]
    pub noise_samples: usize,
    /// Step counts at which `noise-synthesize` saves iterates.
    #[serde(default)]
    pub checkpoints: Vec<usize>,
}

fn default_noise_samples() -> usize {
    16
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            spec: default_attack(),
            limit: None,
            noise_samples: default_noise_samples(),
            checkpoints: Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    Integrated,
    Generative,
    ClassifyReject,
}

impl EvalMode {
    pub fn name(self) -> &'static str {
        match self {
            EvalMode::Integrated => "integrated",
            EvalMode::Generative => "generative",
            EvalMode::ClassifyReject => "classify-reject",
        }
    }
}

impl std::str::FromStr for EvalMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "integrated" => Ok(EvalMode::Integrated),
            "generative" => Ok(EvalMode::Generative),
            "classify-reject" => Ok(EvalMode::ClassifyReject),
            other => Err(Error::invalid(format!("unknown evaluation mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateSection {
    #[serde(default = "default_eval_mode")]
    pub mode: EvalMode,
    #[serde(default = "default_attacks")]
    pub attacks: Vec<AttackSpec>,
    #[serde(default = "default_points")]
    pub threshold_points: usize,
    /// First test samples used; all when absent.
    #[serde(default)]
    pub limit: Option<usize>,
}

fn default_eval_mode() -> EvalMode {
    EvalMode::Integrated
}

fn default_attacks() -> Vec<AttackSpec> {
    vec![default_attack()]
}

fn default_points() -> usize {
    DEFAULT_SWEEP_POINTS
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self {
            mode: default_eval_mode(),
            attacks: default_attacks(),
            threshold_points: default_points(),
            limit: None,
        }
    }
}

/// Grid of evaluation attacks (steps × step sizes × restarts) against each detector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobustnessSection {
    #[serde(default)]
    pub classes: Option<Vec<usize>>,
    pub ball: NormBall,
    pub steps: Vec<usize>,
    pub step_sizes: Vec<f64>,
    pub restarts: Vec<usize>,
    #[serde(default)]
    pub step_rule: StepRule,
    /// Caps positives and negatives per class.
    #[serde(default)]
    pub limit: Option<usize>,
}

impl Default for RobustnessSection {
    fn default() -> Self {
        Self {
            classes: None,
            ball: NormBall::linf(0.3).expect("valid radius"),
            steps: vec![100, 200],
            step_sizes: vec![0.01],
            restarts: vec![1],
            step_rule: StepRule::Adam,
            limit: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistortionSection {
    #[serde(default = "BsearchConfig::mnist_default")]
    pub bsearch: BsearchConfig,
    /// When set, the threshold is recomputed to reach this natural TPR.
    #[serde(default = "default_target_tpr")]
    pub target_tpr: Option<f64>,
    #[serde(default = "default_distortion_limit")]
    pub limit: usize,
}

fn default_target_tpr() -> Option<f64> {
    Some(0.95)
}

fn default_distortion_limit() -> usize {
    20
}

impl Default for DistortionSection {
    fn default() -> Self {
        Self {
            bsearch: BsearchConfig::mnist_default(),
            target_tpr: default_target_tpr(),
            limit: default_distortion_limit(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckSection {
    #[serde(default = "default_gradcheck_points")]
    pub points: usize,
}

fn default_gradcheck_points() -> usize {
    100
}

impl Default for GradcheckSection {
    fn default() -> Self {
        Self {
            points: default_gradcheck_points(),
        }
    }
}

impl ExperimentConfig {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self {
            seed: 0,
            out_dir: out_dir.into(),
            models_dir: None,
            steps: Vec::new(),
            data: DataConfig::default(),
            classifier: ClassifierSection::default(),
            detector: DetectorSection::default(),
            attack: AttackSection::default(),
            evaluate: EvaluateSection::default(),
            robustness: RobustnessSection::default(),
            distortion: DistortionSection::default(),
            synth_1d: Synth1dConfig::default(),
            synth_2d: Synth2dConfig::default(),
            gradcheck: GradcheckSection::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// First 16 hex digits of the SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> Result<String> {
        Ok(crate::io::short_hash(self.to_toml()?.as_bytes()))
    }

    pub fn models_dir(&self) -> &Path {
        self.models_dir.as_deref().unwrap_or(&self.out_dir)
    }

    /// Checks every section the listed steps read.
    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::invalid("config lists no steps"));
        }
        for step in &self.steps {
            match step {
                Step::TrainClassifier => {
                    if let Some(a) = &self.classifier.arch {
                        a.validate()?;
                    }
                }
                Step::TrainDetector | Step::FinetuneDetector => {
                    if let Some(a) = &self.detector.arch {
                        a.validate()?;
                    }
                    self.detector.aat.validate()?;
                }
                Step::Attack => self.attack.spec.pgd.validate()?,
                Step::Evaluate => {
                    if self.evaluate.attacks.is_empty() {
                        return Err(Error::invalid("evaluate lists no attacks"));
                    }
                    for a in &self.evaluate.attacks {
                        a.pgd.validate()?;
                        if a.mode == AttackMode::NoiseSynthesize {
                            return Err(Error::invalid(
                                "noise-synthesize produces unlabeled samples; run it with the attack step",
                            ));
                        }
                    }
                }
                Step::Distortion => {
                    self.distortion.bsearch.validate()?;
                    if let Some(t) = self.distortion.target_tpr {
                        if !(0.0 < t && t <= 1.0) {
                            return Err(Error::invalid(format!("target TPR {t} outside (0, 1]")));
                        }
                    }
                }
                Step::RobustnessSweep => {
                    let r = &self.robustness;
                    if r.steps.is_empty() || r.step_sizes.is_empty() || r.restarts.is_empty() {
                        return Err(Error::invalid("robustness grid has an empty axis"));
                    }
                }
                Step::Synth1d => self.synth_1d.mixture.validate()?,
                Step::Synth2d | Step::Gradcheck => {}
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_hash_is_stable() {
        let mut cfg = ExperimentConfig::new("out");
        cfg.steps = vec![Step::Evaluate];
        cfg.evaluate.mode = EvalMode::Generative;
        let text = cfg.to_toml().unwrap();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
        cfg.seed = 1;
        assert_ne!(back.hash().unwrap(), cfg.hash().unwrap());
    }

    #[test]
    fn minimal_file_uses_defaults() {
        let cfg = ExperimentConfig::from_toml("out_dir = \"o\"\nsteps = [\"synth-1d\"]\n").unwrap();
        assert_eq!(cfg.synth_1d, Synth1dConfig::default());
        assert_eq!(cfg.evaluate.threshold_points, 512);
    }

    #[test]
    fn schema_is_enforced() {
        assert!(ExperimentConfig::from_toml("out_dir = \"o\"\nsteps = [\"evaluate\"]\nbogus = 1\n").is_err());
        assert!(ExperimentConfig::from_toml("out_dir = \"o\"\nsteps = []\n").is_err());
        let bad = "out_dir = \"o\"\nsteps = [\"evaluate\"]\n[[evaluate.attacks]]\nmode = \"noise-synthesize\"\n\
                   ball = { norm = \"linf\", eps = 0.3 }\npgd = { steps = 10, step_size = 0.01 }\n";
        assert!(ExperimentConfig::from_toml(bad).is_err());
    }

    #[test]
    fn attack_modes_parse() {
        for m in ["classifier", "detectors", "combined", "combined-surrogate", "targeted", "noise-synthesize", "cross-entropy"] {
            assert_eq!(m.parse::<AttackMode>().unwrap().name(), m);
        }
        assert!("pgd".parse::<AttackMode>().is_err());
    }
}
