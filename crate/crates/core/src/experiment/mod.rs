//! Declarative experiment configuration and the runner behind the CLI.
//!
//! A config is one TOML document: a `steps` list plus the sections those
//! steps read. The top-level `seed` drives every step, so section-level seeds
//! are overwritten at run time.
//!
//! ```toml
//! seed = 0
//! out_dir = "runs/mini"
//! steps = ["train-classifier", "train-detector", "evaluate"]
//!
//! [detector.aat]
//! epochs = 20
//! ball = { norm = "linf", eps = 0.3 }
//! attack = { steps = 100, step_size = 0.01 }
//! val_attack = { steps = 20, step_size = 0.05 }
//!
//! [evaluate]
//! mode = "integrated"
//! [[evaluate.attacks]]
//! mode = "combined"
//! ball = { norm = "linf", eps = 0.3 }
//! pgd = { steps = 100, step_size = 0.01 }
//! ```

mod config;
mod run;

pub use config::{
    AttackMode, AttackSection, AttackSpec, ClassifierSection, DataConfig, DetectorSection, DistortionSection,
    EvalMode, EvaluateSection, ExperimentConfig, GradcheckSection, MnistFiles, RobustnessSection, Step,
};
pub use run::{read_stamp, run, stamp_line, RunSummary};
