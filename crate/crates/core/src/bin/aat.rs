//! Command-line front end. Every subcommand builds an experiment config and
//! hands it to the same runner as `aat run --config`.

use std::path::PathBuf;
use std::process::ExitCode;

use aat::attacks::{Norm, NormBall, PgdConfig, StepRule};
use aat::experiment::{run, AttackMode, AttackSpec, EvalMode, ExperimentConfig, Step};
use aat::synth::Toy2DKind;
use aat::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "aat", version, about = "Asymmetrical adversarial training and detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Base config; flags given here override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "runs/default")]
    out_dir: PathBuf,
    /// Directory holding classifier.ckpt and detector_<k>.ckpt (defaults to --out-dir).
    #[arg(long)]
    models_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset preset (mnist-mini, mnist-10k).
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum RuleArg {
    Adam,
    Nsd,
}

impl From<RuleArg> for StepRule {
    fn from(r: RuleArg) -> Self {
        match r {
            RuleArg::Adam => StepRule::Adam,
            RuleArg::Nsd => StepRule::NormalizedSteepestDescent,
        }
    }
}

/// Perturbation set and PGD schedule.
#[derive(Args, Clone)]
struct AttackArgs {
    #[arg(long, default_value = "linf")]
    norm: String,
    /// Radius on the 0–1 pixel scale.
    #[arg(long, default_value_t = 0.3)]
    eps: f64,
    /// Reads --eps on the 0–255 scale.
    #[arg(long)]
    eps_255: bool,
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long, default_value_t = 0.01)]
    step_size: f64,
    #[arg(long, default_value_t = 1)]
    restarts: usize,
    #[arg(long, value_enum, default_value = "adam")]
    rule: RuleArg,
    /// Starts each restart from a uniform point of the ball.
    #[arg(long)]
    random_start: bool,
}

impl AttackArgs {
    fn ball(&self) -> Result<NormBall> {
        let norm: Norm = self.norm.parse()?;
        if self.eps_255 {
            NormBall::from_255(norm, self.eps)
        } else {
            NormBall::new(norm, self.eps)
        }
    }

    fn pgd(&self) -> PgdConfig {
        PgdConfig::new(self.steps, self.step_size)
            .with_rule(self.rule.into())
            .with_restarts(self.restarts, self.random_start || self.restarts > 1)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Softmax classifier on the natural training set.
    TrainClassifier {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Per-class detectors trained with AAT from scratch.
    TrainDetector {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: DetectorArgs,
    },
    /// Detectors initialized from classifier.ckpt, then trained with AAT.
    FinetuneDetector {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: DetectorArgs,
    },
    /// Perturbs the test set and exports the result.
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "combined")]
        mode: String,
        #[command(flatten)]
        attack: AttackArgs,
        /// Target class of targeted and noise-synthesize.
        #[arg(long, default_value_t = 0)]
        class: usize,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        noise_samples: Option<usize>,
    },
    /// ROC sweep of a detection system under one or more attacks.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// integrated, generative or classify-reject.
        #[arg(long, default_value = "integrated")]
        mode: String,
        /// Attack modes to evaluate against (repeatable).
        #[arg(long = "attack", default_value = "combined")]
        attacks: Vec<String>,
        #[command(flatten)]
        attack: AttackArgs,
        #[arg(long, default_value_t = 0)]
        class: usize,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Mean L2 distortion of minimal unbounded attacks on the generative classifier.
    Distortion {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        target_tpr: Option<f64>,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Detector AUCs over a steps × step-size × restarts grid.
    RobustnessSweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "linf")]
        norm: String,
        #[arg(long, default_value_t = 0.3)]
        eps: f64,
        #[arg(long)]
        eps_255: bool,
        #[arg(long, value_delimiter = ',', default_value = "100,200")]
        steps: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0.01")]
        step_size: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "1")]
        restarts: Vec<usize>,
        #[arg(long, value_enum, default_value = "adam")]
        rule: RuleArg,
        /// Restrict to these classes.
        #[arg(long, value_delimiter = ',')]
        class: Vec<usize>,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// 1-D mixture density recovery.
    Synth1d {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// 2-D detector field.
    Synth2d {
        #[command(flatten)]
        common: Common,
        /// circles, moons or grid-vs-scattered.
        #[arg(long, default_value = "circles")]
        kind: String,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Finite-difference check of every primitive and attack loss.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        points: usize,
    },
    /// Runs the steps listed in a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Args, Clone)]
struct DetectorArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Restrict to these classes.
    #[arg(long, value_delimiter = ',')]
    class: Vec<usize>,
    #[command(flatten)]
    attack: AttackArgs,
}

fn base(common: &Common, step: Step) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::new(common.out_dir.clone()),
    };
    cfg.out_dir = common.out_dir.clone();
    if common.models_dir.is_some() {
        cfg.models_dir = common.models_dir.clone();
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(p) = &common.preset {
        cfg.data.preset = p.clone();
    }
    if common.data_dir.is_some() {
        cfg.data.dir = common.data_dir.clone();
    }
    cfg.steps = vec![step];
    Ok(cfg)
}

fn detector_config(common: &Common, args: &DetectorArgs, step: Step) -> Result<ExperimentConfig> {
    let mut cfg = base(common, step)?;
    let aat = &mut cfg.detector.aat;
    aat.ball = args.attack.ball()?;
    aat.attack = args.attack.pgd();
    if let Some(e) = args.epochs {
        aat.epochs = e;
    }
    if let Some(lr) = args.lr {
        aat.adam.lr = lr;
    }
    if !args.class.is_empty() {
        cfg.detector.classes = Some(args.class.clone());
    }
    Ok(cfg)
}

fn build(command: Command) -> Result<ExperimentConfig> {
    Ok(match command {
        Command::TrainClassifier { common, epochs, lr } => {
            let mut cfg = base(&common, Step::TrainClassifier)?;
            if let Some(e) = epochs {
                cfg.classifier.train.epochs = e;
            }
            if let Some(lr) = lr {
                cfg.classifier.train.adam.lr = lr;
            }
            cfg
        }
        Command::TrainDetector { common, train } => detector_config(&common, &train, Step::TrainDetector)?,
        Command::FinetuneDetector { common, train } => detector_config(&common, &train, Step::FinetuneDetector)?,
        Command::Attack {
            common,
            mode,
            attack,
            class,
            limit,
            noise_samples,
        } => {
            let mut cfg = base(&common, Step::Attack)?;
            let mut spec = AttackSpec::new(mode.parse()?, attack.ball()?, attack.pgd());
            spec.target = class;
            cfg.attack.spec = spec;
            cfg.attack.limit = limit;
            if let Some(n) = noise_samples {
                cfg.attack.noise_samples = n;
            }
            cfg
        }
        Command::Evaluate {
            common,
            mode,
            attacks,
            attack,
            class,
            limit,
        } => {
            let mut cfg = base(&common, Step::Evaluate)?;
            cfg.evaluate.mode = mode.parse::<EvalMode>()?;
            cfg.evaluate.limit = limit;
            cfg.evaluate.attacks = attacks
                .iter()
                .map(|m| {
                    let mut spec = AttackSpec::new(m.parse::<AttackMode>()?, attack.ball()?, attack.pgd());
                    spec.target = class;
                    Ok(spec)
                })
                .collect::<Result<_>>()?;
            cfg
        }
        Command::Distortion { common, target_tpr, limit } => {
            let mut cfg = base(&common, Step::Distortion)?;
            if target_tpr.is_some() {
                cfg.distortion.target_tpr = target_tpr;
            }
            if let Some(l) = limit {
                cfg.distortion.limit = l;
            }
            cfg
        }
        Command::RobustnessSweep {
            common,
            norm,
            eps,
            eps_255,
            steps,
            step_size,
            restarts,
            rule,
            class,
            limit,
        } => {
            let mut cfg = base(&common, Step::RobustnessSweep)?;
            let norm: Norm = norm.parse()?;
            let r = &mut cfg.robustness;
            r.ball = if eps_255 { NormBall::from_255(norm, eps)? } else { NormBall::new(norm, eps)? };
            r.steps = steps;
            r.step_sizes = step_size;
            r.restarts = restarts;
            r.step_rule = rule.into();
            r.classes = (!class.is_empty()).then_some(class);
            r.limit = limit;
            cfg
        }
        Command::Synth1d { common, iterations } => {
            let mut cfg = base(&common, Step::Synth1d)?;
            if let Some(n) = iterations {
                cfg.synth_1d.training.iterations = n;
            }
            cfg
        }
        Command::Synth2d { common, kind, iterations } => {
            let mut cfg = base(&common, Step::Synth2d)?;
            let kind: Toy2DKind = kind.parse()?;
            if kind != cfg.synth_2d.data.kind {
                cfg.synth_2d = aat::synth::Synth2dConfig::new(kind);
            }
            if let Some(n) = iterations {
                cfg.synth_2d.training.iterations = n;
            }
            cfg
        }
        Command::Gradcheck { common, points } => {
            let mut cfg = base(&common, Step::Gradcheck)?;
            cfg.gradcheck.points = points;
            cfg
        }
        Command::Run { config } => ExperimentConfig::load(&config)?,
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = build(cli.command).and_then(|cfg| {
        let summary = run(&cfg)?;
        for p in &summary.artifacts {
            println!("{}", p.display());
        }
        Ok::<_, Error>(summary)
    });
    match result {
        Ok(s) => {
            log::info!("done (config {})", s.config_hash);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
