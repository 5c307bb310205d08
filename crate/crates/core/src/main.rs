use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use diffmix::config::{Mode, RunConfig};
use diffmix::error::Result;
use diffmix::pipeline;

#[derive(Parser)]
#[command(name = "diffmix", version, about = "Diffusion-augmented multi-label image classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus directory holding train.csv and train/.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Run output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    deterministic: bool,
    /// Overrides any config key, e.g. `--set loss.kind=focal`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum TrainMode {
    Baseline,
    MixLoss,
    MixRep,
    MixInput,
}

#[derive(Subcommand)]
enum Command {
    /// Write the procedural corpus in HPA layout.
    SynthData {
        #[arg(long)]
        per_class: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        multi_label: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Train the class-conditional denoiser.
    TrainDiffusion {
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Sample a synthetic training set from a trained denoiser.
    Generate {
        /// Denoiser checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        per_class: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Train a classifier (baseline or a mixing mode).
    Train {
        #[arg(long, value_enum)]
        mode: Option<TrainMode>,
        /// Generated set directory (mixing modes).
        #[arg(long)]
        synthetic: Option<PathBuf>,
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a classifier checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference checks of every network and loss.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
}

fn toml_str(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn path(p: &std::path::Path) -> String {
    toml_str(&p.to_string_lossy())
}

fn mode_name(mode: Mode) -> String {
    toml::Value::try_from(mode).expect("mode serializes").to_string()
}

struct Overrides(Vec<(String, String)>);

impl Overrides {
    fn new(common: &Common) -> Result<Self> {
        let mut v = Vec::new();
        for kv in &common.set {
            let (k, val) = kv
                .split_once('=')
                .ok_or_else(|| diffmix::error::Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            v.push((k.trim().to_string(), val.trim().to_string()));
        }
        let mut o = Self(v);
        o.push_opt("data", common.data.as_deref().map(path));
        o.push_opt("out", common.out.as_deref().map(path));
        o.push_opt("seed", common.seed.map(|s| s.to_string()));
        if common.deterministic {
            o.push("deterministic", "true".into());
        }
        Ok(o)
    }

    fn push(&mut self, key: &str, value: String) {
        self.0.push((key.to_string(), value));
    }

    fn push_opt(&mut self, key: &str, value: Option<String>) {
        if let Some(v) = value {
            self.push(key, v);
        }
    }
}

fn resolve(common: &Common, mode: Option<Mode>, extra: impl FnOnce(&mut Overrides)) -> Result<RunConfig> {
    let mut o = Overrides::new(common)?;
    if let Some(m) = mode {
        o.push("mode", mode_name(m));
    }
    extra(&mut o);
    RunConfig::resolve(common.config.as_deref(), &o.0)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData { per_class, size, multi_label, common } => {
            let cfg = resolve(&common, Some(Mode::SynthData), |o| {
                o.push_opt("synth.per_class", per_class.map(|v| v.to_string()));
                o.push_opt("synth.size", size.map(|v| v.to_string()));
                if multi_label {
                    o.push("synth.multi_label", "true".into());
                }
            })?;
            let n = pipeline::synth_data(&cfg)?;
            println!("wrote {n} samples to {}", cfg.out.display());
        }
        Command::TrainDiffusion { resume, common } => {
            let cfg = resolve(&common, Some(Mode::TrainDiffusion), |_| {})?;
            let losses = pipeline::train_diffusion(&cfg, resume)?;
            if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
                println!("denoiser loss {first:.5} -> {last:.5} over {} epochs", losses.len());
            }
        }
        Command::Generate { checkpoint, per_class, common } => {
            let cfg = resolve(&common, Some(Mode::Generate), |o| {
                o.push_opt("diffusion.checkpoint", checkpoint.as_deref().map(path));
                o.push_opt("diffusion.per_class", per_class.map(|v| v.to_string()));
            })?;
            let n = pipeline::generate(&cfg)?;
            println!("generated {n} samples in {}", cfg.out.display());
        }
        Command::Train { mode, synthetic, resume, common } => {
            let mode = mode.map(|m| match m {
                TrainMode::Baseline => Mode::Baseline,
                TrainMode::MixLoss => Mode::MixLoss,
                TrainMode::MixRep => Mode::MixRep,
                TrainMode::MixInput => Mode::MixInput,
            });
            let cfg = resolve(&common, mode, |o| {
                o.push_opt("synthetic", synthetic.as_deref().map(path));
            })?;
            let s = pipeline::train_classifier(&cfg, resume)?;
            println!(
                "{} epochs{}; best val loss {:.5} at epoch {}; final macro-F1 {:.4}",
                s.epochs_run,
                if s.stopped_early { " (early stop)" } else { "" },
                s.best_val_loss,
                s.best_epoch,
                s.final_macro_f1
            );
        }
        Command::Eval { checkpoint, common } => {
            let cfg = resolve(&common, Some(Mode::Eval), |o| {
                o.push_opt("checkpoint", checkpoint.as_deref().map(path));
            })?;
            let a = pipeline::evaluate(&cfg)?;
            println!("macro-F1 {} (loss {})", a.macro_f1, a.loss);
        }
        Command::Gradcheck { common } => {
            let cfg = resolve(&common, Some(Mode::Gradcheck), |_| {})?;
            let result = pipeline::gradcheck(&cfg);
            if let Ok(text) = std::fs::read_to_string(cfg.out.join("gradcheck.txt")) {
                print!("{text}");
            }
            result?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
