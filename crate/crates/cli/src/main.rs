use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use motion_refine::config::PipelineConfig;
use motion_refine::io;
use motion_refine::pipeline::{self, Layout};

#[derive(Parser)]
#[command(name = "mrefine", version, about = "Pseudo-label refinement of motion estimators")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// key=value config file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root
    #[arg(long, global = true, env = "MREFINE_OUT", default_value = "mrefine-out")]
    out_dir: PathBuf,
    /// Track-drift threshold (px²)
    #[arg(long, global = true)]
    tau: Option<f64>,
    /// Cycle-check slope
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Cycle-check offset (px²)
    #[arg(long, global = true)]
    beta: Option<f64>,
    /// Color-check threshold
    #[arg(long, global = true)]
    gamma: Option<f64>,
    /// Training steps
    #[arg(long, global = true)]
    kappa: Option<usize>,
    #[arg(long, global = true, value_parser = ["flow", "track"])]
    mode: Option<String>,
    #[arg(long, global = true, value_parser = ["single", "multi"])]
    videos: Option<String>,
    /// Fine-tuning objective
    #[arg(long, global = true, value_parser = ["pseudo-label", "color", "color+smooth", "color+edge"])]
    objective: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic corpus
    Synth,
    /// Predict flows and tracks for the corpus
    Estimate {
        /// Use the frozen model instead of fine-tuned heads
        #[arg(long)]
        frozen: bool,
    },
    /// Filter model outputs into pseudo-labels
    Pseudolabel,
    /// Fine-tune on pseudo-labels (or a photometric objective)
    Finetune,
    /// Score predictions against ground truth
    Eval {
        /// Prediction directory in the estimate layout
        #[arg(long)]
        pred: Option<PathBuf>,
    },
    /// Colorwheel images and track overlays
    Viz {
        /// Prediction directory in the estimate layout
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// τ and κ sweeps, filter and objective studies
    Ablate,
    /// synth, pseudolabel, finetune, estimate and eval in sequence
    Run,
    /// Print the effective config
    Config,
}

fn load_config(c: &Common) -> motion_refine::Result<PipelineConfig> {
    let mut cfg = match &c.config {
        Some(p) => PipelineConfig::from_text(&io::read_text(p)?, &p.display().to_string())?,
        None => PipelineConfig::default(),
    };
    let overrides = [
        ("seed", c.seed.map(|v| v.to_string())),
        ("filter.tau", c.tau.map(|v| v.to_string())),
        ("filter.alpha", c.alpha.map(|v| v.to_string())),
        ("filter.beta", c.beta.map(|v| v.to_string())),
        ("filter.gamma", c.gamma.map(|v| v.to_string())),
        ("train.kappa", c.kappa.map(|v| v.to_string())),
        ("mode", c.mode.clone()),
        ("train.videos", c.videos.clone()),
        ("objective", c.objective.clone()),
    ];
    for (k, v) in overrides {
        if let Some(v) = v {
            cfg.set(k, &v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli, cfg: PipelineConfig) -> motion_refine::Result<()> {
    let layout = Layout::new(&cli.common.out_dir);
    match cli.command {
        Command::Synth => {
            pipeline::run_synth(&cfg, &layout)?;
        }
        Command::Estimate { frozen } => {
            pipeline::run_estimate(&cfg, &layout, frozen)?;
        }
        Command::Pseudolabel => {
            pipeline::run_pseudolabel(&cfg, &layout)?;
        }
        Command::Finetune => {
            pipeline::run_finetune(&cfg, &layout)?;
        }
        Command::Eval { pred } => {
            let (_, text) = pipeline::run_eval(&cfg, &layout, pred.as_deref())?;
            print!("{text}");
        }
        Command::Viz { input } => {
            pipeline::run_viz(&cfg, &layout, input.as_deref())?;
        }
        Command::Ablate => {
            pipeline::run_ablate(&cfg, &layout)?;
        }
        Command::Run => {
            print!("{}", pipeline::run_all(&cfg, &layout)?);
        }
        Command::Config => print!("{}", cfg.to_text()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let cfg = match load_config(&cli.common) {
        Ok(c) => c,
        Err(e) => {
            log::error!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli, cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(2)
        }
    }
}
