use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vsumm::commands;
use vsumm::config::Config;
use vsumm::error::ErrorClass;
use vsumm::evaluation::format_table;
use vsumm::Error;

/// Environment variable naming the default configuration file.
const CONFIG_ENV: &str = "VSUMM_CONFIG";

#[derive(Parser, Debug)]
#[command(name = "vsumm", version, about = "Unsupervised reinforcement-learning video summarization")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Configuration file (defaults to $VSUMM_CONFIG when set).
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Dataset root (same as `--set data=...`).
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Output directory (same as `--set out=...`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Only print warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset to the output directory.
    Synth,
    /// Train a summarizer on the dataset.
    Train {
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Summarize dataset videos with a trained checkpoint.
    Summarize {
        /// Checkpoint file (defaults to the one in the output directory).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Video id to summarize; repeatable. Defaults to every video.
        #[arg(long = "video")]
        videos: Vec<String>,
    },
    /// Score summary masks against the dataset's ground truth.
    Evaluate {
        /// Directory holding `<id>/mask.vstf` files (defaults to the output directory).
        #[arg(long)]
        masks: Option<PathBuf>,
    },
    /// SSIM matrix, signal and keyframes of one frame directory.
    SsimReward {
        /// Directory of frame files.
        #[arg(long)]
        frames: PathBuf,
    },
    /// Run the ablation grid and write a mean ± SD table.
    Grid,
}

fn load_config(common: &Common) -> vsumm::Result<Config> {
    let path = common
        .config
        .clone()
        .or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
    let mut cfg = match path {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(d) = &common.data {
        cfg.data = Some(d.clone());
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    for o in &common.overrides {
        cfg.apply_override(o)?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> vsumm::Result<()> {
    let cfg = load_config(&cli.common)?;
    match cli.command {
        Command::Synth => {
            let ids = commands::cmd_synth(&cfg)?;
            println!("wrote {} videos to {}", ids.len(), cfg.out.display());
        }
        Command::Train { resume } => {
            let report = commands::cmd_train(&cfg, resume)?;
            if let Some(last) = report.epochs.last() {
                println!(
                    "trained {} epoch(s); final mean reward {:.4}",
                    report.epochs.len(),
                    last.mean_reward
                );
            }
            if let Some(path) = &report.checkpoint {
                println!("checkpoint: {}", path.display());
            }
        }
        Command::Summarize { checkpoint, videos } => {
            let ckpt = checkpoint.unwrap_or_else(|| commands::default_checkpoint(&cfg));
            for (id, mask) in commands::cmd_summarize(&cfg, &ckpt, &videos)? {
                println!("{id}: {} of {} frames", mask.count(), mask.len());
            }
        }
        Command::Evaluate { masks } => {
            let masks = masks.unwrap_or_else(|| cfg.out.clone());
            let (mut rows, mean) = commands::cmd_evaluate(&cfg, &masks)?;
            rows.push(("mean".into(), mean));
            print!("{}", format_table(&rows));
        }
        Command::SsimReward { frames } => {
            let signal = commands::cmd_ssim(&cfg, &frames)?;
            println!(
                "{} frames, {} keyframes",
                signal.sig.len(),
                signal.keyframe_mask.count()
            );
        }
        Command::Grid => {
            let rows = commands::cmd_grid(&cfg)?;
            println!("{} grid cells written to {}", rows.len(), cfg.out.display());
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Usage => 1,
        ErrorClass::Data => 2,
        ErrorClass::Numeric => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("vsumm: {first}");
            return ExitCode::from(1);
        }
    };
    let level = if cli.common.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("vsumm: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
