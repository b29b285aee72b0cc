//! Command-line surface for the alignment and retrieval engine.
//!
//! Subcommands: `gen-synthetic`, `train`, `evaluate`, `rank`, `rerank`,
//! `gradcheck`, `export-attn`. Every subcommand reads an optional config
//! file and accepts `--set key=value` overrides mirroring the config keys;
//! the `NAFS_SEED` environment variable overrides the seed last.
//!
//! Exit codes: 0 on success, 1 on validation or IO errors, 2 on numeric
//! failures.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use nafs_core::config::RunConfig;
use nafs_core::harness::{
    evaluate, export_attention_for, gradcheck, rank, render_gradcheck_report, train, GradcheckDims,
};
use nafs_core::io::report::render_eval_report;
use nafs_core::synth::gen_synthetic;
use nafs_core::Error;

#[derive(Parser)]
#[command(name = "nafs", version, about = "Cross-modal alignment and retrieval engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Config file with key=value lines.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. --set batch_size=8. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,

    /// Shorthand for --set seed=...
    #[arg(long)]
    seed: Option<u64>,

    /// Shorthand for --set data_dir=...
    #[arg(long)]
    data_dir: Option<PathBuf>,

    /// Shorthand for --set out_dir=...
    #[arg(long)]
    out_dir: Option<PathBuf>,

    /// Shorthand for --set steps=...
    #[arg(long)]
    steps: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, Error> {
        let mut overrides: Vec<(String, String)> = Vec::new();
        if let Some(seed) = self.seed {
            overrides.push(("seed".into(), seed.to_string()));
        }
        if let Some(dir) = &self.data_dir {
            overrides.push(("data_dir".into(), dir.display().to_string()));
        }
        if let Some(dir) = &self.out_dir {
            overrides.push(("out_dir".into(), dir.display().to_string()));
        }
        if let Some(steps) = self.steps {
            overrides.push(("steps".into(), steps.to_string()));
        }
        for pair in &self.sets {
            let (key, value) = pair
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects key=value, got {pair:?}")))?;
            overrides.push((key.trim().to_string(), value.trim().to_string()));
        }
        RunConfig::load(self.config.as_deref(), &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset under data_dir.
    GenSynthetic(ConfigArgs),
    /// Train projections and classifier, writing a checkpoint to out_dir.
    Train(ConfigArgs),
    /// Rank test captions and report Top-K accuracy.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint to evaluate (default: out_dir/checkpoint.nafc).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write rankings for every test caption without accuracy tables.
    Rank {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write initial and visual-neighbor re-ranked rankings.
    Rerank {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Verify gradients against central finite differences.
    Gradcheck {
        #[command(flatten)]
        config: ConfigArgs,
        /// Number of random seeds to check.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        /// Deliberately corrupt one gradient component (negative control).
        #[arg(long)]
        fault_injection: bool,
    },
    /// Export attention matrices for one caption/image pair.
    ExportAttn {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        caption_id: u32,
        /// Defaults to the caption's top-1 ranked image.
        #[arg(long)]
        image_id: Option<u32>,
    },
}

fn checkpoint_path(cfg: &RunConfig, explicit: &Option<PathBuf>) -> PathBuf {
    explicit.clone().unwrap_or_else(|| cfg.out_dir.join("checkpoint.nafc"))
}

fn run() -> Result<(), Error> {
    match Cli::parse().command {
        Command::GenSynthetic(args) => {
            let cfg = args.load()?;
            let manifest = gen_synthetic(&cfg.synthetic_config(), &cfg.data_dir)?;
            println!(
                "wrote {} images and {} captions under {}",
                manifest.images.len(),
                manifest.captions.len(),
                cfg.data_dir.display()
            );
        }
        Command::Train(args) => {
            let cfg = args.load()?;
            let outcome = train(&cfg)?;
            if let Some((step, loss)) = outcome.loss_log.last() {
                println!("step {step}: loss {loss:.6}");
            }
            println!("checkpoint: {}", outcome.checkpoint_path.display());
            println!("loss log: {}", outcome.log_path.display());
        }
        Command::Evaluate { config, checkpoint } => {
            let cfg = config.load()?;
            let path = checkpoint_path(&cfg, &checkpoint);
            let outcome = evaluate(&cfg, &path)?;
            print!("{}", render_eval_report("initial", &outcome.initial));
            if let Some(rvn) = &outcome.reranked {
                print!("{}", render_eval_report("rvn", rvn));
            }
            println!("rankings: {}", outcome.rankings_path.display());
            println!("report: {}", outcome.report_path.display());
        }
        Command::Rank { config, checkpoint } => {
            let cfg = config.load()?;
            let path = checkpoint_path(&cfg, &checkpoint);
            let outcome = rank(&cfg, &path, false)?;
            println!("rankings: {}", outcome.rankings_path.display());
        }
        Command::Rerank { config, checkpoint } => {
            let cfg = config.load()?;
            let path = checkpoint_path(&cfg, &checkpoint);
            let outcome = rank(&cfg, &path, true)?;
            println!("rankings: {}", outcome.rankings_path.display());
            if let Some(rvn) = &outcome.rvn_rankings_path {
                println!("re-ranked: {}", rvn.display());
            }
        }
        Command::Gradcheck { config, seeds, fault_injection } => {
            let cfg = config.load()?;
            let seed_list: Vec<u64> = (0..seeds).collect();
            let report = gradcheck(&cfg, &seed_list, &GradcheckDims::default(), fault_injection)?;
            print!("{}", render_gradcheck_report(&report));
        }
        Command::ExportAttn { config, checkpoint, caption_id, image_id } => {
            let cfg = config.load()?;
            let path = checkpoint_path(&cfg, &checkpoint);
            let out = export_attention_for(&cfg, &path, caption_id, image_id)?;
            println!("attention records: {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
