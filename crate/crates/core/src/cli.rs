//! Command-line front end. Every stage reads inputs from `--data` (default:
//! the output directory) and writes into `--out`.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{DuetError, Result};
use crate::io;
use crate::pipeline::{self, DuetConfig};

pub const SEED_ENV: &str = "DUET_SEED";

#[derive(Debug, Parser)]
#[command(name = "duet", version, about = "Dual-paradigm spatial gene-expression inference")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// JSON config; missing fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides DUET_SEED and the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "duet-out")]
    pub out: PathBuf,
    /// Input directory; defaults to the output directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic data bundle with ground truth.
    Synth(Common),
    /// Fit signatures, deconvolve spots and write the gating signal.
    Deconv(Common),
    /// Train the image-expression alignment model.
    Align(Common),
    /// Retrieval-branch predictions for the test spots.
    Retrieve(Common),
    /// Train the regression branch.
    Regress(Common),
    /// Train the fusion adapter on held-out spots.
    Fuse(Common),
    /// Branch and fused predictions for the test spots.
    Predict(Common),
    /// Metrics and variance curve.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Prediction table; with --truth, evaluates this pair only.
        #[arg(long, requires = "truth")]
        pred: Option<PathBuf>,
        #[arg(long, requires = "pred")]
        truth: Option<PathBuf>,
    },
    /// Every stage in order from one config.
    Pipeline(Common),
}

/// Config from file (or defaults) with the seed override applied.
pub fn resolve_config(common: &Common, env_seed: Option<&str>) -> Result<DuetConfig> {
    let mut cfg: DuetConfig = match &common.config {
        Some(p) => io::read_json(p)?,
        None => DuetConfig::default(),
    };
    let env = match env_seed {
        Some(s) => Some(
            s.trim()
                .parse::<u64>()
                .map_err(|_| DuetError::input(format!("{SEED_ENV}='{s}' is not an unsigned integer")))?,
        ),
        None => None,
    };
    if let Some(seed) = common.seed.or(env) {
        cfg.seed = seed;
        cfg.synth.seed = seed;
    }
    Ok(cfg)
}

fn data_dir(common: &Common) -> &Path {
    common.data.as_deref().unwrap_or(&common.out)
}

pub fn execute(cli: &Cli) -> Result<()> {
    let env_seed = std::env::var(SEED_ENV).ok();
    let env_seed = env_seed.as_deref();
    match &cli.command {
        Command::Synth(c) => pipeline::stage_synth(&resolve_config(c, env_seed)?, &c.out),
        Command::Deconv(c) => pipeline::stage_deconv(&resolve_config(c, env_seed)?, data_dir(c), &c.out),
        Command::Align(c) => pipeline::stage_align(&resolve_config(c, env_seed)?, data_dir(c), &c.out),
        Command::Retrieve(c) => pipeline::stage_retrieve(&resolve_config(c, env_seed)?, data_dir(c), &c.out),
        Command::Regress(c) => pipeline::stage_regress(&resolve_config(c, env_seed)?, data_dir(c), &c.out),
        Command::Fuse(c) => pipeline::stage_fuse(&resolve_config(c, env_seed)?, data_dir(c), &c.out),
        Command::Predict(c) => pipeline::stage_predict(&resolve_config(c, env_seed)?, data_dir(c), &c.out),
        Command::Eval { common, pred, truth } => match (pred, truth) {
            (Some(p), Some(t)) => {
                let report = pipeline::eval_files(p, t)?;
                print!("{}", io::to_json(&report));
                Ok(())
            }
            _ => {
                let summary = pipeline::stage_eval(data_dir(common), &common.out)?;
                print!("{}", io::to_json(&summary));
                Ok(())
            }
        },
        Command::Pipeline(c) => {
            let cfg = resolve_config(c, env_seed)?;
            let summary = pipeline::stage_pipeline(&cfg, &c.out, c.config.as_deref())?;
            print!("{}", io::to_json(&summary));
            Ok(())
        }
    }
}

/// Parse `args`, run, and map the outcome to a process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
