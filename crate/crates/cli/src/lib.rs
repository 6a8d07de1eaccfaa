//! Command-line front end for the merging laboratory. The binary is a thin
//! wrapper over [`run_from`], which acceptance tests call in-process.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use frism_core::error::{Error, Result};

use commands::{SimulateArgs, SimulateMode};
use config::RunConfig;

#[derive(Debug, Parser)]
#[command(
    name = "frism",
    version,
    about = "Deterministic model-merging laboratory: triple generation, spectral merges, gate training, and theory simulation"
)]
pub struct Cli {
    /// JSON run configuration; omitted means all defaults.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the base/vlm/lrm checkpoint triple with provenance.
    Gen,
    /// Merge checkpoints by one method and write metrics.
    Merge {
        /// ta | layerwise | ties | dare | ip | frism | frism-scalar
        /// (overrides merge.method).
        #[arg(long)]
        method: Option<String>,
        /// Overrides merge.lambda_lrm (and frism.lambda_lrm for the frism
        /// methods).
        #[arg(long)]
        lambda_lrm: Option<f64>,
        /// Overrides merge.lambda_vlm.
        #[arg(long)]
        lambda_vlm: Option<f64>,
    },
    /// Train gates against the frozen teacher.
    Train,
    /// Score the rank-injection grid and write sweep.csv.
    Sweep,
    /// Simulate gate dynamics on quadratic landscapes.
    Simulate {
        /// random (synthetic landscapes) or triple (curvatures estimated
        /// from the stored checkpoints).
        #[arg(long, default_value = "random")]
        mode: String,
        /// Landscapes to draw in random mode.
        #[arg(long, default_value_t = 100)]
        count: usize,
        /// Descent step size.
        #[arg(long, default_value_t = 0.1)]
        lr: f64,
        /// Descent steps per landscape.
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        /// Landscape-sampling seed in random mode.
        #[arg(long, default_value_t = 4242)]
        seed: u64,
    },
    /// Evaluate one checkpoint on the pinned streams.
    Eval {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Metrics destination; defaults to metrics/eval_<stem>.json.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Consolidate merge metrics into a Markdown comparison table.
    Report,
}

/// Execute a parsed invocation, writing progress lines to `out`.
pub fn run<W: Write>(cli: Cli, out: &mut W) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Gen => commands::cmd_gen(&cfg, cli.force, out),
        Command::Merge {
            method,
            lambda_lrm,
            lambda_vlm,
        } => {
            if let Some(m) = method {
                cfg.merge.method = m;
            }
            if let Some(l) = lambda_lrm {
                cfg.merge.lambda_lrm = l;
                if cfg.merge.method.starts_with("frism") {
                    cfg.frism.lambda_lrm = l;
                }
            }
            if let Some(l) = lambda_vlm {
                cfg.merge.lambda_vlm = l;
            }
            cfg.validate()?;
            commands::cmd_merge(&cfg, cli.force, out)
        }
        Command::Train => commands::cmd_train(&cfg, cli.force, out),
        Command::Sweep => commands::cmd_sweep(&cfg, cli.force, out),
        Command::Simulate {
            mode,
            count,
            lr,
            steps,
            seed,
        } => {
            let args = SimulateArgs {
                mode: SimulateMode::parse(&mode)?,
                count,
                lr,
                steps,
                seed,
            };
            commands::cmd_simulate(&cfg, cli.force, &args, out)
        }
        Command::Eval { checkpoint, out: dest } => {
            commands::cmd_eval(&cfg, cli.force, &checkpoint, dest.as_deref(), out)
        }
        Command::Report => commands::cmd_report(&cfg, cli.force, out),
    }
}

/// Parse `argv` (including the program name) and execute. Help and version
/// requests print to `out` and succeed; genuine argument errors surface as
/// single-line config errors like everything else.
pub fn run_from<I, S, W>(argv: I, out: &mut W) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
    W: Write,
{
    use clap::error::ErrorKind;
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            write!(out, "{}", e.render()).map_err(Error::Io)?;
            return Ok(());
        }
        Err(e) => {
            let line = e.to_string();
            let line = line.lines().next().unwrap_or("invalid arguments");
            return Err(Error::Config(
                line.trim_start_matches("error: ").to_string(),
            ));
        }
    };
    run(cli, out)
}
