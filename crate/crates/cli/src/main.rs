//! `pixcorr` command-line interface.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pixcorr::losses::{AttDomains, AttForm, AttMetric};
use pixcorr::Error;

#[derive(Parser, Debug)]
#[command(
    name = "pixcorr",
    version,
    about = "Self-training domain adaptation with a source-trained self-attention module"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the source, target and target-eval scene sets.
    GenData(Common),
    /// Train the self-attention module on source scenes.
    TrainSam(Common),
    /// Label the target set with a source-only (or given) network.
    Pseudo {
        #[command(flatten)]
        common: Common,
        /// Network checkpoint to label with instead of the source-only model.
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Train a fresh network on source labels and target pseudo labels.
    Adapt {
        #[command(flatten)]
        common: Common,
        /// no-pseudo, pseudo-only, ours, ours-skip or ours-target.
        #[arg(long, default_value = "ours")]
        variant: String,
    },
    /// Source-only bootstrap followed by N self-training generations.
    Iterate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated variants.
        #[arg(long, default_value = "pseudo-only,ours", value_delimiter = ',')]
        variants: Vec<String>,
    },
    /// Evaluate a network checkpoint on the target evaluation set.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate; defaults to the adapted `ours` network.
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Write tables and heatmaps for the run.
    Report {
        #[command(flatten)]
        common: Common,
        /// Number of evaluation images to visualize.
        #[arg(long, default_value_t = 4)]
        images: usize,
    },
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// Flat key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, value_parser = parse_kw::<AttForm>)]
    att_form: Option<AttForm>,
    #[arg(long, value_parser = parse_kw::<AttDomains>)]
    att_domains: Option<AttDomains>,
    #[arg(long, value_parser = parse_kw::<AttMetric>)]
    att_metric: Option<AttMetric>,
    /// Disable the 1x1 convolution in the attention module.
    #[arg(long)]
    no_conv: bool,
    /// Drop the skip connection while training the attention module.
    #[arg(long)]
    no_skip: bool,
    #[arg(long)]
    gens: Option<usize>,
    /// Extra `key=value` configuration overrides.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Root directory for run directories.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

fn parse_kw<T: std::str::FromStr<Err = Error>>(s: &str) -> Result<T, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Divergence(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("pixcorr: error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
