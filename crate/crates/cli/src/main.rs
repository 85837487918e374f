//! `diver`: preprocess EEG, generate synthetic data, pretrain, fine-tune,
//! verify symmetry properties and inspect checkpoints.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::Common;

#[derive(Parser)]
#[command(name = "diver", version, about = "Channel-equivariant EEG foundation model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for the command's random stream.
    #[arg(long)]
    seed: Option<u64>,
    /// Override one setting, `key=value`. Repeatable; applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl CommonArgs {
    fn common(&self) -> Common<'_> {
        Common {
            config: self.config.as_deref(),
            seed: self.seed,
            set: &self.set,
            out: self.out.as_deref(),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Filter, resample, segment and reject raw recordings into windows.
    Preprocess {
        /// A .drf/.csv recording or a directory of them.
        #[arg(long = "in")]
        input: PathBuf,
        /// Band-pass edges in Hz, `low:high`.
        #[arg(long)]
        band: Option<String>,
        /// Notch frequency in Hz, or `none`.
        #[arg(long)]
        notch: Option<String>,
        /// Target sampling rate in Hz.
        #[arg(long)]
        rate: Option<String>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Write a deterministic synthetic corpus.
    Synth {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Masked-patch pretraining on preprocessed windows.
    Pretrain {
        /// Directory of window files written by `preprocess`.
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Fine-tune a classifier over one or more seeds.
    Finetune {
        /// Labeled index CSV (recording, start_s, label, split).
        #[arg(long)]
        index: PathBuf,
        /// Pretrained checkpoint to start from.
        #[arg(long)]
        init: Option<PathBuf>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run the symmetry and numerics checks on a model.
    Verify {
        /// Checkpoint to verify; a fresh model otherwise.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Ablation applied to the fresh model. Repeatable.
        #[arg(long = "ablation")]
        ablations: Vec<String>,
        /// Fewer channel counts, patches and permutations.
        #[arg(long)]
        quick: bool,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Print a checkpoint's configuration and parameter table.
    InspectCkpt { path: PathBuf },
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Preprocess {
            input,
            band,
            notch,
            rate,
            common,
        } => {
            let flags: Vec<String> = [("prep.band", band), ("prep.notch", notch), ("prep.rate", rate)]
                .into_iter()
                .filter_map(|(k, v)| v.map(|v| format!("{k}={v}")))
                .collect();
            commands::preprocess_cmd(&common.common(), &input, &flags)?;
        }
        Command::Synth { common } => commands::synth_cmd(&common.common())?,
        Command::Pretrain { data, common } => commands::pretrain_cmd(&common.common(), &data)?,
        Command::Finetune { index, init, common } => {
            commands::finetune_cmd(&common.common(), &index, init.as_deref())?
        }
        Command::Verify {
            ckpt,
            ablations,
            quick,
            common,
        } => return commands::verify_cmd(&common.common(), ckpt.as_deref(), &ablations, quick),
        Command::InspectCkpt { path } => commands::inspect_cmd(&path)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(settings::exit_code(&e) as u8)
        }
    }
}
