//! `mmseq`: data preparation, training, verification and decoding.
//!
//! Every command prints one JSON document to stdout and writes artifacts
//! to files. Exit codes: 0 success, 1 verification failure, 2 usage or
//! validation error.

mod data;
mod decode;
mod error;
mod manifest;
mod train;
mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mmseq::trainer::SEED_ENV;
use mmseq::vitsim::VisualTokenizerConfig;
use serde::Serialize;

use crate::decode::DecodeArgs;
use crate::error::{CliError, CliResult};

#[derive(Parser)]
#[command(
    name = "mmseq",
    version,
    about = "Interleaved multimodal sequence modeling at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusKind {
    /// Sixteen documents: text, boxed captions, input and target images.
    Sample,
    /// Four instruction-style documents for fine-tuning.
    Task,
}

type Dim = u64;
fn dim() -> clap::builder::RangedU64ValueParser<Dim> {
    clap::value_parser!(u64).range(1..)
}

#[derive(Subcommand)]
enum Command {
    /// Minimal tile grid for an image size; prints n_h, n_w and the cell centres.
    PlanGrid {
        #[arg(long, value_parser = dim())]
        height: Dim,
        #[arg(long, value_parser = dim())]
        width: Dim,
        /// Tile height (and width unless --tile-w is given).
        #[arg(long, default_value_t = 224, value_parser = dim())]
        tile: Dim,
        #[arg(long, value_parser = dim())]
        tile_w: Option<Dim>,
    },
    /// Partitions a PPM/PGM image into grid tiles plus a global tile.
    Tile {
        image: PathBuf,
        #[arg(long, default_value_t = 32, value_parser = dim())]
        tile: Dim,
        #[arg(long, value_parser = dim())]
        tile_w: Option<Dim>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Bounding-box token codec.
    #[command(subcommand)]
    Codec(CodecCommand),
    /// Writes a bundled fixture corpus (manifest.jsonl plus images/).
    MakeCorpus {
        #[arg(long, value_enum)]
        kind: CorpusKind,
        #[arg(long)]
        out: PathBuf,
    },
    /// Packs a JSONL manifest into training sequences with a validation report.
    Pack {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Visual tokenizer seed.
        #[arg(long, default_value_t = VisualTokenizerConfig::default().seed)]
        tokenizer_seed: u64,
    },
    /// Finite-difference check of every kernel op and of the end-to-end loss.
    Gradcheck {
        #[arg(long, default_value_t = 20, value_parser = dim())]
        seeds: u64,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Next-token plus feature-regression pre-training from a TOML config.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Halt after this many completed steps, keeping the full schedule.
        #[arg(long)]
        stop_at: Option<usize>,
    },
    /// LoRA fine-tuning of a pre-trained checkpoint from a TOML config.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        stop_at: Option<usize>,
    },
    /// Trains the de-tokenizer: stage 1, weight surgery, stage 2.
    TrainDetok {
        #[arg(long)]
        config: PathBuf,
    },
    /// Greedy generation; generated images are rendered by the de-tokenizer.
    Decode {
        /// Pre-training checkpoint or fine-tuning adapter directory.
        #[arg(long)]
        checkpoint: PathBuf,
        /// De-tokenizer checkpoint directory (stage 1 or 2).
        #[arg(long)]
        detok: PathBuf,
        #[arg(long)]
        prompt: String,
        /// Input image placed before the prompt text.
        #[arg(long)]
        image: Option<PathBuf>,
        /// Condition image for a stage-2 de-tokenizer.
        #[arg(long)]
        condition: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        max_new: usize,
        /// Noise seed for decoding; defaults to $MMSEQ_SEED, then 0.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum CodecCommand {
    /// Encodes x_center,y_center,width,height as six box tokens.
    EncodeBox {
        #[arg(long = "box", allow_hyphen_values = true)]
        bbox: String,
    },
    /// Finds box spans in a whitespace- or comma-separated token id list.
    Parse {
        #[arg(long, allow_hyphen_values = true)]
        tokens: String,
        /// Stop at the first malformed span and exit 1.
        #[arg(long)]
        abort: bool,
    },
}

pub(crate) fn emit(value: &impl Serialize) -> CliResult {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn env_seed() -> CliResult<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn run(cli: Cli) -> CliResult {
    let us = |v: Dim| v as usize;
    match cli.command {
        Command::PlanGrid {
            height,
            width,
            tile,
            tile_w,
        } => data::plan_grid(us(height), us(width), us(tile), us(tile_w.unwrap_or(tile))),
        Command::Tile {
            image,
            tile,
            tile_w,
            out,
        } => data::tile(&image, us(tile), us(tile_w.unwrap_or(tile)), &out),
        Command::Codec(CodecCommand::EncodeBox { bbox }) => data::encode(&bbox),
        Command::Codec(CodecCommand::Parse { tokens, abort }) => data::parse(&tokens, abort),
        Command::MakeCorpus { kind, out } => data::make_corpus(kind, &out),
        Command::Pack {
            manifest,
            out,
            tokenizer_seed,
        } => data::pack(
            &manifest,
            &out,
            VisualTokenizerConfig {
                seed: tokenizer_seed,
                ..VisualTokenizerConfig::default()
            },
        ),
        Command::Gradcheck { seeds, inject_fault } => {
            let fault = inject_fault.as_deref().map(verify::fault_op).transpose()?;
            verify::gradcheck(seeds, fault)
        }
        Command::Pretrain {
            config,
            resume,
            stop_at,
        } => train::pretrain(&config, resume, stop_at),
        Command::Finetune {
            config,
            resume,
            stop_at,
        } => train::finetune(&config, resume, stop_at),
        Command::TrainDetok { config } => train::train_detok(&config),
        Command::Decode {
            checkpoint,
            detok,
            prompt,
            image,
            condition,
            max_new,
            seed,
            out,
        } => {
            let seed = match seed {
                Some(s) => s,
                None => env_seed()?.unwrap_or(0),
            };
            decode::decode(&DecodeArgs {
                checkpoint: &checkpoint,
                detok: &detok,
                prompt: &prompt,
                image: image.as_deref(),
                condition: condition.as_deref(),
                max_new,
                seed,
                out: &out,
            })
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
