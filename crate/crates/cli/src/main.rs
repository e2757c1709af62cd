//! `cpcseg`: corpus synthesis, training, segmentation and evaluation.

mod commands;
mod outputs;
mod reprs;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cpcseg::config::{parse_config, Config};
use cpcseg::data::Split;
use cpcseg::{Error, Result};

#[derive(Parser)]
#[command(name = "cpcseg", version, about = "Contrastive predictive coding segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override such as `model.K=4`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Replaces every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Valid,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Valid => Split::Valid,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LevelArg {
    Phone,
    Word,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Directory of `<id>.bnd` prediction files.
    predictions: PathBuf,
    /// Directory of `<id>.bnd` reference files; defaults to the alignments
    /// of the configured manifest.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "phone")]
    level: LevelArg,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with phone and word alignments.
    Synth(Common),
    /// Train a model on the manifest's train split.
    Train(Common),
    /// Write phone (and word) boundary files for a split.
    Segment {
        #[command(flatten)]
        common: Common,
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Score predicted boundaries against references at one offset.
    EvalSeg {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalArgs,
        /// Shift applied to predictions, a multiple of 10 ms.
        #[arg(long, allow_negative_numbers = true)]
        offset_ms: Option<i64>,
    },
    /// Score predicted boundaries over the configured offsets.
    SweepOffset {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Fit a linear phone classifier on frozen representations.
    Probe {
        #[command(flatten)]
        common: Common,
        checkpoint: PathBuf,
    },
    /// Within- and across-speaker ABX error on phone items.
    Abx {
        #[command(flatten)]
        common: Common,
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Dump latent and context vectors per utterance.
    ExportReprs {
        #[command(flatten)]
        common: Common,
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
}

fn load_config(c: &Common, offset_ms: Option<i64>) -> Result<Config> {
    let text = match &c.config {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| Error::Data(format!("cannot read config {}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut overrides = c.set.clone();
    if let Some(o) = offset_ms {
        overrides.push(format!("eval.offset_ms={o}"));
    }
    let mut config = parse_config(&text, &overrides)?;
    if let Some(seed) = c.seed {
        config.set_seed(seed);
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<()> {
    use commands::*;
    let (common, offset) = match &cli.command {
        Command::EvalSeg { common, offset_ms, .. } => (common, *offset_ms),
        Command::Synth(c) | Command::Train(c) => (c, None),
        Command::Segment { common, .. }
        | Command::SweepOffset { common, .. }
        | Command::Probe { common, .. }
        | Command::Abx { common, .. }
        | Command::ExportReprs { common, .. } => (common, None),
    };
    let config = load_config(common, offset)?;
    let mut out = outputs::Outputs::open(&common.out)?;
    let result = match &cli.command {
        Command::Synth(_) => synth(&config, &mut out),
        Command::Train(_) => train(&config, &mut out),
        Command::Segment { checkpoint, split, .. } => segment(&config, checkpoint, (*split).into(), &mut out),
        Command::EvalSeg { eval, .. } => eval_seg(&config, eval, &mut out),
        Command::SweepOffset { eval, .. } => sweep_offset(&config, eval, &mut out),
        Command::Probe { checkpoint, .. } => probe(&config, checkpoint, &mut out),
        Command::Abx { checkpoint, split, .. } => abx(&config, checkpoint, (*split).into(), &mut out),
        Command::ExportReprs { checkpoint, split, .. } => export_reprs(&config, checkpoint, (*split).into(), &mut out),
    };
    if result.is_err() {
        out.discard();
    }
    result
}

fn fail(kind: &str, code: u8, message: &str) -> ExitCode {
    let line = serde_json::json!({ "error": kind, "code": code, "message": message });
    eprintln!("{line}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            return fail("usage", 2, first);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), e.exit_code() as u8, &e.to_string()),
    }
}
