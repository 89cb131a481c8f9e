//! `meanse`: corpus generation, training, enhancement, evaluation and the
//! flow-ratio ablation.
//!
//! Exit codes: 0 success, 1 I/O or file format error, 2 configuration or
//! geometry error, 3 numeric divergence, 4 an evaluation threshold failed.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use meanse_core::config::RunConfig;
use meanse_core::corpus::Split;
use meanse_core::metrics::format_table;
use meanse_core::pipeline::{self, EnhanceSource};
use meanse_core::Error;

#[derive(Parser)]
#[command(name = "meanse", version, about = "Flow-matching and mean-flow enhancement on synthetic signals")]
struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Suppress progress output on stdout.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the resolved configuration.
    ShowConfig,
    /// Synthesize the train/val/test/ood corpus.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a flow-matching network from scratch.
    TrainFlow {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune a mean-flow network from a flow checkpoint through the curriculum.
    TrainMeanflow {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        flow: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Enhance a corpus split or a mono WAV file.
    Enhance {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "input", requires = "split")]
        corpus: Option<PathBuf>,
        #[arg(long, value_parser = parse_split)]
        split: Option<Split>,
        #[arg(long, required_unless_present = "corpus")]
        input: Option<PathBuf>,
        #[arg(long)]
        nfe: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score checkpoints against the noisy input and apply the configured thresholds.
    Eval {
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune one mean-flow network per configured flow ratio and score each at NFE 1.
    AblateFlowRatio {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        flow: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_split(s: &str) -> Result<Split, String> {
    Split::parse(s).map_err(|e| e.to_string())
}

enum Failure {
    Core(Error),
    Thresholds,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Geometry(_) | Error::FrequencyMismatch => 2,
        Error::Divergence { .. } | Error::NonFiniteLoss { .. } => 3,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default().resolve()?,
    };
    let say = |msg: String| {
        if !cli.quiet {
            println!("{msg}");
        }
    };
    match cli.command {
        Command::ShowConfig => print!("{}", cfg.to_toml()),
        Command::GenCorpus { out } => {
            let s = pipeline::cmd_gen_corpus(&cfg, &out)?;
            for (split, n) in &s.counts {
                say(format!("{split}\t{n}"));
            }
            say(format!("manifest {}", s.manifest.display()));
        }
        Command::TrainFlow { corpus, out } => {
            let path = pipeline::cmd_train_flow(&cfg, &corpus, &out)?;
            say(format!("checkpoint {}", path.display()));
        }
        Command::TrainMeanflow { corpus, flow, out } => {
            let run = pipeline::cmd_train_meanflow(&cfg, &corpus, &flow, &out)?;
            for p in &run.stage_checkpoints {
                say(format!("stage {}", p.display()));
            }
            say(format!("checkpoint {}", run.final_checkpoint.display()));
        }
        Command::Enhance {
            checkpoint,
            corpus,
            split,
            input,
            nfe,
            out,
        } => {
            let source = match (&corpus, split, &input) {
                (Some(dir), Some(split), _) => EnhanceSource::Corpus { dir, split },
                (_, _, Some(path)) => EnhanceSource::Wav(path),
                _ => return Err(Error::Config("give --corpus with --split, or --input".into()).into()),
            };
            for u in pipeline::cmd_enhance(&cfg, &checkpoint, source, nfe, &out)? {
                say(format!("{}\tnetwork_calls={}\t{}", u.id, u.network_calls, u.waveform.display()));
            }
        }
        Command::Eval { checkpoints, corpus, out } => {
            let outcome = pipeline::cmd_eval(&cfg, &checkpoints, &corpus, &out)?;
            say(format_table(&outcome.rows));
            for c in &outcome.checks {
                say(format!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail));
            }
            if !outcome.all_passed() {
                return Err(Failure::Thresholds);
            }
        }
        Command::AblateFlowRatio { corpus, flow, out } => {
            let rows = pipeline::cmd_ablate_flow_ratio(&cfg, &corpus, &flow, &out)?;
            say(pipeline::format_ablation(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Thresholds) => {
            eprintln!("error: evaluation thresholds failed");
            ExitCode::from(4)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
