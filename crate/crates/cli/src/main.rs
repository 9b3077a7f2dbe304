//! `dwrag`: build indexes, answer questions, run benchmarks and sweeps, and
//! collect preference pairs from rollout traces.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dwrag::corpus::CorpusFormat;

use config::Settings;

/// A usage mistake: bad flag value or missing setting. Exits with status 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Parser)]
#[command(name = "dwrag", version, about = "Multi-round, multi-branch retrieval-augmented question answering")]
struct Cli {
    /// Log more (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the BM25 index (and optionally the embedding store) for a corpus.
    Index {
        corpus: PathBuf,
        #[arg(long, value_parser = parse_format)]
        format: Option<CorpusFormat>,
        #[arg(long)]
        out: PathBuf,
        /// Also embed every document through the embeddings endpoint.
        #[arg(long)]
        dense: bool,
        /// Drop English stopwords before indexing.
        #[arg(long)]
        stopwords: bool,
        #[command(flatten)]
        settings: Settings,
    },
    /// Answer one question and write its trace.
    Run {
        question: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        settings: Settings,
    },
    /// Score a dataset and write per-example and aggregate reports.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        settings: Settings,
    },
    /// Run the benchmark over a width x depth grid.
    Sweep {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        widths: Vec<u32>,
        #[arg(long, value_delimiter = ',', required = true)]
        depths: Vec<u32>,
        #[arg(long)]
        out: PathBuf,
        /// Also render the F1-vs-tokens chart.
        #[arg(long)]
        plot: bool,
        #[command(flatten)]
        settings: Settings,
    },
    /// Turn eval traces into preference pairs.
    Prefgen {
        #[arg(long, value_enum)]
        mode: PrefMode,
        /// The `traces/` directory written by `dwrag eval`.
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 2.0)]
        lambda: f64,
        #[arg(long, default_value_t = 0.1)]
        beta: f64,
        /// Extra evaluator decisions drawn per prompt (0: trace decisions only).
        #[arg(long, default_value_t = 4)]
        samples: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        settings: Settings,
    },
    /// Render F1 against mean tokens from a sweep CSV.
    Plot {
        #[arg(long)]
        sweep: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PrefMode {
    Rewriter,
    Evaluator,
}

fn parse_format(s: &str) -> Result<CorpusFormat, String> {
    s.parse()
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => tracing::Level::WARN,
        1 => tracing::Level::INFO,
        _ => tracing::Level::DEBUG,
    };
    tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .with_target(false)
        .init();
}

fn dispatch(cmd: Command) -> anyhow::Result<bool> {
    match cmd {
        Command::Index {
            corpus,
            format,
            out,
            dense,
            stopwords,
            settings,
        } => commands::index(&corpus, format, &out, dense, stopwords, settings.layered()?),
        Command::Run { question, out, settings } => commands::run(&question, &out, settings.layered()?),
        Command::Eval { dataset, out, settings } => commands::eval(&dataset, &out, settings.layered()?),
        Command::Sweep {
            dataset,
            widths,
            depths,
            out,
            plot,
            settings,
        } => commands::sweep(&dataset, &widths, &depths, &out, plot, settings.layered()?),
        Command::Prefgen {
            mode,
            traces,
            dataset,
            lambda,
            beta,
            samples,
            out,
            settings,
        } => commands::prefgen(
            commands::PrefArgs {
                mode,
                traces: &traces,
                dataset: &dataset,
                lambda,
                beta,
                samples,
                out: &out,
            },
            settings.layered()?,
        ),
        Command::Plot { sweep, out } => commands::plot(&sweep, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    match dispatch(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) if e.is::<Usage>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
