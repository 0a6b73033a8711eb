//! `sharelens` command-line pipeline.

mod commands;
mod config;
mod error;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use config::PipelineConfig;
use error::CliError;
use run::Run;

#[derive(Parser, Debug)]
#[command(name = "sharelens", version, about = "Structural demand estimation with text-embedding instruments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Kind {
    Logit,
    Nested,
    Quantile,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// Pipeline configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 1 gives bit-identical output.
    #[arg(long)]
    threads: Option<usize>,
    /// Root directory for run-scoped output folders.
    #[arg(long)]
    out: Option<PathBuf>,
    /// `key=value` config overrides, dotted keys for nested tables.
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate and normalize the input panel and reviews.
    Ingest(Common),
    /// Market shares, outside shares and logit mean utilities.
    Shares(Common),
    /// Train the review-text embedding.
    Embed(Common),
    /// Isolation, rival and lagged instrument columns.
    Instruments(Common),
    /// Logit, nested-logit or quantile estimation.
    Estimate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        kind: Option<Kind>,
        /// Comma-separated quantiles for `--kind quantile`.
        #[arg(long, value_delimiter = ',')]
        taus: Option<Vec<f64>>,
    },
    /// Random-coefficients GMM.
    Blp(Common),
    /// Own elasticities and their averages.
    Elasticities(Common),
    /// Weak-instrument and overidentification diagnostics.
    Diagnose(Common),
    /// Permutation placebo tests.
    Placebo(Common),
    /// Chronological holdout evaluation.
    Holdout(Common),
    /// Generate a synthetic panel with known truth.
    Simulate(Common),
}

type Handler = fn(&PipelineConfig, &mut Run) -> Result<(), CliError>;

fn dispatch(cli: Cli) -> Result<PathBuf, CliError> {
    let (name, common, extra, handler): (&str, Common, Vec<String>, Handler) = match cli.command {
        Command::Ingest(c) => ("ingest", c, vec![], commands::ingest),
        Command::Shares(c) => ("shares", c, vec![], commands::shares),
        Command::Embed(c) => ("embed", c, vec![], commands::embed),
        Command::Instruments(c) => ("instruments", c, vec![], commands::instruments),
        Command::Estimate { common, kind, taus } => {
            let mut extra = Vec::new();
            if let Some(k) = kind {
                let k = format!("{k:?}").to_lowercase();
                extra.push(format!("model.kind=\"{k}\""));
            }
            if let Some(t) = taus {
                let list: Vec<String> = t.iter().map(|v| format!("{v:?}")).collect();
                extra.push(format!("model.taus=[{}]", list.join(", ")));
            }
            ("estimate", common, extra, commands::estimate)
        }
        Command::Blp(c) => ("blp", c, vec![], commands::blp),
        Command::Elasticities(c) => ("elasticities", c, vec![], commands::elasticities_cmd),
        Command::Diagnose(c) => ("diagnose", c, vec![], commands::diagnose),
        Command::Placebo(c) => ("placebo", c, vec![], commands::placebo),
        Command::Holdout(c) => ("holdout", c, vec![], commands::holdout),
        Command::Simulate(c) => ("simulate", c, vec![], commands::simulate),
    };
    let mut overrides = common.overrides.clone();
    overrides.extend(extra);
    let mut config = config::load_config(&common.config, &overrides)?;
    if let Some(s) = common.seed {
        config.seed = s;
    }
    if let Some(t) = common.threads {
        config.threads = Some(t);
    }
    if let Some(o) = &common.out {
        config.out = Some(o.clone());
    }
    let threads = match config.threads {
        Some(0) => return Err(CliError::Validation("threads must be at least 1".into())),
        Some(t) => t,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))?;

    let root = config.out.clone().unwrap_or_else(|| PathBuf::from("runs"));
    let mut run = Run::create(&root, name)?;
    let resolved = toml::to_string(&config).map_err(|e| CliError::Runtime(format!("config: {e}")))?;
    run.write("config.toml", resolved.as_bytes())?;
    let outcome = handler(&config, &mut run);
    let dir = run.finish(&config, threads)?;
    outcome.map(|_| dir)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(dir) => {
            eprintln!("outputs written to {}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("sharelens: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
