//! `dexprint`: drives the detection and clustering pipeline over a run directory.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use dexprint_core::config::RunConfig;
use dexprint_core::corpus::{TransformKind, MANIFEST_FILE};
use dexprint_core::detect::Strategy;
use dexprint_core::pipeline::{self, RunDir};
use dexprint_core::Error;
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(
    name = "dexprint",
    version,
    about = "Malware detection and family clustering over Dalvik-style assembly"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON configuration; defaults to `<out>/config.json` when it exists.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 gives bit-reproducible runs.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Run directory.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic labeled corpus.
    GenCorpus {
        #[arg(long)]
        malware: Option<usize>,
        #[arg(long)]
        benign: Option<usize>,
        #[arg(long)]
        families: Option<usize>,
    },
    /// Split the corpus and build the platform vocabulary.
    BuildVocab,
    /// Train instruction embeddings on the build apps.
    TrainEmbed,
    /// Train the CNN ensemble and fit its thresholds.
    TrainDetect,
    /// Score apps and write detection reports.
    Detect {
        /// Corpus to scan instead of the run's test apps.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Report directory (default `<out>/detect`).
        #[arg(long)]
        reports: Option<PathBuf>,
    },
    /// Cluster detected malware into families.
    Cluster,
    /// Run self-training adaptation over the corpus drift epochs.
    Adapt,
    /// Precision, recall, F1 and coverage of a detection report.
    Eval {
        /// Report file (default: the run's report for `--strategy`).
        #[arg(long)]
        report: Option<PathBuf>,
        /// Manifest with true labels (default: the run's corpus manifest).
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = StrategyArg::General)]
        strategy: StrategyArg,
    },
    /// Rewrite the test apps with an obfuscation-style transformation.
    Transform {
        #[arg(long)]
        kind: TransformKind,
        /// Destination corpus (default `<out>/transformed/<kind>`).
        #[arg(long)]
        dest: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StrategyArg {
    General,
    Confidence,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Strategy {
        match s {
            StrategyArg::General => Strategy::General,
            StrategyArg::Confidence => Strategy::Confidence,
        }
    }
}

/// Failure classes mapped to exit codes.
enum Failure {
    Usage(anyhow::Error),
    Data(anyhow::Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Failure {
        match e {
            Error::InvalidArgument(_) => Failure::Usage(e.into()),
            other => Failure::Data(other.into()),
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig, Failure> {
    let run_config = RunDir::new(&common.out).config();
    let path = common
        .config
        .clone()
        .or_else(|| run_config.exists().then_some(run_config));
    let mut cfg = match path {
        Some(p) => RunConfig::load(&p)
            .with_context(|| format!("reading configuration {}", p.display()))
            .map_err(Failure::Usage)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print<T: Serialize>(value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Data(e.into()))?;
    println!("{text}");
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.common.workers {
        if n == 0 {
            return Err(Failure::Usage(anyhow::anyhow!(
                "--workers must be at least 1"
            )));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(e.into()))?;
    }
    let mut cfg = load_config(&cli.common)?;
    let dir = RunDir::new(&cli.common.out);
    match cli.command {
        Command::GenCorpus {
            malware,
            benign,
            families,
        } => {
            cfg.corpus.malware = malware.unwrap_or(cfg.corpus.malware);
            cfg.corpus.benign = benign.unwrap_or(cfg.corpus.benign);
            cfg.corpus.families = families.unwrap_or(cfg.corpus.families);
            log::info!("generating corpus into {}", dir.corpus().display());
            print(&pipeline::gen_corpus(&dir, &cfg)?)
        }
        Command::BuildVocab => print(&pipeline::build_vocab(&dir, &cfg)?),
        Command::TrainEmbed => {
            log::info!("training embeddings");
            print(&pipeline::train_embed(&dir, &cfg)?)
        }
        Command::TrainDetect => {
            log::info!("training the detector ensemble");
            print(&pipeline::train_detect(&dir, &cfg)?)
        }
        Command::Detect { input, reports } => print(&pipeline::detect(
            &dir,
            &cfg,
            input.as_deref(),
            reports.as_deref(),
        )?),
        Command::Cluster => print(&pipeline::cluster(&dir, &cfg)?),
        Command::Adapt => {
            log::info!("running adaptation");
            print(&pipeline::adapt(&dir, &cfg)?)
        }
        Command::Eval {
            report,
            manifest,
            strategy,
        } => {
            let report = report.unwrap_or_else(|| dir.report(&dir.detect(), strategy.into()));
            let manifest = manifest.unwrap_or_else(|| dir.corpus().join(MANIFEST_FILE));
            print(&pipeline::evaluate(&report, &manifest)?)
        }
        Command::Transform { kind, dest } => {
            let path = pipeline::transform_corpus(&dir, &cfg, kind, dest.as_deref())?;
            print(&serde_json::json!({ "kind": kind.name(), "corpus": path }))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
