use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use scenesketch::metrics::write_report;
use scenesketch::pipeline::{
    evaluate_manifest, run_pipeline, train_captioner_from_config, train_generator_from_config, validate_manifest, PipelineBackends, PipelineConfig,
    PipelineError, DEFAULT_SPLITS, MANIFEST_FILE,
};

const EXIT_USAGE: u8 = 1;
const EXIT_INVALID: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "scenesketch", version, about = "Builds scene sketch, text and image triplets from object sketches and a caption corpus.")]
struct Cli {
    /// TOML configuration; relative paths inside it resolve against its directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the sketch captioner on the input sketches.
    CaptionTrain,
    /// Train the scene-sketch generator on every sketch × caption pair.
    GeneratorTrain,
    /// Run the full pipeline and write the manifest.
    PipelineRun,
    /// Check a manifest and the files it references.
    ManifestValidate {
        /// Defaults to the manifest in the output directory.
        manifest: Option<PathBuf>,
    },
    /// Compute metrics over a manifest.
    Eval {
        manifest: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_SPLITS)]
        splits: usize,
        /// CSV destination; defaults to metrics.csv next to the manifest.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Rerun the pipeline with one component switched off.
    Ablate {
        #[arg(long, value_enum)]
        drop: Component,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Component {
    Tcla,
    Sfp,
    Socp,
    Mop,
}

impl Component {
    fn label(self) -> &'static str {
        match self {
            Self::Tcla => "tcla",
            Self::Sfp => "sfp",
            Self::Socp => "socp",
            Self::Mop => "mop",
        }
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.output_dir = out.clone();
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<u8> {
    let mut config = load_config(&cli)?;
    match cli.command {
        Command::CaptionTrain => {
            let run = train_captioner_from_config(&config)?;
            println!(
                "captioner: align loss {:.4}, fine-tune loss {:.4}, token accuracy {:.3}",
                run.align.final_loss().unwrap_or(f64::NAN),
                run.fine_tune.final_loss().unwrap_or(f64::NAN),
                run.token_accuracy
            );
            println!("checkpoint: {}", run.checkpoint.display());
        }
        Command::GeneratorTrain => {
            let run = train_generator_from_config(&config)?;
            if let Some(last) = run.report.epochs.last() {
                println!("generator: {} pairs, {} steps, final epoch total loss {:.5}", run.pairs, run.report.steps, last.total);
            }
            for f in &run.failures {
                eprintln!("pair {} skipped at {}: {}", f.id, f.stage, f.reason);
            }
            println!("checkpoint: {}\nlog: {}", run.checkpoint.display(), run.log.display());
        }
        Command::PipelineRun => pipeline(&config)?,
        Command::ManifestValidate { manifest } => {
            let path = manifest.unwrap_or_else(|| config.output_dir.join(MANIFEST_FILE));
            let report = validate_manifest(&path);
            for v in &report.violations {
                println!("{v}");
            }
            println!("{}: {} records, {} violations", path.display(), report.records, report.violations.len());
            if !report.is_clean() {
                return Ok(EXIT_INVALID);
            }
        }
        Command::Eval { manifest, splits, report } => {
            let path = manifest.unwrap_or_else(|| config.output_dir.join(MANIFEST_FILE));
            let backends = PipelineBackends::from_config(&config.backends)?;
            let rows = evaluate_manifest(&path, &backends.models, splits)?;
            let dest = report.unwrap_or_else(|| path.with_file_name("metrics.csv"));
            write_report(&rows, &dest).with_context(|| format!("writing {}", dest.display()))?;
            for r in &rows {
                println!("{:<18} {:>12.6}  ({}, n = {})", r.metric, r.value, r.backend, r.n);
            }
            println!("report: {}", dest.display());
        }
        Command::Ablate { drop } => {
            match drop {
                Component::Tcla => config.ablation.disable_tcla = true,
                Component::Sfp => config.ablation.disable_sfp = true,
                Component::Socp => config.ablation.disable_socp = true,
                Component::Mop => config.ablation.disable_mop = true,
            }
            if cli.out.is_none() {
                config.output_dir = config.output_dir.join(format!("ablate_{}", drop.label()));
            }
            pipeline(&config)?;
        }
    }
    Ok(0)
}

fn pipeline(config: &PipelineConfig) -> Result<()> {
    let outcome = run_pipeline(config)?;
    let h = &outcome.manifest.header;
    println!(
        "{} of {} records ({} computed, {} reused, {} failed) in {}",
        h.records,
        h.expected,
        outcome.computed,
        outcome.reused,
        h.failures.len(),
        config.output_dir.join(MANIFEST_FILE).display()
    );
    for f in &h.failures {
        eprintln!("pair {} failed at {}: {}", f.id, f.stage, f.reason);
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<PipelineError>() {
        Some(e) if e.is_config() => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
