//! Command-line entry point: resolves the layered configuration (file,
//! environment, flags) and dispatches to one operator command. Exit codes:
//! 0 success, 2 usage, 3 data error, 4 backend error.

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use pace::cli::{
    cmd_eval, cmd_index, cmd_ingest, cmd_run, cmd_sweep, cmd_synth, load_config, CliError,
    IndexKind, Overrides, SweepSpec,
};
use pace::eval::report_rows;
use pace::pipeline::Method;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "pace",
    version,
    about = "Prescription-recommendation pipeline: synthesize cohorts, build indexes, \
             run methods against a model backend, and evaluate the results"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Declarative TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Use this single seed instead of the configured seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// pace | zero_shot | guideline | treatrag | medreflect
    #[arg(long, global = true)]
    method: Option<String>,
    /// Chat-completion endpoint URL (also: PACE_BACKEND_URL).
    #[arg(long, global = true, value_name = "URL")]
    backend_url: Option<String>,
    /// Cases retrieved per focus query.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Minimum cosine similarity for retrieved cases.
    #[arg(long, global = true)]
    tau: Option<f64>,
    /// Most focus queries extracted per visit.
    #[arg(long, global = true)]
    focus_cap: Option<usize>,
    /// Visits completed concurrently within one run.
    #[arg(long, global = true)]
    parallelism: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic cohort, its oracle, and a guideline corpus.
    Synth,
    /// Parse raw notes or admissions into the cohort interchange file.
    Ingest {
        /// SOAP note folder (soap flavor) or admissions JSON-lines file
        /// (diagnosis flavor).
        source: PathBuf,
        /// NDC-to-ATC mapping table; required for the diagnosis flavor.
        #[arg(long, value_name = "FILE")]
        mapping: Option<PathBuf>,
    },
    /// Build and persist a retrieval index.
    Index {
        /// dense | sparse | guideline
        kind: String,
    },
    /// Execute the configured method once per seed.
    Run,
    /// Score run manifests and emit JSON/CSV reports.
    Eval {
        /// Method whose manifests serve as the significance baseline.
        #[arg(long)]
        baseline: Option<String>,
    },
    /// Run and evaluate across one hyperparameter axis.
    Sweep {
        /// k | tau
        #[arg(long)]
        axis: String,
        /// Comma-separated values, e.g. 1,3,5,7
        #[arg(long)]
        values: String,
        /// Reuse sweep value directories that already exist.
        #[arg(long)]
        force: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = err.downcast_ref::<CliError>().map_or(1, CliError::exit_code);
            ExitCode::from(code)
        }
    }
}

fn parse_method(name: &str) -> Result<Method, CliError> {
    Method::parse(name).ok_or_else(|| {
        CliError::Usage(format!(
            "unknown method {name:?}; expected one of pace, zero_shot, guideline, treatrag, medreflect"
        ))
    })
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    let overrides = Overrides {
        seed: cli.common.seed,
        method: cli.common.method.clone(),
        backend_url: cli.common.backend_url.clone(),
        k: cli.common.k,
        tau: cli.common.tau,
        focus_cap: cli.common.focus_cap,
        parallelism: cli.common.parallelism,
    };
    let config = load_config(cli.common.config.as_deref(), &overrides)?;

    match cli.command {
        Command::Synth => {
            let artifacts = cmd_synth(&config)?;
            println!(
                "wrote {} patients to {} (sha256 {})",
                artifacts.patients,
                artifacts.cohort.display(),
                artifacts.cohort_sha256
            );
            println!("oracle: {}", artifacts.oracle.display());
            println!(
                "guidelines: {} documents in {}",
                artifacts.guideline_files,
                artifacts.guidelines.display()
            );
        }
        Command::Ingest { source, mapping } => {
            let report = cmd_ingest(&config, &source, mapping.as_deref())
                .with_context(|| format!("ingesting {}", source.display()))?;
            println!(
                "wrote {} patients / {} visits to {}",
                report.patients,
                report.visits,
                report.cohort.display()
            );
            if report.mapped_codes + report.unmapped_codes > 0 {
                println!(
                    "prescription codes: {} mapped, {} unmapped (see exclusions.json)",
                    report.mapped_codes, report.unmapped_codes
                );
            }
        }
        Command::Index { kind } => {
            let kind = IndexKind::parse(&kind)?;
            let artifacts = cmd_index(&config, kind)?;
            println!(
                "built {} index: {} entries -> {}",
                artifacts.kind.as_str(),
                artifacts.entries,
                artifacts.dir.display()
            );
        }
        Command::Run => {
            let artifacts = cmd_run(&config)?;
            for artifact in &artifacts {
                let s = &artifact.summary;
                println!(
                    "seed {}: {} visits ({} new, {} resumed), {} divergent, {} degenerate-empty -> {}",
                    artifact.seed,
                    s.total_targets,
                    s.newly_run,
                    s.resumed,
                    s.divergent_visits,
                    s.degenerate_empty,
                    s.manifest_path.display()
                );
            }
        }
        Command::Eval { baseline } => {
            let baseline = baseline.as_deref().map(parse_method).transpose()?;
            let artifacts = cmd_eval(&config, config.method, baseline)?;
            print!(
                "{}",
                pace::eval::metrics_csv(&report_rows(&artifacts.bundle.macro_eval))
            );
            for note in &artifacts.bundle.notes {
                println!("note: {note}");
            }
            println!("report: {}", artifacts.report_json.display());
        }
        Command::Sweep { axis, values, force } => {
            let spec = SweepSpec::parse(&axis, &values)?;
            let (rows, summary) = cmd_sweep(&config, &spec, force)?;
            for row in &rows {
                println!(
                    "{} = {}: precision {:.4}, recall {:.4}, f1 {:.4}, accuracy {:.4}",
                    row.axis, row.value, row.precision, row.recall, row.f1, row.accuracy
                );
            }
            println!("summary: {}", summary.display());
        }
    }
    Ok(())
}
