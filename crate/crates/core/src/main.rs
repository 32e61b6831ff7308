use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use icl_core::backend::{Fixture, MockServer};
use icl_core::config::{ConfigError, RunConfig};
use icl_core::dataset::load_dataset_in;
use icl_core::evaluator::EvaluatorSpec;
use icl_core::pipeline::{eval_only, read_predictions, read_references, retrieve_only, run_pipeline, PipelineError, RunOptions};

#[derive(Parser)]
#[command(name = "icl", version, about = "In-context learning pipeline runner")]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's cache_dir.
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    /// Overrides the config's output_dir.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Overrides the backend's max_concurrency.
    #[arg(long, global = true)]
    concurrency: Option<usize>,
    /// Disables the response and embedding caches.
    #[arg(long, global = true)]
    no_cache: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Accuracy,
    Bleu,
    NumericAccuracy,
}

#[derive(Subcommand)]
enum Command {
    /// Retrieve, infer, evaluate and write all artifacts.
    Run {
        /// Reuse a contexts file from `retrieve` instead of retrieving again.
        #[arg(long)]
        contexts: Option<PathBuf>,
    },
    /// Run only the retrieval stage and write contexts.jsonl.
    Retrieve,
    /// Score an existing predictions file.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        /// `{test_id, reference}` records; defaults to the config's test split.
        #[arg(long)]
        references: Option<PathBuf>,
        /// Defaults to the config's evaluator, or accuracy without a config.
        #[arg(long, value_enum)]
        metric: Option<Metric>,
    },
    /// Serve the mock model over HTTP until interrupted.
    ServeMock {
        #[arg(long)]
        fixture: Option<PathBuf>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
}

fn fail(code: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code)
}

fn load_config(path: Option<&Path>) -> Result<(RunConfig, PathBuf), ConfigError> {
    let path = path.ok_or_else(|| ConfigError::new("", "--config is required"))?;
    RunConfig::load(path)
}

fn pipeline_exit(e: PipelineError) -> ExitCode {
    fail(e.exit_code() as u8, e)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let opts = RunOptions {
        cache_dir: cli.cache_dir.clone(),
        output_dir: cli.output_dir.clone(),
        concurrency: cli.concurrency,
        no_cache: cli.no_cache,
        contexts: None,
    };
    if cli.concurrency == Some(0) {
        return fail(1, "--concurrency must be at least 1");
    }

    match cli.command {
        Command::Run { contexts } => {
            let (config, base) = match load_config(cli.config.as_deref()) {
                Ok(c) => c,
                Err(e) => return fail(1, e),
            };
            let opts = RunOptions { contexts, ..opts };
            match run_pipeline(&config, &base, &opts) {
                Ok(a) => {
                    println!(
                        "{} = {:.4} (n={}, failed={}, backend requests={}, cache hit rate={:.2})",
                        a.metrics.metric,
                        a.metrics.value,
                        a.manifest.n_test,
                        a.manifest.n_failed,
                        a.manifest.backend_requests,
                        a.manifest.cache_hit_rate
                    );
                    println!("artifacts: {}", a.output_dir.display());
                    if a.manifest.n_test > 0 && a.manifest.n_failed == a.manifest.n_test {
                        let why = a.predictions.iter().find_map(|p| p.error.clone()).unwrap_or_default();
                        return fail(2, format!("every prediction failed: {why}"));
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => pipeline_exit(e),
            }
        }
        Command::Retrieve => {
            let (config, base) = match load_config(cli.config.as_deref()) {
                Ok(c) => c,
                Err(e) => return fail(1, e),
            };
            match retrieve_only(&config, &base, &opts) {
                Ok((path, _)) => {
                    println!("{}", path.display());
                    ExitCode::SUCCESS
                }
                Err(e) => pipeline_exit(e),
            }
        }
        Command::Eval { predictions, references, metric } => {
            let config = match &cli.config {
                Some(p) => match RunConfig::load(p) {
                    Ok(c) => Some(c),
                    Err(e) => return fail(1, e),
                },
                None => None,
            };
            let refs = match (&references, &config) {
                (Some(path), _) => read_references(path),
                (None, Some((c, base))) => load_dataset_in(&c.dataset, base).map(|d| d.references()).map_err(Into::into),
                (None, None) => return fail(1, "eval needs --references or --config"),
            };
            let refs = match refs {
                Ok(r) => r,
                Err(e) => return pipeline_exit(e),
            };
            let evaluator = match (metric, &config) {
                (Some(Metric::Accuracy), _) => EvaluatorSpec::Accuracy { normalize: true },
                (Some(Metric::Bleu), _) => EvaluatorSpec::Bleu { max_n: 4, smoothing: false },
                (Some(Metric::NumericAccuracy), _) => EvaluatorSpec::NumericAccuracy,
                (None, Some((c, _))) => c.evaluator.clone(),
                (None, None) => EvaluatorSpec::default(),
            };
            let result = read_predictions(&predictions).and_then(|p| eval_only(&p, &refs, &evaluator));
            match result {
                Ok(report) => {
                    let summary = serde_json::json!({
                        "metric": report.metric,
                        "value": report.value,
                        "n_scored": report.n_scored,
                        "n_failed": report.n_failed,
                    });
                    println!("{summary}");
                    ExitCode::SUCCESS
                }
                Err(e) => pipeline_exit(e),
            }
        }
        Command::ServeMock { fixture, port } => {
            let fixture = match fixture {
                Some(p) => match Fixture::load(&p) {
                    Ok(f) => f,
                    Err(e) => return fail(1, e),
                },
                None => Fixture::default(),
            };
            match MockServer::start(fixture, port) {
                Ok(server) => {
                    println!("{}", server.base_url());
                    server.join();
                    ExitCode::SUCCESS
                }
                Err(e) => fail(2, e),
            }
        }
    }
}
