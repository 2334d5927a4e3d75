use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use crate::app::{App, AppConfig};
use xpflow_core::canonical::file_digest;
use xpflow_core::events::EventLog;
use xpflow_core::executor::{estimate_experiment_cost, ExecError, ExecOptions, Executor, ExperimentReport};
use xpflow_core::interaction::{NoResponder, Responder, ScriptedResponder};
use xpflow_core::knowledge::{recommend, train_embeddings, KgStore, LineageQuery, RecommendContext, Relation};
use xpflow_core::{check_semantics, parse_experiment, ExperimentSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID_SPEC: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_INFEASIBLE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "xp", version, about = "Declarative experiments over analytics workflows")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct StoreArg {
    /// Run store holding run directories and the knowledge repository.
    #[arg(long, default_value = ".xpflow")]
    store: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse and check an experiment file.
    Validate { file: PathBuf },
    /// Execute an experiment to completion.
    Run {
        file: PathBuf,
        /// JSON list of responses consumed by prompts in order.
        #[arg(long)]
        answers: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Where relative commands and datasets resolve; defaults to the file's directory.
        #[arg(long)]
        base_dir: Option<PathBuf>,
        #[arg(long, default_value = "anonymous")]
        user: String,
        /// Override every task's timeout, in seconds.
        #[arg(long)]
        task_timeout: Option<u64>,
        /// Skip configurations whose history is in the bottom half.
        #[arg(long)]
        prune_history: bool,
        /// Print the full report as JSON instead of a table.
        #[arg(long)]
        json: bool,
        #[command(flatten)]
        store: StoreArg,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value = ".")]
        base_dir: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long, default_value = "anonymous")]
        user: String,
        /// Seconds an open prompt waits for an answer.
        #[arg(long, default_value_t = 3600)]
        prompt_timeout: u64,
        #[command(flatten)]
        store: StoreArg,
    },
    /// Rank candidate tails for a relation from the knowledge graph.
    Recommend {
        #[arg(long)]
        relation: String,
        #[arg(long)]
        user: Option<String>,
        /// Dataset digest, or a path whose content digest is used.
        #[arg(long)]
        dataset: Option<String>,
        /// Intent id such as `maximize-accuracy`.
        #[arg(long)]
        intent: Option<String>,
        #[arg(short, long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        store: StoreArg,
    },
    /// List recorded runs by experiment, dataset digest or fingerprint.
    Lineage {
        #[arg(long, group = "key")]
        experiment: Option<String>,
        #[arg(long, group = "key")]
        dataset: Option<String>,
        #[arg(long, group = "key")]
        fingerprint: Option<String>,
        #[command(flatten)]
        store: StoreArg,
    },
    /// Predict the cost of an experiment from past runs.
    Estimate {
        file: PathBuf,
        #[command(flatten)]
        store: StoreArg,
    },
}

fn load(file: &Path) -> Result<ExperimentSpec, i32> {
    let source = std::fs::read_to_string(file).map_err(|e| {
        eprintln!("{}: {e}", file.display());
        EXIT_RUNTIME
    })?;
    let spec = parse_experiment(&source).map_err(|errors| {
        for e in errors {
            eprintln!("{}:{}:{}: {:?}: {}", file.display(), e.line, e.column, e.code, e.message);
        }
        EXIT_INVALID_SPEC
    })?;
    let report = check_semantics(&spec);
    if !report.is_ok() {
        for issue in &report.issues {
            eprintln!("{}: {issue}", file.display());
        }
        return Err(EXIT_INVALID_SPEC);
    }
    Ok(spec)
}

fn open_kr(store: &Path) -> Result<KgStore, i32> {
    KgStore::open(&store.join("kr")).map_err(|e| {
        eprintln!("knowledge repository: {e}");
        EXIT_RUNTIME
    })
}

fn print_json(v: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn print_report(report: &ExperimentReport) {
    println!("experiment {} ({:?})", report.experiment, report.status);
    for r in &report.runs {
        let metrics: Vec<String> = r.metrics.iter().map(|(k, v)| format!("{k}={v}")).collect();
        println!(
            "  #{:<3} {:<8} {:<5} {:<40} {}",
            r.configuration.ordinal,
            format!("{:?}", r.status).to_lowercase(),
            if r.cache_hit { "cache" } else { "" },
            r.configuration.label(),
            metrics.join(" ")
        );
    }
    match &report.winner {
        Some(w) => println!("winner #{} {} = {}", w.ordinal, w.configuration.label(), w.value),
        None => println!("no feasible configuration"),
    }
    println!(
        "processes {}  wall {:.2}s  interaction {:.1}/{:.1} min",
        report.spawned_processes, report.total_cost.wall_s, report.budget.used_min, report.budget.total_min
    );
}

#[allow(clippy::too_many_arguments)]
fn run(
    file: &Path,
    answers: Option<&Path>,
    seed: Option<u64>,
    workers: usize,
    base_dir: Option<PathBuf>,
    user: String,
    task_timeout: Option<u64>,
    prune_history: bool,
    json: bool,
    store: &Path,
) -> i32 {
    let spec = match load(file) {
        Ok(s) => s,
        Err(code) => return code,
    };
    let mut responder: Box<dyn Responder> = match answers {
        Some(path) => match ScriptedResponder::from_file(path) {
            Ok(r) => Box::new(r),
            Err(e) => {
                eprintln!("{}: {e}", path.display());
                return EXIT_RUNTIME;
            }
        },
        None => Box::new(NoResponder),
    };
    let base_dir = base_dir.unwrap_or_else(|| match file.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    });
    let mut options = ExecOptions::new(store, base_dir);
    options.seed = seed;
    options.workers = workers;
    options.user = user;
    options.task_timeout_s = task_timeout;
    options.prune_history = prune_history;
    let mut kr = match open_kr(store) {
        Ok(kr) => kr,
        Err(code) => return code,
    };
    let events_path = store.join("runs").join(&spec.name).join("events.ndjson");
    let _ = std::fs::remove_file(&events_path);
    let events = match EventLog::with_file(&events_path) {
        Ok(e) => e,
        Err(e) => {
            eprintln!("{}: {e}", events_path.display());
            return EXIT_RUNTIME;
        }
    };
    match Executor::new(options).run_experiment(&spec, &mut kr, responder.as_mut(), &events) {
        Ok(report) => {
            if json {
                print_json(&report);
            } else {
                print_report(&report);
            }
            if report.winner.is_some() {
                EXIT_OK
            } else {
                EXIT_INFEASIBLE
            }
        }
        Err(ExecError::InvalidSpec(msg)) => {
            eprintln!("{msg}");
            EXIT_INVALID_SPEC
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn serve(config: AppConfig, host: &str, port: u16) -> i32 {
    let app = match App::start(config) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("cannot open store: {e}");
            return EXIT_RUNTIME;
        }
    };
    let runtime = tokio::runtime::Runtime::new().expect("tokio runtime");
    let result = runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind((host, port)).await?;
        tracing::info!("listening on {}", listener.local_addr()?);
        axum::serve(listener, crate::router(app)).await
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("server: {e}");
            EXIT_RUNTIME
        }
    }
}

fn dataset_id(d: String) -> String {
    let p = Path::new(&d);
    if p.is_file() {
        file_digest(p).unwrap_or(d)
    } else {
        d
    }
}

/// Run the command line and return the process exit code.
pub fn main_with(cli: Cli) -> i32 {
    match cli.command {
        Command::Validate { file } => match load(&file) {
            Ok(spec) => {
                println!("{}: ok ({} configurations)", file.display(), spec.space_size());
                EXIT_OK
            }
            Err(code) => code,
        },
        Command::Run {
            file,
            answers,
            seed,
            workers,
            base_dir,
            user,
            task_timeout,
            prune_history,
            json,
            store,
        } => run(
            &file,
            answers.as_deref(),
            seed,
            workers,
            base_dir,
            user,
            task_timeout,
            prune_history,
            json,
            &store.store,
        ),
        Command::Serve {
            port,
            host,
            base_dir,
            workers,
            user,
            prompt_timeout,
            store,
        } => {
            let mut config = AppConfig::new(store.store, base_dir);
            config.workers = workers;
            config.user = user;
            config.prompt_timeout = Duration::from_secs(prompt_timeout);
            serve(config, &host, port)
        }
        Command::Recommend {
            relation,
            user,
            dataset,
            intent,
            k,
            seed,
            store,
        } => {
            let Some(relation) = Relation::parse(&relation) else {
                eprintln!("unknown relation `{relation}`");
                return EXIT_RUNTIME;
            };
            let kr = match open_kr(&store.store) {
                Ok(kr) => kr,
                Err(code) => return code,
            };
            let ctx = RecommendContext {
                user,
                dataset: dataset.map(dataset_id),
                intent,
            };
            let result = train_embeddings(kr.state(), seed).and_then(|t| recommend(&t, kr.state(), &ctx, relation, k));
            match result {
                Ok(recs) => {
                    print_json(&recs);
                    EXIT_OK
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    EXIT_RUNTIME
                }
            }
        }
        Command::Lineage {
            experiment,
            dataset,
            fingerprint,
            store,
        } => {
            let query = match (experiment, dataset, fingerprint) {
                (Some(e), _, _) => LineageQuery::Experiment(e),
                (_, Some(d), _) => LineageQuery::Dataset(dataset_id(d)),
                (_, _, Some(f)) => LineageQuery::Fingerprint(f),
                _ => {
                    eprintln!("give one of --experiment, --dataset or --fingerprint");
                    return EXIT_RUNTIME;
                }
            };
            match open_kr(&store.store) {
                Ok(kr) => {
                    print_json(&kr.lineage(&query));
                    EXIT_OK
                }
                Err(code) => code,
            }
        }
        Command::Estimate { file, store } => {
            let spec = match load(&file) {
                Ok(s) => s,
                Err(code) => return code,
            };
            let kr = match open_kr(&store.store) {
                Ok(kr) => kr,
                Err(code) => return code,
            };
            match estimate_experiment_cost(&spec, &kr) {
                Ok(est) => {
                    print_json(&est);
                    EXIT_OK
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    EXIT_RUNTIME
                }
            }
        }
    }
}
