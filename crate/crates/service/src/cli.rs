use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use tabletalk_core::agents::BackendSpec;
use tabletalk_core::bench::{run_bench, write_summary, BenchConfig, BenchError, Condition};
use tabletalk_core::dialog::{run_episode, EpisodeConfig, Event, EventSink, Seat, Team};
use tabletalk_core::gridpath::{feedback_text, run_grid_attempts_with, validate_paths, GridInstance, MultiPath};
use tabletalk_core::planner::{comparison_csv, median, pick_scenarios, place_scenarios, run_method, Method};
use tabletalk_core::world::TaskId;
use thiserror::Error;

use crate::api::{router, AppState};
use crate::config::{EpisodeSpec, TaskKind};
use crate::ServiceError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error("{0}")]
    Run(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Parser)]
#[command(name = "tabletalk", version, about = "Multi-arm dialog episodes, benchmarks and the live episode server")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one episode from a JSON config and print its metrics.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Write the event log here as JSONL.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Run seeded episodes and write `<results>/summary.csv`.
    Bench {
        #[arg(long)]
        task: TaskId,
        #[arg(long, default_value = "dialog")]
        condition: Condition,
        #[arg(long, default_value_t = 20)]
        episodes: u64,
        #[arg(long, default_value_t = 0)]
        first_seed: u64,
        /// Scripted policy for every seat, e.g. `oracle` or `fuzzer:7`.
        #[arg(long, default_value = "oracle", conflicts_with = "backend")]
        policy: String,
        /// JSON backend spec for every seat, e.g. a chat_http endpoint.
        #[arg(long)]
        backend: Option<PathBuf>,
        #[arg(long, default_value = "results")]
        results: PathBuf,
        #[arg(long, default_value_t = 4)]
        workers: usize,
    },
    /// Grid path-planning utilities.
    Grid {
        #[command(subcommand)]
        command: GridCommand,
    },
    /// Serve the episode API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Directory of built UI assets to serve at `/`.
        #[arg(long)]
        assets: Option<PathBuf>,
        #[arg(long, default_value = "results/live")]
        log_dir: PathBuf,
    },
    /// Compare motion planning methods on seeded two-arm scenarios and write a CSV.
    PlannerReport {
        #[arg(long, value_enum, default_value = "place")]
        kind: ScenarioKind,
        #[arg(long, default_value_t = 20)]
        scenarios: u64,
        #[arg(long, default_value_t = tabletalk_core::planner::DEFAULT_ITERATION_BUDGET)]
        budget: usize,
        #[arg(long, default_value = "planner_report.csv")]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum GridCommand {
    /// Print validator feedback for a plan; exits 1 when the plan has violations.
    Validate {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        paths: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ScenarioKind {
    Place,
    Pick,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Run(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Run(format!("{}: {e}", path.display())))
}

struct JsonlSink(Option<std::fs::File>);

impl EventSink for JsonlSink {
    fn on_event(&mut self, event: &Event) {
        use std::io::Write;
        if let Some(f) = &mut self.0 {
            let _ = writeln!(f, "{}", serde_json::to_string(event).expect("events serialize"));
        }
    }
}

/// Validates a grid plan. Returns the feedback text and whether it passed.
pub fn grid_validate(grid: &GridInstance, paths: &MultiPath) -> (String, bool) {
    let report = validate_paths(grid, paths);
    if report.is_valid() {
        ("PASSED".to_string(), true)
    } else {
        (feedback_text(&report), false)
    }
}

/// Runs a headless episode. Human seats are rejected: use `serve`.
pub fn run_config(spec: &EpisodeSpec, log: Option<&Path>) -> Result<serde_json::Value, CliError> {
    spec.validate()?;
    if spec.backends.values().any(BackendSpec::is_human) {
        return Err(CliError::Run("human seats need a live session; use `serve`".into()));
    }
    let mut seats = Vec::new();
    for name in spec.roster() {
        let backend = spec.backends[&name].build(None).map_err(|e| CliError::Run(e.to_string()))?;
        seats.push(Seat { name, backend });
    }
    let mut sink = JsonlSink(log.map(std::fs::File::create).transpose()?);
    match spec.task {
        TaskKind::Grid => {
            let instance = spec.grid_instance()?;
            let out = run_grid_attempts_with(&instance, seats[0].backend.as_mut(), spec.params().max_attempts(), &mut sink)
                .map_err(|e| CliError::Run(e.to_string()))?;
            Ok(serde_json::json!({ "success": out.success, "attempts": out.attempts.len() }))
        }
        TaskKind::Arm(task) => {
            let config = EpisodeConfig { task, mode: spec.mode, params: spec.params(), seed: spec.seed };
            let mut team = Team { mode: spec.mode, seats };
            let log = run_episode(&config, &mut team, &mut sink).map_err(|e| CliError::Run(e.to_string()))?;
            Ok(serde_json::to_value(&log.metrics).expect("metrics serialize"))
        }
    }
}

/// Executes a command and returns the process exit code.
pub fn execute(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::Run { config, log } => {
            let spec = EpisodeSpec::from_file(&config)?;
            println!("{}", run_config(&spec, log.as_deref())?);
            Ok(0)
        }
        Command::Bench { task, condition, episodes, first_seed, policy, backend, results, workers } => {
            let backend = match backend {
                Some(p) => read_json(&p)?,
                None => BackendSpec::scripted(&policy),
            };
            let mut config = BenchConfig::new(task, condition, first_seed..first_seed + episodes, backend).with_out_dir(&results);
            config.workers = workers;
            let eps = run_bench(&config)?;
            for e in eps.iter().filter(|e| e.error.is_some()) {
                eprintln!("seed {}: {}", e.seed, e.error.as_deref().unwrap_or_default());
            }
            for r in write_summary(&results)? {
                let steps = r.mean_steps.map_or("-".to_string(), |s| format!("{s:.2}"));
                println!(
                    "{} {} n={} success={:.2}±{:.2} steps={} replans={:.2}",
                    r.task, r.condition, r.episodes, r.success_rate, r.stderr, steps, r.mean_replans
                );
            }
            Ok(0)
        }
        Command::Grid { command: GridCommand::Validate { grid, paths } } => {
            let grid: GridInstance = read_json(&grid)?;
            let paths: MultiPath = read_json(&paths)?;
            let (text, ok) = grid_validate(&grid, &paths);
            println!("{text}");
            Ok(if ok { 0 } else { 1 })
        }
        Command::Serve { port, host, assets, log_dir } => {
            let addr: SocketAddr = format!("{host}:{port}").parse().map_err(|e| CliError::Run(format!("{host}:{port}: {e}")))?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind(addr).await?;
                eprintln!("listening on http://{}", listener.local_addr()?);
                axum::serve(listener, router(AppState::new(Some(log_dir)), assets)).await
            })?;
            Ok(0)
        }
        Command::PlannerReport { kind, scenarios, budget, out } => {
            let set = match kind {
                ScenarioKind::Place => place_scenarios(0..scenarios),
                ScenarioKind::Pick => pick_scenarios(0..scenarios),
            };
            let mut rows = Vec::new();
            for s in &set {
                for m in Method::ALL {
                    rows.push(run_method(s, m, budget));
                }
            }
            std::fs::write(&out, comparison_csv(&rows))?;
            for m in Method::ALL {
                let of: Vec<_> = rows.iter().filter(|r| r.method == m).collect();
                let ok = of.iter().filter(|r| r.success).count();
                let mut nodes: Vec<usize> = of.iter().map(|r| r.nodes).collect();
                println!("{:<10} success {}/{} median nodes {}", m.as_str(), ok, of.len(), median(&mut nodes));
            }
            Ok(0)
        }
    }
}
