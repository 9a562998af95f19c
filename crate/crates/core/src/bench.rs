//! Seed sweeps per task and condition, persisted as one JSONL log per
//! episode, with aggregate success, step and replan metrics.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{BackendError, BackendSpec};
use crate::dialog::{
    metrics_from_events, parse_jsonl, run_episode, EpisodeConfig, EpisodeMetrics, Event, EventSink, ProtocolParams,
    Team, TeamMode,
};
use crate::world::TaskId;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("no episodes to aggregate")]
    Empty,
    #[error("unknown condition `{0}`")]
    UnknownCondition(String),
    #[error("bench configuration: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Dialog,
    NoHistory,
    NoFeedback,
    Central,
}

impl Condition {
    pub const ALL: [Condition; 4] = [Condition::Dialog, Condition::NoHistory, Condition::NoFeedback, Condition::Central];

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Dialog => "dialog",
            Condition::NoHistory => "no_history",
            Condition::NoFeedback => "no_feedback",
            Condition::Central => "central",
        }
    }

    pub fn mode(self) -> TeamMode {
        match self {
            Condition::Central => TeamMode::Central,
            _ => TeamMode::Dialog,
        }
    }

    /// Base parameters with this condition's ablation flags applied.
    pub fn params(self, base: &ProtocolParams) -> ProtocolParams {
        ProtocolParams {
            no_history: self == Condition::NoHistory,
            no_feedback: self == Condition::NoFeedback,
            ..base.clone()
        }
    }
}

impl FromStr for Condition {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Condition::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| BenchError::UnknownCondition(s.into()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub task: TaskId,
    pub condition: Condition,
    pub seeds: Vec<u64>,
    pub params: ProtocolParams,
    /// Backend for every seat.
    pub backend: BackendSpec,
    /// Results root; `None` keeps logs in memory only.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

fn default_workers() -> usize {
    4
}

impl BenchConfig {
    pub fn new(task: TaskId, condition: Condition, seeds: impl IntoIterator<Item = u64>, backend: BackendSpec) -> Self {
        Self {
            task,
            condition,
            seeds: seeds.into_iter().collect(),
            params: ProtocolParams::for_task(task),
            backend,
            out_dir: None,
            workers: default_workers(),
        }
    }

    pub fn with_out_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.out_dir = Some(dir.into());
        self
    }

    pub fn episode_dir(&self) -> Option<PathBuf> {
        self.out_dir.as_ref().map(|d| d.join(self.task.as_str()).join(self.condition.as_str()))
    }
}

/// One seed's outcome. Episodes that could not run carry `error` and no log.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchEpisode {
    pub seed: u64,
    pub events: Vec<Event>,
    pub metrics: Option<EpisodeMetrics>,
    pub error: Option<String>,
    /// Loaded from disk instead of executed.
    pub resumed: bool,
}

pub fn episode_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("{seed}.jsonl"))
}

/// Appends each event to `<seed>.jsonl.partial` as it is produced.
struct FileSink {
    out: BufWriter<File>,
    failed: Option<std::io::Error>,
}

impl EventSink for FileSink {
    fn on_event(&mut self, event: &Event) {
        if self.failed.is_some() {
            return;
        }
        let line = serde_json::to_string(event).expect("events serialize");
        if let Err(e) = writeln!(self.out, "{line}").and_then(|_| self.out.flush()) {
            self.failed = Some(e);
        }
    }
}

/// A finished log on disk, if present and complete.
fn load_finished(path: &Path) -> Option<Vec<Event>> {
    let text = fs::read_to_string(path).ok()?;
    let events = parse_jsonl(&text).ok()?;
    events.iter().any(|e| e.kind == "metrics").then_some(events)
}

fn run_one(config: &BenchConfig, seed: u64) -> BenchEpisode {
    let dir = config.episode_dir();
    if let Some(events) = dir.as_ref().and_then(|d| load_finished(&episode_path(d, seed))) {
        let metrics = metrics_from_events(&events);
        return BenchEpisode { seed, events, metrics: Some(metrics), error: None, resumed: true };
    }
    let failed = |error: String| BenchEpisode { seed, events: vec![], metrics: None, error: Some(error), resumed: false };
    let mode = config.condition.mode();
    let mut team = match Team::uniform(config.task, mode, &config.backend) {
        Ok(t) => t,
        Err(e) => return failed(e.to_string()),
    };
    let episode = EpisodeConfig { task: config.task, mode, params: config.condition.params(&config.params), seed };
    let result = match &dir {
        Some(d) => {
            let partial = d.join(format!("{seed}.jsonl.partial"));
            let file = match File::create(&partial) {
                Ok(f) => f,
                Err(e) => return failed(e.to_string()),
            };
            let mut sink = FileSink { out: BufWriter::new(file), failed: None };
            let log = run_episode(&episode, &mut team, &mut sink);
            match (log, sink.failed) {
                (Ok(_), Some(e)) => return failed(e.to_string()),
                (Ok(log), None) => fs::rename(&partial, episode_path(d, seed)).map(|_| log).map_err(|e| e.to_string()),
                (Err(e), _) => Err(e.to_string()),
            }
        }
        None => run_episode(&episode, &mut team, &mut crate::dialog::NullSink).map_err(|e| e.to_string()),
    };
    match result {
        Ok(log) => BenchEpisode { seed, events: log.events, metrics: Some(log.metrics), error: None, resumed: false },
        Err(e) => failed(e),
    }
}

/// Runs every seed on a bounded pool. Seeds with a finished log on disk are
/// loaded, not rerun. Results come back in seed order.
pub fn run_bench(config: &BenchConfig) -> Result<Vec<BenchEpisode>, BenchError> {
    if config.workers == 0 {
        return Err(BenchError::Config("workers must be at least 1".into()));
    }
    config.backend.build(None).map_err(|e: BackendError| BenchError::Config(e.to_string()))?;
    if let Some(d) = config.episode_dir() {
        fs::create_dir_all(d)?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| BenchError::Config(e.to_string()))?;
    Ok(pool.install(|| config.seeds.par_iter().map(|&s| run_one(config, s)).collect()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    /// Sample standard error of the success indicator.
    pub stderr: f64,
    /// Over successful episodes; `None` when there are none.
    pub mean_steps: Option<f64>,
    /// Over all episodes.
    pub mean_replans: f64,
}

pub fn aggregate(episodes: &[EpisodeMetrics]) -> Result<Metrics, BenchError> {
    if episodes.is_empty() {
        return Err(BenchError::Empty);
    }
    let n = episodes.len();
    let successes = episodes.iter().filter(|m| m.success).count();
    let p = successes as f64 / n as f64;
    let stderr = if n > 1 {
        let var = episodes.iter().map(|m| (f64::from(u8::from(m.success)) - p).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        0.0
    };
    let mean_steps = (successes > 0).then(|| {
        episodes.iter().filter(|m| m.success).map(|m| m.steps as f64).sum::<f64>() / successes as f64
    });
    let mean_replans = episodes.iter().map(|m| m.mean_replans).sum::<f64>() / n as f64;
    Ok(Metrics { episodes: n, successes, success_rate: p, stderr, mean_steps, mean_replans })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub task: String,
    pub condition: String,
    pub episodes: usize,
    pub success_rate: f64,
    pub stderr: f64,
    pub mean_steps: Option<f64>,
    pub mean_replans: f64,
}

/// Reads every finished `<task>/<condition>/<seed>.jsonl` under `root`.
pub fn read_results(root: &Path) -> Result<Vec<(String, String, Vec<Vec<Event>>)>, BenchError> {
    let mut groups = Vec::new();
    for task in sorted_dirs(root)? {
        for cond in sorted_dirs(&task)? {
            let mut logs: Vec<(u64, Vec<Event>)> = Vec::new();
            for entry in fs::read_dir(&cond)? {
                let path = entry?.path();
                let seed = path
                    .file_name()
                    .and_then(|n| n.to_str())
                    .and_then(|n| n.strip_suffix(".jsonl"))
                    .and_then(|s| s.parse().ok());
                if let (Some(seed), Some(events)) = (seed, load_finished(&path)) {
                    logs.push((seed, events));
                }
            }
            if logs.is_empty() {
                continue;
            }
            logs.sort_by_key(|(s, _)| *s);
            groups.push((dir_name(&task), dir_name(&cond), logs.into_iter().map(|(_, e)| e).collect()));
        }
    }
    Ok(groups)
}

fn dir_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn sorted_dirs(p: &Path) -> Result<Vec<PathBuf>, BenchError> {
    let mut out: Vec<PathBuf> = fs::read_dir(p)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    out.sort();
    Ok(out)
}

/// Recomputes one row per task and condition from the raw logs.
pub fn summarize(root: &Path) -> Result<Vec<SummaryRow>, BenchError> {
    read_results(root)?
        .into_iter()
        .map(|(task, condition, logs)| {
            let metrics: Vec<EpisodeMetrics> = logs.iter().map(|e| metrics_from_events(e)).collect();
            let m = aggregate(&metrics)?;
            Ok(SummaryRow {
                task,
                condition,
                episodes: m.episodes,
                success_rate: m.success_rate,
                stderr: m.stderr,
                mean_steps: m.mean_steps,
                mean_replans: m.mean_replans,
            })
        })
        .collect()
}

/// Writes `summary.csv` under `root` and returns its rows.
pub fn write_summary(root: &Path) -> Result<Vec<SummaryRow>, BenchError> {
    let rows = summarize(root)?;
    let mut w = csv::Writer::from_path(root.join("summary.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(rows)
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>, BenchError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}
