//! Turn-taking orchestration: round-robin speaking order, proposal
//! eligibility, the per-round replan loop with validation feedback and the
//! episode loop that executes validated plans.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::agents::{dialog_turn, AgentKind, Backend, BackendError, BackendSpec};
use crate::plan::{render_feedback, validate_text, Feedback, FeedbackDetail, ValidatedPlan};
use crate::planner::{plan_rrt_connect, problem_for_plan, shortcut, Trajectory};
use crate::world::{apply, reset, Scene, TaskId};

pub const DEFAULT_K: usize = 5;
pub const SHORTCUT_ATTEMPTS: usize = 200;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolParams {
    /// Validation attempts per round.
    pub k: usize,
    /// Messages per dialog; `None` means twice the roster size.
    #[serde(default)]
    pub m: Option<usize>,
    /// Episode horizon in rounds.
    pub t: usize,
    #[serde(default)]
    pub no_history: bool,
    #[serde(default)]
    pub no_feedback: bool,
}

impl Default for ProtocolParams {
    fn default() -> Self {
        Self { k: DEFAULT_K, m: None, t: 15, no_history: false, no_feedback: false }
    }
}

impl ProtocolParams {
    pub fn for_task(task: TaskId) -> Self {
        Self { t: task.spec().default_horizon, ..Self::default() }
    }

    /// Without feedback there is nothing to replan from, so one attempt per round.
    pub fn max_attempts(&self) -> usize {
        if self.no_feedback {
            1
        } else {
            self.k
        }
    }

    pub fn horizon(&self) -> usize {
        if self.no_feedback {
            2 * self.t
        } else {
            self.t
        }
    }

    pub fn max_messages(&self, roster_len: usize) -> usize {
        self.m.unwrap_or(2 * roster_len)
    }

    pub fn check(&self, roster_len: usize) -> Result<(), DialogError> {
        if self.k == 0 {
            return Err(DialogError::InvalidParams("K must be at least 1".into()));
        }
        if self.max_messages(roster_len) < roster_len {
            return Err(DialogError::InvalidParams(format!(
                "M = {} is smaller than the roster ({roster_len})",
                self.max_messages(roster_len)
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DialogError {
    #[error("{agent} spoke out of turn, expected {expected}")]
    OutOfTurn { agent: String, expected: String },
    #[error("invalid protocol parameters: {0}")]
    InvalidParams(String),
    #[error("invalid roster: {0}")]
    InvalidRoster(String),
    #[error("malformed log: {0}")]
    MalformedLog(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub speaker: String,
    pub text: String,
}

/// A proposal attempt that did not execute, with the transcript that led to it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailedAttempt {
    pub transcript: Vec<Message>,
    pub proposal: Option<String>,
    pub feedback: Feedback,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub round: usize,
    pub transcript: Vec<Message>,
    /// Canonical text of the executed plan, if any.
    pub executed: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DialogState {
    pub round: usize,
    /// Index of the current dialog within the round.
    pub attempt: usize,
    pub messages: Vec<Message>,
    pub spoken: BTreeSet<String>,
    pub feedback: Vec<FailedAttempt>,
    pub history: Vec<HistoryEntry>,
    /// Protocol reminders owed to agents on their next turn.
    pub reminders: BTreeMap<String, String>,
    pub max_messages: usize,
}

impl DialogState {
    pub fn new(max_messages: usize) -> Self {
        Self {
            round: 0,
            attempt: 0,
            messages: vec![],
            spoken: BTreeSet::new(),
            feedback: vec![],
            history: vec![],
            reminders: BTreeMap::new(),
            max_messages,
        }
    }

    pub fn start_round(&mut self, round: usize) {
        self.round = round;
        self.attempt = 0;
        self.feedback.clear();
        self.clear_dialog();
    }

    pub fn start_dialog(&mut self) {
        self.attempt = self.feedback.len();
        self.clear_dialog();
    }

    fn clear_dialog(&mut self) {
        self.messages.clear();
        self.spoken.clear();
        self.reminders.clear();
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    PrematureProposal,
    DialogOverflow,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Ingest {
    Continue,
    ProposalReady(String),
    Violation(ViolationKind),
}

pub const PREMATURE_REMINDER: &str =
    "Reminder: a final plan starting with EXECUTE is only accepted after every robot has spoken in the current chat.";

/// Round-robin in roster order, resuming after the last speaker.
pub fn next_speaker<'a>(state: &DialogState, roster: &'a [String]) -> &'a str {
    let next = match state.messages.last() {
        None => 0,
        Some(m) => roster.iter().position(|r| *r == m.speaker).map_or(0, |i| (i + 1) % roster.len()),
    };
    &roster[next]
}

pub fn is_proposal(text: &str) -> bool {
    text.lines().any(|l| l.trim_start().starts_with("EXECUTE"))
}

/// Records one message and classifies it.
pub fn ingest_response(state: &mut DialogState, roster: &[String], agent: &str, text: &str) -> Result<Ingest, DialogError> {
    let expected = next_speaker(state, roster);
    if agent != expected {
        return Err(DialogError::OutOfTurn { agent: agent.into(), expected: expected.into() });
    }
    state.messages.push(Message { speaker: agent.into(), text: text.into() });
    state.spoken.insert(agent.into());
    let proposal = is_proposal(text);
    let everyone = roster.iter().all(|r| state.spoken.contains(r));
    Ok(if proposal && everyone {
        Ingest::ProposalReady(text.into())
    } else if state.messages.len() >= state.max_messages {
        Ingest::Violation(ViolationKind::DialogOverflow)
    } else if proposal {
        state.reminders.insert(agent.into(), PREMATURE_REMINDER.into());
        Ingest::Violation(ViolationKind::PrematureProposal)
    } else {
        Ingest::Continue
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum EpisodeStatus {
    AwaitingAgent { name: String },
    AwaitingHuman { name: String },
    Planning,
    Executing,
    Done { success: bool },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    /// 1-based, gap-free.
    pub index: usize,
    pub round: usize,
    /// Logical clock: agent responses received so far.
    pub timestamp: u64,
    #[serde(rename = "type")]
    pub kind: String,
    pub payload: Value,
}

/// Receives events and status changes as they happen.
pub trait EventSink {
    fn on_event(&mut self, event: &Event);
    fn on_status(&mut self, _status: &EpisodeStatus) {}
}

pub struct NullSink;

impl EventSink for NullSink {
    fn on_event(&mut self, _event: &Event) {}
}

/// Numbers events, keeps them, and forwards them to a sink.
pub struct Recorder<'a> {
    pub events: Vec<Event>,
    clock: u64,
    sink: &'a mut dyn EventSink,
}

impl<'a> Recorder<'a> {
    pub fn new(sink: &'a mut dyn EventSink) -> Self {
        Self { events: vec![], clock: 0, sink }
    }

    pub fn emit(&mut self, kind: &str, round: usize, payload: Value) {
        let e = Event { index: self.events.len() + 1, round, timestamp: self.clock, kind: kind.into(), payload };
        self.sink.on_event(&e);
        self.events.push(e);
    }

    pub fn tick(&mut self) {
        self.clock += 1;
    }

    pub fn status(&mut self, s: EpisodeStatus) {
        self.sink.on_status(&s);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeamMode {
    /// One agent per robot, talking in turns.
    Dialog,
    /// A single planner with full observation proposing for every robot.
    Central,
}

pub const CENTRAL_PLANNER: &str = "Planner";

pub struct Seat {
    pub name: String,
    pub backend: Box<dyn Backend>,
}

pub struct Team {
    pub mode: TeamMode,
    pub seats: Vec<Seat>,
}

impl Team {
    /// Every seat runs the same backend spec.
    pub fn uniform(task: TaskId, mode: TeamMode, spec: &BackendSpec) -> Result<Self, BackendError> {
        let names = match mode {
            TeamMode::Dialog => task.spec().agents,
            TeamMode::Central => vec![CENTRAL_PLANNER.to_string()],
        };
        let seats = names
            .into_iter()
            .map(|name| Ok(Seat { name, backend: spec.build(None)? }))
            .collect::<Result<_, BackendError>>()?;
        Ok(Self { mode, seats })
    }

    pub fn roster(&self) -> Vec<String> {
        self.seats.iter().map(|s| s.name.clone()).collect()
    }

    pub fn kind(&self) -> AgentKind {
        match self.mode {
            TeamMode::Dialog => AgentKind::Robot,
            TeamMode::Central => AgentKind::CentralPlanner,
        }
    }

    /// Roster must be the task's robots in task order, or the lone planner.
    pub fn check(&self, task: TaskId) -> Result<(), DialogError> {
        let roster = self.roster();
        let expected = match self.mode {
            TeamMode::Dialog => task.spec().agents,
            TeamMode::Central => vec![CENTRAL_PLANNER.to_string()],
        };
        if roster != expected {
            return Err(DialogError::InvalidRoster(format!("expected {expected:?}, got {roster:?}")));
        }
        if self.seats.iter().filter(|s| s.backend.is_human()).count() > 1 {
            return Err(DialogError::InvalidRoster("at most one human agent".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum RoundResult {
    Executed { plan: Box<ValidatedPlan>, trajectory: Trajectory<f64> },
    ReplanExhausted,
    ProtocolTimeout { error: BackendError },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundOutcome {
    pub result: RoundResult,
    pub feedback: Vec<FailedAttempt>,
    /// Transcript of the last dialog in the round.
    pub transcript: Vec<Message>,
}

impl RoundOutcome {
    /// Validation attempts that reached a verdict this round.
    pub fn attempts(&self) -> usize {
        self.feedback.len() + usize::from(matches!(self.result, RoundResult::Executed { .. }))
    }
}

fn planner_seed(scene: &Scene, attempt: usize) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    (scene.rng_seed, scene.round_index, attempt, "motion").hash(&mut h);
    h.finish()
}

/// One environment round: dialogs, proposals and validation until a plan
/// executes or the attempt budget runs out.
pub fn run_round(
    scene: &Scene,
    team: &mut Team,
    params: &ProtocolParams,
    state: &mut DialogState,
    rec: &mut Recorder<'_>,
) -> RoundOutcome {
    let roster = team.roster();
    let round = state.round;
    let kind = team.kind();
    let outcome = |state: &DialogState, result| RoundOutcome {
        result,
        feedback: state.feedback.clone(),
        transcript: state.messages.clone(),
    };
    while state.feedback.len() < params.max_attempts() {
        state.start_dialog();
        let attempt = state.attempt;
        let proposal = loop {
            let speaker = next_speaker(state, &roster).to_string();
            let seat = team.seats.iter_mut().find(|s| s.name == speaker).expect("speaker is seated");
            let turn = dialog_turn(scene, kind, &speaker, &roster, state, params);
            rec.status(if seat.backend.is_human() {
                EpisodeStatus::AwaitingHuman { name: speaker.clone() }
            } else {
                EpisodeStatus::AwaitingAgent { name: speaker.clone() }
            });
            let text = match seat.backend.respond(&turn) {
                Ok(t) => t,
                Err(error) => {
                    rec.emit("violation", round, json!({ "kind": "protocol_timeout", "agent": speaker, "error": error.to_string() }));
                    return outcome(state, RoundResult::ProtocolTimeout { error });
                }
            };
            rec.tick();
            rec.emit("message", round, json!({ "speaker": speaker, "text": text, "attempt": attempt }));
            match ingest_response(state, &roster, &speaker, &text).expect("speaker chosen by next_speaker") {
                Ingest::Continue => {}
                Ingest::ProposalReady(p) => break Some((speaker, p)),
                Ingest::Violation(v) => {
                    rec.emit("violation", round, json!({ "kind": v, "agent": speaker, "attempt": attempt }));
                    if v == ViolationKind::DialogOverflow {
                        break None;
                    }
                }
            }
        };
        let (proposal_text, detail) = match proposal {
            None => (None, FeedbackDetail::NoProposal { messages: state.messages.len() }),
            Some((proposer, text)) => {
                rec.status(EpisodeStatus::Planning);
                let (plan, v) = validate_text(&text, scene);
                rec.emit(
                    "plan",
                    round,
                    json!({
                        "proposer": proposer,
                        "text": text,
                        "plan": plan,
                        "report": v.report,
                        "passed": v.report.passed(),
                        "attempt": attempt,
                    }),
                );
                let detail = match v.validated {
                    Some(vp) => {
                        let problem = problem_for_plan(scene, &vp, planner_seed(scene, attempt));
                        match plan_rrt_connect(&problem) {
                            Ok(raw) => {
                                let trajectory = shortcut(&raw, &problem, SHORTCUT_ATTEMPTS);
                                rec.status(EpisodeStatus::Executing);
                                rec.emit(
                                    "trajectory",
                                    round,
                                    json!({ "attempt": attempt, "waypoints": trajectory.waypoints, "stats": raw.stats }),
                                );
                                return outcome(state, RoundResult::Executed { plan: Box::new(vp), trajectory });
                            }
                            Err(e) => FeedbackDetail::MotionPlanning { reason: e.to_string() },
                        }
                    }
                    None => render_feedback(&v.report).expect("failed report has a failure").structured,
                };
                (Some(text), detail)
            }
        };
        let feedback = detail.into_feedback();
        rec.emit("feedback", round, json!({ "attempt": attempt, "text": feedback.text, "structured": feedback.structured }));
        state.feedback.push(FailedAttempt { transcript: state.messages.clone(), proposal: proposal_text, feedback });
    }
    outcome(state, RoundResult::ReplanExhausted)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub task: TaskId,
    pub mode: TeamMode,
    pub params: ProtocolParams,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub success: bool,
    /// Executed rounds.
    pub steps: usize,
    pub rounds: usize,
    /// Mean validation attempts per round (0 when no round ran).
    pub mean_replans: f64,
    pub attempts_per_round: Vec<usize>,
}

impl EpisodeMetrics {
    fn from_rounds(success: bool, steps: usize, attempts_per_round: Vec<usize>) -> Self {
        let rounds = attempts_per_round.len();
        let mean_replans = if rounds == 0 {
            0.0
        } else {
            attempts_per_round.iter().sum::<usize>() as f64 / rounds as f64
        };
        Self { success, steps, rounds, mean_replans, attempts_per_round }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub config: EpisodeConfig,
    pub roster: Vec<String>,
    pub events: Vec<Event>,
    pub metrics: EpisodeMetrics,
    pub final_scene: Scene,
}

impl EpisodeLog {
    /// One event per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("events serialize"));
            out.push('\n');
        }
        out
    }
}

pub fn parse_jsonl(text: &str) -> Result<Vec<Event>, DialogError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| DialogError::MalformedLog(format!("line {}: {e}", i + 1))))
        .collect()
}

/// Runs rounds until the task succeeds or the horizon is reached.
pub fn run_episode(config: &EpisodeConfig, team: &mut Team, sink: &mut dyn EventSink) -> Result<EpisodeLog, DialogError> {
    team.check(config.task)?;
    let roster = team.roster();
    config.params.check(roster.len())?;
    let mut rec = Recorder::new(sink);
    let mut scene = reset(config.task, config.seed);
    rec.emit(
        "episode",
        0,
        json!({
            "task": config.task,
            "mode": config.mode,
            "seed": config.seed,
            "roster": roster,
            "params": config.params,
            "max_messages": config.params.max_messages(roster.len()),
            "max_attempts": config.params.max_attempts(),
            "horizon": config.params.horizon(),
            "scene": scene,
        }),
    );
    let mut state = DialogState::new(config.params.max_messages(roster.len()));
    let mut attempts = Vec::new();
    let mut steps = 0;
    let mut success = false;
    for t in 0..config.params.horizon() {
        state.start_round(t);
        let out = run_round(&scene, team, &config.params, &mut state, &mut rec);
        let n_attempts = out.attempts();
        attempts.push(n_attempts);
        let mut executed = None;
        let mut timed_out = false;
        match out.result {
            RoundResult::Executed { plan, .. } => {
                let (next, reward) = apply(&scene, &plan).expect("plan was validated against this scene");
                scene = next;
                steps += 1;
                executed = Some(plan.plan().to_text());
                rec.emit("reward", t, json!({ "reward": reward, "scene": scene }));
                success = reward > 0;
            }
            RoundResult::ReplanExhausted => {}
            RoundResult::ProtocolTimeout { .. } => timed_out = true,
        }
        state.history.push(HistoryEntry { round: t, transcript: out.transcript, executed: executed.clone() });
        let result = if executed.is_some() {
            "executed"
        } else if timed_out {
            "protocol_timeout"
        } else {
            "replan_exhausted"
        };
        rec.emit("round_end", t, json!({ "result": result, "attempts": n_attempts }));
        if success || timed_out {
            break;
        }
    }
    let metrics = EpisodeMetrics::from_rounds(success, steps, attempts);
    let last_round = metrics.rounds.saturating_sub(1);
    rec.emit("metrics", last_round, serde_json::to_value(&metrics).expect("metrics serialize"));
    rec.status(EpisodeStatus::Done { success });
    Ok(EpisodeLog { config: config.clone(), roster, events: rec.events, metrics, final_scene: scene })
}

/// Recomputes metrics from feedback, trajectory, reward and round_end events.
pub fn metrics_from_events(events: &[Event]) -> EpisodeMetrics {
    let mut per_round: BTreeMap<usize, usize> = BTreeMap::new();
    let mut ended = BTreeSet::new();
    let mut steps = 0;
    let mut success = false;
    for e in events {
        match e.kind.as_str() {
            "feedback" => *per_round.entry(e.round).or_default() += 1,
            "trajectory" => {
                *per_round.entry(e.round).or_default() += 1;
                steps += 1;
            }
            "reward" => success |= e.payload["reward"].as_u64() == Some(1),
            "round_end" => {
                ended.insert(e.round);
            }
            _ => {}
        }
    }
    let attempts = ended.iter().map(|r| per_round.get(r).copied().unwrap_or(0)).collect();
    EpisodeMetrics::from_rounds(success, steps, attempts)
}

/// Logged metrics, read back from the `metrics` event.
pub fn logged_metrics(events: &[Event]) -> Option<EpisodeMetrics> {
    events
        .iter()
        .rfind(|e| e.kind == "metrics")
        .and_then(|e| serde_json::from_value(e.payload.clone()).ok())
}

/// Checks a log against the protocol rules and returns every breach found.
pub fn audit_log(events: &[Event]) -> Vec<String> {
    let mut problems = Vec::new();
    let Some(header) = events.iter().find(|e| e.kind == "episode") else {
        return vec!["no episode event".into()];
    };
    let roster: Vec<String> = serde_json::from_value(header.payload["roster"].clone()).unwrap_or_default();
    let max_messages = header.payload["max_messages"].as_u64().unwrap_or(0) as usize;
    let max_attempts = header.payload["max_attempts"].as_u64().unwrap_or(0) as usize;
    let horizon = header.payload["horizon"].as_u64().unwrap_or(0) as usize;

    for (i, e) in events.iter().enumerate() {
        if e.index != i + 1 {
            problems.push(format!("event {} has index {}", i + 1, e.index));
        }
    }
    let mut dialogs: HashMap<(usize, u64), Vec<String>> = HashMap::new();
    let mut passed: HashMap<(usize, u64), bool> = HashMap::new();
    let mut attempts: BTreeMap<usize, usize> = BTreeMap::new();
    let mut rounds = BTreeSet::new();
    for e in events {
        let attempt = e.payload["attempt"].as_u64().unwrap_or(0);
        let key = (e.round, attempt);
        match e.kind.as_str() {
            "message" => {
                let speakers = dialogs.entry(key).or_default();
                speakers.push(e.payload["speaker"].as_str().unwrap_or_default().to_string());
                if speakers.len() > max_messages {
                    problems.push(format!("round {} attempt {attempt}: more than {max_messages} messages", e.round));
                }
            }
            "plan" => {
                let spoken = dialogs.get(&key).cloned().unwrap_or_default();
                if let Some(missing) = roster.iter().find(|r| !spoken.contains(r)) {
                    problems.push(format!("round {} attempt {attempt}: proposal before {missing} spoke", e.round));
                }
                passed.insert(key, e.payload["passed"].as_bool().unwrap_or(false));
            }
            "feedback" | "trajectory" => {
                let n = attempts.entry(e.round).or_default();
                *n += 1;
                if *n > max_attempts {
                    problems.push(format!("round {}: more than {max_attempts} attempts", e.round));
                }
                if e.kind == "trajectory" && passed.get(&key) != Some(&true) {
                    problems.push(format!("round {} attempt {attempt}: executed a plan that did not pass", e.round));
                }
            }
            "round_end" => {
                rounds.insert(e.round);
            }
            _ => {}
        }
    }
    if rounds.len() > horizon {
        problems.push(format!("{} rounds exceed the horizon {horizon}", rounds.len()));
    }
    problems
}
