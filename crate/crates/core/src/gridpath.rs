//! The 3D grid multi-agent path toy: instance generation, path validation with
//! byte-stable feedback, a prioritized space-time BFS oracle and the
//! attempt loop that re-prompts a backend with accumulated feedback.

use std::collections::{BTreeSet, HashMap, HashSet, VecDeque};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{Backend, BackendError, Prompt, Turn, TurnView};
use crate::dialog::{EpisodeStatus, EventSink, NullSink, Recorder};

pub const DEFAULT_MAX_ATTEMPTS: usize = 5;
pub const RETRY_LINE: &str =
    "Use this information to try again, update this plan so it has collision-free, strictly one-step-apart paths.";
pub const AGENT_NAMES: [&str; 8] = ["Alice", "Bob", "Chad", "Dave", "Eve", "Finn", "Gina", "Hugo"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[i32; 3]", into = "[i32; 3]")]
pub struct Cell {
    pub x: i32,
    pub y: i32,
    pub z: i32,
}

impl Cell {
    pub const fn new(x: i32, y: i32, z: i32) -> Self {
        Self { x, y, z }
    }

    pub fn manhattan(self, o: Cell) -> i32 {
        (self.x - o.x).abs() + (self.y - o.y).abs() + (self.z - o.z).abs()
    }

    fn neighbors(self) -> [Cell; 6] {
        let Cell { x, y, z } = self;
        [
            Cell::new(x + 1, y, z),
            Cell::new(x - 1, y, z),
            Cell::new(x, y + 1, z),
            Cell::new(x, y - 1, z),
            Cell::new(x, y, z + 1),
            Cell::new(x, y, z - 1),
        ]
    }
}

impl From<[i32; 3]> for Cell {
    fn from(v: [i32; 3]) -> Self {
        Cell::new(v[0], v[1], v[2])
    }
}

impl From<Cell> for [i32; 3] {
    fn from(c: Cell) -> Self {
        [c.x, c.y, c.z]
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.x, self.y, self.z)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridAgent {
    pub name: String,
    pub init: Cell,
    pub goal: Cell,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridInstance {
    pub size: [i32; 3],
    /// Sorted, no duplicates.
    pub obstacles: Vec<Cell>,
    pub agents: Vec<GridAgent>,
}

impl GridInstance {
    pub fn in_bounds(&self, c: Cell) -> bool {
        (0..self.size[0]).contains(&c.x) && (0..self.size[1]).contains(&c.y) && (0..self.size[2]).contains(&c.z)
    }

    pub fn agent_index(&self, name: &str) -> Option<usize> {
        self.agents.iter().position(|a| a.name == name)
    }

    /// Structural checks: bounds, no endpoint on an obstacle, distinct inits
    /// and distinct goals.
    pub fn check(&self) -> Result<(), GridError> {
        if self.size.iter().any(|&s| s <= 0) {
            return Err(GridError::InvalidInstance(format!("grid size {:?} must be positive", self.size)));
        }
        let obstacles: HashSet<Cell> = self.obstacles.iter().copied().collect();
        let mut inits = HashSet::new();
        let mut goals = HashSet::new();
        for a in &self.agents {
            for (what, c) in [("init", a.init), ("goal", a.goal)] {
                if !self.in_bounds(c) {
                    return Err(GridError::InvalidInstance(format!("{} {what} {c} is out of bounds", a.name)));
                }
                if obstacles.contains(&c) {
                    return Err(GridError::InvalidInstance(format!("{} {what} {c} is an obstacle", a.name)));
                }
            }
            if !inits.insert(a.init) || !goals.insert(a.goal) {
                return Err(GridError::InvalidInstance(format!("{} shares an endpoint with another agent", a.name)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("impossible parameters: {0}")]
    ImpossibleParameters(String),
    #[error("no solvable instance found after {0} samples")]
    NoSolvableInstance(usize),
    #[error("invalid instance: {0}")]
    InvalidInstance(String),
    #[error("prioritized search found no path for {0}")]
    Infeasible(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentPath {
    pub name: String,
    pub path: Vec<Cell>,
}

/// One path per agent in the order they were written.
pub type MultiPath = Vec<AgentPath>;

const MAX_SAMPLES: usize = 1000;

/// Samples obstacles, inits and goals as distinct uniform cells, resampling
/// until the oracle solves the instance.
pub fn generate_instance(seed: u64, size: [i32; 3], n_obstacles: usize, n_agents: usize) -> Result<GridInstance, GridError> {
    if size.iter().any(|&s| s <= 0) {
        return Err(GridError::ImpossibleParameters(format!("grid size {size:?}")));
    }
    if n_agents > AGENT_NAMES.len() {
        return Err(GridError::ImpossibleParameters(format!("at most {} agents", AGENT_NAMES.len())));
    }
    let cells = size.iter().map(|&s| s as usize).product::<usize>();
    if n_obstacles + 2 * n_agents > cells {
        return Err(GridError::ImpossibleParameters(format!(
            "{n_obstacles} obstacles and {n_agents} agents do not fit in {cells} cells"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_SAMPLES {
        let mut taken = HashSet::new();
        let mut draw = |rng: &mut ChaCha8Rng| loop {
            let c = Cell::new(rng.random_range(0..size[0]), rng.random_range(0..size[1]), rng.random_range(0..size[2]));
            if taken.insert(c) {
                return c;
            }
        };
        let mut obstacles: Vec<Cell> = (0..n_obstacles).map(|_| draw(&mut rng)).collect();
        obstacles.sort();
        let agents = AGENT_NAMES[..n_agents]
            .iter()
            .map(|name| GridAgent { name: name.to_string(), init: draw(&mut rng), goal: draw(&mut rng) })
            .collect();
        let inst = GridInstance { size, obstacles, agents };
        if bfs_oracle(&inst).is_ok() {
            return Ok(inst);
        }
    }
    Err(GridError::NoSolvableInstance(MAX_SAMPLES))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GridViolation {
    MissingPath { agent: String },
    StartMismatch { agent: String, found: Cell, expected: Cell },
    GoalMismatch { agent: String, found: Cell, expected: Cell },
    NotOneStep { agent: String, from: Cell, to: Cell },
    OutOfBounds { agent: String, cell: Cell },
    ObstacleHit { agent: String, cell: Cell },
    /// Both agents occupy `cell` at `step`.
    VertexConflict { first: String, second: String, step: usize, cell: Cell },
    /// Between `step` and `step + 1` the agents exchange `a` and `b`.
    SwapConflict { first: String, second: String, step: usize, a: Cell, b: Cell },
}

impl GridViolation {
    fn class(&self) -> usize {
        match self {
            GridViolation::MissingPath { .. } => 0,
            GridViolation::StartMismatch { .. } => 1,
            GridViolation::GoalMismatch { .. } => 2,
            GridViolation::NotOneStep { .. } => 3,
            GridViolation::OutOfBounds { .. } => 4,
            GridViolation::ObstacleHit { .. } => 5,
            GridViolation::VertexConflict { .. } => 6,
            GridViolation::SwapConflict { .. } => 7,
        }
    }

    /// Cells a viewer should highlight.
    pub fn cells(&self) -> Vec<Cell> {
        match self {
            GridViolation::MissingPath { .. } => vec![],
            GridViolation::StartMismatch { found, .. } | GridViolation::GoalMismatch { found, .. } => vec![*found],
            GridViolation::NotOneStep { from, to, .. } => vec![*from, *to],
            GridViolation::OutOfBounds { cell, .. }
            | GridViolation::ObstacleHit { cell, .. }
            | GridViolation::VertexConflict { cell, .. } => vec![*cell],
            GridViolation::SwapConflict { a, b, .. } => vec![*a, *b],
        }
    }

    fn entry(&self) -> String {
        match self {
            GridViolation::MissingPath { agent } => format!("{agent};"),
            GridViolation::StartMismatch { agent, found, expected }
            | GridViolation::GoalMismatch { agent, found, expected } => format!("{agent}: {found} instead of {expected};"),
            GridViolation::NotOneStep { agent, from, to } => format!("{agent}: {from}, {to};"),
            GridViolation::OutOfBounds { agent, cell } | GridViolation::ObstacleHit { agent, cell } => {
                format!("{agent}: {cell};")
            }
            GridViolation::VertexConflict { first, second, step, cell } => {
                format!("{first}, {second} at step {step}: {cell};")
            }
            GridViolation::SwapConflict { first, second, step, a, b } => {
                format!("{first}, {second} at step {step}: {a}, {b};")
            }
        }
    }
}

const CLASS_HEADERS: [&str; 8] = [
    "Some agents have no path in this plan",
    "Some paths in this plan do not start at the agent's init",
    "Some paths in this plan do not end at the agent's goal",
    "Some steps in this plan are not exactly 1 step away from each other",
    "Some steps in this plan are out of the grid bounds",
    "Some steps in this plan collide with obstacles",
    "Some agents collide with each other in this plan",
    "Some agents swap positions in this plan",
];

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridReport {
    pub violations: Vec<GridViolation>,
}

impl GridReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Position of a padded path at time `t`.
fn at(path: &[Cell], t: usize) -> Cell {
    path[t.min(path.len() - 1)]
}

/// Checks every rule and collects all violations, in roster order within
/// each rule.
pub fn validate_paths(instance: &GridInstance, paths: &[AgentPath]) -> GridReport {
    let obstacles: HashSet<Cell> = instance.obstacles.iter().copied().collect();
    let mut violations = Vec::new();
    let mut present: Vec<(&str, &[Cell])> = Vec::new();
    for agent in &instance.agents {
        let Some(ap) = paths.iter().find(|p| p.name == agent.name).filter(|p| !p.path.is_empty()) else {
            violations.push(GridViolation::MissingPath { agent: agent.name.clone() });
            continue;
        };
        let path = ap.path.as_slice();
        let name = &agent.name;
        if path[0] != agent.init {
            violations.push(GridViolation::StartMismatch { agent: name.clone(), found: path[0], expected: agent.init });
        }
        let last = path[path.len() - 1];
        if last != agent.goal {
            violations.push(GridViolation::GoalMismatch { agent: name.clone(), found: last, expected: agent.goal });
        }
        for w in path.windows(2) {
            if w[0].manhattan(w[1]) != 1 {
                violations.push(GridViolation::NotOneStep { agent: name.clone(), from: w[0], to: w[1] });
            }
        }
        for &c in path {
            if !instance.in_bounds(c) {
                violations.push(GridViolation::OutOfBounds { agent: name.clone(), cell: c });
            } else if obstacles.contains(&c) {
                violations.push(GridViolation::ObstacleHit { agent: name.clone(), cell: c });
            }
        }
        present.push((name, path));
    }
    let horizon = present.iter().map(|(_, p)| p.len()).max().unwrap_or(0);
    for i in 0..present.len() {
        for j in i + 1..present.len() {
            let (a, pa) = present[i];
            let (b, pb) = present[j];
            for t in 0..horizon {
                if at(pa, t) == at(pb, t) {
                    violations.push(GridViolation::VertexConflict {
                        first: a.into(),
                        second: b.into(),
                        step: t,
                        cell: at(pa, t),
                    });
                }
                if t + 1 < horizon {
                    let (a0, a1, b0, b1) = (at(pa, t), at(pa, t + 1), at(pb, t), at(pb, t + 1));
                    if a0 != a1 && a0 == b1 && a1 == b0 {
                        violations.push(GridViolation::SwapConflict {
                            first: a.into(),
                            second: b.into(),
                            step: t,
                            a: a0,
                            b: a1,
                        });
                    }
                }
            }
        }
    }
    violations.sort_by_key(GridViolation::class);
    GridReport { violations }
}

/// One line per violated rule followed by the retry instruction. Empty for
/// a valid report.
pub fn feedback_text(report: &GridReport) -> String {
    if report.is_valid() {
        return String::new();
    }
    let mut lines = Vec::new();
    for (class, header) in CLASS_HEADERS.iter().enumerate() {
        let entries: Vec<String> = report.violations.iter().filter(|v| v.class() == class).map(|v| v.entry()).collect();
        if !entries.is_empty() {
            lines.push(format!("{header}: {}", entries.join(" ")));
        }
    }
    lines.push(RETRY_LINE.to_string());
    lines.join("\n")
}

/// Feedback for a response that did not parse at all.
pub fn parse_feedback_text(err: &GridParseError) -> String {
    format!("This plan could not be parsed: {err};\n{RETRY_LINE}")
}

#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum GridParseError {
    #[error("missing PLAN keyword")]
    MissingPlan,
    #[error("malformed line `{0}`")]
    MalformedLine(String),
    #[error("unknown agent {0}")]
    UnknownAgent(String),
    #[error("duplicate path for {0}")]
    DuplicateAgent(String),
}

fn cell_regex() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\(\s*(-?\d+)\s*,\s*(-?\d+)\s*,\s*(-?\d+)\s*\)").expect("valid regex"))
}

fn parse_cells(s: &str) -> Option<Vec<Cell>> {
    let inner = s.trim().strip_prefix('[')?.strip_suffix(']')?;
    let mut rest = inner.trim();
    let mut cells = Vec::new();
    while !rest.is_empty() {
        let m = cell_regex().captures(rest)?;
        let n = |i: usize| m[i].parse::<i32>().ok();
        cells.push(Cell::new(n(1)?, n(2)?, n(3)?));
        rest = rest[m[0].len()..].trim_start();
        if let Some(r) = rest.strip_prefix(',') {
            rest = r.trim_start();
            if rest.is_empty() {
                return None;
            }
        } else if !rest.is_empty() {
            return None;
        }
    }
    Some(cells)
}

/// Parses `PLAN` followed by `NAME <agent> PATH [(x, y, z), ...]` lines.
/// Agents without a line are left for the validator to report.
pub fn parse_plan(text: &str, instance: &GridInstance) -> Result<MultiPath, GridParseError> {
    let mut lines = text.lines().map(str::trim);
    if !lines.any(|l| l.starts_with("PLAN")) {
        return Err(GridParseError::MissingPlan);
    }
    let mut out: MultiPath = Vec::new();
    for line in lines.filter(|l| l.starts_with("NAME")) {
        let malformed = || GridParseError::MalformedLine(line.to_string());
        let rest = line["NAME".len()..].trim_start();
        let (name, path) = rest.split_once(" PATH ").ok_or_else(malformed)?;
        let name = name.trim();
        if instance.agent_index(name).is_none() {
            return Err(GridParseError::UnknownAgent(name.to_string()));
        }
        if out.iter().any(|p| p.name == name) {
            return Err(GridParseError::DuplicateAgent(name.to_string()));
        }
        let path = parse_cells(path).ok_or_else(malformed)?;
        out.push(AgentPath { name: name.to_string(), path });
    }
    Ok(out)
}

pub fn format_plan(paths: &[AgentPath]) -> String {
    let mut out = String::from("PLAN");
    for p in paths {
        let cells: Vec<String> = p.path.iter().map(Cell::to_string).collect();
        out.push_str(&format!("\nNAME {} PATH [{}]", p.name, cells.join(", ")));
    }
    out
}

/// Prioritized planning: agents in roster order, each a breadth-first search
/// over (cell, time) without waiting, treating earlier agents' padded paths
/// and their moves as dynamic obstacles.
pub fn bfs_oracle(instance: &GridInstance) -> Result<MultiPath, GridError> {
    let obstacles: HashSet<Cell> = instance.obstacles.iter().copied().collect();
    let cells = instance.size.iter().map(|&s| s as usize).product::<usize>();
    let horizon = cells.min(4 * instance.size.iter().sum::<i32>() as usize + 8);
    let mut planned: Vec<Vec<Cell>> = Vec::new();
    let mut out = Vec::new();
    for agent in &instance.agents {
        let occupied = |c: Cell, t: usize| planned.iter().any(|p| at(p, t) == c);
        let swaps = |from: Cell, to: Cell, t: usize| planned.iter().any(|p| at(p, t) == to && at(p, t + 1) == from);
        // the goal must stay free from arrival onwards
        let last_use_of_goal = planned
            .iter()
            .filter_map(|p| p.iter().rposition(|&c| c == agent.goal))
            .max();
        let goal_free_from = |t: usize| last_use_of_goal.is_none_or(|u| t > u);
        if occupied(agent.init, 0) {
            return Err(GridError::Infeasible(agent.name.clone()));
        }
        let mut parent: HashMap<(Cell, usize), Cell> = HashMap::new();
        let mut queue = VecDeque::from([(agent.init, 0usize)]);
        let mut seen = HashSet::from([(agent.init, 0usize)]);
        let mut found = None;
        while let Some((c, t)) = queue.pop_front() {
            if c == agent.goal && goal_free_from(t) {
                found = Some((c, t));
                break;
            }
            if t + 1 >= horizon {
                continue;
            }
            for n in c.neighbors() {
                if !instance.in_bounds(n) || obstacles.contains(&n) {
                    continue;
                }
                if occupied(n, t + 1) || swaps(c, n, t) || !seen.insert((n, t + 1)) {
                    continue;
                }
                parent.insert((n, t + 1), c);
                queue.push_back((n, t + 1));
            }
        }
        let (mut c, mut t) = found.ok_or_else(|| GridError::Infeasible(agent.name.clone()))?;
        let mut path = vec![c];
        while t > 0 {
            c = parent[&(c, t)];
            t -= 1;
            path.push(c);
        }
        path.reverse();
        planned.push(path.clone());
        out.push(AgentPath { name: agent.name.clone(), path });
    }
    Ok(out)
}

pub const SYSTEM_PROMPT: &str = "\
Several agents move through a 3D grid of integer cells. Find a path for every agent from its start cell to its goal cell.
You receive:
1) the grid size and the obstacle cells (x, y, z), which no path may enter;
2) one line per agent with its name, init cell and goal cell;
3) any earlier plans that were rejected, each followed by the reasons.
Rules for a path:
1) it begins at the agent's init and finishes at its goal;
2) each move changes exactly one coordinate by exactly 1, and an agent never stays in place mid-path;
3) it stays inside the grid and never enters an obstacle;
4) two agents are never in the same cell at the same step and never trade cells in one step; an agent that has arrived keeps occupying its goal.
Think step by step, then finish with the plan in exactly this form:
PLAN
NAME <agent> PATH [(x, y, z), (x, y, z), ...]
with one NAME line per agent.";

/// The user prompt with every earlier failed attempt appended.
pub fn user_prompt(instance: &GridInstance, failures: &[GridAttempt]) -> String {
    let [x, y, z] = instance.size;
    let obstacles: Vec<String> = instance.obstacles.iter().map(Cell::to_string).collect();
    let mut out = format!("At the current step: Grid size: {x} x {y} x {z}\nObstacles:{}\n", obstacles.join(" "));
    for a in &instance.agents {
        out.push_str(&format!("Agent {} init: {} goal: {}\n", a.name, a.init, a.goal));
    }
    for f in failures.iter().filter_map(|f| f.feedback.as_ref().map(|fb| (f, fb))) {
        out.push_str(&format!("Feedback: this previous plan failed:\n{}\n{}\n", f.0.response.trim(), f.1));
    }
    out.push_str("\nYour reasoning and plan is:");
    out
}

pub fn grid_prompt(instance: &GridInstance, failures: &[GridAttempt]) -> Prompt {
    Prompt { system: SYSTEM_PROMPT.to_string(), user: user_prompt(instance, failures) }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridAttempt {
    pub response: String,
    /// `None` when the attempt succeeded.
    pub feedback: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub violations: Vec<GridViolation>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttemptLog {
    pub instance: GridInstance,
    pub attempts: Vec<GridAttempt>,
    pub success: bool,
    /// Attempts used up to and including the successful one.
    pub attempts_to_success: Option<usize>,
}

pub fn run_grid_attempts(
    instance: &GridInstance,
    backend: &mut dyn Backend,
    max_attempts: usize,
) -> Result<AttemptLog, BackendError> {
    run_grid_attempts_with(instance, backend, max_attempts, &mut NullSink)
}

/// The attempt loop, reporting progress to `sink` as dialog-style events.
pub fn run_grid_attempts_with(
    instance: &GridInstance,
    backend: &mut dyn Backend,
    max_attempts: usize,
    sink: &mut dyn EventSink,
) -> Result<AttemptLog, BackendError> {
    const PLANNER: &str = "Planner";
    let mut rec = Recorder::new(sink);
    let mut log = AttemptLog { instance: instance.clone(), attempts: vec![], success: false, attempts_to_success: None };
    rec.emit("episode", 0, serde_json::json!({ "task": "grid", "instance": instance }));
    for _ in 0..max_attempts {
        let turn = Turn {
            agent: PLANNER.to_string(),
            prompt: grid_prompt(instance, &log.attempts),
            view: TurnView::Grid(instance.clone()),
        };
        rec.status(if backend.is_human() {
            EpisodeStatus::AwaitingHuman { name: PLANNER.into() }
        } else {
            EpisodeStatus::AwaitingAgent { name: PLANNER.into() }
        });
        let response = match backend.respond(&turn) {
            Ok(r) => {
                rec.tick();
                r
            }
            Err(e) => {
                rec.status(EpisodeStatus::Done { success: false });
                return Err(e);
            }
        };
        rec.emit("message", 0, serde_json::json!({ "speaker": PLANNER, "text": response, "attempt": log.attempts.len() }));
        let attempt = match parse_plan(&response, instance) {
            Err(e) => GridAttempt { response, feedback: Some(parse_feedback_text(&e)), violations: vec![] },
            Ok(paths) => {
                let report = validate_paths(instance, &paths);
                rec.emit("plan", 0, serde_json::json!({ "paths": paths, "valid": report.is_valid() }));
                let feedback = (!report.is_valid()).then(|| feedback_text(&report));
                GridAttempt { response, feedback, violations: report.violations }
            }
        };
        if let Some(fb) = &attempt.feedback {
            rec.emit(
                "feedback",
                0,
                serde_json::json!({ "text": fb, "violations": attempt.violations, "attempt": log.attempts.len() }),
            );
        }
        let ok = attempt.feedback.is_none();
        log.attempts.push(attempt);
        if ok {
            log.success = true;
            log.attempts_to_success = Some(log.attempts.len());
            break;
        }
    }
    rec.emit(
        "metrics",
        0,
        serde_json::json!({ "success": log.success, "attempts": log.attempts.len() }),
    );
    rec.status(EpisodeStatus::Done { success: log.success });
    Ok(log)
}

/// Every cell the instance touches, for viewers.
pub fn occupied_cells(instance: &GridInstance) -> BTreeSet<Cell> {
    instance
        .obstacles
        .iter()
        .copied()
        .chain(instance.agents.iter().flat_map(|a| [a.init, a.goal]))
        .collect()
}
