//! Sub-task plans: the `EXECUTE` / `NAME <agent> ACTION ...` grammar, the
//! ordered validation pipeline and the feedback text fed back into prompts.
//!
//! Validation stages run strictly in order: parse, task constraints, IK,
//! collision, waypoints. A stage runs only if every earlier stage passed, so a
//! report never carries more than one failure.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Vec3;
use crate::kinematics::{collides, CompositeConfig, Contact, IkSolver, JointConfig};
use crate::world::{home_config, Point, Scene, Support, TaskId, ZoneKind, BOARD};

/// Allowed distance between a path endpoint and the gripper or action target.
pub const ENDPOINT_TOLERANCE: f64 = 0.02;
/// Largest allowed gap between consecutive waypoints (m).
pub const MAX_WAYPOINT_GAP: f64 = 0.25;
/// Largest allowed ratio between the widest gap and the mean gap.
pub const MAX_GAP_RATIO: f64 = 1.6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Verb {
    Pick,
    Place,
    Wait,
}

impl Verb {
    pub fn arity(self) -> usize {
        match self {
            Verb::Pick => 1,
            Verb::Place => 2,
            Verb::Wait => 0,
        }
    }

    pub fn keyword(self) -> &'static str {
        match self {
            Verb::Pick => "PICK",
            Verb::Place => "PLACE",
            Verb::Wait => "WAIT",
        }
    }

    fn parse(s: &str) -> Option<Verb> {
        match s {
            "PICK" => Some(Verb::Pick),
            "PLACE" => Some(Verb::Place),
            "WAIT" => Some(Verb::Wait),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WaypointPath {
    pub points: Vec<Point>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionSpec {
    pub verb: Verb,
    pub args: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub waypoints: Option<WaypointPath>,
}

impl ActionSpec {
    pub fn wait() -> Self {
        Self { verb: Verb::Wait, args: vec![], waypoints: None }
    }

    pub fn pick(object: &str) -> Self {
        Self { verb: Verb::Pick, args: vec![object.into()], waypoints: None }
    }

    pub fn place(object: &str, target: &str) -> Self {
        Self { verb: Verb::Place, args: vec![object.into(), target.into()], waypoints: None }
    }

    pub fn with_path(mut self, points: Vec<Point>) -> Self {
        self.waypoints = Some(WaypointPath { points });
        self
    }
}

/// One agent's share of a sub-task plan. A combined `PICK x PLACE y` line
/// desugars into two steps; every other action is a single step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentAction {
    pub agent: String,
    pub steps: Vec<ActionSpec>,
}

impl AgentAction {
    pub fn single(agent: &str, action: ActionSpec) -> Self {
        Self { agent: agent.into(), steps: vec![action] }
    }

    pub fn pick_place(agent: &str, object: &str, target: &str) -> Self {
        Self { agent: agent.into(), steps: vec![ActionSpec::pick(object), ActionSpec::place(object, target)] }
    }

    pub fn is_wait(&self) -> bool {
        self.steps.iter().all(|s| s.verb == Verb::Wait)
    }

    pub fn final_step(&self) -> &ActionSpec {
        self.steps.last().expect("agent action has at least one step")
    }
}

/// Exactly one action per participating agent, in roster order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubTaskPlan {
    pub actions: Vec<AgentAction>,
}

impl SubTaskPlan {
    pub fn action(&self, agent: &str) -> Option<&AgentAction> {
        self.actions.iter().find(|a| a.agent == agent)
    }

    pub fn all_wait(agents: &[String]) -> Self {
        Self { actions: agents.iter().map(|a| AgentAction::single(a, ActionSpec::wait())).collect() }
    }

    /// Canonical text form accepted by [`parse_proposal`].
    pub fn to_text(&self) -> String {
        let mut out = String::from("EXECUTE");
        for a in &self.actions {
            out.push_str(&format!("\nNAME {} ACTION ", a.agent));
            let body = match a.steps.as_slice() {
                [pick, place] if pick.verb == Verb::Pick && place.verb == Verb::Place => {
                    format!("PICK {} PLACE {}", pick.args[0], place.args[1])
                }
                _ => {
                    let s = a.final_step();
                    let mut body = s.verb.keyword().to_string();
                    for arg in &s.args {
                        body.push(' ');
                        body.push_str(arg);
                    }
                    if let Some(path) = &s.waypoints {
                        body.push_str(" PATH ");
                        body.push_str(&format_path(&path.points));
                    }
                    body
                }
            };
            out.push_str(&body);
        }
        out
    }
}

pub fn format_path(points: &[Point]) -> String {
    let inner: Vec<String> = points.iter().map(|p| format!("({}, {}, {})", p.x, p.y, p.z)).collect();
    format!("[{}]", inner.join(", "))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WaypointMode {
    Forbidden,
    Required,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskGrammar {
    pub agents: Vec<String>,
    pub combined_pick_place: bool,
    pub waypoints: WaypointMode,
}

impl TaskGrammar {
    pub fn for_task(task: TaskId) -> Self {
        let spec = task.spec();
        Self {
            agents: spec.agents,
            combined_pick_place: spec.combined_pick_place,
            waypoints: if spec.waypoints_required { WaypointMode::Required } else { WaypointMode::Forbidden },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseErrorKind {
    MissingKeyword,
    UnknownAgent,
    UnknownVerb,
    BadArity,
    MalformedPath,
    DuplicateAgent,
}

impl fmt::Display for ParseErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ParseErrorKind::MissingKeyword => "missing_keyword",
            ParseErrorKind::UnknownAgent => "unknown_agent",
            ParseErrorKind::UnknownVerb => "unknown_verb",
            ParseErrorKind::BadArity => "bad_arity",
            ParseErrorKind::MalformedPath => "malformed_path",
            ParseErrorKind::DuplicateAgent => "duplicate_agent",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, Error, PartialEq, Eq, Serialize, Deserialize)]
#[error("{kind}: {detail}")]
pub struct ParseError {
    pub kind: ParseErrorKind,
    pub detail: String,
}

fn perr(kind: ParseErrorKind, detail: impl Into<String>) -> ParseError {
    ParseError { kind, detail: detail.into() }
}

fn parse_number(s: &str) -> Option<f64> {
    s.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Parses `[(x, y, z), (x, y, z), ...]`.
pub fn parse_path(s: &str) -> Result<Vec<Point>, String> {
    let s = s.trim();
    let inner = s
        .strip_prefix('[')
        .and_then(|r| r.strip_suffix(']'))
        .ok_or_else(|| "path must be enclosed in [ ]".to_string())?;
    let mut points = Vec::new();
    let mut rest = inner.trim();
    while !rest.is_empty() {
        let open = rest.strip_prefix('(').ok_or_else(|| format!("expected '(' at `{rest}`"))?;
        let close = open.find(')').ok_or_else(|| "unclosed '('".to_string())?;
        let coords: Vec<&str> = open[..close].split(',').collect();
        if coords.len() != 3 {
            return Err(format!("point `({})` must have 3 coordinates", &open[..close]));
        }
        let vals: Option<Vec<f64>> = coords.iter().map(|c| parse_number(c)).collect();
        let vals = vals.ok_or_else(|| format!("non-numeric coordinate in `({})`", &open[..close]))?;
        points.push(Vec3::new(vals[0], vals[1], vals[2]));
        rest = open[close + 1..].trim_start();
        if let Some(r) = rest.strip_prefix(',') {
            rest = r.trim_start();
            if rest.is_empty() {
                return Err("trailing ','".into());
            }
        } else if !rest.is_empty() {
            return Err(format!("unexpected `{rest}` after point"));
        }
    }
    if points.len() < 2 {
        return Err("a path needs at least 2 points".into());
    }
    Ok(points)
}

/// Parses a proposal. Text before the `EXECUTE` line is discussion and is
/// ignored; after it, every line beginning with `NAME` is an action line.
pub fn parse_proposal(text: &str, grammar: &TaskGrammar) -> Result<SubTaskPlan, ParseError> {
    let mut lines = text.lines().map(str::trim);
    if !lines.any(|l| l.starts_with("EXECUTE")) {
        return Err(perr(ParseErrorKind::MissingKeyword, "EXECUTE"));
    }
    let mut by_agent: BTreeMap<String, AgentAction> = BTreeMap::new();
    for line in lines.filter(|l| l.starts_with("NAME")) {
        let (head, path) = match line.find(" PATH ") {
            Some(i) => (&line[..i], Some(&line[i + 6..])),
            None if line.ends_with(" PATH") => return Err(perr(ParseErrorKind::MalformedPath, "empty PATH")),
            None => (line, None),
        };
        let tokens: Vec<&str> = head.split_whitespace().collect();
        let agent = *tokens.get(1).ok_or_else(|| perr(ParseErrorKind::MissingKeyword, "agent name after NAME"))?;
        if !grammar.agents.iter().any(|a| a == agent) {
            return Err(perr(ParseErrorKind::UnknownAgent, agent));
        }
        if by_agent.contains_key(agent) {
            return Err(perr(ParseErrorKind::DuplicateAgent, agent));
        }
        if tokens.get(2) != Some(&"ACTION") {
            return Err(perr(ParseErrorKind::MissingKeyword, format!("ACTION ({agent})")));
        }
        let verb_tok = *tokens.get(3).ok_or_else(|| perr(ParseErrorKind::MissingKeyword, format!("verb ({agent})")))?;
        let verb = Verb::parse(verb_tok).ok_or_else(|| perr(ParseErrorKind::UnknownVerb, format!("{verb_tok} ({agent})")))?;
        let args: Vec<String> = tokens[4..].iter().map(|s| s.to_string()).collect();

        let mut steps = if grammar.combined_pick_place && verb == Verb::Pick {
            match args.as_slice() {
                [obj, kw, target] if kw == "PLACE" => vec![ActionSpec::pick(obj), ActionSpec::place(obj, target)],
                _ => {
                    return Err(perr(
                        ParseErrorKind::BadArity,
                        format!("expected PICK <object> PLACE <target> ({agent})"),
                    ))
                }
            }
        } else {
            if args.len() != verb.arity() {
                return Err(perr(
                    ParseErrorKind::BadArity,
                    format!("{} takes {} argument(s), got {} ({agent})", verb.keyword(), verb.arity(), args.len()),
                ));
            }
            vec![ActionSpec { verb, args, waypoints: None }]
        };

        match (path, grammar.waypoints) {
            (Some(_), WaypointMode::Forbidden) => {
                return Err(perr(ParseErrorKind::MalformedPath, format!("PATH is not allowed in this task ({agent})")))
            }
            (Some(_), WaypointMode::Required) if verb == Verb::Wait => {
                return Err(perr(ParseErrorKind::MalformedPath, format!("WAIT takes no PATH ({agent})")))
            }
            (Some(p), WaypointMode::Required) => {
                let points = parse_path(p).map_err(|e| perr(ParseErrorKind::MalformedPath, format!("{e} ({agent})")))?;
                steps.last_mut().expect("one step").waypoints = Some(WaypointPath { points });
            }
            (None, WaypointMode::Required) if verb != Verb::Wait => {
                return Err(perr(ParseErrorKind::MissingKeyword, format!("PATH ({agent})")))
            }
            _ => {}
        }
        by_agent.insert(agent.to_string(), AgentAction { agent: agent.to_string(), steps });
    }
    let mut actions = Vec::with_capacity(grammar.agents.len());
    for agent in &grammar.agents {
        match by_agent.remove(agent) {
            Some(a) => actions.push(a),
            None => return Err(perr(ParseErrorKind::MissingKeyword, format!("NAME {agent}"))),
        }
    }
    Ok(SubTaskPlan { actions })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Parse,
    TaskConstraints,
    Ik,
    Collision,
    Waypoints,
}

impl Stage {
    pub const ORDER: [Stage; 5] = [Stage::Parse, Stage::TaskConstraints, Stage::Ik, Stage::Collision, Stage::Waypoints];

    pub fn label(self) -> &'static str {
        match self {
            Stage::Parse => "parse",
            Stage::TaskConstraints => "task constraints",
            Stage::Ik => "IK",
            Stage::Collision => "collision",
            Stage::Waypoints => "waypoints",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Passed,
    /// Stage does not apply to this task (waypoints in non-waypoint tasks).
    NotApplicable,
    Failed,
    NotRun,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageResult {
    pub stage: Stage,
    pub status: StageStatus,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentReason {
    pub agent: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IkFailure {
    pub agent: String,
    pub target: Point,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollisionAtStep {
    /// Index into the composite goal sequence.
    pub step: usize,
    pub contacts: Vec<Contact>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "issue", rename_all = "snake_case")]
pub enum WaypointIssue {
    StartMismatch { agent: String, point: Point, expected: Point },
    EndMismatch { agent: String, point: Point, expected: Point },
    Uneven { agent: String, pairs: Vec<(Point, Point)> },
    Unreachable { agent: String, index: usize, point: Point },
    Colliding { index: usize, contacts: Vec<Contact> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "snake_case")]
pub enum FailureDetail {
    Parse { error: ParseError },
    TaskConstraints { violations: Vec<AgentReason> },
    Ik { failures: Vec<IkFailure> },
    Collision { collisions: Vec<CollisionAtStep> },
    Waypoints { issues: Vec<WaypointIssue> },
}

impl FailureDetail {
    pub fn stage(&self) -> Stage {
        match self {
            FailureDetail::Parse { .. } => Stage::Parse,
            FailureDetail::TaskConstraints { .. } => Stage::TaskConstraints,
            FailureDetail::Ik { .. } => Stage::Ik,
            FailureDetail::Collision { .. } => Stage::Collision,
            FailureDetail::Waypoints { .. } => Stage::Waypoints,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub stage_results: Vec<StageResult>,
    pub first_failure: Option<FailureDetail>,
}

impl ValidationReport {
    fn from_outcome(failure: Option<FailureDetail>, waypoints_apply: bool) -> Self {
        let failed_at = failure.as_ref().map(|f| f.stage());
        let mut seen_failure = false;
        let stage_results = Stage::ORDER
            .iter()
            .map(|&stage| {
                let status = if seen_failure {
                    StageStatus::NotRun
                } else if Some(stage) == failed_at {
                    seen_failure = true;
                    StageStatus::Failed
                } else if stage == Stage::Waypoints && !waypoints_apply {
                    StageStatus::NotApplicable
                } else {
                    StageStatus::Passed
                };
                StageResult { stage, status }
            })
            .collect();
        Self { stage_results, first_failure: failure }
    }

    pub fn passed(&self) -> bool {
        self.first_failure.is_none()
    }

    pub fn status(&self, stage: Stage) -> StageStatus {
        self.stage_results
            .iter()
            .find(|r| r.stage == stage)
            .map(|r| r.status)
            .unwrap_or(StageStatus::NotRun)
    }

    /// Stages appear in pipeline order, at most one failed, and a stage ran
    /// iff every earlier stage passed.
    pub fn is_well_formed(&self) -> bool {
        if self.stage_results.iter().map(|r| r.stage).collect::<Vec<_>>() != Stage::ORDER {
            return false;
        }
        let mut blocked = false;
        for r in &self.stage_results {
            let ran = r.status != StageStatus::NotRun;
            if ran == blocked {
                return false;
            }
            if r.status == StageStatus::Failed {
                blocked = true;
            }
        }
        blocked == self.first_failure.is_some()
            && self.first_failure.as_ref().is_none_or(|f| self.status(f.stage()) == StageStatus::Failed)
    }
}

/// A plan that passed every stage, with the IK goal sequence it produced.
/// Only [`validate`] constructs one.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValidatedPlan {
    plan: SubTaskPlan,
    goals: Vec<CompositeConfig<f64>>,
    retreat: Option<CompositeConfig<f64>>,
    scene_fingerprint: u64,
}

impl ValidatedPlan {
    pub fn plan(&self) -> &SubTaskPlan {
        &self.plan
    }

    /// Composite goal configurations in execution order.
    pub fn goals(&self) -> &[CompositeConfig<f64>] {
        &self.goals
    }

    /// Posture after the round: agents that placed something return home.
    pub fn retreat(&self) -> Option<&CompositeConfig<f64>> {
        self.retreat.as_ref()
    }

    /// Every configuration the arms must pass through, retreat included.
    pub fn execution_goals(&self) -> Vec<CompositeConfig<f64>> {
        self.goals.iter().chain(&self.retreat).cloned().collect()
    }

    pub fn final_config(&self) -> Option<&CompositeConfig<f64>> {
        self.retreat.as_ref().or(self.goals.last())
    }

    pub fn scene_fingerprint(&self) -> u64 {
        self.scene_fingerprint
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Validation {
    pub report: ValidationReport,
    pub validated: Option<ValidatedPlan>,
}

fn ik_seed(scene: &Scene, agent: &str) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    (scene.rng_seed, scene.round_index, agent).hash(&mut h);
    h.finish()
}

/// Parses and validates in one call; parse errors become a stage-1 failure.
pub fn validate_text(text: &str, scene: &Scene) -> (Option<SubTaskPlan>, Validation) {
    let grammar = TaskGrammar::for_task(scene.task_id);
    match parse_proposal(text, &grammar) {
        Ok(plan) => {
            let v = validate(&plan, scene);
            (Some(plan), v)
        }
        Err(error) => (
            None,
            Validation {
                report: ValidationReport::from_outcome(
                    Some(FailureDetail::Parse { error }),
                    scene.spec().waypoints_required,
                ),
                validated: None,
            },
        ),
    }
}

/// Runs stages 2-5 on a parsed plan. Pure in `(plan, scene)`.
pub fn validate(plan: &SubTaskPlan, scene: &Scene) -> Validation {
    let waypoints_apply = scene.spec().waypoints_required;
    let fail = |d: FailureDetail| Validation {
        report: ValidationReport::from_outcome(Some(d), waypoints_apply),
        validated: None,
    };
    if let Err(error) = check_plan_shape(plan, scene) {
        return fail(FailureDetail::Parse { error });
    }

    let violations = task_constraints(plan, scene);
    if !violations.is_empty() {
        return fail(FailureDetail::TaskConstraints { violations });
    }

    // stage 3: one IK solution per action step, chained from the current posture
    let current = scene.current_config();
    let mut per_agent: Vec<Vec<JointConfig<f64>>> = Vec::new();
    let mut ik_failures = Vec::new();
    for (i, arm) in scene.arms.iter().enumerate() {
        let action = plan.action(&arm.name).expect("shape checked");
        let solver = IkSolver::with_seed(ik_seed(scene, &arm.name));
        let mut seq = Vec::new();
        let mut prev = current.per_arm[i];
        for step in &action.steps {
            let Some(target) = scene.action_target(step) else { continue };
            match solver.solve(arm, target, Some(&prev)) {
                Ok(q) => {
                    seq.push(q);
                    prev = q;
                }
                Err(_) => ik_failures.push(IkFailure { agent: arm.name.clone(), target }),
            }
        }
        per_agent.push(seq);
    }
    if !ik_failures.is_empty() {
        return fail(FailureDetail::Ik { failures: ik_failures });
    }

    let goals = zip_goals(&current, &per_agent);
    let retreat = retreat_config(plan, scene, goals.last().expect("zip_goals is non-empty"));
    let collisions: Vec<CollisionAtStep> = goals
        .iter()
        .chain(&retreat)
        .enumerate()
        .filter_map(|(step, x)| {
            let r = collides(&scene.arms, x, &scene.fixtures);
            (!r.is_free()).then_some(CollisionAtStep { step, contacts: r.contacts })
        })
        .collect();
    if !collisions.is_empty() {
        return fail(FailureDetail::Collision { collisions });
    }

    let (goals, retreat) = if waypoints_apply {
        match check_waypoints(plan, scene) {
            Ok(goals) => {
                let retreat = retreat_config(plan, scene, goals.last().expect("zip_goals is non-empty"));
                (goals, retreat)
            }
            Err(issues) => return fail(FailureDetail::Waypoints { issues }),
        }
    } else {
        (goals, retreat)
    };

    Validation {
        report: ValidationReport::from_outcome(None, waypoints_apply),
        validated: Some(ValidatedPlan { plan: plan.clone(), goals, retreat, scene_fingerprint: scene.fingerprint() }),
    }
}

/// The last goal with every placing arm moved back to its home posture.
fn retreat_config(plan: &SubTaskPlan, scene: &Scene, last: &CompositeConfig<f64>) -> Option<CompositeConfig<f64>> {
    let mut x = last.clone();
    let mut any = false;
    for (i, arm) in scene.arms.iter().enumerate() {
        let placing = plan.action(&arm.name).is_some_and(|a| a.final_step().verb == Verb::Place);
        if placing {
            x.per_arm[i] = home_config(arm);
            any = true;
        }
    }
    any.then_some(x)
}

/// Composite configs by index; shorter sequences hold their final (or current) config.
fn zip_goals(current: &CompositeConfig<f64>, per_agent: &[Vec<JointConfig<f64>>]) -> Vec<CompositeConfig<f64>> {
    let len = per_agent.iter().map(Vec::len).max().unwrap_or(0);
    if len == 0 {
        return vec![current.clone()];
    }
    (0..len)
        .map(|k| {
            CompositeConfig::new(
                per_agent
                    .iter()
                    .enumerate()
                    .map(|(i, seq)| seq.get(k).or(seq.last()).copied().unwrap_or(current.per_arm[i]))
                    .collect(),
            )
        })
        .collect()
}

/// Re-checks what the parser guarantees, for plans built in code.
fn check_plan_shape(plan: &SubTaskPlan, scene: &Scene) -> Result<(), ParseError> {
    let agents = scene.agents();
    let mut seen = BTreeSet::new();
    for a in &plan.actions {
        if !agents.contains(&a.agent) {
            return Err(perr(ParseErrorKind::UnknownAgent, a.agent.clone()));
        }
        if !seen.insert(a.agent.clone()) {
            return Err(perr(ParseErrorKind::DuplicateAgent, a.agent.clone()));
        }
        if a.steps.is_empty() || a.steps.len() > 2 {
            return Err(perr(ParseErrorKind::BadArity, format!("{} has {} steps", a.agent, a.steps.len())));
        }
        for s in &a.steps {
            if s.args.len() != s.verb.arity() {
                return Err(perr(ParseErrorKind::BadArity, format!("{} ({})", s.verb.keyword(), a.agent)));
            }
        }
    }
    for agent in &agents {
        if !seen.contains(agent) {
            return Err(perr(ParseErrorKind::MissingKeyword, format!("NAME {agent}")));
        }
    }
    Ok(())
}

fn task_constraints(plan: &SubTaskPlan, scene: &Scene) -> Vec<AgentReason> {
    let mut out = Vec::new();
    let mut push = |agent: &str, reason: String| out.push(AgentReason { agent: agent.into(), reason });
    let mut claimed_objects: BTreeMap<String, String> = BTreeMap::new();
    let mut claimed_targets: BTreeMap<String, String> = BTreeMap::new();
    let mut board_places = Vec::new();
    let stack = scene.board_stack();

    for action in plan.actions.iter().filter(|a| !a.is_wait()) {
        let agent = action.agent.as_str();
        let reach = scene.reach(agent);
        let holding = scene.held_by(agent).map(|o| o.name.clone());
        let obj_name = &action.steps[0].args[0];
        let Some(obj) = scene.object(obj_name) else {
            push(agent, format!("{agent}: there is no object named {obj_name}"));
            continue;
        };
        if let Some(other) = claimed_objects.insert(obj_name.clone(), agent.to_string()) {
            push(agent, format!("{obj_name} is claimed by both {other} and {agent}"));
        }
        let first = &action.steps[0];
        if first.verb == Verb::Pick {
            if let Some(h) = &holding {
                push(agent, format!("{agent} is already holding {h}"));
            }
            match &obj.support {
                Support::TableZone { id } if id != BOARD => {
                    if !reach.contains(id) {
                        push(agent, format!("{agent} cannot reach {obj_name} on {id}"));
                    }
                }
                Support::HeldBy { agent: a } => push(agent, format!("{obj_name} is held by {a}")),
                other => {
                    let at = match other {
                        Support::StackedOn { name } => format!("on {name}"),
                        Support::InContainer { id } => format!("in {id}"),
                        _ => format!("on {BOARD}"),
                    };
                    push(agent, format!("{obj_name} is {at} and cannot be picked"));
                }
            }
        } else if holding.as_deref() != Some(obj_name.as_str()) {
            push(agent, format!("{agent} is not holding {obj_name}"));
        }

        let Some(place) = action.steps.iter().find(|s| s.verb == Verb::Place) else { continue };
        let target = &place.args[1];
        if let Some(other) = claimed_targets.insert(target.clone(), agent.to_string()) {
            push(agent, format!("{target} is targeted by both {other} and {agent}"));
        }
        match scene.task_id {
            TaskId::StackOrder => {
                board_places.push(agent.to_string());
                let expected = stack.last().cloned().unwrap_or_else(|| BOARD.to_string());
                if !reach.iter().any(|z| z == BOARD) {
                    push(agent, format!("{agent} cannot reach {BOARD}"));
                }
                if *target != expected {
                    push(agent, format!("{obj_name} must be PLACEd on {expected}, not {target}"));
                }
                match scene.recipe.get(stack.len()) {
                    Some(next) if next == obj_name => {}
                    Some(next) => push(agent, format!("{obj_name} is not next in the recipe, next is {next}")),
                    None => push(agent, format!("the recipe is already complete, {obj_name} is not needed")),
                }
            }
            _ => match scene.zone(target) {
                None => push(agent, format!("{target} is not a zone")),
                Some(z) => {
                    if !reach.contains(&z.id) {
                        push(agent, format!("{agent} cannot reach {target}"));
                    }
                    if scene.task_id == TaskId::PackBoxes && z.kind != ZoneKind::BinSlot {
                        push(agent, format!("{target} is not a bin slot"));
                    }
                    if let Some(o) = scene.objects.iter().find(|o| scene.base_zone(&o.name).as_deref() == Some(target)) {
                        push(agent, format!("{target} is occupied by {}", o.name));
                    }
                }
            },
        }
    }
    if board_places.len() > 1 {
        push(
            &board_places[1].clone(),
            format!("only one robot can PLACE on {BOARD} per round: {}", board_places.join(", ")),
        );
    }
    out
}

fn gaps(points: &[Point]) -> Vec<f64> {
    points.windows(2).map(|w| w[0].distance(w[1])).collect()
}

/// Stage 5. Returns the composite goal per waypoint index on success.
fn check_waypoints(plan: &SubTaskPlan, scene: &Scene) -> Result<Vec<CompositeConfig<f64>>, Vec<WaypointIssue>> {
    let current = scene.current_config();
    let mut issues = Vec::new();
    let mut per_agent: Vec<Vec<JointConfig<f64>>> = Vec::new();
    let mut unreachable = Vec::new();
    let mut uneven = Vec::new();
    for (i, arm) in scene.arms.iter().enumerate() {
        let action = plan.action(&arm.name).expect("shape checked");
        let step = action.final_step();
        let Some(path) = step.waypoints.as_ref().filter(|_| step.verb != Verb::Wait) else {
            per_agent.push(vec![]);
            continue;
        };
        let pts = &path.points;
        let ee = scene.ee_position(&arm.name).expect("agent has an arm");
        if pts[0].distance(ee) > ENDPOINT_TOLERANCE {
            issues.push(WaypointIssue::StartMismatch { agent: arm.name.clone(), point: pts[0], expected: ee });
        }
        if let Some(target) = scene.action_target(step) {
            let last = *pts.last().expect("path has points");
            if last.distance(target) > ENDPOINT_TOLERANCE {
                issues.push(WaypointIssue::EndMismatch { agent: arm.name.clone(), point: last, expected: target });
            }
        }
        let d = gaps(pts);
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let bad: Vec<(Point, Point)> = d
            .iter()
            .enumerate()
            .filter(|(_, g)| **g > MAX_GAP_RATIO * mean || **g > MAX_WAYPOINT_GAP)
            .map(|(k, _)| (pts[k], pts[k + 1]))
            .collect();
        if !bad.is_empty() {
            uneven.push(WaypointIssue::Uneven { agent: arm.name.clone(), pairs: bad });
        }
        let solver = IkSolver::with_seed(ik_seed(scene, &arm.name) ^ 0x9e37_79b9);
        let mut prev = current.per_arm[i];
        let mut seq = Vec::with_capacity(pts.len());
        for (index, pt) in pts.iter().enumerate() {
            match solver.solve(arm, *pt, Some(&prev)) {
                Ok(q) => {
                    prev = q;
                    seq.push(q);
                }
                Err(_) => unreachable.push(WaypointIssue::Unreachable { agent: arm.name.clone(), index, point: *pt }),
            }
        }
        per_agent.push(seq);
    }
    issues.extend(uneven);
    let ik_ok = unreachable.is_empty();
    issues.extend(unreachable);
    if ik_ok {
        let goals = zip_goals(&current, &per_agent);
        let retreat = retreat_config(plan, scene, goals.last().expect("zip_goals is non-empty"));
        for (index, x) in goals.iter().chain(&retreat).enumerate() {
            let r = collides(&scene.arms, x, &scene.fixtures);
            if !r.is_free() {
                issues.push(WaypointIssue::Colliding { index, contacts: r.contacts });
            }
        }
        if issues.is_empty() {
            return Ok(goals);
        }
    }
    Err(issues)
}

/// Feedback text plus the structured detail it is rendered from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Feedback {
    pub text: String,
    pub structured: FeedbackDetail,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeedbackDetail {
    Validation { failure: FailureDetail },
    /// The dialog ran out of messages before anyone proposed a plan.
    NoProposal { messages: usize },
    /// A validated plan that the motion planner could not connect.
    MotionPlanning { reason: String },
    /// Details withheld (feedback ablation).
    Withheld,
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum FeedbackError {
    #[error("report has no failure to describe")]
    NothingFailed,
}

pub fn fmt_point(p: Point) -> String {
    format!("({:.2},{:.2},{:.2})", p.x, p.y, p.z)
}

fn contact_text(c: &Contact) -> String {
    match c {
        Contact::Arms { arm_a, link_a, arm_b, link_b } => format!("{arm_a} link{link_a} and {arm_b} link{link_b}"),
        Contact::Obstacle { arm, link, obstacle } => format!("{arm} link{link} and {obstacle}"),
    }
}

fn contacts_text(cs: &[Contact]) -> String {
    cs.iter().map(contact_text).collect::<Vec<_>>().join(", ")
}

fn grouped(entries: &[(String, String)]) -> String {
    entries.iter().map(|(a, s)| format!("{a}: {s}")).collect::<Vec<_>>().join("; ")
}

fn failure_text(d: &FailureDetail) -> String {
    match d {
        FailureDetail::Parse { error } => error.to_string(),
        FailureDetail::TaskConstraints { violations } => {
            violations.iter().map(|v| v.reason.clone()).collect::<Vec<_>>().join("; ")
        }
        FailureDetail::Ik { failures } => {
            let e: Vec<(String, String)> =
                failures.iter().map(|f| (f.agent.clone(), format!("target {} is not reachable", fmt_point(f.target)))).collect();
            format!("IK found no solution for: {}", grouped(&e))
        }
        FailureDetail::Collision { collisions } => collisions
            .iter()
            .map(|c| format!("goal configuration {} is in collision: {}", c.step, contacts_text(&c.contacts)))
            .collect::<Vec<_>>()
            .join("; "),
        FailureDetail::Waypoints { issues } => {
            let mut start = Vec::new();
            let mut end = Vec::new();
            let mut uneven = Vec::new();
            let mut unreachable = Vec::new();
            let mut colliding = Vec::new();
            for i in issues {
                match i {
                    WaypointIssue::StartMismatch { agent, point, expected } => start
                        .push((agent.clone(), format!("{} instead of {}", fmt_point(*point), fmt_point(*expected)))),
                    WaypointIssue::EndMismatch { agent, point, expected } => end
                        .push((agent.clone(), format!("{} instead of {}", fmt_point(*point), fmt_point(*expected)))),
                    WaypointIssue::Uneven { agent, pairs } => uneven.push((
                        agent.clone(),
                        pairs
                            .iter()
                            .map(|(a, b)| format!("{}, {}", fmt_point(*a), fmt_point(*b)))
                            .collect::<Vec<_>>()
                            .join("; "),
                    )),
                    WaypointIssue::Unreachable { agent, index, point } => {
                        unreachable.push((agent.clone(), format!("step {index} {}", fmt_point(*point))))
                    }
                    WaypointIssue::Colliding { index, contacts } => {
                        colliding.push((format!("step {index}"), contacts_text(contacts)))
                    }
                }
            }
            let mut parts = Vec::new();
            if !start.is_empty() {
                parts.push(format!("Some paths do not start at the current gripper position: {}", grouped(&start)));
            }
            if !end.is_empty() {
                parts.push(format!("Some paths do not end at the action target: {}", grouped(&end)));
            }
            if !uneven.is_empty() {
                parts.push(format!("Some steps in this path are not exactly evenly spaced: {}", grouped(&uneven)));
            }
            if !unreachable.is_empty() {
                parts.push(format!("Some waypoints are not reachable by IK: {}", grouped(&unreachable)));
            }
            if !colliding.is_empty() {
                parts.push(format!("Some waypoints are in collision: {}", grouped(&colliding)));
            }
            parts.join("\n")
        }
    }
}

impl FeedbackDetail {
    pub fn render(&self) -> String {
        match self {
            FeedbackDetail::Validation { failure } => {
                format!("This proposed plan failed: {}: {}", failure.stage().label(), failure_text(failure))
            }
            FeedbackDetail::NoProposal { messages } => format!(
                "This proposed plan failed: protocol: no plan was proposed within {messages} messages"
            ),
            FeedbackDetail::MotionPlanning { reason } => {
                format!("This proposed plan failed: motion planning: {reason}")
            }
            FeedbackDetail::Withheld => "This proposed plan failed.".to_string(),
        }
    }

    pub fn into_feedback(self) -> Feedback {
        Feedback { text: self.render(), structured: self }
    }
}

/// Text for the first failure in `report`.
pub fn render_feedback(report: &ValidationReport) -> Result<Feedback, FeedbackError> {
    let failure = report.first_failure.clone().ok_or(FeedbackError::NothingFailed)?;
    Ok(FeedbackDetail::Validation { failure }.into_feedback())
}
