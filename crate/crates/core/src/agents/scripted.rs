//! Deterministic scripted agents: task oracles that solve one step per round,
//! a feedback-reading corrector, and adversarial policies for protocol tests.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::str::FromStr;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;

use super::{Backend, BackendError, DialogView, Turn, TurnView};
use crate::geometry::Vec3;
use crate::gridpath::{bfs_oracle, format_plan, GridInstance};
use crate::plan::{parse_proposal, ActionSpec, AgentAction, SubTaskPlan, Verb};
use crate::world::{object_half_height, Gripper, Point, Support, TaskId, BOARD, GRASP_OFFSET};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ScriptedPolicy {
    /// Introduces itself, then proposes a correct one-step plan when eligible.
    Oracle,
    /// Always the same line.
    Echo(String),
    /// Proposes an unparseable plan whenever eligible.
    AlwaysInvalid,
    /// Proposes on every turn, eligible or not.
    Premature,
    /// Never proposes.
    Chatterbox,
    /// Seeded mix of valid, invalid, premature and idle responses.
    Fuzzer(u64),
    /// First proposal of each round sends one robot to a zone it cannot
    /// reach; later proposals repair it from the feedback text.
    FeedbackCorrector,
    /// Answers grid prompts with a garbage string.
    GridGarbage,
}

impl FromStr for ScriptedPolicy {
    type Err = BackendError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (id, arg) = match s.split_once(':') {
            Some((a, b)) => (a, Some(b)),
            None => (s, None),
        };
        Ok(match (id, arg) {
            ("oracle", None) => ScriptedPolicy::Oracle,
            ("echo", line) => ScriptedPolicy::Echo(line.unwrap_or("PROCEED").to_string()),
            ("always_invalid", None) => ScriptedPolicy::AlwaysInvalid,
            ("premature", None) => ScriptedPolicy::Premature,
            ("chatterbox", None) => ScriptedPolicy::Chatterbox,
            ("fuzzer", seed) => ScriptedPolicy::Fuzzer(
                seed.map(|s| s.parse().map_err(|_| BackendError::Config(format!("bad fuzzer seed `{s}`"))))
                    .transpose()?
                    .unwrap_or(0),
            ),
            ("feedback_corrector", None) => ScriptedPolicy::FeedbackCorrector,
            ("grid_garbage", None) => ScriptedPolicy::GridGarbage,
            _ => return Err(BackendError::Config(format!("unknown scripted policy `{s}`"))),
        })
    }
}

pub struct ScriptedBackend {
    policy: ScriptedPolicy,
    rng: ChaCha8Rng,
}

impl ScriptedBackend {
    pub fn new(policy: ScriptedPolicy) -> Self {
        let seed = match policy {
            ScriptedPolicy::Fuzzer(s) => s,
            _ => 0,
        };
        Self { policy, rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

impl Backend for ScriptedBackend {
    fn respond(&mut self, turn: &Turn) -> Result<String, BackendError> {
        match &turn.view {
            TurnView::Grid(inst) => Ok(match &self.policy {
                ScriptedPolicy::Echo(line) => line.clone(),
                ScriptedPolicy::GridGarbage | ScriptedPolicy::Chatterbox => "I am not sure how to plan this.".into(),
                _ => grid_oracle(inst),
            }),
            TurnView::Dialog(view) => Ok(match &self.policy {
                ScriptedPolicy::Oracle => oracle(view),
                ScriptedPolicy::Echo(line) => line.clone(),
                ScriptedPolicy::AlwaysInvalid => {
                    if view.can_propose {
                        "EXECUTE\nNAME Nobody ACTION DANCE".into()
                    } else {
                        intro(view)
                    }
                }
                ScriptedPolicy::Premature => {
                    if view.can_propose {
                        oracle(view)
                    } else {
                        SubTaskPlan::all_wait(&view.robots).to_text()
                    }
                }
                ScriptedPolicy::Chatterbox => "Let me think about this a bit longer. PROCEED".into(),
                ScriptedPolicy::Fuzzer(_) => fuzz(view, &mut self.rng),
                ScriptedPolicy::FeedbackCorrector => corrector(view),
                ScriptedPolicy::GridGarbage => {
                    return Err(BackendError::Config("grid_garbage only answers grid prompts".into()))
                }
            }),
        }
    }
}

fn grid_oracle(inst: &GridInstance) -> String {
    match bfs_oracle(inst) {
        Ok(paths) => format_plan(&paths),
        Err(e) => format!("I could not find a plan: {e}"),
    }
}

fn fmt3(p: Point) -> String {
    format!("({:.3}, {:.3}, {:.3})", p.x, p.y, p.z)
}

/// What a robot tells the others: base, reach, gripper and what it sees.
fn intro(view: &DialogView) -> String {
    let Some(cap) = view.capabilities.get(&view.me) else {
        return "PROCEED".into();
    };
    let holding = match &view.observation.own_gripper {
        Gripper::Holding { object } => object.clone(),
        Gripper::Empty => "nothing".into(),
    };
    let seen: Vec<String> = view
        .observation
        .visible_objects
        .iter()
        .filter_map(|o| match &o.support {
            Support::TableZone { id } if id != BOARD => Some(format!("{} on {id}", o.name)),
            _ => None,
        })
        .collect();
    format!(
        "I am {}. My base is at {}. I can reach {}. I am holding {holding}. I see: {}. PROCEED",
        view.me,
        fmt3(cap.base),
        cap.reach.join(", "),
        if seen.is_empty() { "nothing".to_string() } else { seen.join(", ") }
    )
}

fn re(cell: &'static OnceLock<Regex>, pattern: &str) -> &'static Regex {
    cell.get_or_init(|| Regex::new(pattern).expect("valid regex"))
}

/// Merged picture of the team: own view plus what others said.
#[derive(Default)]
struct Knowledge {
    reach: BTreeMap<String, Vec<String>>,
    base: BTreeMap<String, Point>,
    holding: BTreeMap<String, Option<String>>,
    /// Object to the table zone it rests on.
    location: BTreeMap<String, String>,
}

impl Knowledge {
    fn gather(view: &DialogView) -> Self {
        static BASE: OnceLock<Regex> = OnceLock::new();
        static REACH: OnceLock<Regex> = OnceLock::new();
        static HOLD: OnceLock<Regex> = OnceLock::new();
        static SEE: OnceLock<Regex> = OnceLock::new();
        static ITEM: OnceLock<Regex> = OnceLock::new();
        let mut k = Knowledge::default();
        for (name, cap) in &view.capabilities {
            k.reach.insert(name.clone(), cap.reach.clone());
            k.base.insert(name.clone(), cap.base);
        }
        for g in &view.observation.grippers {
            let held = match &g.state {
                Gripper::Holding { object } => Some(object.clone()),
                Gripper::Empty => None,
            };
            k.holding.insert(g.agent.clone(), held);
        }
        for o in &view.observation.visible_objects {
            if let Support::TableZone { id } = &o.support {
                if id != BOARD {
                    k.location.insert(o.name.clone(), id.clone());
                }
            }
        }
        for m in view.transcript.iter().filter(|m| m.speaker != view.me) {
            let who = m.speaker.clone();
            if let Some(c) = re(&BASE, r"My base is at \((-?[\d.]+), (-?[\d.]+), (-?[\d.]+)\)").captures(&m.text) {
                let n = |i: usize| c[i].parse::<f64>().unwrap_or(0.0);
                k.base.insert(who.clone(), Vec3::new(n(1), n(2), n(3)));
            }
            if let Some(c) = re(&REACH, r"I can reach ([\w, ]+)\.").captures(&m.text) {
                k.reach.insert(who.clone(), c[1].split(", ").map(str::to_string).collect());
            }
            if let Some(c) = re(&HOLD, r"I am holding (\w+)\.").captures(&m.text) {
                k.holding.insert(who.clone(), (&c[1] != "nothing").then(|| c[1].to_string()));
            }
            if let Some(c) = re(&SEE, r"I see: ([^.]*)\.").captures(&m.text) {
                for item in re(&ITEM, r"(\w+) on (\w+)").captures_iter(&c[1]) {
                    k.location.entry(item[1].to_string()).or_insert_with(|| item[2].to_string());
                }
            }
        }
        k
    }

    fn knows_everyone(&self, robots: &[String]) -> bool {
        robots.iter().all(|r| self.reach.contains_key(r) && self.base.contains_key(r))
    }
}

fn oracle(view: &DialogView) -> String {
    if !view.can_propose {
        return intro(view);
    }
    match oracle_plan(view, false) {
        Some(plan) => plan.to_text(),
        None => intro(view),
    }
}

/// The oracle's one-step plan. `sequential` limits sort moves to one robot.
fn oracle_plan(view: &DialogView, force_parallel: bool) -> Option<SubTaskPlan> {
    let k = Knowledge::gather(view);
    if !k.knows_everyone(&view.robots) {
        return None;
    }
    let attempt = view.feedback.len();
    Some(match view.task {
        TaskId::SortBlocks => sort_plan(view, &k, attempt > 0 && !force_parallel),
        TaskId::StackOrder => stack_plan(view, &k),
        TaskId::PackBoxes => pack_plan(view, &k, attempt),
    })
}

fn zone_number(z: &str) -> usize {
    z.trim_start_matches(|c: char| !c.is_ascii_digit()).parse().unwrap_or(usize::MAX)
}

/// One robot's move in sort_blocks: (block index, destination zone).
type SortMove = Option<(usize, String)>;

fn sort_plan(view: &DialogView, k: &Knowledge, sequential: bool) -> SubTaskPlan {
    let blocks: Vec<String> = view.goals.keys().cloned().collect();
    let mut zones: Vec<String> = k.reach.values().flatten().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    zones.sort_by_key(|z| zone_number(z));
    let zi = |z: &str| zones.iter().position(|x| x == z);
    let Some(start): Option<Vec<usize>> = blocks.iter().map(|b| k.location.get(b).and_then(|z| zi(z))).collect() else {
        return SubTaskPlan::all_wait(&view.robots);
    };
    let Some(goal): Option<Vec<usize>> = blocks.iter().map(|b| zi(&view.goals[b])).collect() else {
        return SubTaskPlan::all_wait(&view.robots);
    };
    let reach: Vec<Vec<usize>> =
        view.robots.iter().map(|r| k.reach[r].iter().filter_map(|z| zi(z)).collect()).collect();

    let joint_moves = |state: &[usize]| -> Vec<Vec<SortMove>> {
        let mut out: Vec<Vec<SortMove>> = vec![vec![]];
        for r in &reach {
            let mut next = Vec::new();
            for partial in &out {
                next.push([partial.clone(), vec![None]].concat());
                let movers = partial.iter().flatten().count();
                if sequential && movers > 0 {
                    continue;
                }
                for (b, &at) in state.iter().enumerate() {
                    if !r.contains(&at) || partial.iter().flatten().any(|(pb, _)| *pb == b) {
                        continue;
                    }
                    for &d in r {
                        let taken = state.contains(&d) || partial.iter().flatten().any(|(_, pd)| zi(pd) == Some(d));
                        if !taken {
                            next.push([partial.clone(), vec![Some((b, zones[d].clone()))]].concat());
                        }
                    }
                }
            }
            out = next;
        }
        out
    };
    let step = |state: &[usize], moves: &[SortMove]| -> Vec<usize> {
        let mut s = state.to_vec();
        for (b, d) in moves.iter().flatten() {
            s[*b] = zi(d).expect("known zone");
        }
        s
    };

    // value iteration over all placements of the blocks
    let mut states: Vec<Vec<usize>> = vec![vec![]];
    for _ in &blocks {
        states = states
            .iter()
            .flat_map(|s| (0..zones.len()).filter(|z| !s.contains(z)).map(move |z| [s.clone(), vec![z]].concat()))
            .collect();
    }
    let mut dist: HashMap<Vec<usize>, usize> = states.iter().map(|s| (s.clone(), usize::MAX)).collect();
    dist.insert(goal.clone(), 0);
    let transitions: Vec<(Vec<usize>, Vec<Vec<usize>>)> = states
        .iter()
        .map(|s| (s.clone(), joint_moves(s).iter().map(|m| step(s, m)).collect()))
        .collect();
    loop {
        let mut changed = false;
        for (s, nexts) in &transitions {
            let best = nexts.iter().map(|n| dist[n]).min().unwrap_or(usize::MAX);
            if best != usize::MAX && best + 1 < dist[s] {
                dist.insert(s.clone(), best + 1);
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let best = joint_moves(&start)
        .into_iter()
        .filter(|m| m.iter().any(Option::is_some))
        .min_by_key(|m| (dist[&step(&start, m)], m.iter().flatten().count()));
    let Some(moves) = best else {
        return SubTaskPlan::all_wait(&view.robots);
    };
    SubTaskPlan {
        actions: view
            .robots
            .iter()
            .zip(&moves)
            .map(|(r, m)| match m {
                Some((b, d)) => AgentAction::pick_place(r, &blocks[*b], d),
                None => AgentAction::single(r, ActionSpec::wait()),
            })
            .collect(),
    }
}

fn board_stack(view: &DialogView) -> Vec<String> {
    let objs = &view.observation.visible_objects;
    let mut stack = Vec::new();
    let mut below: Option<String> = None;
    while stack.len() <= objs.len() {
        let next = objs.iter().find(|o| match (&o.support, &below) {
            (Support::TableZone { id }, None) => id == BOARD,
            (Support::StackedOn { name }, Some(b)) => name == b,
            _ => false,
        });
        match next {
            Some(o) => {
                stack.push(o.name.clone());
                below = Some(o.name.clone());
            }
            None => break,
        }
    }
    stack
}

fn stack_plan(view: &DialogView, k: &Knowledge) -> SubTaskPlan {
    let stack = board_stack(view);
    let mut actions: BTreeMap<String, ActionSpec> = BTreeMap::new();
    let holder = |item: &str| k.holding.iter().find(|(_, h)| h.as_deref() == Some(item)).map(|(a, _)| a.clone());
    let side = |item: &str| {
        let zone = k.location.get(item)?;
        view.robots.iter().find(|r| k.reach[*r].contains(zone)).cloned()
    };
    if let Some(next) = view.recipe.get(stack.len()) {
        let top = stack.last().cloned().unwrap_or_else(|| BOARD.to_string());
        let handler = if let Some(a) = holder(next) {
            actions.insert(a.clone(), ActionSpec::place(next, &top));
            Some(a)
        } else if let Some(a) = side(next) {
            actions.insert(a.clone(), ActionSpec::pick(next));
            Some(a)
        } else {
            None
        };
        if let Some(after) = view.recipe.get(stack.len() + 1) {
            if let Some(b) = side(after).filter(|b| Some(b) != handler.as_ref()) {
                if k.holding.get(&b).is_some_and(Option::is_none) {
                    actions.insert(b, ActionSpec::pick(after));
                }
            }
        }
    }
    SubTaskPlan {
        actions: view
            .robots
            .iter()
            .map(|r| AgentAction::single(r, actions.remove(r).unwrap_or_else(ActionSpec::wait)))
            .collect(),
    }
}

const PATH_SPACING: f64 = 0.2;
const CROSS_HEIGHT: f64 = 0.45;
const HOVER: f64 = 0.15;

/// Equal arc-length resampling of a polyline, rounded to millimeters.
fn resample(corners: &[Point]) -> Vec<Point> {
    let seg: Vec<f64> = corners.windows(2).map(|w| w[0].distance(w[1])).collect();
    let total: f64 = seg.iter().sum();
    let n = ((total / PATH_SPACING).ceil() as usize).max(1);
    let round = |p: Point| Vec3::new((p.x * 1e3).round() / 1e3, (p.y * 1e3).round() / 1e3, (p.z * 1e3).round() / 1e3);
    let mut out = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let mut s = total * i as f64 / n as f64;
        let mut j = 0;
        while j + 1 < seg.len() && s > seg[j] {
            s -= seg[j];
            j += 1;
        }
        let t = if seg[j] > 0.0 { (s / seg[j]).min(1.0) } else { 0.0 };
        out.push(round(corners[j].lerp(corners[j + 1], t)));
    }
    out
}

fn pack_plan(view: &DialogView, k: &Knowledge, attempt: usize) -> SubTaskPlan {
    let obs = &view.observation;
    let ee: BTreeMap<&str, Point> = obs.grippers.iter().filter_map(|g| Some((g.agent.as_str(), g.position?))).collect();
    let half = |r: &str, y: f64| k.base.get(r).is_some_and(|b| b.y.signum() == y.signum());
    let place_z = object_half_height(TaskId::PackBoxes) + GRASP_OFFSET;
    let mut claimed: BTreeSet<String> = BTreeSet::new();
    let mut exclusive = false;
    let mut acting = 0;
    let mut actions = Vec::new();
    for r in &view.robots {
        let Some(&from) = ee.get(r.as_str()) else {
            actions.push(AgentAction::single(r, ActionSpec::wait()));
            continue;
        };
        let choice = match k.holding.get(r).cloned().flatten() {
            Some(item) => {
                let mut bins: Vec<_> = obs
                    .landmarks
                    .iter()
                    .filter(|l| l.id.starts_with("bin") && !l.occupied && !claimed.contains(&l.id))
                    .collect();
                bins.sort_by_key(|l| !half(r, l.position.y));
                bins.first().map(|l| {
                    let target = l.position + Vec3::new(0.0, 0.0, place_z);
                    let z = CROSS_HEIGHT + 0.05 * attempt as f64;
                    let path = resample(&[from, Vec3::new(from.x, from.y, z), Vec3::new(target.x, target.y, z), target]);
                    (l.id.clone(), half(r, l.position.y), ActionSpec::place(&item, &l.id).with_path(path))
                })
            }
            None => {
                let mut items: Vec<_> = obs
                    .visible_objects
                    .iter()
                    .filter(|o| matches!(o.support, Support::TableZone { .. }) && !claimed.contains(&o.name))
                    .collect();
                items.sort_by_key(|o| !half(r, o.pose.y));
                items.first().map(|o| {
                    let target = o.pose + Vec3::new(0.0, 0.0, GRASP_OFFSET);
                    let z = (target.z + HOVER).max(CROSS_HEIGHT + 0.05 * attempt as f64);
                    let path = resample(&[from, Vec3::new(from.x, from.y, z), Vec3::new(target.x, target.y, z), target]);
                    (o.name.clone(), half(r, o.pose.y), ActionSpec::pick(&o.name).with_path(path))
                })
            }
        };
        match choice {
            Some((key, own_half, action)) if !exclusive && (own_half || acting == 0) => {
                exclusive = !own_half;
                acting += 1;
                claimed.insert(key);
                actions.push(AgentAction::single(r, action));
            }
            _ => actions.push(AgentAction::single(r, ActionSpec::wait())),
        }
    }
    SubTaskPlan { actions }
}

fn corrector(view: &DialogView) -> String {
    static CANNOT: OnceLock<Regex> = OnceLock::new();
    if !view.can_propose || view.task != TaskId::SortBlocks {
        return oracle(view);
    }
    let Some(base) = oracle_plan(view, true) else {
        return intro(view);
    };
    match view.feedback.last() {
        None => {
            let mut broken = base.clone();
            let k = Knowledge::gather(view);
            if let Some(a) = broken.actions.iter_mut().find(|a| !a.is_wait()) {
                let reach = &k.reach[&a.agent];
                let mut all: Vec<&String> = k.reach.values().flatten().collect();
                all.sort_by_key(|z| zone_number(z));
                if let Some(bad) = all.into_iter().find(|z| !reach.contains(z)) {
                    a.steps[1].args[1] = bad.clone();
                }
            }
            broken.to_text()
        }
        Some(last) => {
            let Some(mut prev) = last.proposal.as_deref().and_then(|p| parse_proposal(p, &view.grammar).ok()) else {
                return base.to_text();
            };
            for c in re(&CANNOT, r"(\w+) cannot reach (zone\d+)").captures_iter(&last.feedback.text) {
                let (agent, zone) = (&c[1], &c[2]);
                let fixed = base.action(agent).cloned();
                if let (Some(a), Some(fixed)) = (prev.actions.iter_mut().find(|a| a.agent == agent), fixed) {
                    if a.steps.iter().any(|s| s.verb == Verb::Place && s.args[1] == zone) {
                        *a = fixed;
                    }
                }
            }
            prev.to_text()
        }
    }
}

fn fuzz(view: &DialogView, rng: &mut ChaCha8Rng) -> String {
    match rng.random_range(0..6) {
        0 => intro(view),
        1 => oracle(view),
        2 => SubTaskPlan::all_wait(&view.robots).to_text(),
        3 => {
            let names: Vec<String> = view.observation.visible_objects.iter().map(|o| o.name.clone()).collect();
            let targets: Vec<String> = view
                .capabilities
                .values()
                .flat_map(|c| c.reach.clone())
                .chain(names.clone())
                .collect();
            let mut out = String::from("EXECUTE");
            for r in &view.robots {
                let pick = |rng: &mut ChaCha8Rng, v: &[String]| {
                    if v.is_empty() {
                        "nothing".to_string()
                    } else {
                        v[rng.random_range(0..v.len())].clone()
                    }
                };
                let line = match rng.random_range(0..3) {
                    0 => "WAIT".to_string(),
                    1 if view.grammar.combined_pick_place => {
                        format!("PICK {} PLACE {}", pick(rng, &names), pick(rng, &targets))
                    }
                    1 => format!("PICK {}", pick(rng, &names)),
                    _ => format!("PLACE {} {}", pick(rng, &names), pick(rng, &targets)),
                };
                out.push_str(&format!("\nNAME {r} ACTION {line}"));
            }
            out
        }
        4 => "EXECUTE\nNAME".into(),
        _ => "Hmm. PROCEED".into(),
    }
}
