//! Centralized bidirectional RRT (RRT-Connect) over the composite joint space,
//! chained through intermediate goals, plus random shortcutting and the
//! direct-versus-waypoint comparison scenarios built from `pack_boxes`.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Obstacle, Vec3};
use crate::kinematics::{in_collision, segment_free, ArmModel, CompositeConfig, IkSolver, JointConfig};
use crate::plan::ValidatedPlan;
use crate::scalar::Real;
use crate::world::{home_config, reset, Scene, Support, TaskId, ZoneKind, GRASP_OFFSET};

pub const DEFAULT_ITERATION_BUDGET: usize = 50_000;
pub const DEFAULT_TIME_BUDGET: Duration = Duration::from_secs(300);
/// Largest per-joint move of one tree extension (rad).
pub const DEFAULT_STEP: f64 = 0.15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanningProblem<T> {
    pub arms: Vec<ArmModel<T>>,
    pub obstacles: Vec<Obstacle<T>>,
    pub x_init: CompositeConfig<T>,
    pub goals: Vec<CompositeConfig<T>>,
    pub iteration_budget: usize,
    pub time_budget: Duration,
    pub step: T,
    pub rng_seed: u64,
}

impl<T: Real> PlanningProblem<T> {
    pub fn new(
        arms: Vec<ArmModel<T>>,
        obstacles: Vec<Obstacle<T>>,
        x_init: CompositeConfig<T>,
        goals: Vec<CompositeConfig<T>>,
    ) -> Self {
        Self {
            arms,
            obstacles,
            x_init,
            goals,
            iteration_budget: DEFAULT_ITERATION_BUDGET,
            time_budget: DEFAULT_TIME_BUDGET,
            step: T::lit(DEFAULT_STEP),
            rng_seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng_seed = seed;
        self
    }

    pub fn with_iteration_budget(mut self, n: usize) -> Self {
        self.iteration_budget = n;
        self
    }

    pub fn free(&self, x: &CompositeConfig<T>) -> bool {
        x.within_limits(&self.arms) && !in_collision(&self.arms, x, &self.obstacles)
    }

    pub fn edge_free(&self, a: &CompositeConfig<T>, b: &CompositeConfig<T>) -> bool {
        segment_free(&self.arms, a, b, &self.obstacles)
    }

    fn check(&self) -> Result<(), PlanError> {
        if self.goals.is_empty() {
            return Err(PlanError::InvalidProblem("no goals".into()));
        }
        for (k, x) in std::iter::once(&self.x_init).chain(&self.goals).enumerate() {
            if x.per_arm.len() != self.arms.len() {
                return Err(PlanError::InvalidProblem(format!("configuration {k} has the wrong arm count")));
            }
            if !self.free(x) {
                let what = if k == 0 { "x_init".to_string() } else { format!("goal {}", k - 1) };
                return Err(PlanError::InvalidProblem(format!("{what} is in collision or out of limits")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PlanStats {
    pub iterations: usize,
    /// Tree nodes created over every segment, roots included.
    pub nodes: usize,
    pub wall_time_s: f64,
}

impl PlanStats {
    /// Equality ignoring wall time.
    pub fn same_work(&self, other: &Self) -> bool {
        self.iterations == other.iterations && self.nodes == other.nodes
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory<T> {
    pub waypoints: Vec<CompositeConfig<T>>,
    pub stats: PlanStats,
}

impl<T: Real> Trajectory<T> {
    /// Joint-space (L2) path length.
    pub fn length(&self) -> T {
        self.waypoints.windows(2).fold(T::zero(), |acc, w| acc + w[0].distance(&w[1]))
    }

    /// Starts at `x_init`, ends at the final goal, passes every goal in order
    /// and every edge is collision-free.
    pub fn is_valid_for(&self, problem: &PlanningProblem<T>) -> bool {
        let (Some(first), Some(last)) = (self.waypoints.first(), self.waypoints.last()) else {
            return false;
        };
        if first != &problem.x_init || Some(last) != problem.goals.last() || self.waypoints.len() < 2 {
            return false;
        }
        let mut next_goal = 0;
        for w in &self.waypoints {
            if next_goal < problem.goals.len() && w == &problem.goals[next_goal] {
                next_goal += 1;
            }
        }
        next_goal == problem.goals.len()
            && self.waypoints.iter().all(|w| w.within_limits(&problem.arms))
            && self.waypoints.windows(2).all(|w| problem.edge_free(&w[0], &w[1]))
    }
}

#[derive(Clone, Debug, Error, PartialEq, Serialize, Deserialize)]
pub enum PlanError {
    #[error("invalid planning problem: {0}")]
    InvalidProblem(String),
    #[error("planning budget exhausted after {} iterations ({} goals reached)", stats.iterations, goals_reached)]
    Exhausted { stats: PlanStats, goals_reached: usize },
}

struct Tree<T> {
    nodes: Vec<Vec<T>>,
    parent: Vec<usize>,
}

impl<T: Real> Tree<T> {
    fn new(root: Vec<T>) -> Self {
        Self { nodes: vec![root], parent: vec![0] }
    }

    fn nearest(&self, q: &[T]) -> usize {
        let mut best = (0, T::infinity());
        for (i, n) in self.nodes.iter().enumerate() {
            let d = n.iter().zip(q).fold(T::zero(), |acc, (a, b)| acc + (*a - *b) * (*a - *b));
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }

    fn push(&mut self, q: Vec<T>, parent: usize) -> usize {
        self.nodes.push(q);
        self.parent.push(parent);
        self.nodes.len() - 1
    }

    /// Root-to-node path.
    fn path_to(&self, mut i: usize) -> Vec<Vec<T>> {
        let mut out = vec![self.nodes[i].clone()];
        while i != 0 {
            i = self.parent[i];
            out.push(self.nodes[i].clone());
        }
        out.reverse();
        out
    }
}

enum Extend {
    Reached(usize),
    Advanced(usize),
    Trapped,
}

struct Search<'a, T> {
    problem: &'a PlanningProblem<T>,
    rng: ChaCha8Rng,
    stats: PlanStats,
    started: Instant,
}

impl<T: Real> Search<'_, T> {
    fn out_of_budget(&self) -> bool {
        self.stats.iterations >= self.problem.iteration_budget || self.started.elapsed() >= self.problem.time_budget
    }

    fn sample(&mut self) -> Vec<T> {
        let rng = &mut self.rng;
        self.problem.arms.iter().flat_map(|a| a.random_config(rng).q).collect()
    }

    fn edge(&self, a: &[T], b: &[T]) -> bool {
        self.problem.edge_free(&CompositeConfig::from_flat(a), &CompositeConfig::from_flat(b))
    }

    fn extend(&mut self, tree: &mut Tree<T>, target: &[T]) -> Extend {
        let near = tree.nearest(target);
        let from = &tree.nodes[near];
        let span = from.iter().zip(target).fold(T::zero(), |m, (a, b)| m.max((*b - *a).abs()));
        let (new, reached) = if span <= self.problem.step {
            (target.to_vec(), true)
        } else {
            let s = self.problem.step / span;
            (from.iter().zip(target).map(|(a, b)| *a + (*b - *a) * s).collect(), false)
        };
        if !self.edge(from, &new) {
            return Extend::Trapped;
        }
        let idx = tree.push(new, near);
        self.stats.nodes += 1;
        if reached {
            Extend::Reached(idx)
        } else {
            Extend::Advanced(idx)
        }
    }

    fn connect(&mut self, tree: &mut Tree<T>, target: &[T]) -> Extend {
        loop {
            match self.extend(tree, target) {
                Extend::Advanced(_) => continue,
                other => return other,
            }
        }
    }

    /// One RRT-Connect segment. Returns the joined path from `a` to `b`.
    fn segment(&mut self, a: &CompositeConfig<T>, b: &CompositeConfig<T>) -> Option<Vec<Vec<T>>> {
        let (fa, fb) = (a.flat(), b.flat());
        self.stats.nodes += 2;
        if self.edge(&fa, &fb) {
            return Some(if fa == fb { vec![fa] } else { vec![fa, fb] });
        }
        let mut start_tree = Tree::new(fa);
        let mut goal_tree = Tree::new(fb);
        let mut forward = true;
        while !self.out_of_budget() {
            self.stats.iterations += 1;
            let q = self.sample();
            let (grow, other) = if forward {
                (&mut start_tree, &mut goal_tree)
            } else {
                (&mut goal_tree, &mut start_tree)
            };
            let new = match self.extend(grow, &q) {
                Extend::Trapped => None,
                Extend::Reached(i) | Extend::Advanced(i) => Some(i),
            };
            if let Some(i) = new {
                let q_new = grow.nodes[i].clone();
                if let Extend::Reached(j) = self.connect(other, &q_new) {
                    let (si, gi) = if forward { (i, j) } else { (j, i) };
                    let mut path = start_tree.path_to(si);
                    let mut tail = goal_tree.path_to(gi);
                    tail.reverse();
                    // both halves end at the same configuration
                    path.extend(tail.into_iter().skip(1));
                    return Some(path);
                }
            }
            forward = !forward;
        }
        None
    }
}

/// Plans `x_init -> goal_1 -> ... -> goal_k`, one RRT-Connect segment per goal.
pub fn plan_rrt_connect<T: Real>(problem: &PlanningProblem<T>) -> Result<Trajectory<T>, PlanError> {
    problem.check()?;
    let mut search = Search {
        problem,
        rng: ChaCha8Rng::seed_from_u64(problem.rng_seed),
        stats: PlanStats::default(),
        started: Instant::now(),
    };
    let mut waypoints = vec![problem.x_init.clone()];
    for (k, goal) in problem.goals.iter().enumerate() {
        let from = waypoints.last().expect("non-empty").clone();
        match search.segment(&from, goal) {
            Some(path) => waypoints.extend(path.iter().skip(1).map(|q| CompositeConfig::from_flat(q))),
            None => {
                search.stats.wall_time_s = search.started.elapsed().as_secs_f64();
                return Err(PlanError::Exhausted { stats: search.stats, goals_reached: k });
            }
        }
    }
    if waypoints.len() == 1 {
        waypoints.push(problem.x_init.clone());
    }
    search.stats.wall_time_s = search.started.elapsed().as_secs_f64();
    Ok(Trajectory { waypoints, stats: search.stats })
}

/// Random pairwise shortcutting. Goal configurations are kept so the result
/// still passes through every intermediate goal; never increases length.
pub fn shortcut<T: Real>(trajectory: &Trajectory<T>, problem: &PlanningProblem<T>, attempts: usize) -> Trajectory<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(problem.rng_seed ^ 0x5107_c0de);
    let mut pts = trajectory.waypoints.clone();
    let is_anchor = |pts: &[CompositeConfig<T>], i: usize| problem.goals.contains(&pts[i]);
    for _ in 0..attempts {
        if pts.len() < 3 {
            break;
        }
        let i = rng.random_range(0..pts.len() - 2);
        let j = rng.random_range(i + 2..pts.len());
        if (i + 1..j).any(|k| is_anchor(&pts, k)) {
            continue;
        }
        let direct = pts[i].distance(&pts[j]);
        let current = pts[i..=j].windows(2).fold(T::zero(), |acc, w| acc + w[0].distance(&w[1]));
        if direct <= current && problem.edge_free(&pts[i], &pts[j]) {
            pts.drain(i + 1..j);
        }
    }
    Trajectory { waypoints: pts, stats: trajectory.stats.clone() }
}

/// Composite goals cached by validation: one per waypoint index for
/// waypoint tasks, otherwise one per action step.
pub fn goals_from_plan(plan: &ValidatedPlan) -> Vec<CompositeConfig<f64>> {
    plan.goals().to_vec()
}

/// Planning problem for executing a validated plan from the scene's posture.
pub fn problem_for_plan(scene: &Scene, plan: &ValidatedPlan, seed: u64) -> PlanningProblem<f64> {
    PlanningProblem::new(scene.arms.clone(), scene.fixtures.clone(), scene.current_config(), plan.execution_goals())
        .with_seed(seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Single goal, no intermediate waypoints.
    Direct,
    /// Lift, cross above the wall, hover over the goal, descend.
    Waypoints,
    /// Top-down heuristic: hover 0.20 m above a pick, lift to 0.25 m before a place.
    HardCode,
    /// Straight task-space line from start to goal.
    Linear,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Direct, Method::Waypoints, Method::HardCode, Method::Linear];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Direct => "direct",
            Method::Waypoints => "waypoints",
            Method::HardCode => "hard_code",
            Method::Linear => "linear",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubTask {
    Pick,
    Place,
}

/// A two-arm `pack_boxes` snapshot: start and final end-effector targets per arm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub kind: SubTask,
    pub seed: u64,
    pub arms: Vec<ArmModel<f64>>,
    pub obstacles: Vec<Obstacle<f64>>,
    pub x_init: CompositeConfig<f64>,
    pub start_points: Vec<Vec3<f64>>,
    pub goal_points: Vec<Vec3<f64>>,
}

/// Height of the lift and wall-crossing waypoints.
const CROSS_Z: f64 = 0.45;
const HOVER_PICK: f64 = 0.20;
const LIFT_PLACE: f64 = 0.25;
const LINEAR_POINTS: usize = 6;

fn solve_free(
    arms: &[ArmModel<f64>],
    obstacles: &[Obstacle<f64>],
    fixed: &CompositeConfig<f64>,
    arm: usize,
    target: Vec3<f64>,
    seed: u64,
) -> Option<JointConfig<f64>> {
    let mut prev = fixed.per_arm[arm];
    for attempt in 0..8u64 {
        let solver = IkSolver::with_seed(seed.wrapping_mul(31).wrapping_add(attempt));
        let init = if attempt == 0 { Some(&prev) } else { None };
        if let Ok(q) = solver.solve(&arms[arm], target, init) {
            let mut x = fixed.clone();
            x.per_arm[arm] = q;
            let solo = [arms[arm].clone()];
            if !in_collision(&solo, &CompositeConfig::new(vec![q]), obstacles) && !in_collision(arms, &x, obstacles) {
                return Some(q);
            }
            prev = q;
        }
    }
    None
}

/// Sequential IK for a list of composite end-effector targets, each solution
/// seeded from the previous goal. `None` if some target has no free solution.
pub fn goals_for_points(
    arms: &[ArmModel<f64>],
    obstacles: &[Obstacle<f64>],
    x_init: &CompositeConfig<f64>,
    points: &[Vec<Vec3<f64>>],
    seed: u64,
) -> Option<Vec<CompositeConfig<f64>>> {
    let mut goals = Vec::with_capacity(points.len());
    let mut current = x_init.clone();
    for (k, pts) in points.iter().enumerate() {
        for (i, p) in pts.iter().enumerate() {
            let q = solve_free(arms, obstacles, &current, i, *p, seed ^ ((k as u64) << 8) ^ i as u64)?;
            current.per_arm[i] = q;
        }
        if in_collision(arms, &current, obstacles) {
            return None;
        }
        goals.push(current.clone());
    }
    Some(goals)
}

impl Scenario {
    /// End-effector targets for each intermediate goal under `method`.
    pub fn waypoint_points(&self, method: Method) -> Vec<Vec<Vec3<f64>>> {
        let n = self.start_points.len();
        let lerp_all = |t: f64| -> Vec<Vec3<f64>> {
            (0..n).map(|i| self.start_points[i].lerp(self.goal_points[i], t)).collect()
        };
        let lifted = |pts: &[Vec3<f64>], z: f64| -> Vec<Vec3<f64>> { pts.iter().map(|p| Vec3::new(p.x, p.y, z)).collect() };
        match method {
            Method::Direct => vec![self.goal_points.clone()],
            Method::Linear => (1..=LINEAR_POINTS).map(|k| lerp_all(k as f64 / LINEAR_POINTS as f64)).collect(),
            Method::HardCode => match self.kind {
                SubTask::Pick => vec![
                    self.goal_points.iter().map(|p| *p + Vec3::new(0.0, 0.0, HOVER_PICK)).collect(),
                    self.goal_points.clone(),
                ],
                SubTask::Place => vec![lifted(&self.start_points, LIFT_PLACE), self.goal_points.clone()],
            },
            Method::Waypoints => {
                let over: Vec<Vec3<f64>> = (0..n)
                    .map(|i| {
                        let (s, g) = (self.start_points[i], self.goal_points[i]);
                        Vec3::new(0.5 * (s.x + g.x), 0.5 * (s.y + g.y), CROSS_Z)
                    })
                    .collect();
                vec![
                    lifted(&self.start_points, CROSS_Z),
                    over,
                    lifted(&self.goal_points, CROSS_Z),
                    self.goal_points.clone(),
                ]
            }
        }
    }

    /// Builds the planning problem for `method`; `None` when some waypoint has
    /// no collision-free IK solution (the method fails before planning).
    pub fn problem(&self, method: Method) -> Option<PlanningProblem<f64>> {
        let points = self.waypoint_points(method);
        let goals = goals_for_points(&self.arms, &self.obstacles, &self.x_init, &points, self.seed)?;
        // every method must end at the same final configuration
        let final_goal = self.final_goal()?;
        let mut goals = goals;
        *goals.last_mut().expect("at least one goal") = final_goal;
        Some(
            PlanningProblem::new(self.arms.clone(), self.obstacles.clone(), self.x_init.clone(), goals)
                .with_seed(self.seed),
        )
    }

    pub fn final_goal(&self) -> Option<CompositeConfig<f64>> {
        goals_for_points(&self.arms, &self.obstacles, &self.x_init, &[self.goal_points.clone()], self.seed ^ 0xf1a1)
            .map(|mut g| g.remove(0))
    }
}

fn grasp_target(scene: &Scene, object: &str) -> Vec3<f64> {
    scene.grasp_point(object).expect("object exists")
}

/// Place scenarios: each arm holds an item at a table slot on the left of the
/// wall and must put it into a bin slot on the right, both arms at once.
pub fn place_scenarios(seeds: impl IntoIterator<Item = u64>) -> Vec<Scenario> {
    seeds.into_iter().filter_map(|seed| snapshot(seed, SubTask::Place)).collect()
}

/// Pick scenarios: from the home posture, reach down to an item on the table.
pub fn pick_scenarios(seeds: impl IntoIterator<Item = u64>) -> Vec<Scenario> {
    seeds.into_iter().filter_map(|seed| snapshot(seed, SubTask::Pick)).collect()
}

fn snapshot(seed: u64, kind: SubTask) -> Option<Scenario> {
    let scene = reset(TaskId::PackBoxes, seed);
    let arms = scene.arms.clone();
    let obstacles = scene.fixtures.clone();
    let mut items: Vec<(String, Vec3<f64>)> = scene
        .objects
        .iter()
        .filter(|o| matches!(o.support, Support::TableZone { .. }))
        .map(|o| (o.name.clone(), grasp_target(&scene, &o.name)))
        .collect();
    let mut bins: Vec<Vec3<f64>> = scene.zones.iter().filter(|z| z.kind == ZoneKind::BinSlot).map(|z| z.center).collect();
    // each arm takes the item and bin on its own side of the table
    let mut picks = Vec::new();
    let mut places = Vec::new();
    for arm in &arms {
        let side = arm.base.position.y.signum();
        let closest = |pts: &[Vec3<f64>]| -> Option<usize> {
            (0..pts.len()).min_by(|a, b| {
                let da = pts[*a].distance(arm.base.position) - 0.01 * pts[*a].y * side;
                let db = pts[*b].distance(arm.base.position) - 0.01 * pts[*b].y * side;
                da.partial_cmp(&db).expect("finite")
            })
        };
        let pts: Vec<Vec3<f64>> = items.iter().map(|(_, p)| *p).collect();
        let i = closest(&pts)?;
        picks.push(items.remove(i).1);
        let j = (seed as usize + picks.len()) % bins.iter().filter(|b| b.y.signum() == side).count().max(1);
        let own: Vec<usize> = (0..bins.len()).filter(|k| bins[*k].y.signum() == side).collect();
        let b = bins.remove(*own.get(j)?);
        places.push(b + Vec3::new(0.0, 0.0, GRASP_OFFSET + 0.04));
    }
    let home = CompositeConfig::new(arms.iter().map(home_config).collect());
    let (x_init, start_points, goal_points) = match kind {
        SubTask::Pick => {
            let starts = arms.iter().zip(&home.per_arm).map(|(a, q)| crate::kinematics::end_effector(a, q)).collect();
            (home, starts, picks)
        }
        SubTask::Place => {
            let x = goals_for_points(&arms, &obstacles, &home, &[picks.clone()], seed ^ 0x91c)?.remove(0);
            (x, picks, places)
        }
    };
    let label = match kind {
        SubTask::Pick => "pick",
        SubTask::Place => "place",
    };
    Some(Scenario { name: format!("{label}_{seed}"), kind, seed, arms, obstacles, x_init, start_points, goal_points })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub scenario: String,
    pub method: Method,
    pub success: bool,
    pub nodes: usize,
    pub wall_time: f64,
}

/// Runs one method on one scenario. Waypoint sets without a free IK solution
/// count as failures with zero nodes.
pub fn run_method(scenario: &Scenario, method: Method, iteration_budget: usize) -> ComparisonRow {
    let row = |success, nodes, wall_time| ComparisonRow {
        scenario: scenario.name.clone(),
        method,
        success,
        nodes,
        wall_time,
    };
    let Some(problem) = scenario.problem(method) else { return row(false, 0, 0.0) };
    let problem = problem.with_iteration_budget(iteration_budget);
    match plan_rrt_connect(&problem) {
        Ok(t) => row(true, t.stats.nodes, t.stats.wall_time_s),
        Err(PlanError::Exhausted { stats, .. }) => row(false, stats.nodes, stats.wall_time_s),
        Err(PlanError::InvalidProblem(_)) => row(false, 0, 0.0),
    }
}

/// CSV with header `scenario,method,success,nodes,wall_time`.
pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["scenario", "method", "success", "nodes", "wall_time"]).expect("in-memory write");
    for r in rows {
        w.write_record([
            r.scenario.clone(),
            r.method.as_str().to_string(),
            r.success.to_string(),
            r.nodes.to_string(),
            format!("{:.4}", r.wall_time),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
}

pub fn median(values: &mut [usize]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_unstable();
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2] as f64
    } else {
        (values[n / 2 - 1] + values[n / 2]) as f64 / 2.0
    }
}
