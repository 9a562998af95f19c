//! Independent oracles and the scaled checks shared by the integration tests
//! and the acceptance runner.

#![allow(dead_code)]

pub mod goldens;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::time::Instant;

use nalgebra::{Isometry3, Translation3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use tabletalk_core::agents::{BackendSpec, ScriptedBackend, ScriptedPolicy};
use tabletalk_core::bench::{read_summary, run_bench, write_summary, BenchConfig, Condition};
use tabletalk_core::dialog::{run_episode, EpisodeConfig, NullSink, ProtocolParams, Seat, Team, TeamMode, CENTRAL_PLANNER};
use tabletalk_core::geometry::{Obstacle, Pose, Vec3};
use tabletalk_core::gridpath::{bfs_oracle, generate_instance, run_grid_attempts, validate_paths, AgentPath, Cell, GridInstance};
use tabletalk_core::kinematics::{
    end_effector, in_collision, ArmModel, CompositeConfig, IkSolver, JointConfig, JointLimit, DOF,
};
use tabletalk_core::plan::validate_text;
use tabletalk_core::planner::{
    median, place_scenarios, plan_rrt_connect, run_method, shortcut, Method, PlanningProblem, DEFAULT_ITERATION_BUDGET,
};
use tabletalk_core::world::{reset, Scene, TaskId};

pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

// ---------------------------------------------------------------- grid

/// Step-by-step simulation of a joint plan; true when it is a valid solution.
pub fn brute_force_grid_valid(inst: &GridInstance, paths: &[AgentPath]) -> bool {
    let mut per_agent: Vec<&Vec<Cell>> = Vec::new();
    for a in &inst.agents {
        let mine: Vec<&AgentPath> = paths.iter().filter(|p| p.name == a.name).collect();
        if mine.len() != 1 || mine[0].path.is_empty() {
            return false;
        }
        let p = &mine[0].path;
        if p[0] != a.init || *p.last().unwrap() != a.goal {
            return false;
        }
        per_agent.push(p);
    }
    let blocked: BTreeSet<(i32, i32, i32)> = inst.obstacles.iter().map(|c| (c.x, c.y, c.z)).collect();
    let inside = |c: &Cell| {
        (0..inst.size[0]).contains(&c.x) && (0..inst.size[1]).contains(&c.y) && (0..inst.size[2]).contains(&c.z)
    };
    for p in &per_agent {
        for c in p.iter() {
            if !inside(c) || blocked.contains(&(c.x, c.y, c.z)) {
                return false;
            }
        }
        for w in p.windows(2) {
            let d = (w[0].x - w[1].x).abs() + (w[0].y - w[1].y).abs() + (w[0].z - w[1].z).abs();
            if d != 1 {
                return false;
            }
        }
    }
    let horizon = per_agent.iter().map(|p| p.len()).max().unwrap_or(0);
    let at = |p: &Vec<Cell>, t: usize| p[t.min(p.len() - 1)];
    for t in 0..horizon {
        let mut seen = BTreeSet::new();
        for p in &per_agent {
            if !seen.insert(at(p, t)) {
                return false;
            }
        }
        if t > 0 {
            for i in 0..per_agent.len() {
                for j in 0..per_agent.len() {
                    let (a, b) = (per_agent[i], per_agent[j]);
                    if i != j && at(a, t) == at(b, t - 1) && at(b, t) == at(a, t - 1) {
                        return false;
                    }
                }
            }
        }
    }
    true
}

fn random_cell(rng: &mut ChaCha8Rng, size: [i32; 3], margin: i32) -> Cell {
    Cell::new(
        rng.random_range(-margin..size[0] + margin),
        rng.random_range(-margin..size[1] + margin),
        rng.random_range(-margin..size[2] + margin),
    )
}

/// A solved instance's paths with a random corruption (or none).
pub fn mutate_paths(inst: &GridInstance, solved: &[AgentPath], rng: &mut ChaCha8Rng) -> Vec<AgentPath> {
    let mut paths = solved.to_vec();
    let n = paths.len();
    let a = rng.random_range(0..n);
    let len = paths[a].path.len();
    match rng.random_range(0..12) {
        0 | 1 | 2 => {}
        3 => {
            let i = rng.random_range(0..len);
            paths[a].path[i] = random_cell(rng, inst.size, 1);
        }
        4 => {
            if len > 2 {
                let i = rng.random_range(1..len - 1);
                paths[a].path.remove(i);
            }
        }
        5 => {
            let i = rng.random_range(0..len);
            let c = paths[a].path[i];
            paths[a].path.insert(i, c);
        }
        6 => {
            let b = (a + 1) % n;
            let t = rng.random_range(0..paths[b].path.len().max(1));
            if let Some(&c) = paths[b].path.get(t) {
                if t < len {
                    paths[a].path[t] = c;
                }
            }
        }
        7 => {
            paths.remove(a);
        }
        8 => {
            paths[a].path.truncate(rng.random_range(0..len));
        }
        9 => {
            let o = inst.obstacles[rng.random_range(0..inst.obstacles.len())];
            let i = rng.random_range(0..len);
            paths[a].path[i] = o;
        }
        10 => {
            // walk onto another agent's goal early and sit there
            let b = (a + 1) % n;
            let goal = inst.agents[inst.agent_index(&paths[b].name).unwrap()].goal;
            let last = *paths[a].path.last().unwrap();
            let mut detour = straight_walk(last, goal);
            detour.extend(straight_walk(goal, last).into_iter().skip(1));
            paths[a].path.extend(detour.into_iter().skip(1));
        }
        _ => {
            paths[a].path.reverse();
        }
    }
    paths
}

fn straight_walk(from: Cell, to: Cell) -> Vec<Cell> {
    let mut out = vec![from];
    let mut c = from;
    while c != to {
        if c.x != to.x {
            c.x += (to.x - c.x).signum();
        } else if c.y != to.y {
            c.y += (to.y - c.y).signum();
        } else {
            c.z += (to.z - c.z).signum();
        }
        out.push(c);
    }
    out
}

pub fn grid_equivalence(pairs: usize) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let per_instance = 20;
    let start = Instant::now();
    let (mut disagree, mut valid, mut done) = (0, 0, 0);
    let mut seed = 0;
    while done < pairs {
        let inst = generate_instance(seed, [10, 10, 10], 20, 4).expect("solvable instance");
        seed += 1;
        let solved = bfs_oracle(&inst).expect("generated instances are solvable");
        for _ in 0..per_instance.min(pairs - done) {
            let paths = mutate_paths(&inst, &solved, &mut rng);
            let ours = validate_paths(&inst, &paths).is_valid();
            let oracle = brute_force_grid_valid(&inst, &paths);
            disagree += usize::from(ours != oracle);
            valid += usize::from(oracle);
            done += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        disagree == 0 && secs < 5.0,
        format!("{done} pairs ({valid} valid), {disagree} disagreements, {secs:.2}s"),
    )
}

pub fn grid_oracle_loop(instances: u64) -> Outcome {
    let start = Instant::now();
    let mut first_try = 0;
    for seed in 0..instances {
        let inst = generate_instance(1000 + seed, [10, 10, 10], 20, 4).expect("solvable instance");
        let mut backend = ScriptedBackend::new(ScriptedPolicy::Oracle);
        let log = run_grid_attempts(&inst, &mut backend, 5).expect("scripted backend never errors");
        first_try += usize::from(log.success && log.attempts_to_success == Some(1));
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        first_try as u64 == instances && secs < 60.0,
        format!("{first_try}/{instances} solved on the first attempt, {secs:.2}s"),
    )
}

pub fn feedback_goldens() -> Outcome {
    let spacing = goldens::grid_cases().into_iter().find(|(n, _)| *n == "grid_spacing").map(|(_, t)| t).unwrap_or_default();
    let first_line_ok = spacing.lines().next() == Some(goldens::PAPER_SPACING_LINE);
    let bad = goldens::mismatches();
    Outcome::new(
        first_line_ok && bad.is_empty(),
        format!(
            "reference spacing line {}; {} golden cases, {} mismatched{}",
            if first_line_ok { "byte-equal" } else { "DIFFERS" },
            goldens::all_cases().len(),
            bad.len(),
            if bad.is_empty() { String::new() } else { format!(": {}", bad.join(", ")) }
        ),
    )
}

// ---------------------------------------------------------------- kinematics

/// Homogeneous-transform forward kinematics.
pub fn fk_oracle(arm: &ArmModel<f64>, q: &JointConfig<f64>) -> Vector3<f64> {
    let b = arm.base.position;
    let mut t = Isometry3::from_parts(
        Translation3::new(b.x, b.y, b.z),
        UnitQuaternion::from_axis_angle(&Vector3::z_axis(), arm.base.yaw + q.q[0]),
    );
    for i in 0..DOF {
        if i < 3 {
            // positive pitch lifts the link, which is a negative turn about +y
            t *= Isometry3::rotation(Vector3::y() * -q.q[i + 1]);
        }
        t *= Isometry3::translation(arm.link_lengths[i], 0.0, 0.0);
    }
    t.translation.vector
}

fn v(p: Vec3<f64>) -> Vector3<f64> {
    Vector3::new(p.x, p.y, p.z)
}

fn joint_frames(arm: &ArmModel<f64>, q: &JointConfig<f64>) -> Vec<Vector3<f64>> {
    let b = arm.base.position;
    let mut t = Isometry3::from_parts(
        Translation3::new(b.x, b.y, b.z),
        UnitQuaternion::from_axis_angle(&Vector3::z_axis(), arm.base.yaw + q.q[0]),
    );
    let mut pts = vec![t.translation.vector];
    for i in 0..DOF {
        if i < 3 {
            t *= Isometry3::rotation(Vector3::y() * -q.q[i + 1]);
        }
        t *= Isometry3::translation(arm.link_lengths[i], 0.0, 0.0);
        pts.push(t.translation.vector);
    }
    pts
}

/// Zooming grid search for the minimum of `f` over the unit square.
fn grid_min2(f: impl Fn(f64, f64) -> f64) -> f64 {
    let n = 100;
    let (mut lo_s, mut hi_s, mut lo_t, mut hi_t) = (0.0, 1.0, 0.0, 1.0);
    let mut best = f64::INFINITY;
    for _ in 0..4 {
        let (mut bs, mut bt) = (0.0, 0.0);
        for i in 0..=n {
            let s = lo_s + (hi_s - lo_s) * i as f64 / n as f64;
            for j in 0..=n {
                let t = lo_t + (hi_t - lo_t) * j as f64 / n as f64;
                let d = f(s, t);
                if d < best {
                    best = d;
                    bs = s;
                    bt = t;
                }
            }
        }
        let (ws, wt) = (2.0 * (hi_s - lo_s) / n as f64, 2.0 * (hi_t - lo_t) / n as f64);
        (lo_s, hi_s) = ((bs - ws).max(0.0), (bs + ws).min(1.0));
        (lo_t, hi_t) = ((bt - wt).max(0.0), (bt + wt).min(1.0));
    }
    best
}

fn obstacle_point_distance(o: &Obstacle<f64>, p: Vector3<f64>) -> f64 {
    match o {
        Obstacle::Aabb { min, max, .. } => {
            let c = Vector3::new(p.x.clamp(min.x, max.x), p.y.clamp(min.y, max.y), p.z.clamp(min.z, max.z));
            (p - c).norm()
        }
        Obstacle::Sphere { center, radius, .. } => ((p - v(*center)).norm() - radius).max(0.0),
    }
}

/// Collision by dense sampling of link axes against each other and obstacles.
pub fn sampled_collision(arms: &[ArmModel<f64>], x: &CompositeConfig<f64>, obstacles: &[Obstacle<f64>]) -> bool {
    let frames: Vec<Vec<Vector3<f64>>> = arms.iter().zip(&x.per_arm).map(|(a, q)| joint_frames(a, q)).collect();
    for i in 0..arms.len() {
        for li in 0..DOF {
            let (a0, a1) = (frames[i][li], frames[i][li + 1]);
            let r = arms[i].link_radius;
            for o in obstacles {
                if grid_min2(|s, _| obstacle_point_distance(o, a0 + (a1 - a0) * s)) < r {
                    return true;
                }
            }
            for j in (i + 1)..arms.len() {
                for lj in 0..DOF {
                    let (b0, b1) = (frames[j][lj], frames[j][lj + 1]);
                    let d = grid_min2(|s, t| ((a0 + (a1 - a0) * s) - (b0 + (b1 - b0) * t)).norm());
                    if d < r + arms[j].link_radius {
                        return true;
                    }
                }
            }
        }
    }
    false
}

pub fn random_config(arms: &[ArmModel<f64>], rng: &mut ChaCha8Rng) -> CompositeConfig<f64> {
    CompositeConfig::new(arms.iter().map(|a| a.random_config(rng)).collect())
}

pub fn test_arm() -> ArmModel<f64> {
    ArmModel::new("arm", Pose::new(Vec3::new(0.1, -0.2, 0.05), 0.4))
}

pub fn fk_oracle_agreement(n: usize) -> (usize, f64) {
    let arm = test_arm();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let q = arm.random_config(&mut rng);
        worst = worst.max((v(end_effector(&arm, &q)) - fk_oracle(&arm, &q)).norm());
    }
    (n, worst)
}

pub fn ik_round_trip(n: usize) -> (usize, f64) {
    let arm = test_arm();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut ok = 0;
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let target = end_effector(&arm, &arm.random_config(&mut rng));
        if let Ok(q) = IkSolver::with_seed(i as u64).solve(&arm, target, None) {
            let within = arm.check_limits(&q).is_ok();
            let err = (fk_oracle(&arm, &q) - v(target)).norm();
            worst = worst.max(err);
            ok += usize::from(within && err <= 1e-3);
        }
    }
    (ok, worst)
}

/// Arm whose shoulder pitch tops out below vertical.
pub fn capped_arm() -> ArmModel<f64> {
    let mut arm = ArmModel::new("capped", Pose::new(Vec3::new(0.0, 0.0, 0.0), 0.0));
    arm.joint_limits[1] = JointLimit { lo: -std::f64::consts::FRAC_PI_2, hi: 1.2 };
    arm
}

/// Out-of-workspace targets: half beyond the reach sphere of `test_arm`, half
/// on the sphere of `capped_arm` above its pitch cap.
pub fn unreachable_targets(n: usize) -> Vec<(ArmModel<f64>, Vec3<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let (far, capped) = (test_arm(), capped_arm());
    (0..n)
        .map(|i| {
            let heading = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            if i % 2 == 0 {
                let elev = rng.random_range(-1.5..1.5f64);
                let d = far.reach() + rng.random_range(0.01..1.0);
                let dir = Vec3::new(elev.cos() * heading.cos(), elev.cos() * heading.sin(), elev.sin());
                (far.clone(), far.base.position + dir * d)
            } else {
                let elev = rng.random_range(1.3..std::f64::consts::FRAC_PI_2);
                let dir = Vec3::new(elev.cos() * heading.cos(), elev.cos() * heading.sin(), elev.sin());
                (capped.clone(), capped.base.position + dir * capped.reach())
            }
        })
        .collect()
}

pub fn ik_unreachable(n: usize) -> usize {
    unreachable_targets(n)
        .iter()
        .enumerate()
        .filter(|(i, (arm, t))| IkSolver::with_seed(*i as u64).solve(arm, *t, None).is_err())
        .count()
}

/// Closest end effector over a joint grid; used to confirm a target is out of reach.
pub fn grid_search_min_distance(arm: &ArmModel<f64>, target: Vec3<f64>, per_joint: usize) -> f64 {
    let steps = |j: usize| -> Vec<f64> {
        let l = arm.joint_limits[j];
        (0..per_joint).map(|k| l.lo + (l.hi - l.lo) * k as f64 / (per_joint - 1) as f64).collect()
    };
    let mut best = f64::INFINITY;
    for &a in &steps(0) {
        for &b in &steps(1) {
            for &c in &steps(2) {
                for &d in &steps(3) {
                    let q = JointConfig::new([a, b, c, d]);
                    best = best.min((fk_oracle(arm, &q) - v(target)).norm());
                }
            }
        }
    }
    best
}

pub fn collision_scenes() -> Vec<(Vec<ArmModel<f64>>, Vec<Obstacle<f64>>)> {
    let sort = reset(TaskId::SortBlocks, 0);
    let pack = reset(TaskId::PackBoxes, 0);
    let ball = Obstacle::sphere("ball", Vec3::new(0.0, -0.1, 0.25), 0.08);
    vec![
        (sort.arms.clone(), vec![ball.clone()]),
        (pack.arms.clone(), pack.fixtures.iter().filter(|o| o.name() == "wall").cloned().chain([ball]).collect()),
    ]
}

pub fn collision_agreement(n: usize) -> (usize, usize, usize) {
    let scenes = collision_scenes();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (mut disagree, mut hits) = (0, 0);
    for i in 0..n {
        let (arms, obstacles) = &scenes[i % scenes.len()];
        let x = random_config(arms, &mut rng);
        let ours = in_collision(arms, &x, obstacles);
        disagree += usize::from(ours != sampled_collision(arms, &x, obstacles));
        hits += usize::from(ours);
    }
    (n, hits, disagree)
}

pub fn kinematics(n_ik: usize, n_unreachable: usize, n_collision: usize) -> Outcome {
    let (ok, worst) = ik_round_trip(n_ik);
    let rejected = ik_unreachable(n_unreachable);
    let (cases, hits, disagree) = collision_agreement(n_collision);
    Outcome::new(
        ok == n_ik && rejected == n_unreachable && disagree == 0,
        format!(
            "IK {ok}/{n_ik} within 1e-3 (worst {worst:.2e}); {rejected}/{n_unreachable} unreachable rejected; \
             collision {disagree} disagreements on {cases} configs ({hits} colliding)"
        ),
    )
}

// ---------------------------------------------------------------- planner

pub fn two_arm_problem(seed: u64) -> PlanningProblem<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arms = vec![
        ArmModel::new("left", Pose::new(Vec3::new(-0.5, 0.0, 0.0), 0.0)),
        ArmModel::new("right", Pose::new(Vec3::new(0.5, 0.0, 0.0), std::f64::consts::PI)),
    ];
    let n_obs = rng.random_range(0..=3);
    let obstacles: Vec<Obstacle<f64>> = (0..n_obs)
        .map(|k| {
            let c = Vec3::new(rng.random_range(-0.4..0.4), rng.random_range(-0.5..0.5), rng.random_range(0.1..0.6));
            if rng.random_bool(0.5) {
                Obstacle::sphere(format!("o{k}"), c, rng.random_range(0.03..0.1))
            } else {
                let h = Vec3::new(rng.random_range(0.02..0.1), rng.random_range(0.02..0.1), rng.random_range(0.02..0.1));
                Obstacle::aabb(format!("o{k}"), c - h, c + h)
            }
        })
        .collect();
    let mut free = || loop {
        let x = random_config(&arms, &mut rng);
        if !in_collision(&arms, &x, &obstacles) {
            break x;
        }
    };
    let (x_init, goal) = (free(), free());
    PlanningProblem::new(arms, obstacles, x_init, vec![goal]).with_seed(seed)
}

/// Endpoint and edge checks done here, not through the trajectory's own method.
pub fn revalidate(traj: &[CompositeConfig<f64>], p: &PlanningProblem<f64>) -> bool {
    traj.len() >= 2
        && traj.first() == Some(&p.x_init)
        && traj.last() == p.goals.last()
        && traj.windows(2).all(|w| tabletalk_core::kinematics::segment_free(&p.arms, &w[0], &w[1], &p.obstacles))
}

pub fn planner_validity(n: u64, repeat: u64) -> Outcome {
    let (mut solved, mut invalid) = (0, 0);
    for seed in 0..n {
        let p = two_arm_problem(seed);
        if let Ok(t) = plan_rrt_connect(&p) {
            solved += 1;
            let s = shortcut(&t, &p, 200);
            invalid += usize::from(!revalidate(&t.waypoints, &p) || !revalidate(&s.waypoints, &p));
        }
    }
    let mut nondeterministic = 0;
    for seed in 0..repeat {
        let p = two_arm_problem(seed);
        let (a, b) = (plan_rrt_connect(&p), plan_rrt_connect(&p));
        let same = match (&a, &b) {
            (Ok(x), Ok(y)) => x.waypoints == y.waypoints && x.stats.same_work(&y.stats),
            (Err(_), Err(_)) => true,
            _ => false,
        };
        nondeterministic += usize::from(!same);
    }
    Outcome::new(
        invalid == 0 && nondeterministic == 0 && solved > 0,
        format!(
            "{solved}/{n} solved, {invalid} failed revalidation; {nondeterministic}/{repeat} reruns differed"
        ),
    )
}

pub fn waypoint_benefit(seeds: u64) -> Outcome {
    let start = Instant::now();
    let scenarios = place_scenarios(0..seeds);
    let (mut direct, mut staged) = (Vec::new(), Vec::new());
    let (mut sd, mut sw) = (0, 0);
    for s in &scenarios {
        let d = run_method(s, Method::Direct, DEFAULT_ITERATION_BUDGET);
        let w = run_method(s, Method::Waypoints, DEFAULT_ITERATION_BUDGET);
        direct.push(d.nodes);
        staged.push(w.nodes);
        sd += usize::from(d.success);
        sw += usize::from(w.success);
    }
    let secs = start.elapsed().as_secs_f64();
    let (md, mw) = (median(&mut direct), median(&mut staged));
    Outcome::new(
        scenarios.len() as u64 == seeds && sw >= sd && mw < md && secs < 1800.0,
        format!(
            "{} scenarios: success direct {sd}, waypoints {sw}; median nodes direct {md}, waypoints {mw}; {secs:.1}s",
            scenarios.len()
        ),
    )
}

// ---------------------------------------------------------------- dialog

pub fn seat_team(task: TaskId, mode: TeamMode, policies: &[String]) -> Team {
    let names = match mode {
        TeamMode::Dialog => task.spec().agents,
        TeamMode::Central => vec![CENTRAL_PLANNER.to_string()],
    };
    let seats = names
        .into_iter()
        .zip(policies.iter().cycle())
        .map(|(name, p)| Seat { name, backend: BackendSpec::scripted(p).build(None).expect("known policy") })
        .collect();
    Team { mode, seats }
}

/// Protocol rules checked on the raw JSON of a log.
pub fn independent_audit(lines: &[Value]) -> Vec<String> {
    let mut problems = Vec::new();
    let header = &lines[0];
    if header["type"] != "episode" {
        return vec!["first event is not the episode header".into()];
    }
    let p = &header["payload"];
    let roster: Vec<String> = serde_json::from_value(p["roster"].clone()).unwrap_or_default();
    let m = p["max_messages"].as_u64().unwrap() as usize;
    let k = p["max_attempts"].as_u64().unwrap() as usize;
    let t = p["horizon"].as_u64().unwrap() as usize;
    let mut scene: Scene = serde_json::from_value(p["scene"].clone()).expect("scene in header");

    let mut dialog: Vec<String> = Vec::new();
    let mut dialog_key = (usize::MAX, u64::MAX);
    let mut verdicts: HashMap<(usize, u64), bool> = HashMap::new();
    let mut attempts: BTreeMap<usize, usize> = BTreeMap::new();
    let mut rounds = BTreeSet::new();
    for (i, e) in lines.iter().enumerate() {
        if e["index"].as_u64() != Some(i as u64 + 1) {
            problems.push(format!("gap at event {}", i + 1));
        }
        let round = e["round"].as_u64().unwrap() as usize;
        let pl = &e["payload"];
        let attempt = pl["attempt"].as_u64().unwrap_or(0);
        match e["type"].as_str().unwrap() {
            "message" => {
                if (round, attempt) != dialog_key {
                    dialog_key = (round, attempt);
                    dialog.clear();
                }
                dialog.push(pl["speaker"].as_str().unwrap().to_string());
                if dialog.len() > m {
                    problems.push(format!("round {round} attempt {attempt}: more than {m} messages"));
                }
            }
            "plan" => {
                let proposer = pl["proposer"].as_str().unwrap();
                if dialog.last().map(String::as_str) != Some(proposer) {
                    problems.push(format!("round {round}: plan not from the last speaker"));
                }
                if !roster.iter().all(|r| dialog.contains(r)) {
                    problems.push(format!("round {round}: proposal before everyone spoke"));
                }
                let (_, v) = validate_text(pl["text"].as_str().unwrap(), &scene);
                if v.report.passed() != pl["passed"].as_bool().unwrap() {
                    problems.push(format!("round {round}: logged verdict differs from revalidation"));
                }
                verdicts.insert((round, attempt), v.report.passed());
            }
            "feedback" => *attempts.entry(round).or_default() += 1,
            "trajectory" => {
                *attempts.entry(round).or_default() += 1;
                if verdicts.get(&(round, attempt)) != Some(&true) {
                    problems.push(format!("round {round}: executed a plan that does not validate"));
                }
            }
            "reward" => scene = serde_json::from_value(pl["scene"].clone()).expect("scene after execution"),
            "round_end" => {
                rounds.insert(round);
            }
            _ => {}
        }
    }
    for (r, n) in attempts {
        if n > k {
            problems.push(format!("round {r}: {n} attempts, budget {k}"));
        }
    }
    if rounds.len() > t {
        problems.push(format!("{} rounds, horizon {t}", rounds.len()));
    }
    problems
}

pub const POLICIES: [&str; 7] =
    ["oracle", "premature", "chatterbox", "always_invalid", "fuzzer", "feedback_corrector", "echo:EXECUTE"];

pub fn protocol_invariants(episodes: u64) -> Outcome {
    let mut problems = Vec::new();
    let (mut premature, mut overflow, mut executed) = (0, 0, 0);
    for i in 0..episodes {
        let task = TaskId::ALL[(i % 3) as usize];
        let mode = if i % 5 == 4 { TeamMode::Central } else { TeamMode::Dialog };
        let policies: Vec<String> = (0..3)
            .map(|j| match POLICIES[((i / 3) as usize + j * (1 + i as usize % 2)) % POLICIES.len()] {
                "fuzzer" => format!("fuzzer:{i}"),
                p => p.to_string(),
            })
            .collect();
        let roster_len = if mode == TeamMode::Central { 1 } else { task.spec().agents.len() };
        let params = ProtocolParams {
            k: [1, 2, 3][(i % 3) as usize],
            m: [None, Some(roster_len), Some(roster_len + 1)][(i / 3 % 3) as usize],
            t: 4,
            no_history: i % 7 == 0,
            no_feedback: i % 11 == 0,
        };
        let mut team = seat_team(task, mode, &policies);
        let config = EpisodeConfig { task, mode, params, seed: i };
        let log = run_episode(&config, &mut team, &mut NullSink).expect("valid roster and params");
        let lines: Vec<Value> = log
            .to_jsonl()
            .lines()
            .map(|l| serde_json::from_str(l).expect("jsonl line"))
            .collect();
        for p in independent_audit(&lines) {
            problems.push(format!("episode {i} ({task:?}, {policies:?}): {p}"));
        }
        for l in &lines {
            match (l["type"].as_str(), l["payload"]["kind"].as_str()) {
                (Some("violation"), Some("premature_proposal")) => premature += 1,
                (Some("violation"), Some("dialog_overflow")) => overflow += 1,
                (Some("trajectory"), _) => executed += 1,
                _ => {}
            }
        }
    }
    let detail = format!(
        "{episodes} episodes, {} violations of the rules ({premature} premature proposals and {overflow} overflows \
         rejected, {executed} plans executed){}",
        problems.len(),
        problems.first().map(|p| format!("; first: {p}")).unwrap_or_default()
    );
    Outcome::new(problems.is_empty() && premature > 0 && overflow > 0 && executed > 0, detail)
}

// ---------------------------------------------------------------- bench

#[derive(Debug, PartialEq)]
pub struct Recomputed {
    pub success: bool,
    pub steps: usize,
    pub mean_replans: f64,
}

/// Reads one episode log and recomputes its metrics from the raw events.
pub fn read_log(path: &Path) -> Recomputed {
    let text = std::fs::read_to_string(path).expect("log readable");
    let mut per_round: BTreeMap<u64, usize> = BTreeMap::new();
    let mut ended = Vec::new();
    let (mut success, mut steps) = (false, 0);
    for line in text.lines() {
        let e: Value = serde_json::from_str(line).expect("jsonl line");
        let round = e["round"].as_u64().unwrap();
        match e["type"].as_str().unwrap() {
            "feedback" => *per_round.entry(round).or_default() += 1,
            "trajectory" => {
                *per_round.entry(round).or_default() += 1;
                steps += 1;
            }
            "reward" => success = success || e["payload"]["reward"] == 1,
            "round_end" => ended.push(round),
            _ => {}
        }
    }
    let total: usize = ended.iter().map(|r| per_round.get(r).copied().unwrap_or(0)).sum();
    let mean_replans = if ended.is_empty() { 0.0 } else { total as f64 / ended.len() as f64 };
    Recomputed { success, steps, mean_replans }
}

pub fn oracle_bench(seeds: u64, root: &Path) -> Outcome {
    let mut problems = Vec::new();
    for task in TaskId::ALL {
        let config = BenchConfig::new(task, Condition::Dialog, 0..seeds, BackendSpec::scripted("oracle")).with_out_dir(root);
        let episodes = run_bench(&config).expect("bench runs");
        let ok = episodes.iter().filter(|e| e.metrics.as_ref().is_some_and(|m| m.success)).count();
        if ok as u64 != seeds {
            problems.push(format!("{task:?}: {ok}/{seeds} succeeded"));
        }
    }
    let rows = write_summary(root).expect("summary written");
    let on_disk = read_summary(&root.join("summary.csv")).expect("summary readable");
    if rows != on_disk {
        problems.push("summary.csv does not round-trip".into());
    }
    for row in &on_disk {
        let dir = root.join(&row.task).join(&row.condition);
        let logs: Vec<Recomputed> = (0..seeds).map(|s| read_log(&dir.join(format!("{s}.jsonl")))).collect();
        let n = logs.len() as f64;
        let wins: Vec<&Recomputed> = logs.iter().filter(|l| l.success).collect();
        let rate = wins.len() as f64 / n;
        let steps = (!wins.is_empty()).then(|| wins.iter().map(|l| l.steps as f64).sum::<f64>() / wins.len() as f64);
        let replans = logs.iter().map(|l| l.mean_replans).sum::<f64>() / n;
        if row.success_rate != rate || row.mean_steps != steps || row.mean_replans != replans || row.episodes != logs.len() {
            problems.push(format!("{}: summary {:?} differs from logs ({rate}, {steps:?}, {replans})", row.task, row));
        }
        if rate != 1.0 {
            problems.push(format!("{}: success rate {rate}", row.task));
        }
    }
    let summary: Vec<String> = on_disk
        .iter()
        .map(|r| format!("{} {:.2} ({:.2} steps)", r.task, r.success_rate, r.mean_steps.unwrap_or(f64::NAN)))
        .collect();
    Outcome::new(
        problems.is_empty() && on_disk.len() == 3,
        format!("{}; {}", summary.join(", "), if problems.is_empty() { "summary matches raw logs".to_string() } else { problems.join("; ") }),
    )
}

pub fn feedback_correction(seeds: u64) -> Outcome {
    let mut replans = Vec::new();
    let mut failures = 0;
    for mode in [TeamMode::Dialog, TeamMode::Central] {
        for seed in 0..seeds {
            let task = TaskId::SortBlocks;
            let mut team = seat_team(task, mode, &["feedback_corrector".to_string()]);
            let config = EpisodeConfig { task, mode, params: ProtocolParams::for_task(task), seed };
            let log = run_episode(&config, &mut team, &mut NullSink).expect("episode runs");
            failures += usize::from(!log.metrics.success);
            replans.push(log.metrics.mean_replans);
        }
    }
    let mean = replans.iter().sum::<f64>() / replans.len() as f64;
    let spread = replans.iter().fold(0.0f64, |m, r| m.max((r - 2.0).abs()));
    Outcome::new(
        failures == 0 && spread == 0.0,
        format!("{} episodes, {failures} failed, mean replans {mean} (max deviation {spread})", replans.len()),
    )
}
