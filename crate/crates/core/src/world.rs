//! Kinematic desk-scale task environments.
//!
//! Three tasks cover the collaboration axes the framework is meant to
//! exercise:
//!
//! * `sort_blocks`: three arms along a line of seven zones, each reaching
//!   three zones, shared observation, sequential hand-offs.
//! * `stack_order`: two arms on opposite sides of a cutting board, each seeing
//!   only its own side, stacking items in recipe order.
//! * `pack_boxes`: two facing arms packing items over a wall into a bin,
//!   shared observation, high workspace overlap, waypoint paths required.
//!
//! Transitions are symbolic. Geometry only matters for IK and collision.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Obstacle, Pose, Vec3};
use crate::kinematics::{end_effector, ArmModel, CompositeConfig, JointConfig};
use crate::plan::{ActionSpec, ValidatedPlan, Verb};

pub type Point = Vec3<f64>;

/// Height of the end effector above an object's center when grasping.
pub const GRASP_OFFSET: f64 = 0.05;
pub const BOARD: &str = "cutting_board";
/// Tucked posture: upright first link, the rest folded back toward the base.
pub const HOME_Q: [f64; 4] = [0.0, 1.5, -0.25, -2.5];

const WORKSPACE_MIN: [f64; 3] = [-1.0, -1.0, -0.01];
const WORKSPACE_MAX: [f64; 3] = [1.0, 1.0, 1.0];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorldError {
    #[error("unknown task id `{0}`")]
    UnknownTask(String),
    #[error("agent `{agent}` is not part of task {task}")]
    UnknownAgent { task: TaskId, agent: String },
    #[error("plan was validated against a different scene")]
    StaleValidation,
    #[error("invalid action: {0}")]
    InvalidAction(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskId {
    SortBlocks,
    StackOrder,
    PackBoxes,
}

impl TaskId {
    pub const ALL: [TaskId; 3] = [TaskId::SortBlocks, TaskId::StackOrder, TaskId::PackBoxes];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskId::SortBlocks => "sort_blocks",
            TaskId::StackOrder => "stack_order",
            TaskId::PackBoxes => "pack_boxes",
        }
    }

    pub fn spec(self) -> TaskSpec {
        match self {
            TaskId::SortBlocks => TaskSpec {
                id: self,
                agents: vec!["Alice".into(), "Bob".into(), "Chad".into()],
                shared_observation: true,
                combined_pick_place: true,
                waypoints_required: false,
                default_horizon: 15,
            },
            TaskId::StackOrder => TaskSpec {
                id: self,
                agents: vec!["Chad".into(), "Dave".into()],
                shared_observation: false,
                combined_pick_place: false,
                waypoints_required: false,
                default_horizon: 15,
            },
            TaskId::PackBoxes => TaskSpec {
                id: self,
                agents: vec!["Alice".into(), "Bob".into()],
                shared_observation: true,
                combined_pick_place: false,
                waypoints_required: true,
                default_horizon: 15,
            },
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskId {
    type Err = WorldError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskId::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| WorldError::UnknownTask(s.to_string()))
    }
}

/// Static properties of a task family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: TaskId,
    pub agents: Vec<String>,
    pub shared_observation: bool,
    /// Accepts the `PICK x PLACE y` single-line action and desugars it.
    pub combined_pick_place: bool,
    pub waypoints_required: bool,
    pub default_horizon: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Support {
    TableZone { id: String },
    StackedOn { name: String },
    InContainer { id: String },
    HeldBy { agent: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectState {
    pub name: String,
    pub pose: Point,
    pub support: Support,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZoneKind {
    Table,
    Board,
    BinSlot,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Zone {
    pub id: String,
    pub kind: ZoneKind,
    pub center: Point,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReachRegion {
    pub agent: String,
    pub zones: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub task_id: TaskId,
    pub objects: Vec<ObjectState>,
    pub fixtures: Vec<Obstacle<f64>>,
    pub arms: Vec<ArmModel<f64>>,
    pub arm_configs: Vec<JointConfig<f64>>,
    pub zones: Vec<Zone>,
    pub reach_regions: Vec<ReachRegion>,
    /// Object name to goal zone (`sort_blocks`).
    pub goals: BTreeMap<String, String>,
    /// Bottom-to-top stacking order (`stack_order`).
    pub recipe: Vec<String>,
    pub round_index: u32,
    pub rng_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum Gripper {
    Empty,
    Holding { object: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub id: String,
    pub position: Point,
    pub occupied: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub agent: String,
    pub visible_objects: Vec<ObjectState>,
    pub own_gripper: Gripper,
    pub reach: Vec<String>,
    /// Whether this view is common to every agent (described in third person).
    pub shared: bool,
    /// Every agent's gripper for shared views, only the observer's otherwise.
    pub grippers: Vec<GripperView>,
    /// Zone coordinates, present only for waypoint tasks.
    pub landmarks: Vec<Landmark>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GripperView {
    pub agent: String,
    pub state: Gripper,
    /// Present only for waypoint tasks.
    pub position: Option<Point>,
}

fn p(x: f64, y: f64, z: f64) -> Point {
    Vec3::new(x, y, z)
}

fn zone(id: impl Into<String>, kind: ZoneKind, x: f64, y: f64) -> Zone {
    Zone { id: id.into(), kind, center: p(x, y, 0.0) }
}

fn arm(name: &str, x: f64, y: f64, yaw: f64) -> ArmModel<f64> {
    ArmModel::new(name, Pose::new(p(x, y, 0.0), yaw))
}

/// Deterministic home posture: end effector 0.15 m in front of the base, 0.35 m up.
pub fn home_config(arm: &ArmModel<f64>) -> JointConfig<f64> {
    let mut q = JointConfig::new(HOME_Q);
    arm.clamp(&mut q);
    q
}

/// Slab just under the tabletop so arms cannot route beneath it.
fn table() -> Obstacle<f64> {
    Obstacle::aabb("table", p(-1.2, -1.2, -0.10), p(1.2, 1.2, -0.05))
}

pub fn object_half_height(task: TaskId) -> f64 {
    match task {
        TaskId::SortBlocks => 0.025,
        TaskId::StackOrder => 0.015,
        TaskId::PackBoxes => 0.04,
    }
}

/// Builds the deterministic scene for `(task_id, seed)`.
pub fn reset(task_id: TaskId, seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ce4_e000_0000_0000 ^ (task_id as u64));
    let h = object_half_height(task_id);
    let mut scene = match task_id {
        TaskId::SortBlocks => {
            let zones: Vec<Zone> = (1..=7)
                .map(|k| zone(format!("zone{k}"), ZoneKind::Table, -0.45 + 0.15 * (k - 1) as f64, 0.0))
                .collect();
            let arms = vec![
                arm("Alice", -0.30, -0.40, std::f64::consts::FRAC_PI_2),
                arm("Bob", 0.0, -0.40, std::f64::consts::FRAC_PI_2),
                arm("Chad", 0.30, -0.40, std::f64::consts::FRAC_PI_2),
            ];
            let reach = |a: &str, ks: [usize; 3]| ReachRegion {
                agent: a.into(),
                zones: ks.iter().map(|k| format!("zone{k}")).collect(),
            };
            let goals: BTreeMap<String, String> = [
                ("blue_block", "zone2"),
                ("pink_block", "zone4"),
                ("yellow_block", "zone6"),
            ]
            .into_iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect();
            let objects = loop {
                let mut ids: Vec<usize> = (0..7).collect();
                ids.shuffle(&mut rng);
                let objects: Vec<ObjectState> = goals
                    .keys()
                    .zip(&ids)
                    .map(|(name, &z)| ObjectState {
                        name: name.clone(),
                        pose: zones[z].center + p(0.0, 0.0, h),
                        support: Support::TableZone { id: zones[z].id.clone() },
                    })
                    .collect();
                let solved = objects.iter().all(|o| Some(zone_of(o)) == goals.get(&o.name).map(|s| s.as_str()));
                if !solved {
                    break objects;
                }
            };
            Scene {
                task_id,
                objects,
                fixtures: vec![table()],
                arm_configs: vec![],
                arms,
                zones,
                reach_regions: vec![reach("Alice", [1, 2, 3]), reach("Bob", [3, 4, 5]), reach("Chad", [5, 6, 7])],
                goals,
                recipe: vec![],
                round_index: 0,
                rng_seed: seed,
            }
        }
        TaskId::StackOrder => {
            let mut zones = vec![zone(BOARD, ZoneKind::Board, 0.0, 0.0)];
            let ys = [-0.3, -0.1, 0.1, 0.3];
            for (i, y) in ys.iter().enumerate() {
                zones.push(zone(format!("left{}", i + 1), ZoneKind::Table, -0.25, *y));
            }
            for (i, y) in ys.iter().enumerate() {
                zones.push(zone(format!("right{}", i + 1), ZoneKind::Table, 0.25, *y));
            }
            let mut fillings = vec!["beef_patty", "cheese", "cucumber", "ham", "lettuce", "tomato"];
            fillings.shuffle(&mut rng);
            let recipe: Vec<String> = ["bread_slice1", fillings[0], fillings[1], "bread_slice2"]
                .iter()
                .map(|s| s.to_string())
                .collect();
            let mut items: Vec<String> = recipe.clone();
            items.push(fillings[2].to_string());
            items.push(fillings[3].to_string());
            let mut slots: Vec<usize> = (1..zones.len()).collect();
            slots.shuffle(&mut rng);
            let objects = items
                .iter()
                .zip(&slots)
                .map(|(name, &z)| ObjectState {
                    name: name.clone(),
                    pose: zones[z].center + p(0.0, 0.0, h),
                    support: Support::TableZone { id: zones[z].id.clone() },
                })
                .collect();
            let side = |a: &str, prefix: &str| ReachRegion {
                agent: a.into(),
                zones: (1..=4).map(|i| format!("{prefix}{i}")).chain([BOARD.to_string()]).collect(),
            };
            Scene {
                task_id,
                objects,
                fixtures: vec![table()],
                arms: vec![arm("Chad", 0.55, 0.0, std::f64::consts::PI), arm("Dave", -0.55, 0.0, 0.0)],
                arm_configs: vec![],
                zones,
                reach_regions: vec![side("Chad", "right"), side("Dave", "left")],
                goals: BTreeMap::new(),
                recipe,
                round_index: 0,
                rng_seed: seed,
            }
        }
        TaskId::PackBoxes => {
            let zones = vec![
                zone("table1", ZoneKind::Table, -0.30, -0.12),
                zone("table2", ZoneKind::Table, -0.30, 0.12),
                zone("table3", ZoneKind::Table, -0.18, -0.12),
                zone("table4", ZoneKind::Table, -0.18, 0.12),
                zone("bin1", ZoneKind::BinSlot, 0.18, -0.12),
                zone("bin2", ZoneKind::BinSlot, 0.18, 0.12),
                zone("bin3", ZoneKind::BinSlot, 0.30, -0.12),
                zone("bin4", ZoneKind::BinSlot, 0.30, 0.12),
            ];
            let mut slots: Vec<usize> = (0..4).collect();
            slots.shuffle(&mut rng);
            let objects = ["apple", "lemon", "soup_can"]
                .iter()
                .zip(&slots)
                .map(|(name, &z)| ObjectState {
                    name: name.to_string(),
                    pose: zones[z].center + p(0.0, 0.0, h),
                    support: Support::TableZone { id: zones[z].id.clone() },
                })
                .collect();
            let all: Vec<String> = zones.iter().map(|z| z.id.clone()).collect();
            Scene {
                task_id,
                objects,
                fixtures: vec![table(), Obstacle::aabb("wall", p(-0.03, -0.25, 0.0), p(0.03, 0.25, 0.30))],
                arms: vec![
                    arm("Alice", 0.0, -0.50, std::f64::consts::FRAC_PI_2),
                    arm("Bob", 0.0, 0.50, -std::f64::consts::FRAC_PI_2),
                ],
                arm_configs: vec![],
                zones,
                reach_regions: vec![
                    ReachRegion { agent: "Alice".into(), zones: all.clone() },
                    ReachRegion { agent: "Bob".into(), zones: all },
                ],
                goals: BTreeMap::new(),
                recipe: vec![],
                round_index: 0,
                rng_seed: seed,
            }
        }
    };
    scene.objects.sort_by(|a, b| a.name.cmp(&b.name));
    scene.arm_configs = scene.arms.iter().map(home_config).collect();
    scene
}

fn zone_of(o: &ObjectState) -> &str {
    match &o.support {
        Support::TableZone { id } | Support::InContainer { id } => id,
        _ => "",
    }
}

impl Scene {
    pub fn spec(&self) -> TaskSpec {
        self.task_id.spec()
    }

    pub fn agents(&self) -> Vec<String> {
        self.arms.iter().map(|a| a.name.clone()).collect()
    }

    pub fn agent_index(&self, agent: &str) -> Option<usize> {
        self.arms.iter().position(|a| a.name == agent)
    }

    pub fn object(&self, name: &str) -> Option<&ObjectState> {
        self.objects.iter().find(|o| o.name == name)
    }

    pub fn zone(&self, id: &str) -> Option<&Zone> {
        self.zones.iter().find(|z| z.id == id)
    }

    pub fn reach(&self, agent: &str) -> &[String] {
        self.reach_regions
            .iter()
            .find(|r| r.agent == agent)
            .map(|r| r.zones.as_slice())
            .unwrap_or(&[])
    }

    pub fn current_config(&self) -> CompositeConfig<f64> {
        CompositeConfig::new(self.arm_configs.clone())
    }

    pub fn set_arm_configs(&mut self, x: &CompositeConfig<f64>) {
        assert_eq!(x.per_arm.len(), self.arms.len());
        self.arm_configs = x.per_arm.clone();
    }

    pub fn ee_position(&self, agent: &str) -> Option<Point> {
        let i = self.agent_index(agent)?;
        Some(end_effector(&self.arms[i], &self.arm_configs[i]))
    }

    pub fn held_by(&self, agent: &str) -> Option<&ObjectState> {
        self.objects
            .iter()
            .find(|o| matches!(&o.support, Support::HeldBy { agent: a } if a == agent))
    }

    /// Zone an object rests in, following stacks down to their base zone.
    pub fn base_zone(&self, name: &str) -> Option<String> {
        let mut cur = self.object(name)?;
        for _ in 0..=self.objects.len() {
            match &cur.support {
                Support::TableZone { id } | Support::InContainer { id } => return Some(id.clone()),
                Support::StackedOn { name } => cur = self.object(name)?,
                Support::HeldBy { .. } => return None,
            }
        }
        None
    }

    /// Items on the cutting board, bottom to top.
    pub fn board_stack(&self) -> Vec<String> {
        let mut stack = Vec::new();
        let mut below: Option<String> = None;
        loop {
            let next = self.objects.iter().find(|o| match (&o.support, &below) {
                (Support::TableZone { id }, None) => id == BOARD,
                (Support::StackedOn { name }, Some(b)) => name == b,
                _ => false,
            });
            match next {
                Some(o) if stack.len() <= self.objects.len() => {
                    stack.push(o.name.clone());
                    below = Some(o.name.clone());
                }
                _ => return stack,
            }
        }
    }

    /// Whether a zone holds an object directly (stack tops are not zones).
    pub fn zone_occupied(&self, id: &str) -> bool {
        self.objects.iter().any(|o| zone_of(o) == id)
    }

    pub fn grasp_point(&self, object: &str) -> Option<Point> {
        self.object(object).map(|o| o.pose + p(0.0, 0.0, GRASP_OFFSET))
    }

    /// Where `object` would rest after a PLACE onto `target` (a zone or, for
    /// stacking, the name of the current top item).
    pub fn resting_pose(&self, target: &str) -> Option<Point> {
        let h = object_half_height(self.task_id);
        if let Some(z) = self.zone(target) {
            if z.kind == ZoneKind::Board {
                return Some(z.center + p(0.0, 0.0, h + 0.03 * self.board_stack().len() as f64));
            }
            return Some(z.center + p(0.0, 0.0, h));
        }
        self.object(target).map(|o| o.pose + p(0.0, 0.0, 2.0 * h))
    }

    pub fn place_point(&self, target: &str) -> Option<Point> {
        self.resting_pose(target).map(|r| r + p(0.0, 0.0, GRASP_OFFSET))
    }

    /// End-effector target for one action step.
    pub fn action_target(&self, action: &ActionSpec) -> Option<Point> {
        match action.verb {
            Verb::Pick => self.grasp_point(action.args.first()?),
            Verb::Place => self.place_point(action.args.get(1)?),
            Verb::Wait => None,
        }
    }

    /// Task success predicate.
    pub fn is_success(&self) -> bool {
        match self.task_id {
            TaskId::SortBlocks => self
                .goals
                .iter()
                .all(|(obj, z)| self.object(obj).is_some_and(|o| matches!(&o.support, Support::TableZone { id } if id == z))),
            TaskId::StackOrder => self.board_stack() == self.recipe,
            TaskId::PackBoxes => self.objects.iter().all(|o| {
                matches!(&o.support, Support::InContainer { id } if self.zone(id).is_some_and(|z| z.kind == ZoneKind::BinSlot))
            }),
        }
    }

    /// Structural invariants: workspace bounds, unique support slots, an
    /// acyclic support graph, and at most one held object per agent.
    pub fn check_invariants(&self) -> Result<(), String> {
        for o in &self.objects {
            for i in 0..3 {
                if !(o.pose[i] >= WORKSPACE_MIN[i] && o.pose[i] <= WORKSPACE_MAX[i]) {
                    return Err(format!("{} outside workspace", o.name));
                }
            }
        }
        let mut slots = BTreeSet::new();
        for o in &self.objects {
            let slot = match &o.support {
                Support::HeldBy { agent } => format!("held:{agent}"),
                other => format!("{other:?}"),
            };
            if !slots.insert(slot.clone()) {
                return Err(format!("support slot {slot} shared"));
            }
            if let Support::HeldBy { agent } = &o.support {
                if self.agent_index(agent).is_none() {
                    return Err(format!("{} held by unknown agent {agent}", o.name));
                }
            }
            if let Support::TableZone { id } | Support::InContainer { id } = &o.support {
                if self.zone(id).is_none() {
                    return Err(format!("{} rests on unknown zone {id}", o.name));
                }
            }
        }
        for o in &self.objects {
            let mut seen = BTreeSet::new();
            let mut cur = o;
            while let Support::StackedOn { name } = &cur.support {
                if !seen.insert(name.clone()) {
                    return Err(format!("support cycle through {name}"));
                }
                cur = self.object(name).ok_or_else(|| format!("{} stacked on missing {name}", o.name))?;
            }
        }
        Ok(())
    }

    /// Stable fingerprint used to bind validated plans to this exact scene.
    pub fn fingerprint(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        serde_json::to_string(self).expect("scene serializes").hash(&mut h);
        h.finish()
    }
}

/// The agent's view of the scene.
pub fn observe(scene: &Scene, agent: &str) -> Result<Observation, WorldError> {
    if scene.agent_index(agent).is_none() {
        return Err(WorldError::UnknownAgent { task: scene.task_id, agent: agent.to_string() });
    }
    let reach: Vec<String> = scene.reach(agent).to_vec();
    let stack: BTreeSet<String> = scene.board_stack().into_iter().collect();
    let visible: Vec<ObjectState> = scene
        .objects
        .iter()
        .filter(|o| {
            if scene.spec().shared_observation {
                return true;
            }
            match &o.support {
                Support::HeldBy { agent: a } => a == agent,
                Support::TableZone { id } => reach.contains(id),
                Support::StackedOn { .. } | Support::InContainer { .. } => stack.contains(&o.name),
            }
        })
        .cloned()
        .collect();
    let gripper = |a: &str| match scene.held_by(a) {
        Some(o) => Gripper::Holding { object: o.name.clone() },
        None => Gripper::Empty,
    };
    let waypoint_task = scene.spec().waypoints_required;
    let shared = scene.spec().shared_observation;
    let grippers = scene
        .agents()
        .into_iter()
        .filter(|a| shared || a == agent)
        .map(|a| GripperView {
            state: gripper(&a),
            position: if waypoint_task { scene.ee_position(&a) } else { None },
            agent: a,
        })
        .collect();
    Ok(Observation {
        agent: agent.to_string(),
        visible_objects: visible,
        own_gripper: gripper(agent),
        reach,
        shared,
        grippers,
        landmarks: if waypoint_task {
            scene
                .zones
                .iter()
                .map(|z| Landmark { id: z.id.clone(), position: z.center, occupied: scene.zone_occupied(&z.id) })
                .collect()
        } else {
            vec![]
        },
    })
}

/// Full observation for a planner that controls every arm.
pub fn observe_all(scene: &Scene, observer: &str) -> Observation {
    let waypoint_task = scene.spec().waypoints_required;
    let grippers = scene
        .agents()
        .into_iter()
        .map(|a| GripperView {
            state: match scene.held_by(&a) {
                Some(o) => Gripper::Holding { object: o.name.clone() },
                None => Gripper::Empty,
            },
            position: if waypoint_task { scene.ee_position(&a) } else { None },
            agent: a,
        })
        .collect();
    Observation {
        agent: observer.to_string(),
        visible_objects: scene.objects.clone(),
        own_gripper: Gripper::Empty,
        reach: vec![],
        shared: true,
        grippers,
        landmarks: if waypoint_task {
            scene
                .zones
                .iter()
                .map(|z| Landmark { id: z.id.clone(), position: z.center, occupied: scene.zone_occupied(&z.id) })
                .collect()
        } else {
            vec![]
        },
    }
}

fn fmt_point(v: Point) -> String {
    format!("({:.2}, {:.2}, {:.2})", v.x, v.y, v.z)
}

/// Templated scene description: one line per object in name order, then the
/// gripper lines. Shared views are written in third person so every agent
/// gets the same text.
pub fn describe(obs: &Observation) -> String {
    if obs.visible_objects.is_empty() {
        return "You see nothing.".to_string();
    }
    let coords = !obs.landmarks.is_empty() || obs.grippers.iter().any(|g| g.position.is_some());
    let mut objects: Vec<&ObjectState> = obs.visible_objects.iter().collect();
    objects.sort_by(|a, b| a.name.cmp(&b.name));
    let mut lines: Vec<String> = objects
        .iter()
        .map(|o| {
            let base = match &o.support {
                Support::TableZone { id } => format!("{} is on {}", o.name, id),
                Support::StackedOn { name } => format!("{} is on {}", o.name, name),
                Support::InContainer { id } => format!("{} is in {}", o.name, id),
                Support::HeldBy { agent } if *agent == obs.agent && !obs.shared => {
                    format!("{} is in your gripper", o.name)
                }
                Support::HeldBy { agent } => format!("{} is held by {}", o.name, agent),
            };
            if coords {
                format!("{base} at {}", fmt_point(o.pose))
            } else {
                base
            }
        })
        .collect();
    for l in &obs.landmarks {
        let state = if l.occupied { "occupied" } else { "free" };
        lines.push(format!("{} is {state} at {}", l.id, fmt_point(l.position)));
    }
    for g in &obs.grippers {
        let who = if obs.shared { format!("{}'s gripper", g.agent) } else { "Your gripper".to_string() };
        lines.push(match &g.state {
            Gripper::Empty => format!("{who} is empty"),
            Gripper::Holding { object } => format!("{who} is holding {object}"),
        });
        if let Some(pos) = g.position {
            lines.push(format!("{who} is at {}", fmt_point(pos)));
        }
    }
    lines.join("\n")
}

/// Applies the symbolic effects of a validated plan. Reward is 1 iff the task
/// success predicate holds afterwards.
pub fn apply(scene: &Scene, plan: &ValidatedPlan) -> Result<(Scene, u8), WorldError> {
    if plan.scene_fingerprint() != scene.fingerprint() {
        return Err(WorldError::StaleValidation);
    }
    let mut next = scene.clone();
    // targets resolve against the pre-round scene so simultaneous actions do not interact
    let mut moves: HashMap<String, (Support, Point)> = HashMap::new();
    for action in &plan.plan().actions {
        let steps = &action.steps;
        let last = steps.last().expect("validated actions are non-empty");
        match last.verb {
            Verb::Wait => {}
            Verb::Pick => {
                let obj = &last.args[0];
                let pose = scene.grasp_point(obj).ok_or_else(|| WorldError::InvalidAction(obj.clone()))?
                    - p(0.0, 0.0, GRASP_OFFSET);
                moves.insert(obj.clone(), (Support::HeldBy { agent: action.agent.clone() }, pose));
            }
            Verb::Place => {
                let (obj, target) = (&last.args[0], &last.args[1]);
                let pose = scene.resting_pose(target).ok_or_else(|| WorldError::InvalidAction(target.clone()))?;
                let support = match scene.zone(target).map(|z| z.kind) {
                    Some(ZoneKind::BinSlot) => Support::InContainer { id: target.clone() },
                    Some(_) => Support::TableZone { id: target.clone() },
                    None => Support::StackedOn { name: target.clone() },
                };
                moves.insert(obj.clone(), (support, pose));
            }
        }
    }
    for o in next.objects.iter_mut() {
        if let Some((support, pose)) = moves.remove(&o.name) {
            o.support = support;
            o.pose = pose;
        }
    }
    if let Some(x) = plan.final_config() {
        next.set_arm_configs(x);
    }
    next.round_index += 1;
    let reward = u8::from(next.is_success());
    Ok((next, reward))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reset_is_deterministic() {
        for t in TaskId::ALL {
            let a = serde_json::to_string(&reset(t, 7)).unwrap();
            let b = serde_json::to_string(&reset(t, 7)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn sort_blocks_places_three_blocks_on_distinct_zones() {
        for seed in 0..50 {
            let s = reset(TaskId::SortBlocks, seed);
            assert_eq!(s.zones.len(), 7);
            assert_eq!(s.objects.len(), 3);
            let zones: BTreeSet<&str> = s.objects.iter().map(zone_of).collect();
            assert_eq!(zones.len(), 3);
            assert!(zones.iter().all(|z| z.starts_with("zone")));
            assert!(s.check_invariants().is_ok());
            assert!(!s.is_success());
        }
    }

    #[test]
    fn unknown_task_and_agent() {
        assert!(matches!("sweep".parse::<TaskId>(), Err(WorldError::UnknownTask(_))));
        let s = reset(TaskId::PackBoxes, 0);
        assert!(matches!(observe(&s, "Zed"), Err(WorldError::UnknownAgent { .. })));
    }

    #[test]
    fn stack_order_observation_is_asymmetric() {
        let s = reset(TaskId::StackOrder, 3);
        let chad = observe(&s, "Chad").unwrap();
        assert!(chad
            .visible_objects
            .iter()
            .all(|o| matches!(&o.support, Support::TableZone { id } if id.starts_with("right") || id == BOARD)));
        let dave = observe(&s, "Dave").unwrap();
        assert_eq!(chad.visible_objects.len() + dave.visible_objects.len(), s.objects.len());
    }

    #[test]
    fn shared_observation_tasks_describe_identically() {
        for t in [TaskId::SortBlocks, TaskId::PackBoxes] {
            let s = reset(t, 11);
            let texts: Vec<String> = s.agents().iter().map(|a| describe(&observe(&s, a).unwrap())).collect();
            assert!(texts.windows(2).all(|w| w[0] == w[1]));
            let views: Vec<Vec<ObjectState>> =
                s.agents().iter().map(|a| observe(&s, a).unwrap().visible_objects).collect();
            assert!(views.windows(2).all(|w| w[0] == w[1]));
        }
    }

    #[test]
    fn describe_templates() {
        let obs = Observation {
            agent: "Alice".into(),
            visible_objects: vec![ObjectState {
                name: "blue_block".into(),
                pose: p(0.0, 0.0, 0.0),
                support: Support::TableZone { id: "zone5".into() },
            }],
            own_gripper: Gripper::Empty,
            reach: vec![],
            shared: false,
            grippers: vec![GripperView { agent: "Alice".into(), state: Gripper::Empty, position: None }],
            landmarks: vec![],
        };
        assert_eq!(describe(&obs), "blue_block is on zone5\nYour gripper is empty");
        assert_eq!(describe(&obs), describe(&obs.clone()));
        let empty = Observation { visible_objects: vec![], ..obs };
        assert_eq!(describe(&empty), "You see nothing.");
    }

    #[test]
    fn home_configs_are_collision_free() {
        for t in TaskId::ALL {
            let s = reset(t, 0);
            assert!(crate::kinematics::collides(&s.arms, &s.current_config(), &s.fixtures).is_free(), "{t}");
        }
    }
}
