use serde::{Deserialize, Serialize};

use crate::dialog::{FailedAttempt, HistoryEntry, Message};
use crate::world::{describe, Observation, Point, Scene, TaskId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Robot,
    CentralPlanner,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationScope {
    Own,
    Full,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentProfile {
    pub name: String,
    pub kind: AgentKind,
    pub task_context: String,
    pub capability_text: String,
    pub communication_instruction: String,
    pub observation_scope: ObservationScope,
    pub role_reminder_text: String,
    pub response_instruction: String,
}

/// Prompt sections in their fixed order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub task_context: String,
    pub round_history: Option<String>,
    pub agent_capability: String,
    pub communication_instruction: String,
    pub current_observation: String,
    pub plan_feedback: Option<String>,
}

pub const SORT_INSTRUCTION: &str = "Say which block you can move and where it should go, and ask for help with blocks outside your reach. End with PROCEED while others still need to speak.";
pub const STACK_INSTRUCTION: &str = "Tell the others what is on your side and what you hold, since they cannot see it, and agree who places the next recipe item. End with PROCEED while others still need to speak.";
pub const PACK_INSTRUCTION: &str = "Agree who picks or places which item and which bin it goes to, so your paths stay apart. End with PROCEED while others still need to speak.";
pub const CENTRAL_INSTRUCTION: &str = "Choose one action for every robot and give the plan right away.";

pub fn communication_instruction(task: TaskId, kind: AgentKind) -> &'static str {
    match (kind, task) {
        (AgentKind::CentralPlanner, _) => CENTRAL_INSTRUCTION,
        (AgentKind::Robot, TaskId::SortBlocks) => SORT_INSTRUCTION,
        (AgentKind::Robot, TaskId::StackOrder) => STACK_INSTRUCTION,
        (AgentKind::Robot, TaskId::PackBoxes) => PACK_INSTRUCTION,
    }
}

fn join_and(items: &[String]) -> String {
    match items {
        [] => String::new(),
        [one] => one.clone(),
        [init @ .., last] => format!("{} and {last}", init.join(", ")),
    }
}

fn fmt_point(p: Point) -> String {
    format!("({:.2}, {:.2}, {:.2})", p.x, p.y, p.z)
}

fn goal_text(scene: &Scene) -> String {
    match scene.task_id {
        TaskId::SortBlocks => {
            let goals: Vec<String> = scene.goals.iter().map(|(b, z)| format!("{b} on {z}")).collect();
            format!("sort the blocks onto their goal zones: {}", goals.join(", "))
        }
        TaskId::StackOrder => format!(
            "stack food on the cutting_board in this order, bottom to top: {}",
            scene.recipe.join(", ")
        ),
        TaskId::PackBoxes => {
            let items: Vec<String> = scene.objects.iter().map(|o| o.name.clone()).collect();
            format!("pack {} into the bins", join_and(&items))
        }
    }
}

fn rules_text(task: TaskId) -> &'static str {
    match task {
        TaskId::SortBlocks => "Seven zones, zone1 to zone7, form a line on the table. A robot can only pick from and place onto zones it can reach, so a block may have to be passed along through a zone two robots share. A zone holds one block.",
        TaskId::StackOrder => "The cutting_board sits between the robots. Each robot reaches and sees only its own side of the table plus the board. Items go on the board one at a time in recipe order: the first is PLACEd on cutting_board, each later one on the item currently on top. At most one robot may PLACE on the board per round, and a robot holds one item at a time.",
        TaskId::PackBoxes => "A 0.30 m tall wall separates the table slots from the bins. Every PICK and PLACE needs a PATH of 3D points (x, y, z) in meters from the robot's current gripper position to the action target, evenly spaced and at most 0.25 m apart. A PICK target is 0.05 m above the item's center and a PLACE target is 0.09 m above the bin's center. Paths must clear the wall and the other robot.",
    }
}

fn verbs_text(task: TaskId) -> &'static str {
    match task {
        TaskId::SortBlocks => "move one block with PICK <block> PLACE <zone>, both zones within reach, or WAIT",
        TaskId::StackOrder => "PICK <item>, PLACE <item> <target>, or WAIT",
        TaskId::PackBoxes => "PICK <item> PATH [...], PLACE <item> <bin> PATH [...], or WAIT",
    }
}

fn example_line(task: TaskId, robot: &str) -> String {
    match task {
        TaskId::SortBlocks => format!("NAME {robot} ACTION PICK <block> PLACE <zone>"),
        TaskId::StackOrder => format!("NAME {robot} ACTION PLACE <item> <target>"),
        TaskId::PackBoxes => format!("NAME {robot} ACTION PICK <item> PATH [(x, y, z), (x, y, z), ...]"),
    }
}

fn reach_text(scene: &Scene, robot: &str) -> String {
    if scene.task_id == TaskId::PackBoxes {
        let i = scene.agent_index(robot).expect("robot exists");
        format!("reach every table slot and bin from a base at {}", fmt_point(scene.arms[i].base.position))
    } else {
        format!("reach {}", join_and(scene.reach(robot)))
    }
}

impl AgentProfile {
    pub fn new(scene: &Scene, kind: AgentKind, name: &str) -> Self {
        let robots = scene.agents();
        let task = scene.task_id;
        let rules = rules_text(task);
        match kind {
            AgentKind::Robot => {
                let others: Vec<String> = robots.iter().filter(|r| *r != name).cloned().collect();
                Self {
                    name: name.into(),
                    kind,
                    task_context: format!(
                        "You are robot {name}, collaborating with {} to {}.\n{rules}",
                        join_and(&others),
                        goal_text(scene)
                    ),
                    capability_text: format!(
                        "You can {}. Each round you either {}.",
                        reach_text(scene, name),
                        verbs_text(task)
                    ),
                    communication_instruction: format!(
                        "Discuss with {} to coordinate and complete the task together. {}",
                        join_and(&others),
                        communication_instruction(task, kind)
                    ),
                    observation_scope: ObservationScope::Own,
                    role_reminder_text: format!("Never forget you are {name}!"),
                    response_instruction: format!(
                        "Respond very concisely by either 1) saying what you will do and ending with PROCEED, or 2) once every other robot has spoken in the current chat, giving the final plan with one line per robot:\nEXECUTE\n{}",
                        robots.iter().map(|r| example_line(task, r)).collect::<Vec<_>>().join("\n")
                    ),
                }
            }
            AgentKind::CentralPlanner => {
                let reaches: Vec<String> =
                    robots.iter().map(|r| format!("{r} can {}.", reach_text(scene, r))).collect();
                Self {
                    name: name.into(),
                    kind,
                    task_context: format!(
                        "You are a central planner directing robots {} to {}.\n{rules}",
                        join_and(&robots),
                        goal_text(scene)
                    ),
                    capability_text: format!(
                        "You can give each robot one action per round: {}.\n{}",
                        verbs_text(task),
                        reaches.join("\n")
                    ),
                    communication_instruction: format!(
                        "Plan for {} together. {CENTRAL_INSTRUCTION}",
                        join_and(&robots)
                    ),
                    observation_scope: ObservationScope::Full,
                    role_reminder_text: "Never forget you are the central planner!".into(),
                    response_instruction: format!(
                        "Respond very concisely with the final plan, one line per robot:\nEXECUTE\n{}",
                        robots.iter().map(|r| example_line(task, r)).collect::<Vec<_>>().join("\n")
                    ),
                }
            }
        }
    }

    pub fn system_line(&self) -> String {
        match self.kind {
            AgentKind::Robot => format!("You are robot {}, one member of a team of robot arms.", self.name),
            AgentKind::CentralPlanner => "You are the central planner for a team of robot arms.".into(),
        }
    }
}

pub fn render_message(m: &Message) -> String {
    format!("[{}]: {}", m.speaker, m.text)
}

fn render_history(history: &[HistoryEntry]) -> String {
    history
        .iter()
        .map(|h| {
            let what = match &h.executed {
                Some(plan) => {
                    let lines: Vec<&str> = plan.lines().filter(|l| l.starts_with("NAME")).collect();
                    format!("executed {}", lines.join("; "))
                }
                None => "no plan was executed".into(),
            };
            format!("Round {}: {what}", h.round + 1)
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn render_feedback(feedback: &[FailedAttempt]) -> String {
    feedback
        .iter()
        .map(|f| {
            let mut block = String::from("Previous chat:");
            for m in &f.transcript {
                block.push('\n');
                block.push_str(&render_message(m));
            }
            block.push('\n');
            block.push_str(&f.feedback.text);
            block
        })
        .collect::<Vec<_>>()
        .join("\n")
}

impl PromptBundle {
    pub fn new(profile: &AgentProfile, history: &[HistoryEntry], feedback: &[FailedAttempt], observation: &Observation) -> Self {
        Self {
            task_context: profile.task_context.clone(),
            round_history: (!history.is_empty()).then(|| render_history(history)),
            agent_capability: profile.capability_text.clone(),
            communication_instruction: profile.communication_instruction.clone(),
            current_observation: describe(observation),
            plan_feedback: (!feedback.is_empty()).then(|| render_feedback(feedback)),
        }
    }

    pub fn render(&self, profile: &AgentProfile, dialog: &[Message], reminder: Option<&str>) -> String {
        let mut parts = vec![self.task_context.clone(), self.agent_capability.clone()];
        if let Some(h) = &self.round_history {
            parts.push(format!("Previously:\n{h}"));
        }
        parts.push(format!("At current round:\n{}", self.current_observation));
        parts.push(self.communication_instruction.clone());
        parts.push(profile.role_reminder_text.clone());
        parts.push(profile.response_instruction.clone());
        if let Some(f) = &self.plan_feedback {
            parts.push(f.clone());
        }
        let mut chat = String::from("Current chat:");
        for m in dialog {
            chat.push('\n');
            chat.push_str(&render_message(m));
        }
        parts.push(chat);
        if let Some(r) = reminder {
            parts.push(r.to_string());
        }
        parts.push("Your response is:".into());
        parts.join("\n")
    }
}

/// The full prompt text for one turn.
pub fn compose_prompt(
    profile: &AgentProfile,
    history: &[HistoryEntry],
    feedback: &[FailedAttempt],
    observation: &Observation,
    dialog: &[Message],
    reminder: Option<&str>,
) -> String {
    PromptBundle::new(profile, history, feedback, observation).render(profile, dialog, reminder)
}
