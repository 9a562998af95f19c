//! Agent-side plumbing: the prompt each agent sees, and the backends that
//! answer it (chat-completion HTTP, scripted policies, a human at the service).

mod http;
mod human;
mod prompt;
pub mod scripted;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dialog::{DialogState, FailedAttempt, HistoryEntry, Message, ProtocolParams};
use crate::gridpath::GridInstance;
use crate::plan::TaskGrammar;
use crate::world::{observe, observe_all, Observation, Point, Scene, TaskId};

pub use http::{ChatHttpBackend, RetryPolicy, API_KEY_ENV};
pub use human::{HumanBackend, HumanChannel};
pub use prompt::{
    communication_instruction, compose_prompt, render_message, AgentKind, AgentProfile, ObservationScope,
    PromptBundle, CENTRAL_INSTRUCTION,
};
pub use scripted::{ScriptedBackend, ScriptedPolicy};

pub const DEFAULT_TEMPERATURE: f64 = 0.6;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub system: String,
    pub user: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Capability {
    pub reach: Vec<String>,
    pub base: Point,
}

/// Everything a dialog participant can see on its turn, in structured form.
/// The prompt text is rendered from the same data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DialogView {
    pub task: TaskId,
    pub me: String,
    pub kind: AgentKind,
    pub robots: Vec<String>,
    pub roster: Vec<String>,
    pub round: usize,
    pub observation: Observation,
    /// The speaker's own capability, or every robot's for the central planner.
    pub capabilities: BTreeMap<String, Capability>,
    pub goals: BTreeMap<String, String>,
    pub recipe: Vec<String>,
    pub grammar: TaskGrammar,
    pub transcript: Vec<Message>,
    /// Failed attempts this round; empty when feedback is disabled.
    pub feedback: Vec<FailedAttempt>,
    /// Earlier rounds; empty when history is disabled.
    pub history: Vec<HistoryEntry>,
    /// Whether a proposal from this turn would be accepted.
    pub can_propose: bool,
    pub reminder: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TurnView {
    Dialog(Box<DialogView>),
    Grid(GridInstance),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub agent: String,
    pub prompt: Prompt,
    pub view: TurnView,
}

#[derive(Debug, Error, Clone, PartialEq, Serialize, Deserialize)]
pub enum BackendError {
    #[error("backend unavailable after {attempts} attempt(s): {last}")]
    Unavailable { attempts: usize, last: String },
    #[error("malformed backend response: {0}")]
    Malformed(String),
    #[error("missing credential: set {0}")]
    MissingCredential(String),
    #[error("channel closed")]
    Closed,
    #[error("backend configuration: {0}")]
    Config(String),
}

pub trait Backend: Send {
    fn respond(&mut self, turn: &Turn) -> Result<String, BackendError>;

    fn is_human(&self) -> bool {
        false
    }
}

fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    ChatHttp {
        endpoint: String,
        model: String,
        #[serde(default = "default_temperature")]
        temperature: f64,
    },
    Scripted {
        policy: String,
    },
    Human {
        channel: String,
    },
}

impl BackendSpec {
    pub fn scripted(policy: &str) -> Self {
        BackendSpec::Scripted { policy: policy.into() }
    }

    pub fn is_human(&self) -> bool {
        matches!(self, BackendSpec::Human { .. })
    }

    /// Builds the backend. Human backends need the channel the service will
    /// deliver into.
    pub fn build(&self, human: Option<HumanChannel>) -> Result<Box<dyn Backend>, BackendError> {
        Ok(match self {
            BackendSpec::ChatHttp { endpoint, model, temperature } => {
                Box::new(ChatHttpBackend::from_env(endpoint, model, *temperature)?)
            }
            BackendSpec::Scripted { policy } => Box::new(ScriptedBackend::new(policy.parse()?)),
            BackendSpec::Human { channel } => {
                let ch = human.ok_or_else(|| BackendError::Config(format!("no delivery channel for {channel}")))?;
                Box::new(HumanBackend::new(ch))
            }
        })
    }
}

/// Builds the turn for `me`: profile, observation, prompt text and view.
pub fn dialog_turn(
    scene: &Scene,
    kind: AgentKind,
    me: &str,
    roster: &[String],
    state: &DialogState,
    params: &ProtocolParams,
) -> Turn {
    let robots = scene.agents();
    let observation = match kind {
        AgentKind::Robot => observe(scene, me).expect("roster checked against the task"),
        AgentKind::CentralPlanner => observe_all(scene, me),
    };
    let capabilities: BTreeMap<String, Capability> = robots
        .iter()
        .filter(|r| kind == AgentKind::CentralPlanner || *r == me)
        .map(|r| {
            let i = scene.agent_index(r).expect("robot exists");
            (r.clone(), Capability { reach: scene.reach(r).to_vec(), base: scene.arms[i].base.position })
        })
        .collect();
    let history: &[HistoryEntry] = if params.no_history { &[] } else { &state.history };
    let feedback: &[FailedAttempt] = if params.no_feedback { &[] } else { &state.feedback };
    let reminder = state.reminders.get(me).cloned();
    let can_propose = roster.iter().all(|r| r == me || state.spoken.contains(r));
    let profile = AgentProfile::new(scene, kind, me);
    let prompt = Prompt {
        system: profile.system_line(),
        user: compose_prompt(&profile, history, feedback, &observation, &state.messages, reminder.as_deref()),
    };
    let view = DialogView {
        task: scene.task_id,
        me: me.to_string(),
        kind,
        robots,
        roster: roster.to_vec(),
        round: state.round,
        observation,
        capabilities,
        goals: scene.goals.clone(),
        recipe: scene.recipe.clone(),
        grammar: TaskGrammar::for_task(scene.task_id),
        transcript: state.messages.clone(),
        feedback: feedback.to_vec(),
        history: history.to_vec(),
        can_propose,
        reminder,
    };
    Turn { agent: me.to_string(), prompt, view: TurnView::Dialog(Box::new(view)) }
}
