use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use tabletalk_core::agents::BackendSpec;
use tabletalk_core::dialog::{ProtocolParams, TeamMode, CENTRAL_PLANNER};
use tabletalk_core::gridpath::{generate_instance, GridInstance};
use tabletalk_core::world::TaskId;

use crate::ServiceError;

pub const GRID_TASK: &str = "grid";
pub const GRID_SIZE: [i32; 3] = [10, 10, 10];
pub const GRID_OBSTACLES: usize = 20;
pub const GRID_AGENTS: usize = 4;

/// A tabletop task or the grid path-planning toy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum TaskKind {
    Arm(TaskId),
    Grid,
}

impl FromStr for TaskKind {
    type Err = ServiceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == GRID_TASK {
            return Ok(TaskKind::Grid);
        }
        s.parse().map(TaskKind::Arm).map_err(|e| ServiceError::BadRequest(format!("{e}")))
    }
}

impl TryFrom<String> for TaskKind {
    type Error = ServiceError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<TaskKind> for String {
    fn from(t: TaskKind) -> String {
        t.to_string()
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskKind::Arm(t) => f.write_str(t.as_str()),
            TaskKind::Grid => f.write_str(GRID_TASK),
        }
    }
}

/// Episode configuration, as posted to `/episodes` or read from a file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub task: TaskKind,
    #[serde(default = "default_mode")]
    pub mode: TeamMode,
    /// Seat names in speaking order. Defaults to the task's robots, or the
    /// single planner for central and grid episodes.
    #[serde(default)]
    pub roster: Option<Vec<String>>,
    /// Backend per seat name.
    pub backends: BTreeMap<String, BackendSpec>,
    #[serde(default)]
    pub params: Option<ProtocolParams>,
    #[serde(default)]
    pub seed: u64,
    /// Grid episodes only; generated from `seed` when absent.
    #[serde(default)]
    pub grid: Option<GridInstance>,
}

fn default_mode() -> TeamMode {
    TeamMode::Dialog
}

impl EpisodeSpec {
    pub fn from_file(path: &Path) -> Result<Self, ServiceError> {
        let text = std::fs::read_to_string(path).map_err(|e| ServiceError::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| ServiceError::BadRequest(format!("{}: {e}", path.display())))
    }

    pub fn roster(&self) -> Vec<String> {
        if let Some(r) = &self.roster {
            return r.clone();
        }
        match (self.task, self.mode) {
            (TaskKind::Arm(t), TeamMode::Dialog) => t.spec().agents,
            _ => vec![CENTRAL_PLANNER.to_string()],
        }
    }

    pub fn params(&self) -> ProtocolParams {
        match (&self.params, self.task) {
            (Some(p), _) => p.clone(),
            (None, TaskKind::Arm(t)) => ProtocolParams::for_task(t),
            (None, TaskKind::Grid) => ProtocolParams::default(),
        }
    }

    /// Checks the roster against the task and the backends, and returns the
    /// human seat if there is one.
    pub fn validate(&self) -> Result<Option<String>, ServiceError> {
        let roster = self.roster();
        let expected = match (self.task, self.mode) {
            (TaskKind::Arm(t), TeamMode::Dialog) => t.spec().agents,
            _ => vec![CENTRAL_PLANNER.to_string()],
        };
        if roster != expected {
            return Err(ServiceError::InvalidRoster(format!("expected seats {expected:?}, got {roster:?}")));
        }
        if let Some(extra) = self.backends.keys().find(|k| !roster.contains(k)) {
            return Err(ServiceError::InvalidRoster(format!("backend given for unknown seat {extra}")));
        }
        if let Some(missing) = roster.iter().find(|n| !self.backends.contains_key(*n)) {
            return Err(ServiceError::InvalidRoster(format!("no backend for {missing}")));
        }
        let humans: Vec<&String> = roster.iter().filter(|n| self.backends[*n].is_human()).collect();
        if humans.len() > 1 {
            return Err(ServiceError::InvalidRoster(format!("at most one human agent, got {}", humans.len())));
        }
        self.params().check(roster.len()).map_err(|e| ServiceError::BadRequest(e.to_string()))?;
        if self.grid.is_some() && self.task != TaskKind::Grid {
            return Err(ServiceError::BadRequest("`grid` is only valid for grid episodes".into()));
        }
        if let Some(g) = &self.grid {
            g.check().map_err(|e| ServiceError::BadRequest(e.to_string()))?;
        }
        Ok(humans.first().map(|s| s.to_string()))
    }

    pub fn grid_instance(&self) -> Result<GridInstance, ServiceError> {
        match &self.grid {
            Some(g) => Ok(g.clone()),
            None => generate_instance(self.seed, GRID_SIZE, GRID_OBSTACLES, GRID_AGENTS)
                .map_err(|e| ServiceError::BadRequest(e.to_string())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(json: &str) -> EpisodeSpec {
        serde_json::from_str(json).unwrap()
    }

    #[test]
    fn one_human_is_fine_two_are_not() {
        let one = spec(
            r#"{"task":"sort_blocks","backends":{
                "Alice":{"kind":"human","channel":"web"},
                "Bob":{"kind":"scripted","policy":"oracle"},
                "Chad":{"kind":"scripted","policy":"oracle"}}}"#,
        );
        assert_eq!(one.validate().unwrap(), Some("Alice".into()));
        let two = spec(
            r#"{"task":"sort_blocks","backends":{
                "Alice":{"kind":"human","channel":"a"},
                "Bob":{"kind":"human","channel":"b"},
                "Chad":{"kind":"scripted","policy":"oracle"}}}"#,
        );
        assert!(matches!(two.validate(), Err(ServiceError::InvalidRoster(_))));
    }

    #[test]
    fn roster_must_match_task() {
        let s = spec(r#"{"task":"stack_order","roster":["Dave","Chad"],"backends":{}}"#);
        assert!(matches!(s.validate(), Err(ServiceError::InvalidRoster(_))));
        let s = spec(r#"{"task":"stack_order","backends":{"Chad":{"kind":"scripted","policy":"oracle"}}}"#);
        assert!(matches!(s.validate(), Err(ServiceError::InvalidRoster(_))));
    }

    #[test]
    fn grid_defaults_to_one_planner() {
        let s = spec(r#"{"task":"grid","seed":3,"backends":{"Planner":{"kind":"scripted","policy":"oracle"}}}"#);
        assert_eq!(s.roster(), vec!["Planner".to_string()]);
        assert_eq!(s.validate().unwrap(), None);
        let g = s.grid_instance().unwrap();
        assert_eq!(g.agents.len(), GRID_AGENTS);
        assert_eq!(g.obstacles.len(), GRID_OBSTACLES);
        assert!(serde_json::from_str::<EpisodeSpec>(r#"{"task":"juggling","backends":{}}"#).is_err());
    }
}
