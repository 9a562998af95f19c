use std::collections::HashMap;
use std::fs::File;
use std::io::Write;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard, RwLock};
use std::time::Duration;

use serde::Serialize;
use serde_json::Value;
use tabletalk_core::agents::{Backend, BackendError, BackendSpec, HumanBackend, HumanChannel, Prompt, Turn};
use tabletalk_core::dialog::{next_speaker, run_episode, DialogState, EpisodeConfig, EpisodeStatus, Event, EventSink, Seat, Team};
use tabletalk_core::gridpath::run_grid_attempts_with;
use tabletalk_core::world::reset;
use tokio::sync::watch;

use crate::config::{EpisodeSpec, TaskKind};
use crate::ServiceError;

#[derive(Debug)]
struct Live {
    events: Vec<Event>,
    status: EpisodeStatus,
    /// Prompt shown to the human while it is their turn.
    prompt: Option<Prompt>,
    snapshot: Option<Value>,
    error: Option<String>,
    /// Set when a human turn opens, cleared by the one message that fills it.
    turn_open: bool,
}

/// One running or finished episode. The driver thread owns the dialog; the
/// HTTP layer only reads from here and delivers human text.
pub struct Episode {
    pub id: String,
    pub spec: EpisodeSpec,
    pub roster: Vec<String>,
    pub human: Option<String>,
    channel: HumanChannel,
    live: Mutex<Live>,
    /// Serializes human submissions.
    post: tokio::sync::Mutex<()>,
    version: watch::Sender<u64>,
    log_path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpisodeView {
    pub id: String,
    pub task: String,
    pub roster: Vec<String>,
    pub human: Option<String>,
    pub status: EpisodeStatus,
    pub events: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub snapshot: Option<Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompt: Option<Prompt>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EventsView {
    pub events: Vec<Event>,
    pub status: EpisodeStatus,
}

impl Episode {
    fn live(&self) -> MutexGuard<'_, Live> {
        self.live.lock().expect("episode state lock")
    }

    fn bump(&self) {
        self.version.send_modify(|v| *v += 1);
    }

    pub fn status(&self) -> EpisodeStatus {
        self.live().status.clone()
    }

    pub fn view(&self) -> EpisodeView {
        let live = self.live();
        let awaiting_human = matches!(live.status, EpisodeStatus::AwaitingHuman { .. });
        EpisodeView {
            id: self.id.clone(),
            task: self.spec.task.to_string(),
            roster: self.roster.clone(),
            human: self.human.clone(),
            status: live.status.clone(),
            events: live.events.len(),
            snapshot: live.snapshot.clone(),
            prompt: if awaiting_human { live.prompt.clone() } else { None },
            error: live.error.clone(),
        }
    }

    fn collect(&self, since: usize) -> Option<EventsView> {
        let live = self.live();
        let done = matches!(live.status, EpisodeStatus::Done { .. });
        (live.events.len() > since || done).then(|| EventsView {
            events: live.events.get(since..).map(<[Event]>::to_vec).unwrap_or_default(),
            status: live.status.clone(),
        })
    }

    /// Events with index greater than `since`. Waits up to `wait` for the
    /// first one when there are none yet and the episode is still running.
    pub async fn events_since(&self, since: usize, wait: Duration) -> EventsView {
        let mut rx = self.version.subscribe();
        let deadline = tokio::time::Instant::now() + wait;
        loop {
            rx.borrow_and_update();
            if let Some(v) = self.collect(since) {
                return v;
            }
            if tokio::time::timeout_at(deadline, rx.changed()).await.is_err() {
                return EventsView { events: vec![], status: self.status() };
            }
        }
    }

    /// Hands `text` to the human seat if it is that seat's turn.
    pub async fn post_human(&self, agent: &str, text: &str) -> Result<EpisodeStatus, ServiceError> {
        let _guard = self.post.lock().await;
        let mut live = self.live();
        let status = live.status.clone();
        let in_turn = matches!(&status, EpisodeStatus::AwaitingHuman { name } if name == agent);
        if !in_turn || !live.turn_open || self.human.as_deref() != Some(agent) {
            return Err(ServiceError::OutOfTurn { status });
        }
        self.channel.deliver(text).map_err(|_| ServiceError::OutOfTurn { status: status.clone() })?;
        live.turn_open = false;
        live.prompt = None;
        Ok(status)
    }
}

struct LiveSink {
    episode: Arc<Episode>,
    file: Option<File>,
}

impl EventSink for LiveSink {
    fn on_event(&mut self, event: &Event) {
        if let Some(f) = &mut self.file {
            let line = serde_json::to_string(event).expect("events serialize");
            // A failed log write must not stall the live episode.
            let _ = writeln!(f, "{line}").and_then(|_| f.flush());
        }
        {
            let mut live = self.episode.live();
            for key in ["scene", "instance"] {
                if let Some(s) = event.payload.get(key) {
                    live.snapshot = Some(serde_json::json!({ key: s }));
                }
            }
            live.events.push(event.clone());
        }
        self.episode.bump();
    }

    fn on_status(&mut self, status: &EpisodeStatus) {
        {
            let mut live = self.episode.live();
            live.turn_open = matches!(status, EpisodeStatus::AwaitingHuman { .. });
            live.status = status.clone();
        }
        self.episode.bump();
    }
}

/// The human seat as the driver sees it: records the prompt for viewers, then
/// blocks on the channel.
struct ServiceHuman {
    episode: Arc<Episode>,
    inner: HumanBackend,
}

impl Backend for ServiceHuman {
    fn respond(&mut self, turn: &Turn) -> Result<String, BackendError> {
        self.episode.live().prompt = Some(turn.prompt.clone());
        self.episode.bump();
        self.inner.respond(turn)
    }

    fn is_human(&self) -> bool {
        true
    }
}

fn build_backend(episode: &Arc<Episode>, spec: &BackendSpec) -> Result<Box<dyn Backend>, ServiceError> {
    if spec.is_human() {
        return Ok(Box::new(ServiceHuman {
            episode: episode.clone(),
            inner: HumanBackend::new(episode.channel.clone()),
        }));
    }
    spec.build(None).map_err(|e| ServiceError::BadRequest(e.to_string()))
}

fn initial_status(spec: &EpisodeSpec, roster: &[String]) -> EpisodeStatus {
    let mut state = DialogState::new(roster.len().max(1));
    state.start_round(0);
    let first = next_speaker(&state, roster).to_string();
    if spec.backends.get(&first).is_some_and(BackendSpec::is_human) {
        EpisodeStatus::AwaitingHuman { name: first }
    } else {
        EpisodeStatus::AwaitingAgent { name: first }
    }
}

/// All episodes known to this process.
pub struct Registry {
    episodes: RwLock<HashMap<String, Arc<Episode>>>,
    next: AtomicU64,
    log_dir: Option<PathBuf>,
}

impl Registry {
    pub fn new(log_dir: Option<PathBuf>) -> Self {
        Self { episodes: RwLock::new(HashMap::new()), next: AtomicU64::new(1), log_dir }
    }

    pub fn get(&self, id: &str) -> Result<Arc<Episode>, ServiceError> {
        self.episodes
            .read()
            .expect("registry lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(id.to_string()))
    }

    pub fn log_path(&self, id: &str) -> Option<PathBuf> {
        self.log_dir.as_ref().map(|d| d.join(format!("{id}.jsonl")))
    }

    /// Validates the config and starts the driver thread.
    pub fn create(&self, spec: EpisodeSpec) -> Result<Arc<Episode>, ServiceError> {
        let human = spec.validate()?;
        let roster = spec.roster();
        let id = format!("ep-{:06}", self.next.fetch_add(1, Ordering::Relaxed));
        let log_path = self.log_path(&id);
        let file = match &log_path {
            Some(p) => {
                if let Some(dir) = p.parent() {
                    std::fs::create_dir_all(dir).map_err(|e| ServiceError::Io(e.to_string()))?;
                }
                Some(File::create(p).map_err(|e| ServiceError::Io(format!("{}: {e}", p.display())))?)
            }
            None => None,
        };
        let grid = match spec.task {
            TaskKind::Grid => Some(spec.grid_instance()?),
            TaskKind::Arm(_) => None,
        };
        let snapshot = match (&grid, spec.task) {
            (Some(g), _) => serde_json::json!({ "instance": g }),
            (None, TaskKind::Arm(t)) => serde_json::json!({ "scene": reset(t, spec.seed) }),
            (None, TaskKind::Grid) => unreachable!("grid instance resolved above"),
        };
        let status = initial_status(&spec, &roster);
        let turn_open = matches!(status, EpisodeStatus::AwaitingHuman { .. });
        let (version, _) = watch::channel(0);
        let episode = Arc::new(Episode {
            id: id.clone(),
            roster: roster.clone(),
            human,
            channel: HumanChannel::new(),
            live: Mutex::new(Live {
                events: vec![],
                status,
                prompt: None,
                snapshot: Some(snapshot),
                error: None,
                turn_open,
            }),
            post: tokio::sync::Mutex::new(()),
            version,
            log_path,
            spec,
        });
        let seats = roster
            .iter()
            .map(|name| Ok(Seat { name: name.clone(), backend: build_backend(&episode, &episode.spec.backends[name])? }))
            .collect::<Result<Vec<Seat>, ServiceError>>()?;
        self.episodes.write().expect("registry lock").insert(id, episode.clone());

        let driver = episode.clone();
        std::thread::spawn(move || {
            let mut sink = LiveSink { episode: driver.clone(), file };
            let spec = &driver.spec;
            let result = match (spec.task, grid) {
                (TaskKind::Grid, Some(instance)) => {
                    let mut seats = seats;
                    let backend = seats[0].backend.as_mut();
                    run_grid_attempts_with(&instance, backend, spec.params().max_attempts(), &mut sink)
                        .map(|_| ())
                        .map_err(|e| e.to_string())
                }
                (TaskKind::Arm(task), _) => {
                    let config = EpisodeConfig { task, mode: spec.mode, params: spec.params(), seed: spec.seed };
                    let mut team = Team { mode: spec.mode, seats };
                    run_episode(&config, &mut team, &mut sink).map(|_| ()).map_err(|e| e.to_string())
                }
                (TaskKind::Grid, None) => unreachable!("grid instance resolved before spawn"),
            };
            driver.channel.close();
            let mut live = driver.live();
            if let Err(e) = result {
                live.error = Some(e);
            }
            if !matches!(live.status, EpisodeStatus::Done { .. }) {
                live.status = EpisodeStatus::Done { success: false };
            }
            live.prompt = None;
            live.turn_open = false;
            drop(live);
            driver.bump();
        });
        Ok(episode)
    }

    pub fn log_file(episode: &Episode) -> Option<&PathBuf> {
        episode.log_path.as_ref()
    }
}
