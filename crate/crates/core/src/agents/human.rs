use std::sync::{Arc, Condvar, Mutex};

use super::{Backend, BackendError, Turn};

#[derive(Default)]
struct Slot {
    pending: Option<String>,
    waiting: bool,
    closed: bool,
}

/// Rendezvous between the service (which delivers text) and the episode
/// thread (which blocks in [`HumanBackend::respond`]).
#[derive(Clone, Default)]
pub struct HumanChannel {
    inner: Arc<(Mutex<Slot>, Condvar)>,
}

impl HumanChannel {
    pub fn new() -> Self {
        Self::default()
    }

    /// Hands a message to the blocked backend. Fails if a message is already
    /// pending or the channel is closed.
    pub fn deliver(&self, text: &str) -> Result<(), BackendError> {
        let (lock, cv) = &*self.inner;
        let mut slot = lock.lock().expect("human channel lock");
        if slot.closed {
            return Err(BackendError::Closed);
        }
        if slot.pending.is_some() {
            return Err(BackendError::Config("a message is already pending".into()));
        }
        slot.pending = Some(text.to_string());
        cv.notify_all();
        Ok(())
    }

    pub fn is_waiting(&self) -> bool {
        self.inner.0.lock().expect("human channel lock").waiting
    }

    pub fn close(&self) {
        let (lock, cv) = &*self.inner;
        lock.lock().expect("human channel lock").closed = true;
        cv.notify_all();
    }

    fn receive(&self) -> Result<String, BackendError> {
        let (lock, cv) = &*self.inner;
        let mut slot = lock.lock().expect("human channel lock");
        slot.waiting = true;
        while slot.pending.is_none() && !slot.closed {
            slot = cv.wait(slot).expect("human channel lock");
        }
        slot.waiting = false;
        slot.pending.take().ok_or(BackendError::Closed)
    }
}

pub struct HumanBackend {
    channel: HumanChannel,
}

impl HumanBackend {
    pub fn new(channel: HumanChannel) -> Self {
        Self { channel }
    }
}

impl Backend for HumanBackend {
    fn respond(&mut self, _turn: &Turn) -> Result<String, BackendError> {
        self.channel.receive()
    }

    fn is_human(&self) -> bool {
        true
    }
}
