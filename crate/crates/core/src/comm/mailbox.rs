use std::collections::{HashMap, VecDeque};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use crate::error::{Error, Result};

/// Per-worker inbox keyed by `(src, tag)`. FIFO within a key.
#[derive(Debug)]
pub(crate) struct Mailbox {
    inner: Mutex<Inbox>,
    arrived: Condvar,
}

#[derive(Debug)]
struct Inbox {
    queues: HashMap<(usize, u32), VecDeque<Vec<u8>>>,
    closed: Vec<bool>,
}

impl Mailbox {
    pub(crate) fn new(world_size: usize) -> Self {
        Mailbox {
            inner: Mutex::new(Inbox { queues: HashMap::new(), closed: vec![false; world_size] }),
            arrived: Condvar::new(),
        }
    }

    pub(crate) fn deliver(&self, src: usize, tag: u32, payload: Vec<u8>) {
        let mut inbox = self.inner.lock().unwrap();
        inbox.queues.entry((src, tag)).or_default().push_back(payload);
        drop(inbox);
        self.arrived.notify_all();
    }

    /// Marks `src` as gone; queued messages from it stay deliverable.
    pub(crate) fn close(&self, src: usize) {
        let mut inbox = self.inner.lock().unwrap();
        if let Some(c) = inbox.closed.get_mut(src) {
            *c = true;
        }
        drop(inbox);
        self.arrived.notify_all();
    }

    pub(crate) fn recv(&self, src: usize, tag: u32, timeout: Option<Duration>) -> Result<Vec<u8>> {
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut inbox = self.inner.lock().unwrap();
        loop {
            if let Some(q) = inbox.queues.get_mut(&(src, tag)) {
                if let Some(msg) = q.pop_front() {
                    if q.is_empty() {
                        inbox.queues.remove(&(src, tag));
                    }
                    return Ok(msg);
                }
            }
            if inbox.closed.get(src).copied().unwrap_or(true) {
                return Err(Error::PeerClosed(src));
            }
            inbox = match deadline {
                None => self.arrived.wait(inbox).unwrap(),
                Some(d) => {
                    let now = Instant::now();
                    if now >= d {
                        return Err(Error::Timeout { src, tag });
                    }
                    self.arrived.wait_timeout(inbox, d - now).unwrap().0
                }
            };
        }
    }
}
