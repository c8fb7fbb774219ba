//! Bounded handoff queues for the two-tier producer/consumer framework.
//!
//! Two policies: `Lossless` blocks the producer when full (frames out =
//! frames in, order preserved), `LatestValue` never blocks — a new item
//! replaces the oldest unconsumed one, so a monitor always reads fresh
//! data without ever stalling the pipeline.

use std::collections::VecDeque;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueuePolicy {
    /// Producer waits when full; nothing is ever dropped.
    Lossless,
    /// New item replaces the oldest unconsumed one; producer never blocks.
    LatestValue,
}

/// Returned by `push` when the consumer side has shut the queue down.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueueClosed;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct QueueStats {
    pub pushed: u64,
    pub popped: u64,
    pub max_depth: usize,
    /// Replacements under the LatestValue policy; always 0 for Lossless.
    pub dropped: u64,
}

struct State<T> {
    buf: VecDeque<T>,
    closed: bool,
    stats: QueueStats,
}

struct Inner<T> {
    state: Mutex<State<T>>,
    capacity: usize,
    policy: QueuePolicy,
    not_full: Condvar,
    not_empty: Condvar,
}

/// Cloneable handle to a bounded queue; all clones share the same buffer.
pub struct BoundedQueue<T> {
    inner: Arc<Inner<T>>,
}

impl<T> Clone for BoundedQueue<T> {
    fn clone(&self) -> Self {
        BoundedQueue {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<T> BoundedQueue<T> {
    pub fn new(capacity: usize, policy: QueuePolicy) -> Self {
        assert!(capacity > 0, "queue capacity must be positive");
        BoundedQueue {
            inner: Arc::new(Inner {
                state: Mutex::new(State {
                    buf: VecDeque::with_capacity(capacity),
                    closed: false,
                    stats: QueueStats::default(),
                }),
                capacity,
                policy,
                not_full: Condvar::new(),
                not_empty: Condvar::new(),
            }),
        }
    }

    /// Push one item. Lossless blocks while full; LatestValue replaces.
    pub fn push(&self, item: T) -> Result<(), QueueClosed> {
        let mut state = self.inner.state.lock().unwrap();
        loop {
            if state.closed {
                return Err(QueueClosed);
            }
            if state.buf.len() < self.inner.capacity {
                break;
            }
            match self.inner.policy {
                QueuePolicy::Lossless => {
                    state = self.inner.not_full.wait(state).unwrap();
                }
                QueuePolicy::LatestValue => {
                    state.buf.pop_front();
                    state.stats.dropped += 1;
                    break;
                }
            }
        }
        state.buf.push_back(item);
        state.stats.pushed += 1;
        state.stats.max_depth = state.stats.max_depth.max(state.buf.len());
        drop(state);
        self.inner.not_empty.notify_one();
        Ok(())
    }

    /// Blocking pop; `None` once the queue is closed and drained.
    pub fn pop(&self) -> Option<T> {
        let mut state = self.inner.state.lock().unwrap();
        loop {
            if let Some(item) = state.buf.pop_front() {
                state.stats.popped += 1;
                drop(state);
                self.inner.not_full.notify_one();
                return Some(item);
            }
            if state.closed {
                return None;
            }
            state = self.inner.not_empty.wait(state).unwrap();
        }
    }

    /// Pop with a timeout; `Ok(None)` means closed-and-drained, `Err(())`
    /// means the timeout elapsed with no item.
    pub fn pop_timeout(&self, timeout: Duration) -> Result<Option<T>, ()> {
        let deadline = std::time::Instant::now() + timeout;
        let mut state = self.inner.state.lock().unwrap();
        loop {
            if let Some(item) = state.buf.pop_front() {
                state.stats.popped += 1;
                drop(state);
                self.inner.not_full.notify_one();
                return Ok(Some(item));
            }
            if state.closed {
                return Ok(None);
            }
            let now = std::time::Instant::now();
            if now >= deadline {
                return Err(());
            }
            let (guard, _) = self
                .inner
                .not_empty
                .wait_timeout(state, deadline - now)
                .unwrap();
            state = guard;
        }
    }

    /// Non-blocking pop.
    pub fn try_pop(&self) -> Option<T> {
        let mut state = self.inner.state.lock().unwrap();
        let item = state.buf.pop_front();
        if item.is_some() {
            state.stats.popped += 1;
            drop(state);
            self.inner.not_full.notify_one();
        }
        item
    }

    /// Close the queue: producers start failing, consumers drain what's
    /// left then see `None`.
    pub fn close(&self) {
        let mut state = self.inner.state.lock().unwrap();
        state.closed = true;
        drop(state);
        self.inner.not_full.notify_all();
        self.inner.not_empty.notify_all();
    }

    pub fn is_closed(&self) -> bool {
        self.inner.state.lock().unwrap().closed
    }

    pub fn len(&self) -> usize {
        self.inner.state.lock().unwrap().buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stats(&self) -> QueueStats {
        self.inner.state.lock().unwrap().stats
    }
}
