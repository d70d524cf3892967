//! Reorder buffer, frame assembly and the bounded hand-off queue shared by
//! replay and live streaming.

use std::cmp::Ordering;
use std::collections::{BTreeMap, VecDeque};
use std::sync::{Condvar, Mutex};

use super::records::PoseSample;

pub const DEFAULT_REORDER_WINDOW_S: f64 = 0.05;

/// All samples sharing one timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub timestamp: f64,
    pub samples: Vec<PoseSample>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Key(f64, u64);

impl Eq for Key {}

impl PartialOrd for Key {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Key {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

/// Holds samples until they are older than `window` relative to the newest
/// timestamp seen, then releases them in timestamp order grouped into frames.
/// A sample already behind that horizon, or at or before a released frame,
/// is dropped and counted.
#[derive(Debug, Clone)]
pub struct RecordPipeline {
    window: f64,
    pending: BTreeMap<Key, PoseSample>,
    seq: u64,
    newest: f64,
    last_released: Option<f64>,
    late_dropped: usize,
}

impl Default for RecordPipeline {
    fn default() -> Self {
        Self::new(DEFAULT_REORDER_WINDOW_S)
    }
}

impl RecordPipeline {
    pub fn new(window_s: f64) -> Self {
        Self {
            window: window_s,
            pending: BTreeMap::new(),
            seq: 0,
            newest: f64::NEG_INFINITY,
            last_released: None,
            late_dropped: 0,
        }
    }

    pub fn late_dropped(&self) -> usize {
        self.late_dropped
    }

    pub fn push(&mut self, sample: PoseSample) -> Vec<Frame> {
        if sample.timestamp < self.newest - self.window || self.last_released.is_some_and(|t| sample.timestamp <= t) {
            self.late_dropped += 1;
            return Vec::new();
        }
        self.pending.insert(Key(sample.timestamp, self.seq), sample);
        self.seq += 1;
        self.newest = self.newest.max(sample.timestamp);
        self.release(self.newest - self.window)
    }

    /// Releases everything still buffered.
    pub fn finish(&mut self) -> Vec<Frame> {
        self.release(f64::INFINITY)
    }

    fn release(&mut self, before: f64) -> Vec<Frame> {
        let mut frames: Vec<Frame> = Vec::new();
        while let Some(entry) = self.pending.first_entry() {
            if !(entry.key().0 < before) {
                break;
            }
            let s = entry.remove();
            match frames.last_mut() {
                Some(f) if f.timestamp == s.timestamp => f.samples.push(s),
                _ => frames.push(Frame { timestamp: s.timestamp, samples: vec![s] }),
            }
        }
        if let Some(f) = frames.last() {
            // Equal timestamps are released together, so nothing of this
            // frame can still be pending.
            debug_assert!(self.pending.first_key_value().is_none_or(|(k, _)| k.0 > f.timestamp));
            self.last_released = Some(f.timestamp);
        }
        frames
    }
}

struct QueueState<T> {
    items: VecDeque<T>,
    closed: bool,
    dropped: usize,
}

/// Bounded multi-producer queue that drops the oldest item on overflow.
pub struct BoundedQueue<T> {
    capacity: usize,
    state: Mutex<QueueState<T>>,
    ready: Condvar,
}

impl<T> BoundedQueue<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "queue capacity must be positive");
        Self {
            capacity,
            state: Mutex::new(QueueState { items: VecDeque::new(), closed: false, dropped: 0 }),
            ready: Condvar::new(),
        }
    }

    /// Enqueues `item`; returns true when the oldest item was dropped to
    /// make room.
    pub fn push(&self, item: T) -> bool {
        let mut s = self.state.lock().expect("queue lock");
        let dropped = s.items.len() == self.capacity;
        if dropped {
            s.items.pop_front();
            s.dropped += 1;
        }
        s.items.push_back(item);
        self.ready.notify_one();
        dropped
    }

    /// Blocks until an item is available; `None` once closed and drained.
    pub fn pop(&self) -> Option<T> {
        let mut s = self.state.lock().expect("queue lock");
        loop {
            if let Some(item) = s.items.pop_front() {
                return Some(item);
            }
            if s.closed {
                return None;
            }
            s = self.ready.wait(s).expect("queue lock");
        }
    }

    pub fn close(&self) {
        self.state.lock().expect("queue lock").closed = true;
        self.ready.notify_all();
    }

    pub fn dropped(&self) -> usize {
        self.state.lock().expect("queue lock").dropped
    }

    pub fn len(&self) -> usize {
        self.state.lock().expect("queue lock").items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
