use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

struct Entry<E> {
    time: u64,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Entry<E> {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}

impl<E> Eq for Entry<E> {}

impl<E> PartialOrd for Entry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Entry<E> {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.time, self.seq).cmp(&(other.time, other.seq))
    }
}

/// Virtual clock with a pending-event queue. Events at the same instant come
/// out in the order they were scheduled.
pub struct SimClock<E> {
    now: u64,
    seq: u64,
    queue: BinaryHeap<Reverse<Entry<E>>>,
}

impl<E> Default for SimClock<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> SimClock<E> {
    pub fn new() -> Self {
        Self {
            now: 0,
            seq: 0,
            queue: BinaryHeap::new(),
        }
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    /// Schedules `event` at `at`; times in the past are clamped to now.
    pub fn schedule(&mut self, at: u64, event: E) {
        self.seq += 1;
        self.queue.push(Reverse(Entry {
            time: at.max(self.now),
            seq: self.seq,
            event,
        }));
    }

    pub fn peek_time(&self) -> Option<u64> {
        self.queue.peek().map(|Reverse(e)| e.time)
    }

    /// Advances to and returns the next event at or before `limit`.
    pub fn pop_until(&mut self, limit: u64) -> Option<(u64, E)> {
        if self.peek_time()? > limit {
            return None;
        }
        let Reverse(e) = self.queue.pop()?;
        self.now = e.time;
        Some((e.time, e.event))
    }
}
