use std::collections::VecDeque;

use crate::filter::ProcessedFrame;

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    frame: ProcessedFrame,
    sending: Option<u64>,
}

/// Store-and-forward FIFO. Frames stay here until the server acknowledges
/// them; overflow evicts the oldest.
#[derive(Debug, Clone, PartialEq)]
pub struct UplinkBuffer {
    entries: VecDeque<Entry>,
    capacity: usize,
    drop_count: u64,
}

impl UplinkBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            entries: VecDeque::new(),
            capacity,
            drop_count: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn drop_count(&self) -> u64 {
        self.drop_count
    }

    pub fn frames(&self) -> impl Iterator<Item = &ProcessedFrame> {
        self.entries.iter().map(|e| &e.frame)
    }

    /// Appends a frame, returning the one evicted to make room.
    pub fn push(&mut self, frame: ProcessedFrame) -> Option<ProcessedFrame> {
        let evicted = if self.entries.len() >= self.capacity {
            self.drop_count += 1;
            self.entries.pop_front().map(|e| e.frame)
        } else {
            None
        };
        self.entries.push_back(Entry { frame, sending: None });
        evicted
    }

    pub fn sending_count(&self) -> usize {
        self.entries.iter().filter(|e| e.sending.is_some()).count()
    }

    /// Oldest frame not currently being sent.
    pub fn next_unsent(&self) -> Option<ProcessedFrame> {
        self.entries.iter().find(|e| e.sending.is_none()).map(|e| e.frame)
    }

    pub fn mark_sending(&mut self, sample_time_ms: u64, msg_id: u64) {
        if let Some(e) = self.entries.iter_mut().find(|e| e.frame.sample_time_ms == sample_time_ms) {
            e.sending = Some(msg_id);
        }
    }

    /// Returns the frame to the unsent pool after a failed attempt.
    pub fn release(&mut self, msg_id: u64) {
        if let Some(e) = self.entries.iter_mut().find(|e| e.sending == Some(msg_id)) {
            e.sending = None;
        }
    }

    pub fn release_all(&mut self) {
        for e in &mut self.entries {
            e.sending = None;
        }
    }

    /// Removes the frame acknowledged under `msg_id`.
    pub fn confirm(&mut self, msg_id: u64) -> Option<ProcessedFrame> {
        let idx = self.entries.iter().position(|e| e.sending == Some(msg_id))?;
        self.entries.remove(idx).map(|e| e.frame)
    }
}
