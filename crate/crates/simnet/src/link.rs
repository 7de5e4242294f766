use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    /// Messages sent during the window are lost.
    #[default]
    Drop,
    /// Messages sent during the window are delivered after it ends.
    Hold,
}

/// Half-open window `[start_ms, end_ms)` relative to the start of the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub start_ms: u64,
    pub end_ms: u64,
    #[serde(default)]
    pub mode: PartitionMode,
}

impl Partition {
    pub fn contains(&self, t: u64) -> bool {
        (self.start_ms..self.end_ms).contains(&t)
    }
}

/// One direction of a simulated network path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkModel {
    pub delay_ms: u64,
    /// Uniform jitter in `[-spread_ms, +spread_ms]` added to the delay.
    pub spread_ms: u64,
    /// Independent loss probability per message.
    pub drop_prob: f64,
    pub partitions: Vec<Partition>,
}

impl Default for LinkModel {
    fn default() -> Self {
        Self {
            delay_ms: 50,
            spread_ms: 0,
            drop_prob: 0.0,
            partitions: Vec::new(),
        }
    }
}

impl LinkModel {
    pub fn fixed(delay_ms: u64) -> Self {
        Self {
            delay_ms,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.drop_prob) {
            return Err(format!("drop_prob {} outside [0, 1]", self.drop_prob));
        }
        if let Some(p) = self.partitions.iter().find(|p| p.start_ms >= p.end_ms) {
            return Err(format!("empty partition window [{}, {})", p.start_ms, p.end_ms));
        }
        Ok(())
    }

    pub fn partition_at(&self, t: u64) -> Option<&Partition> {
        self.partitions.iter().find(|p| p.contains(t))
    }
}

/// Both directions between an endpoint and the server.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DuplexLink {
    pub up: LinkModel,
    pub down: LinkModel,
}

impl DuplexLink {
    pub fn symmetric(model: LinkModel) -> Self {
        Self {
            up: model.clone(),
            down: model,
        }
    }
}

/// A seeded instance of a [`LinkModel`] that preserves FIFO order.
#[derive(Debug, Clone)]
pub struct Channel {
    model: LinkModel,
    rng: ChaCha8Rng,
    last_delivery: u64,
    pub sent: u64,
    pub dropped: u64,
}

impl Channel {
    pub fn new(model: LinkModel, seed: u64) -> Self {
        Self {
            model,
            rng: ChaCha8Rng::seed_from_u64(seed),
            last_delivery: 0,
            sent: 0,
            dropped: 0,
        }
    }

    pub fn model(&self) -> &LinkModel {
        &self.model
    }

    /// Delivery time of a message sent at `now`, or `None` if it is lost.
    pub fn transmit(&mut self, now: u64) -> Option<u64> {
        self.sent += 1;
        // draw both values every time so the stream does not depend on outcomes
        let lost = self.rng.gen::<f64>() < self.model.drop_prob;
        let spread = self.model.spread_ms as i64;
        let jitter = if spread > 0 { self.rng.gen_range(-spread..=spread) } else { 0 };

        let depart = match self.model.partition_at(now) {
            Some(p) if p.mode == PartitionMode::Drop => {
                self.dropped += 1;
                return None;
            }
            Some(p) => p.end_ms,
            None => now,
        };
        if lost {
            self.dropped += 1;
            return None;
        }
        let delay = (self.model.delay_ms as i64 + jitter).max(0) as u64;
        let at = (depart + delay).max(self.last_delivery);
        self.last_delivery = at;
        Some(at)
    }
}
