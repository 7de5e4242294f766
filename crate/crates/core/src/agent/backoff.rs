use serde::{Deserialize, Serialize};

/// Exponential delay schedule: `base · factor^k`, capped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Backoff {
    pub base_ms: u64,
    pub factor: u32,
    pub cap_ms: u64,
}

impl Default for Backoff {
    fn default() -> Self {
        Self {
            base_ms: 500,
            factor: 2,
            cap_ms: 8_000,
        }
    }
}

impl Backoff {
    /// Delay before retry number `k` (0-based).
    pub fn delay(&self, k: u32) -> u64 {
        let growth = u64::from(self.factor).checked_pow(k).unwrap_or(u64::MAX);
        self.base_ms.saturating_mul(growth).min(self.cap_ms)
    }

    pub fn schedule(&self, n: u32) -> Vec<u64> {
        (0..n).map(|k| self.delay(k)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule() {
        assert_eq!(Backoff::default().schedule(6), vec![500, 1000, 2000, 4000, 8000, 8000]);
    }

    #[test]
    fn huge_exponents_saturate_at_cap() {
        assert_eq!(Backoff::default().delay(200), 8000);
    }
}
