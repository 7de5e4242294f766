use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::backoff::Backoff;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("{0} must be positive")]
    NotPositive(&'static str),
    #[error("invalid agent config: {0}")]
    Parse(String),
}

/// Agent settings, loadable from a JSON file. Missing fields take defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub server_addr: String,
    pub token: String,
    pub device_id: String,
    pub sample_period_ms: u64,
    pub backoff: Backoff,
    /// In-line transmission attempts per frame before it is buffered.
    pub tx_attempts: u32,
    pub ack_timeout_ms: u64,
    pub buffer_retry_ms: u64,
    pub buffer_capacity: usize,
    pub staleness_window_ms: u64,
    pub status_interval_ms: u64,
    pub health_interval_ms: u64,
    pub ping_interval_ms: u64,
    /// Longest silence from the server before the sync check fails.
    pub sync_timeout_ms: u64,
    /// Consecutive request failures that declare the link lost.
    pub link_loss_threshold: u32,
    pub recovery_attempts: u32,
    /// Buffered frames allowed in flight at once while draining.
    pub drain_window: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            server_addr: "127.0.0.1:7070".into(),
            token: "device-token".into(),
            device_id: "ESP32_001".into(),
            sample_period_ms: 1_000,
            backoff: Backoff::default(),
            tx_attempts: 3,
            ack_timeout_ms: 1_000,
            buffer_retry_ms: 30_000,
            buffer_capacity: 1_024,
            staleness_window_ms: 5_000,
            status_interval_ms: 10_000,
            health_interval_ms: 1_000,
            ping_interval_ms: 5_000,
            sync_timeout_ms: 15_000,
            link_loss_threshold: 5,
            recovery_attempts: 3,
            drain_window: 8,
        }
    }
}

impl AgentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let config: Self = serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("sample_period_ms", self.sample_period_ms),
            ("tx_attempts", u64::from(self.tx_attempts)),
            ("ack_timeout_ms", self.ack_timeout_ms),
            ("buffer_retry_ms", self.buffer_retry_ms),
            ("buffer_capacity", self.buffer_capacity as u64),
            ("status_interval_ms", self.status_interval_ms),
            ("health_interval_ms", self.health_interval_ms),
            ("ping_interval_ms", self.ping_interval_ms),
            ("sync_timeout_ms", self.sync_timeout_ms),
            ("link_loss_threshold", u64::from(self.link_loss_threshold)),
            ("drain_window", self.drain_window as u64),
            ("backoff.base_ms", self.backoff.base_ms),
            ("backoff.factor", u64::from(self.backoff.factor)),
        ];
        match positive.iter().find(|(_, v)| *v == 0) {
            Some((name, _)) => Err(ConfigError::NotPositive(name)),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_json_takes_defaults() {
        let c = AgentConfig::from_json(r#"{"ack_timeout_ms": 3000}"#).unwrap();
        assert_eq!(c.ack_timeout_ms, 3000);
        assert_eq!(c.buffer_capacity, 1024);
    }

    #[test]
    fn zero_period_rejected() {
        let err = AgentConfig::from_json(r#"{"sample_period_ms": 0}"#).unwrap_err();
        assert_eq!(err, ConfigError::NotPositive("sample_period_ms"));
        assert!(AgentConfig::from_json(r#"{"bogus": 1}"#).is_err());
    }
}
