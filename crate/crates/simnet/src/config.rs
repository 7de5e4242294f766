use serde::{Deserialize, Serialize};
use treesync_core::agent::{AgentConfig, LedTarget};

use crate::link::DuplexLink;
use crate::sensor::SensorModel;
use crate::SimError;

/// 2024-01-15T10:30:00Z, the simulated wall clock at the start of every run.
pub const DEFAULT_START_EPOCH_MS: u64 = 1_705_314_600_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptedCommand {
    pub at_ms: u64,
    pub target: LedTarget,
    pub value: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CommandScript {
    #[default]
    None,
    Explicit { commands: Vec<ScriptedCommand> },
    /// `count` commands every `every_ms`, alternating led1/led2 and toggling each.
    Periodic { start_ms: u64, every_ms: u64, count: u64 },
}

impl CommandScript {
    pub fn expand(&self) -> Vec<ScriptedCommand> {
        match self {
            CommandScript::None => Vec::new(),
            CommandScript::Explicit { commands } => commands.clone(),
            CommandScript::Periodic {
                start_ms,
                every_ms,
                count,
            } => (0..*count)
                .map(|i| ScriptedCommand {
                    at_ms: start_ms + i * every_ms,
                    target: if i % 2 == 0 { LedTarget::Led1 } else { LedTarget::Led2 },
                    value: (i / 2) % 2 == 0,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SubscriberConfig {
    pub count: usize,
    pub paths: Vec<String>,
}

impl Default for SubscriberConfig {
    fn default() -> Self {
        Self {
            count: 0,
            paths: vec!["/sensors".into(), "/leds".into(), "/metadata".into()],
        }
    }
}

/// A writer that commits sensor-shaped batches at a fixed rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadConfig {
    pub commits_per_s: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Simulated time during which sensors sample and scripts run.
    pub duration_ms: u64,
    /// Extra time afterwards for retries and buffered replay to finish.
    pub settle_ms: u64,
    pub seed: u64,
    pub start_epoch_ms: u64,
    pub agent_link: DuplexLink,
    /// Link model for every dashboard-like client.
    pub client_link: DuplexLink,
    pub sensor: SensorModel,
    pub agent: AgentConfig,
    pub subscribers: SubscriberConfig,
    pub load: Option<LoadConfig>,
    pub commands: CommandScript,
    pub heartbeat_timeout_ms: u64,
    pub client_ping_ms: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            duration_ms: 60_000,
            settle_ms: 120_000,
            seed: 0,
            start_epoch_ms: DEFAULT_START_EPOCH_MS,
            agent_link: DuplexLink::default(),
            client_link: DuplexLink::default(),
            sensor: SensorModel::default(),
            agent: AgentConfig::default(),
            subscribers: SubscriberConfig::default(),
            load: None,
            commands: CommandScript::None,
            heartbeat_timeout_ms: 15_000,
            client_ping_ms: 5_000,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let config: Self = serde_json::from_str(text).map_err(|e| SimError::ConfigInvalid(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configs serialize")
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let invalid = |m: String| Err(SimError::ConfigInvalid(m));
        if self.duration_ms == 0 {
            return invalid("duration_ms must be positive".into());
        }
        if self.client_ping_ms == 0 || self.heartbeat_timeout_ms == 0 {
            return invalid("client_ping_ms and heartbeat_timeout_ms must be positive".into());
        }
        for (name, link) in [
            ("agent_link.up", &self.agent_link.up),
            ("agent_link.down", &self.agent_link.down),
            ("client_link.up", &self.client_link.up),
            ("client_link.down", &self.client_link.down),
        ] {
            if let Err(e) = link.validate() {
                return invalid(format!("{name}: {e}"));
            }
        }
        self.sensor.validate().map_err(SimError::ConfigInvalid)?;
        self.agent
            .validate()
            .map_err(|e| SimError::ConfigInvalid(format!("agent: {e}")))?;
        if let Some(load) = self.load {
            if load.commits_per_s == 0 || load.commits_per_s > 1_000 {
                return invalid("load.commits_per_s must be in 1..=1000".into());
            }
        }
        if let CommandScript::Periodic { every_ms: 0, .. } = self.commands {
            return invalid("commands.every_ms must be positive".into());
        }
        for p in &self.subscribers.paths {
            treesync_core::Path::parse(p).map_err(|e| SimError::ConfigInvalid(format!("subscriber path: {e}")))?;
        }
        Ok(())
    }
}
