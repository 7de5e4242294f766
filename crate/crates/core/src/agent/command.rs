use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tree::Revision;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LedTarget {
    Led1,
    Led2,
}

impl LedTarget {
    pub const ALL: [LedTarget; 2] = [LedTarget::Led1, LedTarget::Led2];

    pub fn as_str(self) -> &'static str {
        match self {
            LedTarget::Led1 => "led1",
            LedTarget::Led2 => "led2",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for LedTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CommandError {
    #[error("unknown actuator target {0:?}")]
    UnknownTarget(String),
}

impl FromStr for LedTarget {
    type Err = CommandError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "led1" => Ok(LedTarget::Led1),
            "led2" => Ok(LedTarget::Led2),
            other => Err(CommandError::UnknownTarget(other.to_owned())),
        }
    }
}

/// A control command as seen by the device: the server's commit of an LED write.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommandEnvelope {
    pub target: LedTarget,
    pub value: bool,
    /// Server time at which the write was committed.
    pub command_time_ms: u64,
    pub revision: Revision,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum CommandOutcome {
    Accepted,
    RejectedStale { age_ms: i64 },
    RejectedReplay { last: Revision },
}

/// LED states plus the per-target replay guard.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ActuatorState {
    leds: [bool; 2],
    last_revision: [Option<Revision>; 2],
}

impl ActuatorState {
    pub fn led(&self, target: LedTarget) -> bool {
        self.leds[target.index()]
    }

    pub fn last_revision(&self, target: LedTarget) -> Option<Revision> {
        self.last_revision[target.index()]
    }

    /// Applies `cmd` unless it is older than `window_ms` in server time or not
    /// newer than the last accepted command for its target.
    pub fn apply(&mut self, cmd: &CommandEnvelope, now_server_ms: i64, window_ms: u64) -> CommandOutcome {
        let age_ms = now_server_ms - cmd.command_time_ms as i64;
        if age_ms > window_ms as i64 {
            return CommandOutcome::RejectedStale { age_ms };
        }
        let i = cmd.target.index();
        if let Some(last) = self.last_revision[i] {
            if cmd.revision <= last {
                return CommandOutcome::RejectedReplay { last };
            }
        }
        self.last_revision[i] = Some(cmd.revision);
        self.leds[i] = cmd.value;
        CommandOutcome::Accepted
    }
}
