//! Client/server wire protocol: one JSON envelope per newline-terminated frame.
//!
//! ```text
//! {"msg_id":7,"kind":"PUT","payload":{"path":"/leds/led1","value":true,"client_time_ms":0}}
//! ```

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::path::Path;
use crate::tree::{Revision, WriteOp};
use crate::value::Value;

pub type SubId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorCode {
    AuthRequired,
    Denied,
    BadPath,
    OverlappingPaths,
    UnknownSub,
    Malformed,
}

impl ErrorCode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ErrorCode::AuthRequired => "AUTH_REQUIRED",
            ErrorCode::Denied => "DENIED",
            ErrorCode::BadPath => "BAD_PATH",
            ErrorCode::OverlappingPaths => "OVERLAPPING_PATHS",
            ErrorCode::UnknownSub => "UNKNOWN_SUB",
            ErrorCode::Malformed => "MALFORMED",
        }
    }
}

/// One entry of an UPDATE batch; a missing or null value deletes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateEntry {
    pub path: String,
    #[serde(default)]
    pub value: Option<Value>,
}

impl UpdateEntry {
    pub fn set(path: &Path, value: impl Into<Value>) -> Self {
        Self {
            path: path.to_string(),
            value: Some(value.into()),
        }
    }

    pub fn delete(path: &Path) -> Self {
        Self {
            path: path.to_string(),
            value: None,
        }
    }
}

impl From<&WriteOp> for UpdateEntry {
    fn from(op: &WriteOp) -> Self {
        Self {
            path: op.path.to_string(),
            value: op.value().cloned(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload")]
pub enum MessageBody {
    #[serde(rename = "AUTH")]
    Auth { token: String },
    #[serde(rename = "PUT")]
    Put {
        path: String,
        value: Value,
        #[serde(default)]
        client_time_ms: u64,
    },
    #[serde(rename = "UPDATE")]
    Update { ops: Vec<UpdateEntry> },
    #[serde(rename = "GET")]
    Get { path: String },
    #[serde(rename = "SUBSCRIBE")]
    Subscribe { path: String },
    #[serde(rename = "UNSUBSCRIBE")]
    Unsubscribe { sub_id: SubId },
    #[serde(rename = "EVENT")]
    Event {
        sub_id: SubId,
        revision: Revision,
        path: String,
        value: Option<Value>,
        server_time_ms: u64,
    },
    #[serde(rename = "ACK")]
    Ack {
        msg_id: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        revision: Option<Revision>,
        server_time_ms: u64,
        /// Present on SUBSCRIBE acknowledgements.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sub_id: Option<SubId>,
        /// Present on GET acknowledgements when the path holds a value.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        value: Option<Value>,
    },
    #[serde(rename = "ERR")]
    Err {
        msg_id: u64,
        code: ErrorCode,
        reason: String,
    },
    #[serde(rename = "PING")]
    Ping {},
    #[serde(rename = "PONG")]
    Pong {
        #[serde(default)]
        msg_id: u64,
        server_time_ms: u64,
    },
}

impl MessageBody {
    pub fn kind(&self) -> &'static str {
        match self {
            MessageBody::Auth { .. } => "AUTH",
            MessageBody::Put { .. } => "PUT",
            MessageBody::Update { .. } => "UPDATE",
            MessageBody::Get { .. } => "GET",
            MessageBody::Subscribe { .. } => "SUBSCRIBE",
            MessageBody::Unsubscribe { .. } => "UNSUBSCRIBE",
            MessageBody::Event { .. } => "EVENT",
            MessageBody::Ack { .. } => "ACK",
            MessageBody::Err { .. } => "ERR",
            MessageBody::Ping {} => "PING",
            MessageBody::Pong { .. } => "PONG",
        }
    }

    /// Messages a client sends and the server must answer.
    pub fn is_client_request(&self) -> bool {
        !matches!(
            self,
            MessageBody::Event { .. }
                | MessageBody::Ack { .. }
                | MessageBody::Err { .. }
                | MessageBody::Pong { .. }
        )
    }

    /// `msg_id` of the request this message answers, if it is a reply.
    pub fn reply_to(&self) -> Option<u64> {
        match self {
            MessageBody::Ack { msg_id, .. }
            | MessageBody::Err { msg_id, .. }
            | MessageBody::Pong { msg_id, .. } => Some(*msg_id),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireMessage {
    pub msg_id: u64,
    #[serde(flatten)]
    pub body: MessageBody,
}

impl WireMessage {
    pub fn new(msg_id: u64, body: MessageBody) -> Self {
        Self { msg_id, body }
    }

    /// One frame: compact JSON followed by a newline.
    pub fn encode(&self) -> String {
        let mut line = serde_json::to_string(self).expect("wire messages serialize");
        line.push('\n');
        line
    }

    pub fn decode(frame: &str) -> Result<Self, ProtocolError> {
        let line = frame.trim_end_matches(['\r', '\n']);
        serde_json::from_str(line).map_err(|e| ProtocolError::Malformed {
            msg_id: salvage_msg_id(line),
            reason: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProtocolError {
    #[error("malformed frame: {reason}")]
    Malformed { msg_id: Option<u64>, reason: String },
}

/// Best-effort recovery of the correlation id from an unparsable frame.
fn salvage_msg_id(line: &str) -> Option<u64> {
    let v: serde_json::Value = serde_json::from_str(line).ok()?;
    v.get("msg_id")?.as_u64()
}
