//! Realtime-sync tree store with validation rules, a transport-independent
//! sync server, and the device agent state machine.

pub mod agent;
pub mod filter;
pub mod path;
pub mod persist;
pub mod protocol;
pub mod rules;
pub mod server;
pub mod tree;
pub mod value;

pub use path::{Path, PathError};
pub use protocol::{ErrorCode, MessageBody, WireMessage};
pub use rules::{AuthContext, Decision, DenyReason, RuleSet};
pub use server::{Server, ServerConfig, SessionId, TokenRegistry};
pub use tree::{ChangeEvent, DataTree, Revision, WriteOp};
pub use value::Value;

pub type SensorFrameF64 = filter::SensorFrame<f64>;
pub type SensorFrameF32 = filter::SensorFrame<f32>;
pub type ProcessedFrameF64 = filter::ProcessedFrame<f64>;
pub type ProcessedFrameF32 = filter::ProcessedFrame<f32>;
pub type FilterStateF64 = filter::FilterState<f64>;
pub type FilterStateF32 = filter::FilterState<f32>;
