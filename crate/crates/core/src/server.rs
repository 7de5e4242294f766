//! The realtime database service, independent of any transport.
//!
//! A transport opens a session per connection, feeds every decoded frame to
//! [`Server::handle_message`] and delivers the returned messages to their
//! sessions in order. Time is always passed in, so the same code runs under a
//! wall clock or a simulated one.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::path::Path;
use crate::persist::{CommitRecord, FileStore};
use crate::protocol::{ErrorCode, MessageBody, ProtocolError, SubId, UpdateEntry, WireMessage};
use crate::rules::{AuthContext, Principal, RuleSet};
use crate::tree::{check_disjoint, CommitOutcome, DataTree, TreeError, WriteAction, WriteOp};

pub type SessionId = u64;

pub const DEFAULT_HEARTBEAT_TIMEOUT_MS: u64 = 15_000;
pub const DEFAULT_PING_INTERVAL_MS: u64 = 5_000;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ServerConfig {
    pub heartbeat_timeout_ms: u64,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            heartbeat_timeout_ms: DEFAULT_HEARTBEAT_TIMEOUT_MS,
        }
    }
}

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("invalid token registry: {0}")]
    Json(#[from] serde_json::Error),
}

/// Maps bearer tokens to principals.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenRegistry {
    tokens: HashMap<String, Principal>,
}

impl TokenRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, token: &str, principal: Principal) -> Self {
        self.tokens.insert(token.to_owned(), principal);
        self
    }

    pub fn lookup(&self, token: &str) -> Option<&Principal> {
        self.tokens.get(token)
    }

    pub fn from_json(text: &str) -> Result<Self, RegistryError> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Non-decreasing server timestamps, whatever the underlying clock does.
#[derive(Debug, Clone, Default)]
pub struct ServerClock {
    last_ms: u64,
}

impl ServerClock {
    pub fn assign(&mut self, clock_now_ms: u64) -> u64 {
        self.last_ms = self.last_ms.max(clock_now_ms);
        self.last_ms
    }
}

#[derive(Debug, Clone)]
pub struct Session {
    pub id: SessionId,
    pub auth: AuthContext,
    pub subscriptions: BTreeMap<SubId, Path>,
    pub last_seen_ms: u64,
    out_seq: u64,
}

impl Session {
    fn next_msg_id(&mut self) -> u64 {
        self.out_seq += 1;
        self.out_seq
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outbound {
    pub session: SessionId,
    pub message: WireMessage,
}

/// Receives every committed batch, in revision order.
pub trait CommitSink: Send {
    fn on_commit(&mut self, record: &CommitRecord, outcome: &CommitOutcome, tree: &DataTree);
}

impl CommitSink for FileStore {
    fn on_commit(&mut self, record: &CommitRecord, _outcome: &CommitOutcome, tree: &DataTree) {
        if let Err(e) = self.append(record) {
            tracing::error!(error = %e, revision = %record.revision, "failed to append commit");
            return;
        }
        if self.checkpoint_due() {
            if let Err(e) = self.checkpoint(tree) {
                tracing::error!(error = %e, "checkpoint failed");
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ServerStats {
    pub commits: u64,
    pub events_sent: u64,
    pub errors_sent: u64,
    pub sessions_expired: u64,
}

pub struct Server {
    config: ServerConfig,
    tree: DataTree,
    rules: RuleSet,
    registry: TokenRegistry,
    sessions: BTreeMap<SessionId, Session>,
    next_session: SessionId,
    next_sub: SubId,
    clock: ServerClock,
    sink: Option<Box<dyn CommitSink>>,
    stats: ServerStats,
}

struct Reply {
    out: Vec<Outbound>,
}

impl Server {
    pub fn new(config: ServerConfig, rules: RuleSet, registry: TokenRegistry, tree: DataTree) -> Self {
        Self {
            config,
            tree,
            rules,
            registry,
            sessions: BTreeMap::new(),
            next_session: 0,
            next_sub: 0,
            clock: ServerClock::default(),
            sink: None,
            stats: ServerStats::default(),
        }
    }

    pub fn with_sink(mut self, sink: Box<dyn CommitSink>) -> Self {
        self.sink = Some(sink);
        self
    }

    pub fn tree(&self) -> &DataTree {
        &self.tree
    }

    pub fn rules(&self) -> &RuleSet {
        &self.rules
    }

    pub fn config(&self) -> &ServerConfig {
        &self.config
    }

    pub fn stats(&self) -> ServerStats {
        self.stats
    }

    pub fn session(&self, id: SessionId) -> Option<&Session> {
        self.sessions.get(&id)
    }

    pub fn session_ids(&self) -> impl Iterator<Item = SessionId> + '_ {
        self.sessions.keys().copied()
    }

    pub fn assign_server_time(&mut self, clock_now_ms: u64) -> u64 {
        self.clock.assign(clock_now_ms)
    }

    pub fn open_session(&mut self, now_ms: u64) -> SessionId {
        self.next_session += 1;
        let id = self.next_session;
        self.sessions.insert(
            id,
            Session {
                id,
                auth: AuthContext::anonymous(),
                subscriptions: BTreeMap::new(),
                last_seen_ms: now_ms,
                out_seq: 0,
            },
        );
        id
    }

    pub fn close_session(&mut self, id: SessionId) -> bool {
        self.sessions.remove(&id).is_some()
    }

    /// Closes every session silent for longer than the heartbeat timeout.
    pub fn expire_sessions(&mut self, now_ms: u64) -> Vec<SessionId> {
        let timeout = self.config.heartbeat_timeout_ms;
        let expired: Vec<SessionId> = self
            .sessions
            .values()
            .filter(|s| now_ms.saturating_sub(s.last_seen_ms) > timeout)
            .map(|s| s.id)
            .collect();
        for id in &expired {
            self.sessions.remove(id);
            tracing::debug!(session = id, "session expired");
        }
        self.stats.sessions_expired += expired.len() as u64;
        expired
    }

    /// Decodes and handles one text frame; undecodable frames get ERR MALFORMED.
    pub fn handle_frame(&mut self, session: SessionId, frame: &str, now_ms: u64) -> Vec<Outbound> {
        match WireMessage::decode(frame) {
            Ok(msg) => self.handle_message(session, msg, now_ms),
            Err(ProtocolError::Malformed { msg_id, reason }) => {
                let Some(s) = self.sessions.get_mut(&session) else {
                    return Vec::new();
                };
                s.last_seen_ms = now_ms;
                let mut reply = Reply { out: Vec::new() };
                self.err(&mut reply, session, msg_id.unwrap_or(0), ErrorCode::Malformed, reason);
                reply.out
            }
        }
    }

    pub fn handle_message(&mut self, session: SessionId, msg: WireMessage, now_ms: u64) -> Vec<Outbound> {
        let t = self.assign_server_time(now_ms);
        let Some(s) = self.sessions.get_mut(&session) else {
            return Vec::new();
        };
        s.last_seen_ms = now_ms;
        let authenticated = s.auth.is_authenticated();
        let mut reply = Reply { out: Vec::new() };
        let id = msg.msg_id;

        match msg.body {
            MessageBody::Ping {} => {
                self.send(&mut reply, session, MessageBody::Pong { msg_id: id, server_time_ms: t });
            }
            MessageBody::Auth { token } => match self.registry.lookup(&token).cloned() {
                Some(principal) => {
                    if let Some(s) = self.sessions.get_mut(&session) {
                        s.auth = AuthContext::authenticated(principal);
                    }
                    self.ack(&mut reply, session, id, t);
                }
                None => self.err(&mut reply, session, id, ErrorCode::AuthRequired, "unknown token".into()),
            },
            body if !body.is_client_request() => {
                let reason = format!("unexpected {} from client", body.kind());
                self.err(&mut reply, session, id, ErrorCode::Malformed, reason);
            }
            _ if !authenticated => {
                self.err(&mut reply, session, id, ErrorCode::AuthRequired, "authenticate first".into());
            }
            MessageBody::Put { path, value, .. } => {
                match parse(&path) {
                    Ok(path) => self.write(&mut reply, session, id, vec![WriteOp::set(path, value)], t),
                    Err(e) => self.err(&mut reply, session, id, ErrorCode::BadPath, e),
                }
            }
            MessageBody::Update { ops } => match to_batch(&ops) {
                Ok(batch) => self.write(&mut reply, session, id, batch, t),
                Err(e) => self.err(&mut reply, session, id, ErrorCode::BadPath, e),
            },
            MessageBody::Get { path } => match parse(&path) {
                Ok(path) => self.get(&mut reply, session, id, &path, t),
                Err(e) => self.err(&mut reply, session, id, ErrorCode::BadPath, e),
            },
            MessageBody::Subscribe { path } => match parse(&path) {
                Ok(path) => self.subscribe(&mut reply, session, id, path, t),
                Err(e) => self.err(&mut reply, session, id, ErrorCode::BadPath, e),
            },
            MessageBody::Unsubscribe { sub_id } => {
                let removed = self
                    .sessions
                    .get_mut(&session)
                    .and_then(|s| s.subscriptions.remove(&sub_id))
                    .is_some();
                if removed {
                    self.ack(&mut reply, session, id, t);
                } else {
                    self.err(&mut reply, session, id, ErrorCode::UnknownSub, format!("no subscription {sub_id}"));
                }
            }
            MessageBody::Event { .. }
            | MessageBody::Ack { .. }
            | MessageBody::Err { .. }
            | MessageBody::Pong { .. } => unreachable!("filtered above"),
        }
        reply.out
    }

    fn get(&mut self, reply: &mut Reply, session: SessionId, id: u64, path: &Path, t: u64) {
        let auth = &self.sessions[&session].auth;
        if let crate::rules::Decision::Deny(r) = self.rules.evaluate_read(auth, path) {
            self.err(reply, session, id, ErrorCode::Denied, format!("{r} at {path}"));
            return;
        }
        let body = MessageBody::Ack {
            msg_id: id,
            revision: Some(self.tree.revision()),
            server_time_ms: t,
            sub_id: None,
            value: self.tree.get(path).cloned(),
        };
        self.send(reply, session, body);
    }

    fn subscribe(&mut self, reply: &mut Reply, session: SessionId, id: u64, path: Path, t: u64) {
        let auth = &self.sessions[&session].auth;
        if let crate::rules::Decision::Deny(r) = self.rules.evaluate_read(auth, &path) {
            self.err(reply, session, id, ErrorCode::Denied, format!("{r} at {path}"));
            return;
        }
        let s = self.sessions.get_mut(&session).expect("checked by caller");
        let existing = s
            .subscriptions
            .iter()
            .find(|(_, p)| **p == path)
            .map(|(sid, _)| *sid);
        let sub_id = existing.unwrap_or_else(|| {
            self.next_sub += 1;
            s.subscriptions.insert(self.next_sub, path.clone());
            self.next_sub
        });
        let revision = self.tree.revision();
        self.send(
            reply,
            session,
            MessageBody::Ack {
                msg_id: id,
                revision: Some(revision),
                server_time_ms: t,
                sub_id: Some(sub_id),
                value: None,
            },
        );
        let value = self.tree.get(&path).cloned();
        self.send(
            reply,
            session,
            MessageBody::Event {
                sub_id,
                revision,
                path: path.to_string(),
                value,
                server_time_ms: t,
            },
        );
    }

    fn write(&mut self, reply: &mut Reply, session: SessionId, id: u64, batch: Vec<WriteOp>, t: u64) {
        if let Err(TreeError::OverlappingPaths(a, b)) = check_disjoint(&batch) {
            self.err(reply, session, id, ErrorCode::OverlappingPaths, format!("{a} overlaps {b}"));
            return;
        }
        if let Some(op) = batch.iter().find(|op| op.value().is_some_and(|v| v.find_non_finite().is_some())) {
            self.err(reply, session, id, ErrorCode::Malformed, format!("non-finite number at {}", op.path));
            return;
        }
        let auth = self.sessions[&session].auth.clone();
        if let Err((path, reason)) = self.rules.authorize_batch(&auth, &self.tree, &batch, t) {
            self.err(reply, session, id, ErrorCode::Denied, format!("{reason} at {path}"));
            return;
        }

        // Only subscriptions below a written path need the previous value.
        let needs_old = self.sessions.values().any(|s| {
            s.subscriptions
                .values()
                .any(|sp| batch.iter().any(|op| op.path.is_strict_ancestor(sp)))
        });
        let old = needs_old.then(|| self.tree.clone());

        let outcome = match self.tree.commit(&batch, t) {
            Ok(o) => o,
            Err(e) => {
                self.err(reply, session, id, ErrorCode::Malformed, e.to_string());
                return;
            }
        };
        self.stats.commits += 1;
        if let Some(sink) = self.sink.as_mut() {
            let record = CommitRecord::new(outcome.revision, t, &batch);
            sink.on_commit(&record, &outcome, &self.tree);
        }
        self.send(
            reply,
            session,
            MessageBody::Ack {
                msg_id: id,
                revision: Some(outcome.revision),
                server_time_ms: t,
                sub_id: None,
                value: None,
            },
        );
        self.fan_out(reply, &outcome, old.as_ref(), t);
    }

    fn fan_out(&mut self, reply: &mut Reply, outcome: &CommitOutcome, old: Option<&DataTree>, t: u64) {
        let mut events = Vec::new();
        for s in self.sessions.values() {
            for (&sub_id, sub_path) in &s.subscriptions {
                for e in &outcome.events {
                    if sub_path.is_ancestor_or_equal(&e.path) {
                        events.push((s.id, sub_id, e.path.clone(), e.new_value.clone()));
                    }
                }
                // a write above the subscription replaced what it watches
                if outcome.events.iter().any(|e| e.path.is_strict_ancestor(sub_path)) {
                    let new = self.tree.get(sub_path);
                    let before = old.and_then(|o| o.get(sub_path));
                    if new != before {
                        events.push((s.id, sub_id, sub_path.clone(), new.cloned()));
                    }
                }
            }
        }
        for (session, sub_id, path, value) in events {
            self.stats.events_sent += 1;
            self.send(
                reply,
                session,
                MessageBody::Event {
                    sub_id,
                    revision: outcome.revision,
                    path: path.to_string(),
                    value,
                    server_time_ms: t,
                },
            );
        }
    }

    fn ack(&mut self, reply: &mut Reply, session: SessionId, id: u64, t: u64) {
        self.send(
            reply,
            session,
            MessageBody::Ack {
                msg_id: id,
                revision: None,
                server_time_ms: t,
                sub_id: None,
                value: None,
            },
        );
    }

    fn err(&mut self, reply: &mut Reply, session: SessionId, id: u64, code: ErrorCode, reason: String) {
        self.stats.errors_sent += 1;
        self.send(reply, session, MessageBody::Err { msg_id: id, code, reason });
    }

    fn send(&mut self, reply: &mut Reply, session: SessionId, body: MessageBody) {
        if let Some(s) = self.sessions.get_mut(&session) {
            let msg_id = s.next_msg_id();
            reply.out.push(Outbound {
                session,
                message: WireMessage::new(msg_id, body),
            });
        }
    }
}

fn parse(path: &str) -> Result<Path, String> {
    Path::parse(path).map_err(|e| e.to_string())
}

fn to_batch(ops: &[UpdateEntry]) -> Result<Vec<WriteOp>, String> {
    ops.iter()
        .map(|e| {
            Ok(WriteOp {
                path: parse(&e.path)?,
                action: match &e.value {
                    Some(v) => WriteAction::Set(v.clone()),
                    None => WriteAction::Delete,
                },
            })
        })
        .collect()
}
