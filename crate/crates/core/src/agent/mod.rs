//! Device agent: a deterministic state machine that samples sensors, ships
//! readings upstream with retry and store-and-forward, applies LED commands,
//! and watches its own health.
//!
//! The agent does no I/O. Callers feed it [`AgentInput`]s, call
//! [`DeviceAgent::step`] at (or after) [`DeviceAgent::next_wakeup`], and carry
//! out the returned [`Effect`]s.

mod backoff;
mod command;
mod config;
mod uplink;

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

pub use backoff::Backoff;
pub use command::{ActuatorState, CommandEnvelope, CommandError, CommandOutcome, LedTarget};
pub use config::{AgentConfig, ConfigError};
pub use uplink::UplinkBuffer;

use crate::filter::{FilterState, ProcessedFrame, SensorFrame};
use crate::path::Path;
use crate::protocol::{ErrorCode, MessageBody, UpdateEntry, WireMessage};
use crate::tree::Revision;
use crate::value::Value;

/// Anything that can be sampled for a raw reading.
pub trait SensorSource {
    fn read(&mut self, t_ms: u64) -> SensorFrame;
}

impl<F: FnMut(u64) -> SensorFrame> SensorSource for F {
    fn read(&mut self, t_ms: u64) -> SensorFrame {
        self(t_ms)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AgentInput {
    Message(WireMessage),
    /// The transport could not send the message with this id.
    SendFailed(u64),
    Disconnected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionKind {
    Tx,
    Cmd,
    Recovery,
    Mode,
}

/// One line of the local action log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionRecord {
    pub time_ms: u64,
    pub kind: ActionKind,
    pub detail: String,
}

impl ActionRecord {
    pub fn to_jsonl(&self) -> String {
        let mut line = serde_json::to_string(self).expect("records serialize");
        line.push('\n');
        line
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum TxOutcome {
    DeliveredFirstPass { sample_time_ms: u64, attempts: u32 },
    Buffered { sample_time_ms: u64 },
    DeliveredFromBuffer { sample_time_ms: u64 },
    Dropped { sample_time_ms: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Effect {
    /// Open (or reopen) the connection to the server.
    Connect,
    Send(WireMessage),
    SetLed {
        target: LedTarget,
        on: bool,
        /// Revision of the accepted command; `None` for a reset.
        revision: Option<Revision>,
    },
    Log(ActionRecord),
    Tx(TxOutcome),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Normal,
    Safe,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Normal => "normal",
            Mode::Safe => "safe",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecoveryAction {
    Reconnect,
    DrainBuffer,
    Recalibrate,
    EnterSafeMode,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HealthState {
    pub link_ok: bool,
    pub sync_ok: bool,
    pub sensor_ok: bool,
    pub consecutive_failures: u32,
    pub mode: Mode,
    pub last_successful_tx_ms: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentStats {
    pub frames_produced: u64,
    pub frames_delivered: u64,
    pub delivered_first_pass: u64,
    pub delivered_from_buffer: u64,
    pub frames_buffered: u64,
    pub commands_accepted: u64,
    pub commands_stale: u64,
    pub commands_replayed: u64,
    pub link_losses: u64,
    pub reconnects: u64,
    pub safe_mode_entries: u64,
    pub resets: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkState {
    Down,
    Authenticating,
    Up,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Link {
    Down { retry_at: u64, next_delay: u32 },
    Authenticating { msg_id: u64, next_delay: u32 },
    Up,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Request {
    Auth,
    Subscribe { target: LedTarget, attempt: u32 },
    Frame { sample_time_ms: u64 },
    Drain,
    CmdAck { target: LedTarget, revision: Revision, applied_at: u64, attempt: u32 },
    Status,
    Ping { sent_at: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Pending {
    deadline: u64,
    request: Request,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Retry {
    Frame { sample_time_ms: u64 },
    Subscribe { target: LedTarget, attempt: u32 },
    CmdAck { target: LedTarget, revision: Revision, applied_at: u64, attempt: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct InlineFrame {
    frame: ProcessedFrame,
    attempts: u32,
}

pub struct DeviceAgent<S> {
    config: AgentConfig,
    sensors: S,
    inbox: VecDeque<AgentInput>,
    out: Vec<Effect>,
    next_msg_id: u64,
    started: bool,

    filter: FilterState<f64>,
    latest: Option<ProcessedFrame>,
    sensor_ok: bool,
    sampling: bool,

    link: Link,
    pending: BTreeMap<u64, Pending>,
    retries: BTreeMap<(u64, u64), Retry>,
    retry_seq: u64,
    request_failures: u32,
    last_rx_ms: u64,
    /// Best (lowest round trip) server clock offset estimate.
    clock_offset: Option<(u64, i64)>,

    inline: BTreeMap<u64, InlineFrame>,
    buffer: UplinkBuffer,
    buffer_retry_at: Option<u64>,
    latest_live_sent: Option<u64>,
    last_successful_tx_ms: Option<u64>,

    actuators: ActuatorState,
    newest_ack: BTreeMap<LedTarget, Revision>,

    mode: Mode,
    consecutive_failures: u32,
    reset_at: Option<u64>,

    next_sample: u64,
    next_status: u64,
    next_ping: u64,
    next_health: u64,

    stats: AgentStats,
}

fn fixed_path(text: &str) -> Path {
    Path::parse(text).expect("fixed paths are valid")
}

fn iso_time(ms: u64) -> String {
    chrono::DateTime::from_timestamp_millis(ms as i64)
        .map(|t| t.to_rfc3339_opts(chrono::SecondsFormat::AutoSi, true))
        .unwrap_or_default()
}

impl<S: SensorSource> DeviceAgent<S> {
    pub fn new(config: AgentConfig, sensors: S) -> Self {
        let buffer = UplinkBuffer::new(config.buffer_capacity);
        Self {
            config,
            sensors,
            inbox: VecDeque::new(),
            out: Vec::new(),
            next_msg_id: 0,
            started: false,
            filter: FilterState::new(),
            latest: None,
            sensor_ok: true,
            sampling: true,
            link: Link::Down {
                retry_at: 0,
                next_delay: 0,
            },
            pending: BTreeMap::new(),
            retries: BTreeMap::new(),
            retry_seq: 0,
            request_failures: 0,
            last_rx_ms: 0,
            clock_offset: None,
            inline: BTreeMap::new(),
            buffer,
            buffer_retry_at: None,
            latest_live_sent: None,
            last_successful_tx_ms: None,
            actuators: ActuatorState::default(),
            newest_ack: BTreeMap::new(),
            mode: Mode::Normal,
            consecutive_failures: 0,
            reset_at: None,
            next_sample: 0,
            next_status: 0,
            next_ping: 0,
            next_health: 0,
            stats: AgentStats::default(),
        }
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn stats(&self) -> &AgentStats {
        &self.stats
    }

    pub fn buffer(&self) -> &UplinkBuffer {
        &self.buffer
    }

    pub fn actuators(&self) -> &ActuatorState {
        &self.actuators
    }

    pub fn filter(&self) -> &FilterState<f64> {
        &self.filter
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn link_state(&self) -> LinkState {
        match self.link {
            Link::Down { .. } => LinkState::Down,
            Link::Authenticating { .. } => LinkState::Authenticating,
            Link::Up => LinkState::Up,
        }
    }

    pub fn health(&self, now: u64) -> HealthState {
        HealthState {
            link_ok: self.link == Link::Up,
            sync_ok: self.sync_ok(now),
            sensor_ok: self.sensor_ok,
            consecutive_failures: self.consecutive_failures,
            mode: self.mode,
            last_successful_tx_ms: self.last_successful_tx_ms,
        }
    }

    /// Frames accepted for transmission but neither delivered nor buffered.
    pub fn frames_in_flight(&self) -> u64 {
        self.inline.len() as u64
    }

    /// produced = delivered + in flight + buffered + dropped.
    pub fn conservation_holds(&self) -> bool {
        self.stats.frames_produced
            == self.stats.frames_delivered
                + self.frames_in_flight()
                + self.buffer.len() as u64
                + self.buffer.drop_count()
    }

    /// Stops taking new samples; everything else keeps running.
    pub fn stop_sampling(&mut self) {
        self.sampling = false;
    }

    /// Nothing left to deliver.
    pub fn is_quiescent(&self) -> bool {
        self.inline.is_empty() && self.buffer.is_empty()
    }

    pub fn push_input(&mut self, input: AgentInput) {
        self.inbox.push_back(input);
    }

    /// Server clock estimate at local time `now`.
    pub fn server_now(&self, now: u64) -> i64 {
        now as i64 + self.clock_offset.map_or(0, |(_, off)| off)
    }

    /// Earliest local time at which `step` has work to do.
    pub fn next_wakeup(&self) -> u64 {
        if !self.started || !self.inbox.is_empty() {
            return 0;
        }
        let mut t = [self.next_status, self.next_health].into_iter().min().unwrap_or(u64::MAX);
        if self.sampling {
            t = t.min(self.next_sample);
        }
        if self.link == Link::Up {
            t = t.min(self.next_ping);
        }
        if let Link::Down { retry_at, .. } = self.link {
            t = t.min(retry_at);
        }
        let timers = [
            self.pending.values().map(|p| p.deadline).min(),
            self.retries.keys().next().map(|(at, _)| *at),
            self.buffer_retry_at,
            self.reset_at,
        ];
        timers.into_iter().flatten().fold(t, u64::min)
    }

    /// One deterministic tick at local time `now`.
    pub fn step(&mut self, now: u64) -> Vec<Effect> {
        if !self.started {
            self.start(now);
        }
        while let Some(input) = self.inbox.pop_front() {
            self.handle_input(input, now);
        }
        self.fire_timeouts(now);
        self.fire_retries(now);
        if let Link::Down { retry_at, .. } = self.link {
            if retry_at <= now {
                self.connect(now);
            }
        }
        if self.buffer_retry_at.is_some_and(|t| t <= now) {
            self.buffer_retry_at = None;
            if self.mode == Mode::Safe {
                self.arm_buffer_retry(now);
            } else {
                self.drain(now);
            }
        }
        if self.reset_at.is_some_and(|t| t <= now) {
            self.reset(now);
        }
        while self.sampling && self.next_sample <= now {
            let t = self.next_sample;
            self.next_sample += self.config.sample_period_ms;
            self.sample(t, now);
        }
        if let Some(msg) = self.periodic_status_update(now) {
            self.out.push(Effect::Send(msg));
        }
        if self.link == Link::Up && self.next_ping <= now {
            self.next_ping = now + self.config.ping_interval_ms;
            let id = self.request(Request::Ping { sent_at: now }, now);
            self.send(id, MessageBody::Ping {});
        }
        if self.next_health <= now {
            self.next_health = now + self.config.health_interval_ms;
            self.monitor_health(now);
        }
        std::mem::take(&mut self.out)
    }

    fn start(&mut self, now: u64) {
        self.started = true;
        self.last_rx_ms = now;
        self.link = Link::Down {
            retry_at: now,
            next_delay: 0,
        };
        self.next_sample = now;
        self.next_status = now + self.config.status_interval_ms;
        self.next_ping = now + self.config.ping_interval_ms;
        self.next_health = now + self.config.health_interval_ms;
    }

    fn alloc_id(&mut self) -> u64 {
        self.next_msg_id += 1;
        self.next_msg_id
    }

    fn request(&mut self, request: Request, now: u64) -> u64 {
        let id = self.alloc_id();
        self.pending.insert(
            id,
            Pending {
                deadline: now + self.config.ack_timeout_ms,
                request,
            },
        );
        id
    }

    fn send(&mut self, msg_id: u64, body: MessageBody) {
        self.out.push(Effect::Send(WireMessage::new(msg_id, body)));
    }

    fn log(&mut self, now: u64, kind: ActionKind, detail: String) {
        tracing::debug!(time_ms = now, ?kind, %detail, "agent action");
        self.out.push(Effect::Log(ActionRecord {
            time_ms: now,
            kind,
            detail,
        }));
    }

    fn schedule_retry(&mut self, at: u64, retry: Retry) {
        self.retry_seq += 1;
        self.retries.insert((at, self.retry_seq), retry);
    }

    fn arm_buffer_retry(&mut self, now: u64) {
        if self.buffer_retry_at.is_none() && !self.buffer.is_empty() {
            self.buffer_retry_at = Some(now + self.config.buffer_retry_ms);
        }
    }

    fn sync_ok(&self, now: u64) -> bool {
        now.saturating_sub(self.last_rx_ms) <= self.config.sync_timeout_ms
    }

    // ----- inputs -----

    fn handle_input(&mut self, input: AgentInput, now: u64) {
        match input {
            AgentInput::Message(msg) => {
                self.last_rx_ms = now;
                self.handle_message(msg, now);
            }
            AgentInput::SendFailed(id) => {
                if let Some(p) = self.pending.remove(&id) {
                    self.request_failed(id, p.request, now);
                }
            }
            AgentInput::Disconnected => self.disconnected(now),
        }
    }

    fn handle_message(&mut self, msg: WireMessage, now: u64) {
        match msg.body {
            MessageBody::Ack { msg_id, server_time_ms, .. } => {
                if let Some(p) = self.pending.remove(&msg_id) {
                    self.request_succeeded(msg_id, p.request, server_time_ms, now);
                }
            }
            MessageBody::Pong { msg_id, server_time_ms } => {
                if let Some(p) = self.pending.remove(&msg_id) {
                    self.request_succeeded(msg_id, p.request, server_time_ms, now);
                }
            }
            MessageBody::Err { msg_id, code, reason } => {
                let Some(p) = self.pending.remove(&msg_id) else {
                    return;
                };
                tracing::debug!(msg_id, ?code, %reason, "request rejected");
                self.request_failed(msg_id, p.request, now);
                if code == ErrorCode::AuthRequired && self.link == Link::Up {
                    self.link_lost(now, "server dropped authentication");
                }
            }
            MessageBody::Event {
                revision,
                path,
                value,
                server_time_ms,
                ..
            } => self.handle_event(revision, &path, value, server_time_ms, now),
            _ => {}
        }
    }

    fn handle_event(&mut self, revision: Revision, path: &str, value: Option<Value>, server_time_ms: u64, now: u64) {
        let Ok(path) = Path::parse(path) else {
            return;
        };
        if path.len() != 2 || path.segments()[0] != "leds" {
            return;
        }
        let target = match path.segments()[1].parse::<LedTarget>() {
            Ok(t) => t,
            Err(e) => {
                self.log(now, ActionKind::Cmd, e.to_string());
                return;
            }
        };
        let Some(Value::Bool(on)) = value else {
            return;
        };
        let cmd = CommandEnvelope {
            target,
            value: on,
            command_time_ms: server_time_ms,
            revision,
        };
        let server_now = self.server_now(now);
        self.handle_command(&cmd, server_now, now);
    }

    /// Applies a command received at local time `now`, with `now_server_ms`
    /// the server clock estimate at that instant.
    pub fn handle_command(&mut self, cmd: &CommandEnvelope, now_server_ms: i64, now: u64) -> CommandOutcome {
        let outcome = self.actuators.apply(cmd, now_server_ms, self.config.staleness_window_ms);
        match outcome {
            CommandOutcome::Accepted => {
                self.stats.commands_accepted += 1;
                self.out.push(Effect::SetLed {
                    target: cmd.target,
                    on: cmd.value,
                    revision: Some(cmd.revision),
                });
                self.log(
                    now,
                    ActionKind::Cmd,
                    format!("{} set {} at revision {}", cmd.target, cmd.value, cmd.revision),
                );
                self.newest_ack.insert(cmd.target, cmd.revision);
                let applied_at = now_server_ms.max(0) as u64;
                self.send_cmd_ack(cmd.target, cmd.revision, applied_at, 1, now);
            }
            CommandOutcome::RejectedStale { age_ms } => {
                self.stats.commands_stale += 1;
                self.log(
                    now,
                    ActionKind::Cmd,
                    format!("{} revision {} ignored: {age_ms} ms old", cmd.target, cmd.revision),
                );
            }
            CommandOutcome::RejectedReplay { last } => {
                self.stats.commands_replayed += 1;
                self.log(
                    now,
                    ActionKind::Cmd,
                    format!("{} revision {} ignored: already at {last}", cmd.target, cmd.revision),
                );
            }
        }
        outcome
    }

    fn send_cmd_ack(&mut self, target: LedTarget, revision: Revision, applied_at: u64, attempt: u32, now: u64) {
        let path = fixed_path("/metadata/ack").child(target.as_str()).expect("target is a valid segment");
        let ack = Value::branch([
            ("revision", Value::Number(revision.0 as f64)),
            ("applied_at", Value::Number(applied_at as f64)),
        ]);
        let id = self.request(
            Request::CmdAck {
                target,
                revision,
                applied_at,
                attempt,
            },
            now,
        );
        self.send(
            id,
            MessageBody::Update {
                ops: vec![UpdateEntry::set(&path, ack)],
            },
        );
    }

    fn disconnected(&mut self, now: u64) {
        match self.link {
            Link::Up => self.link_lost(now, "transport closed"),
            Link::Authenticating { msg_id, next_delay } => {
                self.pending.remove(&msg_id);
                self.auth_failed(next_delay, now);
            }
            Link::Down { .. } => {}
        }
    }

    // ----- request outcomes -----

    fn request_succeeded(&mut self, msg_id: u64, request: Request, server_time_ms: u64, now: u64) {
        self.request_failures = 0;
        match request {
            Request::Auth => self.auth_succeeded(now),
            Request::Subscribe { .. } | Request::Status | Request::CmdAck { .. } => {}
            Request::Ping { sent_at } => {
                let rtt = now - sent_at;
                let offset = server_time_ms as i64 - (sent_at + now) as i64 / 2;
                if self.clock_offset.map_or(true, |(best, _)| rtt <= best) {
                    self.clock_offset = Some((rtt, offset));
                }
            }
            Request::Frame { sample_time_ms } => {
                if let Some(f) = self.inline.remove(&sample_time_ms) {
                    self.stats.frames_delivered += 1;
                    self.stats.delivered_first_pass += 1;
                    self.last_successful_tx_ms = Some(now);
                    self.out.push(Effect::Tx(TxOutcome::DeliveredFirstPass {
                        sample_time_ms,
                        attempts: f.attempts,
                    }));
                    self.drain(now);
                }
            }
            Request::Drain => {
                if let Some(frame) = self.buffer.confirm(msg_id) {
                    self.stats.frames_delivered += 1;
                    self.stats.delivered_from_buffer += 1;
                    self.last_successful_tx_ms = Some(now);
                    self.out.push(Effect::Tx(TxOutcome::DeliveredFromBuffer {
                        sample_time_ms: frame.sample_time_ms,
                    }));
                    if self.buffer.is_empty() {
                        self.buffer_retry_at = None;
                        self.log(now, ActionKind::Tx, "transmission buffer cleared".into());
                    }
                }
                self.drain(now);
            }
        }
    }

    fn request_failed(&mut self, msg_id: u64, request: Request, now: u64) {
        if request == Request::Auth {
            if let Link::Authenticating { next_delay, .. } = self.link {
                self.auth_failed(next_delay, now);
            }
            return;
        }
        if let Request::Ping { .. } = request {
            return;
        }
        self.request_failures += 1;
        match request {
            Request::Frame { sample_time_ms } => {
                let Some(f) = self.inline.get(&sample_time_ms).copied() else {
                    return;
                };
                if f.attempts < self.config.tx_attempts {
                    let at = now + self.config.backoff.delay(f.attempts - 1);
                    self.schedule_retry(at, Retry::Frame { sample_time_ms });
                } else {
                    self.inline.remove(&sample_time_ms);
                    self.to_buffer(f.frame, now);
                }
            }
            Request::Drain => {
                self.buffer.release(msg_id);
                self.arm_buffer_retry(now);
            }
            Request::Subscribe { target, attempt } => {
                if self.link == Link::Up {
                    if attempt < self.config.tx_attempts {
                        let at = now + self.config.backoff.delay(attempt - 1);
                        self.schedule_retry(at, Retry::Subscribe { target, attempt: attempt + 1 });
                    } else {
                        self.link_lost(now, "subscription failed");
                    }
                }
            }
            Request::CmdAck {
                target,
                revision,
                applied_at,
                attempt,
            } => {
                let superseded = self.newest_ack.get(&target).is_some_and(|r| *r > revision);
                if !superseded && attempt < self.config.tx_attempts {
                    let at = now + self.config.backoff.delay(attempt - 1);
                    self.schedule_retry(
                        at,
                        Retry::CmdAck {
                            target,
                            revision,
                            applied_at,
                            attempt: attempt + 1,
                        },
                    );
                }
            }
            Request::Status | Request::Auth | Request::Ping { .. } => {}
        }
        if self.request_failures >= self.config.link_loss_threshold && self.link == Link::Up {
            self.link_lost(now, "consecutive request failures");
        }
    }

    fn fire_timeouts(&mut self, now: u64) {
        let expired: Vec<u64> = self
            .pending
            .iter()
            .filter(|(_, p)| p.deadline <= now)
            .map(|(id, _)| *id)
            .collect();
        for id in expired {
            if let Some(p) = self.pending.remove(&id) {
                self.request_failed(id, p.request, now);
            }
        }
    }

    fn fire_retries(&mut self, now: u64) {
        while let Some((&key, _)) = self.retries.first_key_value() {
            if key.0 > now {
                break;
            }
            let retry = self.retries.remove(&key).expect("key just observed");
            match retry {
                Retry::Frame { sample_time_ms } => self.attempt_frame(sample_time_ms, now),
                Retry::Subscribe { target, attempt } => {
                    if self.link == Link::Up {
                        self.subscribe(target, attempt, now);
                    }
                }
                Retry::CmdAck {
                    target,
                    revision,
                    applied_at,
                    attempt,
                } => {
                    let superseded = self.newest_ack.get(&target).is_some_and(|r| *r > revision);
                    if !superseded {
                        self.send_cmd_ack(target, revision, applied_at, attempt, now);
                    }
                }
            }
        }
    }

    // ----- link management -----

    fn connect(&mut self, now: u64) {
        let next_delay = match self.link {
            Link::Down { next_delay, .. } => next_delay,
            _ => return,
        };
        self.out.push(Effect::Connect);
        let id = self.request(Request::Auth, now);
        self.link = Link::Authenticating { msg_id: id, next_delay };
        self.send(
            id,
            MessageBody::Auth {
                token: self.config.token.clone(),
            },
        );
    }

    fn auth_failed(&mut self, next_delay: u32, now: u64) {
        let delay = self.config.backoff.delay(next_delay);
        self.link = Link::Down {
            retry_at: now + delay,
            next_delay: next_delay + 1,
        };
        self.log(now, ActionKind::Recovery, format!("reconnect in {delay} ms"));
    }

    fn auth_succeeded(&mut self, now: u64) {
        if !matches!(self.link, Link::Authenticating { .. }) {
            return;
        }
        let reconnect = self.stats.link_losses > 0 || self.stats.resets > 0;
        self.link = Link::Up;
        self.next_ping = now + self.config.ping_interval_ms;
        if reconnect {
            self.stats.reconnects += 1;
            self.log(now, ActionKind::Recovery, "link restored".into());
        }
        for target in LedTarget::ALL {
            self.subscribe(target, 1, now);
        }
        self.drain(now);
    }

    fn subscribe(&mut self, target: LedTarget, attempt: u32, now: u64) {
        let id = self.request(Request::Subscribe { target, attempt }, now);
        self.send(
            id,
            MessageBody::Subscribe {
                path: format!("/leds/{target}"),
            },
        );
    }

    fn link_lost(&mut self, now: u64, why: &str) {
        if self.link != Link::Up {
            return;
        }
        self.stats.link_losses += 1;
        self.request_failures = 0;
        self.pending.retain(|_, p| !matches!(p.request, Request::Subscribe { .. }));
        self.retries.retain(|_, r| !matches!(r, Retry::Subscribe { .. }));
        let delay = self.config.backoff.delay(0);
        self.link = Link::Down {
            retry_at: now + delay,
            next_delay: 1,
        };
        self.log(now, ActionKind::Recovery, format!("link lost ({why}); reconnect in {delay} ms"));
    }

    // ----- uplink -----

    fn sample(&mut self, t: u64, now: u64) {
        let raw = self.sensors.read(t);
        let frame = match self.filter.acquire_and_filter(&raw) {
            Ok(f) => f,
            Err(_) => {
                self.sensor_ok = false;
                return;
            }
        };
        self.sensor_ok = self.filter.last_verdicts().is_some_and(|v| v.all_valid());
        self.latest = Some(frame);
        self.stats.frames_produced += 1;
        self.transmit(frame, now);
    }

    /// Starts delivery of a fresh frame: in-line attempts unless in safe mode.
    pub fn transmit(&mut self, frame: ProcessedFrame, now: u64) {
        if self.mode == Mode::Safe {
            self.to_buffer(frame, now);
            return;
        }
        self.inline.insert(frame.sample_time_ms, InlineFrame { frame, attempts: 0 });
        self.attempt_frame(frame.sample_time_ms, now);
    }

    fn attempt_frame(&mut self, sample_time_ms: u64, now: u64) {
        let Some(f) = self.inline.get_mut(&sample_time_ms) else {
            return;
        };
        f.attempts += 1;
        let frame = f.frame;
        let id = self.request(Request::Frame { sample_time_ms }, now);
        let ops = self.compose(&frame);
        self.send(id, MessageBody::Update { ops });
    }

    /// Newer readings replace the live leaves; anything older than what was
    /// already sent live goes to history so it cannot roll the live view back.
    fn compose(&mut self, frame: &ProcessedFrame) -> Vec<UpdateEntry> {
        let live = self.latest_live_sent.map_or(true, |t| frame.sample_time_ms >= t);
        if live {
            self.latest_live_sent = Some(frame.sample_time_ms);
            vec![
                UpdateEntry::set(&fixed_path("/sensors/temperature"), frame.t),
                UpdateEntry::set(&fixed_path("/sensors/humidity"), frame.h),
                UpdateEntry::set(&fixed_path("/sensors/distance"), frame.d),
                UpdateEntry::set(&fixed_path("/metadata/last_update"), iso_time(frame.sample_time_ms)),
                UpdateEntry::set(&fixed_path("/metadata/device_id"), self.config.device_id.as_str()),
            ]
        } else {
            let path = fixed_path("/history")
                .child(&frame.sample_time_ms.to_string())
                .expect("digits are a valid segment");
            let reading = Value::branch([
                ("temperature", Value::Number(frame.t)),
                ("humidity", Value::Number(frame.h)),
                ("distance", Value::Number(frame.d)),
            ]);
            vec![UpdateEntry::set(&path, reading)]
        }
    }

    fn to_buffer(&mut self, frame: ProcessedFrame, now: u64) {
        self.stats.frames_buffered += 1;
        self.out.push(Effect::Tx(TxOutcome::Buffered {
            sample_time_ms: frame.sample_time_ms,
        }));
        if let Some(old) = self.buffer.push(frame) {
            self.out.push(Effect::Tx(TxOutcome::Dropped {
                sample_time_ms: old.sample_time_ms,
            }));
            self.log(now, ActionKind::Tx, format!("buffer full; dropped frame {}", old.sample_time_ms));
        }
        self.arm_buffer_retry(now);
    }

    /// Sends buffered frames oldest-first, keeping a bounded number in flight.
    fn drain(&mut self, now: u64) {
        if self.mode == Mode::Safe {
            return;
        }
        while self.buffer.sending_count() < self.config.drain_window {
            let Some(frame) = self.buffer.next_unsent() else {
                break;
            };
            let id = self.request(Request::Drain, now);
            self.buffer.mark_sending(frame.sample_time_ms, id);
            let ops = self.compose(&frame);
            self.send(id, MessageBody::Update { ops });
        }
    }

    // ----- status and health -----

    /// Returns the status batch when the status timer is due.
    pub fn periodic_status_update(&mut self, now: u64) -> Option<WireMessage> {
        if !self.started || now < self.next_status {
            return None;
        }
        self.next_status = now + self.config.status_interval_ms;
        let status = match self.mode {
            Mode::Safe => Value::branch([("mode", Value::from(Mode::Safe.as_str()))]),
            Mode::Normal => {
                let mut entries = vec![
                    ("led1", Value::Bool(self.actuators.led(LedTarget::Led1))),
                    ("led2", Value::Bool(self.actuators.led(LedTarget::Led2))),
                    ("mode", Value::from(Mode::Normal.as_str())),
                ];
                if let Some(f) = self.latest {
                    entries.push(("temperature", Value::Number(f.t)));
                    entries.push(("humidity", Value::Number(f.h)));
                    entries.push(("distance", Value::Number(f.d)));
                }
                Value::branch(entries)
            }
        };
        let id = self.request(Request::Status, now);
        Some(WireMessage::new(
            id,
            MessageBody::Update {
                ops: vec![UpdateEntry::set(&fixed_path("/metadata/status"), status)],
            },
        ))
    }

    /// One health check. Each consecutive breached check is a recovery
    /// attempt; the check after the last allowed attempt enters safe mode and
    /// schedules a reset.
    pub fn monitor_health(&mut self, now: u64) -> Vec<RecoveryAction> {
        if self.mode == Mode::Safe {
            return Vec::new();
        }
        let h = self.health(now);
        let buffer_high = self.buffer.len() * 10 >= self.buffer.capacity() * 9;
        let mut breaches = Vec::new();
        if !h.link_ok {
            breaches.push("link");
        }
        if h.link_ok && !h.sync_ok {
            breaches.push("sync");
        }
        if !h.sensor_ok {
            breaches.push("sensor");
        }
        if buffer_high {
            breaches.push("buffer");
        }
        if breaches.is_empty() {
            self.consecutive_failures = 0;
            return Vec::new();
        }

        self.consecutive_failures += 1;
        if self.consecutive_failures > self.config.recovery_attempts {
            self.mode = Mode::Safe;
            self.stats.safe_mode_entries += 1;
            self.reset_at = Some(now + self.config.health_interval_ms);
            self.log(
                now,
                ActionKind::Mode,
                format!("safe mode after {} failed recoveries", self.config.recovery_attempts),
            );
            return vec![RecoveryAction::EnterSafeMode];
        }

        let mut actions = Vec::new();
        if !h.link_ok || !h.sync_ok {
            actions.push(RecoveryAction::Reconnect);
        }
        if h.link_ok && !h.sync_ok {
            self.link_lost(now, "server silent");
        }
        if !h.sensor_ok {
            actions.push(RecoveryAction::Recalibrate);
        }
        if buffer_high {
            actions.push(RecoveryAction::DrainBuffer);
            self.drain(now);
        }
        self.log(
            now,
            ActionKind::Recovery,
            format!(
                "attempt {} for {}",
                self.consecutive_failures,
                breaches.join(", ")
            ),
        );
        actions
    }

    /// Reinitializes everything except the uplink buffer, statistics and the
    /// message id counter.
    fn reset(&mut self, now: u64) {
        self.reset_at = None;
        self.stats.resets += 1;
        let inline = std::mem::take(&mut self.inline);
        for f in inline.into_values() {
            self.to_buffer(f.frame, now);
        }
        self.buffer.release_all();
        self.pending.clear();
        self.retries.clear();
        self.newest_ack.clear();
        self.request_failures = 0;
        self.clock_offset = None;
        self.filter = FilterState::new();
        self.latest = None;
        self.sensor_ok = true;
        self.actuators = ActuatorState::default();
        for target in LedTarget::ALL {
            self.out.push(Effect::SetLed {
                target,
                on: false,
                revision: None,
            });
        }
        self.mode = Mode::Normal;
        self.consecutive_failures = 0;
        self.last_rx_ms = now;
        self.next_status = now + self.config.status_interval_ms;
        self.next_health = now + self.config.health_interval_ms;
        self.log(now, ActionKind::Mode, "system reset".into());
        self.link = Link::Down {
            retry_at: now,
            next_delay: 0,
        };
        self.connect(now);
    }
}

#[cfg(test)]
mod tests;
