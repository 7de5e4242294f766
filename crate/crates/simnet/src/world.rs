use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use treesync_core::agent::{AgentInput, DeviceAgent, Effect, TxOutcome};
use treesync_core::persist::CommitRecord;
use treesync_core::protocol::{MessageBody, SubId, UpdateEntry};
use treesync_core::rules::{default_ruleset, Principal, PrincipalKind};
use treesync_core::server::{CommitSink, Outbound};
use treesync_core::tree::{CommitOutcome, WriteAction};
use treesync_core::{DataTree, Path, Revision, Server, ServerConfig, SessionId, TokenRegistry, Value, WireMessage, WriteOp};

use crate::clock::SimClock;
use crate::config::{ExperimentConfig, ScriptedCommand};
use crate::link::{Channel, Partition};
use crate::metrics::{measure_control_latency, CommandRecord, MetricsReport, RecoveryRecord};
use crate::sensor::SensorGenerator;
use crate::SimError;

pub const DASHBOARD_TOKEN: &str = "dashboard-token";
pub const LOAD_TOKEN: &str = "load-token";

/// One simulated message, for debugging and golden comparisons.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub sent_at_ms: u64,
    pub from: String,
    pub to: String,
    /// `None` when the link lost the message.
    pub delivered_at_ms: Option<u64>,
    pub frame: String,
}

pub fn trace_to_jsonl(trace: &[TraceRecord]) -> String {
    let mut out = String::new();
    for r in trace {
        out.push_str(&serde_json::to_string(r).expect("trace records serialize"));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Peer {
    Agent,
    Client(usize),
}

impl Peer {
    fn name(self) -> String {
        match self {
            Peer::Agent => "agent".into(),
            Peer::Client(i) => format!("client{i}"),
        }
    }
}

enum Event {
    AgentWake,
    ToServer(Peer, WireMessage),
    ToAgent(WireMessage),
    ToClient(usize, WireMessage),
    ClientPing(usize),
    Command(usize),
    LoadTick,
    Sweep,
    EndOfScript,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Subscriber,
    Controller,
    Load,
}

struct Subscription {
    path: Path,
    /// Revision of the initial snapshot; later events must follow it.
    base: Revision,
    snapshot_seen: bool,
    received: Vec<(Revision, String)>,
}

struct Client {
    role: Role,
    session: SessionId,
    up: Channel,
    down: Channel,
    next_msg_id: u64,
    pending_subs: BTreeMap<u64, Path>,
    subs: BTreeMap<SubId, Subscription>,
    pending_commands: BTreeMap<u64, usize>,
    closed_at: Option<Revision>,
}

impl Client {
    fn next_id(&mut self) -> u64 {
        self.next_msg_id += 1;
        self.next_msg_id
    }
}

#[derive(Clone, Default)]
struct CommitLog(Arc<Mutex<Vec<CommitRecord>>>);

impl CommitSink for CommitLog {
    fn on_commit(&mut self, record: &CommitRecord, _outcome: &CommitOutcome, _tree: &DataTree) {
        self.0.lock().expect("commit log lock").push(record.clone());
    }
}

struct World {
    config: ExperimentConfig,
    clock: SimClock<Event>,
    epoch: u64,
    end_of_script: u64,
    script_running: bool,

    server: Server,
    commit_log: CommitLog,
    sessions: BTreeMap<SessionId, Peer>,

    agent: DeviceAgent<SensorGenerator>,
    agent_session: Option<SessionId>,
    agent_up: Channel,
    agent_down: Channel,
    agent_wake_at: Option<u64>,
    conservation_violations: u64,
    deliveries: Vec<u64>,

    clients: Vec<Client>,
    controller: Option<usize>,
    load: Option<usize>,
    load_rng: ChaCha8Rng,
    script: Vec<ScriptedCommand>,
    commands: Vec<CommandRecord>,
    applied: BTreeMap<Revision, u64>,

    trace: Option<Vec<TraceRecord>>,
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<MetricsReport, SimError> {
    Ok(World::new(config, false)?.run().0)
}

/// Like [`run_experiment`], also returning every simulated message.
pub fn run_experiment_traced(config: &ExperimentConfig) -> Result<(MetricsReport, Vec<TraceRecord>), SimError> {
    let (report, trace) = World::new(config, true)?.run();
    Ok((report, trace.unwrap_or_default()))
}

fn initial_tree(epoch: u64) -> DataTree {
    let mut tree = DataTree::new();
    let leds = Value::branch([("led1", Value::Bool(false)), ("led2", Value::Bool(false))]);
    tree.commit(&[WriteOp::set(Path::parse("/leds").expect("valid"), leds)], epoch)
        .expect("seed commit");
    tree
}

impl World {
    fn new(config: &ExperimentConfig, traced: bool) -> Result<Self, SimError> {
        config.validate()?;
        let config = config.clone();
        let mut seeds = ChaCha8Rng::seed_from_u64(config.seed);
        let epoch = config.start_epoch_ms;

        let registry = TokenRegistry::new()
            .with(
                &config.agent.token,
                Principal {
                    id: config.agent.device_id.clone(),
                    kind: PrincipalKind::Device,
                },
            )
            .with(
                DASHBOARD_TOKEN,
                Principal {
                    id: "dashboard".into(),
                    kind: PrincipalKind::User,
                },
            )
            .with(
                LOAD_TOKEN,
                Principal {
                    id: "load-generator".into(),
                    kind: PrincipalKind::Device,
                },
            );
        let server_config = ServerConfig {
            heartbeat_timeout_ms: config.heartbeat_timeout_ms,
        };
        let commit_log = CommitLog::default();
        let server = Server::new(server_config, default_ruleset(), registry, initial_tree(epoch))
            .with_sink(Box::new(commit_log.clone()));

        let sensors = SensorGenerator::new(config.sensor.clone(), seeds.gen());
        let agent = DeviceAgent::new(config.agent.clone(), sensors);
        let agent_up = Channel::new(config.agent_link.up.clone(), seeds.gen());
        let agent_down = Channel::new(config.agent_link.down.clone(), seeds.gen());
        let load_rng = ChaCha8Rng::seed_from_u64(seeds.gen());

        let script = config.commands.expand();
        let mut roles = vec![Role::Subscriber; config.subscribers.count];
        let controller = (!script.is_empty()).then(|| {
            roles.push(Role::Controller);
            roles.len() - 1
        });
        let load = config.load.map(|_| {
            roles.push(Role::Load);
            roles.len() - 1
        });

        let mut world = World {
            end_of_script: config.duration_ms,
            script_running: true,
            clock: SimClock::new(),
            epoch,
            server,
            commit_log,
            sessions: BTreeMap::new(),
            agent,
            agent_session: None,
            agent_up,
            agent_down,
            agent_wake_at: None,
            conservation_violations: 0,
            deliveries: Vec::new(),
            clients: Vec::new(),
            controller,
            load,
            load_rng,
            script,
            commands: Vec::new(),
            applied: BTreeMap::new(),
            trace: traced.then(Vec::new),
            config,
        };
        for role in roles {
            let session = world.server.open_session(epoch);
            let idx = world.clients.len();
            world.sessions.insert(session, Peer::Client(idx));
            world.clients.push(Client {
                role,
                session,
                up: Channel::new(world.config.client_link.up.clone(), seeds.gen()),
                down: Channel::new(world.config.client_link.down.clone(), seeds.gen()),
                next_msg_id: 0,
                pending_subs: BTreeMap::new(),
                subs: BTreeMap::new(),
                pending_commands: BTreeMap::new(),
                closed_at: None,
            });
        }
        Ok(world)
    }

    fn abs(&self, t: u64) -> u64 {
        self.epoch + t
    }

    fn run(mut self) -> (MetricsReport, Option<Vec<TraceRecord>>) {
        for i in 0..self.clients.len() {
            self.client_start(i);
        }
        for (i, cmd) in self.script.iter().enumerate() {
            if cmd.at_ms < self.config.duration_ms {
                self.clock.schedule(cmd.at_ms, Event::Command(i));
            }
        }
        if self.load.is_some() {
            self.clock.schedule(0, Event::LoadTick);
        }
        self.clock.schedule(0, Event::AgentWake);
        self.agent_wake_at = Some(0);
        self.clock.schedule(1_000, Event::Sweep);
        self.clock.schedule(self.end_of_script, Event::EndOfScript);

        let end = self.config.duration_ms + self.config.settle_ms;
        while let Some((t, event)) = self.clock.pop_until(end) {
            self.dispatch(t, event);
        }
        self.report()
    }

    fn dispatch(&mut self, now: u64, event: Event) {
        match event {
            Event::AgentWake => {
                if self.agent_wake_at == Some(now) {
                    self.agent_wake_at = None;
                    self.step_agent(now);
                }
            }
            Event::ToServer(peer, msg) => self.server_receive(peer, msg, now),
            Event::ToAgent(msg) => {
                self.agent.push_input(AgentInput::Message(msg));
                self.step_agent(now);
            }
            Event::ToClient(i, msg) => self.client_receive(i, msg),
            Event::ClientPing(i) => {
                let id = self.clients[i].next_id();
                self.client_send(i, WireMessage::new(id, MessageBody::Ping {}), now);
                self.clock.schedule(now + self.config.client_ping_ms, Event::ClientPing(i));
            }
            Event::Command(k) => self.issue_command(k, now),
            Event::LoadTick => {
                if self.script_running {
                    self.load_commit(now);
                    let rate = self.config.load.map_or(1, |l| l.commits_per_s);
                    self.clock.schedule(now + 1_000 / rate, Event::LoadTick);
                }
            }
            Event::Sweep => {
                for id in self.server.expire_sessions(self.abs(now)) {
                    if let Some(Peer::Client(i)) = self.sessions.get(&id) {
                        self.clients[*i].closed_at = Some(self.server.tree().revision());
                    }
                }
                self.clock.schedule(now + 1_000, Event::Sweep);
            }
            Event::EndOfScript => {
                self.script_running = false;
                self.agent.stop_sampling();
            }
        }
    }

    // ----- agent -----

    fn step_agent(&mut self, now: u64) {
        let effects = self.agent.step(self.abs(now));
        if !self.agent.conservation_holds() {
            self.conservation_violations += 1;
        }
        for effect in effects {
            match effect {
                Effect::Connect => {
                    let alive = self.agent_session.is_some_and(|s| self.server.session(s).is_some());
                    if !alive {
                        let s = self.server.open_session(self.abs(now));
                        self.sessions.insert(s, Peer::Agent);
                        self.agent_session = Some(s);
                    }
                }
                Effect::Send(msg) => self.agent_send(msg, now),
                Effect::SetLed {
                    revision: Some(r), ..
                } => {
                    self.applied.entry(r).or_insert(now);
                }
                Effect::Tx(TxOutcome::DeliveredFirstPass { .. } | TxOutcome::DeliveredFromBuffer { .. }) => {
                    self.deliveries.push(now);
                }
                Effect::SetLed { .. } | Effect::Tx(_) | Effect::Log(_) => {}
            }
        }
        let wake = self.agent.next_wakeup().saturating_sub(self.epoch).max(now);
        if self.agent_wake_at.map_or(true, |w| wake < w) {
            self.agent_wake_at = Some(wake);
            self.clock.schedule(wake, Event::AgentWake);
        }
    }

    fn record(&mut self, now: u64, from: Peer, to: &str, delivered: Option<u64>, msg: &WireMessage) {
        if let Some(trace) = self.trace.as_mut() {
            trace.push(TraceRecord {
                sent_at_ms: now,
                from: from.name(),
                to: to.to_owned(),
                delivered_at_ms: delivered,
                frame: msg.encode().trim_end().to_owned(),
            });
        }
    }

    fn agent_send(&mut self, msg: WireMessage, now: u64) {
        let at = self.agent_up.transmit(now);
        self.record(now, Peer::Agent, "server", at, &msg);
        if let Some(at) = at {
            self.clock.schedule(at, Event::ToServer(Peer::Agent, msg));
        }
    }

    // ----- server -----

    fn server_receive(&mut self, peer: Peer, msg: WireMessage, now: u64) {
        let session = match peer {
            Peer::Agent => self.agent_session,
            Peer::Client(i) => Some(self.clients[i].session),
        };
        let Some(session) = session else {
            return;
        };
        let out = self.server.handle_message(session, msg, self.abs(now));
        for Outbound { session, message } in out {
            match self.sessions.get(&session).copied() {
                Some(Peer::Agent) => {
                    let at = self.agent_down.transmit(now);
                    self.record_down(now, "agent", at, &message);
                    if let Some(at) = at {
                        self.clock.schedule(at, Event::ToAgent(message));
                    }
                }
                Some(Peer::Client(i)) => {
                    let at = self.clients[i].down.transmit(now);
                    self.record_down(now, &Peer::Client(i).name(), at, &message);
                    if let Some(at) = at {
                        self.clock.schedule(at, Event::ToClient(i, message));
                    }
                }
                None => {}
            }
        }
    }

    fn record_down(&mut self, now: u64, to: &str, delivered: Option<u64>, msg: &WireMessage) {
        if let Some(trace) = self.trace.as_mut() {
            trace.push(TraceRecord {
                sent_at_ms: now,
                from: "server".into(),
                to: to.to_owned(),
                delivered_at_ms: delivered,
                frame: msg.encode().trim_end().to_owned(),
            });
        }
    }

    // ----- clients -----

    fn client_send(&mut self, i: usize, msg: WireMessage, now: u64) {
        let at = self.clients[i].up.transmit(now);
        self.record(now, Peer::Client(i), "server", at, &msg);
        if let Some(at) = at {
            self.clock.schedule(at, Event::ToServer(Peer::Client(i), msg));
        }
    }

    fn client_start(&mut self, i: usize) {
        let token = match self.clients[i].role {
            Role::Load => LOAD_TOKEN,
            Role::Subscriber | Role::Controller => DASHBOARD_TOKEN,
        };
        let id = self.clients[i].next_id();
        self.client_send(i, WireMessage::new(id, MessageBody::Auth { token: token.into() }), 0);
        if self.clients[i].role == Role::Subscriber {
            for p in self.config.subscribers.paths.clone() {
                let c = &mut self.clients[i];
                let id = c.next_id();
                c.pending_subs.insert(id, Path::parse(&p).expect("validated"));
                self.client_send(i, WireMessage::new(id, MessageBody::Subscribe { path: p }), 0);
            }
        }
        self.clock.schedule(self.config.client_ping_ms, Event::ClientPing(i));
    }

    fn client_receive(&mut self, i: usize, msg: WireMessage) {
        let c = &mut self.clients[i];
        match msg.body {
            MessageBody::Ack {
                msg_id,
                revision,
                sub_id,
                ..
            } => {
                if let (Some(path), Some(sub_id), Some(base)) = (c.pending_subs.remove(&msg_id), sub_id, revision) {
                    c.subs.insert(
                        sub_id,
                        Subscription {
                            path,
                            base,
                            snapshot_seen: false,
                            received: Vec::new(),
                        },
                    );
                }
                if let Some(k) = c.pending_commands.remove(&msg_id) {
                    self.commands[k].revision = revision;
                }
            }
            MessageBody::Err { msg_id, code, reason } => {
                tracing::debug!(client = i, msg_id, ?code, %reason, "client request rejected");
                c.pending_commands.remove(&msg_id);
            }
            MessageBody::Event {
                sub_id, revision, path, ..
            } => {
                if let Some(s) = c.subs.get_mut(&sub_id) {
                    if s.snapshot_seen {
                        s.received.push((revision, path));
                    } else {
                        s.snapshot_seen = true;
                    }
                }
            }
            _ => {}
        }
    }

    fn issue_command(&mut self, k: usize, now: u64) {
        let Some(ctl) = self.controller else {
            return;
        };
        let cmd = self.script[k];
        let idx = self.commands.len();
        self.commands.push(CommandRecord {
            issued_at_ms: now,
            revision: None,
            applied_at_ms: None,
        });
        let c = &mut self.clients[ctl];
        let id = c.next_id();
        c.pending_commands.insert(id, idx);
        let body = MessageBody::Put {
            path: format!("/leds/{}", cmd.target),
            value: Value::Bool(cmd.value),
            client_time_ms: self.epoch + now,
        };
        self.client_send(ctl, WireMessage::new(id, body), now);
    }

    fn load_commit(&mut self, now: u64) {
        let Some(i) = self.load else {
            return;
        };
        let r = &mut self.load_rng;
        let ops = vec![
            UpdateEntry::set(&Path::parse("/sensors/temperature").expect("valid"), r.gen_range(15.0..35.0)),
            UpdateEntry::set(&Path::parse("/sensors/humidity").expect("valid"), r.gen_range(30.0..90.0)),
            UpdateEntry::set(&Path::parse("/sensors/distance").expect("valid"), r.gen_range(2.0..400.0)),
        ];
        let id = self.clients[i].next_id();
        self.client_send(i, WireMessage::new(id, MessageBody::Update { ops }), now);
    }

    // ----- metrics -----

    fn partitions(&self) -> Vec<Partition> {
        let mut windows: Vec<Partition> = self
            .config
            .agent_link
            .up
            .partitions
            .iter()
            .chain(&self.config.agent_link.down.partitions)
            .copied()
            .collect();
        windows.sort_by_key(|p| (p.start_ms, p.end_ms));
        windows.dedup_by_key(|p| (p.start_ms, p.end_ms));
        windows
    }

    fn report(mut self) -> (MetricsReport, Option<Vec<TraceRecord>>) {
        let stats = self.agent.stats().clone();
        let produced = stats.frames_produced;
        let rate = |n: u64| if produced == 0 { 1.0 } else { n as f64 / produced as f64 };

        for cmd in &mut self.commands {
            cmd.applied_at_ms = cmd.revision.and_then(|r| self.applied.get(&r).copied());
        }
        let control_latency = measure_control_latency(&self.commands);

        let recovery = self
            .partitions()
            .into_iter()
            .map(|p| {
                let first = self.deliveries.iter().copied().find(|t| *t >= p.end_ms);
                RecoveryRecord {
                    partition_start_ms: p.start_ms,
                    partition_end_ms: p.end_ms,
                    recovery_time_ms: first.map(|t| t - p.start_ms),
                    after_end_ms: first.map(|t| t - p.end_ms),
                }
            })
            .collect();

        let commits = self.commit_log.0.lock().expect("commit log lock").clone();
        let audit = audit_events(&self.clients, &commits, initial_tree(self.epoch));

        let mut messages_sent = self.agent_up.sent + self.agent_down.sent;
        let mut messages_dropped = self.agent_up.dropped + self.agent_down.dropped;
        for c in &self.clients {
            messages_sent += c.up.sent + c.down.sent;
            messages_dropped += c.up.dropped + c.down.dropped;
        }

        let report = MetricsReport {
            seed: self.config.seed,
            duration_ms: self.config.duration_ms,
            frames_produced: produced,
            frames_delivered: stats.frames_delivered,
            frames_delivered_first_pass: stats.delivered_first_pass,
            frames_in_flight: self.agent.frames_in_flight(),
            frames_buffered: self.agent.buffer().len() as u64,
            frames_dropped: self.agent.buffer().drop_count(),
            first_pass_success_rate: rate(stats.delivered_first_pass),
            eventual_delivery_rate: rate(stats.frames_delivered),
            conservation_violations: self.conservation_violations,
            sensor_update_hz: produced as f64 * 1000.0 / self.config.duration_ms as f64,
            control_latency,
            commands: self.commands,
            recovery,
            subscriptions: audit.subscriptions,
            events_expected: audit.expected,
            events_received: audit.received,
            event_loss_count: audit.lost,
            event_order_violations: audit.order_violations,
            commits: commits.len() as u64,
            messages_sent,
            messages_dropped,
            agent: stats,
        };
        (report, self.trace)
    }
}

#[derive(Debug, Default)]
struct EventAudit {
    subscriptions: u64,
    expected: u64,
    received: u64,
    lost: u64,
    order_violations: u64,
}

/// Replays the commit log against a fresh tree and compares what each
/// subscription should have seen with what it actually received.
fn audit_events(clients: &[Client], commits: &[CommitRecord], mut oracle: DataTree) -> EventAudit {
    let subs: Vec<(&Client, &Subscription)> = clients
        .iter()
        .flat_map(|c| c.subs.values().map(move |s| (c, s)))
        .collect();
    let mut expected: Vec<Vec<(Revision, String)>> = vec![Vec::new(); subs.len()];

    if subs.is_empty() {
        return EventAudit::default();
    }
    for record in commits {
        let batch = record.to_batch().expect("logged batches are valid");
        let emitted: Vec<bool> = batch
            .iter()
            .map(|op| match &op.action {
                // an all-empty branch prunes away and acts as a delete
                WriteAction::Set(v) if v.clone().pruned().is_some() => true,
                _ => oracle.get(&op.path).is_some(),
            })
            .collect();
        let covered: Vec<Option<Option<Value>>> = subs
            .iter()
            .map(|(_, sub)| {
                batch
                    .iter()
                    .any(|op| op.path.is_strict_ancestor(&sub.path))
                    .then(|| oracle.get(&sub.path).cloned())
            })
            .collect();
        oracle.commit(&batch, record.server_time_ms).expect("logged batches apply");
        for (k, (client, sub)) in subs.iter().enumerate() {
            if record.revision <= sub.base || client.closed_at.is_some_and(|c| record.revision > c) {
                continue;
            }
            for (op, emitted) in batch.iter().zip(&emitted) {
                if *emitted && sub.path.is_ancestor_or_equal(&op.path) {
                    expected[k].push((record.revision, op.path.to_string()));
                }
            }
            if let Some(before) = &covered[k] {
                if before.as_ref() != oracle.get(&sub.path) {
                    expected[k].push((record.revision, sub.path.to_string()));
                }
            }
        }
    }

    let mut audit = EventAudit {
        subscriptions: subs.len() as u64,
        ..EventAudit::default()
    };
    for (k, (_, sub)) in subs.iter().enumerate() {
        audit.expected += expected[k].len() as u64;
        audit.received += sub.received.len() as u64;
        let mut remaining: BTreeMap<&(Revision, String), u64> = BTreeMap::new();
        for e in &expected[k] {
            *remaining.entry(e).or_default() += 1;
        }
        for e in &sub.received {
            if let Some(n) = remaining.get_mut(e) {
                *n = n.saturating_sub(1);
            }
        }
        audit.lost += remaining.values().sum::<u64>();

        // one commit may yield several events; distinct revisions must match in order
        let mut want: Vec<Revision> = expected[k].iter().map(|e| e.0).collect();
        want.dedup();
        let mut got: Vec<Revision> = Vec::new();
        for (r, _) in &sub.received {
            match got.last() {
                Some(last) if r < last => audit.order_violations += 1,
                Some(last) if r == last => {}
                _ => got.push(*r),
            }
        }
        if got != want {
            audit.order_violations += 1;
        }
    }
    audit
}
