use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Reply {
    Ack,
    Fail,
    Silent,
}

fn constant(t_ms: u64) -> SensorFrame {
    SensorFrame {
        t_raw: 23.2,
        h_raw: 72.2,
        d_raw: 17.68,
        sample_time_ms: t_ms,
    }
}

type Policy = Box<dyn FnMut(u64, &WireMessage) -> Reply>;

/// Drives an agent against a zero-latency scripted transport.
struct Harness {
    agent: DeviceAgent<fn(u64) -> SensorFrame>,
    now: u64,
    trace: Vec<(u64, Effect)>,
    policy: Policy,
    conservation_checked: u64,
}

impl Harness {
    fn new(config: AgentConfig, policy: Policy) -> Self {
        Self {
            agent: DeviceAgent::new(config, constant as fn(u64) -> SensorFrame),
            now: 0,
            trace: Vec::new(),
            policy,
            conservation_checked: 0,
        }
    }

    fn acking() -> Self {
        Self::new(AgentConfig::default(), Box::new(|_, _| Reply::Ack))
    }

    fn step_at(&mut self, now: u64) {
        self.now = now;
        let effects = self.agent.step(now);
        assert!(self.agent.conservation_holds(), "conservation broken at {now}");
        self.conservation_checked += 1;
        for e in effects {
            if let Effect::Send(msg) = &e {
                match (self.policy)(now, msg) {
                    Reply::Ack => self.agent.push_input(AgentInput::Message(reply_for(msg, now))),
                    Reply::Fail => self.agent.push_input(AgentInput::SendFailed(msg.msg_id)),
                    Reply::Silent => {}
                }
            }
            self.trace.push((now, e));
        }
    }

    /// Steps at every wakeup up to and including `until`.
    fn run_until(&mut self, until: u64) {
        loop {
            let next = self.agent.next_wakeup().max(self.now);
            if next > until {
                break;
            }
            self.step_at(next);
        }
        self.now = until;
    }

    fn sends(&self) -> impl Iterator<Item = (u64, &WireMessage)> {
        self.trace.iter().filter_map(|(t, e)| match e {
            Effect::Send(m) => Some((*t, m)),
            _ => None,
        })
    }

    fn tx(&self) -> Vec<TxOutcome> {
        self.trace
            .iter()
            .filter_map(|(_, e)| match e {
                Effect::Tx(o) => Some(*o),
                _ => None,
            })
            .collect()
    }
}

fn reply_for(msg: &WireMessage, now: u64) -> WireMessage {
    let body = match msg.body {
        MessageBody::Ping {} => MessageBody::Pong {
            msg_id: msg.msg_id,
            server_time_ms: now,
        },
        _ => MessageBody::Ack {
            msg_id: msg.msg_id,
            revision: Some(Revision(1)),
            server_time_ms: now,
            sub_id: matches!(msg.body, MessageBody::Subscribe { .. }).then_some(1),
            value: None,
        },
    };
    WireMessage::new(0, body)
}

/// Sample time of the frame an UPDATE carries, live or history.
fn frame_time(msg: &WireMessage) -> Option<u64> {
    let MessageBody::Update { ops } = &msg.body else {
        return None;
    };
    ops.iter().find_map(|op| {
        if op.path == "/metadata/last_update" {
            let text = op.value.as_ref()?.as_str()?;
            Some(chrono::DateTime::parse_from_rfc3339(text).ok()?.timestamp_millis() as u64)
        } else {
            op.path.strip_prefix("/history/")?.parse().ok()
        }
    })
}

fn is_auth(msg: &WireMessage) -> bool {
    matches!(msg.body, MessageBody::Auth { .. })
}

fn led_event(target: &str, value: bool, revision: u64, server_time_ms: u64) -> AgentInput {
    AgentInput::Message(WireMessage::new(
        0,
        MessageBody::Event {
            sub_id: 1,
            revision: Revision(revision),
            path: format!("/leds/{target}"),
            value: Some(Value::Bool(value)),
            server_time_ms,
        },
    ))
}

#[test]
fn happy_path_delivers_first_pass() {
    let mut h = Harness::acking();
    h.run_until(0);
    assert_eq!(
        h.tx(),
        vec![TxOutcome::DeliveredFirstPass {
            sample_time_ms: 0,
            attempts: 1
        }]
    );
    assert!(h.agent.buffer().is_empty());
    assert_eq!(h.agent.link_state(), LinkState::Up);
}

#[test]
fn live_batch_carries_fixed_leaves() {
    let mut h = Harness::acking();
    h.run_until(0);
    let (_, msg) = h.sends().find(|(_, m)| frame_time(m).is_some()).unwrap();
    let MessageBody::Update { ops } = &msg.body else { unreachable!() };
    let paths: Vec<&str> = ops.iter().map(|o| o.path.as_str()).collect();
    assert_eq!(
        paths,
        [
            "/sensors/temperature",
            "/sensors/humidity",
            "/sensors/distance",
            "/metadata/last_update",
            "/metadata/device_id"
        ]
    );
    assert_eq!(ops[0].value, Some(Value::Number(23.2)));
    assert_eq!(ops[3].value, Some(Value::from("1970-01-01T00:00:00Z")));
}

#[test]
fn two_failures_then_success_uses_backoff_delays() {
    let mut failures = 0;
    let policy: Policy = Box::new(move |_, m| {
        if frame_time(m) == Some(0) && failures < 2 {
            failures += 1;
            Reply::Fail
        } else {
            Reply::Ack
        }
    });
    let mut h = Harness::new(AgentConfig::default(), policy);
    h.run_until(1_600);
    let attempts: Vec<u64> = h.sends().filter(|(_, m)| frame_time(m) == Some(0)).map(|(t, _)| t).collect();
    assert_eq!(attempts, vec![0, 500, 1_500]);
    assert!(h.tx().contains(&TxOutcome::DeliveredFirstPass {
        sample_time_ms: 0,
        attempts: 3
    }));
}

#[test]
fn three_failures_buffer_and_retry_after_thirty_seconds() {
    let mut failures = 0;
    let policy: Policy = Box::new(move |_, m| {
        if frame_time(m) == Some(0) && failures < 3 {
            failures += 1;
            Reply::Fail
        } else {
            Reply::Ack
        }
    });
    let mut h = Harness::new(AgentConfig::default(), policy);
    h.step_at(0);
    h.agent.stop_sampling();
    h.run_until(40_000);
    assert_eq!(h.tx()[0], TxOutcome::Buffered { sample_time_ms: 0 });
    let attempts: Vec<u64> = h.sends().filter(|(_, m)| frame_time(m) == Some(0)).map(|(t, _)| t).collect();
    assert_eq!(attempts, vec![0, 500, 1_500, 31_500]);
    assert_eq!(h.tx()[1], TxOutcome::DeliveredFromBuffer { sample_time_ms: 0 });
    assert!(h.agent.is_quiescent());
    assert_eq!(h.agent.stats().frames_delivered, 1);
}

#[test]
fn success_drains_buffer_oldest_first() {
    // nothing gets through before 3 s; frames 0 and 1 run out of attempts
    let policy: Policy = Box::new(|now, m| match frame_time(m) {
        Some(_) if now < 3_000 => Reply::Fail,
        _ => Reply::Ack,
    });
    let mut h = Harness::new(AgentConfig::default(), policy);
    h.run_until(3_000);
    let drained: Vec<u64> = h
        .tx()
        .iter()
        .filter_map(|o| match o {
            TxOutcome::DeliveredFromBuffer { sample_time_ms } => Some(*sample_time_ms),
            _ => None,
        })
        .collect();
    assert_eq!(drained, vec![0, 1_000]);
    // frame 2 was still mid-retry when frame 3 landed
    assert_eq!(h.agent.stats().delivered_first_pass, 1);
}

#[test]
fn superseded_frames_go_to_history() {
    let mut failed = false;
    let policy: Policy = Box::new(move |_, m| {
        if frame_time(m) == Some(0) && !failed {
            failed = true;
            Reply::Silent
        } else {
            Reply::Ack
        }
    });
    let mut h = Harness::new(AgentConfig::default(), policy);
    h.run_until(2_000);
    let frame0: Vec<String> = h
        .sends()
        .filter(|(_, m)| frame_time(m) == Some(0))
        .map(|(_, m)| m.encode())
        .collect();
    assert_eq!(frame0.len(), 2);
    assert!(frame0[0].contains("/sensors/temperature"));
    // frame 1 went live before the retry, so the retry must not roll back the live leaves
    assert!(frame0[1].contains("\"/history/0\""));
}

#[test]
fn reconnect_delays_follow_backoff() {
    let config = AgentConfig {
        recovery_attempts: 100,
        ..AgentConfig::default()
    };
    let policy: Policy = Box::new(|_, m| if is_auth(m) { Reply::Fail } else { Reply::Silent });
    let mut h = Harness::new(config, policy);
    h.step_at(0);
    h.agent.stop_sampling();
    h.run_until(40_000);
    let connects: Vec<u64> = h
        .trace
        .iter()
        .filter(|(_, e)| *e == Effect::Connect)
        .map(|(t, _)| *t)
        .collect();
    let gaps: Vec<u64> = connects.windows(2).map(|w| w[1] - w[0]).collect();
    assert_eq!(&gaps[..6], &[500, 1_000, 2_000, 4_000, 8_000, 8_000]);
}

#[test]
fn idle_link_never_reconnects() {
    let mut h = Harness::acking();
    h.run_until(120_000);
    let connects = h.trace.iter().filter(|(_, e)| *e == Effect::Connect).count();
    assert_eq!(connects, 1);
    assert_eq!(h.agent.stats().link_losses, 0);
}

#[test]
fn sixty_seconds_sixty_transmissions() {
    let mut h = Harness::acking();
    h.run_until(59_999);
    let frames: std::collections::BTreeSet<u64> = h.sends().filter_map(|(_, m)| frame_time(m)).collect();
    assert_eq!(frames.len(), 60);
    assert_eq!(h.agent.stats().frames_produced, 60);
    assert_eq!(h.agent.stats().delivered_first_pass, 60);
}

#[test]
fn staleness_boundary_is_exact() {
    for (age, accepted) in [(4_999, true), (5_000, true), (5_001, false), (60_000, false)] {
        let mut h = Harness::acking();
        h.run_until(0);
        let cmd = CommandEnvelope {
            target: LedTarget::Led1,
            value: true,
            command_time_ms: 100_000,
            revision: Revision(5),
        };
        let out = h.agent.handle_command(&cmd, 100_000 + age, 0);
        assert_eq!(out == CommandOutcome::Accepted, accepted, "age {age}");
        assert_eq!(h.agent.actuators().led(LedTarget::Led1), accepted);
    }
}

#[test]
fn stale_event_in_tick_leaves_actuator_alone() {
    let mut h = Harness::acking();
    h.run_until(10_000);
    h.agent.push_input(led_event("led1", true, 9, 10_000 - 5_001));
    h.step_at(10_000);
    assert!(!h.trace.iter().any(|(_, e)| matches!(e, Effect::SetLed { .. })));
    assert!(!h.agent.actuators().led(LedTarget::Led1));
    assert_eq!(h.agent.stats().commands_stale, 1);
}

#[test]
fn accepted_command_sets_led_and_writes_ack() {
    let mut h = Harness::acking();
    h.run_until(10_000);
    h.agent.push_input(led_event("led1", true, 9, 9_500));
    h.step_at(10_000);
    assert!(h.trace.iter().any(|(_, e)| *e
        == Effect::SetLed {
            target: LedTarget::Led1,
            on: true,
            revision: Some(Revision(9))
        }));
    let ack = h
        .sends()
        .map(|(_, m)| m.encode())
        .find(|m| m.contains("/metadata/ack/led1"))
        .expect("ack written");
    assert!(ack.contains(r#""revision":9"#), "{ack}");
    assert!(ack.contains(r#""applied_at":10000"#), "{ack}");
    // duplicate delivery is a replay
    h.agent.push_input(led_event("led1", false, 9, 9_900));
    h.step_at(10_001);
    assert!(h.agent.actuators().led(LedTarget::Led1));
    assert_eq!(h.agent.stats().commands_replayed, 1);
}

#[test]
fn unknown_target_is_ignored() {
    let mut h = Harness::acking();
    h.run_until(1_000);
    h.agent.push_input(led_event("led3", true, 9, 1_000));
    h.step_at(1_000);
    assert!(!h.trace.iter().any(|(_, e)| matches!(e, Effect::SetLed { .. })));
}

#[test]
fn permuted_and_duplicated_events_never_regress() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let mut h = Harness::acking();
        h.run_until(1_000);
        let commands: Vec<(u64, bool)> = (1..=20).map(|r| (r, rng.gen())).collect();
        let mut deliveries: Vec<(u64, bool)> = commands.clone();
        for _ in 0..10 {
            let i = rng.gen_range(0..commands.len());
            deliveries.push(commands[i]);
        }
        for i in (1..deliveries.len()).rev() {
            deliveries.swap(i, rng.gen_range(0..=i));
        }
        let mut high = 0;
        for (rev, value) in deliveries {
            h.agent.push_input(led_event("led2", value, rev, 1_000));
            h.step_at(1_000);
            high = high.max(rev);
            let applied = h.agent.actuators().last_revision(LedTarget::Led2).unwrap();
            assert_eq!(applied, Revision(high));
            let expected = commands[(high - 1) as usize].1;
            assert_eq!(h.agent.actuators().led(LedTarget::Led2), expected);
        }
    }
}

#[test]
fn status_timer_fires_every_interval() {
    let mut h = Harness::acking();
    h.step_at(0);
    assert!(h.agent.periodic_status_update(9_000).is_none());
    let first = h.agent.periodic_status_update(10_000).expect("due at 10 s");
    assert!(h.agent.periodic_status_update(19_000).is_none());
    assert!(h.agent.periodic_status_update(20_000).is_some());
    let text = first.encode();
    assert!(text.contains("/metadata/status"));
    assert!(text.contains(r#""mode":"normal""#));
    assert!(text.contains(r#""temperature":23.2"#));
}

#[test]
fn status_reflects_accepted_command() {
    let mut h = Harness::acking();
    h.run_until(5_000);
    h.agent.push_input(led_event("led1", true, 3, 5_000));
    h.step_at(5_000);
    let status = h.agent.periodic_status_update(10_000).unwrap().encode();
    assert!(status.contains(r#""led1":true"#), "{status}");
    assert!(status.contains(r#""led2":false"#), "{status}");
}

#[test]
fn first_breach_is_recovery_attempt_one() {
    let mut h = Harness::new(AgentConfig::default(), Box::new(|_, _| Reply::Silent));
    h.step_at(0);
    // the unanswered AUTH times out at 1000, so the link is down for this check
    h.agent.fire_timeouts(1_000);
    let actions = h.agent.monitor_health(1_000);
    assert_eq!(actions, vec![RecoveryAction::Reconnect]);
    assert_eq!(h.agent.mode(), Mode::Normal);
    assert_eq!(h.agent.health(1_000).consecutive_failures, 1);
}

#[test]
fn safe_mode_after_three_failed_recoveries() {
    let mut h = Harness::new(AgentConfig::default(), Box::new(|_, _| Reply::Silent));
    h.run_until(3_999);
    assert_eq!(h.agent.mode(), Mode::Normal);
    assert_eq!(h.agent.health(3_999).consecutive_failures, 3);
    h.run_until(4_000);
    assert_eq!(h.agent.mode(), Mode::Safe);
    assert_eq!(h.agent.stats().safe_mode_entries, 1);
    let status = h.agent.periodic_status_update(10_000).unwrap();
    let MessageBody::Update { ops } = &status.body else { unreachable!() };
    assert_eq!(ops[0].value, Some(Value::branch([("mode", Value::from("safe"))])));
}

#[test]
fn clean_check_resets_failure_count() {
    let mut up = false;
    let policy: Policy = Box::new(move |now, m| {
        if is_auth(m) {
            up = now >= 2_500;
        }
        if up {
            Reply::Ack
        } else {
            Reply::Silent
        }
    });
    let mut h = Harness::new(AgentConfig::default(), policy);
    h.run_until(6_000);
    assert_eq!(h.agent.mode(), Mode::Normal);
    assert_eq!(h.agent.health(6_000).consecutive_failures, 0);
}

#[test]
fn reset_preserves_buffer() {
    let mut h = Harness::new(AgentConfig::default(), Box::new(|_, _| Reply::Silent));
    h.run_until(4_999);
    assert_eq!(h.agent.mode(), Mode::Safe);
    let before: Vec<u64> = h.agent.buffer().frames().map(|f| f.sample_time_ms).collect();
    let stats_before = h.agent.stats().clone();
    h.run_until(5_000);
    assert_eq!(h.agent.mode(), Mode::Normal);
    assert_eq!(h.agent.stats().resets, 1);
    let after: Vec<u64> = h.agent.buffer().frames().map(|f| f.sample_time_ms).collect();
    assert!(!before.is_empty());
    assert!(before.iter().all(|t| after.contains(t)), "{before:?} vs {after:?}");
    assert!(h.agent.stats().frames_produced >= stats_before.frames_produced);
    // LEDs are driven off and the agent reconnects straight away
    let reset_effects: Vec<&Effect> = h.trace.iter().filter(|(t, _)| *t == 5_000).map(|(_, e)| e).collect();
    assert!(reset_effects.contains(&&Effect::Connect));
    assert!(reset_effects.contains(&&Effect::SetLed {
        target: LedTarget::Led1,
        on: false,
        revision: None
    }));
}

#[test]
fn buffer_overflow_drops_oldest_and_counts() {
    let config = AgentConfig {
        buffer_capacity: 4,
        ..AgentConfig::default()
    };
    let mut h = Harness::new(config, Box::new(|_, _| Reply::Fail));
    h.run_until(30_000);
    assert!(h.agent.buffer().drop_count() > 0);
    assert!(h.agent.buffer().len() <= 4);
    assert!(h.agent.conservation_holds());
}

fn random_trace(seed: u64) -> (Vec<(u64, Effect)>, AgentStats) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let policy: Policy = Box::new(move |_, _| match rng.gen_range(0..10) {
        0..=6 => Reply::Ack,
        7 => Reply::Fail,
        _ => Reply::Silent,
    });
    let mut h = Harness::new(AgentConfig::default(), policy);
    h.run_until(120_000);
    (h.trace, h.agent.stats().clone())
}

#[test]
fn identical_inputs_give_identical_traces() {
    let (a, sa) = random_trace(42);
    let (b, sb) = random_trace(42);
    assert_eq!(a, b);
    assert_eq!(sa, sb);
    let (c, _) = random_trace(43);
    assert_ne!(a, c);
}

#[test]
fn conservation_holds_under_random_faults() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let policy: Policy = Box::new(move |_, _| match rng.gen_range(0..4) {
            0 => Reply::Fail,
            1 => Reply::Silent,
            _ => Reply::Ack,
        });
        let mut h = Harness::new(AgentConfig::default(), policy);
        h.run_until(90_000);
        assert!(h.conservation_checked > 90);
    }
}

#[test]
fn clock_offset_comes_from_ping_round_trip() {
    let mut h = Harness::acking();
    h.run_until(5_000);
    // the scripted server clock equals the local clock
    assert_eq!(h.agent.server_now(7_000), 7_000);
}

#[test]
fn action_log_is_jsonl() {
    let r = ActionRecord {
        time_ms: 5,
        kind: ActionKind::Recovery,
        detail: "x".into(),
    };
    assert_eq!(r.to_jsonl(), "{\"time_ms\":5,\"kind\":\"recovery\",\"detail\":\"x\"}\n");
}
