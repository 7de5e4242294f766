//! Real-time driver for the device agent over TCP.

use std::io::Write;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::tcp::OwnedWriteHalf;
use tokio::net::TcpStream;
use tokio::sync::mpsc;
use treesync_core::agent::{AgentConfig, AgentInput, DeviceAgent, Effect};
use treesync_core::WireMessage;
use treesync_simnet::{sample_sensor, SensorGenerator, SensorModel};

use crate::error::CliError;

const CONNECT_TIMEOUT: Duration = Duration::from_secs(2);

pub struct AgentOptions {
    pub config: AgentConfig,
    pub action_log: Option<PathBuf>,
    pub sensor_seed: u64,
    pub run_for_ms: Option<u64>,
}

enum Inbound {
    Frame(u64, WireMessage),
    Closed(u64),
}

struct Link {
    writer: Option<OwnedWriteHalf>,
    generation: u64,
}

impl Link {
    async fn connect(&mut self, addr: &str, tx: &mpsc::UnboundedSender<Inbound>) {
        self.generation += 1;
        self.writer = None;
        let stream = match tokio::time::timeout(CONNECT_TIMEOUT, TcpStream::connect(addr)).await {
            Ok(Ok(s)) => s,
            Ok(Err(e)) => {
                tracing::warn!(%addr, error = %e, "connect failed");
                return;
            }
            Err(_) => {
                tracing::warn!(%addr, "connect timed out");
                return;
            }
        };
        let _ = stream.set_nodelay(true);
        let (read, writer) = stream.into_split();
        self.writer = Some(writer);
        let generation = self.generation;
        let tx = tx.clone();
        tokio::spawn(async move {
            let mut lines = BufReader::new(read).lines();
            while let Ok(Some(line)) = lines.next_line().await {
                match WireMessage::decode(&line) {
                    Ok(msg) => {
                        if tx.send(Inbound::Frame(generation, msg)).is_err() {
                            return;
                        }
                    }
                    Err(e) => tracing::warn!(error = %e, "ignoring undecodable frame"),
                }
            }
            let _ = tx.send(Inbound::Closed(generation));
        });
    }

    /// False when the frame could not be written.
    async fn send(&mut self, msg: &WireMessage) -> bool {
        let Some(w) = self.writer.as_mut() else {
            return false;
        };
        if w.write_all(msg.encode().as_bytes()).await.is_ok() {
            return true;
        }
        self.writer = None;
        false
    }
}

pub async fn run(opts: AgentOptions) -> Result<(), CliError> {
    let mut log = match &opts.action_log {
        Some(p) => Some(
            std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?,
        ),
        None => None,
    };
    let addr = opts.config.server_addr.clone();
    let mut generator = SensorGenerator::new(SensorModel::default(), opts.sensor_seed);
    let mut agent = DeviceAgent::new(opts.config, move |t| sample_sensor(&mut generator, t));

    let (tx, mut rx) = mpsc::unbounded_channel();
    let mut link = Link {
        writer: None,
        generation: 0,
    };
    let start = Instant::now();
    let now = || start.elapsed().as_millis() as u64;
    let deadline = opts.run_for_ms;
    let ctrl_c = tokio::signal::ctrl_c();
    tokio::pin!(ctrl_c);

    loop {
        let t = now();
        if deadline.is_some_and(|d| t >= d) {
            break;
        }
        for effect in agent.step(t) {
            match effect {
                Effect::Connect => {
                    link.connect(&addr, &tx).await;
                }
                Effect::Send(msg) => {
                    if !link.send(&msg).await {
                        agent.push_input(AgentInput::SendFailed(msg.msg_id));
                    }
                }
                Effect::SetLed { target, on, revision } => {
                    tracing::info!(led = target.as_str(), on, ?revision, "led");
                }
                Effect::Log(record) => {
                    tracing::debug!(kind = ?record.kind, detail = %record.detail, "action");
                    if let Some(f) = log.as_mut() {
                        f.write_all(record.to_jsonl().as_bytes())?;
                    }
                }
                Effect::Tx(outcome) => tracing::trace!(?outcome, "tx"),
            }
        }

        let wake = agent.next_wakeup().max(now() + 1);
        let wake = deadline.map_or(wake, |d| wake.min(d));
        let sleep = tokio::time::sleep(Duration::from_millis(wake.saturating_sub(now())));
        tokio::select! {
            _ = sleep => {}
            Some(inbound) = rx.recv() => match inbound {
                Inbound::Frame(g, msg) if g == link.generation => agent.push_input(AgentInput::Message(msg)),
                Inbound::Closed(g) if g == link.generation => {
                    link.writer = None;
                    agent.push_input(AgentInput::Disconnected);
                }
                _ => {}
            },
            _ = &mut ctrl_c => break,
        }
    }
    if let Some(f) = log.as_mut() {
        f.flush()?;
    }
    let stats = agent.stats();
    tracing::info!(?stats, "agent stopped");
    Ok(())
}
