//! Network runtime around the sans-IO server: NDJSON over TCP plus the same
//! frames as websocket text messages.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use futures_util::{SinkExt, StreamExt};
use serde::{Deserialize, Serialize};
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::mpsc;
use tokio_tungstenite::tungstenite::Message;
use treesync_core::persist::{CommitRecord, FileStore};
use treesync_core::rules::{default_ruleset, Principal, PrincipalKind};
use treesync_core::server::DEFAULT_HEARTBEAT_TIMEOUT_MS;
use treesync_core::tree::example_document;
use treesync_core::{DataTree, Path, RuleSet, Server, ServerConfig, SessionId, TokenRegistry, WriteOp};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub listen: String,
    /// Websocket endpoint for browser clients; `None` disables it.
    pub ws_listen: Option<String>,
    pub heartbeat_timeout_ms: u64,
    pub rules_path: Option<PathBuf>,
    pub tokens_path: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
    pub checkpoint_every: u64,
    /// Load the sample sensor/LED/metadata document into an empty tree.
    pub seed_example: bool,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:7070".into(),
            ws_listen: Some("127.0.0.1:7071".into()),
            heartbeat_timeout_ms: DEFAULT_HEARTBEAT_TIMEOUT_MS,
            rules_path: None,
            tokens_path: None,
            data_dir: None,
            checkpoint_every: 1_000,
            seed_example: false,
        }
    }
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Tokens accepted when no registry file is given.
pub fn default_registry() -> TokenRegistry {
    TokenRegistry::new()
        .with(
            "device-token",
            Principal {
                id: "ESP32_001".into(),
                kind: PrincipalKind::Device,
            },
        )
        .with(
            "dashboard-token",
            Principal {
                id: "dashboard".into(),
                kind: PrincipalKind::User,
            },
        )
}

struct Hub {
    server: Mutex<Server>,
    peers: Mutex<HashMap<SessionId, mpsc::UnboundedSender<String>>>,
}

impl Hub {
    fn open(&self) -> (SessionId, mpsc::UnboundedReceiver<String>) {
        let (tx, rx) = mpsc::unbounded_channel();
        let id = self.server.lock().expect("server lock").open_session(now_ms());
        self.peers.lock().expect("peers lock").insert(id, tx);
        (id, rx)
    }

    fn close(&self, id: SessionId) {
        self.server.lock().expect("server lock").close_session(id);
        self.peers.lock().expect("peers lock").remove(&id);
    }

    /// Handles one frame; false once the session no longer exists.
    fn dispatch(&self, id: SessionId, frame: &str) -> bool {
        let (out, alive) = {
            let mut server = self.server.lock().expect("server lock");
            let out = server.handle_frame(id, frame, now_ms());
            (out, server.session(id).is_some())
        };
        let peers = self.peers.lock().expect("peers lock");
        for o in out {
            if let Some(tx) = peers.get(&o.session) {
                let _ = tx.send(o.message.encode());
            }
        }
        alive
    }

    fn sweep(&self) {
        let expired = self.server.lock().expect("server lock").expire_sessions(now_ms());
        let mut peers = self.peers.lock().expect("peers lock");
        for id in expired {
            tracing::info!(session = id, "heartbeat timeout");
            peers.remove(&id);
        }
    }
}

struct AbortOnDrop(Vec<tokio::task::JoinHandle<()>>);

impl Drop for AbortOnDrop {
    fn drop(&mut self) {
        for t in &self.0 {
            t.abort();
        }
    }
}

pub struct Bound {
    pub tcp: SocketAddr,
    pub ws: Option<SocketAddr>,
}

fn load_server(config: &ServeConfig) -> Result<Server, CliError> {
    let read = |p: &PathBuf| std::fs::read_to_string(p).map_err(|e| CliError::Input(format!("{}: {e}", p.display())));
    let rules = match &config.rules_path {
        Some(p) => RuleSet::from_json(&read(p)?).map_err(|e| CliError::Input(e.to_string()))?,
        None => default_ruleset(),
    };
    let registry = match &config.tokens_path {
        Some(p) => TokenRegistry::from_json(&read(p)?).map_err(|e| CliError::Input(e.to_string()))?,
        None => default_registry(),
    };
    let (mut store, mut tree) = match &config.data_dir {
        Some(dir) => {
            let (store, tree) =
                FileStore::open(dir, config.checkpoint_every).map_err(|e| CliError::Input(e.to_string()))?;
            (Some(store), tree)
        }
        None => (None, DataTree::new()),
    };
    if config.seed_example && tree.is_empty() {
        let now = now_ms();
        let batch = [WriteOp::set(Path::root(), example_document())];
        let outcome = tree.commit(&batch, now).expect("example document is valid");
        if let Some(store) = store.as_mut() {
            store
                .append(&CommitRecord::new(outcome.revision, now, &batch))
                .map_err(|e| CliError::Transport(e.to_string()))?;
        }
    }
    let server_config = ServerConfig {
        heartbeat_timeout_ms: config.heartbeat_timeout_ms,
    };
    let server = Server::new(server_config, rules, registry, tree);
    Ok(match store {
        Some(store) => server.with_sink(Box::new(store)),
        None => server,
    })
}

/// Binds both listeners and serves until the returned future is dropped.
pub async fn bind(config: &ServeConfig) -> Result<(Bound, impl std::future::Future<Output = ()>), CliError> {
    let server = load_server(config)?;
    let hub = Arc::new(Hub {
        server: Mutex::new(server),
        peers: Mutex::new(HashMap::new()),
    });
    let tcp = TcpListener::bind(&config.listen)
        .await
        .map_err(|e| CliError::Transport(format!("{}: {e}", config.listen)))?;
    let ws = match &config.ws_listen {
        Some(addr) => Some(
            TcpListener::bind(addr)
                .await
                .map_err(|e| CliError::Transport(format!("{addr}: {e}")))?,
        ),
        None => None,
    };
    let bound = Bound {
        tcp: tcp.local_addr()?,
        ws: ws.as_ref().map(|l| l.local_addr()).transpose()?,
    };

    let run = async move {
        let mut tasks = AbortOnDrop(Vec::new());
        tasks.0.push({
            let hub = hub.clone();
            tokio::spawn(async move {
                let mut tick = tokio::time::interval(Duration::from_secs(1));
                loop {
                    tick.tick().await;
                    hub.sweep();
                }
            })
        });
        if let Some(listener) = ws {
            let hub = hub.clone();
            tasks.0.push(tokio::spawn(async move {
                loop {
                    match listener.accept().await {
                        Ok((stream, peer)) => {
                            tokio::spawn(serve_ws(hub.clone(), stream, peer));
                        }
                        Err(e) => tracing::warn!(error = %e, "websocket accept failed"),
                    }
                }
            }));
        }
        loop {
            match tcp.accept().await {
                Ok((stream, peer)) => {
                    tokio::spawn(serve_tcp(hub.clone(), stream, peer));
                }
                Err(e) => tracing::warn!(error = %e, "accept failed"),
            }
        }
    };
    Ok((bound, run))
}

async fn serve_tcp(hub: Arc<Hub>, stream: TcpStream, peer: SocketAddr) {
    let (id, mut rx) = hub.open();
    tracing::info!(session = id, %peer, "tcp session opened");
    let (read, mut write) = stream.into_split();
    let writer = tokio::spawn(async move {
        while let Some(frame) = rx.recv().await {
            if write.write_all(frame.as_bytes()).await.is_err() {
                break;
            }
        }
        let _ = write.shutdown().await;
    });
    let mut lines = BufReader::new(read).lines();
    loop {
        match lines.next_line().await {
            Ok(Some(line)) if line.trim().is_empty() => {}
            Ok(Some(line)) => {
                if !hub.dispatch(id, &line) {
                    break;
                }
            }
            Ok(None) => break,
            Err(e) => {
                tracing::debug!(session = id, error = %e, "read failed");
                break;
            }
        }
    }
    hub.close(id);
    let _ = writer.await;
    tracing::info!(session = id, "tcp session closed");
}

async fn serve_ws(hub: Arc<Hub>, stream: TcpStream, peer: SocketAddr) {
    let ws = match tokio_tungstenite::accept_async(stream).await {
        Ok(ws) => ws,
        Err(e) => {
            tracing::debug!(%peer, error = %e, "websocket handshake failed");
            return;
        }
    };
    let (id, mut rx) = hub.open();
    tracing::info!(session = id, %peer, "websocket session opened");
    let (mut sink, mut source) = ws.split();
    let writer = tokio::spawn(async move {
        while let Some(frame) = rx.recv().await {
            if sink.send(Message::text(frame.trim_end())).await.is_err() {
                break;
            }
        }
        let _ = sink.close().await;
    });
    'read: while let Some(msg) = source.next().await {
        let text = match msg {
            Ok(Message::Text(t)) => t,
            Ok(Message::Close(_)) | Err(_) => break,
            Ok(_) => continue,
        };
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            if !hub.dispatch(id, line) {
                break 'read;
            }
        }
    }
    hub.close(id);
    let _ = writer.await;
    tracing::info!(session = id, "websocket session closed");
}
