mod agent;
mod client;
mod error;
mod serve;
mod sim;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use serde_json::json;
use treesync_core::agent::AgentConfig;
use treesync_core::persist::read_records;
use treesync_core::{MessageBody, Path, Revision, Value};

use client::Connection;
use error::CliError;
use serve::ServeConfig;

const WATCH_PING_MS: u64 = 5_000;

#[derive(Parser)]
#[command(name = "treesync", version, about = "Hierarchical state sync: server, device agent, simulator and client")]
struct Cli {
    /// Server address for client commands and the agent.
    #[arg(long, global = true)]
    server: Option<String>,
    /// Authentication token.
    #[arg(long, global = true)]
    token: Option<String>,
    /// JSON config file for serve, agent or sim.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Machine-readable output.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the sync server.
    Serve {
        #[arg(long)]
        listen: Option<String>,
        /// Websocket listen address; "off" disables it.
        #[arg(long)]
        ws_listen: Option<String>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Load the sample document into an empty tree.
        #[arg(long)]
        seed_example: bool,
    },
    /// Run a device agent against a live server.
    Agent {
        /// Append the agent's action log (JSON lines) to this file.
        #[arg(long)]
        action_log: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        sensor_seed: u64,
        /// Stop after this many milliseconds.
        #[arg(long)]
        run_for_ms: Option<u64>,
    },
    /// Run a simulated experiment and print its metrics.
    Sim {
        #[arg(long)]
        seed: Option<u64>,
        /// Write the full report here instead of printing a summary.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Write every simulated frame as JSON lines.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Read the value at a path.
    Get { path: String },
    /// Write a JSON value at a path.
    Put { path: String, value: String },
    /// Flip an LED (led1 or led2).
    Toggle { target: String },
    /// Print change events under a path until interrupted.
    Watch {
        path: String,
        /// Stop after this many events, counting the initial snapshot.
        #[arg(long)]
        count: Option<u64>,
    },
    /// Print persisted commits as JSON lines.
    DumpLog {
        #[arg(long)]
        data_dir: PathBuf,
        /// Only commits after this revision.
        #[arg(long, default_value_t = 0)]
        since: u64,
    },
}

fn parse_path(text: &str) -> Result<Path, CliError> {
    Path::parse(text).map_err(|e| CliError::Input(format!("{text}: {e}")))
}

fn read_config(path: &PathBuf) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn value_json(value: Option<&Value>) -> serde_json::Value {
    value.map_or(serde_json::Value::Null, |v| {
        serde_json::to_value(v).expect("values serialize")
    })
}

fn render(value: Option<&Value>) -> String {
    value.map_or_else(|| "null".into(), Value::to_canonical_json)
}

struct Client {
    addr: String,
    token: String,
    json: bool,
}

impl Client {
    async fn connect(&self) -> Result<Connection, CliError> {
        Connection::open(&self.addr, &self.token).await
    }

    async fn get(&self, conn: &mut Connection, path: &Path) -> Result<(Option<Revision>, Option<Value>), CliError> {
        match conn.request(MessageBody::Get { path: path.to_string() }).await? {
            MessageBody::Ack { revision, value, .. } => Ok((revision, value)),
            other => Err(CliError::Transport(format!("unexpected {} reply", other.kind()))),
        }
    }

    async fn put(&self, conn: &mut Connection, path: &Path, value: Value) -> Result<Option<Revision>, CliError> {
        let body = MessageBody::Put {
            path: path.to_string(),
            value,
            client_time_ms: serve::now_ms(),
        };
        match conn.request(body).await? {
            MessageBody::Ack { revision, .. } => Ok(revision),
            other => Err(CliError::Transport(format!("unexpected {} reply", other.kind()))),
        }
    }
}

async fn run(cli: Cli) -> Result<(), CliError> {
    let client = Client {
        addr: cli.server.clone().unwrap_or_else(|| "127.0.0.1:7070".into()),
        token: cli.token.clone().unwrap_or_else(|| "dashboard-token".into()),
        json: cli.json,
    };
    match cli.command {
        Command::Serve {
            listen,
            ws_listen,
            data_dir,
            seed_example,
        } => {
            let mut config: ServeConfig = match &cli.config {
                Some(p) => serde_json::from_str(&read_config(p)?)
                    .map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?,
                None => ServeConfig::default(),
            };
            if let Some(l) = listen {
                config.listen = l;
            }
            match ws_listen.as_deref() {
                Some("off") => config.ws_listen = None,
                Some(l) => config.ws_listen = Some(l.into()),
                None => {}
            }
            if data_dir.is_some() {
                config.data_dir = data_dir;
            }
            config.seed_example |= seed_example;
            let (bound, serving) = serve::bind(&config).await?;
            let mut out = std::io::stdout().lock();
            writeln!(out, "listening tcp {}", bound.tcp)?;
            if let Some(ws) = bound.ws {
                writeln!(out, "listening ws {ws}")?;
            }
            out.flush()?;
            drop(out);
            tokio::select! {
                _ = serving => {}
                _ = tokio::signal::ctrl_c() => tracing::info!("shutting down"),
            }
            Ok(())
        }
        Command::Agent {
            action_log,
            sensor_seed,
            run_for_ms,
        } => {
            let mut config = match &cli.config {
                Some(p) => AgentConfig::from_json(&read_config(p)?).map_err(|e| CliError::Input(e.to_string()))?,
                None => AgentConfig::default(),
            };
            if let Some(s) = cli.server {
                config.server_addr = s;
            }
            if let Some(t) = cli.token {
                config.token = t;
            }
            agent::run(agent::AgentOptions {
                config,
                action_log,
                sensor_seed,
                run_for_ms,
            })
            .await
        }
        Command::Sim { seed, report, trace } => {
            let opts = sim::SimOptions {
                config: cli.config,
                seed,
                report,
                trace,
            };
            let r = tokio::task::spawn_blocking(move || sim::run(&opts))
                .await
                .map_err(|e| CliError::Transport(e.to_string()))??;
            if cli.json {
                print!("{}", r.to_json());
            } else {
                print!("{}", r.table());
                println!(
                    "p95 control latency {} ms over {} commands, events lost {}, order violations {}",
                    r.control_latency.p95_ms, r.control_latency.count, r.event_loss_count, r.event_order_violations
                );
            }
            Ok(())
        }
        Command::Get { path } => {
            let path = parse_path(&path)?;
            let mut conn = client.connect().await?;
            let (revision, value) = client.get(&mut conn, &path).await?;
            if client.json {
                println!(
                    "{}",
                    json!({"path": path.to_string(), "revision": revision.map(|r| r.0), "value": value_json(value.as_ref())})
                );
            } else {
                println!("{}", render(value.as_ref()));
            }
            Ok(())
        }
        Command::Put { path, value } => {
            let path = parse_path(&path)?;
            let value: Value =
                serde_json::from_str(&value).map_err(|e| CliError::Input(format!("value is not JSON: {e}")))?;
            if let Some(bad) = value.find_non_finite() {
                return Err(CliError::Input(format!("non-finite number {bad}")));
            }
            let mut conn = client.connect().await?;
            let revision = client.put(&mut conn, &path, value).await?;
            if client.json {
                println!("{}", json!({"path": path.to_string(), "revision": revision.map(|r| r.0)}));
            } else {
                println!("ok revision {}", revision.map_or(0, |r| r.0));
            }
            Ok(())
        }
        Command::Toggle { target } => {
            let path = parse_path(&format!("/leds/{target}"))?;
            if !matches!(target.as_str(), "led1" | "led2") {
                return Err(CliError::Input(format!("unknown LED {target}")));
            }
            let mut conn = client.connect().await?;
            let (_, current) = client.get(&mut conn, &path).await?;
            let current = match current {
                None => false,
                Some(v) => v
                    .as_bool()
                    .ok_or_else(|| CliError::Input(format!("{path} holds a {}, not a boolean", v.kind())))?,
            };
            let revision = client.put(&mut conn, &path, Value::Bool(!current)).await?;
            if client.json {
                println!(
                    "{}",
                    json!({"target": target, "value": !current, "revision": revision.map(|r| r.0)})
                );
            } else {
                println!("{target} {} revision {}", !current, revision.map_or(0, |r| r.0));
            }
            Ok(())
        }
        Command::Watch { path, count } => {
            let path = parse_path(&path)?;
            let mut conn = client.connect().await?;
            conn.request(MessageBody::Subscribe { path: path.to_string() }).await?;
            // The subscription's snapshot event may already be buffered behind the ACK.
            let mut seen = 0u64;
            let mut ping = tokio::time::interval(Duration::from_millis(WATCH_PING_MS));
            ping.tick().await;
            let ctrl_c = tokio::signal::ctrl_c();
            tokio::pin!(ctrl_c);
            while count.map_or(true, |c| seen < c) {
                tokio::select! {
                    msg = conn.next_message() => {
                        let Some(msg) = msg? else {
                            return Err(CliError::Transport("server closed the connection".into()));
                        };
                        if let MessageBody::Event { revision, path, value, .. } = msg.body {
                            seen += 1;
                            if client.json {
                                println!("{}", json!({"revision": revision.0, "path": path, "value": value_json(value.as_ref())}));
                            } else {
                                println!("{revision} {path} {}", render(value.as_ref()));
                            }
                            std::io::stdout().flush()?;
                        }
                    }
                    _ = ping.tick() => {
                        conn.send(MessageBody::Ping {}).await?;
                    }
                    _ = &mut ctrl_c => break,
                }
            }
            Ok(())
        }
        Command::DumpLog { data_dir, since } => {
            let records =
                read_records(&data_dir, Revision(since)).map_err(|e| CliError::Input(e.to_string()))?;
            let mut out = std::io::stdout().lock();
            for r in records {
                writeln!(out, "{}", serde_json::to_string(&r).expect("records serialize"))?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let default_level = match cli.command {
        Command::Serve { .. } | Command::Agent { .. } => "info",
        _ => "warn",
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default_level)),
        )
        .init();
    let json = cli.json;
    let runtime = tokio::runtime::Runtime::new().expect("tokio runtime");
    match runtime.block_on(run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if json {
                println!("{}", json!({"error": e.kind(), "message": e.to_string()}));
            } else {
                eprintln!("error: {e}");
            }
            e.exit_code()
        }
    }
}
