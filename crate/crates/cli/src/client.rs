//! One-connection client used by get/put/toggle/watch.

use std::time::Duration;

use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader, Lines};
use tokio::net::tcp::{OwnedReadHalf, OwnedWriteHalf};
use tokio::net::TcpStream;
use treesync_core::{MessageBody, WireMessage};

use crate::error::CliError;

const CONNECT_TIMEOUT: Duration = Duration::from_secs(5);
const REPLY_TIMEOUT: Duration = Duration::from_secs(10);

pub struct Connection {
    lines: Lines<BufReader<OwnedReadHalf>>,
    writer: OwnedWriteHalf,
    next_id: u64,
}

impl Connection {
    pub async fn open(addr: &str, token: &str) -> Result<Self, CliError> {
        let stream = tokio::time::timeout(CONNECT_TIMEOUT, TcpStream::connect(addr))
            .await
            .map_err(|_| CliError::Transport(format!("connecting to {addr} timed out")))?
            .map_err(|e| CliError::Transport(format!("{addr}: {e}")))?;
        let (read, writer) = stream.into_split();
        let mut conn = Self {
            lines: BufReader::new(read).lines(),
            writer,
            next_id: 0,
        };
        conn.request(MessageBody::Auth { token: token.into() }).await?;
        Ok(conn)
    }

    pub async fn send(&mut self, body: MessageBody) -> Result<u64, CliError> {
        self.next_id += 1;
        let frame = WireMessage::new(self.next_id, body).encode();
        self.writer.write_all(frame.as_bytes()).await?;
        Ok(self.next_id)
    }

    /// Sends a request and waits for its ACK, skipping unrelated traffic.
    pub async fn request(&mut self, body: MessageBody) -> Result<MessageBody, CliError> {
        let id = self.send(body).await?;
        loop {
            let msg = tokio::time::timeout(REPLY_TIMEOUT, self.next_message())
                .await
                .map_err(|_| CliError::Transport("no reply from server".into()))??
                .ok_or_else(|| CliError::Transport("server closed the connection".into()))?;
            if msg.body.reply_to() != Some(id) {
                continue;
            }
            return match msg.body {
                MessageBody::Err { code, reason, .. } => Err(CliError::from_err(code, reason)),
                body => Ok(body),
            };
        }
    }

    pub async fn next_message(&mut self) -> Result<Option<WireMessage>, CliError> {
        loop {
            let Some(line) = self.lines.next_line().await? else {
                return Ok(None);
            };
            if line.trim().is_empty() {
                continue;
            }
            match WireMessage::decode(&line) {
                Ok(msg) => return Ok(Some(msg)),
                Err(e) => tracing::warn!(error = %e, "ignoring undecodable frame"),
            }
        }
    }
}
