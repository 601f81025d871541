//! Client wire protocol.
//!
//! Every frame is a JSON object tagged by `type`. Over TCP each frame is
//! preceded by its length as a big-endian `u32`; over WebSocket each frame is
//! one text message.

mod client;
mod server;

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};

pub use client::Client;
pub use server::{serve_tcp, serve_ws, Hub, HubConfig, RealmThread};

/// Upper bound on an encoded frame. Messages are capped at 16 MiB; the rest
/// is room for JSON escaping.
pub const MAX_FRAME: usize = 40 << 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Frame {
    Hello {
        world: String,
        address: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        token: Option<String>,
    },
    Welcome {
        realm: String,
        address: String,
    },
    Send {
        mbox: String,
    },
    Accepted,
    /// A message for this session, or a journal entry when `agent` is set
    /// (then `serial` is the entry's journal index).
    Deliver {
        mbox: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        serial: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        agent: Option<String>,
    },
    Tail {
        agent: String,
        #[serde(default)]
        from_offset: u64,
        #[serde(default)]
        user_view: bool,
        #[serde(default)]
        follow: bool,
    },
    TailEnd {
        agent: String,
        next_offset: u64,
    },
    Verify {
        agent: String,
    },
    VerifyReport {
        agent: String,
        ok: bool,
        journal_len: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        detail: Option<String>,
    },
    Acquire {
        agent: String,
        realm: String,
    },
    Granted {
        agent: String,
        epoch: u64,
    },
    Wait {
        agent: String,
        owner: String,
    },
    ReleaseRequested {
        agent: String,
        requester: String,
    },
    Revoked {
        agent: String,
        epoch: u64,
    },
    Release {
        agent: String,
        realm: String,
        #[serde(default)]
        persisted: bool,
    },
    Released {
        agent: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        next: Option<String>,
    },
    Owner {
        agent: String,
    },
    OwnerIs {
        agent: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        realm: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        epoch: Option<u64>,
    },
    ForceRelease {
        agent: String,
        admin_token: String,
    },
    Error {
        code: String,
        detail: String,
    },
}

impl Frame {
    pub fn error(code: &str, detail: impl Into<String>) -> Self {
        Frame::Error { code: code.into(), detail: detail.into() }
    }
}

#[derive(Debug, Error)]
pub enum NetError {
    #[error("network i/o: {0}")]
    Io(#[from] io::Error),
    #[error("malformed frame: {0}")]
    BadFrame(#[from] serde_json::Error),
    #[error("frame of {0} bytes exceeds the limit")]
    TooLarge(usize),
    #[error("connection closed")]
    Closed,
    #[error("server error {code}: {detail}")]
    Remote { code: String, detail: String },
    #[error("unexpected frame: {0}")]
    Unexpected(String),
}

pub fn encode(frame: &Frame) -> Vec<u8> {
    serde_json::to_vec(frame).expect("frames always serialize")
}

pub fn write_frame<W: Write>(w: &mut W, frame: &Frame) -> Result<(), NetError> {
    let body = encode(frame);
    if body.len() > MAX_FRAME {
        return Err(NetError::TooLarge(body.len()));
    }
    w.write_all(&(body.len() as u32).to_be_bytes())?;
    w.write_all(&body)?;
    w.flush()?;
    Ok(())
}

pub fn read_frame<R: Read>(r: &mut R) -> Result<Frame, NetError> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Err(NetError::Closed),
        other => other?,
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(NetError::TooLarge(len));
    }
    let mut body = vec![0; len];
    r.read_exact(&mut body)?;
    Ok(serde_json::from_slice(&body)?)
}

pub async fn write_frame_async<W: AsyncWrite + Unpin>(w: &mut W, frame: &Frame) -> Result<(), NetError> {
    let body = encode(frame);
    if body.len() > MAX_FRAME {
        return Err(NetError::TooLarge(body.len()));
    }
    w.write_all(&(body.len() as u32).to_be_bytes()).await?;
    w.write_all(&body).await?;
    w.flush().await?;
    Ok(())
}

pub async fn read_frame_async<R: AsyncRead + Unpin>(r: &mut R) -> Result<Frame, NetError> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len).await {
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Err(NetError::Closed),
        other => other?,
    };
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(NetError::TooLarge(len));
    }
    let mut body = vec![0; len];
    r.read_exact(&mut body).await?;
    Ok(serde_json::from_slice(&body)?)
}
