//! Local control channel between the CLI and a running daemon.
//!
//! Requests and replies are ordinary frames of kind `Control(code)` sent over
//! the daemon's Unix socket. The body is JSON: the request arguments, and a
//! [`Reply`] on the way back.

use std::io;
use std::os::unix::net::UnixStream;
use std::path::Path;
use std::time::Duration;

use qsync_core::frame::{self, FrameError};
use qsync_core::queue::{Message, MessageId, MessageKind, QueueRef};
use qsync_core::NodeId;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub const CONTROL_QUEUE: &str = "control";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "cmd", rename_all = "snake_case")]
pub enum Request {
    Status,
    ForceDispatch,
    Exec { sql: String },
    MailSend { to: String, subject: String, body: String, attachments: Vec<String>, encrypted: bool },
    MailInbox { save_dir: Option<String> },
    MailAck { id: String },
    Journal { direction: Option<String>, queue: Option<String> },
    Dump { table: Option<String> },
    Link { peer: String, online: bool },
    Shutdown,
}

impl Request {
    pub fn code(&self) -> u8 {
        match self {
            Request::Status => 0x80,
            Request::ForceDispatch => 0x81,
            Request::Exec { .. } => 0x82,
            Request::MailSend { .. } => 0x83,
            Request::MailInbox { .. } => 0x84,
            Request::MailAck { .. } => 0x85,
            Request::Journal { .. } => 0x86,
            Request::Dump { .. } => 0x87,
            Request::Link { .. } => 0x88,
            Request::Shutdown => 0x8F,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reply {
    pub ok: bool,
    #[serde(default)]
    pub data: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Reply {
    pub fn ok(data: Value) -> Reply {
        Reply { ok: true, data, error: None }
    }

    pub fn err(msg: impl Into<String>) -> Reply {
        Reply { ok: false, data: Value::Null, error: Some(msg.into()) }
    }
}

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("no daemon is running for node {node} ({reason})")]
    NotRunning { node: String, reason: io::Error },
    #[error("control socket: {0}")]
    Io(#[from] io::Error),
    #[error("control frame: {0}")]
    Frame(#[from] FrameError),
    #[error("control payload: {0}")]
    Json(#[from] serde_json::Error),
    #[error("daemon closed the connection without replying")]
    NoReply,
}

/// Wraps a control payload in a frame addressed to `node`.
pub fn wrap(node: &NodeId, code: u8, seq: u64, body: Vec<u8>) -> Vec<u8> {
    frame::encode(&Message {
        id: MessageId { origin: node.clone(), seq },
        kind: MessageKind::Control(code),
        body,
        transactional: false,
        sent_at: 0,
        dest: QueueRef::new(node.clone(), CONTROL_QUEUE, false),
        hops: Vec::new(),
    })
}

pub fn encode_request(node: &NodeId, req: &Request) -> Vec<u8> {
    wrap(node, req.code(), 0, serde_json::to_vec(req).expect("request serializes"))
}

/// Decodes a request frame, checking its kind byte against the payload.
pub fn decode_request(bytes: &[u8]) -> Result<Request, String> {
    let msg = frame::decode(bytes).map_err(|e| e.to_string())?;
    let MessageKind::Control(code) = msg.kind else {
        return Err(format!("expected a control frame, got {:?}", msg.kind));
    };
    let req: Request = serde_json::from_slice(&msg.body).map_err(|e| e.to_string())?;
    if req.code() != code {
        return Err(format!("kind byte {code:#04x} does not match command {:#04x}", req.code()));
    }
    Ok(req)
}

/// Sends one request and waits for the reply.
pub fn call(socket: &Path, node: &NodeId, req: &Request) -> Result<Reply, ControlError> {
    let mut stream = UnixStream::connect(socket)
        .map_err(|reason| ControlError::NotRunning { node: node.to_string(), reason })?;
    stream.set_read_timeout(Some(Duration::from_secs(60)))?;
    frame::write_frame(&mut stream, &encode_request(node, req))?;
    let bytes = frame::read_frame(&mut stream)?.ok_or(ControlError::NoReply)?;
    let msg = frame::decode(&bytes)?;
    Ok(serde_json::from_slice(&msg.body)?)
}
