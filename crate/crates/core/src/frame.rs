//! Binary wire format for queue messages.
//!
//! ```text
//! magic u32 | version u8 | kind u8 | flags u8
//! origin (u8 len, bytes) | seq u64 | sent_at u64
//! dest node (u8 len, bytes) | dest queue (u8 len, bytes)
//! hop count u8, each hop (u8 len, bytes)
//! body len u32 | body
//! sha256 of everything above (32 bytes)
//! ```
//!
//! Integers are big-endian. On a byte stream each frame is preceded by its
//! length as a `u32`.

use std::io::{self, Read, Write};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::queue::{Message, MessageId, MessageKind, QueueRef, MAX_BODY_BYTES};
use crate::topology::NodeId;

pub const MAGIC: u32 = 0x514D_5351;
pub const VERSION: u8 = 1;
const FLAG_TRANSACTIONAL: u8 = 0x01;
const FLAG_DEST_TRANSACTIONAL: u8 = 0x02;
const HASH_LEN: usize = 32;
/// Largest frame accepted from a stream.
pub const MAX_FRAME_BYTES: usize = MAX_BODY_BYTES + 64 * 1024;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FrameError {
    #[error("bad magic {0:#010x}")]
    BadMagic(u32),
    #[error("unsupported frame version {0}")]
    BadVersion(u8),
    #[error("frame truncated")]
    Truncated,
    #[error("body hash mismatch")]
    BodyHashMismatch,
    #[error("malformed frame: {0}")]
    Malformed(String),
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    debug_assert!(s.len() <= u8::MAX as usize);
    out.push(s.len() as u8);
    out.extend_from_slice(s.as_bytes());
}

pub fn encode(msg: &Message) -> Vec<u8> {
    let mut out = Vec::with_capacity(96 + msg.body.len());
    out.extend_from_slice(&MAGIC.to_be_bytes());
    out.push(VERSION);
    out.push(msg.kind.code());
    let mut flags = 0;
    if msg.transactional {
        flags |= FLAG_TRANSACTIONAL;
    }
    if msg.dest.transactional {
        flags |= FLAG_DEST_TRANSACTIONAL;
    }
    out.push(flags);
    put_str(&mut out, msg.id.origin.as_str());
    out.extend_from_slice(&msg.id.seq.to_be_bytes());
    out.extend_from_slice(&msg.sent_at.to_be_bytes());
    put_str(&mut out, msg.dest.node.as_str());
    put_str(&mut out, &msg.dest.name);
    out.push(msg.hops.len() as u8);
    for h in &msg.hops {
        put_str(&mut out, h.as_str());
    }
    out.extend_from_slice(&(msg.body.len() as u32).to_be_bytes());
    out.extend_from_slice(&msg.body);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FrameError> {
        let end = self.at.checked_add(n).ok_or(FrameError::Truncated)?;
        let s = self.buf.get(self.at..end).ok_or(FrameError::Truncated)?;
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, FrameError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, FrameError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, FrameError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String, FrameError> {
        let n = self.u8()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| FrameError::Malformed("non-utf8 string".into()))
    }

    fn node(&mut self) -> Result<NodeId, FrameError> {
        NodeId::new(self.string()?).map_err(|e| FrameError::Malformed(e.to_string()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Message, FrameError> {
    let mut r = Reader { buf: bytes, at: 0 };
    let magic = r.u32()?;
    if magic != MAGIC {
        return Err(FrameError::BadMagic(magic));
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(FrameError::BadVersion(version));
    }
    let code = r.u8()?;
    let kind = MessageKind::from_code(code).ok_or_else(|| FrameError::Malformed(format!("unknown kind {code}")))?;
    let flags = r.u8()?;
    let origin = r.node()?;
    let seq = r.u64()?;
    let sent_at = r.u64()?;
    let dest_node = r.node()?;
    let dest_name = r.string()?;
    let hop_count = r.u8()?;
    let hops = (0..hop_count).map(|_| r.node()).collect::<Result<Vec<_>, _>>()?;
    let body_len = r.u32()? as usize;
    if body_len > MAX_BODY_BYTES {
        return Err(FrameError::Malformed(format!("body of {body_len} bytes")));
    }
    let body = r.take(body_len)?.to_vec();
    let covered = r.at;
    let hash = r.take(HASH_LEN)?;
    if r.at != bytes.len() {
        return Err(FrameError::Malformed("trailing bytes".into()));
    }
    if Sha256::digest(&bytes[..covered]).as_slice() != hash {
        return Err(FrameError::BodyHashMismatch);
    }
    Ok(Message {
        id: MessageId { origin, seq },
        kind,
        body,
        transactional: flags & FLAG_TRANSACTIONAL != 0,
        sent_at,
        dest: QueueRef::new(dest_node, dest_name, flags & FLAG_DEST_TRANSACTIONAL != 0),
        hops,
    })
}

/// Writes one length-prefixed frame.
pub fn write_frame(w: &mut impl Write, frame: &[u8]) -> io::Result<()> {
    w.write_all(&(frame.len() as u32).to_be_bytes())?;
    w.write_all(frame)?;
    w.flush()
}

/// Reads one length-prefixed frame; `Ok(None)` on a clean end of stream.
pub fn read_frame(r: &mut impl Read) -> io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME_BYTES {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("frame of {len} bytes")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(Some(buf))
}
