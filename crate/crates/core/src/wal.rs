//! Append-only node log. Every record is `u32` big-endian length, one type
//! byte and the payload; the length counts the type byte plus payload.
//!
//! A record cut short at the tail (a torn write) is truncated on open. Any
//! other malformation is reported as corruption.

use std::fs::{File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum WalError {
    #[error("wal i/o: {0}")]
    Io(#[from] io::Error),
    #[error("corrupt log at offset {offset}: {reason}")]
    Corrupt { offset: u64, reason: String },
    #[error("injected crash")]
    Crashed,
}

/// Byte sink behind a [`Wal`].
pub trait WalStorage: Send {
    fn read_all(&mut self) -> io::Result<Vec<u8>>;
    /// Appends and makes `bytes` durable before returning.
    fn append(&mut self, bytes: &[u8]) -> Result<(), WalError>;
    fn truncate(&mut self, len: u64) -> io::Result<()>;
}

/// Crash after `after_writes` successful appends. The next append persists
/// only its first `torn_bytes` bytes and fails, as do all later ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CrashPlan {
    pub after_writes: u64,
    pub torn_bytes: usize,
}

/// In-memory storage. Clones share the same buffer, so a test can drop a
/// crashed node and reopen the bytes it left behind.
#[derive(Clone, Debug, Default)]
pub struct MemStorage {
    buf: Arc<Mutex<Vec<u8>>>,
    crash: Option<CrashPlan>,
    appended: u64,
    crashed: bool,
}

impl MemStorage {
    pub fn new() -> Self {
        Self::default()
    }

    /// A handle on the same bytes that crashes according to `plan`.
    pub fn with_crash(&self, plan: CrashPlan) -> Self {
        MemStorage { buf: self.buf.clone(), crash: Some(plan), appended: 0, crashed: false }
    }

    /// A fresh handle on the same bytes, without any crash plan.
    pub fn reopen(&self) -> Self {
        MemStorage { buf: self.buf.clone(), ..Default::default() }
    }

    pub fn bytes(&self) -> Vec<u8> {
        self.buf.lock().expect("wal buffer poisoned").clone()
    }

    pub fn len(&self) -> usize {
        self.buf.lock().expect("wal buffer poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn has_crashed(&self) -> bool {
        self.crashed
    }
}

impl WalStorage for MemStorage {
    fn read_all(&mut self) -> io::Result<Vec<u8>> {
        Ok(self.bytes())
    }

    fn append(&mut self, bytes: &[u8]) -> Result<(), WalError> {
        if self.crashed {
            return Err(WalError::Crashed);
        }
        let mut buf = self.buf.lock().expect("wal buffer poisoned");
        if let Some(plan) = self.crash {
            if self.appended == plan.after_writes {
                let keep = plan.torn_bytes.min(bytes.len().saturating_sub(1));
                buf.extend_from_slice(&bytes[..keep]);
                self.crashed = true;
                return Err(WalError::Crashed);
            }
        }
        buf.extend_from_slice(bytes);
        self.appended += 1;
        Ok(())
    }

    fn truncate(&mut self, len: u64) -> io::Result<()> {
        self.buf.lock().expect("wal buffer poisoned").truncate(len as usize);
        Ok(())
    }
}

/// Log file on disk, synced on every append unless `sync` is off.
#[derive(Debug)]
pub struct FileStorage {
    file: File,
    path: PathBuf,
    sync: bool,
}

impl FileStorage {
    pub fn open(path: impl AsRef<Path>) -> io::Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(&path)?;
        Ok(FileStorage { file, path, sync: true })
    }

    pub fn without_sync(mut self) -> Self {
        self.sync = false;
        self
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl WalStorage for FileStorage {
    fn read_all(&mut self) -> io::Result<Vec<u8>> {
        let mut out = Vec::new();
        self.file.seek(SeekFrom::Start(0))?;
        self.file.read_to_end(&mut out)?;
        Ok(out)
    }

    fn append(&mut self, bytes: &[u8]) -> Result<(), WalError> {
        self.file.write_all(bytes)?;
        if self.sync {
            self.file.sync_data()?;
        }
        Ok(())
    }

    fn truncate(&mut self, len: u64) -> io::Result<()> {
        self.file.set_len(len)?;
        self.file.sync_all()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawRecord {
    pub offset: u64,
    pub kind: u8,
    pub payload: Vec<u8>,
}

pub struct Wal {
    storage: Box<dyn WalStorage>,
    writes: u64,
    failed: bool,
}

impl std::fmt::Debug for Wal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Wal").field("writes", &self.writes).finish()
    }
}

/// Splits a log image into records. Returns the records and the length of
/// the well-formed prefix.
pub fn scan(bytes: &[u8]) -> Result<(Vec<RawRecord>, u64), WalError> {
    let mut out = Vec::new();
    let mut at = 0usize;
    while at < bytes.len() {
        if bytes.len() - at < 4 {
            break;
        }
        let len = u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
        if len == 0 {
            return Err(WalError::Corrupt { offset: at as u64, reason: "zero-length record".into() });
        }
        if bytes.len() - at - 4 < len {
            break;
        }
        let body = &bytes[at + 4..at + 4 + len];
        out.push(RawRecord { offset: at as u64, kind: body[0], payload: body[1..].to_vec() });
        at += 4 + len;
    }
    Ok((out, at as u64))
}

pub fn encode_record(kind: u8, payload: &[u8]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(5 + payload.len());
    buf.extend_from_slice(&((payload.len() + 1) as u32).to_be_bytes());
    buf.push(kind);
    buf.extend_from_slice(payload);
    buf
}

impl Wal {
    /// Reads every complete record, truncating a torn tail. Returns the log,
    /// the records and the number of tail bytes discarded.
    pub fn open(mut storage: Box<dyn WalStorage>) -> Result<(Wal, Vec<RawRecord>, u64), WalError> {
        let bytes = storage.read_all()?;
        let (records, good) = scan(&bytes)?;
        let torn = bytes.len() as u64 - good;
        if torn > 0 {
            log::warn!("truncating {torn} torn bytes at wal offset {good}");
            storage.truncate(good)?;
        }
        Ok((Wal { storage, writes: 0, failed: false }, records, torn))
    }

    pub fn append(&mut self, kind: u8, payload: &[u8]) -> Result<(), WalError> {
        if self.failed {
            return Err(WalError::Crashed);
        }
        match self.storage.append(&encode_record(kind, payload)) {
            Ok(()) => {
                self.writes += 1;
                Ok(())
            }
            Err(e) => {
                self.failed = true;
                Err(e)
            }
        }
    }

    /// Durable writes issued through this handle since open.
    pub fn write_count(&self) -> u64 {
        self.writes
    }

    pub fn has_failed(&self) -> bool {
        self.failed
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_torn_tail() {
        let mem = MemStorage::new();
        let (mut wal, recs, torn) = Wal::open(Box::new(mem.reopen())).unwrap();
        assert!(recs.is_empty());
        assert_eq!(torn, 0);
        wal.append(1, b"abc").unwrap();
        wal.append(2, b"").unwrap();
        assert_eq!(wal.write_count(), 2);
        assert_eq!(&mem.bytes()[..8], &[0, 0, 0, 4, 1, b'a', b'b', b'c']);

        let mut crashing = Wal::open(Box::new(mem.with_crash(CrashPlan { after_writes: 0, torn_bytes: 6 })))
            .unwrap()
            .0;
        assert!(matches!(crashing.append(3, b"defgh"), Err(WalError::Crashed)));
        assert!(matches!(crashing.append(3, b"x"), Err(WalError::Crashed)));
        assert_eq!(mem.len(), 8 + 5 + 6);

        let (_, recs, torn) = Wal::open(Box::new(mem.reopen())).unwrap();
        assert_eq!(torn, 6);
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0], RawRecord { offset: 0, kind: 1, payload: b"abc".to_vec() });
        assert_eq!(recs[1].kind, 2);
        assert_eq!(mem.len(), 13);
    }

    #[test]
    fn zero_length_is_corrupt() {
        let mut mem = MemStorage::new();
        mem.append(&[0, 0, 0, 0, 9]).unwrap();
        assert!(matches!(Wal::open(Box::new(mem)), Err(WalError::Corrupt { offset: 0, .. })));
    }

    #[test]
    fn file_storage_persists() {
        let dir = std::env::temp_dir().join(format!("qsync-wal-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("queue.wal");
        let _ = std::fs::remove_file(&path);
        {
            let (mut wal, _, _) = Wal::open(Box::new(FileStorage::open(&path).unwrap())).unwrap();
            wal.append(7, b"hello").unwrap();
        }
        let (_, recs, _) = Wal::open(Box::new(FileStorage::open(&path).unwrap())).unwrap();
        assert_eq!(recs[0].payload, b"hello");
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
