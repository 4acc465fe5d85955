use thiserror::Error;

use crate::dtx::{DtxError, TxnId};
use crate::mail::MailError;
use crate::queue::QueueError;
use crate::sql::ParseError;
use crate::store::StoreError;
use crate::topology::TopologyError;
use crate::wal::WalError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Queue(#[from] QueueError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Txn(#[from] DtxError),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Mail(#[from] MailError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Wal(#[from] WalError),
    #[error("corrupt log record at offset {offset}: {reason}")]
    CorruptLog { offset: u64, reason: String },
    #[error("node halted after a log write failure")]
    Halted,
    #[error("transaction {0} aborted")]
    TxnAborted(TxnId),
    #[error("system not quiescent: {0}")]
    NotQuiescent(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
