//! Node log records. The payload is the bincode encoding of the record; the
//! type byte is checked against the decoded variant.

use serde::{Deserialize, Serialize};

use crate::dtx::{Resource, TxnId, TxnLogRecord, TxnPhase};
use crate::mail::MailEffect;
use crate::queue::{Message, QueueEffect, StreamKey};
use crate::store::StoreEffect;
use crate::topology::NodeId;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Effects {
    Queue(Vec<QueueEffect>),
    Store(Vec<StoreEffect>),
    Mailbox(Vec<MailEffect>),
}

impl Effects {
    pub fn resource(&self) -> Resource {
        match self {
            Effects::Queue(_) => Resource::Queue,
            Effects::Store(_) => Resource::Store,
            Effects::Mailbox(_) => Resource::Mailbox,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum WalRecord {
    QueueCreated { name: String, transactional: bool },
    /// Frames accepted from the network, next in their streams.
    Accepted { frames: Vec<Message> },
    /// Next hop acknowledged a frame from our outgoing queue.
    Acked { from: NodeId, key: StreamKey, seq: u64 },
    Prepared { txn: TxnId, effects: Effects },
    Commit { txn: TxnId, participants: Vec<Resource> },
    Abort { txn: TxnId, participants: Vec<Resource> },
    End { txn: TxnId },
    /// Single-resource commit: effects and decision in one write.
    InternalCommit { txn: TxnId, effects: Effects },
}

impl WalRecord {
    pub fn type_byte(&self) -> u8 {
        match self {
            WalRecord::QueueCreated { .. } => 0x01,
            WalRecord::Accepted { .. } => 0x02,
            WalRecord::Acked { .. } => 0x03,
            WalRecord::Prepared { .. } => 0x10,
            WalRecord::Commit { .. } => 0x11,
            WalRecord::Abort { .. } => 0x12,
            WalRecord::End { .. } => 0x13,
            WalRecord::InternalCommit { .. } => 0x14,
        }
    }

    pub fn encode(&self) -> (u8, Vec<u8>) {
        (self.type_byte(), bincode::serialize(self).expect("log record serializes"))
    }

    pub fn decode(kind: u8, payload: &[u8]) -> Result<Self, String> {
        let rec: WalRecord = bincode::deserialize(payload).map_err(|e| e.to_string())?;
        if rec.type_byte() != kind {
            return Err(format!("type byte {kind:#04x} does not match payload"));
        }
        Ok(rec)
    }

    pub fn txn(&self) -> Option<TxnId> {
        match self {
            WalRecord::Prepared { txn, .. }
            | WalRecord::Commit { txn, .. }
            | WalRecord::Abort { txn, .. }
            | WalRecord::End { txn }
            | WalRecord::InternalCommit { txn, .. } => Some(*txn),
            _ => None,
        }
    }

    /// Coordinator view, for records that carry a 2PC phase.
    pub fn txn_log(&self) -> Option<TxnLogRecord> {
        let (txn_id, phase, participants) = match self {
            WalRecord::Prepared { txn, effects } => (*txn, TxnPhase::Prepared, vec![effects.resource()]),
            WalRecord::Commit { txn, participants } => (*txn, TxnPhase::Commit, participants.clone()),
            WalRecord::Abort { txn, participants } => (*txn, TxnPhase::Abort, participants.clone()),
            _ => return None,
        };
        Some(TxnLogRecord { txn_id, phase, participants })
    }
}
