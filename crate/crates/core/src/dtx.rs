//! Transaction coordinator co-located with each node.
//!
//! `Internal` transactions touch exactly one resource and commit with a
//! single log write. `External` transactions run presumed-abort two-phase
//! commit over the node's resources: each participant logs a PREPARED record
//! carrying its redo effects, the coordinator logs COMMIT, the effects are
//! applied, and an END record closes the transaction. A transaction with no
//! COMMIT record is rolled back on recovery.
//!
//! The protocol itself is driven by [`crate::node::Node`], which owns the
//! participants and the log; this module tracks transaction state.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TxnId(pub u64);

impl fmt::Display for TxnId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "T{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TxnMode {
    Internal,
    External,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TxnState {
    Active,
    Preparing,
    Committed,
    Aborted,
}

/// Resource managers a node transaction can enlist.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Resource {
    Queue,
    Store,
    Mailbox,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TxnOutcome {
    Committed,
    Aborted,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TxnContext {
    pub txn_id: TxnId,
    pub mode: TxnMode,
    pub participants: BTreeSet<Resource>,
    pub state: TxnState,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TxnPhase {
    Prepared,
    Commit,
    Abort,
}

/// Coordinator view of one log record.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TxnLogRecord {
    pub txn_id: TxnId,
    pub phase: TxnPhase,
    pub participants: Vec<Resource>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DtxError {
    #[error("unknown transaction {0}")]
    UnknownTxn(TxnId),
    #[error("transaction {0} is not active")]
    TxnNotActive(TxnId),
    #[error("transaction {0} already finished")]
    TxnFinished(TxnId),
    #[error("internal transaction {0} cannot enlist a second resource ({1:?})")]
    TooManyParticipants(TxnId, Resource),
}

#[derive(Debug, Default)]
pub struct Coordinator {
    next_id: u64,
    txns: BTreeMap<TxnId, TxnContext>,
}

impl Coordinator {
    pub fn new() -> Self {
        Coordinator { next_id: 1, txns: BTreeMap::new() }
    }

    /// Ensures future ids are above any id seen in the log.
    pub fn observe(&mut self, id: TxnId) {
        self.next_id = self.next_id.max(id.0 + 1);
    }

    /// Error for an id with no live context: ids below `next_id` were issued
    /// and have since finished.
    fn missing(&self, id: TxnId) -> DtxError {
        if id.0 != 0 && id.0 < self.next_id {
            DtxError::TxnFinished(id)
        } else {
            DtxError::UnknownTxn(id)
        }
    }

    pub fn begin(&mut self, mode: TxnMode) -> TxnContext {
        let id = TxnId(self.next_id);
        self.next_id += 1;
        let ctx = TxnContext { txn_id: id, mode, participants: BTreeSet::new(), state: TxnState::Active };
        self.txns.insert(id, ctx.clone());
        ctx
    }

    pub fn get(&self, id: TxnId) -> Result<&TxnContext, DtxError> {
        self.txns.get(&id).ok_or_else(|| self.missing(id))
    }

    pub fn active(&self, id: TxnId) -> Result<&TxnContext, DtxError> {
        let ctx = self.get(id)?;
        if ctx.state == TxnState::Active {
            Ok(ctx)
        } else {
            Err(DtxError::TxnNotActive(id))
        }
    }

    /// Registers `r`; returns true if it was not already enlisted.
    pub fn enlist(&mut self, id: TxnId, r: Resource) -> Result<bool, DtxError> {
        let err = self.missing(id);
        let ctx = self.txns.get_mut(&id).ok_or(err)?;
        if ctx.state != TxnState::Active {
            return Err(DtxError::TxnNotActive(id));
        }
        if ctx.participants.contains(&r) {
            return Ok(false);
        }
        if ctx.mode == TxnMode::Internal && !ctx.participants.is_empty() {
            return Err(DtxError::TooManyParticipants(id, r));
        }
        ctx.participants.insert(r);
        Ok(true)
    }

    /// Undoes an enlistment the resource manager refused.
    pub fn unenlist(&mut self, id: TxnId, r: Resource) {
        if let Some(ctx) = self.txns.get_mut(&id) {
            ctx.participants.remove(&r);
        }
    }

    pub fn set_state(&mut self, id: TxnId, state: TxnState) -> Result<(), DtxError> {
        let err = self.missing(id);
        let ctx = self.txns.get_mut(&id).ok_or(err)?;
        let ok = matches!(
            (ctx.state, state),
            (TxnState::Active, TxnState::Preparing)
                | (TxnState::Active, TxnState::Committed)
                | (TxnState::Active, TxnState::Aborted)
                | (TxnState::Preparing, TxnState::Committed)
                | (TxnState::Preparing, TxnState::Aborted)
        );
        if !ok {
            return Err(match ctx.state {
                TxnState::Committed | TxnState::Aborted => DtxError::TxnFinished(id),
                _ => DtxError::TxnNotActive(id),
            });
        }
        // Internal commits skip the prepare round; external ones must not.
        debug_assert!(
            !(ctx.mode == TxnMode::External
                && ctx.state == TxnState::Active
                && state == TxnState::Committed
                && !ctx.participants.is_empty()),
            "external commit without prepare"
        );
        ctx.state = state;
        Ok(())
    }

    pub fn contexts(&self) -> impl Iterator<Item = &TxnContext> {
        self.txns.values()
    }

    pub fn active_count(&self) -> usize {
        self.txns.values().filter(|t| matches!(t.state, TxnState::Active | TxnState::Preparing)).count()
    }

    /// Drops finished transactions from the table.
    pub fn forget_finished(&mut self) {
        self.txns.retain(|_, t| matches!(t.state, TxnState::Active | TxnState::Preparing));
    }
}

/// Outcome of scanning the log for unfinished transactions.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RecoveryPlan {
    /// Prepared without a decision: roll back.
    pub rollback: Vec<TxnId>,
    /// Committed without END: finish.
    pub finish: Vec<TxnId>,
}

/// Tracks the coordinator records seen during replay.
#[derive(Debug, Default)]
pub struct RecoveryScan {
    prepared: BTreeMap<TxnId, Vec<Resource>>,
    committed: BTreeSet<TxnId>,
}

impl RecoveryScan {
    pub fn observe(&mut self, rec: &TxnLogRecord) {
        match rec.phase {
            TxnPhase::Prepared => self
                .prepared
                .entry(rec.txn_id)
                .or_default()
                .extend(rec.participants.iter().copied()),
            TxnPhase::Commit => {
                self.prepared.remove(&rec.txn_id);
                self.committed.insert(rec.txn_id);
            }
            TxnPhase::Abort => {
                self.prepared.remove(&rec.txn_id);
            }
        }
    }

    pub fn ended(&mut self, id: TxnId) {
        self.committed.remove(&id);
    }

    pub fn plan(&self) -> RecoveryPlan {
        RecoveryPlan {
            rollback: self.prepared.keys().copied().collect(),
            finish: self.committed.iter().copied().collect(),
        }
    }
}
