//! One QSync node: queues, store, mailbox and transaction coordinator over a
//! single log.
//!
//! The node does no I/O of its own. Drivers hand it frames with
//! [`Node::handle_frame`], call [`Node::poll`] when [`Node::next_deadline`]
//! is reached, and deliver whatever frames those calls return.
//!
//! Every durable change is a log record. The live path writes a record and
//! then applies it; replay applies the same records through the same code.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dtx::{Coordinator, RecoveryScan, Resource, TxnContext, TxnId, TxnMode, TxnOutcome, TxnState};
use crate::error::{Error, Result};
use crate::mail::{MailEnvelope, MailError, Mailbox, ReceivedMail, StoredMail};
use crate::queue::{
    AcceptDecision, AcceptOutcome, JournalEntry, JournalFilter, LinkStatus, Message, MessageId,
    MessageKind, QueueManager, QueueRef, ReceiveMode, DEAD_LETTER_QUEUE, MAIL_QUEUE,
    SYNC_QUEUE,
};
use crate::record::{Effects, WalRecord};
use crate::sql::{parse_statement, Statement};
use crate::store::{ExecResult, RecordId, Store};
use crate::sync::{ConflictDetector, PermissionPolicy};
use crate::topology::{NodeId, Role, TopologyConfig};
use crate::wal::{Wal, WalStorage};

#[derive(Clone, Debug)]
pub struct NodeConfig {
    pub id: NodeId,
    pub topology: Arc<TopologyConfig>,
    pub policy: PermissionPolicy,
    /// Seeds the mail nonce generator.
    pub seed: u64,
}

impl NodeConfig {
    pub fn new(id: NodeId, topology: Arc<TopologyConfig>) -> Self {
        NodeConfig { id, topology, policy: PermissionPolicy::allow_all(), seed: 0 }
    }

    pub fn with_policy(mut self, policy: PermissionPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct RecoveryReport {
    pub records_replayed: usize,
    pub torn_bytes: u64,
    /// Prepared transactions without a decision, now aborted.
    pub rolled_back: Vec<TxnId>,
    /// Committed transactions that were missing their END record.
    pub finished: Vec<TxnId>,
}

impl RecoveryReport {
    pub fn resolved(&self) -> usize {
        self.rolled_back.len() + self.finished.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct QueueStatus {
    pub name: String,
    pub transactional: bool,
    pub depth: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct OutgoingStatus {
    pub next_hop: NodeId,
    pub pending: usize,
    pub online: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct NodeStatus {
    pub node: NodeId,
    pub role: Role,
    pub queues: Vec<QueueStatus>,
    pub outgoing: Vec<OutgoingStatus>,
    pub pending_records: usize,
    pub active_txns: usize,
    pub dispatch_runs: u64,
    pub notifications: u64,
    pub digest: String,
    pub halted: bool,
    pub dead_letters: Vec<DeadLetterStatus>,
    pub conflict_warnings: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct DeadLetterStatus {
    pub source: String,
    pub reason: &'static str,
    pub detail: String,
}

/// Result of a client statement executed at this node.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ClientExec {
    pub record_id: u64,
    pub rows_affected: usize,
}

pub struct Node {
    pub(crate) id: NodeId,
    pub(crate) role: Role,
    pub(crate) topo: Arc<TopologyConfig>,
    pub(crate) policy: PermissionPolicy,
    wal: Wal,
    pub(crate) coord: Coordinator,
    pub(crate) queues: QueueManager,
    pub(crate) store: Store,
    pub(crate) mailbox: Mailbox,
    /// Prepared effects per transaction, waiting for a decision record.
    prepared: BTreeMap<TxnId, Vec<Effects>>,
    /// Logical clock for journal timestamps; advanced by applied records.
    clock: u64,
    pub(crate) now: u64,
    rng: ChaCha8Rng,
    halted: bool,
    /// Transactions that registered outbox records.
    registered: BTreeSet<TxnId>,
    pub(crate) dispatch_requested: bool,
    pub(crate) dispatch_runs: u64,
    pub(crate) notifications: u64,
    pub(crate) attempts: BTreeMap<MessageId, u32>,
    pub(crate) conflicts: ConflictDetector,
    veto: BTreeSet<Resource>,
    recovery: RecoveryReport,
}

impl std::fmt::Debug for Node {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Node").field("id", &self.id).field("role", &self.role).finish()
    }
}

impl Node {
    /// Opens a node over `storage`, replaying and recovering its log.
    pub fn open(config: NodeConfig, storage: Box<dyn WalStorage>) -> Result<(Node, RecoveryReport)> {
        let role = config
            .topology
            .role(&config.id)
            .ok_or_else(|| crate::topology::TopologyError::UnknownNode(config.id.to_string()))?;
        let (wal, raw, torn) = Wal::open(storage)?;
        let mut seed = [0u8; 32];
        seed[..8].copy_from_slice(&config.seed.to_be_bytes());
        for (i, b) in config.id.as_str().bytes().enumerate().take(24) {
            seed[8 + i] = b;
        }
        let mut node = Node {
            queues: QueueManager::new(config.id.clone(), config.topology.clone()),
            id: config.id,
            role,
            topo: config.topology,
            policy: config.policy,
            wal,
            coord: Coordinator::new(),
            store: Store::new(),
            mailbox: Mailbox::default(),
            prepared: BTreeMap::new(),
            clock: 0,
            now: 0,
            rng: ChaCha8Rng::from_seed(seed),
            halted: false,
            registered: BTreeSet::new(),
            dispatch_requested: false,
            dispatch_runs: 0,
            notifications: 0,
            attempts: BTreeMap::new(),
            conflicts: ConflictDetector::default(),
            veto: BTreeSet::new(),
            recovery: RecoveryReport::default(),
        };

        let mut scan = RecoveryScan::default();
        let mut report = RecoveryReport { records_replayed: raw.len(), torn_bytes: torn, ..Default::default() };
        for r in raw {
            let rec = WalRecord::decode(r.kind, &r.payload)
                .map_err(|reason| Error::CorruptLog { offset: r.offset, reason })?;
            if let Some(t) = rec.txn_log() {
                scan.observe(&t);
            }
            if let WalRecord::End { txn } = &rec {
                scan.ended(*txn);
            }
            node.apply_record(rec);
        }
        let plan = scan.plan();
        for txn in plan.rollback {
            let participants = node
                .prepared
                .get(&txn)
                .map(|v| v.iter().map(Effects::resource).collect())
                .unwrap_or_default();
            node.log(WalRecord::Abort { txn, participants })?;
            report.rolled_back.push(txn);
        }
        for txn in plan.finish {
            node.log(WalRecord::End { txn })?;
            report.finished.push(txn);
        }
        for (name, transactional) in [(SYNC_QUEUE, true), (MAIL_QUEUE, true), (DEAD_LETTER_QUEUE, false)] {
            if node.queues.queue_ref(name).is_none() {
                node.log(WalRecord::QueueCreated { name: name.to_string(), transactional })?;
            }
        }
        if !node.store.pending_records().is_empty() {
            node.dispatch_requested = true;
        }
        if report.resolved() > 0 || report.torn_bytes > 0 {
            log::info!(
                "{}: recovered {} records, resolved {} transactions, dropped {} torn bytes",
                node.id,
                report.records_replayed,
                report.resolved(),
                report.torn_bytes
            );
        }
        node.recovery = report.clone();
        Ok((node, report))
    }

    fn check_live(&self) -> Result<()> {
        if self.halted {
            Err(Error::Halted)
        } else {
            Ok(())
        }
    }

    /// Writes `rec` durably, then applies it.
    fn log(&mut self, rec: WalRecord) -> Result<()> {
        self.check_live()?;
        let (kind, payload) = rec.encode();
        if let Err(e) = self.wal.append(kind, &payload) {
            log::error!("{}: log write failed, halting: {e}", self.id);
            self.halted = true;
            return Err(e.into());
        }
        self.apply_record(rec);
        Ok(())
    }

    fn apply_record(&mut self, rec: WalRecord) {
        if let Some(t) = rec.txn() {
            self.coord.observe(t);
        }
        match rec {
            WalRecord::QueueCreated { name, transactional } => self.queues.apply_create(&name, transactional),
            WalRecord::Accepted { frames } => self.queues.apply_accepted(&frames, &mut self.clock),
            WalRecord::Acked { from, key, seq } => self.queues.apply_acked(&from, &key, seq),
            WalRecord::Prepared { txn, effects } => self.prepared.entry(txn).or_default().push(effects),
            WalRecord::Commit { txn, .. } => {
                for e in self.prepared.remove(&txn).unwrap_or_default() {
                    self.apply_effects(e);
                }
            }
            WalRecord::Abort { txn, .. } => {
                for e in self.prepared.remove(&txn).unwrap_or_default() {
                    if let Effects::Queue(q) = e {
                        self.queues.apply_aborted(&q, &mut self.clock);
                    }
                }
            }
            WalRecord::End { .. } => {}
            WalRecord::InternalCommit { effects, .. } => self.apply_effects(effects),
        }
    }

    fn apply_effects(&mut self, effects: Effects) {
        match effects {
            Effects::Queue(q) => self.queues.apply(&q, &mut self.clock),
            Effects::Store(s) => self.store.apply(&s),
            Effects::Mailbox(m) => self.mailbox.apply(&m),
        }
    }

    // ---- transactions ----

    pub fn begin(&mut self, mode: TxnMode) -> TxnContext {
        self.coord.begin(mode)
    }

    pub fn enlist(&mut self, txn: TxnId, r: Resource) -> Result<()> {
        self.check_live()?;
        if self.coord.enlist(txn, r)? && r == Resource::Store {
            if let Err(e) = self.store.begin_write(txn) {
                self.coord.unenlist(txn, r);
                return Err(e.into());
            }
        }
        Ok(())
    }

    pub fn txn(&self, txn: TxnId) -> Result<&TxnContext> {
        Ok(self.coord.get(txn)?)
    }

    fn effects_of(&self, txn: TxnId, r: Resource) -> Result<Effects> {
        Ok(match r {
            Resource::Queue => Effects::Queue(self.queues.prepare(txn)),
            Resource::Store => Effects::Store(self.store.prepare(txn)?),
            Resource::Mailbox => Effects::Mailbox(self.mailbox.prepare(txn)),
        })
    }

    fn release(&mut self, txn: TxnId) {
        self.queues.release(txn);
        self.store.release(txn);
        self.mailbox.release(txn);
        self.registered.remove(&txn);
    }

    pub fn commit(&mut self, txn: TxnId) -> Result<TxnOutcome> {
        self.check_live()?;
        let ctx = self.coord.active(txn)?.clone();
        let resources: Vec<Resource> = ctx.participants.iter().copied().collect();

        if resources.iter().any(|r| self.veto.contains(r)) {
            if ctx.mode == TxnMode::External {
                self.coord.set_state(txn, TxnState::Preparing)?;
                let mut prepared_any = false;
                for r in &resources {
                    if self.veto.contains(r) {
                        break;
                    }
                    let effects = self.effects_of(txn, *r)?;
                    self.log(WalRecord::Prepared { txn, effects })?;
                    prepared_any = true;
                }
                if prepared_any {
                    self.log(WalRecord::Abort { txn, participants: resources.clone() })?;
                }
            }
            log::debug!("{}: {txn} aborted by a participant vote", self.id);
            self.release(txn);
            self.coord.set_state(txn, TxnState::Aborted)?;
            return Ok(TxnOutcome::Aborted);
        }

        match ctx.mode {
            TxnMode::Internal => {
                if let Some(r) = resources.first() {
                    let effects = self.effects_of(txn, *r)?;
                    let empty = match &effects {
                        Effects::Queue(e) => e.is_empty(),
                        Effects::Store(e) => e.is_empty(),
                        Effects::Mailbox(e) => e.is_empty(),
                    };
                    if !empty {
                        self.log(WalRecord::InternalCommit { txn, effects })?;
                    }
                }
            }
            TxnMode::External if !resources.is_empty() => {
                self.coord.set_state(txn, TxnState::Preparing)?;
                for r in &resources {
                    let effects = self.effects_of(txn, *r)?;
                    self.log(WalRecord::Prepared { txn, effects })?;
                }
                self.log(WalRecord::Commit { txn, participants: resources.clone() })?;
                self.log(WalRecord::End { txn })?;
            }
            TxnMode::External => {}
        }
        let registered = self.registered.contains(&txn);
        self.release(txn);
        self.coord.set_state(txn, TxnState::Committed)?;
        self.coord.forget_finished();
        if registered {
            self.notify_dispatch();
        }
        Ok(TxnOutcome::Committed)
    }

    pub fn abort(&mut self, txn: TxnId) -> Result<()> {
        let state = self.coord.get(txn)?.state;
        match state {
            TxnState::Active | TxnState::Preparing => {
                self.release(txn);
                self.coord.set_state(txn, TxnState::Aborted)?;
                self.coord.forget_finished();
                Ok(())
            }
            _ => Err(crate::dtx::DtxError::TxnFinished(txn).into()),
        }
    }

    /// Runs `f` in an internal transaction over `r` and commits it.
    fn implicit<T>(&mut self, r: Resource, f: impl FnOnce(&mut Self, TxnId) -> Result<T>) -> Result<T> {
        let t = self.begin(TxnMode::Internal).txn_id;
        self.enlist(t, r)?;
        match f(self, t) {
            Ok(v) => match self.commit(t)? {
                TxnOutcome::Committed => Ok(v),
                TxnOutcome::Aborted => Err(Error::TxnAborted(t)),
            },
            Err(e) => {
                let _ = self.abort(t);
                Err(e)
            }
        }
    }

    /// Makes every later commit enlisting `r` abort, as if `r` voted NO.
    pub fn set_veto(&mut self, r: Resource, veto: bool) {
        if veto {
            self.veto.insert(r);
        } else {
            self.veto.remove(&r);
        }
    }

    // ---- queues ----

    pub fn create_queue(&mut self, name: &str, transactional: bool) -> Result<QueueRef> {
        self.check_live()?;
        self.queues.check_create(name)?;
        self.log(WalRecord::QueueCreated { name: name.to_string(), transactional })?;
        Ok(QueueRef::new(self.id.clone(), name, transactional))
    }

    pub fn queue_ref(&self, name: &str) -> Option<QueueRef> {
        self.queues.queue_ref(name)
    }

    /// Sends inside `txn`, or on its own when `txn` is `None`. Only
    /// transactional sends may target transactional queues.
    pub fn send(&mut self, txn: Option<TxnId>, dest: &QueueRef, kind: MessageKind, body: Vec<u8>) -> Result<MessageId> {
        match txn {
            Some(t) => self.send_in(t, dest, kind, body, true),
            None => self.implicit(Resource::Queue, |n, t| n.send_in(t, dest, kind, body, false)),
        }
    }

    pub(crate) fn send_in(
        &mut self,
        txn: TxnId,
        dest: &QueueRef,
        kind: MessageKind,
        body: Vec<u8>,
        transactional: bool,
    ) -> Result<MessageId> {
        self.coord.active(txn)?;
        self.enlist(txn, Resource::Queue)?;
        Ok(self.queues.send(txn, dest, kind, body, transactional, self.now)?)
    }

    pub fn receive(&mut self, txn: Option<TxnId>, queue: &str, mode: ReceiveMode) -> Result<Option<Message>> {
        self.check_live()?;
        match (txn, mode) {
            (Some(t), _) => {
                self.coord.active(t)?;
                self.enlist(t, Resource::Queue)?;
                Ok(self.queues.receive(t, queue, mode)?)
            }
            (None, ReceiveMode::Peek) => Ok(self.queues.receive(TxnId(0), queue, mode)?),
            (None, ReceiveMode::Remove) => {
                self.implicit(Resource::Queue, |n, t| Ok(n.queues.receive(t, queue, mode)?))
            }
        }
    }

    pub fn journal_list(&self, filter: &JournalFilter) -> Vec<JournalEntry> {
        self.queues.journal_list(filter)
    }

    // ---- store ----

    pub fn execute(&mut self, txn: TxnId, stmt: &Statement) -> Result<ExecResult> {
        self.check_live()?;
        self.coord.active(txn)?;
        self.enlist(txn, Resource::Store)?;
        Ok(self.store.execute(txn, stmt)?)
    }

    /// Appends executed statements to the query table inside `txn`.
    pub fn register_executed(&mut self, txn: TxnId, stmts: &[Statement]) -> Result<Vec<RecordId>> {
        let entries = stmts.iter().map(|s| (s.to_sql(), None)).collect();
        self.register_entries(txn, entries)
    }

    pub(crate) fn register_entries(
        &mut self,
        txn: TxnId,
        entries: Vec<(String, Option<(NodeId, u64)>)>,
    ) -> Result<Vec<RecordId>> {
        self.check_live()?;
        self.coord.active(txn)?;
        self.enlist(txn, Resource::Store)?;
        let ids = self.store.register(txn, &self.id, entries, self.now)?;
        self.registered.insert(txn);
        Ok(ids)
    }

    pub fn mark_dispatched(&mut self, txn: TxnId, id: RecordId) -> Result<()> {
        self.check_live()?;
        self.coord.active(txn)?;
        self.enlist(txn, Resource::Store)?;
        Ok(self.store.mark_dispatched(txn, id)?)
    }

    /// Parses, executes and registers one client statement in its own
    /// transaction.
    pub fn client_exec(&mut self, sql: &str) -> Result<ClientExec> {
        self.check_live()?;
        let stmt = parse_statement(sql)?;
        let t = self.begin(TxnMode::External).txn_id;
        let run = |n: &mut Self| -> Result<(ExecResult, RecordId)> {
            let res = n.execute(t, &stmt)?;
            let ids = n.register_executed(t, std::slice::from_ref(&stmt))?;
            Ok((res, ids[0]))
        };
        match run(self) {
            Ok((res, id)) => match self.commit(t)? {
                TxnOutcome::Committed => {
                    let origin = self.id.clone();
                    self.conflicts.observe(&origin, stmt.table(), &res.keys);
                    Ok(ClientExec { record_id: id.0, rows_affected: res.rows_affected })
                }
                TxnOutcome::Aborted => Err(Error::TxnAborted(t)),
            },
            Err(e) => {
                let _ = self.abort(t);
                Err(e)
            }
        }
    }

    pub fn state_digest(&self, tables: Option<&[&str]>) -> String {
        self.store.state_digest(tables)
    }

    /// Asks the dispatcher to run at the next poll.
    pub fn notify_dispatch(&mut self) {
        self.notifications += 1;
        self.dispatch_requested = true;
    }

    // ---- mail ----

    pub fn send_mail(&mut self, env: &MailEnvelope) -> Result<MessageId> {
        self.check_live()?;
        env.validate()?;
        if !self.topo.contains(&env.to) {
            return Err(MailError::UnknownRecipient(env.to.to_string()).into());
        }
        let key = if env.encrypted {
            Some(*self.topo.mail_key().ok_or(MailError::NoKey)?)
        } else {
            None
        };
        let body = env.encode(key.as_ref(), &mut self.rng)?;
        let dest = QueueRef::new(env.to.clone(), MAIL_QUEUE, true);
        self.implicit(Resource::Queue, |n, t| n.send_in(t, &dest, MessageKind::Mail, body, true))
    }

    pub fn fetch_mail(&self) -> Result<Vec<ReceivedMail>> {
        Ok(self.mailbox.fetch(self.topo.mail_key())?)
    }

    pub fn ack_mail(&mut self, id: &MessageId) -> Result<()> {
        self.implicit(Resource::Mailbox, |n, t| Ok(n.mailbox.ack(t, id)?))
    }

    /// Moves arrived MAIL messages into the mailbox, one transaction each.
    fn pump_mail(&mut self) -> Result<usize> {
        let mut moved = 0;
        while self.queues.receivable(MAIL_QUEUE) > 0 {
            let t = self.begin(TxnMode::External).txn_id;
            let step = (|| -> Result<()> {
                let msg = self.receive(Some(t), MAIL_QUEUE, ReceiveMode::Remove)?.expect("receivable mail");
                self.enlist(t, Resource::Mailbox)?;
                self.mailbox.deliver(t, StoredMail { mail_id: msg.id, hops: msg.hops, body: msg.body });
                Ok(())
            })();
            if let Err(e) = step {
                let _ = self.abort(t);
                return Err(e);
            }
            match self.commit(t)? {
                TxnOutcome::Committed => moved += 1,
                TxnOutcome::Aborted => break,
            }
        }
        Ok(moved)
    }

    // ---- network ----

    /// Handles one frame from neighbour `from`; returns frames to send back.
    pub fn handle_frame(&mut self, from: &NodeId, msg: Message, now: u64) -> Result<Vec<(NodeId, Message)>> {
        self.check_live()?;
        self.now = self.now.max(now);
        match msg.kind {
            MessageKind::Ack => {
                let key = msg.stream_key();
                if self.queues.is_pending(from, &key, msg.id.seq) {
                    self.log(WalRecord::Acked { from: from.clone(), key, seq: msg.id.seq })?;
                }
                Ok(Vec::new())
            }
            MessageKind::Control(_) => Ok(Vec::new()),
            MessageKind::Sync | MessageKind::Mail => {
                let (_, acks) = self.accept_frame(from, msg)?;
                Ok(acks)
            }
        }
    }

    /// Accepts a data frame, logging it before acknowledging.
    pub fn accept_frame(&mut self, from: &NodeId, msg: Message) -> Result<(AcceptOutcome, Vec<(NodeId, Message)>)> {
        let ack_to = |m: &Message| m.hops.last().cloned().unwrap_or_else(|| from.clone());
        match self.queues.accept(msg.clone()) {
            AcceptDecision::Duplicate => Ok((AcceptOutcome::Duplicate, vec![(ack_to(&msg), msg.ack(&self.id))])),
            AcceptDecision::Held => Ok((AcceptOutcome::OutOfOrderHeld, Vec::new())),
            AcceptDecision::Dropped => Ok((AcceptOutcome::Dropped, Vec::new())),
            AcceptDecision::Release(frames) => {
                if let Err(e) = self.log(WalRecord::Accepted { frames: frames.clone() }) {
                    self.queues.unrelease(frames);
                    return Err(e);
                }
                let acks = frames.iter().map(|m| (ack_to(m), m.ack(&self.id))).collect();
                Ok((AcceptOutcome::Accepted, acks))
            }
        }
    }

    /// Runs due work and returns frames to transmit.
    pub fn poll(&mut self, now: u64) -> Result<Vec<(NodeId, Message)>> {
        self.check_live()?;
        self.now = self.now.max(now);
        if self.queues.receivable(SYNC_QUEUE) > 0 {
            self.on_arrived()?;
        }
        if self.queues.receivable(MAIL_QUEUE) > 0 {
            self.pump_mail()?;
        }
        if self.dispatch_requested {
            self.dispatch()?;
        }
        Ok(self.queues.flush_all(self.now))
    }

    /// Advances the node's view of driver time.
    pub fn set_time(&mut self, now: u64) {
        self.now = self.now.max(now);
    }

    /// When `poll` next has work to do.
    pub fn next_deadline(&self) -> Option<u64> {
        if self.halted {
            return None;
        }
        if self.dispatch_requested
            || self.queues.receivable(SYNC_QUEUE) > 0
            || self.queues.receivable(MAIL_QUEUE) > 0
        {
            return Some(self.now);
        }
        self.queues.next_deadline(self.now)
    }

    pub fn set_link_status(&mut self, peer: &NodeId, status: LinkStatus) {
        self.queues.set_link(peer, status);
    }

    /// Nothing queued, held, pending or in flight.
    pub fn is_idle(&self) -> bool {
        self.queues.outgoing_pending() == 0
            && self.queues.held_count() == 0
            && self.queues.receivable(SYNC_QUEUE) == 0
            && self.queues.receivable(MAIL_QUEUE) == 0
            && self.store.pending_records().is_empty()
            && !self.dispatch_requested
            && self.coord.active_count() == 0
    }

    // ---- inspection ----

    pub fn id(&self) -> &NodeId {
        &self.id
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn topology(&self) -> &TopologyConfig {
        &self.topo
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn queues(&self) -> &QueueManager {
        &self.queues
    }

    pub fn mailbox(&self) -> &Mailbox {
        &self.mailbox
    }

    pub fn conflicts(&self) -> &ConflictDetector {
        &self.conflicts
    }

    pub fn recovery(&self) -> &RecoveryReport {
        &self.recovery
    }

    pub fn is_halted(&self) -> bool {
        self.halted
    }

    pub fn wal_writes(&self) -> u64 {
        self.wal.write_count()
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn status(&self) -> NodeStatus {
        NodeStatus {
            node: self.id.clone(),
            role: self.role,
            queues: self
                .queues
                .queue_names()
                .map(|(name, transactional)| QueueStatus {
                    name: name.clone(),
                    transactional,
                    depth: self.queues.depth(name),
                })
                .collect(),
            outgoing: self
                .queues
                .outgoing()
                .iter()
                .map(|(hop, o)| OutgoingStatus {
                    next_hop: hop.clone(),
                    pending: o.len(),
                    online: o.link() == LinkStatus::Online,
                })
                .collect(),
            pending_records: self.store.pending_records().len(),
            active_txns: self.coord.active_count(),
            dispatch_runs: self.dispatch_runs,
            notifications: self.notifications,
            digest: self.store.state_digest(None),
            halted: self.halted,
            dead_letters: self
                .store
                .dead_letters()
                .iter()
                .map(|d| DeadLetterStatus {
                    source: d.source.to_string(),
                    reason: d.reason.as_str(),
                    detail: d.detail.clone(),
                })
                .collect(),
            conflict_warnings: self.conflicts.warnings().len(),
        }
    }
}
