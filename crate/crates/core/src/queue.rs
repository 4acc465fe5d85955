//! Transactional message queues.
//!
//! Each node owns private queues, one outgoing (store-and-forward) queue per
//! next-hop neighbour, and a journal of committed sends and receives.
//!
//! Messages travel in streams keyed by `(origin, destination node,
//! destination queue)`. The sender numbers each stream gap-free from 1, which
//! lets every receiving hop deduplicate against a single high-water mark and
//! hold back frames that arrive ahead of a gap.
//!
//! This type only holds state. The node writes the log records and then
//! calls the `apply_*` methods, which are also what log replay calls.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dtx::TxnId;
use crate::topology::{NodeId, TopologyConfig};

pub const MAX_BODY_BYTES: usize = 4 * 1024 * 1024;
pub const RETRY_BASE_MS: u64 = 500;
pub const RETRY_MAX_MS: u64 = 8_000;
/// Out-of-order frames held per stream before further ones are dropped.
pub const HOLD_WINDOW: usize = 1024;
/// Frames per outgoing queue that may be unacknowledged at once.
pub const SEND_WINDOW: usize = 256;

pub const SYNC_QUEUE: &str = "sync_in";
pub const MAIL_QUEUE: &str = "mail_in";
pub const DEAD_LETTER_QUEUE: &str = "dead_letter";

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MessageId {
    pub origin: NodeId,
    /// Position in the origin's stream to one destination queue.
    pub seq: u64,
}

impl fmt::Display for MessageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.origin, self.seq)
    }
}

impl std::str::FromStr for MessageId {
    type Err = String;

    /// Parses the `origin#seq` display form.
    fn from_str(s: &str) -> Result<Self, String> {
        let (origin, seq) = s.rsplit_once('#').ok_or_else(|| format!("expected origin#seq, got {s:?}"))?;
        let origin = NodeId::new(origin).map_err(|e| e.to_string())?;
        let seq = seq.parse().map_err(|_| format!("bad sequence number in {s:?}"))?;
        Ok(MessageId { origin, seq })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MessageKind {
    Sync,
    Mail,
    Ack,
    /// Admin control traffic, wire codes 0x80..=0xFF.
    Control(u8),
}

impl MessageKind {
    pub fn code(self) -> u8 {
        match self {
            MessageKind::Sync => 1,
            MessageKind::Mail => 2,
            MessageKind::Ack => 3,
            MessageKind::Control(c) => c,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(MessageKind::Sync),
            2 => Some(MessageKind::Mail),
            3 => Some(MessageKind::Ack),
            0x80..=0xFF => Some(MessageKind::Control(code)),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct QueueRef {
    pub node: NodeId,
    pub name: String,
    pub transactional: bool,
}

impl QueueRef {
    pub fn new(node: NodeId, name: impl Into<String>, transactional: bool) -> Self {
        QueueRef { node, name: name.into(), transactional }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StreamKey {
    pub origin: NodeId,
    pub dest_node: NodeId,
    pub queue: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub id: MessageId,
    pub kind: MessageKind,
    pub body: Vec<u8>,
    pub transactional: bool,
    pub sent_at: u64,
    pub dest: QueueRef,
    /// Nodes that have durably held this message, origin first.
    pub hops: Vec<NodeId>,
}

impl Message {
    pub fn stream_key(&self) -> StreamKey {
        StreamKey {
            origin: self.id.origin.clone(),
            dest_node: self.dest.node.clone(),
            queue: self.dest.name.clone(),
        }
    }

    /// Acknowledgement for this message, sent back one hop by `acker`.
    pub fn ack(&self, acker: &NodeId) -> Message {
        Message {
            id: self.id.clone(),
            kind: MessageKind::Ack,
            body: Vec::new(),
            transactional: false,
            sent_at: self.sent_at,
            dest: self.dest.clone(),
            hops: vec![acker.clone()],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Sent,
    Received,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum JournalOutcome {
    Committed,
    Aborted,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JournalEntry {
    pub direction: Direction,
    pub id: MessageId,
    pub queue: String,
    /// Destination node for sends, previous hop's origin for receives.
    pub peer: NodeId,
    pub kind: MessageKind,
    pub timestamp: u64,
    pub outcome: JournalOutcome,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct JournalFilter {
    pub direction: Option<Direction>,
    pub queue: Option<String>,
    pub kind: Option<MessageKind>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LinkStatus {
    Online,
    Offline,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReceiveMode {
    Peek,
    Remove,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AcceptOutcome {
    Accepted,
    Duplicate,
    OutOfOrderHeld,
    /// Held window for the stream is full; the sender will retransmit.
    Dropped,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum QueueError {
    #[error("queue {0} already exists")]
    AlreadyExists(String),
    #[error("queue {0} does not exist")]
    QueueMissing(String),
    #[error("transactional message sent to non-transactional queue {0}")]
    NonTransactionalQueue(String),
    #[error("message body of {0} bytes exceeds the 4 MiB limit")]
    BodyTooLarge(usize),
    #[error("stream to {0} has uncommitted sends from another transaction")]
    StreamBusy(String),
    #[error("unknown node {0}")]
    UnknownNode(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum QueueEffect {
    Send(Message),
    Remove { queue: String, id: MessageId },
}

#[derive(Debug, Default)]
struct LocalQueue {
    transactional: bool,
    messages: VecDeque<Message>,
}

#[derive(Clone, Debug)]
struct PendingFrame {
    msg: Message,
    attempts: u32,
    next_send_at: Option<u64>,
}

#[derive(Debug)]
pub struct OutgoingQueue {
    pending: VecDeque<PendingFrame>,
    link: LinkStatus,
}

impl Default for OutgoingQueue {
    fn default() -> Self {
        OutgoingQueue { pending: VecDeque::new(), link: LinkStatus::Online }
    }
}

impl OutgoingQueue {
    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn link(&self) -> LinkStatus {
        self.link
    }

    pub fn messages(&self) -> impl Iterator<Item = &Message> {
        self.pending.iter().map(|p| &p.msg)
    }
}

pub fn retry_delay(attempts: u32) -> u64 {
    let shift = attempts.saturating_sub(1).min(16);
    (RETRY_BASE_MS << shift).min(RETRY_MAX_MS)
}

/// Result of inspecting an incoming frame, before anything is logged.
#[derive(Debug)]
pub enum AcceptDecision {
    Duplicate,
    Held,
    Dropped,
    /// These frames are next in their stream and must be logged, in order.
    Release(Vec<Message>),
}

#[derive(Debug)]
pub struct QueueManager {
    node: NodeId,
    topo: Arc<TopologyConfig>,
    queues: BTreeMap<String, LocalQueue>,
    outgoing: BTreeMap<NodeId, OutgoingQueue>,
    sent_seq: BTreeMap<StreamKey, u64>,
    reserved: BTreeMap<StreamKey, (TxnId, u64)>,
    hwm: BTreeMap<StreamKey, u64>,
    held: BTreeMap<StreamKey, BTreeMap<u64, Message>>,
    locks: BTreeMap<(String, MessageId), TxnId>,
    txns: BTreeMap<TxnId, Vec<QueueEffect>>,
    journal: Vec<JournalEntry>,
    accepted: BTreeMap<(StreamKey, u64), u32>,
}

impl QueueManager {
    pub fn new(node: NodeId, topo: Arc<TopologyConfig>) -> Self {
        QueueManager {
            node,
            topo,
            queues: BTreeMap::new(),
            outgoing: BTreeMap::new(),
            sent_seq: BTreeMap::new(),
            reserved: BTreeMap::new(),
            hwm: BTreeMap::new(),
            held: BTreeMap::new(),
            locks: BTreeMap::new(),
            txns: BTreeMap::new(),
            journal: Vec::new(),
            accepted: BTreeMap::new(),
        }
    }

    pub fn node(&self) -> &NodeId {
        &self.node
    }

    pub fn check_create(&self, name: &str) -> Result<(), QueueError> {
        if self.queues.contains_key(name) {
            Err(QueueError::AlreadyExists(name.to_string()))
        } else {
            Ok(())
        }
    }

    pub fn apply_create(&mut self, name: &str, transactional: bool) {
        self.queues
            .entry(name.to_string())
            .or_insert_with(|| LocalQueue { transactional, messages: VecDeque::new() });
    }

    pub fn queue_ref(&self, name: &str) -> Option<QueueRef> {
        self.queues
            .get(name)
            .map(|q| QueueRef::new(self.node.clone(), name, q.transactional))
    }

    /// Buffers a send inside `txn`, reserving the next sequence number of
    /// the stream.
    pub fn send(
        &mut self,
        txn: TxnId,
        dest: &QueueRef,
        kind: MessageKind,
        body: Vec<u8>,
        transactional: bool,
        now: u64,
    ) -> Result<MessageId, QueueError> {
        if body.len() > MAX_BODY_BYTES {
            return Err(QueueError::BodyTooLarge(body.len()));
        }
        if !self.topo.contains(&dest.node) {
            return Err(QueueError::UnknownNode(dest.node.to_string()));
        }
        let dest_transactional = if dest.node == self.node {
            self.queues
                .get(&dest.name)
                .ok_or_else(|| QueueError::QueueMissing(dest.name.clone()))?
                .transactional
        } else {
            dest.transactional
        };
        if transactional && !dest_transactional {
            return Err(QueueError::NonTransactionalQueue(dest.name.clone()));
        }
        let key = StreamKey {
            origin: self.node.clone(),
            dest_node: dest.node.clone(),
            queue: dest.name.clone(),
        };
        let seq = match self.reserved.get(&key) {
            Some((owner, _)) if *owner != txn => {
                return Err(QueueError::StreamBusy(format!("{}/{}", dest.node, dest.name)))
            }
            Some((_, last)) => last + 1,
            None => self.sent_seq.get(&key).copied().unwrap_or(0) + 1,
        };
        self.reserved.insert(key, (txn, seq));
        let id = MessageId { origin: self.node.clone(), seq };
        let msg = Message {
            id: id.clone(),
            kind,
            body,
            transactional,
            sent_at: now,
            dest: QueueRef { transactional: dest_transactional, ..dest.clone() },
            hops: vec![self.node.clone()],
        };
        self.txns.entry(txn).or_default().push(QueueEffect::Send(msg));
        Ok(id)
    }

    pub fn receive(
        &mut self,
        txn: TxnId,
        queue: &str,
        mode: ReceiveMode,
    ) -> Result<Option<Message>, QueueError> {
        let q = self
            .queues
            .get(queue)
            .ok_or_else(|| QueueError::QueueMissing(queue.to_string()))?;
        let found = q
            .messages
            .iter()
            .find(|m| !self.locks.contains_key(&(queue.to_string(), m.id.clone())))
            .cloned();
        if let (Some(m), ReceiveMode::Remove) = (&found, mode) {
            self.locks.insert((queue.to_string(), m.id.clone()), txn);
            self.txns
                .entry(txn)
                .or_default()
                .push(QueueEffect::Remove { queue: queue.to_string(), id: m.id.clone() });
        }
        Ok(found)
    }

    pub fn has_work(&self, txn: TxnId) -> bool {
        self.txns.get(&txn).is_some_and(|e| !e.is_empty())
    }

    pub fn prepare(&self, txn: TxnId) -> Vec<QueueEffect> {
        self.txns.get(&txn).cloned().unwrap_or_default()
    }

    /// Forgets a finished transaction's buffers, locks and reservations.
    pub fn release(&mut self, txn: TxnId) {
        self.txns.remove(&txn);
        self.locks.retain(|_, t| *t != txn);
        self.reserved.retain(|_, (t, _)| *t != txn);
    }

    pub fn apply(&mut self, effects: &[QueueEffect], clock: &mut u64) {
        for e in effects {
            match e {
                QueueEffect::Send(msg) => {
                    let key = msg.stream_key();
                    let last = self.sent_seq.entry(key).or_insert(0);
                    *last = (*last).max(msg.id.seq);
                    self.journal_push(Direction::Sent, msg, msg.dest.node.clone(), clock);
                    if msg.dest.node == self.node {
                        self.enqueue_local(msg.clone());
                    } else {
                        self.push_outgoing(msg.clone());
                    }
                }
                QueueEffect::Remove { queue, id } => {
                    self.locks.remove(&(queue.clone(), id.clone()));
                    let removed = self.queues.get_mut(queue).and_then(|q| {
                        let pos = q.messages.iter().position(|m| &m.id == id)?;
                        q.messages.remove(pos)
                    });
                    if let Some(msg) = removed {
                        let peer = msg.id.origin.clone();
                        self.journal_push(Direction::Received, &msg, peer, clock);
                    }
                }
            }
        }
    }

    /// Journals the sends a prepared-then-aborted transaction would have made.
    pub fn apply_aborted(&mut self, effects: &[QueueEffect], clock: &mut u64) {
        for e in effects {
            if let QueueEffect::Send(msg) = e {
                *clock += 1;
                self.journal.push(JournalEntry {
                    direction: Direction::Sent,
                    id: msg.id.clone(),
                    queue: msg.dest.name.clone(),
                    peer: msg.dest.node.clone(),
                    kind: msg.kind,
                    timestamp: *clock,
                    outcome: JournalOutcome::Aborted,
                });
            }
        }
    }

    fn journal_push(&mut self, direction: Direction, msg: &Message, peer: NodeId, clock: &mut u64) {
        *clock += 1;
        self.journal.push(JournalEntry {
            direction,
            id: msg.id.clone(),
            queue: msg.dest.name.clone(),
            peer,
            kind: msg.kind,
            timestamp: *clock,
            outcome: JournalOutcome::Committed,
        });
    }

    fn enqueue_local(&mut self, msg: Message) {
        let fits = self
            .queues
            .get(&msg.dest.name)
            .is_some_and(|q| q.transactional || !msg.transactional);
        let name = if fits { msg.dest.name.clone() } else { DEAD_LETTER_QUEUE.to_string() };
        if !fits {
            log::warn!("message {} for missing or mismatched queue {} dead-lettered", msg.id, msg.dest.name);
        }
        self.queues.entry(name).or_default().messages.push_back(msg);
    }

    fn push_outgoing(&mut self, msg: Message) {
        let hop = self
            .topo
            .route_next_hop(&self.node, &msg.dest.node)
            .unwrap_or_else(|_| self.topo.central().clone());
        self.outgoing.entry(hop).or_default().pending.push_back(PendingFrame {
            msg,
            attempts: 0,
            next_send_at: None,
        });
    }

    /// Classifies an incoming data frame.
    pub fn accept(&mut self, msg: Message) -> AcceptDecision {
        let key = msg.stream_key();
        let hwm = self.hwm.get(&key).copied().unwrap_or(0);
        let seq = msg.id.seq;
        if seq <= hwm {
            return AcceptDecision::Duplicate;
        }
        if seq > hwm + 1 {
            let held = self.held.entry(key).or_default();
            if held.contains_key(&seq) {
                return AcceptDecision::Held;
            }
            if held.len() >= HOLD_WINDOW {
                return AcceptDecision::Dropped;
            }
            held.insert(seq, msg);
            return AcceptDecision::Held;
        }
        let mut run = vec![msg];
        if let Some(held) = self.held.get_mut(&key) {
            let mut next = seq + 1;
            while let Some(m) = held.remove(&next) {
                run.push(m);
                next += 1;
            }
        }
        AcceptDecision::Release(run)
    }

    /// Puts back frames from a release that could not be logged.
    pub fn unrelease(&mut self, frames: Vec<Message>) {
        for m in frames.into_iter().skip(1) {
            self.held.entry(m.stream_key()).or_default().insert(m.id.seq, m);
        }
    }

    /// Applies durably accepted frames: advance the stream mark, then either
    /// enqueue locally or forward towards the destination.
    pub fn apply_accepted(&mut self, frames: &[Message], clock: &mut u64) {
        for msg in frames {
            let key = msg.stream_key();
            let hwm = self.hwm.entry(key.clone()).or_insert(0);
            if msg.id.seq <= *hwm {
                continue;
            }
            *hwm = msg.id.seq;
            if let Some(h) = self.held.get_mut(&key) {
                h.remove(&msg.id.seq);
            }
            *self.accepted.entry((key, msg.id.seq)).or_insert(0) += 1;
            let mut msg = msg.clone();
            msg.hops.push(self.node.clone());
            if msg.dest.node == self.node {
                self.enqueue_local(msg);
            } else {
                let prev = msg.hops[msg.hops.len() - 2].clone();
                self.journal_push(Direction::Received, &msg, prev, clock);
                let next = msg.dest.node.clone();
                self.journal_push(Direction::Sent, &msg, next, clock);
                self.push_outgoing(msg);
            }
        }
    }

    /// Whether an acknowledgement from `from` matches a pending frame.
    pub fn is_pending(&self, from: &NodeId, key: &StreamKey, seq: u64) -> bool {
        self.outgoing.get(from).is_some_and(|o| {
            o.pending
                .iter()
                .any(|p| p.msg.id.seq == seq && &p.msg.stream_key() == key)
        })
    }

    pub fn apply_acked(&mut self, from: &NodeId, key: &StreamKey, seq: u64) {
        if let Some(o) = self.outgoing.get_mut(from) {
            if let Some(pos) = o
                .pending
                .iter()
                .position(|p| p.msg.id.seq == seq && &p.msg.stream_key() == key)
            {
                o.pending.remove(pos);
            }
        }
    }

    pub fn set_link(&mut self, target: &NodeId, status: LinkStatus) {
        let o = self.outgoing.entry(target.clone()).or_default();
        if o.link == LinkStatus::Offline && status == LinkStatus::Online {
            for p in &mut o.pending {
                p.attempts = 0;
                p.next_send_at = None;
            }
        }
        o.link = status;
    }

    pub fn link(&self, target: &NodeId) -> LinkStatus {
        self.outgoing.get(target).map_or(LinkStatus::Online, |o| o.link)
    }

    /// Frames due for (re)transmission to `target`, in FIFO order.
    pub fn flush(&mut self, target: &NodeId, now: u64) -> Vec<Message> {
        let Some(o) = self.outgoing.get_mut(target) else {
            return Vec::new();
        };
        if o.link == LinkStatus::Offline {
            return Vec::new();
        }
        let mut out = Vec::new();
        for p in o.pending.iter_mut().take(SEND_WINDOW) {
            if p.next_send_at.is_none_or(|t| t <= now) {
                p.attempts += 1;
                p.next_send_at = Some(now + retry_delay(p.attempts));
                out.push(p.msg.clone());
            }
        }
        out
    }

    pub fn flush_all(&mut self, now: u64) -> Vec<(NodeId, Message)> {
        let targets: Vec<NodeId> = self.outgoing.keys().cloned().collect();
        targets
            .into_iter()
            .flat_map(|t| self.flush(&t, now).into_iter().map(move |m| (t.clone(), m)))
            .collect()
    }

    /// Earliest time a retransmission is due on an online link.
    pub fn next_deadline(&self, now: u64) -> Option<u64> {
        self.outgoing
            .values()
            .filter(|o| o.link == LinkStatus::Online)
            .flat_map(|o| o.pending.iter().take(SEND_WINDOW))
            .map(|p| p.next_send_at.unwrap_or(now))
            .min()
    }

    pub fn outgoing(&self) -> &BTreeMap<NodeId, OutgoingQueue> {
        &self.outgoing
    }

    pub fn outgoing_pending(&self) -> usize {
        self.outgoing.values().map(OutgoingQueue::len).sum()
    }

    pub fn depth(&self, queue: &str) -> usize {
        self.queues.get(queue).map_or(0, |q| q.messages.len())
    }

    /// Messages not locked by an active transaction.
    pub fn receivable(&self, queue: &str) -> usize {
        self.queues.get(queue).map_or(0, |q| {
            q.messages
                .iter()
                .filter(|m| !self.locks.contains_key(&(queue.to_string(), m.id.clone())))
                .count()
        })
    }

    pub fn messages(&self, queue: &str) -> Vec<Message> {
        self.queues
            .get(queue)
            .map(|q| q.messages.iter().cloned().collect())
            .unwrap_or_default()
    }

    pub fn queue_names(&self) -> impl Iterator<Item = (&String, bool)> {
        self.queues.iter().map(|(n, q)| (n, q.transactional))
    }

    pub fn journal(&self) -> &[JournalEntry] {
        &self.journal
    }

    pub fn journal_list(&self, filter: &JournalFilter) -> Vec<JournalEntry> {
        self.journal
            .iter()
            .filter(|e| filter.direction.is_none_or(|d| d == e.direction))
            .filter(|e| filter.queue.as_ref().is_none_or(|q| q == &e.queue))
            .filter(|e| filter.kind.is_none_or(|k| k == e.kind))
            .cloned()
            .collect()
    }

    /// How many times each stream position was accepted here.
    pub fn accept_counts(&self) -> &BTreeMap<(StreamKey, u64), u32> {
        &self.accepted
    }

    pub fn high_water(&self, key: &StreamKey) -> u64 {
        self.hwm.get(key).copied().unwrap_or(0)
    }

    pub fn held_count(&self) -> usize {
        self.held.values().map(BTreeMap::len).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn id(s: &str) -> NodeId {
        NodeId::new(s).unwrap()
    }

    #[test]
    fn message_id_parses_display_form() {
        let m = MessageId { origin: id("B-1"), seq: 42 };
        assert_eq!(m.to_string().parse::<MessageId>(), Ok(m));
        assert!("B1".parse::<MessageId>().is_err());
        assert!("B1#x".parse::<MessageId>().is_err());
        assert!("#3".parse::<MessageId>().is_err());
    }

    fn manager(node: &str) -> QueueManager {
        let topo = Arc::new(TopologyConfig::star("C", &["B1", "B2"]).unwrap());
        let mut q = QueueManager::new(id(node), topo);
        q.apply_create(SYNC_QUEUE, true);
        q
    }

    fn frame(origin: &str, seq: u64) -> Message {
        Message {
            id: MessageId { origin: id(origin), seq },
            kind: MessageKind::Sync,
            body: vec![seq as u8],
            transactional: true,
            sent_at: 0,
            dest: QueueRef::new(id("C"), SYNC_QUEUE, true),
            hops: vec![id(origin)],
        }
    }

    fn accept(q: &mut QueueManager, m: Message) -> AcceptOutcome {
        let mut clock = 0;
        match q.accept(m) {
            AcceptDecision::Duplicate => AcceptOutcome::Duplicate,
            AcceptDecision::Held => AcceptOutcome::OutOfOrderHeld,
            AcceptDecision::Dropped => AcceptOutcome::Dropped,
            AcceptDecision::Release(frames) => {
                q.apply_accepted(&frames, &mut clock);
                AcceptOutcome::Accepted
            }
        }
    }

    #[test]
    fn duplicate_frame_detected() {
        let mut q = manager("C");
        assert_eq!(accept(&mut q, frame("B1", 1)), AcceptOutcome::Accepted);
        assert_eq!(accept(&mut q, frame("B1", 1)), AcceptOutcome::Duplicate);
        assert_eq!(q.depth(SYNC_QUEUE), 1);
    }

    #[test]
    fn gap_is_held_then_released_in_order() {
        let mut q = manager("C");
        for s in 1..=3 {
            accept(&mut q, frame("B1", s));
        }
        assert_eq!(accept(&mut q, frame("B1", 5)), AcceptOutcome::OutOfOrderHeld);
        assert_eq!(q.depth(SYNC_QUEUE), 3);
        assert_eq!(accept(&mut q, frame("B1", 4)), AcceptOutcome::Accepted);
        let seqs: Vec<u64> = q.messages(SYNC_QUEUE).iter().map(|m| m.id.seq).collect();
        assert_eq!(seqs, vec![1, 2, 3, 4, 5]);
        assert_eq!(q.held_count(), 0);
    }

    #[test]
    fn hold_window_is_bounded() {
        let mut q = manager("C");
        for s in 0..HOLD_WINDOW as u64 {
            assert_eq!(accept(&mut q, frame("B1", s + 2)), AcceptOutcome::OutOfOrderHeld);
        }
        assert_eq!(accept(&mut q, frame("B1", HOLD_WINDOW as u64 + 2)), AcceptOutcome::Dropped);
        assert_eq!(accept(&mut q, frame("B1", 1)), AcceptOutcome::Accepted);
        assert_eq!(q.depth(SYNC_QUEUE), HOLD_WINDOW + 1);
    }

    #[test]
    fn streams_reserve_per_transaction() {
        let mut q = manager("B1");
        let dest = QueueRef::new(id("C"), SYNC_QUEUE, true);
        let a = q.send(TxnId(1), &dest, MessageKind::Sync, vec![], true, 0).unwrap();
        let b = q.send(TxnId(1), &dest, MessageKind::Sync, vec![], true, 0).unwrap();
        assert_eq!((a.seq, b.seq), (1, 2));
        assert!(matches!(
            q.send(TxnId(2), &dest, MessageKind::Sync, vec![], true, 0),
            Err(QueueError::StreamBusy(_))
        ));
        q.release(TxnId(1));
        let c = q.send(TxnId(2), &dest, MessageKind::Sync, vec![], true, 0).unwrap();
        assert_eq!(c.seq, 1, "aborted reservations are reused");
    }

    #[test]
    fn retry_backoff_caps() {
        assert_eq!(retry_delay(1), 500);
        assert_eq!(retry_delay(2), 1000);
        assert_eq!(retry_delay(5), 8000);
        assert_eq!(retry_delay(40), 8000);
    }

    #[test]
    fn flush_respects_link_and_timers() {
        let mut q = manager("B1");
        let dest = QueueRef::new(id("C"), SYNC_QUEUE, true);
        let mut clock = 0;
        q.send(TxnId(1), &dest, MessageKind::Sync, vec![1], true, 0).unwrap();
        let fx = q.prepare(TxnId(1));
        q.apply(&fx, &mut clock);
        q.release(TxnId(1));
        q.set_link(&id("C"), LinkStatus::Offline);
        assert!(q.flush(&id("C"), 0).is_empty());
        assert_eq!(q.outgoing_pending(), 1);
        q.set_link(&id("C"), LinkStatus::Online);
        assert_eq!(q.flush(&id("C"), 10).len(), 1);
        assert!(q.flush(&id("C"), 20).is_empty());
        assert_eq!(q.next_deadline(20), Some(510));
        assert_eq!(q.flush(&id("C"), 510).len(), 1);
        assert_eq!(q.next_deadline(510), Some(1510));
    }
}
