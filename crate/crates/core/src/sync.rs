//! Statement replication between branches and central.
//!
//! Branches ship their executed statements to central's `sync_in` queue;
//! central applies them and fans them out to every other branch. A batch
//! is sent and marked dispatched in one transaction, and an arrived batch
//! is removed from the queue and applied in one transaction, so each
//! statement is applied exactly once per node.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dtx::{Resource, TxnId, TxnMode, TxnOutcome};
use crate::error::{Error, Result};
use crate::node::Node;
use crate::queue::{Message, MessageId, MessageKind, QueueRef, ReceiveMode, SYNC_QUEUE};
use crate::sql::{parse_statement, Statement, StatementKind, Value};
use crate::store::{AppliedLogEntry, ApplyOutcome};
use crate::topology::{NodeId, Role};

pub const SCHEMA_VERSION: u32 = 1;
/// Outbox records per SYNC message.
pub const MAX_BATCH: usize = 32;
/// Failed apply attempts before a message is dead-lettered.
pub const MAX_APPLY_ATTEMPTS: u32 = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyncRecord {
    pub id: u64,
    pub sql: String,
}

/// Body of a SYNC message: compact JSON with keys in this order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyncBody {
    pub origin: NodeId,
    pub schema_version: u32,
    pub records: Vec<SyncRecord>,
}

impl SyncBody {
    pub fn encode(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("sync body serializes")
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        let body: SyncBody = serde_json::from_slice(bytes).map_err(|e| e.to_string())?;
        if body.schema_version != SCHEMA_VERSION {
            return Err(format!("unsupported schema version {}", body.schema_version));
        }
        if body.records.is_empty() {
            return Err("empty batch".into());
        }
        Ok(body)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DeadLetterReason {
    ParseFail,
    ExecFail,
    PermissionDenied,
}

impl DeadLetterReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DeadLetterReason::ParseFail => "PARSE_FAIL",
            DeadLetterReason::ExecFail => "EXEC_FAIL",
            DeadLetterReason::PermissionDenied => "PERMISSION_DENIED",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeadLetterEntry {
    pub source: MessageId,
    pub reason: DeadLetterReason,
    pub detail: String,
    pub body: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct PolicyRule {
    origin: Option<NodeId>,
    kind: Option<StatementKind>,
    table: String,
}

/// Which origins may replicate which statements into this node. Lines read
/// `allow <origin|*> <CREATE|INSERT|UPDATE|DELETE|*> <table glob>`; blank
/// lines and `#` comments are ignored. An empty policy denies everything.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PermissionPolicy {
    rules: Vec<PolicyRule>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("policy line {line}: {msg}")]
pub struct PolicyError {
    pub line: usize,
    pub msg: String,
}

impl PermissionPolicy {
    pub fn allow_all() -> Self {
        PermissionPolicy { rules: vec![PolicyRule { origin: None, kind: None, table: "*".into() }] }
    }

    pub fn deny_all() -> Self {
        PermissionPolicy { rules: Vec::new() }
    }

    pub fn parse(text: &str) -> std::result::Result<Self, PolicyError> {
        let mut rules = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: &str| PolicyError { line: i + 1, msg: msg.to_string() };
            let parts: Vec<&str> = line.split_whitespace().collect();
            let [verb, origin, kind, table] = parts[..] else {
                return Err(err("expected: allow <origin> <kind> <table>"));
            };
            if verb != "allow" {
                return Err(err("only allow rules are supported"));
            }
            let origin = match origin {
                "*" => None,
                o => Some(NodeId::new(o).map_err(|e| err(&e.to_string()))?),
            };
            let kind = match kind {
                "*" => None,
                k => Some(StatementKind::parse(k).ok_or_else(|| err("unknown statement kind"))?),
            };
            rules.push(PolicyRule { origin, kind, table: table.to_string() });
        }
        Ok(PermissionPolicy { rules })
    }

    pub fn allows(&self, origin: &NodeId, stmt: &Statement) -> bool {
        self.rules.iter().any(|r| {
            r.origin.as_ref().is_none_or(|o| o == origin)
                && r.kind.is_none_or(|k| k == stmt.kind())
                && glob_match(&r.table, stmt.table())
        })
    }
}

impl Default for PermissionPolicy {
    fn default() -> Self {
        Self::allow_all()
    }
}

pub fn check_permission(policy: &PermissionPolicy, origin: &NodeId, stmt: &Statement) -> bool {
    policy.allows(origin, stmt)
}

/// `*` matches any run, `?` any one character.
pub fn glob_match(pattern: &str, text: &str) -> bool {
    let p: Vec<char> = pattern.chars().collect();
    let t: Vec<char> = text.chars().collect();
    let (mut pi, mut ti) = (0, 0);
    let mut star: Option<(usize, usize)> = None;
    while ti < t.len() {
        if pi < p.len() && (p[pi] == '?' || p[pi] == t[ti]) {
            pi += 1;
            ti += 1;
        } else if pi < p.len() && p[pi] == '*' {
            star = Some((pi, ti));
            pi += 1;
        } else if let Some((sp, st)) = star {
            pi = sp + 1;
            ti = st + 1;
            star = Some((sp, st + 1));
        } else {
            return false;
        }
    }
    p[pi..].iter().all(|&c| c == '*')
}

/// Two origins wrote the same row; last writer won.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ConflictWarning {
    pub table: String,
    pub key: String,
    pub previous: NodeId,
    pub current: NodeId,
}

/// Remembers the last origin that wrote each row.
#[derive(Clone, Debug, Default)]
pub struct ConflictDetector {
    last: BTreeMap<(String, Value), NodeId>,
    warnings: Vec<ConflictWarning>,
}

impl ConflictDetector {
    pub fn observe(&mut self, origin: &NodeId, table: &str, keys: &[Value]) {
        for k in keys {
            let prev = self.last.insert((table.to_string(), k.clone()), origin.clone());
            if let Some(prev) = prev.filter(|p| p != origin) {
                log::warn!("conflict on {table}[{}]: {prev} then {origin}", k.render());
                self.warnings.push(ConflictWarning {
                    table: table.to_string(),
                    key: k.render(),
                    previous: prev,
                    current: origin.clone(),
                });
            }
        }
    }

    pub fn warnings(&self) -> &[ConflictWarning] {
        &self.warnings
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ApplyReport {
    pub messages: usize,
    pub applied: usize,
    pub skipped: usize,
    pub failed: usize,
    pub dead_lettered: usize,
    pub retries: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct DispatchReport {
    pub batches: usize,
    pub messages_sent: usize,
    pub records_dispatched: usize,
    pub failed_batches: usize,
}

/// True when every node is quiescent and all store digests agree.
pub fn converged(nodes: &[&Node], tables: Option<&[&str]>) -> Result<bool> {
    if let Some(busy) = nodes.iter().find(|n| !n.is_idle()) {
        return Err(Error::NotQuiescent(format!("{} has work pending", busy.id())));
    }
    let mut digests = nodes.iter().map(|n| n.state_digest(tables));
    let Some(first) = digests.next() else {
        return Ok(true);
    };
    Ok(digests.all(|d| d == first))
}

enum Attempt {
    Done,
    /// Statement execution failed; the transaction was aborted.
    ExecFailed(String),
    /// The commit itself was refused.
    Aborted,
}

impl Node {
    /// Applies every receivable SYNC message.
    pub fn on_arrived(&mut self) -> Result<ApplyReport> {
        let mut report = ApplyReport::default();
        while self.queues.receivable(SYNC_QUEUE) > 0 {
            let t = self.begin(TxnMode::External).txn_id;
            let msg = match self.receive(Some(t), SYNC_QUEUE, ReceiveMode::Remove) {
                Ok(Some(m)) => m,
                Ok(None) => {
                    self.abort(t)?;
                    break;
                }
                Err(e) => {
                    let _ = self.abort(t);
                    return Err(e);
                }
            };
            match self.apply_message(t, &msg, &mut report)? {
                Attempt::Done => {
                    self.attempts.remove(&msg.id);
                    report.messages += 1;
                }
                Attempt::Aborted => break,
                Attempt::ExecFailed(detail) => {
                    let n = self.attempts.entry(msg.id.clone()).or_insert(0);
                    *n += 1;
                    if *n < MAX_APPLY_ATTEMPTS {
                        report.retries += 1;
                        continue;
                    }
                    if !self.fail_message(&msg, detail, &mut report)? {
                        break;
                    }
                    self.attempts.remove(&msg.id);
                    report.messages += 1;
                }
            }
        }
        Ok(report)
    }

    fn apply_message(&mut self, t: TxnId, msg: &Message, report: &mut ApplyReport) -> Result<Attempt> {
        if let Err(e) = self.enlist(t, Resource::Store) {
            let _ = self.abort(t);
            return match e {
                Error::Store(_) => Ok(Attempt::Aborted),
                e => Err(e),
            };
        }
        let parsed = SyncBody::decode(&msg.body).and_then(|body| {
            let stmts = body
                .records
                .iter()
                .map(|r| parse_statement(&r.sql).map_err(|e| format!("record {}: {e}", r.id)))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            Ok((body, stmts))
        });
        let (body, stmts) = match parsed {
            Ok(v) => v,
            Err(detail) => {
                log::warn!("{}: sync message {} unparseable: {detail}", self.id, msg.id);
                self.store.record_dead_letter(t, dead_letter(msg, DeadLetterReason::ParseFail, detail))?;
                return self.finish(t, None, Vec::new(), |r| r.dead_lettered += 1, report);
            }
        };

        let mut applied = Vec::new();
        let mut writes = Vec::new();
        let mut denied = 0;
        for (i, (rec, stmt)) in body.records.iter().zip(&stmts).enumerate() {
            if body.origin == self.id {
                continue;
            }
            let outcome = if !self.policy.allows(&body.origin, stmt) {
                denied += 1;
                ApplyOutcome::SkippedPermission
            } else {
                match self.store.execute(t, stmt) {
                    Ok(res) => {
                        writes.push((stmt.table().to_string(), res.keys));
                        applied.push(rec.clone());
                        ApplyOutcome::Applied
                    }
                    Err(e) => {
                        self.abort(t)?;
                        return Ok(Attempt::ExecFailed(format!("record {}: {e}", rec.id)));
                    }
                }
            };
            self.store.record_applied(
                t,
                AppliedLogEntry {
                    source: msg.id.clone(),
                    stmt_index: i as u32,
                    origin: body.origin.clone(),
                    origin_record_id: rec.id,
                    sql: rec.sql.clone(),
                    outcome,
                },
            )?;
        }
        if denied > 0 && denied == stmts.len() {
            let detail = format!("{} statements denied for origin {}", denied, body.origin);
            self.store
                .record_dead_letter(t, dead_letter(msg, DeadLetterReason::PermissionDenied, detail))?;
        }
        if self.role == Role::Central && !applied.is_empty() {
            let entries = applied
                .iter()
                .map(|r| (r.sql.clone(), Some((body.origin.clone(), r.id))))
                .collect();
            self.register_entries(t, entries)?;
        }
        let n_applied = applied.len();
        let all_denied = denied > 0 && denied == stmts.len();
        let origin = body.origin.clone();
        let outcome = self.finish(
            t,
            Some(origin.clone()),
            writes,
            |r| {
                r.applied += n_applied;
                r.skipped += denied;
                if all_denied {
                    r.dead_lettered += 1;
                }
            },
            report,
        )?;
        if let Attempt::Done = outcome {
            log::debug!("{}: applied {n_applied} statements from {origin} via {}", self.id, msg.id);
        }
        Ok(outcome)
    }

    fn finish(
        &mut self,
        t: TxnId,
        origin: Option<NodeId>,
        writes: Vec<(String, Vec<Value>)>,
        count: impl FnOnce(&mut ApplyReport),
        report: &mut ApplyReport,
    ) -> Result<Attempt> {
        match self.commit(t)? {
            TxnOutcome::Committed => {
                count(report);
                if let Some(origin) = origin {
                    for (table, keys) in &writes {
                        self.conflicts.observe(&origin, table, keys);
                    }
                }
                Ok(Attempt::Done)
            }
            TxnOutcome::Aborted => Ok(Attempt::Aborted),
        }
    }

    /// Consumes a message that failed too often, recording each statement as
    /// FAILED. Returns false if that transaction was refused too.
    fn fail_message(&mut self, msg: &Message, detail: String, report: &mut ApplyReport) -> Result<bool> {
        let t = self.begin(TxnMode::External).txn_id;
        let step = (|| -> Result<()> {
            self.receive(Some(t), SYNC_QUEUE, ReceiveMode::Remove)?;
            self.enlist(t, Resource::Store)?;
            if let Ok(body) = SyncBody::decode(&msg.body) {
                for (i, rec) in body.records.iter().enumerate() {
                    self.store.record_applied(
                        t,
                        AppliedLogEntry {
                            source: msg.id.clone(),
                            stmt_index: i as u32,
                            origin: body.origin.clone(),
                            origin_record_id: rec.id,
                            sql: rec.sql.clone(),
                            outcome: ApplyOutcome::Failed,
                        },
                    )?;
                }
            }
            self.store
                .record_dead_letter(t, dead_letter(msg, DeadLetterReason::ExecFail, detail))?;
            Ok(())
        })();
        if let Err(e) = step {
            let _ = self.abort(t);
            return match e {
                Error::Store(_) => Ok(false),
                e => Err(e),
            };
        }
        log::warn!("{}: sync message {} dead-lettered after {MAX_APPLY_ATTEMPTS} attempts", self.id, msg.id);
        match self.commit(t)? {
            TxnOutcome::Committed => {
                report.failed += SyncBody::decode(&msg.body).map_or(0, |b| b.records.len());
                report.dead_lettered += 1;
                Ok(true)
            }
            TxnOutcome::Aborted => Ok(false),
        }
    }

    /// Ships PENDING outbox records: branches to central, central to every
    /// branch except the statement's origin.
    pub fn dispatch(&mut self) -> Result<DispatchReport> {
        self.dispatch_requested = false;
        self.dispatch_runs += 1;
        let mut report = DispatchReport::default();
        let pending = self.store.pending_records();
        let mut batches: Vec<Vec<crate::store::QueryTableRecord>> = Vec::new();
        for r in pending {
            match batches.last_mut() {
                Some(b) if b.len() < MAX_BATCH && b[0].origin == r.origin => b.push(r),
                _ => batches.push(vec![r]),
            }
        }
        for batch in batches {
            let origin = batch[0].origin.clone();
            let targets: Vec<NodeId> = match self.role {
                Role::Branch => vec![self.topo.central().clone()],
                Role::Central => self.topo.branches().filter(|b| **b != origin).cloned().collect(),
            };
            let body = SyncBody {
                origin,
                schema_version: SCHEMA_VERSION,
                records: batch
                    .iter()
                    .map(|r| SyncRecord { id: r.origin_record_id, sql: r.sql.clone() })
                    .collect(),
            }
            .encode();
            let t = self.begin(TxnMode::External).txn_id;
            let step = (|| -> Result<()> {
                for target in &targets {
                    let dest = QueueRef::new(target.clone(), SYNC_QUEUE, true);
                    self.send_in(t, &dest, MessageKind::Sync, body.clone(), true)?;
                }
                for r in &batch {
                    self.mark_dispatched(t, r.record_id)?;
                }
                Ok(())
            })();
            if let Err(e) = step {
                let _ = self.abort(t);
                match e {
                    Error::Queue(_) | Error::Store(_) => {
                        log::debug!("{}: dispatch deferred: {e}", self.id);
                        self.dispatch_requested = true;
                        report.failed_batches += 1;
                        break;
                    }
                    e => return Err(e),
                }
            }
            match self.commit(t)? {
                TxnOutcome::Committed => {
                    report.batches += 1;
                    report.messages_sent += targets.len();
                    report.records_dispatched += batch.len();
                }
                TxnOutcome::Aborted => {
                    self.dispatch_requested = true;
                    report.failed_batches += 1;
                    break;
                }
            }
        }
        Ok(report)
    }
}

fn dead_letter(msg: &Message, reason: DeadLetterReason, detail: String) -> DeadLetterEntry {
    DeadLetterEntry { source: msg.id.clone(), reason, detail, body: msg.body.clone() }
}
