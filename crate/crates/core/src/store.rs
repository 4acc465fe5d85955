//! Minimal relational store executing the SQL subset, plus the query table
//! (outbox) of executed statements waiting for dispatch, the applied log of
//! replicated statements and the dead-letter list.
//!
//! The store admits one writer transaction at a time. The writer's changes
//! live in a row-level overlay until the coordinator applies the prepared
//! effects; readers only ever see committed state.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dtx::TxnId;
use crate::queue::MessageId;
use crate::sql::{Column, ColumnType, Predicate, Statement, Value};
use crate::sync::DeadLetterEntry;
use crate::topology::NodeId;

pub type Row = Vec<Value>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableState {
    pub name: String,
    pub columns: Vec<Column>,
    /// Rows keyed by their first column.
    pub rows: BTreeMap<Value, Row>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RecordId(pub u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RecordStatus {
    Pending,
    Dispatched,
}

/// One row of the query table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryTableRecord {
    pub record_id: RecordId,
    pub sql: String,
    pub origin_txn: TxnId,
    pub status: RecordStatus,
    pub created_at: u64,
    /// Node the statement was first executed on. Central re-registers
    /// statements it applied on behalf of a branch so they fan out.
    pub origin: NodeId,
    /// Record id on `origin`; equals `record_id` for local statements.
    pub origin_record_id: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ApplyOutcome {
    Applied,
    SkippedPermission,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppliedLogEntry {
    pub source: MessageId,
    pub stmt_index: u32,
    pub origin: NodeId,
    pub origin_record_id: u64,
    pub sql: String,
    pub outcome: ApplyOutcome,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StoreEffect {
    CreateTable { table: String, columns: Vec<Column> },
    Put { table: String, row: Row },
    Delete { table: String, key: Value },
    Outbox(QueryTableRecord),
    MarkDispatched(RecordId),
    Applied(AppliedLogEntry),
    DeadLetter(DeadLetterEntry),
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum StoreError {
    #[error("no such table {0}")]
    NoSuchTable(String),
    #[error("table {0} already exists")]
    TableExists(String),
    #[error("duplicate primary key {key} in {table}")]
    DuplicateKey { table: String, key: String },
    #[error("type mismatch for column {column}: expected {expected}")]
    TypeMismatch { column: String, expected: ColumnType },
    #[error("column mismatch: {0}")]
    ColumnMismatch(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("record {0:?} is not pending")]
    NotPending(RecordId),
    #[error("no such record {0:?}")]
    NoSuchRecord(RecordId),
    #[error("store is locked by transaction {0:?}")]
    Busy(TxnId),
    #[error("transaction {0:?} does not hold the store")]
    NotEnlisted(TxnId),
}

/// Result of one executed statement.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExecResult {
    pub rows_affected: usize,
    /// Primary keys written, for conflict detection.
    pub keys: Vec<Value>,
}

#[derive(Debug, Default)]
struct WriterTxn {
    txn: TxnId,
    created: BTreeMap<String, Vec<Column>>,
    rows: BTreeMap<String, BTreeMap<Value, Option<Row>>>,
    outbox: Vec<QueryTableRecord>,
    dispatched: BTreeSet<RecordId>,
    applied: Vec<AppliedLogEntry>,
    dead_letters: Vec<DeadLetterEntry>,
    next_record_id: u64,
}

#[derive(Debug, Default)]
pub struct Store {
    tables: BTreeMap<String, TableState>,
    outbox: BTreeMap<RecordId, QueryTableRecord>,
    next_record_id: u64,
    applied: Vec<AppliedLogEntry>,
    applied_keys: BTreeSet<(MessageId, u32)>,
    dead_letters: Vec<DeadLetterEntry>,
    writer: Option<WriterTxn>,
}

fn check_type(column: &Column, v: &Value) -> Result<(), StoreError> {
    if v.column_type() == column.ty {
        Ok(())
    } else {
        Err(StoreError::TypeMismatch { column: column.name.clone(), expected: column.ty })
    }
}

fn column_index(columns: &[Column], name: &str) -> Result<usize, StoreError> {
    columns
        .iter()
        .position(|c| c.name == name)
        .ok_or_else(|| StoreError::ColumnMismatch(format!("unknown column {name}")))
}

fn resolve_predicate(
    columns: &[Column],
    predicate: &Predicate,
) -> Result<Vec<(usize, Value)>, StoreError> {
    predicate
        .iter()
        .map(|(c, v)| {
            let i = column_index(columns, c)?;
            check_type(&columns[i], v)?;
            Ok((i, v.clone()))
        })
        .collect()
}

fn matches(row: &Row, terms: &[(usize, Value)]) -> bool {
    terms.iter().all(|(i, v)| &row[*i] == v)
}

impl Store {
    pub fn new() -> Self {
        Self { next_record_id: 1, ..Default::default() }
    }

    pub fn writer(&self) -> Option<TxnId> {
        self.writer.as_ref().map(|w| w.txn)
    }

    /// Takes the single writer slot for `txn`.
    pub fn begin_write(&mut self, txn: TxnId) -> Result<(), StoreError> {
        match &self.writer {
            Some(w) if w.txn == txn => Ok(()),
            Some(w) => Err(StoreError::Busy(w.txn)),
            None => {
                self.writer = Some(WriterTxn {
                    txn,
                    next_record_id: self.next_record_id,
                    ..Default::default()
                });
                Ok(())
            }
        }
    }

    fn writer_mut(&mut self, txn: TxnId) -> Result<&mut WriterTxn, StoreError> {
        match self.writer.as_mut() {
            Some(w) if w.txn == txn => Ok(w),
            _ => Err(StoreError::NotEnlisted(txn)),
        }
    }

    fn schema(&self, w: &WriterTxn, table: &str) -> Result<Vec<Column>, StoreError> {
        if let Some(cols) = w.created.get(table) {
            return Ok(cols.clone());
        }
        self.tables
            .get(table)
            .map(|t| t.columns.clone())
            .ok_or_else(|| StoreError::NoSuchTable(table.to_string()))
    }

    fn visible_row(&self, w: &WriterTxn, table: &str, key: &Value) -> Option<Row> {
        if let Some(slot) = w.rows.get(table).and_then(|r| r.get(key)) {
            return slot.clone();
        }
        self.tables.get(table).and_then(|t| t.rows.get(key).cloned())
    }

    fn candidate_rows(&self, w: &WriterTxn, table: &str, terms: &[(usize, Value)]) -> Vec<Row> {
        let rows = match terms.iter().find(|(i, _)| *i == 0) {
            Some((_, key)) => self.visible_row(w, table, key).into_iter().collect(),
            None => self.visible_rows(w, table),
        };
        rows.into_iter().filter(|r| matches(r, terms)).collect()
    }

    fn visible_rows(&self, w: &WriterTxn, table: &str) -> Vec<Row> {
        let mut keys: BTreeSet<&Value> = BTreeSet::new();
        if let Some(t) = self.tables.get(table) {
            keys.extend(t.rows.keys());
        }
        if let Some(o) = w.rows.get(table) {
            keys.extend(o.keys());
        }
        keys.into_iter()
            .filter_map(|k| self.visible_row(w, table, k))
            .collect()
    }

    /// Executes `stmt` inside the writer transaction. A failing statement
    /// leaves the transaction's earlier changes untouched.
    pub fn execute(&mut self, txn: TxnId, stmt: &Statement) -> Result<ExecResult, StoreError> {
        let w = match &self.writer {
            Some(w) if w.txn == txn => w,
            Some(w) => return Err(StoreError::Busy(w.txn)),
            None => return Err(StoreError::NotEnlisted(txn)),
        };
        let (changes, created) = self.plan(w, stmt)?;
        let w = self.writer.as_mut().expect("writer checked above");
        if let Some((table, cols)) = created {
            w.created.insert(table, cols);
        }
        let mut keys = Vec::with_capacity(changes.len());
        for (table, key, row) in changes {
            w.rows.entry(table).or_default().insert(key.clone(), row);
            keys.push(key);
        }
        Ok(ExecResult { rows_affected: keys.len(), keys })
    }

    #[allow(clippy::type_complexity)]
    fn plan(
        &self,
        w: &WriterTxn,
        stmt: &Statement,
    ) -> Result<(Vec<(String, Value, Option<Row>)>, Option<(String, Vec<Column>)>), StoreError>
    {
        match stmt {
            Statement::CreateTable { table, columns } => {
                if w.created.contains_key(table) || self.tables.contains_key(table) {
                    return Err(StoreError::TableExists(table.clone()));
                }
                let mut names = BTreeSet::new();
                if columns.iter().any(|c| !names.insert(&c.name)) {
                    return Err(StoreError::ColumnMismatch("duplicate column name".into()));
                }
                Ok((Vec::new(), Some((table.clone(), columns.clone()))))
            }
            Statement::Insert { table, columns, values } => {
                let schema = self.schema(w, table)?;
                if values.len() != schema.len() {
                    return Err(StoreError::ColumnMismatch(format!(
                        "{} values for {} columns",
                        values.len(),
                        schema.len()
                    )));
                }
                let row: Row = match columns {
                    None => values.clone(),
                    Some(cols) => {
                        if cols.len() != schema.len() {
                            return Err(StoreError::ColumnMismatch(
                                "column list must name every column".into(),
                            ));
                        }
                        let mut slots: Vec<Option<Value>> = vec![None; schema.len()];
                        for (c, v) in cols.iter().zip(values) {
                            let i = column_index(&schema, c)?;
                            if slots[i].replace(v.clone()).is_some() {
                                return Err(StoreError::ColumnMismatch(format!(
                                    "column {c} listed twice"
                                )));
                            }
                        }
                        slots.into_iter().map(|s| s.expect("all slots filled")).collect()
                    }
                };
                for (c, v) in schema.iter().zip(&row) {
                    check_type(c, v)?;
                }
                let key = row[0].clone();
                if self.visible_row(w, table, &key).is_some() {
                    return Err(StoreError::DuplicateKey { table: table.clone(), key: key.render() });
                }
                Ok((vec![(table.clone(), key, Some(row))], None))
            }
            Statement::Update { table, assignments, predicate } => {
                let schema = self.schema(w, table)?;
                let mut sets = Vec::new();
                for (c, v) in assignments {
                    let i = column_index(&schema, c)?;
                    if i == 0 {
                        return Err(StoreError::Unsupported("updating the primary key".into()));
                    }
                    check_type(&schema[i], v)?;
                    sets.push((i, v.clone()));
                }
                let terms = resolve_predicate(&schema, predicate)?;
                let changes = self
                    .candidate_rows(w, table, &terms)
                    .into_iter()
                    .map(|mut r| {
                        for (i, v) in &sets {
                            r[*i] = v.clone();
                        }
                        (table.clone(), r[0].clone(), Some(r))
                    })
                    .collect();
                Ok((changes, None))
            }
            Statement::Delete { table, predicate } => {
                let schema = self.schema(w, table)?;
                let terms = resolve_predicate(&schema, predicate)?;
                let changes = self
                    .candidate_rows(w, table, &terms)
                    .into_iter()
                    .map(|r| (table.clone(), r[0].clone(), None))
                    .collect();
                Ok((changes, None))
            }
        }
    }

    /// Appends PENDING outbox rows, returning their record ids.
    pub fn register(
        &mut self,
        txn: TxnId,
        node: &NodeId,
        entries: Vec<(String, Option<(NodeId, u64)>)>,
        created_at: u64,
    ) -> Result<Vec<RecordId>, StoreError> {
        let w = self.writer_mut(txn)?;
        let mut ids = Vec::with_capacity(entries.len());
        for (sql, origin) in entries {
            let id = RecordId(w.next_record_id);
            w.next_record_id += 1;
            let (origin, origin_record_id) = origin.unwrap_or_else(|| (node.clone(), id.0));
            w.outbox.push(QueryTableRecord {
                record_id: id,
                sql,
                origin_txn: txn,
                status: RecordStatus::Pending,
                created_at,
                origin,
                origin_record_id,
            });
            ids.push(id);
        }
        Ok(ids)
    }

    pub fn mark_dispatched(&mut self, txn: TxnId, id: RecordId) -> Result<(), StoreError> {
        let status = match self.outbox.get(&id) {
            Some(r) => Some(r.status),
            None => self
                .writer
                .as_ref()
                .and_then(|w| w.outbox.iter().find(|r| r.record_id == id))
                .map(|r| r.status),
        };
        let w = self.writer_mut(txn)?;
        match status {
            None => Err(StoreError::NoSuchRecord(id)),
            Some(RecordStatus::Dispatched) => Err(StoreError::NotPending(id)),
            Some(RecordStatus::Pending) if !w.dispatched.insert(id) => {
                Err(StoreError::NotPending(id))
            }
            Some(RecordStatus::Pending) => Ok(()),
        }
    }

    pub fn record_applied(&mut self, txn: TxnId, entry: AppliedLogEntry) -> Result<(), StoreError> {
        self.writer_mut(txn)?.applied.push(entry);
        Ok(())
    }

    pub fn record_dead_letter(
        &mut self,
        txn: TxnId,
        entry: DeadLetterEntry,
    ) -> Result<(), StoreError> {
        self.writer_mut(txn)?.dead_letters.push(entry);
        Ok(())
    }

    /// Redo effects of the writer transaction, in apply order.
    pub fn prepare(&self, txn: TxnId) -> Result<Vec<StoreEffect>, StoreError> {
        let w = match self.writer.as_ref() {
            Some(w) if w.txn == txn => w,
            _ => return Err(StoreError::NotEnlisted(txn)),
        };
        let mut out = Vec::new();
        for (table, columns) in &w.created {
            out.push(StoreEffect::CreateTable { table: table.clone(), columns: columns.clone() });
        }
        for (table, rows) in &w.rows {
            for (key, row) in rows {
                out.push(match row {
                    Some(row) => StoreEffect::Put { table: table.clone(), row: row.clone() },
                    None => StoreEffect::Delete { table: table.clone(), key: key.clone() },
                });
            }
        }
        out.extend(w.outbox.iter().cloned().map(StoreEffect::Outbox));
        out.extend(w.dispatched.iter().copied().map(StoreEffect::MarkDispatched));
        out.extend(w.applied.iter().cloned().map(StoreEffect::Applied));
        out.extend(w.dead_letters.iter().cloned().map(StoreEffect::DeadLetter));
        Ok(out)
    }

    /// Drops the writer slot (after commit or abort).
    pub fn release(&mut self, txn: TxnId) {
        if self.writer() == Some(txn) {
            self.writer = None;
        }
    }

    /// Applies committed effects. Used both live and during log replay.
    pub fn apply(&mut self, effects: &[StoreEffect]) {
        for e in effects {
            match e {
                StoreEffect::CreateTable { table, columns } => {
                    self.tables.entry(table.clone()).or_insert_with(|| TableState {
                        name: table.clone(),
                        columns: columns.clone(),
                        rows: BTreeMap::new(),
                    });
                }
                StoreEffect::Put { table, row } => {
                    if let Some(t) = self.tables.get_mut(table) {
                        t.rows.insert(row[0].clone(), row.clone());
                    }
                }
                StoreEffect::Delete { table, key } => {
                    if let Some(t) = self.tables.get_mut(table) {
                        t.rows.remove(key);
                    }
                }
                StoreEffect::Outbox(r) => {
                    self.next_record_id = self.next_record_id.max(r.record_id.0 + 1);
                    self.outbox.insert(r.record_id, r.clone());
                }
                StoreEffect::MarkDispatched(id) => {
                    if let Some(r) = self.outbox.get_mut(id) {
                        r.status = RecordStatus::Dispatched;
                    }
                }
                StoreEffect::Applied(entry) => {
                    if self.applied_keys.insert((entry.source.clone(), entry.stmt_index)) {
                        self.applied.push(entry.clone());
                    }
                }
                StoreEffect::DeadLetter(d) => self.dead_letters.push(d.clone()),
            }
        }
    }

    pub fn tables(&self) -> &BTreeMap<String, TableState> {
        &self.tables
    }

    pub fn table(&self, name: &str) -> Option<&TableState> {
        self.tables.get(name)
    }

    pub fn pending_records(&self) -> Vec<QueryTableRecord> {
        self.outbox
            .values()
            .filter(|r| r.status == RecordStatus::Pending)
            .cloned()
            .collect()
    }

    pub fn records(&self) -> impl Iterator<Item = &QueryTableRecord> {
        self.outbox.values()
    }

    pub fn applied_log(&self) -> &[AppliedLogEntry] {
        &self.applied
    }

    pub fn dead_letters(&self) -> &[DeadLetterEntry] {
        &self.dead_letters
    }

    /// SHA-256 over `table\x1fkey\x1fcol=value...` rows joined by `\x1e`,
    /// tables and rows in sorted order. `filter` restricts the tables.
    pub fn state_digest(&self, filter: Option<&[&str]>) -> String {
        let mut rows = Vec::new();
        for (name, t) in &self.tables {
            if filter.is_some_and(|f| !f.contains(&name.as_str())) {
                continue;
            }
            for (key, row) in &t.rows {
                let mut line = format!("{name}\x1f{}", key.render());
                for (c, v) in t.columns.iter().zip(row) {
                    line.push('\x1f');
                    line.push_str(&c.name);
                    line.push('=');
                    line.push_str(&v.render());
                }
                rows.push(line);
            }
        }
        hex::encode(Sha256::digest(rows.join("\x1e").as_bytes()))
    }

    /// Tab separated dump of one table, header first.
    pub fn dump_table(&self, name: &str) -> Option<String> {
        let t = self.tables.get(name)?;
        let mut out = t
            .columns
            .iter()
            .map(|c| c.name.as_str())
            .collect::<Vec<_>>()
            .join("\t");
        out.push('\n');
        for row in t.rows.values() {
            out.push_str(&row.iter().map(Value::render).collect::<Vec<_>>().join("\t"));
            out.push('\n');
        }
        Some(out)
    }
}
