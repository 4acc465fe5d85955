//! Test oracles and workload generators shared by the integration tests.
//!
//! `Oracle` is a deliberately naive interpreter: rows live in a plain vector
//! and every statement is a linear scan. It works on `GenStmt`, the
//! generator's own statement type, so it never touches the crate's parser
//! or store.

#![allow(dead_code)]

pub mod crash;

use std::cmp::Ordering;

use qsync_core::sim::{Action, LinkConfig, LinkOp, SimConfig, Simulator};
use qsync_core::{NodeId, TopologyConfig};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum OVal {
    Int(i64),
    Text(String),
}

impl OVal {
    fn sql(&self) -> String {
        match self {
            OVal::Int(i) => i.to_string(),
            OVal::Text(s) => format!("'{}'", s.replace('\'', "''")),
        }
    }

    fn raw(&self) -> String {
        match self {
            OVal::Int(i) => i.to_string(),
            OVal::Text(s) => s.clone(),
        }
    }

    fn is_int(&self) -> bool {
        matches!(self, OVal::Int(_))
    }

    fn cmp_key(&self, other: &OVal) -> Ordering {
        match (self, other) {
            (OVal::Int(a), OVal::Int(b)) => a.cmp(b),
            (OVal::Text(a), OVal::Text(b)) => a.as_bytes().cmp(b.as_bytes()),
            (OVal::Int(_), OVal::Text(_)) => Ordering::Less,
            (OVal::Text(_), OVal::Int(_)) => Ordering::Greater,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum GenStmt {
    Create { table: String, cols: Vec<(String, bool)> },
    Insert { table: String, cols: Option<Vec<String>>, vals: Vec<OVal> },
    Update { table: String, sets: Vec<(String, OVal)>, pred: Vec<(String, OVal)> },
    Delete { table: String, pred: Vec<(String, OVal)> },
}

fn where_clause(pred: &[(String, OVal)]) -> String {
    pred.iter()
        .enumerate()
        .map(|(i, (c, v))| format!("{} {c} = {}", if i == 0 { " WHERE" } else { " AND" }, v.sql()))
        .collect()
}

impl GenStmt {
    pub fn to_sql(&self) -> String {
        match self {
            GenStmt::Create { table, cols } => format!(
                "CREATE TABLE {table} ({})",
                cols.iter()
                    .map(|(n, int)| format!("{n} {}", if *int { "INT" } else { "TEXT" }))
                    .collect::<Vec<_>>()
                    .join(", ")
            ),
            GenStmt::Insert { table, cols, vals } => format!(
                "INSERT INTO {table}{} VALUES ({})",
                cols.as_ref().map(|c| format!(" ({})", c.join(", "))).unwrap_or_default(),
                vals.iter().map(OVal::sql).collect::<Vec<_>>().join(", ")
            ),
            GenStmt::Update { table, sets, pred } => format!(
                "UPDATE {table} SET {}{}",
                sets.iter().map(|(c, v)| format!("{c} = {}", v.sql())).collect::<Vec<_>>().join(", "),
                where_clause(pred)
            ),
            GenStmt::Delete { table, pred } => format!("DELETE FROM {table}{}", where_clause(pred)),
        }
    }
}

#[derive(Clone, Debug)]
struct OTable {
    name: String,
    cols: Vec<(String, bool)>,
    rows: Vec<Vec<OVal>>,
}

#[derive(Clone, Debug, Default)]
pub struct Oracle {
    tables: Vec<OTable>,
}

impl Oracle {
    fn table(&self, name: &str) -> Option<usize> {
        self.tables.iter().position(|t| t.name == name)
    }

    fn col(t: &OTable, name: &str) -> Option<usize> {
        t.cols.iter().position(|(c, _)| c == name)
    }

    fn typed(t: &OTable, i: usize, v: &OVal) -> bool {
        t.cols[i].1 == v.is_int()
    }

    fn resolve(t: &OTable, pred: &[(String, OVal)]) -> Option<Vec<(usize, OVal)>> {
        pred.iter()
            .map(|(c, v)| {
                let i = Self::col(t, c)?;
                Self::typed(t, i, v).then(|| (i, v.clone()))
            })
            .collect()
    }

    /// Applies one statement; `None` means it failed and changed nothing.
    pub fn apply(&mut self, s: &GenStmt) -> Option<usize> {
        match s {
            GenStmt::Create { table, cols } => {
                if self.table(table).is_some() {
                    return None;
                }
                for (i, (a, _)) in cols.iter().enumerate() {
                    if cols[..i].iter().any(|(b, _)| a == b) {
                        return None;
                    }
                }
                self.tables.push(OTable { name: table.clone(), cols: cols.clone(), rows: Vec::new() });
                Some(0)
            }
            GenStmt::Insert { table, cols, vals } => {
                let ti = self.table(table)?;
                let t = &self.tables[ti];
                if vals.len() != t.cols.len() {
                    return None;
                }
                let row: Vec<OVal> = match cols {
                    None => vals.clone(),
                    Some(names) => {
                        if names.len() != t.cols.len() {
                            return None;
                        }
                        let mut slots: Vec<Option<OVal>> = vec![None; t.cols.len()];
                        for (n, v) in names.iter().zip(vals) {
                            let i = Self::col(t, n)?;
                            if slots[i].is_some() {
                                return None;
                            }
                            slots[i] = Some(v.clone());
                        }
                        slots.into_iter().collect::<Option<Vec<_>>>()?
                    }
                };
                if (0..row.len()).any(|i| !Self::typed(t, i, &row[i])) {
                    return None;
                }
                if t.rows.iter().any(|r| r[0] == row[0]) {
                    return None;
                }
                self.tables[ti].rows.push(row);
                Some(1)
            }
            GenStmt::Update { table, sets, pred } => {
                let ti = self.table(table)?;
                let t = &self.tables[ti];
                let mut idx = Vec::new();
                for (c, v) in sets {
                    let i = Self::col(t, c)?;
                    if i == 0 || !Self::typed(t, i, v) {
                        return None;
                    }
                    idx.push((i, v.clone()));
                }
                let terms = Self::resolve(t, pred)?;
                let mut n = 0;
                for r in &mut self.tables[ti].rows {
                    if terms.iter().all(|(i, v)| &r[*i] == v) {
                        for (i, v) in &idx {
                            r[*i] = v.clone();
                        }
                        n += 1;
                    }
                }
                Some(n)
            }
            GenStmt::Delete { table, pred } => {
                let ti = self.table(table)?;
                let terms = Self::resolve(&self.tables[ti], pred)?;
                let before = self.tables[ti].rows.len();
                self.tables[ti].rows.retain(|r| !terms.iter().all(|(i, v)| &r[*i] == v));
                Some(before - self.tables[ti].rows.len())
            }
        }
    }

    pub fn row_count(&self, table: &str) -> usize {
        self.table(table).map_or(0, |i| self.tables[i].rows.len())
    }

    /// SHA-256 over `table 0x1f key 0x1f col=value ...` lines joined by
    /// 0x1e; tables by name, rows by key.
    pub fn digest(&self) -> String {
        let mut tables: Vec<&OTable> = self.tables.iter().collect();
        tables.sort_by(|a, b| a.name.as_bytes().cmp(b.name.as_bytes()));
        let mut lines = Vec::new();
        for t in tables {
            let mut rows: Vec<&Vec<OVal>> = t.rows.iter().collect();
            rows.sort_by(|a, b| a[0].cmp_key(&b[0]));
            for r in rows {
                let mut line = format!("{}\u{1f}{}", t.name, r[0].raw());
                for ((c, _), v) in t.cols.iter().zip(r) {
                    line.push_str(&format!("\u{1f}{c}={}", v.raw()));
                }
                lines.push(line);
            }
        }
        let digest = Sha256::digest(lines.join("\u{1e}").as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub fn node(s: &str) -> NodeId {
    NodeId::new(s).unwrap()
}

pub fn text(rng: &mut impl Rng) -> String {
    const POOL: &[&str] = &["alpha", "o'neil", "x y", "", "Z", "it''s", "naïve", "42"];
    let mut s = POOL.choose(rng).unwrap().to_string();
    if rng.gen_bool(0.3) {
        s.push_str(&rng.gen_range(0..1000).to_string());
    }
    s
}

pub const ACCT_CREATE: &str = "CREATE TABLE acct (id INT, owner TEXT, bal INT)";

pub fn acct_create() -> GenStmt {
    GenStmt::Create {
        table: "acct".into(),
        cols: vec![("id".into(), true), ("owner".into(), false), ("bal".into(), true)],
    }
}

/// `n` statements on `acct` that all succeed, touching only keys in the
/// branch's own range.
pub fn branch_workload(rng: &mut impl Rng, branch: usize, n: usize) -> Vec<GenStmt> {
    let base = (branch as i64 + 1) * 1_000_000;
    let mut live: Vec<i64> = Vec::new();
    let mut next = base;
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let roll = rng.gen_range(0..10);
        let s = if live.is_empty() || roll < 5 {
            let id = next;
            next += 1;
            live.push(id);
            let vals = vec![OVal::Int(id), OVal::Text(text(rng)), OVal::Int(rng.gen_range(-500..500))];
            if rng.gen_bool(0.3) {
                GenStmt::Insert {
                    table: "acct".into(),
                    cols: Some(vec!["bal".into(), "id".into(), "owner".into()]),
                    vals: vec![vals[2].clone(), vals[0].clone(), vals[1].clone()],
                }
            } else {
                GenStmt::Insert { table: "acct".into(), cols: None, vals }
            }
        } else if roll < 8 {
            let id = *live.choose(rng).unwrap();
            let mut sets = vec![("bal".to_string(), OVal::Int(rng.gen_range(-10_000..10_000)))];
            if rng.gen_bool(0.5) {
                sets.push(("owner".into(), OVal::Text(text(rng))));
            }
            GenStmt::Update { table: "acct".into(), sets, pred: vec![("id".into(), OVal::Int(id))] }
        } else {
            let i = rng.gen_range(0..live.len());
            let id = live.swap_remove(i);
            GenStmt::Delete { table: "acct".into(), pred: vec![("id".into(), OVal::Int(id))] }
        };
        out.push(s);
    }
    out
}

/// Random script over a few tables, including statements that fail.
pub fn random_script(rng: &mut impl Rng, n: usize) -> Vec<GenStmt> {
    let tables = ["t1", "t2", "t3"];
    let col_names = ["k", "a", "b", "c"];
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let table = tables.choose(rng).unwrap().to_string();
        let val = |rng: &mut ChaCha8Rng, int: bool| {
            if int {
                OVal::Int(rng.gen_range(-3..6))
            } else {
                OVal::Text(["p", "q", "o'r", ""].choose(rng).unwrap().to_string())
            }
        };
        let mut r = ChaCha8Rng::seed_from_u64(rng.gen());
        let pred = |r: &mut ChaCha8Rng| {
            (0..r.gen_range(0..3))
                .map(|_| {
                    let c = col_names.choose(r).unwrap().to_string();
                    let int = r.gen_bool(0.7);
                    (c, val(r, int))
                })
                .collect::<Vec<_>>()
        };
        let s = match r.gen_range(0..12) {
            0 => {
                let mut cols = vec![("k".to_string(), r.gen_bool(0.8))];
                for c in &col_names[1..r.gen_range(2..5)] {
                    cols.push((c.to_string(), r.gen_bool(0.5)));
                }
                if r.gen_bool(0.05) {
                    cols.push(("k".into(), true));
                }
                GenStmt::Create { table, cols }
            }
            1..=5 => {
                let width = r.gen_range(2..5);
                let vals: Vec<OVal> = (0..width).map(|i| { let int = i == 0 || r.gen_bool(0.5); val(&mut r, int) }).collect();
                let cols = r.gen_bool(0.3).then(|| {
                    let mut c: Vec<String> = col_names[..width].iter().map(|s| s.to_string()).collect();
                    c.shuffle(&mut r);
                    c
                });
                GenStmt::Insert { table, cols, vals }
            }
            6..=8 => {
                let n_sets = r.gen_range(1..3);
                let sets = (0..n_sets)
                    .map(|_| {
                        let c = col_names.choose(&mut r).unwrap().to_string();
                        let int = r.gen_bool(0.5);
                        (c, val(&mut r, int))
                    })
                    .collect();
                GenStmt::Update { table, sets, pred: pred(&mut r) }
            }
            _ => GenStmt::Delete { table, pred: pred(&mut r) },
        };
        out.push(s);
    }
    out
}

pub const BRANCHES: usize = 5;
pub const STATEMENTS_PER_BRANCH: usize = 200;

pub fn five_branch_topology() -> TopologyConfig {
    TopologyConfig::star("C", &["B1", "B2", "B3", "B4", "B5"]).unwrap()
}

pub struct ConvergenceRun {
    pub sim: Simulator,
    pub workloads: Vec<Vec<GenStmt>>,
}

/// Five branches each run a 200-statement workload on their own key range
/// while every branch link is lossy, duplicating, reordering and toggled
/// offline on a schedule.
pub fn convergence_run(seed: u64) -> ConvergenceRun {
    let cfg = SimConfig { seed, max_time_ms: 600_000, default_link: LinkConfig::default(), restart_delay_ms: 100 };
    let mut sim = Simulator::new(five_branch_topology(), cfg).unwrap();
    let central = node("C");
    sim.client_exec(&central, ACCT_CREATE);
    sim.run_until_quiet().expect("schema distributes");

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let t0 = sim.now() + 100;
    let mut workloads = Vec::new();
    for b in 0..BRANCHES {
        let id = node(&format!("B{}", b + 1));
        sim.schedule(t0, Action::Link { a: id.clone(), b: central.clone(), op: LinkOp::Loss(0.05) });
        sim.schedule(t0, Action::Link { a: id.clone(), b: central.clone(), op: LinkOp::Dup(0.05) });
        sim.schedule(t0, Action::Link { a: id.clone(), b: central.clone(), op: LinkOp::Reorder(0.3) });
        sim.schedule(t0, Action::Link { a: id.clone(), b: central.clone(), op: LinkOp::Latency(20) });
        for cycle in 0..6u64 {
            let off = t0 + 700 * b as u64 + cycle * 6_000 + rng.gen_range(0..500);
            let on = off + rng.gen_range(800..3_000);
            sim.schedule(off, Action::Link { a: id.clone(), b: central.clone(), op: LinkOp::Offline });
            sim.schedule(on, Action::Link { a: id.clone(), b: central.clone(), op: LinkOp::Online });
        }
        let work = branch_workload(&mut rng, b, STATEMENTS_PER_BRANCH);
        let mut t = t0 + 1;
        for s in &work {
            t += rng.gen_range(20..300);
            sim.schedule(t, Action::ClientExec { node: id.clone(), sql: s.to_sql() });
        }
        workloads.push(work);
    }
    ConvergenceRun { sim, workloads }
}

/// Expected final state: the schema, then each branch's statements in
/// order. Key ranges are disjoint, so branch interleaving is irrelevant.
pub fn convergence_oracle(workloads: &[Vec<GenStmt>]) -> Oracle {
    let mut o = Oracle::default();
    o.apply(&acct_create()).unwrap();
    for w in workloads {
        for s in w {
            o.apply(s).expect("workload statements succeed");
        }
    }
    o
}
