//! Crash-point sweep over a single replicated statement.
//!
//! Three nodes (`C`, `B1`, `B2`) exchange frames through an in-process
//! network driven by a seeded RNG that shuffles and duplicates deliveries.
//! `B1` executes one INSERT. For every durable write that statement causes
//! on any node, a trial arms a crash at that write, reopens the node from
//! its surviving bytes, checks the all-or-nothing invariant on every node,
//! and then runs the network to quiet to check exactly-once delivery.

use std::collections::BTreeMap;
use std::sync::Arc;

use qsync_core::queue::{Direction, JournalFilter, JournalOutcome, Message, MessageKind, SYNC_QUEUE as SYNC_IN};
use qsync_core::store::{ApplyOutcome, RecordStatus};
use qsync_core::sync::converged;
use qsync_core::wal::{CrashPlan, MemStorage};
use qsync_core::{Node, NodeConfig, NodeId, TopologyConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::node;

pub const INSERT: &str = "INSERT INTO t VALUES (1, 'crash')";
const NODES: [&str; 3] = ["C", "B1", "B2"];

pub struct CrashNet {
    topo: Arc<TopologyConfig>,
    pub nodes: BTreeMap<NodeId, Node>,
    storages: BTreeMap<NodeId, MemStorage>,
    pub now: u64,
    rng: ChaCha8Rng,
    pub crashes: u32,
    /// Sent journal entries and accepted frames left by the setup phase.
    base: BTreeMap<NodeId, (usize, usize)>,
}

impl CrashNet {
    /// Three nodes that already share the table `t`.
    pub fn setup(seed: u64) -> CrashNet {
        let topo = Arc::new(TopologyConfig::star("C", &["B1", "B2"]).unwrap());
        let mut net = CrashNet {
            topo,
            nodes: BTreeMap::new(),
            storages: BTreeMap::new(),
            now: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            crashes: 0,
            base: BTreeMap::new(),
        };
        for id in NODES {
            let mem = MemStorage::new();
            net.storages.insert(node(id), mem.clone());
            net.open(&node(id), mem);
        }
        net.nodes.get_mut(&node("C")).unwrap().client_exec("CREATE TABLE t (id INT, v TEXT)").unwrap();
        net.run().unwrap();
        net.base = net.nodes.iter().map(|(id, n)| (id.clone(), (sent_entries(n), accepted_frames(n)))).collect();
        net
    }

    fn open(&mut self, id: &NodeId, storage: MemStorage) {
        let cfg = NodeConfig::new(id.clone(), self.topo.clone());
        let (n, _) = Node::open(cfg, Box::new(storage)).expect("recovery must succeed");
        self.nodes.insert(id.clone(), n);
    }

    /// Reopens `id` on the same bytes with a crash armed at its `k`-th write.
    pub fn arm(&mut self, id: &NodeId, k: u64, torn_bytes: usize) {
        let mem = self.storages[id].with_crash(CrashPlan { after_writes: k, torn_bytes });
        self.open(id, mem);
    }

    fn recover(&mut self, id: &NodeId) -> Result<(), String> {
        self.crashes += 1;
        let mem = self.storages[id].reopen();
        self.open(id, mem);
        check_invariant(self).map_err(|e| format!("after recovering {id}: {e}"))
    }

    pub fn writes(&self) -> BTreeMap<NodeId, u64> {
        self.nodes.iter().map(|(id, n)| (id.clone(), n.wal_writes())).collect()
    }

    pub fn exec(&mut self) -> Result<(), String> {
        let b1 = node("B1");
        let r = self.nodes.get_mut(&b1).unwrap().client_exec(INSERT);
        if r.is_err() {
            if !self.nodes[&b1].is_halted() {
                return Err(format!("exec failed without a crash: {r:?}"));
            }
            self.recover(&b1)?;
        }
        Ok(())
    }

    /// Delivers frames in a shuffled order with duplicates until every node
    /// is idle. Crashed nodes are recovered on the spot.
    pub fn run(&mut self) -> Result<(), String> {
        for _ in 0..100_000 {
            let mut inflight: Vec<(NodeId, NodeId, Message)> = Vec::new();
            let ids: Vec<NodeId> = self.nodes.keys().cloned().collect();
            for id in &ids {
                match self.nodes.get_mut(id).unwrap().poll(self.now) {
                    Ok(out) => inflight.extend(out.into_iter().map(|(to, m)| (id.clone(), to, m))),
                    Err(_) => self.recover(id)?,
                }
            }
            while !inflight.is_empty() {
                inflight.shuffle(&mut self.rng);
                let (from, to, m) = inflight.pop().unwrap();
                if self.rng.gen_bool(0.2) {
                    inflight.push((from.clone(), to.clone(), m.clone()));
                }
                match self.nodes.get_mut(&to).unwrap().handle_frame(&from, m, self.now) {
                    Ok(replies) => inflight.extend(replies.into_iter().map(|(d, r)| (to.clone(), d, r))),
                    Err(_) => self.recover(&to)?,
                }
            }
            if self.nodes.values().all(|n| n.is_idle()) {
                return Ok(());
            }
            let next = self.nodes.values().filter_map(|n| n.next_deadline()).min();
            self.now = next.map_or(self.now + 1, |t| t.max(self.now + 1));
        }
        Err("network did not quiesce".into())
    }
}

fn rows(n: &Node) -> usize {
    n.store().table("t").map_or(0, |t| t.rows.len())
}

fn sent_entries(n: &Node) -> usize {
    n.journal_list(&JournalFilter { direction: Some(Direction::Sent), queue: Some(SYNC_IN.into()), kind: Some(MessageKind::Sync) })
        .iter()
        .filter(|e| e.outcome == JournalOutcome::Committed)
        .count()
}

fn accepted_frames(n: &Node) -> usize {
    n.queues().accept_counts().len()
}

/// Statement from B1 seen by a receiver: consumed, applied, row written and
/// (at central) re-registered for fan-out happen together or not at all.
fn check_receiver(net: &CrashNet, id: &str) -> Result<(), String> {
    let n = &net.nodes[&node(id)];
    let (base_sent, base_accepted) = net.base[n.id()];
    let accepted = accepted_frames(n) - base_accepted;
    if accepted > 1 || n.queues().accept_counts().values().any(|c| *c != 1) {
        return Err(format!("{id}: {accepted} new frames accepted, counts {:?}", n.queues().accept_counts()));
    }
    let consumed = accepted == 1 && n.queues().depth(SYNC_IN) == 0;
    let applied: Vec<_> = n.store().applied_log().iter().filter(|e| e.origin == node("B1")).collect();
    if applied.len() > 1 || applied.iter().any(|e| e.outcome != ApplyOutcome::Applied) {
        return Err(format!("{}: applied log {applied:?}", n.id()));
    }
    let row = rows(n);
    let facts = [("consumed", consumed), ("applied", applied.len() == 1), ("row", row == 1)];
    let mut facts = facts.to_vec();
    if n.id().as_str() == "C" {
        let fwd: Vec<_> = n.store().records().filter(|r| r.origin == node("B1")).collect();
        if fwd.len() > 1 {
            return Err(format!("C registered {} forwards", fwd.len()));
        }
        facts.push(("forwarded", fwd.len() == 1));
        let dispatched = fwd.iter().any(|r| r.status == RecordStatus::Dispatched);
        if dispatched != (sent_entries(n) - base_sent == 1) {
            return Err("C dispatch status disagrees with its send journal".into());
        }
    }
    if facts.iter().any(|f| f.1 != facts[0].1) {
        return Err(format!("{}: partial state {facts:?}", n.id()));
    }
    Ok(())
}

pub fn check_invariant(net: &CrashNet) -> Result<(), String> {
    let b1 = &net.nodes[&node("B1")];
    let recs: Vec<_> = b1.store().records().collect();
    if recs.len() > 1 || (recs.len() == 1) != (rows(b1) == 1) {
        return Err(format!("B1: {} records, {} rows", recs.len(), rows(b1)));
    }
    let sent = sent_entries(b1) - net.base[b1.id()].0;
    let dispatched = recs.iter().any(|r| r.status == RecordStatus::Dispatched);
    if dispatched != (sent == 1) || sent > 1 {
        return Err("B1 dispatch status disagrees with its send journal".into());
    }
    check_receiver(net, "C")?;
    check_receiver(net, "B2")
}

/// After the run: everyone agrees with B1 and nothing was applied twice.
pub fn check_final(net: &CrashNet) -> Result<(), String> {
    check_invariant(net)?;
    let nodes: Vec<&Node> = net.nodes.values().collect();
    if !converged(&nodes, None).map_err(|e| e.to_string())? {
        return Err("digests differ".into());
    }
    let expect = rows(&net.nodes[&node("B1")]);
    for n in net.nodes.values() {
        if rows(n) != expect {
            return Err(format!("{} has {} rows, B1 has {expect}", n.id(), rows(n)));
        }
        if n.store().applied_log().iter().any(|e| &e.origin == n.id()) {
            return Err(format!("{} re-applied its own statement", n.id()));
        }
    }
    Ok(())
}

#[derive(Debug, Default)]
pub struct SweepReport {
    /// Distinct (node, write index) crash points.
    pub points: usize,
    pub trials: usize,
    pub violations: Vec<String>,
}

pub fn sweep(seeds: u64) -> SweepReport {
    let mut report = SweepReport::default();
    let mut points = std::collections::BTreeSet::new();
    for seed in 0..seeds {
        let mut base = CrashNet::setup(seed);
        let before = base.writes();
        base.exec().unwrap();
        base.run().unwrap();
        check_final(&base).unwrap();
        let after = base.writes();
        let mut torn = ChaCha8Rng::seed_from_u64(seed ^ 0xC0FFEE);
        for id in NODES {
            let id = node(id);
            for k in 0..after[&id] - before[&id] {
                let mut net = CrashNet::setup(seed);
                net.arm(&id, k, torn.gen_range(0..48));
                let outcome = net.exec().and_then(|_| net.run()).and_then(|_| check_final(&net));
                report.trials += 1;
                if net.crashes == 0 {
                    report.violations.push(format!("seed {seed} {id}#{k}: crash never fired"));
                }
                points.insert((id.clone(), k));
                if let Err(e) = outcome {
                    report.violations.push(format!("seed {seed} {id}#{k}: {e}"));
                }
            }
        }
    }
    report.points = points.len();
    report
}
