//! Deterministic network simulator.
//!
//! Nodes run over in-memory logs and exchange encoded frames through
//! simulated links with configurable loss, duplication, reordering and
//! latency. Every random choice comes from a per-link ChaCha stream derived
//! from the seed, and events are ordered by `(time, insertion order)`, so a
//! seed and a script fully determine a run.
//!
//! Scenario scripts have one action per line:
//!
//! ```text
//! at 0 link B1 C loss 0.1
//! at 100 link B1 C offline
//! at 250 client B1 exec INSERT INTO t VALUES (1, 'x')
//! at 5000 link B1 C online
//! at 6000 restart B2
//! ```
//!
//! Link actions are `online`, `offline`, `loss <p>`, `dup <p>`,
//! `reorder <p>` and `latency <ms>`.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::error::Error;
use crate::frame;
use crate::mail::MailEnvelope;
use crate::node::{Node, NodeConfig};
use crate::queue::{LinkStatus, Message};
use crate::sync::{converged, PermissionPolicy};
use crate::topology::{NodeId, TopologyConfig};
use crate::wal::{CrashPlan, MemStorage};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LinkConfig {
    pub online: bool,
    pub loss: f64,
    pub dup: f64,
    /// Chance that a frame gets extra delay of up to one latency.
    pub reorder: f64,
    pub latency_ms: u64,
}

impl Default for LinkConfig {
    fn default() -> Self {
        LinkConfig { online: true, loss: 0.0, dup: 0.0, reorder: 0.0, latency_ms: 10 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LinkOp {
    Online,
    Offline,
    Loss(f64),
    Dup(f64),
    Reorder(f64),
    Latency(u64),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Action {
    Link { a: NodeId, b: NodeId, op: LinkOp },
    ClientExec { node: NodeId, sql: String },
    Restart { node: NodeId },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScriptEvent {
    pub at: u64,
    pub action: Action,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("scenario line {line}: {msg}")]
pub struct ScenarioError {
    pub line: usize,
    pub msg: String,
}

pub fn parse_scenario(text: &str) -> Result<Vec<ScriptEvent>, ScenarioError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| ScenarioError { line: i + 1, msg };
        let mut words = line.split_whitespace();
        if words.next() != Some("at") {
            return Err(err("expected `at <ms> ...`".into()));
        }
        let at: u64 = words
            .next()
            .and_then(|w| w.parse().ok())
            .ok_or_else(|| err("bad time".into()))?;
        let node = |w: Option<&str>| -> Result<NodeId, ScenarioError> {
            let w = w.ok_or_else(|| err("missing node".into()))?;
            NodeId::new(w).map_err(|e| err(e.to_string()))
        };
        let action = match words.next() {
            Some("link") => {
                let a = node(words.next())?;
                let b = node(words.next())?;
                let verb = words.next().ok_or_else(|| err("missing link action".into()))?;
                let arg = words.next();
                let rate = |arg: Option<&str>| -> Result<f64, ScenarioError> {
                    let r: f64 = arg
                        .and_then(|w| w.parse().ok())
                        .ok_or_else(|| err("bad rate".into()))?;
                    if (0.0..=1.0).contains(&r) {
                        Ok(r)
                    } else {
                        Err(err(format!("rate {r} outside [0, 1]")))
                    }
                };
                let op = match verb {
                    "online" => LinkOp::Online,
                    "offline" => LinkOp::Offline,
                    "loss" => LinkOp::Loss(rate(arg)?),
                    "dup" => LinkOp::Dup(rate(arg)?),
                    "reorder" => LinkOp::Reorder(rate(arg)?),
                    "latency" => LinkOp::Latency(
                        arg.and_then(|w| w.parse().ok())
                            .ok_or_else(|| err("bad latency".into()))?,
                    ),
                    other => return Err(err(format!("unknown link action {other}"))),
                };
                Action::Link { a, b, op }
            }
            Some("client") => {
                let n = node(words.next())?;
                if words.next() != Some("exec") {
                    return Err(err("expected `client <node> exec <sql>`".into()));
                }
                let sql = words.collect::<Vec<_>>().join(" ");
                if sql.is_empty() {
                    return Err(err("missing sql".into()));
                }
                Action::ClientExec { node: n, sql }
            }
            Some("restart") => Action::Restart { node: node(words.next())? },
            _ => return Err(err("expected link, client or restart".into())),
        };
        out.push(ScriptEvent { at, action });
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct SimConfig {
    pub seed: u64,
    pub max_time_ms: u64,
    pub default_link: LinkConfig,
    /// Downtime of a node after an injected crash.
    pub restart_delay_ms: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig { seed: 0, max_time_ms: 600_000, default_link: LinkConfig::default(), restart_delay_ms: 100 }
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("simulation exceeded its time limit at {now} ms")]
    MaxTimeExceeded { now: u64 },
    #[error("simulation stalled at {now} ms: {detail}")]
    Stalled { now: u64, detail: String },
    #[error("node {node}: {source}")]
    Node { node: NodeId, source: Error },
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct SimStats {
    pub frames_sent: u64,
    pub frames_lost: u64,
    pub frames_duplicated: u64,
    pub frames_delivered: u64,
    pub decode_errors: u64,
    pub crashes: u64,
    pub restarts: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ClientResult {
    pub at: u64,
    pub node: NodeId,
    pub sql: String,
    /// Record id on success, error text otherwise.
    pub outcome: Result<u64, String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SimReport {
    pub finished_at: u64,
    pub converged: bool,
    pub digests: BTreeMap<NodeId, String>,
    pub stats: SimStats,
}

#[derive(Debug)]
enum Event {
    Deliver { from: NodeId, to: NodeId, bytes: Vec<u8> },
    Tick { node: NodeId },
    Script(Action),
    Restart { node: NodeId },
}

struct LinkState {
    cfg: LinkConfig,
    rng: ChaCha8Rng,
}

struct SimNode {
    config: NodeConfig,
    storage: MemStorage,
    node: Option<Node>,
    crash: Option<CrashPlan>,
    tick_at: Option<u64>,
}

pub struct Simulator {
    topo: Arc<TopologyConfig>,
    cfg: SimConfig,
    nodes: BTreeMap<NodeId, SimNode>,
    links: BTreeMap<(NodeId, NodeId), LinkState>,
    queue: BinaryHeap<Reverse<(u64, u64)>>,
    events: BTreeMap<u64, Event>,
    seq: u64,
    now: u64,
    stats: SimStats,
    capture: Option<Vec<(NodeId, NodeId, Vec<u8>)>>,
    clients: Vec<ClientResult>,
}

impl Simulator {
    pub fn new(topo: TopologyConfig, cfg: SimConfig) -> Result<Self, SimError> {
        let topo = Arc::new(topo);
        let ids: Vec<NodeId> = topo.node_ids().cloned().collect();
        let mut nodes = BTreeMap::new();
        for id in &ids {
            let config = NodeConfig::new(id.clone(), topo.clone()).with_seed(cfg.seed);
            let storage = MemStorage::new();
            let (node, _) = Node::open(config.clone(), Box::new(storage.reopen()))
                .map_err(|source| SimError::Node { node: id.clone(), source })?;
            nodes.insert(id.clone(), SimNode { config, storage, node: Some(node), crash: None, tick_at: None });
        }
        let mut links = BTreeMap::new();
        for (i, a) in ids.iter().enumerate() {
            for (j, b) in ids.iter().enumerate() {
                if i == j {
                    continue;
                }
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream((i * ids.len() + j) as u64);
                links.insert((a.clone(), b.clone()), LinkState { cfg: cfg.default_link, rng });
            }
        }
        Ok(Simulator {
            topo,
            cfg,
            nodes,
            links,
            queue: BinaryHeap::new(),
            events: BTreeMap::new(),
            seq: 0,
            now: 0,
            stats: SimStats::default(),
            capture: None,
            clients: Vec::new(),
        })
    }

    pub fn topology(&self) -> &TopologyConfig {
        &self.topo
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn stats(&self) -> &SimStats {
        &self.stats
    }

    pub fn client_results(&self) -> &[ClientResult] {
        &self.clients
    }

    /// The running node, or `None` while it is down after a crash.
    pub fn node(&self, id: &NodeId) -> Option<&Node> {
        self.nodes.get(id).and_then(|n| n.node.as_ref())
    }

    pub fn node_mut(&mut self, id: &NodeId) -> Option<&mut Node> {
        self.nodes.get_mut(id).and_then(|n| n.node.as_mut())
    }

    pub fn node_ids(&self) -> Vec<NodeId> {
        self.nodes.keys().cloned().collect()
    }

    pub fn storage(&self, id: &NodeId) -> Option<&MemStorage> {
        self.nodes.get(id).map(|n| &n.storage)
    }

    pub fn capture_frames(&mut self, on: bool) {
        self.capture = on.then(Vec::new);
    }

    /// Every frame put on a link while capture was on, as `(from, to, bytes)`.
    pub fn captured(&self) -> &[(NodeId, NodeId, Vec<u8>)] {
        self.capture.as_deref().unwrap_or(&[])
    }

    /// Replaces the permission policy of `id`, reopening it from its log.
    pub fn set_policy(&mut self, id: &NodeId, policy: PermissionPolicy) -> Result<(), SimError> {
        let sn = self.nodes.get_mut(id).ok_or_else(|| SimError::UnknownNode(id.clone()))?;
        sn.config.policy = policy;
        self.restart(id)
    }

    /// Arms a crash: the node's log fails as `plan` describes, after which
    /// the node goes down and restarts `restart_delay_ms` later.
    pub fn arm_crash(&mut self, id: &NodeId, plan: CrashPlan) -> Result<(), SimError> {
        let sn = self.nodes.get_mut(id).ok_or_else(|| SimError::UnknownNode(id.clone()))?;
        sn.crash = Some(plan);
        self.restart(id)
    }

    pub fn schedule(&mut self, at: u64, action: Action) {
        self.push(at.max(self.now), Event::Script(action));
    }

    pub fn load_script(&mut self, script: &[ScriptEvent]) {
        for ev in script {
            self.schedule(ev.at, ev.action.clone());
        }
    }

    pub fn client_exec(&mut self, node: &NodeId, sql: &str) {
        self.schedule(self.now, Action::ClientExec { node: node.clone(), sql: sql.to_string() });
    }

    pub fn send_mail(&mut self, from: &NodeId, env: &MailEnvelope) -> Result<(), SimError> {
        let node = self.node_mut(from).ok_or_else(|| SimError::UnknownNode(from.clone()))?;
        node.send_mail(env).map_err(|source| SimError::Node { node: from.clone(), source })?;
        self.step_node(from)
    }

    /// Applies a link change in both directions immediately.
    pub fn set_link(&mut self, a: &NodeId, b: &NodeId, op: LinkOp) -> Result<(), SimError> {
        for (x, y) in [(a, b), (b, a)] {
            let link = self
                .links
                .get_mut(&(x.clone(), y.clone()))
                .ok_or_else(|| SimError::UnknownNode(y.clone()))?;
            match op {
                LinkOp::Online => link.cfg.online = true,
                LinkOp::Offline => link.cfg.online = false,
                LinkOp::Loss(r) => link.cfg.loss = r,
                LinkOp::Dup(r) => link.cfg.dup = r,
                LinkOp::Reorder(r) => link.cfg.reorder = r,
                LinkOp::Latency(ms) => link.cfg.latency_ms = ms,
            }
        }
        if matches!(op, LinkOp::Online | LinkOp::Offline) {
            let status = if op == LinkOp::Online { LinkStatus::Online } else { LinkStatus::Offline };
            for (x, y) in [(a, b), (b, a)] {
                if let Some(n) = self.node_mut(x) {
                    n.set_link_status(y, status);
                }
                self.step_node(x)?;
            }
        }
        Ok(())
    }

    fn push(&mut self, at: u64, ev: Event) {
        self.seq += 1;
        self.queue.push(Reverse((at, self.seq)));
        self.events.insert(self.seq, ev);
    }

    /// Puts a frame on the link from `from` to `to`.
    fn transmit(&mut self, from: &NodeId, to: &NodeId, msg: &Message) {
        let bytes = frame::encode(msg);
        self.stats.frames_sent += 1;
        if let Some(c) = self.capture.as_mut() {
            c.push((from.clone(), to.clone(), bytes.clone()));
        }
        let Some(link) = self.links.get_mut(&(from.clone(), to.clone())) else {
            self.stats.frames_lost += 1;
            return;
        };
        let cfg = link.cfg;
        if !cfg.online || (cfg.loss > 0.0 && link.rng.gen_bool(cfg.loss)) {
            self.stats.frames_lost += 1;
            return;
        }
        let delay = |rng: &mut ChaCha8Rng| {
            let extra = if cfg.reorder > 0.0 && rng.gen_bool(cfg.reorder) {
                rng.gen_range(0..=cfg.latency_ms)
            } else {
                0
            };
            cfg.latency_ms + extra
        };
        let d1 = delay(&mut link.rng);
        let dup = cfg.dup > 0.0 && link.rng.gen_bool(cfg.dup);
        let d2 = delay(&mut link.rng) + 1;
        let at = self.now;
        if dup {
            self.stats.frames_duplicated += 1;
            self.push(at + d2, Event::Deliver { from: from.clone(), to: to.clone(), bytes: bytes.clone() });
        }
        self.push(at + d1, Event::Deliver { from: from.clone(), to: to.clone(), bytes });
    }

    fn node_failed(&mut self, id: &NodeId, source: Error) -> Result<(), SimError> {
        let crashed = matches!(source, Error::Wal(_) | Error::Halted)
            && self.nodes.get(id).is_some_and(|n| n.crash.is_some());
        if !crashed {
            return Err(SimError::Node { node: id.clone(), source });
        }
        let sn = self.nodes.get_mut(id).expect("known node");
        sn.node = None;
        sn.crash = None;
        sn.tick_at = None;
        self.stats.crashes += 1;
        log::debug!("sim: {id} crashed at {}", self.now);
        self.push(self.now + self.cfg.restart_delay_ms, Event::Restart { node: id.clone() });
        Ok(())
    }

    /// Reopens `id` from its log, applying any armed crash plan.
    pub fn restart(&mut self, id: &NodeId) -> Result<(), SimError> {
        let sn = self.nodes.get_mut(id).ok_or_else(|| SimError::UnknownNode(id.clone()))?;
        sn.node = None;
        sn.tick_at = None;
        let storage = match sn.crash {
            Some(plan) => sn.storage.with_crash(plan),
            None => sn.storage.reopen(),
        };
        match Node::open(sn.config.clone(), Box::new(storage)) {
            Ok((mut node, _)) => {
                node.set_time(self.now);
                for ((a, b), link) in &self.links {
                    if a == id && !link.cfg.online {
                        node.set_link_status(b, LinkStatus::Offline);
                    }
                }
                sn.node = Some(node);
                self.stats.restarts += 1;
                self.step_node(id)
            }
            Err(source) => self.node_failed(id, source),
        }
    }

    /// Polls `id`, transmits its output and schedules its next tick.
    fn step_node(&mut self, id: &NodeId) -> Result<(), SimError> {
        let now = self.now;
        let Some(node) = self.node_mut(id) else {
            return Ok(());
        };
        let out = match node.poll(now) {
            Ok(out) => out,
            Err(e) => return self.node_failed(id, e),
        };
        for (to, msg) in out {
            self.transmit(id, &to, &msg);
        }
        self.schedule_tick(id);
        Ok(())
    }

    fn schedule_tick(&mut self, id: &NodeId) {
        let now = self.now;
        let Some(sn) = self.nodes.get_mut(id) else { return };
        let Some(deadline) = sn.node.as_ref().and_then(Node::next_deadline) else {
            return;
        };
        let at = deadline.max(now + 1);
        if sn.tick_at.is_some_and(|t| t <= at && t > now) {
            return;
        }
        sn.tick_at = Some(at);
        self.push(at, Event::Tick { node: id.clone() });
    }

    fn handle(&mut self, ev: Event) -> Result<(), SimError> {
        match ev {
            Event::Deliver { from, to, bytes } => {
                if !self.links.get(&(from.clone(), to.clone())).is_some_and(|l| l.cfg.online) {
                    self.stats.frames_lost += 1;
                    return Ok(());
                }
                let msg = match frame::decode(&bytes) {
                    Ok(m) => m,
                    Err(e) => {
                        log::warn!("sim: undecodable frame {from}->{to}: {e}");
                        self.stats.decode_errors += 1;
                        return Ok(());
                    }
                };
                let now = self.now;
                if self.node(&to).is_none() {
                    self.stats.frames_lost += 1;
                    return Ok(());
                }
                self.stats.frames_delivered += 1;
                let node = self.node_mut(&to).expect("node is up");
                match node.handle_frame(&from, msg, now) {
                    Ok(replies) => {
                        for (dest, m) in replies {
                            self.transmit(&to, &dest, &m);
                        }
                        self.step_node(&to)
                    }
                    Err(e) => self.node_failed(&to, e),
                }
            }
            Event::Tick { node } => {
                let due = self.nodes.get(&node).and_then(|n| n.tick_at);
                if due != Some(self.now) {
                    return Ok(());
                }
                if let Some(sn) = self.nodes.get_mut(&node) {
                    sn.tick_at = None;
                }
                self.step_node(&node)
            }
            Event::Restart { node } => self.restart(&node),
            Event::Script(action) => match action {
                Action::Link { a, b, op } => self.set_link(&a, &b, op),
                Action::Restart { node } => self.restart(&node),
                Action::ClientExec { node, sql } => {
                    let now = self.now;
                    if !self.nodes.contains_key(&node) {
                        return Err(SimError::UnknownNode(node));
                    }
                    let outcome = match self.node_mut(&node) {
                        None => Err("node is down".to_string()),
                        Some(n) => {
                            n.set_time(now);
                            match n.client_exec(&sql) {
                                Ok(r) => Ok(r.record_id),
                                Err(Error::Wal(e)) => {
                                    let err = Err(e.to_string());
                                    self.clients.push(ClientResult { at: now, node: node.clone(), sql, outcome: err });
                                    return self.node_failed(&node, Error::Halted);
                                }
                                Err(e) => Err(e.to_string()),
                            }
                        }
                    };
                    self.clients.push(ClientResult { at: now, node: node.clone(), sql, outcome });
                    self.step_node(&node)
                }
            },
        }
    }

    fn pop(&mut self) -> Option<(u64, Event)> {
        let Reverse((at, seq)) = self.queue.pop()?;
        let ev = self.events.remove(&seq).expect("event stored");
        Some((at, ev))
    }

    /// Processes events up to and including time `t`.
    pub fn run_until(&mut self, t: u64) -> Result<(), SimError> {
        while let Some(&Reverse((at, _))) = self.queue.peek() {
            if at > t {
                break;
            }
            let (at, ev) = self.pop().expect("peeked");
            self.now = at;
            self.handle(ev)?;
        }
        self.now = self.now.max(t);
        Ok(())
    }

    /// Runs until no events remain. Fails if that takes longer than the
    /// time limit, or if the network stops with work still pending.
    pub fn run_until_quiet(&mut self) -> Result<SimReport, SimError> {
        while let Some((at, ev)) = self.pop() {
            if at > self.cfg.max_time_ms {
                return Err(SimError::MaxTimeExceeded { now: at });
            }
            self.now = at;
            self.handle(ev)?;
        }
        let busy: Vec<String> = self
            .nodes
            .iter()
            .filter(|(_, n)| !n.node.as_ref().is_some_and(Node::is_idle))
            .map(|(id, _)| id.to_string())
            .collect();
        if !busy.is_empty() {
            return Err(SimError::Stalled { now: self.now, detail: format!("work pending on {}", busy.join(", ")) });
        }
        let nodes: Vec<&Node> = self.nodes.values().filter_map(|n| n.node.as_ref()).collect();
        let converged = converged(&nodes, None).unwrap_or(false);
        Ok(SimReport {
            finished_at: self.now,
            converged,
            digests: self
                .nodes
                .iter()
                .filter_map(|(id, n)| n.node.as_ref().map(|n| (id.clone(), n.state_digest(None))))
                .collect(),
            stats: self.stats.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn id(s: &str) -> NodeId {
        NodeId::new(s).unwrap()
    }

    #[test]
    fn parses_script() {
        let s = parse_scenario(
            "# comment\nat 0 link B1 C loss 0.25\nat 10 client B1 exec INSERT INTO t VALUES (1, 'a b')\n\nat 20 link B1 C offline\nat 30 restart C\n",
        )
        .unwrap();
        assert_eq!(s.len(), 4);
        assert_eq!(s[0], ScriptEvent { at: 0, action: Action::Link { a: id("B1"), b: id("C"), op: LinkOp::Loss(0.25) } });
        assert_eq!(
            s[1].action,
            Action::ClientExec { node: id("B1"), sql: "INSERT INTO t VALUES (1, 'a b')".into() }
        );
        assert_eq!(s[3].action, Action::Restart { node: id("C") });
        assert_eq!(parse_scenario("at x link A B online").unwrap_err().line, 1);
        assert!(parse_scenario("at 1 link A B loss 2").is_err());
        assert!(parse_scenario("at 1 link A B explode").is_err());
        assert!(parse_scenario("at 1 client A run x").is_err());
        assert!(parse_scenario("in 1 link A B online").is_err());
    }

    #[test]
    fn small_run_converges() {
        let topo = TopologyConfig::star("C", &["B1", "B2"]).unwrap();
        let mut sim = Simulator::new(topo, SimConfig::default()).unwrap();
        sim.client_exec(&id("B1"), "CREATE TABLE t (id INT, v TEXT)");
        sim.client_exec(&id("B1"), "INSERT INTO t VALUES (1, 'a')");
        let report = sim.run_until_quiet().unwrap();
        assert!(report.converged);
        let t = sim.node(&id("B2")).unwrap().store().table("t").unwrap();
        assert_eq!(t.rows.len(), 1);
    }

    #[test]
    fn offline_link_stalls() {
        let topo = TopologyConfig::star("C", &["B1", "B2"]).unwrap();
        let mut sim = Simulator::new(topo, SimConfig::default()).unwrap();
        sim.set_link(&id("B1"), &id("C"), LinkOp::Offline).unwrap();
        sim.client_exec(&id("B1"), "CREATE TABLE t (id INT)");
        assert!(matches!(sim.run_until_quiet(), Err(SimError::Stalled { .. })));
    }
}
