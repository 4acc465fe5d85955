//! Static enterprise model: nodes, connected networks, links and next-hop
//! routing through the central routing node.
//!
//! The configuration document is line oriented:
//!
//! ```text
//! # comment
//! [node] name=B1 role=BRANCH cn=east port=7101
//! [node] name=C role=CENTRAL cn=east,west port=7100
//! [link] a=B1 b=C
//! [mail] key=<64 hex chars>
//! ```
//!
//! `port`, `host` and the `[mail]` section are optional.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Enterprise-wide node identifier, `[A-Za-z0-9_-]{1,32}`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct NodeId(String);

impl NodeId {
    pub fn new(name: impl Into<String>) -> Result<Self, TopologyError> {
        let name = name.into();
        let valid = !name.is_empty()
            && name.len() <= 32
            && name
                .bytes()
                .all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-');
        if valid {
            Ok(NodeId(name))
        } else {
            Err(TopologyError::InvalidName(name))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for NodeId {
    type Error = TopologyError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        NodeId::new(s)
    }
}

impl From<NodeId> for String {
    fn from(id: NodeId) -> String {
        id.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::str::FromStr for NodeId {
    type Err = TopologyError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        NodeId::new(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Branch,
    Central,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeSpec {
    pub id: NodeId,
    pub role: Role,
    pub host: Option<String>,
    pub port: Option<u16>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TopologyError {
    #[error("invalid node name {0:?}")]
    InvalidName(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("unknown node {0}")]
    UnknownNode(String),
}

/// Validated, immutable enterprise topology.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TopologyConfig {
    nodes: Vec<NodeSpec>,
    connected_networks: BTreeMap<String, BTreeSet<NodeId>>,
    central: NodeId,
    links: BTreeSet<(NodeId, NodeId)>,
    mail_key: Option<[u8; 32]>,
}

fn link_key(a: &NodeId, b: &NodeId) -> (NodeId, NodeId) {
    if a <= b {
        (a.clone(), b.clone())
    } else {
        (b.clone(), a.clone())
    }
}

/// Parses and validates a configuration document.
pub fn load_topology(text: &str) -> Result<TopologyConfig, TopologyError> {
    let mut nodes = Vec::new();
    let mut cns: BTreeMap<String, BTreeSet<NodeId>> = BTreeMap::new();
    let mut links = Vec::new();
    let mut mail_key = None;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let perr = |msg: String| TopologyError::Parse { line: line_no, msg };
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let mut words = line.split_whitespace();
        let section = words.next().unwrap_or_default();
        let mut fields = BTreeMap::new();
        for word in words {
            let (k, v) = word
                .split_once('=')
                .ok_or_else(|| perr(format!("expected key=value, found {word:?}")))?;
            if fields.insert(k, v).is_some() {
                return Err(perr(format!("duplicate key {k:?}")));
            }
        }
        fn take<'a>(
            fields: &mut BTreeMap<&str, &'a str>,
            key: &str,
            perr: impl Fn(String) -> TopologyError,
        ) -> Result<&'a str, TopologyError> {
            fields.remove(key).ok_or_else(|| perr(format!("missing {key}=")))
        }
        match section {
            "[node]" => {
                let name = take(&mut fields, "name", &perr)?;
                let id = NodeId::new(name).map_err(|e| perr(e.to_string()))?;
                let role = match take(&mut fields, "role", &perr)? {
                    "BRANCH" => Role::Branch,
                    "CENTRAL" => Role::Central,
                    other => return Err(perr(format!("unknown role {other:?}"))),
                };
                let cn_list = take(&mut fields, "cn", &perr)?;
                for cn in cn_list.split(',') {
                    if cn.is_empty() {
                        return Err(perr("empty connected network name".into()));
                    }
                    cns.entry(cn.to_string()).or_default().insert(id.clone());
                }
                let port = match fields.remove("port") {
                    Some(p) => Some(p.parse::<u16>().map_err(|_| perr(format!("bad port {p:?}")))?),
                    None => None,
                };
                let host = fields.remove("host").map(str::to_string);
                if let Some(k) = fields.keys().next() {
                    return Err(perr(format!("unknown key {k:?}")));
                }
                nodes.push(NodeSpec { id, role, host, port });
            }
            "[link]" => {
                let a = NodeId::new(take(&mut fields, "a", &perr)?).map_err(|e| perr(e.to_string()))?;
                let b = NodeId::new(take(&mut fields, "b", &perr)?).map_err(|e| perr(e.to_string()))?;
                if let Some(k) = fields.keys().next() {
                    return Err(perr(format!("unknown key {k:?}")));
                }
                links.push((a, b));
            }
            "[mail]" => {
                let key = take(&mut fields, "key", &perr)?;
                let bytes = hex::decode(key).map_err(|_| perr("mail key is not hex".into()))?;
                let key: [u8; 32] = bytes
                    .try_into()
                    .map_err(|_| perr("mail key must be 32 bytes".into()))?;
                mail_key = Some(key);
            }
            other => return Err(perr(format!("unknown section {other:?}"))),
        }
    }

    TopologyConfig::new(nodes, cns, links, mail_key)
}

impl TopologyConfig {
    pub fn new(
        nodes: Vec<NodeSpec>,
        connected_networks: BTreeMap<String, BTreeSet<NodeId>>,
        links: Vec<(NodeId, NodeId)>,
        mail_key: Option<[u8; 32]>,
    ) -> Result<Self, TopologyError> {
        let verr = |m: String| TopologyError::Validation(m);
        let mut seen = BTreeSet::new();
        for n in &nodes {
            if !seen.insert(n.id.clone()) {
                return Err(verr(format!("duplicate node {}", n.id)));
            }
        }
        let centrals: Vec<_> = nodes.iter().filter(|n| n.role == Role::Central).collect();
        if centrals.len() != 1 {
            return Err(verr(format!(
                "expected exactly one CENTRAL node, found {}",
                centrals.len()
            )));
        }
        let central = centrals[0].id.clone();

        let mut link_set = BTreeSet::new();
        for (a, b) in &links {
            for end in [a, b] {
                if !seen.contains(end) {
                    return Err(verr(format!("link references unknown node {end}")));
                }
            }
            if a == b {
                return Err(verr(format!("self link on {a}")));
            }
            link_set.insert(link_key(a, b));
        }
        for members in connected_networks.values() {
            if let Some(m) = members.iter().find(|m| !seen.contains(*m)) {
                return Err(verr(format!("connected network references unknown node {m}")));
            }
        }

        let topo = TopologyConfig {
            nodes,
            connected_networks,
            central,
            links: link_set,
            mail_key,
        };
        for n in &topo.nodes {
            if !topo.connected_networks.values().any(|m| m.contains(&n.id)) {
                return Err(verr(format!("node {} belongs to no connected network", n.id)));
            }
            // Every route is at most branch -> central -> branch, so central
            // must reach each node in one hop.
            if n.id != topo.central && !topo.direct(&topo.central, &n.id) {
                return Err(verr(format!(
                    "node {} is unreachable from central {}",
                    n.id, topo.central
                )));
            }
        }
        Ok(topo)
    }

    /// Hub-and-spoke enterprise with one connected network per branch plus a
    /// shared one holding central.
    pub fn star(central: &str, branches: &[&str]) -> Result<Self, TopologyError> {
        let c = NodeId::new(central)?;
        let mut nodes = vec![NodeSpec { id: c.clone(), role: Role::Central, host: None, port: None }];
        let mut cns: BTreeMap<String, BTreeSet<NodeId>> = BTreeMap::new();
        let mut links = Vec::new();
        for b in branches {
            let id = NodeId::new(*b)?;
            nodes.push(NodeSpec { id: id.clone(), role: Role::Branch, host: None, port: None });
            let cn = cns.entry(format!("cn-{b}")).or_default();
            cn.insert(id.clone());
            cn.insert(c.clone());
            links.push((id, c.clone()));
        }
        TopologyConfig::new(nodes, cns, links, None)
    }

    pub fn with_mail_key(mut self, key: [u8; 32]) -> Self {
        self.mail_key = Some(key);
        self
    }

    pub fn nodes(&self) -> &[NodeSpec] {
        &self.nodes
    }

    pub fn node(&self, id: &NodeId) -> Option<&NodeSpec> {
        self.nodes.iter().find(|n| &n.id == id)
    }

    pub fn node_ids(&self) -> impl Iterator<Item = &NodeId> {
        self.nodes.iter().map(|n| &n.id)
    }

    pub fn branches(&self) -> impl Iterator<Item = &NodeId> {
        self.nodes
            .iter()
            .filter(|n| n.role == Role::Branch)
            .map(|n| &n.id)
    }

    pub fn central(&self) -> &NodeId {
        &self.central
    }

    pub fn role(&self, id: &NodeId) -> Option<Role> {
        self.node(id).map(|n| n.role)
    }

    pub fn contains(&self, id: &NodeId) -> bool {
        self.node(id).is_some()
    }

    pub fn links(&self) -> impl Iterator<Item = &(NodeId, NodeId)> {
        self.links.iter()
    }

    pub fn connected_networks(&self) -> &BTreeMap<String, BTreeSet<NodeId>> {
        &self.connected_networks
    }

    pub fn mail_key(&self) -> Option<&[u8; 32]> {
        self.mail_key.as_ref()
    }

    pub fn linked(&self, a: &NodeId, b: &NodeId) -> bool {
        self.links.contains(&link_key(a, b))
    }

    pub fn share_network(&self, a: &NodeId, b: &NodeId) -> bool {
        self.connected_networks
            .values()
            .any(|m| m.contains(a) && m.contains(b))
    }

    fn direct(&self, a: &NodeId, b: &NodeId) -> bool {
        self.share_network(a, b) && self.linked(a, b)
    }

    /// Nodes this node may exchange frames with directly.
    pub fn neighbors(&self, id: &NodeId) -> Vec<NodeId> {
        self.node_ids()
            .filter(|n| *n != id && self.linked(id, n))
            .cloned()
            .collect()
    }

    /// The next node a frame travelling `from -> to` is handed to.
    pub fn route_next_hop(&self, from: &NodeId, to: &NodeId) -> Result<NodeId, TopologyError> {
        for n in [from, to] {
            if !self.contains(n) {
                return Err(TopologyError::UnknownNode(n.to_string()));
            }
        }
        if self.direct(from, to) {
            Ok(to.clone())
        } else {
            Ok(self.central.clone())
        }
    }

    /// Renders the configuration back into the document grammar.
    pub fn to_config_text(&self) -> String {
        let mut out = String::new();
        for n in &self.nodes {
            let cns: Vec<&str> = self
                .connected_networks
                .iter()
                .filter(|(_, m)| m.contains(&n.id))
                .map(|(name, _)| name.as_str())
                .collect();
            let role = match n.role {
                Role::Branch => "BRANCH",
                Role::Central => "CENTRAL",
            };
            out.push_str(&format!("[node] name={} role={} cn={}", n.id, role, cns.join(",")));
            if let Some(h) = &n.host {
                out.push_str(&format!(" host={h}"));
            }
            if let Some(p) = n.port {
                out.push_str(&format!(" port={p}"));
            }
            out.push('\n');
        }
        for (a, b) in &self.links {
            out.push_str(&format!("[link] a={a} b={b}\n"));
        }
        if let Some(k) = &self.mail_key {
            out.push_str(&format!("[mail] key={}\n", hex::encode(k)));
        }
        out
    }
}
