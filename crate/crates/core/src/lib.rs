//! QSync: statement replication between branch databases and a central
//! database over transactional, exactly-once message queues.
//!
//! A [`node::Node`] bundles the queue manager, the SQL store, the mailbox
//! and a transaction coordinator over one append-only log. Nodes are
//! sans-IO; [`sim::Simulator`] drives them over a simulated network and the
//! `qsync` binary drives them over TCP.

pub mod dtx;
pub mod error;
pub mod frame;
pub mod mail;
pub mod node;
pub mod queue;
pub mod record;
pub mod sim;
pub mod sql;
pub mod store;
pub mod sync;
pub mod topology;
pub mod wal;

pub use error::{Error, Result};
pub use node::{Node, NodeConfig};
pub use topology::{load_topology, NodeId, Role, TopologyConfig};
