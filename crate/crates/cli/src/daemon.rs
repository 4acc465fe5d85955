//! Node daemon: one `Node` behind a mutex, a TCP listener for peer frames,
//! one sender thread per neighbour, a Unix control socket, and a loop that
//! polls the node whenever something arrives or a timer is due.

use std::collections::BTreeMap;
use std::fs::{self, File, TryLockError};
use std::io;
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Sender};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use log::{debug, error, info, warn};
use qsync_core::frame;
use qsync_core::mail::{Attachment, MailEnvelope};
use qsync_core::node::RecoveryReport;
use qsync_core::queue::{Direction, JournalFilter, LinkStatus, Message, MessageId};
use qsync_core::sync::PermissionPolicy;
use qsync_core::wal::FileStorage;
use qsync_core::{Node, NodeConfig, NodeId, TopologyConfig};
use serde_json::{json, Value};
use thiserror::Error;

use crate::control::{self, Reply, Request};

/// Longest the main loop sleeps without being woken.
const IDLE_WAIT: Duration = Duration::from_millis(250);
const CONNECT_TIMEOUT: Duration = Duration::from_secs(1);

#[derive(Debug, Error)]
pub enum DaemonError {
    #[error("a daemon for this node is already running (lock held on {0})")]
    AlreadyRunning(PathBuf),
    #[error("node {0} has no port in the configuration")]
    NoPort(NodeId),
    #[error("node {0} is not in the configuration")]
    UnknownNode(NodeId),
    #[error("{context}: {source}")]
    Io { context: String, source: io::Error },
    #[error(transparent)]
    Core(#[from] qsync_core::Error),
    #[error("node halted: {0}")]
    Halted(String),
}

fn io_err(context: impl Into<String>) -> impl FnOnce(io::Error) -> DaemonError {
    let context = context.into();
    move |source| DaemonError::Io { context, source }
}

/// Files a node keeps in its state directory.
#[derive(Clone, Debug)]
pub struct StateDir(pub PathBuf);

impl StateDir {
    pub fn wal(&self) -> PathBuf {
        self.0.join("queue.wal")
    }

    pub fn socket(&self) -> PathBuf {
        self.0.join("control.sock")
    }

    pub fn lock(&self) -> PathBuf {
        self.0.join("daemon.lock")
    }
}

pub fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

struct Shared {
    node: Mutex<Node>,
    kick: Mutex<bool>,
    kicked: Condvar,
    stop: AtomicBool,
    failure: Mutex<Option<String>>,
    links: BTreeMap<NodeId, Sender<Vec<u8>>>,
}

impl Shared {
    fn wake(&self) {
        *self.kick.lock().expect("kick lock") = true;
        self.kicked.notify_all();
    }

    fn fail(&self, why: String) {
        error!("{why}");
        self.failure.lock().expect("failure lock").get_or_insert(why);
        self.stop.store(true, Ordering::SeqCst);
        self.wake();
    }

    fn transmit(&self, frames: Vec<(NodeId, Message)>) {
        for (to, msg) in frames {
            match self.links.get(&to) {
                Some(tx) => {
                    let _ = tx.send(frame::encode(&msg));
                }
                None => debug!("no link to {to}, dropping {}", msg.id),
            }
        }
    }
}

/// A node daemon that has recovered its log and bound its sockets.
pub struct Daemon {
    shared: Arc<Shared>,
    state: StateDir,
    listen: SocketAddr,
    _lock: File,
    pub recovery: RecoveryReport,
}

impl Daemon {
    pub fn start(
        topo: Arc<TopologyConfig>,
        id: NodeId,
        state: StateDir,
        policy: PermissionPolicy,
    ) -> Result<Daemon, DaemonError> {
        let spec = topo.node(&id).ok_or_else(|| DaemonError::UnknownNode(id.clone()))?.clone();
        let port = spec.port.ok_or_else(|| DaemonError::NoPort(id.clone()))?;
        fs::create_dir_all(&state.0).map_err(io_err(format!("creating {}", state.0.display())))?;
        let lock = File::options()
            .create(true)
            .truncate(false)
            .write(true)
            .open(state.lock())
            .map_err(io_err("opening lock file"))?;
        match lock.try_lock() {
            Ok(()) => {}
            Err(TryLockError::WouldBlock) => return Err(DaemonError::AlreadyRunning(state.lock())),
            Err(TryLockError::Error(e)) => return Err(io_err("locking state directory")(e)),
        }

        let storage = FileStorage::open(state.wal()).map_err(io_err(format!("opening {}", state.wal().display())))?;
        let config = NodeConfig::new(id.clone(), topo.clone()).with_policy(policy);
        let (node, recovery) = Node::open(config, Box::new(storage))?;

        let host = spec.host.clone().unwrap_or_else(|| "127.0.0.1".into());
        let listener = TcpListener::bind((host.as_str(), port)).map_err(io_err(format!("binding {host}:{port}")))?;
        let listen = listener.local_addr().map_err(io_err("reading listen address"))?;
        let socket = state.socket();
        if socket.exists() {
            // The lock is ours, so whatever left this socket is gone.
            fs::remove_file(&socket).map_err(io_err("removing stale control socket"))?;
        }
        let control = UnixListener::bind(&socket).map_err(io_err(format!("binding {}", socket.display())))?;

        let mut links = BTreeMap::new();
        for peer in topo.neighbors(&id) {
            let Some(peer_spec) = topo.node(&peer) else { continue };
            let Some(peer_port) = peer_spec.port else {
                warn!("neighbour {peer} has no port; frames to it will be dropped");
                continue;
            };
            let peer_host = peer_spec.host.clone().unwrap_or_else(|| "127.0.0.1".into());
            let (tx, rx) = mpsc::channel::<Vec<u8>>();
            let name = peer.clone();
            thread::spawn(move || sender(name, format!("{peer_host}:{peer_port}"), rx));
            links.insert(peer, tx);
        }

        let shared = Arc::new(Shared {
            node: Mutex::new(node),
            kick: Mutex::new(false),
            kicked: Condvar::new(),
            stop: AtomicBool::new(false),
            failure: Mutex::new(None),
            links,
        });
        let s = shared.clone();
        thread::spawn(move || accept_peers(s, listener));
        let s = shared.clone();
        thread::spawn(move || accept_control(s, control));
        Ok(Daemon { shared, state, listen, _lock: lock, recovery })
    }

    pub fn listen_addr(&self) -> SocketAddr {
        self.listen
    }

    pub fn control_socket(&self) -> PathBuf {
        self.state.socket()
    }

    /// Polls the node until a shutdown request or a fatal error.
    pub fn run(self) -> Result<(), DaemonError> {
        let shared = &self.shared;
        while !shared.stop.load(Ordering::SeqCst) {
            let now = now_ms();
            let (out, deadline) = {
                let mut node = shared.node.lock().expect("node lock");
                match node.poll(now) {
                    Ok(out) => (out, node.next_deadline()),
                    Err(e) => {
                        drop(node);
                        shared.fail(format!("poll failed: {e}"));
                        break;
                    }
                }
            };
            shared.transmit(out);
            let wait = match deadline {
                Some(t) => Duration::from_millis(t.saturating_sub(now_ms()).max(1)).min(IDLE_WAIT),
                None => IDLE_WAIT,
            };
            let mut kicked = shared.kick.lock().expect("kick lock");
            if !*kicked {
                kicked = shared.kicked.wait_timeout(kicked, wait).expect("kick lock").0;
            }
            *kicked = false;
        }
        let _ = fs::remove_file(self.state.socket());
        match shared.failure.lock().expect("failure lock").take() {
            Some(why) => Err(DaemonError::Halted(why)),
            None => Ok(()),
        }
    }
}

/// Delivers frames to one neighbour, reconnecting as needed. Frames that
/// cannot be written are dropped; the queue layer retransmits them.
fn sender(peer: NodeId, addr: String, rx: mpsc::Receiver<Vec<u8>>) {
    let mut conn: Option<TcpStream> = None;
    for bytes in rx {
        if conn.is_none() {
            conn = addr
                .to_socket_addrs()
                .ok()
                .and_then(|mut a| a.next())
                .and_then(|a| TcpStream::connect_timeout(&a, CONNECT_TIMEOUT).ok());
            if conn.is_none() {
                debug!("{peer} at {addr} unreachable");
                continue;
            }
        }
        if let Some(stream) = conn.as_mut() {
            if let Err(e) = frame::write_frame(stream, &bytes) {
                debug!("write to {peer} failed: {e}");
                conn = None;
            }
        }
    }
}

fn accept_peers(shared: Arc<Shared>, listener: TcpListener) {
    for stream in listener.incoming() {
        match stream {
            Ok(s) => {
                let shared = shared.clone();
                thread::spawn(move || read_peer(shared, s));
            }
            Err(e) => warn!("accept failed: {e}"),
        }
    }
}

fn read_peer(shared: Arc<Shared>, mut stream: TcpStream) {
    let peer = stream.peer_addr().map(|a| a.to_string()).unwrap_or_default();
    loop {
        let bytes = match frame::read_frame(&mut stream) {
            Ok(Some(b)) => b,
            Ok(None) => return,
            Err(e) => {
                debug!("{peer}: {e}");
                return;
            }
        };
        let msg = match frame::decode(&bytes) {
            Ok(m) => m,
            Err(e) => {
                warn!("{peer}: rejected frame: {e}");
                continue;
            }
        };
        let Some(from) = msg.hops.last().cloned() else {
            warn!("{peer}: frame {} carries no hop", msg.id);
            continue;
        };
        let result = {
            let mut node = shared.node.lock().expect("node lock");
            if !node.topology().linked(node.id(), &from) {
                warn!("{peer}: frame from {from}, which is not a neighbour");
                continue;
            }
            node.handle_frame(&from, msg, now_ms())
        };
        match result {
            Ok(replies) => {
                shared.transmit(replies);
                shared.wake();
            }
            Err(e) => {
                shared.fail(format!("handling frame from {from}: {e}"));
                return;
            }
        }
    }
}

fn accept_control(shared: Arc<Shared>, listener: UnixListener) {
    for stream in listener.incoming() {
        match stream {
            Ok(s) => {
                let shared = shared.clone();
                thread::spawn(move || serve_control(shared, s));
            }
            Err(e) => warn!("control accept failed: {e}"),
        }
    }
}

fn serve_control(shared: Arc<Shared>, mut stream: UnixStream) {
    let Ok(Some(bytes)) = frame::read_frame(&mut stream) else { return };
    let (code, reply, shutdown) = match control::decode_request(&bytes) {
        Ok(req) => (req.code(), handle(&shared, req.clone()), req == Request::Shutdown),
        Err(e) => (0xFF, Reply::err(e), false),
    };
    let id = shared.node.lock().expect("node lock").id().clone();
    let body = serde_json::to_vec(&reply).expect("reply serializes");
    if let Err(e) = frame::write_frame(&mut stream, &control::wrap(&id, code, 0, body)) {
        debug!("control reply failed: {e}");
    }
    // Stop only once the reply is out, or the process may exit first.
    if shutdown {
        shared.stop.store(true, Ordering::SeqCst);
        shared.wake();
    }
}

fn handle(shared: &Shared, req: Request) -> Reply {
    let result = execute(shared, req);
    match result {
        Ok(v) => Reply::ok(v),
        Err(e) => Reply::err(e),
    }
}

fn execute(shared: &Shared, req: Request) -> Result<Value, String> {
    let mut node = shared.node.lock().expect("node lock");
    let s = |e: qsync_core::Error| e.to_string();
    let value = match req {
        Request::Status => {
            let mut v = serde_json::to_value(node.status()).expect("status serializes");
            v["recovered"] = json!(node.recovery().resolved());
            v
        }
        Request::ForceDispatch => {
            node.notify_dispatch();
            json!({ "notified": true })
        }
        Request::Exec { sql } => {
            let r = node.client_exec(&sql).map_err(s)?;
            info!("exec {sql:?}: record {}", r.record_id);
            serde_json::to_value(r).expect("exec result serializes")
        }
        Request::MailSend { to, subject, body, attachments, encrypted } => {
            let to = NodeId::new(to).map_err(|e| e.to_string())?;
            let attachments = attachments
                .iter()
                .map(|p| {
                    let path = Path::new(p);
                    let data = fs::read(path).map_err(|e| format!("{p}: {e}"))?;
                    let name = path.file_name().map_or_else(|| p.clone(), |n| n.to_string_lossy().into_owned());
                    Ok(Attachment { name, data })
                })
                .collect::<Result<Vec<_>, String>>()?;
            let env = MailEnvelope { from: node.id().clone(), to, subject, body, attachments, encrypted };
            let id = node.send_mail(&env).map_err(s)?;
            json!({ "mail_id": id.to_string() })
        }
        Request::MailInbox { save_dir } => {
            let mails = node.fetch_mail().map_err(s)?;
            let mut out = Vec::new();
            for m in mails {
                let mut atts = Vec::new();
                for a in &m.envelope.attachments {
                    let mut entry = json!({ "name": a.name, "bytes": a.data.len() });
                    if let Some(dir) = &save_dir {
                        let safe = Path::new(&a.name).file_name().map_or("attachment".into(), |n| n.to_string_lossy().into_owned());
                        let dir = Path::new(dir).join(m.mail_id.to_string().replace('#', "-"));
                        fs::create_dir_all(&dir).map_err(|e| format!("{}: {e}", dir.display()))?;
                        let path = dir.join(safe);
                        fs::write(&path, &a.data).map_err(|e| format!("{}: {e}", path.display()))?;
                        entry["saved_to"] = json!(path.display().to_string());
                    }
                    atts.push(entry);
                }
                out.push(json!({
                    "mail_id": m.mail_id.to_string(),
                    "from": m.envelope.from,
                    "to": m.envelope.to,
                    "subject": m.envelope.subject,
                    "body": m.envelope.body,
                    "encrypted": m.envelope.encrypted,
                    "hops": m.hops,
                    "attachments": atts,
                }));
            }
            Value::Array(out)
        }
        Request::MailAck { id } => {
            let id: MessageId = id.parse()?;
            node.ack_mail(&id).map_err(s)?;
            json!({ "acked": id.to_string() })
        }
        Request::Journal { direction, queue } => {
            let direction = match direction.as_deref() {
                None => None,
                Some("sent") => Some(Direction::Sent),
                Some("received") => Some(Direction::Received),
                Some(other) => return Err(format!("unknown direction {other}")),
            };
            let entries = node.journal_list(&JournalFilter { direction, queue, kind: None });
            serde_json::to_value(entries).expect("journal serializes")
        }
        Request::Dump { table: Some(t) } => {
            let text = node.store().dump_table(&t).ok_or_else(|| format!("no such table {t}"))?;
            json!({ "table": t, "text": text })
        }
        Request::Dump { table: None } => {
            let tables: Vec<Value> = node
                .store()
                .tables()
                .values()
                .map(|t| json!({ "name": t.name, "columns": t.columns.iter().map(|c| format!("{} {}", c.name, c.ty)).collect::<Vec<_>>(), "rows": t.rows.len() }))
                .collect();
            let records: Vec<_> = node.store().records().cloned().collect();
            json!({ "tables": tables, "records": records })
        }
        Request::Link { peer, online } => {
            let peer = NodeId::new(peer).map_err(|e| e.to_string())?;
            if !node.topology().linked(node.id(), &peer) {
                return Err(format!("{peer} is not a neighbour of {}", node.id()));
            }
            node.set_link_status(&peer, if online { LinkStatus::Online } else { LinkStatus::Offline });
            json!({ "peer": peer, "online": online })
        }
        Request::Shutdown => json!({ "stopping": true }),
    };
    drop(node);
    shared.wake();
    Ok(value)
}
