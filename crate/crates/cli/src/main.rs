//! `qsync`: node daemon, admin commands and the simulator front end.

mod control;
mod daemon;
mod render;
mod simrun;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use qsync_core::sync::PermissionPolicy;
use qsync_core::{load_topology, NodeId, TopologyConfig};

use control::Request;
use daemon::{Daemon, StateDir};

#[derive(Parser, Debug)]
#[command(name = "qsync", version, about = "Statement-based branch/central database synchronization")]
struct Cli {
    /// Topology configuration file.
    #[arg(long, global = true, env = "QSYNC_CONFIG")]
    config: Option<PathBuf>,
    /// Node this command acts on.
    #[arg(long, global = true)]
    node: Option<String>,
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    json: bool,
    /// Seed for the simulator.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Start the node daemon in the foreground.
    Run {
        /// Permission rules for statements received from other nodes.
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Show queue depths, outgoing queues, outbox and dead letters.
    Status,
    /// Ask the dispatcher to run now.
    ForceDispatch,
    /// Execute one client statement and queue it for replication.
    Exec { sql: String },
    /// Take a link to a neighbour offline or bring it back online.
    Link { peer: String, state: LinkArg },
    /// Mail between nodes.
    Mail {
        #[command(subcommand)]
        cmd: MailCmd,
    },
    /// List committed and aborted sends and receives.
    Journal {
        #[arg(long)]
        direction: Option<DirectionArg>,
        #[arg(long)]
        queue: Option<String>,
    },
    /// Print tables and the query table, or one table's rows.
    Dump { table: Option<String> },
    /// Stop a running daemon.
    Stop,
    /// Run a scenario script on a simulated enterprise.
    Sim {
        #[arg(long)]
        scenario: PathBuf,
        /// Simulated time limit in milliseconds.
        #[arg(long, default_value_t = 600_000)]
        max_time: u64,
    },
}

#[derive(Subcommand, Debug)]
enum MailCmd {
    /// Queue a mail for another node.
    Send {
        #[arg(long)]
        to: String,
        #[arg(long, default_value = "")]
        subject: String,
        #[arg(long, default_value = "")]
        body: String,
        /// File to attach; repeatable.
        #[arg(long = "attach")]
        attachments: Vec<PathBuf>,
        /// Send without encrypting the envelope.
        #[arg(long)]
        plain: bool,
    },
    /// List delivered mail not yet acknowledged.
    Inbox {
        /// Write attachments under this directory.
        #[arg(long)]
        save: Option<PathBuf>,
    },
    /// Remove a mail from the inbox.
    Ack { id: String },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LinkArg {
    Online,
    Offline,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DirectionArg {
    Sent,
    Received,
}

fn fail(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("qsync: {msg}");
    ExitCode::FAILURE
}

fn load_config(path: Option<&Path>) -> Result<TopologyConfig, String> {
    let path = path.ok_or("--config is required for this command")?;
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    load_topology(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn node_id(node: Option<&str>) -> Result<NodeId, String> {
    let node = node.ok_or("--node is required for this command")?;
    NodeId::new(node).map_err(|e| e.to_string())
}

/// `$QSYNC_HOME/<node>`, or `./qsync-state/<node>`.
fn state_dir(node: &NodeId) -> StateDir {
    let home = std::env::var_os("QSYNC_HOME").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("qsync-state"));
    StateDir(home.join(node.as_str()))
}

fn absolute(p: &Path) -> Result<String, String> {
    std::path::absolute(p).map(|p| p.display().to_string()).map_err(|e| format!("{}: {e}", p.display()))
}

fn cmd_run(cli: &Cli, policy: Option<&Path>) -> Result<(), String> {
    let topo = Arc::new(load_config(cli.config.as_deref())?);
    let id = node_id(cli.node.as_deref())?;
    let policy = match policy {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            PermissionPolicy::parse(&text).map_err(|e| format!("{}: {e}", p.display()))?
        }
        None => PermissionPolicy::allow_all(),
    };
    let daemon = Daemon::start(topo, id.clone(), state_dir(&id), policy).map_err(|e| e.to_string())?;
    let r = &daemon.recovery;
    if cli.json {
        let line = serde_json::json!({
            "node": id,
            "listen": daemon.listen_addr().to_string(),
            "control": daemon.control_socket().display().to_string(),
            "recovery": r,
            "resolved": r.resolved(),
        });
        println!("{line}");
    } else {
        println!(
            "node {id}: replayed {} records, resolved {} (rolled back {}, finished {}), discarded {} torn bytes",
            r.records_replayed,
            r.resolved(),
            r.rolled_back.len(),
            r.finished.len(),
            r.torn_bytes
        );
        println!("listening on {}, control socket {}", daemon.listen_addr(), daemon.control_socket().display());
    }
    daemon.run().map_err(|e| e.to_string())
}

fn cmd_sim(cli: &Cli, scenario: &Path, max_time: u64) -> Result<bool, String> {
    let topo = load_config(cli.config.as_deref())?;
    let script = std::fs::read_to_string(scenario).map_err(|e| format!("{}: {e}", scenario.display()))?;
    let outcome = simrun::run(topo, &script, cli.seed, max_time)?;
    if cli.json {
        println!("{}", serde_json::to_string(&outcome).expect("outcome serializes"));
    } else {
        print!("{}", simrun::render(&outcome));
    }
    Ok(outcome.verdict == simrun::Verdict::Converged)
}

fn request(cmd: &Cmd) -> Result<Request, String> {
    Ok(match cmd {
        Cmd::Status => Request::Status,
        Cmd::ForceDispatch => Request::ForceDispatch,
        Cmd::Exec { sql } => Request::Exec { sql: sql.clone() },
        Cmd::Link { peer, state } => Request::Link { peer: peer.clone(), online: matches!(state, LinkArg::Online) },
        Cmd::Mail { cmd: MailCmd::Send { to, subject, body, attachments, plain } } => Request::MailSend {
            to: to.clone(),
            subject: subject.clone(),
            body: body.clone(),
            attachments: attachments.iter().map(|p| absolute(p)).collect::<Result<_, _>>()?,
            encrypted: !plain,
        },
        Cmd::Mail { cmd: MailCmd::Inbox { save } } => {
            Request::MailInbox { save_dir: save.as_deref().map(absolute).transpose()? }
        }
        Cmd::Mail { cmd: MailCmd::Ack { id } } => Request::MailAck { id: id.clone() },
        Cmd::Journal { direction, queue } => Request::Journal {
            direction: direction.map(|d| match d {
                DirectionArg::Sent => "sent".into(),
                DirectionArg::Received => "received".into(),
            }),
            queue: queue.clone(),
        },
        Cmd::Dump { table } => Request::Dump { table: table.clone() },
        Cmd::Stop => Request::Shutdown,
        Cmd::Run { .. } | Cmd::Sim { .. } => unreachable!("handled locally"),
    })
}

fn cmd_client(cli: &Cli) -> Result<bool, String> {
    let id = node_id(cli.node.as_deref())?;
    let req = request(&cli.cmd)?;
    let reply = control::call(&state_dir(&id).socket(), &id, &req).map_err(|e| e.to_string())?;
    if cli.json {
        println!("{}", serde_json::to_string(&reply).expect("reply serializes"));
    } else if reply.ok {
        print!("{}", render::reply(&req, &reply.data));
    } else {
        eprintln!("qsync: {}", reply.error.as_deref().unwrap_or("request failed"));
    }
    Ok(reply.ok)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Run { policy } => cmd_run(&cli, policy.as_deref()).map(|_| true),
        Cmd::Sim { scenario, max_time } => cmd_sim(&cli, scenario, *max_time),
        _ => cmd_client(&cli),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => fail(e),
    }
}
