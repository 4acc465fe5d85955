//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

mod common;

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use common::*;
use qsync_core::dtx::{TxnId, TxnMode};
use qsync_core::mail::{Attachment, MailEnvelope};
use qsync_core::queue::{Direction, JournalFilter, JournalOutcome, MessageKind, QueueError, QueueRef, StreamKey, SYNC_QUEUE};
use qsync_core::sim::{LinkOp, SimConfig, SimReport, Simulator};
use qsync_core::sql::parse_statement;
use qsync_core::store::{ApplyOutcome, Store};
use qsync_core::sync::SyncBody;
use qsync_core::wal::MemStorage;
use qsync_core::{Error, Node, NodeConfig, NodeId, TopologyConfig};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 7;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

struct Finished {
    run: ConvergenceRun,
    report: SimReport,
    wall: Duration,
}

fn finish_convergence(seed: u64) -> Result<Finished, String> {
    let mut run = convergence_run(seed);
    let started = Instant::now();
    let report = run.sim.run_until_quiet().map_err(|e| e.to_string())?;
    Ok(Finished { run, report, wall: started.elapsed() })
}

fn c1(f: &Finished) -> Outcome {
    let failed = f.run.sim.client_results().iter().filter(|c| c.outcome.is_err()).count();
    ensure(failed == 0, || format!("{failed} client statements failed"))?;
    ensure(f.report.converged, || "nodes did not converge".into())?;
    let expected = convergence_oracle(&f.run.workloads).digest();
    for (id, d) in &f.report.digests {
        ensure(d == &expected, || format!("{id} digest {d} != oracle {expected}"))?;
    }
    ensure(f.wall < Duration::from_secs(60), || format!("took {:?}", f.wall))?;
    let s = &f.report.stats;
    ensure(s.frames_lost > 0 && s.frames_duplicated > 0, || "no faults were injected".into())?;
    Ok(format!(
        "{} nodes match oracle after {} simulated ms, {:.2?} wall, {} frames lost, {} duplicated",
        f.report.digests.len(),
        f.report.finished_at,
        f.wall,
        s.frames_lost,
        s.frames_duplicated
    ))
}

fn c2() -> Outcome {
    const N: usize = 1000;
    let topo = TopologyConfig::star("C", &["B1"]).unwrap();
    let mut sim = Simulator::new(topo, SimConfig { seed: SEED, ..Default::default() }).map_err(|e| e.to_string())?;
    let (b1, c) = (node("B1"), node("C"));
    sim.client_exec(&c, "CREATE TABLE m (id INT, v TEXT)");
    sim.run_until_quiet().map_err(|e| e.to_string())?;
    sim.set_link(&b1, &c, LinkOp::Dup(0.2)).map_err(|e| e.to_string())?;
    sim.set_link(&b1, &c, LinkOp::Loss(0.1)).map_err(|e| e.to_string())?;
    let t0 = sim.now() + 10;
    for i in 0..N {
        sim.schedule(
            t0 + 25 * i as u64,
            qsync_core::sim::Action::ClientExec { node: b1.clone(), sql: format!("INSERT INTO m VALUES ({i}, 'v{i}')") },
        );
    }
    sim.run_until_quiet().map_err(|e| e.to_string())?;
    let sent = sim.node(&b1).unwrap().journal_list(&JournalFilter {
        direction: Some(Direction::Sent),
        queue: Some(SYNC_QUEUE.into()),
        kind: Some(MessageKind::Sync),
    });
    ensure(sent.len() == N, || format!("B1 sent {} messages, wanted {N}", sent.len()))?;
    let central = sim.node(&c).unwrap();
    let key = StreamKey { origin: b1.clone(), dest_node: c.clone(), queue: SYNC_QUEUE.into() };
    let counts: Vec<u32> =
        central.queues().accept_counts().iter().filter(|((k, _), _)| *k == key).map(|(_, n)| *n).collect();
    ensure(counts.len() == N, || format!("{} distinct messages accepted", counts.len()))?;
    ensure(counts.iter().all(|n| *n == 1), || "a message was accepted twice".into())?;
    let mut applied: BTreeMap<_, u32> = BTreeMap::new();
    for e in central.store().applied_log().iter().filter(|e| e.origin == b1 && e.outcome == ApplyOutcome::Applied) {
        *applied.entry((e.source.clone(), e.stmt_index)).or_default() += 1;
    }
    ensure(applied.len() == N, || format!("{} (message, stmt) pairs applied", applied.len()))?;
    ensure(applied.values().all(|n| *n == 1), || "a statement was applied twice".into())?;
    let rows = central.store().table("m").map_or(0, |t| t.rows.len());
    ensure(rows == N, || format!("{rows} rows at C"))?;
    let s = sim.stats();
    ensure(s.frames_duplicated > 0 && s.frames_lost > 0, || "no faults were injected".into())?;
    Ok(format!("{N} messages accepted once and applied once; {} frames lost, {} duplicated", s.frames_lost, s.frames_duplicated))
}

fn c3(f: &Finished) -> Outcome {
    let mut pairs = 0;
    let mut checked = 0;
    for id in f.run.sim.node_ids() {
        let n = f.run.sim.node(&id).unwrap();
        let mut last: BTreeMap<NodeId, u64> = BTreeMap::new();
        for e in n.store().applied_log() {
            let prev = last.insert(e.origin.clone(), e.origin_record_id).unwrap_or(0);
            ensure(e.origin_record_id > prev, || {
                format!("{id}: record {} from {} after {prev}", e.origin_record_id, e.origin)
            })?;
            checked += 1;
        }
        pairs += last.len();
    }
    Ok(format!("{checked} applied entries over {pairs} (origin, receiver) pairs, 0 violations"))
}

fn c4() -> Outcome {
    let report = crash::sweep(10);
    ensure(report.points >= 10, || format!("only {} crash points", report.points))?;
    ensure(report.violations.is_empty(), || format!("{} violations, first: {}", report.violations.len(), report.violations[0]))?;
    Ok(format!("{} crash points x 10 seeds = {} trials, all atomic", report.points, report.trials))
}

fn c5() -> Outcome {
    let topo = Arc::new(TopologyConfig::star("C", &["B1"]).unwrap());
    let mem = MemStorage::new();
    let cfg = NodeConfig::new(node("B1"), topo);
    let (mut n, _) = Node::open(cfg.clone(), Box::new(mem.reopen())).map_err(|e| e.to_string())?;
    let q = n.create_queue("plain", false).map_err(|e| e.to_string())?;
    let t = n.begin(TxnMode::External).txn_id;
    let local = n.send(Some(t), &q, MessageKind::Sync, b"x".to_vec());
    ensure(matches!(local, Err(Error::Queue(QueueError::NonTransactionalQueue(_)))), || format!("local send gave {local:?}"))?;
    let remote = QueueRef::new(node("C"), "plain", false);
    let r = n.send(Some(t), &remote, MessageKind::Sync, b"x".to_vec());
    ensure(matches!(r, Err(Error::Queue(QueueError::NonTransactionalQueue(_)))), || format!("remote send gave {r:?}"))?;
    n.abort(t).map_err(|e| e.to_string())?;
    let again = n.create_queue("plain", true);
    ensure(matches!(again, Err(Error::Queue(QueueError::AlreadyExists(_)))), || format!("recreate gave {again:?}"))?;
    drop(n);
    let (n, _) = Node::open(cfg, Box::new(mem.reopen())).map_err(|e| e.to_string())?;
    ensure(n.queue_ref("plain").map(|q| q.transactional) == Some(false), || "flag changed across restart".into())?;
    Ok("transactional send to a non-transactional queue is refused; the flag is fixed at creation".into())
}

fn c6() -> Outcome {
    const N: usize = 50;
    let topo = TopologyConfig::star("C", &["B1"]).unwrap();
    let mut sim = Simulator::new(topo, SimConfig { seed: SEED, ..Default::default() }).map_err(|e| e.to_string())?;
    let (b1, c) = (node("B1"), node("C"));
    sim.client_exec(&c, "CREATE TABLE o (id INT, v TEXT)");
    sim.run_until_quiet().map_err(|e| e.to_string())?;
    sim.set_link(&b1, &c, LinkOp::Offline).map_err(|e| e.to_string())?;
    let t0 = sim.now() + 10;
    for i in 0..N {
        sim.schedule(t0 + 20 * i as u64, qsync_core::sim::Action::ClientExec { node: b1.clone(), sql: format!("INSERT INTO o VALUES ({i}, 'x')") });
    }
    sim.run_until(t0 + 20 * N as u64 + 5_000).map_err(|e| e.to_string())?;
    let held: usize = sim.node(&b1).unwrap().queues().outgoing()[&c]
        .messages()
        .map(|m| SyncBody::decode(&m.body).map(|b| b.records.len()).unwrap_or(0))
        .sum();
    ensure(held == N, || format!("outgoing queue holds {held} of {N} statements"))?;
    let applied_offline = sim.node(&c).unwrap().store().applied_log().len();
    ensure(applied_offline == 0, || format!("{applied_offline} applied while offline"))?;
    let on = sim.now();
    sim.set_link(&b1, &c, LinkOp::Online).map_err(|e| e.to_string())?;
    sim.run_until(on + 10_000).map_err(|e| e.to_string())?;
    let applied = sim.node(&c).unwrap().store().applied_log().iter().filter(|e| e.origin == b1).count();
    ensure(applied == N, || format!("{applied} of {N} applied within 10 s"))?;
    let report = sim.run_until_quiet().map_err(|e| e.to_string())?;
    ensure(report.converged, || "digests differ".into())?;
    Ok(format!("{N} statements held offline, all applied at C within 10 s of ONLINE"))
}

fn c7(f: &Finished) -> Outcome {
    let b1 = node("B1");
    let origin_records = f.run.sim.node(&b1).unwrap().store().records().filter(|r| r.origin == b1).count();
    for id in f.run.sim.node_ids() {
        let n = f.run.sim.node(&id).unwrap();
        let self_origin = n.store().applied_log().iter().filter(|e| &e.origin == n.id()).count();
        ensure(self_origin == 0, || format!("{id} re-applied {self_origin} of its own statements"))?;
        if id != b1 {
            let from_b1 = n.store().applied_log().iter().filter(|e| e.origin == b1).count();
            ensure(from_b1 == origin_records, || format!("{id} applied {from_b1} of {origin_records} B1 statements"))?;
        }
    }
    Ok(format!("{origin_records} B1 statements applied at C and B2..B5, none echoed back"))
}

/// Looks for any 16-byte aligned piece of the attachment, raw or base64
/// encoded, inside the captured frames.
fn leaks(attachment: &[u8], frames: &[(NodeId, NodeId, Vec<u8>)]) -> usize {
    let mut needles: HashSet<&[u8]> = attachment.chunks_exact(16).collect();
    let b64 = B64.encode(attachment);
    needles.extend(b64.as_bytes().chunks_exact(16));
    frames.iter().map(|(_, _, bytes)| bytes.windows(16).filter(|w| needles.contains(w)).count()).sum()
}

fn mail_run(encrypted: bool) -> Result<(Simulator, MailEnvelope), String> {
    let topo = five_branch_topology().with_mail_key(*b"an example 32-byte mail key....!");
    let mut sim = Simulator::new(topo, SimConfig { seed: SEED, ..Default::default() }).map_err(|e| e.to_string())?;
    let mut data = vec![0u8; 1 << 20];
    ChaCha8Rng::seed_from_u64(SEED).fill_bytes(&mut data);
    let env = MailEnvelope {
        from: node("B1"),
        to: node("B3"),
        subject: "ledger export".into(),
        body: "see attachment".into(),
        attachments: vec![Attachment { name: "ledger.bin".into(), data }],
        encrypted,
    };
    sim.capture_frames(true);
    sim.send_mail(&node("B1"), &env).map_err(|e| e.to_string())?;
    sim.run_until_quiet().map_err(|e| e.to_string())?;
    Ok((sim, env))
}

fn c8() -> Outcome {
    let (mut sim, env) = mail_run(true)?;
    let inbox = sim.node_mut(&node("B3")).unwrap().fetch_mail().map_err(|e| e.to_string())?;
    ensure(inbox.len() == 1, || format!("{} mails in B3 inbox", inbox.len()))?;
    ensure(inbox[0].envelope == env, || "delivered envelope differs".into())?;
    ensure(inbox[0].hops.contains(&node("C")), || format!("hops {:?}", inbox[0].hops))?;
    let mail_journal = |id: &str, d: Direction| {
        sim.node(&node(id))
            .unwrap()
            .journal_list(&JournalFilter { direction: Some(d), queue: None, kind: Some(MessageKind::Mail) })
            .into_iter()
            .filter(|e| e.outcome == JournalOutcome::Committed)
            .count()
    };
    ensure(mail_journal("B1", Direction::Sent) == 1, || "no SENT entry at B1".into())?;
    ensure(mail_journal("B3", Direction::Received) == 1, || "no RECEIVED entry at B3".into())?;
    let data = &env.attachments[0].data;
    let captured: usize = sim.captured().iter().map(|f| f.2.len()).sum();
    let found = leaks(data, sim.captured());
    ensure(found == 0, || format!("{found} plaintext chunks on the wire"))?;
    let (plain, _) = mail_run(false)?;
    let control = leaks(data, plain.captured());
    ensure(control > 0, || "leak detector missed an unencrypted mail".into())?;
    Ok(format!(
        "1 MiB attachment delivered byte-identical via C; 0 plaintext chunks in {captured} frame bytes (unencrypted control: {control})"
    ))
}

fn c9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut statements = 0;
    for round in 0..1000 {
        let script = random_script(&mut rng, 40);
        let mut oracle = Oracle::default();
        let mut store = Store::new();
        for (i, s) in script.iter().enumerate() {
            let sql = s.to_sql();
            let stmt = parse_statement(&sql).map_err(|e| format!("{sql}: {e}"))?;
            let text = stmt.to_sql();
            let reparsed = parse_statement(&text).map_err(|e| format!("{text}: {e}"))?;
            ensure(reparsed == stmt && reparsed.to_sql() == text, || format!("format/parse drift on {sql}"))?;
            let txn = TxnId(i as u64 + 1);
            store.begin_write(txn).map_err(|e| e.to_string())?;
            let got = store.execute(txn, &stmt).ok().map(|r| r.rows_affected);
            if got.is_some() {
                let effects = store.prepare(txn).map_err(|e| e.to_string())?;
                store.apply(&effects);
            }
            store.release(txn);
            let want = oracle.apply(s);
            ensure(got == want, || format!("round {round}: {sql} gave {got:?}, oracle {want:?}"))?;
            statements += 1;
        }
        ensure(store.state_digest(None) == oracle.digest(), || format!("round {round}: digest differs"))?;
    }
    let fuzz = std::panic::catch_unwind(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(SEED);
        let alphabet = b"CREATE TABLE INSERT INTO VALUES UPDATE SET DELETE FROM WHERE AND INT TEXT (),;='-0123456789 \n\t";
        for i in 0..100_000 {
            let len = rng.gen_range(0..48);
            let bytes: Vec<u8> = if i % 2 == 0 {
                (0..len).map(|_| alphabet[rng.gen_range(0..alphabet.len())]).collect()
            } else {
                (0..len).map(|_| rng.gen()).collect()
            };
            let _ = parse_statement(&String::from_utf8_lossy(&bytes));
        }
    });
    ensure(fuzz.is_ok(), || "parser panicked during fuzzing".into())?;
    Ok(format!("1000 scripts ({statements} statements) match the oracle; parse/format stable; 100000 fuzz inputs, 0 panics"))
}

fn journals(sim: &Simulator) -> BTreeMap<NodeId, Vec<u8>> {
    sim.node_ids()
        .into_iter()
        .map(|id| {
            let j = serde_json::to_vec(sim.node(&id).unwrap().queues().journal()).expect("journal serializes");
            (id, j)
        })
        .collect()
}

fn c10(first: &Finished) -> Outcome {
    let second = finish_convergence(SEED)?;
    ensure(first.report.digests == second.report.digests, || "digests differ between runs".into())?;
    let (a, b) = (journals(&first.run.sim), journals(&second.run.sim));
    for (id, bytes) in &a {
        ensure(b.get(id) == Some(bytes), || format!("journal of {id} differs between runs"))?;
    }
    let total: usize = a.values().map(Vec::len).sum();
    Ok(format!("two runs with seed {SEED}: identical digests and {total} journal bytes"))
}

fn main() {
    // The criterion-1 run is shared by the ordering, no-echo and determinism checks.
    let first = finish_convergence(SEED);
    let shared = |check: fn(&Finished) -> Outcome| -> Outcome {
        match &first {
            Ok(f) => check(f),
            Err(e) => Err(format!("convergence run failed: {e}")),
        }
    };
    let results: Vec<(&str, Outcome)> = vec![
        ("C1 convergence under faults", shared(c1)),
        ("C2 exactly-once delivery", c2()),
        ("C3 per-origin ordering", shared(c3)),
        ("C4 crash atomicity sweep", c4()),
        ("C5 transactional-queue rule", c5()),
        ("C6 offline catch-up", c6()),
        ("C7 no-echo fan-out", shared(c7)),
        ("C8 encrypted mail", c8()),
        ("C9 parser/store oracle", c9()),
        ("C10 determinism", shared(c10)),
    ];
    let mut failed = 0;
    for (name, r) in &results {
        match r {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
        }
    }
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
