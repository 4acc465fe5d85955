//! `qsync sim`: runs a scenario script against a simulated enterprise.

use std::collections::BTreeMap;

use qsync_core::sim::{parse_scenario, SimConfig, SimError, SimStats, Simulator};
use qsync_core::{NodeId, TopologyConfig};
use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Converged,
    Diverged,
    MaxTimeExceeded,
    Stalled,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Converged => "CONVERGED",
            Verdict::Diverged => "DIVERGED",
            Verdict::MaxTimeExceeded => "MAX_TIME_EXCEEDED",
            Verdict::Stalled => "STALLED",
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SimOutcome {
    pub verdict: Verdict,
    pub finished_at: u64,
    pub digests: BTreeMap<NodeId, String>,
    pub stats: SimStats,
    pub client_ok: usize,
    pub client_failed: usize,
}

pub fn run(topo: TopologyConfig, script: &str, seed: u64, max_time_ms: u64) -> Result<SimOutcome, String> {
    let events = parse_scenario(script).map_err(|e| e.to_string())?;
    let cfg = SimConfig { seed, max_time_ms, ..Default::default() };
    let mut sim = Simulator::new(topo, cfg).map_err(|e| e.to_string())?;
    sim.load_script(&events);
    let (verdict, finished_at) = match sim.run_until_quiet() {
        Ok(r) if r.converged => (Verdict::Converged, r.finished_at),
        Ok(r) => (Verdict::Diverged, r.finished_at),
        Err(SimError::MaxTimeExceeded { now }) => (Verdict::MaxTimeExceeded, now),
        Err(SimError::Stalled { now, .. }) => (Verdict::Stalled, now),
        Err(e) => return Err(e.to_string()),
    };
    let digests = sim
        .node_ids()
        .into_iter()
        .filter_map(|id| sim.node(&id).map(|n| (id.clone(), n.state_digest(None))))
        .collect();
    let client_failed = sim.client_results().iter().filter(|c| c.outcome.is_err()).count();
    Ok(SimOutcome {
        verdict,
        finished_at,
        digests,
        stats: sim.stats().clone(),
        client_ok: sim.client_results().len() - client_failed,
        client_failed,
    })
}

pub fn render(o: &SimOutcome) -> String {
    let mut out = format!("{} at {} ms\n", o.verdict.as_str(), o.finished_at);
    for (id, d) in &o.digests {
        out.push_str(&format!("digest {id} {d}\n"));
    }
    let s = &o.stats;
    out.push_str(&format!(
        "frames sent={} delivered={} lost={} duplicated={} rejected={}\n",
        s.frames_sent, s.frames_delivered, s.frames_lost, s.frames_duplicated, s.decode_errors
    ));
    out.push_str(&format!("client statements ok={} failed={}\n", o.client_ok, o.client_failed));
    out
}
