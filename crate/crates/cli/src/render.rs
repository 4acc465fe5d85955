//! Human-readable rendering of daemon replies.

use serde_json::Value;

use crate::control::Request;

fn s(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => "-".into(),
        other => other.to_string(),
    }
}

fn n(v: &Value) -> u64 {
    v.as_u64().unwrap_or(0)
}

pub fn status(v: &Value) -> String {
    let mut out = format!("node {} ({})\n", s(&v["node"]), s(&v["role"]));
    out.push_str(&format!("digest {}\n", s(&v["digest"])));
    if v["halted"].as_bool() == Some(true) {
        out.push_str("HALTED\n");
    }
    out.push_str("queues:\n");
    for q in v["queues"].as_array().into_iter().flatten() {
        let kind = if q["transactional"].as_bool() == Some(true) { "txn" } else { "plain" };
        out.push_str(&format!("  {:<16} {:<5} depth {}\n", s(&q["name"]), kind, n(&q["depth"])));
    }
    out.push_str("outgoing:\n");
    for o in v["outgoing"].as_array().into_iter().flatten() {
        let link = if o["online"].as_bool() == Some(true) { "ONLINE" } else { "OFFLINE" };
        out.push_str(&format!("  {:<16} pending {:<6} {link}\n", s(&o["next_hop"]), n(&o["pending"])));
    }
    out.push_str(&format!("outbox pending: {}\n", n(&v["pending_records"])));
    out.push_str(&format!("active transactions: {}\n", n(&v["active_txns"])));
    out.push_str(&format!("conflict warnings: {}\n", n(&v["conflict_warnings"])));
    let dead = v["dead_letters"].as_array().cloned().unwrap_or_default();
    out.push_str(&format!("dead letters: {}\n", dead.len()));
    for d in &dead {
        out.push_str(&format!("  {:<12} {:<18} {}\n", s(&d["source"]), s(&d["reason"]), s(&d["detail"])));
    }
    out
}

fn inbox(v: &Value) -> String {
    let mails = v.as_array().cloned().unwrap_or_default();
    if mails.is_empty() {
        return "inbox empty\n".into();
    }
    let mut out = String::new();
    for m in &mails {
        let hops: Vec<String> = m["hops"].as_array().into_iter().flatten().map(s).collect();
        out.push_str(&format!(
            "{} from {} via {}{}\n  subject: {}\n",
            s(&m["mail_id"]),
            s(&m["from"]),
            hops.join(" > "),
            if m["encrypted"].as_bool() == Some(true) { " (encrypted)" } else { "" },
            s(&m["subject"])
        ));
        if let Some(body) = m["body"].as_str().filter(|b| !b.is_empty()) {
            for line in body.lines() {
                out.push_str(&format!("  | {line}\n"));
            }
        }
        for a in m["attachments"].as_array().into_iter().flatten() {
            out.push_str(&format!("  attachment {} ({} bytes)", s(&a["name"]), n(&a["bytes"])));
            if let Some(p) = a["saved_to"].as_str() {
                out.push_str(&format!(" saved to {p}"));
            }
            out.push('\n');
        }
    }
    out
}

fn journal(v: &Value) -> String {
    let mut out = String::new();
    for e in v.as_array().into_iter().flatten() {
        let id = format!("{}#{}", s(&e["id"]["origin"]), n(&e["id"]["seq"]));
        out.push_str(&format!(
            "{:>8} {:<8} {:<10} {:<12} peer {:<8} {:<5} {}\n",
            n(&e["timestamp"]),
            s(&e["direction"]).to_uppercase(),
            id,
            s(&e["queue"]),
            s(&e["peer"]),
            s(&e["kind"]),
            s(&e["outcome"]).to_uppercase()
        ));
    }
    out
}

fn dump(v: &Value) -> String {
    if let Some(text) = v["text"].as_str() {
        return text.to_string();
    }
    let mut out = String::from("tables:\n");
    for t in v["tables"].as_array().into_iter().flatten() {
        let cols: Vec<String> = t["columns"].as_array().into_iter().flatten().map(s).collect();
        out.push_str(&format!("  {} ({}) rows {}\n", s(&t["name"]), cols.join(", "), n(&t["rows"])));
    }
    out.push_str("query table:\n");
    for r in v["records"].as_array().into_iter().flatten() {
        out.push_str(&format!(
            "  {:>5} {:<10} {}#{} {}\n",
            n(&r["record_id"]),
            s(&r["status"]).to_uppercase(),
            s(&r["origin"]),
            n(&r["origin_record_id"]),
            s(&r["sql"])
        ));
    }
    out
}

pub fn reply(req: &Request, data: &Value) -> String {
    match req {
        Request::Status => status(data),
        Request::ForceDispatch => "dispatch requested\n".into(),
        Request::Exec { .. } => {
            format!("{} row(s) affected, record {} pending dispatch\n", n(&data["rows_affected"]), n(&data["record_id"]))
        }
        Request::MailSend { .. } => format!("queued mail {}\n", s(&data["mail_id"])),
        Request::MailInbox { .. } => inbox(data),
        Request::MailAck { .. } => format!("acknowledged {}\n", s(&data["acked"])),
        Request::Journal { .. } => journal(data),
        Request::Dump { .. } => dump(data),
        Request::Link { .. } => {
            let state = if data["online"].as_bool() == Some(true) { "ONLINE" } else { "OFFLINE" };
            format!("link to {} is {state}\n", s(&data["peer"]))
        }
        Request::Shutdown => "daemon stopping\n".into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn idle_status_shows_zeros() {
        let v = json!({
            "node": "B1", "role": "Branch", "digest": "ab", "halted": false,
            "queues": [{"name": "sync_in", "transactional": true, "depth": 0}],
            "outgoing": [], "pending_records": 0, "active_txns": 0,
            "conflict_warnings": 0, "dead_letters": []
        });
        let text = status(&v);
        assert!(text.contains("sync_in          txn   depth 0"));
        assert!(text.contains("outbox pending: 0"));
        assert!(text.contains("dead letters: 0"));
    }

    #[test]
    fn dead_letters_are_listed_with_reason() {
        let v = json!({"dead_letters": [{"source": "C#4", "reason": "EXEC_FAIL", "detail": "duplicate key"}]});
        assert!(status(&v).contains("C#4          EXEC_FAIL          duplicate key"));
    }
}
