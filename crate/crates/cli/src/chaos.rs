//! Scripted fault scenarios.
//!
//! A scenario is a JSON object with a schema and ordered steps:
//!
//! ```text
//! {"graph": "g", "schema": [...],
//!  "steps": [
//!    {"op": "txn", "ops": [{"op": "create_vertex", "type": "V", "record": {"k": "A"}}, ...]},
//!    {"op": "create_edge", "type": "e", "src": {"type": "V", "pk": "A"}, "dst": {"type": "V", "pk": "B"}},
//!    {"durable": "outage" | "restore" | "cut_after", "n": 2},
//!    {"flush_only": ["A", "A->B"]},
//!    {"fault": {"node": 0, "kind": "process_crash"}},
//!    {"sweep": true}, {"watermark": true}, {"advance_clock": 600}, {"run_tasks": true},
//!    {"crash": "power_loss_all"},
//!    {"expect": {"vertices": ["A"], "edges": [["A", "e", "B"]]}},
//!    {"recover": "best-effort", "expect": {...}, "skipped_edges": 1},
//!    {"recover": "consistent", "expect": "prefix_at_watermark"}
//!  ]}
//! ```
//!
//! Mutations outside a `txn` step run in a transaction of their own.
//! `expect` checks the live cluster; `recover` rebuilds a fresh cluster
//! from the durable tables and checks that. Every recovered state is also
//! checked for edges whose endpoints were not recovered.
//!
//! The runner keeps a shadow log of the graph state after each committed
//! mutation step, stamped with a snapshot taken right after the commit.
//! `"prefix_at_watermark"` expects the last state whose stamp is at or
//! below the recovered watermark, `"final"` the state before the crash.

use a1lite::drstore::{decode_edge_key, decode_vertex_key, DrMode, LogTable, RecoveryMode, Replicator};
use a1lite::graph::{Graph, Record, Schema, Value};
use a1lite::simnet::{FaultKind, NodeId};
use a1lite::store::Txn;
use anyhow::{anyhow, bail, Context, Result};
use serde::Deserialize;
use serde_json::{json, Map, Value as J};

use crate::app::{diff_state, export_json, parse_dr_mode, recover_into_fresh, CliConfig};

#[derive(Clone, Debug, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    #[serde(default = "default_graph")]
    pub graph: String,
    /// Replication mode of the scenario graph; `both` when omitted.
    #[serde(default)]
    pub dr_mode: Option<String>,
    pub schema: J,
    pub steps: Vec<J>,
}

fn default_graph() -> String {
    "g".into()
}

#[derive(Clone, Debug, Default)]
pub struct ChaosReport {
    pub name: String,
    pub steps: Vec<J>,
    pub assertions: usize,
    pub failures: Vec<String>,
}

impl ChaosReport {
    pub fn to_json(&self) -> J {
        json!({
            "name": self.name,
            "steps": self.steps,
            "assertions": self.assertions,
            "failures": self.failures,
            "passed": self.failures.is_empty(),
        })
    }
}

fn str_of<'a>(o: &'a J, key: &str) -> Result<&'a str> {
    o.get(key).and_then(J::as_str).ok_or_else(|| anyhow!("step needs a string {key:?}: {o}"))
}

fn pk_of(g: &Graph, node: NodeId, ty: &str, j: &J) -> a1lite::Result<Value> {
    let ti = g.type_info(node, ty)?;
    let f = ti
        .schema
        .pk_field()
        .ok_or_else(|| a1lite::Error::SchemaViolation(format!("{ty} has no primary key")))?;
    Value::from_json(&f.ty, j)
}

fn endpoint(g: &Graph, tx: &mut Txn, o: &J, key: &str) -> a1lite::Result<(String, Value)> {
    let e = o.get(key).ok_or_else(|| a1lite::Error::SchemaViolation(format!("missing {key}")))?;
    let ty = e.get("type").and_then(J::as_str).unwrap_or_default().to_string();
    let pk = pk_of(g, tx.node(), &ty, e.get("pk").unwrap_or(&J::Null))?;
    Ok((ty, pk))
}

fn record_of(g: &Graph, node: NodeId, ty: &str, o: &J) -> a1lite::Result<Map<String, J>> {
    g.type_info(node, ty)?;
    Ok(o.get("record").and_then(J::as_object).cloned().unwrap_or_default())
}

fn apply_op(g: &Graph, tx: &mut Txn, o: &J) -> a1lite::Result<()> {
    let bad = |m: &str| a1lite::Error::SchemaViolation(m.to_string());
    let op = o.get("op").and_then(J::as_str).ok_or_else(|| bad("missing op"))?;
    let ty = o.get("type").and_then(J::as_str).ok_or_else(|| bad("missing type"))?;
    let node = tx.node();
    match op {
        "create_vertex" => {
            let rec = record_of(g, node, ty, o)?;
            g.create_vertex_json(tx, ty, &rec).map(|_| ())
        }
        "update_vertex" => {
            let rec = record_of(g, node, ty, o)?;
            let ti = g.type_info(node, ty)?;
            let pkf = ti.schema.pk_field().ok_or_else(|| bad("no primary key"))?;
            let pk = pk_of(g, node, ty, rec.get(&pkf.name).unwrap_or(&J::Null))?;
            g.update_vertex(tx, ty, &pk, Record::from_json(&ti.schema, &rec)?)
        }
        "delete_vertex" => {
            let pk = pk_of(g, node, ty, o.get("pk").unwrap_or(&J::Null))?;
            g.delete_vertex(tx, ty, &pk)
        }
        "create_edge" => {
            let (st, sp) = endpoint(g, tx, o, "src")?;
            let (dt, dp) = endpoint(g, tx, o, "dst")?;
            let ti = g.type_info(node, ty)?;
            let attrs = Record::from_json(&ti.schema, &record_of(g, node, ty, o)?)?;
            g.create_edge_by_pk(tx, &st, &sp, ty, &dt, &dp, attrs)
        }
        "delete_edge" => {
            let (st, sp) = endpoint(g, tx, o, "src")?;
            let (dt, dp) = endpoint(g, tx, o, "dst")?;
            let missing = |p: &Value| a1lite::Error::NotFound(format!("vertex {p}"));
            let s = g.find_vertex(tx, &st, &sp)?.ok_or_else(|| missing(&sp))?;
            let d = g.find_vertex(tx, &dt, &dp)?.ok_or_else(|| missing(&dp))?;
            g.delete_edge(tx, ty, s, d)
        }
        other => Err(bad(&format!("unknown op {other:?}"))),
    }
}

fn plain(v: &Value) -> String {
    match v {
        Value::Str(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Flushes only the pending log entries named in `names`: vertex pks and
/// `src->dst` edges.
fn flush_only(r: &Replicator, node: NodeId, names: &[String]) -> Result<(usize, usize)> {
    r.durable.set_outage(false);
    let (mut flushed, mut skipped) = (0, 0);
    for (k, addr, e) in r.pending(node)? {
        let name = match e.table {
            LogTable::Vertex => plain(&decode_vertex_key(&e.key)?.1),
            LogTable::Edge => {
                let (_, s, _, _, d) = decode_edge_key(&e.key)?;
                format!("{}->{}", plain(&s), plain(&d))
            }
            LogTable::Schema => continue,
        };
        if names.contains(&name) {
            if !r.flush(node, &k, addr, &e) {
                bail!("flush of {name} failed");
            }
            flushed += 1;
        } else {
            skipped += 1;
        }
    }
    // what was not named stays unflushed
    r.durable.set_outage(true);
    Ok((flushed, skipped))
}

fn fault_kind(s: &str) -> Result<FaultKind> {
    Ok(match s {
        "process_crash" => FaultKind::ProcessCrash,
        "power_loss" => FaultKind::PowerLoss,
        "partition" => FaultKind::Partition,
        "restart" => FaultKind::Restart,
        other => bail!("unknown fault kind {other:?}"),
    })
}

fn dangling(state: &J) -> Vec<String> {
    let verts: Vec<&J> = state["vertices"].as_array().map(|a| a.iter().collect()).unwrap_or_default();
    let mut out = Vec::new();
    for e in state["edges"].as_array().into_iter().flatten() {
        if !verts.contains(&&e[0]) || !verts.contains(&&e[2]) {
            out.push(format!("dangling edge {e}"));
        }
    }
    out
}

/// Replays `s` on a fresh cluster built from `cfg`.
pub fn run_scenario(cfg: &CliConfig, s: &Scenario) -> Result<ChaosReport> {
    let tmp = tempfile::tempdir()?;
    let dir = cfg.durable_dir.clone().unwrap_or_else(|| tmp.path().to_path_buf());
    let db = cfg.open_db(Some(&dir))?;
    let mode = match &s.dr_mode {
        Some(m) => parse_dr_mode(m)?.ok_or_else(|| anyhow!("a chaos scenario needs a replicated graph"))?,
        None => DrMode::Both,
    };
    let g = db.create_graph_with(&s.graph, Some(mode))?;
    for schema in Schema::many_from_json(&s.schema.to_string())? {
        g.create_type(&schema)?;
    }
    let r = db.replicator(&s.graph)?.ok_or_else(|| anyhow!("graph is not replicated"))?;
    let path = db.durable_path(&s.graph).ok_or_else(|| anyhow!("no durable path"))?;
    r.refresh_watermark(db.coordinator())?;

    let stamp = || -> Result<u64> { Ok(db.store().create_transaction(db.coordinator(), true)?.read_ts().0) };
    let mut shadow: Vec<(u64, J)> = vec![(stamp()?, export_json(&g.export(db.coordinator())?))];
    let mut report = ChaosReport { name: s.name.clone(), ..Default::default() };
    let mut recoveries = 0u64;
    for (i, step) in s.steps.iter().enumerate() {
        let at = |m: String| format!("step {i}: {m}");
        let mut out = json!({"step": i});
        let obj = step.as_object().ok_or_else(|| anyhow!("step {i} is not an object"))?;
        if let Some(op) = obj.get("op").and_then(J::as_str) {
            let ops: Vec<J> = if op == "txn" {
                obj.get("ops").and_then(J::as_array).cloned().ok_or_else(|| anyhow!(at("txn needs ops".into())))?
            } else {
                vec![step.clone()]
            };
            let res = db.store().run(db.coordinator(), |tx| {
                for o in &ops {
                    apply_op(&g, tx, o)?;
                }
                Ok(())
            });
            out["op"] = json!(op);
            match res {
                Ok(()) => {
                    out["result"] = json!("committed");
                    shadow.push((stamp()?, export_json(&g.export(db.coordinator())?)));
                }
                Err(e) => {
                    out["result"] = json!(e.code());
                    let want = obj.get("expect_error").and_then(J::as_str);
                    if want != Some(e.code()) {
                        report.failures.push(at(format!("{op} failed: {} {e}", e.code())));
                    }
                }
            }
        } else if let Some(d) = obj.get("durable").and_then(J::as_str) {
            match d {
                "outage" => r.durable.set_outage(true),
                "restore" => r.durable.set_outage(false),
                "cut_after" => {
                    let n = obj.get("n").and_then(J::as_u64).ok_or_else(|| anyhow!(at("cut_after needs n".into())))?;
                    r.durable.cut_after(n as usize)
                }
                other => bail!(at(format!("unknown durable action {other:?}"))),
            }
            out["durable"] = json!(d);
        } else if let Some(names) = obj.get("flush_only") {
            let names: Vec<String> = serde_json::from_value(names.clone()).context("flush_only names")?;
            let (f, k) = flush_only(&r, db.coordinator(), &names)?;
            out["flushed"] = json!(f);
            out["left_pending"] = json!(k);
        } else if let Some(f) = obj.get("fault") {
            let node = f.get("node").and_then(J::as_u64).ok_or_else(|| anyhow!(at("fault needs node".into())))?;
            let kind = fault_kind(str_of(f, "kind")?)?;
            db.cluster().inject_fault(NodeId(node as u16), kind);
            out["fault"] = f.clone();
        } else if obj.contains_key("sweep") {
            match r.sweep(db.coordinator()) {
                Ok(sw) => {
                    out["flushed"] = json!(sw.flushed);
                    out["remaining"] = json!(sw.remaining);
                }
                Err(e) => out["sweep_error"] = json!(e.code()),
            }
        } else if obj.contains_key("watermark") {
            out["watermark"] = json!(r.refresh_watermark(db.coordinator())?.0);
        } else if let Some(t) = obj.get("advance_clock").and_then(J::as_u64) {
            db.cluster().advance_clock(t);
            out["advance_clock"] = json!(t);
        } else if obj.contains_key("run_tasks") {
            out["tasks_run"] = json!(db.run_tasks(1_000_000)?);
        } else if let Some(c) = obj.get("crash").and_then(J::as_str) {
            if c != "power_loss_all" {
                bail!(at(format!("unknown crash {c:?}")));
            }
            let nodes: Vec<NodeId> = db.cluster().node_ids().collect();
            for n in nodes {
                db.cluster().inject_fault(n, FaultKind::PowerLoss);
            }
            out["crash"] = json!(c);
            out["regions_left"] = json!(db.store().region_count());
        } else if let Some(m) = obj.get("recover").and_then(J::as_str) {
            let mode = RecoveryMode::parse(m).ok_or_else(|| anyhow!(at(format!("bad recovery mode {m:?}"))))?;
            recoveries += 1;
            let rcfg = CliConfig { seed: cfg.seed.wrapping_add(recoveries), ..cfg.clone() };
            let (_fresh, mut rep) = recover_into_fresh(&rcfg, &path, &s.graph, mode)?;
            rep["mode"] = json!(m);
            report.assertions += 1;
            for d in dangling(&rep["state"]) {
                report.failures.push(at(format!("{m} recovery: {d}")));
            }
            if let Some(want) = obj.get("expect") {
                let want = match want.as_str() {
                    Some("final") => shadow.last().unwrap().1.clone(),
                    Some("prefix_at_watermark") => {
                        let t_r = rep["t_r"].as_u64().unwrap_or(0);
                        shadow.iter().rev().find(|(ts, _)| *ts <= t_r).map(|(_, st)| st.clone()).unwrap_or_default()
                    }
                    Some(other) => bail!(at(format!("unknown expectation {other:?}"))),
                    None => want.clone(),
                };
                rep["expected"] = want.clone();
                report.assertions += 1;
                for d in diff_state(&want, &rep["state"]) {
                    report.failures.push(at(format!("{m} recovery: {d}")));
                }
            }
            if let Some(want) = obj.get("skipped_edges") {
                report.assertions += 1;
                if rep["skipped_edges"] != *want {
                    report.failures.push(at(format!("{m} recovery skipped {} edges, expected {want}", rep["skipped_edges"])));
                }
            }
            out["recover"] = rep;
        } else if let Some(want) = obj.get("expect") {
            report.assertions += 1;
            let got = export_json(&g.export(db.coordinator())?);
            for d in diff_state(want, &got) {
                report.failures.push(at(d));
            }
            out["state"] = got;
        } else {
            bail!(at(format!("unrecognised step {step}")));
        }
        report.steps.push(out);
    }
    Ok(report)
}
