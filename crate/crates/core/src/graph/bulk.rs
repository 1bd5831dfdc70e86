//! Newline-delimited JSON bulk loading.
//!
//! ```text
//! {"_kind":"vertex","_type":"Actor","name":"Tom Hanks"}
//! {"_kind":"edge","_type":"acted","_src_type":"Film","_src":"Big","_dst_type":"Actor","_dst":"Tom Hanks"}
//! ```
//!
//! All vertices are created before any edge, in batched transactions. A
//! record that fails is reported and dropped from its batch; the rest of
//! the batch is retried.

use serde::Serialize;
use serde_json::{Map, Value as J};

use super::{Graph, Record, Value};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct LoadReport {
    pub vertices: usize,
    pub edges: usize,
    /// `line N: CODE message`
    pub errors: Vec<String>,
}

struct Line {
    no: usize,
    obj: Map<String, J>,
}

fn str_field<'a>(obj: &'a Map<String, J>, key: &str) -> Result<&'a str> {
    obj.get(key)
        .and_then(J::as_str)
        .ok_or_else(|| Error::SchemaViolation(format!("missing {key}")))
}

fn pk_value(g: &Graph, node: crate::simnet::NodeId, type_name: &str, j: Option<&J>) -> Result<Value> {
    let ti = g.type_info(node, type_name)?;
    let f = ti
        .schema
        .pk_field()
        .ok_or_else(|| Error::UnknownType(format!("{type_name} is not a vertex type")))?;
    let j = j.ok_or_else(|| Error::SchemaViolation("missing endpoint key".into()))?;
    Value::from_json(&f.ty, j)
}

fn load_edge(g: &Graph, tx: &mut crate::store::Txn, obj: &Map<String, J>) -> Result<()> {
    let et = str_field(obj, "_type")?;
    let st = str_field(obj, "_src_type")?;
    let dt = str_field(obj, "_dst_type")?;
    let sp = pk_value(g, tx.node(), st, obj.get("_src"))?;
    let dp = pk_value(g, tx.node(), dt, obj.get("_dst"))?;
    let eti = g.type_info(tx.node(), et)?;
    let attrs = Record::from_json(&eti.schema, obj)?;
    g.create_edge_by_pk(tx, st, &sp, et, dt, &dp, attrs)
}

/// Loads `text` into `g`, `batch` records per transaction.
pub fn load_ndjson(g: &Graph, text: &str, batch: usize) -> Result<LoadReport> {
    let mut report = LoadReport::default();
    let mut vertices = Vec::new();
    let mut edges = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let no = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let obj = match serde_json::from_str::<J>(raw) {
            Ok(J::Object(o)) => o,
            Ok(_) => {
                report.errors.push(format!("line {no}: PARSE_ERROR not an object"));
                continue;
            }
            Err(e) => {
                report.errors.push(format!("line {no}: PARSE_ERROR {e}"));
                continue;
            }
        };
        match obj.get("_kind").and_then(J::as_str) {
            Some("vertex") => vertices.push(Line { no, obj }),
            Some("edge") => edges.push(Line { no, obj }),
            other => report
                .errors
                .push(format!("line {no}: SCHEMA_VIOLATION bad _kind {other:?}")),
        }
    }
    let node = g.db().coordinator();
    for phase in [vertices, edges] {
        for chunk in phase.chunks(batch.max(1)) {
            let mut live: Vec<&Line> = chunk.iter().collect();
            loop {
                let mut failed = None;
                let res = g.db().store().run(node, |tx| {
                    failed = None;
                    for (i, l) in live.iter().enumerate() {
                        let r = match l.obj["_kind"].as_str() {
                            Some("vertex") => str_field(&l.obj, "_type")
                                .and_then(|t| g.create_vertex_json(tx, t, &l.obj).map(|_| ())),
                            _ => load_edge(g, tx, &l.obj),
                        };
                        if let Err(e) = r {
                            if !e.is_retryable() {
                                failed = Some((i, e.clone()));
                            }
                            return Err(e);
                        }
                    }
                    Ok(())
                });
                match (res, failed.take()) {
                    (Ok(()), _) => {
                        for l in &live {
                            if l.obj["_kind"].as_str() == Some("vertex") {
                                report.vertices += 1;
                            } else {
                                report.edges += 1;
                            }
                        }
                        break;
                    }
                    (Err(_), Some((i, e))) => {
                        report.errors.push(format!("line {}: {} {e}", live[i].no, e.code()));
                        live.remove(i);
                    }
                    (Err(e), None) => return Err(e),
                }
            }
        }
    }
    Ok(report)
}
