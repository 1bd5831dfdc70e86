//! Random create/delete workload over vertices and edges with a model of
//! the expected edge set. Three hub vertices collect enough out-edges to
//! spill into the edge tree.

use std::collections::{BTreeMap, BTreeSet};

use a1lite::graph::{Direction, FieldType, ListMode, Record, Schema, Value};
use a1lite::simnet::ClusterConfig;
use a1lite::store::Addr;
use a1lite::{Database, Db, DbConfig};
use rand::seq::IteratorRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const HUBS: usize = 3;
const EDGE_TYPES: [&str; 2] = ["l", "m"];

#[derive(Debug, Default, Clone)]
pub struct OpsReport {
    pub ops: usize,
    pub vertices: usize,
    pub edges: usize,
    pub spilled_hubs: usize,
    pub dangling: usize,
    pub model_mismatch: bool,
    /// Objects still carrying the graph's tag after DeleteGraph and GC.
    pub leaked: usize,
    pub catalog_entries_left: usize,
}

pub fn open_db(nodes: usize, seed: u64) -> Database {
    Db::open(DbConfig::new(ClusterConfig::new(nodes, 3.min(nodes)).with_seed(seed))).unwrap()
}

fn rec(k: &str) -> Record {
    Record([(0, Value::Str(k.into()))].into_iter().collect())
}

enum Op {
    AddV(String),
    DelV(String),
    AddE(String, &'static str, String),
    DelE(String, &'static str, String),
}

/// Runs `n_ops` random operations, checks invariants, then deletes the
/// graph and audits the allocator.
pub fn random_graph_ops(seed: u64, n_ops: usize) -> OpsReport {
    let db = open_db(3, seed);
    let g = db.create_graph("ops").unwrap();
    g.create_type(&Schema::vertex("V", &[("k", FieldType::Str)], "k").unwrap()).unwrap();
    for t in EDGE_TYPES {
        g.create_type(&Schema::edge(t, &[]).unwrap()).unwrap();
    }
    let node = db.coordinator();
    let tag = g.view(node).unwrap().meta.tag;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut live: BTreeMap<String, Addr> = BTreeMap::new();
    let mut edges: BTreeSet<(String, &'static str, String)> = BTreeSet::new();
    let mut next = 0usize;
    let mut report = OpsReport::default();

    let hubs: Vec<String> = (0..HUBS).map(|i| format!("hub{i}")).collect();
    let mut pending: Vec<Op> = hubs.iter().map(|h| Op::AddV(h.clone())).collect();
    while report.ops < n_ops {
        // plan a batch of valid operations against the model
        let batch = rng.gen_range(1..=8).min(n_ops - report.ops);
        let mut planned_live = live.keys().cloned().collect::<BTreeSet<_>>();
        for op in &pending {
            if let Op::AddV(k) = op {
                planned_live.insert(k.clone());
            }
        }
        let mut planned_edges = edges.clone();
        while pending.len() < batch {
            let roll = rng.gen_range(0..100);
            let op = if roll < 25 || planned_live.len() < 2 * HUBS {
                next += 1;
                let k = format!("v{next}");
                planned_live.insert(k.clone());
                Op::AddV(k)
            } else if roll < 29 {
                let Some(k) = planned_live.iter().filter(|k| !k.starts_with("hub")).choose(&mut rng).cloned() else {
                    continue;
                };
                planned_live.remove(&k);
                planned_edges.retain(|(s, _, d)| *s != k && *d != k);
                Op::DelV(k)
            } else if roll < 94 {
                let t = EDGE_TYPES[rng.gen_range(0..2)];
                let src = if rng.gen_bool(0.85) {
                    hubs[rng.gen_range(0..HUBS)].clone()
                } else {
                    planned_live.iter().choose(&mut rng).unwrap().clone()
                };
                let dst = planned_live.iter().choose(&mut rng).unwrap().clone();
                if !planned_edges.insert((src.clone(), t, dst.clone())) {
                    continue;
                }
                Op::AddE(src, t, dst)
            } else {
                let Some(e) = planned_edges.iter().choose(&mut rng).cloned() else { continue };
                planned_edges.remove(&e);
                Op::DelE(e.0, e.1, e.2)
            };
            pending.push(op);
        }
        let ops = std::mem::take(&mut pending);
        let created = db
            .store()
            .run(node, |tx| {
                let mut made: BTreeMap<String, Addr> = BTreeMap::new();
                let addr_of = |k: &str, made: &BTreeMap<String, Addr>| made.get(k).or(live.get(k)).copied().unwrap();
                for op in &ops {
                    match op {
                        Op::AddV(k) => {
                            made.insert(k.clone(), g.create_vertex(tx, "V", rec(k))?);
                        }
                        Op::DelV(k) => g.delete_vertex(tx, "V", &Value::Str(k.clone()))?,
                        Op::AddE(s, t, d) => g.create_edge(tx, t, addr_of(s, &made), addr_of(d, &made), Record::default())?,
                        Op::DelE(s, t, d) => g.delete_edge(tx, t, addr_of(s, &made), addr_of(d, &made))?,
                    }
                }
                Ok(made)
            })
            .unwrap();
        live.extend(created);
        for op in &ops {
            match op {
                Op::AddV(_) => {}
                Op::DelV(k) => {
                    live.remove(k);
                    edges.retain(|(s, _, d)| s != k && d != k);
                }
                Op::AddE(s, t, d) => {
                    edges.insert((s.clone(), t, d.clone()));
                }
                Op::DelE(s, t, d) => {
                    edges.remove(&(s.clone(), *t, d.clone()));
                }
            }
        }
        report.ops += ops.len();
    }

    report.vertices = live.len();
    report.edges = edges.len();
    let mut tx = db.store().create_transaction(node, true).unwrap();
    for h in &hubs {
        let hdr = g.read_header(&mut tx, live[h]).unwrap();
        if hdr.edges(Direction::Out).mode == ListMode::Tree {
            report.spilled_hubs += 1;
        }
    }
    let by_addr: BTreeMap<Addr, &String> = live.iter().map(|(k, a)| (*a, k)).collect();
    let view = g.view(node).unwrap();
    let actual: BTreeSet<(String, &'static str, String)> = g
        .edge_set(&mut tx)
        .unwrap()
        .into_iter()
        .map(|(s, t, d)| {
            let name = &view.type_by_id(t).unwrap().name;
            let t = EDGE_TYPES.iter().find(|x| **x == name.as_str()).unwrap();
            (by_addr[&s].clone(), *t, by_addr[&d].clone())
        })
        .collect();
    drop(tx);
    report.model_mismatch = actual != edges;
    report.dangling = g.dangling_halves(node).unwrap();

    db.delete_graph("ops").unwrap();
    db.run_tasks(1_000_000).unwrap();
    db.store().collect_garbage();
    report.leaked = db.store().audit().objects_with_tag(tag);
    let mut tx = db.store().create_transaction(node, true).unwrap();
    report.catalog_entries_left = db.catalog().list(&mut tx, "default/ops/").unwrap().len();
    report
}
