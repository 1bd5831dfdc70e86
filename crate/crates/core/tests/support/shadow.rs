//! Disaster-recovery harness: scripted flush cuts, a randomized workload
//! recorded in a shadow log of committed transactions, and fault checks
//! for fast restart versus power loss.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use a1lite::drstore::{
    decode_edge_key, decode_vertex_key, recover, DrMode, DurableStore, LogEntry, LogOp, LogTable, RecoveryMode,
    TABLE_EDGE, TABLE_EDGE_VERSIONS, TABLE_VERTEX, TABLE_VERTEX_VERSIONS,
};
use a1lite::graph::{FieldType, Graph, GraphExport, Record, Schema, Value};
use a1lite::simnet::{ClusterConfig, FaultKind, NodeId};
use a1lite::store::Timestamp;
use a1lite::{Database, Db, DbConfig};
use rand::seq::{IteratorRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value as J;

const GRAPH: &str = "g";

/// Vertex pks and `(src, dst)` edges, address free.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct State {
    pub verts: BTreeMap<String, i64>,
    pub edges: BTreeSet<(String, String)>,
}

impl State {
    fn apply(&mut self, op: &SOp) {
        match op {
            SOp::PutV(k, x) => {
                self.verts.insert(k.clone(), *x);
            }
            SOp::DelV(k) => {
                self.verts.remove(k);
                self.edges.retain(|(s, d)| s != k && d != k);
            }
            SOp::PutE(s, d) => {
                self.edges.insert((s.clone(), d.clone()));
            }
            SOp::DelE(s, d) => {
                self.edges.remove(&(s.clone(), d.clone()));
            }
        }
    }

    /// Flattens a graph export of the V/e schema.
    pub fn from_export(x: &GraphExport) -> State {
        let mut s = State::default();
        for rec in x.vertices.values() {
            let o: J = serde_json::from_str(rec).unwrap();
            s.verts.insert(o["k"].as_str().unwrap().to_string(), o["x"].as_i64().unwrap());
        }
        for (_, sp, _, _, dp) in &x.edges {
            let pk = |p: &str| serde_json::from_str::<String>(p).unwrap();
            s.edges.insert((pk(sp), pk(dp)));
        }
        s
    }
}

#[derive(Clone, Debug)]
enum SOp {
    PutV(String, i64),
    DelV(String),
    PutE(String, String),
    DelE(String, String),
}

fn rec(k: &str, x: i64) -> Record {
    Record([(0, Value::Str(k.into())), (1, Value::Int(x))].into_iter().collect())
}

fn pk(k: &str) -> Value {
    Value::Str(k.to_string())
}

pub fn open_durable_db(nodes: usize, seed: u64, dir: &Path) -> Database {
    Db::open(DbConfig::new(ClusterConfig::new(nodes, 3).with_seed(seed)).with_durable_dir(dir)).unwrap()
}

fn fresh_db(seed: u64) -> Database {
    Db::open(DbConfig::new(ClusterConfig::new(3, 3).with_seed(seed))).unwrap()
}

fn create_schema(g: &Graph) {
    g.create_type(&Schema::vertex("V", &[("k", FieldType::Str), ("x", FieldType::Int)], "k").unwrap())
        .unwrap();
    g.create_type(&Schema::edge("e", &[]).unwrap()).unwrap();
}

fn power_off_all(db: &Db) {
    let nodes: Vec<NodeId> = db.cluster().node_ids().collect();
    for n in nodes {
        db.cluster().inject_fault(n, FaultKind::PowerLoss);
    }
}

/// Recovers the durable file at `path` into a fresh cluster.
pub fn recover_state(path: &Path, mode: RecoveryMode, seed: u64) -> Result<(State, usize, Database), String> {
    let durable = DurableStore::open(path).map_err(|e| e.to_string())?;
    let db = fresh_db(seed);
    let report = recover(&db, GRAPH, &durable, mode).map_err(|e| e.to_string())?;
    let x = db.graph(GRAPH).unwrap().export(db.coordinator()).map_err(|e| e.to_string())?;
    Ok((State::from_export(&x), report.skipped_edges, db))
}

/// How the flush of the scripted transaction is disturbed.
pub enum Flush<'a> {
    /// The durable store accepts this many entries, then fails.
    CutAfter(usize),
    /// Only the named entries (`A`, `B` or `edge`) reach the durable store.
    Only(&'a [&'a str]),
}

/// One transaction writes vertices A and B and the edge A->B; the flush
/// is disturbed, the cluster loses power and the graph is recovered.
/// Returns the recovered state and the number of skipped edges.
pub fn flush_cut_scenario(flush: Flush, mode: RecoveryMode) -> (State, usize) {
    let dir = tempfile::tempdir().unwrap();
    let db = open_durable_db(3, 1, dir.path());
    let g = db.create_graph_with(GRAPH, Some(DrMode::Both)).unwrap();
    create_schema(&g);
    let node = db.coordinator();
    let r = db.replicator(GRAPH).unwrap().unwrap();
    r.refresh_watermark(node).unwrap();
    match flush {
        Flush::CutAfter(n) => r.durable.cut_after(n),
        Flush::Only(_) => r.durable.set_outage(true),
    }
    db.store()
        .run(node, |tx| {
            let a = g.create_vertex(tx, "V", rec("A", 1))?;
            let b = g.create_vertex(tx, "V", rec("B", 2))?;
            g.create_edge(tx, "e", a, b, Record::default())
        })
        .unwrap();
    if let Flush::Only(names) = flush {
        r.durable.set_outage(false);
        for (k, addr, e) in r.pending(node).unwrap() {
            let name = match e.table {
                LogTable::Vertex => match decode_vertex_key(&e.key).unwrap().1 {
                    Value::Str(s) => s,
                    v => panic!("pk {v:?}"),
                },
                LogTable::Edge => "edge".to_string(),
                LogTable::Schema => continue,
            };
            if names.contains(&name.as_str()) {
                assert!(r.flush(node, &k, addr, &e));
            }
        }
    }
    // a sweep against the failed store must not move the watermark
    r.durable.set_outage(true);
    let _ = r.sweep(node);
    let path = db.durable_path(GRAPH).unwrap();
    power_off_all(&db);
    assert_eq!(db.store().region_count(), 0);
    let (s, skipped, _) = recover_state(&path, mode, 2).unwrap();
    (s, skipped)
}

#[derive(Debug, Default, Clone)]
pub struct CrashStats {
    pub txns: usize,
    /// Committed transactions at or below the persisted watermark.
    pub below_watermark: usize,
    pub pending_at_crash: usize,
    pub best_effort_vertices: usize,
    pub consistent_vertices: usize,
}

struct Shadow {
    log: Vec<(u64, Vec<SOp>)>,
}

impl Shadow {
    fn at(&self, t: u64) -> State {
        let mut s = State::default();
        for (_, ops) in self.log.iter().filter(|(c, _)| *c <= t) {
            ops.iter().for_each(|o| s.apply(o));
        }
        s
    }

    /// Every committed `(ts, value)` of a vertex key; `None` for deletes.
    fn vertex_writes(&self, k: &str) -> Vec<(u64, Option<i64>)> {
        let mut out = Vec::new();
        for (cts, ops) in &self.log {
            for o in ops {
                match o {
                    SOp::PutV(v, x) if v == k => out.push((*cts, Some(*x))),
                    SOp::DelV(v) if v == k => out.push((*cts, None)),
                    _ => {}
                }
            }
        }
        out
    }

    /// Every committed `(ts, present)` of an edge, including deletes
    /// implied by removing an endpoint.
    fn edge_writes(&self, s: &str, d: &str) -> Vec<(u64, bool)> {
        let mut out = Vec::new();
        let mut st = State::default();
        for (cts, ops) in &self.log {
            let before = st.edges.contains(&(s.to_string(), d.to_string()));
            let mut touched = false;
            for o in ops {
                st.apply(o);
                touched |= matches!(o, SOp::PutE(a, b) | SOp::DelE(a, b) if a == s && b == d)
                    || matches!(o, SOp::DelV(v) if (v == s || v == d) && before);
            }
            if touched {
                out.push((*cts, st.edges.contains(&(s.to_string(), d.to_string()))));
            }
        }
        out
    }
}

fn plan_ops(rng: &mut ChaCha8Rng, model: &State, next: &mut usize) -> Vec<SOp> {
    let mut m = model.clone();
    let mut ops = Vec::new();
    for _ in 0..rng.gen_range(1..=4) {
        let roll = rng.gen_range(0..100);
        let op = if roll < 30 || m.verts.len() < 4 {
            *next += 1;
            SOp::PutV(format!("v{}", *next), rng.gen_range(0..100))
        } else if roll < 45 {
            let k = m.verts.keys().choose(rng).unwrap().clone();
            SOp::PutV(k, rng.gen_range(0..100))
        } else if roll < 55 {
            SOp::DelV(m.verts.keys().choose(rng).unwrap().clone())
        } else if roll < 88 {
            let s = m.verts.keys().choose(rng).unwrap().clone();
            let d = m.verts.keys().choose(rng).unwrap().clone();
            if m.edges.contains(&(s.clone(), d.clone())) {
                continue;
            }
            SOp::PutE(s, d)
        } else {
            let Some(e) = m.edges.iter().choose(rng).cloned() else { continue };
            SOp::DelE(e.0, e.1)
        };
        m.apply(&op);
        ops.push(op);
    }
    ops
}

fn run_ops(g: &Graph, tx: &mut a1lite::store::Txn, ops: &[SOp]) -> a1lite::Result<()> {
    for op in ops {
        match op {
            SOp::PutV(k, x) => match g.find_vertex(tx, "V", &pk(k))? {
                Some(_) => g.update_vertex(tx, "V", &pk(k), rec(k, *x))?,
                None => {
                    g.create_vertex(tx, "V", rec(k, *x))?;
                }
            },
            SOp::DelV(k) => g.delete_vertex(tx, "V", &pk(k))?,
            SOp::PutE(s, d) => g.create_edge_by_pk(tx, "V", &pk(s), "e", "V", &pk(d), Record::default())?,
            SOp::DelE(s, d) => {
                let a = g.find_vertex(tx, "V", &pk(s))?.unwrap();
                let b = g.find_vertex(tx, "V", &pk(d))?.unwrap();
                g.delete_edge(tx, "e", a, b)?
            }
        }
    }
    Ok(())
}

fn str_of(v: Value) -> String {
    match v {
        Value::Str(s) => s,
        v => panic!("pk {v:?}"),
    }
}

fn x_of(bytes: &[u8]) -> i64 {
    match Record::decode(bytes).unwrap().get(1) {
        Some(Value::Int(x)) => *x,
        v => panic!("x {v:?}"),
    }
}

/// Best-effort rows of a durable store decoded into a state.
fn best_effort_state(d: &DurableStore) -> State {
    let mut s = State::default();
    for (k, r) in d.rows(TABLE_VERTEX) {
        if let Some(v) = r.value {
            s.verts.insert(str_of(decode_vertex_key(&k).unwrap().1), x_of(&v));
        }
    }
    for (k, r) in d.rows(TABLE_EDGE) {
        if r.value.is_some() {
            let (_, sp, _, _, dp) = decode_edge_key(&k).unwrap();
            s.edges.insert((str_of(sp), str_of(dp)));
        }
    }
    s
}

/// Runs a randomized workload of up to 500 transactions with durable
/// outages, crashes it mid-flush at a random transaction, and checks both
/// recoveries and flush replay against the shadow log.
pub fn crash_trial(seed: u64) -> Result<CrashStats, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dir = tempfile::tempdir().unwrap();
    let db = open_durable_db(3, seed, dir.path());
    let g = db.create_graph_with(GRAPH, Some(DrMode::Both)).unwrap();
    create_schema(&g);
    let node = db.coordinator();
    let r = db.replicator(GRAPH).unwrap().unwrap();
    r.refresh_watermark(node).unwrap();

    let crash_at = rng.gen_range(1..=500usize);
    let mut shadow = Shadow { log: Vec::new() };
    let mut model = State::default();
    let mut next = 0usize;
    let mut outage_left = 0usize;
    for i in 0..crash_at {
        if outage_left == 0 && rng.gen_bool(0.06) {
            r.durable.set_outage(true);
            outage_left = rng.gen_range(1..30);
        } else if outage_left > 0 {
            outage_left -= 1;
            if outage_left == 0 {
                r.durable.set_outage(false);
                if rng.gen_bool(0.5) {
                    r.sweep(node).map_err(|e| e.to_string())?;
                }
            }
        }
        if rng.gen_bool(0.05) {
            let _ = r.refresh_watermark(node);
        }
        if i + 1 == crash_at {
            r.durable.cut_after(rng.gen_range(0..4));
        }
        let ops = plan_ops(&mut rng, &model, &mut next);
        let mut tx = db.store().create_transaction(node, false).map_err(|e| e.to_string())?;
        run_ops(&g, &mut tx, &ops).map_err(|e| format!("seed {seed} txn {i}: {e} ops {ops:?}"))?;
        let cts = tx.commit().map_err(|e| format!("seed {seed} commit {i}: {e}"))?;
        ops.iter().for_each(|o| model.apply(o));
        shadow.log.push((cts.0, ops));
    }
    let pending: Vec<LogEntry> = r.pending(node).unwrap().into_iter().map(|p| p.2).collect();
    let path = db.durable_path(GRAPH).unwrap();
    power_off_all(&db);
    if db.store().region_count() != 0 {
        return Err("power loss left regions behind".into());
    }
    drop(r);
    drop(g);
    drop(db);

    let durable = DurableStore::open(&path).map_err(|e| e.to_string())?;
    let t_r = durable.watermark().ok_or("no watermark")?.0;
    let mut stats = CrashStats {
        txns: crash_at,
        below_watermark: shadow.log.iter().filter(|(c, _)| *c <= t_r).count(),
        pending_at_crash: pending.len(),
        ..Default::default()
    };

    // (a) consistent recovery is the committed prefix at t_R
    let (cons, _, _) = recover_state(&path, RecoveryMode::Consistent, seed)?;
    let want = shadow.at(t_r);
    if cons != want {
        return Err(format!("seed {seed}: consistent recovery at t_R={t_r} differs from the shadow prefix"));
    }
    stats.consistent_vertices = cons.verts.len();

    // (b) best effort: real committed writes, never older than consistent,
    // no dangling edges
    let (be, _, be_db) = recover_state(&path, RecoveryMode::BestEffort, seed)?;
    let dangling = be_db.graph(GRAPH).unwrap().dangling_halves(be_db.coordinator()).map_err(|e| e.to_string())?;
    if dangling != 0 {
        return Err(format!("seed {seed}: best-effort recovery left {dangling} dangling halves"));
    }
    for (s, d) in &be.edges {
        if !be.verts.contains_key(s) || !be.verts.contains_key(d) {
            return Err(format!("seed {seed}: recovered edge {s}->{d} lacks an endpoint"));
        }
    }
    stats.best_effort_vertices = be.verts.len();
    for (k, row) in durable.rows(TABLE_VERTEX) {
        let name = str_of(decode_vertex_key(&k).unwrap().1);
        let val = row.value.as_deref().map(x_of);
        if !shadow.vertex_writes(&name).contains(&(row.ts, val)) {
            return Err(format!("seed {seed}: best-effort row {name}@{} = {val:?} was never committed", row.ts));
        }
    }
    for (k, row) in durable.rows(TABLE_EDGE) {
        let (_, sp, _, _, dp) = decode_edge_key(&k).unwrap();
        let (s, d) = (str_of(sp), str_of(dp));
        if !shadow.edge_writes(&s, &d).contains(&(row.ts, row.value.is_some())) {
            return Err(format!("seed {seed}: best-effort edge row {s}->{d}@{} was never committed", row.ts));
        }
    }
    for (table, versions) in [(TABLE_VERTEX, TABLE_VERTEX_VERSIONS), (TABLE_EDGE, TABLE_EDGE_VERSIONS)] {
        let mut newest: BTreeMap<Vec<u8>, u64> = BTreeMap::new();
        for (k, row) in durable.versions(versions).into_iter().filter(|(_, r)| r.ts <= t_r) {
            let e = newest.entry(k).or_default();
            *e = (*e).max(row.ts);
        }
        for (k, ts) in newest {
            let be_ts = durable.row(table, &k).map(|r| r.ts);
            if be_ts.is_none_or(|b| b < ts) {
                return Err(format!("seed {seed}: best-effort row older than consistent version at {ts}"));
            }
        }
    }

    // (c) every flushed or pending entry, replayed in commit order and in a
    // shuffled order with duplicates, gives the same best-effort tables,
    // and both equal the final committed state
    let mut entries: Vec<LogEntry> = pending
        .into_iter()
        .filter(|e| e.table != LogTable::Schema)
        .collect();
    for (table, versions) in [(LogTable::Vertex, TABLE_VERTEX_VERSIONS), (LogTable::Edge, TABLE_EDGE_VERSIONS)] {
        for (k, row) in durable.versions(versions) {
            entries.push(LogEntry {
                commit_ts: Timestamp(row.ts),
                table,
                op: if row.value.is_some() { LogOp::Upsert } else { LogOp::Delete },
                key: k,
                value: row.value.unwrap_or_default(),
            });
        }
    }
    entries.sort_by(|a, b| (a.commit_ts, &a.key).cmp(&(b.commit_ts, &b.key)));
    let ordered = DurableStore::open(dir.path().join("ordered.dr")).unwrap();
    for e in &entries {
        ordered.apply_entry(e, DrMode::BestEffort).unwrap();
    }
    let mut shuffled = entries.clone();
    for _ in 0..rng.gen_range(0..=entries.len().min(20)) {
        let dup = entries.choose(&mut rng).unwrap().clone();
        shuffled.push(dup);
    }
    shuffled.shuffle(&mut rng);
    let permuted = DurableStore::open(dir.path().join("permuted.dr")).unwrap();
    for e in &shuffled {
        permuted.apply_entry(e, DrMode::BestEffort).unwrap();
    }
    if ordered.rows(TABLE_VERTEX) != permuted.rows(TABLE_VERTEX) || ordered.rows(TABLE_EDGE) != permuted.rows(TABLE_EDGE) {
        return Err(format!("seed {seed}: replay order changed the best-effort tables"));
    }
    if best_effort_state(&ordered) != model {
        return Err(format!("seed {seed}: full replay differs from the final committed state"));
    }
    Ok(stats)
}

fn load_small_graph(db: &Db, seed: u64, n: usize) -> Graph {
    let g = db.create_graph(GRAPH).unwrap();
    create_schema(&g);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let node = db.coordinator();
    db.store()
        .run(node, |tx| {
            let addrs = (0..n)
                .map(|i| g.create_vertex(tx, "V", rec(&format!("v{i}"), i as i64)))
                .collect::<a1lite::Result<Vec<_>>>()?;
            let mut made = BTreeSet::new();
            for _ in 0..n * 2 {
                let (s, d) = (rng.gen_range(0..n), rng.gen_range(0..n));
                if made.insert((s, d)) {
                    g.create_edge(tx, "e", addrs[s], addrs[d], Record::default())?;
                }
            }
            Ok(())
        })
        .unwrap();
    g
}

/// Crashes one replica of every region (all of fault domain 0) and
/// restarts it; the store must come back byte-for-byte.
pub fn fast_restart_check(seed: u64) -> Result<(), String> {
    let db = Db::open(DbConfig::new(ClusterConfig::new(6, 3).with_seed(seed))).unwrap();
    let g = load_small_graph(&db, seed, 300);
    let before = db.store().scan_live_objects().map_err(|e| e.to_string())?;
    let export = g.export(db.coordinator()).map_err(|e| e.to_string())?;
    let victims: Vec<NodeId> = db.cluster().node_ids().filter(|n| db.cluster().fault_domain(*n) == 0).collect();
    for r in db.store().region_ids() {
        let reps = db.store().placement(r).unwrap();
        if !reps.iter().any(|n| victims.contains(n)) {
            return Err(format!("region {r} has no replica in fault domain 0"));
        }
    }
    for n in &victims {
        db.cluster().inject_fault(*n, FaultKind::ProcessCrash);
    }
    let reader = db.cluster().live_nodes()[0];
    if g.export(reader).map_err(|e| e.to_string())? != export {
        return Err("reads during the crash differ".into());
    }
    for n in &victims {
        db.cluster().inject_fault(*n, FaultKind::Restart);
    }
    let after = db.store().scan_live_objects().map_err(|e| e.to_string())?;
    if before != after {
        return Err(format!("scan differs after restart: {} vs {} objects", before.len(), after.len()));
    }
    for r in db.store().region_ids() {
        if !db.store().replicas_identical(r) || db.store().fresh_replicas(r) != 3 {
            return Err(format!("region {r} not fully resynced"));
        }
    }
    if g.export(db.coordinator()).map_err(|e| e.to_string())? != export {
        return Err("graph differs after restart".into());
    }
    Ok(())
}

/// Powers off every node of a replicated graph: the store empties and
/// only recovery from the durable store brings the data back.
pub fn power_loss_check(seed: u64) -> Result<(), String> {
    let dir = tempfile::tempdir().unwrap();
    let db = open_durable_db(3, seed, dir.path());
    let g = load_small_graph(&db, seed, 200);
    let node = db.coordinator();
    let r = db.replicator(GRAPH).unwrap().unwrap();
    r.sweep(node).map_err(|e| e.to_string())?;
    r.refresh_watermark(node).map_err(|e| e.to_string())?;
    let want = State::from_export(&g.export(node).map_err(|e| e.to_string())?);
    let path = db.durable_path(GRAPH).unwrap();
    power_off_all(&db);
    if db.store().region_count() != 0 {
        return Err("regions survived power loss".into());
    }
    if db.store().scan_live_objects().map(|m| m.len()).unwrap_or(0) != 0 {
        return Err("objects survived power loss".into());
    }
    for mode in [RecoveryMode::BestEffort, RecoveryMode::Consistent] {
        let (got, skipped, _) = recover_state(&path, mode, seed + 1)?;
        if got != want || skipped != 0 {
            return Err(format!("{mode:?} recovery differs from the pre-loss graph"));
        }
    }
    Ok(())
}

