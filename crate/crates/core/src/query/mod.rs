//! A1QL planning and distributed execution.
//!
//! The receiving node coordinates: it opens a read-only transaction whose
//! timestamp every worker reads at, resolves the anchor through an index,
//! then walks the traversal one hop at a time. For each hop the frontier
//! is grouped by the node holding each vertex's primary copy; groups of at
//! least `ship_min` vertices are shipped to that node in one RPC, smaller
//! ones are evaluated by the coordinator with remote reads. Results are
//! deduplicated by vertex address before the next hop.

mod ast;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use base64::Engine as _;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::Value as J;

pub use ast::{parse, parse_value, Access, AttrPath, EdgeStep, Op, Predicate, Query, Select, VertexStep};

use crate::db::Db;
use crate::error::{Error, Result};
use crate::graph::{Direction, FieldType, Graph, GraphView, HalfEdge, Record, Schema, TypeKind, Value, VertexHeader};
use crate::simnet::{Message, NodeId, ReadCounter};
use crate::store::{Addr, Timestamp, Txn};

const WORKER_SERVICE: &str = "query.worker_eval";
const FETCH_SERVICE: &str = "query.fetch";

#[derive(Clone, Debug)]
pub struct EdgeHead {
    pub dir: Direction,
    pub type_id: u32,
    pub type_name: String,
    pub preds: Vec<Predicate>,
}

#[derive(Clone, Debug)]
pub struct CompiledStep {
    pub type_id: Option<u32>,
    pub preds: Vec<Predicate>,
    /// Existential probes in evaluation order.
    pub matches: Vec<(EdgeHead, CompiledStep)>,
    pub next: Option<EdgeHead>,
    /// Target of `next` inside a probe; path steps keep it in the plan.
    pub chain: Option<Box<CompiledStep>>,
    pub needs_data: bool,
}

impl CompiledStep {
    fn is_trivial(&self) -> bool {
        self.type_id.is_none() && self.preds.is_empty() && self.matches.is_empty()
    }
}

#[derive(Clone, Debug)]
pub enum Anchor {
    Pk { types: Vec<u32>, value: Value },
    Secondary { vtype: String, field: String, value: Value },
}

/// Physical plan: one compiled step per traversal level.
#[derive(Clone, Debug)]
pub struct Plan {
    pub anchor: Anchor,
    pub steps: Vec<CompiledStep>,
    pub select: Select,
}

impl Plan {
    /// Operators per hop, for display.
    pub fn describe(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, s) in self.steps.iter().enumerate() {
            let mut ops = Vec::new();
            if i == 0 {
                ops.push("INDEX_LOOKUP".to_string());
            }
            if !s.is_trivial() || (s.next.is_none() && self.select != Select::Count) {
                ops.push("PREDICATE_EVAL".to_string());
            }
            if let Some(n) = &s.next {
                ops.push(format!("EDGE_ENUM({:?},{})", n.dir, n.type_name));
            }
            if s.next.is_none() {
                ops.push(match self.select {
                    Select::Count => "COUNT".into(),
                    _ => "PROJECT".into(),
                });
            }
            out.push(ops.join(" "));
        }
        out
    }
}

fn field_in(schema: &Schema, p: &AttrPath) -> bool {
    schema.field(&p.field).is_some()
}

fn compile_preds(view: &GraphView, vtype: Option<u32>, preds: &[Predicate]) -> Result<()> {
    for p in preds.iter().filter(|p| !p.is_pk) {
        let found = match vtype {
            Some(t) => view.type_by_id(t).is_some_and(|ti| field_in(&ti.schema, &p.path)),
            None => view.vertex_types().any(|ti| field_in(&ti.schema, &p.path)),
        };
        if !found {
            return Err(Error::UnknownField(p.path.field.clone()));
        }
    }
    Ok(())
}

fn compile_edge(view: &GraphView, e: &EdgeStep) -> Result<(EdgeHead, CompiledStep)> {
    let et = view
        .type_named(&e.edge_type)
        .filter(|t| t.kind == TypeKind::Edge)
        .ok_or_else(|| Error::UnknownType(e.edge_type.clone()))?;
    for p in &e.preds {
        if p.is_pk || !field_in(&et.schema, &p.path) {
            return Err(Error::UnknownField(p.path.field.clone()));
        }
    }
    let head = EdgeHead {
        dir: e.dir,
        type_id: et.id,
        type_name: et.name.clone(),
        preds: e.preds.clone(),
    };
    Ok((head, compile_step(view, &e.vertex, true, false)?))
}

fn compile_step(view: &GraphView, s: &VertexStep, in_probe: bool, leaf_projects: bool) -> Result<CompiledStep> {
    let type_id = match &s.type_name {
        Some(n) => Some(
            view.type_named(n)
                .filter(|t| t.kind == TypeKind::Vertex)
                .ok_or_else(|| Error::UnknownType(n.clone()))?
                .id,
        ),
        None => None,
    };
    compile_preds(view, type_id, &s.preds)?;
    let mut matches = s
        .matches
        .iter()
        .map(|m| compile_edge(view, m))
        .collect::<Result<Vec<_>>>()?;
    if let Some(order) = &s.match_order {
        let mut slots: Vec<Option<_>> = matches.into_iter().map(Some).collect();
        matches = order.iter().map(|i| slots[*i].take().expect("order is a permutation")).collect();
    }
    let (next, chain) = match (&s.edge, in_probe) {
        (Some(e), true) => {
            let (h, t) = compile_edge(view, e)?;
            (Some(h), Some(Box::new(t)))
        }
        (Some(e), false) => {
            let (h, _) = compile_edge(view, e)?;
            (Some(h), None)
        }
        (None, _) => (None, None),
    };
    Ok(CompiledStep {
        type_id,
        needs_data: !s.preds.is_empty() || leaf_projects,
        preds: s.preds.clone(),
        matches,
        next,
        chain,
    })
}

/// Builds the physical plan, validating types and fields against `view`.
/// `ready_indexes` lists the root type's fields with a usable secondary
/// index.
pub fn plan(view: &GraphView, q: &Query, ready_indexes: &[String]) -> Result<Plan> {
    let select = q.select();
    let path = q.path();
    let n = path.len();
    let mut steps = Vec::with_capacity(n);
    for (i, s) in path.iter().enumerate() {
        let leaf = i + 1 == n;
        let projects = leaf && select != Select::Count;
        let step = compile_step(view, s, false, projects)?;
        if leaf {
            if let Select::Fields(fields) = &select {
                let mut probe = s.preds.clone();
                probe.extend(fields.iter().map(|f| Predicate {
                    path: f.clone(),
                    op: Op::Eq,
                    value: Value::Bool(true),
                    is_pk: false,
                }));
                compile_preds(view, step.type_id, &probe)?;
            }
        }
        steps.push(step);
    }
    let root = &q.root;
    let anchor = if let Some(p) = root.preds.iter().find(|p| p.is_pk && p.op == Op::Eq) {
        let types = match steps[0].type_id {
            Some(t) => vec![t],
            None => view.vertex_types().map(|t| t.id).collect(),
        };
        Anchor::Pk {
            types,
            value: p.value.clone(),
        }
    } else {
        let tname = root.type_name.clone().expect("parser guarantees a root type");
        let p = root
            .preds
            .iter()
            .find(|p| p.op == Op::Eq && p.path.access.is_none() && ready_indexes.contains(&p.path.field))
            .ok_or_else(|| Error::Parse {
                pos: "$".into(),
                msg: format!("no ready secondary index on {tname} for the root predicates"),
            })?;
        Anchor::Secondary {
            vtype: tname,
            field: p.path.field.clone(),
            value: p.value.clone(),
        }
    };
    Ok(Plan { anchor, steps, select })
}

fn field_type_after(ty: &FieldType, p: &AttrPath) -> FieldType {
    match (&p.access, ty) {
        (None, t) => t.clone(),
        (Some(_), FieldType::List(inner)) => (**inner).clone(),
        (Some(_), _) => FieldType::Str,
    }
}

fn pred_holds(schema: &Schema, rec: &Record, p: &Predicate) -> bool {
    let field = if p.is_pk { schema.pk_field() } else { schema.field(&p.path.field) };
    let Some(f) = field else { return false };
    let Some(v) = rec.get(f.id) else { return false };
    let path = if p.is_pk {
        AttrPath {
            field: f.name.clone(),
            access: None,
        }
    } else {
        p.path.clone()
    };
    let Some(x) = path.extract(v) else { return false };
    let lit = p.value.clone().coerce(&field_type_after(&f.ty, &path));
    x.compare(&lit).is_some_and(|o| p.op.holds(o))
}

/// Output of evaluating one hop over a batch of vertices.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct HopOut {
    pub next: Vec<u64>,
    /// Qualifying terminal vertices with their projected row (JSON text).
    pub leaves: Vec<(u64, Option<String>)>,
}

struct Evaluator<'a> {
    g: &'a Graph,
    view: &'a GraphView,
}

impl Evaluator<'_> {
    fn schema(&self, type_id: u32) -> Result<&Schema> {
        self.view
            .type_by_id(type_id)
            .map(|t| &t.schema)
            .ok_or_else(|| Error::UnknownType(format!("type id {type_id}")))
    }

    fn passes(&self, tx: &mut Txn, s: &CompiledStep, addr: Addr, h: &VertexHeader) -> Result<(bool, Option<Record>)> {
        if s.type_id.is_some_and(|t| t != h.type_id) {
            return Ok((false, None));
        }
        let rec = if s.needs_data { Some(self.g.read_record(tx, h)?) } else { None };
        if let Some(r) = &rec {
            let schema = self.schema(h.type_id)?;
            if !s.preds.iter().all(|p| pred_holds(schema, r, p)) {
                return Ok((false, rec));
            }
        }
        for (head, target) in &s.matches {
            if !self.exists(tx, head, target, addr, h)? {
                return Ok((false, rec));
            }
        }
        Ok((true, rec))
    }

    fn edge_ok(&self, tx: &mut Txn, head: &EdgeHead, he: &HalfEdge) -> Result<bool> {
        if head.preds.is_empty() {
            return Ok(true);
        }
        let rec = self.g.edge_record(tx, he)?;
        let schema = self.schema(head.type_id)?;
        Ok(head.preds.iter().all(|p| pred_holds(schema, &rec, p)))
    }

    fn exists(&self, tx: &mut Txn, head: &EdgeHead, target: &CompiledStep, addr: Addr, h: &VertexHeader) -> Result<bool> {
        for he in self.g.edges_of(tx, self.view, addr, h, head.dir, Some(head.type_id))? {
            if !self.edge_ok(tx, head, &he)? {
                continue;
            }
            let ph = self.g.read_header(tx, he.peer)?;
            if !self.passes(tx, target, he.peer, &ph)?.0 {
                continue;
            }
            match (&target.next, &target.chain) {
                (Some(nh), Some(nt)) => {
                    if self.exists(tx, nh, nt, he.peer, &ph)? {
                        return Ok(true);
                    }
                }
                _ => return Ok(true),
            }
        }
        Ok(false)
    }

    fn project(&self, select: &Select, type_id: u32, rec: Option<&Record>) -> Result<Option<String>> {
        let ti = self
            .view
            .type_by_id(type_id)
            .ok_or_else(|| Error::UnknownType(format!("type id {type_id}")))?;
        let empty = Record::default();
        let rec = rec.unwrap_or(&empty);
        let row = match select {
            Select::Count => return Ok(None),
            Select::Star => {
                let mut m = rec.to_json(&ti.schema);
                m.insert("_type".into(), J::String(ti.name.clone()));
                J::Object(m)
            }
            Select::Fields(fields) => {
                let mut m = serde_json::Map::new();
                for f in fields {
                    let v = ti
                        .schema
                        .field(&f.field)
                        .and_then(|fd| rec.get(fd.id))
                        .and_then(|v| f.extract(v))
                        .map(|v| v.to_json())
                        .unwrap_or(J::Null);
                    m.insert(f.display(), v);
                }
                J::Object(m)
            }
        };
        Ok(Some(row.to_string()))
    }

    fn eval(&self, tx: &mut Txn, plan: &Plan, hop: usize, addrs: &[Addr]) -> Result<HopOut> {
        let s = &plan.steps[hop];
        let mut out = HopOut::default();
        for &a in addrs {
            let h = self.g.read_header(tx, a)?;
            let (ok, rec) = self.passes(tx, s, a, &h)?;
            if !ok {
                continue;
            }
            match &s.next {
                None => out.leaves.push((a.as_u64(), self.project(&plan.select, h.type_id, rec.as_ref())?)),
                Some(head) => {
                    for he in self.g.edges_of(tx, self.view, a, &h, head.dir, Some(head.type_id))? {
                        if self.edge_ok(tx, head, &he)? {
                            out.next.push(he.peer.as_u64());
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

#[derive(Serialize, Deserialize)]
struct WorkerRequest {
    graph: String,
    ts: u64,
    query: String,
    hop: u32,
    addrs: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
struct WorkerReply {
    out: HopOut,
    local_reads: u64,
    remote_reads: u64,
}

#[derive(Serialize, Deserialize)]
struct FetchRequest {
    query_id: u64,
    cursor: u64,
}

#[derive(Serialize, Deserialize)]
struct FetchReply {
    rows: Vec<String>,
    next_cursor: Option<u64>,
    expires_at: u64,
}

/// Per-query execution metrics.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct QueryMetrics {
    pub query_id: u64,
    pub snapshot_ts: u64,
    pub coordinator: u16,
    pub hops: usize,
    pub rpcs: u64,
    pub shipped_vertices: u64,
    pub coordinator_vertices: u64,
    /// Object reads made while evaluating hops (workers and coordinator).
    pub hop_local_reads: u64,
    pub hop_remote_reads: u64,
    /// Reads made resolving the anchor.
    pub anchor_reads: u64,
    pub intermediate_bytes: usize,
}

impl QueryMetrics {
    pub fn local_fraction(&self) -> f64 {
        let total = self.hop_local_reads + self.hop_remote_reads;
        if total == 0 {
            1.0
        } else {
            self.hop_local_reads as f64 / total as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResultPage {
    pub rows: Vec<J>,
    pub count: Option<u64>,
    pub token: Option<String>,
}

impl ResultPage {
    /// `{"rows": [...]}` or `{"count": N}`, plus `"continuation"` when more
    /// pages remain.
    pub fn to_json(&self) -> J {
        let mut m = serde_json::Map::new();
        match self.count {
            Some(c) => {
                m.insert("count".into(), c.into());
            }
            None => {
                m.insert("rows".into(), J::Array(self.rows.clone()));
            }
        }
        if let Some(t) = &self.token {
            m.insert("continuation".into(), J::String(t.clone()));
        }
        J::Object(m)
    }
}

#[derive(Clone, Debug)]
pub struct QueryOutput {
    pub page: ResultPage,
    pub metrics: QueryMetrics,
}

/// Per-call overrides of the database defaults.
#[derive(Clone, Debug, Default)]
pub struct ExecOptions {
    pub ship_min: Option<usize>,
    pub page_size: Option<usize>,
    pub budget: Option<usize>,
}

#[derive(Serialize, Deserialize, Debug, PartialEq, Eq)]
struct TokenBody {
    coordinator: u16,
    incarnation: u64,
    query_id: u64,
    cursor: u64,
    expires_at: u64,
}

fn encode_token(t: &TokenBody) -> String {
    base64::engine::general_purpose::URL_SAFE_NO_PAD.encode(bincode::serialize(t).expect("token encodes"))
}

fn decode_token(s: &str) -> Result<TokenBody> {
    let bytes = base64::engine::general_purpose::URL_SAFE_NO_PAD
        .decode(s)
        .map_err(|_| Error::TokenInvalid)?;
    bincode::deserialize(&bytes).map_err(|_| Error::TokenInvalid)
}

struct CachedResult {
    rows: Arc<Vec<String>>,
    page_size: usize,
    expires_at: u64,
}

/// Process-local query state: ids and each coordinator's cached pages.
pub struct Engine {
    next_id: AtomicU64,
    caches: Vec<Mutex<HashMap<u64, CachedResult>>>,
}

impl Engine {
    pub(crate) fn new(nodes: usize) -> Engine {
        Engine {
            next_id: AtomicU64::new(1),
            caches: (0..nodes).map(|_| Mutex::new(HashMap::new())).collect(),
        }
    }

    /// Forgets everything a crashed node held in memory.
    pub(crate) fn drop_node_state(&self, node: NodeId) {
        self.caches[node.index()].lock().clear();
    }

    pub fn cached_results(&self, node: NodeId) -> usize {
        self.caches[node.index()].lock().len()
    }
}

pub(crate) fn register_service(db: &Arc<Db>) {
    let weak = Arc::downgrade(db);
    db.cluster().register_service(
        WORKER_SERVICE,
        Arc::new(move |here: NodeId, _from: NodeId, body: &[u8]| {
            let db = weak.upgrade().ok_or(Error::NodeUnreachable(here))?;
            let req: WorkerRequest =
                bincode::deserialize(body).map_err(|e| crate::error::corrupt(format!("worker request: {e}")))?;
            let reply = worker_eval(&db, here, &req)?;
            Ok(bincode::serialize(&reply).expect("reply encodes"))
        }),
    );
    let weak = Arc::downgrade(db);
    db.cluster().register_service(
        FETCH_SERVICE,
        Arc::new(move |here: NodeId, _from: NodeId, body: &[u8]| {
            let db = weak.upgrade().ok_or(Error::NodeUnreachable(here))?;
            let req: FetchRequest = bincode::deserialize(body).map_err(|_| Error::TokenInvalid)?;
            let reply = serve_fetch(&db, here, req.query_id, req.cursor)?;
            Ok(bincode::serialize(&reply).expect("reply encodes"))
        }),
    );
}

/// Fields of the root type with a finished secondary index. Workers pass
/// no transaction; they never resolve the anchor.
fn ready_indexes(g: &Graph, q: &Query, tx: Option<&mut Txn>) -> Result<Vec<String>> {
    let (Some(tx), Some(t)) = (tx, &q.root.type_name) else {
        return Ok(q.root.preds.iter().map(|p| p.path.field.clone()).collect());
    };
    let ti = match g.type_info(tx.node(), t) {
        Ok(ti) => ti,
        Err(Error::UnknownType(_)) => return Ok(Vec::new()),
        Err(e) => return Err(e),
    };
    if ti.kind != TypeKind::Vertex {
        return Ok(Vec::new());
    }
    let tm = g.type_meta(tx, &ti)?;
    Ok(tm.indexes.iter().filter(|i| !i.building).map(|i| i.field.clone()).collect())
}

fn graph_plan(g: &Graph, node: NodeId, q: &Query, tx: Option<&mut Txn>) -> Result<(Arc<GraphView>, Plan)> {
    let db = g.db();
    let ready = ready_indexes(g, q, tx)?;
    let view = db.graph_view(node, g.name(), false)?;
    match plan(&view, q, &ready) {
        Ok(p) => Ok((view, p)),
        Err(Error::UnknownType(_)) | Err(Error::UnknownField(_)) => {
            let view = db.graph_view(node, g.name(), true)?;
            let p = plan(&view, q, &ready)?;
            Ok((view, p))
        }
        Err(e) => Err(e),
    }
}

fn worker_eval(db: &Db, here: NodeId, req: &WorkerRequest) -> Result<WorkerReply> {
    if req.addrs.is_empty() {
        return Ok(WorkerReply {
            out: HopOut::default(),
            local_reads: 0,
            remote_reads: 0,
        });
    }
    let q = parse(&req.query)?;
    let g = Graph::new(db.handle(), &req.graph);
    let (view, plan) = graph_plan(&g, here, &q, None)?;
    let counter = ReadCounter::new();
    let mut tx = db.store().snapshot_at(here, Timestamp(req.ts))?;
    tx.set_read_counter(counter.clone());
    let addrs: Vec<Addr> = req.addrs.iter().map(|a| Addr::from_u64(*a)).collect();
    let out = Evaluator { g: &g, view: &view }.eval(&mut tx, &plan, req.hop as usize, &addrs)?;
    Ok(WorkerReply {
        out,
        local_reads: counter.local(),
        remote_reads: counter.remote(),
    })
}

fn coordinator_eval(
    db: &Db,
    g: &Graph,
    view: &GraphView,
    plan: &Plan,
    node: NodeId,
    ts: u64,
    hop: usize,
    addrs: &[Addr],
) -> Result<WorkerReply> {
    let counter = ReadCounter::new();
    let mut tx = db.store().snapshot_at(node, Timestamp(ts))?;
    tx.set_read_counter(counter.clone());
    let out = Evaluator { g, view }.eval(&mut tx, plan, hop, addrs)?;
    Ok(WorkerReply {
        out,
        local_reads: counter.local(),
        remote_reads: counter.remote(),
    })
}

fn resolve_anchor(g: &Graph, view: &GraphView, tx: &mut Txn, anchor: &Anchor) -> Result<BTreeSet<Addr>> {
    let mut out = BTreeSet::new();
    match anchor {
        Anchor::Pk { types, value } => {
            for t in types {
                let ti = view.type_by_id(*t).ok_or_else(|| Error::UnknownType(format!("type id {t}")))?;
                let Some(pk) = ti.schema.pk_field() else { continue };
                let v = value.clone().coerce(&pk.ty);
                let matches_type = matches!(
                    (&pk.ty, &v),
                    (FieldType::Str, Value::Str(_)) | (FieldType::Int, Value::Int(_))
                );
                if !matches_type {
                    continue;
                }
                if let Some(a) = g.find_vertex(tx, &ti.name, &v)? {
                    out.insert(a);
                }
            }
        }
        Anchor::Secondary { vtype, field, value } => {
            out.extend(g.lookup_by_secondary(tx, vtype, field, value)?);
        }
    }
    Ok(out)
}

/// Executes `query_text` against `graph` with `coordinator` as the
/// receiving node.
pub fn execute(db: &Db, graph: &str, coordinator: NodeId, query_text: &str, opts: &ExecOptions) -> Result<QueryOutput> {
    let q = parse(query_text)?;
    execute_parsed(db, graph, coordinator, &q, query_text, opts)
}

fn execute_parsed(db: &Db, graph: &str, coord: NodeId, q: &Query, text: &str, opts: &ExecOptions) -> Result<QueryOutput> {
    let cluster = db.cluster().clone();
    if !cluster.is_live(coord) {
        return Err(Error::NodeUnreachable(coord));
    }
    let incarnation = cluster.incarnation(coord);
    let ship_min = opts.ship_min.unwrap_or(db.config().ship_min).max(1);
    let budget = opts.budget.unwrap_or(db.config().query_budget);
    let page_size = opts.page_size.unwrap_or(db.config().page_size).max(1);
    let g = Graph::new(db.handle(), graph);
    let query_id = db.engine().next_id.fetch_add(1, Ordering::Relaxed);

    let anchor_counter = ReadCounter::new();
    let mut tx = db.store().create_transaction(coord, true)?;
    tx.set_read_counter(anchor_counter.clone());
    let ts = tx.read_ts().0;
    let (view, plan) = graph_plan(&g, coord, q, Some(&mut tx))?;
    let mut metrics = QueryMetrics {
        query_id,
        snapshot_ts: ts,
        coordinator: coord.0,
        ..Default::default()
    };
    let mut frontier = resolve_anchor(&g, &view, &mut tx, &plan.anchor)?;
    metrics.anchor_reads = anchor_counter.local() + anchor_counter.remote();

    let mut leaves: BTreeMap<Addr, Option<String>> = BTreeMap::new();
    let mut leaf_bytes = 0usize;
    let n = plan.steps.len();
    for hop in 0..n {
        let step = &plan.steps[hop];
        if hop + 1 == n && step.is_trivial() && plan.select == Select::Count {
            leaves.extend(frontier.iter().map(|a| (*a, None)));
            break;
        }
        metrics.hops += 1;
        let mut groups: BTreeMap<NodeId, Vec<Addr>> = BTreeMap::new();
        for a in &frontier {
            let owner = db.store().primary_of(*a).unwrap_or(coord);
            groups.entry(owner).or_default().push(*a);
        }
        let text_owned = text.to_string();
        let results: Vec<(bool, usize, Result<WorkerReply>)> = std::thread::scope(|sc| {
            let handles: Vec<_> = groups
                .iter()
                .map(|(node, addrs)| {
                    let (node, addrs) = (*node, addrs.clone());
                    let (g, view, plan, cluster, text) = (&g, &view, &plan, &cluster, &text_owned);
                    sc.spawn(move || {
                        let ship = node != coord && addrs.len() >= ship_min;
                        if ship {
                            let req = WorkerRequest {
                                graph: graph.to_string(),
                                ts,
                                query: text.clone(),
                                hop: hop as u32,
                                addrs: addrs.iter().map(|a| a.as_u64()).collect(),
                            };
                            let body = bincode::serialize(&req).expect("request encodes");
                            let msg = Message::Call {
                                service: WORKER_SERVICE.into(),
                                body,
                            };
                            match cluster.send_rpc(coord, node, msg) {
                                Ok(Message::Reply(b)) => {
                                    let r = bincode::deserialize::<WorkerReply>(&b)
                                        .map_err(|e| crate::error::corrupt(format!("worker reply: {e}")));
                                    return (true, addrs.len(), r);
                                }
                                Ok(other) => {
                                    return (true, addrs.len(), Err(crate::error::corrupt(format!("unexpected reply {other:?}"))))
                                }
                                Err(Error::NodeUnreachable(_)) => {}
                                Err(e) => return (true, addrs.len(), Err(e)),
                            }
                        }
                        let r = coordinator_eval(db, g, view, plan, coord, ts, hop, &addrs);
                        (false, addrs.len(), r)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("hop evaluation panicked")).collect()
        });
        let mut next = BTreeSet::new();
        for (shipped, count, r) in results {
            let r = r?;
            if shipped {
                metrics.rpcs += 1;
                metrics.shipped_vertices += count as u64;
            } else {
                metrics.coordinator_vertices += count as u64;
            }
            metrics.hop_local_reads += r.local_reads;
            metrics.hop_remote_reads += r.remote_reads;
            next.extend(r.out.next.into_iter().map(Addr::from_u64));
            for (a, row) in r.out.leaves {
                leaf_bytes += 8 + row.as_ref().map_or(0, |s| s.len());
                leaves.insert(Addr::from_u64(a), row);
            }
        }
        let bytes = next.len() * 16 + leaf_bytes;
        metrics.intermediate_bytes = metrics.intermediate_bytes.max(bytes);
        if bytes > budget {
            return Err(Error::FastFailBudget(budget));
        }
        if !cluster.is_live(coord) || cluster.incarnation(coord) != incarnation {
            return Err(Error::SnapshotLost);
        }
        frontier = next;
    }
    drop(tx);
    cluster.record_query(query_id, metrics.hop_local_reads, metrics.hop_remote_reads);
    if !cluster.is_live(coord) || cluster.incarnation(coord) != incarnation {
        return Err(Error::SnapshotLost);
    }

    let page = if plan.select == Select::Count {
        ResultPage {
            rows: Vec::new(),
            count: Some(leaves.len() as u64),
            token: None,
        }
    } else {
        let rows: Vec<String> = leaves.into_values().map(|r| r.unwrap_or_else(|| "null".into())).collect();
        paginate(db, coord, incarnation, query_id, rows, page_size)?
    };
    Ok(QueryOutput { page, metrics })
}

fn to_rows(rows: &[String]) -> Result<Vec<J>> {
    rows.iter()
        .map(|r| serde_json::from_str(r).map_err(|e| crate::error::corrupt(format!("row: {e}"))))
        .collect()
}

fn paginate(db: &Db, coord: NodeId, incarnation: u64, query_id: u64, rows: Vec<String>, page_size: usize) -> Result<ResultPage> {
    if rows.len() <= page_size {
        return Ok(ResultPage {
            rows: to_rows(&rows)?,
            count: None,
            token: None,
        });
    }
    let expires_at = db.cluster().now() + db.config().token_ttl;
    let first = to_rows(&rows[..page_size])?;
    db.engine().caches[coord.index()].lock().insert(
        query_id,
        CachedResult {
            rows: Arc::new(rows),
            page_size,
            expires_at,
        },
    );
    let token = encode_token(&TokenBody {
        coordinator: coord.0,
        incarnation,
        query_id,
        cursor: page_size as u64,
        expires_at,
    });
    Ok(ResultPage {
        rows: first,
        count: None,
        token: Some(token),
    })
}

fn serve_fetch(db: &Db, here: NodeId, query_id: u64, cursor: u64) -> Result<FetchReply> {
    let now = db.cluster().now();
    let mut cache = db.engine().caches[here.index()].lock();
    let Some(entry) = cache.get_mut(&query_id) else {
        return Err(Error::TokenInvalid);
    };
    if now > entry.expires_at {
        cache.remove(&query_id);
        return Err(Error::TokenExpired);
    }
    let start = cursor as usize;
    if start >= entry.rows.len() {
        return Err(Error::TokenInvalid);
    }
    let end = (start + entry.page_size).min(entry.rows.len());
    let rows = entry.rows[start..end].to_vec();
    let next_cursor = (end < entry.rows.len()).then_some(end as u64);
    let expires_at = now + db.config().token_ttl;
    if next_cursor.is_some() {
        entry.expires_at = expires_at;
    } else {
        cache.remove(&query_id);
    }
    Ok(FetchReply {
        rows,
        next_cursor,
        expires_at,
    })
}

/// Fetches the page a continuation token points at, routing from `via`
/// to the coordinator named in the token.
pub fn fetch_continuation(db: &Db, via: NodeId, token: &str) -> Result<ResultPage> {
    let t = decode_token(token)?;
    let cluster = db.cluster();
    let coord = NodeId(t.coordinator);
    if coord.index() >= cluster.node_count() {
        return Err(Error::TokenInvalid);
    }
    if cluster.now() > t.expires_at {
        return Err(Error::TokenExpired);
    }
    if !cluster.is_live(coord) || cluster.incarnation(coord) != t.incarnation {
        return Err(Error::TokenInvalid);
    }
    let reply = if via == coord {
        serve_fetch(db, coord, t.query_id, t.cursor)?
    } else {
        let body = bincode::serialize(&FetchRequest {
            query_id: t.query_id,
            cursor: t.cursor,
        })
        .expect("request encodes");
        match cluster.send_rpc(via, coord, Message::Call {
            service: FETCH_SERVICE.into(),
            body,
        }) {
            Ok(Message::Reply(b)) => bincode::deserialize(&b).map_err(|_| Error::TokenInvalid)?,
            Ok(_) | Err(Error::NodeUnreachable(_)) => return Err(Error::TokenInvalid),
            Err(e) => return Err(e),
        }
    };
    let token = reply.next_cursor.map(|c| {
        encode_token(&TokenBody {
            cursor: c,
            expires_at: reply.expires_at,
            ..t
        })
    });
    Ok(ResultPage {
        rows: to_rows(&reply.rows)?,
        count: None,
        token,
    })
}

impl Graph {
    /// Runs an A1QL query with this database's defaults, coordinated by
    /// `coordinator`.
    pub fn query(&self, coordinator: NodeId, text: &str) -> Result<QueryOutput> {
        execute(self.db(), self.name(), coordinator, text, &ExecOptions::default())
    }

    pub fn query_with(&self, coordinator: NodeId, text: &str, opts: &ExecOptions) -> Result<QueryOutput> {
        execute(self.db(), self.name(), coordinator, text, opts)
    }
}
