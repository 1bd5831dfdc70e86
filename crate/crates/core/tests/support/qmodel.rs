//! In-memory graph model, random A1QL query generator and a brute-force
//! evaluator over the model. The evaluator shares no code with the engine.

use std::collections::{BTreeMap, BTreeSet};

use a1lite::graph::{Graph, Schema};
use a1lite::store::Addr;
use rand::seq::SliceRandom;
use rand::Rng;
use serde_json::{json, Map, Value as J};

pub const SCHEMAS: &str = r#"[
  {"type": "A", "kind": "vertex", "primary_key": "k", "fields": [
    {"id": 0, "name": "k", "type": "STRING"},
    {"id": 1, "name": "x", "type": "INT"},
    {"id": 2, "name": "tags", "type": "LIST<STRING>"},
    {"id": 3, "name": "m", "type": "MAP<STRING,STRING>"}]},
  {"type": "B", "kind": "vertex", "primary_key": "k", "fields": [
    {"id": 0, "name": "k", "type": "STRING"},
    {"id": 1, "name": "x", "type": "INT"}]},
  {"type": "e", "kind": "edge", "fields": [{"id": 0, "name": "w", "type": "INT"}]},
  {"type": "f", "kind": "edge", "fields": []}
]"#;

const TAGS: [&str; 3] = ["red", "green", "blue"];
const EDGE_TYPES: [&str; 2] = ["e", "f"];

#[derive(Clone, Debug)]
pub struct MVertex {
    pub ty: &'static str,
    pub k: String,
    pub x: Option<i64>,
    pub tags: Option<Vec<String>>,
    pub m: Option<BTreeMap<String, String>>,
    pub addr: u64,
}

impl MVertex {
    pub fn record(&self) -> Map<String, J> {
        let mut o = Map::new();
        o.insert("k".into(), json!(self.k));
        if let Some(x) = self.x {
            o.insert("x".into(), json!(x));
        }
        if let Some(t) = &self.tags {
            o.insert("tags".into(), json!(t));
        }
        if let Some(m) = &self.m {
            o.insert("m".into(), json!(m));
        }
        o
    }
}

#[derive(Default, Clone, Debug)]
pub struct Model {
    pub verts: Vec<MVertex>,
    /// (src, type, dst) -> w
    pub edges: BTreeMap<(usize, &'static str, usize), Option<i64>>,
    adj: BTreeMap<(usize, bool, &'static str), Vec<(usize, Option<i64>)>>,
}

impl Model {
    pub fn random(rng: &mut impl Rng, n: usize, degree: f64) -> Model {
        let mut m = Model::default();
        for i in 0..n {
            let ty = if rng.gen_bool(0.6) { "A" } else { "B" };
            let x = rng.gen_bool(0.85).then(|| rng.gen_range(0..10));
            let (tags, map) = if ty == "A" {
                let tags = rng
                    .gen_bool(0.8)
                    .then(|| (0..rng.gen_range(0..4)).map(|_| TAGS.choose(rng).unwrap().to_string()).collect());
                let map = rng.gen_bool(0.7).then(|| {
                    let mut mm = BTreeMap::new();
                    mm.insert("c".to_string(), if rng.gen_bool(0.5) { "p" } else { "q" }.to_string());
                    mm
                });
                (tags, map)
            } else {
                (None, None)
            };
            m.verts.push(MVertex {
                ty,
                k: format!("v{i}"),
                x,
                tags,
                m: map,
                addr: 0,
            });
        }
        let want = (n as f64 * degree) as usize;
        for _ in 0..want {
            let s = rng.gen_range(0..n);
            // skew toward a few hubs so some vertices have many edges
            let d = if rng.gen_bool(0.1) { rng.gen_range(0..n.min(8)) } else { rng.gen_range(0..n) };
            let t = *EDGE_TYPES.choose(rng).unwrap();
            let w = (t == "e" && rng.gen_bool(0.9)).then(|| rng.gen_range(0..5));
            m.edges.insert((s, t, d), w);
        }
        m.index();
        m
    }

    pub fn index(&mut self) {
        self.adj.clear();
        for ((s, t, d), w) in &self.edges {
            self.adj.entry((*s, true, *t)).or_default().push((*d, *w));
            self.adj.entry((*d, false, *t)).or_default().push((*s, *w));
        }
    }

    /// Creates the types, vertices and edges in `g` and records addresses.
    pub fn load(&mut self, g: &Graph) {
        for s in Schema::many_from_json(SCHEMAS).unwrap() {
            g.create_type(&s).unwrap();
        }
        let db = g.db().clone();
        let node = db.coordinator();
        for chunk in (0..self.verts.len()).collect::<Vec<_>>().chunks(256) {
            let addrs = db
                .store()
                .run(node, |tx| {
                    chunk
                        .iter()
                        .map(|i| {
                            let v = &self.verts[*i];
                            g.create_vertex_json(tx, v.ty, &v.record())
                        })
                        .collect::<a1lite::Result<Vec<_>>>()
                })
                .unwrap();
            for (i, a) in chunk.iter().zip(addrs) {
                self.verts[*i].addr = a.as_u64();
            }
        }
        let edges: Vec<_> = self.edges.iter().map(|(k, w)| (*k, *w)).collect();
        for chunk in edges.chunks(256) {
            db.store()
                .run(node, |tx| {
                    for ((s, t, d), w) in chunk {
                        let mut o = Map::new();
                        if let Some(w) = w {
                            o.insert("w".into(), json!(w));
                        }
                        let et = g.type_info(node, t)?;
                        let rec = a1lite::graph::Record::from_json(&et.schema, &o)?;
                        g.create_edge(
                            tx,
                            t,
                            Addr::from_u64(self.verts[*s].addr),
                            Addr::from_u64(self.verts[*d].addr),
                            rec,
                        )?;
                    }
                    Ok(())
                })
                .unwrap();
        }
    }

    fn adjacent(&self, v: usize, out: bool, t: &'static str) -> Vec<(usize, Option<i64>)> {
        self.adj.get(&(v, out, t)).cloned().unwrap_or_default()
    }
}

#[derive(Clone, Copy, Debug)]
pub enum QOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl QOp {
    const ALL: [QOp; 6] = [QOp::Eq, QOp::Ne, QOp::Lt, QOp::Le, QOp::Gt, QOp::Ge];

    fn sym(self) -> &'static str {
        match self {
            QOp::Eq => "=",
            QOp::Ne => "!=",
            QOp::Lt => "<",
            QOp::Le => "<=",
            QOp::Gt => ">",
            QOp::Ge => ">=",
        }
    }

    fn test<T: Ord>(self, a: &T, b: &T) -> bool {
        match self {
            QOp::Eq => a == b,
            QOp::Ne => a != b,
            QOp::Lt => a < b,
            QOp::Le => a <= b,
            QOp::Gt => a > b,
            QOp::Ge => a >= b,
        }
    }
}

#[derive(Clone, Debug)]
pub enum QPred {
    Id(String),
    X(QOp, i64),
    Tag(usize, String),
    MapC(QOp, String),
}

impl QPred {
    fn key(&self) -> String {
        match self {
            QPred::Id(_) => "id".into(),
            QPred::X(..) => "x".into(),
            QPred::Tag(i, _) => format!("tags[{i}]"),
            QPred::MapC(..) => "m[c]".into(),
        }
    }

    fn json(&self) -> J {
        let op = |o: QOp, v: J| match o {
            QOp::Eq => v,
            o => json!({"_op": o.sym(), "_value": v}),
        };
        match self {
            QPred::Id(k) => json!(k),
            QPred::X(o, v) => op(*o, json!(v)),
            QPred::Tag(_, s) => json!(s),
            QPred::MapC(o, s) => op(*o, json!(s)),
        }
    }

    fn holds(&self, v: &MVertex) -> bool {
        match self {
            QPred::Id(k) => &v.k == k,
            QPred::X(o, lit) => v.x.is_some_and(|x| o.test(&x, lit)),
            QPred::Tag(i, s) => v.tags.as_ref().and_then(|t| t.get(*i)).is_some_and(|t| t == s),
            QPred::MapC(o, s) => v.m.as_ref().and_then(|m| m.get("c")).is_some_and(|c| o.test(c, s)),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct QStep {
    pub ty: Option<&'static str>,
    pub preds: Vec<QPred>,
    pub matches: Vec<QEdge>,
    pub order: Option<Vec<usize>>,
    pub edge: Option<Box<QEdge>>,
}

#[derive(Clone, Debug)]
pub struct QEdge {
    pub out: bool,
    pub ty: &'static str,
    pub w: Option<(QOp, i64)>,
    pub to: QStep,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum QSelect {
    Star,
    Count,
    Fields,
}

#[derive(Clone, Debug)]
pub struct QQuery {
    pub root: QStep,
    pub select: QSelect,
}

fn gen_preds(rng: &mut impl Rng, ty: Option<&str>, max: usize) -> Vec<QPred> {
    let mut by_key: BTreeMap<String, QPred> = BTreeMap::new();
    let n = if rng.gen_bool(0.5) { 0 } else { rng.gen_range(1..=max) };
    for _ in 0..n {
        let p = match rng.gen_range(0..4) {
            0 | 1 => QPred::X(*QOp::ALL.choose(rng).unwrap(), rng.gen_range(-1..11)),
            2 if ty != Some("B") => QPred::Tag(rng.gen_range(0..2), TAGS.choose(rng).unwrap().to_string()),
            3 if ty != Some("B") => QPred::MapC(*QOp::ALL.choose(rng).unwrap(), if rng.gen_bool(0.5) { "p" } else { "q" }.into()),
            _ => QPred::X(QOp::Ge, rng.gen_range(0..10)),
        };
        by_key.insert(p.key(), p);
    }
    by_key.into_values().collect()
}

fn gen_type(rng: &mut impl Rng) -> Option<&'static str> {
    match rng.gen_range(0..6) {
        0 => Some("A"),
        1 => Some("B"),
        _ => None,
    }
}

fn gen_edge(rng: &mut impl Rng, depth: usize, n: usize) -> QEdge {
    let ty = *EDGE_TYPES.choose(rng).unwrap();
    let w = (ty == "e" && rng.gen_bool(0.3)).then(|| (*QOp::ALL.choose(rng).unwrap(), rng.gen_range(0..5)));
    let tty = gen_type(rng);
    let mut to = QStep {
        ty: tty,
        preds: gen_preds(rng, tty, 1),
        ..Default::default()
    };
    if rng.gen_bool(0.1) {
        to.preds.push(QPred::Id(format!("v{}", rng.gen_range(0..n))));
    }
    if depth > 0 && rng.gen_bool(0.3) {
        to.edge = Some(Box::new(gen_edge(rng, depth - 1, n)));
    }
    QEdge {
        out: rng.gen_bool(0.6),
        ty,
        w,
        to,
    }
}

/// Random 1-3 hop query anchored at a vertex of the model (or, rarely, at
/// a key that does not exist).
pub fn gen_query(rng: &mut impl Rng, model: &Model) -> QQuery {
    let n = model.verts.len();
    let hops = rng.gen_range(1..=3);
    let anchor = if rng.gen_bool(0.03) { format!("nope{}", rng.gen::<u16>()) } else { format!("v{}", rng.gen_range(0..n)) };
    let root_ty = if rng.gen_bool(0.3) {
        anchor
            .strip_prefix('v')
            .and_then(|i| i.parse::<usize>().ok())
            .map(|i| if rng.gen_bool(0.8) { model.verts[i].ty } else { "B" })
    } else {
        None
    };
    let mut root = QStep {
        ty: root_ty,
        preds: vec![QPred::Id(anchor)],
        ..Default::default()
    };
    if rng.gen_bool(0.2) {
        root.preds.extend(gen_preds(rng, root_ty, 1).into_iter().filter(|p| !matches!(p, QPred::Id(_))));
    }
    // Build the path bottom-up, then thread it under the root.
    let mut steps: Vec<QStep> = vec![root];
    let mut edges: Vec<(bool, &'static str, Option<(QOp, i64)>)> = Vec::new();
    for _ in 0..hops {
        let ty = gen_type(rng);
        let mut s = QStep {
            ty,
            preds: gen_preds(rng, ty, 1),
            ..Default::default()
        };
        if rng.gen_bool(0.25) {
            let k = rng.gen_range(1..=2);
            s.matches = (0..k).map(|_| gen_edge(rng, 1, n)).collect();
            if k == 2 && rng.gen_bool(0.5) {
                s.order = Some(vec![1, 0]);
            }
        }
        let et = *EDGE_TYPES.choose(rng).unwrap();
        let w = (et == "e" && rng.gen_bool(0.2)).then(|| (*QOp::ALL.choose(rng).unwrap(), rng.gen_range(0..5)));
        edges.push((rng.gen_bool(0.6), et, w));
        steps.push(s);
    }
    if rng.gen_bool(0.15) {
        steps[0].matches = vec![gen_edge(rng, 0, n)];
    }
    let mut cur = steps.pop().unwrap();
    while let Some(mut prev) = steps.pop() {
        let (out, ty, w) = edges.pop().unwrap();
        prev.edge = Some(Box::new(QEdge { out, ty, w, to: cur }));
        cur = prev;
    }
    let select = *[QSelect::Star, QSelect::Count, QSelect::Fields].choose(rng).unwrap();
    let mut q = QQuery { root: cur, select };
    if select == QSelect::Fields {
        // tags[1] must resolve in the leaf type
        let leaf = q.leaf_mut();
        if leaf.ty == Some("B") {
            leaf.ty = None;
        }
    }
    q
}

impl QQuery {
    fn leaf_mut(&mut self) -> &mut QStep {
        let mut s = &mut self.root;
        while s.edge.is_some() {
            s = &mut s.edge.as_mut().unwrap().to;
        }
        s
    }
}

fn step_json(s: &QStep, select: Option<QSelect>) -> J {
    let mut o = Map::new();
    if let Some(t) = s.ty {
        o.insert("_type".into(), json!(t));
    }
    for p in &s.preds {
        o.insert(p.key(), p.json());
    }
    if !s.matches.is_empty() {
        o.insert(
            "_match".into(),
            J::Array(s.matches.iter().map(|e| json!({ edge_key(e): edge_json(e, None) })).collect()),
        );
    }
    if let Some(ord) = &s.order {
        o.insert("_hints".into(), json!({ "match_order": ord }));
    }
    match &s.edge {
        Some(e) => {
            o.insert(edge_key(e).into(), edge_json(e, select));
        }
        None => {
            if let Some(sel) = select {
                let v = match sel {
                    QSelect::Star => json!(["*"]),
                    QSelect::Count => json!(["_count(*)"]),
                    QSelect::Fields => json!(["k", "x", "tags[1]"]),
                };
                o.insert("_select".into(), v);
            }
        }
    }
    J::Object(o)
}

fn edge_key(e: &QEdge) -> &'static str {
    if e.out {
        "_out_edge"
    } else {
        "_in_edge"
    }
}

fn edge_json(e: &QEdge, select: Option<QSelect>) -> J {
    let mut o = Map::new();
    o.insert("_type".into(), json!(e.ty));
    if let Some((op, v)) = e.w {
        let val = match op {
            QOp::Eq => json!(v),
            op => json!({"_op": op.sym(), "_value": v}),
        };
        o.insert("w".into(), val);
    }
    o.insert("_vertex".into(), step_json(&e.to, select));
    J::Object(o)
}

impl QQuery {
    pub fn to_json(&self) -> J {
        step_json(&self.root, Some(self.select))
    }

    pub fn text(&self) -> String {
        self.to_json().to_string()
    }
}

pub enum Expected {
    Rows(Vec<J>),
    Count(u64),
}

impl Model {
    fn step_ok(&self, s: &QStep, v: usize) -> bool {
        let mv = &self.verts[v];
        if s.ty.is_some_and(|t| t != mv.ty) {
            return false;
        }
        if !s.preds.iter().all(|p| p.holds(mv)) {
            return false;
        }
        s.matches.iter().all(|e| self.probe(e, v))
    }

    fn edge_ok(e: &QEdge, w: Option<i64>) -> bool {
        match e.w {
            None => true,
            Some((op, lit)) => w.is_some_and(|w| op.test(&w, &lit)),
        }
    }

    fn probe(&self, e: &QEdge, v: usize) -> bool {
        self.adjacent(v, e.out, e.ty).into_iter().any(|(p, w)| {
            Self::edge_ok(e, w)
                && self.step_ok(&e.to, p)
                && match &e.to.edge {
                    Some(next) => self.probe(next, p),
                    None => true,
                }
        })
    }

    fn row(&self, v: usize, sel: QSelect) -> J {
        let mv = &self.verts[v];
        match sel {
            QSelect::Star => {
                let mut o = mv.record();
                o.insert("_type".into(), json!(mv.ty));
                J::Object(o)
            }
            QSelect::Fields => json!({
                "k": mv.k,
                "x": mv.x,
                "tags[1]": mv.tags.as_ref().and_then(|t| t.get(1)),
            }),
            QSelect::Count => J::Null,
        }
    }

    /// Brute-force evaluation: rows in ascending address order.
    pub fn eval(&self, q: &QQuery) -> Expected {
        let QPred::Id(anchor) = &q.root.preds[0] else { unreachable!() };
        let mut frontier: BTreeSet<usize> = self.verts.iter().position(|v| &v.k == anchor).into_iter().collect();
        let mut step = &q.root;
        loop {
            let pass: BTreeSet<usize> = frontier.iter().copied().filter(|v| self.step_ok(step, *v)).collect();
            match &step.edge {
                None => {
                    return match q.select {
                        QSelect::Count => Expected::Count(pass.len() as u64),
                        sel => {
                            let mut vs: Vec<usize> = pass.into_iter().collect();
                            vs.sort_by_key(|v| self.verts[*v].addr);
                            Expected::Rows(vs.into_iter().map(|v| self.row(v, sel)).collect())
                        }
                    }
                }
                Some(e) => {
                    let mut next = BTreeSet::new();
                    for v in pass {
                        for (p, w) in self.adjacent(v, e.out, e.ty) {
                            if Self::edge_ok(e, w) {
                                next.insert(p);
                            }
                        }
                    }
                    frontier = next;
                    step = &e.to;
                }
            }
        }
    }
}
