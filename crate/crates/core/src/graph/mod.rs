//! Property graph on top of the object store.
//!
//! Every vertex type owns a primary index (`pk -> header address`) and any
//! number of secondary indexes (`value ++ address -> ()`). Each graph owns
//! one edge tree holding the half-edges of vertices whose edge lists
//! outgrew the inline representation. All objects a graph allocates carry
//! the graph's allocation tag so leaks can be audited after deletion.
//!
//! Every mutation reads the meta object of each type it touches; a type
//! flipped to DELETING therefore rejects new work and aborts in-flight
//! transactions that raced with the flip.

mod bulk;
mod layout;
mod schema;
mod value;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use parking_lot::Mutex;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use bulk::{load_ndjson, LoadReport};
pub use layout::{
    Direction, EdgeListRef, HalfEdge, ListMode, VertexHeader, HEADER_SIZE, INITIAL_EDGE_CAPACITY,
    SPILL_THRESHOLD,
};
pub use schema::{Field, FieldType, Schema, TypeKind};
pub use value::{Record, Value};

use crate::btree::BTree;
use crate::catalog::{entry_name, CatalogEntry, EntryKind, EntryState};
use crate::db::Db;
use crate::drstore::{DrMode, LogOp, LogTable};
use crate::error::{corrupt, Error, Result};
use crate::keys::KeyBuf;
use crate::simnet::NodeId;
use crate::store::{Addr, FatRef, Hint, Txn};

/// Immutable per-graph settings stored as the graph entry's payload.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphMeta {
    pub name: String,
    /// Allocation tag carried by every object of this graph.
    pub tag: u32,
    pub edge_tree: FatRef,
    pub log_tree: Option<FatRef>,
    pub dr_mode: Option<DrMode>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexDef {
    pub field: String,
    pub field_id: u32,
    pub root: FatRef,
    pub building: bool,
}

/// Mutable per-type settings stored in the type's meta object.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeMeta {
    pub schema: Schema,
    pub indexes: Vec<IndexDef>,
}

impl TypeMeta {
    fn encode(&self) -> Vec<u8> {
        bincode::serialize(self).expect("type meta encodes")
    }

    pub(crate) fn decode(b: &[u8]) -> Result<TypeMeta> {
        bincode::deserialize(b).map_err(|e| corrupt(format!("type meta: {e}")))
    }
}

/// Static description of a type as cached per node.
#[derive(Debug)]
pub struct TypeInfo {
    pub id: u32,
    pub name: String,
    pub kind: TypeKind,
    pub schema: Schema,
    pub entry: CatalogEntry,
    pub primary: Option<BTree>,
}

/// A node's cached view of one graph.
#[derive(Debug)]
pub struct GraphView {
    pub entry: CatalogEntry,
    pub meta: GraphMeta,
    pub edge_tree: BTree,
    pub by_name: HashMap<String, Arc<TypeInfo>>,
    pub by_id: HashMap<u32, Arc<TypeInfo>>,
    indexes: Mutex<HashMap<Addr, Arc<BTree>>>,
}

impl GraphView {
    pub fn type_named(&self, name: &str) -> Option<&Arc<TypeInfo>> {
        self.by_name.get(name)
    }

    pub fn type_by_id(&self, id: u32) -> Option<&Arc<TypeInfo>> {
        self.by_id.get(&id)
    }

    pub fn vertex_types(&self) -> impl Iterator<Item = &Arc<TypeInfo>> {
        let mut v: Vec<_> = self.by_id.values().filter(|t| t.kind == TypeKind::Vertex).collect();
        v.sort_by_key(|t| t.id);
        v.into_iter()
    }

    pub fn index_tree(&self, root: FatRef) -> Arc<BTree> {
        self.indexes
            .lock()
            .entry(root.addr)
            .or_insert_with(|| Arc::new(BTree::open(root).tagged(self.meta.tag)))
            .clone()
    }
}

/// A vertex as read at a snapshot.
#[derive(Clone, Debug, PartialEq)]
pub struct Vertex {
    pub addr: Addr,
    pub header: VertexHeader,
    pub record: Record,
}

/// Identifies an edge by its endpoints.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EdgeKey {
    pub src: Addr,
    pub edge_type: String,
    pub dst: Addr,
}

/// Handle on a named graph. Cheap to clone.
#[derive(Clone)]
pub struct Graph {
    db: Arc<Db>,
    name: String,
}

impl std::fmt::Debug for Graph {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Graph").field("name", &self.name).finish()
    }
}

pub(crate) fn graph_entry_name(graph: &str) -> String {
    entry_name(graph, EntryKind::Graph, graph)
}

fn type_entry_name(graph: &str, kind: TypeKind, name: &str) -> String {
    let k = match kind {
        TypeKind::Vertex => EntryKind::VertexType,
        TypeKind::Edge => EntryKind::EdgeType,
    };
    entry_name(graph, k, name)
}

impl Graph {
    pub(crate) fn new(db: Arc<Db>, name: &str) -> Graph {
        Graph {
            db,
            name: name.to_string(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn db(&self) -> &Arc<Db> {
        &self.db
    }

    /// The node's cached view, rebuilt when `need` names a type it lacks.
    pub fn view(&self, node: NodeId) -> Result<Arc<GraphView>> {
        self.db.graph_view(node, &self.name, false)
    }

    fn view_with_type(&self, node: NodeId, name: &str) -> Result<Arc<GraphView>> {
        let v = self.view(node)?;
        if v.by_name.contains_key(name) {
            return Ok(v);
        }
        let v = self.db.graph_view(node, &self.name, true)?;
        if v.by_name.contains_key(name) {
            Ok(v)
        } else {
            Err(Error::UnknownType(name.to_string()))
        }
    }

    fn view_with_id(&self, node: NodeId, id: u32) -> Result<(Arc<GraphView>, Arc<TypeInfo>)> {
        let v = self.view(node)?;
        if let Some(t) = v.by_id.get(&id).cloned() {
            return Ok((v, t));
        }
        let v = self.db.graph_view(node, &self.name, true)?;
        let t = v
            .by_id
            .get(&id)
            .cloned()
            .ok_or_else(|| Error::UnknownType(format!("type id {id}")))?;
        Ok((v, t))
    }

    pub fn type_info(&self, node: NodeId, name: &str) -> Result<Arc<TypeInfo>> {
        let v = self.view_with_type(node, name)?;
        Ok(v.by_name[name].clone())
    }

    pub fn type_by_id(&self, node: NodeId, id: u32) -> Result<Arc<TypeInfo>> {
        Ok(self.view_with_id(node, id)?.1)
    }

    fn begin(&self, tx: &mut Txn) -> Result<Arc<GraphView>> {
        let v = self.view(tx.node())?;
        tx.set_alloc_tag(v.meta.tag);
        Ok(v)
    }

    /// Reads the type's meta object in `tx`, rejecting DELETING types.
    pub fn type_meta(&self, tx: &mut Txn, ti: &TypeInfo) -> Result<Arc<TypeMeta>> {
        let payload = match self.db.catalog().check_active(tx, &ti.entry) {
            Ok(p) => p,
            Err(Error::Deleting(_)) => return Err(Error::Deleting(ti.name.clone())),
            Err(Error::NotFound(_)) => {
                // meta object moved or entry removed since the view was built
                self.db.invalidate_view(&self.name);
                return Err(Error::Conflict);
            }
            Err(e) => return Err(e),
        };
        self.db.decode_type_meta(ti.entry.meta, &payload)
    }

    /// Registers a vertex or edge type.
    pub fn create_type(&self, schema: &Schema) -> Result<u32> {
        let cat = self.db.catalog();
        let name = type_entry_name(&self.name, schema.kind, &schema.type_name);
        let node = self.db.coordinator();
        let id = self.db.store().run(node, |tx| {
            let view = self.begin(tx)?;
            cat.check_active(tx, &view.entry)?;
            let root = match schema.kind {
                TypeKind::Vertex => BTree::create(tx, Hint::Local)?,
                TypeKind::Edge => FatRef::NULL,
            };
            let meta = TypeMeta {
                schema: schema.clone(),
                indexes: Vec::new(),
            };
            let kind = match schema.kind {
                TypeKind::Vertex => EntryKind::VertexType,
                TypeKind::Edge => EntryKind::EdgeType,
            };
            let entry = cat.register(tx, &name, kind, root, &meta.encode())?;
            if view.meta.log_tree.is_some() {
                let key = KeyBuf::new().str(&schema.type_name).into_bytes();
                let val = schema.to_json().to_string().into_bytes();
                self.db.log(tx, &view.meta, LogTable::Schema, LogOp::Upsert, key, val)?;
            }
            Ok(entry.id)
        })?;
        self.db.invalidate_view(&self.name);
        Ok(id)
    }

    /// Marks a vertex type DELETING and enqueues its teardown. Edge types
    /// are only removed together with their graph.
    pub fn delete_type(&self, type_name: &str) -> Result<u64> {
        let node = self.db.coordinator();
        let ti = self.type_info(node, type_name)?;
        if ti.kind != TypeKind::Vertex {
            return Err(Error::SchemaViolation(format!(
                "edge type {type_name} is removed with its graph"
            )));
        }
        let name = type_entry_name(&self.name, TypeKind::Vertex, type_name);
        let id = self.db.store().run(node, |tx| {
            let e = self
                .db
                .catalog()
                .get(tx, &name)?
                .ok_or_else(|| Error::NotFound(name.clone()))?;
            if e.state == EntryState::Deleting {
                return Err(Error::Deleting(type_name.to_string()));
            }
            self.db.catalog().set_state(tx, &name, EntryState::Deleting)?;
            self.db.queue().enqueue(
                tx,
                crate::tasks::TaskKind::DeleteType {
                    graph: self.name.clone(),
                    type_name: type_name.to_string(),
                },
                None,
            )
        })?;
        self.db.invalidate_view(&self.name);
        Ok(id)
    }

    fn vertex_type(&self, node: NodeId, name: &str) -> Result<(Arc<GraphView>, Arc<TypeInfo>)> {
        let v = self.view_with_type(node, name)?;
        let t = v.by_name[name].clone();
        if t.kind != TypeKind::Vertex {
            return Err(Error::UnknownType(format!("{name} is not a vertex type")));
        }
        Ok((v, t))
    }

    fn edge_type(&self, node: NodeId, name: &str) -> Result<(Arc<GraphView>, Arc<TypeInfo>)> {
        let v = self.view_with_type(node, name)?;
        let t = v.by_name[name].clone();
        if t.kind != TypeKind::Edge {
            return Err(Error::UnknownType(format!("{name} is not an edge type")));
        }
        Ok((v, t))
    }

    fn check_record(schema: &Schema, rec: &Record) -> Result<()> {
        for (id, v) in &rec.0 {
            let f = schema
                .field_by_id(*id)
                .ok_or_else(|| Error::SchemaViolation(format!("{} has no field id {id}", schema.type_name)))?;
            let ok = match (&f.ty, v) {
                (FieldType::Int, Value::Int(_))
                | (FieldType::Float, Value::Float(_))
                | (FieldType::Str, Value::Str(_))
                | (FieldType::Bool, Value::Bool(_))
                | (FieldType::Date, Value::Date(_))
                | (FieldType::Blob, Value::Blob(_))
                | (FieldType::Map, Value::Map(_)) => true,
                (FieldType::List(inner), Value::List(items)) => items
                    .iter()
                    .all(|i| Value::from_json(inner, &i.to_json()).is_ok_and(|x| &x == i)),
                _ => false,
            };
            if !ok {
                return Err(Error::SchemaViolation(format!(
                    "field {} expects {}, got {}",
                    f.name,
                    f.ty,
                    v.type_name()
                )));
            }
        }
        Ok(())
    }

    fn pk_of<'a>(schema: &Schema, rec: &'a Record) -> Result<&'a Value> {
        let f = schema.pk_field().ok_or_else(|| corrupt("vertex type without primary key"))?;
        rec.get(f.id)
            .ok_or_else(|| Error::SchemaViolation(format!("missing primary key {}", f.name)))
    }

    /// Picks the node a new vertex lives on, uniformly among live nodes.
    fn placement(&self) -> NodeId {
        let nodes = self.db.cluster().live_nodes();
        let i = self.db.cluster().with_rng(|r| r.gen_range(0..nodes.len()));
        nodes[i]
    }

    fn write_blob(&self, tx: &mut Txn, payload: &[u8], hint: Hint) -> Result<FatRef> {
        let bytes = layout::encode_blob(payload);
        let mut buf = tx.alloc(bytes.len(), hint)?;
        buf.bytes_mut().copy_from_slice(&bytes);
        tx.write(&buf)?;
        Ok(FatRef::new(buf.addr(), bytes.len() as u32))
    }

    fn read_blob(tx: &mut Txn, r: FatRef) -> Result<Vec<u8>> {
        let buf = tx.read(r.addr, r.size as usize)?;
        Ok(layout::decode_blob(buf.bytes())?.to_vec())
    }

    pub fn create_vertex_json(
        &self,
        tx: &mut Txn,
        type_name: &str,
        attrs: &serde_json::Map<String, serde_json::Value>,
    ) -> Result<Addr> {
        let (_, ti) = self.vertex_type(tx.node(), type_name)?;
        let rec = Record::from_json(&ti.schema, attrs)?;
        self.create_vertex(tx, type_name, rec)
    }

    /// Creates a vertex: header and data in one region on a randomly chosen
    /// node, plus primary and secondary index entries.
    pub fn create_vertex(&self, tx: &mut Txn, type_name: &str, rec: Record) -> Result<Addr> {
        let view = self.begin(tx)?;
        let (_, ti) = self.vertex_type(tx.node(), type_name)?;
        let tm = self.type_meta(tx, &ti)?;
        Self::check_record(&tm.schema, &rec)?;
        let pk = Self::pk_of(&tm.schema, &rec)?.key()?;
        let primary = ti.primary.as_ref().ok_or_else(|| corrupt("vertex type without index"))?;
        if primary.get(tx, &pk)?.is_some() {
            return Err(Error::DuplicateKey);
        }
        let node = self.placement();
        let mut header = tx.alloc(HEADER_SIZE, Hint::On(node))?;
        let addr = header.addr();
        let data = self.write_blob(tx, &rec.encode(), Hint::Near(addr))?;
        let h = VertexHeader {
            type_id: ti.id,
            data,
            out_edges: EdgeListRef::EMPTY,
            in_edges: EdgeListRef::EMPTY,
        };
        header.bytes_mut().copy_from_slice(&h.encode());
        tx.write(&header)?;
        primary.insert(tx, &pk, &addr.to_bytes())?;
        for idx in &tm.indexes {
            if let Some(v) = rec.get(idx.field_id) {
                let key = secondary_key(v, addr)?;
                view.index_tree(idx.root).upsert(tx, &key, &[])?;
            }
        }
        if view.meta.log_tree.is_some() {
            let key = vertex_durable_key(type_name, Self::pk_of(&tm.schema, &rec)?)?;
            self.db
                .log(tx, &view.meta, LogTable::Vertex, LogOp::Upsert, key, rec.encode())?;
        }
        Ok(addr)
    }

    pub fn find_vertex(&self, tx: &mut Txn, type_name: &str, pk: &Value) -> Result<Option<Addr>> {
        let (_, ti) = self.vertex_type(tx.node(), type_name)?;
        let primary = ti.primary.as_ref().ok_or_else(|| corrupt("vertex type without index"))?;
        primary
            .get(tx, &pk.key()?)?
            .map(|v| Addr::from_bytes(&v))
            .transpose()
    }

    /// Index lookup, then header and data reads.
    pub fn lookup_by_pk(&self, tx: &mut Txn, type_name: &str, pk: &Value) -> Result<Vertex> {
        let addr = self
            .find_vertex(tx, type_name, pk)?
            .ok_or_else(|| Error::NotFound(format!("{type_name} {pk}")))?;
        self.read_vertex(tx, addr)
    }

    pub fn read_header(&self, tx: &mut Txn, addr: Addr) -> Result<VertexHeader> {
        let buf = tx.read(addr, HEADER_SIZE).map_err(|e| match e {
            Error::InvalidAddr(a) => Error::NotFound(format!("vertex {a}")),
            e => e,
        })?;
        VertexHeader::decode(buf.bytes())
    }

    pub fn read_record(&self, tx: &mut Txn, header: &VertexHeader) -> Result<Record> {
        Record::decode(&Self::read_blob(tx, header.data)?)
    }

    pub fn read_vertex(&self, tx: &mut Txn, addr: Addr) -> Result<Vertex> {
        let header = self.read_header(tx, addr)?;
        let record = self.read_record(tx, &header)?;
        Ok(Vertex { addr, header, record })
    }

    /// Merges `attrs` into the vertex's record. The data object is
    /// reallocated next to the header; the header address is unchanged.
    pub fn update_vertex(&self, tx: &mut Txn, type_name: &str, pk: &Value, attrs: Record) -> Result<()> {
        let view = self.begin(tx)?;
        let (_, ti) = self.vertex_type(tx.node(), type_name)?;
        let tm = self.type_meta(tx, &ti)?;
        Self::check_record(&tm.schema, &attrs)?;
        let pk_id = tm.schema.pk_field().map(|f| f.id);
        if let Some(new_pk) = pk_id.and_then(|id| attrs.get(id)) {
            if new_pk != pk {
                return Err(Error::SchemaViolation("primary key cannot change".into()));
            }
        }
        let v = self.lookup_by_pk(tx, type_name, pk)?;
        let mut rec = v.record.clone();
        for (k, val) in attrs.0 {
            rec.0.insert(k, val);
        }
        for idx in &tm.indexes {
            let old = v.record.get(idx.field_id);
            let new = rec.get(idx.field_id);
            if old == new {
                continue;
            }
            let tree = view.index_tree(idx.root);
            if let Some(o) = old {
                tree.remove(tx, &secondary_key(o, v.addr)?)?;
            }
            if let Some(n) = new {
                tree.upsert(tx, &secondary_key(n, v.addr)?, &[])?;
            }
        }
        let data = self.write_blob(tx, &rec.encode(), Hint::Near(v.addr))?;
        tx.free(v.header.data.addr)?;
        let mut h = v.header;
        h.data = data;
        tx.overwrite(v.addr, &h.encode())?;
        if view.meta.log_tree.is_some() {
            let key = vertex_durable_key(type_name, pk)?;
            self.db
                .log(tx, &view.meta, LogTable::Vertex, LogOp::Upsert, key, rec.encode())?;
        }
        Ok(())
    }

    /// Half-edges of a vertex in one direction, optionally of one type.
    pub fn enumerate_edges(
        &self,
        tx: &mut Txn,
        addr: Addr,
        dir: Direction,
        type_id: Option<u32>,
    ) -> Result<Vec<HalfEdge>> {
        let h = self.read_header(tx, addr)?;
        let view = self.view(tx.node())?;
        self.edges_of(tx, &view, addr, &h, dir, type_id)
    }

    pub fn edges_of(
        &self,
        tx: &mut Txn,
        view: &GraphView,
        addr: Addr,
        h: &VertexHeader,
        dir: Direction,
        type_id: Option<u32>,
    ) -> Result<Vec<HalfEdge>> {
        let list = h.edges(dir);
        let mut out = match list.mode {
            ListMode::Inline if list.count == 0 || list.inline.is_null() => Vec::new(),
            ListMode::Inline => {
                let buf = tx.read(list.inline.addr, list.inline.size as usize)?;
                layout::decode_list(buf.bytes())?
            }
            ListMode::Tree => {
                let prefix = layout::edge_tree_prefix(dir, addr, type_id);
                view.edge_tree
                    .scan_prefix(tx, &prefix, usize::MAX)?
                    .iter()
                    .map(|(k, v)| layout::decode_edge_tree_entry(k, v))
                    .collect::<Result<_>>()?
            }
        };
        if let Some(t) = type_id {
            out.retain(|e| e.type_id == t);
        }
        Ok(out)
    }

    /// Edge attributes (empty when the edge has no data object).
    pub fn edge_record(&self, tx: &mut Txn, he: &HalfEdge) -> Result<Record> {
        if he.data.is_null() {
            return Ok(Record::default());
        }
        Record::decode(&Self::read_blob(tx, he.data)?)
    }

    fn find_half(
        &self,
        tx: &mut Txn,
        view: &GraphView,
        addr: Addr,
        h: &VertexHeader,
        dir: Direction,
        type_id: u32,
        peer: Addr,
    ) -> Result<Option<HalfEdge>> {
        let list = h.edges(dir);
        match list.mode {
            ListMode::Tree => {
                let key = layout::edge_tree_key(dir, addr, type_id, peer);
                Ok(view
                    .edge_tree
                    .get(tx, &key)?
                    .map(|v| layout::decode_edge_tree_entry(&key, &v))
                    .transpose()?)
            }
            ListMode::Inline => Ok(self
                .edges_of(tx, view, addr, h, dir, Some(type_id))?
                .into_iter()
                .find(|e| e.peer == peer)),
        }
    }

    fn add_half(
        &self,
        tx: &mut Txn,
        view: &GraphView,
        addr: Addr,
        h: &mut VertexHeader,
        dir: Direction,
        he: HalfEdge,
    ) -> Result<()> {
        let list = *h.edges(dir);
        let count = list.count as usize;
        let new_list = match list.mode {
            ListMode::Tree => {
                let key = layout::edge_tree_key(dir, addr, he.type_id, he.peer);
                view.edge_tree.insert(tx, &key, &he.data.to_bytes())?;
                EdgeListRef {
                    count: list.count + 1,
                    ..list
                }
            }
            ListMode::Inline if count + 1 > SPILL_THRESHOLD => {
                let mut all = self.edges_of(tx, view, addr, h, dir, None)?;
                all.push(he);
                for e in &all {
                    let key = layout::edge_tree_key(dir, addr, e.type_id, e.peer);
                    view.edge_tree.insert(tx, &key, &e.data.to_bytes())?;
                }
                tx.free(list.inline.addr)?;
                EdgeListRef {
                    mode: ListMode::Tree,
                    inline: FatRef::NULL,
                    count: all.len() as u32,
                }
            }
            ListMode::Inline if list.inline.is_null() => {
                let size = layout::list_size(INITIAL_EDGE_CAPACITY);
                let mut buf = tx.alloc(size, Hint::Near(addr))?;
                buf.bytes_mut().copy_from_slice(&layout::encode_list(&[he], size));
                tx.write(&buf)?;
                EdgeListRef {
                    mode: ListMode::Inline,
                    inline: FatRef::new(buf.addr(), size as u32),
                    count: 1,
                }
            }
            ListMode::Inline => {
                let mut all = self.edges_of(tx, view, addr, h, dir, None)?;
                all.push(he);
                let cap = layout::list_capacity(list.inline.size);
                if all.len() <= cap {
                    tx.overwrite(list.inline.addr, &layout::encode_list(&all, list.inline.size as usize))?;
                    EdgeListRef {
                        count: all.len() as u32,
                        ..list
                    }
                } else {
                    let size = layout::list_size((cap * 2).min(SPILL_THRESHOLD));
                    let mut buf = tx.alloc(size, Hint::Near(addr))?;
                    buf.bytes_mut().copy_from_slice(&layout::encode_list(&all, size));
                    tx.write(&buf)?;
                    tx.free(list.inline.addr)?;
                    EdgeListRef {
                        mode: ListMode::Inline,
                        inline: FatRef::new(buf.addr(), size as u32),
                        count: all.len() as u32,
                    }
                }
            }
        };
        *h.edges_mut(dir) = new_list;
        Ok(())
    }

    fn remove_half(
        &self,
        tx: &mut Txn,
        view: &GraphView,
        addr: Addr,
        h: &mut VertexHeader,
        dir: Direction,
        type_id: u32,
        peer: Addr,
    ) -> Result<Option<HalfEdge>> {
        let list = *h.edges(dir);
        match list.mode {
            ListMode::Tree => {
                let key = layout::edge_tree_key(dir, addr, type_id, peer);
                let Some(v) = view.edge_tree.remove(tx, &key)? else {
                    return Ok(None);
                };
                h.edges_mut(dir).count -= 1;
                Ok(Some(layout::decode_edge_tree_entry(&key, &v)?))
            }
            ListMode::Inline => {
                let mut all = self.edges_of(tx, view, addr, h, dir, None)?;
                let Some(pos) = all.iter().position(|e| e.type_id == type_id && e.peer == peer) else {
                    return Ok(None);
                };
                let removed = all.remove(pos);
                tx.overwrite(list.inline.addr, &layout::encode_list(&all, list.inline.size as usize))?;
                h.edges_mut(dir).count = all.len() as u32;
                Ok(Some(removed))
            }
        }
    }

    /// Creates an edge, appending the out-half at `src` and the in-half at
    /// `dst` (growing or spilling their lists as needed).
    pub fn create_edge(&self, tx: &mut Txn, edge_type: &str, src: Addr, dst: Addr, attrs: Record) -> Result<()> {
        let view = self.begin(tx)?;
        let (_, et) = self.edge_type(tx.node(), edge_type)?;
        let etm = self.type_meta(tx, &et)?;
        Self::check_record(&etm.schema, &attrs)?;
        let mut sh = self.read_header(tx, src)?;
        let mut dh = if src == dst { sh } else { self.read_header(tx, dst)? };
        let (_, st) = self.view_with_id(tx.node(), sh.type_id)?;
        let (_, dt) = self.view_with_id(tx.node(), dh.type_id)?;
        self.type_meta(tx, &st)?;
        if dt.id != st.id {
            self.type_meta(tx, &dt)?;
        }
        if self.find_half(tx, &view, src, &sh, Direction::Out, et.id, dst)?.is_some() {
            return Err(Error::DuplicateEdge);
        }
        let data = if attrs.is_empty() {
            FatRef::NULL
        } else {
            self.write_blob(tx, &attrs.encode(), Hint::Near(src))?
        };
        let out = HalfEdge {
            type_id: et.id,
            peer: dst,
            data,
        };
        let inn = HalfEdge {
            type_id: et.id,
            peer: src,
            data,
        };
        if src == dst {
            self.add_half(tx, &view, src, &mut sh, Direction::Out, out)?;
            self.add_half(tx, &view, src, &mut sh, Direction::In, inn)?;
            tx.overwrite(src, &sh.encode())?;
            dh = sh;
        } else {
            self.add_half(tx, &view, src, &mut sh, Direction::Out, out)?;
            self.add_half(tx, &view, dst, &mut dh, Direction::In, inn)?;
            tx.overwrite(src, &sh.encode())?;
            tx.overwrite(dst, &dh.encode())?;
        }
        if view.meta.log_tree.is_some() {
            let key = self.edge_durable_key(tx, &st, &sh, edge_type, &dt, &dh)?;
            self.db
                .log(tx, &view.meta, LogTable::Edge, LogOp::Upsert, key, attrs.encode())?;
        }
        Ok(())
    }

    /// Convenience wrapper resolving both endpoints by primary key.
    #[allow(clippy::too_many_arguments)]
    pub fn create_edge_by_pk(
        &self,
        tx: &mut Txn,
        src_type: &str,
        src_pk: &Value,
        edge_type: &str,
        dst_type: &str,
        dst_pk: &Value,
        attrs: Record,
    ) -> Result<()> {
        let src = self
            .find_vertex(tx, src_type, src_pk)?
            .ok_or_else(|| Error::NotFound(format!("{src_type} {src_pk}")))?;
        let dst = self
            .find_vertex(tx, dst_type, dst_pk)?
            .ok_or_else(|| Error::NotFound(format!("{dst_type} {dst_pk}")))?;
        self.create_edge(tx, edge_type, src, dst, attrs)
    }

    /// Removes both halves and the edge's data object.
    pub fn delete_edge(&self, tx: &mut Txn, edge_type: &str, src: Addr, dst: Addr) -> Result<()> {
        let view = self.begin(tx)?;
        let (_, et) = self.edge_type(tx.node(), edge_type)?;
        self.type_meta(tx, &et)?;
        let mut sh = self.read_header(tx, src)?;
        let removed = self
            .remove_half(tx, &view, src, &mut sh, Direction::Out, et.id, dst)?
            .ok_or_else(|| Error::NotFound(format!("edge {src} {edge_type} {dst}")))?;
        let dh = if src == dst {
            self.remove_half(tx, &view, src, &mut sh, Direction::In, et.id, src)?;
            tx.overwrite(src, &sh.encode())?;
            sh
        } else {
            let mut h = self.read_header(tx, dst)?;
            self.remove_half(tx, &view, dst, &mut h, Direction::In, et.id, src)?;
            tx.overwrite(src, &sh.encode())?;
            tx.overwrite(dst, &h.encode())?;
            h
        };
        if !removed.data.is_null() {
            tx.free(removed.data.addr)?;
        }
        if view.meta.log_tree.is_some() {
            let st = self.type_by_id(tx.node(), sh.type_id)?;
            let dt = self.type_by_id(tx.node(), dh.type_id)?;
            let key = self.edge_durable_key(tx, &st, &sh, edge_type, &dt, &dh)?;
            self.db
                .log(tx, &view.meta, LogTable::Edge, LogOp::Delete, key, Vec::new())?;
        }
        Ok(())
    }

    pub fn delete_vertex(&self, tx: &mut Txn, type_name: &str, pk: &Value) -> Result<()> {
        let addr = self
            .find_vertex(tx, type_name, pk)?
            .ok_or_else(|| Error::NotFound(format!("{type_name} {pk}")))?;
        self.delete_vertex_at(tx, addr, true)
    }

    /// Deletes a vertex and every incident edge, removing mirror halves on
    /// the peers. `check_state` is false only for teardown workflows that
    /// delete vertices of a DELETING type.
    pub fn delete_vertex_at(&self, tx: &mut Txn, addr: Addr, check_state: bool) -> Result<()> {
        let view = self.begin(tx)?;
        let h = self.read_header(tx, addr)?;
        let (_, ti) = self.view_with_id(tx.node(), h.type_id)?;
        let tm = if check_state {
            self.type_meta(tx, &ti)?
        } else {
            let buf = tx.read_all(ti.entry.meta)?;
            let b = buf.bytes();
            let len = u32::from_be_bytes(b[1..5].try_into().map_err(|_| corrupt("meta"))?) as usize;
            self.db.decode_type_meta(ti.entry.meta, &b[5..5 + len])?
        };
        let rec = self.read_record(tx, &h)?;
        let logging = check_state && view.meta.log_tree.is_some();
        let mut logged: BTreeSet<(Direction, u32, Addr)> = BTreeSet::new();
        for dir in [Direction::Out, Direction::In] {
            let halves = self.edges_of(tx, &view, addr, &h, dir, None)?;
            for he in halves {
                if he.peer == addr {
                    // self loop: both halves live here and go with the vertex
                    if dir == Direction::Out {
                        if !he.data.is_null() {
                            tx.free(he.data.addr)?;
                        }
                        if logging {
                            logged.insert((Direction::Out, he.type_id, addr));
                        }
                    }
                } else {
                    let mut ph = self.read_header(tx, he.peer)?;
                    self.remove_half(tx, &view, he.peer, &mut ph, dir.reverse(), he.type_id, addr)?;
                    tx.overwrite(he.peer, &ph.encode())?;
                    if !he.data.is_null() {
                        tx.free(he.data.addr)?;
                    }
                    if logging {
                        logged.insert((dir, he.type_id, he.peer));
                    }
                }
                if h.edges(dir).mode == ListMode::Tree {
                    let key = layout::edge_tree_key(dir, addr, he.type_id, he.peer);
                    view.edge_tree.remove(tx, &key)?;
                }
            }
            let list = h.edges(dir);
            if list.mode == ListMode::Inline && !list.inline.is_null() {
                tx.free(list.inline.addr)?;
            }
        }
        let pk = Self::pk_of(&tm.schema, &rec)?;
        let primary = ti.primary.as_ref().ok_or_else(|| corrupt("vertex type without index"))?;
        primary.remove(tx, &pk.key()?)?;
        for idx in &tm.indexes {
            if let Some(v) = rec.get(idx.field_id) {
                view.index_tree(idx.root).remove(tx, &secondary_key(v, addr)?)?;
            }
        }
        tx.free(h.data.addr)?;
        tx.free(addr)?;
        if logging {
            let own_key = vertex_durable_key(&ti.name, pk)?;
            for (dir, type_id, peer) in logged {
                let et = self.type_by_id(tx.node(), type_id)?;
                let (pt, ppk) = if peer == addr {
                    (ti.clone(), pk.clone())
                } else {
                    let ph = self.read_header(tx, peer)?;
                    let pt = self.type_by_id(tx.node(), ph.type_id)?;
                    let prec = self.read_record(tx, &ph)?;
                    let ppk = Self::pk_of(&pt.schema, &prec)?.clone();
                    (pt, ppk)
                };
                let key = match dir {
                    Direction::Out => edge_durable_key(&ti.name, pk, &et.name, &pt.name, &ppk)?,
                    Direction::In => edge_durable_key(&pt.name, &ppk, &et.name, &ti.name, pk)?,
                };
                self.db
                    .log(tx, &view.meta, LogTable::Edge, LogOp::Delete, key, Vec::new())?;
            }
            self.db
                .log(tx, &view.meta, LogTable::Vertex, LogOp::Delete, own_key, Vec::new())?;
        }
        Ok(())
    }

    fn edge_durable_key(
        &self,
        tx: &mut Txn,
        st: &TypeInfo,
        sh: &VertexHeader,
        edge_type: &str,
        dt: &TypeInfo,
        dh: &VertexHeader,
    ) -> Result<Vec<u8>> {
        let srec = self.read_record(tx, sh)?;
        let drec = self.read_record(tx, dh)?;
        edge_durable_key(
            &st.name,
            Self::pk_of(&st.schema, &srec)?,
            edge_type,
            &dt.name,
            Self::pk_of(&dt.schema, &drec)?,
        )
    }

    /// Primary-index entries of a type in key order, starting after `after`.
    pub fn scan_type(
        &self,
        tx: &mut Txn,
        type_name: &str,
        after: Option<&[u8]>,
        limit: usize,
    ) -> Result<Vec<(Vec<u8>, Addr)>> {
        let ti = self.type_info(tx.node(), type_name)?;
        self.scan_type_info(tx, &ti, after, limit)
    }

    pub fn scan_type_info(
        &self,
        tx: &mut Txn,
        ti: &TypeInfo,
        after: Option<&[u8]>,
        limit: usize,
    ) -> Result<Vec<(Vec<u8>, Addr)>> {
        let primary = ti.primary.as_ref().ok_or_else(|| corrupt("vertex type without index"))?;
        let start = match after {
            Some(a) => std::ops::Bound::Excluded(a),
            None => std::ops::Bound::Unbounded,
        };
        let mut out = Vec::new();
        let mut err = None;
        primary.for_each(tx, start, None, |k, v| {
            match Addr::from_bytes(v) {
                Ok(a) => out.push((k.to_vec(), a)),
                Err(e) => err = Some(e),
            }
            out.len() < limit
        })?;
        match err {
            Some(e) => Err(e),
            None => Ok(out),
        }
    }

    /// Declares a secondary index; entries are built by a background task.
    pub fn create_secondary_index(&self, type_name: &str, field: &str) -> Result<u64> {
        let node = self.db.coordinator();
        let cat = self.db.catalog();
        let ename = type_entry_name(&self.name, TypeKind::Vertex, type_name);
        let task = self.db.store().run(node, |tx| {
            self.begin(tx)?;
            let (_, ti) = self.vertex_type(tx.node(), type_name)?;
            let tm = self.type_meta(tx, &ti)?;
            let f = tm
                .schema
                .field(field)
                .ok_or_else(|| Error::UnknownField(field.to_string()))?;
            if !f.ty.is_scalar() {
                return Err(Error::SchemaViolation(format!("cannot index {} field {field}", f.ty)));
            }
            if tm.indexes.iter().any(|i| i.field == field) {
                return Err(Error::NameExists(format!("{type_name}.{field}")));
            }
            let root = BTree::create(tx, Hint::Local)?;
            let mut next = (*tm).clone();
            next.indexes.push(IndexDef {
                field: field.to_string(),
                field_id: f.id,
                root,
                building: true,
            });
            cat.set_payload(tx, &ename, &next.encode())?;
            let args = crate::tasks::BuildIndexArgs {
                graph: self.name.clone(),
                vtype: type_name.to_string(),
                field: field.to_string(),
            };
            self.db.queue().enqueue(tx, crate::tasks::TaskKind::BuildIndex(args), None)
        })?;
        self.db.invalidate_view(&self.name);
        Ok(task)
    }

    /// Vertices whose indexed `field` equals `value`, in address order.
    pub fn lookup_by_secondary(&self, tx: &mut Txn, type_name: &str, field: &str, value: &Value) -> Result<Vec<Addr>> {
        let view = self.view(tx.node())?;
        let (_, ti) = self.vertex_type(tx.node(), type_name)?;
        let tm = self.type_meta(tx, &ti)?;
        let idx = tm
            .indexes
            .iter()
            .find(|i| i.field == field)
            .ok_or_else(|| Error::NotFound(format!("index on {type_name}.{field}")))?;
        if idx.building {
            return Err(Error::NotFound(format!("index on {type_name}.{field} is still building")));
        }
        let f = tm.schema.field(field).ok_or_else(|| Error::UnknownField(field.into()))?;
        let prefix = value.clone().coerce(&f.ty).key()?;
        let mut out: Vec<Addr> = view
            .index_tree(idx.root)
            .scan_prefix(tx, &prefix, usize::MAX)?
            .into_iter()
            .filter(|(k, _)| k.len() == prefix.len() + 8)
            .map(|(k, _)| Addr::from_bytes(&k[prefix.len()..]))
            .collect::<Result<_>>()?;
        out.sort();
        Ok(out)
    }

    /// Adds index entries for a batch of vertices (index build step).
    pub(crate) fn index_batch(&self, tx: &mut Txn, type_name: &str, field: &str, addrs: &[Addr]) -> Result<()> {
        let view = self.begin(tx)?;
        let (_, ti) = self.vertex_type(tx.node(), type_name)?;
        let tm = self.type_meta(tx, &ti)?;
        let Some(idx) = tm.indexes.iter().find(|i| i.field == field) else {
            return Ok(());
        };
        let tree = view.index_tree(idx.root);
        for a in addrs {
            let v = self.read_vertex(tx, *a)?;
            if let Some(val) = v.record.get(idx.field_id) {
                tree.upsert(tx, &secondary_key(val, *a)?, &[])?;
            }
        }
        Ok(())
    }

    pub(crate) fn finish_index(&self, tx: &mut Txn, type_name: &str, field: &str) -> Result<()> {
        self.begin(tx)?;
        let (_, ti) = self.vertex_type(tx.node(), type_name)?;
        let tm = self.type_meta(tx, &ti)?;
        let mut next = (*tm).clone();
        for i in next.indexes.iter_mut().filter(|i| i.field == field) {
            i.building = false;
        }
        let ename = type_entry_name(&self.name, TypeKind::Vertex, type_name);
        self.db.catalog().set_payload(tx, &ename, &next.encode())
    }

    /// Counts half-edges without a mirror on the peer, over every vertex
    /// of every type, at one snapshot.
    pub fn dangling_halves(&self, node: NodeId) -> Result<usize> {
        let mut tx = self.db.store().create_transaction(node, true)?;
        let view = self.db.graph_view(node, &self.name, true)?;
        let mut halves: HashMap<(Addr, u32, Addr, Direction), FatRef> = HashMap::new();
        for ti in view.vertex_types() {
            for (_, addr) in self.scan_type_info(&mut tx, ti, None, usize::MAX)? {
                let h = self.read_header(&mut tx, addr)?;
                for dir in [Direction::Out, Direction::In] {
                    let edges = self.edges_of(&mut tx, &view, addr, &h, dir, None)?;
                    if edges.len() != h.edges(dir).count as usize {
                        return Err(corrupt(format!("edge count mismatch at {addr}")));
                    }
                    for e in edges {
                        halves.insert((addr, e.type_id, e.peer, dir), e.data);
                    }
                }
            }
        }
        let mut unmatched = 0;
        for ((a, t, p, dir), data) in &halves {
            let mirror = halves.get(&(*p, *t, *a, dir.reverse()));
            if mirror != Some(data) {
                unmatched += 1;
            }
        }
        Ok(unmatched)
    }

    /// All edges of the graph as `(src, type, dst)` triples.
    pub fn edge_set(&self, tx: &mut Txn) -> Result<BTreeSet<(Addr, u32, Addr)>> {
        let view = self.db.graph_view(tx.node(), &self.name, true)?;
        let mut out = BTreeSet::new();
        for ti in view.vertex_types() {
            for (_, addr) in self.scan_type_info(tx, ti, None, usize::MAX)? {
                let h = self.read_header(tx, addr)?;
                for e in self.edges_of(tx, &view, addr, &h, Direction::Out, None)? {
                    out.insert((addr, e.type_id, e.peer));
                }
            }
        }
        Ok(out)
    }

    /// Every vertex keyed by `(type name, primary key)` with its record as
    /// JSON, plus edges keyed by endpoint primary keys. Used to compare
    /// graphs across clusters.
    pub fn export(&self, node: NodeId) -> Result<GraphExport> {
        let mut tx = self.db.store().create_transaction(node, true)?;
        let view = self.db.graph_view(node, &self.name, true)?;
        let mut out = GraphExport::default();
        let mut pks: HashMap<Addr, (String, String)> = HashMap::new();
        for ti in view.vertex_types() {
            for (_, addr) in self.scan_type_info(&mut tx, ti, None, usize::MAX)? {
                let v = self.read_vertex(&mut tx, addr)?;
                let pk = Self::pk_of(&ti.schema, &v.record)?.to_string();
                out.vertices.insert(
                    (ti.name.clone(), pk.clone()),
                    serde_json::Value::Object(v.record.to_json(&ti.schema)).to_string(),
                );
                pks.insert(addr, (ti.name.clone(), pk));
            }
        }
        for (src, t, dst) in self.edge_set(&mut tx)? {
            let et = view.type_by_id(t).ok_or_else(|| corrupt("edge type id"))?;
            let (a, b) = (&pks[&src], &pks[&dst]);
            out.edges
                .insert((a.0.clone(), a.1.clone(), et.name.clone(), b.0.clone(), b.1.clone()));
        }
        Ok(out)
    }
}

/// Address-independent snapshot of a graph's contents.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GraphExport {
    /// (type, pk) -> record JSON
    pub vertices: BTreeMap<(String, String), String>,
    /// (src type, src pk, edge type, dst type, dst pk)
    pub edges: BTreeSet<(String, String, String, String, String)>,
}

pub(crate) fn secondary_key(v: &Value, addr: Addr) -> Result<Vec<u8>> {
    let mut k = v.key()?;
    k.extend_from_slice(&addr.to_bytes());
    Ok(k)
}

/// Durable-store key of a vertex: `(type, pk)`.
pub fn vertex_durable_key(type_name: &str, pk: &Value) -> Result<Vec<u8>> {
    let part = pk.key_part().ok_or_else(|| corrupt("primary key not scalar"))?;
    Ok(KeyBuf::new().str(type_name).part(&part).into_bytes())
}

/// Durable-store key of an edge: `(src type, src pk, edge type, dst type, dst pk)`.
pub fn edge_durable_key(src_type: &str, src_pk: &Value, edge_type: &str, dst_type: &str, dst_pk: &Value) -> Result<Vec<u8>> {
    let sp = src_pk.key_part().ok_or_else(|| corrupt("primary key not scalar"))?;
    let dp = dst_pk.key_part().ok_or_else(|| corrupt("primary key not scalar"))?;
    Ok(KeyBuf::new()
        .str(src_type)
        .part(&sp)
        .str(edge_type)
        .str(dst_type)
        .part(&dp)
        .into_bytes())
}

/// Builds a graph view for `node` from the catalog.
pub(crate) fn load_view(db: &Db, node: NodeId, graph: &str) -> Result<GraphView> {
    let cat = db.catalog();
    let mut tx = db.store().create_transaction(node, true)?;
    let gentry = cat
        .get(&mut tx, &graph_entry_name(graph))?
        .ok_or_else(|| Error::NotFound(format!("graph {graph}")))?;
    let gbuf = tx.read_all(gentry.meta)?;
    let b = gbuf.bytes();
    if b.len() < 5 {
        return Err(corrupt("graph meta"));
    }
    let len = u32::from_be_bytes(b[1..5].try_into().unwrap()) as usize;
    let meta: GraphMeta =
        bincode::deserialize(&b[5..5 + len]).map_err(|e| corrupt(format!("graph meta: {e}")))?;
    let mut by_name = HashMap::new();
    let mut by_id = HashMap::new();
    for kind in [EntryKind::VertexType, EntryKind::EdgeType] {
        let prefix = format!("{}/", entry_name(graph, kind, "").trim_end_matches('/'));
        for e in cat.list(&mut tx, &prefix)? {
            let mbuf = tx.read_all(e.meta)?;
            let mb = mbuf.bytes();
            let len = u32::from_be_bytes(mb[1..5].try_into().map_err(|_| corrupt("meta"))?) as usize;
            let tm = db.decode_type_meta(e.meta, &mb[5..5 + len])?;
            let name = tm.schema.type_name.clone();
            let info = Arc::new(TypeInfo {
                id: e.id,
                name: name.clone(),
                kind: tm.schema.kind,
                schema: tm.schema.clone(),
                primary: (!e.root.is_null()).then(|| BTree::open(e.root).tagged(meta.tag)),
                entry: e,
            });
            by_id.insert(info.id, info.clone());
            by_name.insert(name, info);
        }
    }
    Ok(GraphView {
        entry: gentry,
        edge_tree: BTree::open(meta.edge_tree).tagged(meta.tag),
        meta,
        by_name,
        by_id,
        indexes: Mutex::new(HashMap::new()),
    })
}
