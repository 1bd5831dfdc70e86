//! Name service rooting every named structure.
//!
//! The catalog is a B-tree whose root sits at the reserved address
//! `(region 0, offset 0)`. Names are namespaced `tenant/graph/kind/name`.
//! Each entry owns a small meta object `[state:1][len:4][payload]` that
//! data-plane transactions read to learn whether the entry is being torn
//! down; because the read lands in their read set, flipping the state aborts
//! any in-flight transaction that depended on it.
//!
//! Resolved entries are cached per node. A cache entry expires after a fixed
//! number of resolve calls on that node; on expiry the catalog entry is
//! re-read and the cached proxy kept if nothing changed.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::btree::BTree;
use crate::error::{corrupt, Error, Result};
use crate::simnet::NodeId;
use crate::store::{Addr, FatRef, Hint, Store, Txn};

pub const CATALOG_ROOT: Addr = Addr::new(0, 0);
pub const DEFAULT_TTL: u64 = 1000;
pub const TENANT: &str = "default";
const SEQ_KEY: &[u8] = b"\x00sys/next_id";

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EntryKind {
    Graph,
    VertexType,
    EdgeType,
    Index,
    Tree,
    Queue,
    Log,
}

impl EntryKind {
    pub fn segment(self) -> &'static str {
        match self {
            EntryKind::Graph => "graph",
            EntryKind::VertexType => "vtype",
            EntryKind::EdgeType => "etype",
            EntryKind::Index => "index",
            EntryKind::Tree => "tree",
            EntryKind::Queue => "queue",
            EntryKind::Log => "log",
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EntryState {
    Active,
    Deleting,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub name: String,
    pub kind: EntryKind,
    pub state: EntryState,
    /// Unique, never reused.
    pub id: u32,
    pub root: FatRef,
    pub meta: Addr,
}

/// Builds `tenant/graph/kind/name`.
pub fn entry_name(graph: &str, kind: EntryKind, name: &str) -> String {
    format!("{TENANT}/{graph}/{}/{name}", kind.segment())
}

/// A materialized entry: the tree proxy (if the entry has a root) and the
/// meta payload as of resolution.
#[derive(Debug)]
pub struct Resolved {
    pub entry: CatalogEntry,
    pub tree: Option<BTree>,
    pub payload: Vec<u8>,
}

impl Resolved {
    pub fn tree(&self) -> Result<&BTree> {
        self.tree
            .as_ref()
            .ok_or_else(|| corrupt(format!("{} has no tree", self.entry.name)))
    }
}

struct Cached {
    resolved: Arc<Resolved>,
    expires_at: u64,
}

#[derive(Default)]
struct NodeCache {
    tick: u64,
    entries: HashMap<String, Cached>,
}

pub struct Catalog {
    store: Store,
    tree: BTree,
    caches: Vec<Mutex<NodeCache>>,
    ttl: u64,
    lookups: AtomicU64,
}

impl std::fmt::Debug for Catalog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Catalog").field("ttl", &self.ttl).finish()
    }
}

fn encode_meta(state: EntryState, payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(payload.len() + 5);
    out.push(match state {
        EntryState::Active => 0,
        EntryState::Deleting => 1,
    });
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.extend_from_slice(payload);
    out
}

fn decode_meta(buf: &[u8]) -> Result<(EntryState, Vec<u8>)> {
    if buf.len() < 5 {
        return Err(corrupt("short meta object"));
    }
    let state = match buf[0] {
        0 => EntryState::Active,
        1 => EntryState::Deleting,
        _ => return Err(corrupt("bad meta state")),
    };
    let len = u32::from_be_bytes(buf[1..5].try_into().unwrap()) as usize;
    let payload = buf.get(5..5 + len).ok_or_else(|| corrupt("truncated meta"))?;
    Ok((state, payload.to_vec()))
}

fn encode_entry(e: &CatalogEntry) -> Vec<u8> {
    bincode::serialize(e).expect("entry encodes")
}

fn decode_entry(b: &[u8]) -> Result<CatalogEntry> {
    bincode::deserialize(b).map_err(|e| corrupt(format!("catalog entry: {e}")))
}

impl Catalog {
    /// Creates the catalog tree. Must be the first allocation in the store so
    /// that it lands at the reserved address.
    pub fn bootstrap(store: &Store) -> Result<Catalog> {
        let root = store.run(NodeId(0), |tx| BTree::create(tx, Hint::Local))?;
        if root.addr != CATALOG_ROOT {
            return Err(corrupt(format!("catalog root landed at {}", root.addr)));
        }
        Ok(Self::open(store, root))
    }

    pub fn open(store: &Store, root: FatRef) -> Catalog {
        let nodes = store.cluster().node_count();
        Catalog {
            store: store.clone(),
            tree: BTree::open(root),
            caches: (0..nodes).map(|_| Mutex::new(NodeCache::default())).collect(),
            ttl: DEFAULT_TTL,
            lookups: AtomicU64::new(0),
        }
    }

    pub fn with_ttl(mut self, ttl: u64) -> Self {
        self.ttl = ttl;
        self
    }

    pub fn root(&self) -> FatRef {
        self.tree.root()
    }

    /// Catalog lookups performed by [`Catalog::resolve`] so far.
    pub fn lookups(&self) -> u64 {
        self.lookups.load(Ordering::Relaxed)
    }

    /// Allocates a fresh id from the catalog sequence.
    pub fn next_id(&self, tx: &mut Txn) -> Result<u32> {
        let cur = match self.tree.get(tx, SEQ_KEY)? {
            Some(v) => u32::from_be_bytes(v.as_slice().try_into().map_err(|_| corrupt("sequence"))?),
            None => 1,
        };
        self.tree.upsert(tx, SEQ_KEY, &(cur + 1).to_be_bytes())?;
        Ok(cur)
    }

    /// Registers a new entry with a meta object holding `payload`.
    pub fn register(
        &self,
        tx: &mut Txn,
        name: &str,
        kind: EntryKind,
        root: FatRef,
        payload: &[u8],
    ) -> Result<CatalogEntry> {
        if self.tree.get(tx, name.as_bytes())?.is_some() {
            return Err(Error::NameExists(name.to_string()));
        }
        let id = self.next_id(tx)?;
        let meta_bytes = encode_meta(EntryState::Active, payload);
        let near = if root.is_null() { Hint::Local } else { Hint::Near(root.addr) };
        let mut meta = tx.alloc(meta_bytes.len().max(64), near)?;
        meta.bytes_mut()[..meta_bytes.len()].copy_from_slice(&meta_bytes);
        tx.write(&meta)?;
        let entry = CatalogEntry {
            name: name.to_string(),
            kind,
            state: EntryState::Active,
            id,
            root,
            meta: meta.addr(),
        };
        self.tree.insert(tx, name.as_bytes(), &encode_entry(&entry))?;
        Ok(entry)
    }

    pub fn get(&self, tx: &mut Txn, name: &str) -> Result<Option<CatalogEntry>> {
        self.tree.get(tx, name.as_bytes())?.map(|v| decode_entry(&v)).transpose()
    }

    fn must_get(&self, tx: &mut Txn, name: &str) -> Result<CatalogEntry> {
        self.get(tx, name)?.ok_or_else(|| Error::NotFound(name.to_string()))
    }

    /// Entries whose name starts with `prefix`, in name order.
    pub fn list(&self, tx: &mut Txn, prefix: &str) -> Result<Vec<CatalogEntry>> {
        self.tree
            .scan_prefix(tx, prefix.as_bytes(), usize::MAX)?
            .into_iter()
            .filter(|(k, _)| k.as_slice() != SEQ_KEY)
            .map(|(_, v)| decode_entry(&v))
            .collect()
    }

    /// Reads the meta object inside `tx`, failing with DELETING unless the
    /// entry is active. Returns the payload.
    pub fn check_active(&self, tx: &mut Txn, entry: &CatalogEntry) -> Result<Vec<u8>> {
        let buf = tx.read_all(entry.meta).map_err(|e| match e {
            Error::InvalidAddr(_) => Error::NotFound(entry.name.clone()),
            e => e,
        })?;
        let (state, payload) = decode_meta(buf.bytes())?;
        if state != EntryState::Active {
            return Err(Error::Deleting(entry.name.clone()));
        }
        Ok(payload)
    }

    /// ACTIVE to DELETING is the only permitted transition.
    pub fn set_state(&self, tx: &mut Txn, name: &str, state: EntryState) -> Result<()> {
        let mut e = self.must_get(tx, name)?;
        if e.state == state {
            return Ok(());
        }
        if !(e.state == EntryState::Active && state == EntryState::Deleting) {
            return Err(Error::BadTransition(format!("{name}: {:?} to {state:?}", e.state)));
        }
        e.state = state;
        let buf = tx.read_all(e.meta)?;
        let (_, payload) = decode_meta(buf.bytes())?;
        tx.overwrite(e.meta, &encode_meta(state, &payload))?;
        self.tree.upsert(tx, name.as_bytes(), &encode_entry(&e))?;
        self.invalidate(name);
        Ok(())
    }

    /// Removes a DELETING entry and frees its meta object.
    pub fn remove(&self, tx: &mut Txn, name: &str) -> Result<()> {
        let e = self.must_get(tx, name)?;
        if e.state != EntryState::Deleting {
            return Err(Error::BadTransition(format!("{name}: remove while {:?}", e.state)));
        }
        tx.free(e.meta)?;
        self.tree.delete(tx, name.as_bytes())?;
        self.invalidate(name);
        Ok(())
    }

    /// Points an entry at a new root.
    pub fn set_root(&self, tx: &mut Txn, name: &str, root: FatRef) -> Result<()> {
        let mut e = self.must_get(tx, name)?;
        e.root = root;
        self.tree.upsert(tx, name.as_bytes(), &encode_entry(&e))?;
        Ok(())
    }

    /// Replaces the meta payload, keeping the state.
    pub fn set_payload(&self, tx: &mut Txn, name: &str, payload: &[u8]) -> Result<()> {
        let mut e = self.must_get(tx, name)?;
        let buf = tx.read_all(e.meta)?;
        let (state, _) = decode_meta(buf.bytes())?;
        let bytes = encode_meta(state, payload);
        if bytes.len() > buf.len() {
            let mut meta = tx.alloc(bytes.len(), Hint::Near(e.meta))?;
            meta.bytes_mut()[..bytes.len()].copy_from_slice(&bytes);
            tx.write(&meta)?;
            tx.free(e.meta)?;
            e.meta = meta.addr();
            self.tree.upsert(tx, name.as_bytes(), &encode_entry(&e))?;
        } else {
            tx.overwrite(e.meta, &bytes)?;
        }
        Ok(())
    }

    /// Cached resolution for data-plane use; DELETING entries are refused.
    pub fn resolve(&self, node: NodeId, name: &str) -> Result<Arc<Resolved>> {
        let r = self.resolve_any(node, name)?;
        if r.entry.state != EntryState::Active {
            return Err(Error::Deleting(name.to_string()));
        }
        Ok(r)
    }

    /// Cached resolution that also returns DELETING entries, for teardown
    /// workflows.
    pub fn resolve_any(&self, node: NodeId, name: &str) -> Result<Arc<Resolved>> {
        let cache = &self.caches[node.index()];
        let stale = {
            let mut c = cache.lock();
            c.tick += 1;
            let tick = c.tick;
            match c.entries.get(name) {
                Some(hit) if hit.expires_at > tick => return Ok(hit.resolved.clone()),
                Some(hit) => Some(hit.resolved.clone()),
                None => None,
            }
        };
        self.lookups.fetch_add(1, Ordering::Relaxed);
        let mut tx = self.store.create_transaction(node, true)?;
        let entry = self.get(&mut tx, name)?;
        let Some(entry) = entry else {
            cache.lock().entries.remove(name);
            return Err(Error::NotFound(name.to_string()));
        };
        let resolved = match stale {
            Some(old) if old.entry == entry => old,
            _ => {
                let meta = tx.read_all(entry.meta)?;
                let (_, payload) = decode_meta(meta.bytes())?;
                let tree = (!entry.root.is_null()).then(|| BTree::open(entry.root));
                Arc::new(Resolved {
                    entry,
                    tree,
                    payload,
                })
            }
        };
        let mut c = cache.lock();
        let expires_at = c.tick + self.ttl;
        c.entries.insert(
            name.to_string(),
            Cached {
                resolved: resolved.clone(),
                expires_at,
            },
        );
        Ok(resolved)
    }

    /// Drops a name from every node's cache.
    pub fn invalidate(&self, name: &str) {
        for c in &self.caches {
            c.lock().entries.remove(name);
        }
    }
}
