//! B-tree over store objects linked by fat references.
//!
//! Node layout:
//! `[kind:1][key_count:2][(key_len:2, key)*][children | (val_len:4, val)*][node_version:8]`
//! followed by a trailer `[owner root:8][lo fence][hi fence]`. The trailer
//! lets a reader that reached a leaf through possibly stale cached internal
//! nodes check that it is in the right tree and that the leaf covers the key.
//! When the check fails the lookup is retried from the root without the
//! cache, so a warm lookup costs one leaf read and a stale one costs one
//! extra walk.
//!
//! The root never moves: it is allocated at the maximum node size and a root
//! split moves its contents into two fresh children. Other nodes start small
//! and are reallocated (near their old location) when they outgrow their
//! object. Deletes never merge nodes.

use std::collections::HashMap;
use std::ops::Bound;
use std::sync::Arc;

use parking_lot::RwLock;

use crate::error::{corrupt, Error, Result};
use crate::store::{Addr, FatRef, Hint, Txn, SYSTEM_TAG};

/// Maximum keys per node; inserting the next one splits.
pub const FANOUT: usize = 16;
pub const MAX_KEY: usize = 256;
pub const MAX_VALUE: usize = 512;
/// Size of the root object, big enough for a full leaf of maximal entries.
pub const ROOT_SIZE: usize = 16 * 1024;
const MIN_NODE: usize = 256;
const MAX_DEPTH: usize = 24;

const LEAF: u8 = 1;
const INTERNAL: u8 = 2;

#[derive(Clone, Debug, PartialEq)]
struct Node {
    leaf: bool,
    keys: Vec<Vec<u8>>,
    children: Vec<FatRef>,
    vals: Vec<Vec<u8>>,
    version: u64,
    owner: Addr,
    lo: Vec<u8>,
    hi: Option<Vec<u8>>,
}

impl Node {
    fn empty_leaf(owner: Addr) -> Node {
        Node {
            leaf: true,
            keys: Vec::new(),
            children: Vec::new(),
            vals: Vec::new(),
            version: 0,
            owner,
            lo: Vec::new(),
            hi: None,
        }
    }

    fn covers(&self, key: &[u8]) -> bool {
        self.lo.as_slice() <= key && self.hi.as_deref().is_none_or(|hi| key < hi)
    }

    /// Child index for `key` in an internal node.
    fn route(&self, key: &[u8]) -> usize {
        self.keys.partition_point(|k| k.as_slice() <= key)
    }

    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64);
        out.push(if self.leaf { LEAF } else { INTERNAL });
        out.extend_from_slice(&(self.keys.len() as u16).to_be_bytes());
        for k in &self.keys {
            out.extend_from_slice(&(k.len() as u16).to_be_bytes());
            out.extend_from_slice(k);
        }
        if self.leaf {
            for v in &self.vals {
                out.extend_from_slice(&(v.len() as u32).to_be_bytes());
                out.extend_from_slice(v);
            }
        } else {
            for c in &self.children {
                out.extend_from_slice(&c.to_bytes());
            }
        }
        out.extend_from_slice(&self.version.to_be_bytes());
        out.extend_from_slice(&self.owner.to_bytes());
        out.extend_from_slice(&(self.lo.len() as u16).to_be_bytes());
        out.extend_from_slice(&self.lo);
        match &self.hi {
            Some(hi) => {
                out.push(1);
                out.extend_from_slice(&(hi.len() as u16).to_be_bytes());
                out.extend_from_slice(hi);
            }
            None => out.push(0),
        }
        out
    }

    fn decode(buf: &[u8]) -> Result<Node> {
        let mut r = Reader { buf, pos: 0 };
        let leaf = match r.u8()? {
            LEAF => true,
            INTERNAL => false,
            k => return Err(corrupt(format!("bad node kind {k}"))),
        };
        let n = r.u16()? as usize;
        if n > FANOUT + 1 {
            return Err(corrupt("node key count"));
        }
        let mut keys = Vec::with_capacity(n);
        for _ in 0..n {
            let len = r.u16()? as usize;
            keys.push(r.take(len)?.to_vec());
        }
        let (mut children, mut vals) = (Vec::new(), Vec::new());
        if leaf {
            for _ in 0..n {
                let len = r.u32()? as usize;
                vals.push(r.take(len)?.to_vec());
            }
        } else {
            for _ in 0..=n {
                children.push(FatRef::from_bytes(r.take(FatRef::LEN)?)?);
            }
        }
        let version = r.u64()?;
        let owner = Addr::from_bytes(r.take(8)?)?;
        let lo_len = r.u16()? as usize;
        let lo = r.take(lo_len)?.to_vec();
        let hi = match r.u8()? {
            0 => None,
            1 => {
                let len = r.u16()? as usize;
                Some(r.take(len)?.to_vec())
            }
            _ => return Err(corrupt("bad fence flag")),
        };
        Ok(Node {
            leaf,
            keys,
            children,
            vals,
            version,
            owner,
            lo,
            hi,
        })
    }

    /// Splits an overfull node, returning the separator and right half.
    fn split(&mut self) -> (Vec<u8>, Node) {
        let mid = self.keys.len() / 2;
        let mut right = Node {
            leaf: self.leaf,
            keys: Vec::new(),
            children: Vec::new(),
            vals: Vec::new(),
            version: 0,
            owner: self.owner,
            lo: Vec::new(),
            hi: self.hi.clone(),
        };
        let sep;
        if self.leaf {
            right.keys = self.keys.split_off(mid);
            right.vals = self.vals.split_off(mid);
            sep = right.keys[0].clone();
        } else {
            right.keys = self.keys.split_off(mid + 1);
            sep = self.keys.pop().expect("mid key");
            right.children = self.children.split_off(mid + 1);
        }
        right.lo = sep.clone();
        self.hi = Some(sep.clone());
        (sep, right)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len());
        let end = end.ok_or_else(|| corrupt("truncated node"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn node_size(encoded: usize) -> usize {
    encoded.next_power_of_two().max(MIN_NODE)
}

/// Shape summary from a full walk.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TreeStats {
    pub height: usize,
    pub nodes: usize,
    pub keys: usize,
}

struct Frame {
    r: FatRef,
    node: Node,
    idx: usize,
}

/// Per-node handle on one tree, caching its internal nodes.
pub struct BTree {
    root: FatRef,
    tag: u32,
    cache: RwLock<HashMap<Addr, Arc<Node>>>,
}

impl std::fmt::Debug for BTree {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BTree").field("root", &self.root).finish()
    }
}

impl BTree {
    /// Allocates an empty tree and returns its root reference.
    pub fn create(tx: &mut Txn, hint: Hint) -> Result<FatRef> {
        let mut buf = tx.alloc(ROOT_SIZE, hint)?;
        let root = FatRef::new(buf.addr(), ROOT_SIZE as u32);
        let enc = Node::empty_leaf(root.addr).encode();
        buf.bytes_mut()[..enc.len()].copy_from_slice(&enc);
        tx.write(&buf)?;
        Ok(root)
    }

    pub fn open(root: FatRef) -> BTree {
        BTree {
            root,
            tag: SYSTEM_TAG,
            cache: RwLock::new(HashMap::new()),
        }
    }

    /// Allocation tag for nodes created by splits and relocations.
    pub fn tagged(mut self, tag: u32) -> BTree {
        self.tag = tag;
        self
    }

    pub fn root(&self) -> FatRef {
        self.root
    }

    pub fn cached_nodes(&self) -> usize {
        self.cache.read().len()
    }

    pub fn clear_cache(&self) {
        self.cache.write().clear();
    }

    fn read_node(&self, tx: &mut Txn, r: FatRef) -> Result<Node> {
        let buf = tx.read(r.addr, r.size as usize)?;
        let node = Node::decode(buf.bytes())?;
        if node.owner != self.root.addr {
            return Err(corrupt("node belongs to another tree"));
        }
        if !node.leaf && !tx.has_pending_write(r.addr) {
            self.cache.write().insert(r.addr, Arc::new(node.clone()));
        }
        Ok(node)
    }

    /// Reaches the leaf for `key` through cached internal nodes. Returns
    /// `None` when the cached route turned out stale.
    fn warm_leaf(&self, tx: &mut Txn, key: &[u8]) -> Result<Option<(FatRef, Node)>> {
        let mut r = self.root;
        for _ in 0..MAX_DEPTH {
            let cached = self.cache.read().get(&r.addr).cloned();
            let node = match cached {
                Some(n) if !tx.has_pending_write(r.addr) => n,
                _ => match self.read_node(tx, r) {
                    Ok(n) => Arc::new(n),
                    Err(Error::InvalidAddr(_)) | Err(Error::Corrupt(_)) => return Ok(None),
                    Err(e) => return Err(e),
                },
            };
            if !node.covers(key) {
                return Ok(None);
            }
            if node.leaf {
                return Ok(Some((r, Arc::unwrap_or_clone(node))));
            }
            r = node.children[node.route(key)];
        }
        Ok(None)
    }

    /// Walks from the root reading every node through the transaction.
    fn cold_path(&self, tx: &mut Txn, key: &[u8]) -> Result<Vec<Frame>> {
        let mut path: Vec<Frame> = Vec::new();
        let mut r = self.root;
        loop {
            if path.len() > MAX_DEPTH {
                return Err(corrupt("tree too deep"));
            }
            let node = self.read_node(tx, r)?;
            if !node.covers(key) {
                return Err(corrupt("fence mismatch on cold path"));
            }
            if node.leaf {
                path.push(Frame { r, node, idx: 0 });
                return Ok(path);
            }
            let idx = node.route(key);
            let child = node.children[idx];
            path.push(Frame { r, node, idx });
            r = child;
        }
    }

    fn leaf_for(&self, tx: &mut Txn, key: &[u8]) -> Result<(FatRef, Node)> {
        if let Some(found) = self.warm_leaf(tx, key)? {
            return Ok(found);
        }
        self.invalidate();
        let mut path = self.cold_path(tx, key)?;
        let f = path.pop().expect("non-empty path");
        Ok((f.r, f.node))
    }

    fn invalidate(&self) {
        self.cache.write().clear();
    }

    pub fn get(&self, tx: &mut Txn, key: &[u8]) -> Result<Option<Vec<u8>>> {
        let (_, leaf) = self.leaf_for(tx, key)?;
        Ok(match leaf.keys.binary_search_by(|k| k.as_slice().cmp(key)) {
            Ok(i) => Some(leaf.vals[i].clone()),
            Err(_) => None,
        })
    }

    pub fn lookup(&self, tx: &mut Txn, key: &[u8]) -> Result<Vec<u8>> {
        self.get(tx, key)?.ok_or_else(|| Error::NotFound("key".into()))
    }

    fn check_entry(key: &[u8], val: &[u8]) -> Result<()> {
        if key.is_empty() || key.len() > MAX_KEY || val.len() > MAX_VALUE {
            return Err(Error::BadSize(key.len().max(val.len())));
        }
        Ok(())
    }

    /// Inserts a new key; fails with DUPLICATE_KEY if present.
    pub fn insert(&self, tx: &mut Txn, key: &[u8], val: &[u8]) -> Result<()> {
        match self.put(tx, key, val, false)? {
            Some(_) => Err(Error::DuplicateKey),
            None => Ok(()),
        }
    }

    /// Inserts or replaces, returning the previous value.
    pub fn upsert(&self, tx: &mut Txn, key: &[u8], val: &[u8]) -> Result<Option<Vec<u8>>> {
        self.put(tx, key, val, true)
    }

    fn put(&self, tx: &mut Txn, key: &[u8], val: &[u8], replace: bool) -> Result<Option<Vec<u8>>> {
        Self::check_entry(key, val)?;
        let (r, mut leaf) = self.leaf_for(tx, key)?;
        let prev = match leaf.keys.binary_search_by(|k| k.as_slice().cmp(key)) {
            Ok(i) => {
                let old = leaf.vals[i].clone();
                if !replace {
                    return Ok(Some(old));
                }
                leaf.vals[i] = val.to_vec();
                Some(old)
            }
            Err(i) => {
                leaf.keys.insert(i, key.to_vec());
                leaf.vals.insert(i, val.to_vec());
                None
            }
        };
        if leaf.keys.len() <= FANOUT {
            leaf.version += 1;
            let enc = leaf.encode();
            if enc.len() <= r.size as usize {
                tx.overwrite(r.addr, &enc)?;
                return Ok(prev);
            }
        }
        // structural change: redo on a path read through the transaction
        let mut path = self.cold_path(tx, key)?;
        let leaf = &mut path.last_mut().expect("leaf").node;
        match leaf.keys.binary_search_by(|k| k.as_slice().cmp(key)) {
            Ok(i) => leaf.vals[i] = val.to_vec(),
            Err(i) => {
                leaf.keys.insert(i, key.to_vec());
                leaf.vals.insert(i, val.to_vec());
            }
        }
        self.rebalance(tx, path)?;
        Ok(prev)
    }

    /// Writes back a modified path bottom-up, splitting and relocating nodes
    /// as needed.
    fn rebalance(&self, tx: &mut Txn, mut path: Vec<Frame>) -> Result<()> {
        let mut carry: Option<(Vec<u8>, FatRef)> = None;
        let mut moved: Option<FatRef> = None;
        for level in (0..path.len()).rev() {
            let frame = &mut path[level];
            if let Some(new) = moved.take() {
                frame.node.children[frame.idx] = new;
            }
            if let Some((sep, right)) = carry.take() {
                frame.node.keys.insert(frame.idx, sep);
                frame.node.children.insert(frame.idx + 1, right);
            }
            frame.node.version += 1;
            if level == 0 {
                if frame.node.keys.len() > FANOUT {
                    let mut left = frame.node.clone();
                    let (sep, mut right) = left.split();
                    left.version = 0;
                    let lref = self.write_new(tx, &left, frame.r.addr)?;
                    right.version = 0;
                    let rref = self.write_new(tx, &right, frame.r.addr)?;
                    let root = Node {
                        leaf: false,
                        keys: vec![sep],
                        children: vec![lref, rref],
                        vals: Vec::new(),
                        version: frame.node.version,
                        owner: self.root.addr,
                        lo: Vec::new(),
                        hi: None,
                    };
                    tx.overwrite(frame.r.addr, &root.encode())?;
                } else {
                    tx.overwrite(frame.r.addr, &frame.node.encode())?;
                }
                break;
            }
            if frame.node.keys.len() > FANOUT {
                let (sep, right) = frame.node.split();
                let rref = self.write_new(tx, &right, frame.r.addr)?;
                carry = Some((sep, rref));
            }
            let enc = frame.node.encode();
            if enc.len() <= frame.r.size as usize {
                tx.overwrite(frame.r.addr, &enc)?;
                if carry.is_none() {
                    break;
                }
            } else {
                let new = self.write_new(tx, &frame.node, frame.r.addr)?;
                tx.free(frame.r.addr)?;
                moved = Some(new);
            }
        }
        Ok(())
    }

    fn write_new(&self, tx: &mut Txn, node: &Node, near: Addr) -> Result<FatRef> {
        let enc = node.encode();
        let size = node_size(enc.len());
        let mut buf = tx.alloc_tagged(size, Hint::Near(near), self.tag)?;
        buf.bytes_mut()[..enc.len()].copy_from_slice(&enc);
        tx.write(&buf)?;
        Ok(FatRef::new(buf.addr(), size as u32))
    }

    /// Removes a key, returning its value if it was present.
    pub fn remove(&self, tx: &mut Txn, key: &[u8]) -> Result<Option<Vec<u8>>> {
        let (r, mut leaf) = self.leaf_for(tx, key)?;
        match leaf.keys.binary_search_by(|k| k.as_slice().cmp(key)) {
            Ok(i) => {
                leaf.keys.remove(i);
                let v = leaf.vals.remove(i);
                leaf.version += 1;
                tx.overwrite(r.addr, &leaf.encode())?;
                Ok(Some(v))
            }
            Err(_) => Ok(None),
        }
    }

    pub fn delete(&self, tx: &mut Txn, key: &[u8]) -> Result<()> {
        self.remove(tx, key)?
            .map(|_| ())
            .ok_or_else(|| Error::NotFound("key".into()))
    }

    /// Ordered pairs with `lo <= key < hi` (unbounded when `hi` is None),
    /// stopping after `limit` pairs.
    pub fn scan(
        &self,
        tx: &mut Txn,
        lo: &[u8],
        hi: Option<&[u8]>,
        limit: usize,
    ) -> Result<Vec<(Vec<u8>, Vec<u8>)>> {
        let mut out = Vec::new();
        self.for_each(tx, Bound::Included(lo), hi, |k, v| {
            out.push((k.to_vec(), v.to_vec()));
            out.len() < limit
        })?;
        Ok(out)
    }

    pub fn scan_prefix(&self, tx: &mut Txn, prefix: &[u8], limit: usize) -> Result<Vec<(Vec<u8>, Vec<u8>)>> {
        let end = crate::keys::prefix_end(prefix);
        self.scan(tx, prefix, end.as_deref(), limit)
    }

    /// Visits pairs in key order from `start` up to `hi` until `f` returns
    /// false.
    pub fn for_each(
        &self,
        tx: &mut Txn,
        start: Bound<&[u8]>,
        hi: Option<&[u8]>,
        mut f: impl FnMut(&[u8], &[u8]) -> bool,
    ) -> Result<()> {
        let mut cursor: Vec<u8> = match start {
            Bound::Included(k) | Bound::Excluded(k) => k.to_vec(),
            Bound::Unbounded => Vec::new(),
        };
        let mut exclude_first = matches!(start, Bound::Excluded(_));
        loop {
            let (_, leaf) = self.leaf_for(tx, &cursor)?;
            for (k, v) in leaf.keys.iter().zip(&leaf.vals) {
                if k.as_slice() < cursor.as_slice() || (exclude_first && *k == cursor) {
                    continue;
                }
                if hi.is_some_and(|h| k.as_slice() >= h) {
                    return Ok(());
                }
                if !f(k, v) {
                    return Ok(());
                }
            }
            match leaf.hi {
                Some(next) if hi.is_none_or(|h| next.as_slice() < h) => {
                    cursor = next;
                    exclude_first = false;
                }
                _ => return Ok(()),
            }
        }
    }

    fn walk(&self, tx: &mut Txn, mut visit: impl FnMut(FatRef, &Node, usize)) -> Result<()> {
        let mut stack = vec![(self.root, 1usize)];
        while let Some((r, depth)) = stack.pop() {
            let buf = tx.read(r.addr, r.size as usize)?;
            let node = Node::decode(buf.bytes())?;
            visit(r, &node, depth);
            stack.extend(node.children.iter().map(|c| (*c, depth + 1)));
        }
        Ok(())
    }

    pub fn stats(&self, tx: &mut Txn) -> Result<TreeStats> {
        let mut s = TreeStats::default();
        self.walk(tx, |_, n, depth| {
            s.height = s.height.max(depth);
            s.nodes += 1;
            if n.leaf {
                s.keys += n.keys.len();
            }
        })?;
        Ok(s)
    }

    /// Frees every node including the root.
    pub fn drop_tree(&self, tx: &mut Txn) -> Result<()> {
        let mut refs = Vec::new();
        self.walk(tx, |r, _, _| refs.push(r.addr))?;
        for a in refs {
            tx.free(a)?;
        }
        self.invalidate();
        Ok(())
    }

    /// Checks ordering and fence invariants of every node.
    pub fn check(&self, tx: &mut Txn) -> Result<()> {
        let mut bad = None;
        let mut stack = vec![(self.root, Vec::new(), None::<Vec<u8>>)];
        while let Some((r, lo, hi)) = stack.pop() {
            let buf = tx.read(r.addr, r.size as usize)?;
            let node = Node::decode(buf.bytes())?;
            let sorted = node.keys.windows(2).all(|w| w[0] < w[1]);
            let fenced = node.lo == lo
                && node.hi == hi
                && node.keys.iter().all(|k| node.covers(k))
                && node.keys.len() <= FANOUT;
            if !sorted || !fenced {
                bad = Some(r.addr);
            }
            if !node.leaf {
                if node.children.len() != node.keys.len() + 1 {
                    bad = Some(r.addr);
                    continue;
                }
                for (i, c) in node.children.iter().enumerate() {
                    let clo = if i == 0 { node.lo.clone() } else { node.keys[i - 1].clone() };
                    let chi = node.keys.get(i).cloned().or(node.hi.clone());
                    stack.push((*c, clo, chi));
                }
            }
        }
        match bad {
            Some(a) => Err(corrupt(format!("tree invariant broken at {a}"))),
            None => Ok(()),
        }
    }
}
