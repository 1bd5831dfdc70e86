//! Region-based transactional object store.
//!
//! Memory is carved into fixed-size regions; each region is replicated on
//! three nodes in distinct fault domains. Reads and commits go through the
//! region's primary (the first fresh replica on a live node). Every object
//! carries a version chain of `(commit_ts, bytes | freed)` entries so
//! snapshot reads can select the newest version no newer than their read
//! timestamp. Version storage is logical: a freed object's space only goes
//! back to the allocator once no pinned snapshot can still observe it.
//!
//! Read-write transactions run optimistic concurrency control: writes are
//! buffered locally, and commit locks the written objects in address order,
//! takes a write timestamp, validates the read set, installs the new
//! versions on every live replica and releases the locks.

mod addr;
mod oracle;
mod txn;

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, Ordering};
use std::sync::{Arc, Weak};

use parking_lot::{Mutex, RwLock};
use rand::seq::SliceRandom;

pub use addr::{Addr, FatRef, Hint, Timestamp};
pub use oracle::Oracle;
pub use txn::{ObjBuf, Txn, TxnState};

use crate::error::{Error, Result};
use crate::simnet::{ClusterHandle, FaultKind, FaultListener, NodeId};

/// Smallest object the allocator hands out.
pub const MIN_OBJECT: usize = 64;
/// Largest object, further capped by the region size.
pub const MAX_OBJECT: usize = 1 << 20;
/// Version chains longer than this after GC cause commits to back off.
pub const MAX_VERSIONS: usize = 32;
/// Allocation tag for system-owned objects.
pub const SYSTEM_TAG: u32 = 0;

#[derive(Clone, Debug)]
struct Version {
    ts: u64,
    data: Option<Arc<[u8]>>,
}

#[derive(Clone, Debug)]
struct Chain {
    len: u32,
    tag: u32,
    versions: Vec<Version>,
}

impl Chain {
    fn latest(&self) -> &Version {
        self.versions.last().expect("chains are never empty")
    }

    fn at(&self, ts: u64) -> Option<&Version> {
        self.versions.iter().rev().find(|v| v.ts <= ts)
    }

    /// Drops versions no snapshot at or after `horizon` can select. Returns
    /// true when the whole chain is dead (a free visible to everyone).
    fn prune(&mut self, horizon: u64) -> bool {
        if let Some(idx) = self.versions.iter().rposition(|v| v.ts <= horizon) {
            self.versions.drain(..idx);
        }
        self.versions.len() == 1 && self.versions[0].data.is_none() && self.versions[0].ts <= horizon
    }

    /// Length the chain would have after pruning to `horizon`.
    fn retained(&self, horizon: u64) -> usize {
        match self.versions.iter().rposition(|v| v.ts <= horizon) {
            Some(idx) => self.versions.len() - idx,
            None => self.versions.len(),
        }
    }
}

type Image = HashMap<u32, Chain>;

#[derive(Debug)]
struct Replica {
    node: NodeId,
    image: Image,
    /// Holds every committed version. Cleared when a write is skipped
    /// because the node was down.
    fresh: bool,
}

fn size_class(size: usize) -> u32 {
    let size = size.max(MIN_OBJECT);
    if size <= 4096 {
        size.div_ceil(64) as u32 * 64
    } else {
        size.next_power_of_two() as u32
    }
}

/// Bump allocation with per-size-class free lists.
#[derive(Debug)]
struct Allocator {
    capacity: u32,
    bump: u32,
    free: HashMap<u32, Vec<u32>>,
}

impl Allocator {
    fn new(capacity: u32) -> Self {
        Allocator {
            capacity,
            bump: 0,
            free: HashMap::new(),
        }
    }

    fn alloc(&mut self, size: usize) -> Option<u32> {
        let class = size_class(size);
        if let Some(off) = self.free.get_mut(&class).and_then(Vec::pop) {
            return Some(off);
        }
        let end = self.bump as u64 + class as u64;
        if end > self.capacity as u64 {
            return None;
        }
        let off = self.bump;
        self.bump = end as u32;
        Some(off)
    }

    fn release(&mut self, offset: u32, size: usize) {
        self.free.entry(size_class(size)).or_default().push(offset);
    }
}

#[derive(Debug)]
struct RegionInner {
    replicas: Vec<Replica>,
    locks: HashMap<u32, u64>,
    alloc: Allocator,
}

#[derive(Debug)]
struct Region {
    id: u32,
    inner: Mutex<RegionInner>,
}

impl RegionInner {
    fn primary_index(&self, cluster: &ClusterHandle) -> Option<usize> {
        self.replicas.iter().position(|r| r.fresh && cluster.is_live(r.node))
    }

    fn primary(&self, cluster: &ClusterHandle) -> Result<&Replica> {
        self.primary_index(cluster)
            .map(|i| &self.replicas[i])
            .ok_or(Error::StorePaused)
    }
}

#[derive(Debug, Default)]
struct Placement {
    /// Regions created for each node, oldest first.
    home: HashMap<NodeId, Vec<u32>>,
    /// Replica count hosted by each node.
    hosted: HashMap<NodeId, usize>,
}

/// Live-object accounting from the allocator's point of view.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AuditReport {
    pub regions: usize,
    pub live_objects: usize,
    pub live_bytes: u64,
    /// tag -> (objects, bytes)
    pub by_tag: BTreeMap<u32, (usize, u64)>,
}

impl AuditReport {
    pub fn objects_with_tag(&self, tag: u32) -> usize {
        self.by_tag.get(&tag).map(|(n, _)| *n).unwrap_or(0)
    }
}

pub(crate) struct StoreInner {
    cluster: ClusterHandle,
    regions: RwLock<BTreeMap<u32, Arc<Region>>>,
    placement: Mutex<Placement>,
    next_region: AtomicU32,
    next_txn: AtomicU64,
    oracle: Oracle,
    paused: AtomicBool,
    max_object: usize,
}

/// Handle to the store; cheap to clone.
#[derive(Clone)]
pub struct Store(Arc<StoreInner>);

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store").field("regions", &self.region_count()).finish()
    }
}

impl Store {
    pub fn new(cluster: ClusterHandle) -> Store {
        let max_object = MAX_OBJECT.min(cluster.config().region_size_bytes);
        let inner = Arc::new(StoreInner {
            cluster: cluster.clone(),
            regions: RwLock::new(BTreeMap::new()),
            placement: Mutex::new(Placement::default()),
            next_region: AtomicU32::new(0),
            next_txn: AtomicU64::new(1),
            oracle: Oracle::default(),
            paused: AtomicBool::new(false),
            max_object,
        });
        let weak: Weak<dyn FaultListener> = Arc::downgrade(&inner) as Weak<dyn FaultListener>;
        cluster.add_fault_listener(weak);
        Store(inner)
    }

    pub fn cluster(&self) -> &ClusterHandle {
        &self.0.cluster
    }

    pub fn max_object(&self) -> usize {
        self.0.max_object
    }

    /// Starts a transaction on `node` at the latest stable timestamp.
    pub fn create_transaction(&self, node: NodeId, read_only: bool) -> Result<Txn> {
        if self.is_paused() {
            return Err(Error::StorePaused);
        }
        let read_ts = self.0.oracle.pin_stable();
        Ok(Txn::new(self.clone(), node, read_ts, read_only))
    }

    /// Read-only transaction at an explicit snapshot, as used by query workers.
    pub fn snapshot_at(&self, node: NodeId, ts: Timestamp) -> Result<Txn> {
        if self.is_paused() {
            return Err(Error::StorePaused);
        }
        if !self.0.oracle.pin_at(ts.0) {
            return Err(Error::SnapshotTooOld(ts.0));
        }
        Ok(Txn::new(self.clone(), node, ts.0, true))
    }

    /// Runs `f` in a fresh read-write transaction, retrying on conflict until
    /// it commits (the classic optimistic retry loop).
    pub fn run<T>(&self, node: NodeId, mut f: impl FnMut(&mut Txn) -> Result<T>) -> Result<T> {
        loop {
            let mut tx = self.create_transaction(node, false)?;
            match f(&mut tx).and_then(|v| tx.commit().map(|_| v)) {
                Ok(v) => return Ok(v),
                Err(Error::Conflict) => {
                    std::thread::yield_now();
                    continue;
                }
                Err(e) => return Err(e),
            }
        }
    }

    pub fn stable_ts(&self) -> Timestamp {
        Timestamp(self.0.oracle.stable())
    }

    pub fn gc_horizon(&self) -> Timestamp {
        Timestamp(self.0.oracle.horizon())
    }

    pub fn is_paused(&self) -> bool {
        self.0.paused.load(Ordering::SeqCst)
    }

    pub fn region_count(&self) -> usize {
        self.0.regions.read().len()
    }

    pub fn region_ids(&self) -> Vec<u32> {
        self.0.regions.read().keys().copied().collect()
    }

    /// Replica nodes of a region in placement order.
    pub fn placement(&self, region: u32) -> Option<Vec<NodeId>> {
        let r = self.0.region(region)?;
        let inner = r.inner.lock();
        Some(inner.replicas.iter().map(|r| r.node).collect())
    }

    /// Node currently serving the object's region. Local metadata only.
    pub fn primary_of(&self, addr: Addr) -> Option<NodeId> {
        let r = self.0.region(addr.region)?;
        let inner = r.inner.lock();
        inner.primary(&self.0.cluster).ok().map(|p| p.node)
    }

    /// True when every fresh replica of the region holds the same chains.
    pub fn replicas_identical(&self, region: u32) -> bool {
        let Some(r) = self.0.region(region) else {
            return false;
        };
        let inner = r.inner.lock();
        let fresh: Vec<&Replica> = inner.replicas.iter().filter(|r| r.fresh).collect();
        let Some(first) = fresh.first() else {
            return false;
        };
        fresh.iter().all(|rep| images_equal(&first.image, &rep.image))
    }

    /// Count of fresh replicas for a region.
    pub fn fresh_replicas(&self, region: u32) -> usize {
        self.0
            .region(region)
            .map(|r| r.inner.lock().replicas.iter().filter(|r| r.fresh).count())
            .unwrap_or(0)
    }

    /// Latest committed bytes of every live object, read from primaries.
    pub fn scan_live_objects(&self) -> Result<BTreeMap<Addr, Arc<[u8]>>> {
        let mut out = BTreeMap::new();
        for r in self.0.regions.read().values() {
            let inner = r.inner.lock();
            let primary = inner.primary(&self.0.cluster)?;
            for (off, chain) in &primary.image {
                if let Some(data) = &chain.latest().data {
                    out.insert(Addr::new(r.id, *off), data.clone());
                }
            }
        }
        Ok(out)
    }

    /// Prunes every version chain to the GC horizon and returns fully freed
    /// objects to the allocator. Returns the number of objects reclaimed.
    pub fn collect_garbage(&self) -> usize {
        let horizon = self.0.oracle.horizon();
        let regions: Vec<Arc<Region>> = self.0.regions.read().values().cloned().collect();
        let mut reclaimed = 0;
        for r in regions {
            let mut inner = r.inner.lock();
            let RegionInner {
                replicas,
                locks,
                alloc,
            } = &mut *inner;
            let Some(source) = replicas.iter().position(|r| r.fresh) else {
                continue;
            };
            let mut dead: Vec<(u32, u32)> = Vec::new();
            for (i, rep) in replicas.iter_mut().enumerate() {
                rep.image.retain(|off, chain| {
                    if locks.contains_key(off) {
                        return true;
                    }
                    let gone = chain.prune(horizon);
                    if gone && i == source {
                        dead.push((*off, chain.len));
                    }
                    !gone
                });
            }
            for (off, len) in dead {
                alloc.release(off, len as usize);
                reclaimed += 1;
            }
        }
        reclaimed
    }

    /// Counts live (committed, not freed) objects per allocation tag.
    pub fn audit(&self) -> AuditReport {
        let mut report = AuditReport::default();
        let regions = self.0.regions.read();
        report.regions = regions.len();
        for r in regions.values() {
            let inner = r.inner.lock();
            let Some(rep) = inner.replicas.iter().find(|r| r.fresh) else {
                continue;
            };
            for chain in rep.image.values() {
                if chain.latest().data.is_some() {
                    report.live_objects += 1;
                    report.live_bytes += chain.len as u64;
                    let e = report.by_tag.entry(chain.tag).or_default();
                    e.0 += 1;
                    e.1 += chain.len as u64;
                }
            }
        }
        report
    }
}

fn images_equal(a: &Image, b: &Image) -> bool {
    a.len() == b.len()
        && a.iter().all(|(off, ca)| {
            b.get(off).is_some_and(|cb| {
                ca.len == cb.len
                    && ca.versions.len() == cb.versions.len()
                    && ca
                        .versions
                        .iter()
                        .zip(&cb.versions)
                        .all(|(x, y)| x.ts == y.ts && x.data.as_deref() == y.data.as_deref())
            })
        })
}

/// A write to install at commit time.
pub(crate) enum Install {
    New { data: Arc<[u8]>, tag: u32 },
    Update(Arc<[u8]>),
    Free,
}

impl StoreInner {
    fn region(&self, id: u32) -> Option<Arc<Region>> {
        self.regions.read().get(&id).cloned()
    }

    fn refresh_paused(&self) {
        let regions = self.regions.read();
        let paused = regions.values().any(|r| {
            let inner = r.inner.lock();
            inner.primary_index(&self.cluster).is_none()
        });
        self.paused.store(paused, Ordering::SeqCst);
    }

    pub(crate) fn next_txn_id(&self) -> u64 {
        self.next_txn.fetch_add(1, Ordering::Relaxed)
    }

    pub(crate) fn oracle(&self) -> &Oracle {
        &self.oracle
    }

    /// Returns `(bytes, version_ts, served_locally)`.
    pub(crate) fn read_at(&self, addr: Addr, ts: u64, reader: NodeId) -> Result<(Arc<[u8]>, u64, bool)> {
        let region = self.region(addr.region).ok_or(Error::InvalidAddr(addr))?;
        let inner = region.inner.lock();
        let primary = inner.primary(&self.cluster)?;
        let chain = primary.image.get(&addr.offset).ok_or(Error::InvalidAddr(addr))?;
        let v = chain.at(ts).ok_or(Error::InvalidAddr(addr))?;
        let data = v.data.clone().ok_or(Error::InvalidAddr(addr))?;
        let ts = v.ts;
        let local = primary.node == reader;
        drop(inner);
        self.cluster.record_read(local);
        Ok((data, ts, local))
    }

    /// Allocates space for a new object following the hint.
    pub(crate) fn allocate(&self, node: NodeId, size: usize, hint: Hint) -> Result<Addr> {
        if size < MIN_OBJECT || size > self.max_object {
            return Err(Error::BadSize(size));
        }
        let target = match hint {
            Hint::Near(a) => {
                if let Some(r) = self.region(a.region) {
                    let mut inner = r.inner.lock();
                    if let Some(off) = inner.alloc.alloc(size) {
                        return Ok(Addr::new(r.id, off));
                    }
                    inner.primary(&self.cluster).map(|p| p.node).unwrap_or(node)
                } else {
                    node
                }
            }
            Hint::Local => node,
            Hint::On(n) if self.cluster.is_live(n) => n,
            Hint::On(_) => node,
        };
        if let Some(a) = self.alloc_on_node(target, size) {
            return Ok(a);
        }
        if let Ok(a) = self.new_region_alloc(target, size) {
            return Ok(a);
        }
        // any node at all
        let nodes: Vec<NodeId> = self.cluster.live_nodes();
        for n in &nodes {
            if let Some(a) = self.alloc_on_node(*n, size) {
                return Ok(a);
            }
        }
        for n in nodes {
            if let Ok(a) = self.new_region_alloc(n, size) {
                return Ok(a);
            }
        }
        Err(Error::OutOfSpace)
    }

    fn alloc_on_node(&self, node: NodeId, size: usize) -> Option<Addr> {
        let home: Vec<u32> = self.placement.lock().home.get(&node).cloned().unwrap_or_default();
        for id in home.into_iter().rev() {
            let Some(r) = self.region(id) else { continue };
            let mut inner = r.inner.lock();
            if inner.primary(&self.cluster).map(|p| p.node) != Ok(node) {
                continue;
            }
            if let Some(off) = inner.alloc.alloc(size) {
                return Some(Addr::new(id, off));
            }
        }
        None
    }

    fn new_region_alloc(&self, node: NodeId, size: usize) -> Result<Addr> {
        let region = self.create_region(node)?;
        let mut inner = region.inner.lock();
        let off = inner.alloc.alloc(size).ok_or(Error::OutOfSpace)?;
        Ok(Addr::new(region.id, off))
    }

    /// Creates a region homed on `node` with backups in distinct fault
    /// domains chosen by the seeded RNG.
    fn create_region(&self, node: NodeId) -> Result<Arc<Region>> {
        if !self.cluster.is_live(node) {
            return Err(Error::NodeUnreachable(node));
        }
        let cap = self.cluster.config().max_regions_per_node;
        let mut placement = self.placement.lock();
        if placement.hosted.get(&node).copied().unwrap_or(0) >= cap {
            return Err(Error::OutOfSpace);
        }
        let mut replicas = vec![node];
        let mut domains = vec![self.cluster.fault_domain(node)];
        let mut candidates: Vec<NodeId> = self
            .cluster
            .live_nodes()
            .into_iter()
            .filter(|n| *n != node && placement.hosted.get(n).copied().unwrap_or(0) < cap)
            .collect();
        self.cluster.with_rng(|rng| candidates.shuffle(rng));
        for c in candidates {
            if replicas.len() == self.cluster.config().replication_factor {
                break;
            }
            let d = self.cluster.fault_domain(c);
            if !domains.contains(&d) {
                domains.push(d);
                replicas.push(c);
            }
        }
        for n in &replicas {
            *placement.hosted.entry(*n).or_default() += 1;
        }
        let id = self.next_region.fetch_add(1, Ordering::SeqCst);
        placement.home.entry(node).or_default().push(id);
        let region = Arc::new(Region {
            id,
            inner: Mutex::new(RegionInner {
                replicas: replicas
                    .into_iter()
                    .map(|n| Replica {
                        node: n,
                        image: Image::new(),
                        fresh: true,
                    })
                    .collect(),
                locks: HashMap::new(),
                alloc: Allocator::new(self.cluster.config().region_size_bytes as u32),
            }),
        });
        self.regions.write().insert(id, region.clone());
        Ok(region)
    }

    /// Returns reserved-but-uncommitted space.
    pub(crate) fn release_reservation(&self, addr: Addr, size: usize) {
        if let Some(r) = self.region(addr.region) {
            r.inner.lock().alloc.release(addr.offset, size);
        }
    }

    /// Locks an existing object for `txn`. Fails on a foreign lock, a
    /// missing or freed object, or version-chain backpressure.
    pub(crate) fn lock(&self, addr: Addr, txn: u64) -> Result<()> {
        let region = self.region(addr.region).ok_or(Error::Conflict)?;
        let mut inner = region.inner.lock();
        let horizon = self.oracle.horizon();
        let p = inner.primary_index(&self.cluster).ok_or(Error::StorePaused)?;
        let chain = inner.replicas[p].image.get(&addr.offset).ok_or(Error::Conflict)?;
        if chain.latest().data.is_none() {
            return Err(Error::Conflict);
        }
        if chain.retained(horizon) >= MAX_VERSIONS {
            return Err(Error::Conflict);
        }
        match inner.locks.get(&addr.offset) {
            Some(owner) if *owner != txn => Err(Error::Conflict),
            _ => {
                inner.locks.insert(addr.offset, txn);
                Ok(())
            }
        }
    }

    pub(crate) fn unlock(&self, addr: Addr, txn: u64) {
        if let Some(region) = self.region(addr.region) {
            let mut inner = region.inner.lock();
            if inner.locks.get(&addr.offset) == Some(&txn) {
                inner.locks.remove(&addr.offset);
            }
        }
    }

    /// True when the object's latest version is still `version` and no
    /// other transaction holds its lock.
    pub(crate) fn validate(&self, addr: Addr, version: u64, txn: u64) -> Result<bool> {
        let Some(region) = self.region(addr.region) else {
            return Ok(false);
        };
        let inner = region.inner.lock();
        if let Some(owner) = inner.locks.get(&addr.offset) {
            if *owner != txn {
                return Ok(false);
            }
        }
        let primary = inner.primary(&self.cluster)?;
        Ok(primary
            .image
            .get(&addr.offset)
            .is_some_and(|c| c.latest().ts == version))
    }

    /// Installs a version on every live replica, marking down replicas stale.
    pub(crate) fn install(&self, addr: Addr, ts: u64, write: &Install, len: usize) {
        let Some(region) = self.region(addr.region) else {
            return;
        };
        let horizon = self.oracle.horizon();
        let mut inner = region.inner.lock();
        for rep in inner.replicas.iter_mut() {
            if !rep.fresh {
                continue;
            }
            if !self.cluster.is_live(rep.node) {
                rep.fresh = false;
                continue;
            }
            match write {
                Install::New { data, tag } => {
                    rep.image.insert(
                        addr.offset,
                        Chain {
                            len: len as u32,
                            tag: *tag,
                            versions: vec![Version {
                                ts,
                                data: Some(data.clone()),
                            }],
                        },
                    );
                }
                Install::Update(data) => {
                    if let Some(c) = rep.image.get_mut(&addr.offset) {
                        c.versions.push(Version {
                            ts,
                            data: Some(data.clone()),
                        });
                        c.prune(horizon);
                    }
                }
                Install::Free => {
                    if let Some(c) = rep.image.get_mut(&addr.offset) {
                        c.versions.push(Version { ts, data: None });
                        c.prune(horizon);
                    }
                }
            }
        }
    }

    fn on_power_loss(&self, node: NodeId) {
        let mut lost = Vec::new();
        for r in self.regions.read().values() {
            let mut inner = r.inner.lock();
            for rep in inner.replicas.iter_mut().filter(|rep| rep.node == node) {
                rep.image.clear();
                rep.fresh = false;
            }
            if !inner.replicas.iter().any(|rep| rep.fresh) {
                lost.push(r.id);
            }
        }
        if !lost.is_empty() {
            let mut regions = self.regions.write();
            let mut placement = self.placement.lock();
            for id in lost {
                if let Some(r) = regions.remove(&id) {
                    for rep in &r.inner.lock().replicas {
                        if let Some(h) = placement.hosted.get_mut(&rep.node) {
                            *h = h.saturating_sub(1);
                        }
                    }
                }
                for list in placement.home.values_mut() {
                    list.retain(|x| *x != id);
                }
            }
        }
    }

    /// Brings stale replicas on live nodes back in sync from their primary.
    fn resync(&self) {
        for r in self.regions.read().values() {
            let mut inner = r.inner.lock();
            let Some(p) = inner.primary_index(&self.cluster) else {
                continue;
            };
            let image = inner.replicas[p].image.clone();
            for rep in inner.replicas.iter_mut() {
                if !rep.fresh && self.cluster.is_live(rep.node) {
                    rep.image = image.clone();
                    rep.fresh = true;
                }
            }
        }
    }
}

impl FaultListener for StoreInner {
    fn on_fault(&self, node: NodeId, kind: FaultKind) {
        match kind {
            FaultKind::PowerLoss => self.on_power_loss(node),
            FaultKind::Restart => self.resync(),
            FaultKind::ProcessCrash | FaultKind::Partition => {}
        }
        self.refresh_paused();
    }
}
