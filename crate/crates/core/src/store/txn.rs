use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use super::{Addr, Hint, Install, Store, Timestamp, SYSTEM_TAG};
use crate::error::{Error, Result};
use crate::simnet::{NodeId, ReadCounter};

/// Snapshot copy of an object's bytes.
///
/// Buffers returned by reads are immutable. Writable buffers come from
/// [`Txn::alloc`] or [`Txn::open_for_write`] and must be handed back with
/// [`Txn::write`] for their changes to be part of the transaction.
#[derive(Clone, Debug)]
pub struct ObjBuf {
    addr: Addr,
    version: u64,
    data: Bytes,
}

#[derive(Clone, Debug)]
enum Bytes {
    Shared(Arc<[u8]>),
    Owned(Vec<u8>),
}

impl ObjBuf {
    pub fn addr(&self) -> Addr {
        self.addr
    }

    /// Commit timestamp of the version read; 0 for uncommitted data.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn bytes(&self) -> &[u8] {
        match &self.data {
            Bytes::Shared(b) => b,
            Bytes::Owned(b) => b,
        }
    }

    pub fn len(&self) -> usize {
        self.bytes().len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes().is_empty()
    }

    pub fn is_writable(&self) -> bool {
        matches!(self.data, Bytes::Owned(_))
    }

    /// Mutable view of a writable buffer.
    ///
    /// # Panics
    /// Panics on a read-only buffer.
    pub fn bytes_mut(&mut self) -> &mut [u8] {
        match &mut self.data {
            Bytes::Owned(b) => b,
            Bytes::Shared(_) => panic!("buffer for {} is read-only", self.addr),
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum TxnState {
    Active,
    Committed,
    Aborted,
}

#[derive(Debug)]
enum Pending {
    Alloc { data: Vec<u8>, tag: u32 },
    Write { data: Vec<u8>, len: usize },
    Free,
}

type Hook = Box<dyn FnOnce(Timestamp) + Send>;

/// A transaction. Single-driver; dropping an active transaction aborts it.
pub struct Txn {
    store: Store,
    id: u64,
    node: NodeId,
    read_ts: u64,
    read_only: bool,
    state: TxnState,
    reads: HashMap<Addr, u64>,
    writes: BTreeMap<Addr, Pending>,
    stamps: Vec<Addr>,
    hooks: Vec<Hook>,
    counter: Option<Arc<ReadCounter>>,
    tag: u32,
}

impl std::fmt::Debug for Txn {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Txn")
            .field("id", &self.id)
            .field("node", &self.node)
            .field("read_ts", &self.read_ts)
            .field("state", &self.state)
            .finish()
    }
}

impl Txn {
    pub(super) fn new(store: Store, node: NodeId, read_ts: u64, read_only: bool) -> Txn {
        let id = store.0.next_txn_id();
        Txn {
            store,
            id,
            node,
            read_ts,
            read_only,
            state: TxnState::Active,
            reads: HashMap::new(),
            writes: BTreeMap::new(),
            stamps: Vec::new(),
            hooks: Vec::new(),
            counter: None,
            tag: SYSTEM_TAG,
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn node(&self) -> NodeId {
        self.node
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn read_ts(&self) -> Timestamp {
        Timestamp(self.read_ts)
    }

    pub fn is_read_only(&self) -> bool {
        self.read_only
    }

    pub fn state(&self) -> TxnState {
        self.state
    }

    pub fn read_set_len(&self) -> usize {
        self.reads.len()
    }

    pub fn write_set_len(&self) -> usize {
        self.writes.len()
    }

    /// True when this transaction has buffered changes for `addr`.
    pub fn has_pending_write(&self, addr: Addr) -> bool {
        self.writes.contains_key(&addr)
    }

    /// Additionally attribute this transaction's reads to `counter`.
    pub fn set_read_counter(&mut self, counter: Arc<ReadCounter>) {
        self.counter = Some(counter);
    }

    /// Tag recorded on objects allocated by [`Txn::alloc`] from now on.
    pub fn set_alloc_tag(&mut self, tag: u32) {
        self.tag = tag;
    }

    fn check_active(&self) -> Result<()> {
        if self.state != TxnState::Active {
            return Err(Error::TxnNotActive);
        }
        Ok(())
    }

    fn check_writable(&self) -> Result<()> {
        self.check_active()?;
        if self.read_only {
            return Err(Error::ReadOnly);
        }
        Ok(())
    }

    pub fn alloc(&mut self, size: usize, hint: Hint) -> Result<ObjBuf> {
        let tag = self.tag;
        self.alloc_tagged(size, hint, tag)
    }

    /// Reserves a zeroed object. It becomes visible to others on commit.
    pub fn alloc_tagged(&mut self, size: usize, hint: Hint, tag: u32) -> Result<ObjBuf> {
        self.check_writable()?;
        let addr = self.store.0.allocate(self.node, size, hint)?;
        self.writes.insert(
            addr,
            Pending::Alloc {
                data: vec![0; size],
                tag,
            },
        );
        Ok(ObjBuf {
            addr,
            version: 0,
            data: Bytes::Owned(vec![0; size]),
        })
    }

    /// Reads up to `size` bytes of the version visible at the read
    /// timestamp. A size of 0 or beyond the object reads the whole object.
    pub fn read(&mut self, addr: Addr, size: usize) -> Result<ObjBuf> {
        self.check_active()?;
        if let Some(p) = self.writes.get(&addr) {
            let data = match p {
                Pending::Alloc { data, .. } | Pending::Write { data, .. } => data,
                Pending::Free => return Err(Error::InvalidAddr(addr)),
            };
            let n = clamp(size, data.len());
            return Ok(ObjBuf {
                addr,
                version: self.reads.get(&addr).copied().unwrap_or(0),
                data: Bytes::Shared(Arc::from(&data[..n])),
            });
        }
        let (data, version, local) = self.store.0.read_at(addr, self.read_ts, self.node)?;
        if let Some(c) = &self.counter {
            c.record(local);
        }
        if !self.read_only {
            self.reads.insert(addr, version);
        }
        let n = clamp(size, data.len());
        let data = if n == data.len() {
            data
        } else {
            Arc::from(&data[..n])
        };
        Ok(ObjBuf {
            addr,
            version,
            data: Bytes::Shared(data),
        })
    }

    /// Whole-object read.
    pub fn read_all(&mut self, addr: Addr) -> Result<ObjBuf> {
        self.read(addr, 0)
    }

    /// Returns a writable clone; buffered locally, no remote effects.
    pub fn open_for_write(&mut self, buf: &ObjBuf) -> Result<ObjBuf> {
        self.check_writable()?;
        let addr = buf.addr;
        if !self.writes.contains_key(&addr) {
            // the caller's buffer may hold a partial read
            let full = self.read_all(addr)?;
            let data = full.bytes().to_vec();
            let len = data.len();
            self.writes.insert(addr, Pending::Write { data, len });
        }
        match &self.writes[&addr] {
            Pending::Alloc { data, .. } | Pending::Write { data, .. } => Ok(ObjBuf {
                addr,
                version: buf.version,
                data: Bytes::Owned(data.clone()),
            }),
            Pending::Free => Err(Error::InvalidAddr(addr)),
        }
    }

    /// Replaces the buffered bytes of an object opened for write (or
    /// allocated) in this transaction with the buffer's contents.
    pub fn write(&mut self, buf: &ObjBuf) -> Result<()> {
        self.check_writable()?;
        let addr = buf.addr;
        let bytes = buf.bytes();
        match self.writes.get_mut(&addr) {
            Some(Pending::Alloc { data, .. }) | Some(Pending::Write { data, .. }) => {
                if bytes.len() > data.len() {
                    return Err(Error::BadSize(bytes.len()));
                }
                data[..bytes.len()].copy_from_slice(bytes);
                Ok(())
            }
            Some(Pending::Free) => Err(Error::InvalidAddr(addr)),
            None => Err(Error::TxnNotActive),
        }
    }

    /// Reads, overwrites a prefix of the object with `bytes`, and buffers it.
    pub fn update(&mut self, addr: Addr, bytes: &[u8]) -> Result<()> {
        let cur = self.read(addr, 0)?;
        let mut w = self.open_for_write(&cur)?;
        if bytes.len() > w.len() {
            return Err(Error::BadSize(bytes.len()));
        }
        w.bytes_mut()[..bytes.len()].copy_from_slice(bytes);
        self.write(&w)
    }

    /// Writes an object's full contents, zero-padding short input.
    pub fn overwrite(&mut self, addr: Addr, bytes: &[u8]) -> Result<()> {
        let cur = self.read(addr, 0)?;
        let mut w = self.open_for_write(&cur)?;
        if bytes.len() > w.len() {
            return Err(Error::BadSize(bytes.len()));
        }
        let out = w.bytes_mut();
        out[..bytes.len()].copy_from_slice(bytes);
        out[bytes.len()..].fill(0);
        self.write(&w)
    }

    /// Frees an object at commit. Freeing twice is a no-op.
    pub fn free(&mut self, addr: Addr) -> Result<()> {
        self.check_writable()?;
        match self.writes.get(&addr) {
            Some(Pending::Free) => return Ok(()),
            Some(Pending::Alloc { data, .. }) => {
                let size = data.len();
                self.writes.remove(&addr);
                // the space can be handed out again within this transaction
                self.stamps.retain(|a| *a != addr);
                self.store.0.release_reservation(addr, size);
                return Ok(());
            }
            _ => {}
        }
        if !self.reads.contains_key(&addr) {
            // establishes that the object exists in our snapshot
            self.read(addr, 0)?;
        }
        self.writes.insert(addr, Pending::Free);
        Ok(())
    }

    /// At install time, overwrite the first 8 bytes of `addr` with the
    /// commit timestamp (big-endian).
    pub fn stamp_commit_ts(&mut self, addr: Addr) {
        self.stamps.push(addr);
    }

    /// Runs `hook` with the commit timestamp after a successful commit.
    pub fn on_commit(&mut self, hook: impl FnOnce(Timestamp) + Send + 'static) {
        self.hooks.push(Box::new(hook));
    }

    pub fn abort(&mut self) {
        if self.state != TxnState::Active {
            return;
        }
        self.release();
        self.state = TxnState::Aborted;
        if !self.read_only {
            self.store.cluster().record_abort();
        }
    }

    fn release(&mut self) {
        for (addr, p) in &self.writes {
            if let Pending::Alloc { data, .. } = p {
                self.store.0.release_reservation(*addr, data.len());
            }
        }
        self.writes.clear();
        self.hooks.clear();
        self.store.0.oracle().unpin(self.read_ts);
    }

    /// Commits; on conflict the transaction is aborted and
    /// [`Error::Conflict`] returned.
    pub fn commit(&mut self) -> Result<Timestamp> {
        self.check_active()?;
        if self.read_only || self.writes.is_empty() {
            self.state = TxnState::Committed;
            self.store.0.oracle().unpin(self.read_ts);
            let hooks = std::mem::take(&mut self.hooks);
            for h in hooks {
                h(Timestamp(self.read_ts));
            }
            return Ok(Timestamp(self.read_ts));
        }
        match self.commit_writes() {
            Ok(ts) => {
                self.state = TxnState::Committed;
                self.store.0.oracle().unpin(self.read_ts);
                self.store.cluster().record_commit();
                let hooks = std::mem::take(&mut self.hooks);
                for h in hooks {
                    h(ts);
                }
                Ok(ts)
            }
            Err(e) => {
                self.abort();
                Err(e)
            }
        }
    }

    fn commit_writes(&mut self) -> Result<Timestamp> {
        let inner = self.store.0.clone();
        if self.store.is_paused() {
            return Err(Error::StorePaused);
        }
        // lock phase, canonical order (BTreeMap iteration)
        let mut locked = Vec::new();
        let mut result = Ok(());
        for (addr, p) in &self.writes {
            if matches!(p, Pending::Alloc { .. }) {
                continue;
            }
            match inner.lock(*addr, self.id) {
                Ok(()) => locked.push(*addr),
                Err(e) => {
                    result = Err(e);
                    break;
                }
            }
        }
        let unlock = |locked: &[Addr]| {
            for a in locked {
                inner.unlock(*a, self.id);
            }
        };
        if let Err(e) = result {
            unlock(&locked);
            return Err(e);
        }
        let ts = inner.oracle().begin_commit();
        for (addr, version) in &self.reads {
            let ok = match inner.validate(*addr, *version, self.id) {
                Ok(ok) => ok,
                Err(e) => {
                    unlock(&locked);
                    inner.oracle().finish_commit(ts);
                    return Err(e);
                }
            };
            if !ok {
                unlock(&locked);
                inner.oracle().finish_commit(ts);
                return Err(Error::Conflict);
            }
        }
        let writes = std::mem::take(&mut self.writes);
        for (addr, p) in writes {
            let stamp = self.stamps.contains(&addr);
            let finish = |mut data: Vec<u8>| -> Arc<[u8]> {
                if stamp && data.len() >= 8 {
                    data[..8].copy_from_slice(&ts.to_be_bytes());
                }
                Arc::from(data)
            };
            match p {
                Pending::Alloc { data, tag } => {
                    let len = data.len();
                    inner.install(addr, ts, &Install::New { data: finish(data), tag }, len);
                }
                Pending::Write { data, len } => {
                    inner.install(addr, ts, &Install::Update(finish(data)), len);
                }
                Pending::Free => inner.install(addr, ts, &Install::Free, 0),
            }
        }
        unlock(&locked);
        inner.oracle().finish_commit(ts);
        inner.oracle().wait_stable(ts);
        Ok(Timestamp(ts))
    }
}

fn clamp(size: usize, len: usize) -> usize {
    if size == 0 {
        len
    } else {
        size.min(len)
    }
}

impl Drop for Txn {
    fn drop(&mut self) {
        self.abort();
    }
}
