//! Disaster recovery: an emulated durable key-value store, the in-store
//! replication log that feeds it, and the two recovery procedures.
//!
//! Durable file records are length-prefixed:
//! `[table:1][key_len:4][key][flags:1][ts:8][val_len:4][val]`, flag bit 0
//! marks a tombstone and bit 1 an erased row (written by GC and
//! compaction). The watermark lives in table 0 under key `0x00 "t_R"`.
//!
//! Tables: best-effort rows (one row per key, newest timestamp wins) and
//! consistent rows (one row per key and commit timestamp, never
//! overwritten).

use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};
use std::fs::{File, OpenOptions};
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::btree::BTree;
use crate::error::{corrupt, Error, Result};
use crate::graph::{GraphMeta, Record, Schema, TypeKind, Value};
use crate::keys::{decode_part, KeyPart};
use crate::simnet::NodeId;
use crate::store::{Addr, FatRef, Hint, Store, Timestamp, Txn};

pub const TABLE_META: u8 = 0;
pub const TABLE_VERTEX: u8 = 1;
pub const TABLE_EDGE: u8 = 2;
pub const TABLE_VERTEX_VERSIONS: u8 = 3;
pub const TABLE_EDGE_VERSIONS: u8 = 4;
pub const TABLE_SCHEMA: u8 = 5;

const FLAG_TOMBSTONE: u8 = 1;
const FLAG_ERASED: u8 = 2;
const WATERMARK_KEY: &[u8] = b"\x00t_R";
/// Synchronous flushes between watermark refreshes.
pub const WATERMARK_EVERY: u64 = 64;

/// Which durable row formats a graph maintains.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum DrMode {
    BestEffort,
    Consistent,
    #[default]
    Both,
}

impl DrMode {
    pub fn parse(s: &str) -> Option<DrMode> {
        match s {
            "best-effort" | "best_effort" => Some(DrMode::BestEffort),
            "consistent" => Some(DrMode::Consistent),
            "both" => Some(DrMode::Both),
            _ => None,
        }
    }

    fn best_effort(self) -> bool {
        matches!(self, DrMode::BestEffort | DrMode::Both)
    }

    fn consistent(self) -> bool {
        matches!(self, DrMode::Consistent | DrMode::Both)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LogTable {
    Vertex,
    Edge,
    Schema,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LogOp {
    Upsert,
    Delete,
}

/// A durable-store mutation awaiting flush.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LogEntry {
    pub commit_ts: Timestamp,
    pub table: LogTable,
    pub op: LogOp,
    pub key: Vec<u8>,
    pub value: Vec<u8>,
}

impl LogEntry {
    /// Object layout: `[commit_ts:8][table:1][op:1][key_len:4][key][val_len:4][val]`.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(18 + self.key.len() + self.value.len());
        out.extend_from_slice(&self.commit_ts.0.to_be_bytes());
        out.push(self.table as u8);
        out.push(self.op as u8);
        out.extend_from_slice(&(self.key.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.key);
        out.extend_from_slice(&(self.value.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.value);
        out
    }

    pub fn decode(b: &[u8]) -> Result<LogEntry> {
        let bad = || corrupt("replication log entry");
        let u32_at = |i: usize| -> Result<usize> {
            Ok(u32::from_be_bytes(b.get(i..i + 4).ok_or_else(bad)?.try_into().unwrap()) as usize)
        };
        let ts = u64::from_be_bytes(b.get(0..8).ok_or_else(bad)?.try_into().unwrap());
        let table = match b.get(8) {
            Some(0) => LogTable::Vertex,
            Some(1) => LogTable::Edge,
            Some(2) => LogTable::Schema,
            _ => return Err(bad()),
        };
        let op = match b.get(9) {
            Some(0) => LogOp::Upsert,
            Some(1) => LogOp::Delete,
            _ => return Err(bad()),
        };
        let klen = u32_at(10)?;
        let key = b.get(14..14 + klen).ok_or_else(bad)?.to_vec();
        let vlen = u32_at(14 + klen)?;
        let value = b.get(18 + klen..18 + klen + vlen).ok_or_else(bad)?.to_vec();
        Ok(LogEntry {
            commit_ts: Timestamp(ts),
            table,
            op,
            key,
            value,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Row {
    pub ts: u64,
    /// `None` is a tombstone.
    pub value: Option<Vec<u8>>,
}

#[derive(Default)]
struct Tables {
    rows: BTreeMap<(u8, Vec<u8>), Row>,
    versions: BTreeMap<(u8, Vec<u8>, u64), Option<Vec<u8>>>,
}

impl Tables {
    fn apply(&mut self, table: u8, key: Vec<u8>, flags: u8, ts: u64, val: Vec<u8>) {
        let value = (flags & FLAG_TOMBSTONE == 0).then_some(val);
        let versioned = matches!(table, TABLE_VERTEX_VERSIONS | TABLE_EDGE_VERSIONS);
        match (versioned, flags & FLAG_ERASED != 0) {
            (false, false) => {
                self.rows.insert((table, key), Row { ts, value });
            }
            (false, true) => {
                self.rows.remove(&(table, key));
            }
            (true, false) => {
                self.versions.insert((table, key, ts), value);
            }
            (true, true) => {
                self.versions.remove(&(table, key, ts));
            }
        }
    }
}

struct DurableInner {
    file: File,
    tables: Tables,
    outage: bool,
    cut_after: Option<usize>,
    writes: u64,
}

/// File-backed sorted tables with a conditional-timestamp upsert.
pub struct DurableStore {
    path: PathBuf,
    inner: Mutex<DurableInner>,
}

impl std::fmt::Debug for DurableStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DurableStore").field("path", &self.path).finish()
    }
}

fn encode_record(out: &mut Vec<u8>, table: u8, key: &[u8], flags: u8, ts: u64, val: &[u8]) {
    out.push(table);
    out.extend_from_slice(&(key.len() as u32).to_be_bytes());
    out.extend_from_slice(key);
    out.push(flags);
    out.extend_from_slice(&ts.to_be_bytes());
    out.extend_from_slice(&(val.len() as u32).to_be_bytes());
    out.extend_from_slice(val);
}

fn read_tables(path: &Path) -> Result<Tables> {
    let mut tables = Tables::default();
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(tables),
        Err(e) => return Err(e.into()),
    };
    let mut buf = Vec::new();
    BufReader::new(file).read_to_end(&mut buf)?;
    let bad = |at: usize| Error::CorruptTable(format!("{} at byte {at}", path.display()));
    let mut i = 0;
    while i < buf.len() {
        let start = i;
        let take = |i: &mut usize, n: usize| -> Result<&[u8]> {
            let s = buf.get(*i..*i + n).ok_or_else(|| bad(start))?;
            *i += n;
            Ok(s)
        };
        let table = take(&mut i, 1)?[0];
        let klen = u32::from_be_bytes(take(&mut i, 4)?.try_into().unwrap()) as usize;
        let key = take(&mut i, klen)?.to_vec();
        let flags = take(&mut i, 1)?[0];
        let ts = u64::from_be_bytes(take(&mut i, 8)?.try_into().unwrap());
        let vlen = u32::from_be_bytes(take(&mut i, 4)?.try_into().unwrap()) as usize;
        let val = take(&mut i, vlen)?.to_vec();
        if table > TABLE_SCHEMA {
            return Err(bad(start));
        }
        tables.apply(table, key, flags, ts, val);
    }
    Ok(tables)
}

impl DurableStore {
    pub fn open(path: impl AsRef<Path>) -> Result<DurableStore> {
        let path = path.as_ref().to_path_buf();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let tables = read_tables(&path)?;
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(DurableStore {
            path,
            inner: Mutex::new(DurableInner {
                file,
                tables,
                outage: false,
                cut_after: None,
                writes: 0,
            }),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Simulates the durable store being unreachable.
    pub fn set_outage(&self, down: bool) {
        let mut g = self.inner.lock();
        g.outage = down;
        g.cut_after = None;
    }

    /// Lets `n` more entry writes succeed, then fails like an outage.
    pub fn cut_after(&self, n: usize) {
        let mut g = self.inner.lock();
        g.outage = false;
        g.cut_after = Some(n);
    }

    pub fn is_down(&self) -> bool {
        self.inner.lock().outage
    }

    /// Durable writes accepted so far.
    pub fn write_count(&self) -> u64 {
        self.inner.lock().writes
    }

    fn admit(g: &mut DurableInner) -> Result<()> {
        if g.outage {
            return Err(Error::Outage);
        }
        if let Some(n) = g.cut_after.as_mut() {
            if *n == 0 {
                g.outage = true;
                g.cut_after = None;
                return Err(Error::Outage);
            }
            *n -= 1;
        }
        Ok(())
    }

    fn append(g: &mut DurableInner, bytes: &[u8]) -> Result<()> {
        g.file.write_all(bytes)?;
        g.file.flush()?;
        g.writes += 1;
        Ok(())
    }

    /// Best-effort row write: applies iff `ts` is newer than the existing
    /// row. Returns whether it applied.
    pub fn be_upsert(&self, table: u8, key: &[u8], value: Option<&[u8]>, ts: Timestamp) -> Result<bool> {
        let mut g = self.inner.lock();
        Self::admit(&mut g)?;
        Self::be_upsert_locked(&mut g, table, key, value, ts.0)
    }

    fn be_upsert_locked(g: &mut DurableInner, table: u8, key: &[u8], value: Option<&[u8]>, ts: u64) -> Result<bool> {
        if let Some(r) = g.tables.rows.get(&(table, key.to_vec())) {
            if ts <= r.ts {
                return Ok(false);
            }
        }
        let flags = if value.is_none() { FLAG_TOMBSTONE } else { 0 };
        let val = value.unwrap_or(&[]);
        let mut rec = Vec::new();
        encode_record(&mut rec, table, key, flags, ts, val);
        Self::append(g, &rec)?;
        g.tables.apply(table, key.to_vec(), flags, ts, val.to_vec());
        Ok(true)
    }

    fn cr_insert_locked(g: &mut DurableInner, table: u8, key: &[u8], value: Option<&[u8]>, ts: u64) -> Result<()> {
        let k = (table, key.to_vec(), ts);
        if g.tables.versions.get(&k).map(|v| v.as_deref()) == Some(value) {
            return Ok(());
        }
        let flags = if value.is_none() { FLAG_TOMBSTONE } else { 0 };
        let val = value.unwrap_or(&[]);
        let mut rec = Vec::new();
        encode_record(&mut rec, table, key, flags, ts, val);
        Self::append(g, &rec)?;
        g.tables.apply(table, key.to_vec(), flags, ts, val.to_vec());
        Ok(())
    }

    /// Consistent row write: inserts version `(key, ts)`.
    pub fn cr_insert(&self, table: u8, key: &[u8], value: Option<&[u8]>, ts: Timestamp) -> Result<()> {
        let mut g = self.inner.lock();
        Self::admit(&mut g)?;
        Self::cr_insert_locked(&mut g, table, key, value, ts.0)
    }

    /// Writes one log entry in the row formats `mode` requires, as a
    /// single unit with respect to outages.
    pub fn apply_entry(&self, e: &LogEntry, mode: DrMode) -> Result<()> {
        let mut g = self.inner.lock();
        Self::admit(&mut g)?;
        let value = match e.op {
            LogOp::Upsert => Some(e.value.as_slice()),
            LogOp::Delete => None,
        };
        let (be, cr) = match e.table {
            LogTable::Vertex => (TABLE_VERTEX, Some(TABLE_VERTEX_VERSIONS)),
            LogTable::Edge => (TABLE_EDGE, Some(TABLE_EDGE_VERSIONS)),
            LogTable::Schema => (TABLE_SCHEMA, None),
        };
        if mode.best_effort() || cr.is_none() {
            Self::be_upsert_locked(&mut g, be, &e.key, value, e.commit_ts.0)?;
        }
        if let (true, Some(t)) = (mode.consistent(), cr) {
            Self::cr_insert_locked(&mut g, t, &e.key, value, e.commit_ts.0)?;
        }
        Ok(())
    }

    /// Persists `t_r` unless an equal or newer watermark is already durable.
    pub fn put_watermark(&self, t_r: Timestamp) -> Result<bool> {
        let mut g = self.inner.lock();
        Self::admit(&mut g)?;
        Self::be_upsert_locked(&mut g, TABLE_META, WATERMARK_KEY, Some(&t_r.0.to_be_bytes()), t_r.0)
    }

    pub fn watermark(&self) -> Option<Timestamp> {
        let g = self.inner.lock();
        g.tables
            .rows
            .get(&(TABLE_META, WATERMARK_KEY.to_vec()))
            .map(|r| Timestamp(r.ts))
    }

    /// Best-effort rows of `table` in key order, tombstones included.
    pub fn rows(&self, table: u8) -> Vec<(Vec<u8>, Row)> {
        let g = self.inner.lock();
        g.tables
            .rows
            .range((table, Vec::new())..)
            .take_while(|((t, _), _)| *t == table)
            .map(|((_, k), r)| (k.clone(), r.clone()))
            .collect()
    }

    pub fn row(&self, table: u8, key: &[u8]) -> Option<Row> {
        self.inner.lock().tables.rows.get(&(table, key.to_vec())).cloned()
    }

    /// Consistent versions of `table` in (key, ts) order.
    pub fn versions(&self, table: u8) -> Vec<(Vec<u8>, Row)> {
        let g = self.inner.lock();
        g.tables
            .versions
            .range((table, Vec::new(), 0)..)
            .take_while(|((t, _, _), _)| *t == table)
            .map(|((_, k, ts), v)| (k.clone(), Row { ts: *ts, value: v.clone() }))
            .collect()
    }

    /// Newest version of each key with ts ≤ `at`, tombstones dropped.
    pub fn snapshot(&self, table: u8, at: Timestamp) -> BTreeMap<Vec<u8>, Vec<u8>> {
        let mut latest: BTreeMap<Vec<u8>, Option<Vec<u8>>> = BTreeMap::new();
        for (k, r) in self.versions(table) {
            if r.ts <= at.0 {
                latest.insert(k, r.value);
            }
        }
        latest.into_iter().filter_map(|(k, v)| v.map(|v| (k, v))).collect()
    }

    /// Removes best-effort tombstones older than `older_than`, and prunes
    /// consistent versions below `min(older_than, t_R)` keeping the newest
    /// version at or below that horizon.
    pub fn gc_tombstones(&self, older_than: Timestamp) -> Result<usize> {
        let mut g = self.inner.lock();
        let dead: Vec<(u8, Vec<u8>, u64)> = g
            .tables
            .rows
            .iter()
            .filter(|((t, _), r)| *t != TABLE_META && r.value.is_none() && r.ts < older_than.0)
            .map(|((t, k), r)| (*t, k.clone(), r.ts))
            .collect();
        let horizon = g
            .tables
            .rows
            .get(&(TABLE_META, WATERMARK_KEY.to_vec()))
            .map(|r| r.ts.min(older_than.0))
            .unwrap_or(0);
        let mut pruned: Vec<(u8, Vec<u8>, u64)> = Vec::new();
        let mut prev: Option<(u8, Vec<u8>, u64)> = None;
        for (t, k, ts) in g.tables.versions.keys() {
            if *ts > horizon {
                continue;
            }
            if let Some(p) = prev.take() {
                if p.0 == *t && p.1 == *k {
                    pruned.push(p);
                }
            }
            prev = Some((*t, k.clone(), *ts));
        }
        let mut rec = Vec::new();
        for (t, k, ts) in dead.iter().chain(pruned.iter()) {
            encode_record(&mut rec, *t, k, FLAG_ERASED, *ts, &[]);
        }
        if !rec.is_empty() {
            Self::append(&mut g, &rec)?;
        }
        for (t, k, ts) in dead.iter().chain(pruned.iter()) {
            g.tables.apply(*t, k.clone(), FLAG_ERASED, *ts, Vec::new());
        }
        Ok(dead.len() + pruned.len())
    }

    /// Rewrites the file with only the live rows.
    pub fn compact(&self) -> Result<()> {
        let mut g = self.inner.lock();
        let mut rec = Vec::new();
        for ((t, k), r) in &g.tables.rows {
            let flags = if r.value.is_none() { FLAG_TOMBSTONE } else { 0 };
            encode_record(&mut rec, *t, k, flags, r.ts, r.value.as_deref().unwrap_or(&[]));
        }
        for ((t, k, ts), v) in &g.tables.versions {
            let flags = if v.is_none() { FLAG_TOMBSTONE } else { 0 };
            encode_record(&mut rec, *t, k, flags, *ts, v.as_deref().unwrap_or(&[]));
        }
        let tmp = self.path.with_extension("compact");
        std::fs::write(&tmp, &rec)?;
        std::fs::rename(&tmp, &self.path)?;
        g.file = OpenOptions::new().append(true).open(&self.path)?;
        Ok(())
    }
}

/// Per-graph replication state held by the database.
pub struct Replicator {
    pub durable: Arc<DurableStore>,
    pub mode: DrMode,
    log: BTree,
    store: Store,
    flushes: Mutex<u64>,
    t_r: Mutex<u64>,
}

impl std::fmt::Debug for Replicator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Replicator").field("mode", &self.mode).finish()
    }
}

/// Log key: `[shard:1][txn:8][table:1][0][durable key]`, or for keys
/// too long for the tree `[shard:1][txn:8][table:1][1][hash:8][probe:4]`.
/// The shard spreads concurrent writers over the tree. There is one entry
/// per durable key and transaction, so a later write in the same
/// transaction replaces the earlier one instead of racing it at the same
/// commit timestamp.
fn log_key(txn: u64, table: LogTable, key: &[u8], probe: u32) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + key.len());
    out.push((txn % 16) as u8);
    out.extend_from_slice(&txn.to_be_bytes());
    out.push(table as u8);
    if key.len() <= EXACT_KEY_MAX {
        out.push(0);
        out.extend_from_slice(key);
    } else {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        key.hash(&mut h);
        out.push(1);
        out.extend_from_slice(&h.finish().to_be_bytes());
        out.extend_from_slice(&probe.to_be_bytes());
    }
    out
}

const EXACT_KEY_MAX: usize = crate::btree::MAX_KEY - 11;

impl Replicator {
    pub fn new(store: Store, meta: &GraphMeta, durable: Arc<DurableStore>) -> Option<Replicator> {
        let log = meta.log_tree?;
        let t_r = durable.watermark().map(|t| t.0).unwrap_or(0);
        Some(Replicator {
            durable,
            mode: meta.dr_mode.unwrap_or_default(),
            log: BTree::open(log).tagged(meta.tag),
            store,
            flushes: Mutex::new(0),
            t_r: Mutex::new(t_r),
        })
    }

    pub fn log_tree(&self) -> &BTree {
        &self.log
    }

    /// Appends an entry in `tx`; after commit the entry is flushed
    /// synchronously, or left for the sweeper if the durable store fails.
    pub fn log_mutation(self: &Arc<Self>, tx: &mut Txn, table: LogTable, op: LogOp, key: Vec<u8>, value: Vec<u8>) -> Result<()> {
        let mut probe = 0;
        let (tkey, prev) = loop {
            let k = log_key(tx.id(), table, &key, probe);
            let Some(v) = self.log.get(tx, &k)? else { break (k, None) };
            let r = FatRef::from_bytes(&v)?;
            let old = LogEntry::decode(tx.read(r.addr, r.size as usize)?.bytes())?;
            if old.table == table && old.key == key {
                break (k, Some(r.addr));
            }
            probe += 1;
        };
        let entry = LogEntry {
            commit_ts: Timestamp(0),
            table,
            op,
            key,
            value,
        };
        let bytes = entry.encode();
        let mut buf = tx.alloc(bytes.len().max(crate::store::MIN_OBJECT), Hint::Local)?;
        buf.bytes_mut()[..bytes.len()].copy_from_slice(&bytes);
        tx.write(&buf)?;
        tx.stamp_commit_ts(buf.addr());
        let obj = FatRef::new(buf.addr(), buf.len() as u32);
        self.log.upsert(tx, &tkey, &obj.to_bytes())?;
        if let Some(old) = prev {
            // superseded within this transaction; its hook is registered
            tx.free(old)?;
            return Ok(());
        }
        let me = self.clone();
        let node = tx.node();
        tx.on_commit(move |ts| {
            me.flush_committed(node, &tkey, ts);
        });
        Ok(())
    }

    /// Flushes whatever entry `tkey` holds once its transaction committed.
    fn flush_committed(&self, node: NodeId, tkey: &[u8], ts: Timestamp) -> bool {
        let staged = (|| -> Result<Option<(Addr, LogEntry)>> {
            let mut tx = self.store.create_transaction(node, true)?;
            let Some(v) = self.log.get(&mut tx, tkey)? else {
                return Ok(None);
            };
            let r = FatRef::from_bytes(&v)?;
            let buf = tx.read(r.addr, r.size as usize)?;
            Ok(Some((r.addr, LogEntry::decode(buf.bytes())?)))
        })();
        match staged {
            Ok(Some((addr, e))) => self.flush(node, tkey, addr, &LogEntry { commit_ts: ts, ..e }),
            _ => false,
        }
    }

    /// Writes the entry durably, then removes it from the log. Returns
    /// whether the entry was flushed.
    pub fn flush(&self, node: NodeId, tkey: &[u8], obj: Addr, e: &LogEntry) -> bool {
        if self.durable.apply_entry(e, self.mode).is_err() {
            return false;
        }
        let removed = self.store.run(node, |tx| {
            if self.log.remove(tx, tkey)?.is_some() {
                tx.free(obj)?;
            }
            Ok(())
        });
        if removed.is_err() {
            return false;
        }
        let n = {
            let mut f = self.flushes.lock();
            *f += 1;
            *f
        };
        if n % WATERMARK_EVERY == 0 {
            let _ = self.refresh_watermark(node);
        }
        true
    }

    /// Every entry currently in the log, oldest commit first.
    pub fn pending(&self, node: NodeId) -> Result<Vec<(Vec<u8>, Addr, LogEntry)>> {
        let mut tx = self.store.create_transaction(node, true)?;
        self.pending_in(&mut tx)
    }

    fn pending_in(&self, tx: &mut Txn) -> Result<Vec<(Vec<u8>, Addr, LogEntry)>> {
        let mut out = Vec::new();
        for (k, v) in self.log.scan(tx, &[], None, usize::MAX)? {
            let r = FatRef::from_bytes(&v)?;
            let buf = tx.read(r.addr, r.size as usize)?;
            out.push((k, r.addr, LogEntry::decode(buf.bytes())?));
        }
        out.sort_by(|a, b| (a.2.commit_ts, &a.0).cmp(&(b.2.commit_ts, &b.0)));
        Ok(out)
    }

    /// Recomputes the watermark from a snapshot of the log and persists it.
    pub fn refresh_watermark(&self, node: NodeId) -> Result<Timestamp> {
        let mut tx = self.store.create_transaction(node, true)?;
        let snap = tx.read_ts().0;
        let pending = self.pending_in(&mut tx)?;
        drop(tx);
        self.advance_watermark(snap, pending.first().map(|p| p.2.commit_ts.0))
    }

    fn advance_watermark(&self, snap: u64, oldest: Option<u64>) -> Result<Timestamp> {
        let candidate = match oldest {
            Some(ts) => snap.min(ts.saturating_sub(1)),
            None => snap,
        };
        let mut t = self.t_r.lock();
        if candidate > *t {
            self.durable.put_watermark(Timestamp(candidate))?;
            *t = candidate;
        }
        Ok(Timestamp(*t))
    }

    pub fn watermark(&self) -> Timestamp {
        Timestamp(*self.t_r.lock())
    }

    /// One FIFO pass over the log. Stops at the first durable failure so
    /// the watermark never passes an unflushed entry.
    pub fn sweep(&self, node: NodeId) -> Result<SweepReport> {
        let mut tx = self.store.create_transaction(node, true)?;
        let snap = tx.read_ts().0;
        let pending = self.pending_in(&mut tx)?;
        drop(tx);
        let mut flushed = 0;
        let mut oldest = None;
        for (k, addr, e) in &pending {
            if self.flush(node, k, *addr, e) {
                flushed += 1;
            } else {
                oldest = Some(e.commit_ts.0);
                break;
            }
        }
        let t_r = match self.advance_watermark(snap, oldest) {
            Ok(t) => t,
            Err(_) => self.watermark(),
        };
        Ok(SweepReport {
            flushed,
            remaining: pending.len() - flushed,
            t_r,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SweepReport {
    pub flushed: usize,
    pub remaining: usize,
    pub t_r: Timestamp,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct RecoveryReport {
    pub vertices: usize,
    pub edges: usize,
    pub skipped_edges: usize,
    pub t_r: Option<u64>,
}

fn part_value(p: KeyPart) -> Result<Value> {
    Ok(match p {
        KeyPart::Int(i) => Value::Int(i),
        KeyPart::Str(s) => Value::Str(s),
        _ => return Err(Error::CorruptTable("primary key kind".into())),
    })
}

fn next_str(b: &[u8]) -> Result<(String, &[u8])> {
    match decode_part(b).map_err(|_| Error::CorruptTable("key".into()))? {
        (KeyPart::Str(s), rest) => Ok((s, rest)),
        _ => Err(Error::CorruptTable("key component".into())),
    }
}

fn next_value(b: &[u8]) -> Result<(Value, &[u8])> {
    let (p, rest) = decode_part(b).map_err(|_| Error::CorruptTable("key".into()))?;
    Ok((part_value(p)?, rest))
}

/// Decodes a vertex key into `(type, pk)`.
pub fn decode_vertex_key(b: &[u8]) -> Result<(String, Value)> {
    let (t, rest) = next_str(b)?;
    let (pk, _) = next_value(rest)?;
    Ok((t, pk))
}

/// Decodes an edge key into `(src type, src pk, edge type, dst type, dst pk)`.
pub fn decode_edge_key(b: &[u8]) -> Result<(String, Value, String, String, Value)> {
    let (st, rest) = next_str(b)?;
    let (sp, rest) = next_value(rest)?;
    let (et, rest) = next_str(rest)?;
    let (dt, rest) = next_str(rest)?;
    let (dp, _) = next_value(rest)?;
    Ok((st, sp, et, dt, dp))
}

/// Which rows a recovery installs.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum RecoveryMode {
    BestEffort,
    Consistent,
}

impl RecoveryMode {
    pub fn parse(s: &str) -> Option<RecoveryMode> {
        match s {
            "best-effort" | "best_effort" => Some(RecoveryMode::BestEffort),
            "consistent" => Some(RecoveryMode::Consistent),
            _ => None,
        }
    }
}

/// Vertex and edge rows a recovery would install, before touching a
/// cluster: `(type, pk) -> record bytes` and edge keys -> record bytes.
pub struct RecoveryPlan {
    pub schemas: Vec<Schema>,
    pub vertices: BTreeMap<Vec<u8>, Vec<u8>>,
    pub edges: BTreeMap<Vec<u8>, Vec<u8>>,
    pub t_r: Option<u64>,
}

pub fn plan_recovery(durable: &DurableStore, mode: RecoveryMode) -> Result<RecoveryPlan> {
    let live = |table| -> BTreeMap<Vec<u8>, Vec<u8>> {
        durable
            .rows(table)
            .into_iter()
            .filter_map(|(k, r)| r.value.map(|v| (k, v)))
            .collect()
    };
    let schemas = live(TABLE_SCHEMA)
        .values()
        .map(|v| {
            let s = std::str::from_utf8(v).map_err(|_| Error::CorruptTable("schema".into()))?;
            Schema::from_json(s).map_err(|e| Error::CorruptTable(format!("schema: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    match mode {
        RecoveryMode::BestEffort => Ok(RecoveryPlan {
            schemas,
            vertices: live(TABLE_VERTEX),
            edges: live(TABLE_EDGE),
            t_r: durable.watermark().map(|t| t.0),
        }),
        RecoveryMode::Consistent => {
            let t_r = durable.watermark().ok_or(Error::MissingWatermark)?;
            Ok(RecoveryPlan {
                schemas,
                vertices: durable.snapshot(TABLE_VERTEX_VERSIONS, t_r),
                edges: durable.snapshot(TABLE_EDGE_VERSIONS, t_r),
                t_r: Some(t_r.0),
            })
        }
    }
}

/// Rebuilds `graph` from `durable` into `db`, which must not already hold
/// a graph of that name. Edges whose endpoints are missing are skipped.
pub fn recover(db: &crate::db::Database, graph: &str, durable: &DurableStore, mode: RecoveryMode) -> Result<RecoveryReport> {
    let plan = plan_recovery(durable, mode)?;
    let g = db.create_graph_with(graph, None)?;
    let mut schemas = plan.schemas.clone();
    schemas.sort_by_key(|s| s.kind == TypeKind::Edge);
    for s in &schemas {
        g.create_type(s)?;
    }
    let node = db.coordinator();
    let mut report = RecoveryReport {
        t_r: plan.t_r,
        ..Default::default()
    };
    let vertices: Vec<_> = plan.vertices.iter().collect();
    for chunk in vertices.chunks(100) {
        db.store().run(node, |tx| {
            for (k, v) in chunk {
                let (t, _) = decode_vertex_key(k)?;
                g.create_vertex(tx, &t, Record::decode(v).map_err(|e| Error::CorruptTable(e.to_string()))?)?;
            }
            Ok(())
        })?;
        report.vertices += chunk.len();
    }
    let edges: Vec<_> = plan.edges.iter().collect();
    for chunk in edges.chunks(100) {
        let (made, skipped) = db.store().run(node, |tx| {
            let (mut made, mut skipped) = (0, 0);
            for (k, v) in chunk {
                let (st, sp, et, dt, dp) = decode_edge_key(k)?;
                let src = g.find_vertex(tx, &st, &sp)?;
                let dst = g.find_vertex(tx, &dt, &dp)?;
                match (src, dst) {
                    (Some(s), Some(d)) => {
                        let rec = Record::decode(v).map_err(|e| Error::CorruptTable(e.to_string()))?;
                        g.create_edge(tx, &et, s, d, rec)?;
                        made += 1;
                    }
                    _ => skipped += 1,
                }
            }
            Ok((made, skipped))
        })?;
        report.edges += made;
        report.skipped_edges += skipped;
    }
    Ok(report)
}
