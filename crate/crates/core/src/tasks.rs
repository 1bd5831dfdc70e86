//! Durable task queue and the teardown, index-build and sweep workflows.
//!
//! The queue is a B-tree keyed `(priority, task_id)` holding each task's
//! record. Workers claim the lowest runnable task by writing a lease into
//! its record; every step then re-checks the lease inside the transaction
//! that does the work, so a worker whose lease expired cannot commit
//! anything. Long tasks save a cursor in their record and go back to
//! PENDING between batches.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::btree::BTree;
use crate::catalog::{entry_name, Catalog, EntryKind, EntryState};
use crate::db::Db;
use crate::error::{corrupt, Error, Result};
use crate::graph::{graph_entry_name, TypeKind, TypeMeta};
use crate::keys::KeyBuf;
use crate::simnet::NodeId;
use crate::store::{Addr, FatRef, Hint, Store, Txn};

const QUEUE_NAME: &str = "default/_sys/queue/tasks";
const SEQ_KEY: &[u8] = b"\xffseq";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildIndexArgs {
    pub graph: String,
    pub vtype: String,
    pub field: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    DeleteGraph { graph: String },
    DeleteType { graph: String, type_name: String },
    DeleteIndex { graph: String, vtype: String, field: String },
    BuildIndex(BuildIndexArgs),
    SweepSegment { graph: String },
}

impl TaskKind {
    /// Lower runs first. Index builds run last.
    pub fn priority(&self) -> u8 {
        match self {
            TaskKind::SweepSegment { .. } => 0,
            TaskKind::DeleteGraph { .. } | TaskKind::DeleteType { .. } | TaskKind::DeleteIndex { .. } => 1,
            TaskKind::BuildIndex(_) => 2,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::DeleteGraph { .. } => "DELETE_GRAPH",
            TaskKind::DeleteType { .. } => "DELETE_TYPE",
            TaskKind::DeleteIndex { .. } => "DELETE_INDEX",
            TaskKind::BuildIndex(_) => "BUILD_INDEX",
            TaskKind::SweepSegment { .. } => "SWEEP_SEGMENT",
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskState {
    Pending,
    Running,
    WaitingChildren,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub id: u64,
    pub kind: TaskKind,
    pub state: TaskState,
    pub parent: Option<(u8, u64)>,
    pub pending_children: u32,
    pub lease_expiry: u64,
    pub owner: Option<NodeId>,
    /// Workflow phase, bumped when children finish.
    pub phase: u32,
    pub cursor: Option<Vec<u8>>,
}

impl Task {
    fn key(&self) -> Vec<u8> {
        task_key(self.kind.priority(), self.id)
    }

    fn encode(&self) -> Vec<u8> {
        bincode::serialize(self).expect("task encodes")
    }

    fn decode(b: &[u8]) -> Result<Task> {
        bincode::deserialize(b).map_err(|e| corrupt(format!("task record: {e}")))
    }
}

fn task_key(priority: u8, id: u64) -> Vec<u8> {
    KeyBuf::new().raw_u8(priority).raw_u64(id).into_bytes()
}

/// What one step of a task asks the engine to do next.
enum Step {
    Done,
    Reschedule(Option<Vec<u8>>),
    Spawn(Vec<TaskKind>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Progress {
    pub task_id: u64,
    pub kind: &'static str,
    pub finished: bool,
}

#[derive(Debug, Default)]
struct Counters {
    claims: AtomicU64,
    reschedules: AtomicU64,
    completed: AtomicU64,
}

pub struct Queue {
    tree: BTree,
    counters: Counters,
}

impl std::fmt::Debug for Queue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Queue").field("root", &self.tree.root()).finish()
    }
}

impl Queue {
    pub fn bootstrap(store: &Store, catalog: &Catalog) -> Result<Queue> {
        let root = store.run(NodeId(0), |tx| {
            if let Some(e) = catalog.get(tx, QUEUE_NAME)? {
                return Ok(e.root);
            }
            let root = BTree::create(tx, Hint::Local)?;
            catalog.register(tx, QUEUE_NAME, EntryKind::Queue, root, &[])?;
            Ok(root)
        })?;
        Ok(Queue {
            tree: BTree::open(root),
            counters: Counters::default(),
        })
    }

    fn next_id(&self, tx: &mut Txn) -> Result<u64> {
        let cur = match self.tree.get(tx, SEQ_KEY)? {
            Some(v) => u64::from_be_bytes(v.as_slice().try_into().map_err(|_| corrupt("task sequence"))?),
            None => 1,
        };
        self.tree.upsert(tx, SEQ_KEY, &(cur + 1).to_be_bytes())?;
        Ok(cur)
    }

    /// Adds a task inside the caller's transaction.
    pub fn enqueue(&self, tx: &mut Txn, kind: TaskKind, parent: Option<(u8, u64)>) -> Result<u64> {
        let id = self.next_id(tx)?;
        let t = Task {
            id,
            kind,
            state: TaskState::Pending,
            parent,
            pending_children: 0,
            lease_expiry: 0,
            owner: None,
            phase: 0,
            cursor: None,
        };
        self.tree.insert(tx, &t.key(), &t.encode())?;
        Ok(id)
    }

    pub fn tasks(&self, tx: &mut Txn) -> Result<Vec<Task>> {
        self.tree
            .scan(tx, &[], Some(SEQ_KEY), usize::MAX)?
            .iter()
            .map(|(_, v)| Task::decode(v))
            .collect()
    }

    /// `None` once the task has completed and been removed.
    pub fn task(&self, tx: &mut Txn, id: u64) -> Result<Option<Task>> {
        Ok(self.tasks(tx)?.into_iter().find(|t| t.id == id))
    }

    pub fn claims(&self) -> u64 {
        self.counters.claims.load(Ordering::Relaxed)
    }

    pub fn reschedules(&self) -> u64 {
        self.counters.reschedules.load(Ordering::Relaxed)
    }

    pub fn completed(&self) -> u64 {
        self.counters.completed.load(Ordering::Relaxed)
    }

    /// Claims the lowest-keyed runnable task for `worker`: PENDING, or
    /// RUNNING with an expired lease.
    pub fn claim(&self, db: &Db, worker: NodeId) -> Result<Option<Task>> {
        let now = db.cluster().now();
        let lease = db.config().lease_ticks;
        let mut tx = db.store().create_transaction(worker, false)?;
        let mut found = None;
        let mut err = None;
        self.tree.for_each(&mut tx, std::ops::Bound::Unbounded, Some(SEQ_KEY), |_, v| {
            match Task::decode(v) {
                Ok(t) => {
                    let runnable = match t.state {
                        TaskState::Pending => true,
                        TaskState::Running => t.lease_expiry <= now,
                        TaskState::WaitingChildren => false,
                    };
                    if runnable {
                        found = Some(t);
                        return false;
                    }
                }
                Err(e) => {
                    err = Some(e);
                    return false;
                }
            }
            true
        })?;
        if let Some(e) = err {
            return Err(e);
        }
        let Some(mut t) = found else {
            return Ok(None);
        };
        t.state = TaskState::Running;
        t.owner = Some(worker);
        t.lease_expiry = now + lease;
        self.tree.upsert(&mut tx, &t.key(), &t.encode())?;
        match tx.commit() {
            Ok(_) => {
                self.counters.claims.fetch_add(1, Ordering::Relaxed);
                Ok(Some(t))
            }
            Err(Error::Conflict) => Err(Error::ClaimLost),
            Err(e) => Err(e),
        }
    }

    /// Re-reads `claimed` in `tx` and fails with CLAIM_LOST unless the
    /// lease is still ours.
    fn check_lease(&self, tx: &mut Txn, claimed: &Task) -> Result<Task> {
        let v = self.tree.get(tx, &claimed.key())?.ok_or(Error::ClaimLost)?;
        let t = Task::decode(&v)?;
        if t.state != TaskState::Running || t.owner != claimed.owner || t.lease_expiry != claimed.lease_expiry {
            return Err(Error::ClaimLost);
        }
        Ok(t)
    }

    fn finish(&self, tx: &mut Txn, t: &Task, step: Step) -> Result<bool> {
        match step {
            Step::Done => {
                self.tree.delete(tx, &t.key())?;
                if let Some((prio, pid)) = t.parent {
                    let pk = task_key(prio, pid);
                    let v = self.tree.get(tx, &pk)?.ok_or_else(|| corrupt("parent task missing"))?;
                    let mut p = Task::decode(&v)?;
                    p.pending_children = p.pending_children.saturating_sub(1);
                    if p.pending_children == 0 {
                        p.state = TaskState::Pending;
                        p.phase += 1;
                        p.cursor = None;
                    }
                    self.tree.upsert(tx, &pk, &p.encode())?;
                }
                Ok(true)
            }
            Step::Reschedule(cursor) => {
                let mut next = t.clone();
                next.state = TaskState::Pending;
                next.owner = None;
                next.lease_expiry = 0;
                next.cursor = cursor;
                self.tree.upsert(tx, &t.key(), &next.encode())?;
                Ok(false)
            }
            Step::Spawn(children) if children.is_empty() => {
                let mut next = t.clone();
                next.state = TaskState::Pending;
                next.owner = None;
                next.lease_expiry = 0;
                next.phase += 1;
                next.cursor = None;
                self.tree.upsert(tx, &t.key(), &next.encode())?;
                Ok(false)
            }
            Step::Spawn(children) => {
                let me = (t.kind.priority(), t.id);
                let n = children.len() as u32;
                for c in children {
                    self.enqueue(tx, c, Some(me))?;
                }
                let mut next = t.clone();
                next.state = TaskState::WaitingChildren;
                next.pending_children = n;
                next.owner = None;
                next.cursor = None;
                self.tree.upsert(tx, &t.key(), &next.encode())?;
                Ok(false)
            }
        }
    }

    /// Runs one step of a claimed task.
    pub fn run_claimed(&self, db: &Db, worker: NodeId, claimed: &Task) -> Result<Progress> {
        let finished = db.store().run(worker, |tx| {
            let t = self.check_lease(tx, claimed)?;
            let step = run_step(db, tx, &t)?;
            let resched = matches!(step, Step::Reschedule(_));
            let done = self.finish(tx, &t, step)?;
            Ok((done, resched))
        });
        let (done, resched) = finished?;
        if done {
            self.counters.completed.fetch_add(1, Ordering::Relaxed);
            after_done(db, &claimed.kind);
        }
        if resched {
            self.counters.reschedules.fetch_add(1, Ordering::Relaxed);
        }
        Ok(Progress {
            task_id: claimed.id,
            kind: claimed.kind.name(),
            finished: done,
        })
    }

    /// Claims and runs one step. `Ok(None)` when nothing is runnable.
    pub fn claim_and_run(&self, db: &Db, worker: NodeId) -> Result<Option<Progress>> {
        match self.claim(db, worker)? {
            Some(t) => self.run_claimed(db, worker, &t).map(Some),
            None => Ok(None),
        }
    }
}

/// Side effects outside the store once a task has committed its last step.
fn after_done(db: &Db, kind: &TaskKind) {
    match kind {
        TaskKind::DeleteGraph { graph } => {
            db.invalidate_view(graph);
            db.forget_replicator(graph);
            if let Some(p) = db.durable_path(graph) {
                let _ = std::fs::remove_file(p);
            }
        }
        TaskKind::DeleteType { graph, .. } | TaskKind::DeleteIndex { graph, .. } => db.invalidate_view(graph),
        TaskKind::BuildIndex(a) => db.invalidate_view(&a.graph),
        TaskKind::SweepSegment { .. } => {}
    }
}

pub(crate) fn run_until_idle(db: &Db, max_steps: usize) -> Result<usize> {
    let mut steps = 0;
    let mut idle_rounds = 0;
    let mut i = 0usize;
    while steps < max_steps {
        let live = db.cluster().live_nodes();
        if live.is_empty() {
            return Err(Error::StorePaused);
        }
        let worker = live[i % live.len()];
        i += 1;
        match db.queue().claim_and_run(db, worker) {
            Ok(Some(_)) => {
                steps += 1;
                idle_rounds = 0;
            }
            Ok(None) => {
                idle_rounds += 1;
                if idle_rounds >= live.len() {
                    break;
                }
            }
            Err(Error::ClaimLost) | Err(Error::Conflict) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(steps)
}

fn type_meta_of(db: &Db, tx: &mut Txn, name: &str) -> Result<Option<(crate::catalog::CatalogEntry, TypeMeta)>> {
    let Some(e) = db.catalog().get(tx, name)? else {
        return Ok(None);
    };
    let buf = tx.read_all(e.meta)?;
    let b = buf.bytes();
    let len = u32::from_be_bytes(b[1..5].try_into().map_err(|_| corrupt("meta"))?) as usize;
    let tm: TypeMeta = bincode::deserialize(&b[5..5 + len]).map_err(|e| corrupt(format!("type meta: {e}")))?;
    Ok(Some((e, tm)))
}

fn run_step(db: &Db, tx: &mut Txn, t: &Task) -> Result<Step> {
    let cat = db.catalog();
    let batch = db.config().task_batch;
    match &t.kind {
        TaskKind::DeleteGraph { graph } => {
            let gname = graph_entry_name(graph);
            let Some(gentry) = cat.get(tx, &gname)? else {
                return Ok(Step::Done);
            };
            let vprefix = entry_name(graph, EntryKind::VertexType, "");
            if t.phase == 0 {
                let children = cat
                    .list(tx, &vprefix)?
                    .into_iter()
                    .map(|e| {
                        let (_, tm) = type_meta_of(db, tx, &e.name)?.ok_or_else(|| corrupt("type vanished"))?;
                        Ok(TaskKind::DeleteType {
                            graph: graph.clone(),
                            type_name: tm.schema.type_name,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                return Ok(Step::Spawn(children));
            }
            let gbuf = tx.read_all(gentry.meta)?;
            let b = gbuf.bytes();
            let len = u32::from_be_bytes(b[1..5].try_into().map_err(|_| corrupt("meta"))?) as usize;
            let meta: crate::graph::GraphMeta =
                bincode::deserialize(&b[5..5 + len]).map_err(|e| corrupt(format!("graph meta: {e}")))?;
            let edge_tree = BTree::open(meta.edge_tree);
            edge_tree.drop_tree(tx)?;
            if let Some(log) = meta.log_tree {
                let log = BTree::open(log);
                for (_, v) in log.scan(tx, &[], None, usize::MAX)? {
                    tx.free(FatRef::from_bytes(&v)?.addr)?;
                }
                log.drop_tree(tx)?;
            }
            for kind in [EntryKind::VertexType, EntryKind::EdgeType] {
                for e in cat.list(tx, &entry_name(graph, kind, ""))? {
                    if e.state == EntryState::Active {
                        cat.set_state(tx, &e.name, EntryState::Deleting)?;
                    }
                    if !e.root.is_null() {
                        BTree::open(e.root).drop_tree(tx)?;
                    }
                    cat.remove(tx, &e.name)?;
                }
            }
            cat.remove(tx, &gname)?;
            Ok(Step::Done)
        }
        TaskKind::DeleteType { graph, type_name } => {
            let ename = entry_name(graph, EntryKind::VertexType, type_name);
            let Some((entry, tm)) = type_meta_of(db, tx, &ename)? else {
                return Ok(Step::Done);
            };
            if entry.state != EntryState::Deleting {
                return Err(Error::BadTransition(format!("{ename} is not being deleted")));
            }
            let g = crate::graph::Graph::new(db.handle(), graph);
            match t.phase {
                0 => {
                    let ti = g.type_by_id(tx.node(), entry.id)?;
                    let batch_addrs: Vec<Addr> = g
                        .scan_type_info(tx, &ti, None, batch)?
                        .into_iter()
                        .map(|(_, a)| a)
                        .collect();
                    for a in &batch_addrs {
                        g.delete_vertex_at(tx, *a, false)?;
                    }
                    if batch_addrs.len() == batch {
                        return Ok(Step::Reschedule(None));
                    }
                    let children = tm
                        .indexes
                        .iter()
                        .map(|i| TaskKind::DeleteIndex {
                            graph: graph.clone(),
                            vtype: type_name.clone(),
                            field: i.field.clone(),
                        })
                        .collect();
                    Ok(Step::Spawn(children))
                }
                _ => {
                    if !entry.root.is_null() {
                        BTree::open(entry.root).drop_tree(tx)?;
                    }
                    cat.remove(tx, &ename)?;
                    Ok(Step::Done)
                }
            }
        }
        TaskKind::DeleteIndex { graph, vtype, field } => {
            let ename = entry_name(graph, EntryKind::VertexType, vtype);
            let Some((_, mut tm)) = type_meta_of(db, tx, &ename)? else {
                return Ok(Step::Done);
            };
            if let Some(pos) = tm.indexes.iter().position(|i| &i.field == field) {
                let idx = tm.indexes.remove(pos);
                BTree::open(idx.root).drop_tree(tx)?;
                cat.set_payload(tx, &ename, &bincode::serialize(&tm).expect("type meta encodes"))?;
            }
            Ok(Step::Done)
        }
        TaskKind::BuildIndex(a) => {
            let g = crate::graph::Graph::new(db.handle(), &a.graph);
            let ti = match g.type_info(tx.node(), &a.vtype) {
                Ok(ti) => ti,
                Err(Error::NotFound(_)) | Err(Error::UnknownType(_)) => return Ok(Step::Done),
                Err(e) => return Err(e),
            };
            if ti.kind != TypeKind::Vertex {
                return Ok(Step::Done);
            }
            let page = g.scan_type_info(tx, &ti, t.cursor.as_deref(), batch)?;
            let addrs: Vec<Addr> = page.iter().map(|(_, a)| *a).collect();
            match g.index_batch(tx, &a.vtype, &a.field, &addrs) {
                Ok(()) => {}
                Err(Error::Deleting(_)) => return Ok(Step::Done),
                Err(e) => return Err(e),
            }
            if page.len() == batch {
                return Ok(Step::Reschedule(page.last().map(|(k, _)| k.clone())));
            }
            g.finish_index(tx, &a.vtype, &a.field)?;
            Ok(Step::Done)
        }
        TaskKind::SweepSegment { graph } => {
            if let Some(r) = db.replicator(graph)? {
                // the pass runs its own transactions; this one only retires the task
                r.sweep(tx.node())?;
            }
            Ok(Step::Done)
        }
    }
}
