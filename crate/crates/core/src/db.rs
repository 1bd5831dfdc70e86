//! The database handle tying the cluster, store, catalog, task queue,
//! replication and query engine together.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Weak};

use parking_lot::Mutex;

use crate::btree::BTree;
use crate::catalog::{entry_name, Catalog, EntryKind, EntryState};
use crate::drstore::{DrMode, DurableStore, LogOp, LogTable, Replicator};
use crate::error::{Error, Result};
use crate::graph::{graph_entry_name, load_view, Graph, GraphMeta, GraphView, TypeMeta};
use crate::query::Engine;
use crate::simnet::{spawn_cluster, ClusterConfig, ClusterHandle, FaultKind, FaultListener, NodeId};
use crate::store::{Addr, FatRef, Hint, Store, Txn};
use crate::tasks::{Queue, TaskKind};

#[derive(Clone, Debug)]
pub struct DbConfig {
    pub cluster: ClusterConfig,
    /// Directory for durable tables; replication is off without one.
    pub durable_dir: Option<PathBuf>,
    pub dr_mode: DrMode,
    /// Catalog cache lifetime, in resolve calls per node.
    pub catalog_ttl: u64,
    /// Smallest per-node batch worth shipping to a worker.
    pub ship_min: usize,
    pub page_size: usize,
    /// Bytes of intermediate query state before fast-fail.
    pub query_budget: usize,
    /// Continuation token lifetime in clock ticks.
    pub token_ttl: u64,
    pub lease_ticks: u64,
    /// Vertices per task transaction.
    pub task_batch: usize,
    /// Age in timestamp units past which durable tombstones may be dropped.
    pub tombstone_window: u64,
}

impl Default for DbConfig {
    fn default() -> Self {
        DbConfig {
            cluster: ClusterConfig::default(),
            durable_dir: None,
            dr_mode: DrMode::Both,
            catalog_ttl: crate::catalog::DEFAULT_TTL,
            ship_min: 4,
            page_size: 1000,
            query_budget: 64 << 20,
            token_ttl: 60_000,
            lease_ticks: 500,
            task_batch: 100,
            tombstone_window: 3_600_000,
        }
    }
}

impl DbConfig {
    pub fn new(cluster: ClusterConfig) -> Self {
        DbConfig {
            cluster,
            ..Default::default()
        }
    }

    pub fn with_durable_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.durable_dir = Some(dir.into());
        self
    }
}

pub type Database = Arc<Db>;

pub struct Db {
    me: Weak<Db>,
    config: DbConfig,
    cluster: ClusterHandle,
    store: Store,
    catalog: Catalog,
    queue: Queue,
    engine: Engine,
    views: Vec<Mutex<HashMap<String, Arc<GraphView>>>>,
    type_metas: Mutex<HashMap<Addr, (Vec<u8>, Arc<TypeMeta>)>>,
    replicators: Mutex<HashMap<String, Arc<Replicator>>>,
}

impl std::fmt::Debug for Db {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Db").field("config", &self.config).finish_non_exhaustive()
    }
}

impl Db {
    /// Boots a fresh cluster and bootstraps the catalog and task queue.
    pub fn open(config: DbConfig) -> Result<Database> {
        let cluster = spawn_cluster(config.cluster.clone())?;
        let store = Store::new(cluster.clone());
        let catalog = Catalog::bootstrap(&store)?.with_ttl(config.catalog_ttl);
        let queue = Queue::bootstrap(&store, &catalog)?;
        let nodes = cluster.node_count();
        let db = Arc::new_cyclic(|me: &Weak<Db>| Db {
            me: me.clone(),
            engine: Engine::new(nodes),
            views: (0..nodes).map(|_| Mutex::new(HashMap::new())).collect(),
            type_metas: Mutex::new(HashMap::new()),
            replicators: Mutex::new(HashMap::new()),
            config,
            cluster,
            store,
            catalog,
            queue,
        });
        let listener: Weak<dyn FaultListener> = Arc::downgrade(&db) as Weak<dyn FaultListener>;
        db.cluster.add_fault_listener(listener);
        crate::query::register_service(&db);
        Ok(db)
    }

    pub(crate) fn handle(&self) -> Arc<Db> {
        self.me.upgrade().expect("database dropped")
    }

    pub fn config(&self) -> &DbConfig {
        &self.config
    }

    pub fn cluster(&self) -> &ClusterHandle {
        &self.cluster
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    pub fn queue(&self) -> &Queue {
        &self.queue
    }

    pub(crate) fn engine(&self) -> &Engine {
        &self.engine
    }

    /// Node that runs control-plane transactions: the lowest live node.
    pub fn coordinator(&self) -> NodeId {
        self.cluster.cm().unwrap_or(NodeId(0))
    }

    /// Creates a graph, replicated when a durable directory is configured.
    pub fn create_graph(&self, name: &str) -> Result<Graph> {
        let mode = self.config.durable_dir.as_ref().map(|_| self.config.dr_mode);
        self.create_graph_with(name, mode)
    }

    /// Creates a graph with an explicit replication mode (`None` = off).
    pub fn create_graph_with(&self, name: &str, dr_mode: Option<DrMode>) -> Result<Graph> {
        if name.is_empty() || name.contains('/') {
            return Err(Error::SchemaViolation(format!("bad graph name {name:?}")));
        }
        if dr_mode.is_some() && self.config.durable_dir.is_none() {
            return Err(Error::InvalidConfig("replication needs a durable directory".into()));
        }
        let node = self.coordinator();
        self.store.run(node, |tx| {
            let tag = self.catalog.next_id(tx)?;
            tx.set_alloc_tag(tag);
            let edge_tree = BTree::create(tx, Hint::Local)?;
            let log_tree = match dr_mode {
                Some(_) => Some(BTree::create(tx, Hint::Local)?),
                None => None,
            };
            let meta = GraphMeta {
                name: name.to_string(),
                tag,
                edge_tree,
                log_tree,
                dr_mode,
            };
            let payload = bincode::serialize(&meta).expect("graph meta encodes");
            self.catalog
                .register(tx, &graph_entry_name(name), EntryKind::Graph, FatRef::NULL, &payload)?;
            Ok(())
        })?;
        self.invalidate_view(name);
        Ok(Graph::new(self.handle(), name))
    }

    /// Handle on an existing graph.
    pub fn graph(&self, name: &str) -> Result<Graph> {
        self.graph_view(self.coordinator(), name, true)?;
        Ok(Graph::new(self.handle(), name))
    }

    pub fn graph_names(&self) -> Result<Vec<String>> {
        let mut tx = self.store.create_transaction(self.coordinator(), true)?;
        let prefix = format!("{}/", crate::catalog::TENANT);
        Ok(self
            .catalog
            .list(&mut tx, &prefix)?
            .into_iter()
            .filter(|e| e.kind == EntryKind::Graph)
            .map(|e| e.name.rsplit('/').next().unwrap_or_default().to_string())
            .collect())
    }

    /// Marks the graph and its types DELETING and enqueues the teardown
    /// workflow. Returns the task id; no data is freed yet.
    pub fn delete_graph(&self, name: &str) -> Result<u64> {
        let node = self.coordinator();
        let id = self.store.run(node, |tx| {
            let gname = graph_entry_name(name);
            let entry = self
                .catalog
                .get(tx, &gname)?
                .ok_or_else(|| Error::NotFound(format!("graph {name}")))?;
            if entry.state == EntryState::Deleting {
                return Err(Error::Deleting(name.to_string()));
            }
            self.catalog.set_state(tx, &gname, EntryState::Deleting)?;
            for kind in [EntryKind::VertexType, EntryKind::EdgeType] {
                let prefix = entry_name(name, kind, "");
                for e in self.catalog.list(tx, &prefix)? {
                    self.catalog.set_state(tx, &e.name, EntryState::Deleting)?;
                }
            }
            self.queue.enqueue(
                tx,
                TaskKind::DeleteGraph {
                    graph: name.to_string(),
                },
                None,
            )
        })?;
        self.invalidate_view(name);
        Ok(id)
    }

    /// Cached view of `graph` on `node`; `refresh` forces a reload.
    pub fn graph_view(&self, node: NodeId, graph: &str, refresh: bool) -> Result<Arc<GraphView>> {
        let cache = &self.views[node.index()];
        if !refresh {
            if let Some(v) = cache.lock().get(graph) {
                return Ok(v.clone());
            }
        }
        let v = Arc::new(load_view(self, node, graph)?);
        cache.lock().insert(graph.to_string(), v.clone());
        Ok(v)
    }

    pub fn invalidate_view(&self, graph: &str) {
        for c in &self.views {
            c.lock().remove(graph);
        }
    }

    pub(crate) fn decode_type_meta(&self, addr: Addr, payload: &[u8]) -> Result<Arc<TypeMeta>> {
        if let Some((bytes, tm)) = self.type_metas.lock().get(&addr) {
            if bytes.as_slice() == payload {
                return Ok(tm.clone());
            }
        }
        let tm = Arc::new(TypeMeta::decode(payload)?);
        self.type_metas.lock().insert(addr, (payload.to_vec(), tm.clone()));
        Ok(tm)
    }

    pub fn durable_path(&self, graph: &str) -> Option<PathBuf> {
        self.config.durable_dir.as_ref().map(|d| d.join(format!("{graph}.dr")))
    }

    /// The graph's replicator, or `None` when it is not replicated.
    pub fn replicator(&self, graph: &str) -> Result<Option<Arc<Replicator>>> {
        if let Some(r) = self.replicators.lock().get(graph) {
            return Ok(Some(r.clone()));
        }
        let view = self.graph_view(self.coordinator(), graph, false)?;
        let Some(path) = self.durable_path(graph) else {
            return Ok(None);
        };
        if view.meta.log_tree.is_none() {
            return Ok(None);
        }
        let mut reps = self.replicators.lock();
        if let Some(r) = reps.get(graph) {
            return Ok(Some(r.clone()));
        }
        let durable = Arc::new(DurableStore::open(path)?);
        let r = Replicator::new(self.store.clone(), &view.meta, durable).map(Arc::new);
        if let Some(r) = &r {
            reps.insert(graph.to_string(), r.clone());
        }
        Ok(r)
    }

    pub(crate) fn forget_replicator(&self, graph: &str) {
        self.replicators.lock().remove(graph);
    }

    pub(crate) fn log(&self, tx: &mut Txn, meta: &GraphMeta, table: LogTable, op: LogOp, key: Vec<u8>, value: Vec<u8>) -> Result<()> {
        match self.replicator(&meta.name)? {
            Some(r) => r.log_mutation(tx, table, op, key, value),
            None => Ok(()),
        }
    }

    /// Enqueues a sweeper pass over the graph's replication log.
    pub fn schedule_sweep(&self, graph: &str) -> Result<u64> {
        self.store.run(self.coordinator(), |tx| {
            self.queue.enqueue(
                tx,
                TaskKind::SweepSegment {
                    graph: graph.to_string(),
                },
                None,
            )
        })
    }

    /// Drives task workers round-robin over live nodes until the queue has
    /// nothing runnable or `max_steps` claims were made. Returns the number
    /// of steps run.
    pub fn run_tasks(&self, max_steps: usize) -> Result<usize> {
        crate::tasks::run_until_idle(self, max_steps)
    }
}

impl FaultListener for Db {
    fn on_fault(&self, node: NodeId, kind: FaultKind) {
        match kind {
            FaultKind::ProcessCrash | FaultKind::PowerLoss => {
                self.views[node.index()].lock().clear();
                self.engine.drop_node_state(node);
            }
            FaultKind::Partition | FaultKind::Restart => {}
        }
    }
}
