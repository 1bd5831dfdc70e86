//! In-process simulated cluster.
//!
//! Nodes are logical: there are no sockets and no latency model. What the
//! simulator does provide is node lifecycle (crash, power loss, partition,
//! restart), fault-domain assignment, a message-based RPC layer where every
//! node owns a bounded pool of worker threads, and accounting of "one-sided"
//! reads as local or remote.
//!
//! Region memory is not owned by the node process: the store keeps replica
//! images in harness memory, so a process crash leaves them intact while a
//! power loss clears them. The store learns about faults through
//! [`FaultListener`].

use std::collections::{HashSet, VecDeque};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, OnceLock, Weak};
use std::thread;

use crossbeam_channel::{bounded, unbounded, Sender};
use parking_lot::{Mutex, RwLock};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Replication factor is fixed; every region has a primary and two backups.
pub const REPLICATION_FACTOR: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub node_count: usize,
    pub fault_domain_count: usize,
    pub region_size_bytes: usize,
    pub replication_factor: usize,
    pub rng_seed: u64,
    /// Worker threads per node for RPC handling.
    pub workers_per_node: usize,
    /// Upper bound on regions a single node may host (primary or backup).
    pub max_regions_per_node: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            node_count: 3,
            fault_domain_count: 3,
            region_size_bytes: 1 << 20,
            replication_factor: REPLICATION_FACTOR,
            rng_seed: 0,
            workers_per_node: 2,
            max_regions_per_node: 4096,
        }
    }
}

impl ClusterConfig {
    pub fn new(node_count: usize, fault_domain_count: usize) -> Self {
        ClusterConfig {
            node_count,
            fault_domain_count,
            ..Default::default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng_seed = seed;
        self
    }

    pub fn with_region_size(mut self, bytes: usize) -> Self {
        self.region_size_bytes = bytes;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.replication_factor != REPLICATION_FACTOR {
            return bad(format!("replication factor must be {REPLICATION_FACTOR}"));
        }
        if self.node_count < self.replication_factor {
            return bad(format!(
                "node_count {} below replication factor {}",
                self.node_count, self.replication_factor
            ));
        }
        if self.fault_domain_count < 3 {
            return bad(format!("need at least 3 fault domains, got {}", self.fault_domain_count));
        }
        if self.fault_domain_count > self.node_count {
            return bad("more fault domains than nodes".into());
        }
        if self.region_size_bytes < 64 * 1024 {
            return bad(format!("region size {} below 64 KiB", self.region_size_bytes));
        }
        if self.region_size_bytes > u32::MAX as usize {
            return bad("region size must fit in a 32-bit offset".into());
        }
        if self.workers_per_node == 0 {
            return bad("workers_per_node must be positive".into());
        }
        Ok(())
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u16);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    /// Process dies; region memory survives in the harness.
    ProcessCrash,
    /// Machine loses power; region memory on it is gone.
    PowerLoss,
    /// Node unreachable from the rest of the cluster.
    Partition,
    /// Process restarts (also heals a partition).
    Restart,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum NodeStatus {
    Up,
    Crashed,
    PoweredOff,
}

/// Receives fault notifications after the node status has been updated.
pub trait FaultListener: Send + Sync {
    fn on_fault(&self, node: NodeId, kind: FaultKind);
}

/// Read counters that can be attached to a transaction or a query.
#[derive(Debug, Default)]
pub struct ReadCounter {
    local: AtomicU64,
    remote: AtomicU64,
}

impl ReadCounter {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn record(&self, local: bool) {
        if local {
            self.local.fetch_add(1, Ordering::Relaxed);
        } else {
            self.remote.fetch_add(1, Ordering::Relaxed);
        }
    }

    pub fn add(&self, local: u64, remote: u64) {
        self.local.fetch_add(local, Ordering::Relaxed);
        self.remote.fetch_add(remote, Ordering::Relaxed);
    }

    pub fn local(&self) -> u64 {
        self.local.load(Ordering::Relaxed)
    }

    pub fn remote(&self) -> u64 {
        self.remote.load(Ordering::Relaxed)
    }
}

#[derive(Debug, Default)]
struct Metrics {
    local_reads: AtomicU64,
    remote_reads: AtomicU64,
    rpc_count: AtomicU64,
    tx_commits: AtomicU64,
    tx_aborts: AtomicU64,
    queries: Mutex<VecDeque<QueryReadCount>>,
}

const RECENT_QUERIES: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryReadCount {
    pub query_id: u64,
    pub local_reads: u64,
    pub remote_reads: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricsSnapshot {
    pub local_reads: u64,
    pub remote_reads: u64,
    pub rpc_count: u64,
    pub tx_commits: u64,
    pub tx_aborts: u64,
    /// Most recent queries, oldest first.
    pub queries: Vec<QueryReadCount>,
}

impl MetricsSnapshot {
    pub fn total_reads(&self) -> u64 {
        self.local_reads + self.remote_reads
    }
}

/// Messages carried by the RPC layer. Payloads are opaque bytes; services
/// define their own encoding.
#[derive(Clone, Debug, PartialEq)]
pub enum Message {
    Ping,
    Pong,
    Call { service: String, body: Vec<u8> },
    Reply(Vec<u8>),
    /// Several messages delivered to one node in a single RPC.
    Batch(Vec<Message>),
    Failed(Error),
}

/// An RPC service: `(this_node, caller, body) -> reply body`.
pub type Service = Arc<dyn Fn(NodeId, NodeId, &[u8]) -> Result<Vec<u8>> + Send + Sync>;

type Job = Box<dyn FnOnce() + Send>;

struct NodeState {
    status: NodeStatus,
    partitioned: bool,
    /// Bumped on every restart; lets layers drop process-local state.
    incarnation: u64,
}

pub struct Cluster {
    config: ClusterConfig,
    nodes: RwLock<Vec<NodeState>>,
    metrics: Metrics,
    clock: AtomicU64,
    next_request: AtomicU64,
    seen_requests: Vec<Mutex<HashSet<u64>>>,
    services: RwLock<Vec<(String, Service)>>,
    pools: Vec<OnceLock<Sender<Job>>>,
    listeners: Mutex<Vec<Weak<dyn FaultListener>>>,
    rng: Mutex<ChaCha8Rng>,
}

impl fmt::Debug for Cluster {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Cluster").field("config", &self.config).finish_non_exhaustive()
    }
}

pub type ClusterHandle = Arc<Cluster>;

/// Boots a cluster. Node 0 starts as configuration manager.
pub fn spawn_cluster(config: ClusterConfig) -> Result<ClusterHandle> {
    config.validate()?;
    let n = config.node_count;
    let nodes = (0..n)
        .map(|_| NodeState {
            status: NodeStatus::Up,
            partitioned: false,
            incarnation: 0,
        })
        .collect();
    Ok(Arc::new(Cluster {
        rng: Mutex::new(ChaCha8Rng::seed_from_u64(config.rng_seed)),
        nodes: RwLock::new(nodes),
        metrics: Metrics::default(),
        clock: AtomicU64::new(0),
        next_request: AtomicU64::new(1),
        seen_requests: (0..n).map(|_| Mutex::new(HashSet::new())).collect(),
        services: RwLock::new(Vec::new()),
        pools: (0..n).map(|_| OnceLock::new()).collect(),
        listeners: Mutex::new(Vec::new()),
        config,
    }))
}

impl Cluster {
    pub fn config(&self) -> &ClusterConfig {
        &self.config
    }

    pub fn node_count(&self) -> usize {
        self.config.node_count
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.config.node_count as u16).map(NodeId)
    }

    /// Round-robin fault-domain assignment.
    pub fn fault_domain(&self, node: NodeId) -> usize {
        node.index() % self.config.fault_domain_count
    }

    pub fn status(&self, node: NodeId) -> NodeStatus {
        self.nodes.read()[node.index()].status
    }

    pub fn incarnation(&self, node: NodeId) -> u64 {
        self.nodes.read()[node.index()].incarnation
    }

    /// Up and not partitioned.
    pub fn is_live(&self, node: NodeId) -> bool {
        let nodes = self.nodes.read();
        let s = &nodes[node.index()];
        s.status == NodeStatus::Up && !s.partitioned
    }

    pub fn live_nodes(&self) -> Vec<NodeId> {
        self.node_ids().filter(|n| self.is_live(*n)).collect()
    }

    /// The configuration manager: node 0, failing over to the next live node.
    pub fn cm(&self) -> Option<NodeId> {
        self.node_ids().find(|n| self.is_live(*n))
    }

    pub fn now(&self) -> u64 {
        self.clock.load(Ordering::SeqCst)
    }

    /// Advances the logical clock used for leases and expiries.
    pub fn advance_clock(&self, ticks: u64) -> u64 {
        self.clock.fetch_add(ticks, Ordering::SeqCst) + ticks
    }

    pub fn with_rng<T>(&self, f: impl FnOnce(&mut ChaCha8Rng) -> T) -> T {
        f(&mut self.rng.lock())
    }

    pub fn add_fault_listener(&self, listener: Weak<dyn FaultListener>) {
        self.listeners.lock().push(listener);
    }

    pub fn inject_fault(&self, node: NodeId, kind: FaultKind) {
        assert!(node.index() < self.config.node_count, "no such node {node}");
        {
            let mut nodes = self.nodes.write();
            let s = &mut nodes[node.index()];
            match kind {
                FaultKind::ProcessCrash => {
                    if s.status == NodeStatus::Up {
                        s.status = NodeStatus::Crashed;
                    }
                }
                FaultKind::PowerLoss => s.status = NodeStatus::PoweredOff,
                FaultKind::Partition => s.partitioned = true,
                FaultKind::Restart => {
                    if s.status != NodeStatus::Up {
                        s.incarnation += 1;
                    }
                    s.status = NodeStatus::Up;
                    s.partitioned = false;
                }
            }
        }
        let listeners: Vec<_> = {
            let mut l = self.listeners.lock();
            l.retain(|w| w.strong_count() > 0);
            l.iter().filter_map(Weak::upgrade).collect()
        };
        for l in listeners {
            l.on_fault(node, kind);
        }
    }

    pub fn register_service(&self, name: &str, service: Service) {
        let mut services = self.services.write();
        services.retain(|(n, _)| n != name);
        services.push((name.to_string(), service));
    }

    fn service(&self, name: &str) -> Option<Service> {
        self.services
            .read()
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s.clone())
    }

    pub fn read_metrics(&self) -> MetricsSnapshot {
        let m = &self.metrics;
        MetricsSnapshot {
            local_reads: m.local_reads.load(Ordering::SeqCst),
            remote_reads: m.remote_reads.load(Ordering::SeqCst),
            rpc_count: m.rpc_count.load(Ordering::SeqCst),
            tx_commits: m.tx_commits.load(Ordering::SeqCst),
            tx_aborts: m.tx_aborts.load(Ordering::SeqCst),
            queries: m.queries.lock().iter().cloned().collect(),
        }
    }

    pub fn record_read(&self, local: bool) {
        if local {
            self.metrics.local_reads.fetch_add(1, Ordering::Relaxed);
        } else {
            self.metrics.remote_reads.fetch_add(1, Ordering::Relaxed);
        }
    }

    pub fn record_commit(&self) {
        self.metrics.tx_commits.fetch_add(1, Ordering::Relaxed);
    }

    pub fn record_abort(&self) {
        self.metrics.tx_aborts.fetch_add(1, Ordering::Relaxed);
    }

    pub fn record_query(&self, query_id: u64, local_reads: u64, remote_reads: u64) {
        let mut q = self.metrics.queries.lock();
        if q.len() == RECENT_QUERIES {
            q.pop_front();
        }
        q.push_back(QueryReadCount {
            query_id,
            local_reads,
            remote_reads,
        });
    }

    pub fn next_request_id(&self) -> u64 {
        self.next_request.fetch_add(1, Ordering::Relaxed)
    }

    /// Sends one message and waits for the reply.
    pub fn send_rpc(self: &Arc<Self>, from: NodeId, dest: NodeId, payload: Message) -> Result<Message> {
        let id = self.next_request_id();
        self.send_rpc_with_id(from, dest, id, payload)
    }

    /// Like [`send_rpc`](Self::send_rpc) with a caller-chosen request id.
    /// A request id is delivered at most once per destination.
    pub fn send_rpc_with_id(
        self: &Arc<Self>,
        from: NodeId,
        dest: NodeId,
        request_id: u64,
        payload: Message,
    ) -> Result<Message> {
        if dest.index() >= self.config.node_count {
            return Err(Error::NodeUnreachable(dest));
        }
        if !self.is_live(dest) || !self.is_live(from) {
            return Err(Error::NodeUnreachable(dest));
        }
        if !self.seen_requests[dest.index()].lock().insert(request_id) {
            return Err(Error::DuplicateRequest(request_id));
        }
        self.metrics.rpc_count.fetch_add(1, Ordering::Relaxed);

        let (reply_tx, reply_rx) = bounded(1);
        let cluster = Arc::clone(self);
        let job: Job = Box::new(move || {
            let reply = if cluster.is_live(dest) {
                cluster.handle(dest, from, payload)
            } else {
                Message::Failed(Error::NodeUnreachable(dest))
            };
            let _ = reply_tx.send(reply);
        });
        self.pool(dest).send(job).map_err(|_| Error::NodeUnreachable(dest))?;
        match reply_rx.recv() {
            Ok(Message::Failed(e)) => Err(e),
            Ok(m) => Ok(m),
            Err(_) => Err(Error::NodeUnreachable(dest)),
        }
    }

    fn handle(&self, here: NodeId, from: NodeId, msg: Message) -> Message {
        match msg {
            Message::Ping => Message::Pong,
            Message::Call { service, body } => match self.service(&service) {
                Some(s) => match s(here, from, &body) {
                    Ok(reply) => Message::Reply(reply),
                    Err(e) => Message::Failed(e),
                },
                None => Message::Failed(Error::NoSuchService(service)),
            },
            Message::Batch(msgs) => Message::Batch(msgs.into_iter().map(|m| self.handle(here, from, m)).collect()),
            other => Message::Failed(Error::NoSuchService(format!("{other:?}"))),
        }
    }

    fn pool(&self, node: NodeId) -> &Sender<Job> {
        self.pools[node.index()].get_or_init(|| {
            let (tx, rx) = unbounded::<Job>();
            for i in 0..self.config.workers_per_node {
                let rx = rx.clone();
                thread::Builder::new()
                    .name(format!("{node}-worker-{i}"))
                    .spawn(move || {
                        while let Ok(job) = rx.recv() {
                            job();
                        }
                    })
                    .expect("spawn worker thread");
            }
            tx
        })
    }
}
