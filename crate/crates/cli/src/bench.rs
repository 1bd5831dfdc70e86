//! Fixed-rate smoke benchmark.
//!
//! Each client owns every `clients`-th slot of a schedule spaced at
//! `1/qps`; it waits for its slot, runs the query to completion and
//! records latency from the slot time, so a backlog shows up as latency.
//! Every result is compared with a reference result.

use std::sync::Mutex;
use std::time::{Duration, Instant};

use a1lite::query::ExecOptions;
use a1lite::simnet::NodeId;
use a1lite::Db;
use anyhow::Result;
use serde::Serialize;

use crate::app::{run_query, Drained};

pub const LABEL: &str = "desk-scale smoke run on a simulated in-process cluster; not comparable to published hardware numbers";

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub query: String,
    pub qps: f64,
    pub duration: Duration,
    pub clients: usize,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct BenchReport {
    pub label: String,
    pub target_qps: f64,
    pub duration_s: f64,
    pub clients: usize,
    pub completed: usize,
    pub errors: usize,
    pub incorrect: usize,
    pub achieved_qps: Option<f64>,
    pub mean_ms: Option<f64>,
    pub p50_ms: Option<f64>,
    pub p99_ms: Option<f64>,
    pub max_ms: Option<f64>,
    pub reads_per_sec: Option<f64>,
}

#[derive(Default)]
struct Samples {
    latencies: Vec<Duration>,
    errors: usize,
    incorrect: usize,
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Runs the benchmark. Without a `reference`, the query's quiescent result
/// before the run is the reference.
pub fn run_bench(db: &Db, graph: &str, cfg: &BenchConfig, reference: Option<&Drained>) -> Result<BenchReport> {
    let mut report = BenchReport {
        label: LABEL.into(),
        target_qps: cfg.qps,
        duration_s: cfg.duration.as_secs_f64(),
        clients: cfg.clients.max(1),
        ..Default::default()
    };
    let total = (cfg.qps * cfg.duration.as_secs_f64()).floor() as usize;
    if total == 0 || cfg.qps <= 0.0 {
        return Ok(report);
    }
    let opts = ExecOptions::default();
    let reference = match reference {
        Some(r) => r.clone(),
        None => run_query(db, graph, db.coordinator(), &cfg.query, &opts, usize::MAX)?.0,
    };
    let nodes: Vec<NodeId> = db.cluster().live_nodes();
    let interval = Duration::from_secs_f64(1.0 / cfg.qps);
    let samples = Mutex::new(Samples::default());
    let reads_before = db.cluster().read_metrics().total_reads();
    let start = Instant::now();
    std::thread::scope(|s| {
        for c in 0..report.clients {
            let (samples, reference, nodes, opts) = (&samples, &reference, &nodes, &opts);
            s.spawn(move || {
                let mut slot = c;
                while slot < total {
                    let due = start + interval * slot as u32;
                    if let Some(wait) = due.checked_duration_since(Instant::now()) {
                        std::thread::sleep(wait);
                    }
                    let coord = nodes[slot % nodes.len()];
                    let res = run_query(db, graph, coord, &cfg.query, opts, usize::MAX);
                    let lat = due.elapsed();
                    let mut g = samples.lock().unwrap();
                    match res {
                        Ok((d, _)) => {
                            g.latencies.push(lat);
                            if d.count != reference.count || d.rows != reference.rows {
                                g.incorrect += 1;
                            }
                        }
                        Err(_) => g.errors += 1,
                    }
                    slot += report.clients;
                }
            });
        }
    });
    let elapsed = start.elapsed().as_secs_f64();
    let reads = db.cluster().read_metrics().total_reads() - reads_before;
    let Samples { latencies, errors, incorrect } = samples.into_inner().unwrap();
    let mut ms: Vec<f64> = latencies.iter().map(|d| d.as_secs_f64() * 1e3).collect();
    ms.sort_by(f64::total_cmp);
    report.completed = ms.len();
    report.errors = errors;
    report.incorrect = incorrect;
    if !ms.is_empty() {
        report.achieved_qps = Some(ms.len() as f64 / elapsed);
        report.mean_ms = Some(ms.iter().sum::<f64>() / ms.len() as f64);
        report.p50_ms = Some(percentile(&ms, 50.0));
        report.p99_ms = Some(percentile(&ms, 99.0));
        report.max_ms = ms.last().copied();
        report.reads_per_sec = Some(reads as f64 / elapsed);
    }
    Ok(report)
}
