//! Flags, cluster setup and the command implementations.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use a1lite::drstore::{recover, DrMode, DurableStore, RecoveryMode};
use a1lite::graph::{load_ndjson, Graph, GraphExport, LoadReport, Schema};
use a1lite::query::{execute, fetch_continuation, ExecOptions, QueryOutput};
use a1lite::simnet::{ClusterConfig, NodeId};
use a1lite::{Database, Db, DbConfig};
use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::{json, Value as J};

use crate::bench::{run_bench, BenchConfig};
use crate::chaos::{run_scenario, Scenario};
use crate::film;
use crate::output::OutFormat;

pub const SEED_ENV: &str = "A1LITE_SEED";
const LOAD_BATCH: usize = 256;

#[derive(Parser, Debug)]
#[command(name = "a1lite", version, about = "Simulated distributed in-memory graph database")]
pub struct Cli {
    /// Simulated nodes in the cluster.
    #[arg(long, global = true, default_value_t = 5)]
    pub nodes: usize,
    #[arg(long, global = true, default_value_t = 3)]
    pub fault_domains: usize,
    /// RNG seed for placement and faults; A1LITE_SEED overrides it.
    #[arg(long, global = true, default_value_t = 1)]
    pub seed: u64,
    /// Region size in bytes.
    #[arg(long, global = true)]
    pub region_size: Option<usize>,
    /// off, best-effort, consistent or both.
    #[arg(long, global = true)]
    pub dr_mode: Option<String>,
    /// Where durable tables live; a temporary directory when omitted.
    #[arg(long, global = true)]
    pub durable_dir: Option<PathBuf>,
    /// NDJSON data file; the bundled film dataset when omitted.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    /// Schema JSON (one type or an array of types).
    #[arg(long, global = true)]
    pub schema: Option<PathBuf>,
    /// Graph name.
    #[arg(long, global = true)]
    pub graph: Option<String>,
    #[arg(long, global = true, value_enum, default_value_t)]
    pub out: OutFormat,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Create the schema and bulk-load the data file.
    Load,
    /// Load, then run one A1QL query.
    Query {
        /// Inline JSON, a file path, or q1..q4 for the bundled queries.
        query: String,
        /// Continuation pages to fetch after the first.
        #[arg(long, default_value_t = 10)]
        pages: usize,
        #[arg(long)]
        coordinator: Option<u16>,
        #[arg(long)]
        page_size: Option<usize>,
        #[arg(long)]
        ship_min: Option<usize>,
    },
    /// Run a scripted fault scenario and check its assertions.
    Chaos { scenario: PathBuf },
    /// Rebuild a fresh cluster from a graph's durable tables.
    Recover {
        #[arg(long)]
        mode: String,
        /// JSON `{"vertices": [pk...], "edges": [[src, type, dst]...]}` to diff against.
        #[arg(long)]
        expect: Option<PathBuf>,
    },
    /// Drive one query at a fixed rate and report latency.
    Bench {
        #[arg(long)]
        query: String,
        #[arg(long, default_value_t = 100.0)]
        qps: f64,
        /// Seconds.
        #[arg(long, default_value_t = 10.0)]
        duration: f64,
        #[arg(long, default_value_t = 4)]
        clients: usize,
    },
    /// Load, run queries and print cluster read metrics.
    Metrics {
        /// Queries to run; the bundled Q1..Q4 when omitted.
        #[arg(long)]
        query: Vec<String>,
    },
    /// Write the bundled dataset, schema and queries to a directory.
    Dataset {
        #[arg(long)]
        dir: PathBuf,
    },
}

#[derive(Clone, Debug)]
pub struct CliConfig {
    pub nodes: usize,
    pub fault_domains: usize,
    pub region_size: Option<usize>,
    pub seed: u64,
    pub data: Option<PathBuf>,
    pub schema: Option<PathBuf>,
    pub graph: Option<String>,
    pub dr_mode: Option<DrMode>,
    pub durable_dir: Option<PathBuf>,
    pub out: OutFormat,
}

impl Default for CliConfig {
    fn default() -> Self {
        CliConfig {
            nodes: 5,
            fault_domains: 3,
            region_size: None,
            seed: 1,
            data: None,
            schema: None,
            graph: None,
            dr_mode: None,
            durable_dir: None,
            out: OutFormat::Json,
        }
    }
}

pub fn parse_dr_mode(s: &str) -> Result<Option<DrMode>> {
    if s == "off" {
        return Ok(None);
    }
    DrMode::parse(s)
        .map(Some)
        .ok_or_else(|| anyhow!("bad --dr-mode {s:?}: expected off, best-effort, consistent or both"))
}

impl CliConfig {
    pub fn from_cli(cli: &Cli) -> Result<CliConfig> {
        let seed = match std::env::var(SEED_ENV) {
            Ok(s) => s.trim().parse().with_context(|| format!("{SEED_ENV}={s:?} is not a number"))?,
            Err(_) => cli.seed,
        };
        if cli.data.is_some() != cli.schema.is_some() {
            bail!("--data and --schema go together");
        }
        Ok(CliConfig {
            nodes: cli.nodes,
            fault_domains: cli.fault_domains,
            region_size: cli.region_size,
            seed,
            data: cli.data.clone(),
            schema: cli.schema.clone(),
            graph: cli.graph.clone(),
            dr_mode: cli.dr_mode.as_deref().map(parse_dr_mode).transpose()?.flatten(),
            durable_dir: cli.durable_dir.clone(),
            out: cli.out,
        })
    }

    pub fn graph_name(&self) -> String {
        match (&self.graph, &self.data) {
            (Some(g), _) => g.clone(),
            (None, Some(p)) => p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or("g".into()),
            (None, None) => film::GRAPH.to_string(),
        }
    }

    pub fn cluster(&self) -> ClusterConfig {
        let mut c = ClusterConfig::new(self.nodes, self.fault_domains).with_seed(self.seed);
        if let Some(r) = self.region_size {
            c = c.with_region_size(r);
        }
        c
    }

    /// Opens a cluster; durable tables go to `durable_dir` when one is set.
    pub fn open_db(&self, durable_dir: Option<&Path>) -> Result<Database> {
        let mut cfg = DbConfig::new(self.cluster());
        if let Some(d) = durable_dir {
            cfg = cfg.with_durable_dir(d);
        }
        Ok(Db::open(cfg)?)
    }

    fn sources(&self) -> Result<(String, String)> {
        match (&self.schema, &self.data) {
            (Some(s), Some(d)) => Ok((
                std::fs::read_to_string(s).with_context(|| format!("reading {}", s.display()))?,
                std::fs::read_to_string(d).with_context(|| format!("reading {}", d.display()))?,
            )),
            _ => Ok((film::schema_json(), film::dataset().0)),
        }
    }

    /// Boots the cluster, registers the schema and bulk-loads the data.
    pub fn load(&self) -> Result<Loaded> {
        let (schema, data) = self.sources()?;
        let schemas = Schema::many_from_json(&schema)?;
        let (tmp, dir) = match (&self.durable_dir, self.dr_mode) {
            (Some(d), _) => (None, Some(d.clone())),
            (None, Some(_)) => {
                let t = tempfile::tempdir()?;
                let p = t.path().to_path_buf();
                (Some(t), Some(p))
            }
            (None, None) => (None, None),
        };
        let db = self.open_db(dir.as_deref())?;
        let name = self.graph_name();
        let dr = if dir.is_some() { Some(self.dr_mode.unwrap_or_default()) } else { None };
        let graph = db.create_graph_with(&name, dr)?;
        for s in &schemas {
            graph.create_type(s)?;
        }
        let start = Instant::now();
        let report = load_ndjson(&graph, &data, LOAD_BATCH)?;
        let load_time = start.elapsed();
        let lines = data.lines().filter(|l| !l.trim().is_empty()).count();
        Ok(Loaded { db, graph, report, lines, load_time, _tmp: tmp })
    }
}

pub struct Loaded {
    pub db: Database,
    pub graph: Graph,
    pub report: LoadReport,
    pub lines: usize,
    pub load_time: Duration,
    _tmp: Option<tempfile::TempDir>,
}

impl Loaded {
    pub fn report_json(&self) -> J {
        let audit = self.db.store().audit();
        json!({
            "graph": self.graph.name(),
            "lines": self.lines,
            "vertices": self.report.vertices,
            "edges": self.report.edges,
            "error_count": self.report.errors.len(),
            "errors": self.report.errors,
            "allocator": {
                "regions": audit.regions,
                "live_objects": audit.live_objects,
                "live_bytes": audit.live_bytes,
            },
            "elapsed_ms": self.load_time.as_millis() as u64,
        })
    }
}

/// A report plus whether every sub-operation succeeded.
pub struct Outcome {
    pub report: J,
    pub ok: bool,
}

/// Inline JSON, `q1`..`q4`, or a path.
pub fn resolve_query(arg: &str) -> Result<String> {
    let t = arg.trim();
    if t.starts_with('{') {
        return Ok(t.to_string());
    }
    if let Some((_, q)) = film::QUERIES.iter().find(|(n, _)| n.eq_ignore_ascii_case(t)) {
        return Ok(q.to_string());
    }
    std::fs::read_to_string(t).with_context(|| format!("reading query file {t}"))
}

/// Full result of a query after draining continuation pages.
#[derive(Clone, Debug, PartialEq)]
pub struct Drained {
    pub count: Option<u64>,
    pub rows: Vec<J>,
    pub pages: usize,
    pub token: Option<String>,
}

impl Drained {
    pub fn to_json(&self) -> J {
        let mut m = serde_json::Map::new();
        match self.count {
            Some(c) => m.insert("count".into(), c.into()),
            None => m.insert("rows".into(), J::Array(self.rows.clone())),
        };
        m.insert("pages".into(), self.pages.into());
        if let Some(t) = &self.token {
            m.insert("continuation".into(), J::String(t.clone()));
        }
        J::Object(m)
    }
}

/// Runs `text` at `coord` and fetches up to `max_pages` continuation pages.
pub fn run_query(
    db: &Db,
    graph: &str,
    coord: NodeId,
    text: &str,
    opts: &ExecOptions,
    max_pages: usize,
) -> a1lite::Result<(Drained, QueryOutput)> {
    let out = execute(db, graph, coord, text, opts)?;
    let mut d = Drained {
        count: out.page.count,
        rows: out.page.rows.clone(),
        pages: 1,
        token: out.page.token.clone(),
    };
    while d.pages <= max_pages {
        let Some(t) = d.token.take() else { break };
        let p = fetch_continuation(db, coord, &t)?;
        d.rows.extend(p.rows);
        d.token = p.token;
        d.pages += 1;
    }
    Ok((d, out))
}

pub fn metrics_json(out: &QueryOutput) -> J {
    let mut m = serde_json::to_value(&out.metrics).unwrap();
    m["local_fraction"] = json!(out.metrics.local_fraction());
    m
}

/// Vertex pks and `[src, type, dst]` edges of an export, with string pks unquoted.
pub fn export_json(x: &GraphExport) -> J {
    let pk = |s: &str| match serde_json::from_str::<J>(s) {
        Ok(J::String(v)) => J::String(v),
        Ok(other) => other,
        Err(_) => J::String(s.to_string()),
    };
    let vertices: Vec<J> = x.vertices.keys().map(|(_, p)| pk(p)).collect();
    let edges: Vec<J> = x.edges.iter().map(|(_, s, et, _, d)| json!([pk(s), et, pk(d)])).collect();
    json!({"vertices": vertices, "edges": edges})
}

/// Differences between an expected and an actual `{"vertices", "edges"}` pair.
pub fn diff_state(want: &J, got: &J) -> Vec<String> {
    let mut out = Vec::new();
    for key in ["vertices", "edges"] {
        let set = |v: &J| -> std::collections::BTreeSet<String> {
            v[key].as_array().map(|a| a.iter().map(|x| x.to_string()).collect()).unwrap_or_default()
        };
        if want.get(key).is_none() {
            continue;
        }
        let (w, g) = (set(want), set(got));
        for m in w.difference(&g) {
            out.push(format!("missing {key} {m}"));
        }
        for m in g.difference(&w) {
            out.push(format!("unexpected {key} {m}"));
        }
    }
    out
}

pub fn recover_into_fresh(cfg: &CliConfig, path: &Path, graph: &str, mode: RecoveryMode) -> Result<(Database, J)> {
    let durable = DurableStore::open(path)?;
    let db = cfg.open_db(None)?;
    let report = recover(&db, graph, &durable, mode)?;
    let g = db.graph(graph)?;
    let state = export_json(&g.export(db.coordinator())?);
    let mut r = serde_json::to_value(&report)?;
    r["state"] = state;
    Ok((db, r))
}

pub fn run(cli: &Cli) -> Result<Outcome> {
    let cfg = CliConfig::from_cli(cli)?;
    match &cli.command {
        Command::Load => {
            let l = cfg.load()?;
            let ok = l.report.errors.is_empty();
            Ok(Outcome { report: l.report_json(), ok })
        }
        Command::Query { query, pages, coordinator, page_size, ship_min } => {
            let text = resolve_query(query)?;
            let l = cfg.load()?;
            let coord = NodeId(coordinator.unwrap_or(l.db.coordinator().0));
            let opts = ExecOptions { ship_min: *ship_min, page_size: *page_size, budget: None };
            let (d, out) = run_query(&l.db, l.graph.name(), coord, &text, &opts, *pages)?;
            let mut r = d.to_json();
            r["metrics"] = metrics_json(&out);
            Ok(Outcome { report: r, ok: l.report.errors.is_empty() })
        }
        Command::Chaos { scenario } => {
            let text = std::fs::read_to_string(scenario).with_context(|| format!("reading {}", scenario.display()))?;
            let s: Scenario = serde_json::from_str(&text).context("scenario json")?;
            let report = run_scenario(&cfg, &s)?;
            let ok = report.failures.is_empty();
            Ok(Outcome { report: report.to_json(), ok })
        }
        Command::Recover { mode, expect } => {
            let mode = RecoveryMode::parse(mode).ok_or_else(|| anyhow!("bad --mode {mode:?}"))?;
            let dir = cfg.durable_dir.as_ref().ok_or_else(|| anyhow!("recover needs --durable-dir"))?;
            let graph = cfg.graph.clone().ok_or_else(|| anyhow!("recover needs --graph"))?;
            let path = dir.join(format!("{graph}.dr"));
            if !path.exists() {
                bail!("no durable tables at {}", path.display());
            }
            let (_db, mut r) = recover_into_fresh(&cfg, &path, &graph, mode)?;
            let mut ok = true;
            if let Some(e) = expect {
                let want: J = serde_json::from_str(&std::fs::read_to_string(e)?)?;
                let diff = diff_state(&want, &r["state"]);
                ok = diff.is_empty();
                r["diff"] = json!(diff);
            }
            Ok(Outcome { report: r, ok })
        }
        Command::Bench { query, qps, duration, clients } => {
            let text = resolve_query(query)?;
            let l = cfg.load()?;
            let bc = BenchConfig {
                query: text,
                qps: *qps,
                duration: Duration::from_secs_f64(duration.max(0.0)),
                clients: *clients,
            };
            let report = run_bench(&l.db, l.graph.name(), &bc, None)?;
            let ok = report.incorrect == 0 && report.errors == 0 && l.report.errors.is_empty();
            Ok(Outcome { report: serde_json::to_value(&report)?, ok })
        }
        Command::Metrics { query } => {
            let l = cfg.load()?;
            let queries: Vec<(String, String)> = if query.is_empty() {
                if cfg.data.is_some() {
                    Vec::new()
                } else {
                    film::QUERIES.iter().map(|(n, q)| (n.to_string(), q.to_string())).collect()
                }
            } else {
                query.iter().map(|q| Ok((q.clone(), resolve_query(q)?))).collect::<Result<_>>()?
            };
            let mut per_query = Vec::new();
            for (name, text) in &queries {
                let (d, out) =
                    run_query(&l.db, l.graph.name(), l.db.coordinator(), text, &ExecOptions::default(), usize::MAX)?;
                let mut r = d.to_json();
                if d.count.is_none() {
                    r["rows"] = json!(d.rows.len());
                }
                r["name"] = json!(name);
                r["metrics"] = metrics_json(&out);
                per_query.push(r);
            }
            let mut cluster = serde_json::to_value(l.db.cluster().read_metrics())?;
            cluster.as_object_mut().unwrap().remove("queries");
            let report = json!({"load": l.report_json(), "cluster": cluster, "queries": per_query});
            Ok(Outcome { report, ok: l.report.errors.is_empty() })
        }
        Command::Dataset { dir } => {
            std::fs::create_dir_all(dir)?;
            let (data, vertices, edges) = film::dataset();
            std::fs::write(dir.join("schema.json"), film::schema_json())?;
            std::fs::write(dir.join("film.ndjson"), data)?;
            for (n, q) in film::QUERIES {
                std::fs::write(dir.join(format!("{}.json", n.to_lowercase())), q)?;
            }
            Ok(Outcome { report: json!({"dir": dir, "vertices": vertices, "edges": edges}), ok: true })
        }
    }
}
