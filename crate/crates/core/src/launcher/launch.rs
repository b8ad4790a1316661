use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::{Child, Command};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::config::{RunConfig, TransportKind};
use super::LaunchError;
use crate::kvstore::{KvStore, Server, ServerReport};
use crate::trainer::{aggregate, run_worker, train_inproc, write_metrics, RunOutcome, TrainError, WorkerOutcome};
use crate::transport::tcp::{bind_scheduler, connect_node, rendezvous_scheduler};
use crate::transport::{tags, Endpoint, NodeId, Role, TransportError};

pub const ENV_ROLE: &str = "HPS_ROLE";
pub const ENV_RANK: &str = "HPS_RANK";
pub const ENV_SCHED_ADDR: &str = "HPS_SCHED_ADDR";
pub const ENV_CONFIG: &str = "HPS_CONFIG";

/// What a child sends the scheduler when it finishes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum ChildReport {
    Worker(WorkerOutcome),
    Server(ServerReport),
    Failed { divergence: bool, message: String },
}

impl ChildReport {
    pub fn encode(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("report serializes")
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, serde_json::Error> {
        serde_json::from_slice(bytes)
    }
}

/// Everything a child needs to join a run.
#[derive(Debug, Clone)]
pub struct ChildSpec {
    pub id: NodeId,
    pub sched_addr: String,
    pub config: RunConfig,
}

impl ChildSpec {
    pub fn env(&self) -> Vec<(&'static str, String)> {
        vec![
            (ENV_ROLE, self.id.role.name().to_string()),
            (ENV_RANK, self.id.rank.to_string()),
            (ENV_SCHED_ADDR, self.sched_addr.clone()),
            (ENV_CONFIG, self.config.format()),
        ]
    }

    /// Reads a spec back from `HPS_*` variables. `None` when this process
    /// was not started as a child.
    pub fn from_env() -> Option<Result<Self, LaunchError>> {
        let role = std::env::var(ENV_ROLE).ok()?;
        Some(Self::from_vars(|k| std::env::var(k).ok(), &role))
    }

    fn from_vars(get: impl Fn(&str) -> Option<String>, role: &str) -> Result<Self, LaunchError> {
        let missing = |k: &str| LaunchError::Config(format!("{k} is not set"));
        let role: Role = role.parse().map_err(LaunchError::Config)?;
        let rank: u32 = get(ENV_RANK)
            .ok_or_else(|| missing(ENV_RANK))?
            .parse()
            .map_err(|e| LaunchError::Config(format!("{ENV_RANK}: {e}")))?;
        let sched_addr = get(ENV_SCHED_ADDR).ok_or_else(|| missing(ENV_SCHED_ADDR))?;
        let config = RunConfig::parse(&get(ENV_CONFIG).ok_or_else(|| missing(ENV_CONFIG))?)?;
        let id = match role {
            Role::Server => NodeId::server(rank),
            Role::Worker => NodeId::worker(rank),
            Role::Scheduler => return Err(LaunchError::Config("the scheduler is not spawned".into())),
        };
        Ok(ChildSpec { id, sched_addr, config })
    }
}

/// Body of a spawned server or worker: join the run, do the work, report.
pub fn run_child(spec: &ChildSpec) -> Result<(), LaunchError> {
    let cfg = &spec.config;
    let topo = cfg.topology();
    let ep = Arc::new(connect_node(spec.id, &spec.sched_addr, &topo, cfg.timeout())?);
    let result = match spec.id.role {
        Role::Server => Server::new(ep.clone(), &topo, cfg.mode, cfg.timeout())
            .run()
            .map(ChildReport::Server)
            .map_err(TrainError::from),
        _ => cfg.dataset.load().and_then(|data| {
            let kv = KvStore::new(ep.clone(), topo, cfg.mode, super::kv_options(cfg))?;
            run_worker(&kv, cfg, &data).map(ChildReport::Worker)
        }),
    };
    let report = match &result {
        Ok(r) => r.clone(),
        Err(e) => ChildReport::Failed {
            divergence: e.is_divergence(),
            message: e.to_string(),
        },
    };
    // the scheduler may already be gone if another child failed first
    if let Err(e) = ep.send(NodeId::SCHEDULER, tags::WORKER_REPORT, &report.encode()) {
        log::warn!("{}: could not report to scheduler: {e}", spec.id);
    }
    ep.close();
    result.map(|_| ()).map_err(LaunchError::from)
}

/// A started child that can be waited on.
pub trait ChildHandle: Send {
    /// Blocks until the child exits; `Err` carries a crash description.
    fn wait(self: Box<Self>) -> Result<(), String>;
    fn kill(&mut self);
}

/// Starts server and worker children.
pub trait Spawner {
    fn spawn(&self, spec: ChildSpec) -> std::io::Result<Box<dyn ChildHandle>>;
}

/// Runs every child as a thread of the launching process.
pub struct ThreadSpawner;

struct ThreadChild(Option<JoinHandle<Result<(), LaunchError>>>);

impl ChildHandle for ThreadChild {
    fn wait(mut self: Box<Self>) -> Result<(), String> {
        match self.0.take().expect("waited once").join() {
            Ok(Ok(())) => Ok(()),
            Ok(Err(e)) => Err(format!("exit {}: {e}", e.exit_code())),
            Err(_) => Err("thread panicked".into()),
        }
    }

    fn kill(&mut self) {
        // threads cannot be killed; detach so the launcher is not held up
        self.0.take();
    }
}

impl Spawner for ThreadSpawner {
    fn spawn(&self, spec: ChildSpec) -> std::io::Result<Box<dyn ChildHandle>> {
        let h = std::thread::Builder::new()
            .name(format!("child-{}", spec.id))
            .spawn(move || run_child(&spec))?;
        Ok(Box::new(ThreadChild(Some(h))))
    }
}

/// Runs every child as a separate OS process of `exe`, which must call
/// [`child_main`] when `HPS_ROLE` is set.
pub struct ProcessSpawner {
    pub exe: PathBuf,
}

impl ProcessSpawner {
    pub fn current_exe() -> std::io::Result<Self> {
        Ok(ProcessSpawner {
            exe: std::env::current_exe()?,
        })
    }
}

struct ProcessChild(Child);

impl ChildHandle for ProcessChild {
    fn wait(mut self: Box<Self>) -> Result<(), String> {
        match self.0.wait() {
            Ok(s) if s.success() => Ok(()),
            Ok(s) => Err(format!("process {} exited with {s}", self.0.id())),
            Err(e) => Err(e.to_string()),
        }
    }

    fn kill(&mut self) {
        let _ = self.0.kill();
    }
}

impl Spawner for ProcessSpawner {
    fn spawn(&self, spec: ChildSpec) -> std::io::Result<Box<dyn ChildHandle>> {
        let mut cmd = Command::new(&self.exe);
        for (k, v) in spec.env() {
            cmd.env(k, v);
        }
        Ok(Box::new(ProcessChild(cmd.spawn()?)))
    }
}

/// Entry point for a spawned child process; returns the exit code.
pub fn child_main(spec: Result<ChildSpec, LaunchError>) -> i32 {
    match spec.and_then(|s| run_child(&s)) {
        Ok(()) => 0,
        Err(e) => {
            log::error!("{e}");
            e.exit_code()
        }
    }
}

/// Runs a training job as configured and writes metrics to `cfg.out`.
pub fn launch(cfg: &RunConfig) -> Result<RunOutcome, LaunchError> {
    match cfg.transport {
        TransportKind::Inproc => launch_with(cfg, None),
        TransportKind::Tcp => launch_with(cfg, Some(&ProcessSpawner::current_exe()?)),
    }
}

/// Like [`launch`], with an explicit spawner for the TCP transport.
pub fn launch_with(cfg: &RunConfig, spawner: Option<&dyn Spawner>) -> Result<RunOutcome, LaunchError> {
    cfg.validate()?;
    let outcome = match (cfg.transport, spawner) {
        (TransportKind::Inproc, _) => train_inproc(cfg)?,
        (TransportKind::Tcp, Some(s)) => launch_tcp(cfg, s)?,
        (TransportKind::Tcp, None) => launch_tcp(cfg, &ProcessSpawner::current_exe()?)?,
    };
    if let Some(path) = &cfg.out {
        write_metrics(BufWriter::new(File::create(path)?), &outcome.metrics)?;
    }
    Ok(outcome)
}

fn launch_tcp(cfg: &RunConfig, spawner: &dyn Spawner) -> Result<RunOutcome, LaunchError> {
    let topo = cfg.topology();
    // the scheduler is up before any child starts
    let listener = bind_scheduler(&cfg.scheduler_addr)?;
    let sched_addr = listener.local_addr()?.to_string();
    log::info!("scheduler listening on {sched_addr}");

    let mut children: Vec<(NodeId, Box<dyn ChildHandle>)> = Vec::new();
    for id in topo.nodes().into_iter().filter(|n| n.role != Role::Scheduler) {
        let spec = ChildSpec {
            id,
            sched_addr: sched_addr.clone(),
            config: cfg.clone(),
        };
        match spawner.spawn(spec) {
            Ok(h) => children.push((id, h)),
            Err(e) => {
                kill_all(&mut children);
                return Err(LaunchError::Child(format!("could not start {id}: {e}")));
            }
        }
    }

    let ep = match rendezvous_scheduler(listener, &topo, cfg.timeout()) {
        Ok(ep) => ep,
        Err(e) => {
            kill_all(&mut children);
            return Err(e.into());
        }
    };

    let ids: Vec<NodeId> = children.iter().map(|(id, _)| *id).collect();
    let (reports, failures, diverged) = collect_reports(&ep, &ids);
    ep.close();
    if !failures.is_empty() {
        kill_all(&mut children);
        let msg = failures.join("; ");
        return Err(if diverged {
            LaunchError::Divergence(msg)
        } else {
            LaunchError::Child(msg)
        });
    }
    let mut crashes = Vec::new();
    for (id, h) in children {
        if let Err(e) = h.wait() {
            crashes.push(format!("{id}: {e}"));
        }
    }
    if !crashes.is_empty() {
        return Err(LaunchError::Child(crashes.join("; ")));
    }

    let mut workers = Vec::new();
    let mut servers = Vec::new();
    for r in reports.into_values() {
        match r {
            ChildReport::Worker(w) => workers.push(w),
            ChildReport::Server(s) => servers.push(s),
            ChildReport::Failed { .. } => unreachable!("failures returned above"),
        }
    }
    Ok(RunOutcome {
        metrics: aggregate(cfg, &workers),
        workers,
        servers,
    })
}

const POLL: Duration = Duration::from_millis(50);

/// Gathers one report per child. Stops at the first failure, including a
/// child whose link drops before it reports.
fn collect_reports(ep: &Endpoint, ids: &[NodeId]) -> (BTreeMap<NodeId, ChildReport>, Vec<String>, bool) {
    let mut reports = BTreeMap::new();
    let mut failures = Vec::new();
    let mut diverged = false;
    while reports.len() < ids.len() && failures.is_empty() {
        match ep.recv_where(POLL, None, |f| f.tag == tags::WORKER_REPORT) {
            Ok(f) => match ChildReport::decode(&f.payload) {
                Ok(ChildReport::Failed { divergence, message }) => {
                    diverged |= divergence;
                    failures.push(format!("{}: {message}", f.src));
                }
                Ok(r) => {
                    reports.insert(f.src, r);
                }
                Err(e) => failures.push(format!("{}: bad report: {e}", f.src)),
            },
            Err(TransportError::Timeout(_)) => {
                for id in ids.iter().filter(|id| !reports.contains_key(*id)) {
                    if let Err(TransportError::Disconnected(_)) =
                        ep.recv_from(*id, tags::WORKER_REPORT, Duration::ZERO)
                    {
                        failures.push(format!("{id}: exited without reporting"));
                    }
                }
            }
            Err(e) => failures.push(format!("scheduler: {e}")),
        }
    }
    (reports, failures, diverged)
}

fn kill_all(children: &mut [(NodeId, Box<dyn ChildHandle>)]) {
    for (_, h) in children.iter_mut() {
        h.kill();
    }
}

impl From<TransportError> for LaunchError {
    fn from(e: TransportError) -> Self {
        match e {
            TransportError::RendezvousTimeout(m) => LaunchError::Rendezvous(m),
            other => LaunchError::Child(other.to_string()),
        }
    }
}
