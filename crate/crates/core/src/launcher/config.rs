//! Flat `key=value` run configuration.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Duration;

use thiserror::Error;

use crate::kvstore::StoreMode;
use crate::trainer::{DatasetSpec, ModelKind};
use crate::transport::Topology;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("unknown key '{0}'")]
    UnknownKey(String),
    #[error("bad value for {key}: {msg}")]
    BadValue { key: String, msg: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    Sgd,
    Asgd,
    Esgd,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Sgd => "sgd",
            Algorithm::Asgd => "asgd",
            Algorithm::Esgd => "esgd",
        }
    }

    pub fn supports(self, mode: StoreMode) -> bool {
        match self {
            Algorithm::Sgd => mode.is_sync(),
            Algorithm::Asgd | Algorithm::Esgd => matches!(mode, StoreMode::Async | StoreMode::AsyncMpi),
        }
    }
}

impl FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(Algorithm::Sgd),
            "asgd" => Ok(Algorithm::Asgd),
            "esgd" => Ok(Algorithm::Esgd),
            _ => Err(format!("unknown algorithm '{s}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportKind {
    Inproc,
    Tcp,
}

impl FromStr for TransportKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "inproc" => Ok(TransportKind::Inproc),
            "tcp" => Ok(TransportKind::Tcp),
            _ => Err(format!("unknown transport '{s}'")),
        }
    }
}

impl TransportKind {
    pub fn name(self) -> &'static str {
        match self {
            TransportKind::Inproc => "inproc",
            TransportKind::Tcp => "tcp",
        }
    }
}

/// Everything needed to launch one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub run_id: String,
    pub workers: u32,
    pub servers: u32,
    pub clients: u32,
    pub mode: StoreMode,
    pub algorithm: Algorithm,
    pub rings: usize,
    pub lanes: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub alpha: f64,
    pub interval: u64,
    pub epochs: usize,
    pub seed: u64,
    pub model: ModelKind,
    pub dataset: DatasetSpec,
    pub transport: TransportKind,
    pub scheduler_addr: String,
    pub timeout_ms: u64,
    pub out: Option<PathBuf>,
    pub cost_alpha: f64,
    pub cost_beta: f64,
    pub cost_gamma: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run_id: "run".into(),
            workers: 4,
            servers: 1,
            clients: 2,
            mode: StoreMode::SyncMpi,
            algorithm: Algorithm::Sgd,
            rings: 2,
            lanes: 2,
            batch_size: 128,
            lr: 0.5,
            alpha: 0.5,
            interval: 64,
            epochs: 20,
            seed: 1,
            model: ModelKind::Logistic,
            dataset: DatasetSpec::default(),
            transport: TransportKind::Inproc,
            scheduler_addr: "127.0.0.1:0".into(),
            timeout_ms: 60_000,
            out: None,
            cost_alpha: 5e-6,
            cost_beta: 1e-9,
            cost_gamma: 2.5e-10,
        }
    }
}

pub const KEYS: [&str; 23] = [
    "run_id",
    "workers",
    "servers",
    "clients",
    "mode",
    "algorithm",
    "rings",
    "lanes",
    "batch_size",
    "lr",
    "alpha",
    "interval",
    "epochs",
    "seed",
    "model",
    "dataset",
    "transport",
    "scheduler_addr",
    "timeout_ms",
    "out",
    "cost_alpha",
    "cost_beta",
    "cost_gamma",
];

fn num<T: FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.into(),
        msg: e.to_string(),
    })
}

impl RunConfig {
    pub fn topology(&self) -> Topology {
        Topology {
            servers: self.servers,
            workers: self.workers,
            clients: self.clients,
        }
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }

    pub fn workers_per_client(&self) -> u32 {
        self.workers / self.clients.max(1)
    }

    /// Samples behind one parameter update.
    pub fn mini_batch(&self) -> usize {
        let b = self.batch_size;
        match (self.algorithm, self.mode) {
            (Algorithm::Sgd, _) => self.workers as usize * b,
            (_, StoreMode::AsyncMpi) => self.workers_per_client() as usize * b,
            _ => b,
        }
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        let bad = |msg: String| ConfigError::BadValue {
            key: key.into(),
            msg,
        };
        match key {
            "run_id" => self.run_id = v.to_string(),
            "workers" => self.workers = num(key, v)?,
            "servers" => self.servers = num(key, v)?,
            "clients" => self.clients = num(key, v)?,
            "mode" => self.mode = v.parse().map_err(bad)?,
            "algorithm" => self.algorithm = v.parse().map_err(bad)?,
            "rings" => self.rings = num(key, v)?,
            "lanes" => self.lanes = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "lr" => self.lr = num(key, v)?,
            "alpha" => self.alpha = num(key, v)?,
            "interval" => self.interval = num(key, v)?,
            "epochs" => self.epochs = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "model" => self.model = v.parse().map_err(bad)?,
            "dataset" => self.dataset = v.parse().map_err(bad)?,
            "transport" => self.transport = v.parse().map_err(bad)?,
            "scheduler_addr" => self.scheduler_addr = v.to_string(),
            "timeout_ms" => self.timeout_ms = num(key, v)?,
            "out" => self.out = (!v.is_empty()).then(|| PathBuf::from(v)),
            "cost_alpha" => self.cost_alpha = num(key, v)?,
            "cost_beta" => self.cost_beta = num(key, v)?,
            "cost_gamma" => self.cost_gamma = num(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    /// Parses `key=value` lines on top of the defaults. Blank lines and
    /// lines starting with `#` are skipped. The result is validated.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                msg: "expected key=value".into(),
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn format(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: &dyn std::fmt::Display| {
            let _ = writeln!(s, "{k}={v}");
        };
        put("run_id", &self.run_id);
        put("workers", &self.workers);
        put("servers", &self.servers);
        put("clients", &self.clients);
        put("mode", &self.mode);
        put("algorithm", &self.algorithm.name());
        put("rings", &self.rings);
        put("lanes", &self.lanes);
        put("batch_size", &self.batch_size);
        put("lr", &self.lr);
        put("alpha", &self.alpha);
        put("interval", &self.interval);
        put("epochs", &self.epochs);
        put("seed", &self.seed);
        put("model", &self.model);
        put("dataset", &self.dataset);
        put("transport", &self.transport.name());
        put("scheduler_addr", &self.scheduler_addr);
        put("timeout_ms", &self.timeout_ms);
        put("out", &self.out.as_ref().map(|p| p.display().to_string()).unwrap_or_default());
        put("cost_alpha", &self.cost_alpha);
        put("cost_beta", &self.cost_beta);
        put("cost_gamma", &self.cost_gamma);
        s
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: String| Err(ConfigError::Invalid(m));
        if self.run_id.is_empty()
            || !self
                .run_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
        {
            return fail(format!("run_id '{}' must be non-empty [A-Za-z0-9._-]", self.run_id));
        }
        if self.workers == 0 || self.clients == 0 {
            return fail("workers and clients must be positive".into());
        }
        if !self.workers.is_multiple_of(self.clients) {
            return fail(format!("{} clients do not divide {} workers", self.clients, self.workers));
        }
        if (self.servers == 0) != (self.mode == StoreMode::PureMpi) {
            return fail("servers must be 0 exactly when mode is pure-mpi".into());
        }
        if self.mode == StoreMode::PureMpi && self.clients != 1 {
            return fail("pure-mpi runs as a single client".into());
        }
        if !self.algorithm.supports(self.mode) {
            return fail(format!("{} cannot run in {} mode", self.algorithm.name(), self.mode));
        }
        if self.rings == 0 || self.lanes == 0 || self.batch_size == 0 || self.interval == 0 {
            return fail("rings, lanes, batch_size and interval must be positive".into());
        }
        if self.lanes > self.batch_size {
            return fail("lanes must not exceed batch_size".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return fail("lr must be positive".into());
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return fail("alpha must lie in (0, 1]".into());
        }
        if self.timeout_ms == 0 {
            return fail("timeout_ms must be positive".into());
        }
        if [self.cost_alpha, self.cost_beta, self.cost_gamma]
            .iter()
            .any(|c| !c.is_finite() || *c < 0.0)
        {
            return fail("cost model constants must be finite and non-negative".into());
        }
        if self.scheduler_addr.is_empty() || self.scheduler_addr.contains(char::is_whitespace) {
            return fail("scheduler_addr must be host:port".into());
        }
        if let Some(p) = &self.out {
            if p.to_string_lossy().contains('\n') {
                return fail("out path must be a single line".into());
            }
        }
        self.dataset.validate().map_err(ConfigError::Invalid)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn paper_cluster_shape() {
        let cfg = RunConfig::parse("workers=12\nclients=2\nservers=2\n").unwrap();
        assert_eq!(cfg.workers_per_client(), 6);
        let cfg = RunConfig::parse("workers=4\nclients=4\nmode=sync\n").unwrap();
        assert_eq!(cfg.workers_per_client(), 1);
        assert!(matches!(
            RunConfig::parse("workers=5\nclients=2"),
            Err(ConfigError::Invalid(_))
        ));
    }

    #[test]
    fn rejects_inconsistent_settings() {
        for text in [
            "mode=pure-mpi",
            "servers=0",
            "mode=pure-mpi\nservers=0",
            "mode=async\nalgorithm=sgd",
            "algorithm=esgd",
            "alpha=0",
            "lanes=0",
            "batch_size=1\nlanes=2",
            "bogus=1",
            "workers",
            "workers=-1",
            "run_id=a b",
        ] {
            assert!(RunConfig::parse(text).is_err(), "{text}");
        }
        assert!(RunConfig::parse("mode=pure-mpi\nservers=0\nclients=1").is_ok());
        assert!(RunConfig::parse("# comment\n\nmode=async-mpi\nalgorithm=esgd").is_ok());
    }

    #[test]
    fn mini_batch_follows_algorithm() {
        let mut c = RunConfig {
            workers: 6,
            clients: 2,
            batch_size: 10,
            ..RunConfig::default()
        };
        assert_eq!(c.mini_batch(), 60);
        c.mode = StoreMode::AsyncMpi;
        c.algorithm = Algorithm::Esgd;
        assert_eq!(c.mini_batch(), 30);
        c.mode = StoreMode::Async;
        c.algorithm = Algorithm::Asgd;
        assert_eq!(c.mini_batch(), 10);
    }

    fn arb_config() -> impl Strategy<Value = RunConfig> {
        (
            (1u32..5, 1u32..5, 0usize..4, any::<bool>()),
            (1usize..5, 1usize..3, 4usize..300, 1e-4f64..10.0, 0.01f64..=1.0),
            (1u64..200, 0usize..50, any::<u64>(), 1u64..1_000_000),
            ("[a-z0-9_.-]{1,12}", proptest::option::of("[a-z/]{1,12}\\.csv"), 0.0f64..1.0),
        )
            .prop_map(|((clients, per, m, mlp), (rings, lanes, batch, lr, alpha), (interval, epochs, seed, t), (id, out, c))| {
                let mode = [StoreMode::Sync, StoreMode::Async, StoreMode::SyncMpi, StoreMode::AsyncMpi][m];
                let algorithm = if mode.is_sync() { Algorithm::Sgd } else if seed % 2 == 0 { Algorithm::Asgd } else { Algorithm::Esgd };
                RunConfig {
                    run_id: id,
                    workers: clients * per,
                    clients,
                    servers: 1 + (seed % 3) as u32,
                    mode,
                    algorithm,
                    rings,
                    lanes,
                    batch_size: batch,
                    lr,
                    alpha,
                    interval,
                    epochs,
                    seed,
                    model: if mlp { ModelKind::Mlp { hidden: 1 + (seed % 64) as usize } } else { ModelKind::Logistic },
                    timeout_ms: t,
                    out: out.map(PathBuf::from),
                    cost_alpha: c,
                    cost_beta: c / 3.0,
                    ..RunConfig::default()
                }
            })
    }

    proptest! {
        #[test]
        fn parse_inverts_format(cfg in arb_config()) {
            prop_assert_eq!(RunConfig::parse(&cfg.format()).unwrap(), cfg);
        }

        #[test]
        fn parse_never_panics(text in "[a-z_=0-9.\n-]{0,80}") {
            let _ = RunConfig::parse(&text);
        }
    }
}
