//! Experiment runner: configuration, problem setup, orchestration over the
//! chosen transport, verdicts and CSV output.

use std::fmt::{self, Write as _};
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{
    dissvrg_master_run, dissvrg_worker_run, run_dissvrg_in_process, svrg_sequential, DisSvrgWorkerConfig,
    MiniBatchParams,
};
use crate::data::{self, DataError, Dataset, Partition, PartitionStrategy};
use crate::diagnostics::{self, DiagError};
use crate::engine::{
    master_run, run_in_process, worker_rng, worker_run, Combine, EngineError, HyperParams, MasterConfig, Monitor,
    RunOutcome, RunStatus, WorkerConfig,
};
use crate::model::{self, LossKind, ModelError, ModelVector};
use crate::protocol::{default_bind_addr, TcpMasterListener, TcpWorker, TransportError};

pub const CSV_HEADER: &str = "t,objective,dist_sq,msgs,bytes,wall_ms";

/// Relative reduction (of `||w - w*||^2`, or of `||grad P||` when `w*` is
/// unknown) that counts as converged.
pub const CONVERGED_RATIO: f64 = 1e-6;

const CONNECT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Scope,
    Svrg,
    Dissvrg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossChoice {
    Logistic,
    SmoothedHinge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionChoice {
    ShuffledUniform,
    Contiguous,
    LabelSorted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportChoice {
    Inproc,
    Tcp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Master,
    Worker,
}

/// Where instances come from: `toy_table1`, `synthetic_lr(n,d,seed)`, or a
/// path to an svmlight file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum DataSource {
    ToyTable1,
    SyntheticLr { n: usize, d: usize, seed: u64 },
    File(PathBuf),
}

impl FromStr for DataSource {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s == "toy_table1" {
            return Ok(DataSource::ToyTable1);
        }
        if let Some(args) = s.strip_prefix("synthetic_lr(").and_then(|r| r.strip_suffix(')')) {
            let parts: Vec<&str> = args.split(',').map(str::trim).collect();
            let bad = || ConfigError(format!("expected synthetic_lr(n,d,seed), got {s:?}"));
            if parts.len() != 3 {
                return Err(bad());
            }
            return Ok(DataSource::SyntheticLr {
                n: parts[0].parse().map_err(|_| bad())?,
                d: parts[1].parse().map_err(|_| bad())?,
                seed: parts[2].parse().map_err(|_| bad())?,
            });
        }
        if s.is_empty() {
            return Err(ConfigError("empty data source".into()));
        }
        Ok(DataSource::File(PathBuf::from(s)))
    }
}

impl TryFrom<String> for DataSource {
    type Error = ConfigError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<DataSource> for String {
    fn from(d: DataSource) -> String {
        d.to_string()
    }
}

impl fmt::Display for DataSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataSource::ToyTable1 => f.write_str("toy_table1"),
            DataSource::SyntheticLr { n, d, seed } => write!(f, "synthetic_lr({n},{d},{seed})"),
            DataSource::File(p) => write!(f, "{}", p.display()),
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
#[error("config error: {0}")]
pub struct ConfigError(pub String);

/// Parses a snake_case choice such as `average_iterate` or `tcp`.
pub fn parse_choice<T: DeserializeOwned>(s: &str) -> Result<T, ConfigError> {
    serde_json::from_value(serde_json::Value::String(s.trim().to_string()))
        .map_err(|e| ConfigError(format!("{s:?}: {e}")))
}

/// A run description. Unset fields take defaults at [`ExperimentConfig::resolve`]
/// time, which depend on the data source.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub algorithm: Option<Algorithm>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<DataSource>,
    /// Per-instance unit-norm scaling of file data. Builtins are already
    /// normalized.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub normalize: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossChoice>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub partition: Option<PartitionChoice>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bigm: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bigt: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub combine: Option<Combine>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub transport: Option<TransportChoice>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bind: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Path to a file of whitespace or comma separated coordinates, or
    /// `none`. When unset, `w*` is solved for.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wstar: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub role: Option<Role>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub worker_id: Option<u32>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text)
            .map_err(|e| ConfigError(format!("line {} column {}: {e}", e.line(), e.column())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(|e| ExperimentError::Io(format!("{}: {e}", path.display())))?;
        Ok(Self::from_json(&text)?)
    }

    /// Fields set in `other` replace those in `self`.
    pub fn overridden_by(mut self, other: &ExperimentConfig) -> Self {
        macro_rules! take {
            ($($f:ident),*) => { $( if other.$f.is_some() { self.$f = other.$f.clone(); } )* };
        }
        take!(
            algorithm, data, normalize, loss, p, partition, eta, c, bigm, bigt, lambda, batch, combine, seed,
            transport, bind, out, wstar, role, worker_id
        );
        self
    }

    /// Fills in defaults and checks consistency.
    pub fn resolve(&self) -> Result<Resolved, ConfigError> {
        let algorithm = self.algorithm.unwrap_or(Algorithm::Scope);
        let data = self
            .data
            .clone()
            .ok_or_else(|| ConfigError("no data source given".into()))?;
        let toy = data == DataSource::ToyTable1;
        let seed = self.seed.unwrap_or(1);
        let p = if toy {
            if matches!(self.p, Some(p) if p != 2) {
                log::warn!("toy_table1 runs with p = 2");
            }
            2
        } else {
            self.p.unwrap_or(4)
        };
        if p == 0 {
            return Err(ConfigError("p must be at least 1".into()));
        }
        let lambda = self.lambda.unwrap_or(if toy { 0.0 } else { 1e-4 });
        let hp = HyperParams {
            eta: self.eta.unwrap_or(if toy { 1e-5 } else { 0.1 }),
            c: self.c.unwrap_or(lambda * 1e-2),
            inner_steps: self.bigm.unwrap_or(if toy { 4000 } else { 0 }),
            outer_rounds: self.bigt.unwrap_or(if toy { 100 } else { 20 }),
            lambda,
            combine: self.combine.unwrap_or(Combine::LastIterate),
            seed,
        };
        if !(hp.eta > 0.0 && hp.eta.is_finite()) {
            return Err(ConfigError(format!("eta must be positive, got {}", hp.eta)));
        }
        if !(hp.c >= 0.0 && hp.c.is_finite()) {
            return Err(ConfigError(format!("c must be >= 0, got {}", hp.c)));
        }
        if !(hp.lambda >= 0.0 && hp.lambda.is_finite()) {
            return Err(ConfigError(format!("lambda must be >= 0, got {}", hp.lambda)));
        }
        if self.bigm == Some(0) {
            return Err(ConfigError("bigm must be at least 1".into()));
        }
        let batch = match (algorithm, self.batch) {
            (Algorithm::Dissvrg, None) => return Err(ConfigError("dissvrg requires batch".into())),
            (Algorithm::Dissvrg, Some(0)) => return Err(ConfigError("batch must be at least 1".into())),
            (Algorithm::Dissvrg, Some(b)) => Some(MiniBatchParams { batch_size: b }),
            (_, _) => None,
        };
        let partition = if toy {
            PartitionStrategy::Contiguous
        } else {
            match self.partition.unwrap_or(PartitionChoice::ShuffledUniform) {
                PartitionChoice::ShuffledUniform => PartitionStrategy::ShuffledUniform { seed },
                PartitionChoice::Contiguous => PartitionStrategy::Contiguous,
                PartitionChoice::LabelSorted => PartitionStrategy::LabelSorted,
            }
        };
        let transport = self.transport.unwrap_or(TransportChoice::Inproc);
        if self.role.is_some() && transport != TransportChoice::Tcp {
            return Err(ConfigError("role requires tcp transport".into()));
        }
        if self.role.is_some() && algorithm == Algorithm::Svrg {
            return Err(ConfigError("svrg runs in a single process".into()));
        }
        let worker_id = match (self.role, self.worker_id) {
            (Some(Role::Worker), None) => return Err(ConfigError("worker role requires worker_id".into())),
            (Some(Role::Worker), Some(k)) if k == 0 || k > p => {
                return Err(ConfigError(format!("worker_id {k} not in 1..={p}")))
            }
            (_, k) => k,
        };
        let wstar = match self.wstar.as_deref().map(str::trim) {
            None | Some("solve") => WstarSource::Solve,
            Some("none") => WstarSource::Unknown,
            Some(path) => WstarSource::File(PathBuf::from(path)),
        };
        Ok(Resolved {
            algorithm,
            data,
            normalize: self.normalize.unwrap_or(true),
            loss: self.loss.unwrap_or(LossChoice::Logistic),
            p,
            partition,
            hp,
            batch,
            transport,
            bind: self.bind.clone(),
            out: self.out.clone(),
            wstar,
            role: self.role,
            worker_id,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum WstarSource {
    Solve,
    Unknown,
    File(PathBuf),
}

/// A checked configuration with every default applied. `hp.inner_steps`
/// of zero means "one pass over the local shard" and is fixed once the data
/// is loaded.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub algorithm: Algorithm,
    pub data: DataSource,
    pub normalize: bool,
    pub loss: LossChoice,
    pub p: u32,
    pub partition: PartitionStrategy,
    pub hp: HyperParams,
    pub batch: Option<MiniBatchParams>,
    pub transport: TransportChoice,
    pub bind: Option<String>,
    pub out: Option<PathBuf>,
    pub wstar: WstarSource,
    pub role: Option<Role>,
    pub worker_id: Option<u32>,
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("diverged: {0}")]
    Diverged(String),
}

impl ExperimentError {
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Diverged(_) => 2,
            ExperimentError::Config(_) => 3,
            ExperimentError::Io(_) => 4,
            ExperimentError::Protocol(_) => 5,
        }
    }
}

impl From<DataError> for ExperimentError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::BadWorkerCount { .. } => ExperimentError::Config(ConfigError(e.to_string())),
            other => ExperimentError::Io(other.to_string()),
        }
    }
}

impl From<ModelError> for ExperimentError {
    fn from(e: ModelError) -> Self {
        ExperimentError::Config(ConfigError(e.to_string()))
    }
}

impl From<DiagError> for ExperimentError {
    fn from(e: DiagError) -> Self {
        match e {
            DiagError::Model(m) => m.into(),
            other => ExperimentError::Config(ConfigError(other.to_string())),
        }
    }
}

impl From<TransportError> for ExperimentError {
    fn from(e: TransportError) -> Self {
        match e {
            TransportError::Io(io) => ExperimentError::Io(io.to_string()),
            other => ExperimentError::Protocol(other.to_string()),
        }
    }
}

impl From<EngineError> for ExperimentError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Model(m) => m.into(),
            EngineError::Transport(t) => t.into(),
            EngineError::InvalidParams(s) => ExperimentError::Config(ConfigError(s)),
            EngineError::Diverged { .. } => ExperimentError::Diverged(e.to_string()),
            other => ExperimentError::Protocol(other.to_string()),
        }
    }
}

/// Everything needed to run: data, shards, loss and parameters.
#[derive(Debug, Clone)]
pub struct Problem {
    pub cfg: Resolved,
    pub dataset: Dataset,
    pub kind: LossKind,
    pub partitions: Vec<Partition>,
    pub hp: HyperParams,
    pub w0: ModelVector,
    pub w_star: Option<ModelVector>,
}

impl Problem {
    pub fn load(cfg: &Resolved) -> Result<Self, ExperimentError> {
        let (dataset, kind) = match &cfg.data {
            DataSource::ToyTable1 => data::toy_table1(),
            DataSource::SyntheticLr { n, d, seed } => (data::synthetic_lr(*n, *d, *seed)?, cfg.loss_kind()),
            DataSource::File(path) => {
                let file = fs::File::open(path).map_err(|e| ExperimentError::Io(format!("{}: {e}", path.display())))?;
                let ds = data::parse_svmlight(BufReader::new(file), None)?;
                (if cfg.normalize { data::normalize(&ds) } else { ds }, cfg.loss_kind())
            }
        };
        let p = if cfg.algorithm == Algorithm::Svrg { 1 } else { cfg.p as usize };
        let partitions = data::partition(&dataset, p, cfg.partition)?;
        let mut hp = cfg.hp.clone();
        if hp.inner_steps == 0 {
            let q = partitions.iter().map(Partition::len).max().unwrap_or(1);
            hp.inner_steps = u32::try_from(q).unwrap_or(u32::MAX);
        }
        if let Some(b) = cfg.batch {
            b.validate(&partitions)?;
        }
        let dim = match kind {
            LossKind::Quadratic1D { .. } => 1,
            _ => dataset.dim,
        };
        let w_star = match &cfg.wstar {
            WstarSource::Unknown => None,
            WstarSource::Solve => Some(diagnostics::solve_optimum(&kind, &dataset.instances, dim, hp.lambda)?),
            WstarSource::File(path) => Some(read_vector(path, dim)?),
        };
        Ok(Problem {
            cfg: cfg.clone(),
            dataset,
            kind,
            partitions,
            hp,
            w0: ModelVector::zeros(dim),
            w_star,
        })
    }

    pub fn dim(&self) -> usize {
        self.w0.len()
    }

    pub fn monitor(&self) -> Monitor<'_> {
        Monitor {
            kind: &self.kind,
            instances: &self.dataset.instances,
            lambda: self.hp.lambda,
            w_star: self.w_star.as_ref(),
        }
    }

    fn master_config(&self) -> MasterConfig {
        MasterConfig {
            dim: self.dim(),
            n_total: self.dataset.len(),
            hp: self.hp.clone(),
            w0: Some(self.w0.clone()),
        }
    }

    fn grad_norm(&self, w: &ModelVector) -> Option<f64> {
        model::full_gradient(&self.kind, w, &self.dataset.instances, self.hp.lambda)
            .ok()
            .map(|g| g.norm())
    }
}

impl Resolved {
    fn loss_kind(&self) -> LossKind {
        match self.loss {
            LossChoice::Logistic => LossKind::LogisticL2,
            LossChoice::SmoothedHinge => LossKind::SmoothedHingeL2,
        }
    }
}

fn read_vector(path: &Path, dim: usize) -> Result<ModelVector, ExperimentError> {
    let text = fs::read_to_string(path).map_err(|e| ExperimentError::Io(format!("{}: {e}", path.display())))?;
    let values = text
        .split(|ch: char| ch.is_whitespace() || ch == ',')
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| ExperimentError::Io(format!("{}: bad number {s:?}", path.display())))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if values.len() != dim {
        return Err(ConfigError(format!("{}: w* has {} coordinates, expected {dim}", path.display(), values.len())).into());
    }
    Ok(ModelVector(values))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Converged,
    Diverged,
    MaxIter,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Converged => "converged",
            Verdict::Diverged => "diverged",
            Verdict::MaxIter => "maxiter",
        })
    }
}

/// Diverged if the run aborted, or moved away from `w*` (objective went up
/// when `w*` is unknown). Converged if `||w_T - w*||^2` (else
/// `||grad P(w_T)||`) shrank by [`CONVERGED_RATIO`].
pub fn classify(outcome: &RunOutcome, problem: &Problem) -> Verdict {
    if matches!(outcome.status, RunStatus::Diverged { .. }) {
        return Verdict::Diverged;
    }
    let (Some(first), Some(last)) = (outcome.metrics.records.first(), outcome.metrics.last()) else {
        return Verdict::MaxIter;
    };
    if let (Some(d0), Some(d1)) = (first.dist_sq, last.dist_sq) {
        if d1 > d0 || !d1.is_finite() {
            return Verdict::Diverged;
        }
        if d1 <= CONVERGED_RATIO * d0 {
            return Verdict::Converged;
        }
        return Verdict::MaxIter;
    }
    if let (Some(f0), Some(f1)) = (first.objective, last.objective) {
        if f1 > f0 || !f1.is_finite() {
            return Verdict::Diverged;
        }
    }
    match (problem.grad_norm(&first.w), problem.grad_norm(&last.w)) {
        (Some(g0), Some(g1)) if g1 <= CONVERGED_RATIO * g0 => Verdict::Converged,
        _ => Verdict::MaxIter,
    }
}

/// Fixed-width scientific notation with 17 significant digits.
pub fn fmt_real(x: f64) -> String {
    format!("{x:.16e}")
}

fn opt_real(x: Option<f64>) -> String {
    x.map(fmt_real).unwrap_or_default()
}

pub fn metrics_csv(outcome: &RunOutcome) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in &outcome.metrics.records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.t,
            opt_real(r.objective),
            opt_real(r.dist_sq),
            r.comm.messages(),
            r.comm.payload_bytes,
            fmt_real(r.wall_ms)
        );
    }
    out
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub outcome: RunOutcome,
    pub verdict: Verdict,
    pub csv: String,
}

impl ExperimentReport {
    pub fn rounds(&self) -> u32 {
        self.outcome.metrics.last().map_or(0, |r| r.t)
    }

    pub fn messages(&self) -> u64 {
        self.outcome.metrics.last().map_or(0, |r| r.comm.messages())
    }

    pub fn summary(&self) -> String {
        format!("verdict={} rounds={} msgs={}", self.verdict, self.rounds(), self.messages())
    }

    /// 0 unless the run diverged.
    pub fn exit_code(&self) -> i32 {
        if self.verdict == Verdict::Diverged {
            2
        } else {
            0
        }
    }
}

/// What a process did, depending on its role.
#[derive(Debug, Clone)]
pub enum RunResult {
    Master(ExperimentReport),
    Worker { worker_id: u32, rounds: u64 },
}

/// Runs the configured role: the whole experiment (default), only the
/// master, or one worker. The CSV is written to `out` when set.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunResult, ExperimentError> {
    let resolved = cfg.resolve()?;
    let problem = Problem::load(&resolved)?;
    match resolved.role {
        Some(Role::Worker) => {
            let worker_id = resolved.worker_id.expect("checked by resolve");
            let addr = resolved.bind.clone().unwrap_or_else(default_bind_addr);
            let rounds = run_tcp_worker(&problem, &addr, worker_id)?;
            Ok(RunResult::Worker { worker_id, rounds })
        }
        _ => {
            let report = run_problem(&problem)?;
            if let Some(path) = &resolved.out {
                fs::write(path, &report.csv).map_err(|e| ExperimentError::Io(format!("{}: {e}", path.display())))?;
            }
            Ok(RunResult::Master(report))
        }
    }
}

/// Runs a loaded problem to completion (master side for a `master` role).
pub fn run_problem(problem: &Problem) -> Result<ExperimentReport, ExperimentError> {
    let cfg = &problem.cfg;
    let monitor = Some(problem.monitor());
    let outcome = match (cfg.algorithm, cfg.transport, cfg.role) {
        (Algorithm::Svrg, _, _) => {
            let mut rng = worker_rng(problem.hp.seed, 1);
            svrg_sequential(
                &problem.dataset.instances,
                &problem.kind,
                &problem.hp,
                Some(problem.w0.clone()),
                &mut rng,
                monitor,
            )?
        }
        (Algorithm::Scope, TransportChoice::Inproc, _) => run_in_process(
            &problem.partitions,
            &problem.kind,
            &problem.hp,
            Some(problem.w0.clone()),
            monitor,
        )?,
        (Algorithm::Dissvrg, TransportChoice::Inproc, _) => run_dissvrg_in_process(
            &problem.partitions,
            &problem.kind,
            &problem.hp,
            cfg.batch.expect("checked by resolve"),
            Some(problem.w0.clone()),
            monitor,
        )?,
        (_, TransportChoice::Tcp, Some(Role::Master)) => {
            let addr = cfg.bind.clone().unwrap_or_else(default_bind_addr);
            let listener = TcpMasterListener::bind(addr.as_str(), cfg.p)?;
            log::info!("master listening on {}", listener.local_addr()?);
            let mut master = listener.accept()?;
            run_master(problem, &mut master)?
        }
        (_, TransportChoice::Tcp, _) => run_tcp_loopback(problem)?,
    };
    let verdict = classify(&outcome, problem);
    let csv = metrics_csv(&outcome);
    Ok(ExperimentReport { outcome, verdict, csv })
}

fn run_master(problem: &Problem, master: &mut crate::protocol::TcpMaster) -> Result<RunOutcome, EngineError> {
    let mcfg = problem.master_config();
    match problem.cfg.algorithm {
        Algorithm::Dissvrg => dissvrg_master_run(&mcfg, master, Some(problem.monitor())),
        _ => master_run(&mcfg, master, Some(problem.monitor())),
    }
}

fn serve_worker<T: crate::protocol::WorkerTransport>(
    problem: &Problem,
    part: &Partition,
    link: &mut T,
) -> Result<u64, EngineError> {
    match problem.cfg.algorithm {
        Algorithm::Dissvrg => {
            let wcfg = DisSvrgWorkerConfig {
                kind: problem.kind.clone(),
                hp: problem.hp.clone(),
                batch: problem.cfg.batch.expect("checked by resolve"),
            };
            dissvrg_worker_run(part, &wcfg, link)
        }
        _ => {
            let wcfg = WorkerConfig {
                kind: problem.kind.clone(),
                hp: problem.hp.clone(),
            };
            worker_run(part, &wcfg, link).map(|r| u64::from(r.rounds))
        }
    }
}

fn run_tcp_worker(problem: &Problem, addr: &str, worker_id: u32) -> Result<u64, ExperimentError> {
    let part = &problem.partitions[worker_id as usize - 1];
    let mut link = TcpWorker::connect(addr, worker_id, CONNECT_TIMEOUT)?;
    Ok(serve_worker(problem, part, &mut link)?)
}

/// Master and all workers in this process, talking over loopback TCP.
fn run_tcp_loopback(problem: &Problem) -> Result<RunOutcome, ExperimentError> {
    let addr = problem.cfg.bind.clone().unwrap_or_else(|| "127.0.0.1:0".to_string());
    let listener = TcpMasterListener::bind(addr.as_str(), problem.cfg.p)?;
    let local = listener.local_addr()?;
    std::thread::scope(|s| {
        let handles: Vec<_> = problem
            .partitions
            .iter()
            .map(|part| {
                s.spawn(move || -> Result<u64, ExperimentError> {
                    let mut link = TcpWorker::connect(local, part.worker_id, CONNECT_TIMEOUT)?;
                    Ok(serve_worker(problem, part, &mut link)?)
                })
            })
            .collect();
        let outcome = listener
            .accept()
            .map_err(ExperimentError::from)
            .and_then(|mut master| Ok(run_master(problem, &mut master)?));
        let mut worker_err = None;
        for h in handles {
            if let Err(e) = h.join().expect("worker thread panicked") {
                worker_err.get_or_insert(e);
            }
        }
        match (outcome, worker_err) {
            (Ok(o), None) => Ok(o),
            (Ok(_), Some(e)) | (Err(e), _) => Err(e),
        }
    })
}

/// Side-by-side view of two runs on the same problem.
#[derive(Debug, Clone)]
pub struct CompareReport {
    pub a: ExperimentReport,
    pub b: ExperimentReport,
    pub csv: String,
}

impl CompareReport {
    /// Payload messages of run B over run A.
    pub fn message_ratio(&self) -> f64 {
        self.b.messages() as f64 / self.a.messages() as f64
    }
}

pub const COMPARE_HEADER: &str =
    "t,a_objective,a_dist_sq,a_msgs,a_wall_ms,b_objective,b_dist_sq,b_msgs,b_wall_ms";

/// Runs both configurations and lines their metrics up by round.
pub fn compare_runs(a: &ExperimentConfig, b: &ExperimentConfig) -> Result<CompareReport, ExperimentError> {
    let ra = a.resolve()?;
    let rb = b.resolve()?;
    if ra.data != rb.data || ra.loss != rb.loss || ra.hp.lambda != rb.hp.lambda || ra.normalize != rb.normalize {
        return Err(ConfigError(format!(
            "runs target different problems: {} / {:?} / lambda {} vs {} / {:?} / lambda {}",
            ra.data, ra.loss, ra.hp.lambda, rb.data, rb.loss, rb.hp.lambda
        ))
        .into());
    }
    if ra.role.is_some() || rb.role.is_some() {
        return Err(ConfigError("compare runs whole experiments, not roles".into()).into());
    }
    let pa = Problem::load(&ra)?;
    let pb = Problem::load(&rb)?;
    let a = run_problem(&pa)?;
    let b = run_problem(&pb)?;
    let mut csv = String::from(COMPARE_HEADER);
    csv.push('\n');
    let rows = a.outcome.metrics.records.len().max(b.outcome.metrics.records.len());
    for i in 0..rows {
        let _ = write!(csv, "{i}");
        for rep in [&a, &b] {
            match rep.outcome.metrics.records.get(i) {
                Some(r) => {
                    let _ = write!(
                        csv,
                        ",{},{},{},{}",
                        opt_real(r.objective),
                        opt_real(r.dist_sq),
                        r.comm.messages(),
                        fmt_real(r.wall_ms)
                    );
                }
                None => csv.push_str(",,,,"),
            }
        }
        csv.push('\n');
    }
    Ok(CompareReport { a, b, csv })
}

/// CSV with the `wall_ms` column removed, for comparing runs.
pub fn strip_wall_ms(csv: &str) -> String {
    csv.lines()
        .map(|line| match line.rfind(',') {
            Some(i) => &line[..i],
            None => line,
        })
        .collect::<Vec<_>>()
        .join("\n")
}
