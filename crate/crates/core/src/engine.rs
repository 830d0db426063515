//! Master and worker state machines.
//!
//! Each round the master broadcasts the anchor `w_t`, gathers the workers'
//! local gradient sums, broadcasts the full gradient `z`, and averages the
//! locally updated parameters. Workers run `M` variance-reduced steps on
//! their own shard with an extra `c (u - w_t)` pull toward the anchor.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Partition;
use crate::model::{self, LabeledInstance, LossKind, ModelError, ModelVector};
use crate::protocol::{
    in_process, CommStats, MasterTransport, Message, TransportError, WorkerTransport,
};

/// Iterates whose norm exceeds this are treated as divergent.
pub const DIVERGENCE_NORM: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combine {
    /// Send `u_{k,M}`.
    LastIterate,
    /// Send `(1/M) sum_{m=1..M} u_{k,m}`.
    AverageIterate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub eta: f64,
    pub c: f64,
    /// Local steps per round (`M`).
    pub inner_steps: u32,
    /// Outer rounds (`T`).
    pub outer_rounds: u32,
    pub lambda: f64,
    pub combine: Combine,
    pub seed: u64,
}

impl HyperParams {
    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |why: String| Err(EngineError::InvalidParams(why));
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad(format!("eta must be positive, got {}", self.eta));
        }
        if !(self.c >= 0.0 && self.c.is_finite()) {
            return bad(format!("c must be >= 0, got {}", self.c));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if self.inner_steps == 0 {
            return bad("M must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("protocol order violation: {0}")]
    ProtocolOrder(String),
    #[error("unexpected message {got} while waiting for {expected}")]
    UnexpectedMessage { expected: &'static str, got: &'static str },
    #[error("invalid hyper-parameters: {0}")]
    InvalidParams(String),
    #[error("diverged in round {round} at step {step}")]
    Diverged { round: u32, step: u32 },
}

/// A worker iterate that left the finite / bounded region.
#[derive(Debug, Clone, PartialEq)]
pub struct Divergence {
    pub round: u32,
    pub step: u32,
    pub iterate: ModelVector,
}

impl From<Divergence> for EngineError {
    fn from(d: Divergence) -> Self {
        EngineError::Diverged {
            round: d.round,
            step: d.step,
        }
    }
}

pub(crate) fn out_of_bounds(v: &[f64]) -> bool {
    let mut norm_sq = 0.0;
    for x in v {
        if !x.is_finite() {
            return true;
        }
        norm_sq += x * x;
    }
    norm_sq.sqrt() > DIVERGENCE_NORM
}

/// Per-worker sampling stream: seeded with `seed ^ worker_id` and advanced
/// only by that worker.
pub fn worker_rng(seed: u64, worker_id: u32) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ u64::from(worker_id))
}

/// One row of run metrics, describing `w_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub t: u32,
    pub objective: Option<f64>,
    pub dist_sq: Option<f64>,
    pub comm: CommStats,
    pub wall_ms: f64,
    pub w: ModelVector,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub records: Vec<RoundRecord>,
}

impl RunMetrics {
    pub fn iterates(&self) -> impl Iterator<Item = &ModelVector> {
        self.records.iter().map(|r| &r.w)
    }

    pub fn last(&self) -> Option<&RoundRecord> {
        self.records.last()
    }
}

/// Out-of-band evaluator the master uses to fill in objective and distance
/// columns. It never touches the transport.
#[derive(Debug, Clone, Copy)]
pub struct Monitor<'a> {
    pub kind: &'a LossKind,
    pub instances: &'a [LabeledInstance],
    pub lambda: f64,
    pub w_star: Option<&'a ModelVector>,
}

pub(crate) struct Recorder<'a> {
    monitor: Option<Monitor<'a>>,
    start: Instant,
    eval_secs: f64,
    pub metrics: RunMetrics,
}

impl<'a> Recorder<'a> {
    pub fn new(monitor: Option<Monitor<'a>>) -> Self {
        Recorder {
            monitor,
            start: Instant::now(),
            eval_secs: 0.0,
            metrics: RunMetrics::default(),
        }
    }

    /// Appends the row for `w_t`. Evaluation time is excluded from `wall_ms`.
    pub fn record(&mut self, t: u32, w: &ModelVector, comm: CommStats) {
        let elapsed = self.start.elapsed().as_secs_f64() - self.eval_secs;
        let eval_start = Instant::now();
        let (objective, dist_sq) = match &self.monitor {
            Some(m) => (
                model::objective(m.kind, w, m.instances, m.lambda).ok(),
                m.w_star.map(|ws| w.dist_sq(ws)),
            ),
            None => (None, None),
        };
        self.eval_secs += eval_start.elapsed().as_secs_f64();
        self.metrics.records.push(RoundRecord {
            t,
            objective,
            dist_sq,
            comm,
            wall_ms: elapsed * 1e3,
            w: w.clone(),
        });
    }
}

/// `z_k = sum_{i in D_k} grad f_i(w)`, in ascending local order.
pub fn local_gradient_sum(
    instances: &[LabeledInstance],
    w: &ModelVector,
    kind: &LossKind,
    lambda: f64,
) -> Result<ModelVector, EngineError> {
    if instances.is_empty() {
        return Err(ModelError::EmptyDataset.into());
    }
    Ok(model::gradient_sum(kind, w, instances, lambda)?)
}

/// The local inner loop of one round. `z` must be the global mean gradient
/// at `w_t`. Uses the rewritten update
/// `u <- (1 - c eta) u - eta (grad f_i(u) - grad f_i(w_t) + z_hat)` with
/// `z_hat = z - c w_t` fixed for the round.
pub fn worker_inner_loop<R: Rng>(
    instances: &[LabeledInstance],
    w_t: &ModelVector,
    z: &ModelVector,
    kind: &LossKind,
    hp: &HyperParams,
    round: u32,
    rng: &mut R,
) -> Result<ModelVector, Divergence> {
    worker_inner_loop_observed(instances, w_t, z, kind, hp, round, rng, |_, _| {})
}

/// [`worker_inner_loop`] with a callback invoked after every step with
/// `(m, u_{k,m})`, `m` starting at 1.
#[allow(clippy::too_many_arguments)]
pub fn worker_inner_loop_observed<R: Rng, F: FnMut(u32, &[f64])>(
    instances: &[LabeledInstance],
    w_t: &ModelVector,
    z: &ModelVector,
    kind: &LossKind,
    hp: &HyperParams,
    round: u32,
    rng: &mut R,
    mut observe: F,
) -> Result<ModelVector, Divergence> {
    let d = w_t.len();
    let q = instances.len();
    let w = w_t.as_slice();
    let shrink = 1.0 - hp.c * hp.eta;
    let z_hat: Vec<f64> = z.as_slice().iter().zip(w).map(|(zj, wj)| zj - hp.c * wj).collect();

    let mut u = w.to_vec();
    let mut sum = match hp.combine {
        Combine::AverageIterate => Some(vec![0.0; d]),
        Combine::LastIterate => None,
    };
    let mut g_u = vec![0.0; d];
    let mut g_w = vec![0.0; d];
    let diverged = |step: u32, u: Vec<f64>| Divergence {
        round,
        step,
        iterate: ModelVector(u),
    };

    for m in 0..hp.inner_steps {
        let inst = &instances[rng.random_range(0..q)];
        if model::loss_grad_into(kind, &u, inst, hp.lambda, &mut g_u).is_err()
            || model::loss_grad_into(kind, w, inst, hp.lambda, &mut g_w).is_err()
        {
            return Err(diverged(m + 1, u));
        }
        for j in 0..d {
            u[j] = shrink * u[j] - hp.eta * (g_u[j] - g_w[j] + z_hat[j]);
        }
        if out_of_bounds(&u) {
            return Err(diverged(m + 1, u));
        }
        if let Some(s) = sum.as_mut() {
            for (acc, x) in s.iter_mut().zip(&u) {
                *acc += x;
            }
        }
        observe(m + 1, &u);
    }
    Ok(match sum {
        Some(s) if hp.inner_steps > 0 => {
            let m = f64::from(hp.inner_steps);
            ModelVector(s.into_iter().map(|x| x / m).collect())
        }
        _ => ModelVector(u),
    })
}

/// What the master needs to know about the problem.
#[derive(Debug, Clone)]
pub struct MasterConfig {
    pub dim: usize,
    /// Total instance count across all workers.
    pub n_total: usize,
    pub hp: HyperParams,
    /// Starting point; zero when `None`.
    pub w0: Option<ModelVector>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Completed,
    /// Some worker result (or the averaged iterate) left the bounded region.
    Diverged { round: u32, worker: Option<u32> },
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub w: ModelVector,
    pub metrics: RunMetrics,
    pub status: RunStatus,
}

pub(crate) fn expect_vector(
    msg: Message,
    round: u32,
    worker: u32,
    dim: usize,
    expected: &'static str,
) -> Result<ModelVector, EngineError> {
    let (r, k, v) = match (expected, msg) {
        ("LocalGradSum", Message::LocalGradSum { round, worker_id, z_k }) => (round, worker_id, z_k),
        ("LocalUpdate", Message::LocalUpdate { round, worker_id, u_tilde }) => (round, worker_id, u_tilde),
        (_, other) => {
            return Err(EngineError::UnexpectedMessage {
                expected,
                got: other.kind_name(),
            })
        }
    };
    if r != round || k != worker {
        return Err(EngineError::ProtocolOrder(format!(
            "expected {expected} for round {round} from worker {worker}, got round {r} from worker {k}"
        )));
    }
    if v.len() != dim {
        return Err(ModelError::DimensionMismatch {
            expected: dim,
            found: v.len(),
        }
        .into());
    }
    Ok(v)
}

/// Runs `T` rounds of the master loop and shuts the workers down.
///
/// Reductions always run in ascending worker id, so the iterate sequence
/// does not depend on message arrival order.
pub fn master_run<T: MasterTransport + ?Sized>(
    cfg: &MasterConfig,
    transport: &mut T,
    monitor: Option<Monitor<'_>>,
) -> Result<RunOutcome, EngineError> {
    let p = transport.workers();
    if p == 0 {
        return Err(EngineError::InvalidParams("no workers".into()));
    }
    let mut w = cfg.w0.clone().unwrap_or_else(|| ModelVector::zeros(cfg.dim));
    let mut rec = Recorder::new(monitor);
    rec.record(0, &w, transport.comm_stats());
    let mut status = RunStatus::Completed;

    let result = (|| -> Result<(), EngineError> {
        for t in 0..cfg.hp.outer_rounds {
            transport.broadcast(&Message::Params { round: t, w: w.clone() })?;

            let mut z_sum: Option<ModelVector> = None;
            for k in 1..=p {
                let z_k = expect_vector(transport.recv_from(k)?, t, k, cfg.dim, "LocalGradSum")?;
                match z_sum.as_mut() {
                    None => z_sum = Some(z_k),
                    Some(s) => s.add_assign(&z_k),
                }
            }
            transport.counters().note_barrier();
            let z = z_sum.expect("p >= 1").divided_by(cfg.n_total as f64);
            transport.broadcast(&Message::FullGrad { round: t, z })?;

            let mut u_sum: Option<ModelVector> = None;
            let mut bad_worker = None;
            for k in 1..=p {
                let u_k = expect_vector(transport.recv_from(k)?, t, k, cfg.dim, "LocalUpdate")?;
                if bad_worker.is_none() && out_of_bounds(u_k.as_slice()) {
                    bad_worker = Some(k);
                }
                match u_sum.as_mut() {
                    None => u_sum = Some(u_k),
                    Some(s) => s.add_assign(&u_k),
                }
            }
            transport.counters().note_barrier();
            if let Some(k) = bad_worker {
                log::warn!("worker {k} diverged in round {t}");
                status = RunStatus::Diverged { round: t, worker: Some(k) };
                return Ok(());
            }
            w = u_sum.expect("p >= 1").divided_by(f64::from(p));
            if out_of_bounds(w.as_slice()) {
                status = RunStatus::Diverged { round: t, worker: None };
                return Ok(());
            }
            rec.record(t + 1, &w, transport.comm_stats());
        }
        Ok(())
    })();
    // best effort: workers may already be gone if the run failed
    let shutdown = transport.broadcast(&Message::Shutdown);
    result?;
    shutdown?;
    Ok(RunOutcome {
        w,
        metrics: rec.metrics,
        status,
    })
}

/// Worker-side settings.
#[derive(Debug, Clone)]
pub struct WorkerConfig {
    pub kind: LossKind,
    pub hp: HyperParams,
}

/// Summary returned when a worker exits cleanly.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkerReport {
    pub rounds: u32,
    pub diverged_at: Option<(u32, u32)>,
    pub comm: CommStats,
}

/// Serves rounds until the master sends `Shutdown`.
pub fn worker_run<T: WorkerTransport + ?Sized>(
    partition: &Partition,
    cfg: &WorkerConfig,
    transport: &mut T,
) -> Result<WorkerReport, EngineError> {
    let id = transport.worker_id();
    let mut rng = worker_rng(cfg.hp.seed, id);
    let mut last_round: Option<u32> = None;
    let mut rounds = 0;
    let mut diverged_at = None;
    loop {
        let (round, w_t) = match transport.recv()? {
            Message::Shutdown => break,
            Message::Params { round, w } => (round, w),
            other => {
                return Err(EngineError::UnexpectedMessage {
                    expected: "Params",
                    got: other.kind_name(),
                })
            }
        };
        if let Some(prev) = last_round {
            if round <= prev {
                return Err(EngineError::ProtocolOrder(format!(
                    "worker {id}: round {round} after round {prev}"
                )));
            }
        }
        last_round = Some(round);

        let z_k = local_gradient_sum(&partition.instances, &w_t, &cfg.kind, cfg.hp.lambda)?;
        transport.send(&Message::LocalGradSum { round, worker_id: id, z_k })?;

        let z = match transport.recv()? {
            Message::FullGrad { round: r, z } if r == round => z,
            Message::FullGrad { round: r, .. } => {
                return Err(EngineError::ProtocolOrder(format!(
                    "worker {id}: full gradient for round {r} during round {round}"
                )))
            }
            Message::Shutdown => break,
            other => {
                return Err(EngineError::UnexpectedMessage {
                    expected: "FullGrad",
                    got: other.kind_name(),
                })
            }
        };

        let u_tilde = match worker_inner_loop(&partition.instances, &w_t, &z, &cfg.kind, &cfg.hp, round, &mut rng) {
            Ok(u) => u,
            Err(div) => {
                log::warn!("worker {id}: diverged in round {} at step {}", div.round, div.step);
                diverged_at.get_or_insert((div.round, div.step));
                div.iterate
            }
        };
        transport.send(&Message::LocalUpdate { round, worker_id: id, u_tilde })?;
        rounds += 1;
    }
    Ok(WorkerReport {
        rounds,
        diverged_at,
        comm: transport.comm_stats(),
    })
}

/// Runs master and workers as threads over the in-process transport.
pub fn run_in_process(
    partitions: &[Partition],
    kind: &LossKind,
    hp: &HyperParams,
    w0: Option<ModelVector>,
    monitor: Option<Monitor<'_>>,
) -> Result<RunOutcome, EngineError> {
    hp.validate()?;
    let dim = partition_dim(partitions, kind, w0.as_ref());
    let n_total = partitions.iter().map(Partition::len).sum();
    let (mut master, workers) = in_process(partitions.len() as u32);
    let wcfg = WorkerConfig {
        kind: kind.clone(),
        hp: hp.clone(),
    };
    let mcfg = MasterConfig {
        dim,
        n_total,
        hp: hp.clone(),
        w0,
    };
    std::thread::scope(|s| {
        let handles: Vec<_> = workers
            .into_iter()
            .zip(partitions)
            .map(|(mut link, part)| {
                let wcfg = &wcfg;
                s.spawn(move || worker_run(part, wcfg, &mut link))
            })
            .collect();
        let outcome = master_run(&mcfg, &mut master, monitor);
        drop(master);
        let mut worker_err = None;
        for h in handles {
            if let Err(e) = h.join().expect("worker thread panicked") {
                worker_err.get_or_insert(e);
            }
        }
        match (outcome, worker_err) {
            (Ok(o), None) => Ok(o),
            (Ok(_), Some(e)) => Err(e),
            (Err(e), _) => Err(e),
        }
    })
}

pub(crate) fn partition_dim(partitions: &[Partition], kind: &LossKind, w0: Option<&ModelVector>) -> usize {
    if let Some(w) = w0 {
        return w.len();
    }
    if let LossKind::Quadratic1D { .. } = kind {
        return 1;
    }
    partitions
        .iter()
        .flat_map(|p| p.instances.iter().map(LabeledInstance::min_dim))
        .max()
        .unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{partition, synthetic_lr, toy_table1, PartitionStrategy};
    use crate::protocol::in_process;

    fn hp(eta: f64, c: f64, m: u32, t: u32) -> HyperParams {
        HyperParams {
            eta,
            c,
            inner_steps: m,
            outer_rounds: t,
            lambda: 0.0,
            combine: Combine::LastIterate,
            seed: 42,
        }
    }

    #[test]
    fn first_step_without_proximal_term_is_full_gradient_step() {
        let ds = synthetic_lr(30, 4, 1).unwrap();
        let w_t = ModelVector(vec![0.3, -0.2, 0.1, 0.5]);
        let mut p = hp(0.1, 0.0, 1, 1);
        p.lambda = 0.01;
        let z = model::full_gradient(&LossKind::LogisticL2, &w_t, &ds.instances, 0.01).unwrap();
        let u = worker_inner_loop(&ds.instances, &w_t, &z, &LossKind::LogisticL2, &p, 0, &mut worker_rng(1, 1)).unwrap();
        for j in 0..4 {
            assert_eq!(u.0[j], w_t.0[j] - 0.1 * z.0[j]);
        }
    }

    // The quadratic inner update is affine in u; replay it as a scalar
    // recursion written directly from the original (non-rewritten) update.
    #[test]
    fn quadratic_inner_loop_matches_scalar_recursion() {
        let (ds, kind) = toy_table1();
        let parts = partition(&ds, 2, PartitionStrategy::Contiguous).unwrap();
        let (a, b) = (100.0, 10.0);
        let (eta, c) = (1e-5, 10.0);
        let w_t = 0.0;
        let z = ((2.0 * (w_t - 1.0)) + 200.0 * (w_t - 10.0)) / 2.0;
        let params = hp(eta, c, 4000, 1);
        let mut trace = Vec::new();
        let got = worker_inner_loop_observed(
            &parts[1].instances,
            &ModelVector(vec![w_t]),
            &ModelVector(vec![z]),
            &kind,
            &params,
            0,
            &mut worker_rng(7, 2),
            |_, u| trace.push(u[0]),
        )
        .unwrap();
        let mut u: f64 = w_t;
        for (m, &seen) in trace.iter().enumerate() {
            let grad_u = 2.0 * a * (u - b);
            let grad_w = 2.0 * a * (w_t - b);
            u -= eta * (grad_u - grad_w + z + c * (u - w_t));
            assert!((u - seen).abs() <= 1e-12 * u.abs().max(1.0), "step {m}: {u} vs {seen}");
        }
        assert_eq!(got.0[0], *trace.last().unwrap());
    }

    #[test]
    fn average_iterate_starts_at_step_one() {
        let (ds, kind) = toy_table1();
        let mut p = hp(1e-3, 1.0, 5, 1);
        p.combine = Combine::AverageIterate;
        let w_t = ModelVector(vec![2.0]);
        let z = ModelVector(vec![3.0]);
        let mut trace = Vec::new();
        let avg = worker_inner_loop_observed(&ds.instances[..1], &w_t, &z, &kind, &p, 0, &mut worker_rng(1, 1), |_, u| trace.push(u[0])).unwrap();
        let expected = trace.iter().sum::<f64>() / 5.0;
        assert!((avg.0[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn divergence_is_reported_with_step() {
        let (ds, kind) = toy_table1();
        let p = hp(1.0, 0.0, 100, 1);
        let err = worker_inner_loop(&ds.instances[1..], &ModelVector(vec![0.0]), &ModelVector(vec![-1000.0]), &kind, &p, 3, &mut worker_rng(0, 1)).unwrap_err();
        assert_eq!(err.round, 3);
        assert!(err.step > 1 && err.step < 100);
        assert!(out_of_bounds(err.iterate.as_slice()));
    }

    #[test]
    fn zero_rounds_returns_start_point() {
        let ds = synthetic_lr(20, 3, 2).unwrap();
        let parts = partition(&ds, 2, PartitionStrategy::Contiguous).unwrap();
        let w0 = ModelVector(vec![0.5, 0.5, -1.0]);
        let out = run_in_process(&parts, &LossKind::LogisticL2, &hp(0.1, 0.1, 5, 0), Some(w0.clone()), None).unwrap();
        assert_eq!(out.w, w0);
        assert_eq!(out.metrics.records.len(), 1);
        assert_eq!(out.metrics.records[0].comm.messages(), 0);
    }

    #[test]
    fn gradient_sums_reassemble_full_gradient() {
        let ds = synthetic_lr(101, 6, 8).unwrap();
        let w = ModelVector(vec![0.1, -0.4, 0.9, 0.0, 0.3, -0.2]);
        let parts = partition(&ds, 4, PartitionStrategy::ShuffledUniform { seed: 1 }).unwrap();
        let mut total = ModelVector::zeros(6);
        for part in &parts {
            total.add_assign(&local_gradient_sum(&part.instances, &w, &LossKind::LogisticL2, 1e-3).unwrap());
        }
        let z = total.divided_by(101.0);
        let direct = model::full_gradient(&LossKind::LogisticL2, &w, &ds.instances, 1e-3).unwrap();
        for j in 0..6 {
            assert!((z.0[j] - direct.0[j]).abs() <= 1e-12 * direct.0[j].abs().max(1e-3));
        }
        let single = local_gradient_sum(&ds.instances[..1], &w, &LossKind::LogisticL2, 1e-3).unwrap();
        assert_eq!(single, model::loss_grad(&LossKind::LogisticL2, &w, &ds.instances[0], 1e-3).unwrap());
    }

    #[test]
    fn worker_exits_on_early_shutdown() {
        let ds = synthetic_lr(4, 2, 0).unwrap();
        let part = partition(&ds, 1, PartitionStrategy::Contiguous).unwrap().remove(0);
        let (mut master, mut workers) = in_process(1);
        master.send_to(1, &Message::Shutdown).unwrap();
        let cfg = WorkerConfig { kind: LossKind::LogisticL2, hp: hp(0.1, 0.0, 3, 1) };
        let report = worker_run(&part, &cfg, &mut workers[0]).unwrap();
        assert_eq!(report.rounds, 0);
    }

    #[test]
    fn worker_rejects_round_regression() {
        let ds = synthetic_lr(4, 2, 0).unwrap();
        let part = partition(&ds, 1, PartitionStrategy::Contiguous).unwrap().remove(0);
        let (mut master, mut workers) = in_process(1);
        let w = ModelVector::zeros(2);
        master.send_to(1, &Message::Params { round: 5, w: w.clone() }).unwrap();
        master.send_to(1, &Message::FullGrad { round: 5, z: w.clone() }).unwrap();
        master.send_to(1, &Message::Params { round: 5, w }).unwrap();
        let cfg = WorkerConfig { kind: LossKind::LogisticL2, hp: hp(0.1, 0.0, 3, 1) };
        let err = worker_run(&part, &cfg, &mut workers[0]).unwrap_err();
        assert!(matches!(err, EngineError::ProtocolOrder(_)), "{err}");
    }

    #[test]
    fn two_worker_transcript() {
        let ds = synthetic_lr(10, 3, 5).unwrap();
        let parts = partition(&ds, 2, PartitionStrategy::Contiguous).unwrap();
        let (mut master, mut workers) = in_process(2);
        let cfg = WorkerConfig { kind: LossKind::LogisticL2, hp: hp(0.1, 0.1, 4, 3) };
        let mut w2 = workers.pop().unwrap();
        let mut w1 = workers.pop().unwrap();
        std::thread::scope(|s| {
            let h1 = s.spawn(|| worker_run(&parts[0], &cfg, &mut w1));
            let h2 = s.spawn(|| worker_run(&parts[1], &cfg, &mut w2));
            let mut transcript = Vec::new();
            let mut w = ModelVector::zeros(3);
            for t in 0..3u32 {
                master.broadcast(&Message::Params { round: t, w: w.clone() }).unwrap();
                transcript.push("Params");
                let mut z = ModelVector::zeros(3);
                for k in 1..=2 {
                    let m = master.recv_from(k).unwrap();
                    transcript.push(m.kind_name());
                    if let Message::LocalGradSum { z_k, worker_id, round } = m {
                        assert_eq!((worker_id, round), (k, t));
                        z.add_assign(&z_k);
                    }
                }
                master.broadcast(&Message::FullGrad { round: t, z: z.divided_by(10.0) }).unwrap();
                transcript.push("FullGrad");
                let mut next = ModelVector::zeros(3);
                for k in 1..=2 {
                    let m = master.recv_from(k).unwrap();
                    transcript.push(m.kind_name());
                    if let Message::LocalUpdate { u_tilde, .. } = m {
                        next.add_assign(&u_tilde);
                    }
                }
                w = next.divided_by(2.0);
            }
            master.broadcast(&Message::Shutdown).unwrap();
            let golden: Vec<&str> = (0..3)
                .flat_map(|_| ["Params", "LocalGradSum", "LocalGradSum", "FullGrad", "LocalUpdate", "LocalUpdate"])
                .collect();
            assert_eq!(transcript, golden);
            assert_eq!(h1.join().unwrap().unwrap().rounds, 3);
            let r2 = h2.join().unwrap().unwrap();
            assert_eq!(r2.comm.messages(), 3 * 4);
            assert_eq!(r2.comm.messages_sent, 6);
        });
    }

    #[test]
    fn scope_counts_four_messages_per_worker_round() {
        let ds = synthetic_lr(40, 3, 9).unwrap();
        for (p, t) in [(2usize, 3u32), (4, 10)] {
            let parts = partition(&ds, p, PartitionStrategy::Contiguous).unwrap();
            let out = run_in_process(&parts, &LossKind::LogisticL2, &hp(0.05, 0.1, 10, t), None, None).unwrap();
            let c = out.metrics.last().unwrap().comm;
            assert_eq!(c.messages(), 4 * p as u64 * u64::from(t));
            assert_eq!(c.sync_rounds, 2 * u64::from(t));
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let ds = synthetic_lr(60, 4, 3).unwrap();
        let parts = partition(&ds, 3, PartitionStrategy::ShuffledUniform { seed: 2 }).unwrap();
        let mut p = hp(0.2, 0.1, 30, 4);
        p.lambda = 0.01;
        let a = run_in_process(&parts, &LossKind::LogisticL2, &p, None, None).unwrap();
        let b = run_in_process(&parts, &LossKind::LogisticL2, &p, None, None).unwrap();
        let bits = |o: &RunOutcome| -> Vec<u64> { o.metrics.iterates().flat_map(|w| w.0.iter().map(|x| x.to_bits())).collect() };
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn invalid_params_are_rejected() {
        let ds = synthetic_lr(10, 2, 0).unwrap();
        let parts = partition(&ds, 1, PartitionStrategy::Contiguous).unwrap();
        let err = run_in_process(&parts, &LossKind::LogisticL2, &hp(0.0, 0.0, 1, 1), None, None).unwrap_err();
        assert!(matches!(err, EngineError::InvalidParams(_)));
    }
}
