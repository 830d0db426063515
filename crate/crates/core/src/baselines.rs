//! Reference methods: single-machine SVRG and the mini-batch distributed
//! SVRG in which the master performs every inner step and workers only
//! contribute mini-batch gradient sums.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Partition;
use crate::engine::{
    expect_vector, out_of_bounds, partition_dim, worker_rng, Combine, EngineError, HyperParams,
    MasterConfig, Monitor, Recorder, RunOutcome, RunStatus,
};
use crate::model::{self, LabeledInstance, LossKind, ModelError, ModelVector};
use crate::protocol::{in_process, CommStats, MasterTransport, Message, WorkerTransport};

/// Sequential SVRG over the whole dataset.
///
/// `rng` supplies the index stream; pass `worker_rng(seed, 1)` to replay the
/// exact stream a single distributed worker would draw.
pub fn svrg_sequential<R: Rng>(
    instances: &[LabeledInstance],
    kind: &LossKind,
    hp: &HyperParams,
    w0: Option<ModelVector>,
    rng: &mut R,
    monitor: Option<Monitor<'_>>,
) -> Result<RunOutcome, EngineError> {
    let n = instances.len();
    if n == 0 {
        return Err(ModelError::EmptyDataset.into());
    }
    let d = w0.as_ref().map_or_else(
        || match kind {
            LossKind::Quadratic1D { .. } => 1,
            _ => instances.iter().map(LabeledInstance::min_dim).max().unwrap_or(0),
        },
        ModelVector::len,
    );
    let mut w = w0.unwrap_or_else(|| ModelVector::zeros(d));
    let mut rec = Recorder::new(monitor);
    rec.record(0, &w, CommStats::default());
    let mut g_u = vec![0.0; d];
    let mut g_0 = vec![0.0; d];

    for t in 0..hp.outer_rounds {
        let u0 = w.clone();
        let z = model::gradient_sum(kind, &u0, instances, hp.lambda)?.divided_by(n as f64);
        let mut u = u0.0.clone();
        let mut sum = vec![0.0; d];
        for m in 0..hp.inner_steps {
            let inst = &instances[rng.random_range(0..n)];
            model::loss_grad_into(kind, &u, inst, hp.lambda, &mut g_u)?;
            model::loss_grad_into(kind, &u0.0, inst, hp.lambda, &mut g_0)?;
            for j in 0..d {
                u[j] -= hp.eta * (g_u[j] - g_0[j] + z.0[j]);
            }
            if out_of_bounds(&u) {
                log::warn!("svrg diverged in round {t} at step {}", m + 1);
                return Ok(RunOutcome {
                    w: ModelVector(u),
                    metrics: rec.metrics,
                    status: RunStatus::Diverged {
                        round: t,
                        worker: None,
                    },
                });
            }
            if hp.combine == Combine::AverageIterate {
                for (acc, x) in sum.iter_mut().zip(&u) {
                    *acc += x;
                }
            }
        }
        w = match hp.combine {
            Combine::AverageIterate if hp.inner_steps > 0 => {
                let m = f64::from(hp.inner_steps);
                ModelVector(sum.into_iter().map(|x| x / m).collect())
            }
            _ => ModelVector(u),
        };
        rec.record(t + 1, &w, CommStats::default());
    }
    Ok(RunOutcome {
        w,
        metrics: rec.metrics,
        status: RunStatus::Completed,
    })
}

/// Per-worker mini-batch size `|S_{m,k}|`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MiniBatchParams {
    pub batch_size: u32,
}

impl MiniBatchParams {
    pub fn validate(&self, partitions: &[Partition]) -> Result<(), EngineError> {
        let smallest = partitions.iter().map(Partition::len).min().unwrap_or(0);
        if self.batch_size == 0 || self.batch_size as usize > smallest {
            return Err(EngineError::InvalidParams(format!(
                "batch size {} must be in 1..={smallest}",
                self.batch_size
            )));
        }
        Ok(())
    }
}

/// Draws `b` distinct local indices, returned in ascending order. A batch
/// covering the whole shard is the shard itself.
pub fn sample_batch<R: Rng>(rng: &mut R, q: usize, b: usize) -> Vec<usize> {
    if b >= q {
        return (0..q).collect();
    }
    let mut idx = index::sample(rng, q, b).into_vec();
    idx.sort_unstable();
    idx
}

/// `(sum_{i in S} grad f_i(u), sum_{i in S} grad f_i(w_t))` for one batch.
pub fn minibatch_sums(
    instances: &[LabeledInstance],
    batch: &[usize],
    u: &ModelVector,
    w_t: &ModelVector,
    kind: &LossKind,
    lambda: f64,
) -> Result<(ModelVector, ModelVector), ModelError> {
    let d = u.len();
    let mut g_u = ModelVector::zeros(d);
    let mut g_w = ModelVector::zeros(d);
    let mut scratch = vec![0.0; d];
    for &i in batch {
        model::loss_grad_into(kind, u.as_slice(), &instances[i], lambda, &mut scratch)?;
        for (a, s) in g_u.0.iter_mut().zip(&scratch) {
            *a += s;
        }
        model::loss_grad_into(kind, w_t.as_slice(), &instances[i], lambda, &mut scratch)?;
        for (a, s) in g_w.0.iter_mut().zip(&scratch) {
            *a += s;
        }
    }
    Ok((g_u, g_w))
}

/// One worker's contribution to an inner step.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub batch_size: u32,
    pub g_u: ModelVector,
    pub g_w: ModelVector,
}

/// Master-side variance-reduced direction
/// `grad f_S(u_m) - grad f_S(u_0) + z`, with both batch aggregates divided
/// by `|S| = sum_k |S_k|`. Here `u_0 = w_t`. Contributions are summed in the
/// order given.
pub fn aggregate_direction(stats: &[BatchStats], z: &ModelVector) -> ModelVector {
    let d = z.len();
    let total: u64 = stats.iter().map(|s| u64::from(s.batch_size)).sum();
    let mut g_u = ModelVector::zeros(d);
    let mut g_0 = ModelVector::zeros(d);
    for s in stats {
        g_u.add_assign(&s.g_u);
        g_0.add_assign(&s.g_w);
    }
    let size = total as f64;
    ModelVector(
        (0..d)
            .map(|j| g_u.0[j] / size - g_0.0[j] / size + z.0[j])
            .collect(),
    )
}

/// Master loop of mini-batch distributed SVRG. Each inner step costs one
/// broadcast and one gather, so a run moves `2 p T (1 + M)` payload
/// messages.
pub fn dissvrg_master_run<T: MasterTransport + ?Sized>(
    cfg: &MasterConfig,
    transport: &mut T,
    monitor: Option<Monitor<'_>>,
) -> Result<RunOutcome, EngineError> {
    let p = transport.workers();
    if p == 0 {
        return Err(EngineError::InvalidParams("no workers".into()));
    }
    let hp = &cfg.hp;
    let mut w = cfg.w0.clone().unwrap_or_else(|| ModelVector::zeros(cfg.dim));
    let mut rec = Recorder::new(monitor);
    rec.record(0, &w, transport.comm_stats());
    let mut status = RunStatus::Completed;

    let result = (|| -> Result<(), EngineError> {
        for t in 0..hp.outer_rounds {
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

            let mut u = w.clone();
            let mut sum = ModelVector::zeros(cfg.dim);
            for m in 0..hp.inner_steps {
                transport.broadcast(&Message::InnerParams {
                    round: t,
                    inner_step: m,
                    u_m: u.clone(),
                })?;
                let mut stats = Vec::with_capacity(p as usize);
                for k in 1..=p {
                    stats.push(expect_stats(transport.recv_from(k)?, t, m, k, cfg.dim)?);
                }
                transport.counters().note_barrier();
                let dir = aggregate_direction(&stats, &z);
                for (uj, dj) in u.0.iter_mut().zip(&dir.0) {
                    *uj -= hp.eta * dj;
                }
                if out_of_bounds(u.as_slice()) {
                    log::warn!("dissvrg diverged in round {t} at step {}", m + 1);
                    status = RunStatus::Diverged { round: t, worker: None };
                    return Ok(());
                }
                if hp.combine == Combine::AverageIterate {
                    sum.add_assign(&u);
                }
            }
            w = match hp.combine {
                Combine::AverageIterate if hp.inner_steps > 0 => sum.divided_by(f64::from(hp.inner_steps)),
                _ => u,
            };
            rec.record(t + 1, &w, transport.comm_stats());
        }
        Ok(())
    })();
    let shutdown = transport.broadcast(&Message::Shutdown);
    result?;
    shutdown?;
    Ok(RunOutcome {
        w,
        metrics: rec.metrics,
        status,
    })
}

fn expect_stats(msg: Message, round: u32, step: u32, worker: u32, dim: usize) -> Result<BatchStats, EngineError> {
    match msg {
        Message::MiniBatchStats {
            round: r,
            inner_step,
            worker_id,
            batch_size,
            g_u,
            g_w,
        } => {
            if r != round || inner_step != step || worker_id != worker {
                return Err(EngineError::ProtocolOrder(format!(
                    "expected stats for ({round}, {step}) from worker {worker}, got ({r}, {inner_step}) from {worker_id}"
                )));
            }
            if g_u.len() != dim || g_w.len() != dim {
                return Err(ModelError::DimensionMismatch {
                    expected: dim,
                    found: g_u.len().max(g_w.len()),
                }
                .into());
            }
            Ok(BatchStats { batch_size, g_u, g_w })
        }
        other => Err(EngineError::UnexpectedMessage {
            expected: "MiniBatchStats",
            got: other.kind_name(),
        }),
    }
}

#[derive(Debug, Clone)]
pub struct DisSvrgWorkerConfig {
    pub kind: LossKind,
    pub hp: HyperParams,
    pub batch: MiniBatchParams,
}

/// Worker loop of mini-batch distributed SVRG: answers `Params` with the
/// local gradient sum and every `InnerParams` with mini-batch sums, until
/// `Shutdown`. Returns the number of inner steps served.
pub fn dissvrg_worker_run<T: WorkerTransport + ?Sized>(
    partition: &Partition,
    cfg: &DisSvrgWorkerConfig,
    transport: &mut T,
) -> Result<u64, EngineError> {
    let id = transport.worker_id();
    let q = partition.len();
    let b = cfg.batch.batch_size as usize;
    if b == 0 || b > q {
        return Err(EngineError::InvalidParams(format!("batch size {b} must be in 1..={q}")));
    }
    let mut rng = worker_rng(cfg.hp.seed, id);
    let mut anchor: Option<(u32, ModelVector)> = None;
    let mut next_step = 0u32;
    let mut served = 0u64;
    loop {
        match transport.recv()? {
            Message::Shutdown => return Ok(served),
            Message::Params { round, w } => {
                if let Some((prev, _)) = &anchor {
                    if round <= *prev {
                        return Err(EngineError::ProtocolOrder(format!(
                            "worker {id}: round {round} after round {prev}"
                        )));
                    }
                }
                let z_k = crate::engine::local_gradient_sum(&partition.instances, &w, &cfg.kind, cfg.hp.lambda)?;
                transport.send(&Message::LocalGradSum { round, worker_id: id, z_k })?;
                anchor = Some((round, w));
                next_step = 0;
            }
            Message::InnerParams { round, inner_step, u_m } => {
                let Some((current, w_t)) = &anchor else {
                    return Err(EngineError::ProtocolOrder(format!("worker {id}: inner step before any round")));
                };
                if round != *current || inner_step != next_step {
                    return Err(EngineError::ProtocolOrder(format!(
                        "worker {id}: inner step ({round}, {inner_step}) while expecting ({current}, {next_step})"
                    )));
                }
                let batch = sample_batch(&mut rng, q, b);
                let (g_u, g_w) = minibatch_sums(&partition.instances, &batch, &u_m, w_t, &cfg.kind, cfg.hp.lambda)?;
                transport.send(&Message::MiniBatchStats {
                    round,
                    inner_step,
                    worker_id: id,
                    batch_size: batch.len() as u32,
                    g_u,
                    g_w,
                })?;
                next_step += 1;
                served += 1;
            }
            other => {
                return Err(EngineError::UnexpectedMessage {
                    expected: "Params or InnerParams",
                    got: other.kind_name(),
                })
            }
        }
    }
}

/// Runs mini-batch distributed SVRG with worker threads over the in-process
/// transport.
pub fn run_dissvrg_in_process(
    partitions: &[Partition],
    kind: &LossKind,
    hp: &HyperParams,
    batch: MiniBatchParams,
    w0: Option<ModelVector>,
    monitor: Option<Monitor<'_>>,
) -> Result<RunOutcome, EngineError> {
    if !(hp.eta > 0.0) {
        return Err(EngineError::InvalidParams(format!("eta must be positive, got {}", hp.eta)));
    }
    batch.validate(partitions)?;
    let dim = partition_dim(partitions, kind, w0.as_ref());
    let n_total = partitions.iter().map(Partition::len).sum();
    let (mut master, workers) = in_process(partitions.len() as u32);
    let wcfg = DisSvrgWorkerConfig {
        kind: kind.clone(),
        hp: hp.clone(),
        batch,
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
                s.spawn(move || dissvrg_worker_run(part, wcfg, &mut link))
            })
            .collect();
        let outcome = dissvrg_master_run(&mcfg, &mut master, monitor);
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
