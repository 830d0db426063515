//! Executable checks for the convergence analysis: contraction constants,
//! the step-size condition, the conditional mean and second moment of the
//! local stochastic direction, the c = 0 fixed-point factor, and a Newton
//! solver for reference optima.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Partition;
use crate::engine::{worker_inner_loop_observed, worker_rng, HyperParams};
use crate::model::{self, LabeledInstance, LossKind, ModelError, ModelVector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("reference optimum w* is required")]
    MissingOptimum,
    #[error("local curvature must be positive, got {0}")]
    NonPositiveCurvature(f64),
    #[error("optimum solve stalled with gradient norm {0:e}")]
    SolveStalled(f64),
}

/// Why a parameter set falls outside the regime where the rate bounds apply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Regime {
    Valid,
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryConstants {
    /// `1 - eta (2 mu + c)`
    pub alpha: f64,
    /// `c eta + 3 L^2 eta^2`
    pub beta: f64,
    /// `alpha^M + beta / (1 - alpha)`, per-round factor for last-iterate
    /// combining. `None` when `alpha` is outside (0, 1).
    pub rate_last: Option<f64>,
    /// `1 / (M (1 - alpha)) + beta / (1 - alpha)`, for average combining.
    pub rate_avg: Option<f64>,
    /// Smallest `M` making `rate_last < 1`; `None` outside the valid regime.
    pub m_min_last: Option<u64>,
    pub m_min_avg: Option<u64>,
    pub regime: Regime,
}

impl TheoryConstants {
    pub fn is_valid(&self) -> bool {
        self.regime == Regime::Valid
    }
}

pub fn theory_constants(l: f64, mu: f64, eta: f64, c: f64, inner_steps: u64) -> TheoryConstants {
    let alpha = 1.0 - eta * (2.0 * mu + c);
    let beta = c * eta + 3.0 * l * l * eta * eta;
    let alpha_ok = alpha > 0.0 && alpha < 1.0;
    let regime = if !(l >= mu && mu > 0.0) {
        Regime::Invalid(format!("need L >= mu > 0, got L = {l}, mu = {mu}"))
    } else if !alpha_ok {
        Regime::Invalid(format!("alpha = {alpha} not in (0, 1)"))
    } else if !(beta > 0.0 && beta < 1.0) {
        Regime::Invalid(format!("beta = {beta} not in (0, 1)"))
    } else if alpha + beta >= 1.0 {
        Regime::Invalid(format!("alpha + beta = {} >= 1", alpha + beta))
    } else {
        Regime::Valid
    };
    let m = inner_steps as f64;
    let (rate_last, rate_avg) = if alpha_ok {
        let tail = beta / (1.0 - alpha);
        (
            Some(alpha.powf(m) + tail),
            (inner_steps > 0).then(|| 1.0 / (m * (1.0 - alpha)) + tail),
        )
    } else {
        (None, None)
    };
    let (m_min_last, m_min_avg) = if regime == Regime::Valid {
        let last = (((1.0 - alpha - beta) / (1.0 - alpha)).ln() / alpha.ln()).ceil();
        let avg = (1.0 / (1.0 - alpha - beta)).ceil();
        (Some(last.max(1.0) as u64), Some(avg.max(1.0) as u64))
    } else {
        (None, None)
    };
    TheoryConstants {
        alpha,
        beta,
        rate_last,
        rate_avg,
        m_min_last,
        m_min_avg,
        regime,
    }
}

/// True iff `eta < min(2 mu / (3 L^2), 1 / (2 mu + c))` and `c > L - mu`,
/// all strict.
pub fn check_step_size(eta: f64, l: f64, mu: f64, c: f64) -> bool {
    eta > 0.0 && eta < 2.0 * mu / (3.0 * l * l) && eta < 1.0 / (2.0 * mu + c) && c > l - mu
}

/// Supremum of the step sizes accepted by [`check_step_size`].
pub fn step_size_limit(l: f64, mu: f64, c: f64) -> f64 {
    (2.0 * mu / (3.0 * l * l)).min(1.0 / (2.0 * mu + c))
}

fn mean_gradient(
    instances: &[LabeledInstance],
    w: &ModelVector,
    kind: &LossKind,
    lambda: f64,
) -> Result<ModelVector, DiagError> {
    Ok(model::full_gradient(kind, w, instances, lambda)?)
}

/// Closed-form conditional mean of the local direction
/// `v = grad f_i(u) - grad f_i(w_t) + z + c (u - w_t)` over a uniform draw
/// of `i` from the shard: `grad F_k(u) - grad F_k(w_t) + z + c (u - w_t)`.
pub fn expected_local_grad(
    instances: &[LabeledInstance],
    u: &ModelVector,
    w_t: &ModelVector,
    z: &ModelVector,
    c: f64,
    kind: &LossKind,
    lambda: f64,
) -> Result<ModelVector, DiagError> {
    if u.len() != w_t.len() || u.len() != z.len() {
        return Err(ModelError::DimensionMismatch {
            expected: u.len(),
            found: w_t.len().max(z.len()),
        }
        .into());
    }
    let gu = mean_gradient(instances, u, kind, lambda)?;
    let gw = mean_gradient(instances, w_t, kind, lambda)?;
    Ok(ModelVector(
        (0..u.len())
            .map(|j| gu.0[j] - gw.0[j] + z.0[j] + c * (u.0[j] - w_t.0[j]))
            .collect(),
    ))
}

/// The local direction for one specific instance.
pub fn local_direction(
    inst: &LabeledInstance,
    u: &ModelVector,
    w_t: &ModelVector,
    z: &ModelVector,
    c: f64,
    kind: &LossKind,
    lambda: f64,
) -> Result<ModelVector, DiagError> {
    let gu = model::loss_grad(kind, u, inst, lambda)?;
    let gw = model::loss_grad(kind, w_t, inst, lambda)?;
    Ok(ModelVector(
        (0..u.len())
            .map(|j| gu.0[j] - gw.0[j] + z.0[j] + c * (u.0[j] - w_t.0[j]))
            .collect(),
    ))
}

/// Both sides of the second-moment bound on the local direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceCheck {
    /// `E ||v||^2`, computed exhaustively over the shard.
    pub second_moment: f64,
    /// `3 (L^2 + c^2) ||u - w_t||^2 + 3 L^2 ||w_t - w*||^2`
    pub bound: f64,
}

impl VarianceCheck {
    pub fn holds(&self) -> bool {
        self.second_moment <= self.bound * (1.0 + 1e-12) + 1e-300
    }
}

/// Evaluates `E ||v||^2` over every instance of the shard and compares it
/// to the bound. `z` must be the exact global mean gradient at `w_t`.
#[allow(clippy::too_many_arguments)]
pub fn variance_bound(
    instances: &[LabeledInstance],
    u: &ModelVector,
    w_t: &ModelVector,
    z: &ModelVector,
    c: f64,
    l: f64,
    w_star: Option<&ModelVector>,
    kind: &LossKind,
    lambda: f64,
) -> Result<VarianceCheck, DiagError> {
    let w_star = w_star.ok_or(DiagError::MissingOptimum)?;
    if instances.is_empty() {
        return Err(ModelError::EmptyDataset.into());
    }
    let mut total = 0.0;
    for inst in instances {
        total += local_direction(inst, u, w_t, z, c, kind, lambda)?.norm_sq();
    }
    let second_moment = total / instances.len() as f64;
    let bound = 3.0 * (l * l + c * c) * u.dist_sq(w_t) + 3.0 * l * l * w_t.dist_sq(w_star);
    Ok(VarianceCheck {
        second_moment,
        bound,
    })
}

#[allow(clippy::too_many_arguments)]
pub fn variance_bound_holds(
    instances: &[LabeledInstance],
    u: &ModelVector,
    w_t: &ModelVector,
    z: &ModelVector,
    c: f64,
    l: f64,
    w_star: Option<&ModelVector>,
    kind: &LossKind,
    lambda: f64,
) -> Result<bool, DiagError> {
    Ok(variance_bound(instances, u, w_t, z, c, l, w_star, kind, lambda)?.holds())
}

/// Scalar problem split into local functions with curvatures `A_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticProblem {
    pub local_curvatures: Vec<f64>,
    pub global_curvature: f64,
    pub w_star: f64,
}

impl QuadraticProblem {
    /// Builds the problem for scalar quadratic shards; worker `k`'s local
    /// function is the mean of its `a_i (w - b_i)^2` terms.
    pub fn from_partitions(coeffs: &[(f64, f64)], partitions: &[Partition]) -> Result<Self, DiagError> {
        let mut local = Vec::with_capacity(partitions.len());
        let mut num = 0.0;
        let mut den = 0.0;
        for part in partitions {
            if part.is_empty() {
                return Err(ModelError::EmptyDataset.into());
            }
            let mut curv = 0.0;
            for inst in &part.instances {
                let &(a, b) = coeffs.get(inst.id).ok_or(ModelError::MissingCoefficient(inst.id))?;
                if !(a > 0.0) {
                    return Err(DiagError::NonPositiveCurvature(a));
                }
                curv += 2.0 * a;
                num += a * b;
                den += a;
            }
            local.push(curv / part.len() as f64);
        }
        let p = local.len() as f64;
        // with equal shard sizes the global Hessian is the mean of the local ones
        let global = local.iter().sum::<f64>() / p;
        Ok(QuadraticProblem {
            local_curvatures: local,
            global_curvature: global,
            w_star: num / den,
        })
    }
}

/// Per-round error factor of the idealized iteration in which every worker
/// solves its local subproblem exactly:
/// `1 - (1/p) sum_k A / (A_k + c)`. For `c = 0` this is the linearized
/// fixed-point map; `|factor| > 1` predicts divergence of the idealization.
pub fn fixed_point_factor(problem: &QuadraticProblem, c: f64) -> Result<f64, DiagError> {
    let p = problem.local_curvatures.len() as f64;
    let mut acc = 0.0;
    for &a_k in &problem.local_curvatures {
        if !(a_k > 0.0) {
            return Err(DiagError::NonPositiveCurvature(a_k));
        }
        acc += problem.global_curvature / (a_k + c);
    }
    Ok(1.0 - acc / p)
}

/// Minimizer of `P` by damped Newton iterations, to `||grad P|| <= 1e-12`
/// (or the best reachable in double precision).
pub fn solve_optimum(
    kind: &LossKind,
    instances: &[LabeledInstance],
    dim: usize,
    lambda: f64,
) -> Result<ModelVector, DiagError> {
    if instances.is_empty() {
        return Err(ModelError::EmptyDataset.into());
    }
    let n = instances.len() as f64;
    let mut w = ModelVector::zeros(dim);
    let mut best = f64::INFINITY;
    for _ in 0..200 {
        let g = model::full_gradient(kind, &w, instances, lambda)?;
        let gnorm = g.norm();
        best = best.min(gnorm);
        if gnorm <= 1e-12 {
            return Ok(w);
        }
        let mut hess = vec![0.0; dim * dim];
        for inst in instances {
            model::loss_hessian_add(kind, w.as_slice(), inst, lambda, &mut hess)?;
        }
        let h = DMatrix::from_row_slice(dim, dim, &hess) / n;
        let rhs = DVector::from_column_slice(g.as_slice());
        let step = match h.clone().cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => rhs.clone(),
        };
        let f0 = model::objective(kind, &w, instances, lambda)?;
        let slope: f64 = step.dot(&rhs);
        let mut t = 1.0;
        let mut next;
        loop {
            next = ModelVector((0..dim).map(|j| w.0[j] - t * step[j]).collect());
            let f1 = model::objective(kind, &next, instances, lambda)?;
            if f1 <= f0 - 1e-4 * t * slope || t < 1e-10 {
                break;
            }
            // near the optimum objective differences drown in rounding
            if t == 1.0 && model::full_gradient(kind, &next, instances, lambda)?.norm() < gnorm {
                break;
            }
            t *= 0.5;
        }
        if next == w {
            break;
        }
        w = next;
    }
    let g = model::full_gradient(kind, &w, instances, lambda)?.norm();
    if g <= 1e-10 {
        Ok(w)
    } else {
        Err(DiagError::SolveStalled(best.min(g)))
    }
}

/// Measured `gamma_m = (1/p) sum_k ||u_{k,m} - w*||^2` for `m = 0..=M` over
/// the first round started at `w_t`, using the workers' own sampling streams.
pub fn gamma_trace(
    partitions: &[Partition],
    w_t: &ModelVector,
    kind: &LossKind,
    hp: &HyperParams,
    w_star: &ModelVector,
) -> Result<Vec<f64>, DiagError> {
    let n: usize = partitions.iter().map(Partition::len).sum();
    let mut z = ModelVector::zeros(w_t.len());
    for part in partitions {
        z.add_assign(&model::gradient_sum(kind, w_t, &part.instances, hp.lambda)?);
    }
    let z = z.divided_by(n as f64);
    let p = partitions.len() as f64;
    let mut gamma = vec![0.0; hp.inner_steps as usize + 1];
    gamma[0] = w_t.dist_sq(w_star);
    for part in partitions {
        let mut rng = worker_rng(hp.seed, part.worker_id);
        let _ = worker_inner_loop_observed(&part.instances, w_t, &z, kind, hp, 0, &mut rng, |m, u| {
            let d: f64 = u.iter().zip(&w_star.0).map(|(a, b)| (a - b) * (a - b)).sum();
            gamma[m as usize] += d / p;
        });
    }
    Ok(gamma)
}
