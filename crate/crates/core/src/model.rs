//! Per-instance losses, their gradients, the averaged objective and the
//! smoothness / strong-convexity constants used by the rate analysis.
//!
//! Every loss carries its own `lambda/2 * ||w||^2` term, so the objective is
//! `P(w) = (1/n) sum_i f_i(w)` with the regularizer folded into each `f_i`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Width of the quadratic zone of the smoothed hinge.
pub const HINGE_SMOOTHING: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch: model has {expected} coordinates, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("quadratic loss needs d = 1, got d = {0}")]
    QuadraticDimension(usize),
    #[error("quadratic loss has no coefficient for instance {0}")]
    MissingCoefficient(usize),
    #[error("invalid quadratic curvature a = {0} (must be > 0)")]
    BadCurvature(f64),
    #[error("{0}")]
    NotStronglyConvex(String),
}

/// A training instance with sparse features and a ±1 label.
///
/// `id` is the position of the instance in the dataset it was loaded from
/// and survives partitioning and shuffling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledInstance {
    pub id: usize,
    pub features: Vec<(usize, f64)>,
    pub label: i8,
}

impl LabeledInstance {
    pub fn new(id: usize, features: Vec<(usize, f64)>, label: i8) -> Self {
        LabeledInstance {
            id,
            features,
            label: if label > 0 { 1 } else { -1 },
        }
    }

    pub fn y(&self) -> f64 {
        f64::from(self.label)
    }

    pub fn dot(&self, w: &[f64]) -> f64 {
        self.features.iter().map(|&(j, v)| v * w[j]).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.features.iter().map(|&(_, v)| v * v).sum()
    }

    /// One past the largest feature index, or 0 for an empty vector.
    pub fn min_dim(&self) -> usize {
        self.features.last().map_or(0, |&(j, _)| j + 1)
    }
}

/// Dense parameter vector. Also used for gradients and gradient sums.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelVector(pub Vec<f64>);

impl ModelVector {
    pub fn zeros(d: usize) -> Self {
        ModelVector(vec![0.0; d])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        ModelVector(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn dist_sq(&self, other: &ModelVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self) -> Result<(), ModelError> {
        match self.0.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(j) => Err(ModelError::NonFinite(format!(
                "coordinate {j} is {}",
                self.0[j]
            ))),
        }
    }

    /// `self += alpha * x`
    pub fn axpy(&mut self, alpha: f64, x: &ModelVector) {
        for (a, b) in self.0.iter_mut().zip(&x.0) {
            *a += alpha * b;
        }
    }

    /// `self += x`
    pub fn add_assign(&mut self, x: &ModelVector) {
        for (a, b) in self.0.iter_mut().zip(&x.0) {
            *a += b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for a in &mut self.0 {
            *a *= alpha;
        }
    }

    /// Coordinate-wise `self / divisor`.
    pub fn divided_by(&self, divisor: f64) -> ModelVector {
        ModelVector(self.0.iter().map(|v| v / divisor).collect())
    }

    pub fn dot(&self, other: &ModelVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn sub(&self, other: &ModelVector) -> ModelVector {
        ModelVector(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }
}

impl From<Vec<f64>> for ModelVector {
    fn from(v: Vec<f64>) -> Self {
        ModelVector(v)
    }
}

/// Which per-instance loss is being minimized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `log(1 + exp(-y x^T w)) + lambda/2 ||w||^2`
    LogisticL2,
    /// Hinge with a quadratic zone of width [`HINGE_SMOOTHING`] below margin 1.
    SmoothedHingeL2,
    /// Scalar quadratics `a_i (w - b_i)^2 + lambda/2 w^2`; instance `id`
    /// selects `coeffs[id]`.
    Quadratic1D { coeffs: Vec<(f64, f64)> },
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::LogisticL2 => "logistic",
            LossKind::SmoothedHingeL2 => "smoothed_hinge",
            LossKind::Quadratic1D { .. } => "quadratic",
        }
    }

    fn quadratic_coeff(coeffs: &[(f64, f64)], inst: &LabeledInstance) -> Result<(f64, f64), ModelError> {
        let &(a, b) = coeffs
            .get(inst.id)
            .ok_or(ModelError::MissingCoefficient(inst.id))?;
        if !(a > 0.0) {
            return Err(ModelError::BadCurvature(a));
        }
        Ok((a, b))
    }
}

/// Lipschitz constant of every per-instance gradient and a strong-convexity
/// lower bound shared by all local objectives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessConstants {
    pub l: f64,
    pub mu: f64,
}

fn check_dims(kind: &LossKind, w: &[f64], inst: &LabeledInstance) -> Result<(), ModelError> {
    if let LossKind::Quadratic1D { .. } = kind {
        if w.len() != 1 {
            return Err(ModelError::QuadraticDimension(w.len()));
        }
    }
    let need = inst.min_dim();
    if need > w.len() {
        return Err(ModelError::DimensionMismatch {
            expected: w.len(),
            found: need,
        });
    }
    Ok(())
}

/// `log(1 + exp(-m))` without exponentiating a positive argument.
pub fn log1p_exp_neg(m: f64) -> f64 {
    if m >= 0.0 {
        (-m).exp().ln_1p()
    } else {
        -m + m.exp().ln_1p()
    }
}

/// `1 / (1 + exp(m))`, the logistic of `-m`.
pub fn sigmoid_neg(m: f64) -> f64 {
    if m >= 0.0 {
        let e = (-m).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + m.exp())
    }
}

fn hinge_value(m: f64) -> f64 {
    let h = HINGE_SMOOTHING;
    if m >= 1.0 {
        0.0
    } else if m > 1.0 - h {
        (1.0 - m) * (1.0 - m) / (2.0 * h)
    } else {
        1.0 - m - h / 2.0
    }
}

fn hinge_slope(m: f64) -> f64 {
    let h = HINGE_SMOOTHING;
    if m >= 1.0 {
        0.0
    } else if m > 1.0 - h {
        -(1.0 - m) / h
    } else {
        -1.0
    }
}

/// Derivative of the data term with respect to the margin `m = y x^T w`.
fn margin_slope(kind: &LossKind, m: f64) -> f64 {
    match kind {
        LossKind::LogisticL2 => -sigmoid_neg(m),
        LossKind::SmoothedHingeL2 => hinge_slope(m),
        LossKind::Quadratic1D { .. } => unreachable!("quadratic loss has no margin"),
    }
}

/// Second derivative of the data term with respect to the margin.
fn margin_curvature(kind: &LossKind, m: f64) -> f64 {
    match kind {
        LossKind::LogisticL2 => {
            let s = sigmoid_neg(m);
            s * (1.0 - s)
        }
        LossKind::SmoothedHingeL2 => {
            let h = HINGE_SMOOTHING;
            if m < 1.0 && m > 1.0 - h {
                1.0 / h
            } else {
                0.0
            }
        }
        LossKind::Quadratic1D { .. } => unreachable!("quadratic loss has no margin"),
    }
}

fn reg_value(w: &[f64], lambda: f64) -> f64 {
    0.5 * lambda * w.iter().map(|v| v * v).sum::<f64>()
}

/// `f_i(w)`.
pub fn loss_value(
    kind: &LossKind,
    w: &ModelVector,
    inst: &LabeledInstance,
    lambda: f64,
) -> Result<f64, ModelError> {
    let w = w.as_slice();
    check_dims(kind, w, inst)?;
    let value = match kind {
        LossKind::Quadratic1D { coeffs } => {
            let (a, b) = LossKind::quadratic_coeff(coeffs, inst)?;
            a * (w[0] - b) * (w[0] - b) + reg_value(w, lambda)
        }
        LossKind::LogisticL2 => log1p_exp_neg(inst.y() * inst.dot(w)) + reg_value(w, lambda),
        LossKind::SmoothedHingeL2 => hinge_value(inst.y() * inst.dot(w)) + reg_value(w, lambda),
    };
    if !value.is_finite() {
        return Err(ModelError::NonFinite(format!(
            "loss of instance {} is {value}",
            inst.id
        )));
    }
    Ok(value)
}

/// Writes `grad f_i(w)` into `out`, overwriting it.
pub fn loss_grad_into(
    kind: &LossKind,
    w: &[f64],
    inst: &LabeledInstance,
    lambda: f64,
    out: &mut [f64],
) -> Result<(), ModelError> {
    check_dims(kind, w, inst)?;
    if out.len() != w.len() {
        return Err(ModelError::DimensionMismatch {
            expected: w.len(),
            found: out.len(),
        });
    }
    for (o, &wj) in out.iter_mut().zip(w) {
        *o = lambda * wj;
    }
    match kind {
        LossKind::Quadratic1D { coeffs } => {
            let (a, b) = LossKind::quadratic_coeff(coeffs, inst)?;
            out[0] += 2.0 * a * (w[0] - b);
        }
        _ => {
            let y = inst.y();
            let coef = y * margin_slope(kind, y * inst.dot(w));
            for &(j, v) in &inst.features {
                out[j] += coef * v;
            }
        }
    }
    Ok(())
}

/// `grad f_i(w)` as a fresh dense vector.
pub fn loss_grad(
    kind: &LossKind,
    w: &ModelVector,
    inst: &LabeledInstance,
    lambda: f64,
) -> Result<ModelVector, ModelError> {
    let mut out = vec![0.0; w.len()];
    loss_grad_into(kind, w.as_slice(), inst, lambda, &mut out)?;
    Ok(ModelVector(out))
}

/// Adds `grad^2 f_i(w)` (row-major, `d x d`) into `hess`.
pub fn loss_hessian_add(
    kind: &LossKind,
    w: &[f64],
    inst: &LabeledInstance,
    lambda: f64,
    hess: &mut [f64],
) -> Result<(), ModelError> {
    check_dims(kind, w, inst)?;
    let d = w.len();
    for j in 0..d {
        hess[j * d + j] += lambda;
    }
    match kind {
        LossKind::Quadratic1D { coeffs } => {
            let (a, _) = LossKind::quadratic_coeff(coeffs, inst)?;
            hess[0] += 2.0 * a;
        }
        _ => {
            let curv = margin_curvature(kind, inst.y() * inst.dot(w));
            if curv != 0.0 {
                for &(j, vj) in &inst.features {
                    for &(k, vk) in &inst.features {
                        hess[j * d + k] += curv * vj * vk;
                    }
                }
            }
        }
    }
    Ok(())
}

/// `P(w) = (1/n) sum_i f_i(w)`, summed in ascending instance order.
pub fn objective(
    kind: &LossKind,
    w: &ModelVector,
    instances: &[LabeledInstance],
    lambda: f64,
) -> Result<f64, ModelError> {
    if instances.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let mut total = 0.0;
    for inst in instances {
        total += loss_value(kind, w, inst, lambda)?;
    }
    Ok(total / instances.len() as f64)
}

/// Sum (not mean) of `grad f_i(w)` over `instances`, in order.
pub fn gradient_sum(
    kind: &LossKind,
    w: &ModelVector,
    instances: &[LabeledInstance],
    lambda: f64,
) -> Result<ModelVector, ModelError> {
    let d = w.len();
    let mut total = vec![0.0; d];
    let mut scratch = vec![0.0; d];
    for inst in instances {
        loss_grad_into(kind, w.as_slice(), inst, lambda, &mut scratch)?;
        for (t, g) in total.iter_mut().zip(&scratch) {
            *t += g;
        }
    }
    Ok(ModelVector(total))
}

/// `grad P(w)`.
pub fn full_gradient(
    kind: &LossKind,
    w: &ModelVector,
    instances: &[LabeledInstance],
    lambda: f64,
) -> Result<ModelVector, ModelError> {
    if instances.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    Ok(gradient_sum(kind, w, instances, lambda)?.divided_by(instances.len() as f64))
}

/// Upper bound `L` on every per-instance gradient Lipschitz constant and
/// lower bound `mu` on the strong convexity of every local objective.
pub fn smoothness_bound(
    kind: &LossKind,
    instances: &[LabeledInstance],
    lambda: f64,
) -> Result<SmoothnessConstants, ModelError> {
    if instances.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let max_norm_sq = || {
        instances
            .iter()
            .map(LabeledInstance::norm_sq)
            .fold(0.0_f64, f64::max)
    };
    let (l, mu) = match kind {
        LossKind::LogisticL2 => (max_norm_sq() / 4.0 + lambda, lambda),
        LossKind::SmoothedHingeL2 => (max_norm_sq() / HINGE_SMOOTHING + lambda, lambda),
        LossKind::Quadratic1D { coeffs } => {
            let mut lo = f64::INFINITY;
            let mut hi = 0.0_f64;
            for inst in instances {
                let (a, _) = LossKind::quadratic_coeff(coeffs, inst)?;
                lo = lo.min(a);
                hi = hi.max(a);
            }
            (2.0 * hi + lambda, 2.0 * lo + lambda)
        }
    };
    if !(mu > 0.0) {
        return Err(ModelError::NotStronglyConvex(format!(
            "{} loss with lambda = {lambda} has no strong-convexity margin",
            kind.name()
        )));
    }
    Ok(SmoothnessConstants { l: l.max(mu), mu })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_kind() -> LossKind {
        LossKind::Quadratic1D {
            coeffs: vec![(1.0, 1.0), (100.0, 10.0)],
        }
    }

    fn toy_instances() -> Vec<LabeledInstance> {
        vec![
            LabeledInstance::new(0, vec![], 1),
            LabeledInstance::new(1, vec![], 1),
        ]
    }

    fn random_instance(rng: &mut ChaCha8Rng, id: usize, d: usize) -> LabeledInstance {
        let mut features = Vec::new();
        for j in 0..d {
            if rng.random_bool(0.7) {
                features.push((j, rng.random_range(-2.0..2.0)));
            }
        }
        let label = if rng.random_bool(0.5) { 1 } else { -1 };
        LabeledInstance::new(id, features, label)
    }

    #[test]
    fn logistic_at_origin_is_log_two() {
        let inst = LabeledInstance::new(0, vec![(0, 3.0), (2, -1.5)], -1);
        let v = loss_value(&LossKind::LogisticL2, &ModelVector::zeros(3), &inst, 0.0).unwrap();
        assert_eq!(v, std::f64::consts::LN_2);
    }

    #[test]
    fn logistic_reference_value() {
        // log(1 + e^2) + 0.25, evaluated at 40 digits
        let inst = LabeledInstance::new(0, vec![(0, -2.0), (1, 3.0)], 1);
        let w = ModelVector::from_vec(vec![1.0, 0.0]);
        let v = loss_value(&LossKind::LogisticL2, &w, &inst, 0.5).unwrap();
        assert_relative_eq!(v, 2.376_928_011_042_972_5, max_relative = 1e-15);
    }

    #[test]
    fn logistic_survives_extreme_margins() {
        let inst = LabeledInstance::new(0, vec![(0, 1.0)], 1);
        let big = loss_value(&LossKind::LogisticL2, &ModelVector::from_vec(vec![-800.0]), &inst, 0.0).unwrap();
        assert_relative_eq!(big, 800.0, max_relative = 1e-15);
        let small = loss_value(&LossKind::LogisticL2, &ModelVector::from_vec(vec![800.0]), &inst, 0.0).unwrap();
        assert!((0.0..1e-300).contains(&small));
        let g = loss_grad(&LossKind::LogisticL2, &ModelVector::from_vec(vec![-800.0]), &inst, 0.0).unwrap();
        assert_eq!(g.0, vec![-1.0]);
    }

    #[test]
    fn quadratic_values_and_gradients() {
        let kind = toy_kind();
        let insts = toy_instances();
        assert_eq!(loss_value(&kind, &ModelVector::from_vec(vec![1.0]), &insts[0], 0.0).unwrap(), 0.0);
        let g = loss_grad(&kind, &ModelVector::zeros(1), &insts[1], 0.0).unwrap();
        assert_eq!(g.0, vec![-2000.0]);
        assert_eq!(objective(&kind, &ModelVector::zeros(1), &insts, 0.0).unwrap(), 5000.5);
    }

    #[test]
    fn quadratic_minimizer_has_zero_gradient() {
        let w_star = ModelVector::from_vec(vec![2002.0 / 202.0]);
        let g = full_gradient(&toy_kind(), &w_star, &toy_instances(), 0.0).unwrap();
        assert!(g.0[0].abs() < 1e-10);
        let p_star = objective(&toy_kind(), &w_star, &toy_instances(), 0.0).unwrap();
        for dw in [-1e-3, 1e-3] {
            let p = objective(&toy_kind(), &ModelVector::from_vec(vec![w_star.0[0] + dw]), &toy_instances(), 0.0).unwrap();
            assert!(p > p_star);
        }
    }

    #[test]
    fn quadratic_rejects_wrong_dimension() {
        let err = loss_value(&toy_kind(), &ModelVector::zeros(2), &toy_instances()[0], 0.0).unwrap_err();
        assert_eq!(err, ModelError::QuadraticDimension(2));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let inst = LabeledInstance::new(0, vec![(4, 1.0)], 1);
        let err = loss_grad(&LossKind::LogisticL2, &ModelVector::zeros(3), &inst, 0.0).unwrap_err();
        assert_eq!(err, ModelError::DimensionMismatch { expected: 3, found: 5 });
    }

    #[test]
    fn single_instance_objective_equals_loss() {
        let inst = LabeledInstance::new(0, vec![(0, 0.3), (1, -0.7)], 1);
        let w = ModelVector::from_vec(vec![0.2, 1.1]);
        let one = objective(&LossKind::SmoothedHingeL2, &w, std::slice::from_ref(&inst), 0.1).unwrap();
        assert_eq!(one, loss_value(&LossKind::SmoothedHingeL2, &w, &inst, 0.1).unwrap());
    }

    #[test]
    fn logistic_gradient_at_origin() {
        let inst = LabeledInstance::new(0, vec![(0, 2.0), (2, -4.0)], -1);
        let g = loss_grad(&LossKind::LogisticL2, &ModelVector::zeros(3), &inst, 0.0).unwrap();
        assert_eq!(g.0, vec![1.0, 0.0, -2.0]);
    }

    #[test]
    fn smoothness_constants_match_formulas() {
        let c = smoothness_bound(&toy_kind(), &toy_instances(), 0.0).unwrap();
        assert_eq!(c, SmoothnessConstants { l: 200.0, mu: 2.0 });

        let s = std::f64::consts::FRAC_1_SQRT_2;
        let unit = vec![
            LabeledInstance::new(0, vec![(0, 1.0)], 1),
            LabeledInstance::new(1, vec![(0, s), (1, s)], -1),
        ];
        let c = smoothness_bound(&LossKind::LogisticL2, &unit, 1e-4).unwrap();
        assert_relative_eq!(c.l, 0.25 + 1e-4, max_relative = 1e-14);
        assert_eq!(c.mu, 1e-4);

        assert!(matches!(
            smoothness_bound(&LossKind::LogisticL2, &unit, 0.0),
            Err(ModelError::NotStronglyConvex(_))
        ));
        assert_eq!(
            smoothness_bound(&LossKind::LogisticL2, &[], 1.0),
            Err(ModelError::EmptyDataset)
        );
    }

    // Central differences against the analytic gradient for every loss.
    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = 6;
        for kind in [LossKind::LogisticL2, LossKind::SmoothedHingeL2] {
            for id in 0..200 {
                let inst = random_instance(&mut rng, id, d);
                let w: Vec<f64> = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();
                let lambda = 0.3;
                let g = loss_grad(&kind, &ModelVector(w.clone()), &inst, lambda).unwrap();
                for j in 0..d {
                    let h = 1e-6 * (1.0 + w[j].abs());
                    let mut wp = w.clone();
                    wp[j] += h;
                    let mut wm = w.clone();
                    wm[j] -= h;
                    let fp = loss_value(&kind, &ModelVector(wp), &inst, lambda).unwrap();
                    let fm = loss_value(&kind, &ModelVector(wm), &inst, lambda).unwrap();
                    let fd = (fp - fm) / (2.0 * h);
                    // the hinge kinks in its second derivative; skip points
                    // straddling a zone boundary
                    let m = inst.y() * inst.dot(&w);
                    let near_kink = matches!(kind, LossKind::SmoothedHingeL2)
                        && ((m - 1.0).abs() < 1e-4 || (m - 0.5).abs() < 1e-4);
                    if near_kink {
                        continue;
                    }
                    let err = (fd - g.0[j]).abs() / g.0[j].abs().max(1.0);
                    assert!(err < 1e-6, "{kind:?} coord {j}: fd {fd} vs {}", g.0[j]);
                }
            }
        }
        let kind = toy_kind();
        for inst in toy_instances() {
            for _ in 0..50 {
                let w = rng.random_range(-20.0..20.0);
                let h = 1e-6 * (1.0 + f64::abs(w));
                let fp = loss_value(&kind, &ModelVector(vec![w + h]), &inst, 0.2).unwrap();
                let fm = loss_value(&kind, &ModelVector(vec![w - h]), &inst, 0.2).unwrap();
                let g = loss_grad(&kind, &ModelVector(vec![w]), &inst, 0.2).unwrap().0[0];
                let fd = (fp - fm) / (2.0 * h);
                assert!((fd - g).abs() / g.abs().max(1.0) < 1e-6);
            }
        }
    }

    #[test]
    fn sampled_gradients_respect_lipschitz_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = 5;
        for kind in [LossKind::LogisticL2, LossKind::SmoothedHingeL2] {
            let insts: Vec<_> = (0..40).map(|i| random_instance(&mut rng, i, d)).collect();
            let consts = smoothness_bound(&kind, &insts, 0.05).unwrap();
            for _ in 0..1000 {
                let inst = &insts[rng.random_range(0..insts.len())];
                let a = ModelVector((0..d).map(|_| rng.random_range(-3.0..3.0)).collect());
                let b = ModelVector((0..d).map(|_| rng.random_range(-3.0..3.0)).collect());
                let ga = loss_grad(&kind, &a, inst, 0.05).unwrap();
                let gb = loss_grad(&kind, &b, inst, 0.05).unwrap();
                assert!(ga.dist_sq(&gb).sqrt() <= consts.l * a.dist_sq(&b).sqrt() * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn local_objectives_are_mu_strongly_convex() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = 4;
        for kind in [LossKind::LogisticL2, LossKind::SmoothedHingeL2] {
            let insts: Vec<_> = (0..30).map(|i| random_instance(&mut rng, i, d)).collect();
            let mu = smoothness_bound(&kind, &insts, 0.1).unwrap().mu;
            for _ in 0..300 {
                let a = ModelVector((0..d).map(|_| rng.random_range(-3.0..3.0)).collect());
                let b = ModelVector((0..d).map(|_| rng.random_range(-3.0..3.0)).collect());
                let fa = objective(&kind, &a, &insts, 0.1).unwrap();
                let fb = objective(&kind, &b, &insts, 0.1).unwrap();
                let gb = full_gradient(&kind, &b, &insts, 0.1).unwrap();
                let rhs = fb + gb.dot(&a.sub(&b)) + 0.5 * mu * a.dist_sq(&b);
                assert!(fa >= rhs - 1e-12 * fa.abs().max(1.0));
            }
        }
    }

    #[test]
    fn objective_is_bit_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let insts: Vec<_> = (0..100).map(|i| random_instance(&mut rng, i, 8)).collect();
        let w = ModelVector((0..8).map(|_| rng.random_range(-1.0..1.0)).collect());
        let a = objective(&LossKind::LogisticL2, &w, &insts, 1e-3).unwrap();
        let b = objective(&LossKind::LogisticL2, &w, &insts, 1e-3).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
