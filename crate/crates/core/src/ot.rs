//! Entropic optimal transport on discrete measures.
//!
//! The solver alternates diagonal scalings of the Gibbs kernel
//! `K = exp(-C / lambda)`: starting from a column scaling of ones,
//!
//! ```text
//! row_scale = row_marginal ./ (K  * col_scale)
//! col_scale = col_marginal ./ (K' * row_scale)
//! ```
//!
//! and stops early once the mean absolute update of the column scaling drops
//! below `delta`. The converged plan is `diag(row_scale) K diag(col_scale)`
//! and the reported distance is its inner product with the cost matrix.
//!
//! A log-domain variant handles regimes where the kernel underflows in 64-bit
//! arithmetic, and a brute-force oracle solves small uniform-marginal
//! instances exactly for validation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Vector};
use crate::scalar::Scalar;

/// Probability weights over support points: strictly positive, summing to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure<S> {
    weights: Vector<S>,
}

impl<S: Scalar> DiscreteMeasure<S> {
    pub fn new(weights: Vector<S>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidParam("measure needs at least one support point".into()));
        }
        if weights.as_slice().iter().any(|&w| !(w > S::zero())) {
            return Err(Error::InvalidParam("measure weights must be strictly positive".into()));
        }
        let total = weights.sum();
        if (total - S::one()).abs() > S::mass_tolerance() {
            return Err(Error::InvalidParam(format!(
                "measure weights sum to {total}, expected 1"
            )));
        }
        Ok(Self { weights })
    }

    /// Uniform weights `1/n`; rejects `n = 0`.
    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParam("uniform measure needs n >= 1".into()));
        }
        let w = S::one() / S::from_usize(n).unwrap();
        Ok(Self {
            weights: Vector::new(vec![w; n]),
        })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[S] {
        self.weights.as_slice()
    }
}

/// Pairwise cost between support points; entries must be finite.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMat<S> {
    inner: Matrix<S>,
}

impl<S: Scalar> CostMat<S> {
    pub fn new(inner: Matrix<S>) -> Result<Self> {
        if !inner.is_all_finite() {
            return Err(Error::NonFinite("cost matrix entries".into()));
        }
        Ok(Self { inner })
    }

    pub fn inner(&self) -> &Matrix<S> {
        &self.inner
    }

    pub fn rows(&self) -> usize {
        self.inner.rows()
    }

    pub fn cols(&self) -> usize {
        self.inner.cols()
    }
}

/// Nonnegative coupling whose marginals match the prescribed measures up to
/// the solver's reported residual.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan<S> {
    inner: Matrix<S>,
}

impl<S: Scalar> TransportPlan<S> {
    pub fn new(inner: Matrix<S>) -> Result<Self> {
        if inner.data().iter().any(|&x| x < S::zero()) {
            return Err(Error::InvalidParam("transport plan entries must be nonnegative".into()));
        }
        Ok(Self { inner })
    }

    pub fn inner(&self) -> &Matrix<S> {
        &self.inner
    }

    pub fn rows(&self) -> usize {
        self.inner.rows()
    }

    pub fn cols(&self) -> usize {
        self.inner.cols()
    }

    /// Column `n` of the plan (one prompt's mass over the support points).
    pub fn column(&self, n: usize) -> Vec<S> {
        (0..self.rows()).map(|m| self.inner.at(m, n)).collect()
    }
}

/// Solver knobs. Defaults: `lambda = 0.1`, 100 iterations, `delta = 0.01`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinkhornConfig<S> {
    /// Entropy weight of the regularized objective.
    pub lambda: S,
    /// Inner-loop iteration cap.
    pub max_iter: usize,
    /// Early-stop threshold on the mean absolute update of the column scaling.
    pub delta: S,
    /// Solve in the log domain. The kernel-domain solver is the default; this
    /// is the opt-in safeguard for small lambda.
    #[serde(default)]
    pub log_stabilized: bool,
}

impl<S: Scalar> Default for SinkhornConfig<S> {
    fn default() -> Self {
        Self {
            lambda: S::of(0.1),
            max_iter: 100,
            delta: S::of(0.01),
            log_stabilized: false,
        }
    }
}

impl<S: Scalar> SinkhornConfig<S> {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > S::zero()) {
            return Err(Error::InvalidParam(format!("lambda {} must be > 0", self.lambda)));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidParam("max_iter must be >= 1".into()));
        }
        if !(self.delta > S::zero()) {
            return Err(Error::InvalidParam(format!("delta {} must be > 0", self.delta)));
        }
        Ok(())
    }

    /// Same config with a different entropy weight.
    pub fn with_lambda(mut self, lambda: S) -> Self {
        self.lambda = lambda;
        self
    }
}

/// Converged plan plus diagnostics.
#[derive(Debug, Clone)]
pub struct SinkhornResult<S> {
    pub plan: TransportPlan<S>,
    /// `<plan, cost>`.
    pub cost: S,
    pub iterations: usize,
    /// True iff the early-stop criterion fired before the iteration cap.
    pub converged: bool,
    /// L1 deviation of the worse of the two marginals.
    pub marginal_residual: S,
}

fn check_dims<S: Scalar>(
    cost: &CostMat<S>,
    row_marginal: &DiscreteMeasure<S>,
    col_marginal: &DiscreteMeasure<S>,
) -> Result<()> {
    if cost.rows() != row_marginal.len() || cost.cols() != col_marginal.len() {
        return Err(Error::Shape(format!(
            "cost is {}x{} but marginals have {} and {} points",
            cost.rows(),
            cost.cols(),
            row_marginal.len(),
            col_marginal.len()
        )));
    }
    Ok(())
}

fn finish<S: Scalar>(
    plan_mat: Matrix<S>,
    cost: &CostMat<S>,
    row_marginal: &DiscreteMeasure<S>,
    col_marginal: &DiscreteMeasure<S>,
    iterations: usize,
    converged: bool,
) -> Result<SinkhornResult<S>> {
    let value = plan_mat.frob_dot(cost.inner())?;
    if value.is_nan() {
        return Err(Error::NonFinite("transport cost is NaN".into()));
    }
    let mut row_residual = S::zero();
    for m in 0..plan_mat.rows() {
        let sum: S = plan_mat.row(m).iter().copied().sum();
        row_residual += (sum - row_marginal.weights()[m]).abs();
    }
    let mut col_residual = S::zero();
    for n in 0..plan_mat.cols() {
        let mut sum = S::zero();
        for m in 0..plan_mat.rows() {
            sum += plan_mat.at(m, n);
        }
        col_residual += (sum - col_marginal.weights()[n]).abs();
    }
    Ok(SinkhornResult {
        plan: TransportPlan::new(plan_mat)?,
        cost: value,
        iterations,
        converged,
        marginal_residual: row_residual.max(col_residual),
    })
}

/// Kernel-domain Sinkhorn iteration.
///
/// Errors if the kernel `exp(-C/lambda)` has an all-zero row or column after
/// 64-bit evaluation, or if a scaling denominator underflows.
pub fn sinkhorn<S: Scalar>(
    cost: &CostMat<S>,
    row_marginal: &DiscreteMeasure<S>,
    col_marginal: &DiscreteMeasure<S>,
    cfg: &SinkhornConfig<S>,
) -> Result<SinkhornResult<S>> {
    cfg.validate()?;
    check_dims(cost, row_marginal, col_marginal)?;
    let (m, n) = (cost.rows(), cost.cols());
    let kernel = cost.inner().map(|c| (-c / cfg.lambda).exp());
    for r in 0..m {
        if kernel.row(r).iter().all(|&x| x == S::zero()) {
            return Err(Error::KernelUnderflow(format!("kernel row {r} is all zero")));
        }
    }
    for c in 0..n {
        if (0..m).all(|r| kernel.at(r, c) == S::zero()) {
            return Err(Error::KernelUnderflow(format!("kernel column {c} is all zero")));
        }
    }

    let u = row_marginal.weights();
    let v = col_marginal.weights();
    let mut row_scale = vec![S::zero(); m];
    let mut col_scale = vec![S::one(); n];
    let mut iterations = 0;
    let mut converged = false;
    let inv_n = S::one() / S::from_usize(n).unwrap();

    for _ in 0..cfg.max_iter {
        iterations += 1;
        for r in 0..m {
            let denom: S = kernel
                .row(r)
                .iter()
                .zip(&col_scale)
                .map(|(&k, &s)| k * s)
                .sum();
            if denom < S::denom_floor() {
                return Err(Error::KernelUnderflow(format!(
                    "row-scaling denominator {denom} below {}",
                    S::denom_floor()
                )));
            }
            row_scale[r] = u[r] / denom;
        }
        let mut update = S::zero();
        for c in 0..n {
            let mut denom = S::zero();
            for r in 0..m {
                denom += kernel.at(r, c) * row_scale[r];
            }
            if denom < S::denom_floor() {
                return Err(Error::KernelUnderflow(format!(
                    "column-scaling denominator {denom} below {}",
                    S::denom_floor()
                )));
            }
            let next = v[c] / denom;
            update += (next - col_scale[c]).abs();
            col_scale[c] = next;
        }
        if update * inv_n < cfg.delta {
            converged = true;
            break;
        }
    }

    let plan_mat = Matrix::from_fn(m, n, |r, c| row_scale[r] * kernel.at(r, c) * col_scale[c]);
    finish(plan_mat, cost, row_marginal, col_marginal, iterations, converged)
}

/// Log-domain Sinkhorn: same fixed point as [`sinkhorn`], evaluated through
/// dual potentials and log-sum-exp so it stays finite where the kernel
/// underflows. Non-convergence within `max_iter` is reported via the
/// `converged` flag, not an error.
pub fn sinkhorn_log_stabilized<S: Scalar>(
    cost: &CostMat<S>,
    row_marginal: &DiscreteMeasure<S>,
    col_marginal: &DiscreteMeasure<S>,
    cfg: &SinkhornConfig<S>,
) -> Result<SinkhornResult<S>> {
    cfg.validate()?;
    check_dims(cost, row_marginal, col_marginal)?;
    let (m, n) = (cost.rows(), cost.cols());
    let lam = cfg.lambda;
    let u = row_marginal.weights();
    let v = col_marginal.weights();

    // alpha/lam and beta/lam are the logs of the kernel-domain scalings.
    let mut alpha = vec![S::zero(); m];
    let mut beta = vec![S::zero(); n];
    let mut prev_col_scale: Option<Vec<S>> = Some(vec![S::one(); n]);
    let mut iterations = 0;
    let mut converged = false;
    let inv_n = S::one() / S::from_usize(n).unwrap();
    let mut buf = vec![S::zero(); m.max(n)];

    for _ in 0..cfg.max_iter {
        iterations += 1;
        for r in 0..m {
            for c in 0..n {
                buf[c] = (beta[c] - cost.inner().at(r, c)) / lam;
            }
            alpha[r] = lam * u[r].ln() - lam * log_sum_exp(&buf[..n]);
        }
        for c in 0..n {
            for r in 0..m {
                buf[r] = (alpha[r] - cost.inner().at(r, c)) / lam;
            }
            beta[c] = lam * v[c].ln() - lam * log_sum_exp(&buf[..m]);
        }
        // Convergence metric matches the kernel-domain solver wherever the
        // column scaling is representable; otherwise keep iterating.
        let col_scale: Vec<S> = beta.iter().map(|&b| (b / lam).exp()).collect();
        if col_scale.iter().all(|x| x.is_finite()) {
            if let Some(prev) = &prev_col_scale {
                let update: S = col_scale
                    .iter()
                    .zip(prev)
                    .map(|(&a, &b)| (a - b).abs())
                    .sum();
                if update * inv_n < cfg.delta {
                    converged = true;
                    break;
                }
            }
            prev_col_scale = Some(col_scale);
        } else {
            prev_col_scale = None;
        }
    }

    let plan_mat = Matrix::from_fn(m, n, |r, c| {
        ((alpha[r] + beta[c] - cost.inner().at(r, c)) / lam).exp()
    });
    finish(plan_mat, cost, row_marginal, col_marginal, iterations, converged)
}

/// Dispatch on `cfg.log_stabilized`.
pub fn solve<S: Scalar>(
    cost: &CostMat<S>,
    row_marginal: &DiscreteMeasure<S>,
    col_marginal: &DiscreteMeasure<S>,
    cfg: &SinkhornConfig<S>,
) -> Result<SinkhornResult<S>> {
    if cfg.log_stabilized {
        sinkhorn_log_stabilized(cost, row_marginal, col_marginal, cfg)
    } else {
        sinkhorn(cost, row_marginal, col_marginal, cfg)
    }
}

fn log_sum_exp<S: Scalar>(xs: &[S]) -> S {
    let max = xs.iter().copied().fold(S::neg_infinity(), S::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<S>().ln()
}

/// `<plan, cost>`: Frobenius inner product of the plan and the cost matrix.
pub fn transport_cost<S: Scalar>(plan: &TransportPlan<S>, cost: &CostMat<S>) -> Result<S> {
    plan.inner().frob_dot(cost.inner())
}

/// Shannon entropy `-sum T ln T` with `0 ln 0 = 0`; rejects negative entries.
pub fn plan_entropy<S: Scalar>(plan: &TransportPlan<S>) -> Result<S> {
    let mut h = S::zero();
    for &t in plan.inner().data() {
        if t < S::zero() {
            return Err(Error::InvalidParam(format!("negative plan entry {t}")));
        }
        if t > S::zero() {
            h -= t * t.ln();
        }
    }
    Ok(h)
}

/// Exact uniform-marginal OT by brute force.
///
/// Each row is replicated `L/M` times and each column `L/N` times with
/// `L = lcm(M, N)`; a minimizing plan is then a scaled permutation of the
/// replicated instance, so all `L!` permutations are enumerated (capped at
/// `L <= 10`). Ties keep the first permutation in lexicographic order.
pub fn exact_ot_uniform<S: Scalar>(cost: &CostMat<S>) -> Result<(S, TransportPlan<S>)> {
    let (m, n) = (cost.rows(), cost.cols());
    if m == 0 || n == 0 {
        return Err(Error::Shape("cost matrix must be nonempty".into()));
    }
    let l = lcm(m, n);
    if l > 10 {
        return Err(Error::OracleTooLarge(format!(
            "lcm({m}, {n}) = {l} exceeds the enumeration cap of 10"
        )));
    }
    let rep_r = l / m;
    let rep_c = l / n;
    // Expanded cost: entry (i, j) of the replicated L x L instance.
    let expanded: Vec<Vec<S>> = (0..l)
        .map(|i| (0..l).map(|j| cost.inner().at(i / rep_r, j / rep_c)).collect())
        .collect();
    let nonneg = cost.inner().data().iter().all(|&x| x >= S::zero());

    let mut best_total = S::infinity();
    let mut best_perm: Vec<usize> = Vec::new();
    let mut perm = vec![0usize; l];
    let mut used = vec![false; l];
    search_permutations(
        &expanded,
        0,
        S::zero(),
        nonneg,
        &mut perm,
        &mut used,
        &mut best_total,
        &mut best_perm,
    );

    let scale = S::one() / S::from_usize(l).unwrap();
    let mut plan = Matrix::zeros(m, n);
    for (i, &j) in best_perm.iter().enumerate() {
        *plan.at_mut(i / rep_r, j / rep_c) += scale;
    }
    Ok((best_total * scale, TransportPlan::new(plan)?))
}

/// Depth-first lexicographic enumeration; prunes on partial sums only when
/// all costs are nonnegative (completions can then only add cost).
#[allow(clippy::too_many_arguments)]
fn search_permutations<S: Scalar>(
    expanded: &[Vec<S>],
    depth: usize,
    partial: S,
    nonneg: bool,
    perm: &mut Vec<usize>,
    used: &mut Vec<bool>,
    best_total: &mut S,
    best_perm: &mut Vec<usize>,
) {
    let l = expanded.len();
    if nonneg && partial >= *best_total {
        return;
    }
    if depth == l {
        if partial < *best_total {
            *best_total = partial;
            best_perm.clone_from(perm);
        }
        return;
    }
    for j in 0..l {
        if used[j] {
            continue;
        }
        used[j] = true;
        perm[depth] = j;
        search_permutations(
            expanded,
            depth + 1,
            partial + expanded[depth][j],
            nonneg,
            perm,
            used,
            best_total,
            best_perm,
        );
        used[j] = false;
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}
