//! Entropic optimal transport between two point clouds.
//!
//! The solver works on dual potentials in the log domain so that very small
//! regularization strengths (down to `1e-3` on unit-scale costs) neither
//! underflow nor overflow. Plans are always returned with their achieved
//! marginal violation; callers decide what to do with an unconverged plan.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Ground cost between a source and a target embedding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostMetric {
    /// `||a - b||^2`
    #[default]
    SquaredEuclidean,
    /// `||a - b||`
    Euclidean,
}

/// Pairwise ground costs, `n_source x n_target`, all entries finite and nonnegative.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    values: Array2<f64>,
}

impl CostMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::Input("cost matrix must be non-empty".into()));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite cost entry {bad}")));
        }
        if let Some(neg) = values.iter().find(|v| **v < 0.0) {
            return Err(Error::Input(format!("negative cost entry {neg}")));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn n_source(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_target(&self) -> usize {
        self.values.ncols()
    }

    pub fn transpose(&self) -> Self {
        Self {
            values: self.values.t().to_owned(),
        }
    }
}

/// Squared Euclidean cost between every source row and every target row.
pub fn cost_matrix(source: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<CostMatrix> {
    cost_matrix_with(source, target, CostMetric::SquaredEuclidean)
}

pub fn cost_matrix_with(
    source: ArrayView2<f64>,
    target: ArrayView2<f64>,
    metric: CostMetric,
) -> Result<CostMatrix> {
    if source.ncols() != target.ncols() {
        return Err(Error::Dimension {
            what: "feature dimension of target embeddings",
            expected: source.ncols(),
            got: target.ncols(),
        });
    }
    let sq_source = source.map_axis(Axis(1), |r| r.dot(&r));
    let sq_target = target.map_axis(Axis(1), |r| r.dot(&r));
    let mut values = source.dot(&target.t());
    for ((i, j), v) in values.indexed_iter_mut() {
        // expansion can go slightly negative through cancellation
        let d2 = (sq_source[i] + sq_target[j] - 2.0 * *v).max(0.0);
        *v = match metric {
            CostMetric::SquaredEuclidean => d2,
            CostMetric::Euclidean => d2.sqrt(),
        };
    }
    CostMatrix::new(values)
}

/// Source and target probability vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct MarginalWeights {
    pub source: Array1<f64>,
    pub target: Array1<f64>,
}

impl MarginalWeights {
    pub fn new(source: Array1<f64>, target: Array1<f64>) -> Result<Self> {
        for (name, w) in [("source", &source), ("target", &target)] {
            if w.is_empty() {
                return Err(Error::Input(format!("{name} marginal is empty")));
            }
            if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::Input(format!(
                    "{name} marginal has negative or non-finite entries"
                )));
            }
            let total = w.sum();
            if (total - 1.0).abs() > 1e-12 {
                return Err(Error::Input(format!(
                    "{name} marginal sums to {total}, not 1"
                )));
            }
        }
        Ok(Self { source, target })
    }

    pub fn uniform(n_source: usize, n_target: usize) -> Self {
        Self {
            source: Array1::from_elem(n_source, 1.0 / n_source as f64),
            target: Array1::from_elem(n_target, 1.0 / n_target as f64),
        }
    }

    pub fn swapped(&self) -> Self {
        Self {
            source: self.target.clone(),
            target: self.source.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub max_iters: usize,
    /// Stop once the largest marginal violation is at most this.
    pub tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            max_iters: 1000,
            tol: 1e-9,
        }
    }
}

impl SinkhornConfig {
    pub fn with_epsilon(epsilon: f64) -> Self {
        Self {
            epsilon,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config(format!("tol must be > 0, got {}", self.tol)));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be >= 1".into()));
        }
        Ok(())
    }
}

/// A coupling between source and target points.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    pub values: Array2<f64>,
    /// Largest absolute violation of the prescribed row/column marginals.
    pub feasibility_error: f64,
    pub iterations: usize,
    /// `false` means the iteration cap was hit before `tol` was reached.
    pub converged: bool,
}

impl TransportPlan {
    /// Frobenius inner product with a cost matrix.
    pub fn transport_cost(&self, cost: &CostMatrix) -> f64 {
        (&self.values * cost.values()).sum()
    }

    pub fn n_source(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_target(&self) -> usize {
        self.values.ncols()
    }
}

fn marginal_error(plan: &Array2<f64>, marginals: &MarginalWeights) -> f64 {
    let rows = plan.sum_axis(Axis(1));
    let cols = plan.sum_axis(Axis(0));
    let row_err = rows
        .iter()
        .zip(marginals.source.iter())
        .fold(0.0f64, |m, (r, a)| m.max((r - a).abs()));
    cols.iter()
        .zip(marginals.target.iter())
        .fold(row_err, |m, (c, b)| m.max((c - b).abs()))
}

#[inline]
fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

const ANNEAL_FACTOR: f64 = 0.5;
const ANNEAL_STAGE_TOL: f64 = 1e-3;
const ANNEAL_STAGE_MAX_ITERS: usize = 20;
/// Plain scaling iterations at the target epsilon before switching to Newton.
const WARMUP_ITERS: usize = 20;
/// Newton steps need a dense solve over the target potentials.
const NEWTON_MAX_TARGETS: usize = 512;
const NEWTON_TRUST: f64 = 4.0;

/// Dual potentials `(f, g)` with plan `pi_ij = exp((f_i + g_j - C_ij) / eps)`.
struct LogDomain<'a> {
    cost: &'a Array2<f64>,
    marginals: &'a MarginalWeights,
    log_a: Array1<f64>,
    log_b: Array1<f64>,
    f: Array1<f64>,
    g: Array1<f64>,
}

impl<'a> LogDomain<'a> {
    fn new(cost: &'a Array2<f64>, marginals: &'a MarginalWeights) -> Self {
        let (ns, nt) = cost.dim();
        Self {
            cost,
            marginals,
            log_a: marginals.source.mapv(f64::ln),
            log_b: marginals.target.mapv(f64::ln),
            f: Array1::zeros(ns),
            g: Array1::zeros(nt),
        }
    }

    /// `f_i = eps log a_i - eps LSE_j((g_j - C_ij) / eps)`; rows become exact.
    fn source_potential(&self, eps: f64, g: &Array1<f64>, out: &mut Array1<f64>) {
        for (i, row) in self.cost.axis_iter(Axis(0)).enumerate() {
            let lse = log_sum_exp(row.iter().zip(g.iter()).map(|(c, gj)| (gj - c) / eps));
            out[i] = eps * (self.log_a[i] - lse);
        }
    }

    /// Column counterpart of [`source_potential`](Self::source_potential).
    fn target_potential(&self, eps: f64, f: &Array1<f64>, out: &mut Array1<f64>) {
        for (j, col) in self.cost.axis_iter(Axis(1)).enumerate() {
            let lse = log_sum_exp(col.iter().zip(f.iter()).map(|(c, fi)| (fi - c) / eps));
            out[j] = eps * (self.log_b[j] - lse);
        }
    }

    fn plan(&self, eps: f64, f: &Array1<f64>, g: &Array1<f64>) -> Array2<f64> {
        let mut values = self.cost.clone();
        for ((i, j), v) in values.indexed_iter_mut() {
            *v = ((f[i] + g[j] - *v) / eps).exp();
        }
        values
    }

    /// One g-update followed by the f-update it implies. Returns the row
    /// violation of the plan built from the pre-update `f` and the new `g`
    /// (columns of that plan are exact).
    fn scaling_step(&mut self, eps: f64, f_next: &mut Array1<f64>) -> f64 {
        let mut g = std::mem::take(&mut self.g);
        self.target_potential(eps, &self.f, &mut g);
        self.g = g;
        self.source_potential(eps, &self.g, f_next);
        let a = &self.marginals.source;
        (0..a.len()).fold(0.0f64, |m, i| {
            if a[i] == 0.0 {
                m
            } else {
                // row_sum_i = a_i exp((f_i - f_next_i) / eps)
                m.max(a[i] * (((self.f[i] - f_next[i]) / eps).exp() - 1.0).abs())
            }
        })
    }

    /// Concave semi-dual `<g, b> + <f(g), a>` and the column residual
    /// `b - colsum(pi(g))`, with `f` eliminated so rows are exact.
    fn semi_dual(&self, eps: f64, g: &Array1<f64>) -> (f64, Array1<f64>, Array2<f64>) {
        let mut f = Array1::zeros(self.f.len());
        self.source_potential(eps, g, &mut f);
        let plan = self.plan(eps, &f, g);
        let residual = &self.marginals.target - &plan.sum_axis(Axis(0));
        let value = g.dot(&self.marginals.target) + f.dot(&self.marginals.source);
        (value, residual, plan)
    }

    /// Damped Newton ascent on the semi-dual. The Hessian is `-L / eps` with
    /// `L` the Laplacian of the column graph weighted by
    /// `w_jl = sum_i pi_ij pi_il / a_i`; it is assembled from the weights so
    /// that no cancellation occurs when the plan is nearly sparse.
    /// Returns the number of steps taken; leaves `(f, g)` consistent either way.
    fn newton(&mut self, eps: f64, tol: f64, budget: usize) -> (usize, bool) {
        let nt = self.g.len();
        let a = &self.marginals.source;
        let mut used = 0;
        let (mut value, mut residual, mut plan) = self.semi_dual(eps, &self.g);
        let mut err = residual.iter().fold(0.0f64, |m, r| m.max(r.abs()));
        let mut radius = NEWTON_TRUST * eps;
        while used < budget && err > tol {
            used += 1;
            let mut lap = Array2::<f64>::zeros((nt, nt));
            for (i, row) in plan.axis_iter(Axis(0)).enumerate() {
                if a[i] == 0.0 {
                    continue;
                }
                for j in 0..nt {
                    let pj = row[j];
                    if pj == 0.0 {
                        continue;
                    }
                    for l in (j + 1)..nt {
                        let w = pj * row[l] / a[i];
                        lap[[j, l]] -= w;
                        lap[[l, j]] -= w;
                        lap[[j, j]] += w;
                        lap[[l, l]] += w;
                    }
                }
            }
            // gauge: the potentials are defined up to a shared constant, pin g_0
            let mut reduced = lap.slice(ndarray::s![1.., 1..]).to_owned();
            // underflowed weights can disconnect the graph; a relative ridge
            // keeps the system solvable and the trust region bounds the step
            let ridge = reduced.diag().fold(0.0f64, |m, v| m.max(*v)) * 1e-12 + f64::MIN_POSITIVE;
            reduced.diag_mut().mapv_inplace(|d| d + ridge);
            let rhs = residual.slice(ndarray::s![1..]).mapv(|r| eps * r);
            let Some(step_tail) = cholesky_solve(reduced, rhs) else {
                break;
            };
            let mut step = Array1::<f64>::zeros(nt);
            step.slice_mut(ndarray::s![1..]).assign(&step_tail);
            // curvature can be exponentially small along nearly-decoupled
            // directions; keep each step within a few epsilon (each unit of
            // eps rescales a column by e)
            let largest = step.fold(0.0f64, |m, v| m.max(v.abs()));
            let clipped = largest > radius;
            if clipped {
                step *= radius / largest;
            }
            let slope = residual.dot(&step);

            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..30 {
                let trial = &self.g + &(&step * t);
                let (v, r, p) = self.semi_dual(eps, &trial);
                let e = r.iter().fold(0.0f64, |m, x| m.max(x.abs()));
                if e.is_finite() && (e < err || v >= value + 1e-4 * t * slope) {
                    self.g = trial;
                    value = v;
                    residual = r;
                    plan = p;
                    err = e;
                    accepted = true;
                    // a whole block of columns may need to drift far; let the
                    // radius grow while clipped steps keep succeeding
                    if t == 1.0 && clipped {
                        radius *= 2.0;
                    } else if t < 1.0 {
                        radius = (radius * t).max(NEWTON_TRUST * eps);
                    }
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        let mut f = Array1::zeros(self.f.len());
        self.source_potential(eps, &self.g, &mut f);
        self.f = f;
        (used, err <= tol)
    }
}

/// Solve `m x = rhs` for symmetric positive definite `m`; `None` if a pivot
/// is not positive.
fn cholesky_solve(mut m: Array2<f64>, mut rhs: Array1<f64>) -> Option<Array1<f64>> {
    let n = rhs.len();
    for j in 0..n {
        let mut d = m[[j, j]];
        for k in 0..j {
            d -= m[[j, k]] * m[[j, k]];
        }
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let d = d.sqrt();
        m[[j, j]] = d;
        for i in (j + 1)..n {
            let mut s = m[[i, j]];
            for k in 0..j {
                s -= m[[i, k]] * m[[j, k]];
            }
            m[[i, j]] = s / d;
        }
    }
    for i in 0..n {
        let mut s = rhs[i];
        for k in 0..i {
            s -= m[[i, k]] * rhs[k];
        }
        rhs[i] = s / m[[i, i]];
    }
    for i in (0..n).rev() {
        let mut s = rhs[i];
        for k in (i + 1)..n {
            s -= m[[k, i]] * rhs[k];
        }
        rhs[i] = s / m[[i, i]];
    }
    Some(rhs)
}

/// Entropically regularized transport plan between `marginals.source` and
/// `marginals.target` under `cost`.
///
/// Log-domain Sinkhorn-Knopp scaling with epsilon annealing: potentials are
/// warm-started from coarser regularization, the target epsilon is reached by
/// plain scaling iterations, and slow modes are finished off with Newton
/// steps on the same dual. Every scaling iteration and every Newton step
/// counts against `max_iters`.
pub fn sinkhorn(
    cost: &CostMatrix,
    marginals: &MarginalWeights,
    config: &SinkhornConfig,
) -> Result<TransportPlan> {
    config.validate()?;
    let (ns, nt) = cost.values.dim();
    if marginals.source.len() != ns {
        return Err(Error::Dimension {
            what: "source marginal length",
            expected: ns,
            got: marginals.source.len(),
        });
    }
    if marginals.target.len() != nt {
        return Err(Error::Dimension {
            what: "target marginal length",
            expected: nt,
            got: marginals.target.len(),
        });
    }

    let target = config.epsilon;
    let cost_scale = cost.values.fold(0.0f64, |m, v| m.max(*v));
    let mut schedule = Vec::new();
    let mut e = cost_scale;
    while e > target {
        schedule.push(e);
        e *= ANNEAL_FACTOR;
    }
    schedule.push(target);

    let mut dual = LogDomain::new(&cost.values, marginals);
    let mut f_next = Array1::<f64>::zeros(ns);
    let mut iterations = 0;
    let mut done = false;

    let (coarse, _) = schedule.split_at(schedule.len() - 1);
    for &eps in coarse {
        let mut f = std::mem::take(&mut dual.f);
        dual.source_potential(eps, &dual.g, &mut f);
        dual.f = f;
        for _ in 0..ANNEAL_STAGE_MAX_ITERS {
            if iterations == config.max_iters {
                break;
            }
            iterations += 1;
            let err = dual.scaling_step(eps, &mut f_next);
            if err <= config.tol.max(ANNEAL_STAGE_TOL) {
                break;
            }
            std::mem::swap(&mut dual.f, &mut f_next);
        }
    }

    let eps = target;
    let mut f = std::mem::take(&mut dual.f);
    dual.source_potential(eps, &dual.g, &mut f);
    dual.f = f;
    let newton_ok = nt <= NEWTON_MAX_TARGETS
        && nt > 1
        && marginals.source.iter().chain(marginals.target.iter()).all(|w| *w > 0.0);
    let mut warmup = 0;
    while iterations < config.max_iters {
        iterations += 1;
        warmup += 1;
        if dual.scaling_step(eps, &mut f_next) <= config.tol {
            done = true;
            break;
        }
        std::mem::swap(&mut dual.f, &mut f_next);
        if newton_ok && warmup >= WARMUP_ITERS {
            break;
        }
    }
    if !done && newton_ok && iterations < config.max_iters {
        let (used, converged) = dual.newton(eps, config.tol, config.max_iters - iterations);
        iterations += used;
        if !converged {
            // singular system or failed line search: keep scaling from here
            while iterations < config.max_iters {
                iterations += 1;
                if dual.scaling_step(eps, &mut f_next) <= config.tol {
                    break;
                }
                std::mem::swap(&mut dual.f, &mut f_next);
            }
        }
    }

    let values = dual.plan(eps, &dual.f, &dual.g);
    let feasibility_error = marginal_error(&values, marginals);
    Ok(TransportPlan {
        values,
        feasibility_error,
        iterations,
        converged: feasibility_error <= config.tol,
    })
}

/// Largest square instance `exact_ot_oracle` accepts.
pub const ORACLE_MAX_N: usize = 8;

/// Exact optimal transport for square uniform-marginal problems by exhaustive
/// search over permutation couplings. Returns the plan (scaled by `1/n`) and
/// its transport cost.
pub fn exact_ot_oracle(cost: &CostMatrix) -> Result<(TransportPlan, f64)> {
    let n = cost.n_source();
    if cost.n_target() != n {
        return Err(Error::Dimension {
            what: "oracle requires a square cost matrix; target count",
            expected: n,
            got: cost.n_target(),
        });
    }
    if n > ORACLE_MAX_N {
        return Err(Error::TooLarge {
            n,
            max: ORACLE_MAX_N,
        });
    }

    let c = &cost.values;
    let score = |perm: &[usize]| perm.iter().enumerate().map(|(i, &j)| c[[i, j]]).sum::<f64>();

    // Heap's algorithm, iterative form.
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = perm.clone();
    let mut best_score = score(&perm);
    let mut counters = vec![0usize; n];
    let mut i = 1;
    while i < n {
        if counters[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(counters[i], i);
            }
            let s = score(&perm);
            if s < best_score {
                best_score = s;
                best.copy_from_slice(&perm);
            }
            counters[i] += 1;
            i = 1;
        } else {
            counters[i] = 0;
            i += 1;
        }
    }

    let mass = 1.0 / n as f64;
    let mut values = Array2::<f64>::zeros((n, n));
    for (row, &col) in best.iter().enumerate() {
        values[[row, col]] = mass;
    }
    let plan = TransportPlan {
        values,
        feasibility_error: 0.0,
        iterations: 0,
        converged: true,
    };
    Ok((plan, best_score * mass))
}

/// Rescale each row of a plan to sum to one.
///
/// A row with no mass means the coupling collapsed; that is reported rather
/// than patched.
pub fn row_normalize(plan: &TransportPlan) -> Result<TransportPlan> {
    let mut values = plan.values.clone();
    for (i, mut row) in values.axis_iter_mut(Axis(0)).enumerate() {
        let total = row.sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::DegeneratePlan { row: i });
        }
        row.mapv_inplace(|v| v / total);
    }
    let feasibility_error = values
        .sum_axis(Axis(1))
        .iter()
        .fold(0.0f64, |m, s| m.max((s - 1.0).abs()));
    Ok(TransportPlan {
        values,
        feasibility_error,
        iterations: plan.iterations,
        converged: plan.converged,
    })
}

/// Map every source point to the plan-weighted average of the target points.
pub fn barycentric_map(
    plan_normalized: &TransportPlan,
    target: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    let weights = &plan_normalized.values;
    if weights.ncols() != target.nrows() {
        return Err(Error::Dimension {
            what: "target row count vs plan columns",
            expected: weights.ncols(),
            got: target.nrows(),
        });
    }
    for (i, row) in weights.axis_iter(Axis(0)).enumerate() {
        if row.iter().any(|w| *w < 0.0) {
            return Err(Error::Input(format!("plan row {i} has negative weights")));
        }
        let s = row.sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Input(format!(
                "plan row {i} sums to {s}; normalize rows first"
            )));
        }
    }
    Ok(weights.dot(&target))
}
