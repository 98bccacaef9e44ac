//! Entropic partial optimal transport between image patches and text atoms.
//!
//! The plan `T` (V x M) solves
//!
//! ```text
//! min_T <C, T> + lambda <T, log T>   s.t.  T >= 0,  T 1_M <= alpha,  T^T 1_V = beta
//! ```
//!
//! by alternating KL projections in scaling form (Dykstra / generalized
//! Sinkhorn): `u <- min(1, alpha / (Q v))`, `v <- beta / (Q^T u)`, with
//! `T = diag(u) Q diag(v)`.
//!
//! `Q` is built from column-shifted costs `C - min_v C[v, j]`. Column sums are
//! pinned by the equality constraint, so the shift only rescales `v` and leaves
//! `T` unchanged; it keeps every column of `Q` away from underflow at small
//! `lambda`. The reported `v` is the scaling for the shifted kernel.
//!
//! At very small `lambda` the off-minimum kernel entries still underflow and
//! the scalings overflow; the solver then reruns the same iteration on
//! `log u`, `log v` with log-sum-exp reductions.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::embedding::TextEncoding;
use crate::error::{Error, Result};
use crate::linalg::{all_finite, ensure_finite, rows_unit};
use crate::prompt::softmax;

/// Denominator floor in the scaling updates.
pub const DENOMINATOR_FLOOR: f64 = 1e-300;
/// Tolerance on feature norms accepted by [`cost_matrix`].
pub const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub lambda: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            max_iters: 100,
            tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportProblem {
    cost: Array2<f64>,
    alpha: Array1<f64>,
    beta: Array1<f64>,
    solver: SolverConfig,
}

impl TransportProblem {
    pub fn new(
        cost: Array2<f64>,
        alpha: Array1<f64>,
        beta: Array1<f64>,
        solver: SolverConfig,
    ) -> Result<Self> {
        let (v, m) = cost.dim();
        if v == 0 || m == 0 {
            return Err(Error::Config("cost matrix must be non-empty".into()));
        }
        if alpha.len() != v {
            return Err(Error::dim("alpha", v, alpha.len()));
        }
        if beta.len() != m {
            return Err(Error::dim("beta", m, beta.len()));
        }
        ensure_finite(cost.iter(), "cost matrix")?;
        if cost.iter().any(|&c| !(0.0..=2.0).contains(&c)) {
            return Err(Error::range("cost", "entries must lie in [0, 2]"));
        }
        if alpha.iter().any(|&a| !(a.is_finite() && a >= 0.0)) {
            return Err(Error::range("alpha", "entries must be finite and >= 0"));
        }
        if beta.iter().any(|&b| !(b.is_finite() && b >= 0.0)) {
            return Err(Error::range("beta", "entries must be finite and >= 0"));
        }
        let beta_mass = beta.sum();
        if (beta_mass - 1.0).abs() > 1e-12 {
            return Err(Error::range(
                "beta",
                format!("must sum to 1, sums to {beta_mass}"),
            ));
        }
        if alpha.sum() < beta_mass {
            return Err(Error::range(
                "alpha",
                format!("total mass {} below beta mass {beta_mass}", alpha.sum()),
            ));
        }
        if !(solver.lambda.is_finite() && solver.lambda > 0.0) {
            return Err(Error::range("lambda", "must be finite and > 0"));
        }
        if solver.max_iters == 0 {
            return Err(Error::range("max_iters", "must be at least 1"));
        }
        if !(solver.tol.is_finite() && solver.tol > 0.0) {
            return Err(Error::range("tol", "must be finite and > 0"));
        }
        Ok(Self {
            cost,
            alpha,
            beta,
            solver,
        })
    }

    pub fn cost(&self) -> ArrayView2<'_, f64> {
        self.cost.view()
    }

    pub fn alpha(&self) -> ArrayView1<'_, f64> {
        self.alpha.view()
    }

    pub fn beta(&self) -> ArrayView1<'_, f64> {
        self.beta.view()
    }

    pub fn solver(&self) -> SolverConfig {
        self.solver
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub plan: Array2<f64>,
    /// `log u`, `log v` of the final scalings (for the column-shifted kernel).
    pub log_u: Array1<f64>,
    pub log_v: Array1<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Max-norm change of `log v` at every iteration.
    pub changes: Vec<f64>,
}

/// `C[i][j] = 1 - <image[i], text[j]>`, clamped to `[0, 2]` against rounding.
pub fn cost_matrix(image: ArrayView2<f64>, text: ArrayView2<f64>) -> Result<Array2<f64>> {
    if image.ncols() != text.ncols() {
        return Err(Error::dim("text feature", image.ncols(), text.ncols()));
    }
    ensure_finite(image.iter(), "image features")?;
    ensure_finite(text.iter(), "text features")?;
    if !rows_unit(image, UNIT_NORM_TOL) {
        return Err(Error::Config("image feature rows must be unit norm".into()));
    }
    if !rows_unit(text, UNIT_NORM_TOL) {
        return Err(Error::Config("text feature rows must be unit norm".into()));
    }
    Ok(image.dot(&text.t()).mapv(|s| (1.0 - s).clamp(0.0, 2.0)))
}

/// Column mass must match `beta`; only an underflowed kernel breaks this.
fn check_columns(plan: &Array2<f64>, beta: ArrayView1<f64>) -> std::result::Result<(), String> {
    if !all_finite(plan.iter()) {
        return Err("transport plan is not finite".into());
    }
    for (j, col) in plan.axis_iter(Axis(1)).enumerate() {
        let target = beta[j];
        if (col.sum() - target).abs() > 1e-9 + 1e-6 * target {
            return Err(format!(
                "column {j} carries mass {} instead of {target}: kernel underflow",
                col.sum()
            ));
        }
    }
    Ok(())
}

/// `-(C - column min) / lambda`.
fn log_kernel(problem: &TransportProblem) -> Array2<f64> {
    let cost = &problem.cost;
    let lambda = problem.solver.lambda;
    let col_min: Vec<f64> = cost
        .axis_iter(Axis(1))
        .map(|c| c.iter().cloned().fold(f64::INFINITY, f64::min))
        .collect();
    Array2::from_shape_fn(cost.dim(), |(i, j)| -(cost[[i, j]] - col_min[j]) / lambda)
}

fn scaling_form(
    problem: &TransportProblem,
    log_q: &Array2<f64>,
) -> std::result::Result<TransportPlan, String> {
    let SolverConfig { max_iters, tol, .. } = problem.solver;
    let (n_rows, n_cols) = log_q.dim();
    let kernel = log_q.mapv(f64::exp);
    let mut u = Array1::<f64>::ones(n_rows);
    let mut v = Array1::<f64>::ones(n_cols);
    let mut changes = Vec::new();
    let mut converged = false;
    for _ in 0..max_iters {
        let qv = kernel.dot(&v);
        u = Array1::from_shape_fn(n_rows, |i| {
            (problem.alpha[i] / qv[i].max(DENOMINATOR_FLOOR)).min(1.0)
        });
        let qtu = kernel.t().dot(&u);
        let next =
            Array1::from_shape_fn(n_cols, |j| problem.beta[j] / qtu[j].max(DENOMINATOR_FLOOR));
        if !all_finite(next.iter()) || !all_finite(u.iter()) {
            return Err(format!(
                "scaling vectors overflowed after {} iterations",
                changes.len() + 1
            ));
        }
        let change = next
            .iter()
            .zip(v.iter())
            .map(|(a, b)| (a.ln() - b.ln()).abs())
            .fold(0.0, f64::max);
        changes.push(change);
        v = next;
        if change < tol {
            converged = true;
            break;
        }
    }
    let mut plan = kernel;
    for ((i, j), t) in plan.indexed_iter_mut() {
        *t *= u[i] * v[j];
    }
    check_columns(&plan, problem.beta.view())?;
    Ok(TransportPlan {
        plan,
        log_u: u.mapv(f64::ln),
        log_v: v.mapv(f64::ln),
        iterations: changes.len(),
        converged,
        changes,
    })
}

/// `log sum exp` that maps an all `-inf` input to `-inf`.
fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Same iteration on `log u`, `log v`.
fn log_form(
    problem: &TransportProblem,
    log_q: &Array2<f64>,
) -> std::result::Result<TransportPlan, String> {
    let SolverConfig { max_iters, tol, .. } = problem.solver;
    let (n_rows, n_cols) = log_q.dim();
    let log_alpha = problem.alpha.mapv(f64::ln);
    let log_beta = problem.beta.mapv(f64::ln);
    let mut f = Array1::<f64>::zeros(n_rows);
    let mut g = Array1::<f64>::zeros(n_cols);
    let mut changes = Vec::new();
    let mut converged = false;
    for _ in 0..max_iters {
        for i in 0..n_rows {
            let lse = log_sum_exp((0..n_cols).map(|j| log_q[[i, j]] + g[j]));
            f[i] = (log_alpha[i] - lse).min(0.0);
        }
        let next = Array1::from_shape_fn(n_cols, |j| {
            log_beta[j] - log_sum_exp((0..n_rows).map(|i| log_q[[i, j]] + f[i]))
        });
        if next.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
            return Err(format!(
                "log scaling diverged after {} iterations",
                changes.len() + 1
            ));
        }
        let change = next
            .iter()
            .zip(g.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        changes.push(change);
        g = next;
        if change < tol {
            converged = true;
            break;
        }
    }
    let plan = Array2::from_shape_fn(log_q.dim(), |(i, j)| (log_q[[i, j]] + f[i] + g[j]).exp());
    check_columns(&plan, problem.beta.view())?;
    Ok(TransportPlan {
        plan,
        log_u: f,
        log_v: g,
        iterations: changes.len(),
        converged,
        changes,
    })
}

/// Runs the scaling iteration; if the kernel under- or overflows it reruns
/// the identical iteration in the log domain. Fails, naming `lambda`, only
/// when both do.
pub fn solve_dykstra(problem: &TransportProblem) -> Result<TransportPlan> {
    let lambda = problem.solver.lambda;
    let log_q = log_kernel(problem);
    if log_q.iter().any(|x| x.is_nan()) {
        return Err(Error::Transport {
            lambda,
            detail: "kernel exp(-C / lambda) is not finite".into(),
        });
    }
    match scaling_form(problem, &log_q) {
        Ok(plan) => Ok(plan),
        Err(_) => log_form(problem, &log_q).map_err(|detail| Error::Transport { lambda, detail }),
    }
}

/// `<C, T>` only.
pub fn transport_cost(cost: ArrayView2<f64>, plan: ArrayView2<f64>) -> f64 {
    cost.iter().zip(plan.iter()).map(|(c, t)| c * t).sum()
}

/// `<C, T> + lambda <T, log T>` with `0 log 0 = 0`.
pub fn ot_distance(cost: ArrayView2<f64>, plan: ArrayView2<f64>, lambda: f64) -> Result<f64> {
    if cost.dim() != plan.dim() {
        return Err(Error::Shape {
            tensor: "transport plan".into(),
            expected: format!("{:?}", cost.dim()),
            found: format!("{:?}", plan.dim()),
        });
    }
    ensure_finite(cost.iter(), "cost matrix")?;
    ensure_finite(plan.iter(), "transport plan")?;
    if !lambda.is_finite() {
        return Err(Error::NonFinite("lambda".into()));
    }
    if plan.iter().any(|&t| t < 0.0) {
        return Err(Error::range("plan", "entries must be >= 0"));
    }
    let entropy: f64 = plan.iter().filter(|&&t| t > 0.0).map(|&t| t * t.ln()).sum();
    let linear = transport_cost(cost, plan);
    if lambda == 0.0 {
        return Ok(linear);
    }
    Ok(linear + lambda * entropy)
}

/// `p_k = softmax_k((1 - d_k) / tau)`.
pub fn predict_ot(distances: ArrayView1<f64>, temperature: f64) -> Result<Array1<f64>> {
    ensure_finite(distances.iter(), "OT distances")?;
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::range("temperature", "must be finite and > 0"));
    }
    softmax(distances.mapv(|d| (1.0 - d) / temperature).view())
}

/// `d distance / d C` with the plan held fixed: the plan itself.
pub fn grad_distance_wrt_cost(plan: &TransportPlan) -> Array2<f64> {
    plan.plan.clone()
}

/// `d distance / d text[j] = -sum_v T[v, j] image[v]` (M x d), plan fixed.
pub fn grad_distance_wrt_text_features(
    plan: ArrayView2<f64>,
    image: ArrayView2<f64>,
) -> Array2<f64> {
    -plan.t().dot(&image)
}

#[derive(Debug, Clone)]
pub struct PromptDistanceGrad {
    /// One `h x e` block per text atom, in atom order.
    pub per_atom: Vec<Array2<f64>>,
    /// Set when the plan the gradient was taken at had not converged.
    pub unconverged: bool,
}

/// Chains the fixed-plan distance gradient through each text atom's encoder
/// Jacobian, giving the gradient w.r.t. the prompt that produced that atom.
pub fn grad_distance_wrt_text(
    plan: &TransportPlan,
    image: ArrayView2<f64>,
    text: &[&TextEncoding],
) -> Result<PromptDistanceGrad> {
    if text.len() != plan.plan.ncols() {
        return Err(Error::dim("text atoms", plan.plan.ncols(), text.len()));
    }
    if image.nrows() != plan.plan.nrows() {
        return Err(Error::dim(
            "image patches",
            plan.plan.nrows(),
            image.nrows(),
        ));
    }
    let feature_grads = grad_distance_wrt_text_features(plan.plan.view(), image);
    let per_atom = text
        .iter()
        .enumerate()
        .map(|(j, enc)| enc.pullback(feature_grads.row(j)))
        .collect();
    Ok(PromptDistanceGrad {
        per_atom,
        unconverged: !plan.converged,
    })
}

/// Problem file accepted by the `ot-solve` subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemFile {
    pub cost: Vec<Vec<f64>>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub lambda: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
}

fn default_max_iters() -> usize {
    SolverConfig::default().max_iters
}

fn default_tol() -> f64 {
    SolverConfig::default().tol
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionFile {
    pub plan: Vec<Vec<f64>>,
    pub log_u: Vec<f64>,
    pub log_v: Vec<f64>,
    pub transport_cost: f64,
    pub distance: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl ProblemFile {
    pub fn into_problem(self) -> Result<TransportProblem> {
        let rows = self.cost.len();
        let cols = self.cost.first().map_or(0, Vec::len);
        if self.cost.iter().any(|r| r.len() != cols) {
            return Err(Error::Parse("cost rows have unequal lengths".into()));
        }
        let flat: Vec<f64> = self.cost.into_iter().flatten().collect();
        let cost =
            Array2::from_shape_vec((rows, cols), flat).map_err(|e| Error::Parse(e.to_string()))?;
        TransportProblem::new(
            cost,
            Array1::from(self.alpha),
            Array1::from(self.beta),
            SolverConfig {
                lambda: self.lambda,
                max_iters: self.max_iters,
                tol: self.tol,
            },
        )
    }
}

/// Solves a problem file end to end, as `ot-solve` does.
pub fn solve_problem_file(file: ProblemFile) -> Result<SolutionFile> {
    let problem = file.into_problem()?;
    let plan = solve_dykstra(&problem)?;
    let lambda = problem.solver.lambda;
    Ok(SolutionFile {
        transport_cost: transport_cost(problem.cost(), plan.plan.view()),
        distance: ot_distance(problem.cost(), plan.plan.view(), lambda)?,
        plan: plan.plan.rows().into_iter().map(|r| r.to_vec()).collect(),
        log_u: plan.log_u.to_vec(),
        log_v: plan.log_v.to_vec(),
        iterations: plan.iterations,
        converged: plan.converged,
    })
}
