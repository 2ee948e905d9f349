//! Elastic factors and min-norm gradient combination.
//!
//! All gradients handed to this module are *negative* loss gradients
//! `g_i = -∇θ ℓ_i`, and the combined direction `d` is applied as `θ ← θ + γ d`.
//! In that convention a Pareto descent direction satisfies
//! `⟨g_i, d⟩ ≥ σ_i ‖d‖²` for every task.
//!
//! The elastic dual
//!
//! ```text
//! min ‖Σ λ_i g_i‖²   s.t.  Σ λ_i σ_i = 1,  λ ≥ 0
//! ```
//!
//! is solved by substituting `μ_i = λ_i σ_i`, which turns it into the plain
//! min-norm-point problem over the scaled points `g_i / σ_i`. That problem is
//! solved with pairwise Frank–Wolfe on the Gram matrix.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::TaskId;

/// Momentum decay applied to the previous gradient-norm statistic.
pub const DEFAULT_EPS1: f64 = 0.9;
/// Weight of the current gradient norm in the momentum statistic.
pub const DEFAULT_EPS2: f64 = 0.1;
pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 250;

/// Below this squared distance the two scaled gradients are treated as identical.
const DEGENERATE_PAIR_EPS: f64 = 1e-18;

/// Per-task negative loss gradients of the shared backbone at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    task_ids: Vec<TaskId>,
    grads: Vec<Vec<f64>>,
}

impl GradientBundle {
    pub fn new(task_ids: Vec<TaskId>, grads: Vec<Vec<f64>>) -> Result<Self> {
        if grads.is_empty() {
            return Err(invalid("gradient bundle is empty"));
        }
        if task_ids.len() != grads.len() {
            return Err(invalid(format!(
                "{} task ids for {} gradients",
                task_ids.len(),
                grads.len()
            )));
        }
        let dim = grads[0].len();
        if dim == 0 {
            return Err(invalid("gradients must have dimension >= 1"));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.len() != dim {
                return Err(invalid(format!(
                    "grads[{i}] has dimension {}, expected {dim}",
                    g.len()
                )));
            }
            if let Some(j) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("grads[{i}][{j}] is not finite")));
            }
        }
        for (i, t) in task_ids.iter().enumerate() {
            if task_ids[..i].contains(t) {
                return Err(invalid(format!("duplicate task id {t}")));
            }
        }
        Ok(Self { task_ids, grads })
    }

    /// Bundle with task ids `1..=k`.
    pub fn from_grads(grads: Vec<Vec<f64>>) -> Result<Self> {
        let ids = (1..=grads.len()).collect();
        Self::new(ids, grads)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.grads[0].len()
    }

    pub fn task_ids(&self) -> &[TaskId] {
        &self.task_ids
    }

    pub fn grads(&self) -> &[Vec<f64>] {
        &self.grads
    }

    pub fn norms(&self) -> Vec<f64> {
        self.grads.iter().map(|g| norm(g)).collect()
    }

    /// Gram matrix `G_ij = ⟨g_i, g_j⟩`, row-major `k × k`.
    pub fn gram(&self) -> Vec<f64> {
        gram(&self.grads)
    }
}

/// Task-specific elastic factors `σ_i ∈ (0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ElasticFactors(Vec<f64>);

impl ElasticFactors {
    pub fn new(sigma: Vec<f64>) -> Result<Self> {
        if sigma.is_empty() {
            return Err(invalid("elastic factors are empty"));
        }
        for (i, s) in sigma.iter().enumerate() {
            if !(s.is_finite() && *s > 0.0 && *s <= 1.0) {
                return Err(invalid(format!("sigma[{i}] = {s} is outside (0, 1]")));
            }
        }
        Ok(Self(sigma))
    }

    pub fn uniform(k: usize) -> Self {
        Self(vec![1.0 / k as f64; k])
    }

    /// All ones, which reduces the elastic dual to MGDA.
    pub fn ones(k: usize) -> Self {
        Self(vec![1.0; k])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn from_softmax(logits: &[f64]) -> Result<Self> {
        let sigma = softmax(logits);
        if let Some(i) = sigma.iter().position(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Numeric(format!(
                "elastic factor {i} underflowed (logits {logits:?})"
            )));
        }
        Ok(Self(sigma))
    }
}

/// Running gradient-norm momentum used by the GMC elastic factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElasticState {
    pub momentum: BTreeMap<TaskId, f64>,
    pub eps1: f64,
    pub eps2: f64,
    pub temperature: f64,
}

impl Default for ElasticState {
    fn default() -> Self {
        Self::new(1.0)
    }
}

impl ElasticState {
    pub fn new(temperature: f64) -> Self {
        Self {
            momentum: BTreeMap::new(),
            eps1: DEFAULT_EPS1,
            eps2: DEFAULT_EPS2,
            temperature,
        }
    }

    /// Folds the bundle's gradient norms into the momentum statistics and
    /// returns the updated `m_i` in bundle order. A task seen for the first
    /// time starts from its current norm.
    pub fn update(&mut self, bundle: &GradientBundle) -> Result<Vec<f64>> {
        let norms = bundle.norms();
        if let Some(i) = norms.iter().position(|n| !n.is_finite()) {
            return Err(Error::Numeric(format!(
                "gradient norm of entry {i} is not finite"
            )));
        }
        Ok(bundle
            .task_ids()
            .iter()
            .zip(&norms)
            .map(|(task, n)| {
                let m = match self.momentum.get(task) {
                    Some(prev) => self.eps1 * prev + self.eps2 * n,
                    None => *n,
                };
                self.momentum.insert(*task, m);
                m
            })
            .collect())
    }
}

/// Elastic factors from gradient magnitude change: softmax of the momentum
/// gradient norms. Mutates `state`.
pub fn elastic_factors_gmc(
    bundle: &GradientBundle,
    state: &mut ElasticState,
) -> Result<ElasticFactors> {
    check_temperature(state.temperature)?;
    let m = state.update(bundle)?;
    let logits: Vec<f64> = m.iter().map(|v| v / state.temperature).collect();
    ElasticFactors::from_softmax(&logits)
}

/// Elastic factors from gradient similarity: softmax of each gradient's summed
/// cosine similarity to all gradients (itself included).
///
/// A zero-norm gradient yields [`Error::DegenerateGradient`]; callers fall
/// back to uniform factors.
pub fn elastic_factors_gs(bundle: &GradientBundle, temperature: f64) -> Result<ElasticFactors> {
    check_temperature(temperature)?;
    let norms = bundle.norms();
    if let Some(i) = norms.iter().position(|n| *n == 0.0) {
        return Err(Error::DegenerateGradient {
            task: bundle.task_ids()[i],
        });
    }
    let k = bundle.len();
    let g = bundle.gram();
    let logits: Vec<f64> = (0..k)
        .map(|i| {
            let score: f64 = (0..k).map(|j| g[i * k + j] / (norms[i] * norms[j])).sum();
            score / temperature
        })
        .collect();
    ElasticFactors::from_softmax(&logits)
}

fn check_temperature(t: f64) -> Result<()> {
    if t.is_finite() && t > 0.0 {
        Ok(())
    } else {
        Err(invalid(format!("temperature must be positive, got {t}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Duality-gap tolerance.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
        }
    }
}

impl SolverOptions {
    fn validate(&self) -> Result<()> {
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return Err(invalid(format!("tol must be positive, got {}", self.tol)));
        }
        Ok(())
    }
}

/// Solution of the min-norm-point problem over a simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct MinNormSolution {
    /// Simplex weights `μ`.
    pub weights: Vec<f64>,
    /// `‖Σ μ_i p_i‖²`.
    pub objective: f64,
    /// Final duality gap `‖w‖² − min_i ⟨p_i, w⟩`.
    pub gap: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Result of combining a gradient bundle into one update direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinationResult {
    pub lambda: Vec<f64>,
    /// `d = Σ λ_i g_i`.
    pub direction: Vec<f64>,
    /// `‖d‖²`.
    pub objective: f64,
    /// Dual scalar of the primal problem, `−‖d‖²`; zero at a Pareto-critical point.
    pub alpha: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Bundle positions whose gradient is exactly zero.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub zero_grad_tasks: Vec<usize>,
}

impl CombinationResult {
    pub fn direction_norm(&self) -> f64 {
        norm(&self.direction)
    }
}

/// Minimum-norm point of the convex hull of `points`.
///
/// Pairwise Frank–Wolfe with exact line search, stopped when the duality gap
/// `max_i ⟨w − p_i, w⟩` drops to `tol`. When `max_iter` runs out the last
/// (best) iterate is returned with `converged = false`.
pub fn solve_min_norm_simplex(points: &[Vec<f64>], opts: SolverOptions) -> Result<MinNormSolution> {
    if points.is_empty() {
        return Err(invalid("no points"));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(invalid("points have different dimensions"));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite point coordinate".into()));
    }
    opts.validate()?;
    let k = points.len();
    Ok(min_norm_from_gram(&gram(points), k, opts))
}

/// Pairwise Frank–Wolfe over the simplex for `min μᵀ G μ`.
pub(crate) fn min_norm_from_gram(g: &[f64], k: usize, opts: SolverOptions) -> MinNormSolution {
    debug_assert_eq!(g.len(), k * k);
    // Start from the smallest-norm vertex.
    let start = argmin((0..k).map(|i| g[i * k + i]));
    let mut mu = vec![0.0; k];
    mu[start] = 1.0;

    let mut iterations = 0;
    let mut gm = gram_times(g, k, &mu);
    let mut obj = dot(&mu, &gm);
    let mut gap = obj - gm[argmin(gm.iter().copied())];

    while gap > opts.tol && iterations < opts.max_iter {
        iterations += 1;
        let toward = argmin(gm.iter().copied());
        // Away vertex: the active vertex with the largest ⟨p_i, w⟩.
        let away = (0..k)
            .filter(|&i| mu[i] > 0.0)
            .max_by(|&a, &b| gm[a].total_cmp(&gm[b]))
            .unwrap_or(start);
        if away == toward {
            break;
        }
        // obj(γ) = obj − 2γ·slope + γ²·curv along μ + γ(e_toward − e_away)
        let slope = gm[away] - gm[toward];
        let curv = g[toward * k + toward] - 2.0 * g[toward * k + away] + g[away * k + away];
        let cap = mu[away];
        let step = if curv > 0.0 {
            (slope / curv).min(cap)
        } else {
            cap
        };
        if step <= 0.0 {
            break;
        }
        mu[toward] += step;
        if step >= cap {
            mu[away] = 0.0;
        } else {
            mu[away] -= step;
        }
        gm = gram_times(g, k, &mu);
        obj = dot(&mu, &gm);
        gap = obj - gm[argmin(gm.iter().copied())];
    }

    if gap > 0.0 {
        if let Some(polished) = polish_support(g, k, &mu) {
            let pg = gram_times(g, k, &polished);
            let pobj = dot(&polished, &pg);
            let pgap = pobj - pg[argmin(pg.iter().copied())];
            if pobj <= obj + 1e-12 * obj && pgap <= gap.max(opts.tol) {
                mu = polished;
                obj = pobj;
                gap = pgap;
            }
        }
    }

    let total: f64 = mu.iter().sum();
    mu.iter_mut().for_each(|m| *m /= total);
    MinNormSolution {
        weights: mu,
        objective: obj.max(0.0),
        gap,
        iterations,
        converged: gap <= opts.tol,
    }
}

/// Exact minimizer over the affine hull of the current support, accepted only
/// if it stays inside the simplex. Returns `None` when the support is a single
/// vertex, the KKT system is singular, or the solution leaves the simplex.
fn polish_support(g: &[f64], k: usize, mu: &[f64]) -> Option<Vec<f64>> {
    let support: Vec<usize> = (0..k).filter(|&i| mu[i] > 0.0).collect();
    let s = support.len();
    if s < 2 {
        return None;
    }
    // [ G_SS  1 ] [μ_S]   [0]
    // [ 1ᵀ    0 ] [ ν ] = [1]
    let n = s + 1;
    let mut a = vec![0.0; n * (n + 1)];
    let scale = support
        .iter()
        .map(|&i| g[i * k + i])
        .fold(0.0_f64, f64::max)
        .max(f64::MIN_POSITIVE);
    for (r, &i) in support.iter().enumerate() {
        for (c, &j) in support.iter().enumerate() {
            a[r * (n + 1) + c] = g[i * k + j] / scale;
        }
        a[r * (n + 1) + s] = 1.0;
        a[s * (n + 1) + r] = 1.0;
    }
    a[s * (n + 1) + n] = 1.0;
    let x = solve_dense(&mut a, n)?;
    if x[..s].iter().any(|v| *v < -1e-12 || !v.is_finite()) {
        return None;
    }
    let mut out = vec![0.0; k];
    for (r, &i) in support.iter().enumerate() {
        out[i] = x[r].max(0.0);
    }
    let total: f64 = out.iter().sum();
    if total <= 0.0 {
        return None;
    }
    out.iter_mut().for_each(|v| *v /= total);
    Some(out)
}

/// Gaussian elimination with partial pivoting on an `n × (n+1)` augmented matrix.
fn solve_dense(a: &mut [f64], n: usize) -> Option<Vec<f64>> {
    let w = n + 1;
    for col in 0..n {
        let pivot =
            (col..n).max_by(|&r1, &r2| a[r1 * w + col].abs().total_cmp(&a[r2 * w + col].abs()))?;
        if a[pivot * w + col].abs() < 1e-12 {
            return None;
        }
        if pivot != col {
            for c in 0..w {
                a.swap(col * w + c, pivot * w + c);
            }
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = a[r * w + col] / a[col * w + col];
            if f != 0.0 {
                for c in col..w {
                    a[r * w + c] -= f * a[col * w + c];
                }
            }
        }
    }
    Some((0..n).map(|r| a[r * w + n] / a[r * w + r]).collect())
}

/// Solves the elastic dual for the bundle and factors `sigma`.
pub fn solve_emgd(
    bundle: &GradientBundle,
    sigma: &ElasticFactors,
    opts: SolverOptions,
) -> Result<CombinationResult> {
    let k = bundle.len();
    if sigma.len() != k {
        return Err(invalid(format!(
            "{} elastic factors for {k} gradients",
            sigma.len()
        )));
    }
    let s = sigma.as_slice();
    if let Some(i) = s.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(invalid(format!("sigma[{i}] = {} must be positive", s[i])));
    }
    opts.validate()?;

    let base = bundle.gram();
    let mut scaled = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            scaled[i * k + j] = base[i * k + j] / (s[i] * s[j]);
        }
    }
    if scaled.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("scaled Gram matrix overflowed".into()));
    }
    let sol = min_norm_from_gram(&scaled, k, opts);
    let lambda: Vec<f64> = sol.weights.iter().zip(s).map(|(m, sg)| m / sg).collect();
    Ok(finish(bundle, lambda, sol.iterations, sol.converged))
}

/// MGDA: the elastic dual with all factors equal to one.
pub fn solve_mgda(bundle: &GradientBundle, opts: SolverOptions) -> Result<CombinationResult> {
    solve_emgd(bundle, &ElasticFactors::ones(bundle.len()), opts)
}

/// Arithmetic mean of the gradients.
pub fn avg_grad(bundle: &GradientBundle) -> CombinationResult {
    let k = bundle.len();
    finish(bundle, vec![1.0 / k as f64; k], 0, true)
}

fn finish(
    bundle: &GradientBundle,
    lambda: Vec<f64>,
    iterations: usize,
    converged: bool,
) -> CombinationResult {
    let direction = combine(bundle.grads(), &lambda);
    let objective = dot(&direction, &direction);
    let zero_grad_tasks = bundle
        .grads()
        .iter()
        .enumerate()
        .filter(|(_, g)| g.iter().all(|v| *v == 0.0))
        .map(|(i, _)| i)
        .collect();
    CombinationResult {
        lambda,
        direction,
        objective,
        alpha: -objective,
        iterations,
        converged,
        zero_grad_tasks,
    }
}

/// Which piece of the two-task closed form produced the weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TwoTaskBranch {
    /// All weight on the second task.
    SecondOnly,
    /// All weight on the first task.
    FirstOnly,
    Interior,
    /// Scaled gradients coincide; every hull point is optimal.
    Degenerate,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoTaskSolution {
    pub lambda1: f64,
    pub lambda2: f64,
    pub branch: TwoTaskBranch,
}

/// Closed-form two-task elastic dual.
///
/// Weight goes entirely to task 2 when `σ1‖g2‖² < σ2⟨g1,g2⟩`, entirely to
/// task 1 when `σ2‖g1‖² < σ1⟨g1,g2⟩`, and otherwise
/// `λ1 = (σ1‖g2‖² − σ2⟨g1,g2⟩) / ‖σ2g1 − σ1g2‖²`,
/// `λ2 = (σ2‖g1‖² − σ1⟨g1,g2⟩) / ‖σ2g1 − σ1g2‖²`.
///
/// When the scaled gradients coincide the weight goes to the smaller-norm
/// gradient (task 2 on ties).
pub fn two_task_closed_form(
    g1: &[f64],
    g2: &[f64],
    sigma1: f64,
    sigma2: f64,
) -> Result<TwoTaskSolution> {
    if g1.len() != g2.len() || g1.is_empty() {
        return Err(invalid("gradients must share a positive dimension"));
    }
    if !(sigma1 > 0.0 && sigma2 > 0.0 && sigma1.is_finite() && sigma2.is_finite()) {
        return Err(invalid(format!(
            "sigma must be positive, got ({sigma1}, {sigma2})"
        )));
    }
    let g11 = dot(g1, g1);
    let g22 = dot(g2, g2);
    let g12 = dot(g1, g2);
    let denom: f64 = g1
        .iter()
        .zip(g2)
        .map(|(a, b)| {
            let r = sigma2 * a - sigma1 * b;
            r * r
        })
        .sum();

    if denom < DEGENERATE_PAIR_EPS {
        let (lambda1, lambda2) = if g11 < g22 {
            (1.0 / sigma1, 0.0)
        } else {
            (0.0, 1.0 / sigma2)
        };
        return Ok(TwoTaskSolution {
            lambda1,
            lambda2,
            branch: TwoTaskBranch::Degenerate,
        });
    }
    if sigma1 * g22 < sigma2 * g12 {
        return Ok(TwoTaskSolution {
            lambda1: 0.0,
            lambda2: 1.0 / sigma2,
            branch: TwoTaskBranch::SecondOnly,
        });
    }
    if sigma2 * g11 < sigma1 * g12 {
        return Ok(TwoTaskSolution {
            lambda1: 1.0 / sigma1,
            lambda2: 0.0,
            branch: TwoTaskBranch::FirstOnly,
        });
    }
    Ok(TwoTaskSolution {
        lambda1: (sigma1 * g22 - sigma2 * g12) / denom,
        lambda2: (sigma2 * g11 - sigma1 * g12) / denom,
        branch: TwoTaskBranch::Interior,
    })
}

/// Exhaustive grid search over `μ` on the simplex (resolution `grid_step`),
/// mapped back to `λ_i = μ_i / σ_i`. Test oracle; `k ≤ 4`.
pub fn brute_force_weights(
    bundle: &GradientBundle,
    sigma: &ElasticFactors,
    grid_step: f64,
) -> Result<(Vec<f64>, f64)> {
    let k = bundle.len();
    if k > 4 {
        return Err(Error::UnsupportedSize(format!(
            "brute force supports k <= 4, got {k}"
        )));
    }
    if !(grid_step > 0.0 && grid_step <= 0.1) {
        return Err(invalid(format!(
            "grid_step must be in (0, 0.1], got {grid_step}"
        )));
    }
    if sigma.len() != k {
        return Err(invalid(format!(
            "{} elastic factors for {k} gradients",
            sigma.len()
        )));
    }
    let s = sigma.as_slice();
    let n = (1.0 / grid_step).round() as usize;
    let points: Vec<Vec<f64>> = bundle
        .grads()
        .iter()
        .zip(s)
        .map(|(g, sg)| g.iter().map(|v| v / sg).collect())
        .collect();
    let g = gram(&points);

    let mut best = (f64::INFINITY, vec![0usize; k]);
    let mut parts = vec![0usize; k];
    enumerate_compositions(n, 0, &mut parts, &mut |parts| {
        let mut obj = 0.0;
        for i in 0..k {
            if parts[i] == 0 {
                continue;
            }
            for j in 0..k {
                obj += parts[i] as f64 * parts[j] as f64 * g[i * k + j];
            }
        }
        obj /= (n * n) as f64;
        if obj < best.0 {
            best = (obj, parts.to_vec());
        }
    });
    let lambda = best
        .1
        .iter()
        .zip(s)
        .map(|(p, sg)| *p as f64 / n as f64 / sg)
        .collect();
    Ok((lambda, best.0.max(0.0)))
}

fn enumerate_compositions(
    remaining: usize,
    pos: usize,
    parts: &mut [usize],
    visit: &mut impl FnMut(&[usize]),
) {
    if pos + 1 == parts.len() {
        parts[pos] = remaining;
        visit(parts);
        return;
    }
    for v in 0..=remaining {
        parts[pos] = v;
        enumerate_compositions(remaining - v, pos + 1, parts, visit);
    }
}

/// `true` iff `⟨g_i, d⟩ ≥ σ_i ‖d‖² − tol` for every task.
pub fn pareto_descent_check(
    bundle: &GradientBundle,
    sigma: &ElasticFactors,
    result: &CombinationResult,
    tol: f64,
) -> bool {
    if sigma.len() != bundle.len() || result.direction.len() != bundle.dim() {
        return false;
    }
    let d = &result.direction;
    let dd = dot(d, d);
    bundle
        .grads()
        .iter()
        .zip(sigma.as_slice())
        .all(|(g, s)| dot(g, d) >= s * dd - tol)
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `Σ w_i v_i`.
pub fn combine(vectors: &[Vec<f64>], weights: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; vectors.first().map_or(0, Vec::len)];
    for (v, w) in vectors.iter().zip(weights) {
        for (o, x) in out.iter_mut().zip(v) {
            *o += w * x;
        }
    }
    out
}

fn gram(points: &[Vec<f64>]) -> Vec<f64> {
    let k = points.len();
    let mut g = vec![0.0; k * k];
    for i in 0..k {
        for j in i..k {
            let v = dot(&points[i], &points[j]);
            g[i * k + j] = v;
            g[j * k + i] = v;
        }
    }
    g
}

fn gram_times(g: &[f64], k: usize, mu: &[f64]) -> Vec<f64> {
    (0..k).map(|i| dot(&g[i * k..(i + 1) * k], mu)).collect()
}

fn argmin(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, v) in values.enumerate() {
        if v < best.1 {
            best = (i, v);
        }
    }
    best.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bundle(grads: &[&[f64]]) -> GradientBundle {
        GradientBundle::from_grads(grads.iter().map(|g| g.to_vec()).collect()).unwrap()
    }

    #[test]
    fn bundle_rejects_bad_input() {
        assert!(GradientBundle::from_grads(vec![]).is_err());
        assert!(GradientBundle::from_grads(vec![vec![]]).is_err());
        assert!(GradientBundle::from_grads(vec![vec![1.0, 0.0], vec![1.0]]).is_err());
        assert!(matches!(
            GradientBundle::from_grads(vec![vec![f64::NAN]]),
            Err(Error::Numeric(_))
        ));
        assert!(GradientBundle::new(vec![1, 1], vec![vec![1.0], vec![2.0]]).is_err());
    }

    #[test]
    fn gmc_singleton_and_symmetry() {
        let mut state = ElasticState::default();
        let s = elastic_factors_gmc(&bundle(&[&[3.0, 4.0]]), &mut state).unwrap();
        assert_eq!(s.as_slice(), &[1.0]);

        let mut state = ElasticState::default();
        let s = elastic_factors_gmc(&bundle(&[&[1.0, 0.0], &[0.0, 1.0]]), &mut state).unwrap();
        assert_eq!(s.as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn gmc_momentum_update() {
        // First sighting initializes m to the norm: m = [1, 0].
        let mut state = ElasticState::new(1.0);
        let s = elastic_factors_gmc(&bundle(&[&[1.0, 0.0], &[0.0, 0.0]]), &mut state).unwrap();
        let e = std::f64::consts::E;
        assert!((s.as_slice()[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((s.as_slice()[1] - 1.0 / (e + 1.0)).abs() < 1e-15);
        assert!((s.as_slice()[0] - 0.7311).abs() < 1e-4);

        // Second step: m1 = 0.9*1 + 0.1*2 = 1.1, m2 = 0.9*0 + 0.1*0 = 0.
        elastic_factors_gmc(&bundle(&[&[2.0, 0.0], &[0.0, 0.0]]), &mut state).unwrap();
        assert!((state.momentum[&1] - 1.1).abs() < 1e-15);
        assert_eq!(state.momentum[&2], 0.0);
    }

    #[test]
    fn gmc_rejects_empty_and_bad_temperature() {
        let mut state = ElasticState::new(0.0);
        assert!(elastic_factors_gmc(&bundle(&[&[1.0]]), &mut state).is_err());
    }

    #[test]
    fn gs_examples() {
        let s = elastic_factors_gs(&bundle(&[&[1.0, 2.0]]), 1.0).unwrap();
        assert_eq!(s.as_slice(), &[1.0]);

        let s = elastic_factors_gs(&bundle(&[&[1.0, 2.0], &[-3.0, 0.5]]), 1.0).unwrap();
        assert!((s.as_slice()[0] - 0.5).abs() < 1e-15);

        let r = std::f64::consts::FRAC_1_SQRT_2;
        let s = elastic_factors_gs(&bundle(&[&[1.0, 0.0], &[0.0, 1.0], &[r, r]]), 1.0).unwrap();
        // Scalar oracle: scores [1 + √2/2, 1 + √2/2, 1 + √2].
        let scores = [1.0 + r, 1.0 + r, 1.0 + 2.0 * r];
        let z: f64 = scores.iter().map(|v| v.exp()).sum();
        for (got, sc) in s.as_slice().iter().zip(scores) {
            assert!((got - sc.exp() / z).abs() < 1e-14);
        }
        let expected = [0.24826, 0.24826, 0.50349];
        for (got, want) in s.as_slice().iter().zip(expected) {
            assert!((got - want).abs() < 1e-5, "{got} vs {want}");
        }
    }

    #[test]
    fn gs_zero_gradient_is_degenerate() {
        let err = elastic_factors_gs(&bundle(&[&[1.0, 0.0], &[0.0, 0.0]]), 1.0).unwrap_err();
        assert!(matches!(err, Error::DegenerateGradient { task: 2 }));
    }

    #[test]
    fn min_norm_examples() {
        let opts = SolverOptions::default();
        let sol = solve_min_norm_simplex(&[vec![3.0, 4.0]], opts).unwrap();
        assert_eq!(sol.weights, vec![1.0]);
        assert_eq!(sol.objective, 25.0);

        let sol = solve_min_norm_simplex(&[vec![1.0, 0.0], vec![0.0, 1.0]], opts).unwrap();
        assert!((sol.weights[0] - 0.5).abs() < 1e-12);
        assert!((sol.objective - 0.5).abs() < 1e-12);
        assert!(sol.converged);

        // 1-D clipped formula: μ1 = (p2·p2 − p1·p2)/‖p1 − p2‖² = (1 + 2)/9.
        let sol = solve_min_norm_simplex(&[vec![2.0, 0.0], vec![-1.0, 0.0]], opts).unwrap();
        assert!((sol.weights[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((sol.weights[1] - 2.0 / 3.0).abs() < 1e-12);
        assert!(sol.objective < 1e-24);
    }

    #[test]
    fn min_norm_reports_nonconvergence() {
        let pts = vec![
            vec![1.0, 0.3],
            vec![-0.4, 1.0],
            vec![-0.5, -0.9],
            vec![0.9, -0.8],
        ];
        let sol = solve_min_norm_simplex(
            &pts,
            SolverOptions {
                tol: 1e-300,
                max_iter: 1,
            },
        )
        .unwrap();
        assert_eq!(sol.iterations, 1);
        let s: f64 = sol.weights.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn emgd_examples() {
        let opts = SolverOptions::default();
        let b = bundle(&[&[1.5, -2.0]]);
        let r = solve_emgd(&b, &ElasticFactors::new(vec![1.0]).unwrap(), opts).unwrap();
        assert_eq!(r.lambda, vec![1.0]);
        assert_eq!(r.direction, vec![1.5, -2.0]);

        let b = bundle(&[&[2.0, 0.0], &[1.0, 0.0]]);
        let sigma = ElasticFactors::new(vec![0.5, 0.5]).unwrap();
        let r = solve_emgd(&b, &sigma, opts).unwrap();
        assert!(r.lambda[0].abs() < 1e-12);
        assert!((r.lambda[1] - 2.0).abs() < 1e-12);
        assert!((r.direction[0] - 2.0).abs() < 1e-12);
        assert!(r.direction[1].abs() < 1e-12);
        // Grid oracle at 1e-3 over {λ ≥ 0, Σλσ = 1}.
        let mut best = f64::INFINITY;
        for i in 0..=1000 {
            let mu = i as f64 / 1000.0;
            let l1 = mu / 0.5;
            let l2 = (1.0 - mu) / 0.5;
            best = best.min((2.0 * l1 + l2).powi(2));
        }
        assert!((r.objective - best).abs() < 1e-9);
    }

    #[test]
    fn emgd_rejects_bad_sigma() {
        let b = bundle(&[&[1.0], &[2.0]]);
        let opts = SolverOptions::default();
        assert!(solve_emgd(&b, &ElasticFactors(vec![1.0, 0.0]), opts).is_err());
        assert!(solve_emgd(&b, &ElasticFactors(vec![1.0]), opts).is_err());
        assert!(ElasticFactors::new(vec![1.5]).is_err());
    }

    #[test]
    fn mgda_examples() {
        let opts = SolverOptions::default();
        let r = solve_mgda(&bundle(&[&[0.3, 0.1]]), opts).unwrap();
        assert_eq!(r.lambda, vec![1.0]);
        let r = solve_mgda(&bundle(&[&[1.0, 0.0], &[0.0, 1.0]]), opts).unwrap();
        assert!((r.lambda[0] - 0.5).abs() < 1e-12);
        assert!((r.direction[0] - 0.5).abs() < 1e-12);
        assert!((r.direction[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn avg_grad_examples() {
        let r = avg_grad(&bundle(&[&[1.0, 2.0]]));
        assert_eq!(r.direction, vec![1.0, 2.0]);
        let r = avg_grad(&bundle(&[&[1.0, 0.0], &[0.0, 1.0]]));
        assert_eq!(r.direction, vec![0.5, 0.5]);
        let r = avg_grad(&bundle(&[&[2.0, 2.0], &[0.0, -2.0], &[1.0, 0.0]]));
        assert!((r.direction[0] - 1.0).abs() < 1e-15);
        assert!(r.direction[1].abs() < 1e-15);
    }

    #[test]
    fn two_task_examples() {
        let s = two_task_closed_form(&[1.0, 0.0], &[0.0, 1.0], 1.0, 1.0).unwrap();
        assert_eq!((s.lambda1, s.lambda2), (0.5, 0.5));
        assert_eq!(s.branch, TwoTaskBranch::Interior);

        let s = two_task_closed_form(&[2.0, 0.0], &[1.0, 0.0], 0.5, 0.5).unwrap();
        assert_eq!((s.lambda1, s.lambda2), (0.0, 2.0));
        assert_eq!(s.branch, TwoTaskBranch::SecondOnly);

        let s = two_task_closed_form(&[2.0, 0.0], &[-1.0, 0.0], 1.0, 1.0).unwrap();
        assert!((s.lambda1 - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.lambda2 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.branch, TwoTaskBranch::Interior);

        let s = two_task_closed_form(&[0.0, 1.0], &[0.0, 5.0], 1.0, 1.0).unwrap();
        assert_eq!(s.branch, TwoTaskBranch::FirstOnly);
        assert_eq!((s.lambda1, s.lambda2), (1.0, 0.0));
    }

    #[test]
    fn two_task_degenerate_prefers_smaller_norm() {
        let s = two_task_closed_form(&[1.0, 1.0], &[2.0, 2.0], 0.5, 1.0).unwrap();
        assert_eq!(s.branch, TwoTaskBranch::Degenerate);
        assert_eq!((s.lambda1, s.lambda2), (2.0, 0.0));
        let s = two_task_closed_form(&[1.0, 1.0], &[1.0, 1.0], 1.0, 1.0).unwrap();
        assert_eq!((s.lambda1, s.lambda2), (0.0, 1.0));
    }

    #[test]
    fn brute_force_examples() {
        let b = bundle(&[&[1.0, 2.0]]);
        let (l, obj) =
            brute_force_weights(&b, &ElasticFactors::new(vec![0.5]).unwrap(), 0.01).unwrap();
        assert_eq!(l, vec![2.0]);
        assert!((obj - 20.0).abs() < 1e-12);

        let h = 3f64.sqrt() / 2.0;
        let b = bundle(&[&[1.0, 0.0], &[-0.5, h], &[-0.5, -h]]);
        let (_, obj) = brute_force_weights(&b, &ElasticFactors::uniform(3), 0.01).unwrap();
        assert!(obj < 1e-3, "{obj}");

        let b = GradientBundle::from_grads(vec![vec![1.0]; 5]).unwrap();
        assert!(matches!(
            brute_force_weights(&b, &ElasticFactors::ones(5), 0.1),
            Err(Error::UnsupportedSize(_))
        ));
        let b = bundle(&[&[1.0]]);
        assert!(brute_force_weights(&b, &ElasticFactors::ones(1), 0.5).is_err());
    }

    #[test]
    fn pareto_check_examples() {
        let b = bundle(&[&[1.0, 0.0], &[-1.0, 0.0]]);
        let sigma = ElasticFactors::ones(2);
        let r = solve_mgda(&b, SolverOptions::default()).unwrap();
        assert!(r.direction_norm() < 1e-12);
        assert!(pareto_descent_check(&b, &sigma, &r, 1e-12));

        let b = bundle(&[&[1.0, 0.0], &[0.0, 2.0]]);
        let r = solve_mgda(&b, SolverOptions::default()).unwrap();
        assert!((r.lambda[0] - 0.8).abs() < 1e-12);
        assert!(pareto_descent_check(&b, &sigma, &r, 1e-12));
        let mut corrupt = r.clone();
        corrupt.lambda.swap(0, 1);
        corrupt.direction = combine(b.grads(), &corrupt.lambda);
        assert!(!pareto_descent_check(&b, &sigma, &corrupt, 1e-12));
    }

    #[test]
    fn zero_gradient_is_flagged() {
        let b = bundle(&[&[1.0, 2.0], &[0.0, 0.0]]);
        let r = solve_mgda(&b, SolverOptions::default()).unwrap();
        assert_eq!(r.zero_grad_tasks, vec![1]);
        assert!(r.direction_norm() < 1e-12);
    }

    #[test]
    fn zero_in_scaled_hull_three_tasks() {
        // 0 strictly inside the scaled hull.
        let b = bundle(&[&[1.0, 0.2], &[-0.7, 1.1], &[-0.4, -1.3]]);
        let sigma = ElasticFactors::new(vec![0.2, 0.5, 0.3]).unwrap();
        let r = solve_emgd(&b, &sigma, SolverOptions::default()).unwrap();
        assert!(r.converged);
        assert!(r.direction_norm() <= 1e-6);
        assert!(r.alpha.abs() <= 1e-6);
    }

    fn grad_strategy(k: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(-1.0f64..1.0, d), k)
    }

    proptest! {
        #[test]
        fn solver_output_is_feasible(grads in grad_strategy(3, 5), s in prop::collection::vec(0.05f64..1.0, 3)) {
            let b = GradientBundle::from_grads(grads).unwrap();
            let sigma = ElasticFactors::new(s.clone()).unwrap();
            let r = solve_emgd(&b, &sigma, SolverOptions::default()).unwrap();
            prop_assert!(r.lambda.iter().all(|l| *l >= 0.0));
            let total: f64 = r.lambda.iter().zip(&s).map(|(l, sg)| l * sg).sum();
            prop_assert!((total - 1.0).abs() <= 1e-8);
            let d = combine(b.grads(), &r.lambda);
            for (a, c) in d.iter().zip(&r.direction) {
                prop_assert!((a - c).abs() <= 1e-10);
            }
            prop_assert!(r.converged);
            prop_assert!(pareto_descent_check(&b, &sigma, &r, 1e-8));
        }

        #[test]
        fn scale_equivariance(grads in grad_strategy(3, 4), c in 0.1f64..10.0) {
            let b = GradientBundle::from_grads(grads.clone()).unwrap();
            let scaled = GradientBundle::from_grads(
                grads.iter().map(|g| g.iter().map(|v| v * c).collect()).collect()
            ).unwrap();
            let sigma = ElasticFactors::new(vec![0.3, 0.5, 0.2]).unwrap();
            let r1 = solve_emgd(&b, &sigma, SolverOptions::default()).unwrap();
            let r2 = solve_emgd(&scaled, &sigma, SolverOptions::default()).unwrap();
            for (a, bb) in r1.lambda.iter().zip(&r2.lambda) {
                prop_assert!((a - bb).abs() <= 1e-9, "{:?} vs {:?}", r1.lambda, r2.lambda);
            }
            for (a, bb) in r1.direction.iter().zip(&r2.direction) {
                prop_assert!((a * c - bb).abs() <= 1e-9 * c.max(1.0));
            }
        }

        #[test]
        fn gs_invariant_to_positive_rescaling(grads in grad_strategy(3, 4), c in 0.01f64..100.0, which in 0usize..3) {
            prop_assume!(grads.iter().all(|g| norm(g) > 1e-3));
            let b = GradientBundle::from_grads(grads.clone()).unwrap();
            let mut scaled = grads;
            scaled[which].iter_mut().for_each(|v| *v *= c);
            let b2 = GradientBundle::from_grads(scaled).unwrap();
            let s1 = elastic_factors_gs(&b, 1.0).unwrap();
            let s2 = elastic_factors_gs(&b2, 1.0).unwrap();
            for (a, bb) in s1.as_slice().iter().zip(s2.as_slice()) {
                prop_assert!((a - bb).abs() <= 1e-12);
            }
        }

        #[test]
        fn softmax_factors_sum_to_one(grads in grad_strategy(4, 3), t in 0.1f64..5.0) {
            let b = GradientBundle::from_grads(grads).unwrap();
            let mut state = ElasticState::new(t);
            let s = elastic_factors_gmc(&b, &mut state).unwrap();
            let total: f64 = s.as_slice().iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
            prop_assert!(s.as_slice().iter().all(|v| *v > 0.0 && *v <= 1.0));
        }
    }
}
