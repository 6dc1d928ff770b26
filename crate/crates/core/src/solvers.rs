//! Penalized least-squares engines used by the AECM cycles.
//!
//! * [`lasso_cd`] — cyclic coordinate descent for `‖y − Xb‖²/(2N) + λ‖b‖₁`.
//! * [`scaled_lasso`] — joint `(b, τ)` minimization of
//!   `‖y − Xb‖²/(2Nτ) + τ/2 + λ‖b‖₁` by alternating lasso and scale updates.
//! * [`group_lasso`] — exact block coordinate descent for
//!   `‖t − D l‖² + λ Σ_g ‖l_g‖₂` over contiguous, equally sized groups.
//!
//! Every solver records its objective after each sweep; the sequences are
//! non-increasing because each update is an exact (block) minimization.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{MmtrError, Result};
use crate::numerics::{dot, least_squares, norm1, norm2, sym_eigen, Mat};

/// Iteration controls shared by all solvers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub max_iter: usize,
    /// Convergence tolerance on the (scaled) optimality residual.
    pub tol: f64,
    /// When set, sweeps visit coordinates in a seeded random order.
    pub seed: Option<u64>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { max_iter: 10_000, tol: 1e-10, seed: None }
    }
}

#[derive(Debug, Clone)]
pub struct LassoProblem {
    pub design: Mat,
    pub response: Vec<f64>,
    pub penalty: f64,
}

impl LassoProblem {
    pub fn new(design: Mat, response: Vec<f64>, penalty: f64) -> Result<Self> {
        if design.rows() != response.len() {
            return Err(MmtrError::DimensionMismatch(format!(
                "design has {} rows but response has length {}",
                design.rows(),
                response.len()
            )));
        }
        if !(penalty >= 0.0) {
            return Err(MmtrError::InvalidInput(format!("penalty must be >= 0, got {penalty}")));
        }
        Ok(Self { design, response, penalty })
    }

    pub fn n_obs(&self) -> usize {
        self.response.len()
    }

    pub fn residual(&self, coef: &[f64]) -> Vec<f64> {
        let fitted = self.design.mul_vec(coef);
        self.response.iter().zip(fitted).map(|(y, f)| y - f).collect()
    }

    /// `‖y − Xb‖²/(2N) + λ‖b‖₁`.
    pub fn objective(&self, coef: &[f64]) -> f64 {
        let r = self.residual(coef);
        dot(&r, &r) / (2.0 * self.n_obs() as f64) + self.penalty * norm1(coef)
    }

    /// `‖y − Xb‖²/(2Nτ) + τ/2 + λ‖b‖₁`.
    pub fn scaled_objective(&self, coef: &[f64], tau: f64) -> f64 {
        let r = self.residual(coef);
        dot(&r, &r) / (2.0 * self.n_obs() as f64 * tau) + 0.5 * tau + self.penalty * norm1(coef)
    }

    /// Largest violation of the lasso optimality conditions at `coef`.
    pub fn kkt_violation(&self, coef: &[f64]) -> f64 {
        self.kkt_violation_with(coef, self.penalty)
    }

    fn kkt_violation_with(&self, coef: &[f64], penalty: f64) -> f64 {
        let n = self.n_obs() as f64;
        let grad = self.design.tr_mul_vec(&self.residual(coef));
        let col_sq = column_sq_norms(&self.design);
        let mut worst = 0.0_f64;
        for j in 0..coef.len() {
            if col_sq[j] == 0.0 {
                continue;
            }
            let g = grad[j] / n;
            let v = if coef[j] == 0.0 {
                (g.abs() - penalty).max(0.0)
            } else {
                (g - penalty * coef[j].signum()).abs()
            };
            worst = worst.max(v);
        }
        worst
    }
}

#[derive(Debug, Clone)]
pub struct LassoFit {
    pub coef: Vec<f64>,
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn column_sq_norms(x: &Mat) -> Vec<f64> {
    x.column_norms().into_iter().map(|c| c * c).collect()
}

#[inline]
fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

fn sweep_order(n: usize, rng: &mut Option<ChaCha8Rng>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(rng) = rng.as_mut() {
        order.shuffle(rng);
    }
    order
}

/// Coordinate-descent lasso starting from zero.
pub fn lasso_cd(p: &LassoProblem, opts: &SolverOptions) -> LassoFit {
    lasso_cd_from(p, opts, None)
}

/// Coordinate-descent lasso with an optional warm start.
pub fn lasso_cd_from(p: &LassoProblem, opts: &SolverOptions, init: Option<&[f64]>) -> LassoFit {
    let mut cd = CdState::new(p, init);
    let scale = cd.kkt_scale(p);
    let mut rng = opts.seed.map(ChaCha8Rng::seed_from_u64);

    let mut trace = vec![p.objective(&cd.coef)];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        iterations += 1;
        cd.sweep(p, p.penalty, &mut rng);
        trace.push(dot(&cd.resid, &cd.resid) / (2.0 * cd.n) + p.penalty * norm1(&cd.coef));
        if p.kkt_violation(&cd.coef) <= opts.tol * scale {
            converged = true;
            break;
        }
    }
    LassoFit { coef: cd.coef, objective_trace: trace, iterations, converged }
}

/// Coefficients, residual and column data for coordinate descent.
struct CdState {
    n: f64,
    xt: Mat,
    col_sq: Vec<f64>,
    coef: Vec<f64>,
    resid: Vec<f64>,
}

impl CdState {
    fn new(p: &LassoProblem, init: Option<&[f64]>) -> Self {
        let n = p.n_obs() as f64;
        let ncoef = p.design.cols();
        let xt = p.design.transpose();
        let col_sq: Vec<f64> = (0..ncoef).map(|j| dot(xt.row(j), xt.row(j)) / n).collect();
        let mut coef = init.map_or_else(|| vec![0.0; ncoef], <[f64]>::to_vec);
        for j in 0..ncoef {
            if col_sq[j] == 0.0 {
                coef[j] = 0.0;
            }
        }
        let resid = p.residual(&coef);
        Self { n, xt, col_sq, coef, resid }
    }

    fn kkt_scale(&self, p: &LassoProblem) -> f64 {
        1.0 + p.design.tr_mul_vec(&p.response).iter().fold(0.0_f64, |m, g| m.max(g.abs())) / self.n
    }

    /// One pass over all coordinates, then a residual refresh against drift.
    fn sweep(&mut self, p: &LassoProblem, penalty: f64, rng: &mut Option<ChaCha8Rng>) {
        for j in sweep_order(self.coef.len(), rng) {
            if self.col_sq[j] == 0.0 {
                continue;
            }
            let xj = self.xt.row(j);
            let old = self.coef[j];
            let z = dot(xj, &self.resid) / self.n + self.col_sq[j] * old;
            let new = soft_threshold(z, penalty) / self.col_sq[j];
            if new != old {
                let delta = new - old;
                for (r, x) in self.resid.iter_mut().zip(xj) {
                    *r -= x * delta;
                }
                self.coef[j] = new;
            }
        }
        self.resid = p.residual(&self.coef);
    }
}

#[derive(Debug, Clone)]
pub struct ScaledLassoFit {
    pub coef: Vec<f64>,
    pub tau: f64,
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Below this the residual scale is treated as an exact interpolation.
pub const TAU_FLOOR: f64 = 1e-12;

/// Scaled lasso from `b = 0`, `τ = SD(y)`.
pub fn scaled_lasso(p: &LassoProblem, opts: &SolverOptions) -> Result<ScaledLassoFit> {
    scaled_lasso_from(p, opts, None)
}

/// Scaled lasso: minimizes `‖y − Xb‖²/(2Nτ) + τ/2 + λ‖b‖₁` jointly over
/// `(b, τ)` by alternating one coordinate sweep in `b` (penalty `λτ`) with the
/// exact update `τ ← ‖y − Xb‖/√N`.
///
/// Stops once `τ` moves by less than `tol` relatively and the lasso KKT
/// residual at the current `τ` is below `tol`.
pub fn scaled_lasso_from(p: &LassoProblem, opts: &SolverOptions, init: Option<(&[f64], f64)>) -> Result<ScaledLassoFit> {
    let n = p.n_obs();
    if n == 0 {
        return Err(MmtrError::InvalidInput("empty response".into()));
    }
    let nf = n as f64;
    let mut tau = match init {
        Some((_, t)) if t > 0.0 && t.is_finite() => t,
        _ => {
            let mean = p.response.iter().sum::<f64>() / nf;
            let sd = (p.response.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / nf).sqrt();
            if sd > 0.0 {
                sd
            } else {
                norm2(&p.response) / nf.sqrt()
            }
        }
    };
    if !(tau > 0.0) {
        return Err(MmtrError::InvalidInput("response is identically zero".into()));
    }

    let mut cd = CdState::new(p, init.map(|(b, _)| b));
    let scale = cd.kkt_scale(p);
    let mut rng = opts.seed.map(ChaCha8Rng::seed_from_u64);
    let mut trace = vec![p.scaled_objective(&cd.coef, tau)];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        iterations += 1;
        cd.sweep(p, p.penalty * tau, &mut rng);
        let next_tau = norm2(&cd.resid) / nf.sqrt();
        if next_tau < TAU_FLOOR {
            return Err(MmtrError::DegenerateResidual { tau: next_tau });
        }
        let change = (next_tau - tau).abs() / tau;
        tau = next_tau;
        trace.push(p.scaled_objective(&cd.coef, tau));
        if change < opts.tol {
            if p.kkt_violation_with(&cd.coef, p.penalty * tau) <= opts.tol * scale {
                converged = true;
                break;
            }
        }
    }
    Ok(ScaledLassoFit { coef: cd.coef, tau, objective_trace: trace, iterations, converged })
}

/// Group-lasso problem `‖target − design·l‖² + λ Σ_g ‖l_g‖₂`.
///
/// `sqrt_factor` is the design (`r x group_size·n_groups`); in the AECM cycles
/// it is the transposed square root of the cycle's `H` matrix.
#[derive(Debug, Clone)]
pub struct GroupLassoProblem {
    pub sqrt_factor: Mat,
    pub target: Vec<f64>,
    pub group_size: usize,
    pub n_groups: usize,
    pub penalty: f64,
}

impl GroupLassoProblem {
    pub fn new(
        sqrt_factor: Mat,
        target: Vec<f64>,
        group_size: usize,
        n_groups: usize,
        penalty: f64,
    ) -> Result<Self> {
        if sqrt_factor.cols() != group_size * n_groups {
            return Err(MmtrError::DimensionMismatch(format!(
                "design has {} columns, expected {group_size}x{n_groups}",
                sqrt_factor.cols()
            )));
        }
        if sqrt_factor.rows() != target.len() {
            return Err(MmtrError::DimensionMismatch(format!(
                "design has {} rows but target has length {}",
                sqrt_factor.rows(),
                target.len()
            )));
        }
        if !(penalty >= 0.0) {
            return Err(MmtrError::InvalidInput(format!("penalty must be >= 0, got {penalty}")));
        }
        Ok(Self { sqrt_factor, target, group_size, n_groups, penalty })
    }

    pub fn objective(&self, coef: &[f64]) -> f64 {
        let fitted = self.sqrt_factor.mul_vec(coef);
        let rss: f64 = self.target.iter().zip(fitted).map(|(t, f)| (t - f).powi(2)).sum();
        rss + self.penalty * self.group_norms(coef).iter().sum::<f64>()
    }

    pub fn group_norms(&self, coef: &[f64]) -> Vec<f64> {
        coef.chunks(self.group_size.max(1)).map(norm2).collect()
    }

    /// Largest violation of the group optimality conditions.
    pub fn kkt_violation(&self, coef: &[f64]) -> f64 {
        let fitted = self.sqrt_factor.mul_vec(coef);
        let resid: Vec<f64> = fitted.iter().zip(&self.target).map(|(f, t)| f - t).collect();
        let grad: Vec<f64> = self.sqrt_factor.tr_mul_vec(&resid).iter().map(|g| 2.0 * g).collect();
        group_kkt(&grad, coef, self.group_size, self.penalty)
    }
}

fn group_kkt(grad: &[f64], coef: &[f64], size: usize, penalty: f64) -> f64 {
    let mut worst = 0.0_f64;
    for (g, l) in grad.chunks(size.max(1)).zip(coef.chunks(size.max(1))) {
        let nl = norm2(l);
        let v = if nl == 0.0 {
            (norm2(g) - penalty).max(0.0)
        } else {
            let s: Vec<f64> = g.iter().zip(l).map(|(gi, li)| gi + penalty * li / nl).collect();
            norm2(&s)
        };
        worst = worst.max(v);
    }
    worst
}

#[derive(Debug, Clone)]
pub struct GroupLassoFit {
    pub coef: Vec<f64>,
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

pub fn group_lasso(p: &GroupLassoProblem, opts: &SolverOptions) -> GroupLassoFit {
    group_lasso_from(p, opts, None)
}

/// Per-group eigendecomposition of the diagonal Gram block.
struct BlockEigen {
    values: Vec<f64>,
    vectors: Mat,
}

/// Exact block coordinate descent with an optional warm start.
///
/// Stops when the KKT residual is below `tol` and a full sweep moves no
/// coefficient by more than `tol` relative to the largest one.
///
/// Each block subproblem `vᵀA v − 2rᵀv + λ‖v‖` is solved exactly: zero when
/// `2‖r‖ ≤ λ`, otherwise `v = (A + κI)⁻¹ r` with `κ > 0` fixed by the secular
/// equation `κ‖(A + κI)⁻¹ r‖ = λ/2` (bisection on the block eigenbasis).
/// With `λ = 0` the minimum-norm least-squares solution is returned directly.
pub fn group_lasso_from(p: &GroupLassoProblem, opts: &SolverOptions, init: Option<&[f64]>) -> GroupLassoFit {
    let size = p.group_size;
    let dim = size * p.n_groups;
    let gram = p.sqrt_factor.tr_matmul(&p.sqrt_factor);
    let lin = p.sqrt_factor.tr_mul_vec(&p.target);
    let tt = dot(&p.target, &p.target);
    let mut coef = init.map_or_else(|| vec![0.0; dim], <[f64]>::to_vec);

    let blocks: Vec<BlockEigen> = (0..p.n_groups)
        .map(|g| {
            let (values, vectors) = sym_eigen(&gram.block(g * size, g * size, size, size));
            BlockEigen { values, vectors }
        })
        .collect();
    let max_eig = blocks.iter().flat_map(|b| b.values.iter().copied()).fold(0.0_f64, f64::max);
    let eig_floor = 1e-12 * max_eig.max(f64::MIN_POSITIVE);
    let scale = 1.0 + 2.0 * lin.iter().fold(0.0_f64, |m, x| m.max(x.abs()));

    let objective = |coef: &[f64], a_coef: &[f64]| {
        let quad = dot(coef, a_coef) - 2.0 * dot(&lin, coef) + tt;
        quad + p.penalty * coef.chunks(size.max(1)).map(norm2).sum::<f64>()
    };
    let mut a_coef = gram.mul_vec(&coef);
    let mut trace = vec![objective(&coef, &a_coef)];
    let mut rng = opts.seed.map(ChaCha8Rng::seed_from_u64);
    let mut converged = false;
    let mut iterations = 0;

    if dim == 0 {
        return GroupLassoFit { coef, objective_trace: trace, iterations, converged: true };
    }
    if p.penalty == 0.0 {
        // Unpenalized: solve directly instead of crawling through ill-conditioned blocks.
        let coef = least_squares(&p.sqrt_factor, &p.target);
        trace.push(objective(&coef, &gram.mul_vec(&coef)));
        return GroupLassoFit { coef, objective_trace: trace, iterations: 1, converged: true };
    }

    while iterations < opts.max_iter {
        iterations += 1;
        let mut max_step = 0.0_f64;
        for g in sweep_order(p.n_groups, &mut rng) {
            let range = g * size..(g + 1) * size;
            let block = &blocks[g];
            let own = &coef[range.clone()];
            // r = c_g − Σ_{k≠g} A_gk l_k
            let a_own = gram.block(g * size, g * size, size, size).mul_vec(own);
            let r: Vec<f64> = (0..size).map(|i| lin[g * size + i] - a_coef[g * size + i] + a_own[i]).collect();
            let new = solve_block(block, &r, p.penalty, eig_floor);
            let delta: Vec<f64> = new.iter().zip(own).map(|(a, b)| a - b).collect();
            if delta.iter().any(|d| *d != 0.0) {
                max_step = max_step.max(delta.iter().fold(0.0_f64, |m, d| m.max(d.abs())));
                for row in 0..dim {
                    let grow = &gram.row(row)[range.clone()];
                    a_coef[row] += dot(grow, &delta);
                }
                coef[range].copy_from_slice(&new);
            }
        }
        a_coef = gram.mul_vec(&coef);
        trace.push(objective(&coef, &a_coef));
        let grad: Vec<f64> = a_coef.iter().zip(&lin).map(|(a, c)| 2.0 * (a - c)).collect();
        // Small gradients alone can leave ill-conditioned blocks far from the optimum.
        let coef_scale = 1.0 + coef.iter().fold(0.0_f64, |m, c| m.max(c.abs()));
        if group_kkt(&grad, &coef, size, p.penalty) <= opts.tol * scale && max_step <= opts.tol * coef_scale {
            converged = true;
            break;
        }
    }
    GroupLassoFit { coef, objective_trace: trace, iterations, converged }
}

fn solve_block(block: &BlockEigen, r: &[f64], penalty: f64, eig_floor: f64) -> Vec<f64> {
    let size = r.len();
    let rn = norm2(r);
    if 2.0 * rn <= penalty || rn == 0.0 {
        return vec![0.0; size];
    }
    // Work in the eigenbasis: r̃ = Uᵀ r.
    let rt = block.vectors.tr_mul_vec(r);
    let vals = &block.values;
    let kappa = if penalty == 0.0 {
        0.0
    } else {
        let half = 0.5 * penalty;
        // κ ↦ κ‖(A + κI)⁻¹ r‖ increases from ~0 to ‖r‖ > λ/2.
        let psi = |k: f64| -> f64 {
            let s: f64 = vals.iter().zip(&rt).map(|(a, x)| (x / (a.max(0.0) + k)).powi(2)).sum();
            k * s.sqrt()
        };
        let amax = vals.iter().fold(0.0_f64, |m, v| m.max(*v));
        let mut hi = 2.0 * (amax * half / (rn - half)).max(f64::MIN_POSITIVE) + f64::MIN_POSITIVE;
        while psi(hi) < half {
            hi *= 2.0;
        }
        let mut lo = 0.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if psi(mid) < half {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    };
    let mut coords = vec![0.0; size];
    for i in 0..size {
        let denom = vals[i].max(0.0) + kappa;
        coords[i] = if denom > eig_floor { rt[i] / denom } else { 0.0 };
    }
    block.vectors.mul_vec(&coords)
}
