//! Three-cycle regularized AECM fitting, post-processing, EBIC and tuning.
//!
//! Each iteration runs
//! 1. a scaled lasso for `(B, τ)` on the data whitened by the current `Λ_i`,
//! 2. a group lasso for `L1` on the cycle system of orientation 1,
//! 3. a group lasso for `L2` on the cycle system of orientation 2,
//!
//! followed by [`postprocess`]. The objective
//! ([`anchored_objective`](crate::model::anchored_objective)) is recorded
//! after each cycle. Within iteration `t` every value uses the reference scale
//! `τ̂` produced by that iteration's first cycle, and the row with `cycle = 0`
//! re-evaluates the iteration's starting point under that scale so each cycle
//! can be compared against its immediate predecessor.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MmtrError, Result};
use crate::model::{
    anchored_objective, build_cycle_system, neg_log_lik, objective_with_scale, predict, whiten, ModelParams, PredictMode, TraceDataset,
};
use crate::numerics::{householder_rotate, pinv_factor, psd_sqrt, unvec, vec, Mat, DEFAULT_PSD_TOL};
use crate::solvers::{group_lasso_from, scaled_lasso_from, GroupLassoProblem, LassoProblem, SolverOptions};

/// Columns with Euclidean norm below this are treated as zero.
pub const ZERO_COLUMN_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub lambda_b: f64,
    pub lambda_l: f64,
    /// Initial rank `S_k = max(1, ceil(factor · ln Q_k))`, capped at `Q_k`.
    pub init_rank_factor: f64,
    /// Overrides the rank rule when set.
    pub init_ranks: Option<(usize, usize)>,
    pub max_iter: usize,
    /// Relative change of the objective that stops the loop.
    pub tol: f64,
    pub seed: u64,
    pub rank_prune: bool,
    pub normalize_each_iter: bool,
    pub solver: SolverOptions,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            lambda_b: 0.0,
            lambda_l: 0.0,
            init_rank_factor: 1.0,
            init_ranks: None,
            max_iter: 200,
            tol: 1e-6,
            seed: 0,
            rank_prune: true,
            normalize_each_iter: true,
            solver: SolverOptions::default(),
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return Err(MmtrError::InvalidInput("max_iter must be at least 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(MmtrError::InvalidInput("tol must be positive".into()));
        }
        if !(self.lambda_b >= 0.0 && self.lambda_l >= 0.0) || !self.lambda_b.is_finite() || !self.lambda_l.is_finite()
        {
            return Err(MmtrError::InvalidInput("penalties must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// `max(1, ceil(factor · ln q))`, never above `q`.
pub fn initial_rank(q: usize, factor: f64) -> usize {
    let s = (factor * (q as f64).ln()).ceil();
    let s = if s.is_finite() && s > 1.0 { s as usize } else { 1 };
    s.min(q.max(1))
}

/// One row of the objective trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    /// 0 marks the iteration's starting point; 1–3 the state after that cycle.
    pub cycle: u8,
    pub objective: f64,
    pub loglik: f64,
    pub rank1: usize,
    pub rank2: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CycleTimings {
    pub cycle1: Duration,
    pub cycle2: Duration,
    pub cycle3: Duration,
    pub postprocess: Duration,
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub params: ModelParams,
    pub trace: Vec<TraceRow>,
    pub objective_trace: Vec<f64>,
    pub loglik_trace: Vec<f64>,
    pub selected_ranks: (usize, usize),
    pub initial_ranks: (usize, usize),
    pub ebic: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Number of inner solver calls that hit their iteration limit.
    pub inner_nonconvergence: usize,
    pub per_cycle_timings: CycleTimings,
    pub lambda_b: f64,
    pub lambda_l: f64,
}

impl FitReport {
    /// Largest increase of the objective over any single cycle.
    pub fn max_cycle_increase(&self) -> f64 {
        self.trace
            .windows(2)
            .filter(|w| w[1].cycle > 0)
            .map(|w| w[1].objective - w[0].objective)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn final_loglik(&self) -> f64 {
        self.loglik_trace.last().copied().unwrap_or(f64::NAN)
    }
}

/// Random uniform(−1, 1) factors, zero `B`, `τ²` = sample variance of `y`,
/// then [`postprocess`].
pub fn init_params(d: &TraceDataset, cfg: &FitConfig) -> ModelParams {
    let (s1, s2) = cfg
        .init_ranks
        .unwrap_or((initial_rank(d.dims.q1, cfg.init_rank_factor), initial_rank(d.dims.q2, cfg.init_rank_factor)));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let l1 = Mat::from_fn(d.dims.q1, s1, |_, _| rng.random_range(-1.0..1.0));
    let l2 = Mat::from_fn(d.dims.q2, s2, |_, _| rng.random_range(-1.0..1.0));
    let y = d.responses();
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var = if y.len() > 1 { y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    let tau2 = if var > 0.0 { var } else { 1.0 };
    postprocess(&ModelParams { b_mat: Mat::zeros(d.dims.p1, d.dims.p2), l1, l2, tau2 })
}

/// First cycle: scaled lasso on the whitened data. Returns `(vec B, τ)`.
pub fn cycle1_update(d: &TraceDataset, p: &ModelParams, cfg: &FitConfig) -> Result<(Vec<f64>, f64, bool)> {
    let n = d.n_obs();
    let mut design = Mat::zeros(n, d.dims.p());
    let mut response = Vec::with_capacity(n);
    let mut row = 0;
    for g in &d.groups {
        let (yw, xw) = whiten(g, p);
        for j in 0..g.len() {
            design.row_mut(row).copy_from_slice(xw.row(j));
            row += 1;
        }
        response.extend(yw);
    }
    let problem = LassoProblem::new(design, response, cfg.lambda_b)?;
    let b = p.b_vec();
    let fit = scaled_lasso_from(&problem, &cfg.solver, Some((&b, p.tau2.sqrt())))?;
    Ok((fit.coef, fit.tau, fit.converged))
}

/// Group-lasso CM step for `L_k` (`k = 1` is the second cycle, `k = 2` the third).
pub fn factor_update(d: &TraceDataset, p: &ModelParams, cfg: &FitConfig, k: usize) -> Result<(Mat, bool)> {
    let current = p.factor(k);
    let (q, s) = current.shape();
    if s == 0 {
        return Ok((current.clone(), true));
    }
    let sys = build_cycle_system(d, p, &p.b_vec(), k);
    let root = psd_sqrt(&sys.h, DEFAULT_PSD_TOL)?;
    let target = pinv_factor(&root).mul_vec(&sys.g);
    let problem = GroupLassoProblem::new(root.factor.transpose(), target, q, s, cfg.lambda_l)?;
    let fit = group_lasso_from(&problem, &cfg.solver, Some(&vec(current)));
    Ok((unvec(&fit.coef, q, s)?, fit.converged))
}

pub fn cycle2_update(d: &TraceDataset, p: &ModelParams, cfg: &FitConfig) -> Result<Mat> {
    factor_update(d, p, cfg, 1).map(|(l, _)| l)
}

pub fn cycle3_update(d: &TraceDataset, p: &ModelParams, cfg: &FitConfig) -> Result<Mat> {
    factor_update(d, p, cfg, 2).map(|(l, _)| l)
}

fn nonzero_columns(l: &Mat) -> Vec<usize> {
    l.column_norms().iter().enumerate().filter(|(_, n)| **n >= ZERO_COLUMN_TOL).map(|(i, _)| i).collect()
}

/// Removes zero columns, balances the two Gram maxima and rotates `L2`.
///
/// If either factor loses every column both become empty, which is the
/// model without random effects.
pub fn postprocess(p: &ModelParams) -> ModelParams {
    postprocess_with(p, true, true)
}

pub fn postprocess_with(p: &ModelParams, prune: bool, normalize: bool) -> ModelParams {
    let mut out = p.clone();
    if prune {
        out.l1 = out.l1.select_columns(&nonzero_columns(&out.l1));
        out.l2 = out.l2.select_columns(&nonzero_columns(&out.l2));
        if out.l1.cols() == 0 || out.l2.cols() == 0 {
            out.l1 = Mat::zeros(out.l1.rows(), 0);
            out.l2 = Mat::zeros(out.l2.rows(), 0);
            return out;
        }
    }
    if !normalize {
        return out;
    }
    let d1 = out.sigma1().diag().into_iter().fold(0.0_f64, f64::max);
    let d2 = out.sigma2().diag().into_iter().fold(0.0_f64, f64::max);
    if d1 > 0.0 && d2 > 0.0 {
        out.l1 = out.l1.scale((d2 / d1).powf(0.25));
        out.l2 = out.l2.scale((d1 / d2).powf(0.25));
    }
    let diag2 = out.sigma2().diag();
    if let Some(j) = (0..diag2.len()).max_by(|&a, &b| diag2[a].total_cmp(&diag2[b])) {
        if let Ok(rotated) = householder_rotate(&out.l2, j) {
            out.l2 = rotated;
        }
    }
    out
}

fn row(d: &TraceDataset, p: &ModelParams, cfg: &FitConfig, tau_ref: f64, iteration: usize, cycle: u8) -> TraceRow {
    let nll = neg_log_lik(d, p);
    let objective = anchored_objective(d, p, cfg.lambda_b, cfg.lambda_l, tau_ref);
    let (rank1, rank2) = p.ranks();
    TraceRow { iteration, cycle, objective, loglik: -nll, rank1, rank2 }
}

/// Runs the AECM loop from [`init_params`].
pub fn fit(d: &TraceDataset, cfg: &FitConfig) -> Result<FitReport> {
    cfg.validate()?;
    fit_from(d, cfg, init_params(d, cfg))
}

/// Runs the AECM loop from the given parameters.
pub fn fit_from(d: &TraceDataset, cfg: &FitConfig, init: ModelParams) -> Result<FitReport> {
    cfg.validate()?;
    init.validate()?;
    init.check_dims(d.dims)?;
    let initial_ranks = init.ranks();
    let mut p = init;
    let mut trace = Vec::with_capacity(4 * cfg.max_iter);
    let mut timings = CycleTimings::default();
    let mut converged = false;
    let mut inner_nonconvergence = 0;
    let mut iterations = 0;
    let mut prev_end: Option<f64> = None;

    for t in 1..=cfg.max_iter {
        iterations = t;
        let start = p.clone();

        let clock = Instant::now();
        let (b, tau, ok) = cycle1_update(d, &p, cfg)?;
        inner_nonconvergence += usize::from(!ok);
        p.b_mat = unvec(&b, d.dims.p1, d.dims.p2)?;
        p.tau2 = tau * tau;
        timings.cycle1 += clock.elapsed();
        trace.push(row(d, &start, cfg, tau, t, 0));
        trace.push(row(d, &p, cfg, tau, t, 1));

        let clock = Instant::now();
        let (l1, ok) = factor_update(d, &p, cfg, 1)?;
        inner_nonconvergence += usize::from(!ok);
        p.l1 = l1;
        timings.cycle2 += clock.elapsed();
        trace.push(row(d, &p, cfg, tau, t, 2));

        let clock = Instant::now();
        let (l2, ok) = factor_update(d, &p, cfg, 2)?;
        inner_nonconvergence += usize::from(!ok);
        p.l2 = l2;
        timings.cycle3 += clock.elapsed();
        trace.push(row(d, &p, cfg, tau, t, 3));

        let clock = Instant::now();
        p = postprocess_with(&p, cfg.rank_prune, cfg.normalize_each_iter);
        timings.postprocess += clock.elapsed();

        let end = objective_with_scale(d, &p, cfg.lambda_b, cfg.lambda_l, tau);
        log::debug!("iteration {t}: objective {end:.10e}, ranks {:?}, tau2 {:.6e}", p.ranks(), p.tau2);
        if let Some(prev) = prev_end {
            if (end - prev).abs() <= cfg.tol * prev.abs().max(f64::MIN_POSITIVE) {
                converged = true;
                break;
            }
        }
        prev_end = Some(end);
    }

    if !converged {
        log::info!("no convergence after {iterations} iterations (lambda_b {}, lambda_l {})", cfg.lambda_b, cfg.lambda_l);
    }
    let mut report = FitReport {
        objective_trace: trace.iter().map(|r| r.objective).collect(),
        loglik_trace: trace.iter().map(|r| r.loglik).collect(),
        selected_ranks: p.ranks(),
        initial_ranks,
        ebic: f64::NAN,
        iterations,
        converged,
        inner_nonconvergence,
        per_cycle_timings: timings,
        lambda_b: cfg.lambda_b,
        lambda_l: cfg.lambda_l,
        trace,
        params: p,
    };
    report.ebic = ebic(d, &report, DEFAULT_EBIC_GAMMA);
    Ok(report)
}

pub const DEFAULT_EBIC_GAMMA: f64 = 0.5;

fn nnz(m: &Mat) -> usize {
    m.as_slice().iter().filter(|v| **v != 0.0).count()
}

/// Degrees of freedom: nonzeros of `B`, `L1`, `L2`, plus one for `τ²`.
pub fn degrees_of_freedom(p: &ModelParams) -> usize {
    nnz(&p.b_mat) + nnz(&p.l1) + nnz(&p.l2) + 1
}

/// `−2·loglik + df·ln N + 2γ·df·ln(P1P2 + Q1S1 + Q2S2)` with the initial ranks.
pub fn ebic(d: &TraceDataset, report: &FitReport, gamma: f64) -> f64 {
    let loglik = -neg_log_lik(d, &report.params);
    let (s1, s2) = report.initial_ranks;
    ebic_value(loglik, degrees_of_freedom(&report.params), d.n_obs(), d.dims.p() + d.dims.q1 * s1 + d.dims.q2 * s2, gamma)
}

pub fn ebic_value(loglik: f64, df: usize, n_obs: usize, model_space: usize, gamma: f64) -> f64 {
    let df = df as f64;
    -2.0 * loglik + df * (n_obs as f64).ln() + 2.0 * gamma * df * (model_space as f64).ln()
}

/// `k` points equally spaced on the log scale from `lo` to `hi`.
pub fn log_grid(lo: f64, hi: f64, k: usize) -> Result<Vec<f64>> {
    if k == 0 || !(lo > 0.0) || !(hi >= lo) {
        return Err(MmtrError::InvalidInput(format!("invalid log grid {lo}:{hi}:{k}")));
    }
    if k == 1 {
        return Ok(vec![lo]);
    }
    let (a, b) = (lo.ln(), hi.ln());
    let mut grid: Vec<f64> = (0..k).map(|i| (a + (b - a) * i as f64 / (k - 1) as f64).exp()).collect();
    grid[0] = lo;
    grid[k - 1] = hi;
    Ok(grid)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Selection {
    Ebic,
    KfoldCv { k: usize, fold_seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneGrid {
    pub lambda_b_grid: Vec<f64>,
    pub lambda_l_grid: Vec<f64>,
    pub selection: Selection,
}

impl TuneGrid {
    /// 10 x 10 log grid: `λ_B ∈ [1e-4, 0.04]`, `λ_L ∈ [1e-4, 1]`.
    pub fn default_grid() -> Self {
        Self {
            lambda_b_grid: log_grid(1e-4, 0.04, 10).expect("valid grid"),
            lambda_l_grid: log_grid(1e-4, 1.0, 10).expect("valid grid"),
            selection: Selection::Ebic,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda_b_grid.is_empty() || self.lambda_l_grid.is_empty() {
            return Err(MmtrError::InvalidInput("tuning grids must be nonempty".into()));
        }
        if self.lambda_b_grid.iter().chain(&self.lambda_l_grid).any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(MmtrError::InvalidInput("grid values must be finite and non-negative".into()));
        }
        if let Selection::KfoldCv { k, .. } = self.selection {
            if k < 2 {
                return Err(MmtrError::InvalidInput("cross-validation needs at least 2 folds".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub lambda_b: f64,
    pub lambda_l: f64,
    pub ebic: f64,
    pub loglik: f64,
    pub df: usize,
    pub rank1: usize,
    pub rank2: usize,
    /// Selection score (EBIC or CV prediction error); `+∞` for failed cells.
    pub score: f64,
    pub status: String,
}

#[derive(Debug, Clone)]
pub struct TuneResult {
    pub best: FitReport,
    pub best_index: usize,
    pub table: Vec<GridCell>,
}

fn cv_score(d: &TraceDataset, cfg: &FitConfig, k: usize, fold_seed: u64) -> Result<f64> {
    let n = d.n_groups();
    if n < k {
        return Err(MmtrError::InvalidInput(format!("{k} folds need at least {k} groups, have {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(fold_seed));
    let mut total = 0.0;
    for fold in 0..k {
        let test: Vec<usize> = order.iter().enumerate().filter(|(i, _)| i % k == fold).map(|(_, g)| *g).collect();
        let train: Vec<usize> = order.iter().enumerate().filter(|(i, _)| i % k != fold).map(|(_, g)| *g).collect();
        let (dtrain, dtest) = (d.subset(&train)?, d.subset(&test)?);
        let rep = fit(&dtrain, cfg)?;
        let pred = predict(&dtest, &rep.params, PredictMode::Marginal, None)?;
        let sse: f64 = dtest
            .groups
            .iter()
            .zip(&pred)
            .map(|(g, yh)| g.y.iter().zip(yh).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
            .sum();
        total += sse / dtest.n_groups() as f64;
    }
    Ok(total / k as f64)
}

/// Fits every grid cell and selects the minimum score.
///
/// Cells run in parallel; each fit is sequential, so the result does not
/// depend on the thread count. Ties go to the larger `(λ_B, λ_L)`.
pub fn tune(d: &TraceDataset, grid: &TuneGrid, cfg: &FitConfig) -> Result<TuneResult> {
    grid.validate()?;
    let cells: Vec<(f64, f64)> =
        grid.lambda_b_grid.iter().flat_map(|&b| grid.lambda_l_grid.iter().map(move |&l| (b, l))).collect();
    let results: Vec<(GridCell, Option<FitReport>)> = cells
        .par_iter()
        .map(|&(lambda_b, lambda_l)| {
            let cell_cfg = FitConfig { lambda_b, lambda_l, ..cfg.clone() };
            let outcome = fit(d, &cell_cfg).and_then(|rep| {
                let score = match grid.selection {
                    Selection::Ebic => rep.ebic,
                    Selection::KfoldCv { k, fold_seed } => cv_score(d, &cell_cfg, k, fold_seed)?,
                };
                Ok((rep, score))
            });
            match outcome {
                Ok((rep, score)) => {
                    let cell = GridCell {
                        lambda_b,
                        lambda_l,
                        ebic: rep.ebic,
                        loglik: rep.final_loglik(),
                        df: degrees_of_freedom(&rep.params),
                        rank1: rep.selected_ranks.0,
                        rank2: rep.selected_ranks.1,
                        score: if score.is_finite() { score } else { f64::INFINITY },
                        status: if rep.converged { "converged".into() } else { "max_iter".into() },
                    };
                    (cell, Some(rep))
                }
                Err(e) => {
                    let cell = GridCell {
                        lambda_b,
                        lambda_l,
                        ebic: f64::INFINITY,
                        loglik: f64::NAN,
                        df: 0,
                        rank1: 0,
                        rank2: 0,
                        score: f64::INFINITY,
                        status: format!("failed: {e}"),
                    };
                    (cell, None)
                }
            }
        })
        .collect();

    let mut best: Option<usize> = None;
    for (i, (cell, rep)) in results.iter().enumerate() {
        if rep.is_none() {
            continue;
        }
        best = match best {
            None => Some(i),
            Some(j) => {
                let other = &results[j].0;
                let better = cell.score < other.score
                    || (cell.score == other.score
                        && (cell.lambda_b, cell.lambda_l).partial_cmp(&(other.lambda_b, other.lambda_l))
                            == Some(std::cmp::Ordering::Greater));
                Some(if better { i } else { j })
            }
        };
    }
    let best_index = best.ok_or_else(|| MmtrError::InvalidInput("every grid cell failed to fit".into()))?;
    let table: Vec<GridCell> = results.iter().map(|(c, _)| c.clone()).collect();
    let best = results.into_iter().nth(best_index).and_then(|(_, r)| r).expect("best cell has a fit");
    Ok(TuneResult { best, best_index, table })
}
