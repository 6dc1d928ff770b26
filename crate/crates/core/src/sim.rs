//! Seeded simulation designs, error metrics and the replication harness.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aecm::{tune, FitConfig, TuneGrid};
use crate::error::{MmtrError, Result};
use crate::model::{marginal_cov, predict, Dims, GroupData, ModelParams, PredictMode, TraceDataset};
use crate::numerics::{kron, sym_eigen, vec, Mat};

/// Data generated by the MMTR model itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmtrScenario {
    pub p1: usize,
    pub p2: usize,
    pub q1: usize,
    pub q2: usize,
    pub s1: usize,
    pub s2: usize,
    pub n: usize,
    pub m: usize,
    #[serde(default = "default_tau2")]
    pub tau2: f64,
    #[serde(default = "default_sparsity")]
    pub sparsity_frac: f64,
    #[serde(default)]
    pub seed: u64,
    /// Held-out groups drawn from the same truth for prediction error.
    #[serde(default = "default_n_test")]
    pub n_test: usize,
}

fn default_tau2() -> f64 {
    0.5
}
fn default_sparsity() -> f64 {
    0.4
}
fn default_n_test() -> usize {
    20
}
fn default_alpha_range() -> (f64, f64) {
    (0.2, 0.8)
}

impl MmtrScenario {
    /// `P = Q = 5 x 5`, `S = 2`.
    pub fn case1(n: usize, m: usize, seed: u64) -> Self {
        Self {
            p1: 5,
            p2: 5,
            q1: 5,
            q2: 5,
            s1: 2,
            s2: 2,
            n,
            m,
            tau2: default_tau2(),
            sparsity_frac: default_sparsity(),
            seed,
            n_test: default_n_test(),
        }
    }

    /// `P = Q = 10 x 10`, `S = 3`.
    pub fn case2(n: usize, m: usize, seed: u64) -> Self {
        Self { p1: 10, p2: 10, q1: 10, q2: 10, s1: 3, s2: 3, ..Self::case1(n, m, seed) }
    }

    pub fn dims(&self) -> Dims {
        Dims::new(self.p1, self.p2, self.q1, self.q2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 {
            return Err(MmtrError::InvalidInput("n and m must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.sparsity_frac) {
            return Err(MmtrError::InvalidInput("sparsity_frac must lie in [0, 1]".into()));
        }
        if self.s1 > self.q1 || self.s2 > self.q2 || self.p1 * self.p2 == 0 || self.q1 * self.q2 == 0 {
            return Err(MmtrError::InvalidInput("invalid scenario dimensions".into()));
        }
        if !(self.tau2 > 0.0) {
            return Err(MmtrError::InvalidInput("tau2 must be positive".into()));
        }
        Ok(())
    }
}

/// Misspecified data: equicorrelated errors, no Kronecker random effect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquicorrScenario {
    pub p1: usize,
    pub p2: usize,
    pub n: usize,
    pub m: usize,
    #[serde(default = "default_alpha_range")]
    pub alpha_range: (f64, f64),
    /// Fixes `α` instead of drawing it.
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default = "default_sparsity")]
    pub sparsity_frac: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
}

impl EquicorrScenario {
    pub fn new(p1: usize, p2: usize, n: usize, m: usize, seed: u64) -> Self {
        Self {
            p1,
            p2,
            n,
            m,
            alpha_range: default_alpha_range(),
            alpha: None,
            sparsity_frac: default_sparsity(),
            seed,
            n_test: default_n_test(),
        }
    }

    pub fn dims(&self) -> Dims {
        Dims::new(self.p1, self.p2, self.p1, self.p2)
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.alpha_range;
        if self.n == 0 || self.m == 0 || self.p1 * self.p2 == 0 {
            return Err(MmtrError::InvalidInput("invalid scenario dimensions".into()));
        }
        if !(0.0 <= lo && lo <= hi && hi < 1.0) {
            return Err(MmtrError::InvalidInput("alpha range must lie within [0, 1)".into()));
        }
        if let Some(a) = self.alpha {
            if !(0.0..1.0).contains(&a) {
                return Err(MmtrError::InvalidInput("alpha must lie in [0, 1)".into()));
            }
        }
        if !(0.0..=1.0).contains(&self.sparsity_frac) {
            return Err(MmtrError::InvalidInput("sparsity_frac must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "case", rename_all = "lowercase")]
pub enum Scenario {
    Mmtr(MmtrScenario),
    Equicorr(EquicorrScenario),
}

impl Scenario {
    pub fn with_seed(&self, seed: u64) -> Self {
        match self {
            Scenario::Mmtr(s) => Scenario::Mmtr(MmtrScenario { seed, ..s.clone() }),
            Scenario::Equicorr(s) => Scenario::Equicorr(EquicorrScenario { seed, ..s.clone() }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Scenario::Mmtr(s) => s.validate(),
            Scenario::Equicorr(s) => s.validate(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TruthKind {
    Mmtr,
    /// Within-group correlation `α`, unit variance.
    Equicorr { alpha: f64 },
}

/// Generating parameters of a simulated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthBundle {
    /// For equicorrelated data `L1`, `L2` have no columns and `τ² = 1`.
    pub params: ModelParams,
    pub kind: TruthKind,
}

impl TruthBundle {
    /// True marginal covariance `Cov(y_i)` of a group.
    pub fn marginal_cov(&self, g: &GroupData) -> Mat {
        match self.kind {
            TruthKind::Mmtr => marginal_cov(g, &self.params).scale(self.params.tau2),
            TruthKind::Equicorr { alpha } => equicorr_matrix(g.len(), alpha),
        }
    }
}

pub fn equicorr_matrix(m: usize, alpha: f64) -> Mat {
    Mat::from_fn(m, m, |r, c| if r == c { 1.0 } else { alpha })
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// `P` entries from `{±0.5, ±1, …, ±10}` with `⌊frac·P⌋` of them set to zero.
fn sparse_coefficients(rng: &mut ChaCha8Rng, p1: usize, p2: usize, frac: f64) -> Mat {
    let p = p1 * p2;
    let mut values: Vec<f64> = (0..p)
        .map(|_| {
            let k = rng.random_range(1..=20) as f64 * 0.5;
            if rng.random_bool(0.5) {
                k
            } else {
                -k
            }
        })
        .collect();
    let mut idx: Vec<usize> = (0..p).collect();
    idx.shuffle(rng);
    let zeros = (frac * p as f64 + 1e-9).floor() as usize;
    for &i in idx.iter().take(zeros.min(p)) {
        values[i] = 0.0;
    }
    // Column-stacked, matching vec(B).
    Mat::from_fn(p1, p2, |r, c| values[r + p1 * c])
}

/// Product of the nonzero eigenvalues of `L Lᵀ`, i.e. `det(Lᵀ L)`.
pub fn pseudo_det(l: &Mat) -> f64 {
    let (vals, _) = sym_eigen(&l.tr_matmul(l));
    vals.iter().product()
}

fn normalized_factor(rng: &mut ChaCha8Rng, q: usize, s: usize) -> Mat {
    let l = Mat::from_fn(q, s, |_, _| rng.random_range(-1.0..1.0));
    l.scale(pseudo_det(&l).powf(-1.0 / (2.0 * s as f64)))
}

fn mmtr_groups(
    rng: &mut ChaCha8Rng,
    truth: &ModelParams,
    dims: Dims,
    n: usize,
    m: usize,
    prefix: &str,
) -> Result<Vec<GroupData>> {
    let (s1, s2) = truth.ranks();
    let kr = kron(&truth.l2, &truth.l1);
    let sd = truth.tau2.sqrt();
    let b = truth.b_vec();
    (0..n)
        .map(|i| {
            let x = Mat::from_fn(m, dims.p(), |_, _| normal(rng));
            let z = Mat::from_fn(m, dims.q(), |_, _| normal(rng));
            let c: Vec<f64> = (0..s1 * s2).map(|_| sd * normal(rng)).collect();
            let re = z.matmul(&kr).mul_vec(&c);
            let mean = x.mul_vec(&b);
            let y = (0..m).map(|j| mean[j] + re[j] + sd * normal(rng)).collect();
            GroupData::new(format!("{prefix}{i}"), y, x, z, dims)
        })
        .collect()
}

/// Generated training data, held-out data and the truth.
#[derive(Debug, Clone)]
pub struct Simulated {
    pub train: TraceDataset,
    pub test: Option<TraceDataset>,
    pub truth: TruthBundle,
}

/// MMTR-generated data with iid standard normal covariates.
pub fn gen_mmtr(s: &MmtrScenario) -> Result<(TraceDataset, TruthBundle)> {
    let sim = simulate_mmtr(s)?;
    Ok((sim.train, sim.truth))
}

pub fn simulate_mmtr(s: &MmtrScenario) -> Result<Simulated> {
    s.validate()?;
    let dims = s.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let b = sparse_coefficients(&mut rng, s.p1, s.p2, s.sparsity_frac);
    let l1 = normalized_factor(&mut rng, s.q1, s.s1);
    let l2 = normalized_factor(&mut rng, s.q2, s.s2);
    let params = ModelParams::new(b, l1, l2, s.tau2)?;
    let train = TraceDataset::new(dims, mmtr_groups(&mut rng, &params, dims, s.n, s.m, "g")?)?;
    let test = if s.n_test > 0 {
        Some(TraceDataset::new(dims, mmtr_groups(&mut rng, &params, dims, s.n_test, s.m, "test")?)?)
    } else {
        None
    };
    Ok(Simulated { train, test, truth: TruthBundle { params, kind: TruthKind::Mmtr } })
}

fn equicorr_groups(
    rng: &mut ChaCha8Rng,
    b: &[f64],
    dims: Dims,
    alpha: f64,
    n: usize,
    m: usize,
    prefix: &str,
) -> Result<Vec<GroupData>> {
    let (own, shared) = ((1.0 - alpha).sqrt(), alpha.sqrt());
    (0..n)
        .map(|i| {
            let x = Mat::from_fn(m, dims.p(), |_, _| normal(rng));
            let w = normal(rng);
            let mean = x.mul_vec(b);
            let y = (0..m).map(|j| mean[j] + own * normal(rng) + shared * w).collect();
            GroupData::new(format!("{prefix}{i}"), y, x.clone(), x, dims)
        })
        .collect()
}

/// Equicorrelated-error data; `Z_ij = X_ij`.
pub fn gen_equicorr(s: &EquicorrScenario) -> Result<(TraceDataset, TruthBundle)> {
    let sim = simulate_equicorr(s)?;
    Ok((sim.train, sim.truth))
}

pub fn simulate_equicorr(s: &EquicorrScenario) -> Result<Simulated> {
    s.validate()?;
    let dims = s.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let drawn = rng.random_range(s.alpha_range.0..=s.alpha_range.1);
    let alpha = s.alpha.unwrap_or(drawn);
    let b = sparse_coefficients(&mut rng, s.p1, s.p2, s.sparsity_frac);
    let bv = vec(&b);
    let train = TraceDataset::new(dims, equicorr_groups(&mut rng, &bv, dims, alpha, s.n, s.m, "g")?)?;
    let test = if s.n_test > 0 {
        Some(TraceDataset::new(dims, equicorr_groups(&mut rng, &bv, dims, alpha, s.n_test, s.m, "test")?)?)
    } else {
        None
    };
    let params = ModelParams::new(b, Mat::zeros(s.p1, 0), Mat::zeros(s.p2, 0), 1.0)?;
    Ok(Simulated { train, test, truth: TruthBundle { params, kind: TruthKind::Equicorr { alpha } } })
}

pub fn simulate(s: &Scenario) -> Result<Simulated> {
    match s {
        Scenario::Mmtr(s) => simulate_mmtr(s),
        Scenario::Equicorr(s) => simulate_equicorr(s),
    }
}

/// `‖est − truth‖_F / ‖truth‖_F`.
pub fn rel_err(est: &Mat, truth: &Mat) -> Result<f64> {
    if est.shape() != truth.shape() {
        return Err(MmtrError::DimensionMismatch(format!("{:?} vs {:?}", est.shape(), truth.shape())));
    }
    let denom = truth.frobenius_norm();
    if denom == 0.0 {
        return Err(MmtrError::ZeroTruth);
    }
    Ok(est.sub(truth).frobenius_norm() / denom)
}

/// `L Lᵀ` scaled so its largest diagonal entry is 1 (zero stays zero).
pub fn normalized_gram(l: &Mat) -> Mat {
    let g = l.matmul_tr(l);
    let d = g.diag().into_iter().fold(0.0_f64, f64::max);
    if d > 0.0 {
        g.scale(1.0 / d)
    } else {
        g
    }
}

/// Relative errors of `Σ1` and `Σ2` after unit max-diagonal normalization.
pub fn cov_err(fit: &ModelParams, truth: &ModelParams) -> Result<(f64, f64)> {
    Ok((
        rel_err(&normalized_gram(&fit.l1), &normalized_gram(&truth.l1))?,
        rel_err(&normalized_gram(&fit.l2), &normalized_gram(&truth.l2))?,
    ))
}

/// Mean over groups of the relative error of the fitted marginal covariance.
pub fn lambda_err(d: &TraceDataset, fit: &ModelParams, truth: &TruthBundle) -> Result<f64> {
    let mut total = 0.0;
    for g in &d.groups {
        let est = marginal_cov(g, fit).scale(fit.tau2);
        total += rel_err(&est, &truth.marginal_cov(g))?;
    }
    Ok(total / d.n_groups() as f64)
}

fn check_shapes(y_true: &[Vec<f64>], y_pred: &[Vec<f64>]) -> Result<()> {
    if y_true.len() != y_pred.len() || y_true.iter().zip(y_pred).any(|(a, b)| a.len() != b.len()) {
        return Err(MmtrError::DimensionMismatch("prediction shape differs from response shape".into()));
    }
    if y_true.is_empty() {
        return Err(MmtrError::InvalidInput("no groups to score".into()));
    }
    Ok(())
}

/// `Σ_i ‖y_i − ŷ_i‖² / n*` over the `n*` groups.
pub fn mspe(y_true: &[Vec<f64>], y_pred: &[Vec<f64>]) -> Result<f64> {
    check_shapes(y_true, y_pred)?;
    let sse: f64 = y_true.iter().zip(y_pred).flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).powi(2))).sum();
    Ok(sse / y_true.len() as f64)
}

/// `1 − SSE/SST` over the pooled observations.
pub fn r2(y_true: &[Vec<f64>], y_pred: &[Vec<f64>]) -> Result<f64> {
    check_shapes(y_true, y_pred)?;
    let all: Vec<f64> = y_true.iter().flatten().copied().collect();
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let sst: f64 = all.iter().map(|y| (y - mean).powi(2)).sum();
    let sse: f64 = y_true.iter().zip(y_pred).flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).powi(2))).sum();
    Ok(1.0 - sse / sst)
}

/// Metrics of one replication; `NaN` where not applicable or failed.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationRow {
    pub rep: usize,
    pub seed: u64,
    pub err_b: f64,
    pub err_sigma1: f64,
    pub err_sigma2: f64,
    pub err_lambda: f64,
    pub mspe: f64,
    pub rank1: usize,
    pub rank2: usize,
    pub alpha: Option<f64>,
    pub lambda_b: f64,
    pub lambda_l: f64,
    pub runtime_ms: f64,
    pub status: String,
}

#[derive(Debug, Clone)]
pub struct ReplicationTable {
    pub scenario: Scenario,
    pub rows: Vec<ReplicationRow>,
}

fn run_one(scenario: &Scenario, grid: &TuneGrid, cfg: &FitConfig, rep: usize, seed: u64) -> ReplicationRow {
    let clock = Instant::now();
    let mut row = ReplicationRow {
        rep,
        seed,
        err_b: f64::NAN,
        err_sigma1: f64::NAN,
        err_sigma2: f64::NAN,
        err_lambda: f64::NAN,
        mspe: f64::NAN,
        rank1: 0,
        rank2: 0,
        alpha: None,
        lambda_b: f64::NAN,
        lambda_l: f64::NAN,
        runtime_ms: 0.0,
        status: "ok".into(),
    };
    let outcome = (|| -> Result<()> {
        let sim = simulate(&scenario.with_seed(seed))?;
        if let TruthKind::Equicorr { alpha } = sim.truth.kind {
            row.alpha = Some(alpha);
        }
        let res = tune(&sim.train, grid, &FitConfig { seed, ..cfg.clone() })?;
        let est = &res.best.params;
        row.lambda_b = res.best.lambda_b;
        row.lambda_l = res.best.lambda_l;
        row.rank1 = res.best.selected_ranks.0;
        row.rank2 = res.best.selected_ranks.1;
        row.err_b = rel_err(&est.b_mat, &sim.truth.params.b_mat)?;
        if sim.truth.kind == TruthKind::Mmtr {
            let (e1, e2) = cov_err(est, &sim.truth.params)?;
            row.err_sigma1 = e1;
            row.err_sigma2 = e2;
        }
        row.err_lambda = lambda_err(&sim.train, est, &sim.truth)?;
        if let Some(test) = &sim.test {
            let pred = predict(test, est, PredictMode::Marginal, None)?;
            let truth: Vec<Vec<f64>> = test.groups.iter().map(|g| g.y.clone()).collect();
            row.mspe = mspe(&truth, &pred)?;
        }
        Ok(())
    })();
    if let Err(e) = outcome {
        row.status = format!("failed: {e}");
    }
    row.runtime_ms = clock.elapsed().as_secs_f64() * 1e3;
    row
}

/// Replication `r` uses seed `base_seed + r` for data, initialization and folds.
///
/// Replications run in parallel on the current rayon pool; rows are ordered
/// by replication index.
pub fn run_replications(
    scenario: &Scenario,
    grid: &TuneGrid,
    cfg: &FitConfig,
    reps: usize,
    base_seed: u64,
) -> Result<ReplicationTable> {
    if reps == 0 {
        return Err(MmtrError::InvalidInput("reps must be at least 1".into()));
    }
    scenario.validate()?;
    grid.validate()?;
    let rows = (0..reps)
        .into_par_iter()
        .map(|rep| run_one(scenario, grid, cfg, rep, base_seed.wrapping_add(rep as u64)))
        .collect();
    Ok(ReplicationTable { scenario: scenario.clone(), rows })
}

fn scenario_fields(s: &Scenario) -> Vec<(&'static str, String)> {
    match s {
        Scenario::Mmtr(s) => vec![
            ("case", "mmtr".into()),
            ("p1", s.p1.to_string()),
            ("p2", s.p2.to_string()),
            ("q1", s.q1.to_string()),
            ("q2", s.q2.to_string()),
            ("s1", s.s1.to_string()),
            ("s2", s.s2.to_string()),
            ("n", s.n.to_string()),
            ("m", s.m.to_string()),
        ],
        Scenario::Equicorr(s) => vec![
            ("case", "equicorr".into()),
            ("p1", s.p1.to_string()),
            ("p2", s.p2.to_string()),
            ("q1", s.p1.to_string()),
            ("q2", s.p2.to_string()),
            ("s1", String::new()),
            ("s2", String::new()),
            ("n", s.n.to_string()),
            ("m", s.m.to_string()),
        ],
    }
}

fn fmt(v: f64) -> String {
    if v.is_nan() {
        "NA".into()
    } else {
        v.to_string()
    }
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { f64::NAN };
    (mean, sd)
}

fn to_csv_string(header: Vec<String>, records: Vec<Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header)?;
    for r in records {
        w.write_record(&r)?;
    }
    let bytes = w.into_inner().map_err(|e| MmtrError::Io(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| MmtrError::Io(e.to_string()))
}

pub const METRICS: [&str; 5] = ["err_B", "err_Sigma1", "err_Sigma2", "err_Lambda", "mspe"];

impl ReplicationRow {
    pub fn metric(&self, name: &str) -> f64 {
        match name {
            "err_B" => self.err_b,
            "err_Sigma1" => self.err_sigma1,
            "err_Sigma2" => self.err_sigma2,
            "err_Lambda" => self.err_lambda,
            "mspe" => self.mspe,
            _ => f64::NAN,
        }
    }
}

impl ReplicationTable {
    fn is_equicorr(&self) -> bool {
        matches!(self.scenario, Scenario::Equicorr(_))
    }

    /// One row per replication. `runtime_ms` is wall-clock and is only
    /// emitted on request so the default output is reproducible.
    pub fn to_csv(&self, include_timings: bool) -> Result<String> {
        let fields = scenario_fields(&self.scenario);
        let mut header: Vec<String> = fields.iter().map(|(k, _)| k.to_string()).collect();
        header.extend(
            ["rep", "seed", "err_B", "err_Sigma1", "err_Sigma2", "err_Lambda", "mspe", "rank1", "rank2", "lambda_b", "lambda_l"]
                .map(String::from),
        );
        if self.is_equicorr() {
            header.push("alpha".into());
        }
        if include_timings {
            header.push("runtime_ms".into());
        }
        header.push("status".into());
        let records = self
            .rows
            .iter()
            .map(|r| {
                let mut rec: Vec<String> = fields.iter().map(|(_, v)| v.clone()).collect();
                rec.extend([
                    r.rep.to_string(),
                    r.seed.to_string(),
                    fmt(r.err_b),
                    fmt(r.err_sigma1),
                    fmt(r.err_sigma2),
                    fmt(r.err_lambda),
                    fmt(r.mspe),
                    r.rank1.to_string(),
                    r.rank2.to_string(),
                    fmt(r.lambda_b),
                    fmt(r.lambda_l),
                ]);
                if self.is_equicorr() {
                    rec.push(fmt(r.alpha.unwrap_or(f64::NAN)));
                }
                if include_timings {
                    rec.push(format!("{:.3}", r.runtime_ms));
                }
                rec.push(r.status.clone());
                rec
            })
            .collect();
        to_csv_string(header, records)
    }

    /// Mean and standard deviation per metric (`NA` when undefined).
    pub fn summary_csv(&self) -> Result<String> {
        let header = ["metric", "mean", "sd", "n_ok"].map(String::from).to_vec();
        let records = METRICS
            .iter()
            .map(|&name| {
                let values: Vec<f64> = self.rows.iter().map(|r| r.metric(name)).collect();
                let (mean, sd) = mean_sd(&values);
                let ok = values.iter().filter(|v| v.is_finite()).count();
                vec![name.to_string(), fmt(mean), fmt(sd), ok.to_string()]
            })
            .collect();
        to_csv_string(header, records)
    }

    /// Mean `err_Λ` per `α` bin; bins are `[edges[i], edges[i+1])`, the last closed.
    pub fn alpha_bins(&self, edges: &[f64]) -> Vec<(f64, f64, usize, f64)> {
        let mut out = Vec::new();
        for (i, w) in edges.windows(2).enumerate() {
            let last = i + 2 == edges.len();
            let vals: Vec<f64> = self
                .rows
                .iter()
                .filter_map(|r| r.alpha.map(|a| (a, r.err_lambda)))
                .filter(|(a, e)| e.is_finite() && *a >= w[0] && (*a < w[1] || (last && *a <= w[1])))
                .map(|(_, e)| e)
                .collect();
            out.push((w[0], w[1], vals.len(), mean_sd(&vals).0));
        }
        out
    }

    pub fn alpha_bins_csv(&self, edges: &[f64]) -> Result<String> {
        let header = ["alpha_lo", "alpha_hi", "count", "mean_err_Lambda"].map(String::from).to_vec();
        let records = self
            .alpha_bins(edges)
            .into_iter()
            .map(|(lo, hi, n, m)| vec![lo.to_string(), hi.to_string(), n.to_string(), fmt(m)])
            .collect();
        to_csv_string(header, records)
    }
}
