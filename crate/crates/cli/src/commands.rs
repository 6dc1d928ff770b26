//! Command implementations. Each command writes its files atomically and
//! returns the text it prints to stdout.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, ValueEnum};
use mmtr::aecm::{degrees_of_freedom, log_grid, TraceRow};
use mmtr::sim::{self, cov_err, lambda_err, mspe, r2, rel_err, Simulated};
use mmtr::{
    fit_from, tune, EquicorrScenario, FitConfig, MmtrError, MmtrScenario, PredictMode, Scenario, Selection,
    TraceDataset, TruthBundle, TruthKind, TuneGrid,
};
use serde::Serialize;

use crate::io::{self, ModelFile, ModelMetadata};
use crate::{CliError, CliResult};

/// `lo:hi:k`, a log-spaced grid of `k` values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub k: usize,
}

impl FromStr for GridSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            return Err(format!("expected lo:hi:k, got `{s}`"));
        }
        let lo: f64 = parts[0].parse().map_err(|_| format!("bad lower bound `{}`", parts[0]))?;
        let hi: f64 = parts[1].parse().map_err(|_| format!("bad upper bound `{}`", parts[1]))?;
        let k: usize = parts[2].parse().map_err(|_| format!("bad count `{}`", parts[2]))?;
        let spec = GridSpec { lo, hi, k };
        spec.values().map_err(|e| e.to_string())?;
        Ok(spec)
    }
}

impl GridSpec {
    pub fn values(&self) -> mmtr::Result<Vec<f64>> {
        log_grid(self.lo, self.hi, self.k)
    }
}

/// `s1,s2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankPair(pub usize, pub usize);

impl FromStr for RankPair {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (a, b) = s.split_once(',').ok_or_else(|| format!("expected s1,s2, got `{s}`"))?;
        let a: usize = a.trim().parse().map_err(|_| format!("bad rank `{a}`"))?;
        let b: usize = b.trim().parse().map_err(|_| format!("bad rank `{b}`"))?;
        if a == 0 || b == 0 {
            return Err("ranks must be at least 1".into());
        }
        Ok(RankPair(a, b))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Case {
    Mmtr,
    Equicorr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SelectMethod {
    Ebic,
    Cv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Marginal,
    Conditional,
}

impl From<Mode> for PredictMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Marginal => PredictMode::Marginal,
            Mode::Conditional => PredictMode::Conditional,
        }
    }
}

/// Settings shared by the fitting commands.
#[derive(Debug, Clone, Args)]
pub struct FitOptions {
    /// Maximum number of AECM iterations.
    #[arg(long, default_value_t = 200)]
    pub max_iter: usize,
    /// Relative objective change that stops the iterations.
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    /// Seed for the random factor initialization (and CV folds).
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Initial ranks are max(1, ceil(factor * ln Q_k)).
    #[arg(long, default_value_t = 1.0)]
    pub rank_factor: f64,
    /// Explicit initial ranks `s1,s2`.
    #[arg(long)]
    pub ranks: Option<RankPair>,
    /// Exit with code 4 when the outer loop or an inner solver does not converge.
    #[arg(long)]
    pub strict: bool,
}

impl FitOptions {
    pub fn config(&self, lambda_b: f64, lambda_l: f64) -> CliResult<FitConfig> {
        let cfg = FitConfig {
            lambda_b,
            lambda_l,
            init_rank_factor: self.rank_factor,
            init_ranks: self.ranks.map(|r| (r.0, r.1)),
            max_iter: self.max_iter,
            tol: self.tol,
            seed: self.seed,
            ..FitConfig::default()
        };
        cfg.validate().map_err(usage)?;
        if !(self.rank_factor > 0.0) {
            return Err(CliError::Usage("--rank-factor must be positive".into()));
        }
        Ok(cfg)
    }
}

fn usage(e: MmtrError) -> CliError {
    CliError::Usage(e.to_string())
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[arg(long, value_enum, default_value_t = Case::Mmtr)]
    pub case: Case,
    #[arg(long, default_value_t = 5)]
    pub p1: usize,
    #[arg(long, default_value_t = 5)]
    pub p2: usize,
    /// Random-effect rows (mmtr only; equicorr uses Z = X).
    #[arg(long, default_value_t = 5)]
    pub q1: usize,
    #[arg(long, default_value_t = 5)]
    pub q2: usize,
    #[arg(long, default_value_t = 2)]
    pub s1: usize,
    #[arg(long, default_value_t = 2)]
    pub s2: usize,
    /// Number of groups.
    #[arg(long)]
    pub n: usize,
    /// Observations per group.
    #[arg(long)]
    pub m: usize,
    #[arg(long, default_value_t = 0.5)]
    pub tau2: f64,
    /// Fraction of entries of B set to zero.
    #[arg(long, default_value_t = 0.4)]
    pub sparsity: f64,
    /// Fixed within-group correlation (equicorr); drawn from U(0.2, 0.8) otherwise.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Dataset CSV to write (with a `.meta.json` sidecar).
    #[arg(long)]
    pub out: PathBuf,
    /// Truth model file; defaults to `<out stem>.truth.json`.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Also write `n_test` held-out groups from the same truth here.
    #[arg(long)]
    pub test_out: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub n_test: usize,
}

impl SimulateArgs {
    pub fn scenario(&self) -> Scenario {
        let n_test = if self.test_out.is_some() { self.n_test } else { 0 };
        match self.case {
            Case::Mmtr => Scenario::Mmtr(MmtrScenario {
                p1: self.p1,
                p2: self.p2,
                q1: self.q1,
                q2: self.q2,
                s1: self.s1,
                s2: self.s2,
                n: self.n,
                m: self.m,
                tau2: self.tau2,
                sparsity_frac: self.sparsity,
                seed: self.seed,
                n_test,
            }),
            Case::Equicorr => Scenario::Equicorr(EquicorrScenario {
                alpha: self.alpha,
                sparsity_frac: self.sparsity,
                n_test,
                ..EquicorrScenario::new(self.p1, self.p2, self.n, self.m, self.seed)
            }),
        }
    }
}

fn derived_path(base: &Path, suffix: &str) -> PathBuf {
    let stem = base.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into());
    base.with_file_name(format!("{stem}{suffix}"))
}

pub fn truth_file(sim: &Simulated, scenario: &Scenario) -> ModelFile {
    let (source, alpha) = match (scenario, sim.truth.kind) {
        (Scenario::Mmtr(_), _) => ("mmtr", None),
        (Scenario::Equicorr(_), TruthKind::Equicorr { alpha }) => ("equicorr", Some(alpha)),
        (Scenario::Equicorr(_), TruthKind::Mmtr) => ("equicorr", None),
    };
    let meta = ModelMetadata {
        seed: Some(scenario_seed(scenario)),
        source: Some(source.into()),
        alpha,
        ..Default::default()
    };
    ModelFile::from_params(sim.train.dims, &sim.truth.params, None, meta)
}

fn scenario_seed(s: &Scenario) -> u64 {
    match s {
        Scenario::Mmtr(s) => s.seed,
        Scenario::Equicorr(s) => s.seed,
    }
}

pub fn simulate(a: &SimulateArgs) -> CliResult<String> {
    let scenario = a.scenario();
    scenario.validate().map_err(usage)?;
    let sim = sim::simulate(&scenario)?;
    let truth_path = a.truth.clone().unwrap_or_else(|| derived_path(&a.out, ".truth.json"));
    io::write_dataset(&a.out, &sim.train)?;
    io::write_model(&truth_path, &truth_file(&sim, &scenario))?;
    if let (Some(path), Some(test)) = (&a.test_out, &sim.test) {
        io::write_dataset(path, test)?;
    }
    let d = &sim.train;
    let b = sim.truth.params.b_mat.as_slice();
    let zeros = b.iter().filter(|v| **v == 0.0).count();
    let mut out = format!(
        "N={} groups={} dims=P{}x{} Q{}x{} zeros_in_B={}/{} sparsity={:.3}\n",
        d.n_obs(),
        d.n_groups(),
        d.dims.p1,
        d.dims.p2,
        d.dims.q1,
        d.dims.q2,
        zeros,
        b.len(),
        zeros as f64 / b.len() as f64
    );
    if let TruthKind::Equicorr { alpha } = sim.truth.kind {
        out.push_str(&format!("alpha={alpha}\n"));
    }
    Ok(out)
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub lambda_b: f64,
    #[arg(long)]
    pub lambda_l: f64,
    #[command(flatten)]
    pub opts: FitOptions,
    /// Start from this model instead of the random initialization.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Model file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Trace CSV; defaults to `<out stem>.trace.csv`.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Print per-cycle wall-clock timings to stderr.
    #[arg(long)]
    pub timings: bool,
}

pub fn trace_csv(rows: &[TraceRow]) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["iteration", "cycle", "objective", "loglik", "rank1", "rank2"]).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.iteration.to_string(),
            r.cycle.to_string(),
            r.objective.to_string(),
            r.loglik.to_string(),
            r.rank1.to_string(),
            r.rank2.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| CliError::Io(e.to_string()))
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Io(e.to_string())
}

fn strict_check(strict: bool, converged: bool, inner: usize, iterations: usize) -> CliResult<()> {
    if strict && (!converged || inner > 0) {
        return Err(CliError::NonConvergence(format!(
            "outer loop converged: {converged} after {iterations} iterations, inner solver failures: {inner}"
        )));
    }
    Ok(())
}

pub fn fit(a: &FitArgs) -> CliResult<String> {
    let cfg = a.opts.config(a.lambda_b, a.lambda_l)?;
    let d = io::read_dataset(&a.data)?;
    let init = match &a.init {
        Some(path) => {
            let m = io::read_model(path)?;
            if m.dims != d.dims {
                return Err(CliError::Usage(format!("initial model dims {:?} differ from data {:?}", m.dims, d.dims)));
            }
            m.params()?
        }
        None => mmtr::aecm::init_params(&d, &cfg),
    };
    let rep = fit_from(&d, &cfg, init)?;
    let trace_path = a.trace.clone().unwrap_or_else(|| derived_path(&a.out, ".trace.csv"));
    io::write_model(&a.out, &ModelFile::from_report(d.dims, &rep, cfg.seed))?;
    io::write_atomic(&trace_path, &trace_csv(&rep.trace)?)?;
    if a.timings {
        let t = rep.per_cycle_timings;
        eprintln!(
            "timings: cycle1={:.3}ms cycle2={:.3}ms cycle3={:.3}ms postprocess={:.3}ms",
            t.cycle1.as_secs_f64() * 1e3,
            t.cycle2.as_secs_f64() * 1e3,
            t.cycle3.as_secs_f64() * 1e3,
            t.postprocess.as_secs_f64() * 1e3
        );
    }
    let out = format!(
        "iterations={} converged={} objective={} loglik={} ranks={},{} ebic={}\n",
        rep.iterations,
        rep.converged,
        rep.objective_trace.last().copied().unwrap_or(f64::NAN),
        rep.final_loglik(),
        rep.selected_ranks.0,
        rep.selected_ranks.1,
        rep.ebic
    );
    strict_check(a.opts.strict, rep.converged, rep.inner_nonconvergence, rep.iterations)?;
    Ok(out)
}

#[derive(Debug, Clone, Args)]
pub struct GridOptions {
    /// Log-spaced λ_B grid `lo:hi:k`.
    #[arg(long, default_value = "1e-4:0.04:10")]
    pub grid_b: GridSpec,
    /// Log-spaced λ_L grid `lo:hi:k`.
    #[arg(long, default_value = "1e-4:1:10")]
    pub grid_l: GridSpec,
    #[arg(long, value_enum, default_value_t = SelectMethod::Ebic)]
    pub select: SelectMethod,
    /// Folds for `--select cv` (split over groups).
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
}

impl GridOptions {
    pub fn grid(&self, fold_seed: u64) -> CliResult<TuneGrid> {
        let selection = match self.select {
            SelectMethod::Ebic => Selection::Ebic,
            SelectMethod::Cv => Selection::KfoldCv { k: self.folds, fold_seed },
        };
        let grid = TuneGrid {
            lambda_b_grid: self.grid_b.values().map_err(usage)?,
            lambda_l_grid: self.grid_l.values().map_err(usage)?,
            selection,
        };
        grid.validate().map_err(usage)?;
        Ok(grid)
    }
}

#[derive(Debug, Clone, Args)]
pub struct TuneArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub grid: GridOptions,
    #[command(flatten)]
    pub opts: FitOptions,
    /// Best model file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Grid CSV; defaults to `<out stem>.grid.csv`.
    #[arg(long)]
    pub grid_out: Option<PathBuf>,
}

pub fn grid_csv(cells: &[mmtr::GridCell], with_cv: bool) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["lambda_b", "lambda_l", "ebic", "loglik", "df", "rank1", "rank2", "status"];
    if with_cv {
        header.push("cv_mspe");
    }
    w.write_record(&header).map_err(csv_err)?;
    let num = |v: f64| if v.is_nan() { "NA".to_string() } else { v.to_string() };
    for c in cells {
        let mut rec = vec![
            c.lambda_b.to_string(),
            c.lambda_l.to_string(),
            num(c.ebic),
            num(c.loglik),
            c.df.to_string(),
            c.rank1.to_string(),
            c.rank2.to_string(),
            c.status.clone(),
        ];
        if with_cv {
            rec.push(num(c.score));
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| CliError::Io(e.to_string()))
}

pub fn tune_cmd(a: &TuneArgs) -> CliResult<String> {
    let cfg = a.opts.config(0.0, 0.0)?;
    let grid = a.grid.grid(a.opts.seed)?;
    let d = io::read_dataset(&a.data)?;
    let res = tune(&d, &grid, &cfg)?;
    let grid_path = a.grid_out.clone().unwrap_or_else(|| derived_path(&a.out, ".grid.csv"));
    let best = &res.best;
    io::write_model(&a.out, &ModelFile::from_report(d.dims, best, cfg.seed))?;
    io::write_atomic(&grid_path, &grid_csv(&res.table, a.grid.select == SelectMethod::Cv)?)?;
    let failed = res.table.iter().filter(|c| c.status.starts_with("failed")).count();
    let out = format!(
        "cells={} failed={} best: lambda_b={} lambda_l={} ebic={} df={} ranks={},{} converged={}\n",
        res.table.len(),
        failed,
        best.lambda_b,
        best.lambda_l,
        best.ebic,
        degrees_of_freedom(&best.params),
        best.selected_ranks.0,
        best.selected_ranks.1,
        best.converged
    );
    strict_check(a.opts.strict, best.converged, best.inner_nonconvergence, best.iterations)?;
    Ok(out)
}

#[derive(Debug, Clone, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = Mode::Marginal)]
    pub mode: Mode,
    /// Groups whose posterior random effects drive conditional predictions;
    /// defaults to `--data` itself.
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Predictions CSV.
    #[arg(long)]
    pub out: PathBuf,
}

fn predictions(
    model: &Path,
    data: &Path,
    mode: Mode,
    train: Option<&Path>,
) -> CliResult<(TraceDataset, ModelFile, Vec<Vec<f64>>)> {
    let m = io::read_model(model)?;
    let d = io::read_dataset(data)?;
    if m.dims != d.dims {
        return Err(CliError::Usage(format!("model dims {:?} differ from data {:?}", m.dims, d.dims)));
    }
    let params = m.params()?;
    let train_data = match (mode, train) {
        (Mode::Conditional, Some(path)) => Some(io::read_dataset(path)?),
        _ => None,
    };
    let train_ref = match mode {
        Mode::Conditional => Some(train_data.as_ref().unwrap_or(&d)),
        Mode::Marginal => None,
    };
    let pred = mmtr::model::predict(&d, &params, mode.into(), train_ref)?;
    Ok((d, m, pred))
}

pub fn predict(a: &PredictArgs) -> CliResult<String> {
    let (d, _, pred) = predictions(&a.model, &a.data, a.mode, a.train.as_deref())?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["group_id", "obs_index", "y", "y_hat"]).map_err(csv_err)?;
    for (g, yh) in d.groups.iter().zip(&pred) {
        for (j, (y, p)) in g.y.iter().zip(yh).enumerate() {
            w.write_record([g.id.clone(), j.to_string(), y.to_string(), p.to_string()]).map_err(csv_err)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| CliError::Io(e.to_string()))?;
    io::write_atomic(&a.out, &bytes)?;
    Ok(format!("groups={} observations={}\n", d.n_groups(), d.n_obs()))
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = Mode::Marginal)]
    pub mode: Mode,
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Truth model file for parameter errors.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Metrics JSON; printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub mode: &'static str,
    pub n_groups: usize,
    pub n_obs: usize,
    pub mspe: f64,
    pub r2: f64,
    #[serde(rename = "err_B", skip_serializing_if = "Option::is_none")]
    pub err_b: Option<f64>,
    /// `null` when the truth has no random-effect factor.
    #[serde(rename = "err_Sigma1", skip_serializing_if = "Option::is_none")]
    pub err_sigma1: Option<Option<f64>>,
    #[serde(rename = "err_Sigma2", skip_serializing_if = "Option::is_none")]
    pub err_sigma2: Option<Option<f64>>,
    #[serde(rename = "err_Lambda", skip_serializing_if = "Option::is_none")]
    pub err_lambda: Option<f64>,
}

pub fn eval(a: &EvalArgs) -> CliResult<String> {
    let (d, m, pred) = predictions(&a.model, &a.data, a.mode, a.train.as_deref())?;
    let y: Vec<Vec<f64>> = d.groups.iter().map(|g| g.y.clone()).collect();
    let mut metrics = Metrics {
        mode: match a.mode {
            Mode::Marginal => "marginal",
            Mode::Conditional => "conditional",
        },
        n_groups: d.n_groups(),
        n_obs: d.n_obs(),
        mspe: mspe(&y, &pred)?,
        r2: r2(&y, &pred)?,
        err_b: None,
        err_sigma1: None,
        err_sigma2: None,
        err_lambda: None,
    };
    if let Some(path) = &a.truth {
        let t = io::read_model(path)?;
        if t.dims != m.dims {
            return Err(CliError::Usage(format!("truth dims {:?} differ from model {:?}", t.dims, m.dims)));
        }
        let (est, truth) = (m.params()?, t.params()?);
        metrics.err_b = Some(rel_err(&est.b_mat, &truth.b_mat)?);
        let has_factors = truth.ranks().0 > 0 && truth.ranks().1 > 0;
        let (e1, e2) = if has_factors { cov_err(&est, &truth).map(|(a, b)| (Some(a), Some(b)))? } else { (None, None) };
        metrics.err_sigma1 = Some(e1);
        metrics.err_sigma2 = Some(e2);
        let kind = match t.metadata.alpha {
            Some(alpha) => TruthKind::Equicorr { alpha },
            None => TruthKind::Mmtr,
        };
        let bundle = TruthBundle { params: truth, kind };
        metrics.err_lambda = Some(lambda_err(&d, &est, &bundle)?);
    }
    let text = io::to_json_string(&metrics)?;
    match &a.out {
        Some(path) => {
            io::write_atomic(path, text.as_bytes())?;
            Ok(format!("mspe={} r2={}\n", metrics.mspe, metrics.r2))
        }
        None => Ok(text),
    }
}

#[derive(Debug, Clone, Args)]
pub struct ReplicateArgs {
    /// JSON scenario, e.g. `{"case": "mmtr", "p1": 5, ...}`.
    #[arg(long)]
    pub scenario_file: PathBuf,
    #[arg(long)]
    pub reps: usize,
    /// Replication r uses seed `seed + r`.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub grid: GridOptions,
    #[arg(long, default_value_t = 200)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    /// Replication table CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Mean/SD summary CSV.
    #[arg(long)]
    pub summary: Option<PathBuf>,
    /// Per-bin mean err_Lambda CSV for equicorrelated scenarios.
    #[arg(long)]
    pub alpha_bins: Option<PathBuf>,
    /// Comma-separated α bin edges.
    #[arg(long, default_value = "0.2,0.4,0.6,0.8")]
    pub alpha_edges: String,
    /// Add the wall-clock runtime_ms column (not reproducible).
    #[arg(long)]
    pub timings: bool,
}

pub fn replicate(a: &ReplicateArgs) -> CliResult<String> {
    if a.reps == 0 {
        return Err(CliError::Usage("--reps must be at least 1".into()));
    }
    let text = std::fs::read_to_string(&a.scenario_file)
        .map_err(|e| CliError::Io(format!("{}: {e}", a.scenario_file.display())))?;
    let scenario: Scenario =
        serde_json::from_str(&text).map_err(|e| CliError::Io(format!("{}: {e}", a.scenario_file.display())))?;
    scenario.validate().map_err(usage)?;
    let edges: Vec<f64> = a
        .alpha_edges
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("bad --alpha-edges `{}`", a.alpha_edges)))?;
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(CliError::Usage("--alpha-edges needs at least two increasing values".into()));
    }
    let grid = a.grid.grid(a.seed)?;
    let cfg = FitConfig { max_iter: a.max_iter, tol: a.tol, ..FitConfig::default() };
    cfg.validate().map_err(usage)?;
    let table = sim::run_replications(&scenario, &grid, &cfg, a.reps, a.seed)?;
    io::write_atomic(&a.out, table.to_csv(a.timings)?.as_bytes())?;
    if let Some(path) = &a.summary {
        io::write_atomic(path, table.summary_csv()?.as_bytes())?;
    }
    if let Some(path) = &a.alpha_bins {
        io::write_atomic(path, table.alpha_bins_csv(&edges)?.as_bytes())?;
    }
    let failed = table.rows.iter().filter(|r| r.status != "ok").count();
    Ok(format!("reps={} failed={}\n{}", table.rows.len(), failed, table.summary_csv()?))
}
