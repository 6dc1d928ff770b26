//! Dataset and model file formats.
//!
//! A dataset is a CSV file with one row per observation
//! (`group_id, y, x_1..x_P, z_1..z_Q`, covariates column-stacked) plus a JSON
//! sidecar `<path>.meta.json` holding the matrix dimensions. A model is a JSON
//! object with row-major matrices. All writes go through a temporary file in
//! the destination directory followed by an atomic rename.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use mmtr::{Dims, FitReport, GroupData, Mat, MmtrError, ModelParams, Result, TraceDataset};
use serde::{Deserialize, Serialize};

pub const FORMAT_VERSION: u32 = 1;

fn io_err(path: &Path, e: impl std::fmt::Display) -> MmtrError {
    MmtrError::Io(format!("{}: {e}", path.display()))
}

/// Writes `bytes` to `path` via a sibling temporary file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io_err(path, e))?;
    tmp.write_all(bytes).map_err(|e| io_err(path, e))?;
    tmp.as_file().sync_all().map_err(|e| io_err(path, e))?;
    tmp.persist(path).map_err(|e| io_err(path, e.error))?;
    Ok(())
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub p1: usize,
    pub p2: usize,
    pub q1: usize,
    pub q2: usize,
}

impl DatasetMeta {
    pub fn dims(&self) -> Dims {
        Dims::new(self.p1, self.p2, self.q1, self.q2)
    }
}

fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| MmtrError::Io(e.to_string()))?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn dataset_csv(d: &TraceDataset) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["group_id".to_string(), "y".to_string()];
    header.extend((1..=d.dims.p()).map(|i| format!("x_{i}")));
    header.extend((1..=d.dims.q()).map(|i| format!("z_{i}")));
    w.write_record(&header)?;
    for g in &d.groups {
        for j in 0..g.len() {
            let mut rec = vec![g.id.clone(), g.y[j].to_string()];
            rec.extend(g.x_rows.row(j).iter().map(f64::to_string));
            rec.extend(g.z_rows_1.row(j).iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
    }
    w.into_inner().map_err(|e| MmtrError::Io(e.to_string()))
}

pub fn write_dataset(path: &Path, d: &TraceDataset) -> Result<()> {
    let meta = DatasetMeta { format_version: FORMAT_VERSION, p1: d.dims.p1, p2: d.dims.p2, q1: d.dims.q1, q2: d.dims.q2 };
    write_atomic(path, &dataset_csv(d)?)?;
    write_atomic(&sidecar_path(path), &json_bytes(&meta)?)
}

pub fn read_dataset(path: &Path) -> Result<TraceDataset> {
    let meta_path = sidecar_path(path);
    let meta_text = fs::read_to_string(&meta_path).map_err(|e| io_err(&meta_path, e))?;
    let meta: DatasetMeta = serde_json::from_str(&meta_text).map_err(|e| io_err(&meta_path, e))?;
    let dims = meta.dims();
    let (p, q) = (dims.p(), dims.q());

    let mut reader = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    let header = reader.headers().map_err(|e| io_err(path, e))?.clone();
    if header.len() != 2 + p + q {
        return Err(io_err(path, format!("expected {} columns for dims {dims:?}, found {}", 2 + p + q, header.len())));
    }

    // Groups keep the order of first appearance.
    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, (Vec<f64>, Vec<f64>, Vec<f64>)> = HashMap::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| io_err(path, e))?;
        if rec.len() != 2 + p + q {
            return Err(io_err(path, format!("row {} has {} fields", line + 1, rec.len())));
        }
        let mut values = Vec::with_capacity(1 + p + q);
        for field in rec.iter().skip(1) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| io_err(path, format!("row {}: `{field}` is not a number", line + 1)))?;
            values.push(v);
        }
        let id = rec[0].to_string();
        let entry = rows.entry(id.clone()).or_insert_with(|| {
            order.push(id);
            Default::default()
        });
        entry.0.push(values[0]);
        entry.1.extend_from_slice(&values[1..1 + p]);
        entry.2.extend_from_slice(&values[1 + p..]);
    }

    let mut groups = Vec::with_capacity(order.len());
    for id in order {
        let (y, x, z) = rows.remove(&id).expect("group recorded");
        let m = y.len();
        let x_rows = Mat::from_row_major(m, p, x)?;
        let z_rows = Mat::from_row_major(m, q, z)?;
        groups.push(GroupData::new(id, y, x_rows, z_rows, dims)?);
    }
    TraceDataset::new(dims, groups).map_err(|e| io_err(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ModelMetadata {
    #[serde(default)]
    pub iterations: Option<usize>,
    #[serde(default)]
    pub converged: Option<bool>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub lambda_b: Option<f64>,
    #[serde(default)]
    pub lambda_l: Option<f64>,
    #[serde(default)]
    pub objective: Option<f64>,
    #[serde(default)]
    pub loglik: Option<f64>,
    /// Generating scenario for simulated truth files.
    #[serde(default)]
    pub source: Option<String>,
    /// Within-group correlation of equicorrelated truth.
    #[serde(default)]
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    pub dims: Dims,
    /// Row-major `P1 x P2`.
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
    /// Row-major `Q1 x S1`.
    #[serde(rename = "L1")]
    pub l1: Vec<Vec<f64>>,
    /// Row-major `Q2 x S2`.
    #[serde(rename = "L2")]
    pub l2: Vec<Vec<f64>>,
    pub tau2: f64,
    pub selected_ranks: (usize, usize),
    pub ebic: Option<f64>,
    pub metadata: ModelMetadata,
}

fn rows_of(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn mat_of(rows: &[Vec<f64>], n_rows: usize, what: &str) -> Result<Mat> {
    if rows.len() != n_rows {
        return Err(MmtrError::DimensionMismatch(format!("{what} has {} rows, expected {n_rows}", rows.len())));
    }
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(MmtrError::DimensionMismatch(format!("{what} has rows of unequal length")));
    }
    Mat::from_row_major(n_rows, cols, rows.concat())
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

impl ModelFile {
    pub fn from_params(dims: Dims, p: &ModelParams, ebic: Option<f64>, metadata: ModelMetadata) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            dims,
            b: rows_of(&p.b_mat),
            l1: rows_of(&p.l1),
            l2: rows_of(&p.l2),
            tau2: p.tau2,
            selected_ranks: p.ranks(),
            ebic: ebic.and_then(finite),
            metadata,
        }
    }

    pub fn from_report(dims: Dims, rep: &FitReport, seed: u64) -> Self {
        let meta = ModelMetadata {
            iterations: Some(rep.iterations),
            converged: Some(rep.converged),
            seed: Some(seed),
            lambda_b: Some(rep.lambda_b),
            lambda_l: Some(rep.lambda_l),
            objective: rep.objective_trace.last().copied().and_then(finite),
            loglik: finite(rep.final_loglik()),
            ..Default::default()
        };
        Self::from_params(dims, &rep.params, Some(rep.ebic), meta)
    }

    pub fn params(&self) -> Result<ModelParams> {
        if self.format_version != FORMAT_VERSION {
            return Err(MmtrError::InvalidInput(format!("unsupported model format_version {}", self.format_version)));
        }
        let d = self.dims;
        let b = mat_of(&self.b, d.p1, "B")?;
        let l1 = mat_of(&self.l1, d.q1, "L1")?;
        let l2 = mat_of(&self.l2, d.q2, "L2")?;
        let p = ModelParams::new(b, l1, l2, self.tau2)?;
        p.check_dims(d)?;
        if p.ranks() != self.selected_ranks {
            return Err(MmtrError::DimensionMismatch(format!(
                "selected_ranks {:?} disagree with factor shapes {:?}",
                self.selected_ranks,
                p.ranks()
            )));
        }
        Ok(p)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        json_bytes(self)
    }
}

pub fn write_model(path: &Path, m: &ModelFile) -> Result<()> {
    write_atomic(path, &m.to_bytes()?)
}

pub fn read_model(path: &Path) -> Result<ModelFile> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let m: ModelFile = serde_json::from_str(&text).map_err(|e| io_err(path, e))?;
    m.params().map_err(|e| io_err(path, e))?;
    Ok(m)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, &json_bytes(value)?)
}

pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    Ok(String::from_utf8(json_bytes(value)?).expect("JSON is UTF-8"))
}
