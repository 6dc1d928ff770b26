//! Data model, marginal likelihood and E-step quantities.
//!
//! For group `i` and observation `j`,
//! `y_ij = tr(X_ijᵀ B) + tr(Z_ijᵀ L1 C_i L2ᵀ) + e_ij` with
//! `vec(C_i) ~ N(0, τ² I)` and `e_ij ~ N(0, τ²)`.
//!
//! Every random-effect computation goes through the per-group design
//! `W` (`m_i x S1S2`) whose row `j` is `vec(L1ᵀ Z_ij L2)ᵀ`, which equals
//! `Z_{i(1)} (L2 ⊗ L1)` without forming the Kronecker product. The second
//! orientation permutes the columns of `W` so that it multiplies `vec(C_iᵀ)`.

use serde::{Deserialize, Serialize};

use crate::error::{MmtrError, Result};
use crate::numerics::{
    compensated_sum, dot, norm1, psd_sqrt, vec, vec_transpose_permutation, Cholesky, Mat,
    DEFAULT_PSD_TOL,
};

/// Covariate dimensions: `X_ij` is `p1 x p2`, `Z_ij` is `q1 x q2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub p1: usize,
    pub p2: usize,
    pub q1: usize,
    pub q2: usize,
}

impl Dims {
    pub fn new(p1: usize, p2: usize, q1: usize, q2: usize) -> Self {
        Self { p1, p2, q1, q2 }
    }
    pub fn p(&self) -> usize {
        self.p1 * self.p2
    }
    pub fn q(&self) -> usize {
        self.q1 * self.q2
    }
}

/// One group's observations in vectorized form.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupData {
    pub id: String,
    pub y: Vec<f64>,
    /// Row `j` is `vec(X_ij)ᵀ`.
    pub x_rows: Mat,
    /// Row `j` is `vec(Z_ij)ᵀ`.
    pub z_rows_1: Mat,
    /// Row `j` is `vec(Z_ijᵀ)ᵀ`.
    pub z_rows_2: Mat,
}

impl GroupData {
    /// Builds a group from vectorized rows; `z_rows_2` is derived.
    pub fn new(id: impl Into<String>, y: Vec<f64>, x_rows: Mat, z_rows_1: Mat, dims: Dims) -> Result<Self> {
        let m = y.len();
        if m == 0 {
            return Err(MmtrError::InvalidInput("group has no observations".into()));
        }
        if x_rows.shape() != (m, dims.p()) || z_rows_1.shape() != (m, dims.q()) {
            return Err(MmtrError::DimensionMismatch(format!(
                "group with {m} observations needs X rows {m}x{} and Z rows {m}x{}, got {:?} and {:?}",
                dims.p(),
                dims.q(),
                x_rows.shape(),
                z_rows_1.shape()
            )));
        }
        let perm = vec_transpose_permutation(dims.q1, dims.q2);
        let z_rows_2 = Mat::from_fn(m, dims.q(), |r, k| z_rows_1[(r, perm[k])]);
        Ok(Self { id: id.into(), y, x_rows, z_rows_1, z_rows_2 })
    }

    /// Builds a group from per-observation matrices.
    pub fn from_matrices(id: impl Into<String>, y: Vec<f64>, xs: &[Mat], zs: &[Mat], dims: Dims) -> Result<Self> {
        if xs.len() != y.len() || zs.len() != y.len() {
            return Err(MmtrError::DimensionMismatch("one X and one Z matrix per observation required".into()));
        }
        let m = y.len();
        let mut x_rows = Mat::zeros(m, dims.p());
        let mut z_rows = Mat::zeros(m, dims.q());
        for j in 0..m {
            if xs[j].shape() != (dims.p1, dims.p2) || zs[j].shape() != (dims.q1, dims.q2) {
                return Err(MmtrError::DimensionMismatch(format!("observation {j} has wrong covariate shape")));
            }
            x_rows.row_mut(j).copy_from_slice(&vec(&xs[j]));
            z_rows.row_mut(j).copy_from_slice(&vec(&zs[j]));
        }
        Self::new(id, y, x_rows, z_rows, dims)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// `y_i − X_i b`.
    pub fn residual(&self, b_vec: &[f64]) -> Vec<f64> {
        let fitted = self.x_rows.mul_vec(b_vec);
        self.y.iter().zip(fitted).map(|(y, f)| y - f).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceDataset {
    pub dims: Dims,
    pub groups: Vec<GroupData>,
}

impl TraceDataset {
    pub fn new(dims: Dims, groups: Vec<GroupData>) -> Result<Self> {
        if groups.is_empty() {
            return Err(MmtrError::InvalidInput("dataset has no groups".into()));
        }
        for g in &groups {
            if g.is_empty() {
                return Err(MmtrError::InvalidInput(format!("group `{}` is empty", g.id)));
            }
            if g.x_rows.cols() != dims.p() || g.z_rows_1.cols() != dims.q() || g.z_rows_2.cols() != dims.q() {
                return Err(MmtrError::DimensionMismatch(format!("group `{}` does not match dims", g.id)));
            }
            if g.x_rows.rows() != g.len() || g.z_rows_1.rows() != g.len() || g.z_rows_2.rows() != g.len() {
                return Err(MmtrError::DimensionMismatch(format!("group `{}` has inconsistent row counts", g.id)));
            }
        }
        Ok(Self { dims, groups })
    }

    /// Total number of observations `N`.
    pub fn n_obs(&self) -> usize {
        self.groups.iter().map(GroupData::len).sum()
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn responses(&self) -> Vec<f64> {
        self.groups.iter().flat_map(|g| g.y.iter().copied()).collect()
    }

    pub fn group(&self, id: &str) -> Option<&GroupData> {
        self.groups.iter().find(|g| g.id == id)
    }

    /// Subset of groups by index, in the given order.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        Self::new(self.dims, idx.iter().map(|&i| self.groups[i].clone()).collect())
    }
}

/// `θ = (B, L1, L2, τ²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub b_mat: Mat,
    pub l1: Mat,
    pub l2: Mat,
    pub tau2: f64,
}

impl ModelParams {
    pub fn new(b_mat: Mat, l1: Mat, l2: Mat, tau2: f64) -> Result<Self> {
        let p = Self { b_mat, l1, l2, tau2 };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau2 > 0.0) || !self.tau2.is_finite() {
            return Err(MmtrError::InvalidInput(format!("tau2 must be positive and finite, got {}", self.tau2)));
        }
        if !(self.b_mat.is_finite() && self.l1.is_finite() && self.l2.is_finite()) {
            return Err(MmtrError::InvalidInput("parameters contain non-finite entries".into()));
        }
        Ok(())
    }

    pub fn check_dims(&self, dims: Dims) -> Result<()> {
        if self.b_mat.shape() != (dims.p1, dims.p2) || self.l1.rows() != dims.q1 || self.l2.rows() != dims.q2 {
            return Err(MmtrError::DimensionMismatch(format!(
                "parameters B {:?}, L1 {:?}, L2 {:?} do not match dims {dims:?}",
                self.b_mat.shape(),
                self.l1.shape(),
                self.l2.shape()
            )));
        }
        Ok(())
    }

    pub fn b_vec(&self) -> Vec<f64> {
        vec(&self.b_mat)
    }

    pub fn ranks(&self) -> (usize, usize) {
        (self.l1.cols(), self.l2.cols())
    }

    /// `Σ1 = L1 L1ᵀ`.
    pub fn sigma1(&self) -> Mat {
        self.l1.matmul_tr(&self.l1)
    }

    /// `Σ2 = L2 L2ᵀ`.
    pub fn sigma2(&self) -> Mat {
        self.l2.matmul_tr(&self.l2)
    }

    pub fn factor(&self, k: usize) -> &Mat {
        if k == 1 {
            &self.l1
        } else {
            &self.l2
        }
    }
}

fn check_orientation(k: usize) {
    assert!(k == 1 || k == 2, "orientation must be 1 or 2, got {k}");
}

/// Random-effects design of one group (`m_i x S1S2`).
///
/// Orientation 1 columns index `vec(C_i)`, orientation 2 columns index
/// `vec(C_iᵀ)`.
pub fn random_design(g: &GroupData, p: &ModelParams, orientation: usize) -> Mat {
    check_orientation(orientation);
    let (q1, q2) = (p.l1.rows(), p.l2.rows());
    let (s1, s2) = p.ranks();
    let m = g.len();
    let mut w = Mat::zeros(m, s1 * s2);
    if s1 == 0 || s2 == 0 {
        return w;
    }
    let mut t = vec![0.0; s1 * q2];
    for j in 0..m {
        let z = g.z_rows_1.row(j);
        // T = L1ᵀ Z (S1 x Q2), with Z[a, b] = z[a + q1 b].
        for s in 0..s1 {
            for b in 0..q2 {
                let zc = &z[b * q1..(b + 1) * q1];
                t[s * q2 + b] = (0..q1).map(|a| p.l1[(a, s)] * zc[a]).sum();
            }
        }
        let row = w.row_mut(j);
        for sa in 0..s1 {
            for sb in 0..s2 {
                let v: f64 = (0..q2).map(|b| t[sa * q2 + b] * p.l2[(b, sb)]).sum();
                let col = if orientation == 1 { sa + s1 * sb } else { sb + s2 * sa };
                row[col] = v;
            }
        }
    }
    w
}

/// `Λ_i = Z_{i(1)} (Σ2 ⊗ Σ1) Z_{i(1)}ᵀ + I`; the marginal covariance is `τ² Λ_i`.
pub fn marginal_cov(g: &GroupData, p: &ModelParams) -> Mat {
    let w = random_design(g, p, 1);
    w.matmul_tr(&w).add_identity(1.0)
}

/// `(Λ_i^{-1/2} y_i, Λ_i^{-1/2} X_i)` using the symmetric inverse square root.
pub fn whiten(g: &GroupData, p: &ModelParams) -> (Vec<f64>, Mat) {
    let lambda = marginal_cov(g, p);
    // Λ ⪰ I, so the eigen square root is full rank.
    let root = psd_sqrt(&lambda, DEFAULT_PSD_TOL).expect("marginal covariance is positive definite");
    let inv_root = root.inverse_symmetric();
    (inv_root.mul_vec(&g.y), inv_root.matmul(&g.x_rows))
}

fn group_neg_log_lik(g: &GroupData, p: &ModelParams, b_vec: &[f64]) -> f64 {
    let lambda = marginal_cov(g, p);
    let chol = Cholesky::new(&lambda).expect("marginal covariance is positive definite");
    let r = g.residual(b_vec);
    let z = chol.forward(&r);
    let m = g.len() as f64;
    0.5 * (m * (2.0 * std::f64::consts::PI * p.tau2).ln() + chol.log_det() + dot(&z, &z) / p.tau2)
}

/// `−log f(y | θ)` including the `N/2·log 2π` constant.
pub fn neg_log_lik(d: &TraceDataset, p: &ModelParams) -> f64 {
    let b = p.b_vec();
    compensated_sum(d.groups.iter().map(|g| group_neg_log_lik(g, p, &b)))
}

/// Posterior moments of the group's random effect given `ỹ_i = y_i − X_i b`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMoments {
    pub mu: Vec<f64>,
    pub sigma: Mat,
    pub gamma: Mat,
    /// 1: moments of `vec(C_i)`; 2: moments of `vec(C_iᵀ)`.
    pub orientation: usize,
}

/// `μ = (I + WᵀW)⁻¹Wᵀỹ`, `Σ = τ²(I + WᵀW)⁻¹`, `Γ = Σ + μμᵀ`.
pub fn posterior_moments(g: &GroupData, p: &ModelParams, b_vec: &[f64], orientation: usize) -> PosteriorMoments {
    let w = random_design(g, p, orientation);
    let s = w.cols();
    let resid = g.residual(b_vec);
    if s == 0 {
        return PosteriorMoments { mu: vec![], sigma: Mat::zeros(0, 0), gamma: Mat::zeros(0, 0), orientation };
    }
    let a = w.tr_matmul(&w).add_identity(1.0);
    let chol = Cholesky::new(&a).expect("I + WᵀW is positive definite");
    let mu = chol.solve(&w.tr_mul_vec(&resid));
    let sigma = chol.inverse().scale(p.tau2);
    let gamma = Mat::from_fn(s, s, |r, c| sigma[(r, c)] + mu[r] * mu[c]);
    PosteriorMoments { mu, sigma, gamma, orientation }
}

/// Quadratic system of one CM step: `−Q(ℓ) = ℓᵀHℓ − 2gᵀℓ + const`, where
/// `ℓ = vec(L_k)` and `k` is `orientation`.
///
/// The constant and the overall `1/(2τ²)` factor are dropped, so
/// `ℓᵀHℓ − 2gᵀℓ + Σ‖ỹ_i‖² = E[Σ_i ‖ỹ_i − Z_i (L2 ⊗ L1) c_i‖²]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleSystem {
    pub h: Mat,
    pub g: Vec<f64>,
    pub orientation: usize,
}

impl CycleSystem {
    /// `ℓᵀHℓ − 2gᵀℓ`.
    pub fn quadratic(&self, l: &[f64]) -> f64 {
        dot(l, &self.h.mul_vec(l)) - 2.0 * dot(&self.g, l)
    }
}

/// Assembles `(H, g)` for updating `L_k`, `k = orientation`.
///
/// With `M_ij = Z_ij` (k = 1) or `Z_ijᵀ` (k = 2), the other factor `L_o`
/// and `K_ij = M_ij L_o`, the blocks are
/// `H[a, b] = Σ_ij K_ij Γ_i[a, b] K_ijᵀ` and `g[a] = Σ_i (Σ_j ỹ_ij M_ij) L_o μ_i[a]`,
/// using moments of the orientation that is *not* `k`.
pub fn build_cycle_system(d: &TraceDataset, p: &ModelParams, b_vec: &[f64], orientation: usize) -> CycleSystem {
    check_orientation(orientation);
    let (target, other, moments_orientation) =
        if orientation == 1 { (&p.l1, &p.l2, 2) } else { (&p.l2, &p.l1, 1) };
    let (qt, st) = (target.rows(), target.cols());
    let (qo, so) = (other.rows(), other.cols());
    let dim = qt * st;
    let mut h = Mat::zeros(dim, dim);
    let mut g = vec![0.0; dim];
    if dim == 0 || so == 0 {
        return CycleSystem { h, g, orientation };
    }

    let mut kmat = Mat::zeros(qt, so);
    let mut kg = Mat::zeros(qt, so);
    for grp in &d.groups {
        let mom = posterior_moments(grp, p, b_vec, moments_orientation);
        let resid = grp.residual(b_vec);
        let rows = if orientation == 1 { &grp.z_rows_1 } else { &grp.z_rows_2 };
        let mut weighted_m = vec![0.0; qt * qo];
        for j in 0..grp.len() {
            // M_ij column-stacked: M[a, b] = m[a + qt b].
            let m = rows.row(j);
            for (acc, v) in weighted_m.iter_mut().zip(m) {
                *acc += resid[j] * v;
            }
            for a in 0..qt {
                for s in 0..so {
                    kmat[(a, s)] = (0..qo).map(|b| m[a + qt * b] * other[(b, s)]).sum();
                }
            }
            for bb in 0..st {
                for aa in 0..st {
                    if aa > bb {
                        continue;
                    }
                    // kg = K Γ[aa, bb]
                    for a in 0..qt {
                        for s in 0..so {
                            kg[(a, s)] = (0..so).map(|u| kmat[(a, u)] * mom.gamma[(aa * so + u, bb * so + s)]).sum();
                        }
                    }
                    for r in 0..qt {
                        for c in 0..qt {
                            let v = dot(kg.row(r), kmat.row(c));
                            h[(aa * qt + r, bb * qt + c)] += v;
                        }
                    }
                }
            }
        }
        // g[a] += (Σ_j ỹ_ij M_ij) L_o μ[a]
        for aa in 0..st {
            let mu_a = &mom.mu[aa * so..(aa + 1) * so];
            let lmu: Vec<f64> = (0..qo).map(|b| dot(other.row(b), mu_a)).collect();
            for r in 0..qt {
                g[aa * qt + r] += (0..qo).map(|b| weighted_m[r + qt * b] * lmu[b]).sum::<f64>();
            }
        }
    }
    // Fill the lower block triangle by symmetry.
    for bb in 0..st {
        for aa in (bb + 1)..st {
            for r in 0..qt {
                for c in 0..qt {
                    h[(aa * qt + r, bb * qt + c)] = h[(bb * qt + c, aa * qt + r)];
                }
            }
        }
    }
    CycleSystem { h: h.symmetrize(), g, orientation }
}

/// Sum of Euclidean column norms.
pub fn column_norm_sum(l: &Mat) -> f64 {
    l.column_norms().iter().sum()
}

/// Penalized objective
/// `f(θ) = −ℓ(θ) + N λ_B ‖vec B‖₁ / τ̂ + λ_L (Σ‖L1 cols‖ + Σ‖L2 cols‖) / (2 τ̂²)`
/// with the reference scale `τ̂ = sqrt(p.tau2)`.
pub fn objective(d: &TraceDataset, p: &ModelParams, lambda_b: f64, lambda_l: f64) -> f64 {
    objective_with_scale(d, p, lambda_b, lambda_l, p.tau2.sqrt())
}

/// [`objective`] with an explicit reference scale `τ̂`.
pub fn objective_with_scale(d: &TraceDataset, p: &ModelParams, lambda_b: f64, lambda_l: f64, tau_ref: f64) -> f64 {
    neg_log_lik(d, p) + penalty(d.n_obs(), p, lambda_b, lambda_l, tau_ref)
}

/// `(Σ_i log det Λ_i, Σ_i r_iᵀ Λ_i⁻¹ r_i)` with `r_i = y_i − X_i vec(B)`.
pub fn gls_parts(d: &TraceDataset, p: &ModelParams) -> (f64, f64) {
    let b = p.b_vec();
    let parts: Vec<(f64, f64)> = d
        .groups
        .iter()
        .map(|g| {
            let chol = Cholesky::new(&marginal_cov(g, p)).expect("marginal covariance is positive definite");
            let z = chol.forward(&g.residual(&b));
            (chol.log_det(), dot(&z, &z))
        })
        .collect();
    (compensated_sum(parts.iter().map(|x| x.0)), compensated_sum(parts.iter().map(|x| x.1)))
}

/// Objective of one AECM iteration with reference scale `τ̂`.
///
/// `N/2·log 2π + N log τ̂ − N/2 + ½Σ log det Λ_i + (N/τ̂)·s(B, τ) + λ_L(Σ‖L1 cols‖ + Σ‖L2 cols‖)/(2τ̂²)`
/// where `s(B, τ) = R/(2Nτ) + τ/2 + λ_B‖vec B‖₁` is the scaled-lasso loss on
/// the whitened data (`R` the GLS residual sum of squares, `τ = sqrt(p.tau2)`).
/// At `τ = τ̂` this equals [`objective`]; away from it `τ` enters as in the
/// scaled lasso, so the first cycle minimizes it exactly over `(B, τ)`.
pub fn anchored_objective(d: &TraceDataset, p: &ModelParams, lambda_b: f64, lambda_l: f64, tau_ref: f64) -> f64 {
    let n = d.n_obs() as f64;
    let tau = p.tau2.sqrt();
    let (log_det, rss) = gls_parts(d, p);
    let scaled = rss / (2.0 * n * tau) + 0.5 * tau + lambda_b * norm1(p.b_mat.as_slice());
    0.5 * n * (2.0 * std::f64::consts::PI).ln() + n * tau_ref.ln() - 0.5 * n
        + 0.5 * log_det
        + n / tau_ref * scaled
        + penalty(d.n_obs(), p, 0.0, lambda_l, tau_ref)
}

pub fn penalty(n_obs: usize, p: &ModelParams, lambda_b: f64, lambda_l: f64, tau_ref: f64) -> f64 {
    let pen_b = if lambda_b == 0.0 { 0.0 } else { n_obs as f64 * lambda_b * norm1(p.b_mat.as_slice()) / tau_ref };
    let pen_l = if lambda_l == 0.0 {
        0.0
    } else {
        lambda_l * (column_norm_sum(&p.l1) + column_norm_sum(&p.l2)) / (2.0 * tau_ref * tau_ref)
    };
    pen_b + pen_l
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictMode {
    /// `X_i vec(B)`.
    Marginal,
    /// Adds the posterior mean of the group's random effect (BLUP).
    Conditional,
}

/// Per-group predictions for every group of `d`.
///
/// Conditional mode takes each group's random-effect posterior mean from the
/// group with the same id in `train`.
pub fn predict(
    d: &TraceDataset,
    p: &ModelParams,
    mode: PredictMode,
    train: Option<&TraceDataset>,
) -> Result<Vec<Vec<f64>>> {
    let b = p.b_vec();
    d.groups
        .iter()
        .map(|g| {
            let mut yhat = g.x_rows.mul_vec(&b);
            if mode == PredictMode::Conditional {
                let tg = train
                    .and_then(|t| t.group(&g.id))
                    .ok_or_else(|| MmtrError::UnknownGroup(g.id.clone()))?;
                let mom = posterior_moments(tg, p, &b, 1);
                if !mom.mu.is_empty() {
                    let w = random_design(g, p, 1);
                    for (y, r) in yhat.iter_mut().zip(w.mul_vec(&mom.mu)) {
                        *y += r;
                    }
                }
            }
            Ok(yhat)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{kron, pinv_factor, unvec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rmat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_instance(seed: u64, dims: Dims, s: (usize, usize), n: usize, m: usize) -> (TraceDataset, ModelParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let groups = (0..n)
            .map(|i| {
                let y = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
                let x = rmat(&mut rng, m, dims.p());
                let z = rmat(&mut rng, m, dims.q());
                GroupData::new(format!("g{i}"), y, x, z, dims).unwrap()
            })
            .collect();
        let p = ModelParams::new(
            rmat(&mut rng, dims.p1, dims.p2),
            rmat(&mut rng, dims.q1, s.0),
            rmat(&mut rng, dims.q2, s.1),
            rng.random_range(0.3..1.5),
        )
        .unwrap();
        (TraceDataset::new(dims, groups).unwrap(), p)
    }

    fn dense_lambda(g: &GroupData, p: &ModelParams) -> Mat {
        let k = kron(&p.sigma2(), &p.sigma1());
        g.z_rows_1.matmul(&k).matmul_tr(&g.z_rows_1).add_identity(1.0)
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn z_rows_2_is_transposed_vec() {
        let (d, _) = random_instance(1, Dims::new(2, 2, 3, 4), (1, 1), 2, 3);
        let g = &d.groups[0];
        for j in 0..g.len() {
            let z = unvec(g.z_rows_1.row(j), 3, 4).unwrap();
            assert_eq!(vec(&z.transpose()), g.z_rows_2.row(j));
        }
    }

    #[test]
    fn marginal_cov_zero_factor_is_identity() {
        let (d, mut p) = random_instance(2, Dims::new(2, 2, 3, 2), (2, 2), 1, 4);
        p.l1 = Mat::zeros(3, 2);
        assert_eq!(marginal_cov(&d.groups[0], &p), Mat::identity(4));
        p.l1 = Mat::zeros(3, 0);
        assert_eq!(marginal_cov(&d.groups[0], &p), Mat::identity(4));
    }

    #[test]
    fn marginal_cov_matches_dense_kron() {
        let (d, p) = random_instance(3, Dims::new(2, 3, 4, 3), (2, 3), 3, 5);
        for g in &d.groups {
            let diff = marginal_cov(g, &p).sub(&dense_lambda(g, &p)).max_abs();
            assert!(diff < 1e-10, "{diff}");
        }
    }

    #[test]
    fn marginal_cov_single_observation_trace_identity() {
        // m = 1: Λ = 1 + Var(tr(Zᵀ L1 C L2ᵀ))/τ² with vec C ~ N(0, I).
        let (d, p) = random_instance(4, Dims::new(1, 1, 3, 2), (2, 2), 1, 1);
        let z = unvec(d.groups[0].z_rows_1.row(0), 3, 2).unwrap();
        let mut var = 0.0;
        for s1 in 0..2 {
            for s2 in 0..2 {
                let mut c = Mat::zeros(2, 2);
                c[(s1, s2)] = 1.0;
                let t = z.tr_matmul(&p.l1.matmul(&c).matmul_tr(&p.l2)).trace();
                var += t * t;
            }
        }
        assert!((marginal_cov(&d.groups[0], &p)[(0, 0)] - 1.0 - var).abs() < 1e-12);
    }

    #[test]
    fn marginal_cov_dominates_identity() {
        let (d, p) = random_instance(5, Dims::new(2, 2, 3, 3), (2, 2), 4, 6);
        for g in &d.groups {
            let (vals, _) = crate::numerics::sym_eigen(&marginal_cov(g, &p));
            assert!(vals[0] >= 1.0 - 1e-10);
        }
    }

    #[test]
    fn whitening_reproduces_gls_form() {
        let (d, p) = random_instance(6, Dims::new(2, 2, 3, 2), (2, 1), 3, 5);
        let b = p.b_vec();
        for g in &d.groups {
            let (yw, xw) = whiten(g, &p);
            let rw: Vec<f64> = yw.iter().zip(xw.mul_vec(&b)).map(|(y, f)| y - f).collect();
            let r = g.residual(&b);
            let lam_inv = Cholesky::new(&dense_lambda(g, &p)).unwrap().inverse();
            let gls = dot(&r, &lam_inv.mul_vec(&r));
            assert!(rel(dot(&rw, &rw), gls) < 1e-10);
            let yy = dot(&g.y, &lam_inv.mul_vec(&g.y));
            assert!(rel(dot(&yw, &yw), yy) < 1e-10);
        }
    }

    #[test]
    fn whitening_identity_when_no_random_effect() {
        let (d, mut p) = random_instance(7, Dims::new(2, 2, 2, 2), (1, 1), 1, 3);
        p.l2 = Mat::zeros(2, 1);
        let (yw, xw) = whiten(&d.groups[0], &p);
        for (a, b) in yw.iter().zip(&d.groups[0].y) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(xw.sub(&d.groups[0].x_rows).max_abs() < 1e-12);
    }

    #[test]
    fn neg_log_lik_iid_case() {
        let (d, mut p) = random_instance(8, Dims::new(2, 2, 2, 2), (1, 1), 3, 4);
        p.l1 = Mat::zeros(2, 1);
        p.b_mat = Mat::zeros(2, 2);
        p.tau2 = 1.0;
        let y = d.responses();
        let expected = 0.5 * y.len() as f64 * (2.0 * std::f64::consts::PI).ln() + 0.5 * dot(&y, &y);
        assert!(rel(neg_log_lik(&d, &p), expected) < 1e-12);
    }

    #[test]
    fn neg_log_lik_matches_dense_oracle() {
        for seed in 0..10 {
            let (d, p) = random_instance(100 + seed, Dims::new(2, 3, 3, 4), (2, 2), 3, 4);
            // Stack all groups into one block-diagonal Gaussian.
            let n = d.n_obs();
            let mut cov = Mat::zeros(n, n);
            let mut mean = Vec::new();
            let mut off = 0;
            for g in &d.groups {
                let lam = dense_lambda(g, &p).scale(p.tau2);
                for r in 0..g.len() {
                    for c in 0..g.len() {
                        cov[(off + r, off + c)] = lam[(r, c)];
                    }
                }
                mean.extend(g.x_rows.mul_vec(&p.b_vec()));
                off += g.len();
            }
            let y = d.responses();
            let r: Vec<f64> = y.iter().zip(&mean).map(|(a, b)| a - b).collect();
            let chol = Cholesky::new(&cov).unwrap();
            let z = chol.forward(&r);
            let oracle = 0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + chol.log_det() + dot(&z, &z));
            assert!(rel(neg_log_lik(&d, &p), oracle) < 1e-10);
        }
    }

    #[test]
    fn neg_log_lik_scale_and_rotation_invariant() {
        let (d, p) = random_instance(9, Dims::new(2, 2, 4, 3), (2, 2), 3, 4);
        let base = neg_log_lik(&d, &p);
        let mut q = p.clone();
        q.l1 = p.l1.scale(2.5);
        q.l2 = p.l2.scale(1.0 / 2.5);
        assert!(rel(neg_log_lik(&d, &q), base) < 1e-10);
        let (th, ph) = (0.7_f64, -1.3_f64);
        let o1 = Mat::from_rows(&[vec![th.cos(), -th.sin()], vec![th.sin(), th.cos()]]);
        let o2 = Mat::from_rows(&[vec![ph.cos(), ph.sin()], vec![ph.sin(), -ph.cos()]]);
        q.l1 = p.l1.matmul(&o1);
        q.l2 = p.l2.matmul(&o2);
        assert!(rel(neg_log_lik(&d, &q), base) < 1e-10);
    }

    #[test]
    fn posterior_prior_when_z_is_zero() {
        let dims = Dims::new(1, 2, 2, 2);
        let g = GroupData::new("a", vec![1.0, -1.0], Mat::zeros(2, 2), Mat::zeros(2, 4), dims).unwrap();
        let p = ModelParams::new(Mat::zeros(1, 2), Mat::identity(2), Mat::identity(2), 0.7).unwrap();
        let mom = posterior_moments(&g, &p, &[0.0, 0.0], 1);
        assert!(mom.mu.iter().all(|v| *v == 0.0));
        assert!(mom.sigma.sub(&Mat::identity(4).scale(0.7)).max_abs() < 1e-15);
        assert!(mom.gamma.sub(&mom.sigma).max_abs() < 1e-15);
    }

    #[test]
    fn posterior_matches_joint_gaussian_conditioning() {
        let (d, p) = random_instance(10, Dims::new(2, 2, 3, 4), (2, 3), 2, 5);
        let b = p.b_vec();
        let k = kron(&p.l2, &p.l1);
        for g in &d.groups {
            let mom = posterior_moments(g, &p, &b, 1);
            // Cov(ỹ, c) = τ² W with W = Z (L2 ⊗ L1); Cov(ỹ) = τ² Λ; Cov(c) = τ² I.
            let w = g.z_rows_1.matmul(&k);
            let lam_inv = Cholesky::new(&dense_lambda(g, &p)).unwrap().inverse();
            let mu = w.transpose().matmul(&lam_inv).mul_vec(&g.residual(&b));
            let sigma = Mat::identity(w.cols()).sub(&w.transpose().matmul(&lam_inv).matmul(&w)).scale(p.tau2);
            for (a, e) in mom.mu.iter().zip(&mu) {
                assert!((a - e).abs() < 1e-10);
            }
            assert!(mom.sigma.sub(&sigma).max_abs() < 1e-10);
            let outer = Mat::from_fn(mu.len(), mu.len(), |r, c| mom.mu[r] * mom.mu[c]);
            assert!(mom.gamma.sub(&mom.sigma.add(&outer)).max_abs() < 1e-12);
        }
    }

    #[test]
    fn posterior_orientations_are_permutations() {
        let (d, p) = random_instance(11, Dims::new(2, 2, 3, 4), (2, 3), 2, 5);
        let b = p.b_vec();
        let perm = vec_transpose_permutation(2, 3);
        for g in &d.groups {
            let m1 = posterior_moments(g, &p, &b, 1);
            let m2 = posterior_moments(g, &p, &b, 2);
            for k in 0..6 {
                assert!((m2.mu[k] - m1.mu[perm[k]]).abs() < 1e-12);
                for l in 0..6 {
                    assert!((m2.gamma[(k, l)] - m1.gamma[(perm[k], perm[l])]).abs() < 1e-12);
                }
            }
        }
    }

    /// `E[Σ_i ‖ỹ_i − Z_i (L2 ⊗ L1) c_i‖²]` under the current posterior, with
    /// the candidate factor substituted, by explicit Kronecker assembly.
    fn dense_expected_sse(d: &TraceDataset, p: &ModelParams, cand: &Mat, k: usize) -> f64 {
        let b = p.b_vec();
        let (l1, l2) = if k == 1 { (cand, &p.l2) } else { (&p.l1, cand) };
        let kr = kron(l2, l1);
        d.groups
            .iter()
            .map(|g| {
                let mom = posterior_moments(g, p, &b, 1);
                let w = g.z_rows_1.matmul(&kr);
                let r = g.residual(&b);
                dot(&r, &r) - 2.0 * dot(&r, &w.mul_vec(&mom.mu)) + w.tr_matmul(&w).matmul(&mom.gamma).trace()
            })
            .sum()
    }

    #[test]
    fn cycle_system_matches_dense_expectation() {
        let (d, p) = random_instance(12, Dims::new(2, 2, 3, 2), (1, 1), 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let b = p.b_vec();
        let yy: f64 = d.groups.iter().map(|g| dot(&g.residual(&b), &g.residual(&b))).sum();
        for k in [1, 2] {
            let sys = build_cycle_system(&d, &p, &b, k);
            let q = p.factor(k).rows();
            for _ in 0..5 {
                let cand = rmat(&mut rng, q, p.factor(k).cols());
                let lhs = sys.quadratic(&vec(&cand)) + yy;
                let rhs = dense_expected_sse(&d, &p, &cand, k);
                assert!(rel(lhs, rhs) < 1e-10, "k={k}: {lhs} vs {rhs}");
            }
        }
    }

    #[test]
    fn cycle_system_larger_ranks() {
        let (d, p) = random_instance(13, Dims::new(2, 2, 4, 3), (3, 2), 3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let b = p.b_vec();
        let yy: f64 = d.groups.iter().map(|g| dot(&g.residual(&b), &g.residual(&b))).sum();
        for k in [1, 2] {
            let sys = build_cycle_system(&d, &p, &b, k);
            assert!(sys.h.max_asymmetry() < 1e-12);
            let cand = rmat(&mut rng, p.factor(k).rows(), p.factor(k).cols());
            let lhs = sys.quadratic(&vec(&cand)) + yy;
            assert!(rel(lhs, dense_expected_sse(&d, &p, &cand, k)) < 1e-10);
        }
    }

    #[test]
    fn cycle_system_g_in_column_space() {
        // More parameters than observations so H is rank deficient.
        let (d, p) = random_instance(14, Dims::new(2, 2, 5, 4), (3, 3), 1, 1);
        let b = p.b_vec();
        for k in [1, 2] {
            let sys = build_cycle_system(&d, &p, &b, k);
            let root = psd_sqrt(&sys.h, 1e-12).unwrap();
            assert!(root.rank < sys.h.rows());
            let f = &root.factor;
            let fp = pinv_factor(&root);
            let proj = f.mul_vec(&fp.mul_vec(&sys.g));
            let resid: f64 = proj.iter().zip(&sys.g).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            assert!(resid < 1e-8 * crate::numerics::norm2(&sys.g));
        }
    }

    #[test]
    fn cycle_system_zero_mean_moments_give_zero_g() {
        let (mut d, p) = random_instance(15, Dims::new(2, 2, 3, 2), (2, 2), 2, 3);
        for g in &mut d.groups {
            g.y = g.x_rows.mul_vec(&p.b_vec());
        }
        let sys = build_cycle_system(&d, &p, &p.b_vec(), 1);
        assert!(sys.g.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn objective_penalty_parts() {
        let (d, p) = random_instance(16, Dims::new(2, 2, 3, 2), (2, 2), 2, 3);
        assert_eq!(objective(&d, &p, 0.0, 0.0), neg_log_lik(&d, &p));
        let tau = p.tau2.sqrt();
        let n = d.n_obs() as f64;
        let l1n: f64 = (0..2).map(|c| (0..3).map(|r| p.l1[(r, c)].powi(2)).sum::<f64>().sqrt()).sum();
        let l2n: f64 = (0..2).map(|c| (0..2).map(|r| p.l2[(r, c)].powi(2)).sum::<f64>().sqrt()).sum();
        let b1: f64 = p.b_mat.as_slice().iter().map(|v| v.abs()).sum();
        let expected = neg_log_lik(&d, &p) + n * 0.3 * b1 / tau + 0.2 * (l1n + l2n) / (2.0 * p.tau2);
        assert!(rel(objective(&d, &p, 0.3, 0.2), expected) < 1e-12);
        let mut z = p.clone();
        z.l1 = Mat::zeros(3, 2);
        z.l2 = Mat::zeros(2, 2);
        assert_eq!(objective(&d, &z, 0.0, 5.0), neg_log_lik(&d, &z));
    }

    #[test]
    fn anchored_objective_agrees_on_the_anchor() {
        let (d, p) = random_instance(19, Dims::new(2, 2, 3, 2), (2, 2), 3, 4);
        let tau = p.tau2.sqrt();
        let a = anchored_objective(&d, &p, 0.05, 0.3, tau);
        assert!(rel(a, objective(&d, &p, 0.05, 0.3)) < 1e-12);
        // Off the anchor it is the scaled-lasso loss in τ.
        let n = d.n_obs() as f64;
        let (_, rss) = gls_parts(&d, &p);
        let mut q = p.clone();
        q.tau2 = 4.0 * p.tau2;
        let b1 = norm1(p.b_mat.as_slice());
        let lhs = anchored_objective(&d, &q, 0.05, 0.3, tau) - a;
        let s = |t: f64| rss / (2.0 * n * t) + 0.5 * t + 0.05 * b1;
        assert!((lhs - n / tau * (s(2.0 * tau) - s(tau))).abs() < 1e-9 * a.abs());
    }

    #[test]
    fn predict_marginal_and_conditional() {
        let (d, mut p) = random_instance(17, Dims::new(2, 2, 3, 2), (2, 2), 2, 3);
        let q = p.clone();
        p.b_mat = Mat::zeros(2, 2);
        let out = predict(&d, &p, PredictMode::Marginal, None).unwrap();
        assert!(out.iter().flatten().all(|v| *v == 0.0));
        let mut r = q.clone();
        r.l1 = r.l1.scale(3.0);
        assert_eq!(
            predict(&d, &q, PredictMode::Marginal, None).unwrap(),
            predict(&d, &r, PredictMode::Marginal, None).unwrap()
        );
        assert!(matches!(predict(&d, &q, PredictMode::Conditional, None), Err(MmtrError::UnknownGroup(_))));
    }

    #[test]
    fn conditional_prediction_interpolates_noiseless_data() {
        let dims = Dims::new(2, 2, 3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        // Noise variance τ² → 0 with the random-effect covariance τ²(Σ2 ⊗ Σ1) held fixed.
        let tau2 = 1e-6_f64;
        let s = tau2.powf(-0.25);
        let truth =
            ModelParams::new(rmat(&mut rng, 2, 2), rmat(&mut rng, 3, 3).scale(s), rmat(&mut rng, 3, 3).scale(s), tau2)
                .unwrap();
        let groups: Vec<GroupData> = (0..3)
            .map(|i| {
                let m = 4;
                let x = rmat(&mut rng, m, 4);
                let z = rmat(&mut rng, m, 9);
                let c: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
                let kr = kron(&truth.l2, &truth.l1);
                let re = z.matmul(&kr).mul_vec(&c);
                let y = x.mul_vec(&truth.b_vec()).iter().zip(re).map(|(a, b)| a + b).collect();
                GroupData::new(format!("g{i}"), y, x, z, dims).unwrap()
            })
            .collect();
        let d = TraceDataset::new(dims, groups).unwrap();
        let pred = predict(&d, &truth, PredictMode::Conditional, Some(&d)).unwrap();
        for (g, yh) in d.groups.iter().zip(pred) {
            for (a, b) in g.y.iter().zip(yh) {
                assert!((a - b).abs() < 1e-5 * a.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn dataset_validation() {
        let dims = Dims::new(1, 2, 2, 1);
        assert!(TraceDataset::new(dims, vec![]).is_err());
        assert!(GroupData::new("a", vec![], Mat::zeros(0, 2), Mat::zeros(0, 2), dims).is_err());
        assert!(GroupData::new("a", vec![1.0], Mat::zeros(1, 3), Mat::zeros(1, 2), dims).is_err());
        assert!(ModelParams::new(Mat::zeros(1, 2), Mat::zeros(2, 1), Mat::zeros(1, 1), 0.0).is_err());
    }
}
