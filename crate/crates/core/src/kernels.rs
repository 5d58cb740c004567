//! Scalar and matrix math kernels shared by the graph ops and the public
//! distance API.

use crate::tensor::Tensor;

/// LayerNorm epsilon.
pub const LN_EPS: f64 = 1e-8;

pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp() - 1.0
    }
}

/// ELU(x) + 1, mapping reals onto (0, inf). Keeps covariances positive;
/// clamped at the smallest normal f64 so even extreme inputs cannot
/// underflow to an exact zero (which would poison sqrt gradients).
pub fn elu_plus_one(x: f64) -> f64 {
    if x > 0.0 {
        x + 1.0
    } else {
        x.exp().max(f64::MIN_POSITIVE)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Squared 2-Wasserstein distance between diagonal Gaussians given as
/// mean/covariance slices: `||m1-m2||^2 + ||sqrt(c1)-sqrt(c2)||^2`.
pub fn w2_sq_slices(m1: &[f64], c1: &[f64], m2: &[f64], c2: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..m1.len() {
        let dm = m1[i] - m2[i];
        let ds = c1[i].sqrt() - c2[i].sqrt();
        acc += dm * dm + ds * ds;
    }
    acc
}

/// All-pairs squared W2 distances between query Gaussians (rows of `qm`/`qc`)
/// and key Gaussians (rows of `km`/`kc`).
///
/// Uses the norm-expansion identity `||a-b||^2 = ||a||^2 + ||b||^2 - 2 a.b`
/// on both the mean part and the sqrt-covariance part, so the whole matrix
/// costs two [n,d]x[d,m] products plus O(nd) instead of O(n m d) scalar
/// distance calls with per-pair subtraction. Entries are clamped at zero to
/// absorb cancellation round-off.
pub fn w2_distance_matrix_raw(qm: &Tensor, qc: &Tensor, km: &Tensor, kc: &Tensor) -> Tensor {
    let n = qm.rows();
    let m = km.rows();
    let gram_mean = qm.matmul_nt(km);
    let sq = qc.map(f64::sqrt);
    let sk = kc.map(f64::sqrt);
    let gram_sqrt = sq.matmul_nt(&sk);

    let qm_norm: Vec<f64> = (0..n).map(|i| qm.row(i).iter().map(|v| v * v).sum()).collect();
    let km_norm: Vec<f64> = (0..m).map(|i| km.row(i).iter().map(|v| v * v).sum()).collect();
    // ||sqrt(c)||^2 is just the sum of the covariance entries.
    let qc_norm: Vec<f64> = (0..n).map(|i| qc.row(i).iter().sum()).collect();
    let kc_norm: Vec<f64> = (0..m).map(|i| kc.row(i).iter().sum()).collect();

    let mut out = Tensor::zeros(&[n, m]);
    for t in 0..n {
        let row = out.row_mut(t);
        let g1 = gram_mean.row(t);
        let g2 = gram_sqrt.row(t);
        for k in 0..m {
            let d = qm_norm[t] + km_norm[k] - 2.0 * g1[k] + qc_norm[t] + kc_norm[k]
                - 2.0 * g2[k];
            row[k] = d.max(0.0);
        }
    }
    out
}
