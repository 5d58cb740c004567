//! Wasserstein self-attention: the distance kernel, masked normalization,
//! Gaussian aggregation, feed-forward transforms and the stacked encoders.
//!
//! Distances are squared 2-Wasserstein between diagonal Gaussians. For
//! diagonal covariances the Bures/trace term collapses to the squared
//! Euclidean distance between elementwise square roots, so
//! `W2^2 = ||mu1 - mu2||^2 + ||sqrt(c1) - sqrt(c2)||^2` and the whole
//! attention matrix reduces to batched matrix products, O(n^2 d) per
//! sequence.

use crate::config::NormMode;
use crate::error::{CoreError, Result};
use crate::graph::{AttnNorm, Graph, VarId};
use crate::kernels::{w2_distance_matrix_raw, w2_sq_slices};
use crate::model::{BaselineArch, StosaArch};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Squared 2-Wasserstein distance between two diagonal Gaussians.
///
/// Symmetric, zero iff both mean and covariance coincide; its square root is
/// a true metric (nonnegative, symmetric, triangle inequality).
pub fn w2_squared_diag(mu1: &[f64], cov1: &[f64], mu2: &[f64], cov2: &[f64]) -> Result<f64> {
    if mu1.len() != mu2.len() || cov1.len() != cov2.len() || mu1.len() != cov1.len() {
        return Err(CoreError::Shape(format!(
            "w2 operands disagree: {} {} {} {}",
            mu1.len(),
            cov1.len(),
            mu2.len(),
            cov2.len()
        )));
    }
    if cov1.iter().chain(cov2.iter()).any(|&c| c <= 0.0) {
        return Err(CoreError::Numeric(
            "covariance entries must be strictly positive".into(),
        ));
    }
    Ok(w2_sq_slices(mu1, cov1, mu2, cov2))
}

/// All-pairs squared W2 distances between query rows and key rows.
///
/// Agrees with pairwise [`w2_squared_diag`] calls to within accumulation
/// round-off (1e-6 absolute at f64 on realistic magnitudes).
pub fn w2_distance_matrix(
    q_mean: &Tensor,
    q_cov: &Tensor,
    k_mean: &Tensor,
    k_cov: &Tensor,
) -> Result<Tensor> {
    if q_mean.shape != q_cov.shape || k_mean.shape != k_cov.shape {
        return Err(CoreError::Shape("mean/cov shape mismatch".into()));
    }
    if q_mean.cols() != k_mean.cols() {
        return Err(CoreError::Shape(format!(
            "query width {} vs key width {}",
            q_mean.cols(),
            k_mean.cols()
        )));
    }
    if q_cov.data.iter().chain(k_cov.data.iter()).any(|&c| c <= 0.0) {
        return Err(CoreError::Numeric(
            "covariance entries must be strictly positive".into(),
        ));
    }
    Ok(w2_distance_matrix_raw(q_mean, q_cov, k_mean, k_cov))
}

/// Hinge regularizer value: `max(d_pos - d_pos_neg, 0)`.
pub fn pvn_regularizer(d_pos: f64, d_pos_neg: f64) -> Result<f64> {
    if d_pos < 0.0 || d_pos_neg < 0.0 {
        return Err(CoreError::Numeric(
            "distances must be nonnegative".into(),
        ));
    }
    Ok((d_pos - d_pos_neg).max(0.0))
}

pub fn attn_norm_for(mode: NormMode) -> AttnNorm {
    match mode {
        NormMode::Softmax => AttnNorm::SoftmaxNeg,
        NormMode::Ratio => AttnNorm::RatioNeg,
    }
}

/// Forward-pass options: dropout is active only when an RNG is supplied and
/// the rate is positive; evaluation passes `None`.
pub struct ForwardMode<'r> {
    pub dropout_rate: f64,
    pub attention_dropout: bool,
    pub rng: Option<&'r mut ChaCha8Rng>,
}

impl ForwardMode<'_> {
    pub fn eval() -> ForwardMode<'static> {
        ForwardMode {
            dropout_rate: 0.0,
            attention_dropout: false,
            rng: None,
        }
    }
}

fn dropout_mask<R: Rng>(rng: &mut R, rate: f64, len: usize) -> Vec<f64> {
    let keep = 1.0 - rate;
    (0..len)
        .map(|_| {
            if rng.gen::<f64>() < rate {
                0.0
            } else {
                1.0 / keep
            }
        })
        .collect()
}

fn maybe_dropout(g: &mut Graph, x: VarId, mode: &mut ForwardMode) -> VarId {
    if mode.dropout_rate <= 0.0 {
        return x;
    }
    match mode.rng.as_deref_mut() {
        Some(rng) => {
            let len = g.value(x).len();
            let mask = dropout_mask(rng, mode.dropout_rate, len);
            g.dropout(x, mask)
        }
        None => x,
    }
}

/// Per-layer encoder outputs kept for inspection: normalized attention
/// weights per head plus the layer's output nodes.
pub struct LayerNodes {
    pub attention: Vec<VarId>,
    pub out_mean: VarId,
    pub out_cov: VarId,
}

pub struct StosaEncoded {
    pub mean: VarId,
    pub cov: VarId,
    pub layers: Vec<LayerNodes>,
}

/// Stacks L Wasserstein self-attention layers over the looked-up Gaussian
/// sequence; position t's output depends only on positions <= t.
#[allow(clippy::too_many_arguments)]
pub fn stosa_encoder(
    g: &mut Graph,
    arch: &StosaArch,
    heads: usize,
    norm: AttnNorm,
    mut input_mean: VarId,
    mut input_cov: VarId,
    valid: &[bool],
    mode: &mut ForwardMode,
) -> Result<StosaEncoded> {
    let dim = g.value(input_mean).cols();
    assert_eq!(dim % heads, 0, "heads must divide the path dimension");
    let head_dim = dim / heads;
    let mut layers = Vec::with_capacity(arch.layers.len());

    for layer in &arch.layers {
        let wq_m = g.param(layer.wq_mean);
        let wk_m = g.param(layer.wk_mean);
        let wv_m = g.param(layer.wv_mean);
        let qm = g.matmul(input_mean, wq_m);
        let km = g.matmul(input_mean, wk_m);
        let vm = g.matmul(input_mean, wv_m);

        // covariance projections re-apply ELU+1 to stay positive
        let wq_c = g.param(layer.wq_cov);
        let wk_c = g.param(layer.wk_cov);
        let wv_c = g.param(layer.wv_cov);
        let qc_raw = g.matmul(input_cov, wq_c);
        let qc = g.elu_plus_one(qc_raw);
        let kc_raw = g.matmul(input_cov, wk_c);
        let kc = g.elu_plus_one(kc_raw);
        let vc_raw = g.matmul(input_cov, wv_c);
        let vc = g.elu_plus_one(vc_raw);

        let mut head_means = Vec::with_capacity(heads);
        let mut head_covs = Vec::with_capacity(heads);
        let mut head_attn = Vec::with_capacity(heads);
        for h in 0..heads {
            let start = h * head_dim;
            let qm_h = g.slice_cols(qm, start, head_dim);
            let km_h = g.slice_cols(km, start, head_dim);
            let vm_h = g.slice_cols(vm, start, head_dim);
            let qc_h = g.slice_cols(qc, start, head_dim);
            let kc_h = g.slice_cols(kc, start, head_dim);
            let vc_h = g.slice_cols(vc, start, head_dim);

            let dist = g.w2_dist_matrix(qm_h, qc_h, km_h, kc_h);
            let weights = g.causal_normalize(dist, valid, norm)?;
            head_attn.push(weights);
            let weights = if mode.attention_dropout {
                maybe_dropout(g, weights, mode)
            } else {
                weights
            };
            head_means.push(g.aggregate(weights, vm_h, false));
            // covariances combine with squared weights
            head_covs.push(g.aggregate(weights, vc_h, true));
        }
        let z_mean = g.concat_cols(&head_means);
        let z_cov = g.concat_cols(&head_covs);

        // mean path: residual around Dropout(FFN(LayerNorm(z)))
        let ln_g = g.param(layer.ln_mean.gain);
        let ln_b = g.param(layer.ln_mean.bias);
        let normed = g.layer_norm(z_mean, ln_g, ln_b);
        let f = ffn_elu(g, normed, layer.ffn_mean.w1, layer.ffn_mean.b1, layer.ffn_mean.w2, layer.ffn_mean.b2);
        let f = maybe_dropout(g, f, mode);
        let out_mean = g.add(z_mean, f);

        // covariance path: same shape, then ELU+1 keeps the output positive
        let ln_g = g.param(layer.ln_cov.gain);
        let ln_b = g.param(layer.ln_cov.bias);
        let normed = g.layer_norm(z_cov, ln_g, ln_b);
        let f = ffn_elu(g, normed, layer.ffn_cov.w1, layer.ffn_cov.b1, layer.ffn_cov.w2, layer.ffn_cov.b2);
        let f = maybe_dropout(g, f, mode);
        let res = g.add(z_cov, f);
        let out_cov = g.elu_plus_one(res);

        layers.push(LayerNodes {
            attention: head_attn,
            out_mean,
            out_cov,
        });
        input_mean = out_mean;
        input_cov = out_cov;
    }

    Ok(StosaEncoded {
        mean: input_mean,
        cov: input_cov,
        layers,
    })
}

fn ffn_elu(
    g: &mut Graph,
    x: VarId,
    w1: crate::params::ParamId,
    b1: crate::params::ParamId,
    w2: crate::params::ParamId,
    b2: crate::params::ParamId,
) -> VarId {
    let w1 = g.param(w1);
    let b1 = g.param(b1);
    let w2 = g.param(w2);
    let b2 = g.param(b2);
    let h = g.matmul(x, w1);
    let h = g.add_row(h, b1);
    let h = g.elu(h);
    let out = g.matmul(h, w2);
    g.add_row(out, b2)
}

fn ffn_relu(
    g: &mut Graph,
    x: VarId,
    w1: crate::params::ParamId,
    b1: crate::params::ParamId,
    w2: crate::params::ParamId,
    b2: crate::params::ParamId,
) -> VarId {
    let w1 = g.param(w1);
    let b1 = g.param(b1);
    let w2 = g.param(w2);
    let b2 = g.param(b2);
    let h = g.matmul(x, w1);
    let h = g.add_row(h, b1);
    let h = g.relu(h);
    let out = g.matmul(h, w2);
    g.add_row(out, b2)
}

pub struct BaselineEncoded {
    pub states: VarId,
    pub layers: Vec<BaselineLayerNodes>,
}

pub struct BaselineLayerNodes {
    pub attention: Vec<VarId>,
    pub out: VarId,
}

/// Standard causal scaled dot-product encoder over point embeddings; the
/// reference the stochastic variant is compared against.
pub fn baseline_encoder(
    g: &mut Graph,
    arch: &BaselineArch,
    heads: usize,
    mut input: VarId,
    valid: &[bool],
    mode: &mut ForwardMode,
) -> Result<BaselineEncoded> {
    let dim = g.value(input).cols();
    assert_eq!(dim % heads, 0, "heads must divide the dimension");
    let head_dim = dim / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut layers = Vec::with_capacity(arch.layers.len());

    for layer in &arch.layers {
        let wq = g.param(layer.wq);
        let wk = g.param(layer.wk);
        let wv = g.param(layer.wv);
        let q = g.matmul(input, wq);
        let k = g.matmul(input, wk);
        let v = g.matmul(input, wv);

        let mut head_outs = Vec::with_capacity(heads);
        let mut head_attn = Vec::with_capacity(heads);
        for h in 0..heads {
            let start = h * head_dim;
            let q_h = g.slice_cols(q, start, head_dim);
            let k_h = g.slice_cols(k, start, head_dim);
            let v_h = g.slice_cols(v, start, head_dim);
            let scores = g.dot_scores(q_h, k_h, scale);
            let weights = g.causal_normalize(scores, valid, AttnNorm::Softmax)?;
            head_attn.push(weights);
            let weights = if mode.attention_dropout {
                maybe_dropout(g, weights, mode)
            } else {
                weights
            };
            head_outs.push(g.aggregate(weights, v_h, false));
        }
        let z = g.concat_cols(&head_outs);

        let ln_g = g.param(layer.ln.gain);
        let ln_b = g.param(layer.ln.bias);
        let normed = g.layer_norm(z, ln_g, ln_b);
        let f = ffn_relu(g, normed, layer.ffn.w1, layer.ffn.b1, layer.ffn.w2, layer.ffn.b2);
        let f = maybe_dropout(g, f, mode);
        let out = g.add(z, f);

        layers.push(BaselineLayerNodes {
            attention: head_attn,
            out,
        });
        input = out;
    }

    Ok(BaselineEncoded {
        states: input,
        layers,
    })
}
