//! Minimal reverse-mode differentiation tape.
//!
//! A [`Graph`] is built per sequence: each builder method evaluates its op
//! eagerly and records enough to run the backward pass. Parameters live
//! outside the graph in a [`ParamSet`]; `param` / `gather` ops reference them
//! by id and `backward` accumulates their gradients into a shared
//! [`GradStore`], so batches reduce gradients in a fixed order.
//!
//! The op set is exactly what the two encoder variants and the ranking loss
//! need; nothing here is generic beyond that.

use crate::error::{CoreError, Result};
use crate::kernels::{elu, elu_plus_one, sigmoid, softplus, w2_distance_matrix_raw, LN_EPS};
use crate::params::{GradStore, ParamId, ParamSet};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

/// How raw attention scores become row-stochastic weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnNorm {
    /// Softmax over negated scores; used with distance matrices so that a
    /// nearer key gets a larger weight.
    SoftmaxNeg,
    /// Plain softmax over the scores (dot-product attention).
    Softmax,
    /// Literal ratio of negated scores: `w_k = a_k / sum_j a_j` with
    /// `a = -scores`. Fails when a row's denominator is exactly zero.
    RatioNeg,
}

enum Op {
    Input,
    Param(ParamId),
    Gather { param: ParamId, ids: Vec<usize> },
    SelectRows { x: VarId, rows: Vec<usize> },
    Add(VarId, VarId),
    AddRow { x: VarId, row: VarId },
    Sub(VarId, VarId),
    Scale(VarId, f64),
    MatMul(VarId, VarId),
    Elu(VarId),
    EluPlusOne(VarId),
    Relu(VarId),
    LayerNorm { x: VarId, gain: VarId, bias: VarId },
    Dropout { x: VarId, mask: Vec<f64> },
    W2DistMatrix { qm: VarId, qc: VarId, km: VarId, kc: VarId },
    W2Rowwise { am: VarId, ac: VarId, bm: VarId, bc: VarId },
    DotScores { q: VarId, k: VarId, scale: f64 },
    RowwiseDot(VarId, VarId),
    CausalNormalize { scores: VarId, valid: Vec<bool>, mode: AttnNorm },
    Aggregate { weights: VarId, values: VarId, squared: bool },
    SliceCols { x: VarId, start: usize, len: usize },
    ConcatCols(Vec<VarId>),
    SoftplusSum(VarId),
    HingeSum(VarId),
    SumAll(VarId),
    AddScaled { a: VarId, b: VarId, c: f64 },
}

struct Node {
    op: Op,
    value: Tensor,
}

pub struct Graph<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn value(&self, v: VarId) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> VarId {
        self.nodes.push(Node { op, value });
        VarId(self.nodes.len() - 1)
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, t: Tensor) -> VarId {
        self.push(Op::Input, t)
    }

    /// A whole (small) parameter tensor as a leaf.
    pub fn param(&mut self, id: ParamId) -> VarId {
        let value = self.params.get(id).clone();
        self.push(Op::Param(id), value)
    }

    /// Row lookup into a parameter table; backward scatter-adds per row.
    pub fn gather(&mut self, param: ParamId, ids: &[usize]) -> Result<VarId> {
        let table = self.params.get(param);
        let rows = table.rows();
        let cols = table.cols();
        let mut out = Tensor::zeros(&[ids.len(), cols]);
        for (i, &id) in ids.iter().enumerate() {
            if id >= rows {
                return Err(CoreError::Lookup(format!(
                    "row {id} out of range for table `{}` with {rows} rows",
                    self.params.name(param)
                )));
            }
            out.row_mut(i).copy_from_slice(table.row(id));
        }
        Ok(self.push(
            Op::Gather {
                param,
                ids: ids.to_vec(),
            },
            out,
        ))
    }

    pub fn select_rows(&mut self, x: VarId, rows: Vec<usize>) -> VarId {
        let src = self.value(x);
        let cols = src.cols();
        let mut out = Tensor::zeros(&[rows.len(), cols]);
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(src.row(r));
        }
        self.push(Op::SelectRows { x, rows }, out)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        self.push(Op::Add(a, b), value)
    }

    /// Broadcast-add a [d] row vector onto every row of a [n,d] tensor.
    pub fn add_row(&mut self, x: VarId, row: VarId) -> VarId {
        let xs = self.value(x);
        let rv = self.value(row);
        assert_eq!(xs.cols(), rv.len(), "add_row width mismatch");
        let mut out = xs.clone();
        for i in 0..out.rows() {
            let r = out.row_mut(i);
            for (o, b) in r.iter_mut().zip(rv.data.iter()) {
                *o += b;
            }
        }
        self.push(Op::AddRow { x, row }, out)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape, bv.shape, "sub shape mismatch");
        let data = av
            .data
            .iter()
            .zip(bv.data.iter())
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::from_vec(&av.shape, data);
        self.push(Op::Sub(a, b), value)
    }

    pub fn scale(&mut self, x: VarId, c: f64) -> VarId {
        let value = self.value(x).map(|v| c * v);
        self.push(Op::Scale(x, c), value)
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        let value = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul(a, b), value)
    }

    pub fn elu(&mut self, x: VarId) -> VarId {
        let value = self.value(x).map(elu);
        self.push(Op::Elu(x), value)
    }

    pub fn elu_plus_one(&mut self, x: VarId) -> VarId {
        let value = self.value(x).map(elu_plus_one);
        self.push(Op::EluPlusOne(x), value)
    }

    pub fn relu(&mut self, x: VarId) -> VarId {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(Op::Relu(x), value)
    }

    pub fn layer_norm(&mut self, x: VarId, gain: VarId, bias: VarId) -> VarId {
        let xs = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let d = xs.cols();
        assert_eq!(g.len(), d);
        assert_eq!(b.len(), d);
        let mut out = Tensor::zeros(&xs.shape);
        for i in 0..xs.rows() {
            let row = xs.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + LN_EPS).sqrt();
            let orow = out.row_mut(i);
            for j in 0..d {
                orow[j] = g.data[j] * ((row[j] - mean) * istd) + b.data[j];
            }
        }
        self.push(Op::LayerNorm { x, gain, bias }, out)
    }

    /// Multiply by a fixed mask whose entries are 0 or 1/keep (inverted
    /// dropout). The mask is supplied by the caller so runs stay seeded.
    pub fn dropout(&mut self, x: VarId, mask: Vec<f64>) -> VarId {
        let xs = self.value(x);
        assert_eq!(xs.len(), mask.len(), "dropout mask length mismatch");
        let data = xs
            .data
            .iter()
            .zip(mask.iter())
            .map(|(v, m)| v * m)
            .collect();
        let value = Tensor::from_vec(&xs.shape, data);
        self.push(Op::Dropout { x, mask }, value)
    }

    /// All-pairs squared W2 between query and key Gaussians.
    pub fn w2_dist_matrix(&mut self, qm: VarId, qc: VarId, km: VarId, kc: VarId) -> VarId {
        let value = w2_distance_matrix_raw(
            self.value(qm),
            self.value(qc),
            self.value(km),
            self.value(kc),
        );
        self.push(Op::W2DistMatrix { qm, qc, km, kc }, value)
    }

    /// Row-by-row squared W2 between two stacks of Gaussians; output [T].
    pub fn w2_rowwise(&mut self, am: VarId, ac: VarId, bm: VarId, bc: VarId) -> VarId {
        let (amv, acv, bmv, bcv) = (
            self.value(am),
            self.value(ac),
            self.value(bm),
            self.value(bc),
        );
        let t = amv.rows();
        let mut out = Tensor::zeros(&[t]);
        for i in 0..t {
            out.data[i] =
                crate::kernels::w2_sq_slices(amv.row(i), acv.row(i), bmv.row(i), bcv.row(i));
        }
        self.push(Op::W2Rowwise { am, ac, bm, bc }, out)
    }

    /// Scaled dot-product score matrix `scale * Q K^T`.
    pub fn dot_scores(&mut self, q: VarId, k: VarId, scale: f64) -> VarId {
        let value = self.value(q).matmul_nt(self.value(k)).map(|v| v * scale);
        self.push(Op::DotScores { q, k, scale }, value)
    }

    /// Per-row dot products of two [T,d] stacks; output [T].
    pub fn rowwise_dot(&mut self, a: VarId, b: VarId) -> VarId {
        let av = self.value(a);
        let bv = self.value(b);
        let t = av.rows();
        let mut out = Tensor::zeros(&[t]);
        for i in 0..t {
            out.data[i] = crate::tensor::dot(av.row(i), bv.row(i));
        }
        self.push(Op::RowwiseDot(a, b), out)
    }

    /// Causal masked normalization of a score matrix into attention weights.
    ///
    /// Row t gets weights over keys k <= t restricted to `valid` positions;
    /// all other entries (future keys, padding keys, padding query rows) are
    /// zero. Rows with at least one valid key sum to one.
    pub fn causal_normalize(
        &mut self,
        scores: VarId,
        valid: &[bool],
        mode: AttnNorm,
    ) -> Result<VarId> {
        let s = self.value(scores);
        let n = s.rows();
        assert_eq!(s.cols(), n, "attention scores must be square");
        assert_eq!(valid.len(), n, "validity mask length mismatch");
        let mut out = Tensor::zeros(&[n, n]);
        for t in 0..n {
            if !valid[t] {
                continue;
            }
            let keys: Vec<usize> = (0..=t).filter(|&k| valid[k]).collect();
            let srow = s.row(t);
            match mode {
                AttnNorm::SoftmaxNeg | AttnNorm::Softmax => {
                    let sign = if mode == AttnNorm::SoftmaxNeg { -1.0 } else { 1.0 };
                    let max = keys
                        .iter()
                        .map(|&k| sign * srow[k])
                        .fold(f64::NEG_INFINITY, f64::max);
                    let mut denom = 0.0;
                    for &k in &keys {
                        denom += (sign * srow[k] - max).exp();
                    }
                    let orow = out.row_mut(t);
                    for &k in &keys {
                        orow[k] = (sign * srow[k] - max).exp() / denom;
                    }
                }
                AttnNorm::RatioNeg => {
                    let denom: f64 = keys.iter().map(|&k| -srow[k]).sum();
                    if denom == 0.0 {
                        return Err(CoreError::Normalization(format!(
                            "ratio normalization denominator is zero at query position {t}"
                        )));
                    }
                    let orow = out.row_mut(t);
                    for &k in &keys {
                        orow[k] = -srow[k] / denom;
                    }
                }
            }
        }
        Ok(self.push(
            Op::CausalNormalize {
                scores,
                valid: valid.to_vec(),
                mode,
            },
            out,
        ))
    }

    /// Weighted aggregation `Z = W V` (means) or `Z = (W . W) V` (covariances,
    /// squared weights per the linear-combination rule for Gaussians).
    pub fn aggregate(&mut self, weights: VarId, values: VarId, squared: bool) -> VarId {
        let w = self.value(weights);
        let value = if squared {
            let w2 = w.map(|v| v * v);
            w2.matmul(self.value(values))
        } else {
            w.matmul(self.value(values))
        };
        self.push(
            Op::Aggregate {
                weights,
                values,
                squared,
            },
            value,
        )
    }

    pub fn slice_cols(&mut self, x: VarId, start: usize, len: usize) -> VarId {
        let xs = self.value(x);
        let (n, d) = (xs.rows(), xs.cols());
        assert!(start + len <= d, "slice_cols out of range");
        let mut out = Tensor::zeros(&[n, len]);
        for i in 0..n {
            out.row_mut(i).copy_from_slice(&xs.row(i)[start..start + len]);
        }
        self.push(Op::SliceCols { x, start, len }, out)
    }

    pub fn concat_cols(&mut self, parts: &[VarId]) -> VarId {
        assert!(!parts.is_empty());
        let n = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(&[n, total]);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), n, "concat_cols row mismatch");
            let w = pv.cols();
            for i in 0..n {
                out.row_mut(i)[off..off + w].copy_from_slice(pv.row(i));
            }
            off += w;
        }
        self.push(Op::ConcatCols(parts.to_vec()), out)
    }

    /// `sum_i ln(1 + exp(x_i))`, the summed BPR surrogate.
    pub fn softplus_sum(&mut self, x: VarId) -> VarId {
        let v = self.value(x).data.iter().map(|&t| softplus(t)).sum();
        self.push(Op::SoftplusSum(x), Tensor::scalar(v))
    }

    /// `sum_i max(x_i, 0)`; subgradient at the kink is taken as zero.
    pub fn hinge_sum(&mut self, x: VarId) -> VarId {
        let v = self.value(x).data.iter().map(|&t| t.max(0.0)).sum();
        self.push(Op::HingeSum(x), Tensor::scalar(v))
    }

    pub fn sum_all(&mut self, x: VarId) -> VarId {
        let v = self.value(x).sum();
        self.push(Op::SumAll(x), Tensor::scalar(v))
    }

    /// `a + c * b` on scalars.
    pub fn add_scaled(&mut self, a: VarId, b: VarId, c: f64) -> VarId {
        let v = self.value(a).scale_value() + c * self.value(b).scale_value();
        self.push(Op::AddScaled { a, b, c }, Tensor::scalar(v))
    }

    /// Reverse pass from a scalar loss. Gradients of `param`/`gather` leaves
    /// are accumulated (added) into `store`.
    pub fn backward(&self, loss: VarId, store: &mut GradStore) {
        assert_eq!(
            self.nodes[loss.0].value.len(),
            1,
            "backward requires a scalar loss"
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[idx].op {
                Op::Input => {}
                Op::Param(pid) => {
                    store.add(*pid, &g);
                }
                Op::Gather { param, ids } => {
                    store.add_rows(*param, ids, &g);
                }
                Op::SelectRows { x, rows } => {
                    let xg = self.grad_slot(&mut grads, *x);
                    for (i, &r) in rows.iter().enumerate() {
                        let src = g.row(i);
                        let dst = xg.row_mut(r);
                        for (d, s) in dst.iter_mut().zip(src.iter()) {
                            *d += s;
                        }
                    }
                }
                Op::Add(a, b) => {
                    self.grad_slot(&mut grads, *a).add_assign(&g);
                    self.grad_slot(&mut grads, *b).add_assign(&g);
                }
                Op::AddRow { x, row } => {
                    self.grad_slot(&mut grads, *x).add_assign(&g);
                    let rg = self.grad_slot(&mut grads, *row);
                    for i in 0..g.rows() {
                        for (d, s) in rg.data.iter_mut().zip(g.row(i).iter()) {
                            *d += s;
                        }
                    }
                }
                Op::Sub(a, b) => {
                    self.grad_slot(&mut grads, *a).add_assign(&g);
                    let bg = self.grad_slot(&mut grads, *b);
                    for (d, s) in bg.data.iter_mut().zip(g.data.iter()) {
                        *d -= s;
                    }
                }
                Op::Scale(x, c) => {
                    let xg = self.grad_slot(&mut grads, *x);
                    for (d, s) in xg.data.iter_mut().zip(g.data.iter()) {
                        *d += c * s;
                    }
                }
                Op::MatMul(a, b) => {
                    let da = g.matmul_nt(self.value(*b));
                    let db = self.value(*a).matmul_tn(&g);
                    self.grad_slot(&mut grads, *a).add_assign(&da);
                    self.grad_slot(&mut grads, *b).add_assign(&db);
                }
                Op::Elu(x) => {
                    let xv = self.value(*x);
                    let xg = self.grad_slot(&mut grads, *x);
                    for i in 0..xg.data.len() {
                        let d = if xv.data[i] > 0.0 { 1.0 } else { xv.data[i].exp() };
                        xg.data[i] += g.data[i] * d;
                    }
                }
                Op::EluPlusOne(x) => {
                    let xv = self.value(*x);
                    let yv = &self.nodes[idx].value;
                    let xg = self.grad_slot(&mut grads, *x);
                    for i in 0..xg.data.len() {
                        // d(ELU(x)+1)/dx = 1 for x>0, exp(x) = y otherwise
                        let d = if xv.data[i] > 0.0 { 1.0 } else { yv.data[i] };
                        xg.data[i] += g.data[i] * d;
                    }
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let xg = self.grad_slot(&mut grads, *x);
                    for i in 0..xg.data.len() {
                        if xv.data[i] > 0.0 {
                            xg.data[i] += g.data[i];
                        }
                    }
                }
                Op::LayerNorm { x, gain, bias } => {
                    self.backward_layer_norm(&mut grads, &g, *x, *gain, *bias);
                }
                Op::Dropout { x, mask } => {
                    let xg = self.grad_slot(&mut grads, *x);
                    for i in 0..xg.data.len() {
                        xg.data[i] += g.data[i] * mask[i];
                    }
                }
                Op::W2DistMatrix { qm, qc, km, kc } => {
                    self.backward_w2_matrix(&mut grads, &g, *qm, *qc, *km, *kc);
                }
                Op::W2Rowwise { am, ac, bm, bc } => {
                    self.backward_w2_rowwise(&mut grads, &g, *am, *ac, *bm, *bc);
                }
                Op::DotScores { q, k, scale } => {
                    let gs = g.map(|v| v * scale);
                    let dq = gs.matmul(self.value(*k));
                    let dk = gs.matmul_tn(self.value(*q));
                    self.grad_slot(&mut grads, *q).add_assign(&dq);
                    self.grad_slot(&mut grads, *k).add_assign(&dk);
                }
                Op::RowwiseDot(a, b) => {
                    let av = self.value(*a).clone();
                    let bv = self.value(*b).clone();
                    {
                        let ag = self.grad_slot(&mut grads, *a);
                        for i in 0..g.len() {
                            let dst = ag.row_mut(i);
                            for (d, s) in dst.iter_mut().zip(bv.row(i).iter()) {
                                *d += g.data[i] * s;
                            }
                        }
                    }
                    let bg = self.grad_slot(&mut grads, *b);
                    for i in 0..g.len() {
                        let dst = bg.row_mut(i);
                        for (d, s) in dst.iter_mut().zip(av.row(i).iter()) {
                            *d += g.data[i] * s;
                        }
                    }
                }
                Op::CausalNormalize {
                    scores,
                    valid,
                    mode,
                } => {
                    self.backward_normalize(&mut grads, idx, &g, *scores, valid, *mode);
                }
                Op::Aggregate {
                    weights,
                    values,
                    squared,
                } => {
                    let w = self.value(*weights);
                    let v = self.value(*values);
                    if *squared {
                        let m = g.matmul_nt(v);
                        let dw_data: Vec<f64> = w
                            .data
                            .iter()
                            .zip(m.data.iter())
                            .map(|(wv, mv)| 2.0 * wv * mv)
                            .collect();
                        let dw = Tensor::from_vec(&w.shape, dw_data);
                        let w2 = w.map(|t| t * t);
                        let dv = w2.matmul_tn(&g);
                        self.grad_slot(&mut grads, *weights).add_assign(&dw);
                        self.grad_slot(&mut grads, *values).add_assign(&dv);
                    } else {
                        let dw = g.matmul_nt(v);
                        let dv = w.matmul_tn(&g);
                        self.grad_slot(&mut grads, *weights).add_assign(&dw);
                        self.grad_slot(&mut grads, *values).add_assign(&dv);
                    }
                }
                Op::SliceCols { x, start, len } => {
                    let xg = self.grad_slot(&mut grads, *x);
                    for i in 0..g.rows() {
                        let dst = &mut xg.row_mut(i)[*start..*start + *len];
                        for (d, s) in dst.iter_mut().zip(g.row(i).iter()) {
                            *d += s;
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts.iter() {
                        let w = self.value(p).cols();
                        let pg = self.grad_slot(&mut grads, p);
                        for i in 0..g.rows() {
                            let src = &g.row(i)[off..off + w];
                            for (d, s) in pg.row_mut(i).iter_mut().zip(src.iter()) {
                                *d += s;
                            }
                        }
                        off += w;
                    }
                }
                Op::SoftplusSum(x) => {
                    let gs = g.scale_value();
                    let xv = self.value(*x).clone();
                    let xg = self.grad_slot(&mut grads, *x);
                    for i in 0..xg.data.len() {
                        xg.data[i] += gs * sigmoid(xv.data[i]);
                    }
                }
                Op::HingeSum(x) => {
                    let gs = g.scale_value();
                    let xv = self.value(*x).clone();
                    let xg = self.grad_slot(&mut grads, *x);
                    for i in 0..xg.data.len() {
                        if xv.data[i] > 0.0 {
                            xg.data[i] += gs;
                        }
                    }
                }
                Op::SumAll(x) => {
                    let gs = g.scale_value();
                    let xg = self.grad_slot(&mut grads, *x);
                    for d in xg.data.iter_mut() {
                        *d += gs;
                    }
                }
                Op::AddScaled { a, b, c } => {
                    let gs = g.scale_value();
                    self.grad_slot(&mut grads, *a).data[0] += gs;
                    self.grad_slot(&mut grads, *b).data[0] += c * gs;
                }
            }
        }
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Tensor>], id: VarId) -> &'g mut Tensor {
        let shape = self.nodes[id.0].value.shape.clone();
        grads[id.0].get_or_insert_with(|| Tensor::zeros(&shape))
    }

    fn backward_layer_norm(
        &self,
        grads: &mut [Option<Tensor>],
        g: &Tensor,
        x: VarId,
        gain: VarId,
        bias: VarId,
    ) {
        let xv = self.value(x).clone();
        let gv = self.value(gain).clone();
        let d = xv.cols();
        let inv_d = 1.0 / d as f64;

        // per-row recomputation of mean/var/xhat
        let mut dx = Tensor::zeros(&xv.shape);
        let mut dgain = vec![0.0; d];
        let mut dbias = vec![0.0; d];
        for i in 0..xv.rows() {
            let row = xv.row(i);
            let grow = g.row(i);
            let mean = row.iter().sum::<f64>() * inv_d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() * inv_d;
            let istd = 1.0 / (var + LN_EPS).sqrt();
            let mut m1 = 0.0;
            let mut m2 = 0.0;
            let mut xhat = vec![0.0; d];
            let mut dxhat = vec![0.0; d];
            for j in 0..d {
                xhat[j] = (row[j] - mean) * istd;
                dxhat[j] = grow[j] * gv.data[j];
                dgain[j] += grow[j] * xhat[j];
                dbias[j] += grow[j];
                m1 += dxhat[j];
                m2 += dxhat[j] * xhat[j];
            }
            m1 *= inv_d;
            m2 *= inv_d;
            let drow = dx.row_mut(i);
            for j in 0..d {
                drow[j] = istd * (dxhat[j] - m1 - xhat[j] * m2);
            }
        }
        self.grad_slot(grads, x).add_assign(&dx);
        let gd = Tensor::from_vec(&[d], dgain);
        self.grad_slot(grads, gain).add_assign(&gd);
        let bd = Tensor::from_vec(&[d], dbias);
        self.grad_slot(grads, bias).add_assign(&bd);
    }

    fn backward_w2_matrix(
        &self,
        grads: &mut [Option<Tensor>],
        g: &Tensor,
        qm: VarId,
        qc: VarId,
        km: VarId,
        kc: VarId,
    ) {
        let qmv = self.value(qm);
        let qcv = self.value(qc);
        let kmv = self.value(km);
        let kcv = self.value(kc);
        let n = qmv.rows();
        let m = kmv.rows();
        let d = qmv.cols();

        let rowsum: Vec<f64> = (0..n).map(|t| g.row(t).iter().sum()).collect();
        let mut colsum = vec![0.0; m];
        for t in 0..n {
            for (k, &gv) in g.row(t).iter().enumerate() {
                colsum[k] += gv;
            }
        }

        // Means: dD[t,k]/dqm[t] = 2(qm[t]-km[k]), so
        // dqm = 2 (rowsum .* qm - G km), dkm = 2 (colsum .* km - G^T qm).
        let g_km = g.matmul(kmv);
        let gt_qm = g.matmul_tn(qmv);
        let mut dqm = Tensor::zeros(&[n, d]);
        for t in 0..n {
            let row = dqm.row_mut(t);
            let qrow = qmv.row(t);
            let grow = g_km.row(t);
            for j in 0..d {
                row[j] = 2.0 * (rowsum[t] * qrow[j] - grow[j]);
            }
        }
        let mut dkm = Tensor::zeros(&[m, d]);
        for k in 0..m {
            let row = dkm.row_mut(k);
            let krow = kmv.row(k);
            let grow = gt_qm.row(k);
            for j in 0..d {
                row[j] = 2.0 * (colsum[k] * krow[j] - grow[j]);
            }
        }

        // Covariances: with s = sqrt(c), dD[t,k]/dqc[t,i] = 1 - sk[k,i]/sq[t,i].
        let sq = qcv.map(f64::sqrt);
        let sk = kcv.map(f64::sqrt);
        let g_sk = g.matmul(&sk);
        let gt_sq = g.matmul_tn(&sq);
        let mut dqc = Tensor::zeros(&[n, d]);
        for t in 0..n {
            let row = dqc.row_mut(t);
            let srow = sq.row(t);
            let grow = g_sk.row(t);
            for j in 0..d {
                row[j] = rowsum[t] - grow[j] / srow[j];
            }
        }
        let mut dkc = Tensor::zeros(&[m, d]);
        for k in 0..m {
            let row = dkc.row_mut(k);
            let srow = sk.row(k);
            let grow = gt_sq.row(k);
            for j in 0..d {
                row[j] = colsum[k] - grow[j] / srow[j];
            }
        }

        self.grad_slot(grads, qm).add_assign(&dqm);
        self.grad_slot(grads, km).add_assign(&dkm);
        self.grad_slot(grads, qc).add_assign(&dqc);
        self.grad_slot(grads, kc).add_assign(&dkc);
    }

    fn backward_w2_rowwise(
        &self,
        grads: &mut [Option<Tensor>],
        g: &Tensor,
        am: VarId,
        ac: VarId,
        bm: VarId,
        bc: VarId,
    ) {
        let amv = self.value(am).clone();
        let acv = self.value(ac).clone();
        let bmv = self.value(bm).clone();
        let bcv = self.value(bc).clone();
        let t = amv.rows();
        let d = amv.cols();
        let mut dam = Tensor::zeros(&amv.shape);
        let mut dac = Tensor::zeros(&acv.shape);
        let mut dbm = Tensor::zeros(&bmv.shape);
        let mut dbc = Tensor::zeros(&bcv.shape);
        for i in 0..t {
            let gi = g.data[i];
            if gi == 0.0 {
                continue;
            }
            for j in 0..d {
                let dm = amv.row(i)[j] - bmv.row(i)[j];
                dam.row_mut(i)[j] += gi * 2.0 * dm;
                dbm.row_mut(i)[j] -= gi * 2.0 * dm;
                let sa = acv.row(i)[j].sqrt();
                let sb = bcv.row(i)[j].sqrt();
                dac.row_mut(i)[j] += gi * (sa - sb) / sa;
                dbc.row_mut(i)[j] += gi * (sb - sa) / sb;
            }
        }
        self.grad_slot(grads, am).add_assign(&dam);
        self.grad_slot(grads, ac).add_assign(&dac);
        self.grad_slot(grads, bm).add_assign(&dbm);
        self.grad_slot(grads, bc).add_assign(&dbc);
    }

    fn backward_normalize(
        &self,
        grads: &mut [Option<Tensor>],
        idx: usize,
        g: &Tensor,
        scores: VarId,
        valid: &[bool],
        mode: AttnNorm,
    ) {
        let w = &self.nodes[idx].value;
        let sv = self.value(scores);
        let n = sv.rows();
        let mut ds = Tensor::zeros(&[n, n]);
        for t in 0..n {
            if !valid[t] {
                continue;
            }
            let keys: Vec<usize> = (0..=t).filter(|&k| valid[k]).collect();
            let grow = g.row(t);
            let wrow = w.row(t);
            match mode {
                AttnNorm::SoftmaxNeg | AttnNorm::Softmax => {
                    let s: f64 = keys.iter().map(|&k| grow[k] * wrow[k]).sum();
                    let sign = if mode == AttnNorm::SoftmaxNeg { -1.0 } else { 1.0 };
                    let drow = ds.row_mut(t);
                    for &k in &keys {
                        drow[k] = sign * wrow[k] * (grow[k] - s);
                    }
                }
                AttnNorm::RatioNeg => {
                    let denom: f64 = keys.iter().map(|&k| -sv.row(t)[k]).sum();
                    let s: f64 = keys.iter().map(|&k| grow[k] * wrow[k]).sum();
                    let drow = ds.row_mut(t);
                    for &k in &keys {
                        // da_k = (g_k - sum_j g_j w_j) / denom, ds = -da
                        drow[k] = -(grow[k] - s) / denom;
                    }
                }
            }
        }
        self.grad_slot(grads, scores).add_assign(&ds);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    // Finite-difference check harness: builds a scalar loss from the params
    // via `build`, then compares analytic and central-difference gradients.
    fn fd_check(set: &ParamSet, build: impl Fn(&ParamSet, &mut Graph) -> VarId, tol: f64) {
        let loss_of = |s: &ParamSet| {
            let mut graph = Graph::new(s);
            let loss = build(s, &mut graph);
            graph.value(loss).scale_value()
        };
        let mut graph = Graph::new(set);
        let loss = build(set, &mut graph);
        let mut store = GradStore::zeros(set);
        graph.backward(loss, &mut store);

        let h = 1e-5;
        let mut perturbed = set.clone();
        for (pid, name, t) in set.iter() {
            for i in 0..t.len() {
                let orig = t.data[i];
                perturbed.get_mut(pid).data[i] = orig + h;
                let up = loss_of(&perturbed);
                perturbed.get_mut(pid).data[i] = orig - h;
                let down = loss_of(&perturbed);
                perturbed.get_mut(pid).data[i] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = store.get(pid).data[i];
                let denom = an.abs().max(fd.abs()).max(1e-6);
                assert!(
                    (an - fd).abs() / denom < tol,
                    "grad mismatch {name}[{i}]: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    fn randn_set(specs: &[(&str, Vec<usize>)], seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParamSet::new();
        for (name, shape) in specs {
            let t = Tensor::randn(shape, 0.5, &mut rng);
            set.add(name, t);
        }
        set
    }

    #[test]
    fn grad_matmul_layernorm_ffn_chain() {
        let mut set = randn_set(
            &[
                ("x", vec![3, 4]),
                ("w1", vec![4, 4]),
                ("b1", vec![4]),
                ("w2", vec![4, 4]),
                ("b2", vec![4]),
                ("gain", vec![4]),
                ("bias", vec![4]),
            ],
            7,
        );
        // keep the gain away from zero so layernorm output depends on it
        for v in set.get_mut(ParamId(5)).data.iter_mut() {
            *v += 1.0;
        }
        fd_check(
            &set,
            |s, g| {
                let x = g.param(s.by_name("x").unwrap());
                let gain = g.param(s.by_name("gain").unwrap());
                let bias = g.param(s.by_name("bias").unwrap());
                let ln = g.layer_norm(x, gain, bias);
                let w1 = g.param(s.by_name("w1").unwrap());
                let b1 = g.param(s.by_name("b1").unwrap());
                let h = g.matmul(ln, w1);
                let h = g.add_row(h, b1);
                let h = g.elu(h);
                let w2 = g.param(s.by_name("w2").unwrap());
                let b2 = g.param(s.by_name("b2").unwrap());
                let out = g.matmul(h, w2);
                let out = g.add_row(out, b2);
                let res = g.add(x, out);
                g.sum_all(res)
            },
            1e-5,
        );
    }

    #[test]
    fn grad_w2_distance_matrix() {
        let set = randn_set(
            &[
                ("qm", vec![4, 3]),
                ("qc_raw", vec![4, 3]),
                ("km", vec![4, 3]),
                ("kc_raw", vec![4, 3]),
            ],
            11,
        );
        fd_check(
            &set,
            |s, g| {
                let qm = g.param(s.by_name("qm").unwrap());
                let qc = g.param(s.by_name("qc_raw").unwrap());
                let qc = g.elu_plus_one(qc);
                let km = g.param(s.by_name("km").unwrap());
                let kc = g.param(s.by_name("kc_raw").unwrap());
                let kc = g.elu_plus_one(kc);
                let d = g.w2_dist_matrix(qm, qc, km, kc);
                // weight entries unevenly so row/col sums are exercised
                let n = g.value(d).len();
                let mask: Vec<f64> = (0..n).map(|i| 0.1 + (i as f64) * 0.07).collect();
                let d = g.dropout(d, mask);
                g.sum_all(d)
            },
            1e-5,
        );
    }

    #[test]
    fn grad_causal_normalize_and_aggregate() {
        for mode in [AttnNorm::SoftmaxNeg, AttnNorm::Softmax, AttnNorm::RatioNeg] {
            let set = randn_set(
                &[
                    ("scores_raw", vec![4, 4]),
                    ("vm", vec![4, 3]),
                    ("vc_raw", vec![4, 3]),
                ],
                13,
            );
            let valid = vec![false, true, true, true];
            fd_check(
                &set,
                |s, g| {
                    let raw = g.param(s.by_name("scores_raw").unwrap());
                    // ratio mode divides by sums of -scores; keep scores
                    // strictly positive so denominators stay away from zero
                    let scores = g.elu_plus_one(raw);
                    let w = g.causal_normalize(scores, &valid, mode).unwrap();
                    let vm = g.param(s.by_name("vm").unwrap());
                    let zc_raw = g.param(s.by_name("vc_raw").unwrap());
                    let vc = g.elu_plus_one(zc_raw);
                    let zm = g.aggregate(w, vm, false);
                    let zc = g.aggregate(w, vc, true);
                    let both = g.concat_cols(&[zm, zc]);
                    let n = g.value(both).len();
                    let mask: Vec<f64> = (0..n).map(|i| 0.3 + (i as f64) * 0.05).collect();
                    let weighted = g.dropout(both, mask);
                    g.sum_all(weighted)
                },
                1e-5,
            );
        }
    }

    #[test]
    fn grad_loss_head() {
        let set = randn_set(
            &[
                ("am", vec![3, 4]),
                ("ac_raw", vec![3, 4]),
                ("bm", vec![3, 4]),
                ("bc_raw", vec![3, 4]),
                ("cm", vec![3, 4]),
                ("cc_raw", vec![3, 4]),
            ],
            17,
        );
        fd_check(
            &set,
            |s, g| {
                let am = g.param(s.by_name("am").unwrap());
                let ac = g.param(s.by_name("ac_raw").unwrap());
                let ac = g.elu_plus_one(ac);
                let bm = g.param(s.by_name("bm").unwrap());
                let bc = g.param(s.by_name("bc_raw").unwrap());
                let bc = g.elu_plus_one(bc);
                let cm = g.param(s.by_name("cm").unwrap());
                let cc = g.param(s.by_name("cc_raw").unwrap());
                let cc = g.elu_plus_one(cc);
                let d_pos = g.w2_rowwise(am, ac, bm, bc);
                let d_neg = g.w2_rowwise(am, ac, cm, cc);
                let diff = g.sub(d_pos, d_neg);
                let bpr = g.softplus_sum(diff);
                let d_pn = g.w2_rowwise(bm, bc, cm, cc);
                let margin = g.sub(d_pos, d_pn);
                let pvn = g.hinge_sum(margin);
                g.add_scaled(bpr, pvn, 0.5)
            },
            1e-5,
        );
    }

    #[test]
    fn grad_slice_cols_with_offsets() {
        let set = randn_set(&[("x", vec![3, 6])], 31);
        fd_check(
            &set,
            |s, g| {
                let x = g.param(s.by_name("x").unwrap());
                let a = g.slice_cols(x, 0, 2);
                let b = g.slice_cols(x, 2, 4);
                let bb = g.elu(b);
                let bb = g.slice_cols(bb, 1, 2);
                let joined = g.concat_cols(&[a, bb]);
                let n = g.value(joined).len();
                let mask: Vec<f64> = (0..n).map(|i| 0.2 + 0.11 * i as f64).collect();
                let weighted = g.dropout(joined, mask);
                g.sum_all(weighted)
            },
            1e-5,
        );
    }

    #[test]
    fn grad_gather_and_select() {
        let set = randn_set(&[("table", vec![5, 3]), ("w", vec![3, 3])], 23);
        fd_check(
            &set,
            |s, g| {
                let rows = g.gather(s.by_name("table").unwrap(), &[1, 3, 1, 4]).unwrap();
                let w = g.param(s.by_name("w").unwrap());
                let h = g.matmul(rows, w);
                let sel = g.select_rows(h, vec![0, 2]);
                g.sum_all(sel)
            },
            1e-5,
        );
    }

    #[test]
    fn grad_dot_attention_chain() {
        let set = randn_set(
            &[("x", vec![4, 4]), ("wq", vec![4, 4]), ("wk", vec![4, 4]), ("wv", vec![4, 4])],
            29,
        );
        let valid = vec![true, true, false, true];
        fd_check(
            &set,
            |s, g| {
                let x = g.param(s.by_name("x").unwrap());
                let wq = g.param(s.by_name("wq").unwrap());
                let wk = g.param(s.by_name("wk").unwrap());
                let wv = g.param(s.by_name("wv").unwrap());
                let q = g.matmul(x, wq);
                let k = g.matmul(x, wk);
                let v = g.matmul(x, wv);
                let scores = g.dot_scores(q, k, 0.5);
                let w = g.causal_normalize(scores, &valid, AttnNorm::Softmax).unwrap();
                let z = g.aggregate(w, v, false);
                let d = g.rowwise_dot(z, x);
                g.softplus_sum(d)
            },
            1e-5,
        );
    }

    #[test]
    fn normalize_equal_distances_are_uniform_in_both_modes() {
        let set = ParamSet::new();
        for mode in [AttnNorm::SoftmaxNeg, AttnNorm::RatioNeg] {
            let mut g = Graph::new(&set);
            let scores = g.input(Tensor::filled(&[4, 4], 2.5));
            let valid = vec![true, true, true, true];
            let w = g.causal_normalize(scores, &valid, mode).unwrap();
            let wv = g.value(w);
            for t in 0..4 {
                let expect = 1.0 / (t + 1) as f64;
                for k in 0..=t {
                    assert!((wv.row(t)[k] - expect).abs() < 1e-12, "{mode:?} t={t}");
                }
            }
        }
    }

    #[test]
    fn normalize_softmax_hand_values() {
        // distances [0, 9] over two keys: softmax of the negations
        let set = ParamSet::new();
        let mut g = Graph::new(&set);
        let scores = g.input(Tensor::from_vec(&[2, 2], vec![0.0, 0.0, 0.0, 9.0]));
        let w = g
            .causal_normalize(scores, &[true, true], AttnNorm::SoftmaxNeg)
            .unwrap();
        let row = g.value(w).row(1).to_vec();
        // oracle: direct exp/sum
        let denom = 1.0 + (-9.0f64).exp();
        assert!((row[0] - 1.0 / denom).abs() < 1e-12);
        assert!((row[1] - (-9.0f64).exp() / denom).abs() < 1e-12);
        assert!(row[0] > 0.9998 && row[1] < 0.00013);
    }

    #[test]
    fn normalize_ratio_weighs_farther_key_more() {
        // literal ratio arithmetic on distances [1, 3]: [-1/-4, -3/-4]
        let set = ParamSet::new();
        let mut g = Graph::new(&set);
        let scores = g.input(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 1.0, 3.0]));
        let w = g
            .causal_normalize(scores, &[true, true], AttnNorm::RatioNeg)
            .unwrap();
        let row = g.value(w).row(1).to_vec();
        assert!((row[0] - 0.25).abs() < 1e-12);
        assert!((row[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn aggregate_one_hot_selects_and_squared_weights_contract() {
        let set = ParamSet::new();
        let mut g = Graph::new(&set);
        // one-hot row at key 1 selects that value row exactly
        let w = g.input(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let vm = g.input(Tensor::from_vec(&[2, 2], vec![3.0, -1.0, 7.0, 2.0]));
        let vc = g.input(Tensor::from_vec(&[2, 2], vec![4.0, 4.0, 9.0, 1.0]));
        let zm = g.aggregate(w, vm, false);
        let zc = g.aggregate(w, vc, true);
        assert_eq!(g.value(zm).row(1), &[7.0, 2.0]);
        assert_eq!(g.value(zc).row(1), &[9.0, 1.0]);

        // uniform over two keys with constant variance 4: 0.25*4 + 0.25*4 = 2
        let mut g = Graph::new(&set);
        let w = g.input(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.5, 0.5]));
        let vc = g.input(Tensor::from_vec(&[2, 1], vec![4.0, 4.0]));
        let zc = g.aggregate(w, vc, true);
        assert_eq!(g.value(zc).row(1), &[2.0]);

        // weights [0.25, 0.75] on means [0], [4]: convex combination 3
        let mut g = Graph::new(&set);
        let w = g.input(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.25, 0.75]));
        let vm = g.input(Tensor::from_vec(&[2, 1], vec![0.0, 4.0]));
        let zm = g.aggregate(w, vm, false);
        assert_eq!(g.value(zm).row(1), &[3.0]);
    }

    // Jensen: a row with weights w and constant variance c aggregates to
    // c * sum(w^2) <= c, strictly below unless one-hot.
    #[test]
    fn aggregate_squared_weights_shrink_constant_variance() {
        let set = ParamSet::new();
        let mut g = Graph::new(&set);
        let c = 5.0;
        let weights = vec![0.2, 0.3, 0.5];
        let mut row = vec![0.0; 9];
        row[6..9].copy_from_slice(&weights);
        let w = g.input(Tensor::from_vec(&[3, 3], row));
        let vc = g.input(Tensor::filled(&[3, 1], c));
        let zc = g.aggregate(w, vc, true);
        let got = g.value(zc).row(2)[0];
        let expect = c * weights.iter().map(|v| v * v).sum::<f64>();
        assert!((got - expect).abs() < 1e-12);
        assert!(got < c);
    }

    #[test]
    fn ratio_normalize_zero_denominator_errors() {
        let set = ParamSet::new();
        let mut g = Graph::new(&set);
        let scores = g.input(Tensor::zeros(&[2, 2]));
        let err = g.causal_normalize(scores, &[true, true], AttnNorm::RatioNeg);
        assert!(matches!(err, Err(CoreError::Normalization(_))));
    }

    #[test]
    fn normalize_rows_sum_to_one_and_respect_causality() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let set = ParamSet::new();
        for mode in [AttnNorm::SoftmaxNeg, AttnNorm::Softmax, AttnNorm::RatioNeg] {
            let n = 6;
            let mut g = Graph::new(&set);
            let raw: Vec<f64> = (0..n * n).map(|_| rng.gen_range(0.1..3.0)).collect();
            let scores = g.input(Tensor::from_vec(&[n, n], raw));
            let valid = vec![false, false, true, true, false, true];
            let w = g.causal_normalize(scores, &valid, mode).unwrap();
            let wv = g.value(w);
            for t in 0..n {
                let row = wv.row(t);
                if !valid[t] {
                    assert!(row.iter().all(|&x| x == 0.0), "invalid query row not zero");
                    continue;
                }
                for k in 0..n {
                    if k > t || !valid[k] {
                        assert_eq!(row[k], 0.0, "leak at t={t} k={k}");
                    }
                }
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-9, "row {t} sums to {sum}");
            }
        }
    }
}
