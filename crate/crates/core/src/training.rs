//! Ranking loss, Adam optimization, the training loop with early stopping,
//! and finite-difference gradient verification.
//!
//! The objective per step sums, over every valid position t of every batch
//! window, `-log sigmoid(d(t, neg) - d(t, pos)) + lambda * hinge(d(t, pos) -
//! d(pos, neg))`, plus `beta * ||Theta||^2` once per step. Distances follow
//! the unified ascending contract, so the same code trains both variants.

use crate::attention::{attn_norm_for, baseline_encoder, stosa_encoder, ForwardMode};
use crate::config::RunConfig;
use crate::data::{make_window, sample_negative, SequenceDataset, TrainingWindow};
use crate::embeddings::lookup_into_graph;
use crate::error::{CoreError, Result};
use crate::evaluation::{evaluate, EvalSplit};
use crate::graph::Graph;
use crate::model::{Arch, ModelParams};
use crate::params::{GradStore, ParamSet};
use crate::rng::stream;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use serde::Serialize;
use std::time::Instant;

/// One training example: a window plus one sampled negative per position
/// (entries at padding positions are ignored).
#[derive(Debug, Clone)]
pub struct StepInput {
    pub window: TrainingWindow,
    pub negatives: Vec<u32>,
}

/// Decomposed objective value for one step: `total = bpr + lambda*pvn +
/// beta*l2`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LossTerms {
    pub bpr: f64,
    pub pvn: f64,
    pub l2: f64,
    pub total: f64,
    pub lambda: f64,
    pub beta: f64,
}

/// Forward + backward over a batch; gradients are reduced user by user in
/// input order into a single store. Errors identify the diverging term.
pub fn step_loss(
    model: &ModelParams,
    batch: &[StepInput],
    lambda: f64,
    beta: f64,
    mode: &mut ForwardMode,
) -> Result<(LossTerms, GradStore)> {
    let mut store = GradStore::zeros(&model.set);
    let mut bpr_sum = 0.0;
    let mut pvn_sum = 0.0;

    for input in batch {
        let window = &input.window;
        let valid = window.valid_positions();
        if valid.is_empty() {
            continue;
        }
        let pos_ids: Vec<usize> = valid.iter().map(|&t| window.targets[t] as usize).collect();
        let neg_ids: Vec<usize> = valid.iter().map(|&t| input.negatives[t] as usize).collect();

        let mut g = Graph::new(&model.set);
        let (bpr, pvn) = match &model.arch {
            Arch::Stosa(arch) => {
                let (mean, cov) = lookup_into_graph(&mut g, &arch.tables, window)?;
                let enc = stosa_encoder(
                    &mut g,
                    arch,
                    model.config.heads,
                    attn_norm_for(model.config.norm_mode),
                    mean,
                    cov,
                    &window.mask,
                    mode,
                )?;
                let state_m = g.select_rows(enc.mean, valid.clone());
                let state_c = g.select_rows(enc.cov, valid.clone());
                let pos_m = g.gather(arch.tables.item_mean, &pos_ids)?;
                let pos_c_raw = g.gather(arch.tables.item_cov_raw, &pos_ids)?;
                let pos_c = g.elu_plus_one(pos_c_raw);
                let neg_m = g.gather(arch.tables.item_mean, &neg_ids)?;
                let neg_c_raw = g.gather(arch.tables.item_cov_raw, &neg_ids)?;
                let neg_c = g.elu_plus_one(neg_c_raw);

                let d_pos = g.w2_rowwise(state_m, state_c, pos_m, pos_c);
                let d_neg = g.w2_rowwise(state_m, state_c, neg_m, neg_c);
                let diff = g.sub(d_pos, d_neg);
                let bpr = g.softplus_sum(diff);
                // margin between the positive target and the sampled negative,
                // measured between the input-table Gaussians
                let d_pn = g.w2_rowwise(pos_m, pos_c, neg_m, neg_c);
                let margin = g.sub(d_pos, d_pn);
                let pvn = g.hinge_sum(margin);
                (bpr, pvn)
            }
            Arch::Baseline(arch) => {
                let ids: Vec<usize> = window.inputs.iter().map(|&v| v as usize).collect();
                let item = g.gather(arch.item_emb, &ids)?;
                let pos_table = g.param(arch.pos_emb);
                let x = g.add(item, pos_table);
                let enc =
                    baseline_encoder(&mut g, arch, model.config.heads, x, &window.mask, mode)?;
                let state = g.select_rows(enc.states, valid.clone());
                let pos_e = g.gather(arch.item_emb, &pos_ids)?;
                let neg_e = g.gather(arch.item_emb, &neg_ids)?;
                let dp = g.rowwise_dot(state, pos_e);
                let d_pos = g.scale(dp, -1.0);
                let dn = g.rowwise_dot(state, neg_e);
                let d_neg = g.scale(dn, -1.0);
                let diff = g.sub(d_pos, d_neg);
                let bpr = g.softplus_sum(diff);
                let pn = g.rowwise_dot(pos_e, neg_e);
                let d_pn = g.scale(pn, -1.0);
                let margin = g.sub(d_pos, d_pn);
                let pvn = g.hinge_sum(margin);
                (bpr, pvn)
            }
        };

        let bpr_val = g.value(bpr).scale_value();
        let pvn_val = g.value(pvn).scale_value();
        if !bpr_val.is_finite() {
            return Err(CoreError::Numeric("bpr term diverged (non-finite)".into()));
        }
        if !pvn_val.is_finite() {
            return Err(CoreError::Numeric("pvn term diverged (non-finite)".into()));
        }
        bpr_sum += bpr_val;
        pvn_sum += pvn_val;

        let loss = g.add_scaled(bpr, pvn, lambda);
        g.backward(loss, &mut store);
    }

    let l2 = model.set.sum_sq();
    if !l2.is_finite() {
        return Err(CoreError::Numeric("l2 term diverged (non-finite)".into()));
    }
    if beta > 0.0 {
        for (pid, _, t) in model.set.iter() {
            let delta = t.map(|v| 2.0 * beta * v);
            store.add(pid, &delta);
        }
    }
    if !store.is_finite() {
        return Err(CoreError::Numeric("gradients diverged (non-finite)".into()));
    }

    let terms = LossTerms {
        bpr: bpr_sum,
        pvn: pvn_sum,
        l2,
        total: bpr_sum + lambda * pvn_sum + beta * l2,
        lambda,
        beta,
    };
    Ok((terms, store))
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(set: &ParamSet, lr: f64) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: set.iter().map(|(_, _, t)| Tensor::zeros(&t.shape)).collect(),
            v: set.iter().map(|(_, _, t)| Tensor::zeros(&t.shape)).collect(),
        }
    }

    pub fn update(&mut self, set: &mut ParamSet, grads: &GradStore) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..self.m.len() {
            let pid = crate::params::ParamId(i);
            let g = grads.get(pid);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = set.get_mut(pid);
            for j in 0..p.data.len() {
                let gj = g.data[j];
                m.data[j] = self.beta1 * m.data[j] + (1.0 - self.beta1) * gj;
                v.data[j] = self.beta2 * v.data[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m.data[j] / bc1;
                let vhat = v.data[j] / bc2;
                p.data[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub bpr: f64,
    pub pvn: f64,
    pub l2: f64,
    pub val_mrr: f64,
    pub elapsed_s: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStopped,
    MaxEpochs,
    Diverged(String),
}

pub struct TrainOutcome {
    /// Parameters from the best-validation epoch.
    pub model: ModelParams,
    pub best_epoch: usize,
    pub best_val_mrr: f64,
    pub log: Vec<EpochLog>,
    pub stop: StopReason,
}

/// Epochs of shuffled user batches with per-position negatives resampled
/// each epoch; stops when validation MRR fails to improve for `patience`
/// epochs (or at `max_epochs`) and returns the best-validation checkpoint.
pub fn train(
    dataset: &SequenceDataset,
    cfg: &RunConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = ModelParams::init(cfg, dataset.num_items())?;
    let mut adam = Adam::new(&model.set, cfg.lr);

    // users that can form at least one (input, target) pair
    let users: Vec<usize> = (1..=dataset.num_users())
        .filter(|&u| dataset.train_portion(u).len() >= 2)
        .collect();
    if users.is_empty() {
        return Err(CoreError::Train(
            "no user has a train portion of length >= 2".into(),
        ));
    }
    let windows: Vec<Option<TrainingWindow>> = (0..=dataset.num_users())
        .map(|u| {
            if u >= 1 && dataset.train_portion(u).len() >= 2 {
                Some(make_window(dataset.train_portion(u), cfg.n).expect("checked length"))
            } else {
                None
            }
        })
        .collect();
    let interacted: Vec<std::collections::HashSet<u32>> = (0..=dataset.num_users())
        .map(|u| {
            if u >= 1 {
                dataset.interacted(u)
            } else {
                Default::default()
            }
        })
        .collect();

    let mut best_set = model.set.clone();
    let mut best_epoch = 0usize;
    let mut best_val_mrr = f64::NEG_INFINITY;
    let mut since_improve = 0usize;
    let mut log = Vec::new();
    let mut stop = StopReason::MaxEpochs;
    let started = Instant::now();

    for epoch in 1..=cfg.max_epochs {
        let mut order = users.clone();
        let mut shuffle_rng = stream(cfg.seed, &format!("shuffle/{epoch}"));
        order.shuffle(&mut shuffle_rng);
        let mut neg_rng = stream(cfg.seed, &format!("negatives/{epoch}"));
        let mut drop_rng = stream(cfg.seed, &format!("dropout/{epoch}"));

        let mut epoch_terms = (0.0, 0.0, 0.0, 0.0); // total, bpr, pvn, l2
        let mut diverged: Option<String> = None;

        for chunk in order.chunks(cfg.batch_size) {
            let mut batch = Vec::with_capacity(chunk.len());
            for &u in chunk {
                let window = windows[u].clone().expect("trainable user");
                let mut negatives = vec![0u32; window.len()];
                for t in window.valid_positions() {
                    negatives[t] = sample_negative(dataset, &interacted[u], &mut neg_rng)?;
                }
                batch.push(StepInput { window, negatives });
            }
            let mut mode = ForwardMode {
                dropout_rate: cfg.dropout,
                attention_dropout: cfg.attention_dropout,
                rng: Some(&mut drop_rng),
            };
            match step_loss(&model, &batch, cfg.lambda, cfg.beta, &mut mode) {
                Ok((terms, grads)) => {
                    adam.update(&mut model.set, &grads);
                    epoch_terms.0 += terms.total;
                    epoch_terms.1 += terms.bpr;
                    epoch_terms.2 += terms.pvn;
                    epoch_terms.3 += terms.l2;
                }
                Err(CoreError::Numeric(msg)) => {
                    diverged = Some(msg);
                    break;
                }
                Err(e) => return Err(e),
            }
        }

        if let Some(msg) = diverged {
            stop = StopReason::Diverged(msg);
            break;
        }

        let val = evaluate(&model, dataset, EvalSplit::Validation, None)?;
        let val_mrr = val.metrics.mrr;
        let entry = EpochLog {
            epoch,
            train_loss: epoch_terms.0,
            bpr: epoch_terms.1,
            pvn: epoch_terms.2,
            l2: epoch_terms.3,
            val_mrr,
            elapsed_s: started.elapsed().as_secs_f64(),
        };
        on_epoch(&entry);
        log.push(entry);

        // ties keep the most recent checkpoint; patience counts strict
        // improvements only
        if val_mrr >= best_val_mrr {
            if val_mrr > best_val_mrr {
                since_improve = 0;
            } else {
                since_improve += 1;
            }
            best_val_mrr = val_mrr;
            best_epoch = epoch;
            best_set = model.set.clone();
        } else {
            since_improve += 1;
        }
        if since_improve >= cfg.patience.max(1) {
            stop = StopReason::EarlyStopped;
            break;
        }
    }

    model.set = best_set;
    Ok(TrainOutcome {
        model,
        best_epoch,
        best_val_mrr,
        log,
        stop,
    })
}

/// Per-parameter-tensor result of a finite-difference comparison.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_analytic: f64,
    pub worst_fd: f64,
    pub per_param: Vec<(String, f64)>,
}

/// Compares analytic gradients of the full step loss against central finite
/// differences (dropout off). The relative-error denominator is floored at
/// 1e-5: central differences carry ~|loss|*eps/h of cancellation noise
/// (~1e-10 here), so near-zero gradients are compared absolutely at that
/// scale instead of inflating the ratio.
pub fn gradient_check(
    model: &ModelParams,
    batch: &[StepInput],
    lambda: f64,
    beta: f64,
    h: f64,
) -> Result<GradCheckReport> {
    let (_, grads) = step_loss(model, batch, lambda, beta, &mut ForwardMode::eval())?;
    let mut probe = model.clone();
    let mut per_param = Vec::new();
    let mut max_rel = 0.0f64;
    let mut worst = String::new();
    let mut worst_pair = (0.0f64, 0.0f64);

    for (pid, name, tensor) in model.set.iter() {
        let mut param_max = 0.0f64;
        for i in 0..tensor.len() {
            let orig = tensor.data[i];
            probe.set.get_mut(pid).data[i] = orig + h;
            let up = step_loss(&probe, batch, lambda, beta, &mut ForwardMode::eval())?
                .0
                .total;
            probe.set.get_mut(pid).data[i] = orig - h;
            let down = step_loss(&probe, batch, lambda, beta, &mut ForwardMode::eval())?
                .0
                .total;
            probe.set.get_mut(pid).data[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = grads.get(pid).data[i];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-5);
            if rel > param_max {
                param_max = rel;
                if rel > max_rel {
                    worst_pair = (an, fd);
                }
            }
        }
        if param_max > max_rel {
            max_rel = param_max;
            worst = name.to_string();
        }
        per_param.push((name.to_string(), param_max));
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        worst_param: worst,
        worst_analytic: worst_pair.0,
        worst_fd: worst_pair.1,
        per_param,
    })
}
