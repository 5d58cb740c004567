//! Model assembly for both encoder variants, next-item scoring and top-N
//! recommendation.
//!
//! Scores follow a unified ascending contract: smaller is always better.
//! STOSA scores are squared W2 distances from the encoded state to each
//! item's input-table Gaussian (shared embeddings); the dot-product baseline
//! negates its dot products so evaluation code is variant-agnostic.

use crate::attention::{baseline_encoder, stosa_encoder, attn_norm_for, ForwardMode};
use crate::config::{RunConfig, Variant};
use crate::data::{inference_window, TrainingWindow};
use crate::embeddings::{lookup_into_graph, StochasticTables, INIT_STD};
use crate::error::{CoreError, Result};
use crate::graph::Graph;
use crate::kernels::elu_plus_one;
use crate::params::{ParamId, ParamSet};
use crate::rng::stream;
use crate::tensor::{dot, Tensor};
use rand::Rng;

#[derive(Debug, Clone)]
pub struct FfnParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone)]
pub struct LnParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct StosaLayer {
    pub wq_mean: ParamId,
    pub wk_mean: ParamId,
    pub wv_mean: ParamId,
    pub wq_cov: ParamId,
    pub wk_cov: ParamId,
    pub wv_cov: ParamId,
    pub ffn_mean: FfnParams,
    pub ffn_cov: FfnParams,
    pub ln_mean: LnParams,
    pub ln_cov: LnParams,
}

#[derive(Debug, Clone)]
pub struct StosaArch {
    pub tables: StochasticTables,
    pub layers: Vec<StosaLayer>,
}

#[derive(Debug, Clone)]
pub struct BaselineLayer {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub ffn: FfnParams,
    pub ln: LnParams,
}

#[derive(Debug, Clone)]
pub struct BaselineArch {
    pub item_emb: ParamId,
    pub pos_emb: ParamId,
    pub layers: Vec<BaselineLayer>,
}

#[derive(Debug, Clone)]
pub enum Arch {
    Stosa(StosaArch),
    Baseline(BaselineArch),
}

/// All trainable state plus the configuration that shaped it.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: RunConfig,
    pub vocab: usize,
    pub set: ParamSet,
    pub arch: Arch,
}

fn add_ffn<R: Rng>(set: &mut ParamSet, prefix: &str, dim: usize, rng: &mut R) -> FfnParams {
    FfnParams {
        w1: set.add(&format!("{prefix}.w1"), Tensor::randn(&[dim, dim], INIT_STD, rng)),
        b1: set.add(&format!("{prefix}.b1"), Tensor::zeros(&[dim])),
        w2: set.add(&format!("{prefix}.w2"), Tensor::randn(&[dim, dim], INIT_STD, rng)),
        b2: set.add(&format!("{prefix}.b2"), Tensor::zeros(&[dim])),
    }
}

fn add_ln(set: &mut ParamSet, prefix: &str, dim: usize) -> LnParams {
    LnParams {
        gain: set.add(&format!("{prefix}.gain"), Tensor::filled(&[dim], 1.0)),
        bias: set.add(&format!("{prefix}.bias"), Tensor::zeros(&[dim])),
    }
}

fn ffn_from_set(set: &ParamSet, prefix: &str) -> Result<FfnParams> {
    let find = |suffix: &str| {
        set.by_name(&format!("{prefix}.{suffix}"))
            .ok_or_else(|| CoreError::Checkpoint(format!("missing `{prefix}.{suffix}`")))
    };
    Ok(FfnParams {
        w1: find("w1")?,
        b1: find("b1")?,
        w2: find("w2")?,
        b2: find("b2")?,
    })
}

fn ln_from_set(set: &ParamSet, prefix: &str) -> Result<LnParams> {
    let find = |suffix: &str| {
        set.by_name(&format!("{prefix}.{suffix}"))
            .ok_or_else(|| CoreError::Checkpoint(format!("missing `{prefix}.{suffix}`")))
    };
    Ok(LnParams {
        gain: find("gain")?,
        bias: find("bias")?,
    })
}

impl ModelParams {
    /// Fresh model with tables and weights drawn from Normal(0, 0.02^2);
    /// LayerNorm gains start at one, biases at zero.
    pub fn init(config: &RunConfig, vocab: usize) -> Result<ModelParams> {
        config.validate()?;
        if vocab == 0 {
            return Err(CoreError::Data("empty vocabulary".into()));
        }
        let mut rng = stream(config.seed, "init");
        let mut set = ParamSet::new();
        let dim = config.path_dim();
        let arch = match config.variant {
            Variant::Stosa => {
                let tables = StochasticTables::init(&mut set, vocab, config.n, dim, &mut rng);
                let mut layers = Vec::with_capacity(config.layers);
                for l in 0..config.layers {
                    let p = format!("layer{l}");
                    layers.push(StosaLayer {
                        wq_mean: set.add(&format!("{p}.wq_mean"), Tensor::randn(&[dim, dim], INIT_STD, &mut rng)),
                        wk_mean: set.add(&format!("{p}.wk_mean"), Tensor::randn(&[dim, dim], INIT_STD, &mut rng)),
                        wv_mean: set.add(&format!("{p}.wv_mean"), Tensor::randn(&[dim, dim], INIT_STD, &mut rng)),
                        wq_cov: set.add(&format!("{p}.wq_cov"), Tensor::randn(&[dim, dim], INIT_STD, &mut rng)),
                        wk_cov: set.add(&format!("{p}.wk_cov"), Tensor::randn(&[dim, dim], INIT_STD, &mut rng)),
                        wv_cov: set.add(&format!("{p}.wv_cov"), Tensor::randn(&[dim, dim], INIT_STD, &mut rng)),
                        ffn_mean: add_ffn(&mut set, &format!("{p}.ffn_mean"), dim, &mut rng),
                        ffn_cov: add_ffn(&mut set, &format!("{p}.ffn_cov"), dim, &mut rng),
                        ln_mean: add_ln(&mut set, &format!("{p}.ln_mean"), dim),
                        ln_cov: add_ln(&mut set, &format!("{p}.ln_cov"), dim),
                    });
                }
                Arch::Stosa(StosaArch { tables, layers })
            }
            Variant::DotBaseline => {
                let item_emb = set.add("item_emb", Tensor::randn(&[vocab + 1, dim], INIT_STD, &mut rng));
                let pos_emb = set.add("pos_emb", Tensor::randn(&[config.n, dim], INIT_STD, &mut rng));
                let mut layers = Vec::with_capacity(config.layers);
                for l in 0..config.layers {
                    let p = format!("layer{l}");
                    layers.push(BaselineLayer {
                        wq: set.add(&format!("{p}.wq"), Tensor::randn(&[dim, dim], INIT_STD, &mut rng)),
                        wk: set.add(&format!("{p}.wk"), Tensor::randn(&[dim, dim], INIT_STD, &mut rng)),
                        wv: set.add(&format!("{p}.wv"), Tensor::randn(&[dim, dim], INIT_STD, &mut rng)),
                        ffn: add_ffn(&mut set, &format!("{p}.ffn"), dim, &mut rng),
                        ln: add_ln(&mut set, &format!("{p}.ln"), dim),
                    });
                }
                Arch::Baseline(BaselineArch {
                    item_emb,
                    pos_emb,
                    layers,
                })
            }
        };
        Ok(ModelParams {
            config: config.clone(),
            vocab,
            set,
            arch,
        })
    }

    /// Reattaches architecture handles to a loaded [`ParamSet`].
    pub fn from_set(config: RunConfig, vocab: usize, set: ParamSet) -> Result<ModelParams> {
        config.validate()?;
        let dim = config.path_dim();
        let arch = match config.variant {
            Variant::Stosa => {
                let tables = StochasticTables::from_set(&set, vocab, config.n, dim)?;
                let mut layers = Vec::with_capacity(config.layers);
                for l in 0..config.layers {
                    let p = format!("layer{l}");
                    let find = |suffix: &str| {
                        set.by_name(&format!("{p}.{suffix}"))
                            .ok_or_else(|| CoreError::Checkpoint(format!("missing `{p}.{suffix}`")))
                    };
                    layers.push(StosaLayer {
                        wq_mean: find("wq_mean")?,
                        wk_mean: find("wk_mean")?,
                        wv_mean: find("wv_mean")?,
                        wq_cov: find("wq_cov")?,
                        wk_cov: find("wk_cov")?,
                        wv_cov: find("wv_cov")?,
                        ffn_mean: ffn_from_set(&set, &format!("{p}.ffn_mean"))?,
                        ffn_cov: ffn_from_set(&set, &format!("{p}.ffn_cov"))?,
                        ln_mean: ln_from_set(&set, &format!("{p}.ln_mean"))?,
                        ln_cov: ln_from_set(&set, &format!("{p}.ln_cov"))?,
                    });
                }
                Arch::Stosa(StosaArch { tables, layers })
            }
            Variant::DotBaseline => {
                let find = |name: &str| {
                    set.by_name(name)
                        .ok_or_else(|| CoreError::Checkpoint(format!("missing `{name}`")))
                };
                let item_emb = find("item_emb")?;
                let pos_emb = find("pos_emb")?;
                let mut layers = Vec::with_capacity(config.layers);
                for l in 0..config.layers {
                    let p = format!("layer{l}");
                    let find = |suffix: &str| {
                        set.by_name(&format!("{p}.{suffix}"))
                            .ok_or_else(|| CoreError::Checkpoint(format!("missing `{p}.{suffix}`")))
                    };
                    layers.push(BaselineLayer {
                        wq: find("wq")?,
                        wk: find("wk")?,
                        wv: find("wv")?,
                        ffn: ffn_from_set(&set, &format!("{p}.ffn"))?,
                        ln: ln_from_set(&set, &format!("{p}.ln"))?,
                    });
                }
                Arch::Baseline(BaselineArch {
                    item_emb,
                    pos_emb,
                    layers,
                })
            }
        };
        let model = ModelParams {
            config,
            vocab,
            set,
            arch,
        };
        let expected = expected_param_count(&model.config, vocab);
        if model.set.scalar_count() != expected {
            return Err(CoreError::Checkpoint(format!(
                "parameter count {} does not match the configured architecture ({expected})",
                model.set.scalar_count()
            )));
        }
        Ok(model)
    }

    pub fn param_count(&self) -> usize {
        self.set.scalar_count()
    }
}

/// Closed-form scalar parameter count for a configuration.
pub fn expected_param_count(config: &RunConfig, vocab: usize) -> usize {
    let dim = config.path_dim();
    match config.variant {
        Variant::Stosa => {
            let tables = 2 * (vocab + 1) * dim + 2 * config.n * dim;
            // 6 projections + two FFNs (2 d^2 + 2 d each) + two LayerNorms
            let per_layer = 6 * dim * dim + 2 * (2 * dim * dim + 2 * dim) + 2 * (2 * dim);
            tables + config.layers * per_layer
        }
        Variant::DotBaseline => {
            let tables = (vocab + 1) * dim + config.n * dim;
            let per_layer = 3 * dim * dim + (2 * dim * dim + 2 * dim) + 2 * dim;
            tables + config.layers * per_layer
        }
    }
}

/// Encoded final state of a context sequence, ready for scoring.
#[derive(Debug, Clone)]
pub enum EncodedState {
    Stosa { mean: Vec<f64>, cov: Vec<f64> },
    Baseline { state: Vec<f64> },
}

/// Runs the encoder (dropout off) over the most recent `n` context items and
/// returns the state at the last valid position.
pub fn encode_context(model: &ModelParams, context: &[u32]) -> Result<EncodedState> {
    let (inputs, mask) = inference_window(context, model.config.n)?;
    let window = TrainingWindow {
        targets: vec![0; inputs.len()],
        inputs,
        mask,
    };
    encode_window(model, &window)
}

/// Same as [`encode_context`] for an already-built window.
pub fn encode_window(model: &ModelParams, window: &TrainingWindow) -> Result<EncodedState> {
    let last = window
        .last_valid()
        .ok_or_else(|| CoreError::Eval("window has no valid positions".into()))?;
    let mut g = Graph::new(&model.set);
    let mut mode = ForwardMode::eval();
    match &model.arch {
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
                &mut mode,
            )?;
            Ok(EncodedState::Stosa {
                mean: g.value(enc.mean).row(last).to_vec(),
                cov: g.value(enc.cov).row(last).to_vec(),
            })
        }
        Arch::Baseline(arch) => {
            let ids: Vec<usize> = window.inputs.iter().map(|&v| v as usize).collect();
            let item = g.gather(arch.item_emb, &ids)?;
            let pos = g.param(arch.pos_emb);
            let x = g.add(item, pos);
            let enc = baseline_encoder(&mut g, arch, model.config.heads, x, &window.mask, &mut mode)?;
            Ok(EncodedState::Baseline {
                state: g.value(enc.states).row(last).to_vec(),
            })
        }
    }
}

/// Ascending-order scores over the vocabulary; index 0 (padding) is +inf.
#[derive(Debug, Clone)]
pub struct ScoreVector {
    scores: Vec<f64>,
}

impl ScoreVector {
    pub fn new(scores_by_item: Vec<f64>) -> ScoreVector {
        ScoreVector {
            scores: scores_by_item,
        }
    }

    pub fn get(&self, item: u32) -> f64 {
        self.scores[item as usize]
    }

    /// Number of real items.
    pub fn num_items(&self) -> usize {
        self.scores.len() - 1
    }

    pub fn iter_items(&self) -> impl Iterator<Item = (u32, f64)> + '_ {
        self.scores
            .iter()
            .enumerate()
            .skip(1)
            .map(|(i, &s)| (i as u32, s))
    }
}

/// Scores every item against an encoded state using the input embedding
/// tables (shared-embedding strategy). Expanded-norm form; matches a scalar
/// per-item distance loop to float round-off.
pub fn score_all_items(model: &ModelParams, state: &EncodedState) -> Result<ScoreVector> {
    let vocab = model.vocab;
    let mut scores = vec![f64::INFINITY; vocab + 1];
    match (state, &model.arch) {
        (EncodedState::Stosa { mean, cov }, Arch::Stosa(arch)) => {
            if cov.iter().any(|&c| c <= 0.0) {
                return Err(CoreError::Numeric("state covariance not positive".into()));
            }
            let item_mean = model.set.get(arch.tables.item_mean);
            let item_cov_raw = model.set.get(arch.tables.item_cov_raw);
            let state_mean_norm: f64 = mean.iter().map(|v| v * v).sum();
            let state_cov_sum: f64 = cov.iter().sum();
            let state_sqrt: Vec<f64> = cov.iter().map(|&v| v.sqrt()).collect();
            for j in 1..=vocab {
                let mj = item_mean.row(j);
                let cj: Vec<f64> = item_cov_raw.row(j).iter().map(|&v| elu_plus_one(v)).collect();
                let mj_norm: f64 = mj.iter().map(|v| v * v).sum();
                let cj_sum: f64 = cj.iter().sum();
                let cross_m = dot(mean, mj);
                let cross_s: f64 = state_sqrt
                    .iter()
                    .zip(cj.iter())
                    .map(|(a, b)| a * b.sqrt())
                    .sum();
                let d = state_mean_norm + mj_norm - 2.0 * cross_m + state_cov_sum + cj_sum
                    - 2.0 * cross_s;
                scores[j] = d.max(0.0);
            }
        }
        (EncodedState::Baseline { state }, Arch::Baseline(arch)) => {
            let item_emb = model.set.get(arch.item_emb);
            for j in 1..=vocab {
                scores[j] = -dot(state, item_emb.row(j));
            }
        }
        _ => {
            return Err(CoreError::Eval(
                "encoded state does not match the model variant".into(),
            ))
        }
    }
    Ok(ScoreVector::new(scores))
}

/// Full prediction path: encode the context's most recent items, then score
/// the whole vocabulary in ascending-is-better order.
pub fn predict_scores(model: &ModelParams, context: &[u32]) -> Result<ScoreVector> {
    let state = encode_context(model, context)?;
    score_all_items(model, &state)
}

/// The N best items in ascending score order, excluding `exclude`;
/// equal scores break toward the smaller item id.
pub fn top_n(
    scores: &ScoreVector,
    n: usize,
    exclude: &std::collections::HashSet<u32>,
) -> Vec<(u32, f64)> {
    let mut items: Vec<(u32, f64)> = scores
        .iter_items()
        .filter(|(id, _)| !exclude.contains(id))
        .collect();
    items.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    items.truncate(n);
    items
}
