//! Sequential recommendation with stochastic item embeddings.
//!
//! Items are diagonal-covariance Gaussians rather than points; a causal
//! self-attention encoder weights history by negative squared 2-Wasserstein
//! distance and aggregates Gaussians linearly (squared weights on the
//! covariance path). Training minimizes a BPR ranking loss with a hinge
//! regularizer that keeps positive-negative item distances above the
//! prediction distance. A scaled dot-product encoder over point embeddings
//! is included as the comparison baseline, and a full-ranking evaluation
//! harness reports Recall@N, NDCG@N and MRR with bucketed breakdowns.
//!
//! Everything runs at f64 on a small reverse-mode tape, so the training and
//! gradient-verification paths share the same numerics.

#![allow(clippy::needless_range_loop)]

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod embeddings;
pub mod error;
pub mod evaluation;
pub mod export;
pub mod graph;
pub mod kernels;
pub mod model;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod training;

pub use attention::{pvn_regularizer, w2_distance_matrix, w2_squared_diag};
pub use config::{NormMode, RunConfig, Variant};
pub use data::{
    build_sequences, bucketize, inference_window, k_core_filter, k_core_filter_iterative,
    make_window, parse_interactions, sample_negative, BucketAxis, BucketSpec, Interaction,
    SequenceDataset, TrainingWindow,
};
pub use embeddings::{activate_covariance, GaussianBatch, GaussianSeq, StochasticTables};
pub use error::{CoreError, Result};
pub use evaluation::{
    compare_reports, compute_metrics, evaluate, rank_of, EvalSplit, MetricSet, RankingReport,
};
pub use model::{
    encode_context, expected_param_count, predict_scores, score_all_items, top_n, Arch,
    EncodedState, ModelParams, ScoreVector,
};
pub use params::{GradStore, ParamId, ParamSet};
pub use tensor::Tensor;
pub use training::{
    gradient_check, step_loss, train, Adam, EpochLog, LossTerms, StepInput, StopReason,
    TrainOutcome,
};
