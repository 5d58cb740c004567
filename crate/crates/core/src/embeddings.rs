//! Stochastic embedding tables and sequence lookup.
//!
//! Items and positions each carry a mean table and a raw covariance table.
//! Raw covariances pass through ELU(x)+1 after the item+position sum, so the
//! Gaussians entering the encoder always have strictly positive diagonal
//! covariance. Row 0 of the item tables is the padding row; it is never
//! zeroed, just masked out of attention and loss downstream.

use crate::data::TrainingWindow;
use crate::error::{CoreError, Result};
use crate::graph::{Graph, VarId};
use crate::kernels::elu_plus_one;
use crate::params::{ParamId, ParamSet};
use crate::tensor::Tensor;
use rand::Rng;

pub const INIT_STD: f64 = 0.02;

/// Handles for the four stochastic tables inside a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct StochasticTables {
    pub item_mean: ParamId,
    pub item_cov_raw: ParamId,
    pub pos_mean: ParamId,
    pub pos_cov_raw: ParamId,
    /// Number of real items; tables have `vocab + 1` rows (row 0 = padding).
    pub vocab: usize,
    /// Window length n; positional tables have n rows.
    pub max_len: usize,
    /// Per-path width d/2.
    pub dim: usize,
}

impl StochasticTables {
    pub fn init<R: Rng>(
        set: &mut ParamSet,
        vocab: usize,
        max_len: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let item_mean = set.add("item_mean", Tensor::randn(&[vocab + 1, dim], INIT_STD, rng));
        let item_cov_raw = set.add(
            "item_cov_raw",
            Tensor::randn(&[vocab + 1, dim], INIT_STD, rng),
        );
        let pos_mean = set.add("pos_mean", Tensor::randn(&[max_len, dim], INIT_STD, rng));
        let pos_cov_raw = set.add(
            "pos_cov_raw",
            Tensor::randn(&[max_len, dim], INIT_STD, rng),
        );
        StochasticTables {
            item_mean,
            item_cov_raw,
            pos_mean,
            pos_cov_raw,
            vocab,
            max_len,
            dim,
        }
    }

    /// Reattach handles to tables already present in `set` (checkpoint load).
    pub fn from_set(set: &ParamSet, vocab: usize, max_len: usize, dim: usize) -> Result<Self> {
        let find = |name: &str| {
            set.by_name(name)
                .ok_or_else(|| CoreError::Checkpoint(format!("missing table `{name}`")))
        };
        Ok(StochasticTables {
            item_mean: find("item_mean")?,
            item_cov_raw: find("item_cov_raw")?,
            pos_mean: find("pos_mean")?,
            pos_cov_raw: find("pos_cov_raw")?,
            vocab,
            max_len,
            dim,
        })
    }
}

/// Mean/covariance pair for one encoded sequence; covariance entries are
/// post-activation and strictly positive.
#[derive(Debug, Clone)]
pub struct GaussianSeq {
    pub mean: Tensor,
    pub cov: Tensor,
    pub mask: Vec<bool>,
}

/// A batch of [`GaussianSeq`] with agreeing shapes.
#[derive(Debug, Clone)]
pub struct GaussianBatch {
    pub seqs: Vec<GaussianSeq>,
}

impl GaussianBatch {
    pub fn batch_size(&self) -> usize {
        self.seqs.len()
    }

    pub fn seq_len(&self) -> usize {
        self.seqs.first().map_or(0, |s| s.mean.rows())
    }

    pub fn dim(&self) -> usize {
        self.seqs.first().map_or(0, |s| s.mean.cols())
    }

    /// Checks the shape agreement and positivity invariants.
    pub fn validate(&self) -> Result<()> {
        let (n, d) = (self.seq_len(), self.dim());
        for (b, s) in self.seqs.iter().enumerate() {
            if s.mean.shape != [n, d] || s.cov.shape != [n, d] || s.mask.len() != n {
                return Err(CoreError::Shape(format!("sequence {b} disagrees in shape")));
            }
            for (t, &m) in s.mask.iter().enumerate() {
                if m && s.cov.row(t).iter().any(|&c| c <= 0.0) {
                    return Err(CoreError::Numeric(format!(
                        "nonpositive covariance at sequence {b}, position {t}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// ELU(x)+1 over a tensor. Surfaces non-finite inputs as an error instead of
/// letting NaNs propagate.
pub fn activate_covariance(raw: &Tensor) -> Result<Tensor> {
    if let Some(v) = raw.data.iter().find(|v| !v.is_finite()) {
        return Err(CoreError::Numeric(format!(
            "non-finite raw covariance entry {v}"
        )));
    }
    Ok(raw.map(elu_plus_one))
}

/// Graph nodes for one window's mean/covariance sequence embeddings:
/// `mean[t] = item_mean[s_t] + pos_mean[t]`,
/// `cov[t] = ELU(item_cov_raw[s_t] + pos_cov_raw[t]) + 1`.
pub fn lookup_into_graph(
    g: &mut Graph,
    tables: &StochasticTables,
    window: &TrainingWindow,
) -> Result<(VarId, VarId)> {
    let ids: Vec<usize> = window.inputs.iter().map(|&v| v as usize).collect();
    let item_m = g.gather(tables.item_mean, &ids)?;
    let pos_m = g.param(tables.pos_mean);
    let mean = g.add(item_m, pos_m);
    let item_c = g.gather(tables.item_cov_raw, &ids)?;
    let pos_c = g.param(tables.pos_cov_raw);
    let cov_raw = g.add(item_c, pos_c);
    let cov = g.elu_plus_one(cov_raw);
    Ok((mean, cov))
}

/// Concrete embedding lookup for a batch of windows.
pub fn lookup_sequence(
    set: &ParamSet,
    tables: &StochasticTables,
    windows: &[TrainingWindow],
) -> Result<GaussianBatch> {
    let mut seqs = Vec::with_capacity(windows.len());
    for w in windows {
        let mut g = Graph::new(set);
        let (mean, cov) = lookup_into_graph(&mut g, tables, w)?;
        seqs.push(GaussianSeq {
            mean: g.value(mean).clone(),
            cov: g.value(cov).clone(),
            mask: w.mask.clone(),
        });
    }
    let batch = GaussianBatch { seqs };
    batch.validate()?;
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn window(inputs: Vec<u32>) -> TrainingWindow {
        let mask = inputs.iter().map(|&v| v != 0).collect();
        let targets = vec![0; inputs.len()];
        TrainingWindow {
            inputs,
            targets,
            mask,
        }
    }

    #[test]
    fn activate_known_values() {
        let raw = Tensor::from_vec(&[1, 3], vec![0.0, 2.5, -3.0]);
        let out = activate_covariance(&raw).unwrap();
        assert_eq!(out.data[0], 1.0);
        assert_eq!(out.data[1], 3.5);
        assert!((out.data[2] - (-3.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn activate_rejects_non_finite() {
        let raw = Tensor::from_vec(&[1, 2], vec![0.0, f64::NAN]);
        assert!(matches!(
            activate_covariance(&raw),
            Err(CoreError::Numeric(_))
        ));
    }

    #[test]
    fn zero_tables_give_zero_mean_unit_cov() {
        let mut set = ParamSet::new();
        let item_mean = set.add("item_mean", Tensor::zeros(&[4, 3]));
        let item_cov_raw = set.add("item_cov_raw", Tensor::zeros(&[4, 3]));
        let pos_mean = set.add("pos_mean", Tensor::zeros(&[5, 3]));
        let pos_cov_raw = set.add("pos_cov_raw", Tensor::zeros(&[5, 3]));
        let tables = StochasticTables {
            item_mean,
            item_cov_raw,
            pos_mean,
            pos_cov_raw,
            vocab: 3,
            max_len: 5,
            dim: 3,
        };
        let batch =
            lookup_sequence(&set, &tables, &[window(vec![0, 0, 1, 2, 3])]).unwrap();
        let s = &batch.seqs[0];
        assert!(s.mean.data.iter().all(|&v| v == 0.0));
        assert!(s.cov.data.iter().all(|&v| v == 1.0));
        assert_eq!(s.mask, vec![false, false, true, true, true]);
    }

    #[test]
    fn all_padding_window_has_all_false_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut set = ParamSet::new();
        let tables = StochasticTables::init(&mut set, 6, 4, 2, &mut rng);
        let batch = lookup_sequence(&set, &tables, &[window(vec![0, 0, 0, 0])]).unwrap();
        assert!(batch.seqs[0].mask.iter().all(|&m| !m));
    }

    #[test]
    fn single_item_mean_is_item_plus_positional_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut set = ParamSet::new();
        let tables = StochasticTables::init(&mut set, 6, 4, 3, &mut rng);
        let batch = lookup_sequence(&set, &tables, &[window(vec![0, 0, 0, 5])]).unwrap();
        let s = &batch.seqs[0];
        assert_eq!(s.mask.iter().filter(|&&m| m).count(), 1);
        // independent recomputation straight from the tables
        let im = set.get(tables.item_mean).row(5).to_vec();
        let pm = set.get(tables.pos_mean).row(3).to_vec();
        for j in 0..3 {
            assert!((s.mean.row(3)[j] - (im[j] + pm[j])).abs() < 1e-15);
        }
        let ic = set.get(tables.item_cov_raw).row(5).to_vec();
        let pc = set.get(tables.pos_cov_raw).row(3).to_vec();
        for j in 0..3 {
            let expect = elu_plus_one(ic[j] + pc[j]);
            assert!((s.cov.row(3)[j] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn out_of_range_id_is_lookup_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut set = ParamSet::new();
        let tables = StochasticTables::init(&mut set, 3, 2, 2, &mut rng);
        let res = lookup_sequence(&set, &tables, &[window(vec![0, 9])]);
        assert!(matches!(res, Err(CoreError::Lookup(_))));
    }

    #[test]
    fn lookup_independent_of_batch_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut set = ParamSet::new();
        let tables = StochasticTables::init(&mut set, 8, 4, 3, &mut rng);
        let w = window(vec![0, 2, 5, 1]);
        let alone = lookup_sequence(&set, &tables, std::slice::from_ref(&w)).unwrap();
        let crowded =
            lookup_sequence(&set, &tables, &[window(vec![3, 3, 3, 3]), w]).unwrap();
        assert_eq!(alone.seqs[0].mean, crowded.seqs[1].mean);
        assert_eq!(alone.seqs[0].cov, crowded.seqs[1].cov);
    }

    proptest! {
        #[test]
        fn activation_always_positive(raw in proptest::collection::vec(-1e6f64..1e6, 1..64)) {
            let t = Tensor::from_vec(&[raw.len()], raw);
            let out = activate_covariance(&t).unwrap();
            prop_assert!(out.data.iter().all(|&v| v > 0.0));
        }

        #[test]
        fn activation_monotone(a in -50f64..50.0, b in -50f64..50.0) {
            let lo = a.min(b);
            let hi = a.max(b);
            prop_assert!(elu_plus_one(lo) <= elu_plus_one(hi));
        }
    }

    // Gradient of the activation against central finite differences.
    #[test]
    fn activation_gradient_matches_finite_differences() {
        let h = 1e-5;
        for &x in &[-4.0, -1.0, -0.3, 0.2, 1.7, 8.0] {
            let fd = (elu_plus_one(x + h) - elu_plus_one(x - h)) / (2.0 * h);
            let analytic = if x > 0.0 { 1.0 } else { elu_plus_one(x) };
            let rel = (fd - analytic).abs() / fd.abs().max(1e-9);
            assert!(rel < 1e-4, "x={x}: fd {fd} vs analytic {analytic}");
        }
    }
}
