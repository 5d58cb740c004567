//! CSV export of attention weights and item embeddings for external
//! plotting.

use crate::attention::{attn_norm_for, baseline_encoder, stosa_encoder, ForwardMode};
use crate::data::inference_window;
use crate::data::{SequenceDataset, TrainingWindow};
use crate::embeddings::lookup_into_graph;
use crate::error::{CoreError, Result};
use crate::graph::Graph;
use crate::kernels::elu_plus_one;
use crate::model::{Arch, ModelParams};
use crate::tensor::Tensor;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

fn matrix_csv(m: &Tensor) -> String {
    let mut out = String::new();
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|v| format!("{v}")).collect();
        let _ = writeln!(out, "{}", row.join(","));
    }
    out
}

/// Normalized attention weights (dropout off) for one user's history, one
/// n x n CSV per (layer, head). Returns the written paths.
pub fn export_attention(
    model: &ModelParams,
    dataset: &SequenceDataset,
    user: &str,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let u = dataset
        .user_id(user)
        .ok_or_else(|| CoreError::Eval(format!("unknown user `{user}`")))?;
    let (inputs, mask) = inference_window(dataset.sequence(u), model.config.n)?;
    let window = TrainingWindow {
        targets: vec![0; inputs.len()],
        inputs,
        mask,
    };
    let mut g = Graph::new(&model.set);
    let mut mode = ForwardMode::eval();
    let attn: Vec<Vec<Tensor>> = match &model.arch {
        Arch::Stosa(arch) => {
            let (mean, cov) = lookup_into_graph(&mut g, &arch.tables, &window)?;
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
            enc.layers
                .iter()
                .map(|l| l.attention.iter().map(|&w| g.value(w).clone()).collect())
                .collect()
        }
        Arch::Baseline(arch) => {
            let ids: Vec<usize> = window.inputs.iter().map(|&v| v as usize).collect();
            let item = g.gather(arch.item_emb, &ids)?;
            let pos = g.param(arch.pos_emb);
            let x = g.add(item, pos);
            let enc =
                baseline_encoder(&mut g, arch, model.config.heads, x, &window.mask, &mut mode)?;
            enc.layers
                .iter()
                .map(|l| l.attention.iter().map(|&w| g.value(w).clone()).collect())
                .collect()
        }
    };
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for (l, heads) in attn.iter().enumerate() {
        for (h, weights) in heads.iter().enumerate() {
            let path = out_dir.join(format!("attention_layer{l}_head{h}.csv"));
            std::fs::write(&path, matrix_csv(weights))?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Item embedding dump: one row per item id. STOSA rows carry the mean
/// entries then the activated (strictly positive) covariance entries; the
/// baseline carries its point embedding.
pub fn export_embeddings(model: &ModelParams, out_path: &Path) -> Result<PathBuf> {
    let mut out = String::new();
    match &model.arch {
        Arch::Stosa(arch) => {
            let dim = arch.tables.dim;
            let mut header = vec!["item".to_string()];
            header.extend((0..dim).map(|j| format!("mean{j}")));
            header.extend((0..dim).map(|j| format!("cov{j}")));
            let _ = writeln!(out, "{}", header.join(","));
            let mean = model.set.get(arch.tables.item_mean);
            let cov_raw = model.set.get(arch.tables.item_cov_raw);
            for item in 1..=model.vocab {
                let mut cells = vec![item.to_string()];
                cells.extend(mean.row(item).iter().map(|v| format!("{v}")));
                cells.extend(
                    cov_raw
                        .row(item)
                        .iter()
                        .map(|&v| format!("{}", elu_plus_one(v))),
                );
                let _ = writeln!(out, "{}", cells.join(","));
            }
        }
        Arch::Baseline(arch) => {
            let emb = model.set.get(arch.item_emb);
            let dim = emb.cols();
            let mut header = vec!["item".to_string()];
            header.extend((0..dim).map(|j| format!("e{j}")));
            let _ = writeln!(out, "{}", header.join(","));
            for item in 1..=model.vocab {
                let mut cells = vec![item.to_string()];
                cells.extend(emb.row(item).iter().map(|v| format!("{v}")));
                let _ = writeln!(out, "{}", cells.join(","));
            }
        }
    }
    if let Some(parent) = out_path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(out_path, out)?;
    Ok(out_path.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{RunConfig, Variant};

    fn toy() -> (ModelParams, SequenceDataset) {
        let cfg = RunConfig {
            variant: Variant::Stosa,
            d: 8,
            n: 6,
            layers: 2,
            heads: 2,
            dropout: 0.0,
            allow_nonstandard: true,
            ..Default::default()
        };
        let dataset = SequenceDataset::from_sequences(
            vec!["alice".into()],
            (1..=7).map(|i| format!("i{i}")).collect(),
            vec![vec![1, 3, 5, 2, 4]],
        )
        .unwrap();
        let model = ModelParams::init(&cfg, 7).unwrap();
        (model, dataset)
    }

    #[test]
    fn attention_csv_is_lower_triangular_and_row_stochastic() {
        let (model, dataset) = toy();
        let dir = tempfile::tempdir().unwrap();
        let files = export_attention(&model, &dataset, "alice", dir.path()).unwrap();
        assert_eq!(files.len(), 4); // 2 layers x 2 heads
        for f in files {
            let text = std::fs::read_to_string(f).unwrap();
            let rows: Vec<Vec<f64>> = text
                .lines()
                .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
                .collect();
            let n = rows.len();
            assert_eq!(n, model.config.n);
            for (t, row) in rows.iter().enumerate() {
                for (k, &v) in row.iter().enumerate() {
                    if k > t {
                        assert_eq!(v, 0.0, "upper triangle must be zero");
                    }
                }
                let sum: f64 = row.iter().sum();
                // first position is padding (5 real items in a window of 6)
                if t == 0 {
                    assert_eq!(sum, 0.0);
                } else {
                    assert!((sum - 1.0).abs() < 1e-9, "row {t} sums to {sum}");
                }
            }
        }
    }

    #[test]
    fn embeddings_csv_has_positive_covariances() {
        let (model, _) = toy();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.csv");
        export_embeddings(&model, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        let header = lines.next().unwrap();
        let dim = 4; // d/2
        assert_eq!(header.split(',').count(), 1 + 2 * dim);
        let mut count = 0;
        for line in lines {
            let cells: Vec<&str> = line.split(',').collect();
            for cov_cell in &cells[1 + dim..] {
                let v: f64 = cov_cell.parse().unwrap();
                assert!(v > 0.0);
            }
            count += 1;
        }
        assert_eq!(count, model.vocab);
    }
}
