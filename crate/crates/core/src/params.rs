//! Flat registry of named trainable tensors.
//!
//! All model variants store their weights here; the training loop, the Adam
//! optimizer, the checkpoint writer, and the finite-difference gradient
//! checker all iterate the registry without knowing the architecture.

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: &str, t: Tensor) -> ParamId {
        debug_assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name {name}"
        );
        self.names.push(name.to_string());
        self.tensors.push(t);
        ParamId(self.names.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(self.tensors.iter())
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Sum of squares over every tensor, the `||Theta||^2` regularizer term.
    pub fn sum_sq(&self) -> f64 {
        self.tensors.iter().map(|t| t.sum_sq()).sum()
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient accumulators mirroring a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct GradStore {
    grads: Vec<Tensor>,
}

impl GradStore {
    pub fn zeros(set: &ParamSet) -> Self {
        GradStore {
            grads: set
                .iter()
                .map(|(_, _, t)| Tensor::zeros(&t.shape))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub fn add_rows(&mut self, id: ParamId, row_ids: &[usize], rows: &Tensor) {
        let g = &mut self.grads[id.0];
        let c = g.cols();
        debug_assert_eq!(rows.cols(), c);
        for (r, &rid) in row_ids.iter().enumerate() {
            let src = rows.row(r);
            let dst = g.row_mut(rid);
            for (d, s) in dst.iter_mut().zip(src.iter()) {
                *d += s;
            }
        }
    }

    pub fn add(&mut self, id: ParamId, delta: &Tensor) {
        self.grads[id.0].add_assign(delta);
    }

    pub fn is_finite(&self) -> bool {
        self.grads
            .iter()
            .all(|g| g.data.iter().all(|v| v.is_finite()))
    }
}
