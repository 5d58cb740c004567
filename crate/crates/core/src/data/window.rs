//! Fixed-length training and inference windows.

use crate::error::{CoreError, Result};

/// A fixed-length, left-padded training window. `targets[t]` is the item
/// following `inputs[t]` in the source sequence wherever `mask[t]` is true.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingWindow {
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    pub mask: Vec<bool>,
}

impl TrainingWindow {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Indices of non-padding positions.
    pub fn valid_positions(&self) -> Vec<usize> {
        self.mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| if m { Some(i) } else { None })
            .collect()
    }

    /// Index of the most recent valid position, if any.
    pub fn last_valid(&self) -> Option<usize> {
        self.mask.iter().rposition(|&m| m)
    }
}

/// Builds the training window from a train-portion sequence: keeps the most
/// recent `min(len, n+1)` items, shifts them into (inputs, targets) pairs and
/// left-pads with 0 so the most recent item always sits at position n-1.
pub fn make_window(seq: &[u32], n: usize) -> Result<TrainingWindow> {
    if n == 0 {
        return Err(CoreError::Data("window length must be >= 1".into()));
    }
    if seq.len() < 2 {
        return Err(CoreError::Data(
            "sequence needs at least 2 items to form (input, target) pairs".into(),
        ));
    }
    let m = seq.len().min(n + 1);
    let slice = &seq[seq.len() - m..];
    let real = m - 1;
    let pad = n - real;
    let mut inputs = vec![0u32; pad];
    inputs.extend_from_slice(&slice[..real]);
    let mut targets = vec![0u32; pad];
    targets.extend_from_slice(&slice[1..]);
    let mut mask = vec![false; pad];
    mask.resize(n, true);
    Ok(TrainingWindow {
        inputs,
        targets,
        mask,
    })
}

/// Builds the inference window for next-item prediction: the most recent
/// `min(len, n)` items, left-padded. Returns (inputs, mask).
pub fn inference_window(seq: &[u32], n: usize) -> Result<(Vec<u32>, Vec<bool>)> {
    if n == 0 {
        return Err(CoreError::Data("window length must be >= 1".into()));
    }
    if seq.is_empty() {
        return Err(CoreError::Data("cannot infer from an empty sequence".into()));
    }
    let m = seq.len().min(n);
    let pad = n - m;
    let mut inputs = vec![0u32; pad];
    inputs.extend_from_slice(&seq[seq.len() - m..]);
    let mut mask = vec![false; pad];
    mask.resize(n, true);
    Ok((inputs, mask))
}
