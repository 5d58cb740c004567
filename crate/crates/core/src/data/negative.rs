//! Uniform negative sampling outside a user's interaction set.

use super::sequences::SequenceDataset;
use crate::error::{CoreError, Result};
use rand::Rng;
use std::collections::HashSet;

/// Draws an item uniformly from the vocabulary minus the user's full
/// interaction set (train + val + test). Never returns the padding id 0.
pub fn sample_negative<R: Rng>(
    dataset: &SequenceDataset,
    interacted: &HashSet<u32>,
    rng: &mut R,
) -> Result<u32> {
    let vocab = dataset.num_items() as u32;
    if interacted.len() >= vocab as usize {
        return Err(CoreError::Sampling(
            "user interacted with every item; no negative exists".into(),
        ));
    }
    // rejection sampling; support is non-empty by the check above
    loop {
        let candidate = rng.gen_range(1..=vocab);
        if !interacted.contains(&candidate) {
            return Ok(candidate);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn dataset_with_items(n_items: usize) -> SequenceDataset {
        // one dummy user that holds every item so vocabulary size is n_items
        let seq: Vec<u32> = (1..=n_items as u32).collect();
        SequenceDataset::from_sequences(
            vec!["holder".into()],
            (1..=n_items).map(|i| format!("i{i}")).collect(),
            vec![seq],
        )
        .unwrap()
    }

    #[test]
    fn forced_single_choice() {
        let d = dataset_with_items(3);
        let interacted: HashSet<u32> = [1, 2].into_iter().collect();
        let mut rng = stream(7, "neg-test");
        for _ in 0..50 {
            assert_eq!(sample_negative(&d, &interacted, &mut rng).unwrap(), 3);
        }
    }

    #[test]
    fn exhausted_support_errors() {
        let d = dataset_with_items(4);
        let interacted: HashSet<u32> = [1, 2, 3, 4].into_iter().collect();
        let mut rng = stream(7, "neg-test");
        assert!(matches!(
            sample_negative(&d, &interacted, &mut rng),
            Err(CoreError::Sampling(_))
        ));
    }

    #[test]
    fn never_in_interaction_set_and_never_zero() {
        let d = dataset_with_items(50);
        let interacted: HashSet<u32> = (1..=20).step_by(2).collect();
        let mut rng = stream(11, "neg-test");
        for _ in 0..100_000 {
            let s = sample_negative(&d, &interacted, &mut rng).unwrap();
            assert!(s != 0 && !interacted.contains(&s));
        }
    }

    #[test]
    fn uniform_within_chi_square_tolerance() {
        let d = dataset_with_items(1000);
        let interacted: HashSet<u32> = [1].into_iter().collect();
        let mut rng = stream(13, "neg-test");
        let draws = 100_000usize;
        let mut counts = vec![0usize; 1001];
        for _ in 0..draws {
            counts[sample_negative(&d, &interacted, &mut rng).unwrap() as usize] += 1;
        }
        assert_eq!(counts[1], 0);
        let support = 999.0;
        let expected = draws as f64 / support;
        let chi2: f64 = counts[2..]
            .iter()
            .map(|&c| {
                let diff = c as f64 - expected;
                diff * diff / expected
            })
            .sum();
        // dof = 998: mean 998, sd ~ sqrt(2*998) ~ 44.7; allow 5 sigma
        let dof = support - 1.0;
        let sd = (2.0 * dof).sqrt();
        assert!(
            (chi2 - dof).abs() < 5.0 * sd,
            "chi2 {chi2} outside 5 sigma of dof {dof}"
        );
    }
}
