use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{MoodError, Result};

/// Sorted, distinct token indices hidden from the encoder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSpec {
    indices: Vec<usize>,
    token_count: usize,
}

impl MaskSpec {
    /// Builds a mask from explicit indices (sorted and deduplicated here).
    pub fn from_indices(mut indices: Vec<usize>, token_count: usize) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        if indices.is_empty() {
            return Err(MoodError::Parameter("mask selects no tokens".into()));
        }
        if let Some(&i) = indices.iter().find(|&&i| i >= token_count) {
            return Err(MoodError::Parameter(format!(
                "mask index {i} out of range for {token_count} tokens"
            )));
        }
        Ok(MaskSpec {
            indices,
            token_count,
        })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn token_count(&self) -> usize {
        self.token_count
    }

    /// Fraction of tokens masked.
    pub fn ratio(&self) -> f64 {
        self.indices.len() as f64 / self.token_count as f64
    }

    /// Dense per-token flags.
    pub fn flags(&self) -> Vec<bool> {
        let mut f = vec![false; self.token_count];
        for &i in &self.indices {
            f[i] = true;
        }
        f
    }
}

/// Number of tokens a ratio masks: `ceil(ratio · T)`, ignoring float noise
/// such as `0.7 · 10 = 7.000000000000001`.
pub fn masked_count(token_count: usize, ratio: f64) -> usize {
    let exact = ratio * token_count as f64;
    let rounded = exact.round();
    if (exact - rounded).abs() <= 1e-9 * exact.abs().max(1.0) {
        rounded as usize
    } else {
        exact.ceil() as usize
    }
}

/// Draws `ceil(ratio · T)` distinct indices uniformly without replacement.
pub fn sample_mask(token_count: usize, ratio: f64, seed: u64) -> Result<MaskSpec> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(MoodError::Parameter(format!("mask ratio {ratio} outside (0, 1]")));
    }
    let k = masked_count(token_count, ratio);
    if k == 0 {
        return Err(MoodError::Parameter(format!(
            "ratio {ratio} masks no tokens out of {token_count}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let indices = rand::seq::index::sample(&mut rng, token_count, k).into_vec();
    MaskSpec::from_indices(indices, token_count)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cardinality() {
        let m = sample_mask(10, 0.4, 3).unwrap();
        assert_eq!(m.len(), 4);
        assert!(m.indices().windows(2).all(|w| w[0] < w[1]));
        assert!(m.indices().iter().all(|&i| i < 10));
        assert_eq!(sample_mask(10, 0.7, 3).unwrap().len(), 7);
        assert_eq!(sample_mask(10, 0.41, 3).unwrap().len(), 5);
    }

    #[test]
    fn full_mask() {
        assert_eq!(sample_mask(10, 1.0, 9).unwrap().indices(), &(0..10).collect::<Vec<_>>()[..]);
    }

    #[test]
    fn deterministic_given_seed() {
        assert_eq!(sample_mask(16, 0.4, 11).unwrap(), sample_mask(16, 0.4, 11).unwrap());
    }

    #[test]
    fn bad_ratios() {
        assert!(sample_mask(10, 0.0, 0).is_err());
        assert!(sample_mask(10, 1.5, 0).is_err());
        assert!(sample_mask(0, 0.5, 0).is_err());
        assert!(sample_mask(10, f64::NAN, 0).is_err());
    }

    #[test]
    fn per_index_frequency_matches_ratio() {
        let mut hits = [0u32; 10];
        let draws = 100_000;
        for seed in 0..draws {
            for &i in sample_mask(10, 0.4, seed).unwrap().indices() {
                hits[i] += 1;
            }
        }
        for h in hits {
            let f = f64::from(h) / draws as f64;
            assert!((f - 0.4).abs() <= 0.01, "frequency {f}");
        }
    }
}
