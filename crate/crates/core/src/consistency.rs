//! Matched and mismatched image/text pairs for consistency learning.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{Grid, RawNews};
use crate::error::{BmrError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyPair {
    pub image: Grid,
    pub text: Vec<u32>,
    /// 1 for a verbatim news item, 0 for a cross pairing.
    pub y_prime: u8,
    /// Index of the news item the image came from.
    pub image_src: usize,
    pub text_src: usize,
}

/// Largest valid set size for `n_real` real items.
pub fn default_set_size(n_real: usize) -> usize {
    4 * (n_real / 2)
}

/// `k/2` positives drawn without replacement, then `k/4` rounds that each
/// draw two distinct items and emit both cross pairs.
pub fn build_consistency_set(real: &[RawNews], k: usize, seed: u64) -> Result<Vec<ConsistencyPair>> {
    if k == 0 || !k.is_multiple_of(4) {
        return Err(BmrError::Data(format!(
            "consistency set size must be a positive multiple of 4, got {k}"
        )));
    }
    if real.len() < k / 2 || real.len() < 2 {
        return Err(BmrError::Data(format!(
            "consistency set of size {k} needs at least {} real items, got {}",
            (k / 2).max(2),
            real.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pair = |i: usize, j: usize, y: u8| ConsistencyPair {
        image: real[i].image.clone(),
        text: real[j].text.clone(),
        y_prime: y,
        image_src: i,
        text_src: j,
    };
    let mut out: Vec<ConsistencyPair> = sample(&mut rng, real.len(), k / 2)
        .into_iter()
        .map(|i| pair(i, i, 1))
        .collect();
    for _ in 0..k / 4 {
        let a = rng.random_range(0..real.len());
        let mut b = rng.random_range(0..real.len() - 1);
        if b >= a {
            b += 1;
        }
        out.push(pair(a, b, 0));
        out.push(pair(b, a, 0));
    }
    Ok(out)
}
