//! Seed derivation, deterministic checksums and small numeric helpers.

use crate::scalar::Scalar;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Derives an independent RNG from a base seed and a tag path.
///
/// Different tag paths (phase index, purpose, seed replica) yield
/// statistically independent streams while staying fully reproducible.
pub fn seeded_rng(seed: u64, tags: &[u64]) -> ChaCha12Rng {
    let mut state = seed ^ 0x9e37_79b9_7f4a_7c15;
    for &t in tags {
        state = splitmix64(state.wrapping_add(t).wrapping_add(0x517c_c1b7_2722_0a95));
    }
    ChaCha12Rng::seed_from_u64(state)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a over the little-endian bytes of a scalar slice.
pub fn fnv1a_scalars<S: Scalar>(acc: &mut u64, data: &[S]) {
    for v in data {
        let bits = v.as_f64().to_le_bytes();
        // f32 values hash through their exact f64 image, which is lossless.
        for b in bits {
            *acc ^= u64::from(b);
            *acc = acc.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
}

pub const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;

/// Row-wise softmax of a logit matrix.
pub fn softmax_rows<S: Scalar>(logits: &ArrayView2<'_, S>) -> Array2<S> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
        let mut sum = S::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    out
}

/// l2 norm of a vector with a positive floor.
pub fn floored_norm<S: Scalar>(v: &ArrayView1<'_, S>, floor: S) -> S {
    let mut sq = S::zero();
    for &x in v.iter() {
        sq += x * x;
    }
    sq.sqrt().max(floor)
}

/// Cosine similarity between two vectors with norm floor `eps`.
pub fn cosine<S: Scalar>(a: &ArrayView1<'_, S>, b: &ArrayView1<'_, S>, eps: S) -> S {
    let mut dot = S::zero();
    for (&x, &y) in a.iter().zip(b.iter()) {
        dot += x * y;
    }
    dot / (floored_norm(a, eps) * floored_norm(b, eps))
}

/// Normalizes a vector in place to unit l2 norm (floored); returns the norm.
pub fn normalize_floored<S: Scalar>(v: &mut Array1<S>, floor: S) -> S {
    let n = floored_norm(&v.view(), floor);
    v.mapv_inplace(|x| x / n);
    n
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn seeded_rng_is_reproducible() {
        use rand::Rng;
        let mut a = seeded_rng(7, &[1, 2]);
        let mut b = seeded_rng(7, &[1, 2]);
        let xs: Vec<u64> = (0..4).map(|_| a.random()).collect();
        let ys: Vec<u64> = (0..4).map(|_| b.random()).collect();
        assert_eq!(xs, ys);
        let mut c = seeded_rng(7, &[1, 3]);
        let zs: Vec<u64> = (0..4).map(|_| c.random()).collect();
        assert_ne!(xs, zs);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let logits = array![[0.0f64, 1.0, -2.0], [100.0, 100.0, 100.0]];
        let p = softmax_rows(&logits.view());
        for row in p.rows() {
            let s: f64 = row.sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_basics() {
        let a = array![3.0f64, 4.0];
        let b = array![4.0f64, 3.0];
        let c = cosine(&a.view(), &b.view(), 1e-12);
        assert!((c - 0.96).abs() < 1e-12);
    }
}
