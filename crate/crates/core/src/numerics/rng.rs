//! Seedable randomness.
//!
//! Every stochastic operation in the crate draws from a `ChaCha8` stream
//! cipher RNG seeded explicitly, so runs reproduce bit-for-bit across
//! platforms. Raw `thread_rng` is never used.

use super::mat::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The crate's pseudo-random generator: ChaCha with 8 rounds.
pub type SeededRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Matrix with entries drawn uniformly from `[lo, hi)`.
pub fn uniform_mat(rng: &mut SeededRng, rows: usize, cols: usize, lo: f64, hi: f64) -> Mat {
    let data = (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect();
    Mat::from_vec(rows, cols, data).expect("buffer sized to shape")
}

/// Matrix with entries drawn from a normal distribution, sampled by
/// Box-Muller so only the uniform primitive is needed.
pub fn gaussian_mat(rng: &mut SeededRng, rows: usize, cols: usize, mean: f64, sd: f64) -> Mat {
    let data = (0..rows * cols)
        .map(|_| mean + sd * standard_normal(rng))
        .collect();
    Mat::from_vec(rows, cols, data).expect("buffer sized to shape")
}

/// One draw from N(0, 1) via the Box-Muller transform.
pub fn standard_normal(rng: &mut SeededRng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Fisher-Yates shuffle driven by the seeded generator.
pub fn shuffle<T>(rng: &mut SeededRng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let a = uniform_mat(&mut seeded_rng(9), 3, 4, -1.0, 1.0);
        let b = uniform_mat(&mut seeded_rng(9), 3, 4, -1.0, 1.0);
        assert_eq!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn different_seeds_differ() {
        let a = uniform_mat(&mut seeded_rng(1), 2, 2, 0.0, 1.0);
        let b = uniform_mat(&mut seeded_rng(2), 2, 2, 0.0, 1.0);
        assert_ne!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn gaussian_moments_are_sane() {
        let mut rng = seeded_rng(42);
        let m = gaussian_mat(&mut rng, 100, 100, 0.5, 2.0);
        let n = (m.rows() * m.cols()) as f64;
        let mean: f64 = m.as_slice().iter().sum::<f64>() / n;
        let var: f64 = m.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!((mean - 0.5).abs() < 0.05);
        assert!((var - 4.0).abs() < 0.2);
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut items: Vec<usize> = (0..50).collect();
        shuffle(&mut seeded_rng(3), &mut items);
        let mut sorted = items.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_ne!(items, (0..50).collect::<Vec<_>>());
    }
}
