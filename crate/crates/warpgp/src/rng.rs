//! Seeding helpers and Gaussian draws shared by the simulator and splitters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// Derives an independent stream from a master seed and a counter, so that
/// repetition k of a study always sees the same stream regardless of how many
/// repetitions ran before it.
pub fn stream_rng(master_seed: u64, stream: u64) -> ChaCha12Rng {
    let mut seed = [0u8; 32];
    seed[..8].copy_from_slice(&master_seed.to_le_bytes());
    seed[8..16].copy_from_slice(&stream.to_le_bytes());
    seed[16..24].copy_from_slice(&0x9e37_79b9_7f4a_7c15u64.to_le_bytes());
    ChaCha12Rng::from_seed(seed)
}

/// Standard normal draw via Box-Muller on open-interval uniforms.
pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    // gen_range on (0,1]: shift away from 0 to keep ln finite.
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Fills a vector with standard normal draws.
pub fn standard_normal_vec<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| standard_normal(rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_deterministic_and_distinct() {
        let a: Vec<f64> = standard_normal_vec(&mut stream_rng(7, 0), 5);
        let b: Vec<f64> = standard_normal_vec(&mut stream_rng(7, 0), 5);
        let c: Vec<f64> = standard_normal_vec(&mut stream_rng(7, 1), 5);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn normal_moments() {
        let mut rng = stream_rng(123, 0);
        let n = 200_000;
        let xs = standard_normal_vec(&mut rng, n);
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }
}
