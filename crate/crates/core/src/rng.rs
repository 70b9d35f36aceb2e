//! Seeded counter-based random source.
//!
//! The integer stream is SplitMix64: the state advances by the constant
//! `0x9E3779B97F4A7C15` and each output is the state passed through the
//! finalizer
//!
//! ```text
//! z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//! z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//! z =  z ^ (z >> 31)
//! ```
//!
//! (wrapping multiplication). A normal draw consumes two integers `a`, `b`:
//! `u1 = ((a >> 11) + 1) * 2^-53` in `(0, 1]`, `u2 = (b >> 11) * 2^-53` in
//! `[0, 1)`, then `z = sqrt(-2 ln u1) * cos(2 pi u2)` evaluated in f64 with the
//! portable `libm` routines and rounded to nearest f32. The sine half of the
//! Box-Muller pair is discarded so one draw is one variate.

use crate::error::{Error, Result};
use crate::tensor::{Tensor, MAX_RANK};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const TWO_POW_M53: f64 = 1.0 / (1u64 << 53) as f64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Independent stream derived from this seed and a stream id.
    pub fn fork(seed: u64, stream: u64) -> Self {
        let mut r = Self::new(seed ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03));
        r.next_u64();
        r
    }

    pub fn state(&self) -> u64 {
        self.state
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * TWO_POW_M53
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        ((self.uniform() * n as f64) as usize).min(n.saturating_sub(1))
    }

    pub fn normal_f64(&mut self) -> f64 {
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * TWO_POW_M53;
        let u2 = (self.next_u64() >> 11) as f64 * TWO_POW_M53;
        libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * std::f64::consts::PI * u2)
    }

    pub fn normal(&mut self) -> f32 {
        self.normal_f64() as f32
    }
}

/// Tensor of standard normal variates; advances the stream by `product(dims)` draws.
pub fn random_normal(rng: &mut Rng, dims: &[usize]) -> Result<Tensor> {
    if dims.len() > MAX_RANK {
        return Err(Error::RankTooLarge(dims.len()));
    }
    let n: usize = dims.iter().product();
    let data = (0..n).map(|_| rng.normal()).collect();
    Tensor::new(dims, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitmix_reference_values() {
        // First outputs of SplitMix64 seeded with 0, as published with the algorithm.
        let mut r = Rng::new(0);
        assert_eq!(r.next_u64(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(r.next_u64(), 0x6E78_9E6A_A1B9_65F4);
        assert_eq!(r.next_u64(), 0x06C4_5D18_8009_454F);
    }

    #[test]
    fn same_seed_same_tensor() {
        let a = random_normal(&mut Rng::new(42), &[2, 2]).unwrap();
        let b = random_normal(&mut Rng::new(42), &[2, 2]).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn empty_dims_do_not_advance() {
        let mut r = Rng::new(7);
        let t = random_normal(&mut r, &[0]).unwrap();
        assert!(t.is_empty());
        assert_eq!(r, Rng::new(7));
    }

    #[test]
    fn advances_one_draw_per_value() {
        let mut a = Rng::new(9);
        random_normal(&mut a, &[3, 2]).unwrap();
        let mut b = Rng::new(9);
        for _ in 0..6 {
            b.normal();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn rank_limit() {
        assert!(matches!(
            random_normal(&mut Rng::new(1), &[1; 6]),
            Err(Error::RankTooLarge(6))
        ));
    }

    #[test]
    fn moments_over_a_million_draws() {
        let t = random_normal(&mut Rng::new(2024), &[1_000_000]).unwrap();
        let n = t.len() as f64;
        let mean = t.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = t
            .data()
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / n;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }
}
