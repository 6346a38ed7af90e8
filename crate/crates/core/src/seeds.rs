//! Deterministic seed derivation and sampling primitives.
//!
//! Every random quantity in the pipeline is a pure function of the run seed,
//! a stream tag and an index. Seeds are expanded with splitmix64 into
//! explicit 32-byte ChaCha12 keys, and normal variates are drawn with an
//! in-house Box–Muller transform, so regenerating sample `i` never depends
//! on how many samples were drawn before it or on RNG-crate internals.

use rand::{Rng, RngExt};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Independent stream tags. Two streams with the same run seed but different
/// tags never collide (tags feed the splitmix64 chain as distinct inputs).
pub mod stream {
    pub const DATA: u64 = 0x01;
    pub const COVARIANCE: u64 = 0x02;
    pub const STAGE1_DATA: u64 = 0x03;
    pub const STAGE1_VALID: u64 = 0x04;
    pub const STAGE2_DATA: u64 = 0x05;
    pub const STAGE2_VALID: u64 = 0x06;
    pub const QUANT_CALIB: u64 = 0x07;
    pub const EVAL: u64 = 0x08;
    pub const TRAJECTORY: u64 = 0x09;
    pub const INIT: u64 = 0x0a;
}

/// One step of the splitmix64 sequence: advances `state` and returns the
/// mixed output. Standard finalizer constants.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from (run seed, stream tag, index). The three inputs
/// are chained through the mixer rather than XORed together so that
/// (seed, tag, index) triples differing in any coordinate decorrelate.
pub fn derive(seed: u64, tag: u64, index: u64) -> u64 {
    let mut s = seed;
    let a = splitmix64(&mut s);
    let mut s = a ^ tag;
    let b = splitmix64(&mut s);
    let mut s = b ^ index;
    splitmix64(&mut s)
}

/// Expands a 64-bit seed into a full 256-bit ChaCha12 key.
pub fn rng_from(seed: u64) -> ChaCha12Rng {
    let mut s = seed;
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut s).to_le_bytes());
    }
    ChaCha12Rng::from_seed(key)
}

/// Convenience: RNG for a derived (seed, tag, index) triple.
pub fn stream_rng(seed: u64, tag: u64, index: u64) -> ChaCha12Rng {
    rng_from(derive(seed, tag, index))
}

/// Uniform sample in [lo, hi).
pub fn uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Standard normal via Box–Muller. Draws exactly two uniforms per call and
/// discards the second variate, keeping the consumed stream length a pure
/// function of the call count.
pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    // u1 in (0,1]: guard the log singularity at 0.
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitmix_reference_values() {
        // First three outputs for state 0, cross-checked against the
        // published splitmix64 reference implementation.
        let mut s = 0u64;
        assert_eq!(splitmix64(&mut s), 0xe220_a839_7b1d_cdaf);
        assert_eq!(splitmix64(&mut s), 0x6e78_9e6a_a1b9_65f4);
        assert_eq!(splitmix64(&mut s), 0x06c4_5d18_8009_454f);
    }

    #[test]
    fn derive_is_pure_and_sensitive() {
        assert_eq!(derive(7, stream::DATA, 42), derive(7, stream::DATA, 42));
        assert_ne!(derive(7, stream::DATA, 42), derive(7, stream::DATA, 43));
        assert_ne!(derive(7, stream::DATA, 42), derive(7, stream::COVARIANCE, 42));
        assert_ne!(derive(7, stream::DATA, 42), derive(8, stream::DATA, 42));
    }

    #[test]
    fn stream_rng_reproduces_bitwise() {
        let mut a = stream_rng(1, stream::EVAL, 5);
        let mut b = stream_rng(1, stream::EVAL, 5);
        for _ in 0..64 {
            assert_eq!(a.random::<u64>(), b.random::<u64>());
        }
    }

    #[test]
    fn normal_moments() {
        // 2e5 draws: mean within 5 sigma of 0 (sigma_mean = 1/sqrt(n)),
        // variance within ~2% of 1.
        let mut rng = rng_from(99);
        let n = 200_000;
        let (mut sum, mut sumsq) = (0.0, 0.0);
        for _ in 0..n {
            let x = standard_normal(&mut rng);
            sum += x;
            sumsq += x * x;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        assert!(mean.abs() < 5.0 / (n as f64).sqrt(), "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn uniform_range() {
        let mut rng = rng_from(3);
        for _ in 0..10_000 {
            let x = uniform(&mut rng, -2.5, 4.0);
            assert!((-2.5..4.0).contains(&x));
        }
    }
}
