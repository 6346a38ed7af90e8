//! Edge-side CSI conditioning ahead of the encoder.
//!
//! Four steps, all pure: extract a scalar gain indicator (the Frobenius
//! norm), normalize the tensor by it, rotate every subcarrier/slot column
//! so a snapshot-wise reference antenna has zero phase, and re-layout the
//! complex tensor into the real-valued stacked form the encoder consumes.
//! Phase stabilization removes the nuisance phase rotation that is common
//! across antennas while preserving every entrywise modulus and all
//! inter-antenna phase differences.

use ndarray::{Array3, Array4};
use num_complex::Complex64;

use crate::channel::CsiTensor;

/// Guards the normalization against division by zero.
pub const EPS_GAIN: f64 = 1e-8;
/// Reference entries below this modulus keep their column unrotated.
pub const EPS_PHASE: f64 = 1e-6;

/// Real encoder-input layout: (T·N_r, N_sc, 2).
pub type FeatureTensor = Array3<f64>;

/// Everything the edge derives from one estimated CSI tensor.
#[derive(Clone, Debug)]
pub struct PreprocessedCsi {
    /// Phase-stabilized, normalized CSI (T, N_r, N_sc).
    pub stabilized: CsiTensor,
    /// Channel-quality indicator: Frobenius norm of the input.
    pub gain: f64,
    /// Reference antenna index (0-based).
    pub ref_antenna: usize,
    /// Stacked real/imaginary parts with time and antenna axes flattened.
    pub features: FeatureTensor,
}

/// Frobenius norm over all (t, m, n).
pub fn gain_indicator(h: &CsiTensor) -> f64 {
    h.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
}

/// `H̄ = Ĥ / (g + ε)`; ε keeps an all-zero tensor finite.
pub fn normalize(h: &CsiTensor, gain: f64, eps: f64) -> CsiTensor {
    let denom = gain + eps;
    h.mapv(|v| v / denom)
}

/// Antenna with the largest mean squared modulus over (t, n); ties go to
/// the smallest index.
pub fn select_ref_antenna(h: &CsiTensor) -> usize {
    let (t, m, n) = h.dim();
    let mut best = 0usize;
    let mut best_energy = f64::NEG_INFINITY;
    for ant in 0..m {
        let mut energy = 0.0;
        for slot in 0..t {
            for sc in 0..n {
                energy += h[[slot, ant, sc]].norm_sqr();
            }
        }
        if energy > best_energy {
            best_energy = energy;
            best = ant;
        }
    }
    best
}

/// Rotates each (t, n) column by the conjugate phase of its reference
/// entry, so the reference antenna reads real and nonnegative. Columns
/// whose reference modulus falls below `eps_phase` pass through unchanged
/// (their phase estimate would be noise).
pub fn phase_stabilize(h: &CsiTensor, ref_antenna: usize, eps_phase: f64) -> CsiTensor {
    let (t, m, n) = h.dim();
    let mut out = h.clone();
    for slot in 0..t {
        for sc in 0..n {
            let reference = h[[slot, ref_antenna, sc]];
            if reference.norm() >= eps_phase {
                let rotation = Complex64::from_polar(1.0, -reference.arg());
                for ant in 0..m {
                    out[[slot, ant, sc]] = h[[slot, ant, sc]] * rotation;
                }
            }
        }
    }
    out
}

/// Splits complex entries into two trailing real channels:
/// out[t, m, n, 0] = Re, out[t, m, n, 1] = Im.
pub fn stack_complex(h: &CsiTensor) -> Array4<f64> {
    let (t, m, n) = h.dim();
    Array4::from_shape_fn((t, m, n, 2), |(slot, ant, sc, c)| {
        let v = h[[slot, ant, sc]];
        if c == 0 {
            v.re
        } else {
            v.im
        }
    })
}

/// Inverse of [`stack_complex`]; bit-exact because no arithmetic occurs.
pub fn unstack_complex(b: &Array4<f64>) -> CsiTensor {
    let (t, m, n, _) = b.dim();
    Array3::from_shape_fn((t, m, n), |(slot, ant, sc)| {
        Complex64::new(b[[slot, ant, sc, 0]], b[[slot, ant, sc, 1]])
    })
}

/// Flattens time and antenna axes: X[t·N_r + m, n, c] = B[t, m, n, c].
pub fn reshape_flatten(b: &Array4<f64>) -> FeatureTensor {
    let (t, m, n, c) = b.dim();
    debug_assert_eq!(c, 2);
    Array3::from_shape_fn((t * m, n, 2), |(row, sc, ch)| b[[row / m, row % m, sc, ch]])
}

/// Inverse of [`reshape_flatten`] given the slot count.
pub fn reshape_expand(x: &FeatureTensor, slots: usize) -> Array4<f64> {
    let (rows, n, c) = x.dim();
    debug_assert_eq!(c, 2);
    debug_assert_eq!(rows % slots, 0);
    let m = rows / slots;
    Array4::from_shape_fn((slots, m, n, 2), |(slot, ant, sc, ch)| {
        x[[slot * m + ant, sc, ch]]
    })
}

/// Full conditioning chain: gain → normalize → reference antenna → phase
/// stabilization → stacked real features.
pub fn preprocess(h: &CsiTensor) -> PreprocessedCsi {
    let gain = gain_indicator(h);
    let normalized = normalize(h, gain, EPS_GAIN);
    let ref_antenna = select_ref_antenna(&normalized);
    let stabilized = phase_stabilize(&normalized, ref_antenna, EPS_PHASE);
    let features = reshape_flatten(&stack_complex(&stabilized));
    PreprocessedCsi { stabilized, gain, ref_antenna, features }
}
