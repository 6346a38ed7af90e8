//! Fronthaul bottleneck: midrise uniform quantization, bit packing, and the
//! wire format for edge-to-cloud latent messages.
//!
//! A Q-bit midrise quantizer with step Δ has reconstruction levels at the
//! odd multiples of Δ/2. Inputs beyond the outermost level saturate. All
//! level arithmetic goes through one canonical formula so that quantizing,
//! packing, and unpacking reproduce identical f64 bit patterns.

use std::io::{self, Read, Write};
use thiserror::Error;

const MESSAGE_MAGIC: &[u8; 6] = b"ECCFH1";

/// Gain indicator side-channel cost in bits (one f32 per message).
pub const GAIN_BITS: u32 = 32;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("quantizer bits must be in 1..=16, got {bits}")]
    BadBits { bits: u32 },
    #[error("quantizer step must be positive and finite, got {step:.3e}")]
    BadStep { step: f64 },
    #[error("latent entry {index} is not finite")]
    NonFinite { index: usize },
    #[error("{value:.6e} is not a reconstruction level of this quantizer")]
    NotALevel { value: f64 },
    #[error("index {index} does not fit in {bits} bits")]
    IndexOverflow { index: u32, bits: u32 },
    #[error("calibration sample set is empty")]
    EmptyCalibration,
    #[error("calibration percentile must lie in (0, 100], got {percentile}")]
    BadPercentile { percentile: f64 },
    #[error("calibration magnitude percentile is degenerate ({value:.3e}); latents carry no spread")]
    DegenerateScale { value: f64 },
    #[error("payload length mismatch: expected {expected} bytes, got {got}")]
    PayloadLength { expected: usize, got: usize },
    #[error("latent length mismatch: expected {expected} entries, got {got}")]
    LatentLength { expected: usize, got: usize },
    #[error("bad fronthaul message magic")]
    BadMagic,
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Midrise quantizer: bit width Q and step Δ.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantizerConfig {
    bits: u32,
    step: f64,
}

impl QuantizerConfig {
    pub fn new(bits: u32, step: f64) -> Result<Self, CodecError> {
        if !(1..=16).contains(&bits) {
            return Err(CodecError::BadBits { bits });
        }
        if !(step > 0.0) || !step.is_finite() {
            return Err(CodecError::BadStep { step });
        }
        Ok(Self { bits, step })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    /// Smallest level index, -2^(Q-1).
    fn index_min(&self) -> i64 {
        -(1i64 << (self.bits - 1))
    }

    /// Largest level index, 2^(Q-1) - 1.
    fn index_max(&self) -> i64 {
        (1i64 << (self.bits - 1)) - 1
    }

    /// Reconstruction level for index m: mΔ + Δ/2, the canonical formula all
    /// other paths defer to. Negative levels are computed as exact negations
    /// of their positive mirrors (m and -1-m are a ± pair), so the level set
    /// is symmetric to the bit and the outermost levels are exactly ±A.
    pub fn level(&self, m: i64) -> f64 {
        debug_assert!((self.index_min()..=self.index_max()).contains(&m));
        if m >= 0 {
            m as f64 * self.step + self.step / 2.0
        } else {
            -self.level(-1 - m)
        }
    }

    /// Saturation amplitude A = (2^Q - 1)Δ/2, computed as the outermost
    /// level so that `|quantize(y)| <= clip_amplitude()` holds bit-exactly.
    pub fn clip_amplitude(&self) -> f64 {
        self.level(self.index_max())
    }

    /// Signed cell index for input y: floor(y/Δ) clamped to the
    /// representable range. Saturating inputs land on the outermost indices.
    pub fn cell_index(&self, y: f64) -> i64 {
        debug_assert!(y.is_finite());
        let raw = (y / self.step).floor();
        // Clamp in f64 first: a huge ratio would wrap an i64 cast.
        let lo = self.index_min() as f64;
        let hi = self.index_max() as f64;
        raw.clamp(lo, hi) as i64
    }

    /// Quantize one value to its reconstruction level.
    pub fn quantize(&self, y: f64) -> f64 {
        self.level(self.cell_index(y))
    }

    /// Whether y lies within the non-saturated range |y| <= A. This is the
    /// straight-through gradient mask.
    pub fn in_range(&self, y: f64) -> bool {
        y.abs() <= self.clip_amplitude()
    }

    /// Quantize a latent vector elementwise.
    pub fn quantize_vec(&self, z: &[f64]) -> Vec<f64> {
        z.iter().map(|&y| self.quantize(y)).collect()
    }

    /// Unsigned Q-bit code for index m (offset binary).
    fn code(&self, m: i64) -> u32 {
        (m - self.index_min()) as u32
    }

    /// Index for an unsigned code; codes are Q bits wide by construction.
    fn index_of_code(&self, c: u32) -> i64 {
        c as i64 + self.index_min()
    }

    /// Unsigned index k in [0, 2^Q - 1] of an exact reconstruction level.
    /// Rejects values that are not levels of this quantizer (bitwise check
    /// against the canonical level formula).
    pub fn level_index(&self, level: f64) -> Result<u32, CodecError> {
        if level.is_finite() {
            let m = (level / self.step - 0.5).round() as i64;
            if (self.index_min()..=self.index_max()).contains(&m)
                && self.level(m).to_bits() == level.to_bits()
            {
                return Ok(self.code(m));
            }
        }
        Err(CodecError::NotALevel { value: level })
    }

    /// Reconstruction level for unsigned index k in [0, 2^Q - 1].
    pub fn index_level(&self, k: u32) -> Result<f64, CodecError> {
        if k as u64 >= 1u64 << self.bits {
            return Err(CodecError::IndexOverflow { index: k, bits: self.bits });
        }
        Ok(self.level(self.index_of_code(k)))
    }

    /// Payload size for a D-entry latent: ceil(D*Q/8) bytes.
    pub fn payload_len(&self, latent_dim: usize) -> usize {
        (latent_dim * self.bits as usize).div_ceil(8)
    }

    /// Quantize and pack a latent vector, MSB-first. Rejects non-finite
    /// entries; the payload is exactly `payload_len` bytes with zero-padded
    /// trailing bits.
    pub fn encode(&self, z: &[f64]) -> Result<Vec<u8>, CodecError> {
        if let Some(index) = z.iter().position(|y| !y.is_finite()) {
            return Err(CodecError::NonFinite { index });
        }
        let mut out = vec![0u8; self.payload_len(z.len())];
        let mut bit = 0usize;
        for &y in z {
            let code = self.code(self.cell_index(y));
            for k in (0..self.bits).rev() {
                if code >> k & 1 == 1 {
                    out[bit / 8] |= 0x80 >> (bit % 8);
                }
                bit += 1;
            }
        }
        Ok(out)
    }

    /// Unpack a payload into reconstruction levels. The payload must be
    /// exactly the packed size for `latent_dim` entries.
    pub fn decode(&self, payload: &[u8], latent_dim: usize) -> Result<Vec<f64>, CodecError> {
        let expected = self.payload_len(latent_dim);
        if payload.len() != expected {
            return Err(CodecError::PayloadLength { expected, got: payload.len() });
        }
        let mut out = Vec::with_capacity(latent_dim);
        let mut bit = 0usize;
        for _ in 0..latent_dim {
            let mut code = 0u32;
            for _ in 0..self.bits {
                code <<= 1;
                code |= (payload[bit / 8] >> (7 - bit % 8) & 1) as u32;
                bit += 1;
            }
            out.push(self.level(self.index_of_code(code)));
        }
        Ok(out)
    }
}

/// Nearest-rank selection: the 1-based rank ⌈p/100 · n⌉ evaluated in exact
/// integer arithmetic with the percentile read to six decimal places, so a
/// boundary like p = 99.9, n = 1000 lands on rank 999 rather than drifting
/// across the integer through float rounding.
pub fn nearest_rank(count: usize, percentile: f64) -> Result<usize, CodecError> {
    if count == 0 {
        return Err(CodecError::EmptyCalibration);
    }
    if !(percentile > 0.0 && percentile <= 100.0) {
        return Err(CodecError::BadPercentile { percentile });
    }
    const SCALE: u128 = 1_000_000;
    let p_scaled = (percentile * SCALE as f64).round() as u128;
    let rank = (p_scaled * count as u128).div_ceil(100 * SCALE) as usize;
    Ok(rank.clamp(1, count))
}

/// Step calibration: Δ = 2 q_p / (2^Q - 1) where q_p is the nearest-rank
/// p-th percentile of the absolute sample magnitudes, so the quantizer
/// covers [-q_p, q_p] with saturation reserved for the top (100-p)%.
pub fn calibrate_step(samples: &[f64], bits: u32, percentile: f64) -> Result<f64, CodecError> {
    if !(1..=16).contains(&bits) {
        return Err(CodecError::BadBits { bits });
    }
    if samples.is_empty() {
        return Err(CodecError::EmptyCalibration);
    }
    if let Some(index) = samples.iter().position(|y| !y.is_finite()) {
        return Err(CodecError::NonFinite { index });
    }
    let mut mags: Vec<f64> = samples.iter().map(|y| y.abs()).collect();
    mags.sort_by(|a, b| a.partial_cmp(b).expect("finite magnitudes"));
    let q = mags[nearest_rank(mags.len(), percentile)? - 1];
    if !(q > 0.0) || !q.is_finite() {
        return Err(CodecError::DegenerateScale { value: q });
    }
    Ok(2.0 * q / ((1u64 << bits) - 1) as f64)
}

/// Raw CSI fronthaul cost in bits: T·N_r·N_sc complex entries at 2×32-bit
/// floats each.
pub fn csi_bits(slots: usize, antennas: usize, subcarriers: usize) -> u64 {
    64 * slots as u64 * antennas as u64 * subcarriers as u64
}

/// Latent payload cost in bits: D entries at Q bits.
pub fn embedding_bits(latent_dim: usize, bits: u32) -> u64 {
    latent_dim as u64 * bits as u64
}

/// Fronthaul compression ratio η = D·Q / B_CSI.
pub fn compression_ratio(latent_dim: usize, bits: u32, slots: usize, antennas: usize, subcarriers: usize) -> f64 {
    embedding_bits(latent_dim, bits) as f64 / csi_bits(slots, antennas, subcarriers) as f64
}

/// Ratio including the gain side channel, (D·Q + 32) / B_CSI.
pub fn total_ratio(latent_dim: usize, bits: u32, slots: usize, antennas: usize, subcarriers: usize) -> f64 {
    (embedding_bits(latent_dim, bits) + GAIN_BITS as u64) as f64
        / csi_bits(slots, antennas, subcarriers) as f64
}

/// One edge-to-cloud message: packed latent plus the gain indicator.
#[derive(Clone, Debug, PartialEq)]
pub struct FronthaulMessage {
    pub bs_id: u16,
    pub snapshot_id: u64,
    pub bits: u32,
    pub latent_dim: u32,
    pub gain: f32,
    pub payload: Vec<u8>,
}

impl FronthaulMessage {
    /// Quantize, pack and wrap a latent vector.
    pub fn build(
        bs_id: u16,
        snapshot_id: u64,
        quant: &QuantizerConfig,
        gain: f32,
        z: &[f64],
    ) -> Result<Self, CodecError> {
        Ok(Self {
            bs_id,
            snapshot_id,
            bits: quant.bits(),
            latent_dim: z.len() as u32,
            gain,
            payload: quant.encode(z)?,
        })
    }

    /// Recover reconstruction levels; the receiver supplies the calibrated
    /// quantizer (the step is not carried on the wire).
    pub fn unpack(&self, quant: &QuantizerConfig) -> Result<Vec<f64>, CodecError> {
        if quant.bits() != self.bits {
            return Err(CodecError::BadBits { bits: self.bits });
        }
        quant.decode(&self.payload, self.latent_dim as usize)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), CodecError> {
        w.write_all(MESSAGE_MAGIC)?;
        w.write_all(&self.bs_id.to_le_bytes())?;
        w.write_all(&self.snapshot_id.to_le_bytes())?;
        w.write_all(&[self.bits as u8])?;
        w.write_all(&self.latent_dim.to_le_bytes())?;
        w.write_all(&self.gain.to_le_bytes())?;
        w.write_all(&self.payload)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, CodecError> {
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)?;
        if &magic != MESSAGE_MAGIC {
            return Err(CodecError::BadMagic);
        }
        let mut b2 = [0u8; 2];
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b2)?;
        let bs_id = u16::from_le_bytes(b2);
        r.read_exact(&mut b8)?;
        let snapshot_id = u64::from_le_bytes(b8);
        let mut bits_byte = [0u8; 1];
        r.read_exact(&mut bits_byte)?;
        let bits = bits_byte[0] as u32;
        if !(1..=16).contains(&bits) {
            return Err(CodecError::BadBits { bits });
        }
        r.read_exact(&mut b4)?;
        let latent_dim = u32::from_le_bytes(b4);
        r.read_exact(&mut b4)?;
        let gain = f32::from_le_bytes(b4);
        let payload_len = (latent_dim as usize * bits as usize).div_ceil(8);
        let mut payload = vec![0u8; payload_len];
        r.read_exact(&mut payload)?;
        Ok(Self { bs_id, snapshot_id, bits, latent_dim, gain, payload })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds::{rng_from, uniform};

    #[test]
    fn levels_are_odd_multiples_of_half_step() {
        let q = QuantizerConfig::new(4, 0.25).unwrap();
        for m in -8..=7i64 {
            let level = q.level(m);
            // level / (Δ/2) must be the odd integer 2m+1.
            let halves = level / (q.step() / 2.0);
            assert_eq!(halves, (2 * m + 1) as f64);
        }
    }

    #[test]
    fn level_set_is_bitwise_symmetric() {
        // Non-dyadic step: the ± level pairs must still negate exactly, and
        // every saturated output must sit inside the in-range mask.
        let q = QuantizerConfig::new(4, 0.2).unwrap();
        for m in 0..=7i64 {
            assert_eq!(q.level(-1 - m).to_bits(), (-q.level(m)).to_bits());
        }
        assert!(q.in_range(q.quantize(1e12)));
        assert!(q.in_range(q.quantize(-1e12)));
    }

    #[test]
    fn zero_has_no_level() {
        // Midrise: 0 quantizes to +Δ/2, never to 0.
        let q = QuantizerConfig::new(6, 0.1).unwrap();
        assert_eq!(q.quantize(0.0), q.step() / 2.0);
    }

    #[test]
    fn quantize_is_idempotent_bitwise() {
        let q = QuantizerConfig::new(5, 0.37).unwrap();
        for m in q.index_min()..=q.index_max() {
            let level = q.level(m);
            assert_eq!(q.quantize(level).to_bits(), level.to_bits());
        }
    }

    #[test]
    fn saturation_clamps_to_outermost_levels() {
        let q = QuantizerConfig::new(4, 0.5).unwrap();
        let a = q.clip_amplitude();
        assert_eq!(a, 15.0 * 0.5 / 2.0);
        assert_eq!(q.quantize(a + 100.0), a);
        assert_eq!(q.quantize(-a - 100.0), -(8.0 * 0.5) + 0.25);
        // The boundary itself is in range, one ulp beyond saturates the mask.
        assert!(q.in_range(a));
        assert!(!q.in_range(a + a * 1e-15));
    }

    #[test]
    fn quantization_error_bounded_by_half_step_in_range() {
        let q = QuantizerConfig::new(8, 0.01).unwrap();
        let mut rng = rng_from(17);
        let a = q.clip_amplitude();
        for _ in 0..10_000 {
            let y = uniform(&mut rng, -a, a);
            let e = (q.quantize(y) - y).abs();
            assert!(e <= q.step() / 2.0 + 1e-15, "y={y} err={e}");
        }
    }

    #[test]
    fn level_index_roundtrip_and_extremes() {
        for bits in [1u32, 2, 4, 10] {
            let q = QuantizerConfig::new(bits, 0.2).unwrap();
            let count = 1u32 << bits;
            // -A maps to 0, +A to 2^Q - 1, and the full round trip is exact.
            assert_eq!(q.level_index(-q.clip_amplitude()).unwrap(), 0);
            assert_eq!(q.level_index(q.clip_amplitude()).unwrap(), count - 1);
            for k in 0..count {
                let level = q.index_level(k).unwrap();
                assert_eq!(q.level_index(level).unwrap(), k);
            }
        }
        // Q=2 levels in ascending order are the four odd half-step multiples.
        let q = QuantizerConfig::new(2, 1.0).unwrap();
        let levels: Vec<f64> = (0..4).map(|k| q.index_level(k).unwrap()).collect();
        assert_eq!(levels, vec![-1.5, -0.5, 0.5, 1.5]);
    }

    #[test]
    fn level_index_rejects_non_levels() {
        let q = QuantizerConfig::new(4, 0.5).unwrap();
        assert!(matches!(q.level_index(0.0), Err(CodecError::NotALevel { .. })));
        assert!(matches!(q.level_index(f64::NAN), Err(CodecError::NotALevel { .. })));
        assert!(matches!(q.index_level(16), Err(CodecError::IndexOverflow { .. })));
    }

    #[test]
    fn quantize_is_monotone() {
        let q = QuantizerConfig::new(4, 0.3).unwrap();
        let mut rng = rng_from(29);
        for _ in 0..2000 {
            let a = uniform(&mut rng, -4.0, 4.0);
            let b = uniform(&mut rng, -4.0, 4.0);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            assert!(q.quantize(lo) <= q.quantize(hi));
        }
    }

    #[test]
    fn packing_is_msb_first() {
        // Q=4, codes [3, 10, 15] -> bits 0011 1010 1111 -> 0x3A 0xF0.
        let q = QuantizerConfig::new(4, 1.0).unwrap();
        // Levels with indices m = c - 8 for codes c.
        let z: Vec<f64> = [3u32, 10, 15].iter().map(|&c| q.level(c as i64 - 8)).collect();
        let payload = q.encode(&z).unwrap();
        assert_eq!(payload, vec![0x3a, 0xf0]);
    }

    #[test]
    fn payload_length_is_exact_ceiling() {
        let q10 = QuantizerConfig::new(10, 1.0).unwrap();
        assert_eq!(q10.payload_len(32), 40); // 320 bits
        let q6 = QuantizerConfig::new(6, 1.0).unwrap();
        assert_eq!(q6.payload_len(5), 4); // 30 bits -> 4 bytes
    }

    #[test]
    fn encode_decode_roundtrip_is_bit_exact() {
        let mut rng = rng_from(23);
        for bits in [1u32, 3, 4, 7, 10, 16] {
            let q = QuantizerConfig::new(bits, 0.123).unwrap();
            let a = q.clip_amplitude();
            let z: Vec<f64> = (0..37).map(|_| uniform(&mut rng, -2.0 * a, 2.0 * a)).collect();
            let quantized = q.quantize_vec(&z);
            let decoded = q.decode(&q.encode(&z).unwrap(), z.len()).unwrap();
            for (a, b) in quantized.iter().zip(&decoded) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn decode_rejects_wrong_payload_length() {
        let q = QuantizerConfig::new(10, 1.0).unwrap();
        let payload = vec![0u8; 39];
        assert!(matches!(
            q.decode(&payload, 32),
            Err(CodecError::PayloadLength { expected: 40, got: 39 })
        ));
    }

    #[test]
    fn encode_rejects_non_finite() {
        let q = QuantizerConfig::new(4, 1.0).unwrap();
        assert!(matches!(
            q.encode(&[0.0, f64::NAN]),
            Err(CodecError::NonFinite { index: 1 })
        ));
    }

    #[test]
    fn calibration_covers_percentile() {
        // 1000 samples of magnitude 1..=1000: 99.9th nearest-rank percentile
        // is the 999th magnitude ascending = 999.
        let samples: Vec<f64> = (1..=1000).map(|i| i as f64 * if i % 2 == 0 { -1.0 } else { 1.0 }).collect();
        let step = calibrate_step(&samples, 4, 99.9).unwrap();
        assert_eq!(step, 2.0 * 999.0 / 15.0);
        // p=100 takes the maximum.
        let step = calibrate_step(&samples, 4, 100.0).unwrap();
        assert_eq!(step, 2.0 * 1000.0 / 15.0);
    }

    #[test]
    fn nearest_rank_hand_cases() {
        assert_eq!(nearest_rank(10, 90.0).unwrap(), 9);
        assert_eq!(nearest_rank(10, 91.0).unwrap(), 10);
        assert_eq!(nearest_rank(1000, 99.9).unwrap(), 999);
        assert_eq!(nearest_rank(512, 99.9).unwrap(), 512);
        assert_eq!(nearest_rank(5, 100.0).unwrap(), 5);
        assert_eq!(nearest_rank(5, 0.1).unwrap(), 1);
        assert!(nearest_rank(0, 90.0).is_err());
        assert!(nearest_rank(5, 0.0).is_err());
        assert!(nearest_rank(5, 100.5).is_err());
    }

    #[test]
    fn calibration_is_monotone_in_percentile_and_bits() {
        let mut rng = rng_from(41);
        let samples: Vec<f64> = (0..500).map(|_| uniform(&mut rng, -3.0, 3.0)).collect();
        let d1 = calibrate_step(&samples, 6, 90.0).unwrap();
        let d2 = calibrate_step(&samples, 6, 99.0).unwrap();
        assert!(d2 >= d1);
        // More bits spread the same coverage over more levels.
        let d3 = calibrate_step(&samples, 8, 99.0).unwrap();
        assert!(d3 < d2);
    }

    #[test]
    fn saturation_fraction_respects_coverage() {
        let mut rng = rng_from(43);
        let samples: Vec<f64> = (0..2000).map(|_| uniform(&mut rng, -1.0, 1.0)).collect();
        let percentile = 99.5;
        let step = calibrate_step(&samples, 5, percentile).unwrap();
        let q = QuantizerConfig::new(5, step).unwrap();
        let saturated = samples.iter().filter(|y| !q.in_range(**y)).count();
        assert!(saturated as f64 / samples.len() as f64 <= 1.0 - percentile / 100.0);
    }

    #[test]
    fn calibration_rejects_degenerate_input() {
        assert!(matches!(calibrate_step(&[], 4, 99.9), Err(CodecError::EmptyCalibration)));
        assert!(matches!(
            calibrate_step(&[0.0, 0.0, 0.0], 4, 99.9),
            Err(CodecError::DegenerateScale { .. })
        ));
        assert!(matches!(
            calibrate_step(&[1.0], 0, 99.9),
            Err(CodecError::BadBits { bits: 0 })
        ));
    }

    #[test]
    fn message_roundtrip() {
        let q = QuantizerConfig::new(10, 0.05).unwrap();
        let z: Vec<f64> = (0..32).map(|i| (i as f64 - 16.0) * 0.04).collect();
        let msg = FronthaulMessage::build(2, 77, &q, 1.25, &z).unwrap();
        assert_eq!(msg.payload.len(), 40);
        let mut buf = Vec::new();
        msg.write_to(&mut buf).unwrap();
        let back = FronthaulMessage::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, msg);
        let levels = back.unpack(&q).unwrap();
        assert_eq!(levels, q.quantize_vec(&z));
    }

    #[test]
    fn message_read_rejects_truncation_and_magic() {
        let q = QuantizerConfig::new(4, 1.0).unwrap();
        let msg = FronthaulMessage::build(0, 1, &q, 1.0, &[0.1, 0.2, 0.3]).unwrap();
        let mut buf = Vec::new();
        msg.write_to(&mut buf).unwrap();
        let truncated = &buf[..buf.len() - 1];
        assert!(matches!(
            FronthaulMessage::read_from(&mut &truncated[..]),
            Err(CodecError::Io(_))
        ));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            FronthaulMessage::read_from(&mut &bad[..]),
            Err(CodecError::BadMagic)
        ));
    }

    #[test]
    fn fronthaul_cost_table() {
        // Full-scale dims: T=10 slots, 2x4 UPA (8 antennas), 24 effective
        // subcarriers, D = 24*32 = 768. The four ratios are exact dyadic or
        // decimal fractions, so equality is bit-exact.
        assert_eq!(csi_bits(10, 8, 24), 122_880);
        assert_eq!(embedding_bits(768, 10), 7_680);
        assert_eq!(compression_ratio(768, 10, 10, 8, 24), 0.0625);
        assert_eq!(compression_ratio(768, 8, 10, 8, 24), 0.05);
        assert_eq!(compression_ratio(768, 6, 10, 8, 24), 0.0375);
        assert_eq!(compression_ratio(768, 4, 10, 8, 24), 0.025);
    }
}
