//! Per-subcarrier LMMSE channel estimation with long-term covariance
//! calibration.
//!
//! The receive antennas of one base station see a correlated channel vector
//! on each subcarrier. A bank of per-(BS, subcarrier) spatial covariance
//! matrices is calibrated once by averaging outer products of independently
//! generated clean channel realizations, diagonally loaded for guaranteed
//! invertibility, and then kept fixed. Estimation solves
//!
//!   ĥ = R x* (|x|² R + σ² I)⁻¹ y
//!
//! per slot and subcarrier through a Hermitian Cholesky solve — never an
//! explicit inverse.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Array3};
use num_complex::Complex64;
use thiserror::Error;

use crate::channel::{BsSite, CsiTensor, ScenarioConfig};
use crate::linalg::{self, LinalgError};
use crate::seeds;

const BANK_MAGIC: &[u8; 7] = b"ECCCOV1";

/// Relative diagonal loading: each calibrated matrix receives
/// `LOADING_SCALE · trace(R)/N_r` on its diagonal.
pub const LOADING_SCALE: f64 = 1e-6;

/// Default number of clean channel realizations averaged per matrix.
pub const CALIBRATION_REALIZATIONS: usize = 2000;

#[derive(Debug, Error)]
pub enum EstimationError {
    #[error("invalid input: {0}")]
    BadInput(String),
    #[error("singular estimation system on subcarrier {subcarrier}")]
    SingularSystem { subcarrier: usize },
    #[error(transparent)]
    Linalg(LinalgError),
    #[error("bad covariance bank magic")]
    BadMagic,
    #[error("corrupt covariance bank: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Sample covariance of channel realizations plus diagonal loading:
/// `(1/N) Σ h h^H + ε_R·I`. Hermitian by construction (the accumulated
/// outer products are exactly conjugate-symmetric in IEEE arithmetic).
pub fn estimate_covariance(
    realizations: &[Array1<Complex64>],
    eps_r: f64,
) -> Result<Array2<Complex64>, EstimationError> {
    let n = realizations
        .first()
        .ok_or_else(|| EstimationError::BadInput("no realizations".into()))?
        .len();
    let mut r = Array2::<Complex64>::zeros((n, n));
    for h in realizations {
        if h.len() != n {
            return Err(EstimationError::BadInput(format!(
                "realization length {} differs from first ({n})",
                h.len()
            )));
        }
        for i in 0..n {
            for j in 0..n {
                r[[i, j]] += h[i] * h[j].conj();
            }
        }
    }
    let scale = 1.0 / realizations.len() as f64;
    r.mapv_inplace(|v| v * scale);
    for i in 0..n {
        r[[i, i]] += eps_r;
    }
    Ok(r)
}

/// Diagonal loading for a raw covariance under the relative policy:
/// `scale · trace(R)/N_r`.
pub fn relative_loading(raw: &Array2<Complex64>, scale: f64) -> f64 {
    let n = raw.nrows();
    let trace: f64 = (0..n).map(|i| raw[[i, i]].re).sum();
    scale * trace / n as f64
}

/// LMMSE estimate and the intermediate solve vector `s` with
/// `(|x|²R + σ²I)·s = x*·y` and `ĥ = R·s`. Exposing `s` lets callers check
/// the solve residual without re-deriving it from `ĥ`.
pub fn lmmse_components(
    y: &Array1<Complex64>,
    pilot: Complex64,
    r: &Array2<Complex64>,
    noise_var: f64,
    subcarrier: usize,
) -> Result<(Array1<Complex64>, Array1<Complex64>), EstimationError> {
    let n = r.nrows();
    if y.len() != n {
        return Err(EstimationError::BadInput(format!(
            "observation length {} does not match covariance order {n}",
            y.len()
        )));
    }
    if pilot.norm_sqr() == 0.0 {
        return Err(EstimationError::BadInput("pilot symbol must be nonzero".into()));
    }
    if !(noise_var >= 0.0) {
        return Err(EstimationError::BadInput(format!(
            "noise variance must be >= 0, got {noise_var}"
        )));
    }
    let gain = pilot.norm_sqr();
    let mut a = r.mapv(|v| v * gain);
    for i in 0..n {
        a[[i, i]] += noise_var;
    }
    let rhs = y.mapv(|v| pilot.conj() * v);
    let s = linalg::hermitian_solve(&a, &rhs).map_err(|e| match e {
        LinalgError::NotPositiveDefinite { .. } => EstimationError::SingularSystem { subcarrier },
        other => EstimationError::Linalg(other),
    })?;
    let h_hat = r.dot(&s);
    Ok((s, h_hat))
}

/// LMMSE channel estimate `ĥ = R x* (|x|²R + σ²I)⁻¹ y` for one subcarrier.
pub fn lmmse_estimate(
    y: &Array1<Complex64>,
    pilot: Complex64,
    r: &Array2<Complex64>,
    noise_var: f64,
    subcarrier: usize,
) -> Result<Array1<Complex64>, EstimationError> {
    lmmse_components(y, pilot, r, noise_var, subcarrier).map(|(_, h)| h)
}

/// Applies [`lmmse_estimate`] independently per (slot, subcarrier) of one
/// BS observation tensor, using that BS's per-subcarrier covariances.
pub fn estimate_snapshot(
    y: &CsiTensor,
    pilots: &[Complex64],
    covariances: &[Array2<Complex64>],
    noise_var: f64,
) -> Result<CsiTensor, EstimationError> {
    let (t, m, n) = y.dim();
    if pilots.len() != n || covariances.len() != n {
        return Err(EstimationError::BadInput(format!(
            "expected {n} pilots and covariances, got {} and {}",
            pilots.len(),
            covariances.len()
        )));
    }
    let mut out = Array3::zeros((t, m, n));
    let mut column = Array1::zeros(m);
    for slot in 0..t {
        for sc in 0..n {
            for ant in 0..m {
                column[ant] = y[[slot, ant, sc]];
            }
            let h = lmmse_estimate(&column, pilots[sc], &covariances[sc], noise_var, sc)?;
            for ant in 0..m {
                out[[slot, ant, sc]] = h[ant];
            }
        }
    }
    Ok(out)
}

/// Fixed per-(BS, subcarrier) spatial covariances used by every estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct CovarianceBank {
    bs_count: usize,
    antennas: usize,
    subcarriers: usize,
    realization_count: u64,
    loading_scale: f64,
    /// Loaded matrices, indexed `l * subcarriers + n`.
    matrices: Vec<Array2<Complex64>>,
}

impl CovarianceBank {
    /// Calibrates the bank by long-term averaging of clean channel
    /// realizations drawn from the scenario's covariance stream. Each
    /// realization is a fresh user position with fresh path sets; the
    /// resulting matrices stay fixed for training and evaluation.
    pub fn calibrate(
        config: &ScenarioConfig,
        sites: &[BsSite],
        realization_count: usize,
        loading_scale: f64,
    ) -> Result<Self, EstimationError> {
        if realization_count == 0 {
            return Err(EstimationError::BadInput("need at least one realization".into()));
        }
        let (l_total, m, n) = (sites.len(), config.antennas(), config.subcarriers);
        let mut sums = vec![Array2::<Complex64>::zeros((m, m)); l_total * n];
        for idx in 0..realization_count {
            let mut rng = seeds::stream_rng(config.seed, seeds::stream::COVARIANCE, idx as u64);
            let position = crate::channel::sample_ue_position(config, &mut rng);
            for (l, site) in sites.iter().enumerate() {
                let paths = crate::channel::synth_paths(config, position, site, &mut rng);
                for sc in 0..n {
                    let h = crate::channel::channel_freq_response(
                        &paths,
                        config.subcarrier_freq(sc),
                        site,
                        config.wavelength_m,
                    );
                    let sum = &mut sums[l * n + sc];
                    for i in 0..m {
                        for j in 0..m {
                            sum[[i, j]] += h[i] * h[j].conj();
                        }
                    }
                }
            }
        }
        let scale = 1.0 / realization_count as f64;
        let matrices = sums
            .into_iter()
            .map(|mut raw| {
                raw.mapv_inplace(|v| v * scale);
                let eps = relative_loading(&raw, loading_scale);
                for i in 0..m {
                    raw[[i, i]] += eps;
                }
                raw
            })
            .collect();
        Ok(Self {
            bs_count: l_total,
            antennas: m,
            subcarriers: n,
            realization_count: realization_count as u64,
            loading_scale,
            matrices,
        })
    }

    pub fn bs_count(&self) -> usize {
        self.bs_count
    }

    pub fn antennas(&self) -> usize {
        self.antennas
    }

    pub fn subcarriers(&self) -> usize {
        self.subcarriers
    }

    pub fn realization_count(&self) -> u64 {
        self.realization_count
    }

    pub fn loading_scale(&self) -> f64 {
        self.loading_scale
    }

    /// The loaded covariances of BS `l`, one per subcarrier.
    pub fn matrices_for(&self, l: usize) -> &[Array2<Complex64>] {
        &self.matrices[l * self.subcarriers..(l + 1) * self.subcarriers]
    }

    /// LMMSE-estimates one BS observation tensor.
    pub fn estimate(
        &self,
        l: usize,
        y: &CsiTensor,
        pilots: &[Complex64],
        noise_var: f64,
    ) -> Result<CsiTensor, EstimationError> {
        if l >= self.bs_count {
            return Err(EstimationError::BadInput(format!(
                "BS index {l} out of range ({} stations)",
                self.bs_count
            )));
        }
        estimate_snapshot(y, pilots, self.matrices_for(l), noise_var)
    }

    /// Writes the bank: magic, dimensions, realization count, loading
    /// scale, then per-(l, n) matrices row-major as interleaved real/imag
    /// 64-bit floats. Little-endian.
    pub fn save(&self, path: &Path) -> Result<(), EstimationError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(BANK_MAGIC)?;
        w.write_all(&(self.bs_count as u32).to_le_bytes())?;
        w.write_all(&(self.subcarriers as u32).to_le_bytes())?;
        w.write_all(&(self.antennas as u32).to_le_bytes())?;
        w.write_all(&self.realization_count.to_le_bytes())?;
        w.write_all(&self.loading_scale.to_le_bytes())?;
        for matrix in &self.matrices {
            for i in 0..self.antennas {
                for j in 0..self.antennas {
                    let v = matrix[[i, j]];
                    w.write_all(&v.re.to_le_bytes())?;
                    w.write_all(&v.im.to_le_bytes())?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EstimationError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 7];
        r.read_exact(&mut magic)?;
        if &magic != BANK_MAGIC {
            return Err(EstimationError::BadMagic);
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        let mut read_u32 = |r: &mut BufReader<File>| -> Result<u32, EstimationError> {
            r.read_exact(&mut b4)?;
            Ok(u32::from_le_bytes(b4))
        };
        let bs_count = read_u32(&mut r)? as usize;
        let subcarriers = read_u32(&mut r)? as usize;
        let antennas = read_u32(&mut r)? as usize;
        r.read_exact(&mut b8)?;
        let realization_count = u64::from_le_bytes(b8);
        r.read_exact(&mut b8)?;
        let loading_scale = f64::from_le_bytes(b8);
        let count = bs_count
            .checked_mul(subcarriers)
            .ok_or_else(|| EstimationError::Corrupt("dimension overflow".into()))?;
        let mut matrices = Vec::with_capacity(count);
        for _ in 0..count {
            let mut m = Array2::<Complex64>::zeros((antennas, antennas));
            for i in 0..antennas {
                for j in 0..antennas {
                    r.read_exact(&mut b8)?;
                    let re = f64::from_le_bytes(b8);
                    r.read_exact(&mut b8)?;
                    let im = f64::from_le_bytes(b8);
                    m[[i, j]] = Complex64::new(re, im);
                }
            }
            matrices.push(m);
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(EstimationError::Corrupt("trailing bytes after matrices".into()));
        }
        Ok(Self { bs_count, antennas, subcarriers, realization_count, loading_scale, matrices })
    }
}
