//! Synthetic wideband multipath channels and noisy pilot observations.
//!
//! Each link between a user position and a base-station array is a sum of
//! geometric paths: one direct ray plus a configurable number of
//! single-bounce scatterer rays, each carrying a complex gain, departure
//! angles seen from the array, and a propagation delay. The frequency
//! response at subcarrier f_n is
//!
//!   h(f_n) = Σ_k α_k · a(ϑ_k, φ_k) · exp(−j 2π f_n τ_k)
//!
//! with a(·) the unit-modulus array response. Path geometry is frozen for
//! the duration of a snapshot; per-slot variation enters only through fresh
//! observation noise.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array3;
use num_complex::Complex64;
use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeds;

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

const DATASET_MAGIC: &[u8; 8] = b"ECCDATA1";

/// Complex CSI values indexed (slot t, antenna m, subcarrier n).
pub type CsiTensor = Array3<Complex64>;

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("invalid scenario: {0}")]
    BadConfig(String),
    #[error("bad dataset magic")]
    BadMagic,
    #[error("corrupt dataset: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Full physical scenario: geometry, OFDM numerology, noise, and the run
/// seed every sample stream is derived from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    /// Cooperating base stations (L).
    pub bs_count: usize,
    /// Slots per positioning snapshot (T).
    pub slots: usize,
    /// Receive UPA rows per BS.
    pub array_rows: usize,
    /// Receive UPA columns per BS.
    pub array_cols: usize,
    /// Effective subcarriers retained for positioning (N_sc).
    pub subcarriers: usize,
    /// Frequency of the first retained subcarrier (Hz).
    pub first_subcarrier_hz: f64,
    /// Spacing between retained subcarriers (Hz).
    pub subcarrier_spacing_hz: f64,
    /// Carrier wavelength (m).
    pub wavelength_m: f64,
    /// Antenna spacing as a fraction of the wavelength.
    pub antenna_spacing: f64,
    /// User region x-range (m).
    pub region_x: [f64; 2],
    /// User region y-range (m).
    pub region_y: [f64; 2],
    /// User height range (m).
    pub height: [f64; 2],
    /// Observation noise variance per complex entry.
    pub noise_var: f64,
    /// Minimum paths per link (including the direct ray).
    pub paths_min: usize,
    /// Maximum paths per link.
    pub paths_max: usize,
    /// Probability that the direct ray is blocked (gain scaled to near zero).
    pub blockage_prob: f64,
    /// Radius of the ring the BS sites sit on, around the region center (m).
    pub bs_ring_radius: f64,
    /// BS array height (m).
    pub bs_height: f64,
    /// Run seed; all sample streams derive from it.
    pub seed: u64,
}

impl ScenarioConfig {
    /// Antennas per BS (N_r = rows × cols).
    pub fn antennas(&self) -> usize {
        self.array_rows * self.array_cols
    }

    /// Frequency of retained subcarrier n (0-based).
    pub fn subcarrier_freq(&self, n: usize) -> f64 {
        self.first_subcarrier_hz + n as f64 * self.subcarrier_spacing_hz
    }

    pub fn region_center(&self) -> [f64; 3] {
        [
            0.5 * (self.region_x[0] + self.region_x[1]),
            0.5 * (self.region_y[0] + self.region_y[1]),
            0.5 * (self.height[0] + self.height[1]),
        ]
    }

    /// Space diagonal of the user region box (m).
    pub fn region_diagonal(&self) -> f64 {
        let dx = self.region_x[1] - self.region_x[0];
        let dy = self.region_y[1] - self.region_y[0];
        let dz = self.height[1] - self.height[0];
        (dx * dx + dy * dy + dz * dz).sqrt()
    }

    pub fn validate(&self) -> Result<(), ChannelError> {
        let bad = |msg: String| Err(ChannelError::BadConfig(msg));
        if self.bs_count == 0 || self.slots == 0 || self.subcarriers == 0 {
            return bad("bs_count, slots and subcarriers must be >= 1".into());
        }
        if self.array_rows == 0 || self.array_cols == 0 {
            return bad("array must have at least one element".into());
        }
        if self.region_x[0] > self.region_x[1]
            || self.region_y[0] > self.region_y[1]
            || self.height[0] > self.height[1]
        {
            return bad("region bounds must be ordered".into());
        }
        if !(self.noise_var >= 0.0) {
            return bad(format!("noise variance must be >= 0, got {}", self.noise_var));
        }
        if self.paths_min == 0 || self.paths_max < self.paths_min {
            return bad(format!(
                "path count range [{}, {}] must satisfy 1 <= min <= max",
                self.paths_min, self.paths_max
            ));
        }
        if !(0.0..=1.0).contains(&self.blockage_prob) {
            return bad(format!("blockage probability {} outside [0,1]", self.blockage_prob));
        }
        if !(self.wavelength_m > 0.0)
            || !(self.antenna_spacing > 0.0)
            || !(self.first_subcarrier_hz > 0.0)
            || !(self.subcarrier_spacing_hz > 0.0)
        {
            return bad("wavelength, spacing and frequencies must be positive".into());
        }
        Ok(())
    }

    /// BS sites evenly spaced on a ring around the region center, arrays
    /// facing inward. Deterministic in the config alone.
    pub fn bs_sites(&self) -> Vec<BsSite> {
        let center = self.region_center();
        let geometry = ArrayGeometry {
            rows: self.array_rows,
            cols: self.array_cols,
            spacing_m: self.antenna_spacing * self.wavelength_m,
        };
        (0..self.bs_count)
            .map(|l| {
                let angle = std::f64::consts::TAU * l as f64 / self.bs_count as f64;
                let position = [
                    center[0] + self.bs_ring_radius * angle.cos(),
                    center[1] + self.bs_ring_radius * angle.sin(),
                    self.bs_height,
                ];
                // Boresight toward the ring center.
                BsSite { position, azimuth: angle + std::f64::consts::PI, tilt: 0.0, geometry }
            })
            .collect()
    }

    /// Desk-scale reference scenario: small enough to train in seconds while
    /// keeping every pipeline dimension nontrivial (L=3, T=2, 1×2 arrays,
    /// 8 subcarriers). Multipath is kept mild (up to two scatterers, 15%
    /// direct-ray blockage) so that position stays observable from three
    /// one-dimensional arrays; with only three stations, heavier blockage
    /// leaves too many snapshots with unusable geometry to learn from.
    pub fn desk() -> Self {
        Self {
            bs_count: 3,
            slots: 2,
            array_rows: 1,
            array_cols: 2,
            subcarriers: 8,
            first_subcarrier_hz: 3.5e9,
            subcarrier_spacing_hz: 720e3,
            wavelength_m: SPEED_OF_LIGHT / 3.5e9,
            antenna_spacing: 0.5,
            region_x: [0.0, 60.0],
            region_y: [0.0, 60.0],
            height: [0.0, 10.0],
            noise_var: 1e-6,
            paths_min: 1,
            paths_max: 3,
            blockage_prob: 0.15,
            bs_ring_radius: 24.0,
            bs_height: 12.0,
            seed: 7,
        }
    }
}

/// Uniform planar array placement and orientation of one BS.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArrayGeometry {
    pub rows: usize,
    pub cols: usize,
    pub spacing_m: f64,
}

impl ArrayGeometry {
    pub fn elements(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BsSite {
    pub position: [f64; 3],
    /// Boresight azimuth (rad, about +z).
    pub azimuth: f64,
    /// Downward tilt of the array plane (rad).
    pub tilt: f64,
    pub geometry: ArrayGeometry,
}

impl BsSite {
    /// Displacement of element m (row-major over the UPA) from element 0,
    /// in world coordinates. Columns run along the horizontal array axis,
    /// rows along the (tilted) vertical axis.
    fn element_offset(&self, m: usize) -> [f64; 3] {
        let row = (m / self.geometry.cols) as f64;
        let col = (m % self.geometry.cols) as f64;
        let d = self.geometry.spacing_m;
        let (sin_az, cos_az) = self.azimuth.sin_cos();
        let (sin_tilt, cos_tilt) = self.tilt.sin_cos();
        // Horizontal axis ⊥ boresight; vertical axis tilted toward boresight.
        let u_h = [-sin_az, cos_az, 0.0];
        let u_v = [sin_tilt * cos_az, sin_tilt * sin_az, cos_tilt];
        [
            d * (col * u_h[0] + row * u_v[0]),
            d * (col * u_h[1] + row * u_v[1]),
            d * (col * u_h[2] + row * u_v[2]),
        ]
    }
}

/// One propagation path of a UE–BS link.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PathComponent {
    pub gain: Complex64,
    /// Azimuth of the arrival direction seen from the BS (rad).
    pub azimuth: f64,
    /// Elevation of the arrival direction (rad).
    pub elevation: f64,
    /// Propagation delay (s).
    pub delay: f64,
}

/// One positioning snapshot: ground truth plus everything each BS observes.
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub id: u64,
    /// True UE position (m).
    pub position: [f64; 3],
    /// Per-BS path sets.
    pub paths: Vec<Vec<PathComponent>>,
    /// Per-BS true channels, (T, N_r, N_sc); identical across slots because
    /// path geometry is frozen within a snapshot.
    pub channels: Vec<CsiTensor>,
    /// Per-BS noisy pilot observations, (T, N_r, N_sc).
    pub observations: Vec<CsiTensor>,
}

fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Azimuth/elevation of a (nonzero) direction vector.
fn direction_angles(v: [f64; 3]) -> (f64, f64) {
    let r = norm3(v).max(1e-12);
    (v[1].atan2(v[0]), (v[2] / r).asin())
}

/// Uniform sample over the configured user box.
pub fn sample_ue_position<R: Rng>(config: &ScenarioConfig, rng: &mut R) -> [f64; 3] {
    [
        seeds::uniform(rng, config.region_x[0], config.region_x[1]),
        seeds::uniform(rng, config.region_y[0], config.region_y[1]),
        seeds::uniform(rng, config.height[0], config.height[1]),
    ]
}

/// Factor applied to a blocked direct ray instead of removing it, keeping
/// the channel energy finite and the path count stable.
pub const BLOCKAGE_SUPPRESSION: f64 = 1e-6;

/// Draws the path set of one UE–BS link: a direct ray (possibly blocked)
/// plus single-bounce scatterer rays with uniformly placed bounce points.
/// Gains decay with total traveled distance; scatterer phases are uniform.
pub fn synth_paths<R: Rng>(
    config: &ScenarioConfig,
    position: [f64; 3],
    site: &BsSite,
    rng: &mut R,
) -> Vec<PathComponent> {
    let span = (config.paths_max - config.paths_min + 1) as f64;
    let count = config.paths_min
        + ((rng.random::<f64>() * span) as usize).min(config.paths_max - config.paths_min);

    let mut paths = Vec::with_capacity(count);
    // Direct ray: geometry from the BS toward the UE, zero-phase gain 1/d.
    let to_ue = sub3(position, site.position);
    let dist = norm3(to_ue).max(1e-6);
    let (azimuth, elevation) = direction_angles(to_ue);
    let blocked = rng.random::<f64>() < config.blockage_prob;
    let magnitude = (1.0 / dist) * if blocked { BLOCKAGE_SUPPRESSION } else { 1.0 };
    paths.push(PathComponent {
        gain: Complex64::new(magnitude, 0.0),
        azimuth,
        elevation,
        delay: dist / SPEED_OF_LIGHT,
    });

    for _ in 1..count {
        let bounce = [
            seeds::uniform(rng, config.region_x[0], config.region_x[1]),
            seeds::uniform(rng, config.region_y[0], config.region_y[1]),
            seeds::uniform(rng, config.height[0], config.height[1]),
        ];
        let leg_ue = norm3(sub3(position, bounce)).max(1e-6);
        let leg_bs = norm3(sub3(bounce, site.position)).max(1e-6);
        let total = leg_ue + leg_bs;
        let (azimuth, elevation) = direction_angles(sub3(bounce, site.position));
        let strength = seeds::uniform(rng, 0.2, 0.8) / total;
        let phase = seeds::uniform(rng, -std::f64::consts::PI, std::f64::consts::PI);
        paths.push(PathComponent {
            gain: Complex64::from_polar(strength, phase),
            azimuth,
            elevation,
            delay: total / SPEED_OF_LIGHT,
        });
    }
    paths
}

/// Unit-modulus array response for an arrival direction. Element 0 is the
/// phase reference (exactly 1+0j); element m carries phase
/// 2π/λ · (offset_m · unit direction).
pub fn array_response(
    azimuth: f64,
    elevation: f64,
    site: &BsSite,
    wavelength_m: f64,
) -> Vec<Complex64> {
    let (sin_el, cos_el) = elevation.sin_cos();
    let (sin_az, cos_az) = azimuth.sin_cos();
    let u = [cos_el * cos_az, cos_el * sin_az, sin_el];
    (0..site.geometry.elements())
        .map(|m| {
            let o = site.element_offset(m);
            let phase =
                std::f64::consts::TAU / wavelength_m * (o[0] * u[0] + o[1] * u[1] + o[2] * u[2]);
            Complex64::from_polar(1.0, phase)
        })
        .collect()
}

/// Frequency response of a path set at frequency f: the phased sum of the
/// per-path array responses.
pub fn channel_freq_response(
    paths: &[PathComponent],
    freq_hz: f64,
    site: &BsSite,
    wavelength_m: f64,
) -> Vec<Complex64> {
    let n_r = site.geometry.elements();
    let mut h = vec![Complex64::new(0.0, 0.0); n_r];
    for path in paths {
        let steer = array_response(path.azimuth, path.elevation, site, wavelength_m);
        let rotation = Complex64::from_polar(1.0, -std::f64::consts::TAU * freq_hz * path.delay);
        let weight = path.gain * rotation;
        for (dst, a) in h.iter_mut().zip(&steer) {
            *dst += weight * a;
        }
    }
    h
}

/// Clean CSI tensor of one link: the path set evaluated on every retained
/// subcarrier, replicated across slots (geometry is slot-invariant).
pub fn link_channel(
    config: &ScenarioConfig,
    paths: &[PathComponent],
    site: &BsSite,
) -> CsiTensor {
    let (t, m, n) = (config.slots, config.antennas(), config.subcarriers);
    let mut h = Array3::zeros((t, m, n));
    for sc in 0..n {
        let resp = channel_freq_response(paths, config.subcarrier_freq(sc), site, config.wavelength_m);
        for slot in 0..t {
            for ant in 0..m {
                h[[slot, ant, sc]] = resp[ant];
            }
        }
    }
    h
}

/// Pilot observation: y = x_n·h + w with w circularly symmetric complex
/// Gaussian of variance σ² (σ²/2 per real dimension), drawn independently
/// for every (t, m, n).
pub fn observe_pilots<R: Rng>(
    channel: &CsiTensor,
    pilots: &[Complex64],
    noise_var: f64,
    rng: &mut R,
) -> CsiTensor {
    let (t, m, n) = channel.dim();
    debug_assert_eq!(pilots.len(), n);
    let scale = (noise_var / 2.0).sqrt();
    let mut y = Array3::zeros((t, m, n));
    for slot in 0..t {
        for ant in 0..m {
            for sc in 0..n {
                let noise = Complex64::new(
                    scale * seeds::standard_normal(rng),
                    scale * seeds::standard_normal(rng),
                );
                y[[slot, ant, sc]] = pilots[sc] * channel[[slot, ant, sc]] + noise;
            }
        }
    }
    y
}

/// All-ones pilot sequence (constant modulus, matched-filter friendly).
pub fn unit_pilots(subcarriers: usize) -> Vec<Complex64> {
    vec![Complex64::new(1.0, 0.0); subcarriers]
}

/// Generates snapshot `id` from an explicit seed. Pure: (config, sites,
/// seed) determine every value, so snapshots can be produced in any order
/// or in parallel.
pub fn generate_snapshot(
    config: &ScenarioConfig,
    sites: &[BsSite],
    id: u64,
    seed: u64,
) -> Snapshot {
    let mut rng = seeds::rng_from(seed);
    let position = sample_ue_position(config, &mut rng);
    links_from(config, sites, id, position, &mut rng)
}

/// Generates snapshot `id` at a caller-chosen user position (trajectory
/// points, probe grids). Same propagation and noise model as
/// [`generate_snapshot`]; only the position draw is skipped, so the two
/// functions consume different random streams by construction.
pub fn snapshot_at(
    config: &ScenarioConfig,
    sites: &[BsSite],
    id: u64,
    seed: u64,
    position: [f64; 3],
) -> Snapshot {
    let mut rng = seeds::rng_from(seed);
    links_from(config, sites, id, position, &mut rng)
}

fn links_from<R: Rng>(
    config: &ScenarioConfig,
    sites: &[BsSite],
    id: u64,
    position: [f64; 3],
    rng: &mut R,
) -> Snapshot {
    let pilots = unit_pilots(config.subcarriers);
    let mut paths = Vec::with_capacity(sites.len());
    let mut channels = Vec::with_capacity(sites.len());
    let mut observations = Vec::with_capacity(sites.len());
    for site in sites {
        let link_paths = synth_paths(config, position, site, rng);
        let h = link_channel(config, &link_paths, site);
        let y = observe_pilots(&h, &pilots, config.noise_var, rng);
        paths.push(link_paths);
        channels.push(h);
        observations.push(y);
    }
    Snapshot { id, position, paths, channels, observations }
}

/// Snapshot `index` of the stream tagged `tag` under the scenario seed.
pub fn stream_snapshot(
    config: &ScenarioConfig,
    sites: &[BsSite],
    tag: u64,
    index: u64,
) -> Snapshot {
    generate_snapshot(config, sites, index, seeds::derive(config.seed, tag, index))
}

// ─── Dataset serialization ───────────────────────────────────────────────

/// Header of an observation dataset file.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetHeader {
    pub bs_count: u32,
    pub slots: u32,
    pub antennas: u32,
    pub subcarriers: u32,
    pub sample_count: u64,
    pub noise_var: f64,
    pub seed: u64,
}

/// One stored sample: ground-truth position plus per-BS observations.
#[derive(Clone, Debug)]
pub struct DatasetRecord {
    pub position: [f64; 3],
    pub observations: Vec<CsiTensor>,
}

/// Writes snapshots in the dataset wire format: magic, header, then per
/// snapshot the position (3 × f64) and per-BS observation tensors as
/// interleaved re/im f32 in (t, m, n) index order. Little-endian.
pub fn write_dataset<'a, I>(
    path: &Path,
    header: &DatasetHeader,
    snapshots: I,
) -> Result<(), ChannelError>
where
    I: IntoIterator<Item = &'a Snapshot>,
{
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&header.bs_count.to_le_bytes())?;
    w.write_all(&header.slots.to_le_bytes())?;
    w.write_all(&header.antennas.to_le_bytes())?;
    w.write_all(&header.subcarriers.to_le_bytes())?;
    w.write_all(&header.sample_count.to_le_bytes())?;
    w.write_all(&header.noise_var.to_le_bytes())?;
    w.write_all(&header.seed.to_le_bytes())?;
    let mut written = 0u64;
    for snap in snapshots {
        if snap.observations.len() != header.bs_count as usize {
            return Err(ChannelError::Corrupt(format!(
                "snapshot {} has {} BS observations, header says {}",
                snap.id,
                snap.observations.len(),
                header.bs_count
            )));
        }
        for &c in &snap.position {
            w.write_all(&c.to_le_bytes())?;
        }
        for obs in &snap.observations {
            let (t, m, n) = obs.dim();
            if (t as u32, m as u32, n as u32)
                != (header.slots, header.antennas, header.subcarriers)
            {
                return Err(ChannelError::Corrupt(format!(
                    "snapshot {} observation dims ({t},{m},{n}) disagree with header",
                    snap.id
                )));
            }
            for slot in 0..t {
                for ant in 0..m {
                    for sc in 0..n {
                        let v = obs[[slot, ant, sc]];
                        w.write_all(&(v.re as f32).to_le_bytes())?;
                        w.write_all(&(v.im as f32).to_le_bytes())?;
                    }
                }
            }
        }
        written += 1;
    }
    if written != header.sample_count {
        return Err(ChannelError::Corrupt(format!(
            "wrote {written} snapshots, header says {}",
            header.sample_count
        )));
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<DatasetRecord>), ChannelError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(ChannelError::BadMagic);
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    let mut read_u32 = |r: &mut BufReader<File>| -> Result<u32, ChannelError> {
        r.read_exact(&mut b4)?;
        Ok(u32::from_le_bytes(b4))
    };
    let bs_count = read_u32(&mut r)?;
    let slots = read_u32(&mut r)?;
    let antennas = read_u32(&mut r)?;
    let subcarriers = read_u32(&mut r)?;
    r.read_exact(&mut b8)?;
    let sample_count = u64::from_le_bytes(b8);
    r.read_exact(&mut b8)?;
    let noise_var = f64::from_le_bytes(b8);
    r.read_exact(&mut b8)?;
    let seed = u64::from_le_bytes(b8);
    let header =
        DatasetHeader { bs_count, slots, antennas, subcarriers, sample_count, noise_var, seed };

    let per_bs = slots as usize * antennas as usize * subcarriers as usize;
    let mut records = Vec::with_capacity(sample_count as usize);
    for _ in 0..sample_count {
        let mut position = [0.0f64; 3];
        for c in &mut position {
            r.read_exact(&mut b8)?;
            *c = f64::from_le_bytes(b8);
        }
        let mut observations = Vec::with_capacity(bs_count as usize);
        for _ in 0..bs_count {
            let mut data = Vec::with_capacity(per_bs);
            for _ in 0..per_bs {
                r.read_exact(&mut b4)?;
                let re = f32::from_le_bytes(b4) as f64;
                r.read_exact(&mut b4)?;
                let im = f32::from_le_bytes(b4) as f64;
                data.push(Complex64::new(re, im));
            }
            let tensor = Array3::from_shape_vec(
                (slots as usize, antennas as usize, subcarriers as usize),
                data,
            )
            .map_err(|e| ChannelError::Corrupt(e.to_string()))?;
            observations.push(tensor);
        }
        records.push(DatasetRecord { position, observations });
    }
    Ok((header, records))
}
