//! Two-stage training of the edge–cloud positioning system.
//!
//! Stage I trains one autoencoder per BS on its own estimated CSI — the
//! negative normalized-correlation reconstruction loss needs no position
//! labels, so each BS learns locally and independently. The decoders exist
//! only to give the encoders a training signal and are discarded afterwards.
//!
//! Between the stages, the fronthaul quantizer step of every BS is
//! calibrated from the magnitude distribution of the latent coefficients its
//! trained encoder emits.
//!
//! Stage II attaches the cloud fusion network, pushes every latent through
//! the straight-through quantizer, and minimizes the frequency-weighted
//! position loss end to end; labels enter only through that loss. The
//! quantizer rounds in the forward pass while its backward pass is the
//! identity on the in-range coefficients, so encoder gradients flow through
//! the rounding unchanged.
//!
//! All sample streams derive from the scenario seed, so a (config, seed)
//! pair determines every drawn position, path set, noise sample, and
//! parameter init — two runs of the same stage produce bit-identical
//! parameters.

use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{
    load_params, save_params, AdamConfig, Bound, CheckpointError, Graph, GraphError, NodeId,
    ParamSet, Tensor,
};
use crate::channel::{stream_snapshot, unit_pilots, BsSite, ScenarioConfig};
use crate::codec::{self, CodecError, FronthaulMessage, QuantizerConfig};
use crate::encoder::{encode_graph, feature_matrix, init_network, run_encoder, EncoderConfig};
use crate::estimation::{CovarianceBank, EstimationError};
use crate::fusion::{
    compute_mask, cu_forward_graph, infer, init_cu, wmse_loss_graph, FusionConfig, FusionError,
};
use crate::preprocess::{preprocess, PreprocessedCsi};
use crate::seeds::{self, stream};

/// Parameter-name prefix of the BS-`l` encoder.
pub fn encoder_prefix(l: usize) -> String {
    format!("bs{l}.enc")
}

/// Parameter-name prefix of the BS-`l` decoder (Stage I only).
pub fn decoder_prefix(l: usize) -> String {
    format!("bs{l}.dec")
}

/// Parameter-name prefix of the cloud fusion network.
pub const CU_PREFIX: &str = "cu";

/// Init-stream index of the CU parameters; BS `l` uses index `l`, so any
/// station count below this constant cannot collide.
pub const CU_INIT_INDEX: u64 = 0x100;

fn quant_name(l: usize) -> String {
    format!("bs{l}.quant")
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training setup: {0}")]
    BadConfig(String),
    #[error("non-finite loss in stage {stage}, epoch {epoch}, batch {batch}")]
    Diverged { stage: u8, epoch: usize, batch: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Estimation(#[from] EstimationError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Epoch/batch/rate settings of one training stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub epochs: usize,
    /// Fresh samples drawn per epoch; an epoch runs
    /// ⌊samples_per_epoch / batch_size⌋ full batches.
    pub samples_per_epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epochs between validation passes; the final epoch always validates.
    pub validation_period: usize,
    pub validation_samples: usize,
}

impl StageConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.samples_per_epoch == 0 || self.batch_size == 0 {
            return Err(TrainError::BadConfig("counts must be positive".into()));
        }
        if self.batch_size > self.samples_per_epoch {
            return Err(TrainError::BadConfig(format!(
                "batch size {} exceeds samples per epoch {}",
                self.batch_size, self.samples_per_epoch
            )));
        }
        if self.validation_period == 0 || self.validation_period > self.epochs {
            return Err(TrainError::BadConfig(format!(
                "validation period {} outside 1..={}",
                self.validation_period, self.epochs
            )));
        }
        if self.validation_samples == 0 {
            return Err(TrainError::BadConfig("validation set is empty".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(TrainError::BadConfig(format!(
                "learning rate {} not positive",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Fronthaul quantizer calibration settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantCalibration {
    pub bits: u32,
    /// Percentile of |latent coefficient| mapped to the clip edge.
    pub percentile: f64,
    /// Calibration snapshots drawn from the dedicated stream.
    pub samples: usize,
}

/// One supervised example: the true position and the per-BS preprocessed
/// LMMSE channel estimates computed from noisy pilot observations.
#[derive(Clone, Debug)]
pub struct TrainingSample {
    pub snapshot_id: u64,
    pub position: [f64; 3],
    pub per_bs: Vec<PreprocessedCsi>,
}

/// Snapshot → LMMSE estimate → preprocess, for every BS. This is the whole
/// edge-side signal path in front of the encoders, shared by training,
/// calibration, and evaluation; samples are addressed by (stream tag,
/// index), so any subset can be regenerated independently.
pub struct SamplePipeline {
    scenario: ScenarioConfig,
    sites: Vec<BsSite>,
    bank: CovarianceBank,
    pilots: Vec<Complex64>,
}

impl SamplePipeline {
    pub fn new(scenario: ScenarioConfig, bank: CovarianceBank) -> Result<Self, TrainError> {
        scenario.validate().map_err(|e| TrainError::BadConfig(e.to_string()))?;
        if bank.bs_count() != scenario.bs_count
            || bank.antennas() != scenario.antennas()
            || bank.subcarriers() != scenario.subcarriers
        {
            return Err(TrainError::BadConfig(format!(
                "covariance bank is ({}, {}, {}), scenario needs ({}, {}, {})",
                bank.bs_count(),
                bank.antennas(),
                bank.subcarriers(),
                scenario.bs_count,
                scenario.antennas(),
                scenario.subcarriers
            )));
        }
        let sites = scenario.bs_sites();
        let pilots = unit_pilots(scenario.subcarriers);
        Ok(Self { scenario, sites, bank, pilots })
    }

    pub fn scenario(&self) -> &ScenarioConfig {
        &self.scenario
    }

    pub fn bank(&self) -> &CovarianceBank {
        &self.bank
    }

    /// Generates sample `index` of the stream tagged `tag`.
    pub fn sample(&self, tag: u64, index: u64) -> Result<TrainingSample, TrainError> {
        let snap = stream_snapshot(&self.scenario, &self.sites, tag, index);
        let mut per_bs = Vec::with_capacity(self.scenario.bs_count);
        for (l, y) in snap.observations.iter().enumerate() {
            let estimate = self.bank.estimate(l, y, &self.pilots, self.scenario.noise_var)?;
            per_bs.push(preprocess(&estimate));
        }
        Ok(TrainingSample { snapshot_id: snap.id, position: snap.position, per_bs })
    }

    /// A contiguous run of samples from one stream.
    pub fn batch(&self, tag: u64, start: u64, count: usize) -> Result<Vec<TrainingSample>, TrainError> {
        (0..count).map(|i| self.sample(tag, start + i as u64)).collect()
    }

    /// Generates sample `index` of stream `tag` at a caller-chosen user
    /// position (trajectory points, probe grids).
    pub fn sample_at(
        &self,
        position: [f64; 3],
        tag: u64,
        index: u64,
    ) -> Result<TrainingSample, TrainError> {
        let seed = seeds::derive(self.scenario.seed, tag, index);
        let snap = crate::channel::snapshot_at(&self.scenario, &self.sites, index, seed, position);
        let mut per_bs = Vec::with_capacity(self.scenario.bs_count);
        for (l, y) in snap.observations.iter().enumerate() {
            let estimate = self.bank.estimate(l, y, &self.pilots, self.scenario.noise_var)?;
            per_bs.push(preprocess(&estimate));
        }
        Ok(TrainingSample { snapshot_id: snap.id, position: snap.position, per_bs })
    }
}

// ─── Stage I: per-BS self-supervised autoencoding ────────────────────────

/// Result of Stage I: trained encoders (decoders already stripped) and the
/// loss record.
#[derive(Clone, Debug)]
pub struct Stage1Report {
    /// All `bs{l}.enc.*` parameters.
    pub encoders: ParamSet,
    /// Mean training loss per epoch (reconstruction loss averaged over the
    /// epoch's batches, summed across stations).
    pub epoch_loss: Vec<f64>,
    /// (1-based epoch, per-BS mean validation loss) at each validation pass.
    pub validation: Vec<(usize, Vec<f64>)>,
}

/// Called after each validation pass with the 1-based epoch and the full
/// parameter state, so callers can checkpoint mid-run.
pub type ValidationObserver<'a> = &'a mut dyn FnMut(usize, &ParamSet) -> Result<(), TrainError>;

/// Trains one autoencoder per BS on reconstruction of its own preprocessed
/// CSI. No labels are used. Encoders and decoders init from the per-BS init
/// streams, so stations start (and end) with distinct parameters.
pub fn run_stage1(
    pipeline: &SamplePipeline,
    encoder_cfg: &EncoderConfig,
    stage: &StageConfig,
    mut observer: Option<ValidationObserver>,
) -> Result<Stage1Report, TrainError> {
    stage.validate()?;
    check_encoder_cfg(pipeline.scenario(), encoder_cfg)?;
    let scenario = pipeline.scenario();
    let stations = scenario.bs_count;

    let mut params = ParamSet::new();
    for l in 0..stations {
        let mut rng = seeds::stream_rng(scenario.seed, stream::INIT, l as u64);
        params.absorb(init_network(encoder_cfg, &encoder_prefix(l), false, &mut rng)?)?;
        params.absorb(init_network(encoder_cfg, &decoder_prefix(l), true, &mut rng)?)?;
    }

    let adam = AdamConfig::with_learning_rate(stage.learning_rate);
    let valid = pipeline.batch(stream::STAGE1_VALID, 0, stage.validation_samples)?;
    let batches = stage.samples_per_epoch / stage.batch_size;
    let mut epoch_loss = Vec::with_capacity(stage.epochs);
    let mut validation = Vec::new();

    for epoch in 0..stage.epochs {
        let mut loss_sum = 0.0;
        for batch in 0..batches {
            let start = (epoch * stage.samples_per_epoch + batch * stage.batch_size) as u64;
            let samples = pipeline.batch(stream::STAGE1_DATA, start, stage.batch_size)?;

            let mut g = Graph::new();
            let bound = g.bind(&params)?;
            let mut total: Option<NodeId> = None;
            for sample in &samples {
                for (l, csi) in sample.per_bs.iter().enumerate() {
                    let loss = crate::encoder::reconstruction_loss_graph(
                        &mut g,
                        &bound,
                        encoder_cfg,
                        &encoder_prefix(l),
                        &decoder_prefix(l),
                        csi,
                    )?;
                    total = Some(match total {
                        None => loss,
                        Some(t) => g.add(t, loss)?,
                    });
                }
            }
            let total = total.expect("batch is nonempty");
            let mean = g.scale(total, 1.0 / stage.batch_size as f64)?;
            let value = g.value(mean).item()?;
            if !value.is_finite() {
                return Err(TrainError::Diverged { stage: 1, epoch, batch });
            }
            loss_sum += value;
            g.backward(mean)?;
            params.adam_step(&g.param_grads(), &adam, |_| true)?;
        }
        epoch_loss.push(loss_sum / batches as f64);

        if (epoch + 1) % stage.validation_period == 0 || epoch + 1 == stage.epochs {
            let losses = stage1_validation(&params, encoder_cfg, &valid, stations)?;
            validation.push((epoch + 1, losses));
            if let Some(hook) = observer.as_mut() {
                hook(epoch + 1, &params)?;
            }
        }
    }

    let mut encoders = ParamSet::new();
    for (name, tensor) in params.iter() {
        if name.contains(".enc.") {
            encoders.insert(name, tensor.clone())?;
        }
    }
    Ok(Stage1Report { encoders, epoch_loss, validation })
}

/// Mean reconstruction loss per BS over a fixed sample set.
fn stage1_validation(
    params: &ParamSet,
    encoder_cfg: &EncoderConfig,
    samples: &[TrainingSample],
    stations: usize,
) -> Result<Vec<f64>, TrainError> {
    let mut losses = vec![0.0; stations];
    for sample in samples {
        let mut g = Graph::new();
        let bound = g.bind(params)?;
        for (l, csi) in sample.per_bs.iter().enumerate() {
            let loss = crate::encoder::reconstruction_loss_graph(
                &mut g,
                &bound,
                encoder_cfg,
                &encoder_prefix(l),
                &decoder_prefix(l),
                csi,
            )?;
            losses[l] += g.value(loss).item()?;
        }
    }
    for v in &mut losses {
        *v /= samples.len() as f64;
    }
    Ok(losses)
}

// ─── Quantizer calibration ───────────────────────────────────────────────

/// Calibrates one fronthaul quantizer per BS: runs the trained encoders over
/// the calibration stream, pools each station's latent coefficients, and
/// maps the configured |coefficient| percentile to the clip edge.
pub fn calibrate_quantizers(
    pipeline: &SamplePipeline,
    encoder_cfg: &EncoderConfig,
    encoders: &ParamSet,
    calib: &QuantCalibration,
) -> Result<Vec<QuantizerConfig>, TrainError> {
    if calib.samples == 0 {
        return Err(TrainError::BadConfig("calibration set is empty".into()));
    }
    let stations = pipeline.scenario().bs_count;
    let mut coeffs: Vec<Vec<f64>> = vec![Vec::new(); stations];
    for index in 0..calib.samples {
        let sample = pipeline.sample(stream::QUANT_CALIB, index as u64)?;
        for (l, csi) in sample.per_bs.iter().enumerate() {
            let z = run_encoder(encoders, encoder_cfg, &encoder_prefix(l), &csi.features)?;
            coeffs[l].extend_from_slice(z.data());
        }
    }
    coeffs
        .iter()
        .map(|c| {
            let step = codec::calibrate_step(c, calib.bits, calib.percentile)?;
            Ok(QuantizerConfig::new(calib.bits, step)?)
        })
        .collect()
}

// ─── Stage II: end-to-end position training ──────────────────────────────

/// Affine map from the normalized network output to region coordinates:
/// p̂ = center + scale · raw. Putting the region geometry into fixed output
/// constants keeps every trained coefficient O(1) — at init the network
/// predicts near the region center instead of the coordinate origin, and
/// the optimizer never has to push a bias across tens of meters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OutputAffine {
    pub center: [f64; 3],
    pub scale: f64,
}

impl OutputAffine {
    /// Center of the user region, with half the region diagonal as scale so
    /// every reachable position maps to a raw output inside the unit ball.
    pub fn for_scenario(scenario: &ScenarioConfig) -> Self {
        Self { center: scenario.region_center(), scale: scenario.region_diagonal() / 2.0 }
    }

    pub fn apply(&self, raw: [f64; 3]) -> [f64; 3] {
        [
            self.center[0] + self.scale * raw[0],
            self.center[1] + self.scale * raw[1],
            self.center[2] + self.scale * raw[2],
        ]
    }
}

/// What Stage II trains and how the fronthaul behaves during it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stage2Options {
    /// `false` freezes the encoders and trains the CU network alone
    /// (the split-training ablation).
    pub update_encoders: bool,
}

/// One validation pass: mean and 90th-percentile (nearest-rank) 3D error
/// of the final-subcarrier estimate, in meters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValidationPoint {
    /// 1-based epoch the pass ran after; 0 is the untrained network.
    pub epoch: usize,
    pub mean_error: f64,
    pub e90: f64,
}

/// Result of Stage II: the full parameter set and the loss/error record.
#[derive(Clone, Debug)]
pub struct Stage2Report {
    /// All `bs{l}.enc.*` and `cu.*` parameters.
    pub params: ParamSet,
    /// Mean training loss per epoch (position loss, m²).
    pub epoch_loss: Vec<f64>,
    /// Validation record; entry 0 is the untrained network (epoch 0).
    pub validation: Vec<ValidationPoint>,
}

impl Stage2Report {
    /// Mean validation error of the untrained network.
    pub fn initial_error(&self) -> f64 {
        self.validation.first().map(|v| v.mean_error).unwrap_or(f64::NAN)
    }

    /// Mean validation error after the last epoch.
    pub fn final_error(&self) -> f64 {
        self.validation.last().map(|v| v.mean_error).unwrap_or(f64::NAN)
    }
}

/// Trains encoders and CU network end to end on the position loss.
///
/// `encoders`: Stage I output, or `None` to initialize fresh encoders from
/// the same per-BS init streams (joint training from scratch).
/// `quantizers`: per-BS fronthaul quantizers applied inside the graph with
/// straight-through gradients, or `None` for the lossless upper bound.
pub fn run_stage2(
    pipeline: &SamplePipeline,
    encoder_cfg: &EncoderConfig,
    fusion_cfg: &FusionConfig,
    encoders: Option<&ParamSet>,
    quantizers: Option<&[QuantizerConfig]>,
    options: Stage2Options,
    stage: &StageConfig,
    mut observer: Option<ValidationObserver>,
) -> Result<Stage2Report, TrainError> {
    stage.validate()?;
    check_encoder_cfg(pipeline.scenario(), encoder_cfg)?;
    check_fusion_cfg(pipeline.scenario(), encoder_cfg, fusion_cfg)?;
    let scenario = pipeline.scenario();
    let stations = scenario.bs_count;
    if let Some(q) = quantizers {
        if q.len() != stations {
            return Err(TrainError::BadConfig(format!(
                "{} quantizers for {stations} stations",
                q.len()
            )));
        }
    }

    let mut params = ParamSet::new();
    match encoders {
        Some(trained) => {
            for l in 0..stations {
                let prefix = encoder_prefix(l);
                let mut found = false;
                for (name, tensor) in trained.iter() {
                    if name.starts_with(&prefix) {
                        params.insert(name, tensor.clone())?;
                        found = true;
                    }
                }
                if !found {
                    return Err(TrainError::BadConfig(format!(
                        "encoder parameters for BS {l} missing"
                    )));
                }
            }
        }
        None => {
            for l in 0..stations {
                let mut rng = seeds::stream_rng(scenario.seed, stream::INIT, l as u64);
                params.absorb(init_network(encoder_cfg, &encoder_prefix(l), false, &mut rng)?)?;
            }
        }
    }
    let mut cu_rng = seeds::stream_rng(scenario.seed, stream::INIT, CU_INIT_INDEX);
    params.absorb(init_cu(fusion_cfg, CU_PREFIX, &mut cu_rng)?)?;

    let affine = OutputAffine::for_scenario(scenario);
    let adam = AdamConfig::with_learning_rate(stage.learning_rate);
    let keep = |name: &str| options.update_encoders || name.starts_with(CU_PREFIX);
    let valid = pipeline.batch(stream::STAGE2_VALID, 0, stage.validation_samples)?;
    let batches = stage.samples_per_epoch / stage.batch_size;
    let mut epoch_loss = Vec::with_capacity(stage.epochs);
    let mut validation = Vec::new();
    validation.push(stage2_validation(&params, encoder_cfg, fusion_cfg, quantizers, &affine, &valid, 0)?);
    if let Some(hook) = observer.as_mut() {
        hook(0, &params)?;
    }

    for epoch in 0..stage.epochs {
        let mut loss_sum = 0.0;
        for batch in 0..batches {
            let start = (epoch * stage.samples_per_epoch + batch * stage.batch_size) as u64;
            let samples = pipeline.batch(stream::STAGE2_DATA, start, stage.batch_size)?;

            let mut g = Graph::new();
            let bound = g.bind(&params)?;
            let mut total: Option<NodeId> = None;
            for sample in &samples {
                let estimates = position_forward(
                    &mut g,
                    &bound,
                    encoder_cfg,
                    fusion_cfg,
                    quantizers,
                    &affine,
                    sample,
                )?;
                let loss = wmse_loss_graph(&mut g, sample.position, &estimates)?;
                total = Some(match total {
                    None => loss,
                    Some(t) => g.add(t, loss)?,
                });
            }
            let total = total.expect("batch is nonempty");
            let mean = g.scale(total, 1.0 / stage.batch_size as f64)?;
            let value = g.value(mean).item()?;
            if !value.is_finite() {
                return Err(TrainError::Diverged { stage: 2, epoch, batch });
            }
            loss_sum += value;
            g.backward(mean)?;
            params.adam_step(&g.param_grads(), &adam, keep)?;
        }
        epoch_loss.push(loss_sum / batches as f64);

        if (epoch + 1) % stage.validation_period == 0 || epoch + 1 == stage.epochs {
            let point = stage2_validation(
                &params,
                encoder_cfg,
                fusion_cfg,
                quantizers,
                &affine,
                &valid,
                epoch + 1,
            )?;
            validation.push(point);
            if let Some(hook) = observer.as_mut() {
                hook(epoch + 1, &params)?;
            }
        }
    }

    Ok(Stage2Report { params, epoch_loss, validation })
}

/// Builds the whole per-sample forward pass on the graph: per-BS encode,
/// optional straight-through quantization, mask from the gain indicators,
/// CU fusion and recurrence, and the affine map to region coordinates.
/// Returns the per-subcarrier position estimates (1×3 nodes), in meters.
fn position_forward(
    g: &mut Graph,
    bound: &Bound,
    encoder_cfg: &EncoderConfig,
    fusion_cfg: &FusionConfig,
    quantizers: Option<&[QuantizerConfig]>,
    affine: &OutputAffine,
    sample: &TrainingSample,
) -> Result<Vec<NodeId>, TrainError> {
    let d = fusion_cfg.latent_len();
    let mut latents = Vec::with_capacity(sample.per_bs.len());
    let mut gains = Vec::with_capacity(sample.per_bs.len());
    for (l, csi) in sample.per_bs.iter().enumerate() {
        let x = g.constant(feature_matrix(&csi.features));
        let z = encode_graph(g, bound, &encoder_prefix(l), encoder_cfg, x)?;
        let flat = g.reshape(z, 1, d)?;
        let shipped = match quantizers {
            Some(q) => g.ste_quantize(flat, q[l])?,
            None => flat,
        };
        latents.push(shipped);
        gains.push(csi.gain);
    }
    let mask = compute_mask(&gains, fusion_cfg.beta);
    let forward = cu_forward_graph(g, bound, fusion_cfg, CU_PREFIX, &latents, &mask)?;

    let center = g.constant(Tensor::matrix(1, 3, affine.center.to_vec())?);
    let mut estimates = Vec::with_capacity(forward.estimates.len());
    for &raw in &forward.estimates {
        let scaled = g.scale(raw, affine.scale)?;
        estimates.push(g.add(scaled, center)?);
    }
    Ok(estimates)
}

/// Final-subcarrier 3D error statistics over a fixed sample set, using the
/// training-path forward (graph quantizer, full-precision gain indicators).
fn stage2_validation(
    params: &ParamSet,
    encoder_cfg: &EncoderConfig,
    fusion_cfg: &FusionConfig,
    quantizers: Option<&[QuantizerConfig]>,
    affine: &OutputAffine,
    samples: &[TrainingSample],
    epoch: usize,
) -> Result<ValidationPoint, TrainError> {
    let mut errors = Vec::with_capacity(samples.len());
    for sample in samples {
        let mut g = Graph::new();
        let bound = g.bind(params)?;
        let estimates =
            position_forward(&mut g, &bound, encoder_cfg, fusion_cfg, quantizers, affine, sample)?;
        let last = *estimates.last().expect("at least one subcarrier");
        let v = g.value(last).data();
        let e = [
            v[0] - sample.position[0],
            v[1] - sample.position[1],
            v[2] - sample.position[2],
        ];
        errors.push((e[0] * e[0] + e[1] * e[1] + e[2] * e[2]).sqrt());
    }
    let mean_error = errors.iter().sum::<f64>() / errors.len() as f64;
    let mut sorted = errors;
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite errors"));
    let e90 = sorted[codec::nearest_rank(sorted.len(), 90.0)? - 1];
    Ok(ValidationPoint { epoch, mean_error, e90 })
}

fn check_encoder_cfg(scenario: &ScenarioConfig, cfg: &EncoderConfig) -> Result<(), TrainError> {
    let expected = 2 * scenario.slots * scenario.antennas();
    if cfg.input_channels != expected {
        return Err(TrainError::BadConfig(format!(
            "encoder expects {} input channels, scenario produces {expected}",
            cfg.input_channels
        )));
    }
    Ok(())
}

fn check_fusion_cfg(
    scenario: &ScenarioConfig,
    encoder_cfg: &EncoderConfig,
    cfg: &FusionConfig,
) -> Result<(), TrainError> {
    if cfg.bs_count != scenario.bs_count
        || cfg.subcarriers != scenario.subcarriers
        || cfg.latent_dim != encoder_cfg.latent_dim
    {
        return Err(TrainError::BadConfig(format!(
            "fusion network is (L={}, N_sc={}, d_z={}), pipeline produces (L={}, N_sc={}, d_z={})",
            cfg.bs_count,
            cfg.subcarriers,
            cfg.latent_dim,
            scenario.bs_count,
            scenario.subcarriers,
            encoder_cfg.latent_dim
        )));
    }
    Ok(())
}

// ─── Trained system ──────────────────────────────────────────────────────

/// A trained end-to-end system: scenario, network shapes, parameters, and
/// (for fronthaul-limited deployments) the per-BS quantizers.
#[derive(Clone, Debug)]
pub struct SystemModel {
    pub scenario: ScenarioConfig,
    pub encoder_cfg: EncoderConfig,
    pub fusion_cfg: FusionConfig,
    pub params: ParamSet,
    /// `None` for the lossless (unquantized fronthaul) variant.
    pub quantizers: Option<Vec<QuantizerConfig>>,
}

impl SystemModel {
    pub fn output_affine(&self) -> OutputAffine {
        OutputAffine::for_scenario(&self.scenario)
    }

    /// Edge side of one BS: encode the preprocessed CSI and pack the
    /// fronthaul message. Requires quantizers.
    pub fn encode_message(
        &self,
        l: usize,
        snapshot_id: u64,
        csi: &PreprocessedCsi,
    ) -> Result<FronthaulMessage, TrainError> {
        let quant = self
            .quantizers
            .as_ref()
            .ok_or_else(|| TrainError::BadConfig("lossless model has no quantizers".into()))?;
        let z = run_encoder(&self.params, &self.encoder_cfg, &encoder_prefix(l), &csi.features)?;
        Ok(FronthaulMessage::build(l as u16, snapshot_id, &quant[l], csi.gain as f32, z.data())?)
    }

    /// Edge side of the whole snapshot: one message per BS.
    pub fn messages(&self, sample: &TrainingSample) -> Result<Vec<FronthaulMessage>, TrainError> {
        sample
            .per_bs
            .iter()
            .enumerate()
            .map(|(l, csi)| self.encode_message(l, sample.snapshot_id, csi))
            .collect()
    }

    /// Cloud side: unpack messages, fuse, and map to region coordinates.
    /// Returns the final position estimate and the per-subcarrier sequence.
    pub fn localize_messages(
        &self,
        messages: &[FronthaulMessage],
    ) -> Result<([f64; 3], Vec<[f64; 3]>), TrainError> {
        let quant = self
            .quantizers
            .as_ref()
            .ok_or_else(|| TrainError::BadConfig("lossless model has no quantizers".into()))?;
        let (raw, sequence) = infer(&self.params, &self.fusion_cfg, CU_PREFIX, quant, messages)?;
        let affine = self.output_affine();
        Ok((affine.apply(raw), sequence.into_iter().map(|r| affine.apply(r)).collect()))
    }

    /// Cloud side of the lossless variant: latents arrive unquantized with
    /// full-precision gain indicators.
    pub fn localize_latents(
        &self,
        latents: &[Vec<f64>],
        gains: &[f64],
    ) -> Result<([f64; 3], Vec<[f64; 3]>), TrainError> {
        if latents.len() != self.fusion_cfg.bs_count || gains.len() != self.fusion_cfg.bs_count {
            return Err(TrainError::BadConfig(format!(
                "expected {} latents and gains, got {} and {}",
                self.fusion_cfg.bs_count,
                latents.len(),
                gains.len()
            )));
        }
        let d = self.fusion_cfg.latent_len();
        let mut g = Graph::new();
        let bound = g.bind_filtered(&self.params, |n| n.starts_with(CU_PREFIX))?;
        let mut nodes = Vec::with_capacity(latents.len());
        for z in latents {
            nodes.push(g.constant(Tensor::matrix(1, d, z.clone())?));
        }
        let mask = compute_mask(gains, self.fusion_cfg.beta);
        let forward = cu_forward_graph(&mut g, &bound, &self.fusion_cfg, CU_PREFIX, &nodes, &mask)?;
        let affine = self.output_affine();
        let sequence: Vec<[f64; 3]> = forward
            .estimates
            .iter()
            .map(|&e| {
                let v = g.value(e).data();
                affine.apply([v[0], v[1], v[2]])
            })
            .collect();
        let last = *sequence.last().expect("at least one subcarrier");
        Ok((last, sequence))
    }

    /// Full system response to one sample: the fronthaul message path when
    /// quantizers are present, the raw-latent path otherwise.
    pub fn localize(&self, sample: &TrainingSample) -> Result<([f64; 3], Vec<[f64; 3]>), TrainError> {
        if self.quantizers.is_some() {
            let messages = self.messages(sample)?;
            self.localize_messages(&messages)
        } else {
            let mut latents = Vec::with_capacity(sample.per_bs.len());
            let mut gains = Vec::with_capacity(sample.per_bs.len());
            for (l, csi) in sample.per_bs.iter().enumerate() {
                let z =
                    run_encoder(&self.params, &self.encoder_cfg, &encoder_prefix(l), &csi.features)?;
                latents.push(z.data().to_vec());
                gains.push(csi.gain);
            }
            self.localize_latents(&latents, &gains)
        }
    }

    /// Writes parameters plus one `bs{l}.quant` row ([bits, step]) per BS
    /// when quantized. Scenario and network shapes live in the run config,
    /// not the checkpoint.
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let mut stored = self.params.clone();
        if let Some(quant) = &self.quantizers {
            for (l, q) in quant.iter().enumerate() {
                stored.insert(
                    &quant_name(l),
                    Tensor::matrix(1, 2, vec![q.bits() as f64, q.step()])?,
                )?;
            }
        }
        Ok(save_params(path, &stored)?)
    }

    /// Reads a checkpoint written by [`SystemModel::save`], reattaching the
    /// configuration the checkpoint was trained under.
    pub fn load(
        path: &Path,
        scenario: ScenarioConfig,
        encoder_cfg: EncoderConfig,
        fusion_cfg: FusionConfig,
    ) -> Result<Self, TrainError> {
        let stored = load_params(path)?;
        let mut params = ParamSet::new();
        let mut quant_rows: Vec<(usize, Tensor)> = Vec::new();
        for (name, tensor) in stored.iter() {
            match name.strip_prefix("bs").and_then(|rest| rest.strip_suffix(".quant")) {
                Some(idx) if idx.chars().all(|c| c.is_ascii_digit()) => {
                    let l: usize = idx.parse().expect("digits only");
                    quant_rows.push((l, tensor.clone()));
                }
                _ => params.insert(name, tensor.clone())?,
            }
        }
        let quantizers = if quant_rows.is_empty() {
            None
        } else {
            if quant_rows.len() != scenario.bs_count {
                return Err(TrainError::BadConfig(format!(
                    "checkpoint carries {} quantizers for {} stations",
                    quant_rows.len(),
                    scenario.bs_count
                )));
            }
            quant_rows.sort_by_key(|&(l, _)| l);
            let mut quant = Vec::with_capacity(quant_rows.len());
            for (l, row) in quant_rows {
                if row.shape() != [1, 2] {
                    return Err(TrainError::BadConfig(format!(
                        "quantizer row for BS {l} has shape {:?}",
                        row.shape()
                    )));
                }
                quant.push(QuantizerConfig::new(row.data()[0] as u32, row.data()[1])?);
            }
            Some(quant)
        };
        for l in 0..scenario.bs_count {
            let probe = format!("{}.in.w", encoder_prefix(l));
            if !params.contains(&probe) {
                return Err(TrainError::BadConfig(format!(
                    "checkpoint is missing encoder parameters for BS {l}"
                )));
            }
        }
        if !params.contains("cu.b0") {
            return Err(TrainError::BadConfig("checkpoint is missing CU parameters".into()));
        }
        Ok(Self { scenario, encoder_cfg, fusion_cfg, params, quantizers })
    }
}
