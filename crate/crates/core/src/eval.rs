//! Evaluation of trained systems: error metrics, fronthaul accounting,
//! payload/accuracy trade-off tables, trajectory tracking, and report files.
//!
//! Every metric is recomputed from first principles at call time — payload
//! sizes from the configured dimensions, errors from fresh forward passes
//! through the deployed message path — so reports cannot drift out of sync
//! with the model that produced them. Report emission is a pure function of
//! the report value; re-emitting writes byte-identical files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::ScenarioConfig;
use crate::codec::{self, CodecError};
use crate::encoder::EncoderConfig;
use crate::fusion::FusionConfig;
use crate::seeds::stream;
use crate::training::{
    SamplePipeline, Stage1Report, Stage2Report, SystemModel, TrainError, TrainingSample,
};

/// Grid resolution of the error CDF.
pub const CDF_BINS: usize = 100;

/// Full turns of the evaluation spiral.
pub const TRAJECTORY_REVOLUTIONS: f64 = 3.0;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid evaluation input: {0}")]
    BadInput(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("report serialization failed: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ─── Fronthaul accounting ────────────────────────────────────────────────

/// Per-snapshot fronthaul cost of one BS, recomputed from dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PayloadSummary {
    /// Raw-CSI reference cost B_CSI (bits).
    pub csi_bits: u64,
    /// Shipped payload (bits): quantized embedding, or B_CSI when raw CSI
    /// is forwarded.
    pub embedding_bits: u64,
    /// Payload plus the gain side channel (bits).
    pub total_bits: u64,
    /// η = embedding / raw CSI; 1 for the raw-CSI reference.
    pub ratio: f64,
    /// η including the gain side channel.
    pub total_ratio: f64,
}

/// Fronthaul cost for a latent of `latent_len` coefficients at `bits` bits
/// each, against the raw-CSI baseline of the scenario. `None` bits is the
/// uncompressed reference (raw CSI shipped, no side channel).
pub fn payload_summary(
    scenario: &ScenarioConfig,
    latent_len: usize,
    bits: Option<u32>,
) -> PayloadSummary {
    let csi = codec::csi_bits(scenario.slots, scenario.antennas(), scenario.subcarriers);
    match bits {
        Some(q) => {
            let emb = codec::embedding_bits(latent_len, q);
            PayloadSummary {
                csi_bits: csi,
                embedding_bits: emb,
                total_bits: emb + codec::GAIN_BITS as u64,
                ratio: codec::compression_ratio(
                    latent_len,
                    q,
                    scenario.slots,
                    scenario.antennas(),
                    scenario.subcarriers,
                ),
                total_ratio: codec::total_ratio(
                    latent_len,
                    q,
                    scenario.slots,
                    scenario.antennas(),
                    scenario.subcarriers,
                ),
            }
        }
        None => PayloadSummary {
            csi_bits: csi,
            embedding_bits: csi,
            total_bits: csi,
            ratio: 1.0,
            total_ratio: 1.0,
        },
    }
}

// ─── Error metrics ───────────────────────────────────────────────────────

/// 3D Euclidean error of each estimate against its truth.
pub fn position_errors(truths: &[[f64; 3]], estimates: &[[f64; 3]]) -> Result<Vec<f64>, EvalError> {
    if truths.len() != estimates.len() {
        return Err(EvalError::BadInput(format!(
            "{} truths vs {} estimates",
            truths.len(),
            estimates.len()
        )));
    }
    Ok(truths
        .iter()
        .zip(estimates)
        .map(|(t, e)| {
            let d = [e[0] - t[0], e[1] - t[1], e[2] - t[2]];
            (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
        })
        .collect())
}

/// Mean and 90th-percentile (nearest-rank) of an error sample.
pub fn error_statistics(errors: &[f64]) -> Result<(f64, f64), EvalError> {
    if errors.is_empty() {
        return Err(EvalError::BadInput("empty error sample".into()));
    }
    if let Some(&bad) = errors.iter().find(|e| !e.is_finite() || **e < 0.0) {
        return Err(EvalError::BadInput(format!("invalid error value {bad}")));
    }
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    let mut sorted = errors.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite errors"));
    let e90 = sorted[codec::nearest_rank(sorted.len(), 90.0)? - 1];
    Ok((mean, e90))
}

/// One row of the empirical error CDF.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CdfPoint {
    pub error: f64,
    pub fraction: f64,
}

/// Empirical CDF on a uniform grid from 0 to the largest error; the last
/// grid point covers every sample, so its fraction is exactly 1.
pub fn cdf_table(errors: &[f64], bins: usize) -> Result<Vec<CdfPoint>, EvalError> {
    if errors.is_empty() || bins == 0 {
        return Err(EvalError::BadInput("empty error sample or zero bins".into()));
    }
    let max = errors.iter().fold(0.0f64, |m, &e| m.max(e));
    let n = errors.len() as f64;
    Ok((0..=bins)
        .map(|k| {
            let t = max * k as f64 / bins as f64;
            let covered = errors.iter().filter(|&&e| e <= t).count() as f64;
            CdfPoint { error: t, fraction: covered / n }
        })
        .collect())
}

// ─── System evaluation ───────────────────────────────────────────────────

/// Everything the metrics were computed under.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalContext {
    pub scenario: ScenarioConfig,
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    /// Fronthaul bit width; `None` for the lossless variant.
    pub quant_bits: Option<u32>,
    pub samples: usize,
}

/// Evaluation result: context echo, fronthaul accounting, error metrics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub context: EvalContext,
    pub payload: PayloadSummary,
    pub mean_error: f64,
    pub e90: f64,
    pub errors: Vec<f64>,
    pub cdf: Vec<CdfPoint>,
}

/// Runs the deployed signal path over a test set and collects the error
/// metrics. Quantized models go through packed fronthaul messages;
/// lossless models ship raw latents.
pub fn evaluate(model: &SystemModel, samples: &[TrainingSample]) -> Result<EvalReport, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::BadInput("empty test set".into()));
    }
    let quant_bits = match &model.quantizers {
        Some(quant) => {
            let bits = quant[0].bits();
            if quant.iter().any(|q| q.bits() != bits) {
                return Err(EvalError::BadInput(
                    "stations use different fronthaul bit widths".into(),
                ));
            }
            Some(bits)
        }
        None => None,
    };
    let mut truths = Vec::with_capacity(samples.len());
    let mut estimates = Vec::with_capacity(samples.len());
    for sample in samples {
        let (estimate, _) = model.localize(sample)?;
        truths.push(sample.position);
        estimates.push(estimate);
    }
    let errors = position_errors(&truths, &estimates)?;
    let (mean_error, e90) = error_statistics(&errors)?;
    let cdf = cdf_table(&errors, CDF_BINS)?;
    Ok(EvalReport {
        context: EvalContext {
            scenario: model.scenario.clone(),
            encoder: model.encoder_cfg,
            fusion: model.fusion_cfg,
            quant_bits,
            samples: samples.len(),
        },
        payload: payload_summary(&model.scenario, model.fusion_cfg.latent_len(), quant_bits),
        mean_error,
        e90,
        errors,
        cdf,
    })
}

// ─── Payload/accuracy trade-off ──────────────────────────────────────────

/// One row of the payload/accuracy table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRow {
    /// `None` labels the lossless reference row.
    pub bits: Option<u32>,
    pub ratio: f64,
    pub total_ratio: f64,
    pub mean_error: f64,
    pub e90: f64,
}

/// Collapses evaluation reports (one per fronthaul setting) into the
/// trade-off table, preserving the caller's row order.
pub fn tradeoff_table(reports: &[EvalReport]) -> Vec<TradeoffRow> {
    reports
        .iter()
        .map(|r| TradeoffRow {
            bits: r.context.quant_bits,
            ratio: r.payload.ratio,
            total_ratio: r.payload.total_ratio,
            mean_error: r.mean_error,
            e90: r.e90,
        })
        .collect()
}

// ─── Trajectory tracking ─────────────────────────────────────────────────

/// Spiral shape: `points` samples along three revolutions around the
/// region center at fixed `radius`, height ramping linearly across
/// `height`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    pub points: usize,
    pub radius: f64,
    pub height: [f64; 2],
}

/// The spiral itself: point k at angle 6π·k/(P−1), so the first point sits
/// at (radius, 0, h_min) relative to the region center.
pub fn trajectory_points(
    scenario: &ScenarioConfig,
    spec: &TrajectorySpec,
) -> Result<Vec<[f64; 3]>, EvalError> {
    if spec.points < 2 {
        return Err(EvalError::BadInput(format!(
            "trajectory needs at least 2 points, got {}",
            spec.points
        )));
    }
    let center = scenario.region_center();
    let mut points = Vec::with_capacity(spec.points);
    for k in 0..spec.points {
        let f = k as f64 / (spec.points - 1) as f64;
        let angle = std::f64::consts::TAU * TRAJECTORY_REVOLUTIONS * f;
        let p = [
            center[0] + spec.radius * angle.cos(),
            center[1] + spec.radius * angle.sin(),
            spec.height[0] + (spec.height[1] - spec.height[0]) * f,
        ];
        let inside = (scenario.region_x[0]..=scenario.region_x[1]).contains(&p[0])
            && (scenario.region_y[0]..=scenario.region_y[1]).contains(&p[1])
            && (scenario.height[0]..=scenario.height[1]).contains(&p[2]);
        if !inside {
            return Err(EvalError::BadInput(format!(
                "trajectory point {k} at ({:.2}, {:.2}, {:.2}) leaves the user region",
                p[0], p[1], p[2]
            )));
        }
        points.push(p);
    }
    Ok(points)
}

/// One tracked trajectory point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub truth: [f64; 3],
    pub estimate: [f64; 3],
    pub error: f64,
}

/// Trajectory tracking result.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrajectoryReport {
    pub spec: TrajectorySpec,
    pub points: Vec<TrajectoryPoint>,
    pub mean_error: f64,
}

/// Generates CSI along the spiral (fresh paths and noise per point from the
/// trajectory stream) and tracks it with the deployed signal path.
pub fn trajectory_eval(
    model: &SystemModel,
    pipeline: &SamplePipeline,
    spec: &TrajectorySpec,
) -> Result<TrajectoryReport, EvalError> {
    if *pipeline.scenario() != model.scenario {
        return Err(EvalError::BadInput(
            "pipeline and model disagree on the scenario".into(),
        ));
    }
    let truths = trajectory_points(&model.scenario, spec)?;
    let mut points = Vec::with_capacity(truths.len());
    let mut total = 0.0;
    for (k, &truth) in truths.iter().enumerate() {
        let sample = pipeline.sample_at(truth, stream::TRAJECTORY, k as u64)?;
        let (estimate, _) = model.localize(&sample)?;
        let d = [estimate[0] - truth[0], estimate[1] - truth[1], estimate[2] - truth[2]];
        let error = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        total += error;
        points.push(TrajectoryPoint { truth, estimate, error });
    }
    let mean_error = total / points.len() as f64;
    Ok(TrajectoryReport { spec: *spec, points, mean_error })
}

// ─── Report files ────────────────────────────────────────────────────────

fn write_atomic(path: &Path, contents: &str) -> Result<(), EvalError> {
    fs::write(path, contents)?;
    Ok(())
}

/// Per-sample errors, one row per test sample.
pub fn write_errors_csv(path: &Path, errors: &[f64]) -> Result<(), EvalError> {
    let mut out = String::from("sample,error_m\n");
    for (i, e) in errors.iter().enumerate() {
        writeln!(out, "{i},{e}").expect("string write");
    }
    write_atomic(path, &out)
}

/// CDF grid, monotone in both columns.
pub fn write_cdf_csv(path: &Path, cdf: &[CdfPoint]) -> Result<(), EvalError> {
    let mut out = String::from("error_m,fraction\n");
    for p in cdf {
        writeln!(out, "{},{}", p.error, p.fraction).expect("string write");
    }
    write_atomic(path, &out)
}

/// Trade-off table; the lossless reference row carries `lossless` in the
/// bits column.
pub fn write_tradeoff_csv(path: &Path, rows: &[TradeoffRow]) -> Result<(), EvalError> {
    let mut out = String::from("bits,ratio,total_ratio,mean_error_m,e90_m\n");
    for r in rows {
        let bits = match r.bits {
            Some(q) => q.to_string(),
            None => "lossless".into(),
        };
        writeln!(out, "{bits},{},{},{},{}", r.ratio, r.total_ratio, r.mean_error, r.e90)
            .expect("string write");
    }
    write_atomic(path, &out)
}

/// Stage I curves: training loss per epoch and the per-station validation
/// losses on validated epochs (blank otherwise).
pub fn write_stage1_curves_csv(path: &Path, report: &Stage1Report) -> Result<(), EvalError> {
    let stations = report.validation.first().map(|(_, v)| v.len()).unwrap_or(0);
    let mut out = String::from("epoch,train_loss");
    for l in 0..stations {
        write!(out, ",valid_loss_bs{l}").expect("string write");
    }
    out.push('\n');
    for (i, loss) in report.epoch_loss.iter().enumerate() {
        let epoch = i + 1;
        write!(out, "{epoch},{loss}").expect("string write");
        match report.validation.iter().find(|(e, _)| *e == epoch) {
            Some((_, losses)) => {
                for v in losses {
                    write!(out, ",{v}").expect("string write");
                }
            }
            None => out.push_str(&",".repeat(stations)),
        }
        out.push('\n');
    }
    write_atomic(path, &out)
}

/// Stage II curves: training loss per epoch plus validation mean error and
/// e90 on validated epochs; epoch 0 is the untrained network.
pub fn write_stage2_curves_csv(path: &Path, report: &Stage2Report) -> Result<(), EvalError> {
    let mut out = String::from("epoch,train_loss,mean_error_m,e90_m\n");
    for point in &report.validation {
        let loss = match point.epoch {
            0 => String::new(),
            e => report.epoch_loss.get(e - 1).map(|l| l.to_string()).unwrap_or_default(),
        };
        writeln!(out, "{},{loss},{},{}", point.epoch, point.mean_error, point.e90)
            .expect("string write");
    }
    write_atomic(path, &out)
}

/// Tracked trajectory, truth and estimate side by side.
pub fn write_trajectory_csv(path: &Path, report: &TrajectoryReport) -> Result<(), EvalError> {
    let mut out = String::from("point,x_m,y_m,z_m,x_hat_m,y_hat_m,z_hat_m,error_m\n");
    for (k, p) in report.points.iter().enumerate() {
        writeln!(
            out,
            "{k},{},{},{},{},{},{},{}",
            p.truth[0], p.truth[1], p.truth[2], p.estimate[0], p.estimate[1], p.estimate[2], p.error
        )
        .expect("string write");
    }
    write_atomic(path, &out)
}

/// Two-decimal human summary of an evaluation.
pub fn summary_text(report: &EvalReport) -> String {
    let mut out = String::new();
    writeln!(out, "samples: {}", report.context.samples).expect("string write");
    writeln!(out, "mean error [m]: {:.2}", report.mean_error).expect("string write");
    writeln!(out, "e90 [m]: {:.2}", report.e90).expect("string write");
    writeln!(out, "payload ratio [%]: {:.2}", 100.0 * report.payload.ratio).expect("string write");
    writeln!(out, "total payload ratio [%]: {:.2}", 100.0 * report.payload.total_ratio)
        .expect("string write");
    writeln!(out, "payload bits per BS snapshot: {}", report.payload.embedding_bits)
        .expect("string write");
    writeln!(out, "raw CSI bits per BS snapshot: {}", report.payload.csi_bits)
        .expect("string write");
    out
}

/// Writes the standard evaluation artifacts into `dir`: per-sample errors,
/// the CDF grid, the machine-readable report, and the text summary.
pub fn emit_reports(dir: &Path, report: &EvalReport) -> Result<(), EvalError> {
    fs::create_dir_all(dir)?;
    write_errors_csv(&dir.join("errors.csv"), &report.errors)?;
    write_cdf_csv(&dir.join("cdf.csv"), &report.cdf)?;
    let json = serde_json::to_string_pretty(report)?;
    write_atomic(&dir.join("report.json"), &json)?;
    write_atomic(&dir.join("summary.txt"), &summary_text(report))?;
    Ok(())
}
