//! Command-line front end for the cooperative positioning simulator:
//! dataset generation, covariance and quantizer calibration, two-stage
//! training, evaluation metrics, payload/accuracy trade-off tables, and
//! trajectory tracking.
//!
//! Every subcommand reads the shared TOML run configuration (`--config`)
//! and writes its artifacts into the `--out` directory, echoing the
//! configuration text verbatim into that directory so a run can be
//! reproduced from its artifacts alone. All randomness derives from the
//! scenario seed (overridable with `--seed`); reruns with identical inputs
//! produce bit-identical outputs. The process exits 0 only when every
//! requested artifact was written.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use eccpos_core::autodiff::{load_params, save_params, ParamSet};
use eccpos_core::channel::{self, DatasetHeader, ScenarioConfig, Snapshot};
use eccpos_core::codec::QuantizerConfig;
use eccpos_core::config::RunConfig;
use eccpos_core::encoder::{init_network, EncoderConfig};
use eccpos_core::estimation::CovarianceBank;
use eccpos_core::eval::{self, EvalReport};
use eccpos_core::seeds::{self, stream};
use eccpos_core::training::{
    calibrate_quantizers, encoder_prefix, run_stage1, run_stage2, QuantCalibration,
    SamplePipeline, Stage2Options, SystemModel,
};

#[derive(Parser)]
#[command(name = "eccpos", version, about = "Fronthaul-constrained cooperative positioning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    #[command(name = "gen-data")]
    GenData(GenDataArgs),
    #[command(name = "calibrate-cov")]
    CalibrateCov(CalibrateCovArgs),
    #[command(name = "train-stage1")]
    TrainStage1(TrainStage1Args),
    #[command(name = "calibrate-quant")]
    CalibrateQuant(CalibrateQuantArgs),
    #[command(name = "train-stage2")]
    TrainStage2(TrainStage2Args),
    #[command(name = "evaluate")]
    Evaluate(EvaluateArgs),
    #[command(name = "tradeoff")]
    Tradeoff(TradeoffArgs),
    #[command(name = "trajectory")]
    Trajectory(TrajectoryArgs),
    #[command(name = "report")]
    Report(ReportArgs),
}

/// Flags shared by every configuration-driven subcommand.
#[derive(Args)]
struct CommonArgs {
    /// Run configuration (TOML); one schema shared by all subcommands.
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Overrides the scenario seed from the configuration.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Output directory; created if missing.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

/// Generates a labeled observation dataset.
///
/// Writes dataset.eccdata: positions and per-BS pilot observations for
/// snapshots drawn from the data stream, in the ECCDATA1 wire format.
#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Snapshot count; defaults to the configured evaluation sample count.
    #[arg(long, value_name = "N")]
    count: Option<u64>,
}

/// Calibrates the per-(BS, subcarrier) channel covariance bank.
///
/// Writes covariance.ecccov (ECCCOV1 format), consumed by the training and
/// evaluation subcommands via --covariance.
#[derive(Args)]
struct CalibrateCovArgs {
    #[command(flatten)]
    common: CommonArgs,
}

/// Stage I: trains one CSI autoencoder per BS on reconstruction.
///
/// Writes checkpoints/stage1_epoch_NNNN.eccparam per validation pass,
/// encoders.eccparam (final encoders, decoders stripped), and
/// stage1_curves.csv with columns: epoch, train_loss, valid_loss_bs{l} per
/// station (validation columns blank on non-validated epochs).
#[derive(Args)]
struct TrainStage1Args {
    #[command(flatten)]
    common: CommonArgs,
    /// Covariance bank from calibrate-cov; default recalibrates in-process.
    #[arg(long, value_name = "PATH")]
    covariance: Option<PathBuf>,
}

/// Calibrates the per-BS fronthaul quantizers from trained encoders.
///
/// Writes quantizers_q{Q}.csv per requested bit width with columns: bs,
/// bits, step. The step maps the configured |coefficient| percentile to
/// the clip edge.
#[derive(Args)]
struct CalibrateQuantArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Stage I encoder checkpoint (encoders.eccparam).
    #[arg(long, value_name = "PATH")]
    encoders: PathBuf,
    /// Fronthaul bit widths to calibrate; defaults to the configured width.
    #[arg(long, value_name = "LIST", value_delimiter = ',')]
    quant_bits: Vec<u32>,
    /// Covariance bank from calibrate-cov; default recalibrates in-process.
    #[arg(long, value_name = "PATH")]
    covariance: Option<PathBuf>,
}

/// Stage II: trains encoders and CU network end to end on position error.
///
/// Writes checkpoints/stage2_epoch_NNNN.eccparam per validation pass
/// (epoch 0 is the untrained network), model.eccparam (deployable system:
/// parameters plus quantizers), quantizers.csv (bs, bits, step) when the
/// fronthaul is quantized, and metrics.csv with columns: epoch,
/// train_loss, mean_error_m, e90_m (train_loss blank on the epoch-0 row).
#[derive(Args)]
struct TrainStage2Args {
    #[command(flatten)]
    common: CommonArgs,
    /// Stage I encoder checkpoint; required unless --from-scratch.
    #[arg(long, value_name = "PATH", required_unless_present = "from_scratch", conflicts_with = "from_scratch")]
    encoders: Option<PathBuf>,
    /// Quantizer table from calibrate-quant; default calibrates in-process.
    #[arg(long, value_name = "PATH", conflicts_with = "lossless")]
    quantizers: Option<PathBuf>,
    /// Fronthaul bit width for in-process calibration (single value).
    #[arg(long, value_name = "Q", value_delimiter = ',', conflicts_with_all = ["lossless", "quantizers"])]
    quant_bits: Vec<u32>,
    /// Train the lossless (unquantized fronthaul) reference variant.
    #[arg(long)]
    lossless: bool,
    /// Keep the Stage I encoders frozen; train the CU network only.
    #[arg(long)]
    freeze_encoders: bool,
    /// Skip Stage I: fresh encoders, trained jointly from scratch.
    #[arg(long)]
    from_scratch: bool,
    /// Covariance bank from calibrate-cov; default recalibrates in-process.
    #[arg(long, value_name = "PATH")]
    covariance: Option<PathBuf>,
}

/// Evaluates a trained system on the held-out evaluation stream.
///
/// Writes errors.csv (sample, error_m), cdf.csv (error_m, fraction; a
/// uniform error grid with the cumulative fraction of samples at or below
/// each edge), report.json (machine-readable report), and summary.txt.
#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Trained system checkpoint (model.eccparam from train-stage2).
    #[arg(long, value_name = "PATH")]
    model: PathBuf,
    /// Covariance bank from calibrate-cov; default recalibrates in-process.
    #[arg(long, value_name = "PATH")]
    covariance: Option<PathBuf>,
}

/// Trains and evaluates the payload/accuracy trade-off in one run.
///
/// Runs Stage I once, then trains one Stage II variant per requested bit
/// width plus the lossless reference on identical data streams, and
/// evaluates all of them on the shared evaluation set. Writes
/// tradeoff.csv with columns: bits (or `lossless`), ratio, total_ratio,
/// mean_error_m, e90_m, plus model_{variant}.eccparam and a full report
/// directory per variant. Runtime scales with the number of bit widths.
#[derive(Args)]
struct TradeoffArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Fronthaul bit widths, one trained variant each.
    #[arg(long, value_name = "LIST", value_delimiter = ',', default_values_t = [10u32, 8, 6, 4])]
    quant_bits: Vec<u32>,
    /// Covariance bank from calibrate-cov; default recalibrates in-process.
    #[arg(long, value_name = "PATH")]
    covariance: Option<PathBuf>,
}

/// Tracks the configured spiral trajectory with a trained system.
///
/// Writes trajectory.csv with columns: point, x_m, y_m, z_m, x_hat_m,
/// y_hat_m, z_hat_m, error_m (truth and estimate side by side per point).
#[derive(Args)]
struct TrajectoryArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Trained system checkpoint (model.eccparam from train-stage2).
    #[arg(long, value_name = "PATH")]
    model: PathBuf,
    /// Covariance bank from calibrate-cov; default recalibrates in-process.
    #[arg(long, value_name = "PATH")]
    covariance: Option<PathBuf>,
}

/// Re-emits the derived report files from an existing report.json.
///
/// Rewrites errors.csv, cdf.csv, report.json, and summary.txt into --out;
/// re-emission of an unchanged report is byte-identical.
#[derive(Args)]
struct ReportArgs {
    /// Report to re-emit; defaults to <OUT>/report.json.
    #[arg(long, value_name = "PATH")]
    from: Option<PathBuf>,
    /// Output directory; created if missing.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData(args) => gen_data(args),
        Command::CalibrateCov(args) => calibrate_cov(args),
        Command::TrainStage1(args) => train_stage1(args),
        Command::CalibrateQuant(args) => calibrate_quant(args),
        Command::TrainStage2(args) => train_stage2(args),
        Command::Evaluate(args) => evaluate(args),
        Command::Tradeoff(args) => tradeoff(args),
        Command::Trajectory(args) => trajectory(args),
        Command::Report(args) => report(args),
    }
}

// ─── Shared plumbing ─────────────────────────────────────────────────────

/// Loads and validates the run configuration, applies the seed override,
/// and echoes the configuration text verbatim into the output directory.
fn load_run(common: &CommonArgs) -> Result<RunConfig> {
    let (mut config, raw) = RunConfig::load(&common.config)
        .with_context(|| format!("loading {}", common.config.display()))?;
    if let Some(seed) = common.seed {
        config.scenario.seed = seed;
        println!("seed override: {seed}");
    }
    fs::create_dir_all(&common.out)
        .with_context(|| format!("creating {}", common.out.display()))?;
    fs::write(common.out.join("config.toml"), raw).context("echoing configuration")?;
    Ok(config)
}

/// Loads the covariance bank from a calibrate-cov artifact, or calibrates
/// it in-process from the configuration (bit-identical to calibrate-cov).
fn load_bank(config: &RunConfig, path: Option<&Path>) -> Result<CovarianceBank> {
    match path {
        Some(p) => {
            CovarianceBank::load(p).with_context(|| format!("loading {}", p.display()))
        }
        None => {
            let sites = config.scenario.bs_sites();
            Ok(CovarianceBank::calibrate(
                &config.scenario,
                &sites,
                config.covariance.realizations as usize,
                config.covariance.loading,
            )?)
        }
    }
}

fn make_pipeline(config: &RunConfig, covariance: Option<&Path>) -> Result<SamplePipeline> {
    let bank = load_bank(config, covariance)?;
    Ok(SamplePipeline::new(config.scenario.clone(), bank)?)
}

/// Encoder parameters as Stage II would initialize them from scratch, for
/// quantizer calibration when no trained encoders are given.
fn fresh_encoders(scenario: &ScenarioConfig, cfg: &EncoderConfig) -> Result<ParamSet> {
    let mut params = ParamSet::new();
    for l in 0..scenario.bs_count {
        let mut rng = seeds::stream_rng(scenario.seed, stream::INIT, l as u64);
        params.absorb(init_network(cfg, &encoder_prefix(l), false, &mut rng)?)?;
    }
    Ok(params)
}

fn write_quantizers_csv(path: &Path, quant: &[QuantizerConfig]) -> Result<()> {
    let mut out = String::from("bs,bits,step\n");
    for (l, q) in quant.iter().enumerate() {
        writeln!(out, "{l},{},{}", q.bits(), q.step()).expect("string write");
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn read_quantizers_csv(path: &Path) -> Result<Vec<QuantizerConfig>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("loading {}", path.display()))?;
    let mut lines = text.lines();
    if lines.next() != Some("bs,bits,step") {
        bail!("{}: expected header bs,bits,step", path.display());
    }
    let mut quant = Vec::new();
    for (row, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        let [bs, bits, step] = fields.as_slice() else {
            bail!("{}: row {row} has {} fields, expected 3", path.display(), fields.len());
        };
        if bs.parse::<usize>() != Ok(row) {
            bail!("{}: rows must be ordered by BS index", path.display());
        }
        quant.push(QuantizerConfig::new(bits.parse()?, step.parse()?)?);
    }
    Ok(quant)
}

// ─── Subcommands ─────────────────────────────────────────────────────────

fn gen_data(args: GenDataArgs) -> Result<()> {
    let config = load_run(&args.common)?;
    let scenario = &config.scenario;
    let sites = scenario.bs_sites();
    let count = args.count.unwrap_or(config.eval.samples as u64);
    let snapshots: Vec<Snapshot> = (0..count)
        .map(|k| channel::stream_snapshot(scenario, &sites, stream::DATA, k))
        .collect();
    let header = DatasetHeader {
        bs_count: scenario.bs_count as u32,
        slots: scenario.slots as u32,
        antennas: scenario.antennas() as u32,
        subcarriers: scenario.subcarriers as u32,
        sample_count: count,
        noise_var: scenario.noise_var,
        seed: scenario.seed,
    };
    let path = args.common.out.join("dataset.eccdata");
    channel::write_dataset(&path, &header, &snapshots)?;
    println!("wrote {count} snapshots to {}", path.display());
    Ok(())
}

fn calibrate_cov(args: CalibrateCovArgs) -> Result<()> {
    let config = load_run(&args.common)?;
    let bank = load_bank(&config, None)?;
    let path = args.common.out.join("covariance.ecccov");
    bank.save(&path)?;
    println!(
        "calibrated {} x {} covariance matrices ({} realizations) to {}",
        bank.bs_count(),
        bank.subcarriers(),
        config.covariance.realizations,
        path.display()
    );
    Ok(())
}

fn train_stage1(args: TrainStage1Args) -> Result<()> {
    let config = load_run(&args.common)?;
    let pipeline = make_pipeline(&config, args.covariance.as_deref())?;
    let out = &args.common.out;
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;

    let mut checkpoint = |epoch: usize, params: &ParamSet| {
        let path = ckpt_dir.join(format!("stage1_epoch_{epoch:04}.eccparam"));
        save_params(&path, params)?;
        println!("stage 1 checkpoint: epoch {epoch}");
        Ok(())
    };
    let report =
        run_stage1(&pipeline, &config.encoder_cfg(), &config.stage1, Some(&mut checkpoint))?;

    save_params(&out.join("encoders.eccparam"), &report.encoders)?;
    eval::write_stage1_curves_csv(&out.join("stage1_curves.csv"), &report)?;
    println!(
        "stage 1 done: {} epochs, train loss {:.6} -> {:.6}",
        report.epoch_loss.len(),
        report.epoch_loss.first().unwrap_or(&f64::NAN),
        report.epoch_loss.last().unwrap_or(&f64::NAN),
    );
    Ok(())
}

fn calibrate_quant(args: CalibrateQuantArgs) -> Result<()> {
    let config = load_run(&args.common)?;
    let pipeline = make_pipeline(&config, args.covariance.as_deref())?;
    let encoders = load_params(&args.encoders)
        .with_context(|| format!("loading {}", args.encoders.display()))?;
    let widths = if args.quant_bits.is_empty() {
        vec![config.quant.bits]
    } else {
        args.quant_bits.clone()
    };
    for &bits in &widths {
        let calib = QuantCalibration { bits, ..config.quant };
        let quant = calibrate_quantizers(&pipeline, &config.encoder_cfg(), &encoders, &calib)?;
        let path = args.common.out.join(format!("quantizers_q{bits}.csv"));
        write_quantizers_csv(&path, &quant)?;
        let steps: Vec<String> = quant.iter().map(|q| format!("{:.3e}", q.step())).collect();
        println!("Q={bits}: steps [{}] to {}", steps.join(", "), path.display());
    }
    Ok(())
}

fn train_stage2(args: TrainStage2Args) -> Result<()> {
    let config = load_run(&args.common)?;
    let pipeline = make_pipeline(&config, args.covariance.as_deref())?;
    let out = &args.common.out;
    let enc_cfg = config.encoder_cfg();
    let fus_cfg = config.fusion_cfg();

    let encoders = match &args.encoders {
        Some(p) => {
            Some(load_params(p).with_context(|| format!("loading {}", p.display()))?)
        }
        None => None,
    };
    let quantizers = if args.lossless {
        None
    } else if let Some(p) = &args.quantizers {
        Some(read_quantizers_csv(p)?)
    } else {
        let bits = match args.quant_bits.as_slice() {
            [] => config.quant.bits,
            [b] => *b,
            _ => bail!("train-stage2 takes a single --quant-bits value"),
        };
        let calib = QuantCalibration { bits, ..config.quant };
        let source = match &encoders {
            Some(p) => p.clone(),
            None => fresh_encoders(&config.scenario, &enc_cfg)?,
        };
        Some(calibrate_quantizers(&pipeline, &enc_cfg, &source, &calib)?)
    };

    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    let mut checkpoint = |epoch: usize, params: &ParamSet| {
        let path = ckpt_dir.join(format!("stage2_epoch_{epoch:04}.eccparam"));
        save_params(&path, params)?;
        println!("stage 2 checkpoint: epoch {epoch}");
        Ok(())
    };
    let report = run_stage2(
        &pipeline,
        &enc_cfg,
        &fus_cfg,
        encoders.as_ref(),
        quantizers.as_deref(),
        Stage2Options { update_encoders: !args.freeze_encoders },
        &config.stage2,
        Some(&mut checkpoint),
    )?;

    eval::write_stage2_curves_csv(&out.join("metrics.csv"), &report)?;
    let model = SystemModel {
        scenario: config.scenario.clone(),
        encoder_cfg: enc_cfg,
        fusion_cfg: fus_cfg,
        params: report.params.clone(),
        quantizers,
    };
    if let Some(quant) = &model.quantizers {
        write_quantizers_csv(&out.join("quantizers.csv"), quant)?;
    }
    model.save(&out.join("model.eccparam"))?;
    println!(
        "stage 2 done: mean validation error {:.3} m -> {:.3} m over {} epochs",
        report.initial_error(),
        report.final_error(),
        report.epoch_loss.len(),
    );
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    let config = load_run(&args.common)?;
    let pipeline = make_pipeline(&config, args.covariance.as_deref())?;
    let model = SystemModel::load(
        &args.model,
        config.scenario.clone(),
        config.encoder_cfg(),
        config.fusion_cfg(),
    )
    .with_context(|| format!("loading {}", args.model.display()))?;
    let samples = pipeline.batch(stream::EVAL, 0, config.eval.samples)?;
    let report = eval::evaluate(&model, &samples)?;
    eval::emit_reports(&args.common.out, &report)?;
    print!("{}", eval::summary_text(&report));
    Ok(())
}

fn tradeoff(args: TradeoffArgs) -> Result<()> {
    let config = load_run(&args.common)?;
    let pipeline = make_pipeline(&config, args.covariance.as_deref())?;
    let out = &args.common.out;
    let enc_cfg = config.encoder_cfg();
    let fus_cfg = config.fusion_cfg();

    println!("stage 1 (shared by all variants)...");
    let stage1 = run_stage1(&pipeline, &enc_cfg, &config.stage1, None)?;
    save_params(&out.join("encoders.eccparam"), &stage1.encoders)?;
    eval::write_stage1_curves_csv(&out.join("stage1_curves.csv"), &stage1)?;

    let samples = pipeline.batch(stream::EVAL, 0, config.eval.samples)?;
    let mut variants: Vec<(String, Option<u32>)> =
        vec![("lossless".into(), None)];
    for &bits in &args.quant_bits {
        variants.push((format!("q{bits}"), Some(bits)));
    }

    let mut reports: Vec<EvalReport> = Vec::new();
    for (label, bits) in &variants {
        let quantizers = match bits {
            Some(bits) => {
                let calib = QuantCalibration { bits: *bits, ..config.quant };
                Some(calibrate_quantizers(&pipeline, &enc_cfg, &stage1.encoders, &calib)?)
            }
            None => None,
        };
        println!("stage 2 variant {label}...");
        let stage2 = run_stage2(
            &pipeline,
            &enc_cfg,
            &fus_cfg,
            Some(&stage1.encoders),
            quantizers.as_deref(),
            Stage2Options { update_encoders: true },
            &config.stage2,
            None,
        )?;
        let model = SystemModel {
            scenario: config.scenario.clone(),
            encoder_cfg: enc_cfg,
            fusion_cfg: fus_cfg,
            params: stage2.params,
            quantizers,
        };
        model.save(&out.join(format!("model_{label}.eccparam")))?;
        let report = eval::evaluate(&model, &samples)?;
        eval::emit_reports(&out.join(label), &report)?;
        println!("  {label}: mean {:.3} m, e90 {:.3} m", report.mean_error, report.e90);
        reports.push(report);
    }

    let rows = eval::tradeoff_table(&reports);
    eval::write_tradeoff_csv(&out.join("tradeoff.csv"), &rows)?;
    println!("wrote {}", out.join("tradeoff.csv").display());
    Ok(())
}

fn trajectory(args: TrajectoryArgs) -> Result<()> {
    let config = load_run(&args.common)?;
    let pipeline = make_pipeline(&config, args.covariance.as_deref())?;
    let model = SystemModel::load(
        &args.model,
        config.scenario.clone(),
        config.encoder_cfg(),
        config.fusion_cfg(),
    )
    .with_context(|| format!("loading {}", args.model.display()))?;
    let report = eval::trajectory_eval(&model, &pipeline, &config.trajectory)?;
    eval::write_trajectory_csv(&args.common.out.join("trajectory.csv"), &report)?;
    println!(
        "tracked {} trajectory points, mean error {:.3} m",
        report.points.len(),
        report.mean_error,
    );
    Ok(())
}

fn report(args: ReportArgs) -> Result<()> {
    let from = args.from.unwrap_or_else(|| args.out.join("report.json"));
    let text =
        fs::read_to_string(&from).with_context(|| format!("loading {}", from.display()))?;
    let parsed: EvalReport = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", from.display()))?;
    fs::create_dir_all(&args.out)?;
    eval::emit_reports(&args.out, &parsed)?;
    println!("re-emitted report into {}", args.out.display());
    Ok(())
}
