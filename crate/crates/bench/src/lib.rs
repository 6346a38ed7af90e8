//! Shared setup for the pipeline benchmarks: a desk-scale scenario with a
//! calibrated covariance bank and a briefly trained end-to-end system, so
//! each benchmark measures one stage of the deployed signal path rather
//! than its own setup.

use eccpos_core::channel::ScenarioConfig;
use eccpos_core::encoder::EncoderConfig;
use eccpos_core::estimation::CovarianceBank;
use eccpos_core::fusion::FusionConfig;
use eccpos_core::training::{
    calibrate_quantizers, run_stage2, QuantCalibration, SamplePipeline, Stage2Options,
    StageConfig, SystemModel,
};

pub fn desk_encoder_cfg(scenario: &ScenarioConfig) -> EncoderConfig {
    EncoderConfig::new(scenario.slots, scenario.antennas(), 16, 2, 4)
}

pub fn desk_fusion_cfg(scenario: &ScenarioConfig) -> FusionConfig {
    FusionConfig {
        bs_count: scenario.bs_count,
        subcarriers: scenario.subcarriers,
        latent_dim: 4,
        token_dim: 4,
        lstm_hidden: 16,
        head_hidden: 32,
        beta: 1.0,
    }
}

/// One short training epoch: enough to produce a working parameter set.
pub fn brief_stage() -> StageConfig {
    StageConfig {
        epochs: 1,
        samples_per_epoch: 16,
        batch_size: 8,
        learning_rate: 3e-3,
        validation_period: 1,
        validation_samples: 4,
    }
}

pub fn desk_pipeline() -> SamplePipeline {
    let scenario = ScenarioConfig::desk();
    let sites = scenario.bs_sites();
    let bank = CovarianceBank::calibrate(&scenario, &sites, 256, 1e-6).expect("bank");
    SamplePipeline::new(scenario, bank).expect("pipeline")
}

/// Briefly trained quantized system over the desk scenario.
pub fn desk_system(pipeline: &SamplePipeline) -> SystemModel {
    let scenario = pipeline.scenario().clone();
    let enc_cfg = desk_encoder_cfg(&scenario);
    let fus_cfg = desk_fusion_cfg(&scenario);
    let report = run_stage2(
        pipeline,
        &enc_cfg,
        &fus_cfg,
        None,
        None,
        Stage2Options { update_encoders: true },
        &brief_stage(),
        None,
    )
    .expect("stage 2");
    let calib = QuantCalibration { bits: 10, percentile: 99.5, samples: 8 };
    let quantizers =
        calibrate_quantizers(pipeline, &enc_cfg, &report.params, &calib).expect("quantizers");
    SystemModel {
        scenario,
        encoder_cfg: enc_cfg,
        fusion_cfg: fus_cfg,
        params: report.params,
        quantizers: Some(quantizers),
    }
}
