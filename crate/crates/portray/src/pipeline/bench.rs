//! Throughput measurement. Reports achieved fps and per-stage latency at the
//! configured resolution; the numbers are measured, never asserted against
//! any external figure.

use portray_grad::tensor::Tensor;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::a2m::StyleControl;
use crate::audio::AudioFeatureSeq;
use crate::config::Config;
use crate::error::Result;
use crate::synth::{make_clip, World};

use super::{run_stream, InferenceModels, NullSink, SourceState, StreamConfig, StreamStats};

/// Benchmark with the given (trained or randomly initialized) models over
/// `duration_s` seconds of synthetic audio features.
pub fn benchmark_with_models(
    cfg: &Config,
    models: &InferenceModels,
    duration_s: f64,
) -> Result<StreamStats> {
    let clip = make_clip(1, 1.0, cfg)?;
    let world = World::from_config(cfg);
    let source = SourceState::prepare(
        models,
        cfg,
        clip.frames[0].clone(),
        clip.face[0].clone(),
        world.gt_head_offsets(&clip.face[0]),
    )?;
    let n = ((duration_s * cfg.model.fps as f64).ceil() as usize).max(1);
    let mut rng = ChaCha20Rng::seed_from_u64(0xbe9c);
    let audio =
        AudioFeatureSeq { frames: Tensor::randn(&[n, cfg.model.mel_bands], &mut rng) };
    let style = StyleControl { expr_range: 0.2, pose_range: 0.05, reference: None };
    let stream_cfg = StreamConfig::from_config(cfg);
    let mut sink = NullSink;
    run_stream(models, cfg, &source, &audio, &style, &stream_cfg, 0xbe9c, &mut sink)
}

/// Benchmark with randomly initialized checkpoints (throughput does not
/// depend on parameter values).
pub fn benchmark(cfg: &Config, duration_s: f64) -> Result<StreamStats> {
    let models = InferenceModels::random_init(cfg);
    benchmark_with_models(cfg, &models, duration_s)
}
