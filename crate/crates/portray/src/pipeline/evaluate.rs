//! Desk-scale evaluation on held-out clips: self-reenactment PSNR/SSIM,
//! head-keypoint diversity of generated motion, and reference style-transfer
//! MAE/SSIM on predicted face coefficients.

use portray_grad::tensor::Tensor;

use crate::a2m::{style_transfer_error, MotionChunk, StyleControl};
use crate::config::{Config, Mode};
use crate::error::{Error, Result};
use crate::metrics;
use crate::motion::{
    apply_head_offset, compose_body_keypoints, fuse_control, render_hand_control,
    BodyMotionParams, OrthoCamera,
};
use crate::synth::{ClipDataset, Split, SyntheticClip, World};
use crate::training::mix_seed;
use crate::videogen::{face_box_from_keypoints, Frame};

use super::{face_step, InferenceModels, SourceState};

#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    pub rows: Vec<(String, f64)>,
}

impl EvalReport {
    pub fn push(&mut self, key: &str, value: f64) {
        self.rows.push((key.to_string(), value));
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.rows.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }

    /// Structured-text table, one `key=value` per line.
    pub fn to_text(&self) -> String {
        self.rows
            .iter()
            .map(|(k, v)| format!("{k}={v:.6}"))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Variance of head keypoint positions over time, averaged over keypoints
/// and coordinates. Zero for a static chunk.
pub fn keypoint_diversity(chunks: &[MotionChunk], world: &World) -> Result<f64> {
    let mut positions: Vec<Vec<[f64; 3]>> = Vec::new();
    for chunk in chunks {
        for coeffs in &chunk.coeffs {
            positions.push(world.head_keypoints(coeffs)?.points);
        }
    }
    if positions.len() < 2 {
        return Ok(0.0);
    }
    let t = positions.len() as f64;
    let k = positions[0].len();
    let mut total = 0.0;
    for kp in 0..k {
        for axis in 0..3 {
            // shift by the first frame so a static sequence is exactly zero
            let base = positions[0][kp][axis];
            let mean: f64 = positions.iter().map(|p| p[kp][axis] - base).sum::<f64>() / t;
            let var: f64 = positions
                .iter()
                .map(|p| (p[kp][axis] - base - mean).powi(2))
                .sum::<f64>()
                / t;
            total += var;
        }
    }
    Ok(total / (3 * k) as f64)
}

/// Self-reenactment of one clip: drive frame 0 with motion from every frame
/// (ground-truth head keypoints plus detector-derived body motion), compare
/// against the ground-truth frames. Returns per-frame (PSNR, SSIM).
pub fn self_reenact_clip(
    models: &InferenceModels,
    cfg: &Config,
    clip: &SyntheticClip,
) -> Result<Vec<(f64, f64)>> {
    let world = World::from_config(cfg);
    let source = SourceState::prepare(
        models,
        cfg,
        clip.frames[0].clone(),
        clip.face[0].clone(),
        clip.head_offsets[0].clone(),
    )?;
    let (fh, fw) = (cfg.gen.frame_h, cfg.gen.frame_w);
    let mut out = Vec::with_capacity(clip.len());
    for t in 0..clip.len() {
        let explicit = world.head_keypoints(&clip.face[t])?;
        let head_drv = apply_head_offset(&explicit, &clip.head_offsets[t])?;
        let frame = match cfg.gen.mode {
            Mode::UpperBody => {
                let det_src = source
                    .detected
                    .as_ref()
                    .ok_or_else(|| Error::Pipeline("missing source detection".into()))?;
                let det_drv = models.gen.detect_motion(&clip.frames[t])?;
                let params = BodyMotionParams::new(
                    det_src.canonical.clone(),
                    det_drv.deformation.clone(),
                    1.0,
                    det_drv.translation,
                )?;
                let body_drv = compose_body_keypoints(&params)?;
                let fused_drv = fuse_control(&head_drv, &body_drv)?;
                let warp =
                    models.gen.estimate_warp(&source.fused_src, &fused_drv, &source.volume)?;
                let camera = OrthoCamera::fit(fw, fh);
                let hand = render_hand_control(
                    &[clip.hands[t].clone()],
                    &camera,
                    fh,
                    fw,
                    world.hand_scale,
                );
                let mut frame = models.gen.generate_frame(&source.volume, &warp, Some(&hand))?;
                if let (Some(refiner), Some(session)) = (&models.refiner, &source.refine_session)
                {
                    let bx = face_box_from_keypoints(&head_drv, fh, fw, refiner.crop())?;
                    frame = refiner.refine_face(&frame, session, &head_drv, &bx)?;
                }
                frame
            }
            Mode::HeadOnly => {
                let warp =
                    models.gen.estimate_warp(&source.head_src_final, &head_drv, &source.volume)?;
                models.gen.generate_frame(&source.volume, &warp, None)?
            }
        };
        out.push(frame_psnr_ssim(&frame, &clip.frames[t]));
    }
    Ok(out)
}

pub fn frame_psnr_ssim(pred: &Frame, truth: &Frame) -> (f64, f64) {
    let psnr = metrics::psnr(pred.pixels.data(), truth.pixels.data());
    let ssim = metrics::ssim(&metrics::luma(pred.pixels.data()), &metrics::luma(truth.pixels.data()));
    (psnr, ssim)
}

/// Generate the face-coefficient sequence for a clip's audio, streaming the
/// history buffer chunk to chunk.
pub fn generate_face_sequence(
    models: &InferenceModels,
    cfg: &Config,
    clip: &SyntheticClip,
    style: &StyleControl,
    seed: u64,
) -> Result<Vec<MotionChunk>> {
    let l = cfg.model.chunk_frames;
    let total = clip.len();
    let mut history = Tensor::zeros(&[cfg.model.history_frames, models.face.data_dim()]);
    let mut chunks = Vec::new();
    for idx in 0..total.div_ceil(l) {
        let start = idx * l;
        let len = l.min(total - start);
        let audio = clip.audio.slice_padded(start, len);
        let (chunk, next) = face_step(
            models,
            &audio,
            &history,
            style,
            cfg.model.max_reference_frames,
            seed,
            idx,
        )?;
        history = next;
        chunks.push(chunk);
    }
    Ok(chunks)
}

pub fn concat_chunks(chunks: &[MotionChunk]) -> MotionChunk {
    MotionChunk { coeffs: chunks.iter().flat_map(|c| c.coeffs.clone()).collect() }
}

/// Ground-truth coefficients of one clip as a chunk.
pub fn truth_chunk(clip: &SyntheticClip) -> MotionChunk {
    MotionChunk { coeffs: clip.face.clone() }
}

/// Full evaluation over the held-out split. Refuses to run if any evaluation
/// seed also appears in the training split.
pub fn evaluate(models: &InferenceModels, cfg: &Config) -> Result<EvalReport> {
    let test = ClipDataset::new(cfg, Split::Test)?;
    let train_seeds = cfg.data.train_seeds();
    for s in test.seeds() {
        if train_seeds.contains(s) {
            return Err(Error::SplitContamination(*s));
        }
    }
    let world = World::from_config(cfg);
    let mut report = EvalReport::default();
    let mut psnr_acc = 0.0;
    let mut ssim_acc = 0.0;
    let mut n_frames = 0usize;
    let mut diversity_acc = 0.0;
    let mut mae_with = 0.0;
    let mut ssim_with = 0.0;
    let mut mae_without = 0.0;
    let mut ssim_without = 0.0;
    let n_clips = test.len() as f64;

    for (ci, clip) in test.iter().enumerate() {
        let clip = clip?;
        // self-reenactment
        for (p, s) in self_reenact_clip(models, cfg, &clip)? {
            psnr_acc += p;
            ssim_acc += s;
            n_frames += 1;
        }
        // audio-driven generation, with and without a reference sequence
        let stats = clip.style_stats();
        let seed = mix_seed(&[0xe7a1, clip.seed]);
        let no_ref = StyleControl {
            expr_range: stats[0],
            pose_range: stats[1],
            reference: None,
        };
        let gen_plain = concat_chunks(&generate_face_sequence(models, cfg, &clip, &no_ref, seed)?);
        let with_ref = StyleControl {
            expr_range: stats[0],
            pose_range: stats[1],
            reference: Some(
                clip.face[..cfg.model.max_reference_frames.min(clip.len())].to_vec(),
            ),
        };
        let gen_ref = concat_chunks(&generate_face_sequence(models, cfg, &clip, &with_ref, seed)?);
        let truth = truth_chunk(&clip);
        let (m1, s1) = style_transfer_error(&gen_ref, &truth)?;
        let (m0, s0) = style_transfer_error(&gen_plain, &truth)?;
        mae_with += m1 / n_clips;
        ssim_with += s1 / n_clips;
        mae_without += m0 / n_clips;
        ssim_without += s0 / n_clips;

        // diversity of the generated (no-reference) motion
        diversity_acc += keypoint_diversity(
            &[gen_plain],
            &world,
        )? / n_clips;
        let _ = ci;
    }
    report.push("self_reenact_psnr", psnr_acc / n_frames as f64);
    report.push("self_reenact_ssim", ssim_acc / n_frames as f64);
    report.push("diversity", diversity_acc);
    report.push("style_mae_with_ref", mae_with);
    report.push("style_ssim_with_ref", ssim_with);
    report.push("style_mae_no_ref", mae_without);
    report.push("style_ssim_no_ref", ssim_without);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::FaceCoeffs;

    #[test]
    fn static_chunk_has_zero_diversity() {
        let cfg = Config::default();
        let world = World::from_config(&cfg);
        let chunk = MotionChunk { coeffs: vec![FaceCoeffs::zeros(16); 10] };
        let d = keypoint_diversity(&[chunk], &world).unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn moving_chunk_has_positive_diversity() {
        let cfg = Config::default();
        let world = World::from_config(&cfg);
        let coeffs = (0..10)
            .map(|i| {
                let mut c = FaceCoeffs::zeros(16);
                c.pose[3] = 0.02 * i as f64;
                c
            })
            .collect();
        let d = keypoint_diversity(&[MotionChunk { coeffs }], &world).unwrap();
        assert!(d > 0.0);
    }

    #[test]
    fn identical_frames_hit_psnr_cap() {
        let frame = Frame::filled(8, 8, [0.3, 0.4, 0.5]);
        let (p, s) = frame_psnr_ssim(&frame, &frame);
        assert_eq!(p, metrics::PSNR_CAP_DB);
        assert!((s - 1.0).abs() < 1e-12);
    }
}
