//! Hierarchical audio-to-motion generation: audio to face-coefficient
//! chunks, then face keypoints + audio + appearance to upper-body and hand
//! motion.

pub mod body;
pub mod face;

pub use body::{BodyDenoiser, BodyModelDims, APPEARANCE_DIM};
pub use face::{FaceDenoiser, FaceModelDims};

use portray_grad::tensor::Tensor;
use rand::Rng;

use crate::audio::AudioFeatureSeq;
use crate::config::Config;
use crate::diffusion::{sample, ConditionBundle, NoiseSchedule, SampleMode};
use crate::error::{Error, Result};
use crate::metrics;
use crate::motion::{
    project_head_keypoints, FaceCoeffs, HandCoeffs, Handedness, HeadRig, KeypointSet, Point3,
};
use crate::synth::BodyFrame;
use crate::videogen::Frame;

/// Coarse style control: target standard deviation of expression weights and
/// of pose velocity, plus an optional reference coefficient sequence.
#[derive(Debug, Clone, Default)]
pub struct StyleControl {
    pub expr_range: f64,
    pub pose_range: f64,
    pub reference: Option<Vec<FaceCoeffs>>,
}

impl StyleControl {
    pub fn validate(&self, max_reference: usize) -> Result<()> {
        if !(self.expr_range >= 0.0 && self.expr_range.is_finite())
            || !(self.pose_range >= 0.0 && self.pose_range.is_finite())
        {
            return Err(Error::InvalidParams("style ranges must be finite and >= 0".into()));
        }
        if let Some(r) = &self.reference {
            if r.is_empty() {
                return Err(Error::InvalidParams("reference sequence must be non-empty".into()));
            }
            if r.len() > max_reference {
                return Err(Error::InvalidParams(format!(
                    "reference sequence of {} frames exceeds the {max_reference}-frame limit",
                    r.len()
                )));
            }
        }
        Ok(())
    }
}

/// One generated chunk of face coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionChunk {
    pub coeffs: Vec<FaceCoeffs>,
}

impl MotionChunk {
    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn to_flat(&self) -> Tensor {
        let d = self.coeffs[0].expr.len() + 6;
        let mut data = Vec::with_capacity(self.len() * d);
        for c in &self.coeffs {
            data.extend(c.to_flat());
        }
        Tensor::new(&[self.len(), d], data)
    }

    pub fn from_flat(flat: &Tensor, expr_dim: usize) -> Self {
        let d = expr_dim + 6;
        let coeffs = flat
            .data()
            .chunks_exact(d)
            .map(|row| FaceCoeffs::from_flat(row, expr_dim))
            .collect();
        Self { coeffs }
    }
}

/// Upper-body stage output, aligned frame-by-frame with the face chunk.
#[derive(Debug, Clone)]
pub struct BodyMotionOutput {
    pub head_offsets: Vec<Vec<Point3>>,
    pub body: Vec<BodyFrame>,
    pub hands: Vec<HandCoeffs>,
}

impl BodyMotionOutput {
    pub fn len(&self) -> usize {
        self.body.len()
    }

    pub fn is_empty(&self) -> bool {
        self.body.is_empty()
    }
}

/// Fixed deterministic appearance descriptor: a 4x4 RGB average-pooled
/// thumbnail of the source frame, flattened to 48 values.
pub fn appearance_vector(frame: &Frame) -> Tensor {
    let (h, w) = (frame.h(), frame.w());
    let mut out = Tensor::zeros(&[APPEARANCE_DIM]);
    for c in 0..3 {
        for bi in 0..4 {
            for bj in 0..4 {
                let i0 = bi * h / 4;
                let i1 = (bi + 1) * h / 4;
                let j0 = bj * w / 4;
                let j1 = (bj + 1) * w / 4;
                let mut acc = 0.0;
                for i in i0..i1 {
                    for j in j0..j1 {
                        acc += frame.get(c, i, j);
                    }
                }
                out.data_mut()[(c * 4 + bi) * 4 + bj] =
                    acc / ((i1 - i0) * (j1 - j0)) as f64;
            }
        }
    }
    out
}

fn chunk_condition(
    audio: &Tensor,
    history: &Tensor,
    style: &StyleControl,
    expr_dim: usize,
) -> ConditionBundle {
    let reference = style.reference.as_ref().map(|seq| {
        let d = expr_dim + 6;
        let mut data = Vec::with_capacity(seq.len() * d);
        for c in seq {
            data.extend(c.to_flat());
        }
        Tensor::new(&[seq.len(), d], data)
    });
    ConditionBundle {
        audio: Some(audio.clone()),
        history: Some(history.clone()),
        style: Some([style.expr_range, style.pose_range]),
        reference,
        appearance: None,
        keypoints: None,
    }
}

/// Deterministic-mode generation of one face-coefficient chunk.
///
/// `audio` must carry at least `chunk_len` rows; `history` is the previous
/// chunk's tail (zeros at stream start). Expression weights are clamped to
/// [0, 1] and rotations to [-pi, pi] after sampling.
#[allow(clippy::too_many_arguments)]
pub fn generate_face_motion<R: Rng>(
    model: &FaceDenoiser,
    audio: &Tensor,
    history: &Tensor,
    style: &StyleControl,
    sched: &NoiseSchedule,
    chunk_len: usize,
    sample_steps: usize,
    max_reference: usize,
    rng: &mut R,
) -> Result<MotionChunk> {
    style.validate(max_reference)?;
    if audio.shape()[0] < chunk_len {
        return Err(Error::ShapeMismatch {
            context: "generate_face_motion audio",
            expected: format!(">= {chunk_len} rows"),
            got: format!("{}", audio.shape()[0]),
        });
    }
    let expr_dim = model.data_dim() - 6;
    let cond = chunk_condition(audio, history, style, expr_dim);
    let x_start = Tensor::randn(&[chunk_len, model.data_dim()], rng);
    let out = sample(model, x_start, &cond, sched, sample_steps, SampleMode::Deterministic, rng)?;
    let mut chunk = MotionChunk::from_flat(&out, expr_dim);
    for c in &mut chunk.coeffs {
        for e in &mut c.expr {
            *e = e.clamp(0.0, 1.0);
        }
        for r in &mut c.pose[..3] {
            *r = r.clamp(-std::f64::consts::PI, std::f64::consts::PI);
        }
    }
    Ok(chunk)
}

/// Per-frame explicit keypoint projection of a chunk through the rig.
pub fn project_face_condition(chunk: &MotionChunk, rig: &HeadRig) -> Result<Vec<KeypointSet>> {
    chunk.coeffs.iter().map(|c| project_head_keypoints(c, rig)).collect()
}

/// Flatten per-frame keypoint sets into the `[L, K*3]` conditioning tensor.
pub fn flatten_keypoint_condition(kps: &[KeypointSet]) -> Tensor {
    let l = kps.len();
    let k = kps[0].len();
    let mut data = Vec::with_capacity(l * k * 3);
    for set in kps {
        data.extend(set.points.iter().flatten());
    }
    Tensor::new(&[l, k * 3], data)
}

/// Split a flat per-frame body vector into its components.
pub struct BodyLayout {
    pub n_head: usize,
    pub k_body: usize,
    pub hand_joints: usize,
}

impl BodyLayout {
    pub fn from_config(cfg: &Config) -> Self {
        Self {
            n_head: cfg.model.head_points,
            k_body: cfg.model.body_points,
            hand_joints: cfg.model.hand_joints,
        }
    }

    pub fn dim(&self) -> usize {
        3 * self.n_head + 3 * self.k_body + 1 + 3 + self.hand_joints + 6
    }

    /// Unflatten one frame row, clamping scale to [0.5, 2] and joint angles
    /// to their valid range.
    pub fn unflatten_row(&self, row: &[f64]) -> (Vec<Point3>, BodyFrame, HandCoeffs) {
        assert_eq!(row.len(), self.dim());
        let mut pos = 0usize;
        let take_points = |n: usize, pos: &mut usize| -> Vec<Point3> {
            let pts = row[*pos..*pos + 3 * n]
                .chunks_exact(3)
                .map(|c| [c[0], c[1], c[2]])
                .collect();
            *pos += 3 * n;
            pts
        };
        let offsets = take_points(self.n_head, &mut pos);
        let deformation = take_points(self.k_body, &mut pos);
        let scale = row[pos].clamp(0.5, 2.0);
        pos += 1;
        let translation = [row[pos], row[pos + 1], row[pos + 2]];
        pos += 3;
        let joint_angles: Vec<f64> = row[pos..pos + self.hand_joints]
            .iter()
            .map(|a| a.clamp(-std::f64::consts::FRAC_PI_2, std::f64::consts::FRAC_PI_2))
            .collect();
        pos += self.hand_joints;
        let mut wrist_pose = [0.0; 6];
        wrist_pose.copy_from_slice(&row[pos..pos + 6]);
        (
            offsets,
            BodyFrame { deformation, scale, translation },
            HandCoeffs { joint_angles, wrist_pose, handedness: Handedness::Right },
        )
    }
}

/// Deterministic-mode generation of upper-body motion conditioned on a face
/// chunk: project the face condition, sample, unflatten with clamping.
pub fn generate_upper_body<R: Rng>(
    model: &BodyDenoiser,
    face_kps: &[KeypointSet],
    audio: &Tensor,
    appearance: &Tensor,
    sched: &NoiseSchedule,
    layout: &BodyLayout,
    sample_steps: usize,
    rng: &mut R,
) -> Result<BodyMotionOutput> {
    let l = face_kps.len();
    if audio.shape()[0] < l {
        return Err(Error::ShapeMismatch {
            context: "generate_upper_body audio",
            expected: format!(">= {l} rows"),
            got: format!("{}", audio.shape()[0]),
        });
    }
    let cond = ConditionBundle {
        audio: Some(audio.clone()),
        history: None,
        style: None,
        reference: None,
        appearance: Some(appearance.clone()),
        keypoints: Some(flatten_keypoint_condition(face_kps)),
    };
    let x_start = Tensor::randn(&[l, layout.dim()], rng);
    let out = sample(model, x_start, &cond, sched, sample_steps, SampleMode::Deterministic, rng)?;
    let mut head_offsets = Vec::with_capacity(l);
    let mut body = Vec::with_capacity(l);
    let mut hands = Vec::with_capacity(l);
    for row in out.data().chunks_exact(layout.dim()) {
        let (off, bf, hand) = layout.unflatten_row(row);
        head_offsets.push(off);
        body.push(bf);
        hands.push(hand);
    }
    Ok(BodyMotionOutput { head_offsets, body, hands })
}

/// Style-transfer evaluation: MAE over all coefficient entries, and SSIM
/// computed 1-D per coefficient channel over time, averaged over channels.
pub fn style_transfer_error(generated: &MotionChunk, truth: &MotionChunk) -> Result<(f64, f64)> {
    if generated.len() != truth.len() {
        return Err(Error::ShapeMismatch {
            context: "style_transfer_error",
            expected: format!("{} frames", truth.len()),
            got: format!("{}", generated.len()),
        });
    }
    let a = generated.to_flat();
    let b = truth.to_flat();
    let mae = metrics::mae(a.data(), b.data());
    let (l, d) = (a.shape()[0], a.shape()[1]);
    let mut ssim_acc = 0.0;
    for ch in 0..d {
        let series_a: Vec<f64> = (0..l).map(|t| a.data()[t * d + ch]).collect();
        let series_b: Vec<f64> = (0..l).map(|t| b.data()[t * d + ch]).collect();
        ssim_acc += metrics::ssim(&series_a, &series_b);
    }
    Ok((mae, ssim_acc / d as f64))
}

/// Audio rows for one chunk, zero-padded past the end of the feature
/// sequence.
pub fn chunk_audio(features: &AudioFeatureSeq, start: usize, len: usize) -> Tensor {
    features.slice_padded(start, len)
}
