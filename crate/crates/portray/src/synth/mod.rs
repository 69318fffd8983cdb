//! Self-consistent synthetic world: paired (audio features, motion ground
//! truth, frames) clips generated from seeded band-limited noise through the
//! motion forward model and the avatar rasterizer.

pub mod avatar;

pub use avatar::{hand_mask, mouth_ellipse, render_avatar, Palette};

use portray_grad::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::audio::AudioFeatureSeq;
use crate::config::{Config, Mode};
use crate::error::{Error, Result};
use crate::motion::rig::MOUTH;
use crate::motion::{
    apply_head_offset, compose_body_keypoints, project_head_keypoints, BodyMotionParams,
    FaceCoeffs, HandCoeffs, Handedness, HeadRig, KeypointSet, Point3,
};
use crate::videogen::Frame;

/// Fixed seed of the global audio-feature mixing matrix. Global on purpose:
/// the mapping from mouth motion to features is one shared "vocal tract",
/// not a per-clip function.
const AUDIO_MIX_SEED: u64 = 7777;

/// Avatar-world geometry shared by data generation and inference.
pub struct World {
    pub rig: HeadRig,
    pub mode: Mode,
    /// Head-local to canonical scale and offset.
    pub head_scale: f64,
    pub head_offset: Point3,
    /// Hand-local to canonical scale.
    pub hand_scale: f64,
}

impl World {
    pub fn from_config(cfg: &Config) -> Self {
        let rig = HeadRig::generate(cfg.model.head_points, cfg.model.expr_dim, cfg.model.rig_seed);
        match cfg.gen.mode {
            Mode::UpperBody => Self {
                rig,
                mode: Mode::UpperBody,
                head_scale: 0.30,
                head_offset: [0.0, -0.52, 0.15],
                hand_scale: 0.22,
            },
            Mode::HeadOnly => Self {
                rig,
                mode: Mode::HeadOnly,
                head_scale: 0.88,
                head_offset: [0.0, 0.0, 0.0],
                hand_scale: 0.22,
            },
        }
    }

    /// Place head-local keypoints into canonical world space.
    pub fn place_head(&self, kps: &KeypointSet) -> KeypointSet {
        let points = kps
            .points
            .iter()
            .map(|p| {
                [
                    p[0] * self.head_scale + self.head_offset[0],
                    p[1] * self.head_scale + self.head_offset[1],
                    p[2] * self.head_scale + self.head_offset[2],
                ]
            })
            .collect();
        KeypointSet::new(points, kps.kind)
    }

    /// World-space explicit head keypoints for face coefficients, before
    /// implicit offsets.
    pub fn head_keypoints(&self, face: &FaceCoeffs) -> Result<KeypointSet> {
        Ok(self.place_head(&project_head_keypoints(face, &self.rig)?))
    }

    /// Ground-truth implicit offsets: a fixed nonlinear exaggeration of
    /// mouth and eye shape that the linear rig cannot express.
    pub fn gt_head_offsets(&self, face: &FaceCoeffs) -> Vec<Point3> {
        let mut offsets = vec![[0.0; 3]; self.rig.len()];
        let open = face.expr[0] * face.expr[0];
        let smile = if face.expr.len() > 1 { face.expr[1] * face.expr[1] } else { 0.0 };
        for i in MOUTH {
            let below = self.rig.mean_keypoints()[i][1] > 0.52;
            if below {
                offsets[i][1] = 0.10 * open * self.head_scale;
            }
            let corner = self.rig.mean_keypoints()[i][0].abs() > 0.22;
            if corner {
                offsets[i][0] =
                    0.06 * smile * self.rig.mean_keypoints()[i][0].signum() * self.head_scale;
            }
        }
        offsets
    }

    /// Final driving head keypoints: explicit projection plus offsets.
    pub fn final_head_keypoints(&self, face: &FaceCoeffs) -> Result<KeypointSet> {
        let explicit = self.head_keypoints(face)?;
        apply_head_offset(&explicit, &self.gt_head_offsets(face))
    }
}

/// Per-frame body motion ground truth (canonical keypoints are per clip).
#[derive(Debug, Clone, PartialEq)]
pub struct BodyFrame {
    pub deformation: Vec<Point3>,
    pub scale: f64,
    pub translation: Point3,
}

#[derive(Debug, Clone)]
pub struct SyntheticClip {
    pub seed: u64,
    pub audio: AudioFeatureSeq,
    pub face: Vec<FaceCoeffs>,
    pub head_offsets: Vec<Vec<Point3>>,
    pub body_canonical: Vec<Point3>,
    pub body: Vec<BodyFrame>,
    pub hands: Vec<HandCoeffs>,
    pub frames: Vec<Frame>,
}

impl SyntheticClip {
    pub fn len(&self) -> usize {
        self.face.len()
    }

    pub fn is_empty(&self) -> bool {
        self.face.is_empty()
    }

    /// Face coefficients as a `[T, E+6]` tensor.
    pub fn face_flat(&self) -> Tensor {
        let d = self.face[0].expr.len() + 6;
        let mut data = Vec::with_capacity(self.len() * d);
        for f in &self.face {
            data.extend(f.to_flat());
        }
        Tensor::new(&[self.len(), d], data)
    }

    /// Body-stage targets as `[T, body_dim]` in the layout
    /// `[head offsets, deformation, scale, translation, joint angles, wrist]`.
    pub fn body_flat(&self) -> Tensor {
        let t = self.len();
        let d = body_flat_dim(self.head_offsets[0].len(), self.body[0].deformation.len(), self.hands[0].joint_angles.len());
        let mut data = Vec::with_capacity(t * d);
        for i in 0..t {
            data.extend(self.head_offsets[i].iter().flatten());
            data.extend(self.body[i].deformation.iter().flatten());
            data.push(self.body[i].scale);
            data.extend_from_slice(&self.body[i].translation);
            data.extend_from_slice(&self.hands[i].joint_angles);
            data.extend_from_slice(&self.hands[i].wrist_pose);
        }
        Tensor::new(&[t, d], data)
    }

    /// Composed driving body keypoints for frame `i`.
    pub fn body_keypoints(&self, i: usize) -> Result<KeypointSet> {
        let b = &self.body[i];
        let params = BodyMotionParams::new(
            self.body_canonical.clone(),
            b.deformation.clone(),
            b.scale,
            b.translation,
        )?;
        compose_body_keypoints(&params)
    }

    /// Per-clip style statistics: (std of expression weights, std of pose
    /// frame-to-frame velocity).
    pub fn style_stats(&self) -> [f64; 2] {
        style_of_sequence(&self.face)
    }
}

pub fn body_flat_dim(n_head: usize, k_body: usize, hand_joints: usize) -> usize {
    3 * n_head + 3 * k_body + 1 + 3 + hand_joints + 6
}

/// (std of expression entries, std of pose velocity entries).
pub fn style_of_sequence(face: &[FaceCoeffs]) -> [f64; 2] {
    let mut expr: Vec<f64> = Vec::new();
    for f in face {
        expr.extend_from_slice(&f.expr);
    }
    let std = |v: &[f64]| {
        if v.is_empty() {
            return 0.0;
        }
        let m = v.iter().sum::<f64>() / v.len() as f64;
        (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
    };
    let mut vel: Vec<f64> = Vec::new();
    for w in face.windows(2) {
        for a in 0..6 {
            vel.push(w[1].pose[a] - w[0].pose[a]);
        }
    }
    [std(&expr), std(&vel)]
}

fn derive_rng(seed: u64, tag: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(tag))
}

/// White noise smoothed by a 5-tap binomial kernel applied three times,
/// normalized to roughly unit amplitude.
pub fn smooth_noise<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let mut x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let kernel = [1.0, 4.0, 6.0, 4.0, 1.0];
    for _ in 0..3 {
        let prev = x.clone();
        for (i, slot) in x.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let idx = (i as isize + k as isize - 2).clamp(0, n as isize - 1) as usize;
                acc += w * prev[idx];
            }
            *slot = acc / 16.0;
        }
    }
    // the triple smoothing shrinks amplitude; rescale toward [-1, 1]
    let scale = 2.4;
    x.iter_mut().for_each(|v| *v = (*v * scale).clamp(-1.0, 1.0));
    x
}

/// Generate one clip. Deterministic in `(seed, length_s, cfg)`.
pub fn make_clip(seed: u64, length_s: f64, cfg: &Config) -> Result<SyntheticClip> {
    if length_s < 1.0 {
        return Err(Error::InvalidParams(format!("clip length {length_s} s below 1 s minimum")));
    }
    let world = World::from_config(cfg);
    let n = (length_s * cfg.model.fps as f64).round() as usize;
    let e = cfg.model.expr_dim;
    let k = cfg.model.body_points;

    // --- face coefficient trajectories ---
    let mut rng = derive_rng(seed, 1);
    let mut expr_tracks: Vec<Vec<f64>> = Vec::with_capacity(e);
    for ch in 0..e {
        let amp: f64 =
            if ch == 0 { rng.gen_range(0.30..0.55) } else { rng.gen_range(0.05..0.40) };
        let base: f64 = rng.gen_range(0.35..0.60);
        let s = smooth_noise(&mut rng, n);
        expr_tracks.push(s.iter().map(|v| (base + amp * v).clamp(0.0, 1.0)).collect());
    }
    let mut pose_tracks: Vec<Vec<f64>> = Vec::with_capacity(6);
    for a in 0..6 {
        let amp: f64 = match a {
            0..=2 => rng.gen_range(0.05..0.20),
            3 | 4 => rng.gen_range(0.01..0.05),
            _ => 0.0,
        };
        let s = smooth_noise(&mut rng, n);
        pose_tracks.push(s.iter().map(|v| amp * v).collect());
    }
    let face: Vec<FaceCoeffs> = (0..n)
        .map(|t| {
            let expr = (0..e).map(|ch| expr_tracks[ch][t]).collect();
            let mut pose = [0.0; 6];
            for (a, slot) in pose.iter_mut().enumerate() {
                *slot = pose_tracks[a][t];
            }
            FaceCoeffs { expr, pose }
        })
        .collect();
    let head_offsets: Vec<Vec<Point3>> =
        face.iter().map(|f| world.gt_head_offsets(f)).collect();

    // --- body motion ---
    let mut rng = derive_rng(seed, 2);
    let mut body_canonical = Vec::with_capacity(k);
    for idx in 0..k {
        let (row, col) = (idx / 4, idx % 4);
        let gx = -0.42 + 0.28 * col as f64 + rng.gen_range(-0.03..0.03);
        let gy = -0.18 + 0.28 * row as f64 + rng.gen_range(-0.03..0.03);
        let gz = rng.gen_range(-0.08..0.08);
        body_canonical.push([gx, gy, gz]);
    }
    let delta_tracks: Vec<Vec<Vec<f64>>> = (0..k)
        .map(|_| (0..3).map(|_| smooth_noise(&mut rng, n)).collect())
        .collect();
    let scale_track = smooth_noise(&mut rng, n);
    let tx_track = smooth_noise(&mut rng, n);
    let ty_track = smooth_noise(&mut rng, n);
    let body: Vec<BodyFrame> = (0..n)
        .map(|t| BodyFrame {
            deformation: (0..k)
                .map(|p| {
                    [
                        0.035 * delta_tracks[p][0][t],
                        0.035 * delta_tracks[p][1][t],
                        0.02 * delta_tracks[p][2][t],
                    ]
                })
                .collect(),
            scale: 1.0 + 0.04 * scale_track[t],
            translation: [0.05 * tx_track[t], 0.035 * ty_track[t], 0.0],
        })
        .collect();

    // --- hand motion ---
    let mut rng = derive_rng(seed, 3);
    let nj = cfg.model.hand_joints;
    let curl_tracks: Vec<Vec<f64>> = (0..5).map(|_| smooth_noise(&mut rng, n)).collect();
    let detail_tracks: Vec<Vec<f64>> = (0..nj).map(|_| smooth_noise(&mut rng, n)).collect();
    let wrist_rot: Vec<Vec<f64>> = (0..3).map(|_| smooth_noise(&mut rng, n)).collect();
    let wrist_tx = smooth_noise(&mut rng, n);
    let wrist_ty = smooth_noise(&mut rng, n);
    let hands: Vec<HandCoeffs> = (0..n)
        .map(|t| {
            let joint_angles = (0..nj)
                .map(|j| {
                    let digit = (j / 3).min(4);
                    (0.30 + 0.40 * curl_tracks[digit][t] + 0.15 * detail_tracks[j][t])
                        .clamp(-std::f64::consts::FRAC_PI_2, std::f64::consts::FRAC_PI_2)
                })
                .collect();
            let wrist_pose = [
                0.12 * wrist_rot[0][t],
                0.12 * wrist_rot[1][t],
                0.35 * wrist_rot[2][t],
                0.42 + 0.05 * wrist_tx[t],
                0.30 + 0.05 * wrist_ty[t],
                0.25,
            ];
            HandCoeffs { joint_angles, wrist_pose, handedness: Handedness::Right }
        })
        .collect();

    // --- audio features: a fixed mix of mouth-channel signals plus a
    //     per-clip low-frequency texture ---
    let d_a = cfg.model.mel_bands;
    let mut mix_rng = ChaCha20Rng::seed_from_u64(AUDIO_MIX_SEED);
    let mix = Tensor::randn(&[3, d_a], &mut mix_rng);
    let mut rng = derive_rng(seed, 4);
    let texture: Vec<Vec<f64>> = (0..d_a).map(|_| smooth_noise(&mut rng, n)).collect();
    let mut audio = Tensor::zeros(&[n, d_a]);
    for t in 0..n {
        let m = expr_tracks[0][t];
        let basis = [m, m * m, (3.0 * (m - 0.5)).tanh()];
        for b in 0..d_a {
            let mut v = 0.0;
            for (i, &x) in basis.iter().enumerate() {
                v += mix.data()[i * d_a + b] * x;
            }
            audio.data_mut()[t * d_a + b] = v + 0.20 * texture[b][t];
        }
    }

    // --- frames ---
    let palette = Palette::from_seed(seed);
    let (h, w) = (cfg.gen.frame_h, cfg.gen.frame_w);
    let mut frames = Vec::with_capacity(n);
    for t in 0..n {
        let explicit = world.head_keypoints(&face[t])?;
        let head = apply_head_offset(&explicit, &head_offsets[t])?;
        let frame = match cfg.gen.mode {
            Mode::UpperBody => {
                let params = BodyMotionParams::new(
                    body_canonical.clone(),
                    body[t].deformation.clone(),
                    body[t].scale,
                    body[t].translation,
                )?;
                let body_kps = compose_body_keypoints(&params)?;
                render_avatar(&head, Some(&body_kps), Some(&hands[t]), &palette, h, w, world.hand_scale)
            }
            Mode::HeadOnly => render_avatar(&head, None, None, &palette, h, w, world.hand_scale),
        };
        frames.push(frame);
    }

    Ok(SyntheticClip {
        seed,
        audio: AudioFeatureSeq { frames: audio },
        face,
        head_offsets,
        body_canonical,
        body,
        hands,
        frames,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Lazily generated clip collection for one split. Construction fails if the
/// configured seed ranges overlap.
pub struct ClipDataset {
    seeds: Vec<u64>,
    cfg: Config,
}

impl ClipDataset {
    pub fn new(cfg: &Config, split: Split) -> Result<Self> {
        cfg.validate()?;
        let seeds = match split {
            Split::Train => cfg.data.train_seeds(),
            Split::Test => cfg.data.test_seeds(),
        };
        Ok(Self { seeds, cfg: cfg.clone() })
    }

    pub fn seeds(&self) -> &[u64] {
        &self.seeds
    }

    pub fn len(&self) -> usize {
        self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seeds.is_empty()
    }

    pub fn get(&self, index: usize) -> Result<SyntheticClip> {
        make_clip(self.seeds[index], self.cfg.data.clip_seconds, &self.cfg)
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<SyntheticClip>> + '_ {
        self.seeds.iter().map(move |&s| make_clip(s, self.cfg.data.clip_seconds, &self.cfg))
    }
}
