//! Workspace-wide configuration and its fingerprint.
//!
//! One structured-text (TOML) file configures every command. The
//! `fingerprint` field is a SHA-256 digest of the canonical serialization of
//! everything else; checkpoints embed it and refuse to load under a
//! different configuration.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    UpperBody,
    HeadOnly,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mode::UpperBody => write!(f, "upper_body"),
            Mode::HeadOnly => write!(f, "head_only"),
        }
    }
}

/// Motion-representation and motion-model dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Expression blendshape count E.
    pub expr_dim: usize,
    /// Head keypoint count N_h.
    pub head_points: usize,
    /// Implicit body keypoint count k.
    pub body_points: usize,
    /// Bend angles per hand H.
    pub hand_joints: usize,
    /// Seed for the procedural head rig.
    pub rig_seed: u64,
    /// Log-mel bands D_a.
    pub mel_bands: usize,
    /// Video (and audio-feature) frame rate.
    pub fps: usize,
    /// Frames per generated motion chunk L.
    pub chunk_frames: usize,
    /// History frames H carried between chunks.
    pub history_frames: usize,
    /// Maximum reference-sequence length accepted for style transfer.
    pub max_reference_frames: usize,
    pub face_layers: usize,
    pub face_width: usize,
    pub face_heads: usize,
    pub body_layers: usize,
    pub body_width: usize,
    pub body_heads: usize,
    /// Diffusion training step count T.
    pub diffusion_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    /// Deterministic inference step count.
    pub sample_steps: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            expr_dim: 16,
            head_points: 68,
            body_points: 20,
            hand_joints: 15,
            rig_seed: 11,
            mel_bands: 32,
            fps: 30,
            chunk_frames: 30,
            history_frames: 10,
            max_reference_frames: 60,
            face_layers: 6,
            face_width: 128,
            face_heads: 4,
            body_layers: 2,
            body_width: 128,
            body_heads: 4,
            diffusion_steps: 1000,
            beta_min: 1e-4,
            beta_max: 0.02,
            sample_steps: 50,
        }
    }
}

/// Frame generator dimensions. Desk-scale defaults are 1/4 the linear size
/// of the full-scale 512x768 / 512x512 settings, same aspect ratios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub mode: Mode,
    pub frame_w: usize,
    pub frame_h: usize,
    /// Appearance volume channels C.
    pub vol_channels: usize,
    /// Appearance volume depth D.
    pub vol_depth: usize,
    /// Gaussian radius of keypoint influence, canonical units.
    pub sigma: f64,
    /// Face-refine crop edge, pixels.
    pub refine_crop: usize,
    /// Hand control raster edge for the standalone renderer.
    pub hand_image_size: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            mode: Mode::UpperBody,
            frame_w: 128,
            frame_h: 192,
            vol_channels: 32,
            vol_depth: 8,
            sigma: 0.1,
            refine_crop: 64,
            hand_image_size: 64,
        }
    }
}

impl GenConfig {
    pub fn head_only(frame: usize) -> Self {
        Self { mode: Mode::HeadOnly, frame_w: frame, frame_h: frame, ..Self::default() }
    }

    pub fn vol_h(&self) -> usize {
        self.frame_h / 4
    }

    pub fn vol_w(&self) -> usize {
        self.frame_w / 4
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub train_seed_start: u64,
    pub train_clips: usize,
    pub test_seed_start: u64,
    pub test_clips: usize,
    pub clip_seconds: f64,
    pub sample_rate: u32,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_seed_start: 1,
            train_clips: 8,
            test_seed_start: 100,
            test_clips: 5,
            clip_seconds: 4.0,
            sample_rate: 16_000,
        }
    }
}

impl DataConfig {
    pub fn train_seeds(&self) -> Vec<u64> {
        (self.train_seed_start..self.train_seed_start + self.train_clips as u64).collect()
    }

    pub fn test_seeds(&self) -> Vec<u64> {
        (self.test_seed_start..self.test_seed_start + self.test_clips as u64).collect()
    }
}

/// Per-term Eq-style loss weights. The objective is an unweighted sum by
/// default; every weight stays configurable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub equivariance: f64,
    pub keypoint_prior: f64,
    pub deformation_prior: f64,
    pub perceptual: f64,
    pub gan: f64,
    pub recon: f64,
    pub landmark: f64,
    /// Hand-region term in body mode, face-region term in refine mode.
    pub region_perceptual: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            equivariance: 1.0,
            keypoint_prior: 1.0,
            deformation_prior: 1.0,
            perceptual: 1.0,
            gan: 1.0,
            recon: 1.0,
            landmark: 1.0,
            region_perceptual: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainParams {
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Worker threads for batch assembly; 1 = fully sequential.
    pub threads: usize,
    pub steps_a2m_face: usize,
    pub steps_a2m_body: usize,
    pub steps_gen: usize,
    pub steps_refine: usize,
    pub checkpoint_every: usize,
    pub loss_weights: LossWeights,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 8,
            seed: 0,
            threads: 1,
            steps_a2m_face: 4000,
            steps_a2m_body: 2000,
            steps_gen: 2500,
            steps_refine: 1500,
            checkpoint_every: 1000,
            loss_weights: LossWeights::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct Config {
    /// SHA-256 of the rest of the configuration; filled by `fingerprint()`.
    pub fingerprint: Option<String>,
    pub model: ModelConfig,
    pub gen: GenConfig,
    pub data: DataConfig,
    pub train: TrainParams,
}

impl Config {
    /// Digest of the canonical serialization, ignoring the stored fingerprint.
    pub fn fingerprint(&self) -> String {
        let mut canonical = self.clone();
        canonical.fingerprint = None;
        let text = toml::to_string(&canonical).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(text.as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_toml(&self) -> String {
        let mut with_fp = self.clone();
        with_fp.fingerprint = Some(self.fingerprint());
        toml::to_string_pretty(&with_fp).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config =
            toml::from_str(text).map_err(|e| Error::Config(format!("parse failure: {e}")))?;
        if let Some(stored) = &cfg.fingerprint {
            let actual = cfg.fingerprint();
            if *stored != actual {
                return Err(Error::Config(format!(
                    "stored fingerprint {stored} does not match configuration (expected {actual})"
                )));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.expr_dim == 0 || m.head_points == 0 || m.chunk_frames == 0 || m.fps == 0 {
            return Err(Error::Config("dimensions must be positive".into()));
        }
        if m.history_frames > m.chunk_frames {
            return Err(Error::Config("history_frames must not exceed chunk_frames".into()));
        }
        if !(m.beta_min > 0.0 && m.beta_min <= m.beta_max && m.beta_max < 1.0) {
            return Err(Error::Config("beta range must satisfy 0 < min <= max < 1".into()));
        }
        if m.sample_steps == 0 || m.sample_steps > m.diffusion_steps {
            return Err(Error::Config("sample_steps must be in [1, diffusion_steps]".into()));
        }
        if self.gen.frame_w % 4 != 0 || self.gen.frame_h % 4 != 0 {
            return Err(Error::Config("frame dims must be multiples of 4".into()));
        }
        let train: std::collections::HashSet<u64> =
            self.data.train_seeds().into_iter().collect();
        for s in self.data.test_seeds() {
            if train.contains(&s) {
                return Err(Error::SplitContamination(s));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fingerprint_stable_and_sensitive() {
        let cfg = Config::default();
        assert_eq!(cfg.fingerprint(), cfg.fingerprint());
        let mut other = cfg.clone();
        other.model.face_width = 256;
        assert_ne!(cfg.fingerprint(), other.fingerprint());
    }

    #[test]
    fn toml_roundtrip_checks_fingerprint() {
        let cfg = Config::default();
        let text = cfg.to_toml();
        let parsed = Config::from_toml(&text).unwrap();
        assert_eq!(parsed.model, cfg.model);

        let tampered = text.replace("face_width = 128", "face_width = 64");
        assert!(Config::from_toml(&tampered).is_err());
    }

    #[test]
    fn overlapping_splits_rejected() {
        let mut cfg = Config::default();
        cfg.data.test_seed_start = cfg.data.train_seed_start;
        assert!(matches!(cfg.validate(), Err(Error::SplitContamination(_))));
    }
}
