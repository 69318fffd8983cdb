//! Warping-based frame generation: appearance extraction, implicit keypoint
//! detection, warp estimation from fused keypoints, decoding with
//! multi-scale hand injection, face refinement, and the head-only variant.

mod nets;
mod refine;
mod warp;

pub use nets::{animate_head, AppearanceEncoder, FrameDecoder, GeneratorParams, ImageInjector, MotionDetector};
pub use refine::{
    crop_frame, face_box_from_keypoints, face_mask, keypoints_in_crop_px,
    keypoints_to_crop_canonical, paste_region, FaceBox, FaceRefiner, RefineSession,
};
pub use warp::{
    broadcast_flow_depth, check_layouts, flow_from_weights, keypoint_heatmaps,
    keypoints_tensor, WarpEstimator,
};

use portray_grad::tensor::Tensor;

use crate::error::{Error, Result};
use crate::io::ppm;
use crate::motion::Point3;

/// RGB raster, planar `[3, h, w]`, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub pixels: Tensor,
}

impl Frame {
    pub fn new(pixels: Tensor) -> Self {
        assert_eq!(pixels.shape().len(), 3);
        assert_eq!(pixels.shape()[0], 3);
        Self { pixels }
    }

    pub fn filled(h: usize, w: usize, rgb: [f64; 3]) -> Self {
        let mut pixels = Tensor::zeros(&[3, h, w]);
        for c in 0..3 {
            for v in &mut pixels.data_mut()[c * h * w..(c + 1) * h * w] {
                *v = rgb[c];
            }
        }
        Self { pixels }
    }

    pub fn h(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn w(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn get(&self, c: usize, i: usize, j: usize) -> f64 {
        self.pixels.data()[(c * self.h() + i) * self.w() + j]
    }

    pub fn set(&mut self, c: usize, i: usize, j: usize, v: f64) {
        let (h, w) = (self.h(), self.w());
        self.pixels.data_mut()[(c * h + i) * w + j] = v;
    }

    pub fn validate(&self) -> Result<()> {
        if self.pixels.data().iter().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidParams("frame pixels outside [0,1]".into()));
        }
        Ok(())
    }

    pub fn save_ppm(&self, path: &std::path::Path) -> Result<()> {
        ppm::write_ppm(path, self.h(), self.w(), self.pixels.data())
    }

    pub fn load_ppm(path: &std::path::Path) -> Result<Self> {
        let (h, w, data) = ppm::read_ppm(path)?;
        Ok(Self { pixels: Tensor::new(&[3, h, w], data) })
    }

    /// Quantize to 8 bits per channel, the precision frames leave the
    /// system with. Keeps streaming-vs-sequential comparisons honest.
    pub fn quantized(&self) -> Vec<u8> {
        self.pixels.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }
}

/// Source feature volume `[C, D, H_f, W_f]`.
#[derive(Debug, Clone)]
pub struct AppearanceVolume {
    pub features: Tensor,
}

impl AppearanceVolume {
    pub fn channels(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn depth(&self) -> usize {
        self.features.shape()[1]
    }
}

/// Dense displacement field in normalized volume coordinates, plus an
/// occlusion confidence map.
#[derive(Debug, Clone)]
pub struct WarpField {
    /// `[D, H_f, W_f, 3]`
    pub flow: Tensor,
    /// `[H_f, W_f]`, values in [0, 1]
    pub occlusion: Tensor,
}

/// Canonical body keypoints, per-frame deformation and translation detected
/// from one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectedMotion {
    pub canonical: Vec<Point3>,
    pub deformation: Vec<Point3>,
    pub translation: Point3,
}

impl DetectedMotion {
    pub fn k(&self) -> usize {
        self.canonical.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_accessors() {
        let mut f = Frame::filled(4, 6, [0.1, 0.2, 0.3]);
        assert_eq!((f.h(), f.w()), (4, 6));
        assert_eq!(f.get(1, 2, 3), 0.2);
        f.set(2, 1, 1, 0.9);
        assert_eq!(f.get(2, 1, 1), 0.9);
        f.validate().unwrap();
        f.set(0, 0, 0, 1.5);
        assert!(f.validate().is_err());
    }
}
