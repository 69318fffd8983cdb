//! Face refinement: re-render the head crop from the source image at head
//! scale, driven by explicit head keypoints (offsets already applied), with
//! the masked background crop injected through the decoder's AdaIN path, and
//! feather-blend the result back into the frame.

use portray_grad::graph::Graph;
use portray_grad::tensor::Tensor;
use rand::Rng;

use crate::config::{GenConfig, Mode};
use crate::error::{Error, Result};
use crate::motion::{KeypointSet, OrthoCamera};

use super::nets::GeneratorParams;
use super::{AppearanceVolume, Frame};

/// Square crop specification, top-left corner plus edge length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FaceBox {
    pub i0: usize,
    pub j0: usize,
    pub size: usize,
}

impl FaceBox {
    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if self.i0 + self.size > h || self.j0 + self.size > w {
            return Err(Error::InvalidParams(format!(
                "face box {self:?} leaves a {h}x{w} frame"
            )));
        }
        Ok(())
    }
}

/// Square crop of edge `crop` centered on the projected keypoints, clamped
/// inside the frame.
pub fn face_box_from_keypoints(
    kps: &KeypointSet,
    frame_h: usize,
    frame_w: usize,
    crop: usize,
) -> Result<FaceBox> {
    if crop > frame_h || crop > frame_w {
        return Err(Error::InvalidParams(format!(
            "crop {crop} exceeds frame {frame_h}x{frame_w}"
        )));
    }
    let camera = OrthoCamera::fit(frame_w, frame_h);
    let (mut su, mut sv) = (0.0, 0.0);
    for p in &kps.points {
        let (u, v) = camera.project(p);
        su += u;
        sv += v;
    }
    let n = kps.len() as f64;
    let cu = su / n;
    let cv = sv / n;
    let half = crop as f64 / 2.0;
    let j0 = (cu - half).round().clamp(0.0, (frame_w - crop) as f64) as usize;
    let i0 = (cv - half).round().clamp(0.0, (frame_h - crop) as f64) as usize;
    Ok(FaceBox { i0, j0, size: crop })
}

pub fn crop_frame(frame: &Frame, bx: &FaceBox) -> Result<Frame> {
    bx.validate(frame.h(), frame.w())?;
    let s = bx.size;
    let mut out = Tensor::zeros(&[3, s, s]);
    for c in 0..3 {
        for i in 0..s {
            for j in 0..s {
                out.data_mut()[(c * s + i) * s + j] = frame.get(c, bx.i0 + i, bx.j0 + j);
            }
        }
    }
    Ok(Frame::new(out))
}

/// Blend a crop back into the frame: out = (1 - m) * frame + m * crop.
/// A zero mask returns the frame bit-exactly.
pub fn paste_region(frame: &Frame, crop: &Frame, bx: &FaceBox, mask: &Tensor) -> Result<Frame> {
    bx.validate(frame.h(), frame.w())?;
    let s = bx.size;
    assert_eq!(mask.shape(), &[s, s]);
    let mut out = frame.clone();
    for i in 0..s {
        for j in 0..s {
            let m = mask.data()[i * s + j];
            if m == 0.0 {
                continue;
            }
            for c in 0..3 {
                let base = frame.get(c, bx.i0 + i, bx.j0 + j);
                let v = (1.0 - m) * base + m * crop.get(c, i, j);
                out.set(c, bx.i0 + i, bx.j0 + j, v);
            }
        }
    }
    Ok(out)
}

/// Elliptical face mask in crop pixel coordinates.
///
/// `feather_px = 0` gives the hard mask (1 inside the ellipse dilated by
/// `dilate_px`, 0 outside); otherwise the boundary falls off linearly over
/// `feather_px` pixels. Pixels beyond dilation + feather are exactly 0.
pub fn face_mask(
    kps_crop_px: &[(f64, f64)],
    size: usize,
    dilate_px: f64,
    feather_px: f64,
) -> Tensor {
    let n = kps_crop_px.len() as f64;
    let cu = kps_crop_px.iter().map(|p| p.0).sum::<f64>() / n;
    let cv = kps_crop_px.iter().map(|p| p.1).sum::<f64>() / n;
    let ru = kps_crop_px.iter().map(|p| (p.0 - cu).abs()).fold(0.0, f64::max).max(1.0) * 1.15;
    let rv = kps_crop_px.iter().map(|p| (p.1 - cv).abs()).fold(0.0, f64::max).max(1.0) * 1.15;
    let mut mask = Tensor::zeros(&[size, size]);
    let r_min = ru.min(rv);
    for i in 0..size {
        for j in 0..size {
            let du = (j as f64 + 0.5 - cu) / ru;
            let dv = (i as f64 + 0.5 - cv) / rv;
            let e = (du * du + dv * dv).sqrt();
            // approximate pixel distance to the ellipse boundary
            let d_px = (e - 1.0) * r_min - dilate_px;
            let m = if d_px <= 0.0 {
                1.0
            } else if feather_px > 0.0 && d_px < feather_px {
                1.0 - d_px / feather_px
            } else {
                0.0
            };
            mask.data_mut()[i * size + j] = m;
        }
    }
    mask
}

/// Project world keypoints into crop pixel coordinates.
pub fn keypoints_in_crop_px(
    kps: &KeypointSet,
    frame_h: usize,
    frame_w: usize,
    bx: &FaceBox,
) -> Vec<(f64, f64)> {
    let camera = OrthoCamera::fit(frame_w, frame_h);
    kps.points
        .iter()
        .map(|p| {
            let (u, v) = camera.project(p);
            (u - bx.j0 as f64, v - bx.i0 as f64)
        })
        .collect()
}

/// World keypoints re-expressed in the crop's canonical coordinates.
pub fn keypoints_to_crop_canonical(
    kps: &KeypointSet,
    frame_h: usize,
    frame_w: usize,
    bx: &FaceBox,
) -> KeypointSet {
    let px = keypoints_in_crop_px(kps, frame_h, frame_w, bx);
    let half = bx.size as f64 / 2.0;
    let points = px
        .iter()
        .zip(&kps.points)
        .map(|(&(u, v), p)| [u / half - 1.0, v / half - 1.0, p[2]])
        .collect();
    KeypointSet::new(points, kps.kind)
}

const MASK_DILATE_PX: f64 = 2.0;
const MASK_FEATHER_PX: f64 = 3.0;

/// Head-scale refine network plus the crop/blend plumbing around it.
pub struct FaceRefiner {
    pub gen: GeneratorParams,
}

impl FaceRefiner {
    pub fn new<R: Rng>(crop: usize, n_head: usize, rng: &mut R) -> Self {
        let cfg = GenConfig {
            mode: Mode::HeadOnly,
            frame_w: crop,
            frame_h: crop,
            ..GenConfig::default()
        };
        Self { gen: GeneratorParams::new(&cfg, n_head, None, rng) }
    }

    pub fn crop(&self) -> usize {
        self.gen.cfg.frame_w
    }

    /// Precompute the source-side state reused across a session.
    pub fn session(&self, source: &Frame, src_kps: &KeypointSet) -> Result<RefineSession> {
        let bx = face_box_from_keypoints(src_kps, source.h(), source.w(), self.crop())?;
        let crop = crop_frame(source, &bx)?;
        let vol = self.gen.extract_appearance(&crop)?;
        let kps_crop = keypoints_to_crop_canonical(src_kps, source.h(), source.w(), &bx);
        Ok(RefineSession { vol, src_kps_crop: kps_crop })
    }

    /// Re-render the face region of `frame` and blend it back.
    ///
    /// `src_kps`/`drv_kps` are world-space explicit head keypoints with
    /// implicit offsets already applied; `face_box` is the driving-side crop.
    pub fn refine_face(
        &self,
        frame: &Frame,
        session: &RefineSession,
        drv_kps: &KeypointSet,
        face_box: &FaceBox,
    ) -> Result<Frame> {
        face_box.validate(frame.h(), frame.w())?;
        if face_box.size != self.crop() {
            return Err(Error::InvalidParams(format!(
                "face box size {} does not match refine crop {}",
                face_box.size,
                self.crop()
            )));
        }
        let drv_crop = keypoints_to_crop_canonical(drv_kps, frame.h(), frame.w(), face_box);

        // masked background: the crop with the facial region zeroed out
        let bg = crop_frame(frame, face_box)?;
        let drv_px = keypoints_in_crop_px(drv_kps, frame.h(), frame.w(), face_box);
        let hard = face_mask(&drv_px, face_box.size, MASK_DILATE_PX, 0.0);
        let s = face_box.size;
        let mut masked_bg = bg.pixels.clone();
        for c in 0..3 {
            for px in 0..s * s {
                masked_bg.data_mut()[c * s * s + px] *= 1.0 - hard.data()[px];
            }
        }

        let warp = self.gen.estimate_warp(&session.src_kps_crop, &drv_crop, &session.vol)?;
        let refined = self.gen.generate_with_control(&session.vol, &warp, Some(&masked_bg))?;

        let blend = face_mask(&drv_px, face_box.size, MASK_DILATE_PX, MASK_FEATHER_PX);
        paste_region(frame, &refined, face_box, &blend)
    }
}

/// Cached source-side state for one refinement session.
pub struct RefineSession {
    pub vol: AppearanceVolume,
    pub src_kps_crop: KeypointSet,
}

impl GeneratorParams {
    /// Like `generate_frame` but with a raw control image tensor on the
    /// injection path (the refiner's masked background crop).
    pub fn generate_with_control(
        &self,
        vol: &AppearanceVolume,
        warp: &super::WarpField,
        control: Option<&Tensor>,
    ) -> Result<Frame> {
        let g = Graph::new();
        let p = self.store.bind(&g);
        let vv = g.input(vol.features.clone());
        let fv = g.input(warp.flow.clone());
        let ov = g.input(warp.occlusion.clone());
        let warped = g.grid_sample_volume(vv, fv);
        let controls: Vec<portray_grad::graph::Var> =
            control.iter().map(|t| g.input((*t).clone())).collect();
        let out = self.decoder.decode(&g, &p, warped, ov, &controls);
        Ok(Frame::new(g.value(out)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::KeypointKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn crop_and_paste_with_zero_mask_is_identity() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let frame = Frame::new(Tensor::rand_uniform(&[3, 20, 24], 0.0, 1.0, &mut rng));
        let bx = FaceBox { i0: 4, j0: 6, size: 8 };
        let crop = crop_frame(&frame, &bx).unwrap();
        assert_eq!(crop.h(), 8);
        let other = Frame::new(Tensor::rand_uniform(&[3, 8, 8], 0.0, 1.0, &mut rng));
        let pasted = paste_region(&frame, &other, &bx, &Tensor::zeros(&[8, 8])).unwrap();
        assert_eq!(pasted.pixels.data(), frame.pixels.data());
    }

    #[test]
    fn out_of_bounds_box_rejected() {
        let frame = Frame::filled(16, 16, [0.5; 3]);
        let bx = FaceBox { i0: 10, j0: 0, size: 8 };
        assert!(crop_frame(&frame, &bx).is_err());
        let kps = KeypointSet::new(vec![[0.0; 3]], KeypointKind::HeadExplicit);
        assert!(face_box_from_keypoints(&kps, 16, 16, 32).is_err());
    }

    #[test]
    fn mask_zero_beyond_feather() {
        let kps = vec![(8.0, 8.0), (12.0, 10.0), (4.0, 6.0)];
        let mask = face_mask(&kps, 16, 2.0, 3.0);
        // center inside
        assert_eq!(mask.data()[8 * 16 + 8], 1.0);
        // far corner exactly zero
        assert_eq!(mask.data()[0], 0.0);
        assert!(mask.data().iter().all(|&m| (0.0..=1.0).contains(&m)));
    }

    #[test]
    fn refine_passthrough_outside_mask() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let refiner = FaceRefiner::new(16, 5, &mut rng);
        let frame = Frame::new(Tensor::rand_uniform(&[3, 32, 32], 0.0, 1.0, &mut rng));
        let source = Frame::new(Tensor::rand_uniform(&[3, 32, 32], 0.0, 1.0, &mut rng));
        let mk = |rng: &mut ChaCha20Rng| {
            KeypointSet::new(
                (0..5)
                    .map(|_| {
                        [rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), 0.0]
                    })
                    .collect(),
                KeypointKind::HeadExplicit,
            )
        };
        use rand::Rng as _;
        let src_kps = mk(&mut rng);
        let drv_kps = mk(&mut rng);
        let session = refiner.session(&source, &src_kps).unwrap();
        let bx = face_box_from_keypoints(&drv_kps, 32, 32, 16).unwrap();
        let out = refiner.refine_face(&frame, &session, &drv_kps, &bx).unwrap();

        // recompute the blend support and check passthrough outside it
        let drv_px = keypoints_in_crop_px(&drv_kps, 32, 32, &bx);
        let blend = face_mask(&drv_px, 16, 2.0, 3.0);
        for i in 0..32 {
            for j in 0..32 {
                let inside_box = i >= bx.i0 && i < bx.i0 + 16 && j >= bx.j0 && j < bx.j0 + 16;
                let m = if inside_box {
                    blend.data()[(i - bx.i0) * 16 + (j - bx.j0)]
                } else {
                    0.0
                };
                if m == 0.0 {
                    for c in 0..3 {
                        let delta = (out.get(c, i, j) - frame.get(c, i, j)).abs();
                        assert!(delta <= 1.0 / 255.0, "pixel ({i},{j}) changed by {delta}");
                    }
                }
            }
        }
    }
}
