//! Procedural avatar rasterizer.
//!
//! Every visible shape is bound to keypoints: the head ellipse and facial
//! features follow the 68-point layout, the torso quad and its marker dots
//! follow the implicit body keypoints, and the hand is the capsule-chain
//! render composited at the wrist. Frames are therefore an exact
//! deterministic function of the motion ground truth.

use portray_grad::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::motion::rig::{BROWS, JAW, LEFT_EYE, MOUTH, MOUTH_OUTER, RIGHT_EYE};
use crate::motion::{
    render_hand_control, HandCoeffs, KeypointSet, OrthoCamera, Point3,
};
use crate::videogen::Frame;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Palette {
    pub background: [f64; 3],
    pub torso: [f64; 3],
    pub dot: [f64; 3],
    pub skin: [f64; 3],
    pub brow: [f64; 3],
    pub eye: [f64; 3],
    pub mouth: [f64; 3],
}

impl Palette {
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(41));
        let jitter = |rng: &mut ChaCha20Rng, base: [f64; 3], amp: f64| {
            [
                (base[0] + rng.gen_range(-amp..amp)).clamp(0.05, 0.97),
                (base[1] + rng.gen_range(-amp..amp)).clamp(0.05, 0.97),
                (base[2] + rng.gen_range(-amp..amp)).clamp(0.05, 0.97),
            ]
        };
        let torso = jitter(&mut rng, [0.30, 0.42, 0.58], 0.18);
        Self {
            background: jitter(&mut rng, [0.82, 0.84, 0.86], 0.08),
            torso,
            dot: [torso[0] * 0.55, torso[1] * 0.55, torso[2] * 0.55],
            skin: jitter(&mut rng, [0.84, 0.68, 0.56], 0.08),
            brow: [0.22, 0.16, 0.12],
            eye: [0.10, 0.10, 0.14],
            mouth: jitter(&mut rng, [0.62, 0.20, 0.22], 0.05),
        }
    }
}

fn fill_ellipse(frame: &mut Frame, camera: &OrthoCamera, cx: f64, cy: f64, rx: f64, ry: f64, color: [f64; 3]) {
    if rx <= 0.0 || ry <= 0.0 {
        return;
    }
    let (h, w) = (frame.h(), frame.w());
    let (u0, v0) = camera.project(&[cx - rx, cy - ry, 0.0]);
    let (u1, v1) = camera.project(&[cx + rx, cy + ry, 0.0]);
    let j0 = (u0.floor().max(0.0)) as usize;
    let j1 = (u1.ceil().clamp(0.0, w as f64)) as usize;
    let i0 = (v0.floor().max(0.0)) as usize;
    let i1 = (v1.ceil().clamp(0.0, h as f64)) as usize;
    for i in i0..i1 {
        for j in j0..j1 {
            let (x, y) = camera.unproject(j as f64 + 0.5, i as f64 + 0.5);
            let dx = (x - cx) / rx;
            let dy = (y - cy) / ry;
            if dx * dx + dy * dy <= 1.0 {
                for c in 0..3 {
                    frame.set(c, i, j, color[c]);
                }
            }
        }
    }
}

fn fill_capsule(frame: &mut Frame, camera: &OrthoCamera, a: &Point3, b: &Point3, r: f64, color: [f64; 3]) {
    let (h, w) = (frame.h(), frame.w());
    let (ua, va) = camera.project(a);
    let (ub, vb) = camera.project(b);
    let ru = r * camera.sx.abs();
    let rv = r * camera.sy.abs();
    let j0 = ((ua.min(ub) - ru).floor().max(0.0)) as usize;
    let j1 = ((ua.max(ub) + ru).ceil().clamp(0.0, w as f64)) as usize;
    let i0 = ((va.min(vb) - rv).floor().max(0.0)) as usize;
    let i1 = ((va.max(vb) + rv).ceil().clamp(0.0, h as f64)) as usize;
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    for i in i0..i1 {
        for j in j0..j1 {
            let (x, y) = camera.unproject(j as f64 + 0.5, i as f64 + 0.5);
            let t = if len2 > 0.0 {
                (((x - a[0]) * dx + (y - a[1]) * dy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (cx, cy) = (a[0] + t * dx, a[1] + t * dy);
            if (x - cx).powi(2) + (y - cy).powi(2) <= r * r {
                for c in 0..3 {
                    frame.set(c, i, j, color[c]);
                }
            }
        }
    }
}

fn fill_quad(frame: &mut Frame, camera: &OrthoCamera, quad: &[Point3; 4], color: [f64; 3]) {
    let (h, w) = (frame.h(), frame.w());
    let tri = |p: (f64, f64), a: &Point3, b: &Point3, c: &Point3| {
        let s = |p0: &Point3, p1: &Point3| (p.0 - p0[0]) * (p1[1] - p0[1]) - (p.1 - p0[1]) * (p1[0] - p0[0]);
        let (d0, d1, d2) = (s(a, b), s(b, c), s(c, a));
        let has_neg = d0 < 0.0 || d1 < 0.0 || d2 < 0.0;
        let has_pos = d0 > 0.0 || d1 > 0.0 || d2 > 0.0;
        !(has_neg && has_pos)
    };
    let us: Vec<(f64, f64)> = quad.iter().map(|p| camera.project(p)).collect();
    let j0 = us.iter().map(|p| p.0).fold(f64::MAX, f64::min).floor().max(0.0) as usize;
    let j1 = us.iter().map(|p| p.0).fold(f64::MIN, f64::max).ceil().clamp(0.0, w as f64) as usize;
    let i0 = us.iter().map(|p| p.1).fold(f64::MAX, f64::min).floor().max(0.0) as usize;
    let i1 = us.iter().map(|p| p.1).fold(f64::MIN, f64::max).ceil().clamp(0.0, h as f64) as usize;
    for i in i0..i1 {
        for j in j0..j1 {
            let (x, y) = camera.unproject(j as f64 + 0.5, i as f64 + 0.5);
            if tri((x, y), &quad[0], &quad[1], &quad[2]) || tri((x, y), &quad[0], &quad[2], &quad[3]) {
                for c in 0..3 {
                    frame.set(c, i, j, color[c]);
                }
            }
        }
    }
}

fn extent(points: &[Point3], idx: std::ops::Range<usize>, axis: usize) -> (f64, f64) {
    let vals = idx.clone().map(|i| points[i][axis]);
    let lo = vals.clone().fold(f64::MAX, f64::min);
    let hi = vals.fold(f64::MIN, f64::max);
    (lo, hi)
}

fn center(points: &[Point3], idx: std::ops::Range<usize>) -> (f64, f64) {
    let n = idx.len() as f64;
    let sx: f64 = idx.clone().map(|i| points[i][0]).sum();
    let sy: f64 = idx.clone().map(|i| points[i][1]).sum();
    (sx / n, sy / n)
}

/// Mouth ellipse geometry (center, radii) as the renderer derives it from
/// the final head keypoints.
pub fn mouth_ellipse(head: &KeypointSet) -> (f64, f64, f64, f64) {
    let (cx, cy) = center(&head.points, MOUTH_OUTER);
    let (x0, x1) = extent(&head.points, MOUTH.start..MOUTH.end, 0);
    let (y0, y1) = extent(&head.points, MOUTH.start..MOUTH.end, 1);
    (cx, cy, ((x1 - x0) / 2.0).max(1e-6), ((y1 - y0) / 2.0).max(1e-6))
}

/// Rasterize one avatar frame from world-space keypoints.
///
/// `head` must carry the final keypoints (explicit projection plus implicit
/// offsets already applied); `body` the composed implicit keypoints laid out
/// as the synthetic 4x5 torso grid. `hand_scale` maps hand-local units to
/// canonical units.
pub fn render_avatar(
    head: &KeypointSet,
    body: Option<&KeypointSet>,
    hand: Option<&HandCoeffs>,
    palette: &Palette,
    h: usize,
    w: usize,
    hand_scale: f64,
) -> Frame {
    let camera = OrthoCamera::fit(w, h);
    let mut frame = Frame::filled(h, w, palette.background);

    if let Some(body) = body {
        let p = &body.points;
        let quad = [p[0], p[3], p[19], p[16]];
        fill_quad(&mut frame, &camera, &quad, palette.torso);
        let dot_r = 1.2 / camera.sx.min(camera.sy).abs();
        for kp in p {
            fill_ellipse(&mut frame, &camera, kp[0], kp[1], dot_r, dot_r, palette.dot);
        }
    }

    // head ellipse from the jaw extent plus a forehead allowance
    let pts = &head.points;
    let (jx0, jx1) = extent(pts, JAW, 0);
    let (_, jy1) = extent(pts, JAW, 1);
    let (by0, _) = extent(pts, BROWS, 1);
    let rx = (jx1 - jx0) / 2.0 * 1.06;
    let top = by0 - 0.50 * rx;
    let cy = (top + jy1) / 2.0;
    let ry = (jy1 - top) / 2.0;
    fill_ellipse(&mut frame, &camera, (jx0 + jx1) / 2.0, cy, rx, ry, palette.skin);

    // brows as capsules through each brow's endpoints
    let brow_r = ry * 0.05;
    fill_capsule(&mut frame, &camera, &pts[17], &pts[21], brow_r, palette.brow);
    fill_capsule(&mut frame, &camera, &pts[22], &pts[26], brow_r, palette.brow);

    // eyes
    for eye in [RIGHT_EYE, LEFT_EYE] {
        let (ecx, ecy) = center(pts, eye.clone());
        let (ex0, ex1) = extent(pts, eye.clone(), 0);
        let (ey0, ey1) = extent(pts, eye, 1);
        fill_ellipse(
            &mut frame,
            &camera,
            ecx,
            ecy,
            ((ex1 - ex0) / 2.0).max(1e-6),
            ((ey1 - ey0) / 2.0).max(ry * 0.02),
            palette.eye,
        );
    }

    // mouth
    let (mcx, mcy, mrx, mry) = mouth_ellipse(head);
    fill_ellipse(&mut frame, &camera, mcx, mcy, mrx, mry, palette.mouth);

    // hand composited last (nearest the camera)
    if let Some(hand) = hand {
        let img = render_hand_control(&[hand.clone()], &camera, h, w, hand_scale);
        for i in 0..h {
            for j in 0..w {
                if img.mask[i * w + j] {
                    for c in 0..3 {
                        frame.set(c, i, j, img.pixels[(c * h + i) * w + j]);
                    }
                }
            }
        }
    }
    frame
}

/// Binary mask of the composited hand region, in frame space.
pub fn hand_mask(hand: &HandCoeffs, h: usize, w: usize, hand_scale: f64) -> Tensor {
    let camera = OrthoCamera::fit(w, h);
    let img = render_hand_control(&[hand.clone()], &camera, h, w, hand_scale);
    Tensor::new(&[h, w], img.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect())
}
