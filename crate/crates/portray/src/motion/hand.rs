//! Capsule-chain hand model and its deterministic software rasterizer.
//!
//! The hand is 16 capsules: one palm plus five digits of three segments
//! each. Joint angles bend digits in the local xy plane, cumulatively along
//! the chain; the wrist pose then rigidly places the hand in canonical
//! space. Rendering is flat-shaded per segment with painter's-algorithm
//! depth ordering (larger z is closer to the camera and wins).

use super::{euler_xyz, rotate, HandCoeffs, Handedness, OrthoCamera, Point3};

#[derive(Debug, Clone, PartialEq)]
pub struct HandControlImage {
    pub h: usize,
    pub w: usize,
    /// Planar RGB `[3, h, w]`, values in [0,1]; zero outside the mask.
    pub pixels: Vec<f64>,
    /// True exactly where some capsule rasterizes.
    pub mask: Vec<bool>,
}

impl HandControlImage {
    pub fn empty(h: usize, w: usize) -> Self {
        Self { h, w, pixels: vec![0.0; 3 * h * w], mask: vec![false; h * w] }
    }

    pub fn coverage(&self) -> f64 {
        self.mask.iter().filter(|&&m| m).count() as f64 / (self.h * self.w) as f64
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Capsule {
    pub p0: Point3,
    pub p1: Point3,
    pub r: f64,
    pub shade: f64,
}

const FINGER_LENGTHS: [f64; 3] = [0.30, 0.22, 0.16];
const FINGER_RADII: [f64; 3] = [0.075, 0.065, 0.055];
const FINGER_SCALE: [f64; 4] = [0.88, 1.02, 1.0, 0.82];
const THUMB_LENGTHS: [f64; 3] = [0.24, 0.19, 0.15];
const THUMB_RADII: [f64; 3] = [0.09, 0.08, 0.07];
const BASE_COLOR: [f64; 3] = [0.87, 0.64, 0.52];

/// Capsules of one hand in canonical coordinates.
///
/// `scale` maps hand-local units (span roughly [-1, 1]) into canonical
/// units before the wrist pose is applied.
pub fn hand_capsules(coeffs: &HandCoeffs, scale: f64) -> Vec<Capsule> {
    let mirror = if coeffs.handedness == Handedness::Left { -1.0 } else { 1.0 };
    let rot = euler_xyz(coeffs.wrist_pose[0], coeffs.wrist_pose[1], coeffs.wrist_pose[2]);
    let trans = [coeffs.wrist_pose[3], coeffs.wrist_pose[4], coeffs.wrist_pose[5]];
    let place = |p: [f64; 2]| -> Point3 {
        let local = [mirror * p[0] * scale, p[1] * scale, 0.0];
        let r = rotate(&rot, &local);
        [r[0] + trans[0], r[1] + trans[1], r[2] + trans[2]]
    };

    let mut capsules = Vec::with_capacity(16);
    // palm: wrist up to the knuckle line
    capsules.push(Capsule {
        p0: place([0.0, 0.42]),
        p1: place([0.0, -0.02]),
        r: 0.30 * scale,
        shade: 0.55,
    });

    let n_angles = coeffs.joint_angles.len();
    let angle = |i: usize| if i < n_angles { coeffs.joint_angles[i] } else { 0.0 };

    for digit in 0..5 {
        let (mut pos, mut dir, lengths, radii): ([f64; 2], f64, &[f64; 3], &[f64; 3]) =
            if digit < 4 {
                (
                    [-0.26 + 0.175 * digit as f64, -0.08],
                    -std::f64::consts::FRAC_PI_2, // pointing up in hand-local space
                    &FINGER_LENGTHS,
                    &FINGER_RADII,
                )
            } else {
                ([-0.36, 0.16], -2.55, &THUMB_LENGTHS, &THUMB_RADII)
            };
        let len_scale = if digit < 4 { FINGER_SCALE[digit] } else { 1.0 };
        for seg in 0..3 {
            // positive joint angles curl toward the palm (+x side of the digit)
            dir += angle(3 * digit + seg);
            let step = lengths[seg] * len_scale;
            let next = [pos[0] + step * dir.cos(), pos[1] + step * dir.sin()];
            capsules.push(Capsule {
                p0: place(pos),
                p1: place(next),
                r: radii[seg] * scale,
                shade: 0.55 + 0.45 * (3 * digit + seg + 1) as f64 / 16.0,
            });
            pos = next;
        }
    }
    capsules
}

/// Squared distance from point `(x, y)` to the 2-D segment `(a, b)`.
fn dist2_to_segment(x: f64, y: f64, a: &Point3, b: &Point3) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((x - a[0]) * dx + (y - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (a[0] + t * dx, a[1] + t * dy);
    (x - cx) * (x - cx) + (y - cy) * (y - cy)
}

/// Rasterize one or more hands into an `h` x `w` control image.
///
/// Deterministic: identical inputs produce bit-identical rasters. Hands
/// outside the camera frustum simply contribute nothing.
pub fn render_hand_control(
    hands: &[HandCoeffs],
    camera: &OrthoCamera,
    h: usize,
    w: usize,
    scale: f64,
) -> HandControlImage {
    let mut capsules: Vec<Capsule> = Vec::new();
    for hand in hands {
        capsules.extend(hand_capsules(hand, scale));
    }
    render_capsules(&capsules, camera, h, w)
}

pub fn render_capsules(
    capsules: &[Capsule],
    camera: &OrthoCamera,
    h: usize,
    w: usize,
) -> HandControlImage {
    let mut img = HandControlImage::empty(h, w);
    if capsules.is_empty() {
        return img;
    }
    let mut order: Vec<usize> = (0..capsules.len()).collect();
    // far-to-near painter order; larger z is closer
    order.sort_by(|&a, &b| {
        let za = capsules[a].p0[2] + capsules[a].p1[2];
        let zb = capsules[b].p0[2] + capsules[b].p1[2];
        za.partial_cmp(&zb).unwrap().then(a.cmp(&b))
    });

    // pixel-space bounding box across all capsules to skip empty rows/cols
    let mut u_min = f64::MAX;
    let mut u_max = f64::MIN;
    let mut v_min = f64::MAX;
    let mut v_max = f64::MIN;
    for c in capsules {
        for p in [&c.p0, &c.p1] {
            let (u, v) = camera.project(p);
            let ru = c.r * camera.sx.abs();
            let rv = c.r * camera.sy.abs();
            u_min = u_min.min(u - ru);
            u_max = u_max.max(u + ru);
            v_min = v_min.min(v - rv);
            v_max = v_max.max(v + rv);
        }
    }
    let j0 = u_min.floor().max(0.0) as usize;
    let j1 = (u_max.ceil() as isize).clamp(0, w as isize) as usize;
    let i0 = v_min.floor().max(0.0) as usize;
    let i1 = (v_max.ceil() as isize).clamp(0, h as isize) as usize;

    for i in i0..i1 {
        for j in j0..j1 {
            let (x, y) = camera.unproject(j as f64 + 0.5, i as f64 + 0.5);
            let mut hit: Option<f64> = None;
            for &ci in &order {
                let c = &capsules[ci];
                if dist2_to_segment(x, y, &c.p0, &c.p1) <= c.r * c.r {
                    hit = Some(c.shade);
                }
            }
            if let Some(shade) = hit {
                img.mask[i * w + j] = true;
                for ch in 0..3 {
                    img.pixels[(ch * h + i) * w + j] = BASE_COLOR[ch] * shade;
                }
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn rest_hand() -> HandCoeffs {
        HandCoeffs::rest(15, Handedness::Right)
    }

    fn unit_camera() -> OrthoCamera {
        OrthoCamera::fit(64, 64)
    }

    #[test]
    fn off_screen_hand_yields_empty_raster() {
        let mut hand = rest_hand();
        hand.wrist_pose[3] = 50.0; // far outside [-1, 1]
        let img = render_hand_control(&[hand], &unit_camera(), 64, 64, 0.8);
        assert!(img.mask.iter().all(|&m| !m));
        assert!(img.pixels.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn rendering_is_deterministic() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let mut hand = rest_hand();
        for a in hand.joint_angles.iter_mut() {
            *a = rng.gen_range(-0.8..0.8);
        }
        hand.wrist_pose = [0.3, -0.2, 0.5, 0.1, -0.1, 0.2];
        let a = render_hand_control(&[hand.clone()], &unit_camera(), 64, 64, 0.8);
        let b = render_hand_control(&[hand], &unit_camera(), 64, 64, 0.8);
        assert_eq!(a, b);
    }

    #[test]
    fn mask_zero_implies_pixels_zero() {
        let img = render_hand_control(&[rest_hand()], &unit_camera(), 64, 64, 0.8);
        assert!(img.coverage() > 0.05, "rest hand should cover part of the frame");
        for i in 0..64 {
            for j in 0..64 {
                if !img.mask[i * 64 + j] {
                    for c in 0..3 {
                        assert_eq!(img.pixels[(c * 64 + i) * 64 + j], 0.0);
                    }
                } else {
                    assert!(img.pixels[(0 * 64 + i) * 64 + j] > 0.0);
                }
            }
        }
    }

    #[test]
    fn coverage_matches_monte_carlo_point_in_capsule_oracle() {
        let hand = rest_hand();
        let camera = unit_camera();
        let img = render_hand_control(&[hand.clone()], &camera, 64, 64, 0.8);
        let capsules = hand_capsules(&hand, 0.8);

        // independent oracle: continuous uniform samples over the image
        // rectangle, tested point-in-any-capsule with locally written math
        let mut rng = ChaCha20Rng::seed_from_u64(99);
        let n = 200_000;
        let mut inside = 0usize;
        for _ in 0..n {
            let u: f64 = rng.gen_range(0.0..64.0);
            let v: f64 = rng.gen_range(0.0..64.0);
            let x = (u - camera.ox) / camera.sx;
            let y = (v - camera.oy) / camera.sy;
            let hit = capsules.iter().any(|c| {
                let (ax, ay) = (c.p0[0], c.p0[1]);
                let (bx, by) = (c.p1[0], c.p1[1]);
                let (dx, dy) = (bx - ax, by - ay);
                let len2 = dx * dx + dy * dy;
                let t = if len2 > 0.0 {
                    (((x - ax) * dx + (y - ay) * dy) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let (cx, cy) = (ax + t * dx, ay + t * dy);
                (x - cx).powi(2) + (y - cy).powi(2) <= c.r * c.r
            });
            if hit {
                inside += 1;
            }
        }
        let oracle = inside as f64 / n as f64;
        assert!(
            (img.coverage() - oracle).abs() < 0.02,
            "raster coverage {:.4} vs oracle {:.4}",
            img.coverage(),
            oracle
        );
    }

    #[test]
    fn mask_monotone_in_radius() {
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        for _ in 0..5 {
            let mut hand = rest_hand();
            for a in hand.joint_angles.iter_mut() {
                *a = rng.gen_range(-1.0..1.0);
            }
            hand.wrist_pose =
                [0.0, 0.0, rng.gen_range(-1.0..1.0), rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4), 0.0];
            let base = hand_capsules(&hand, 0.8);
            let grown: Vec<Capsule> =
                base.iter().map(|c| Capsule { r: c.r * 1.5, ..*c }).collect();
            let small = render_capsules(&base, &unit_camera(), 64, 64);
            let big = render_capsules(&grown, &unit_camera(), 64, 64);
            for (s, b) in small.mask.iter().zip(&big.mask) {
                assert!(!s || *b, "enlarging radii removed a mask pixel");
            }
        }
    }
}
