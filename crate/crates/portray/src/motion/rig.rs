//! Procedural linear blendshape head rig.
//!
//! The mean shape is a 68-point face layout (17 jaw, 10 brow, 9 nose,
//! 12 eye, 20 mouth points) inside the canonical cube. The first four basis
//! fields are designed (mouth-open, smile, brow-raise, eye-close) so the
//! avatar renderer has semantically stable channels to bind to; the rest are
//! seeded smooth displacement fields, each confined to one face region.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::Point3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Eyes,
    Mouth,
    Eyebrows,
    Contour,
}

#[derive(Debug, Clone)]
pub struct HeadRig {
    mean: Vec<Point3>,
    basis: Vec<Vec<Point3>>, // [E][N]
    regions: Vec<Region>,
}

/// Index ranges of the fixed 68-point layout.
pub const JAW: std::ops::Range<usize> = 0..17;
pub const BROWS: std::ops::Range<usize> = 17..27;
pub const NOSE: std::ops::Range<usize> = 27..36;
pub const RIGHT_EYE: std::ops::Range<usize> = 36..42;
pub const LEFT_EYE: std::ops::Range<usize> = 42..48;
pub const MOUTH: std::ops::Range<usize> = 48..68;
pub const MOUTH_OUTER: std::ops::Range<usize> = 48..60;
pub const MOUTH_INNER: std::ops::Range<usize> = 60..68;

impl HeadRig {
    /// Build the rig. Only `n_points = 68` layouts are generated; expression
    /// count and seed are free.
    pub fn generate(n_points: usize, expr_dim: usize, seed: u64) -> Self {
        assert_eq!(n_points, 68, "the procedural layout is defined for 68 points");
        let mean = mean_layout();
        debug_assert_eq!(mean.len(), 68);
        let regions = region_labels();
        let mut basis = Vec::with_capacity(expr_dim);
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        for e in 0..expr_dim {
            basis.push(match e {
                0 => mouth_open_basis(&mean),
                1 => smile_basis(&mean),
                2 => brow_raise_basis(),
                3 => eye_close_basis(&mean),
                _ => seeded_region_basis(&mean, &regions, e, &mut rng),
            });
        }
        let rig = Self { mean, basis, regions };
        debug_assert!(rig.mean.iter().flatten().all(|v| v.abs() <= 1.0));
        rig
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn expr_dim(&self) -> usize {
        self.basis.len()
    }

    pub fn mean_keypoints(&self) -> &[Point3] {
        &self.mean
    }

    pub fn basis(&self) -> &[Vec<Point3>] {
        &self.basis
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }
}

fn mean_layout() -> Vec<Point3> {
    let mut pts = Vec::with_capacity(68);
    let dome_z = |x: f64, y: f64| 0.25 * (1.0 - (x * x + y * y).min(1.0));
    let mut push = |x: f64, y: f64| {
        pts.push([x, y, dome_z(x, y)]);
    };

    // 17 jaw points, left ear over the chin to right ear (y grows downward)
    for i in 0..17 {
        let theta = std::f64::consts::PI * (1.0 - i as f64 / 16.0);
        push(-0.72 * theta.cos(), 0.08 + 0.82 * theta.sin());
    }
    // 2 x 5 brow points
    for side in [-1.0, 1.0] {
        for i in 0..5 {
            let t = i as f64 / 4.0;
            let x = side * (0.60 - 0.42 * t);
            push(x, -0.40 - 0.06 * (1.0 - (2.0 * t - 1.0).powi(2)));
        }
    }
    // 9 nose points: 4 bridge, 5 base
    for i in 0..4 {
        push(0.0, -0.24 + 0.13 * i as f64);
    }
    for i in 0..5 {
        push(-0.14 + 0.07 * i as f64, 0.22);
    }
    // 2 x 6 eye points
    for side in [-1.0, 1.0] {
        let cx = side * 0.35;
        for i in 0..6 {
            let a = std::f64::consts::TAU * i as f64 / 6.0;
            push(cx + 0.13 * a.cos(), -0.20 + 0.06 * a.sin());
        }
    }
    // mouth: 12 outer, 8 inner
    for i in 0..12 {
        let a = std::f64::consts::TAU * i as f64 / 12.0;
        push(0.27 * a.cos(), 0.52 + 0.11 * a.sin());
    }
    for i in 0..8 {
        let a = std::f64::consts::TAU * i as f64 / 8.0;
        push(0.16 * a.cos(), 0.52 + 0.045 * a.sin());
    }
    pts
}

fn region_labels() -> Vec<Region> {
    let mut regions = vec![Region::Contour; 68];
    for i in BROWS {
        regions[i] = Region::Eyebrows;
    }
    for i in RIGHT_EYE.chain(LEFT_EYE) {
        regions[i] = Region::Eyes;
    }
    for i in MOUTH {
        regions[i] = Region::Mouth;
    }
    regions
}

/// Lower lip and chin move down, upper lip slightly up.
fn mouth_open_basis(mean: &[Point3]) -> Vec<Point3> {
    let mut b = vec![[0.0; 3]; 68];
    for i in MOUTH {
        let below_center = mean[i][1] > 0.52;
        if below_center {
            b[i][1] = if MOUTH_INNER.contains(&i) { 0.16 } else { 0.18 };
        } else if mean[i][1] < 0.52 {
            b[i][1] = -0.04;
        }
    }
    // chin follows
    for i in 6..11 {
        b[i][1] = 0.06;
    }
    b
}

fn smile_basis(mean: &[Point3]) -> Vec<Point3> {
    let mut b = vec![[0.0; 3]; 68];
    for i in MOUTH_OUTER {
        let corner = mean[i][0].abs() > 0.22;
        if corner {
            b[i][0] = 0.10 * mean[i][0].signum();
            b[i][1] = -0.05;
        }
    }
    b
}

fn brow_raise_basis() -> Vec<Point3> {
    let mut b = vec![[0.0; 3]; 68];
    for i in BROWS {
        b[i][1] = -0.10;
    }
    b
}

/// Eye points collapse vertically toward the lid line.
fn eye_close_basis(mean: &[Point3]) -> Vec<Point3> {
    let mut b = vec![[0.0; 3]; 68];
    for i in RIGHT_EYE.chain(LEFT_EYE) {
        b[i][1] = -0.8 * (mean[i][1] - -0.20);
    }
    b
}

fn seeded_region_basis(
    mean: &[Point3],
    regions: &[Region],
    index: usize,
    rng: &mut ChaCha20Rng,
) -> Vec<Point3> {
    let target = match index % 4 {
        0 => Region::Mouth,
        1 => Region::Eyes,
        2 => Region::Eyebrows,
        _ => Region::Contour,
    };
    let members: Vec<usize> =
        (0..mean.len()).filter(|&i| regions[i] == target).collect();
    let mut b = vec![[0.0; 3]; mean.len()];
    // smooth low-frequency field over the region's index parameter
    for axis in 0..3 {
        let amp: f64 = rng.gen_range(0.02..0.07);
        let omega: f64 = rng.gen_range(1.0..3.0);
        let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        for (rank, &i) in members.iter().enumerate() {
            let u = rank as f64 / members.len() as f64;
            b[i][axis] = amp * (std::f64::consts::TAU * omega * u + phase).sin();
        }
    }
    b
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_inside_canonical_cube() {
        let rig = HeadRig::generate(68, 16, 11);
        for p in rig.mean_keypoints() {
            for a in 0..3 {
                assert!(p[a].abs() <= 1.0, "point {p:?} leaves the cube");
            }
        }
    }

    #[test]
    fn every_region_present() {
        let rig = HeadRig::generate(68, 16, 11);
        for want in [Region::Eyes, Region::Mouth, Region::Eyebrows, Region::Contour] {
            assert!(rig.regions().iter().any(|&r| r == want), "missing {want:?}");
        }
    }

    #[test]
    fn basis_finite_and_deterministic() {
        let a = HeadRig::generate(68, 16, 11);
        let b = HeadRig::generate(68, 16, 11);
        for (ba, bb) in a.basis().iter().zip(b.basis()) {
            assert_eq!(ba, bb);
            assert!(ba.iter().flatten().all(|v| v.is_finite()));
        }
        let c = HeadRig::generate(68, 16, 12);
        assert_ne!(a.basis()[5], c.basis()[5], "different seeds must differ");
    }

    #[test]
    fn mouth_open_grows_mouth_extent() {
        let rig = HeadRig::generate(68, 16, 11);
        let spread = |points: &[Point3]| {
            let ys: Vec<f64> = MOUTH.map(|i| points[i][1]).collect();
            ys.iter().cloned().fold(f64::MIN, f64::max) - ys.iter().cloned().fold(f64::MAX, f64::min)
        };
        let closed = spread(rig.mean_keypoints());
        let opened: Vec<Point3> = rig
            .mean_keypoints()
            .iter()
            .zip(&rig.basis()[0])
            .map(|(m, b)| [m[0] + b[0], m[1] + b[1], m[2] + b[2]])
            .collect();
        assert!(spread(&opened) > closed + 0.1);
    }
}
