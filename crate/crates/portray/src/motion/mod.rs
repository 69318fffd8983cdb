//! Non-neural motion math: the blendshape head rig, explicit/implicit
//! keypoint algebra, and hand control-image rasterization.
//!
//! All types are immutable values; all operations are pure functions.

pub mod hand;
pub mod rig;

pub use hand::{hand_capsules, render_capsules, render_hand_control, Capsule, HandControlImage};
pub use rig::HeadRig;

use crate::error::{Error, Result};
use crate::io::records::Record;

pub type Point3 = [f64; 3];

/// Expression blendshape weights plus a 6-DoF head pose
/// (3 Euler rotations in radians, X-then-Y-then-Z, then 3 translations).
#[derive(Debug, Clone, PartialEq)]
pub struct FaceCoeffs {
    pub expr: Vec<f64>,
    pub pose: [f64; 6],
}

impl FaceCoeffs {
    pub fn zeros(expr_dim: usize) -> Self {
        Self { expr: vec![0.0; expr_dim], pose: [0.0; 6] }
    }

    pub fn validate(&self) -> Result<()> {
        for &e in &self.expr {
            if !e.is_finite() || !(0.0..=1.0).contains(&e) {
                return Err(Error::InvalidParams(format!("expression weight {e} outside [0,1]")));
            }
        }
        for &r in &self.pose[..3] {
            if !r.is_finite() || r.abs() > std::f64::consts::PI {
                return Err(Error::InvalidParams(format!("rotation {r} outside [-pi, pi]")));
            }
        }
        for &t in &self.pose[3..] {
            if !t.is_finite() {
                return Err(Error::InvalidParams("non-finite translation".into()));
            }
        }
        Ok(())
    }

    /// Flat layout used by the diffusion stages: expr followed by pose.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.expr.clone();
        v.extend_from_slice(&self.pose);
        v
    }

    pub fn from_flat(flat: &[f64], expr_dim: usize) -> Self {
        assert_eq!(flat.len(), expr_dim + 6);
        let mut pose = [0.0; 6];
        pose.copy_from_slice(&flat[expr_dim..]);
        Self { expr: flat[..expr_dim].to_vec(), pose }
    }

    pub fn dim(expr_dim: usize) -> usize {
        expr_dim + 6
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeypointKind {
    HeadExplicit,
    BodyImplicit,
    Fused,
}

impl KeypointKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            KeypointKind::HeadExplicit => "head_explicit",
            KeypointKind::BodyImplicit => "body_implicit",
            KeypointKind::Fused => "fused",
        }
    }

    pub fn from_str(s: &str) -> Result<Self> {
        match s {
            "head_explicit" => Ok(KeypointKind::HeadExplicit),
            "body_implicit" => Ok(KeypointKind::BodyImplicit),
            "fused" => Ok(KeypointKind::Fused),
            other => Err(Error::Format(format!("unknown keypoint kind '{other}'"))),
        }
    }
}

/// Ordered 3-D point set in canonical coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    pub points: Vec<Point3>,
    pub kind: KeypointKind,
}

impl KeypointSet {
    pub fn new(points: Vec<Point3>, kind: KeypointKind) -> Self {
        Self { points, kind }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn to_record(&self) -> Record {
        let values: Vec<f64> = self.points.iter().flatten().copied().collect();
        Record::new(
            &format!("keypoints.{}", self.kind.as_str()),
            &[self.points.len(), 3],
            values,
        )
    }

    pub fn from_record(rec: &Record) -> Result<Self> {
        let kind_str = rec
            .kind
            .strip_prefix("keypoints.")
            .ok_or_else(|| Error::Format(format!("not a keypoint record: {}", rec.kind)))?;
        let kind = KeypointKind::from_str(kind_str)?;
        if rec.shape.len() != 2 || rec.shape[1] != 3 {
            return Err(Error::Format(format!("bad keypoint shape {:?}", rec.shape)));
        }
        let points = rec.values.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        Ok(Self { points, kind })
    }
}

/// Planar implicit body motion: rotation is pinned to the identity, so the
/// composition reduces to `s * (X_c + delta) + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct BodyMotionParams {
    pub canonical: Vec<Point3>,
    pub deformation: Vec<Point3>,
    pub scale: f64,
    pub translation: Point3,
    rotation: [[f64; 3]; 3],
}

impl BodyMotionParams {
    pub fn new(
        canonical: Vec<Point3>,
        deformation: Vec<Point3>,
        scale: f64,
        translation: Point3,
    ) -> Result<Self> {
        if deformation.len() != canonical.len() {
            return Err(Error::ShapeMismatch {
                context: "body motion params",
                expected: format!("{} deformation rows", canonical.len()),
                got: format!("{}", deformation.len()),
            });
        }
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::InvalidParams(format!("scale must be positive, got {scale}")));
        }
        Ok(Self { canonical, deformation, scale, translation, rotation: IDENTITY3 })
    }

    /// Always the identity matrix.
    pub fn rotation(&self) -> &[[f64; 3]; 3] {
        &self.rotation
    }

    pub fn len(&self) -> usize {
        self.canonical.len()
    }

    pub fn is_empty(&self) -> bool {
        self.canonical.is_empty()
    }
}

pub const IDENTITY3: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Handedness {
    Left,
    Right,
}

/// Articulated hand parameters: one bend angle per capsule segment plus a
/// 6-DoF wrist pose in the same layout as [`FaceCoeffs::pose`].
#[derive(Debug, Clone, PartialEq)]
pub struct HandCoeffs {
    pub joint_angles: Vec<f64>,
    pub wrist_pose: [f64; 6],
    pub handedness: Handedness,
}

impl HandCoeffs {
    pub fn rest(hand_joints: usize, handedness: Handedness) -> Self {
        Self { joint_angles: vec![0.0; hand_joints], wrist_pose: [0.0; 6], handedness }
    }

    pub fn validate(&self) -> Result<()> {
        for &a in &self.joint_angles {
            if !a.is_finite() || a.abs() > std::f64::consts::FRAC_PI_2 {
                return Err(Error::InvalidParams(format!("joint angle {a} outside [-pi/2, pi/2]")));
            }
        }
        if self.wrist_pose.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParams("non-finite wrist pose".into()));
        }
        Ok(())
    }
}

/// Four-parameter orthographic camera: pixel = offset + scale * canonical.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrthoCamera {
    pub sx: f64,
    pub sy: f64,
    pub ox: f64,
    pub oy: f64,
}

impl OrthoCamera {
    /// Camera mapping canonical [-1,1]^2 onto a w x h pixel raster.
    pub fn fit(w: usize, h: usize) -> Self {
        Self { sx: w as f64 / 2.0, sy: h as f64 / 2.0, ox: w as f64 / 2.0, oy: h as f64 / 2.0 }
    }

    pub fn project(&self, p: &Point3) -> (f64, f64) {
        (self.ox + self.sx * p[0], self.oy + self.sy * p[1])
    }

    pub fn unproject(&self, u: f64, v: f64) -> (f64, f64) {
        ((u - self.ox) / self.sx, (v - self.oy) / self.sy)
    }
}

/// Rotation matrix for Euler angles applied X, then Y, then Z.
pub fn euler_xyz(rx: f64, ry: f64, rz: f64) -> [[f64; 3]; 3] {
    let (sx, cx) = rx.sin_cos();
    let (sy, cy) = ry.sin_cos();
    let (sz, cz) = rz.sin_cos();
    // R = Rz * Ry * Rx
    [
        [cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx],
        [sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx],
        [-sy, cy * sx, cy * cx],
    ]
}

pub fn rotate(m: &[[f64; 3]; 3], p: &Point3) -> Point3 {
    [
        m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2],
        m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2],
        m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2],
    ]
}

/// Rigid transform of a 6-vector pose: rotate then translate.
pub fn rigid_transform(pose: &[f64; 6], p: &Point3) -> Point3 {
    let r = euler_xyz(pose[0], pose[1], pose[2]);
    let q = rotate(&r, p);
    [q[0] + pose[3], q[1] + pose[4], q[2] + pose[5]]
}

/// Project face coefficients to explicit head keypoints:
/// rigid(pose) applied to (mean + sum_e expr[e] * basis[e]).
pub fn project_head_keypoints(face: &FaceCoeffs, rig: &HeadRig) -> Result<KeypointSet> {
    if face.expr.len() != rig.expr_dim() {
        return Err(Error::InvalidRig(format!(
            "expression dim {} does not match rig basis count {}",
            face.expr.len(),
            rig.expr_dim()
        )));
    }
    let n = rig.len();
    let mut points = Vec::with_capacity(n);
    for i in 0..n {
        let mut p = rig.mean_keypoints()[i];
        for (e, &w) in face.expr.iter().enumerate() {
            let d = rig.basis()[e][i];
            p[0] += w * d[0];
            p[1] += w * d[1];
            p[2] += w * d[2];
        }
        points.push(rigid_transform(&face.pose, &p));
    }
    Ok(KeypointSet::new(points, KeypointKind::HeadExplicit))
}

/// Pointwise sum of a keypoint set and an offset field of equal shape.
pub fn apply_head_offset(x_ori: &KeypointSet, offsets: &[Point3]) -> Result<KeypointSet> {
    if offsets.len() != x_ori.len() {
        return Err(Error::ShapeMismatch {
            context: "apply_head_offset",
            expected: format!("{} offsets", x_ori.len()),
            got: format!("{}", offsets.len()),
        });
    }
    if offsets.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParams("non-finite offsets".into()));
    }
    let points = x_ori
        .points
        .iter()
        .zip(offsets)
        .map(|(p, d)| [p[0] + d[0], p[1] + d[1], p[2] + d[2]])
        .collect();
    Ok(KeypointSet::new(points, x_ori.kind))
}

/// Compose implicit body keypoints: s * (X_c · R + delta) + t with R = I.
pub fn compose_body_keypoints(params: &BodyMotionParams) -> Result<KeypointSet> {
    if !(params.scale > 0.0) {
        return Err(Error::InvalidParams("scale must be positive".into()));
    }
    let points = params
        .canonical
        .iter()
        .zip(&params.deformation)
        .map(|(c, d)| {
            let rc = rotate(&params.rotation, c);
            [
                params.scale * (rc[0] + d[0]) + params.translation[0],
                params.scale * (rc[1] + d[1]) + params.translation[1],
                params.scale * (rc[2] + d[2]) + params.translation[2],
            ]
        })
        .collect();
    Ok(KeypointSet::new(points, KeypointKind::BodyImplicit))
}

/// Concatenate explicit head keypoints with implicit body keypoints,
/// head points first, order preserved.
pub fn fuse_control(head: &KeypointSet, body: &KeypointSet) -> Result<KeypointSet> {
    if head.kind != KeypointKind::HeadExplicit {
        return Err(Error::InvalidKind { context: "fuse_control head input" });
    }
    if body.kind != KeypointKind::BodyImplicit {
        return Err(Error::InvalidKind { context: "fuse_control body input" });
    }
    let mut points = head.points.clone();
    points.extend_from_slice(&body.points);
    Ok(KeypointSet::new(points, KeypointKind::Fused))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn test_rig() -> HeadRig {
        HeadRig::generate(68, 16, 11)
    }

    #[test]
    fn projection_identity_case() {
        let rig = test_rig();
        let face = FaceCoeffs::zeros(16);
        let kps = project_head_keypoints(&face, &rig).unwrap();
        assert_eq!(kps.len(), 68);
        for (p, m) in kps.points.iter().zip(rig.mean_keypoints()) {
            assert_eq!(p, m);
        }
    }

    #[test]
    fn projection_pure_translation() {
        let rig = test_rig();
        let mut face = FaceCoeffs::zeros(16);
        face.pose[3] = 0.1;
        let kps = project_head_keypoints(&face, &rig).unwrap();
        for (p, m) in kps.points.iter().zip(rig.mean_keypoints()) {
            assert!((p[0] - m[0] - 0.1).abs() < 1e-15);
            assert!((p[1] - m[1]).abs() < 1e-15);
            assert!((p[2] - m[2]).abs() < 1e-15);
        }
    }

    #[test]
    fn projection_unit_expression_matches_loop_oracle() {
        let rig = test_rig();
        let mut face = FaceCoeffs::zeros(16);
        face.expr[1] = 1.0;
        let kps = project_head_keypoints(&face, &rig).unwrap();
        // independent per-point summation oracle
        for i in 0..rig.len() {
            let m = rig.mean_keypoints()[i];
            let b = rig.basis()[1][i];
            let expect = [m[0] + b[0], m[1] + b[1], m[2] + b[2]];
            for a in 0..3 {
                assert!((kps.points[i][a] - expect[a]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn projection_affine_in_expr_at_zero_pose() {
        let rig = test_rig();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        for _ in 0..20 {
            let w1: Vec<f64> = (0..16).map(|_| rng.gen_range(0.0..1.0)).collect();
            let w2: Vec<f64> = (0..16).map(|_| rng.gen_range(0.0..1.0)).collect();
            let alpha: f64 = rng.gen_range(0.0..1.0);
            let mix: Vec<f64> =
                w1.iter().zip(&w2).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect();
            let p1 = project_head_keypoints(&FaceCoeffs { expr: w1, pose: [0.0; 6] }, &rig).unwrap();
            let p2 = project_head_keypoints(&FaceCoeffs { expr: w2, pose: [0.0; 6] }, &rig).unwrap();
            let pm =
                project_head_keypoints(&FaceCoeffs { expr: mix, pose: [0.0; 6] }, &rig).unwrap();
            for i in 0..rig.len() {
                for a in 0..3 {
                    let blend = alpha * p1.points[i][a] + (1.0 - alpha) * p2.points[i][a];
                    assert!((pm.points[i][a] - blend).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn projection_dim_mismatch_rejected() {
        let rig = test_rig();
        let face = FaceCoeffs::zeros(12);
        assert!(matches!(project_head_keypoints(&face, &rig), Err(Error::InvalidRig(_))));
    }

    #[test]
    fn offsets_zero_and_cancel() {
        let x = KeypointSet::new(vec![[1.0, 2.0, 3.0], [-1.0, 0.5, 0.0]], KeypointKind::HeadExplicit);
        let same = apply_head_offset(&x, &[[0.0; 3], [0.0; 3]]).unwrap();
        assert_eq!(same.points, x.points);
        let neg: Vec<Point3> = x.points.iter().map(|p| [-p[0], -p[1], -p[2]]).collect();
        let zeroed = apply_head_offset(&x, &neg).unwrap();
        for p in &zeroed.points {
            assert_eq!(*p, [0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn offsets_match_elementwise_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let points: Vec<Point3> =
            (0..30).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
        let offsets: Vec<Point3> =
            (0..30).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
        let x = KeypointSet::new(points.clone(), KeypointKind::HeadExplicit);
        let y = apply_head_offset(&x, &offsets).unwrap();
        for i in 0..30 {
            for a in 0..3 {
                // scalar-loop oracle
                assert_eq!(y.points[i][a], points[i][a] + offsets[i][a]);
            }
        }
    }

    #[test]
    fn offsets_shape_mismatch_rejected() {
        let x = KeypointSet::new(vec![[0.0; 3]; 4], KeypointKind::HeadExplicit);
        assert!(apply_head_offset(&x, &[[0.0; 3]; 3]).is_err());
    }

    fn random_body(rng: &mut ChaCha20Rng, k: usize) -> BodyMotionParams {
        let canonical: Vec<Point3> =
            (0..k).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
        let deformation: Vec<Point3> =
            (0..k).map(|_| [rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)]).collect();
        BodyMotionParams::new(
            canonical,
            deformation,
            rng.gen_range(0.5..2.0),
            [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)],
        )
        .unwrap()
    }

    #[test]
    fn body_identity_and_doubling() {
        let canonical = vec![[0.1, 0.2, 0.3], [-0.4, 0.0, 0.9]];
        let p = BodyMotionParams::new(canonical.clone(), vec![[0.0; 3]; 2], 1.0, [0.0; 3]).unwrap();
        let kps = compose_body_keypoints(&p).unwrap();
        assert_eq!(kps.points, canonical);
        assert_eq!(kps.kind, KeypointKind::BodyImplicit);

        let p2 = BodyMotionParams::new(canonical.clone(), vec![[0.0; 3]; 2], 2.0, [0.0; 3]).unwrap();
        let kps2 = compose_body_keypoints(&p2).unwrap();
        for (a, b) in kps2.points.iter().zip(&canonical) {
            for c in 0..3 {
                assert_eq!(a[c], 2.0 * b[c]);
            }
        }
    }

    #[test]
    fn body_matches_per_point_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        for _ in 0..20 {
            let p = random_body(&mut rng, 20);
            let kps = compose_body_keypoints(&p).unwrap();
            for i in 0..20 {
                for a in 0..3 {
                    let oracle = p.scale * (p.canonical[i][a] + p.deformation[i][a])
                        + p.translation[a];
                    assert!((kps.points[i][a] - oracle).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn body_scale_must_be_positive() {
        assert!(BodyMotionParams::new(vec![[0.0; 3]], vec![[0.0; 3]], 0.0, [0.0; 3]).is_err());
        assert!(BodyMotionParams::new(vec![[0.0; 3]], vec![[0.0; 3]], -1.0, [0.0; 3]).is_err());
    }

    #[test]
    fn fuse_layout_and_roundtrip() {
        let head = KeypointSet::new(
            (0..5).map(|i| [i as f64, 0.0, 0.0]).collect(),
            KeypointKind::HeadExplicit,
        );
        let body = KeypointSet::new(
            (0..3).map(|i| [0.0, i as f64, 0.0]).collect(),
            KeypointKind::BodyImplicit,
        );
        let fused = fuse_control(&head, &body).unwrap();
        assert_eq!(fused.len(), 8);
        assert_eq!(fused.kind, KeypointKind::Fused);
        assert_eq!(&fused.points[..5], &head.points[..]);
        assert_eq!(&fused.points[5..], &body.points[..]);

        // degenerate empty body
        let empty = KeypointSet::new(vec![], KeypointKind::BodyImplicit);
        let only_head = fuse_control(&head, &empty).unwrap();
        assert_eq!(only_head.points, head.points);

        // wrong kinds rejected
        assert!(fuse_control(&body, &head).is_err());
        assert!(fuse_control(&head, &fused).is_err());
    }

    #[test]
    fn fuse_slicing_recovers_inputs_bit_exactly() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        for _ in 0..50 {
            let head = KeypointSet::new(
                (0..68).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect(),
                KeypointKind::HeadExplicit,
            );
            let body = KeypointSet::new(
                (0..20).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect(),
                KeypointKind::BodyImplicit,
            );
            let fused = fuse_control(&head, &body).unwrap();
            assert_eq!(&fused.points[..68], &head.points[..]);
            assert_eq!(&fused.points[68..], &body.points[..]);
        }
    }

    #[test]
    fn keypoint_record_roundtrip() {
        let kps = KeypointSet::new(vec![[0.25, -1.5, 3.75]], KeypointKind::Fused);
        let rec = kps.to_record();
        let back = KeypointSet::from_record(&rec).unwrap();
        assert_eq!(back, kps);
    }
}
