//! The cascaded training objective: equivariance, keypoint/deformation
//! priors, perceptual, GAN, reconstruction, 2-D landmark and region
//! perceptual terms, each independently evaluable and gradient-checked.
//!
//! Body mode carries all eight terms; face-refine mode drops the landmark
//! term and swaps the hand-region perceptual term for the face-region one.

pub mod gan;
pub mod perceptual;

pub use gan::PatchDiscriminator;
pub use perceptual::{PerceptualStack, PERCEPTUAL_SEED};

use portray_grad::graph::{Graph, Var};
use portray_grad::tensor::Tensor;
use rand::Rng;

use crate::config::LossWeights;
use crate::error::{Error, Result};
use crate::videogen::{DetectedMotion, Frame};

pub const KEYPOINT_HINGE_THRESHOLD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    Body,
    FaceRefine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Term {
    Equivariance,
    KeypointPrior,
    DeformationPrior,
    Perceptual,
    Gan,
    Recon,
    Landmark,
    /// Hand-region perceptual in body mode, face-region in refine mode.
    RegionPerceptual,
}

impl Term {
    pub fn tag(&self) -> &'static str {
        match self {
            Term::Equivariance => "e",
            Term::KeypointPrior => "l",
            Term::DeformationPrior => "d",
            Term::Perceptual => "per",
            Term::Gan => "gan",
            Term::Recon => "recon",
            Term::Landmark => "lms",
            Term::RegionPerceptual => "region",
        }
    }
}

pub fn required_terms(mode: LossMode) -> &'static [Term] {
    match mode {
        LossMode::Body => &[
            Term::Equivariance,
            Term::KeypointPrior,
            Term::DeformationPrior,
            Term::Perceptual,
            Term::Gan,
            Term::Recon,
            Term::Landmark,
            Term::RegionPerceptual,
        ],
        LossMode::FaceRefine => &[
            Term::Equivariance,
            Term::KeypointPrior,
            Term::DeformationPrior,
            Term::Perceptual,
            Term::Gan,
            Term::Recon,
            Term::RegionPerceptual,
        ],
    }
}

impl LossWeights {
    pub fn weight_of(&self, term: Term) -> f64 {
        match term {
            Term::Equivariance => self.equivariance,
            Term::KeypointPrior => self.keypoint_prior,
            Term::DeformationPrior => self.deformation_prior,
            Term::Perceptual => self.perceptual,
            Term::Gan => self.gan,
            Term::Recon => self.recon,
            Term::Landmark => self.landmark,
            Term::RegionPerceptual => self.region_perceptual,
        }
    }
}

/// Per-term values, weights and the weighted total for one step.
#[derive(Debug, Clone)]
pub struct LossReport {
    pub mode: LossMode,
    pub terms: Vec<(Term, f64)>,
    pub weights: Vec<(Term, f64)>,
    pub total: f64,
}

impl LossReport {
    pub fn term(&self, t: Term) -> Option<f64> {
        self.terms.iter().find(|(k, _)| *k == t).map(|(_, v)| *v)
    }

    /// One structured-text record for the training log.
    pub fn log_line(&self, step: usize) -> String {
        let mut parts = vec![format!("step={step}")];
        for (t, v) in &self.terms {
            parts.push(format!("{}={v}", t.tag()));
        }
        parts.push(format!("total={}", self.total));
        parts.join(" ")
    }
}

/// Weighted sum of the given terms, validated against the mode's term set.
pub fn total_loss(
    mode: LossMode,
    terms: &[(Term, f64)],
    weights: &LossWeights,
) -> Result<LossReport> {
    let required = required_terms(mode);
    for need in required {
        if !terms.iter().any(|(t, _)| t == need) {
            return Err(Error::InvalidParams(format!(
                "loss mode {mode:?} requires term {need:?}"
            )));
        }
    }
    for (t, v) in terms {
        if !required.contains(t) {
            return Err(Error::InvalidParams(format!(
                "term {t:?} is not part of loss mode {mode:?}"
            )));
        }
        if !v.is_finite() {
            return Err(Error::InvalidParams(format!("non-finite loss term {t:?} = {v}")));
        }
    }
    if terms.len() != required.len() {
        return Err(Error::InvalidParams("duplicate loss terms".into()));
    }
    let ordered: Vec<(Term, f64)> = required
        .iter()
        .map(|t| (*t, terms.iter().find(|(k, _)| k == t).unwrap().1))
        .collect();
    let w: Vec<(Term, f64)> = required.iter().map(|t| (*t, weights.weight_of(*t))).collect();
    let total = ordered.iter().zip(&w).map(|((_, v), (_, wt))| v * wt).sum();
    Ok(LossReport { mode, terms: ordered, weights: w, total })
}

/// Random similarity transform in canonical 2-D coordinates:
/// p' = scale * R(rot) * p + shift.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine2 {
    pub rot: f64,
    pub scale: f64,
    pub shift: [f64; 2],
}

impl Affine2 {
    pub const IDENTITY: Affine2 = Affine2 { rot: 0.0, scale: 1.0, shift: [0.0, 0.0] };

    /// Rotation up to 15 degrees, scale in [0.9, 1.1], shift up to 0.1.
    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        let max_rot = 15.0f64.to_radians();
        Self {
            rot: rng.gen_range(-max_rot..max_rot),
            scale: rng.gen_range(0.9..1.1),
            shift: [rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)],
        }
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.rot.sin_cos();
        [
            self.scale * (c * p[0] - s * p[1]) + self.shift[0],
            self.scale * (s * p[0] + c * p[1]) + self.shift[1],
        ]
    }

    pub fn apply_inverse(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.rot.sin_cos();
        let q = [(p[0] - self.shift[0]) / self.scale, (p[1] - self.shift[1]) / self.scale];
        [c * q[0] + s * q[1], -s * q[0] + c * q[1]]
    }

    /// Transform 2-D points on a graph: pts `[k, 2]` times the linear part
    /// (transposed) plus the shift.
    pub fn apply_points_graph(&self, g: &Graph, pts: Var) -> Var {
        let (s, c) = self.rot.sin_cos();
        // row-vector convention: p' = p * M^T + t
        let m = Tensor::new(
            &[2, 2],
            vec![self.scale * c, self.scale * s, -self.scale * s, self.scale * c],
        );
        let shifted = g.matmul(pts, g.input(m), false, false);
        g.add(shifted, g.input(Tensor::new(&[2], self.shift.to_vec())))
    }

    /// Bilinear inverse-warp of a planar `[3, H, W]` image so that content at
    /// canonical p lands at T(p). Border-clamped; the identity transform is
    /// bit-exact.
    pub fn warp_image(&self, img: &Tensor) -> Tensor {
        let (ch, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
        let mut out = Tensor::zeros(img.shape());
        for i in 0..h {
            for j in 0..w {
                let x = 2.0 * (j as f64 + 0.5) / w as f64 - 1.0;
                let y = 2.0 * (i as f64 + 0.5) / h as f64 - 1.0;
                let src = self.apply_inverse([x, y]);
                let jf = ((src[0] + 1.0) / 2.0 * w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
                let if_ = ((src[1] + 1.0) / 2.0 * h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
                let j0 = jf.floor() as usize;
                let i0 = if_.floor() as usize;
                let j1 = (j0 + 1).min(w - 1);
                let i1 = (i0 + 1).min(h - 1);
                let tx = jf - j0 as f64;
                let ty = if_ - i0 as f64;
                for c in 0..ch {
                    let at = |ii: usize, jj: usize| img.data()[(c * h + ii) * w + jj];
                    let v = at(i0, j0) * (1.0 - tx) * (1.0 - ty)
                        + at(i0, j1) * tx * (1.0 - ty)
                        + at(i1, j0) * (1.0 - tx) * ty
                        + at(i1, j1) * tx * ty;
                    out.data_mut()[(c * h + i) * w + j] = v;
                }
            }
        }
        out
    }
}

/// Implicit-keypoint equivariance loss for an arbitrary detector function
/// (frame tensor in, composed 3-D keypoints out), under a fixed transform.
pub fn equivariance_loss_with<F>(detect: F, frame: &Tensor, t: &Affine2) -> f64
where
    F: Fn(&Tensor) -> Vec<[f64; 3]>,
{
    let k1 = detect(frame);
    let k2 = detect(&t.warp_image(frame));
    let mut acc = 0.0;
    for (a, b) in k2.iter().zip(&k1) {
        let tb = t.apply([b[0], b[1]]);
        acc += (a[0] - tb[0]).abs() + (a[1] - tb[1]).abs();
    }
    acc / (2 * k1.len()) as f64
}

/// Composed implicit keypoints of a detection at source scale (s = 1).
pub fn composed_points(det: &DetectedMotion) -> Vec<[f64; 3]> {
    det.canonical
        .iter()
        .zip(&det.deformation)
        .map(|(c, d)| {
            [
                c[0] + d[0] + det.translation[0],
                c[1] + d[1] + det.translation[1],
                c[2] + d[2] + det.translation[2],
            ]
        })
        .collect()
}

/// Keypoint prior: hinge on pairwise distances below the threshold plus the
/// deviation of the mean depth from zero. Deformation prior: mean |delta|.
pub fn prior_losses(det: &DetectedMotion) -> (f64, f64) {
    let pts = composed_points(det);
    let k = pts.len();
    let mut hinge = 0.0;
    let mut pairs = 0usize;
    for i in 0..k {
        for j in i + 1..k {
            let d = ((pts[i][0] - pts[j][0]).powi(2)
                + (pts[i][1] - pts[j][1]).powi(2)
                + (pts[i][2] - pts[j][2]).powi(2))
            .sqrt();
            hinge += (KEYPOINT_HINGE_THRESHOLD - d).max(0.0);
            pairs += 1;
        }
    }
    let mean_depth = pts.iter().map(|p| p[2]).sum::<f64>() / k as f64;
    let l_l = hinge / pairs.max(1) as f64 + mean_depth.abs();
    let l_d =
        det.deformation.iter().flatten().map(|v| v.abs()).sum::<f64>() / (3 * k) as f64;
    (l_l, l_d)
}

/// Graph version of the keypoint prior on composed points `[k, 3]`.
pub fn keypoint_prior_graph(g: &Graph, pts: Var) -> Var {
    let k = g.shape(pts)[0];
    let a = g.reshape(pts, &[k, 1, 3]);
    let b = g.reshape(pts, &[1, k, 3]);
    let diff = g.sub(a, b);
    let d2 = g.sum_axis(g.mul(diff, diff), 2); // [k, k]
    let dist = g.sqrt(g.add_scalar(d2, 1e-12));
    let hinged = g.relu(g.add_scalar(g.mul_scalar(dist, -1.0), KEYPOINT_HINGE_THRESHOLD));
    // zero out the diagonal, average over ordered pairs excluding it
    let mut mask = Tensor::full(&[k, k], 1.0);
    for i in 0..k {
        mask.data_mut()[i * k + i] = 0.0;
    }
    let off_diag = g.mul(hinged, g.input(mask));
    let pair_term = g.mul_scalar(g.sum(off_diag), 1.0 / (k * (k - 1)) as f64);
    let depth = g.slice(pts, 1, 2, 1); // [k, 1]
    let depth_term = g.abs(g.mean(depth));
    g.add(pair_term, depth_term)
}

pub fn deformation_prior_graph(g: &Graph, deformation: Var) -> Var {
    g.mean(g.abs(deformation))
}

/// 2-D landmark loss: L1 between the xy of composed implicit keypoints and
/// ground-truth 2-D landmarks `[k, 2]`.
pub fn landmark_loss_graph(g: &Graph, composed: Var, gt2d: &Tensor) -> Var {
    let xy = g.slice(composed, 1, 0, 2);
    g.mean(g.abs(g.sub(xy, g.input(gt2d.clone()))))
}

/// Image losses of one prediction/target pair:
/// (perceptual, recon L1, generator hinge GAN, masked region perceptual).
/// Absent mask or discriminator contribute 0.
pub fn image_losses(
    pred: &Frame,
    target: &Frame,
    mask: Option<&Tensor>,
    disc: Option<&PatchDiscriminator>,
    stack: &PerceptualStack,
) -> Result<(f64, f64, f64, f64)> {
    if pred.pixels.shape() != target.pixels.shape() {
        return Err(Error::ShapeMismatch {
            context: "image_losses",
            expected: format!("{:?}", target.pixels.shape()),
            got: format!("{:?}", pred.pixels.shape()),
        });
    }
    if let Some(m) = mask {
        if m.shape() != [pred.h(), pred.w()] {
            return Err(Error::ShapeMismatch {
                context: "image_losses mask",
                expected: format!("{}x{}", pred.h(), pred.w()),
                got: format!("{:?}", m.shape()),
            });
        }
        if m.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidParams("mask must be binary".into()));
        }
    }
    let g = Graph::new();
    let pv = g.input(pred.pixels.clone());
    let tv = g.input(target.pixels.clone());
    let recon = g.value(g.mean(g.abs(g.sub(pv, tv)))).item();
    let per = g.value(stack.distance(&g, pv, tv)).item();
    let per_masked = match mask {
        Some(m) => g.value(stack.masked_distance(&g, pv, tv, m)).item(),
        None => 0.0,
    };
    let gan_loss = match disc {
        Some(d) => g.value(d.generator_loss(&g, pv)).item(),
        None => 0.0,
    };
    Ok((per, recon, gan_loss, per_masked))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::Point3;
    use portray_grad::check::{finite_diff_grad, max_rel_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn spread_points(k: usize) -> Vec<Point3> {
        (0..k).map(|i| [i as f64 * 0.3 - 0.5, (i % 3) as f64 * 0.4, 0.0]).collect()
    }

    #[test]
    fn equivariance_identity_is_zero() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let frame = Tensor::rand_uniform(&[3, 16, 16], 0.0, 1.0, &mut rng);
        // any detector: here, image statistics pooled into fake keypoints
        let detect = |img: &Tensor| -> Vec<[f64; 3]> {
            let m = img.mean();
            vec![[m, -m, 0.0], [0.3 * m, m * m, 0.1]]
        };
        let loss = equivariance_loss_with(detect, &frame, &Affine2::IDENTITY);
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn equivariance_constant_detector_closed_form() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let frame = Tensor::rand_uniform(&[3, 8, 8], 0.0, 1.0, &mut rng);
        let kps = [[0.2, -0.3, 0.0], [-0.5, 0.4, 0.1], [0.0, 0.1, -0.2]];
        let detect = |_: &Tensor| kps.to_vec();
        let t = Affine2 { rot: 0.2, scale: 1.05, shift: [0.04, -0.06] };
        let loss = equivariance_loss_with(detect, &frame, &t);
        // closed form: mean |kp - T(kp)| over x/y
        let mut expect = 0.0;
        for p in &kps {
            let tp = t.apply([p[0], p[1]]);
            expect += (p[0] - tp[0]).abs() + (p[1] - tp[1]).abs();
        }
        expect /= 6.0;
        assert!((loss - expect).abs() < 1e-12);
        assert!(loss >= 0.0);
    }

    #[test]
    fn priors_on_clean_and_degenerate_inputs() {
        let det = DetectedMotion {
            canonical: spread_points(5),
            deformation: vec![[0.0; 3]; 5],
            translation: [0.0; 3],
        };
        let (l_l, l_d) = prior_losses(&det);
        assert_eq!((l_l, l_d), (0.0, 0.0));

        // two coincident keypoints: one offending pair contributes the full
        // threshold before averaging
        let mut coincident = spread_points(5);
        coincident[1] = coincident[0];
        let det2 = DetectedMotion {
            canonical: coincident,
            deformation: vec![[0.0; 3]; 5],
            translation: [0.0; 3],
        };
        let (l_l2, _) = prior_losses(&det2);
        let pairs = 10.0;
        assert!((l_l2 - KEYPOINT_HINGE_THRESHOLD / pairs).abs() < 1e-12);

        let det3 = DetectedMotion {
            canonical: spread_points(4),
            deformation: vec![[1.0; 3]; 4],
            translation: [0.0; 3],
        };
        let (_, l_d3) = prior_losses(&det3);
        assert!((l_d3 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn total_loss_bookkeeping() {
        let w = LossWeights::default();
        let zero_terms: Vec<(Term, f64)> =
            required_terms(LossMode::Body).iter().map(|t| (*t, 0.0)).collect();
        let r = total_loss(LossMode::Body, &zero_terms, &w).unwrap();
        assert_eq!(r.total, 0.0);

        let unit_terms: Vec<(Term, f64)> =
            required_terms(LossMode::Body).iter().map(|t| (*t, 1.0)).collect();
        let r = total_loss(LossMode::Body, &unit_terms, &w).unwrap();
        assert_eq!(r.total, 8.0, "body mode is the literal eight-term sum");

        let refine_unit: Vec<(Term, f64)> =
            required_terms(LossMode::FaceRefine).iter().map(|t| (*t, 1.0)).collect();
        let r = total_loss(LossMode::FaceRefine, &refine_unit, &w).unwrap();
        assert_eq!(r.total, 7.0);
        assert!(r.term(Term::Landmark).is_none(), "refine mode carries no landmark term");

        // missing term rejected
        let mut missing = unit_terms.clone();
        missing.retain(|(t, _)| *t != Term::Gan);
        assert!(total_loss(LossMode::Body, &missing, &w).is_err());
        // landmark not allowed in refine mode
        assert!(total_loss(LossMode::FaceRefine, &unit_terms, &w).is_err());
    }

    #[test]
    fn total_loss_matches_dot_product_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for _ in 0..20 {
            let mut w = LossWeights::default();
            w.equivariance = rng.gen_range(0.0..2.0);
            w.keypoint_prior = rng.gen_range(0.0..2.0);
            w.deformation_prior = rng.gen_range(0.0..2.0);
            w.perceptual = rng.gen_range(0.0..2.0);
            w.gan = rng.gen_range(0.0..2.0);
            w.recon = rng.gen_range(0.0..2.0);
            w.landmark = rng.gen_range(0.0..2.0);
            w.region_perceptual = rng.gen_range(0.0..2.0);
            let terms: Vec<(Term, f64)> = required_terms(LossMode::Body)
                .iter()
                .map(|t| (*t, rng.gen_range(-1.0..3.0)))
                .collect();
            let r = total_loss(LossMode::Body, &terms, &w).unwrap();
            let oracle: f64 =
                terms.iter().map(|(t, v)| v * w.weight_of(*t)).sum();
            let rel = (r.total - oracle).abs() / oracle.abs().max(1e-12);
            assert!(rel < 1e-8, "total {} vs oracle {oracle}", r.total);
        }
    }

    #[test]
    fn image_losses_identity_and_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let stack = PerceptualStack::new(PERCEPTUAL_SEED);
        let a = Frame::new(Tensor::rand_uniform(&[3, 16, 16], 0.0, 1.0, &mut rng));
        let mask = Tensor::new(
            &[16, 16],
            (0..256).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect(),
        );
        let (per, recon, _, per_m) =
            image_losses(&a, &a, Some(&mask), None, &stack).unwrap();
        assert_eq!((per, recon, per_m), (0.0, 0.0, 0.0));

        // zero-area mask yields zero by convention
        let b = Frame::new(Tensor::rand_uniform(&[3, 16, 16], 0.0, 1.0, &mut rng));
        let (_, recon_ab, _, per_zero) =
            image_losses(&a, &b, Some(&Tensor::zeros(&[16, 16])), None, &stack).unwrap();
        assert_eq!(per_zero, 0.0);

        // naive per-pixel mean-abs oracle
        let mut oracle = 0.0;
        for (x, y) in a.pixels.data().iter().zip(b.pixels.data()) {
            oracle += (x - y).abs();
        }
        oracle /= a.pixels.numel() as f64;
        assert!((recon_ab - oracle).abs() < 1e-10);

        // dimension mismatch
        let c = Frame::filled(8, 8, [0.0; 3]);
        assert!(image_losses(&a, &c, None, None, &stack).is_err());
    }

    /// Every differentiable term gradient-checked on a <=100-parameter
    /// rigged model, relative error < 1e-3.
    #[test]
    fn gradient_checks_on_rigged_models() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let frame = Tensor::rand_uniform(&[3, 8, 8], 0.2, 0.8, &mut rng);
        let target = Tensor::rand_uniform(&[3, 8, 8], 0.2, 0.8, &mut rng);
        let stack = PerceptualStack::new(PERCEPTUAL_SEED);
        let disc = PatchDiscriminator::new(&mut ChaCha20Rng::seed_from_u64(6));

        // rigged 4x4x3 = 48-parameter "generator": pred = sigmoid(params)
        let p0: Vec<f64> =
            (0..192).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>()[..192].to_vec();
        // (use 8x8 pred so the discriminator's stride-2 stack fits: 192 params)
        let build_pred = |g: &Graph, params: Var| g.sigmoid(params);

        let check_term = |name: &str, f: &dyn Fn(&Graph, Var) -> Var, tol: f64| {
            let eval = |xs: &[f64]| {
                let g = Graph::new();
                let p = g.param(Tensor::new(&[3, 8, 8], xs.to_vec()));
                g.value(f(&g, p)).item()
            };
            let numeric = finite_diff_grad(eval, &p0, 1e-5);
            let g = Graph::new();
            let p = g.param(Tensor::new(&[3, 8, 8], p0.clone()));
            let loss = f(&g, p);
            let grads = g.backward(loss);
            let analytic = grads[p.0].as_ref().expect("no grad").clone();
            let err = max_rel_error(analytic.data(), &numeric);
            assert!(err < tol, "{name}: gradient relative error {err:.2e}");
        };

        // recon
        let t2 = target.clone();
        check_term("recon", &move |g, p| {
            let pred = build_pred(g, p);
            g.mean(g.abs(g.sub(pred, g.input(t2.clone()))))
        }, 1e-3);

        // perceptual
        let t3 = target.clone();
        let stack_ref = &stack;
        check_term("perceptual", &move |g, p| {
            let pred = build_pred(g, p);
            stack_ref.distance(g, pred, g.input(t3.clone()))
        }, 1e-3);

        // masked perceptual
        let mask = Tensor::new(&[8, 8], (0..64).map(|i| if i % 2 == 0 { 1.0 } else { 0.0 }).collect());
        let t4 = target.clone();
        check_term("region_perceptual", &move |g, p| {
            let pred = build_pred(g, p);
            stack_ref.masked_distance(g, pred, g.input(t4.clone()), &mask)
        }, 1e-3);

        // generator GAN hinge
        let disc_ref = &disc;
        check_term("gan", &move |g, p| {
            let pred = build_pred(g, p);
            disc_ref.generator_loss(g, pred)
        }, 1e-3);

        // keypoint + deformation priors and landmark on a 30-parameter rig
        let kp0: Vec<f64> = (0..30).map(|_| rng.gen_range(-0.6..0.6)).collect();
        let gt2d = Tensor::rand_uniform(&[10, 2], -0.5, 0.5, &mut rng);
        let eval_k = |xs: &[f64]| {
            let g = Graph::new();
            let p = g.param(Tensor::new(&[10, 3], xs.to_vec()));
            let l = g.add(
                g.add(keypoint_prior_graph(&g, p), deformation_prior_graph(&g, p)),
                landmark_loss_graph(&g, p, &gt2d),
            );
            g.value(l).item()
        };
        let numeric = finite_diff_grad(eval_k, &kp0, 1e-6);
        let g = Graph::new();
        let p = g.param(Tensor::new(&[10, 3], kp0.clone()));
        let loss = g.add(
            g.add(keypoint_prior_graph(&g, p), deformation_prior_graph(&g, p)),
            landmark_loss_graph(&g, p, &gt2d),
        );
        let grads = g.backward(loss);
        let err = max_rel_error(grads[p.0].as_ref().unwrap().data(), &numeric);
        assert!(err < 1e-3, "priors+landmark gradient error {err:.2e}");

        // equivariance on a rigged 6-parameter detector:
        // kps = base + gain * mean(frame)
        let t = Affine2 { rot: 0.15, scale: 1.04, shift: [0.05, -0.03] };
        let warped = t.warp_image(&frame);
        let eq0: Vec<f64> = (0..8).map(|_| rng.gen_range(-0.4..0.4)).collect();
        let frame_c = frame.clone();
        let eval_e = |xs: &[f64]| {
            let g = Graph::new();
            let params = g.param(Tensor::new(&[8], xs.to_vec()));
            let base = g.reshape(g.slice(params, 0, 0, 6), &[2, 3]);
            let gain = g.slice(params, 0, 6, 2);
            let detect = |img: &Tensor| {
                let m = g.input(Tensor::scalar(img.mean()));
                let scaled = g.mul(gain, m); // [2]
                g.add(base, g.reshape(g.concat(&[scaled, g.input(Tensor::scalar(0.0))], 0), &[1, 3]))
            };
            let k1 = detect(&frame_c);
            let k2 = detect(&warped);
            let p1 = g.slice(k1, 1, 0, 2);
            let p2 = g.slice(k2, 1, 0, 2);
            let tp1 = t.apply_points_graph(&g, p1);
            g.value(g.mean(g.abs(g.sub(p2, tp1)))).item()
        };
        let numeric = finite_diff_grad(eval_e, &eq0, 1e-6);
        let g = Graph::new();
        let params = g.param(Tensor::new(&[8], eq0.clone()));
        let base = g.reshape(g.slice(params, 0, 0, 6), &[2, 3]);
        let gain = g.slice(params, 0, 6, 2);
        let detect = |img: &Tensor| {
            let m = g.input(Tensor::scalar(img.mean()));
            let scaled = g.mul(gain, m);
            g.add(base, g.reshape(g.concat(&[scaled, g.input(Tensor::scalar(0.0))], 0), &[1, 3]))
        };
        let k1 = detect(&frame);
        let k2 = detect(&warped);
        let p1 = g.slice(k1, 1, 0, 2);
        let p2 = g.slice(k2, 1, 0, 2);
        let tp1 = t.apply_points_graph(&g, p1);
        let loss = g.mean(g.abs(g.sub(p2, tp1)));
        let grads = g.backward(loss);
        let err = max_rel_error(grads[params.0].as_ref().unwrap().data(), &numeric);
        assert!(err < 1e-3, "equivariance gradient error {err:.2e}");
    }
}
