//! Warp-field estimation from source/driving keypoint pairs.
//!
//! Each driving keypoint carries a constant displacement proposal
//! `X_s - X_d` with a Gaussian influence map around the driving point;
//! proposal 0 is always the identity flow. A small convolutional combiner
//! over the stacked heatmap differences and the heatmap-weighted
//! displacement preview emits per-pixel softmax combination weights (shared
//! across depth) plus an occlusion map. The final flow is the weighted sum
//! of proposals.

use portray_grad::graph::{Graph, Var};
use portray_grad::nn::{Bound, Conv2d, ParamStore};
use portray_grad::tensor::Tensor;
use rand::Rng;

use crate::error::{Error, Result};
use crate::motion::KeypointSet;

/// Gaussian influence maps `[K, h, w]` around keypoints `[K, 3]` (their x/y),
/// differentiable w.r.t. the keypoints.
pub fn keypoint_heatmaps(g: &Graph, points: Var, h: usize, w: usize, sigma: f64) -> Var {
    let k = g.shape(points)[0];
    let xy = g.slice(points, 1, 0, 2); // [K, 2]
    let p = g.reshape(xy, &[k, 1, 1, 2]);
    let mut grid = Tensor::zeros(&[1, h, w, 2]);
    for i in 0..h {
        for j in 0..w {
            let base = (i * w + j) * 2;
            grid.data_mut()[base] = if w > 1 { 2.0 * j as f64 / (w - 1) as f64 - 1.0 } else { 0.0 };
            grid.data_mut()[base + 1] =
                if h > 1 { 2.0 * i as f64 / (h - 1) as f64 - 1.0 } else { 0.0 };
        }
    }
    let diff = g.sub(p, g.input(grid)); // [K, h, w, 2]
    let sq = g.mul(diff, diff);
    let d2 = g.sum_axis(sq, 3); // [K, h, w]
    g.exp(g.mul_scalar(d2, -0.5 / (sigma * sigma)))
}

/// Flow field `[h, w, 3]` from combination weights `[K+1, h, w]` and
/// per-proposal displacements `[K+1, 3]`. Proposal order: identity first.
pub fn flow_from_weights(g: &Graph, weights: Var, proposals: Var) -> Var {
    let shape = g.shape(weights);
    let (kp1, h, w) = (shape[0], shape[1], shape[2]);
    let wm = g.reshape(weights, &[kp1, h * w]);
    let flow = g.matmul(proposals, wm, true, false); // [3, h*w]
    g.permute(g.reshape(flow, &[3, h, w]), &[1, 2, 0]) // [h, w, 3]
}

/// Replicate a `[h, w, 3]` flow along a new leading depth axis.
pub fn broadcast_flow_depth(g: &Graph, flow2d: Var, depth: usize) -> Var {
    let shape = g.shape(flow2d);
    let one = g.reshape(flow2d, &[1, shape[0], shape[1], 3]);
    let copies: Vec<Var> = (0..depth).map(|_| one).collect();
    g.concat(&copies, 0)
}

#[derive(Debug, Clone)]
pub struct WarpEstimator {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub head_weights: Conv2d,
    pub head_occlusion: Conv2d,
    /// Total keypoints in the fused layout (head + body, or head-only).
    pub k_total: usize,
    pub sigma: f64,
}

impl WarpEstimator {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        k_total: usize,
        hidden: usize,
        sigma: f64,
    ) -> Self {
        Self {
            conv1: Conv2d::new(store, rng, &format!("{name}.c1"), k_total + 3, hidden, 3, 1, 1),
            conv2: Conv2d::new(store, rng, &format!("{name}.c2"), hidden, hidden, 1, 1, 0),
            head_weights: Conv2d::new(store, rng, &format!("{name}.w"), hidden, k_total + 1, 1, 1, 0),
            head_occlusion: Conv2d::new(store, rng, &format!("{name}.occ"), hidden, 1, 1, 1, 0),
            k_total,
            sigma,
        }
    }

    /// Graph-level estimation. Returns (flow `[h, w, 3]`, occlusion `[h, w]`,
    /// weights `[K+1, h, w]`).
    pub fn estimate(
        &self,
        g: &Graph,
        p: &Bound,
        src_kps: Var,
        drv_kps: Var,
        h: usize,
        w: usize,
    ) -> (Var, Var, Var) {
        let k = self.k_total;
        let heat_s = keypoint_heatmaps(g, src_kps, h, w, self.sigma);
        let heat_d = keypoint_heatmaps(g, drv_kps, h, w, self.sigma);
        let diff = g.sub(heat_s, heat_d); // [K, h, w]
        let delta = g.sub(src_kps, drv_kps); // [K, 3]

        // heatmap-weighted displacement preview, 3 channels
        let hm = g.reshape(heat_d, &[k, h * w]);
        let preview = g.reshape(g.matmul(delta, hm, true, false), &[3, h, w]);

        let input = g.concat(&[diff, preview], 0); // [K+3, h, w]
        let f1 = g.relu(self.conv1.apply(g, p, input));
        let f2 = g.relu(self.conv2.apply(g, p, f1));
        let logits = self.head_weights.apply(g, p, f2); // [K+1, h, w]
        let weights = g.softmax_axis(logits, 0);
        let occlusion =
            g.sigmoid(g.reshape(self.head_occlusion.apply(g, p, f2), &[h, w]));

        // proposals: identity first, then per-keypoint displacements
        let zero = g.input(Tensor::zeros(&[1, 3]));
        let proposals = g.concat(&[zero, delta], 0); // [K+1, 3]
        let flow = flow_from_weights(g, weights, proposals);
        (flow, occlusion, weights)
    }
}

/// Check that two keypoint sets share one layout compatible with `k_total`.
pub fn check_layouts(src: &KeypointSet, drv: &KeypointSet, k_total: usize) -> Result<()> {
    if src.kind != drv.kind || src.len() != drv.len() {
        return Err(Error::ShapeMismatch {
            context: "estimate_warp keypoint layouts",
            expected: format!("{:?} x{}", src.kind, src.len()),
            got: format!("{:?} x{}", drv.kind, drv.len()),
        });
    }
    if src.len() != k_total {
        return Err(Error::ShapeMismatch {
            context: "estimate_warp keypoint count",
            expected: format!("{k_total}"),
            got: format!("{}", src.len()),
        });
    }
    Ok(())
}

pub fn keypoints_tensor(kps: &KeypointSet) -> Tensor {
    let values: Vec<f64> = kps.points.iter().flatten().copied().collect();
    Tensor::new(&[kps.len(), 3], values)
}
