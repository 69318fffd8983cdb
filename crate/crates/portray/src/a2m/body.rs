//! Stage-2 of the hierarchy: upper-body/hand motion denoiser conditioned on
//! projected face keypoints (channel-concatenated per frame), audio features
//! and a source appearance vector (both cross-attended).

use portray_grad::graph::{Graph, Var};
use portray_grad::nn::{
    positional_encoding, sinusoidal_embedding, AdaLayerNorm, Attention, Bound, FeedForward,
    Linear, ParamStore,
};

use rand::Rng;

use crate::diffusion::{ConditionBundle, Denoiser};

use super::face::TIME_EMBED_DIM;

/// Dimension of the source appearance vector (a 4x4 RGB thumbnail).
pub const APPEARANCE_DIM: usize = 48;

#[derive(Debug, Clone)]
struct BodyBlock {
    adaln_self: AdaLayerNorm,
    attn_self: Attention,
    cross_audio: Attention,
    cross_app: Attention,
    adaln_ff: AdaLayerNorm,
    ff: FeedForward,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BodyModelDims {
    /// Flat per-frame target dim: head offsets + deformation + scale +
    /// translation + joint angles + wrist pose.
    pub data_dim: usize,
    /// Flat per-frame keypoint condition dim (N_h * 3).
    pub keypoint_dim: usize,
    pub audio_bands: usize,
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
}

pub struct BodyDenoiser {
    pub store: ParamStore,
    dims: BodyModelDims,
    in_proj: Linear,
    audio_proj: Linear,
    app_proj: Linear,
    cond1: Linear,
    cond2: Linear,
    blocks: Vec<BodyBlock>,
    out_proj: Linear,
}

impl BodyDenoiser {
    pub fn new<R: Rng>(dims: BodyModelDims, rng: &mut R) -> Self {
        let w = dims.width;
        let mut store = ParamStore::new();
        let in_proj =
            Linear::new(&mut store, rng, "in", dims.data_dim + dims.keypoint_dim, w);
        let audio_proj = Linear::new(&mut store, rng, "audio", dims.audio_bands, w);
        let app_proj = Linear::new(&mut store, rng, "app", APPEARANCE_DIM, w);
        let cond1 = Linear::new(&mut store, rng, "cond1", TIME_EMBED_DIM, w);
        let cond2 = Linear::new(&mut store, rng, "cond2", w, w);
        let blocks = (0..dims.layers)
            .map(|i| BodyBlock {
                adaln_self: AdaLayerNorm::new(&mut store, &format!("b{i}.adaln_sa"), w, w),
                attn_self: Attention::new(&mut store, rng, &format!("b{i}.sa"), w, dims.heads),
                cross_audio: Attention::new(&mut store, rng, &format!("b{i}.ca"), w, dims.heads),
                cross_app: Attention::new(&mut store, rng, &format!("b{i}.cp"), w, dims.heads),
                adaln_ff: AdaLayerNorm::new(&mut store, &format!("b{i}.adaln_ff"), w, w),
                ff: FeedForward::new(&mut store, rng, &format!("b{i}.ff"), w, 2 * w),
            })
            .collect();
        let out_proj = Linear::new(&mut store, rng, "out", w, dims.data_dim);
        Self { store, dims, in_proj, audio_proj, app_proj, cond1, cond2, blocks, out_proj }
    }

    pub fn dims(&self) -> BodyModelDims {
        self.dims
    }

    pub fn forward(&self, g: &Graph, p: &Bound, x_t: Var, t: usize, cond: &ConditionBundle) -> Var {
        let w = self.dims.width;
        let l = g.shape(x_t)[0];
        let kps = cond.keypoints.as_ref().expect("body denoiser requires keypoint conditioning");
        assert_eq!(kps.shape(), &[l, self.dims.keypoint_dim], "keypoint condition shape");
        let audio = cond.audio.as_ref().expect("body denoiser requires audio conditioning");
        let appearance =
            cond.appearance.as_ref().expect("body denoiser requires an appearance vector");

        let joined = g.concat(&[x_t, g.input(kps.clone())], 1); // [L, data+kp]
        let mut h = {
            let x = self.in_proj.apply(g, p, joined);
            g.add(x, g.input(positional_encoding(0, l, w)))
        };
        let audio_tokens = {
            let a = self.audio_proj.apply(g, p, g.input(audio.clone()));
            g.add(a, g.input(positional_encoding(0, audio.shape()[0], w)))
        };
        let app_token = {
            let a = g.input(appearance.clone().reshaped(&[1, APPEARANCE_DIM]));
            self.app_proj.apply(g, p, a)
        };
        let emb = g.input(sinusoidal_embedding(t as f64, TIME_EMBED_DIM));
        let cond_vec = self.cond2.apply(g, p, g.silu(self.cond1.apply(g, p, emb)));

        for block in &self.blocks {
            let sa_in = block.adaln_self.apply(g, p, h, cond_vec);
            h = g.add(h, block.attn_self.apply(g, p, sa_in, sa_in));
            let ca_in = g.layer_norm(h);
            h = g.add(h, block.cross_audio.apply(g, p, ca_in, audio_tokens));
            let cp_in = g.layer_norm(h);
            h = g.add(h, block.cross_app.apply(g, p, cp_in, app_token));
            let ff_in = block.adaln_ff.apply(g, p, h, cond_vec);
            h = g.add(h, block.ff.apply(g, p, ff_in));
        }
        self.out_proj.apply(g, p, g.layer_norm(h))
    }
}

impl Denoiser for BodyDenoiser {
    fn predict_noise(&self, g: &Graph, x_t: Var, t: usize, cond: &ConditionBundle) -> Var {
        let p = self.store.bind(g);
        self.forward(g, &p, x_t, t, cond)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use portray_grad::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn tiny_dims() -> BodyModelDims {
        BodyModelDims { data_dim: 12, keypoint_dim: 9, audio_bands: 6, width: 16, heads: 2, layers: 2 }
    }

    fn bundle(l: usize, rng: &mut ChaCha20Rng) -> ConditionBundle {
        ConditionBundle {
            audio: Some(Tensor::randn(&[l, 6], rng)),
            history: None,
            style: None,
            reference: None,
            appearance: Some(Tensor::randn(&[APPEARANCE_DIM], rng)),
            keypoints: Some(Tensor::randn(&[l, 9], rng)),
        }
    }

    #[test]
    fn shape_contract() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let model = BodyDenoiser::new(tiny_dims(), &mut rng);
        for l in [1usize, 30] {
            let g = Graph::new();
            let x = g.input(Tensor::randn(&[l, 12], &mut rng));
            let out = model.predict_noise(&g, x, 7, &bundle(l, &mut rng));
            assert_eq!(g.shape(out), vec![l, 12]);
        }
    }

    #[test]
    fn appearance_and_keypoint_sensitivity_after_one_step() {
        // one optimizer step away from init, zeroing the appearance vector or
        // permuting the keypoint frames must change the output
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let mut model = BodyDenoiser::new(tiny_dims(), &mut rng);
        let l = 6;
        let cond = bundle(l, &mut rng);
        let x0 = Tensor::randn(&[l, 12], &mut rng);

        // single training step
        let sched = crate::diffusion::build_schedule(100, 1e-4, 0.02).unwrap();
        let eps = Tensor::randn(&[l, 12], &mut rng);
        let x_t = crate::diffusion::forward_noise(&x0, 50, &eps, &sched).unwrap();
        let g = Graph::new();
        let p = model.store.bind(&g);
        let pred = model.forward(&g, &p, g.input(x_t.clone()), 50, &cond);
        let loss = crate::diffusion::noise_mse(&g, &eps, pred);
        let mut grads = g.backward(loss);
        let grad_vec = model.store.gather_grads(&p, &mut grads);
        let mut adam = portray_grad::Adam::new(&model.store, 1e-3);
        adam.step(&mut model.store, &grad_vec);

        let base = model.predict_noise_value(&x_t, 50, &cond);

        let mut no_app = cond.clone();
        no_app.appearance = Some(Tensor::zeros(&[APPEARANCE_DIM]));
        let out_no_app = model.predict_noise_value(&x_t, 50, &no_app);
        assert_ne!(base.data(), out_no_app.data(), "appearance ablation must change output");

        // permute keypoint frame order
        let mut permuted = cond.clone();
        let kp = cond.keypoints.as_ref().unwrap();
        let mut kp2 = kp.clone();
        for j in 0..9 {
            kp2.data_mut()[j] = kp.data()[(l - 1) * 9 + j];
            kp2.data_mut()[(l - 1) * 9 + j] = kp.data()[j];
        }
        permuted.keypoints = Some(kp2);
        let out_perm = model.predict_noise_value(&x_t, 50, &permuted);
        assert_ne!(base.data(), out_perm.data(), "keypoint permutation must change output");
    }
}
