//! Stage-1 facial motion denoiser: a diffusion transformer over per-frame
//! face-coefficient tokens with audio and history cross-attention, AdaLN
//! style/timestep modulation, and optional reference-token prepending for
//! style transfer.

use portray_grad::graph::{Graph, Var};
use portray_grad::nn::{
    positional_encoding, sinusoidal_embedding, AdaLayerNorm, Attention, Bound, FeedForward,
    Linear, ParamStore,
};
use portray_grad::tensor::Tensor;
use rand::Rng;

use crate::diffusion::{ConditionBundle, Denoiser};

pub const TIME_EMBED_DIM: usize = 64;
/// Reference tokens take positions in a disjoint range so the data tokens
/// keep stable positions whether or not a reference is present.
pub const REFERENCE_POSITION_OFFSET: usize = 1000;

#[derive(Debug, Clone)]
struct FaceBlock {
    adaln_self: AdaLayerNorm,
    attn_self: Attention,
    cross_audio: Attention,
    cross_hist: Attention,
    adaln_ff: AdaLayerNorm,
    ff: FeedForward,
}

/// Face denoiser configuration: data dim is `expr_dim + 6`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaceModelDims {
    pub expr_dim: usize,
    pub audio_bands: usize,
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
}

pub struct FaceDenoiser {
    pub store: ParamStore,
    dims: FaceModelDims,
    in_proj: Linear,
    ref_proj: Linear,
    audio_proj: Linear,
    hist_proj: Linear,
    cond1: Linear,
    cond2: Linear,
    blocks: Vec<FaceBlock>,
    out_proj: Linear,
}

impl FaceDenoiser {
    pub fn new<R: Rng>(dims: FaceModelDims, rng: &mut R) -> Self {
        let d = dims.expr_dim + 6;
        let w = dims.width;
        let mut store = ParamStore::new();
        let in_proj = Linear::new(&mut store, rng, "in", d, w);
        let ref_proj = Linear::new(&mut store, rng, "ref", d, w);
        let audio_proj = Linear::new(&mut store, rng, "audio", dims.audio_bands, w);
        let hist_proj = Linear::new(&mut store, rng, "hist", d, w);
        let cond1 = Linear::new(&mut store, rng, "cond1", TIME_EMBED_DIM + 2, w);
        let cond2 = Linear::new(&mut store, rng, "cond2", w, w);
        let blocks = (0..dims.layers)
            .map(|i| FaceBlock {
                adaln_self: AdaLayerNorm::new(&mut store, &format!("b{i}.adaln_sa"), w, w),
                attn_self: Attention::new(&mut store, rng, &format!("b{i}.sa"), w, dims.heads),
                cross_audio: Attention::new(&mut store, rng, &format!("b{i}.ca"), w, dims.heads),
                cross_hist: Attention::new(&mut store, rng, &format!("b{i}.ch"), w, dims.heads),
                adaln_ff: AdaLayerNorm::new(&mut store, &format!("b{i}.adaln_ff"), w, w),
                ff: FeedForward::new(&mut store, rng, &format!("b{i}.ff"), w, 2 * w),
            })
            .collect();
        let out_proj = Linear::new(&mut store, rng, "out", w, d);
        Self { store, dims, in_proj, ref_proj, audio_proj, hist_proj, cond1, cond2, blocks, out_proj }
    }

    pub fn dims(&self) -> FaceModelDims {
        self.dims
    }

    /// AdaLN conditioning embedding width (tied to the model width).
    pub fn adaln_width(&self) -> usize {
        self.dims.width
    }

    pub fn data_dim(&self) -> usize {
        self.dims.expr_dim + 6
    }

    /// Conditioning vector from (t, expr_range, pose_range).
    fn cond_vector(&self, g: &Graph, p: &Bound, t: usize, style: [f64; 2]) -> Var {
        let mut emb = sinusoidal_embedding(t as f64, TIME_EMBED_DIM).into_data();
        emb.push(style[0]);
        emb.push(style[1]);
        let e = g.input(Tensor::new(&[1, TIME_EMBED_DIM + 2], emb));
        self.cond2.apply(g, p, g.silu(self.cond1.apply(g, p, e)))
    }

    /// Build the noise prediction. `x_t` is `[L, expr_dim + 6]`.
    pub fn forward(&self, g: &Graph, p: &Bound, x_t: Var, t: usize, cond: &ConditionBundle) -> Var {
        let w = self.dims.width;
        let l = g.shape(x_t)[0];
        let audio = cond.audio.as_ref().expect("face denoiser requires audio conditioning");
        assert!(
            audio.shape()[0] >= l,
            "audio length {} below chunk length {l}",
            audio.shape()[0]
        );
        let history = cond.history.as_ref().expect("face denoiser requires history (zeros at stream start)");
        let style = cond.style.unwrap_or([0.0, 0.0]);

        let audio_tokens = {
            let a = self.audio_proj.apply(g, p, g.input(audio.clone()));
            g.add(a, g.input(positional_encoding(0, audio.shape()[0], w)))
        };
        let hist_tokens = {
            let h = self.hist_proj.apply(g, p, g.input(history.clone()));
            g.add(h, g.input(positional_encoding(0, history.shape()[0], w)))
        };
        let cond_vec = self.cond_vector(g, p, t, style);

        let x_tokens = {
            let x = self.in_proj.apply(g, p, x_t);
            g.add(x, g.input(positional_encoding(0, l, w)))
        };
        // reference tokens prepended along the temporal axis
        let (mut h, n_ref) = match &cond.reference {
            Some(reference) => {
                let n_ref = reference.shape()[0];
                let r = self.ref_proj.apply(g, p, g.input(reference.clone()));
                let r = g.add(r, g.input(positional_encoding(REFERENCE_POSITION_OFFSET, n_ref, w)));
                (g.concat(&[r, x_tokens], 0), n_ref)
            }
            None => (x_tokens, 0),
        };

        for block in &self.blocks {
            let sa_in = block.adaln_self.apply(g, p, h, cond_vec);
            h = g.add(h, block.attn_self.apply(g, p, sa_in, sa_in));
            let ca_in = g.layer_norm(h);
            h = g.add(h, block.cross_audio.apply(g, p, ca_in, audio_tokens));
            let ch_in = g.layer_norm(h);
            h = g.add(h, block.cross_hist.apply(g, p, ch_in, hist_tokens));
            let ff_in = block.adaln_ff.apply(g, p, h, cond_vec);
            h = g.add(h, block.ff.apply(g, p, ff_in));
        }
        let out = self.out_proj.apply(g, p, g.layer_norm(h));
        // reference positions are never part of the output
        if n_ref > 0 {
            g.slice(out, 0, n_ref, l)
        } else {
            out
        }
    }
}

impl Denoiser for FaceDenoiser {
    fn predict_noise(&self, g: &Graph, x_t: Var, t: usize, cond: &ConditionBundle) -> Var {
        let p = self.store.bind(g);
        self.forward(g, &p, x_t, t, cond)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn tiny_dims(width: usize) -> FaceModelDims {
        FaceModelDims { expr_dim: 4, audio_bands: 6, width, heads: 2, layers: 2 }
    }

    fn bundle(l: usize, h: usize, dims: &FaceModelDims, reference: Option<usize>) -> ConditionBundle {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        ConditionBundle {
            audio: Some(Tensor::randn(&[l, dims.audio_bands], &mut rng)),
            history: Some(Tensor::zeros(&[h, dims.expr_dim + 6])),
            style: Some([0.4, 0.1]),
            reference: reference.map(|n| Tensor::randn(&[n, dims.expr_dim + 6], &mut rng)),
            appearance: None,
            keypoints: None,
        }
    }

    #[test]
    fn shape_contract_for_various_lengths() {
        let dims = tiny_dims(16);
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let model = FaceDenoiser::new(dims, &mut rng);
        for l in [1usize, 30] {
            for n_ref in [None, Some(1), Some(17)] {
                let g = Graph::new();
                let x = g.input(Tensor::randn(&[l, 10], &mut rng));
                let out = model.predict_noise(&g, x, 5, &bundle(l, 4, &dims, n_ref));
                assert_eq!(g.shape(out), vec![l, 10], "L={l}, ref={n_ref:?}");
            }
        }
    }

    #[test]
    fn zero_history_accepted_without_special_casing() {
        let dims = tiny_dims(16);
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let model = FaceDenoiser::new(dims, &mut rng);
        let g = Graph::new();
        let x = g.input(Tensor::randn(&[5, 10], &mut rng));
        let out = model.predict_noise(&g, x, 3, &bundle(5, 4, &dims, None));
        assert!(g.value(out).is_finite());
    }

    #[test]
    fn adaln_width_follows_model_width() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let narrow = FaceDenoiser::new(tiny_dims(16), &mut rng);
        let wide = FaceDenoiser::new(tiny_dims(32), &mut rng);
        assert_eq!(wide.adaln_width(), 2 * narrow.adaln_width());
        // forward still honors the shape contract at the doubled width
        let g = Graph::new();
        let x = g.input(Tensor::randn(&[3, 10], &mut rng));
        let out = wide.predict_noise(&g, x, 1, &bundle(3, 2, &tiny_dims(32), Some(4)));
        assert_eq!(g.shape(out), vec![3, 10]);
    }
}
