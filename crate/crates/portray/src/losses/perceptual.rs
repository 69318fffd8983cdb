//! Fixed, seeded, randomly-initialized multi-scale feature stack used as the
//! perceptual distance. Parameters are frozen constants; only the images
//! being compared receive gradients.

use portray_grad::graph::{Graph, Var};
use portray_grad::nn::{Conv2d, ParamStore};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub const PERCEPTUAL_SEED: u64 = 424242;

pub struct PerceptualStack {
    store: ParamStore,
    c1: Conv2d,
    c2: Conv2d,
    c3: Conv2d,
}

impl PerceptualStack {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c1 = Conv2d::new(&mut store, &mut rng, "p1", 3, 8, 3, 1, 1);
        let c2 = Conv2d::new(&mut store, &mut rng, "p2", 8, 16, 3, 1, 1);
        let c3 = Conv2d::new(&mut store, &mut rng, "p3", 16, 16, 3, 1, 1);
        Self { store, c1, c2, c3 }
    }

    /// Three feature maps at full, half and quarter resolution.
    pub fn features(&self, g: &Graph, img: Var) -> Vec<Var> {
        let p = self.store.bind_frozen(g);
        let f1 = g.relu(self.c1.apply(g, &p, img));
        let f2 = g.relu(self.c2.apply(g, &p, g.avg_pool_2x(f1)));
        let f3 = g.relu(self.c3.apply(g, &p, g.avg_pool_2x(f2)));
        vec![f1, f2, f3]
    }

    /// Mean L1 distance between feature maps, averaged over scales.
    pub fn distance(&self, g: &Graph, a: Var, b: Var) -> Var {
        let fa = self.features(g, a);
        let fb = self.features(g, b);
        let mut acc = None;
        for (x, y) in fa.iter().zip(&fb) {
            let d = g.mean(g.abs(g.sub(*x, *y)));
            acc = Some(match acc {
                None => d,
                Some(prev) => g.add(prev, d),
            });
        }
        g.mul_scalar(acc.unwrap(), 1.0 / fa.len() as f64)
    }

    /// Full-image and mask-restricted distances sharing one feature
    /// extraction per image.
    pub fn distance_and_masked(
        &self,
        g: &Graph,
        a: Var,
        b: Var,
        mask: &portray_grad::tensor::Tensor,
    ) -> (Var, Var) {
        let fa = self.features(g, a);
        let fb = self.features(g, b);
        let n_scales = fa.len() as f64;
        let mut full = None;
        let mut masked = None;
        let area_full: f64 = mask.data().iter().sum();
        let mut m = mask.clone();
        for (scale, (x, y)) in fa.iter().zip(&fb).enumerate() {
            let diff = g.abs(g.sub(*x, *y));
            let d = g.mean(diff);
            full = Some(match full {
                None => d,
                Some(prev) => g.add(prev, d),
            });
            if area_full > 0.0 {
                if scale > 0 {
                    m = value_avg_pool(&m);
                }
                let shape = g.shape(*x);
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let area: f64 = m.data().iter().sum::<f64>().max(1e-12);
                let mvar = g.input(m.clone().reshaped(&[1, h, w]));
                let contrib =
                    g.mul_scalar(g.sum(g.mul(diff, mvar)), 1.0 / (area * c as f64));
                masked = Some(match masked {
                    None => contrib,
                    Some(prev) => g.add(prev, contrib),
                });
            }
        }
        let full = g.mul_scalar(full.unwrap(), 1.0 / n_scales);
        let masked = match masked {
            Some(v) => g.mul_scalar(v, 1.0 / n_scales),
            None => g.input(portray_grad::tensor::Tensor::scalar(0.0)),
        };
        (full, masked)
    }

    /// Feature distance restricted to a binary mask (given at image
    /// resolution), renormalized by the mask area at each scale. A zero-area
    /// mask yields exactly zero.
    pub fn masked_distance(
        &self,
        g: &Graph,
        a: Var,
        b: Var,
        mask: &portray_grad::tensor::Tensor,
    ) -> Var {
        let area_full: f64 = mask.data().iter().sum();
        if area_full == 0.0 {
            return g.input(portray_grad::tensor::Tensor::scalar(0.0));
        }
        let fa = self.features(g, a);
        let fb = self.features(g, b);
        let mut acc = None;
        let mut m = mask.clone();
        for (scale, (x, y)) in fa.iter().zip(&fb).enumerate() {
            if scale > 0 {
                m = value_avg_pool(&m);
            }
            let shape = g.shape(*x);
            let (c, h, w) = (shape[0], shape[1], shape[2]);
            let area: f64 = m.data().iter().sum::<f64>().max(1e-12);
            let mvar = g.input(m.clone().reshaped(&[1, h, w]));
            let d = g.mul(g.abs(g.sub(*x, *y)), mvar);
            let contrib = g.mul_scalar(g.sum(d), 1.0 / (area * c as f64));
            acc = Some(match acc {
                None => contrib,
                Some(prev) => g.add(prev, contrib),
            });
        }
        g.mul_scalar(acc.unwrap(), 1.0 / fa.len() as f64)
    }
}

fn value_avg_pool(m: &portray_grad::tensor::Tensor) -> portray_grad::tensor::Tensor {
    let (h, w) = (m.shape()[0], m.shape()[1]);
    let (ho, wo) = (h / 2, w / 2);
    let mut out = portray_grad::tensor::Tensor::zeros(&[ho, wo]);
    for i in 0..ho {
        for j in 0..wo {
            let base = 2 * i * w + 2 * j;
            out.data_mut()[i * wo + j] =
                0.25 * (m.data()[base] + m.data()[base + 1] + m.data()[base + w] + m.data()[base + w + 1]);
        }
    }
    out
}
