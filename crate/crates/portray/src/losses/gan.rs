//! Three-scale patch discriminator with hinge losses.

use portray_grad::graph::{Graph, Var};
use portray_grad::nn::{Bound, Conv2d, ParamStore};
use rand::Rng;

pub struct PatchDiscriminator {
    pub store: ParamStore,
    scales: Vec<[Conv2d; 3]>,
}

impl PatchDiscriminator {
    pub fn new<R: Rng>(rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let scales = (0..3)
            .map(|s| {
                [
                    Conv2d::new(&mut store, rng, &format!("d{s}.c1"), 3, 12, 3, 2, 1),
                    Conv2d::new(&mut store, rng, &format!("d{s}.c2"), 12, 24, 3, 2, 1),
                    Conv2d::new(&mut store, rng, &format!("d{s}.c3"), 24, 1, 3, 1, 1),
                ]
            })
            .collect();
        Self { store, scales }
    }

    /// Patch logits at three input scales (full, half, quarter resolution).
    pub fn logits(&self, g: &Graph, p: &Bound, img: Var) -> Vec<Var> {
        let mut out = Vec::with_capacity(3);
        let mut x = img;
        for (s, convs) in self.scales.iter().enumerate() {
            if s > 0 {
                x = g.avg_pool_2x(x);
            }
            let f = g.relu(convs[0].apply(g, p, x));
            let f = g.relu(convs[1].apply(g, p, f));
            out.push(convs[2].apply(g, p, f));
        }
        out
    }

    /// Generator-side hinge loss: -mean D(fake), averaged over scales.
    /// Bind the discriminator frozen so only the generator receives
    /// gradients.
    pub fn generator_loss(&self, g: &Graph, fake: Var) -> Var {
        let p = self.store.bind_frozen(g);
        let logits = self.logits(g, &p, fake);
        let mut acc = None;
        for l in &logits {
            let term = g.mul_scalar(g.mean(*l), -1.0);
            acc = Some(match acc {
                None => term,
                Some(prev) => g.add(prev, term),
            });
        }
        g.mul_scalar(acc.unwrap(), 1.0 / logits.len() as f64)
    }

    /// Discriminator-side hinge loss mean(relu(1 - D(real))) +
    /// mean(relu(1 + D(fake))), averaged over scales. Parameters are bound
    /// trainable; the images should be constants.
    pub fn discriminator_loss(&self, g: &Graph, p: &Bound, real: Var, fake: Var) -> Var {
        let real_logits = self.logits(g, p, real);
        let fake_logits = self.logits(g, p, fake);
        let mut acc = None;
        for (r, f) in real_logits.iter().zip(&fake_logits) {
            let lr = g.mean(g.relu(g.add_scalar(g.mul_scalar(*r, -1.0), 1.0)));
            let lf = g.mean(g.relu(g.add_scalar(*f, 1.0)));
            let term = g.add(lr, lf);
            acc = Some(match acc {
                None => term,
                Some(prev) => g.add(prev, term),
            });
        }
        g.mul_scalar(acc.unwrap(), 1.0 / real_logits.len() as f64)
    }
}
