//! Finite-difference checks for every graph op.
//!
//! Each case builds a scalar loss from a parameter vector, compares the tape
//! gradient against central differences, and requires relative error < 1e-6
//! (f64 leaves plenty of headroom at these sizes).

use portray_grad::check::{finite_diff_grad, max_rel_error};
use portray_grad::graph::{Graph, Var};
use portray_grad::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

const TOL: f64 = 1e-6;

/// Check d(build(x))/dx against central differences.
fn check(shape: &[usize], seed: u64, build: impl Fn(&Graph, Var) -> Var) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let x0 = Tensor::rand_uniform(shape, -1.0, 1.0, &mut rng);
    let eval = |xs: &[f64]| {
        let g = Graph::new();
        let x = g.param(Tensor::new(shape, xs.to_vec()));
        let loss = build(&g, x);
        g.value(loss).item()
    };
    let numeric = finite_diff_grad(eval, x0.data(), 1e-5);
    let g = Graph::new();
    let x = g.param(x0.clone());
    let loss = build(&g, x);
    let mut grads = g.backward(loss);
    let analytic = grads[x.0].take().expect("no gradient reached the input");
    let err = max_rel_error(analytic.data(), &numeric);
    assert!(err < TOL, "gradcheck failed: max rel err {:.3e}", err);
}

/// Weighted sum with fixed coefficients, so the scalar loss is sensitive to
/// every element of its input in a non-uniform way.
fn spread(g: &Graph, v: Var) -> Var {
    let shape = g.shape(v);
    let n: usize = shape.iter().product();
    let coeffs = Tensor::new(&shape, (0..n).map(|i| 0.3 + 0.01 * i as f64).collect());
    g.sum(g.mul(v, g.input(coeffs)))
}

#[test]
fn elementwise_ops() {
    check(&[3, 4], 1, |g, x| spread(g, g.relu(x)));
    check(&[3, 4], 2, |g, x| spread(g, g.silu(x)));
    check(&[3, 4], 3, |g, x| spread(g, g.tanh(x)));
    check(&[3, 4], 4, |g, x| spread(g, g.sigmoid(x)));
    check(&[3, 4], 5, |g, x| spread(g, g.exp(x)));
    check(&[3, 4], 7, |g, x| spread(g, g.mul_scalar(g.add_scalar(x, 0.7), -1.3)));
    check(&[3, 4], 8, |g, x| spread(g, g.sqrt(g.add_scalar(g.mul(x, x), 0.5))));
}

#[test]
fn abs_away_from_zero() {
    // |x| is non-differentiable at 0; sample inputs are bounded away from it.
    let mut rng = ChaCha20Rng::seed_from_u64(9);
    let x0 = Tensor::rand_uniform(&[3, 4], 0.2, 1.0, &mut rng);
    let eval = |xs: &[f64]| {
        let g = Graph::new();
        let x = g.param(Tensor::new(&[3, 4], xs.to_vec()));
        let y = g.sum(g.abs(g.add_scalar(x, -0.6))); // mixes both signs
        g.value(y).item()
    };
    let numeric = finite_diff_grad(eval, x0.data(), 1e-6);
    let g = Graph::new();
    let x = g.param(x0.clone());
    let loss = g.sum(g.abs(g.add_scalar(x, -0.6)));
    let grads = g.backward(loss);
    let err = max_rel_error(grads[x.0].as_ref().unwrap().data(), &numeric);
    assert!(err < 1e-4, "abs gradcheck failed: {:.3e}", err);
}

#[test]
fn binary_broadcast_ops() {
    // [2,3] + [3] broadcast
    check(&[3], 10, |g, x| {
        let a = g.input(Tensor::new(&[2, 3], vec![0.4, -0.2, 0.9, 1.1, 0.3, -0.8]));
        spread(g, g.add(a, x))
    });
    // [2,3] * [2,1] broadcast
    check(&[2, 1], 11, |g, x| {
        let a = g.input(Tensor::new(&[2, 3], vec![0.4, -0.2, 0.9, 1.1, 0.3, -0.8]));
        spread(g, g.mul(a, x))
    });
    check(&[2, 3], 12, |g, x| {
        let b = g.input(Tensor::new(&[3], vec![0.5, -0.4, 1.2]));
        spread(g, g.sub(x, b))
    });
    // both sides of mul depend on x
    check(&[2, 2], 13, |g, x| spread(g, g.mul(x, g.sigmoid(x))));
}

#[test]
fn reductions() {
    check(&[3, 4], 20, |g, x| g.sum(x));
    check(&[3, 4], 21, |g, x| g.mean(g.mul(x, x)));
    check(&[2, 3, 4], 22, |g, x| spread(g, g.sum_axis(x, 1)));
    check(&[2, 3, 4], 23, |g, x| spread(g, g.sum_axis(x, 0)));
    check(&[2, 3, 4], 24, |g, x| spread(g, g.sum_axis(x, 2)));
}

#[test]
fn softmax_and_norms() {
    check(&[2, 5], 30, |g, x| spread(g, g.softmax_axis(x, 1)));
    check(&[3, 2, 4], 31, |g, x| spread(g, g.softmax_axis(x, 0)));
    check(&[4, 6], 32, |g, x| spread(g, g.layer_norm(x)));
    check(&[2, 3, 4], 33, |g, x| spread(g, g.instance_norm_2d(x)));
}

#[test]
fn shape_ops() {
    check(&[2, 6], 40, |g, x| spread(g, g.reshape(x, &[3, 4])));
    check(&[2, 3, 4], 41, |g, x| spread(g, g.permute(x, &[2, 0, 1])));
    check(&[2, 5], 42, |g, x| spread(g, g.slice(x, 1, 1, 3)));
    check(&[2, 3], 43, |g, x| {
        let other = g.input(Tensor::new(&[2, 2], vec![0.3, 0.4, 0.5, 0.6]));
        spread(g, g.concat(&[x, other, x], 1))
    });
}

#[test]
fn matmul_variants() {
    let w = Tensor::new(&[4, 3], (0..12).map(|i| 0.1 * i as f64 - 0.5).collect());
    check(&[2, 4], 50, |g, x| spread(g, g.matmul(x, g.input(w.clone()), false, false)));
    check(&[4, 2], 51, |g, x| spread(g, g.matmul(x, g.input(w.clone()), true, false)));
    let w2 = Tensor::new(&[3, 4], (0..12).map(|i| 0.07 * i as f64 - 0.3).collect());
    check(&[2, 4], 52, |g, x| spread(g, g.matmul(x, g.input(w2.clone()), false, true)));
    // gradient w.r.t. the right operand
    check(&[4, 3], 53, |g, x| {
        let a = g.input(Tensor::new(&[2, 4], (0..8).map(|i| 0.2 * i as f64 - 0.7).collect()));
        spread(g, g.matmul(a, x, false, false))
    });
    // batched 3-D
    check(&[2, 3, 4], 54, |g, x| {
        let b = g.input(Tensor::new(&[2, 4, 2], (0..16).map(|i| 0.05 * i as f64 - 0.4).collect()));
        spread(g, g.matmul(x, b, false, false))
    });
    check(&[2, 4, 3], 55, |g, x| {
        let b = g.input(Tensor::new(&[2, 4, 2], (0..16).map(|i| 0.05 * i as f64 - 0.4).collect()));
        spread(g, g.matmul(x, b, true, false))
    });
    // batched with transpose on b: [2,3,4] x [2,5,4]^T
    check(&[2, 3, 4], 56, |g, x| {
        let b = g.input(Tensor::new(&[2, 5, 4], (0..40).map(|i| 0.03 * i as f64 - 0.6).collect()));
        spread(g, g.matmul(x, b, false, true))
    });
}

#[test]
fn conv_pool_upsample() {
    // conv2d: gradient w.r.t. input
    check(&[2, 5, 6], 60, |g, x| {
        let w = g.input(Tensor::new(&[3, 2, 3, 3], (0..54).map(|i| 0.02 * i as f64 - 0.5).collect()));
        let b = g.input(Tensor::new(&[3], vec![0.1, -0.2, 0.3]));
        spread(g, g.conv2d(x, w, Some(b), 1, 1))
    });
    // conv2d stride 2: gradient w.r.t. weights
    check(&[3, 2, 3, 3], 61, |g, x| {
        let inp = g.input(Tensor::new(&[2, 6, 6], (0..72).map(|i| 0.01 * i as f64 - 0.3).collect()));
        spread(g, g.conv2d(inp, x, None, 2, 1))
    });
    // conv2d: gradient w.r.t. bias
    check(&[3], 62, |g, x| {
        let inp = g.input(Tensor::new(&[2, 4, 4], (0..32).map(|i| 0.05 * i as f64).collect()));
        let w = g.input(Tensor::new(&[3, 2, 3, 3], (0..54).map(|i| 0.02 * i as f64 - 0.5).collect()));
        spread(g, g.conv2d(inp, w, Some(x), 1, 0))
    });
    check(&[2, 4, 6], 63, |g, x| spread(g, g.avg_pool_2x(x)));
    check(&[2, 3, 4], 64, |g, x| spread(g, g.upsample_nearest_2x(x)));
}

#[test]
fn grid_sample_volume() {
    // gradient w.r.t. the volume
    check(&[2, 3, 4, 4], 70, |g, x| {
        let mut rng = ChaCha20Rng::seed_from_u64(700);
        let flow = g.input(Tensor::rand_uniform(&[3, 4, 4, 3], -0.2, 0.2, &mut rng));
        spread(g, g.grid_sample_volume(x, flow))
    });
    // gradient w.r.t. the flow; keep displacements small so no coordinate is
    // clamped (clamping zeroes the true one-sided derivative).
    check(&[3, 4, 4, 3], 71, |g, x| {
        let mut rng = ChaCha20Rng::seed_from_u64(701);
        let vol = g.input(Tensor::rand_uniform(&[2, 3, 4, 4], -1.0, 1.0, &mut rng));
        let small = g.mul_scalar(g.tanh(x), 0.15);
        spread(g, g.grid_sample_volume(vol, small))
    });
}

#[test]
fn composite_attention_like_block() {
    // A miniature transformer block exercising matmul/softmax/layernorm
    // composition end to end.
    check(&[5, 8], 80, |g, x| {
        let mut rng = ChaCha20Rng::seed_from_u64(800);
        let mut store = portray_grad::ParamStore::new();
        let attn = portray_grad::Attention::new(&mut store, &mut rng, "attn", 8, 2);
        let p = store.bind(g);
        let normed = g.layer_norm(x);
        let y = attn.apply(g, &p, normed, normed);
        let res = g.add(x, y);
        spread(g, res)
    });
}

#[test]
fn accumulation_through_shared_nodes() {
    // x used along two paths; gradients must sum.
    check(&[3, 3], 90, |g, x| {
        let a = g.relu(x);
        let b = g.sigmoid(x);
        let c = g.add(g.mul(a, b), g.mul_scalar(x, 0.5));
        g.sum(c)
    });
}

#[test]
fn grid_sample_identity_flow_recovers_volume() {
    let mut rng = ChaCha20Rng::seed_from_u64(99);
    let vol = Tensor::rand_uniform(&[3, 4, 5, 6], -1.0, 1.0, &mut rng);
    let g = Graph::new();
    let v = g.input(vol.clone());
    let flow = g.input(Tensor::zeros(&[4, 5, 6, 3]));
    let out = g.grid_sample_volume(v, flow);
    let y = g.value(out);
    for (a, b) in y.data().iter().zip(vol.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}
