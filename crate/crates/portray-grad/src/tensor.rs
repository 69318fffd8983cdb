//! Dense row-major f64 tensor with dynamic shape.
//!
//! This is deliberately minimal: owned storage, numpy-style trailing
//! broadcast rules, and just enough elementwise/shape machinery for the
//! graph ops in [`crate::graph`] and for value-level math in callers.

use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Self { shape: shape.to_vec(), data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    /// Standard-normal samples via Box-Muller; deterministic given the rng.
    pub fn randn<R: Rng>(shape: &[usize], rng: &mut R) -> Self {
        let n = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * u2;
            data.push(r * theta.cos());
            if data.len() < n {
                data.push(r * theta.sin());
            }
        }
        Self { shape: shape.to_vec(), data }
    }

    pub fn rand_uniform<R: Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Self { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Reshape without moving data. Element count must match.
    pub fn reshaped(mut self, shape: &[usize]) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.data.len(),
            "cannot reshape {:?} to {:?}",
            self.shape,
            shape
        );
        self.shape = shape.to_vec();
        self
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Elementwise binary op with numpy trailing broadcast rules.
    pub fn broadcast_zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        if self.shape == other.shape {
            let data =
                self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
            return Tensor { shape: self.shape.clone(), data };
        }
        if other.numel() == 1 {
            let b = other.data[0];
            return self.map(|a| f(a, b));
        }
        if self.numel() == 1 {
            let a = self.data[0];
            return other.map(|b| f(a, b));
        }
        let out_shape = broadcast_shapes(&self.shape, &other.shape).unwrap_or_else(|| {
            panic!("incompatible broadcast: {:?} vs {:?}", self.shape, other.shape)
        });
        let n: usize = out_shape.iter().product();
        let sa = broadcast_strides(&self.shape, &out_shape);
        let sb = broadcast_strides(&other.shape, &out_shape);
        let mut data = Vec::with_capacity(n);
        let mut idx = vec![0usize; out_shape.len()];
        let (mut off_a, mut off_b) = (0usize, 0usize);
        for _ in 0..n {
            data.push(f(self.data[off_a], other.data[off_b]));
            // advance the multi-index, updating the two offsets incrementally
            for d in (0..out_shape.len()).rev() {
                idx[d] += 1;
                off_a += sa[d];
                off_b += sb[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                off_a -= sa[d] * out_shape[d];
                off_b -= sb[d] * out_shape[d];
                idx[d] = 0;
            }
        }
        Tensor { shape: out_shape, data }
    }

    /// Sum-reduce this tensor so its shape matches `target` (the reverse of a
    /// broadcast). Used to push gradients back through broadcast ops.
    pub fn reduce_to_shape(&self, target: &[usize]) -> Tensor {
        if self.shape == target {
            return self.clone();
        }
        let mut out = Tensor::zeros(target);
        if out.numel() == 1 {
            out.data[0] = self.data.iter().sum();
            return out;
        }
        let st = broadcast_strides(target, &self.shape);
        let n = self.numel();
        let mut idx = vec![0usize; self.shape.len()];
        let mut off_t = 0usize;
        for i in 0..n {
            out.data[off_t] += self.data[i];
            for d in (0..self.shape.len()).rev() {
                idx[d] += 1;
                off_t += st[d];
                if idx[d] < self.shape[d] {
                    break;
                }
                off_t -= st[d] * self.shape[d];
                idx[d] = 0;
            }
        }
        out
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.broadcast_zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.broadcast_zip(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.broadcast_zip(other, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|x| x * c)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.numel() as f64
    }
}

/// Numpy trailing-alignment broadcast of two shapes.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let ndim = a.len().max(b.len());
    let mut out = vec![0usize; ndim];
    for d in 0..ndim {
        let da = if d < ndim - a.len() { 1 } else { a[d - (ndim - a.len())] };
        let db = if d < ndim - b.len() { 1 } else { b[d - (ndim - b.len())] };
        out[d] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        };
    }
    Some(out)
}

/// Row-major strides of `shape` viewed as `out_shape`, with zero stride on
/// broadcast dimensions.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let ndim = out_shape.len();
    let offset = ndim - shape.len();
    let mut strides = vec![0usize; ndim];
    let mut acc = 1usize;
    for d in (0..shape.len()).rev() {
        strides[offset + d] = if shape[d] == 1 { 0 } else { acc };
        acc *= shape[d];
    }
    strides
}
