//! Reverse-mode autodiff over dense f64 tensors, plus the layers and the
//! optimizer shared by the portray models.
//!
//! Everything is CPU, f64 and deterministic: the same graph built from the
//! same inputs produces bit-identical values and gradients. Graphs are not
//! thread-safe; parallel training builds one graph per worker instead.

pub mod adam;
pub mod check;
pub mod graph;
pub mod nn;
pub mod tensor;

pub use adam::Adam;
pub use graph::{Graph, Var};
pub use nn::{Attention, Bound, Conv2d, FeedForward, Linear, ParamId, ParamStore};
pub use tensor::Tensor;
