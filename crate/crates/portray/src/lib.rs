//! Audio-driven portrait animation at desk scale.
//!
//! Two stages: a hierarchical motion diffusion model (audio to face
//! coefficients, then face keypoints to upper-body and hand motion) and a
//! warping-based frame generator with hybrid explicit/implicit keypoint
//! control, rendered-hand injection, and face refinement. A self-consistent
//! synthetic world provides paired training data so both stages are
//! trainable and verifiable end to end on a CPU.

pub mod config;
pub mod diffusion;
pub mod error;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod a2m;
pub mod audio;
pub mod motion;
pub mod pipeline;
pub mod synth;
pub mod training;
pub mod videogen;

pub use config::Config;
pub use error::{Error, Result};
