//! Cut-and-paste GAN for unsupervised foreground segmentation.
//!
//! A generator predicts a soft foreground mask from an image, the mask is used
//! to composite the foreground onto a fresh background, and a U-Net
//! discriminator judges the composite both globally (real/fake) and per pixel.
//! The per-pixel head is trained against binary pseudo-labels produced by an
//! iterative graph-cut segmenter, weighted by an IoU-gated schedule.
//!
//! The crate is CPU-only and fully deterministic: every source of randomness
//! flows from a single 64-bit seed through named RNG streams, and all parallel
//! reductions accumulate in a fixed order.

pub mod archive;
pub mod conv;
pub mod compositing;
pub mod data;
pub mod error;
pub mod gmm;
pub mod grabcut;
pub mod graph;
pub mod losses;
pub mod maxflow;
pub mod metrics;
pub mod networks;
pub mod optim;
pub mod rng;
pub mod trainer;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
