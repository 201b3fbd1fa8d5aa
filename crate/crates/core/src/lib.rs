//! Probabilistic 3D shape generation from a single ambiguous observation.
//!
//! The crate is organized around a small number of subsystems:
//!
//! - [`shape`]: procedural part-labeled shapes, analytic signed distance
//!   fields, and truncated SDF voxel grids.
//! - [`render`]: sphere-traced single-view observations with deliberate
//!   occlusion and field-of-view truncation.
//! - [`hypomap`]: similarity groups and per-image multi-hypothesis
//!   ground-truth mappings.
//! - [`tensor`]: a minimal dense-tensor substrate with reverse-mode
//!   gradients, Adam, and checkpointing.
//! - [`codec`]: the patch-wise vector-quantized autoencoder that turns TSDF
//!   grids into discrete code grids.
//! - [`prior`]: the image-conditioned autoregressive transformer over code
//!   grids, with cross-attention conditioning.
//! - [`metrics`]: chamfer distance, F-score, and total mutual difference,
//!   with brute-force oracles.
//! - [`pipeline`]: dataset construction, training, sampling, and evaluation
//!   commands driven by a single configuration file.

pub mod codec;
pub mod hypomap;
pub mod metrics;
pub mod pipeline;
pub mod prior;
pub mod render;
pub mod rng;
pub mod shape;
pub mod tensor;
