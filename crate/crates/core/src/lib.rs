//! Balanced multimodal semantic segmentation at desk scale.
//!
//! The crate builds a four-stage multi-branch transformer encoder in which
//! every modality is encoded as primary once per block, with the remaining
//! modalities condensed into one auxiliary feature and injected through
//! cross-attention. A training-only self-guidance module distills randomly
//! paired per-category prototypes between modality branches to keep their
//! contributions balanced. Around the model sit a deterministic synthetic
//! scene generator, a missing/noisy-modality robustness benchmark, and a
//! from-scratch reverse-mode tensor engine whose gradients are verified
//! against central finite differences.
//!
//! Numeric work runs in one of two profiles over the same code path: f64
//! for verification, f32 for training throughput. With the `parallel`
//! feature (default) batch samples, dataset generation, and evaluation
//! sweeps fan out over rayon; results are bit-identical to the sequential
//! fallback because every parallel loop writes disjoint outputs in a fixed
//! order.

pub mod attention;
pub mod cmtb;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod robustness;
pub mod sgm;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod util;
pub mod verify;

pub use error::{Error, Result};
pub use tape::{Profile, Tape, TensorId};
pub use tensor::{Dtype, Labels, Real, Tensor};
