//! Forward-inference kernels for linear compressed attention and hybrid
//! multimodal joint attention, together with the brute-force oracles used
//! to verify them.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] / [`conv`] — dense f32 kernels (matmul, softmax, 2-D and
//!   depthwise convolution, group/layer normalization, activations).
//! * [`attention`] — scaled dot-product, generalized-similarity and linear
//!   attention over query/key/value matrices.
//! * [`feature_maps`] — token-wise query/key maps (ReLU-linear, the
//!   LinFusion-style bottleneck map) and k×k key/value token compression.
//! * [`edit`] — ConvFusion queries plus Spatial Compressor keys/values,
//!   composed into linear compressed self-attention.
//! * [`mmedit`] — exact four-block decomposition of joint image/prompt
//!   attention and the hybrid variant that swaps the image-image block for
//!   linear attention.
//! * [`flops`] — closed-form multiply-accumulate counts per mechanism.
//! * [`weights`] — named tensor container, seeded initialization and the
//!   `.edtw` binary format.
//! * [`mechanism`] — end-to-end forwards used by the benchmark CLI.
//! * [`oracle`] — independent f64 reference implementations; test/verify
//!   use only, never called from production paths.
//!
//! All kernels are pure functions of their inputs and deterministic: the
//! optional `parallel` feature distributes work over independent output
//! rows only, so results are bit-identical with and without it.

pub mod attention;
pub mod config;
pub mod conv;
pub mod edit;
pub mod error;
pub mod feature_maps;
pub mod flops;
pub mod grid;
pub mod mechanism;
pub mod mmedit;
pub mod oracle;
pub mod sampling;
pub mod tensor;
pub mod weights;

mod parallel;

pub use config::{AttentionConfig, Mechanism};
pub use error::{Error, Result};
pub use grid::ImageTokenGrid;
pub use tensor::Tensor;
