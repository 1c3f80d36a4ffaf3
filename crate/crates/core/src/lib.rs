//! Conv-Former feature fusion for language-guided semantic segmentation.
//!
//! - [`tensor`]: dense tensors, seeded RNG, the `KJT1` container.
//! - [`autograd`]: reverse-mode differentiation and finite-difference checks.
//! - [`fusion`]: Conv / Former blocks, the two bridge directions, stacked
//!   units and their parameter / MAC accounting.
//! - [`pipeline`]: text embeddings, backbone stub, score map and decoder.
//! - [`harness`]: synthetic data, AdamW, training, mIoU and ablations.
//! - [`verify`]: naive reference implementations and the check suites.

pub mod autograd;
pub mod error;
pub mod tensor;

pub use autograd::{Graph, Var};
pub use error::{Error, Result};
pub use tensor::{DType, Rng, Scalar, Tensor};
pub mod fusion;
pub mod nn;
pub mod pipeline;
pub mod harness;
pub mod verify;
