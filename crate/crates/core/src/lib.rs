//! Memory-reduced backpropagation primitives.
//!
//! * [`approximator`]: reference GELU/SiLU, the ReLU-combination surrogate and
//!   the simulated-annealing fitter that produces its coefficients.
//! * [`stepgrad`]: exact-forward activations whose backward reads only 2-bit
//!   packed segment codes.
//! * [`norm`]: LayerNorm/RMSNorm and their memory-sharing variants, plus
//!   affine merging into the following linear layer.
//! * [`tape`]: a small reverse-mode tape over dense 2-D tensors.
//! * [`memledger`]: byte accounting of saved-for-backward buffers and an
//!   analytic transformer-block model.

// `!(x > 0.0)` forms are deliberate: they reject NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod approximator;
pub mod error;
pub mod fmt;
pub mod memledger;
pub mod norm;
pub mod special;
pub mod stepgrad;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{StorageBits, Tensor};
