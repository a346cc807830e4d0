//! A desk-scale linear-attention segmentation stack: dense tensors with a
//! tape autodiff engine, the MLLA mixer and its position encodings, the
//! symmetric sampling modules, the U-shaped network, segmentation losses,
//! and overlap/boundary metrics.

pub mod attention;
pub mod block;
pub mod error;
pub mod gradcheck;
pub mod init;
pub mod kernels;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod params;
pub mod pe;
pub mod rng;
pub mod sampling;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use kernels::conv::ConvSpec;
pub use params::{Graph, PId, Params};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{max_rel_err, Dtype, Element, Tensor};
