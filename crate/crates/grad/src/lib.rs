//! Dense `f64` tensors and a tape-based reverse-mode differentiator covering
//! the primitives needed by small convolutional segmentation networks.

mod error;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use error::GradError;
pub use gradcheck::{finite_diff_check, FdOptions, FdReport};
pub use graph::{softmax_along, BnBatchStats, BnMode, Gradients, Graph, ParamGroup, Var, BN_EPS, NORM_FLOOR};
pub use params::{Bound, ParamStore, StoredParam};
pub use tensor::Tensor;
