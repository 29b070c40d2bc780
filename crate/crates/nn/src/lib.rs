//! Reverse-mode differentiation over 4D tensors, the layers a convolutional
//! encoder-decoder needs, Adam, and the dual-encoder reconstruction network.

pub mod adam;
mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod ynet;

pub use adam::{AdamConfig, AdamState};
pub use error::{NnError, Result};
pub use gradcheck::{finite_diff_check, finite_diff_check_with, CheckOptions, CheckReport};
pub use graph::{Gradients, Graph, NodeId};
pub use kernels::ConvSpec;
pub use params::{ParamKind, ParameterSet};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use ynet::{Batch, LossValues, Mode, Variant, YNet, YNetConfig};
