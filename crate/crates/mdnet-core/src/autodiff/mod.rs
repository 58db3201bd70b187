//! Dense f64 tensors with reverse-mode differentiation and the exact layer
//! set the network needs: conv2d, batch norm, ReLU, 2x2 max pooling,
//! channel softmax, bilinear upsampling, the two training losses, and Adam.

mod adam;
mod conv;
pub mod gradcheck;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use tape::{BnMode, BnState, NodeId, Tape, BN_EPSILON, BN_MOMENTUM};
pub use tensor::{Tensor, TensorError};

pub(crate) use conv::conv2d_raw;
pub(crate) use tape::sample_plane;
