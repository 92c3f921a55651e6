//! seqvo: self-supervised visual odometry from monocular sequences.
//!
//! A generator (flow-code encoder, LSTM aggregation, code-conditioned depth,
//! RGBD pose/mask regression) is trained through differentiable view
//! synthesis against photometric, structural, smoothness and trajectory
//! consistency objectives, with a conditional discriminator scoring warped
//! frames. Everything runs on a from-scratch reverse-mode tape so gradients
//! can be verified by finite differences end to end.

pub mod tensor;

pub use tensor::{Scalar, Tape, Tensor, TensorError, Var};
