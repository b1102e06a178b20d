//! Learning-to-optimize downlink beamforming for MU-MISO channels.
//!
//! The crate builds the whole pipeline from scratch: dense complex matrix
//! algebra, a tape-based reverse-mode autodiff engine over real tensors, a
//! Gaussian channel sampler, the sum-rate / MSE objectives, classical
//! baselines (MRT, linear MMSE, iterative WMMSE), a dual-sequence Transformer
//! block, and the semi-amortized refinement stack with its curriculum and
//! sliding-window trainer.
//!
//! All numeric code is generic over the scalar type through [`scalar::Real`]
//! (`f32` or `f64`); the aliases below pin the double-precision instantiation
//! used by the trainer, the CLI, and every accuracy-sensitive test.

pub mod autodiff;
pub mod baselines;
pub mod channel;
pub mod error;
pub mod fsum;
pub mod numerics;
pub mod objectives;
pub mod scalar;
pub mod stack;
pub mod trainer;
pub mod transformer;

pub use error::{Error, Result};
pub use scalar::{real, Real};

/// Double-precision complex matrix.
pub type Mat64 = numerics::ComplexMatrix<f64>;
/// Double-precision autodiff tape.
pub type Tape64 = autodiff::Tape<f64>;
/// Double-precision tensor payload (parameters, buffers).
pub type Tensor64 = autodiff::TensorData<f64>;
/// Double-precision channel sample.
pub type Sample64 = channel::ChannelSample<f64>;
/// Double-precision channel batch.
pub type Batch64 = channel::Batch<f64>;
/// Double-precision beamformer.
pub type Beamformer64 = objectives::Beamformer<f64>;
/// Double-precision Transformer block parameters.
pub type Block64 = transformer::BlockParams<f64>;
/// Double-precision refinement stack.
pub type Model64 = stack::L2oModel<f64>;
