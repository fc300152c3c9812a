//! Feedforward MLP training with speculative backpropagation.
//!
//! The crate trains the 784-16-16-10 leaky-ReLU/softmax network on MNIST in
//! three modes:
//!
//! * **baseline**: sequential forward, backward, clip, accumulate, update.
//! * **speculative**: a two-worker lag-1 pipeline where the forward pass of
//!   sample `t` overlaps the gradient resolution of sample `t - 1`, and the
//!   resolution reuses a per-label cached gradient when the current softmax
//!   output lies within a threshold of the cached one.
//! * **shadow**: the baseline trajectory, instrumented with the distances the
//!   speculative resolver would have seen.
//!
//! The [`cli`] module wires these into a benchmark harness that reports
//! per-epoch training time, per-step latency, test accuracy and hit rate.

pub mod cli;
pub mod error;
pub mod executor;
pub mod math;
pub mod mnist_io;
pub mod network;
pub mod speculation;

pub use error::{Error, Result};
pub use executor::{EpochRecord, Mode, RunReport, TrainConfig};
pub use math::{Matrix, Prng, Real};
pub use mnist_io::ImageSample;
pub use network::{ForwardTrace, GradientSet, Layout, NetworkParams};
pub use speculation::{DistanceMetric, GradientCache};
