//! Latent world models for gradient-based policy learning, at desk scale.
//!
//! The crate is organized bottom-up:
//!
//! - [`autodiff`]: a reverse-mode tape over dense tensors, generic over `f32`
//!   and `f64`, with the op set needed for small MLP training and
//!   backpropagation through time.
//! - [`nn`]: MLPs (LayerNorm, ReLU/Mish/SimNorm activations), Adam with
//!   global-norm clipping, and the symlog two-hot reward codec.
//! - [`envs`]: differentiable toy control tasks (pendulum swing-up and spin,
//!   two-link underactuated swing-up, ball-throw-over-wall) plus a task
//!   registry that pads heterogeneous tasks to shared dimensions.
//! - [`dataset`]: offline trajectory storage, window sampling, and the binary
//!   dataset file format.
//! - [`worldmodel`]: the regularized latent model (encoder, latent dynamics,
//!   discrete-reward head, task embeddings) trained on offline trajectories.
//! - [`policy`]: actor/critic extraction inside the frozen model via
//!   first-order gradients, TD(lambda) value targets, and the true-dynamics
//!   baseline trainer used as an oracle and for data collection.
//! - [`diagnostics`]: Monte-Carlo gradient studies (variance, empirical SNR),
//!   landscape sweeps, and optimality gaps.
//! - [`harness`]: configs, dataset/checkpoint persistence, metrics, and the
//!   end-to-end pipelines behind the `pwm` command-line interface.

pub mod autodiff;
pub mod dataset;
pub mod diagnostics;
pub mod envs;
pub mod error;
pub mod harness;
pub mod nn;
pub mod policy;
pub mod worldmodel;

pub use error::PwmError;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, PwmError>;
