//! Neural building blocks: MLPs, the Adam optimizer, and the discrete
//! reward codec.
//!
//! Modules own their parameters as plain tensors and are *staged* onto a tape
//! per training step: [`Mlp::stage`] records the parameters as leaves (or
//! constants, for frozen networks), and the returned [`StagedMlp`] replays the
//! forward pass. After `backward`, [`StagedMlp::grads`] collects gradients in
//! the same order [`Mlp::params`] exposes them, ready for [`Adam::step`].

mod adam;
mod codec;
mod mlp;

pub use adam::{Adam, AdamConfig, StepReport};
pub use codec::{symexp, symlog, TwoHotCodec};
pub use mlp::{Activation, Mlp, MlpSpec, StagedMlp};

use crate::autodiff::{Tape, Var};

/// Stages x through a SimNorm projection: groups of `p` on the last axis are
/// softmaxed onto the simplex. Exposed standalone because encoders and latent
/// dynamics apply it at their outputs.
pub fn simnorm(tape: &mut Tape<f32>, x: Var, p: usize) -> Var {
    tape.simnorm(x, p)
}
