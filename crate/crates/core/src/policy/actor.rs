//! The extracted policy: a tanh-bounded mean network plus a learnable,
//! state-independent per-dimension log-std with a hard floor.
//!
//! Actions are sampled by reparameterization: `a = clamp(tanh(mu) + std * eps,
//! -1, 1)`. The noise is added after the squash so the std floor keeps its
//! meaning at every state; the final clamp restores the action box.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Tensor, Var};
use crate::nn::{Activation, Mlp, MlpSpec, StagedMlp};
use crate::Result;

/// Hard lower bound on the sampling standard deviation.
pub const STD_FLOOR: f32 = 0.24;

/// Architecture and init for [`Actor`].
#[derive(Clone, Debug)]
pub struct ActorConfig {
    pub input_dim: usize,
    pub act_dim: usize,
    pub hidden: Vec<usize>,
    /// Initial value of the log-std parameter (pre-floor).
    pub init_log_std: f32,
}

impl ActorConfig {
    /// Desk-scale default: two 64-wide hidden layers.
    pub fn desk(input_dim: usize, act_dim: usize) -> Self {
        ActorConfig { input_dim, act_dim, hidden: vec![64, 64], init_log_std: 0.5f32.ln() }
    }

    /// Full-size shape from the hyperparameter table.
    pub fn paper_shape(input_dim: usize, act_dim: usize) -> Self {
        ActorConfig { hidden: vec![400, 200, 100], ..Self::desk(input_dim, act_dim) }
    }

    fn mean_spec(&self) -> MlpSpec {
        MlpSpec::new(self.input_dim, self.hidden.clone(), self.act_dim)
            .output_act(Activation::Tanh)
            .final_weight_scale(0.01)
    }
}

/// Mean network plus log-std parameter.
#[derive(Clone)]
pub struct Actor {
    cfg: ActorConfig,
    mean: Mlp,
    log_std: Tensor<f32>,
}

impl Actor {
    pub fn init(cfg: ActorConfig, rng: &mut ChaCha8Rng) -> Self {
        let mean = Mlp::init(cfg.mean_spec(), rng);
        let log_std = Tensor::full([cfg.act_dim], cfg.init_log_std);
        Actor { cfg, mean, log_std }
    }

    pub fn cfg(&self) -> &ActorConfig {
        &self.cfg
    }

    pub fn params(&self) -> Vec<&Tensor<f32>> {
        let mut out = self.mean.params();
        out.push(&self.log_std);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<f32>> {
        let mut out = self.mean.params_mut();
        out.push(&mut self.log_std);
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut out = self.mean.param_names("actor");
        out.push("actor.log_std".into());
        out
    }

    pub fn set_params(&mut self, tensors: &[Tensor<f32>]) -> Result<()> {
        let n = self.mean.params().len();
        if tensors.len() != n + 1 {
            return Err(crate::PwmError::Shape(format!(
                "actor: expected {} parameter tensors, got {}",
                n + 1,
                tensors.len()
            )));
        }
        self.mean.set_params(&tensors[..n])?;
        if tensors[n].shape() != self.log_std.shape() {
            return Err(crate::PwmError::Shape("actor: log_std shape mismatch".into()));
        }
        self.log_std = tensors[n].clone();
        Ok(())
    }

    /// Clones all parameters, for checkpoints and best-snapshot tracking.
    pub fn snapshot(&self) -> Vec<Tensor<f32>> {
        self.params().into_iter().cloned().collect()
    }

    pub fn stage(&self, tape: &mut Tape<f32>, trainable: bool) -> StagedActor {
        let log_std = if trainable {
            tape.leaf(self.log_std.clone())
        } else {
            tape.constant(self.log_std.clone())
        };
        StagedActor { mean: self.mean.stage(tape, trainable), log_std }
    }

    /// Deterministic action (the squashed mean) without gradient tracking.
    pub fn act_plain(&self, input: &Tensor<f32>) -> Tensor<f32> {
        self.mean.forward_plain(input)
    }

    /// Floored standard deviations, one per action dim.
    pub fn std(&self) -> Vec<f32> {
        self.log_std.data().iter().map(|&l| l.exp().max(STD_FLOOR)).collect()
    }

    /// Samples one noise tensor `[batch, act_dim]` of standard normals.
    pub fn sample_noise(batch: usize, act_dim: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
        let data: Vec<f32> = (0..batch * act_dim).map(|_| rng.sample(StandardNormal)).collect();
        Tensor::new([batch, act_dim], data)
    }
}

/// Tape-resident actor.
pub struct StagedActor {
    mean: StagedMlp,
    log_std: Var,
}

impl StagedActor {
    /// Squashed mean action for a `[B, input_dim]` batch.
    pub fn mean_action(&self, tape: &mut Tape<f32>, input: Var) -> Var {
        self.mean.forward(tape, input)
    }

    /// Reparameterized action: `clamp(tanh(mu) + std * eps, -1, 1)` with the
    /// std floor applied inside the graph so gradients reach log_std.
    pub fn act(&self, tape: &mut Tape<f32>, input: Var, eps: Var) -> Var {
        let mu = self.mean.forward(tape, input);
        // Floor in log space: clamp passes gradient only above the floor.
        let floored = tape.clamp(self.log_std, STD_FLOOR.ln(), 20.0);
        let std = tape.exp(floored);
        let noise = tape.mul(eps, std);
        let a = tape.add(mu, noise);
        tape.clamp(a, -1.0, 1.0)
    }

    pub fn grads(&self, tape: &Tape<f32>) -> Vec<Tensor<f32>> {
        let mut out = self.mean.grads(tape);
        out.push(tape.grad_or_zeros(self.log_std));
        out
    }
}
