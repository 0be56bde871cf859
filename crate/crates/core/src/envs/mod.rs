//! Differentiable toy dynamical systems and the multi-task registry.
//!
//! Each environment exposes its dynamics, reward, and observation map as tape
//! ops over batched states, so whole rollouts can be recorded and
//! differentiated end-to-end. The scalar convenience methods route through a
//! scratch tape, which keeps the tape and plain paths bit-identical by
//! construction.
//!
//! Actions everywhere are normalized to `[-1, 1]`; environments scale by
//! their own torque limit internally.

mod acrobot;
mod ballwall;
mod pendulum;

pub use acrobot::Acrobot;
pub use ballwall::{
    ballwall_experiment, descend_surrogate, descend_true_landscape, train_surrogate, BallWall,
    BallWallOutcome, SurrogateKind,
};
pub use pendulum::{Pendulum, PendulumTask};

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{finite_diff_grads, Scalar, Tape, Tensor, Var};
use crate::{PwmError, Result};

/// A batched, differentiable environment.
///
/// States are `[B, state_dim]`, actions `[B, action_dim]` in `[-1, 1]`,
/// observations `[B, obs_dim]`, rewards `[B]`.
pub trait DiffEnv {
    fn name(&self) -> &'static str;
    fn state_dim(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn episode_len(&self) -> usize;
    /// Physical torque scale multiplying the normalized action.
    fn action_limit(&self) -> f32;

    /// Draws one initial state from the task's initial-state distribution.
    fn sample_init(&self, rng: &mut ChaCha8Rng) -> Vec<f32>;

    /// One dynamics step on the tape.
    fn step_tape(&self, tape: &mut Tape<f32>, state: Var, action: Var) -> Var;
    /// Reward on the tape, shape `[B]`.
    fn reward_tape(&self, tape: &mut Tape<f32>, state: Var, action: Var) -> Var;
    /// Observation map on the tape.
    fn obs_tape(&self, tape: &mut Tape<f32>, state: Var) -> Var;

    /// Scalar step without gradient tracking (single state).
    fn step(&self, state: &[f32], action: &[f32]) -> Vec<f32> {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::new([1, self.state_dim()], state.to_vec()));
        let a = tape.constant(Tensor::new([1, self.action_dim()], action.to_vec()));
        let next = self.step_tape(&mut tape, s, a);
        tape.value(next).data().to_vec()
    }

    /// Scalar reward without gradient tracking.
    fn reward(&self, state: &[f32], action: &[f32]) -> f32 {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::new([1, self.state_dim()], state.to_vec()));
        let a = tape.constant(Tensor::new([1, self.action_dim()], action.to_vec()));
        let r = self.reward_tape(&mut tape, s, a);
        tape.value(r).data()[0]
    }

    /// Scalar observation without gradient tracking.
    fn obs(&self, state: &[f32]) -> Vec<f32> {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::new([1, self.state_dim()], state.to_vec()));
        let o = self.obs_tape(&mut tape, s);
        tape.value(o).data().to_vec()
    }
}

/// Scalar-generic dynamics and reward graphs. [`DiffEnv`] fixes `f32` for
/// runtime use; this trait exposes the same graphs at any precision so
/// 64-bit finite-difference oracles can probe the identical computation.
pub trait EnvOps {
    fn step_graph<T: Scalar>(&self, tape: &mut Tape<T>, state: Var, action: Var) -> Var;
    fn reward_graph<T: Scalar>(&self, tape: &mut Tape<T>, state: Var, action: Var) -> Var;
}

impl EnvOps for Pendulum {
    fn step_graph<T: Scalar>(&self, tape: &mut Tape<T>, state: Var, action: Var) -> Var {
        self.step_op(tape, state, action)
    }
    fn reward_graph<T: Scalar>(&self, tape: &mut Tape<T>, state: Var, action: Var) -> Var {
        self.reward_op(tape, state, action)
    }
}

impl EnvOps for Acrobot {
    fn step_graph<T: Scalar>(&self, tape: &mut Tape<T>, state: Var, action: Var) -> Var {
        self.step_op(tape, state, action)
    }
    fn reward_graph<T: Scalar>(&self, tape: &mut Tape<T>, state: Var, action: Var) -> Var {
        self.reward_op(tape, state, action)
    }
}

/// Sum of rewards along an open-loop rollout: `actions` is `[1, horizon]`,
/// one scalar action per step.
fn rollout_return<T: Scalar, E: EnvOps>(
    env: &E,
    tape: &mut Tape<T>,
    s0: Var,
    actions: Var,
    horizon: usize,
) -> Var {
    let mut s = s0;
    let mut total: Option<Var> = None;
    for h in 0..horizon {
        let a = tape.slice_last(actions, h, 1);
        let r = env.reward_graph(tape, s, a);
        let r = tape.sum(r);
        total = Some(match total {
            Some(acc) => tape.add(acc, r),
            None => r,
        });
        s = env.step_graph(tape, s, a);
    }
    total.expect("rollout_return: horizon must be >= 1")
}

/// Worst relative error (unit floor) between 32-bit reverse-mode BPTT
/// gradients of an `horizon`-step rollout return and a 64-bit
/// central-difference oracle evaluated on the identical graph. Gradients are
/// taken with respect to the initial state and the whole action sequence.
pub fn bptt_gradient_error<E: EnvOps>(
    env: &E,
    s0: &[f64],
    actions: &[f64],
    horizon: usize,
) -> f64 {
    assert_eq!(actions.len(), horizon);
    let sd = s0.len();

    let mut tape = Tape::<f32>::new();
    let sv = tape.leaf(Tensor::new([1, sd], s0.iter().map(|&x| x as f32).collect::<Vec<_>>()));
    let av = tape.leaf(Tensor::new(
        [1, horizon],
        actions.iter().map(|&x| x as f32).collect::<Vec<_>>(),
    ));
    let root = rollout_return(env, &mut tape, sv, av, horizon);
    tape.backward(root).expect("bptt_gradient_error: backward failed");
    let analytic = [tape.grad_or_zeros(sv), tape.grad_or_zeros(av)];

    let inputs =
        [Tensor::new([1, sd], s0.to_vec()), Tensor::new([1, horizon], actions.to_vec())];
    let oracle = finite_diff_grads::<f64>(
        &|t, v| rollout_return(env, t, v[0], v[1], horizon),
        &inputs,
        1e-5,
    );

    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(&oracle) {
        for (&af, &nv) in a.data().iter().zip(n.data()) {
            let av = af as f64;
            let denom = 1.0f64.max(av.abs()).max(nv.abs());
            worst = worst.max((av - nv).abs() / denom);
        }
    }
    worst
}

/// Constructs the environment registered under `name`.
pub fn env_by_name(name: &str) -> Result<Box<dyn DiffEnv>> {
    match name {
        "pendulum-swingup" => Ok(Box::new(Pendulum::new(PendulumTask::Swingup))),
        "pendulum-spin" => Ok(Box::new(Pendulum::new(PendulumTask::Spin))),
        "acrobot" => Ok(Box::new(Acrobot::default())),
        other => Err(PwmError::UnknownTask(other.to_string())),
    }
}

/// Static description of a registered task.
#[derive(Clone, Debug)]
pub struct TaskSpec {
    pub name: String,
    /// Native observation dim, before padding.
    pub obs_dim: usize,
    /// Native action dim, before padding.
    pub action_dim: usize,
    pub episode_len: usize,
}

/// A fixed set of tasks padded to shared observation/action dimensions.
///
/// Multi-task models consume padded vectors; the registry owns the mapping
/// between native and padded layouts, including the validity masks.
pub struct TaskRegistry {
    specs: Vec<TaskSpec>,
    envs: Vec<Box<dyn DiffEnv>>,
    max_obs: usize,
    max_act: usize,
}

impl TaskRegistry {
    pub fn new(task_names: &[&str]) -> Result<Self> {
        if task_names.is_empty() {
            return Err(PwmError::ConfigSyntax("task registry needs at least one task".into()));
        }
        let mut specs = Vec::new();
        let mut envs = Vec::new();
        for &name in task_names {
            let env = env_by_name(name)?;
            specs.push(TaskSpec {
                name: name.to_string(),
                obs_dim: env.obs_dim(),
                action_dim: env.action_dim(),
                episode_len: env.episode_len(),
            });
            envs.push(env);
        }
        let max_obs = specs.iter().map(|s| s.obs_dim).max().unwrap_or(0);
        let max_act = specs.iter().map(|s| s.action_dim).max().unwrap_or(0);
        Ok(TaskRegistry { specs, envs, max_obs, max_act })
    }

    pub fn num_tasks(&self) -> usize {
        self.specs.len()
    }

    /// Shared (padded) observation dimension.
    pub fn obs_dim(&self) -> usize {
        self.max_obs
    }

    /// Shared (padded) action dimension.
    pub fn action_dim(&self) -> usize {
        self.max_act
    }

    pub fn spec(&self, task: usize) -> Result<&TaskSpec> {
        self.specs.get(task).ok_or_else(|| PwmError::UnknownTask(format!("task index {task}")))
    }

    pub fn env(&self, task: usize) -> Result<&dyn DiffEnv> {
        self.envs
            .get(task)
            .map(|e| e.as_ref())
            .ok_or_else(|| PwmError::UnknownTask(format!("task index {task}")))
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.specs
            .iter()
            .position(|s| s.name == name)
            .ok_or_else(|| PwmError::UnknownTask(name.to_string()))
    }

    /// Zero-pads a native observation to the shared dimension.
    pub fn pad_obs(&self, task: usize, obs: &[f32]) -> Result<Vec<f32>> {
        let spec = self.spec(task)?;
        assert_eq!(obs.len(), spec.obs_dim, "pad_obs: wrong native dim for {}", spec.name);
        let mut out = vec![0.0; self.max_obs];
        out[..obs.len()].copy_from_slice(obs);
        Ok(out)
    }

    /// Zero-pads a native action to the shared dimension.
    pub fn pad_action(&self, task: usize, action: &[f32]) -> Result<Vec<f32>> {
        let spec = self.spec(task)?;
        assert_eq!(action.len(), spec.action_dim, "pad_action: wrong native dim for {}", spec.name);
        let mut out = vec![0.0; self.max_act];
        out[..action.len()].copy_from_slice(action);
        Ok(out)
    }

    /// Truncates a padded action back to the task's native dimension.
    pub fn unpad_action(&self, task: usize, padded: &[f32]) -> Result<Vec<f32>> {
        let spec = self.spec(task)?;
        assert_eq!(padded.len(), self.max_act, "unpad_action: expected padded dim");
        Ok(padded[..spec.action_dim].to_vec())
    }

    /// Mask over the padded observation layout: 1 for real entries, 0 for
    /// padding.
    pub fn obs_mask(&self, task: usize) -> Result<Vec<f32>> {
        let spec = self.spec(task)?;
        let mut mask = vec![0.0; self.max_obs];
        for m in mask.iter_mut().take(spec.obs_dim) {
            *m = 1.0;
        }
        Ok(mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn registry_pads_to_shared_dims() {
        let reg = TaskRegistry::new(&["pendulum-swingup", "acrobot"]).unwrap();
        assert_eq!(reg.obs_dim(), 6);
        assert_eq!(reg.action_dim(), 1);
        let padded = reg.pad_obs(0, &[0.1, 0.2, 0.3]).unwrap();
        assert_eq!(padded, vec![0.1, 0.2, 0.3, 0.0, 0.0, 0.0]);
        assert_eq!(reg.obs_mask(0).unwrap(), vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
        assert_eq!(reg.obs_mask(1).unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn action_pad_round_trips() {
        let reg = TaskRegistry::new(&["pendulum-swingup", "pendulum-spin"]).unwrap();
        let padded = reg.pad_action(0, &[0.7]).unwrap();
        assert_eq!(reg.unpad_action(0, &padded).unwrap(), vec![0.7]);
    }

    #[test]
    fn unknown_task_is_an_error() {
        assert!(TaskRegistry::new(&["no-such-task"]).is_err());
        let reg = TaskRegistry::new(&["acrobot"]).unwrap();
        assert!(reg.index_of("pendulum-swingup").is_err());
        assert!(reg.spec(3).is_err());
    }

    #[test]
    fn plain_and_tape_paths_agree_bit_exactly() {
        let reg = TaskRegistry::new(&["pendulum-swingup", "acrobot"]).unwrap();
        for task in 0..2 {
            let env = reg.env(task).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
            let s = env.sample_init(&mut rng);
            let a = vec![0.37; env.action_dim()];
            let r1 = env.reward(&s, &a);
            let r2 = env.reward(&s, &a);
            assert_eq!(r1.to_bits(), r2.to_bits(), "reward must be pure");
            let s1 = env.step(&s, &a);
            let s2 = env.step(&s, &a);
            assert_eq!(s1, s2);
        }
    }
}
