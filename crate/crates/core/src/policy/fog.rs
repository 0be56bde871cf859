//! First-order-gradient oracle through the *true* differentiable dynamics.
//!
//! The strongest baseline policy extraction can be compared against: a
//! deterministic observation-space actor trained by backpropagating the real
//! environment's reward sum through its own dynamics, with no value function
//! (the bootstrap is identically zero) and no model error. Everything the
//! world-model path could hope to match is contained here.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor};
use crate::envs::DiffEnv;
use crate::nn::{Adam, AdamConfig};
use crate::policy::actor::{Actor, ActorConfig};
use crate::policy::trainer::EvalReport;
use crate::{PwmError, Result};

/// Hyperparameters for [`train_fog_oracle`].
#[derive(Clone, Debug)]
pub struct FogConfig {
    /// Backprop-through-time horizon; `None` rolls full episodes.
    pub horizon: Option<usize>,
    pub batch: usize,
    pub gamma: f32,
    pub lr: f32,
    pub grad_clip: f32,
    pub hidden: Vec<usize>,
}

impl FogConfig {
    /// Desk-scale default: full-episode undiscounted objective.
    pub fn desk() -> Self {
        FogConfig {
            horizon: None,
            batch: 32,
            gamma: 1.0,
            lr: 3e-3,
            grad_clip: 1.0,
            hidden: vec![64, 64],
        }
    }
}

/// A trained observation-space policy for one environment.
pub struct FogOracle {
    pub actor: Actor,
}

impl FogOracle {
    /// Deterministic true-environment evaluation, mirroring the world-model
    /// policies' protocol: normalized mean actions go straight to the
    /// environment, which applies its own torque limit.
    pub fn eval(&self, env: &dyn DiffEnv, episodes: usize, seed: u64) -> EvalReport {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut returns = Vec::with_capacity(episodes);
        for _ in 0..episodes {
            let mut state = env.sample_init(&mut rng);
            let mut ep_return = 0.0f32;
            for _ in 0..env.episode_len() {
                let obs = env.obs(&state);
                let a = self.actor.act_plain(&Tensor::new([1, obs.len()], obs));
                ep_return += env.reward(&state, a.data());
                state = env.step(&state, a.data());
            }
            returns.push(ep_return);
        }
        let mean_return = returns.iter().sum::<f32>() / episodes.max(1) as f32;
        EvalReport { returns, mean_return }
    }
}

/// One logged oracle step.
#[derive(Clone, Copy, Debug)]
pub struct FogEntry {
    pub step: usize,
    /// Mean discounted reward sum over the batch (maximized).
    pub objective: f32,
}

#[derive(Clone, Debug, Default)]
pub struct FogTrainLog {
    pub entries: Vec<FogEntry>,
}

impl FogTrainLog {
    pub fn mean_objective_first(&self, k: usize) -> f32 {
        let take: Vec<f32> = self.entries.iter().take(k).map(|e| e.objective).collect();
        take.iter().sum::<f32>() / take.len().max(1) as f32
    }

    pub fn mean_objective_last(&self, k: usize) -> f32 {
        let skip = self.entries.len().saturating_sub(k);
        let take: Vec<f32> = self.entries.iter().skip(skip).map(|e| e.objective).collect();
        take.iter().sum::<f32>() / take.len().max(1) as f32
    }
}

/// Trains the oracle: deterministic mean-action rollouts through the true
/// dynamics on one tape, maximizing the discounted reward sum by Adam under
/// gradient-norm clipping.
pub fn train_fog_oracle(
    env: &dyn DiffEnv,
    cfg: &FogConfig,
    steps: usize,
    seed: u64,
) -> Result<(FogOracle, FogTrainLog)> {
    let horizon = cfg.horizon.unwrap_or_else(|| env.episode_len());
    if horizon == 0 || cfg.batch == 0 {
        return Err(PwmError::Shape("oracle training needs horizon, batch >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut actor = Actor::init(
        ActorConfig { hidden: cfg.hidden.clone(), ..ActorConfig::desk(env.obs_dim(), env.action_dim()) },
        &mut rng,
    );
    let mut adam = Adam::new(AdamConfig::new(cfg.lr).grad_clip(cfg.grad_clip), &actor.params());
    let mut log = FogTrainLog::default();
    let mut tape = Tape::new();
    let sd = env.state_dim();

    for step in 0..steps {
        let mut starts = Vec::with_capacity(cfg.batch * sd);
        for _ in 0..cfg.batch {
            starts.extend(env.sample_init(&mut rng));
        }
        tape.reset();
        let staged = actor.stage(&mut tape, true);
        let mut s = tape.constant(Tensor::new([cfg.batch, sd], starts));
        let mut acc = None;
        for t in 0..horizon {
            let obs = env.obs_tape(&mut tape, s);
            let a = staged.mean_action(&mut tape, obs);
            let r = env.reward_tape(&mut tape, s, a);
            s = env.step_tape(&mut tape, s, a);
            let r = tape.scale(r, cfg.gamma.powi(t as i32));
            acc = Some(match acc {
                Some(prev) => tape.add(prev, r),
                None => r,
            });
        }
        let objective = tape.mean(acc.expect("horizon >= 1"));
        let value = tape.value(objective).data()[0];
        if !value.is_finite() {
            return Err(PwmError::Numerical(format!(
                "oracle objective became non-finite at step {step}"
            )));
        }
        let loss = tape.scale(objective, -1.0);
        tape.backward(loss).map_err(|e| PwmError::Numerical(e.to_string()))?;
        let grads = staged.grads(&tape);
        let mut params = actor.params_mut();
        adam.step(&mut params, &grads);
        log.entries.push(FogEntry { step, objective: value });
    }
    Ok((FogOracle { actor }, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{Pendulum, PendulumTask};

    #[test]
    fn objective_improves_monotonically_in_trend_over_50_steps() {
        let env = Pendulum::new(PendulumTask::Swingup);
        let cfg = FogConfig { horizon: Some(60), batch: 8, ..FogConfig::desk() };
        let (_, log) = train_fog_oracle(&env, &cfg, 50, 3).unwrap();
        let first = log.mean_objective_first(5);
        let last = log.mean_objective_last(5);
        assert!(
            last > first,
            "true-dynamics gradients should improve the objective: {first} -> {last}"
        );
    }

    #[test]
    fn zero_steps_produce_an_untouched_seeded_actor() {
        let env = Pendulum::new(PendulumTask::Swingup);
        let cfg = FogConfig::desk();
        let (oracle, log) = train_fog_oracle(&env, &cfg, 0, 9).unwrap();
        assert!(log.entries.is_empty());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let reference = Actor::init(
            ActorConfig { hidden: cfg.hidden.clone(), ..ActorConfig::desk(3, 1) },
            &mut rng,
        );
        for (a, b) in oracle.actor.params().iter().zip(reference.params()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn evaluation_feeds_normalized_mean_actions_to_the_environment() {
        // An actor pinned to emit +1 must match a manual rollout under the
        // saturated normalized action; the environment applies its own
        // torque limit internally.
        let env = Pendulum::new(PendulumTask::Swingup);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut actor = Actor::init(ActorConfig::desk(3, 1), &mut rng);
        for p in actor.params_mut() {
            p.data_mut().fill(0.0);
        }
        // Zeroed weights give tanh(0) = 0 everywhere except a huge final
        // bias, which saturates the mean to tanh(b) ~ 1.
        let n = actor.params().len();
        // Final bias of the mean MLP is the next-to-last parameter tensor
        // (the log-std vector is last).
        actor.params_mut()[n - 2].data_mut().fill(50.0);
        let oracle = FogOracle { actor };
        let report = oracle.eval(&env, 1, 11);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut state = env.sample_init(&mut rng);
        let mut want = 0.0f32;
        for _ in 0..env.episode_len() {
            let a = [1.0f32];
            want += env.reward(&state, &a);
            state = env.step(&state, &a);
        }
        assert!(
            (report.returns[0] - want).abs() <= 1e-3 * want.abs().max(1.0),
            "evaluation return {} vs manual full-action rollout {want}",
            report.returns[0]
        );
    }
}
