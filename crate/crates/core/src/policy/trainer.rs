//! First-order policy extraction through a frozen world model.
//!
//! One training step rolls the actor through the latent dynamics on a single
//! tape, scores the trajectory with pseudo-rewards and the critic ensemble,
//! and backpropagates the full chain into the actor parameters alone. The
//! critic then regresses TD(λ) targets built from real-scale decoded rewards
//! on the detached rollout latents.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::dataset::Dataset;
use crate::envs::{DiffEnv, TaskRegistry};
use crate::nn::{Adam, AdamConfig, TwoHotCodec};
use crate::policy::actor::{Actor, ActorConfig, StagedActor};
use crate::policy::critic::{critic_update, CriticConfig, CriticEnsemble, CriticOpt, StagedCritic};
use crate::policy::td::td_lambda_targets;
use crate::worldmodel::{StagedWorldModel, WorldModel};
use crate::{PwmError, Result};

/// Which differentiable objective drives the actor update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActorBackend {
    /// Discounted pseudo-reward sum plus a discounted terminal value.
    TerminalValue,
    /// On-tape TD(λ) estimate of the start latent's value.
    TdLambda,
}

/// Hyperparameters of the extraction loop.
#[derive(Clone, Debug)]
pub struct PwmConfig {
    /// Imagination rollout length.
    pub horizon: usize,
    /// Rollout batch (start states per step).
    pub batch: usize,
    pub gamma: f32,
    pub lambda: f32,
    pub actor_lr: f32,
    pub critic_lr: f32,
    /// Gradient-norm clip for the actor update.
    pub actor_clip: f32,
    /// Per-member gradient-norm clip for critic updates.
    pub critic_clip: f32,
    /// The latent pool is shuffled into this many regression mini-batches...
    pub critic_splits: usize,
    /// ...and this many Adam steps sample among them each training step.
    pub critic_iters: usize,
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub num_critics: usize,
    pub backend: ActorBackend,
    /// Optional EMA target critic for the regression bootstrap (off by
    /// default: targets come from the current critic, detached).
    pub ema_target: bool,
    pub ema_tau: f32,
    /// True-environment evaluation cadence in training steps (0 = never).
    pub eval_every: usize,
    pub eval_episodes: usize,
}

impl PwmConfig {
    /// Desk-scale defaults; optimizer constants follow the reference recipe.
    pub fn desk() -> Self {
        PwmConfig {
            horizon: 16,
            batch: 64,
            gamma: 0.99,
            lambda: 0.95,
            actor_lr: 5e-4,
            critic_lr: 5e-4,
            actor_clip: 1.0,
            critic_clip: 100.0,
            critic_splits: 4,
            critic_iters: 8,
            actor_hidden: vec![64, 64],
            critic_hidden: vec![64, 64],
            num_critics: 3,
            backend: ActorBackend::TerminalValue,
            ema_target: false,
            ema_tau: 0.01,
            eval_every: 500,
            eval_episodes: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.batch == 0 {
            return Err(PwmError::Shape("policy training needs horizon, batch >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(PwmError::InvalidConfigValue {
                key: "gamma".into(),
                value: format!("{} (must lie in [0, 1])", self.gamma),
            });
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(PwmError::InvalidConfigValue {
                key: "lambda".into(),
                value: format!("{} (must lie in [0, 1])", self.lambda),
            });
        }
        if self.critic_splits == 0 || self.num_critics == 0 {
            return Err(PwmError::Shape("policy training needs critic splits, members >= 1".into()));
        }
        Ok(())
    }
}

/// One imagined trajectory recorded on a live tape.
#[derive(Debug)]
pub struct Rollout {
    pub batch: usize,
    pub horizon: usize,
    /// `z_0 .. z_H`, each `[B, latent_dim]`.
    pub latents: Vec<Var>,
    /// `a_0 .. a_{H-1}`, each `[B, act_dim]`.
    pub actions: Vec<Var>,
    /// Reward logits for `(z_t, a_t)`, each `[B, num_bins]`.
    pub reward_logits: Vec<Var>,
}

impl Rollout {
    /// Differentiable symlog-space rewards, one `[B]` node per step.
    pub fn pseudo_rewards(&self, tape: &mut Tape<f32>, codec: &TwoHotCodec) -> Vec<Var> {
        self.reward_logits.iter().map(|&l| codec.decode_pseudo(tape, l)).collect()
    }

    /// Detached real-scale rewards, time-major `[H][B]`.
    pub fn eval_rewards(&self, tape: &Tape<f32>, codec: &TwoHotCodec) -> Vec<Vec<f32>> {
        self.reward_logits.iter().map(|&l| codec.decode_eval(tape.value(l))).collect()
    }

    /// Detached latents `z_0 .. z_H` stacked time-major into
    /// `[(H+1)*B, latent_dim]`.
    pub fn latents_detached(&self, tape: &Tape<f32>) -> Tensor<f32> {
        let d = tape.value(self.latents[0]).last_dim();
        let rows = (self.horizon + 1) * self.batch;
        let mut data = Vec::with_capacity(rows * d);
        for &z in &self.latents {
            data.extend_from_slice(tape.value(z).data());
        }
        Tensor::new([rows, d], data)
    }
}

fn all_finite(t: &Tensor<f32>) -> bool {
    t.data().iter().all(|v| v.is_finite())
}

/// Rolls the staged actor through the staged dynamics for `horizon` steps
/// starting from encoded `start_obs`, recording everything on `tape`.
///
/// `noise` supplies one `[B, act_dim]` standard-normal tensor per step; pass
/// zeros for a deterministic mean rollout. When `feed_embedding` is set the
/// actor sees `[z, task_embedding]` instead of the latent alone. A non-finite
/// latent or reward logit aborts with the offending step index.
#[allow(clippy::too_many_arguments)]
pub fn actor_rollout(
    tape: &mut Tape<f32>,
    wm: &StagedWorldModel,
    actor: &StagedActor,
    start_obs: &Tensor<f32>,
    tasks: &[usize],
    horizon: usize,
    noise: &[Tensor<f32>],
    feed_embedding: bool,
) -> Result<Rollout> {
    let batch = start_obs.shape()[0];
    if tasks.len() != batch {
        return Err(PwmError::Shape(format!(
            "rollout: {batch} start observations vs {} task ids",
            tasks.len()
        )));
    }
    if noise.len() != horizon {
        return Err(PwmError::Shape(format!(
            "rollout: horizon {horizon} needs {horizon} noise tensors, got {}",
            noise.len()
        )));
    }
    let emb = wm.embed_for(tape, tasks)?;
    let o = tape.constant(start_obs.clone());
    let mut z = wm.encode(tape, o, emb);
    if !all_finite(tape.value(z)) {
        return Err(PwmError::Numerical("rollout: non-finite encoded start latent".into()));
    }

    let mut latents = Vec::with_capacity(horizon + 1);
    let mut actions = Vec::with_capacity(horizon);
    let mut reward_logits = Vec::with_capacity(horizon);
    latents.push(z);
    for t in 0..horizon {
        let input = if feed_embedding { tape.concat_last(&[z, emb]) } else { z };
        let eps = tape.constant(noise[t].clone());
        let a = actor.act(tape, input, eps);
        let logits = wm.reward_logits(tape, z, a, emb);
        z = wm.step(tape, z, a, emb);
        if !all_finite(tape.value(a))
            || !all_finite(tape.value(logits))
            || !all_finite(tape.value(z))
        {
            return Err(PwmError::Numerical(format!(
                "rollout produced a non-finite value at step {t}"
            )));
        }
        actions.push(a);
        reward_logits.push(logits);
        latents.push(z);
    }
    Ok(Rollout { batch, horizon, latents, actions, reward_logits })
}

/// The terminal-value actor objective (to be maximized):
///
/// `J = mean_B [ Σ_{h=1}^{H-1} γ^h · r̂_h  +  γ^H · V(z_H) ]`
///
/// with pseudo-rewards `r̂` and the mean ensemble value `V`. With `H = 1`
/// this is exactly `γ·V(z_1)`; with `γ = 0` it is exactly zero.
pub fn actor_objective(
    tape: &mut Tape<f32>,
    rollout: &Rollout,
    codec: &TwoHotCodec,
    critic: &StagedCritic,
    gamma: f32,
) -> Var {
    let h = rollout.horizon;
    let v = critic.value_mean(tape, rollout.latents[h]);
    let mut acc = tape.scale(v, gamma.powi(h as i32));
    for t in 1..h {
        let r = codec.decode_pseudo(tape, rollout.reward_logits[t]);
        let r = tape.scale(r, gamma.powi(t as i32));
        acc = tape.add(acc, r);
    }
    tape.mean(acc)
}

/// The TD(λ) actor objective: the λ-return of the start latent, recomputed
/// live on the tape from pseudo-rewards and frozen critic bootstraps, then
/// averaged over the batch. λ = 0 gives `r̂_0 + γ·V(z_1)`; λ = 1 matches the
/// terminal-value objective plus the step-0 reward.
pub fn actor_objective_td_lambda(
    tape: &mut Tape<f32>,
    rollout: &Rollout,
    codec: &TwoHotCodec,
    critic: &StagedCritic,
    gamma: f32,
    lambda: f32,
) -> Var {
    let h = rollout.horizon;
    let values: Vec<Var> =
        (1..=h).map(|t| critic.value_mean(tape, rollout.latents[t])).collect();
    let rewards = rollout.pseudo_rewards(tape, codec);
    let mut next = values[h - 1];
    for t in (0..h).rev() {
        let one_step = tape.scale(values[t], 1.0 - lambda);
        let lam = tape.scale(next, lambda);
        let boot = tape.add(one_step, lam);
        let disc = tape.scale(boot, gamma);
        next = tape.add(rewards[t], disc);
    }
    tape.mean(next)
}

/// One logged actor/critic step.
#[derive(Clone, Copy, Debug)]
pub struct PolicyTrainEntry {
    pub step: usize,
    /// Value of the maximized actor objective.
    pub objective: f32,
    /// Mean critic regression loss over this step's Adam iterations.
    pub critic_loss: f32,
}

/// One true-environment evaluation.
#[derive(Clone, Copy, Debug)]
pub struct EvalPoint {
    /// Number of completed training steps at evaluation time.
    pub step: usize,
    pub mean_return: f32,
}

/// Per-step trace of one extraction run.
#[derive(Clone, Debug, Default)]
pub struct TrainPolicyLog {
    pub entries: Vec<PolicyTrainEntry>,
    pub evals: Vec<EvalPoint>,
    /// Set when a non-finite rollout/objective aborted training; the
    /// returned parameters are the best evaluated checkpoint before the
    /// abort (or the initial ones if nothing was evaluated).
    pub aborted_at: Option<usize>,
}

/// Trained actor and critic with their log.
pub struct PolicyArtifacts {
    pub actor: Actor,
    pub critic: CriticEnsemble,
    pub log: TrainPolicyLog,
}

/// Best-evaluated parameter snapshots, restored on abort.
struct BestTracker {
    score: f32,
    actor: Vec<Tensor<f32>>,
    critic: Vec<Tensor<f32>>,
}

impl BestTracker {
    fn offer(slot: &mut Option<BestTracker>, score: f32, actor: &Actor, critic: &CriticEnsemble) {
        if !score.is_finite() {
            return;
        }
        let better = slot.as_ref().map_or(true, |b| score > b.score);
        if better {
            *slot =
                Some(BestTracker { score, actor: actor.snapshot(), critic: critic.snapshot() });
        }
    }
}

/// The shared training loop behind [`pwm_train_policy`] and
/// [`multitask_extract`]. `sample` provides `(start_obs, task_ids)` batches;
/// `evaluator` runs the periodic true-environment evaluation.
fn run_policy_training(
    wm: &WorldModel,
    cfg: &PwmConfig,
    steps: usize,
    seed: u64,
    feed_embedding: bool,
    sample: &mut dyn FnMut(usize, &mut ChaCha8Rng) -> Result<(Tensor<f32>, Vec<usize>)>,
    mut evaluator: Option<&mut dyn FnMut(usize, &Actor) -> Result<f32>>,
) -> Result<PolicyArtifacts> {
    cfg.validate()?;
    let wm_hash = wm.param_hash();
    let wm_cfg = wm.cfg();
    let latent = wm_cfg.latent_dim;
    let input_dim = if feed_embedding { latent + wm_cfg.task_embed_dim } else { latent };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut actor = Actor::init(
        ActorConfig {
            hidden: cfg.actor_hidden.clone(),
            ..ActorConfig::desk(input_dim, wm_cfg.act_dim)
        },
        &mut rng,
    );
    let mut critic = CriticEnsemble::init(
        CriticConfig {
            input_dim: latent,
            hidden: cfg.critic_hidden.clone(),
            members: cfg.num_critics,
        },
        &mut rng,
    );
    let mut target_critic = cfg.ema_target.then(|| critic.clone());

    let mut actor_adam =
        Adam::new(AdamConfig::new(cfg.actor_lr).grad_clip(cfg.actor_clip), &actor.params());
    let mut critic_opt = CriticOpt::new(&critic, cfg.critic_lr, cfg.critic_clip);

    let mut log = TrainPolicyLog::default();
    let mut best: Option<BestTracker> = None;
    let mut tape = Tape::new();
    let codec = wm.codec().clone();

    for step in 0..steps {
        let (start_obs, task_ids) = sample(step, &mut rng)?;
        let noise: Vec<Tensor<f32>> = (0..cfg.horizon)
            .map(|_| Actor::sample_noise(cfg.batch, wm_cfg.act_dim, &mut rng))
            .collect();

        // ---- actor phase ----
        tape.reset();
        let staged_wm = wm.stage(&mut tape, false);
        let staged_actor = actor.stage(&mut tape, true);
        let staged_critic = critic.stage(&mut tape, false);
        let rollout = match actor_rollout(
            &mut tape,
            &staged_wm,
            &staged_actor,
            &start_obs,
            &task_ids,
            cfg.horizon,
            &noise,
            feed_embedding,
        ) {
            Ok(r) => r,
            Err(PwmError::Numerical(_)) => {
                log.aborted_at = Some(step);
                break;
            }
            Err(e) => return Err(e),
        };
        let objective = match cfg.backend {
            ActorBackend::TerminalValue => {
                actor_objective(&mut tape, &rollout, &codec, &staged_critic, cfg.gamma)
            }
            ActorBackend::TdLambda => actor_objective_td_lambda(
                &mut tape,
                &rollout,
                &codec,
                &staged_critic,
                cfg.gamma,
                cfg.lambda,
            ),
        };
        let obj_value = tape.value(objective).data()[0];
        if !obj_value.is_finite() {
            log.aborted_at = Some(step);
            break;
        }
        let loss = tape.scale(objective, -1.0);
        tape.backward(loss).map_err(|e| PwmError::Numerical(e.to_string()))?;
        let grads = staged_actor.grads(&tape);
        if grads.iter().any(|g| !all_finite(g)) {
            log.aborted_at = Some(step);
            break;
        }
        let mut params = actor.params_mut();
        actor_adam.step(&mut params, &grads);

        // ---- critic phase: TD(λ) targets on the detached rollout ----
        let all_latents = rollout.latents_detached(&tape);
        let boot_source = target_critic.as_ref().unwrap_or(&critic);
        let values = boot_source.value_mean_plain(&all_latents);
        let mut rewards = Vec::with_capacity(cfg.horizon * cfg.batch);
        for step_rewards in rollout.eval_rewards(&tape, &codec) {
            rewards.extend(step_rewards);
        }
        let targets =
            td_lambda_targets(&rewards, &values, cfg.batch, cfg.horizon, cfg.gamma, cfg.lambda)?;
        let pool_rows = cfg.horizon * cfg.batch;
        let pool = Tensor::new(
            [pool_rows, latent],
            all_latents.data()[..pool_rows * latent].to_vec(),
        );
        let losses = critic_update(
            &mut critic,
            &mut critic_opt,
            &pool,
            &targets,
            cfg.critic_splits,
            cfg.critic_iters,
            &mut rng,
        )?;
        if let Some(target) = target_critic.as_mut() {
            target.ema_from(&critic, cfg.ema_tau);
        }
        let critic_loss = if losses.is_empty() {
            0.0
        } else {
            losses.iter().sum::<f32>() / losses.len() as f32
        };
        log.entries.push(PolicyTrainEntry { step, objective: obj_value, critic_loss });

        // ---- periodic true-environment evaluation ----
        if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 {
            if let Some(eval) = evaluator.as_deref_mut() {
                let score = eval(step + 1, &actor)?;
                log.evals.push(EvalPoint { step: step + 1, mean_return: score });
                BestTracker::offer(&mut best, score, &actor, &critic);
            }
        }
    }

    if log.aborted_at.is_some() {
        if let Some(b) = best {
            actor.set_params(&b.actor)?;
            critic.set_params(&b.critic)?;
        }
    }
    assert_eq!(wm.param_hash(), wm_hash, "world model must stay frozen during extraction");
    Ok(PolicyArtifacts { actor, critic, log })
}

/// Extracts a single-task policy from the frozen `wm` with first-order
/// gradients, evaluating periodically in the true environment.
pub fn pwm_train_policy(
    wm: &WorldModel,
    data: &Dataset,
    env: &dyn DiffEnv,
    task: usize,
    cfg: &PwmConfig,
    steps: usize,
    seed: u64,
) -> Result<PolicyArtifacts> {
    let batch = cfg.batch;
    let eval_episodes = cfg.eval_episodes;
    let eval_seed = seed ^ 0xE7A1;
    let mut evaluator = move |_step: usize, actor: &Actor| -> Result<f32> {
        Ok(eval_policy(env, wm, actor, task, eval_episodes, eval_seed)?.mean_return)
    };
    run_policy_training(
        wm,
        cfg,
        steps,
        seed,
        false,
        &mut |_, rng| data.sample_obs(rng, batch, Some(task)),
        Some(&mut evaluator),
    )
}

/// Deterministic evaluation: encode the padded observation, feed the actor's
/// normalized mean action straight to the environment (which applies its own
/// torque limit), and accumulate the true reward over full episodes.
pub fn eval_policy(
    env: &dyn DiffEnv,
    wm: &WorldModel,
    actor: &Actor,
    task: usize,
    episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    let wm_cfg = wm.cfg();
    let latent = wm_cfg.latent_dim;
    let feed_embedding = if actor.cfg().input_dim == latent {
        false
    } else if actor.cfg().input_dim == latent + wm_cfg.task_embed_dim {
        true
    } else {
        return Err(PwmError::Shape(format!(
            "actor input dim {} matches neither the latent ({latent}) nor latent+embedding ({})",
            actor.cfg().input_dim,
            latent + wm_cfg.task_embed_dim
        )));
    };
    if env.obs_dim() > wm_cfg.obs_dim || env.action_dim() > wm_cfg.act_dim {
        return Err(PwmError::Shape(format!(
            "env dims ({}, {}) exceed model dims ({}, {})",
            env.obs_dim(),
            env.action_dim(),
            wm_cfg.obs_dim,
            wm_cfg.act_dim
        )));
    }
    let embed_row = feed_embedding.then(|| wm.task_embedding_row(task).map(<[f32]>::to_vec));
    let embed_row = match embed_row {
        Some(row) => Some(row?),
        None => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut returns = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut state = env.sample_init(&mut rng);
        let mut ep_return = 0.0f32;
        for _ in 0..env.episode_len() {
            let mut obs = env.obs(&state);
            obs.resize(wm_cfg.obs_dim, 0.0);
            let z = wm.encode_plain(&Tensor::new([1, wm_cfg.obs_dim], obs), &[task])?;
            let mut input = z.data().to_vec();
            if let Some(row) = &embed_row {
                input.extend_from_slice(row);
            }
            let a = actor.act_plain(&Tensor::new([1, actor.cfg().input_dim], input));
            let env_action = &a.data()[..env.action_dim()];
            ep_return += env.reward(&state, env_action);
            state = env.step(&state, env_action);
        }
        returns.push(ep_return);
    }
    let mean_return = returns.iter().sum::<f32>() / episodes.max(1) as f32;
    Ok(EvalReport { returns, mean_return })
}

/// Episode returns from one evaluation run.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub returns: Vec<f32>,
    pub mean_return: f32,
}

/// How policies are extracted from a multi-task world model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MultitaskMode {
    /// One actor per task, each trained on its own task's start states.
    PerTask,
    /// Ablation: a single actor over `[z, task_embedding]` inputs trained on
    /// mixed-task batches.
    SingleShared,
}

/// Extraction results for all tasks of a registry.
pub struct MultitaskArtifacts {
    pub mode: MultitaskMode,
    /// One entry per task for [`MultitaskMode::PerTask`], a single entry for
    /// [`MultitaskMode::SingleShared`].
    pub policies: Vec<PolicyArtifacts>,
}

/// Extracts policies for every registry task from one frozen multi-task
/// world model. Errors if the dataset lacks episodes for any task; asserts
/// the model (embeddings included) is hash-identical afterwards.
pub fn multitask_extract(
    wm: &WorldModel,
    data: &Dataset,
    registry: &TaskRegistry,
    cfg: &PwmConfig,
    steps: usize,
    seed: u64,
    mode: MultitaskMode,
) -> Result<MultitaskArtifacts> {
    let wm_hash = wm.param_hash();
    let num_tasks = wm.cfg().num_tasks;
    if registry.num_tasks() != num_tasks {
        return Err(PwmError::Shape(format!(
            "registry has {} tasks but the model expects {num_tasks}",
            registry.num_tasks()
        )));
    }
    for t in 0..num_tasks {
        if !data.episodes.iter().any(|e| e.task == t) {
            return Err(PwmError::UnknownTask(format!(
                "dataset has no episodes for task {t} ({})",
                registry.spec(t)?.name
            )));
        }
    }

    let mut policies = Vec::new();
    match mode {
        MultitaskMode::PerTask => {
            for t in 0..num_tasks {
                let task_seed = seed.wrapping_add(t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
                let env = registry.env(t)?;
                policies.push(pwm_train_policy(wm, data, env, t, cfg, steps, task_seed)?);
            }
        }
        MultitaskMode::SingleShared => {
            let batch = cfg.batch;
            let eval_episodes = cfg.eval_episodes;
            let eval_seed = seed ^ 0xE7A1;
            let mut evaluator = |_step: usize, actor: &Actor| -> Result<f32> {
                let mut acc = 0.0f32;
                for t in 0..num_tasks {
                    acc += eval_policy(registry.env(t)?, wm, actor, t, eval_episodes, eval_seed)?
                        .mean_return;
                }
                Ok(acc / num_tasks as f32)
            };
            policies.push(run_policy_training(
                wm,
                cfg,
                steps,
                seed,
                true,
                &mut |_, rng| data.sample_obs(rng, batch, None),
                Some(&mut evaluator),
            )?);
        }
    }
    assert_eq!(wm.param_hash(), wm_hash, "multi-task extraction must not touch the model");
    Ok(MultitaskArtifacts { mode, policies })
}
