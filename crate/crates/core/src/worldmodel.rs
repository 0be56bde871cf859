//! The regularized latent world model: encoder `E`, latent dynamics `F`,
//! discrete reward head `R`, and a learnable task-embedding table.
//!
//! All three heads condition on the task embedding; the encoder maps padded
//! observations into the latent space, the dynamics roll latents forward
//! autoregressively, and the reward head emits logits over a symlog two-hot
//! grid. The training loss matches latents against stop-gradiented encoder
//! targets and reward logits against two-hot targets, discounted over the
//! rollout horizon.

use std::collections::VecDeque;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::dataset::{Dataset, TrajBatch};
use crate::envs::DiffEnv;
use crate::nn::{Activation, Adam, AdamConfig, Mlp, MlpSpec, TwoHotCodec};
use crate::{PwmError, Result};

/// The regularization ladder: each rung adds one smoothing mechanism.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WmRegularization {
    /// Plain ReLU MLPs, no LayerNorm, unconstrained latents.
    Relu,
    /// Mish activations with LayerNorm, unconstrained latents.
    Mish,
    /// Mish + LayerNorm hidden stacks with SimNorm-projected latents.
    MishSimNorm,
}

impl WmRegularization {
    fn hidden_act(self) -> Activation {
        match self {
            WmRegularization::Relu => Activation::Relu,
            _ => Activation::Mish,
        }
    }

    fn layer_norm(self) -> bool {
        !matches!(self, WmRegularization::Relu)
    }

    fn latent_act(self, group: usize) -> Activation {
        match self {
            WmRegularization::MishSimNorm => Activation::SimNorm(group),
            _ => Activation::Identity,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            WmRegularization::Relu => "relu",
            WmRegularization::Mish => "mish",
            WmRegularization::MishSimNorm => "mish-simnorm",
        }
    }
}

/// Architecture and training hyperparameters for [`WorldModel`].
#[derive(Clone, Debug)]
pub struct WorldModelConfig {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub num_tasks: usize,
    pub latent_dim: usize,
    pub enc_hidden: Vec<usize>,
    pub dyn_hidden: Vec<usize>,
    pub rew_hidden: Vec<usize>,
    pub task_embed_dim: usize,
    /// SimNorm group size; must divide `latent_dim`.
    pub simnorm_group: usize,
    pub regularization: WmRegularization,
    pub num_bins: usize,
    pub vmin: f32,
    pub vmax: f32,
    /// Training rollout horizon.
    pub horizon: usize,
    /// Per-step discount inside the model loss.
    pub gamma: f32,
    pub lr: f32,
    pub grad_clip: f32,
    pub batch: usize,
}

impl WorldModelConfig {
    /// Desk-scale defaults: small enough to train in seconds on one core.
    pub fn desk(obs_dim: usize, act_dim: usize, num_tasks: usize) -> Self {
        WorldModelConfig {
            obs_dim,
            act_dim,
            num_tasks,
            latent_dim: 32,
            enc_hidden: vec![64],
            dyn_hidden: vec![64],
            rew_hidden: vec![64],
            task_embed_dim: 8,
            simnorm_group: 8,
            regularization: WmRegularization::MishSimNorm,
            num_bins: 101,
            vmin: -10.0,
            vmax: 10.0,
            horizon: 16,
            gamma: 0.99,
            lr: 3e-4,
            grad_clip: 20.0,
            batch: 64,
        }
    }

    /// Full-size architecture (latent 768, hidden 1792, task embedding 96).
    /// Construction and shape checks only; far too large to train here.
    pub fn paper_48m_shape(obs_dim: usize, act_dim: usize, num_tasks: usize) -> Self {
        WorldModelConfig {
            latent_dim: 768,
            enc_hidden: vec![1792, 1792, 1792],
            dyn_hidden: vec![1792, 1792],
            rew_hidden: vec![1792, 1792],
            task_embed_dim: 96,
            batch: 1024,
            ..Self::desk(obs_dim, act_dim, num_tasks)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim % self.simnorm_group != 0 {
            return Err(PwmError::Shape(format!(
                "latent dim {} not divisible by simnorm group {}",
                self.latent_dim, self.simnorm_group
            )));
        }
        if self.num_tasks == 0 {
            return Err(PwmError::Shape("world model needs at least one task".into()));
        }
        Ok(())
    }

    fn encoder_spec(&self) -> MlpSpec {
        MlpSpec::new(self.obs_dim + self.task_embed_dim, self.enc_hidden.clone(), self.latent_dim)
            .hidden_act(self.regularization.hidden_act())
            .layer_norm(self.regularization.layer_norm())
            .output_act(self.regularization.latent_act(self.simnorm_group))
    }

    fn dynamics_spec(&self) -> MlpSpec {
        MlpSpec::new(
            self.latent_dim + self.act_dim + self.task_embed_dim,
            self.dyn_hidden.clone(),
            self.latent_dim,
        )
        .hidden_act(self.regularization.hidden_act())
        .layer_norm(self.regularization.layer_norm())
        .output_act(self.regularization.latent_act(self.simnorm_group))
    }

    fn reward_spec(&self) -> MlpSpec {
        MlpSpec::new(
            self.latent_dim + self.act_dim + self.task_embed_dim,
            self.rew_hidden.clone(),
            self.num_bins,
        )
        .hidden_act(self.regularization.hidden_act())
        .layer_norm(self.regularization.layer_norm())
    }
}

/// Encoder + dynamics + reward head + task embeddings, with their codec.
#[derive(Clone)]
pub struct WorldModel {
    cfg: WorldModelConfig,
    encoder: Mlp,
    dynamics: Mlp,
    reward: Mlp,
    task_embed: Tensor<f32>,
    codec: TwoHotCodec,
}

impl WorldModel {
    pub fn init(cfg: WorldModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let encoder = Mlp::init(cfg.encoder_spec(), rng);
        let dynamics = Mlp::init(cfg.dynamics_spec(), rng);
        let reward = Mlp::init(cfg.reward_spec(), rng);
        let bound = 1.0 / (cfg.task_embed_dim as f32).sqrt();
        let embed: Vec<f32> = (0..cfg.num_tasks * cfg.task_embed_dim)
            .map(|_| (rng.gen::<f32>() * 2.0 - 1.0) * bound)
            .collect();
        let task_embed = Tensor::new([cfg.num_tasks, cfg.task_embed_dim], embed);
        let codec = TwoHotCodec::new(cfg.num_bins, cfg.vmin, cfg.vmax);
        Ok(WorldModel { cfg, encoder, dynamics, reward, task_embed, codec })
    }

    pub fn cfg(&self) -> &WorldModelConfig {
        &self.cfg
    }

    pub fn codec(&self) -> &TwoHotCodec {
        &self.codec
    }

    /// All parameters: encoder, dynamics, reward head, then the embedding
    /// table.
    pub fn params(&self) -> Vec<&Tensor<f32>> {
        let mut out = self.encoder.params();
        out.extend(self.dynamics.params());
        out.extend(self.reward.params());
        out.push(&self.task_embed);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<f32>> {
        let mut out = self.encoder.params_mut();
        out.extend(self.dynamics.params_mut());
        out.extend(self.reward.params_mut());
        out.push(&mut self.task_embed);
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut out = self.encoder.param_names("enc");
        out.extend(self.dynamics.param_names("dyn"));
        out.extend(self.reward.param_names("rew"));
        out.push("task_embed".into());
        out
    }

    pub fn set_params(&mut self, tensors: &[Tensor<f32>]) -> Result<()> {
        let expected = self.params().len();
        if tensors.len() != expected {
            return Err(PwmError::Shape(format!(
                "world model: expected {expected} parameter tensors, got {}",
                tensors.len()
            )));
        }
        let n_enc = self.encoder.params().len();
        let n_dyn = self.dynamics.params().len();
        let n_rew = self.reward.params().len();
        self.encoder.set_params(&tensors[..n_enc])?;
        self.dynamics.set_params(&tensors[n_enc..n_enc + n_dyn])?;
        self.reward.set_params(&tensors[n_enc + n_dyn..n_enc + n_dyn + n_rew])?;
        let emb = &tensors[n_enc + n_dyn + n_rew];
        if emb.shape() != self.task_embed.shape() {
            return Err(PwmError::Shape(format!(
                "world model: embedding shape {:?} does not match {:?}",
                emb.shape(),
                self.task_embed.shape()
            )));
        }
        self.task_embed = emb.clone();
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// FNV-1a over all parameter bytes; used to assert the model stayed
    /// frozen across policy extraction.
    pub fn param_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in self.params() {
            for &v in p.data() {
                for b in v.to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    /// The learned embedding row for one task.
    pub fn task_embedding_row(&self, task: usize) -> Result<&[f32]> {
        if task >= self.cfg.num_tasks {
            return Err(PwmError::UnknownTask(format!(
                "task id {task} out of range (model has {} tasks)",
                self.cfg.num_tasks
            )));
        }
        let d = self.cfg.task_embed_dim;
        Ok(&self.task_embed.data()[task * d..(task + 1) * d])
    }

    /// Records all heads on `tape` (trainable or frozen) for graph building.
    pub fn stage(&self, tape: &mut Tape<f32>, trainable: bool) -> StagedWorldModel {
        let embed = if trainable {
            tape.leaf(self.task_embed.clone())
        } else {
            tape.constant(self.task_embed.clone())
        };
        StagedWorldModel {
            encoder: self.encoder.stage(tape, trainable),
            dynamics: self.dynamics.stage(tape, trainable),
            reward: self.reward.stage(tape, trainable),
            embed,
            num_tasks: self.cfg.num_tasks,
        }
    }

    // ---- plain (gradient-free) helpers ----

    /// Encodes a `[B, obs_dim]` batch without gradient tracking.
    pub fn encode_plain(&self, obs: &Tensor<f32>, tasks: &[usize]) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let staged = self.stage(&mut tape, false);
        let o = tape.constant(obs.clone());
        let e = staged.embed_for(&mut tape, tasks)?;
        let z = staged.encode(&mut tape, o, e);
        Ok(tape.value(z).clone())
    }

    /// One latent dynamics step without gradient tracking.
    pub fn step_plain(
        &self,
        z: &Tensor<f32>,
        action: &Tensor<f32>,
        tasks: &[usize],
    ) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let staged = self.stage(&mut tape, false);
        let zv = tape.constant(z.clone());
        let av = tape.constant(action.clone());
        let e = staged.embed_for(&mut tape, tasks)?;
        let z1 = staged.step(&mut tape, zv, av, e);
        Ok(tape.value(z1).clone())
    }

    /// Real-scale reward prediction without gradient tracking.
    pub fn reward_eval_plain(
        &self,
        z: &Tensor<f32>,
        action: &Tensor<f32>,
        tasks: &[usize],
    ) -> Result<Vec<f32>> {
        let mut tape = Tape::new();
        let staged = self.stage(&mut tape, false);
        let zv = tape.constant(z.clone());
        let av = tape.constant(action.clone());
        let e = staged.embed_for(&mut tape, tasks)?;
        let logits = staged.reward_logits(&mut tape, zv, av, e);
        Ok(self.codec.decode_eval(tape.value(logits)))
    }

    /// Mean squared 1-step latent consistency error
    /// `‖F(E(s_t), a_t) − E(s_{t+1})‖² / latent_dim` over a batch, using the
    /// first transition of each window.
    pub fn one_step_consistency_error(&self, batch: &TrajBatch) -> Result<f32> {
        let z0 = self.encode_plain(&batch.obs_t(0), &batch.tasks)?;
        let z1_pred = self.step_plain(&z0, &batch.act_t(0), &batch.tasks)?;
        let z1 = self.encode_plain(&batch.obs_t(1), &batch.tasks)?;
        let n = z1.numel() as f32;
        let err: f32 = z1_pred
            .data()
            .iter()
            .zip(z1.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        Ok(err / n)
    }

    /// The training loss on `tape` for one window batch: per-step discounted
    /// latent-consistency toward stop-gradiented encoder targets plus reward
    /// cross-entropy, mean over batch, summed over the horizon and divided by
    /// it.
    ///
    /// Targets are computed off-tape with the current parameters, which is
    /// the stop-gradient by construction: no gradient path exists from the
    /// targets back into the encoder.
    pub fn loss_on_tape(
        &self,
        tape: &mut Tape<f32>,
        staged: &StagedWorldModel,
        batch: &TrajBatch,
    ) -> Result<(Var, WmLossParts)> {
        let cfg = &self.cfg;
        if batch.horizon != cfg.horizon {
            return Err(PwmError::Shape(format!(
                "wm loss: batch horizon {} does not match configured horizon {}",
                batch.horizon, cfg.horizon
            )));
        }
        if batch.obs_dim != cfg.obs_dim || batch.act_dim != cfg.act_dim {
            return Err(PwmError::Shape(format!(
                "wm loss: batch dims ({}, {}) do not match model dims ({}, {})",
                batch.obs_dim, batch.act_dim, cfg.obs_dim, cfg.act_dim
            )));
        }
        let (b, h) = (batch.batch, batch.horizon);

        // Stop-gradiented encoder targets for t = 1..=H, one batched pass.
        let mut next_tasks = Vec::with_capacity(b * h);
        for _ in 0..h {
            next_tasks.extend_from_slice(&batch.tasks);
        }
        let targets = self.encode_plain(&batch.next_obs_time_major(), &next_tasks)?;
        let d = cfg.latent_dim;

        let emb = staged.embed_for(tape, &batch.tasks)?;
        let o0 = tape.constant(batch.obs_t(0));
        let mut z = staged.encode(tape, o0, emb);

        let mut cons_sum: Option<Var> = None;
        let mut ce_sum: Option<Var> = None;
        for t in 0..h {
            let w = cfg.gamma.powi(t as i32);
            let a = tape.constant(batch.act_t(t));

            let logits = staged.reward_logits(tape, z, a, emb);
            let target_dist = tape.constant(self.codec.encode_batch(&batch.rew_t(t)));
            let ce = tape.ce_with_logits_last(logits, target_dist);

            z = staged.step(tape, z, a, emb);
            let rows = &targets.data()[t * b * d..(t + 1) * b * d];
            let zt = tape.constant(Tensor::new([b, d], rows.to_vec()));
            let diff = tape.sub(z, zt);
            let sq = tape.square(diff);
            let cons = tape.sum_last(sq);

            let cons_w = tape.scale(cons, w);
            let ce_w = tape.scale(ce, w);
            cons_sum = Some(match cons_sum {
                Some(acc) => tape.add(acc, cons_w),
                None => cons_w,
            });
            ce_sum = Some(match ce_sum {
                Some(acc) => tape.add(acc, ce_w),
                None => ce_w,
            });
        }

        let inv_h = 1.0 / h as f32;
        let cons_mean = tape.mean(cons_sum.expect("horizon >= 1"));
        let ce_mean = tape.mean(ce_sum.expect("horizon >= 1"));
        let cons_loss = tape.scale(cons_mean, inv_h);
        let ce_loss = tape.scale(ce_mean, inv_h);
        let total = tape.add(cons_loss, ce_loss);
        let parts = WmLossParts {
            total: tape.value(total).data()[0],
            consistency: tape.value(cons_loss).data()[0],
            reward_ce: tape.value(ce_loss).data()[0],
        };
        Ok((total, parts))
    }
}

/// Scalar components of one loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct WmLossParts {
    pub total: f32,
    pub consistency: f32,
    pub reward_ce: f32,
}

/// Tape-resident world model: staged heads plus the embedding table handle.
pub struct StagedWorldModel {
    encoder: crate::nn::StagedMlp,
    dynamics: crate::nn::StagedMlp,
    reward: crate::nn::StagedMlp,
    embed: Var,
    num_tasks: usize,
}

impl StagedWorldModel {
    /// Embedding rows for a batch of task ids, via one-hot matmul so that
    /// gradients flow into exactly the selected rows.
    pub fn embed_for(&self, tape: &mut Tape<f32>, tasks: &[usize]) -> Result<Var> {
        let mut onehot = vec![0.0f32; tasks.len() * self.num_tasks];
        for (i, &t) in tasks.iter().enumerate() {
            if t >= self.num_tasks {
                return Err(PwmError::UnknownTask(format!(
                    "task id {t} out of range (registry has {} tasks)",
                    self.num_tasks
                )));
            }
            onehot[i * self.num_tasks + t] = 1.0;
        }
        let sel = tape.constant(Tensor::new([tasks.len(), self.num_tasks], onehot));
        Ok(tape.matmul(sel, self.embed))
    }

    /// `z = E(s, e)` for `[B, obs_dim]` observations.
    pub fn encode(&self, tape: &mut Tape<f32>, obs: Var, emb: Var) -> Var {
        let x = tape.concat_last(&[obs, emb]);
        self.encoder.forward(tape, x)
    }

    /// `z' = F(z, a, e)`.
    pub fn step(&self, tape: &mut Tape<f32>, z: Var, action: Var, emb: Var) -> Var {
        let x = tape.concat_last(&[z, action, emb]);
        self.dynamics.forward(tape, x)
    }

    /// Reward logits `R(z, a, e)`, shape `[B, num_bins]`.
    pub fn reward_logits(&self, tape: &mut Tape<f32>, z: Var, action: Var, emb: Var) -> Var {
        let x = tape.concat_last(&[z, action, emb]);
        self.reward.forward(tape, x)
    }

    /// Gradients for all parameters in [`WorldModel::params`] order.
    pub fn grads(&self, tape: &Tape<f32>) -> Vec<Tensor<f32>> {
        let mut out = self.encoder.grads(tape);
        out.extend(self.dynamics.grads(tape));
        out.extend(self.reward.grads(tape));
        out.push(tape.grad_or_zeros(self.embed));
        out
    }
}

/// One logged training step.
#[derive(Clone, Copy, Debug)]
pub struct WmTrainEntry {
    pub step: usize,
    pub total: f32,
    pub consistency: f32,
    pub reward_ce: f32,
    pub grad_norm: f32,
}

/// Per-step loss trace of a training run.
#[derive(Clone, Debug, Default)]
pub struct WmTrainLog {
    pub entries: Vec<WmTrainEntry>,
}

impl WmTrainLog {
    /// Mean total loss over the first `k` steps.
    pub fn mean_total_first(&self, k: usize) -> f32 {
        mean_of(self.entries.iter().take(k).map(|e| e.total))
    }

    /// Mean total loss over the last `k` steps.
    pub fn mean_total_last(&self, k: usize) -> f32 {
        let skip = self.entries.len().saturating_sub(k);
        mean_of(self.entries.iter().skip(skip).map(|e| e.total))
    }

    /// Mean consistency loss over the last `k` steps.
    pub fn mean_consistency_last(&self, k: usize) -> f32 {
        let skip = self.entries.len().saturating_sub(k);
        mean_of(self.entries.iter().skip(skip).map(|e| e.consistency))
    }
}

fn mean_of(it: impl Iterator<Item = f32>) -> f32 {
    let (mut s, mut n) = (0.0f64, 0usize);
    for v in it {
        s += v as f64;
        n += 1;
    }
    if n == 0 {
        f32::NAN
    } else {
        (s / n as f64) as f32
    }
}

/// Trains the model on offline windows with Adam under global-norm clipping.
///
/// A non-finite loss aborts with an error before the offending update is
/// applied, so the parameters retain their last good values. `steps = 0`
/// leaves the model untouched.
pub fn wm_train(
    model: &mut WorldModel,
    data: &Dataset,
    steps: usize,
    seed: u64,
) -> Result<WmTrainLog> {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg_lr = model.cfg.lr;
    let cfg_clip = model.cfg.grad_clip;
    let (batch_size, horizon) = (model.cfg.batch, model.cfg.horizon);
    let mut adam = Adam::new(AdamConfig::new(cfg_lr).grad_clip(cfg_clip), &model.params());
    let mut log = WmTrainLog::default();
    let mut tape = Tape::new();

    for step in 0..steps {
        let batch = data.sample_windows(&mut rng, batch_size, horizon, None)?;
        tape.reset();
        let staged = model.stage(&mut tape, true);
        let (loss, parts) = model.loss_on_tape(&mut tape, &staged, &batch)?;
        if !parts.total.is_finite() {
            return Err(PwmError::Numerical(format!(
                "world-model loss became non-finite at step {step}; parameters retain their last good values"
            )));
        }
        tape.backward(loss).map_err(|e| PwmError::Numerical(e.to_string()))?;
        let grads = staged.grads(&tape);
        let mut params = model.params_mut();
        let report = adam.step(&mut params, &grads);
        log.entries.push(WmTrainEntry {
            step,
            total: parts.total,
            consistency: parts.consistency,
            reward_ce: parts.reward_ce,
            grad_norm: report.grad_norm,
        });
    }
    Ok(log)
}

/// FIFO transition buffer for online fine-tuning. Windows are sampled only
/// across contiguous runs of the same episode.
pub struct ReplayBuffer {
    capacity: usize,
    obs_dim: usize,
    act_dim: usize,
    entries: VecDeque<ReplayTransition>,
}

struct ReplayTransition {
    ep: u64,
    t: u32,
    task: usize,
    obs: Vec<f32>,
    act: Vec<f32>,
    rew: f32,
    next_obs: Vec<f32>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, obs_dim: usize, act_dim: usize) -> Self {
        assert!(capacity > 0, "replay buffer needs capacity >= 1");
        ReplayBuffer { capacity, obs_dim, act_dim, entries: VecDeque::new() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Inserts one transition, evicting the oldest when full.
    #[allow(clippy::too_many_arguments)]
    pub fn push(
        &mut self,
        ep: u64,
        t: u32,
        task: usize,
        obs: Vec<f32>,
        act: Vec<f32>,
        rew: f32,
        next_obs: Vec<f32>,
    ) {
        assert_eq!(obs.len(), self.obs_dim, "replay obs dim");
        assert_eq!(act.len(), self.act_dim, "replay action dim");
        assert_eq!(next_obs.len(), self.obs_dim, "replay next obs dim");
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(ReplayTransition { ep, t, task, obs, act, rew, next_obs });
    }

    /// Start indices of in-episode contiguous windows of `horizon` steps.
    fn valid_starts(&self, horizon: usize) -> Vec<usize> {
        let n = self.entries.len();
        if horizon == 0 || n < horizon {
            return Vec::new();
        }
        let mut out = Vec::new();
        'outer: for i in 0..=n - horizon {
            let first = &self.entries[i];
            for k in 1..horizon {
                let e = &self.entries[i + k];
                if e.ep != first.ep || e.t != first.t + k as u32 {
                    continue 'outer;
                }
            }
            out.push(i);
        }
        out
    }

    /// Samples window batches uniformly over valid contiguous windows.
    pub fn sample_windows(
        &self,
        rng: &mut ChaCha8Rng,
        batch: usize,
        horizon: usize,
    ) -> Result<TrajBatch> {
        let starts = self.valid_starts(horizon);
        if starts.is_empty() {
            return Err(PwmError::Shape(format!(
                "replay buffer has no contiguous windows of {horizon} steps"
            )));
        }
        let (od, ad) = (self.obs_dim, self.act_dim);
        let mut obs = Vec::with_capacity(batch * (horizon + 1) * od);
        let mut act = Vec::with_capacity(batch * horizon * ad);
        let mut rew = Vec::with_capacity(batch * horizon);
        let mut tasks = Vec::with_capacity(batch);
        for _ in 0..batch {
            let s = starts[rng.gen_range(0..starts.len())];
            for k in 0..horizon {
                let e = &self.entries[s + k];
                obs.extend_from_slice(&e.obs);
                act.extend_from_slice(&e.act);
                rew.push(e.rew);
            }
            obs.extend_from_slice(&self.entries[s + horizon - 1].next_obs);
            tasks.push(self.entries[s].task);
        }
        Ok(TrajBatch::from_raw(batch, horizon, od, ad, obs, act, rew, tasks))
    }
}

/// Rolls episodes with `policy` in the real environment, pushes transitions
/// into `replay`, and interleaves gradient updates on replay windows.
///
/// Observations and actions are zero-padded to the model dims; `policy` sees
/// the padded observation and must return a padded action in the model's
/// normalized `[-1, 1]` space. The environment consumes its own leading
/// action dims (applying its internal torque limit); the replay stores the
/// normalized action.
#[allow(clippy::too_many_arguments)]
pub fn wm_finetune_online(
    model: &mut WorldModel,
    env: &dyn DiffEnv,
    task_id: usize,
    policy: &mut dyn FnMut(&[f32]) -> Vec<f32>,
    replay: &mut ReplayBuffer,
    episodes: usize,
    updates_per_episode: usize,
    seed: u64,
) -> Result<WmTrainLog> {
    use rand::SeedableRng;
    if task_id >= model.cfg.num_tasks {
        return Err(PwmError::UnknownTask(format!("task id {task_id} out of range")));
    }
    let (od, ad) = (model.cfg.obs_dim, model.cfg.act_dim);
    if env.obs_dim() > od || env.action_dim() > ad {
        return Err(PwmError::Shape(format!(
            "env dims ({}, {}) exceed model dims ({od}, {ad})",
            env.obs_dim(),
            env.action_dim()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam =
        Adam::new(AdamConfig::new(model.cfg.lr).grad_clip(model.cfg.grad_clip), &model.params());
    let mut log = WmTrainLog::default();
    let mut tape = Tape::new();
    let horizon = model.cfg.horizon;

    for ep in 0..episodes {
        // One on-policy episode into the replay buffer.
        let mut state = env.sample_init(&mut rng);
        let mut obs = pad_to(&env.obs(&state), od);
        for t in 0..env.episode_len() {
            let action = policy(&obs);
            assert_eq!(action.len(), ad, "policy must return model-dim actions");
            let env_action = &action[..env.action_dim()];
            let reward = env.reward(&state, env_action);
            state = env.step(&state, env_action);
            let next_obs = pad_to(&env.obs(&state), od);
            replay.push(
                ep as u64,
                t as u32,
                task_id,
                obs.clone(),
                action,
                reward,
                next_obs.clone(),
            );
            obs = next_obs;
        }

        // Gradient updates on replay windows.
        for k in 0..updates_per_episode {
            let batch = match replay.sample_windows(&mut rng, model.cfg.batch, horizon) {
                Ok(b) => b,
                // Not enough contiguous data yet; keep collecting.
                Err(PwmError::Shape(_)) => break,
                Err(e) => return Err(e),
            };
            tape.reset();
            let staged = model.stage(&mut tape, true);
            let (loss, parts) = model.loss_on_tape(&mut tape, &staged, &batch)?;
            if !parts.total.is_finite() {
                return Err(PwmError::Numerical(format!(
                    "fine-tune loss became non-finite (episode {ep}, update {k})"
                )));
            }
            tape.backward(loss).map_err(|e| PwmError::Numerical(e.to_string()))?;
            let grads = staged.grads(&tape);
            let mut params = model.params_mut();
            let report = adam.step(&mut params, &grads);
            log.entries.push(WmTrainEntry {
                step: log.entries.len(),
                total: parts.total,
                consistency: parts.consistency,
                reward_ce: parts.reward_ce,
                grad_norm: report.grad_norm,
            });
        }
    }
    Ok(log)
}

fn pad_to(v: &[f32], dim: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(dim);
    out.extend_from_slice(v);
    out.resize(dim, 0.0);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;
    use crate::dataset::Episode;
    use crate::envs::{Pendulum, PendulumTask};
    use rand::SeedableRng;

    /// Small config that still exercises SimNorm grouping.
    fn tiny_cfg() -> WorldModelConfig {
        WorldModelConfig {
            latent_dim: 16,
            enc_hidden: vec![32],
            dyn_hidden: vec![32],
            rew_hidden: vec![32],
            task_embed_dim: 4,
            horizon: 4,
            batch: 16,
            lr: 3e-3,
            ..WorldModelConfig::desk(3, 1, 2)
        }
    }

    fn tiny_model(seed: u64) -> WorldModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        WorldModel::init(tiny_cfg(), &mut rng).unwrap()
    }

    /// Rolls the swing-up pendulum with uniform random torque.
    fn pendulum_dataset(episodes: usize, seed: u64) -> Dataset {
        let env = Pendulum::new(PendulumTask::Swingup);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ds = Dataset::new(3, 1, vec!["pendulum-swingup".into()], "random policy".into());
        for _ in 0..episodes {
            let mut state = env.sample_init(&mut rng);
            let mut obs = env.obs(&state).to_vec();
            let (mut o, mut a, mut r) = (Vec::new(), Vec::new(), Vec::new());
            o.extend_from_slice(&obs);
            for _ in 0..env.episode_len() {
                let act = vec![rng.gen::<f32>() * 2.0 - 1.0];
                r.push(env.reward(&state, &act));
                state = env.step(&state, &act);
                obs = env.obs(&state).to_vec();
                a.extend_from_slice(&act);
                o.extend_from_slice(&obs);
            }
            ds.push(Episode::new(0, 3, 1, o, a, r));
        }
        ds
    }

    fn assert_simplex(z: &[f32], group: usize, tol: f32) {
        for g in z.chunks_exact(group) {
            let s: f32 = g.iter().sum();
            assert!((s - 1.0).abs() <= tol, "group sums to {s}");
            assert!(g.iter().all(|&p| p >= 0.0), "negative simplex coordinate");
        }
    }

    #[test]
    fn encoded_latents_live_on_the_simplex() {
        let model = tiny_model(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // Arbitrary finite inputs, including large magnitudes.
        let obs = Tensor::new([8, 3], (0..24).map(|_| (rng.gen::<f32>() - 0.5) * 2e3).collect());
        let z = model.encode_plain(&obs, &[0, 1, 0, 1, 0, 1, 0, 1]).unwrap();
        assert_eq!(z.shape(), &[8, 16]);
        assert_simplex(z.data(), 8, 1e-5);
    }

    #[test]
    fn dynamics_preserve_the_simplex_and_stay_finite_over_16_steps() {
        let model = tiny_model(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let obs = Tensor::new([4, 3], (0..12).map(|_| rng.gen::<f32>() * 2.0 - 1.0).collect());
        let mut z = model.encode_plain(&obs, &[0; 4]).unwrap();
        for _ in 0..16 {
            let a = Tensor::new([4, 1], (0..4).map(|_| rng.gen::<f32>() * 2.0 - 1.0).collect());
            z = model.step_plain(&z, &a, &[0; 4]).unwrap();
            assert!(z.data().iter().all(|v| v.is_finite()));
            assert_simplex(z.data(), 8, 1e-5);
        }
    }

    #[test]
    fn different_task_embeddings_give_different_latents() {
        let model = tiny_model(5);
        let obs = Tensor::new([1, 3], vec![0.3, -0.2, 0.9]);
        let z0 = model.encode_plain(&obs, &[0]).unwrap();
        let z1 = model.encode_plain(&obs, &[1]).unwrap();
        let max_diff = z0
            .data()
            .iter()
            .zip(z1.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_diff > 1e-6, "task conditioning had no effect (diff {max_diff})");
    }

    #[test]
    fn unknown_task_id_is_an_error() {
        let model = tiny_model(6);
        let obs = Tensor::new([1, 3], vec![0.0; 3]);
        let err = model.encode_plain(&obs, &[7]).unwrap_err();
        assert!(matches!(err, PwmError::UnknownTask(_)), "got {err:?}");
    }

    #[test]
    fn encode_gradient_matches_finite_differences() {
        let model = tiny_model(7);
        let f = |tape: &mut Tape<f32>, ins: &[Var]| {
            let staged = model.stage(tape, false);
            let emb = staged.embed_for(tape, &[0, 1]).unwrap();
            let z = staged.encode(tape, ins[0], emb);
            let sq = tape.square(z);
            tape.sum(sq)
        };
        let obs = Tensor::new([2, 3], vec![0.4, -0.7, 0.1, 0.9, 0.2, -0.3]);
        let report = gradcheck(&f, &[obs], 1e-2);
        assert!(report.max_err < 1e-3, "encode gradcheck err {}", report.max_err);
    }

    #[test]
    fn bptt_through_16_latent_steps_matches_finite_differences() {
        let model = tiny_model(8);
        let f = |tape: &mut Tape<f32>, ins: &[Var]| {
            let staged = model.stage(tape, false);
            let emb = staged.embed_for(tape, &[0]).unwrap();
            let mut z = staged.encode(tape, ins[0], emb);
            let mut total: Option<Var> = None;
            for a in &ins[1..] {
                let logits = staged.reward_logits(tape, z, *a, emb);
                let r = model.codec.decode_pseudo(tape, logits);
                let r = tape.sum(r);
                total = Some(match total {
                    Some(acc) => tape.add(acc, r),
                    None => r,
                });
                z = staged.step(tape, z, *a, emb);
            }
            total.unwrap()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut inputs = vec![Tensor::new([1, 3], vec![0.2, -0.4, 0.6])];
        for _ in 0..16 {
            inputs.push(Tensor::new([1, 1], vec![rng.gen::<f32>() * 1.6 - 0.8]));
        }
        let report = gradcheck(&f, &inputs, 1e-2);
        assert!(report.max_err < 1e-2, "bptt gradcheck err {}", report.max_err);
    }

    #[test]
    fn reward_head_matches_bin_count_and_softmax_is_a_distribution() {
        let model = tiny_model(10);
        assert_eq!(model.cfg.num_bins, 101);
        let obs = Tensor::new([2, 3], vec![0.1; 6]);
        let z = model.encode_plain(&obs, &[0, 1]).unwrap();
        let a = Tensor::new([2, 1], vec![0.5, -0.5]);
        let mut tape = Tape::new();
        let staged = model.stage(&mut tape, false);
        let zv = tape.constant(z);
        let av = tape.constant(a);
        let emb = staged.embed_for(&mut tape, &[0, 1]).unwrap();
        let logits = staged.reward_logits(&mut tape, zv, av, emb);
        assert_eq!(tape.value(logits).shape(), &[2, 101]);
        let probs = tape.softmax_last(logits);
        for row in tape.value(probs).data().chunks_exact(101) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn cross_entropy_floor_is_the_target_entropy() {
        // With logits = ln(target), softmax reproduces the target exactly, so
        // the CE equals the two-hot target's own entropy: the irreducible
        // floor that a perfectly fitted reward head attains.
        let codec = TwoHotCodec::new(101, -10.0, 10.0);
        let target = codec.encode(1.3);
        let entropy: f32 =
            -target.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f32>();
        let logits: Vec<f32> = target.iter().map(|&p| (p + 1e-30).ln()).collect();
        let mut tape = Tape::<f32>::new();
        let l = tape.constant(Tensor::new([1, 101], logits));
        let t = tape.constant(Tensor::new([1, 101], target));
        let ce = tape.ce_with_logits_last(l, t);
        let got = tape.value(ce).data()[0];
        assert!((got - entropy).abs() < 1e-4, "ce {got} vs floor {entropy}");
        assert!(got >= 0.0);
    }

    #[test]
    fn overfitting_a_constant_reward_recovers_it_within_bin_tolerance() {
        let mut cfg = tiny_cfg();
        cfg.num_tasks = 1;
        cfg.lr = 1e-2;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut model = WorldModel::init(cfg, &mut rng).unwrap();

        // Synthetic episodes: smooth random walks with reward pinned at 1.
        let mut ds = Dataset::new(3, 1, vec!["const".into()], "synthetic".into());
        for _ in 0..4 {
            let len = 20;
            let mut o = vec![rng.gen::<f32>(), rng.gen::<f32>(), rng.gen::<f32>()];
            let mut obs = o.clone();
            let (mut acts, mut rews) = (Vec::new(), Vec::new());
            for _ in 0..len {
                let a = rng.gen::<f32>() * 2.0 - 1.0;
                for x in o.iter_mut() {
                    *x += 0.05 * a;
                }
                obs.extend_from_slice(&o);
                acts.push(a);
                rews.push(1.0);
            }
            ds.push(Episode::new(0, 3, 1, obs, acts, rews));
        }
        wm_train(&mut model, &ds, 400, 12).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let obs = Tensor::new([8, 3], (0..24).map(|_| rng.gen::<f32>()).collect());
        let z = model.encode_plain(&obs, &[0; 8]).unwrap();
        let a = Tensor::new([8, 1], (0..8).map(|_| rng.gen::<f32>() * 2.0 - 1.0).collect());
        let rewards = model.reward_eval_plain(&z, &a, &[0; 8]).unwrap();
        // Half a bin around symlog(1), mapped back to real scale.
        let half_bin = 0.5 * 20.0 / 100.0;
        let tol = (crate::nn::symexp(crate::nn::symlog(1.0) + half_bin) - 1.0).abs();
        for r in rewards {
            assert!((r - 1.0).abs() <= tol, "decoded reward {r} off by more than {tol}");
        }
    }

    #[test]
    fn gamma_zero_keeps_only_the_first_step_term() {
        let mut cfg = tiny_cfg();
        cfg.gamma = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let model = WorldModel::init(cfg, &mut rng).unwrap();
        let ds = pendulum_dataset(1, 15);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let batch = ds.sample_windows(&mut rng, 8, 4, None).unwrap();

        let mut tape = Tape::new();
        let staged = model.stage(&mut tape, false);
        let (_, parts) = model.loss_on_tape(&mut tape, &staged, &batch).unwrap();

        // The same windows cut to a single step, evaluated by a model whose
        // configured horizon is 1. Only the horizon normalization differs.
        let mut cfg1 = tiny_cfg();
        cfg1.gamma = 0.0;
        cfg1.horizon = 1;
        let mut model1 = WorldModel::init(cfg1, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        let cloned: Vec<Tensor<f32>> = model.params().into_iter().cloned().collect();
        model1.set_params(&cloned).unwrap();
        let short = batch.truncate(1);
        let mut tape1 = Tape::new();
        let staged1 = model1.stage(&mut tape1, false);
        let (_, parts1) = model1.loss_on_tape(&mut tape1, &staged1, &short).unwrap();

        let scaled = parts.total * 4.0;
        assert!(
            (scaled - parts1.total).abs() <= 1e-5 * parts1.total.abs().max(1.0),
            "gamma=0 loss {scaled} (rescaled) vs single-step loss {}",
            parts1.total
        );
    }

    #[test]
    fn horizon_mismatch_is_a_shape_error() {
        let model = tiny_model(17);
        let ds = pendulum_dataset(1, 18);
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let batch = ds.sample_windows(&mut rng, 4, 3, None).unwrap();
        let mut tape = Tape::new();
        let staged = model.stage(&mut tape, false);
        let err = model.loss_on_tape(&mut tape, &staged, &batch).unwrap_err();
        assert!(matches!(err, PwmError::Shape(_)), "got {err:?}");
    }

    #[test]
    fn target_path_carries_no_gradient_into_the_encoder() {
        // The off-tape targets are stop-gradients by construction. Rebuild
        // the same loss with on-tape targets behind an explicit stop-gradient
        // op: values and encoder gradients must agree, which pins down that
        // the construction equals the explicit stop-gradient semantics.
        let model = tiny_model(20);
        let ds = pendulum_dataset(1, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let batch = ds.sample_windows(&mut rng, 6, 4, None).unwrap();

        let mut tape_a = Tape::new();
        let staged_a = model.stage(&mut tape_a, true);
        let (loss_a, parts_a) = model.loss_on_tape(&mut tape_a, &staged_a, &batch).unwrap();
        tape_a.backward(loss_a).unwrap();
        let grads_a = staged_a.grads(&tape_a);

        let mut tape_b = Tape::new();
        let staged_b = model.stage(&mut tape_b, true);
        let emb = staged_b.embed_for(&mut tape_b, &batch.tasks).unwrap();
        let o0 = tape_b.constant(batch.obs_t(0));
        let mut z = staged_b.encode(&mut tape_b, o0, emb);
        let mut total: Option<Var> = None;
        for t in 0..batch.horizon {
            let w = model.cfg.gamma.powi(t as i32);
            let a = tape_b.constant(batch.act_t(t));
            let logits = staged_b.reward_logits(&mut tape_b, z, a, emb);
            let dist = tape_b.constant(model.codec.encode_batch(&batch.rew_t(t)));
            let ce = tape_b.ce_with_logits_last(logits, dist);
            z = staged_b.step(&mut tape_b, z, a, emb);
            // On-tape target: encode the next observation, then cut the
            // gradient explicitly.
            let on = tape_b.constant(batch.obs_t(t + 1));
            let enc = staged_b.encode(&mut tape_b, on, emb);
            let target = tape_b.stop_gradient(enc);
            let diff = tape_b.sub(z, target);
            let sq = tape_b.square(diff);
            let cons = tape_b.sum_last(sq);
            let sum = tape_b.add(cons, ce);
            let sum = tape_b.scale(sum, w);
            total = Some(match total {
                Some(acc) => tape_b.add(acc, sum),
                None => sum,
            });
        }
        let m = tape_b.mean(total.unwrap());
        let loss_b = tape_b.scale(m, 1.0 / batch.horizon as f32);
        tape_b.backward(loss_b).unwrap();
        let grads_b = staged_b.grads(&tape_b);

        let vb = tape_b.value(loss_b).data()[0];
        assert!(
            (parts_a.total - vb).abs() <= 1e-5 * vb.abs().max(1.0),
            "loss values diverge: {} vs {vb}",
            parts_a.total
        );
        for (ga, gb) in grads_a.iter().zip(&grads_b) {
            for (&a, &b) in ga.data().iter().zip(gb.data()) {
                assert!(
                    (a - b).abs() <= 1e-4 * a.abs().max(1.0),
                    "gradient mismatch: {a} vs {b}"
                );
            }
        }
    }

    #[test]
    fn embedding_gradients_touch_only_the_sampled_tasks() {
        let model = tiny_model(23);
        let ds = pendulum_dataset(1, 24);
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let batch = ds.sample_windows(&mut rng, 6, 4, None).unwrap();
        // All windows are task 0; task 1's embedding row must get zero grad.
        let mut tape = Tape::new();
        let staged = model.stage(&mut tape, true);
        let (loss, _) = model.loss_on_tape(&mut tape, &staged, &batch).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad_or_zeros(staged.embed);
        let d = model.cfg.task_embed_dim;
        assert!(g.data()[..d].iter().any(|&v| v != 0.0), "used row got no gradient");
        assert!(g.data()[d..].iter().all(|&v| v == 0.0), "unused row got gradient");
    }

    #[test]
    fn loss_decreases_over_100_steps_on_a_fixed_pendulum_dataset() {
        let mut model = tiny_model(26);
        // 5 episodes x 200 steps = 1k transitions.
        let ds = pendulum_dataset(5, 27);
        let log = wm_train(&mut model, &ds, 100, 28).unwrap();
        assert_eq!(log.entries.len(), 100);
        let first = log.mean_total_first(10);
        let last = log.mean_total_last(10);
        assert!(
            last < first,
            "loss did not decrease: first-10 mean {first}, last-10 mean {last}"
        );
    }

    #[test]
    fn zero_training_steps_leave_parameters_unchanged() {
        let mut model = tiny_model(29);
        let before = model.param_hash();
        let ds = pendulum_dataset(1, 30);
        let log = wm_train(&mut model, &ds, 0, 31).unwrap();
        assert!(log.entries.is_empty());
        assert_eq!(model.param_hash(), before);
    }

    #[test]
    fn non_finite_loss_aborts_and_keeps_parameters() {
        let mut model = tiny_model(32);
        // Poison one encoder weight: the NaN propagates through the forward
        // pass into the loss. (Overflow poisons do not work here; LayerNorm
        // renormalizes arbitrarily large activations back to finite values.)
        {
            let mut params = model.params_mut();
            params[0].data_mut()[0] = f32::NAN;
        }
        let before = model.param_hash();
        let ds = pendulum_dataset(1, 33);
        let err = wm_train(&mut model, &ds, 10, 34).unwrap_err();
        assert!(matches!(err, PwmError::Numerical(_)), "got {err:?}");
        assert_eq!(model.param_hash(), before, "parameters must retain last good values");
    }

    #[test]
    fn doubling_the_batch_converges_to_a_similar_consistency_loss() {
        let ds = pendulum_dataset(3, 35);
        let mut small = tiny_model(36);
        // Identical init; only the batch size differs.
        let mut cfg = tiny_cfg();
        cfg.batch = 32;
        let mut big = WorldModel::init(cfg, &mut ChaCha8Rng::seed_from_u64(36)).unwrap();
        let cloned: Vec<Tensor<f32>> = small.params().into_iter().cloned().collect();
        big.set_params(&cloned).unwrap();
        let log_small = wm_train(&mut small, &ds, 600, 37).unwrap();
        let log_big = wm_train(&mut big, &ds, 600, 37).unwrap();
        let a = log_small.mean_consistency_last(50);
        let b = log_big.mean_consistency_last(50);
        assert!(a.is_finite() && b.is_finite() && a > 0.0 && b > 0.0);
        let ratio = (a / b).max(b / a);
        assert!(ratio < 2.0, "batch doubling moved consistency loss by {ratio}x ({a} vs {b})");
    }

    #[test]
    fn replay_buffer_keeps_the_newest_1024_transitions() {
        let mut replay = ReplayBuffer::new(1024, 2, 1);
        for i in 0..2000u32 {
            replay.push(
                (i / 100) as u64,
                i % 100,
                0,
                vec![i as f32, 0.0],
                vec![0.0],
                0.0,
                vec![i as f32 + 1.0, 0.0],
            );
        }
        assert_eq!(replay.len(), 1024);
        // Oldest surviving transition is #976.
        assert_eq!(replay.entries.front().unwrap().obs[0], 976.0);
        assert_eq!(replay.entries.back().unwrap().obs[0], 1999.0);
    }

    #[test]
    fn replay_windows_never_span_episode_boundaries() {
        let mut replay = ReplayBuffer::new(64, 1, 1);
        // Two episodes of 6 steps each; obs encodes (episode, step).
        for ep in 0..2u64 {
            for t in 0..6u32 {
                let code = (ep * 100 + t as u64) as f32;
                replay.push(ep, t, 0, vec![code], vec![0.0], 0.0, vec![code + 1.0]);
            }
        }
        let starts = replay.valid_starts(4);
        // 3 starts per episode, none crossing the boundary at index 6.
        assert_eq!(starts, vec![0, 1, 2, 6, 7, 8]);
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let batch = replay.sample_windows(&mut rng, 16, 4).unwrap();
        for b in 0..16 {
            let first = batch.obs_t(0).data()[b];
            let last = batch.obs_t(3).data()[b];
            assert_eq!(last - first, 3.0, "window not contiguous within an episode");
        }
    }

    #[test]
    fn online_finetuning_improves_held_out_consistency() {
        let mut cfg = tiny_cfg();
        cfg.num_tasks = 1;
        cfg.lr = 3e-3;
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut model = WorldModel::init(cfg, &mut rng).unwrap();
        let env = Pendulum::new(PendulumTask::Swingup);

        // Held-out on-policy batch under the same zero-torque policy.
        let ds = pendulum_zero_policy_dataset(&env, 2, 42);
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let held_out = ds.sample_windows(&mut rng, 32, 4, None).unwrap();

        let before = model.one_step_consistency_error(&held_out).unwrap();
        let mut replay = ReplayBuffer::new(1024, 3, 1);
        let mut policy = |_obs: &[f32]| vec![0.0f32];
        wm_finetune_online(&mut model, &env, 0, &mut policy, &mut replay, 8, 25, 44).unwrap();
        let after = model.one_step_consistency_error(&held_out).unwrap();
        assert!(
            after < before,
            "fine-tuning did not improve held-out consistency: {before} -> {after}"
        );
    }

    fn pendulum_zero_policy_dataset(env: &Pendulum, episodes: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ds = Dataset::new(3, 1, vec!["pendulum-swingup".into()], "zero policy".into());
        for _ in 0..episodes {
            let mut state = env.sample_init(&mut rng);
            let mut o = env.obs(&state).to_vec();
            let (mut acts, mut rews) = (Vec::new(), Vec::new());
            for _ in 0..env.episode_len() {
                let act = vec![0.0f32];
                rews.push(env.reward(&state, &act));
                state = env.step(&state, &act);
                o.extend_from_slice(&env.obs(&state));
                acts.push(0.0);
            }
            ds.push(Episode::new(0, 3, 1, o, acts, rews));
        }
        ds
    }

    #[test]
    fn zero_update_finetuning_leaves_parameters_unchanged() {
        let mut model = tiny_model(45);
        let before = model.param_hash();
        let env = Pendulum::new(PendulumTask::Swingup);
        let mut replay = ReplayBuffer::new(1024, 3, 1);
        let mut policy = |_obs: &[f32]| vec![0.0f32];
        let log =
            wm_finetune_online(&mut model, &env, 0, &mut policy, &mut replay, 2, 0, 46).unwrap();
        assert!(log.entries.is_empty());
        assert_eq!(model.param_hash(), before);
        // Rollouts still happened.
        assert_eq!(replay.len(), 2 * env.episode_len());
    }

    #[test]
    fn paper_shape_config_constructs_with_table_dimensions() {
        let cfg = WorldModelConfig::paper_48m_shape(6, 1, 30);
        assert_eq!(cfg.latent_dim, 768);
        assert_eq!(cfg.enc_hidden, vec![1792, 1792, 1792]);
        assert_eq!(cfg.dyn_hidden, vec![1792, 1792]);
        assert_eq!(cfg.rew_hidden, vec![1792, 1792]);
        assert_eq!(cfg.task_embed_dim, 96);
        assert_eq!(cfg.num_bins, 101);
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let model = WorldModel::init(cfg, &mut rng).unwrap();
        // Dominated by the three 1792-wide stacks; tens of millions of
        // parameters even before actor/critic heads.
        let n = model.num_params();
        assert!(n > 15_000_000 && n < 60_000_000, "param count {n}");
        let obs = Tensor::new([2, 6], vec![0.1; 12]);
        let z = model.encode_plain(&obs, &[0, 29]).unwrap();
        assert_eq!(z.shape(), &[2, 768]);
        assert_simplex(z.data(), 8, 1e-4);
    }
}
