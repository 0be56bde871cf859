//! Value-function ensemble: independent MLPs mapping latents to scalar
//! values, aggregated by mean for bootstrapping.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::nn::{Adam, AdamConfig, Mlp, MlpSpec, StagedMlp};
use crate::{PwmError, Result};

/// Architecture for [`CriticEnsemble`].
#[derive(Clone, Debug)]
pub struct CriticConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub members: usize,
}

impl CriticConfig {
    /// Desk-scale default: 3 members, two 64-wide hidden layers.
    pub fn desk(input_dim: usize) -> Self {
        CriticConfig { input_dim, hidden: vec![64, 64], members: 3 }
    }

    /// Full-size shape from the hyperparameter table.
    pub fn paper_shape(input_dim: usize) -> Self {
        CriticConfig { hidden: vec![400, 200], ..Self::desk(input_dim) }
    }

    fn member_spec(&self) -> MlpSpec {
        MlpSpec::new(self.input_dim, self.hidden.clone(), 1)
    }
}

/// Independent value networks differing only by init seed.
#[derive(Clone)]
pub struct CriticEnsemble {
    cfg: CriticConfig,
    members: Vec<Mlp>,
}

impl CriticEnsemble {
    pub fn init(cfg: CriticConfig, rng: &mut ChaCha8Rng) -> Self {
        let members = (0..cfg.members).map(|_| Mlp::init(cfg.member_spec(), rng)).collect();
        CriticEnsemble { cfg, members }
    }

    pub fn cfg(&self) -> &CriticConfig {
        &self.cfg
    }

    pub fn num_members(&self) -> usize {
        self.members.len()
    }

    pub fn params(&self) -> Vec<&Tensor<f32>> {
        self.members.iter().flat_map(|m| m.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<f32>> {
        self.members.iter_mut().flat_map(|m| m.params_mut()).collect()
    }

    pub fn param_names(&self) -> Vec<String> {
        self.members
            .iter()
            .enumerate()
            .flat_map(|(i, m)| m.param_names(&format!("critic{i}")))
            .collect()
    }

    pub fn set_params(&mut self, tensors: &[Tensor<f32>]) -> Result<()> {
        let per = self.members[0].params().len();
        if tensors.len() != per * self.members.len() {
            return Err(PwmError::Shape(format!(
                "critic: expected {} parameter tensors, got {}",
                per * self.members.len(),
                tensors.len()
            )));
        }
        for (i, m) in self.members.iter_mut().enumerate() {
            m.set_params(&tensors[i * per..(i + 1) * per])?;
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Vec<Tensor<f32>> {
        self.params().into_iter().cloned().collect()
    }

    /// Copies another ensemble's parameters blended by `tau`:
    /// `self = (1-tau) * self + tau * other`. Used for the optional
    /// EMA-target variant.
    pub fn ema_from(&mut self, other: &CriticEnsemble, tau: f32) {
        for (mine, theirs) in self.params_mut().into_iter().zip(other.params()) {
            for (a, &b) in mine.data_mut().iter_mut().zip(theirs.data()) {
                *a = (1.0 - tau) * *a + tau * b;
            }
        }
    }

    pub fn stage(&self, tape: &mut Tape<f32>, trainable: bool) -> StagedCritic {
        StagedCritic { members: self.members.iter().map(|m| m.stage(tape, trainable)).collect() }
    }

    /// Mean ensemble value for a `[B, input_dim]` batch, no gradients.
    pub fn value_mean_plain(&self, z: &Tensor<f32>) -> Vec<f32> {
        let rows = z.shape()[0];
        let mut acc = vec![0.0f32; rows];
        for m in &self.members {
            let v = m.forward_plain(z);
            for (a, &x) in acc.iter_mut().zip(v.data()) {
                *a += x;
            }
        }
        let inv = 1.0 / self.members.len() as f32;
        acc.iter_mut().for_each(|a| *a *= inv);
        acc
    }
}

/// Tape-resident ensemble.
pub struct StagedCritic {
    members: Vec<StagedMlp>,
}

impl StagedCritic {
    /// Mean ensemble value, shape `[B]`.
    pub fn value_mean(&self, tape: &mut Tape<f32>, z: Var) -> Var {
        let rows = tape.value(z).shape()[0];
        let mut acc: Option<Var> = None;
        for m in &self.members {
            let v = m.forward(tape, z);
            let v = tape.reshape(v, vec![rows]);
            acc = Some(match acc {
                Some(a) => tape.add(a, v),
                None => v,
            });
        }
        let sum = acc.expect("ensemble has at least one member");
        tape.scale(sum, 1.0 / self.members.len() as f32)
    }

    /// A single member's value, shape `[B]`.
    pub fn member_value(&self, tape: &mut Tape<f32>, idx: usize, z: Var) -> Var {
        let rows = tape.value(z).shape()[0];
        let v = self.members[idx].forward(tape, z);
        tape.reshape(v, vec![rows])
    }

    pub fn grads(&self, tape: &Tape<f32>) -> Vec<Tensor<f32>> {
        self.members.iter().flat_map(|m| m.grads(tape)).collect()
    }
}

/// Optimizer state for [`critic_update`]: one Adam per member so the
/// grad-norm clip applies to each independent network separately.
pub struct CriticOpt {
    adams: Vec<Adam>,
    per_member: usize,
}

impl CriticOpt {
    pub fn new(critic: &CriticEnsemble, lr: f32, grad_clip: f32) -> Self {
        let per_member = critic.members[0].params().len();
        let adams = critic
            .members
            .iter()
            .map(|m| Adam::new(AdamConfig::new(lr).grad_clip(grad_clip), &m.params()))
            .collect();
        CriticOpt { adams, per_member }
    }
}

/// One regression pass: shuffles the `(z, target)` pool into `splits`
/// mini-batches, then runs `iters` Adam steps, each on a uniformly sampled
/// mini-batch, with every member regressing on the same targets.
///
/// Returns the mean (over members) MSE loss observed at each iteration.
pub fn critic_update(
    critic: &mut CriticEnsemble,
    opt: &mut CriticOpt,
    zs: &Tensor<f32>,
    targets: &[f32],
    splits: usize,
    iters: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f32>> {
    use rand::seq::SliceRandom;
    use rand::Rng;

    let n = zs.shape()[0];
    if targets.len() != n {
        return Err(PwmError::Shape(format!(
            "critic update: {n} latents vs {} targets",
            targets.len()
        )));
    }
    if n == 0 || splits == 0 {
        return Err(PwmError::Shape("critic update: empty pool or zero splits".into()));
    }
    let d = zs.shape()[1];

    // Shuffle once, then cut into `splits` chunks (last one shortened when
    // the pool does not divide evenly).
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let chunk_len = n.div_ceil(splits);
    let chunks: Vec<&[usize]> = order.chunks(chunk_len).collect();

    let mut losses = Vec::with_capacity(iters);
    for _ in 0..iters {
        let chunk = chunks[rng.gen_range(0..chunks.len())];
        let m = chunk.len();
        let mut zdata = Vec::with_capacity(m * d);
        let mut tdata = Vec::with_capacity(m);
        for &i in chunk {
            zdata.extend_from_slice(&zs.data()[i * d..(i + 1) * d]);
            tdata.push(targets[i]);
        }
        let zt = Tensor::new([m, d], zdata);
        let tt = Tensor::new([m, 1], tdata);

        let mut loss_sum = 0.0f32;
        for (member, adam) in critic.members.iter_mut().zip(opt.adams.iter_mut()) {
            let mut tape = Tape::new();
            let staged = member.stage(&mut tape, true);
            let zv = tape.constant(zt.clone());
            let tv = tape.constant(tt.clone());
            let pred = staged.forward(&mut tape, zv);
            let loss = tape.mse(pred, tv);
            loss_sum += tape.value(loss).data()[0];
            tape.backward(loss).map_err(|e| PwmError::Numerical(e.to_string()))?;
            let grads = staged.grads(&tape);
            let mut params = member.params_mut();
            adam.step(&mut params, &grads);
        }
        losses.push(loss_sum / critic.members.len() as f32);
    }
    debug_assert_eq!(opt.per_member, critic.members[0].params().len());
    Ok(losses)
}
