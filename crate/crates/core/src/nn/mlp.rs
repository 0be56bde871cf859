//! Multi-layer perceptrons with optional LayerNorm and configurable
//! activations, staged onto tapes for training.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{FusedAct, Tape, Tensor, Var};

const LAYER_NORM_EPS: f32 = 1e-5;

/// Activation choices for hidden stacks and output heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Mish,
    Tanh,
    /// Groupwise softmax with the given group size; projects each group of
    /// the last axis onto the probability simplex.
    SimNorm(usize),
}

impl Activation {
    fn apply(self, tape: &mut Tape<f32>, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Relu => tape.relu(x),
            Activation::Mish => tape.mish(x),
            Activation::Tanh => tape.tanh(x),
            Activation::SimNorm(p) => tape.simnorm(x, p),
        }
    }

    /// Fused-layer equivalent for activations the fused op supports.
    fn as_fused(self) -> Option<FusedAct> {
        match self {
            Activation::Identity => Some(FusedAct::Identity),
            Activation::Relu => Some(FusedAct::Relu),
            Activation::Mish => Some(FusedAct::Mish),
            _ => None,
        }
    }
}

/// Architecture description for an [`Mlp`].
#[derive(Clone, Debug)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub hidden_act: Activation,
    pub output_act: Activation,
    /// LayerNorm (learnable gain/bias) between each hidden linear map and its
    /// activation.
    pub layer_norm: bool,
    /// Multiplier applied to the final layer's init; small values (e.g. 0.01)
    /// start policy heads near zero output.
    pub final_weight_scale: f32,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden: Vec<usize>, output_dim: usize) -> Self {
        MlpSpec {
            input_dim,
            hidden,
            output_dim,
            hidden_act: Activation::Mish,
            output_act: Activation::Identity,
            layer_norm: true,
            final_weight_scale: 1.0,
        }
    }

    pub fn hidden_act(mut self, act: Activation) -> Self {
        self.hidden_act = act;
        self
    }

    pub fn output_act(mut self, act: Activation) -> Self {
        self.output_act = act;
        self
    }

    pub fn layer_norm(mut self, on: bool) -> Self {
        self.layer_norm = on;
        self
    }

    pub fn final_weight_scale(mut self, s: f32) -> Self {
        self.final_weight_scale = s;
        self
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input_dim;
        for &h in &self.hidden {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.output_dim));
        dims
    }
}

/// A plain MLP: `hidden` linear layers (each optionally LayerNormed) with the
/// hidden activation, then a linear output layer with the output activation.
#[derive(Clone, Debug)]
pub struct Mlp {
    spec: MlpSpec,
    weights: Vec<Tensor<f32>>,
    biases: Vec<Tensor<f32>>,
    ln_gains: Vec<Tensor<f32>>,
    ln_biases: Vec<Tensor<f32>>,
}

impl Mlp {
    /// Initializes with uniform fan-in scaling, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`,
    /// for both weights and biases.
    pub fn init(spec: MlpSpec, rng: &mut ChaCha8Rng) -> Self {
        let dims = spec.layer_dims();
        let n_layers = dims.len();
        let mut weights = Vec::with_capacity(n_layers);
        let mut biases = Vec::with_capacity(n_layers);
        for (li, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let bound = 1.0 / (fan_in as f32).sqrt();
            let scale = if li + 1 == n_layers { spec.final_weight_scale } else { 1.0 };
            let w: Vec<f32> =
                (0..fan_in * fan_out).map(|_| (rng.gen::<f32>() * 2.0 - 1.0) * bound * scale).collect();
            let b: Vec<f32> =
                (0..fan_out).map(|_| (rng.gen::<f32>() * 2.0 - 1.0) * bound * scale).collect();
            weights.push(Tensor::new([fan_in, fan_out], w));
            biases.push(Tensor::new([fan_out], b));
        }
        let (mut ln_gains, mut ln_biases) = (Vec::new(), Vec::new());
        if spec.layer_norm {
            for &h in &spec.hidden {
                ln_gains.push(Tensor::full([h], 1.0));
                ln_biases.push(Tensor::zeros([h]));
            }
        }
        Mlp { spec, weights, biases, ln_gains, ln_biases }
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    /// Parameters in staging order: per layer weight then bias, with LayerNorm
    /// gain/bias following the hidden layer they normalize.
    pub fn params(&self) -> Vec<&Tensor<f32>> {
        let mut out = Vec::new();
        for i in 0..self.weights.len() {
            out.push(&self.weights[i]);
            out.push(&self.biases[i]);
            if self.spec.layer_norm && i < self.ln_gains.len() {
                out.push(&self.ln_gains[i]);
                out.push(&self.ln_biases[i]);
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<f32>> {
        let ln = self.spec.layer_norm;
        let n_ln = self.ln_gains.len();
        let mut slots: Vec<(usize, usize)> = Vec::new();
        for i in 0..self.weights.len() {
            slots.push((0, i));
            slots.push((1, i));
            if ln && i < n_ln {
                slots.push((2, i));
                slots.push((3, i));
            }
        }
        // Split the four storage vecs into per-tensor mutable borrows.
        let mut out: Vec<&mut Tensor<f32>> = Vec::with_capacity(slots.len());
        let (mut ws, mut bs, mut gs, mut lbs) = (
            self.weights.iter_mut(),
            self.biases.iter_mut(),
            self.ln_gains.iter_mut(),
            self.ln_biases.iter_mut(),
        );
        for (kind, _) in slots {
            out.push(match kind {
                0 => ws.next().expect("weight count"),
                1 => bs.next().expect("bias count"),
                2 => gs.next().expect("ln gain count"),
                _ => lbs.next().expect("ln bias count"),
            });
        }
        out
    }

    /// Names matching [`Mlp::params`] order, for checkpoint serialization.
    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        let mut out = Vec::new();
        for i in 0..self.weights.len() {
            out.push(format!("{prefix}.w{i}"));
            out.push(format!("{prefix}.b{i}"));
            if self.spec.layer_norm && i < self.ln_gains.len() {
                out.push(format!("{prefix}.ln_g{i}"));
                out.push(format!("{prefix}.ln_b{i}"));
            }
        }
        out
    }

    /// Replaces parameters from tensors in [`Mlp::params`] order.
    pub fn set_params(&mut self, tensors: &[Tensor<f32>]) -> crate::Result<()> {
        let current = self.params();
        if tensors.len() != current.len() {
            return Err(crate::PwmError::Shape(format!(
                "mlp: expected {} parameter tensors, got {}",
                current.len(),
                tensors.len()
            )));
        }
        for (have, want) in tensors.iter().zip(&current) {
            if have.shape() != want.shape() {
                return Err(crate::PwmError::Shape(format!(
                    "mlp: parameter shape {:?} does not match expected {:?}",
                    have.shape(),
                    want.shape()
                )));
            }
        }
        drop(current);
        for (slot, t) in self.params_mut().into_iter().zip(tensors) {
            *slot = t.clone();
        }
        Ok(())
    }

    /// Records the parameters on `tape` (leaves when `trainable`, constants
    /// otherwise) and returns a handle that can replay the forward pass.
    pub fn stage(&self, tape: &mut Tape<f32>, trainable: bool) -> StagedMlp {
        let vars: Vec<Var> = self
            .params()
            .into_iter()
            .map(|p| if trainable { tape.leaf(p.clone()) } else { tape.constant(p.clone()) })
            .collect();
        StagedMlp { spec: self.spec.clone(), vars }
    }

    /// One-shot forward pass without gradient tracking.
    pub fn forward_plain(&self, x: &Tensor<f32>) -> Tensor<f32> {
        let mut tape = Tape::new();
        let staged = self.stage(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = staged.forward(&mut tape, xv);
        tape.value(out).clone()
    }
}

/// Tape-resident view of an [`Mlp`]: parameter handles plus the architecture.
pub struct StagedMlp {
    spec: MlpSpec,
    vars: Vec<Var>,
}

impl StagedMlp {
    /// Replays the forward pass for a `[B, input_dim]` batch.
    pub fn forward(&self, tape: &mut Tape<f32>, x: Var) -> Var {
        let mut idx = 0;
        let mut h = x;
        let n_layers = self.spec.hidden.len() + 1;
        for li in 0..n_layers {
            let w = self.vars[idx];
            let b = self.vars[idx + 1];
            idx += 2;
            let is_output = li + 1 == n_layers;
            if is_output {
                h = tape.linear(h, w, b);
                h = self.spec.output_act.apply(tape, h);
            } else if self.spec.layer_norm {
                let gain = self.vars[idx];
                let bias = self.vars[idx + 1];
                idx += 2;
                let pre = tape.linear(h, w, b);
                match self.spec.hidden_act.as_fused() {
                    Some(fused) => {
                        h = tape.ln_affine_act(pre, gain, bias, LAYER_NORM_EPS, fused);
                    }
                    None => {
                        let normed =
                            tape.ln_affine_act(pre, gain, bias, LAYER_NORM_EPS, FusedAct::Identity);
                        h = self.spec.hidden_act.apply(tape, normed);
                    }
                }
            } else {
                let pre = tape.linear(h, w, b);
                h = self.spec.hidden_act.apply(tape, pre);
            }
        }
        h
    }

    /// Parameter handles in [`Mlp::params`] order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients in [`Mlp::params`] order, zeros where disconnected.
    pub fn grads(&self, tape: &Tape<f32>) -> Vec<Tensor<f32>> {
        self.vars.iter().map(|&v| tape.grad_or_zeros(v)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let spec = MlpSpec::new(16, vec![32], 4);
        let mlp = Mlp::init(spec, &mut rng());
        let bound = 1.0 / (16.0f32).sqrt();
        assert!(mlp.weights[0].data().iter().all(|w| w.abs() <= bound));
        let bound1 = 1.0 / (32.0f32).sqrt();
        assert!(mlp.weights[1].data().iter().all(|w| w.abs() <= bound1));
    }

    #[test]
    fn final_weight_scale_shrinks_output_layer() {
        let spec = MlpSpec::new(8, vec![16], 2).final_weight_scale(0.01);
        let mlp = Mlp::init(spec, &mut rng());
        let bound = 0.01 / (16.0f32).sqrt();
        assert!(mlp.weights[1].data().iter().all(|w| w.abs() <= bound + 1e-9));
        // Hidden layer unaffected.
        assert!(mlp.weights[0].data().iter().any(|w| w.abs() > bound));
    }

    #[test]
    fn forward_shape_and_determinism() {
        let spec = MlpSpec::new(6, vec![12, 12], 3);
        let mlp = Mlp::init(spec, &mut rng());
        let x = Tensor::new([5, 6], (0..30).map(|i| (i as f32).sin()).collect());
        let y1 = mlp.forward_plain(&x);
        let y2 = mlp.forward_plain(&x);
        assert_eq!(y1.shape(), &[5, 3]);
        assert_eq!(y1.data(), y2.data());
    }

    #[test]
    fn simnorm_output_rows_sum_to_one_per_group() {
        let spec = MlpSpec::new(4, vec![8], 8).output_act(Activation::SimNorm(4));
        let mlp = Mlp::init(spec, &mut rng());
        let x = Tensor::new([3, 4], (0..12).map(|i| i as f32 * 0.3 - 1.0).collect());
        let y = mlp.forward_plain(&x);
        for row in y.data().chunks_exact(8) {
            for group in row.chunks_exact(4) {
                let s: f32 = group.iter().sum();
                assert!((s - 1.0).abs() < 1e-5, "group sums to {s}");
                assert!(group.iter().all(|&p| p >= 0.0));
            }
        }
    }

    #[test]
    fn set_params_round_trips() {
        let spec = MlpSpec::new(4, vec![8], 2);
        let mut a = Mlp::init(spec.clone(), &mut rng());
        let b = Mlp::init(spec, &mut ChaCha8Rng::seed_from_u64(99));
        let cloned: Vec<Tensor<f32>> = b.params().into_iter().cloned().collect();
        a.set_params(&cloned).unwrap();
        let x = Tensor::new([2, 4], vec![0.5; 8]);
        assert_eq!(a.forward_plain(&x).data(), b.forward_plain(&x).data());
    }

    #[test]
    fn set_params_rejects_wrong_shapes() {
        let mut a = Mlp::init(MlpSpec::new(4, vec![8], 2), &mut rng());
        let bad = vec![Tensor::<f32>::zeros([3, 3])];
        assert!(a.set_params(&bad).is_err());
    }

    #[test]
    fn staged_gradients_flow_to_all_parameters() {
        let spec = MlpSpec::new(4, vec![8], 2);
        let mlp = Mlp::init(spec, &mut rng());
        let mut tape = Tape::new();
        let staged = mlp.stage(&mut tape, true);
        let x = tape.constant(Tensor::new([3, 4], (0..12).map(|i| i as f32 * 0.1).collect()));
        let y = staged.forward(&mut tape, x);
        let y2 = tape.square(y);
        let loss = tape.mean(y2);
        tape.backward(loss).unwrap();
        let grads = staged.grads(&tape);
        assert_eq!(grads.len(), mlp.params().len());
        for (g, p) in grads.iter().zip(mlp.params()) {
            assert_eq!(g.shape(), p.shape());
            assert!(g.data().iter().any(|&v| v != 0.0), "a parameter received no gradient");
        }
    }

    #[test]
    fn frozen_stage_receives_no_gradients() {
        let mlp = Mlp::init(MlpSpec::new(4, vec![8], 2), &mut rng());
        let mut tape = Tape::new();
        let staged = mlp.stage(&mut tape, false);
        let x = tape.leaf(Tensor::new([3, 4], vec![0.1; 12]));
        let y = staged.forward(&mut tape, x);
        let y2 = tape.square(y);
        let loss = tape.mean(y2);
        tape.backward(loss).unwrap();
        assert!(staged.grads(&tape).iter().all(|g| g.data().iter().all(|&v| v == 0.0)));
        // ...but the input does.
        assert!(tape.grad(x).is_some());
    }
}
