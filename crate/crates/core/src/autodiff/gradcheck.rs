//! Central finite-difference oracle for tape gradients.
//!
//! The oracle rebuilds the forward computation from scratch for every
//! perturbed coordinate, so it shares no code path with reverse mode beyond
//! the op implementations themselves being evaluated at different points.

use super::scalar::Scalar;
use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Outcome of comparing reverse-mode gradients against finite differences.
#[derive(Debug)]
pub struct GradCheckReport<T> {
    /// Analytic (tape) gradient per input.
    pub analytic: Vec<Tensor<T>>,
    /// Central-difference gradient per input.
    pub numeric: Vec<Tensor<T>>,
    /// Worst per-element error, relative with a unit floor:
    /// `|a - n| / max(1, |a|, |n|)`.
    pub max_err: f64,
}

/// Evaluates `f` (which must produce a scalar root) at `inputs` and returns
/// the central-difference gradient for every element of every input.
pub fn finite_diff_grads<T: Scalar>(
    f: &dyn Fn(&mut Tape<T>, &[Var]) -> Var,
    inputs: &[Tensor<T>],
    step: f64,
) -> Vec<Tensor<T>> {
    let eval = |points: &[Tensor<T>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = points.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = f(&mut tape, &vars);
        tape.value(root).item().to_f64()
    };

    let mut grads = Vec::with_capacity(inputs.len());
    for (i, input) in inputs.iter().enumerate() {
        let mut g = Tensor::zeros(input.shape().to_vec());
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += T::from_f64(step);
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= T::from_f64(step);
            let slope = (eval(&plus) - eval(&minus)) / (2.0 * step);
            g.data_mut()[j] = T::from_f64(slope);
        }
        grads.push(g);
    }
    grads
}

/// Runs reverse mode and the finite-difference oracle side by side.
pub fn gradcheck<T: Scalar>(
    f: &dyn Fn(&mut Tape<T>, &[Var]) -> Var,
    inputs: &[Tensor<T>],
    step: f64,
) -> GradCheckReport<T> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = f(&mut tape, &vars);
    tape.backward(root).expect("gradcheck: backward failed");
    let analytic: Vec<Tensor<T>> = vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();

    let numeric = finite_diff_grads(f, inputs, step);

    let mut max_err = 0.0f64;
    for (a, n) in analytic.iter().zip(&numeric) {
        for (&av, &nv) in a.data().iter().zip(n.data()) {
            let (av, nv) = (av.to_f64(), nv.to_f64());
            let denom = 1.0f64.max(av.abs()).max(nv.abs());
            max_err = max_err.max((av - nv).abs() / denom);
        }
    }
    GradCheckReport { analytic, numeric, max_err }
}

/// Runs the canonical per-op oracle suite in `f64` and reports the worst
/// error per op. Inputs are random but seeded, kept away from subgradient
/// boundaries (relu/clamp kinks) where finite differences are undefined;
/// boundary behavior is pinned by direct unit tests instead.
pub fn op_oracle_suite() -> Vec<(&'static str, f64)> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x0f0f_1234);
    let mut rand_t = |shape: &[usize], lo: f64, hi: f64| -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect())
    };

    let step = 1e-5;
    let mut results: Vec<(&'static str, f64)> = Vec::new();
    let mut check = |name: &'static str,
                     inputs: Vec<Tensor<f64>>,
                     f: Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Var>| {
        let report = gradcheck(f.as_ref(), &inputs, step);
        results.push((name, report.max_err));
    };

    check(
        "matmul",
        vec![rand_t(&[3, 4], -1.0, 1.0), rand_t(&[4, 2], -1.0, 1.0)],
        Box::new(|t, v| {
            let y = t.matmul(v[0], v[1]);
            t.sum(y)
        }),
    );
    check(
        "linear",
        vec![rand_t(&[3, 4], -1.0, 1.0), rand_t(&[4, 2], -1.0, 1.0), rand_t(&[2], -1.0, 1.0)],
        Box::new(|t, v| {
            let y = t.linear(v[0], v[1], v[2]);
            let y = t.square(y);
            t.mean(y)
        }),
    );
    check(
        "add_broadcast",
        vec![rand_t(&[3, 4], -1.0, 1.0), rand_t(&[4], -1.0, 1.0)],
        Box::new(|t, v| {
            let y = t.add(v[0], v[1]);
            let y = t.square(y);
            t.sum(y)
        }),
    );
    check(
        "sub",
        vec![rand_t(&[2, 3], -1.0, 1.0), rand_t(&[2, 3], -1.0, 1.0)],
        Box::new(|t, v| {
            let y = t.sub(v[0], v[1]);
            let y = t.square(y);
            t.sum(y)
        }),
    );
    check(
        "mul_broadcast",
        vec![rand_t(&[3, 4], -1.0, 1.0), rand_t(&[4], 0.5, 1.5)],
        Box::new(|t, v| {
            let y = t.mul(v[0], v[1]);
            t.sum(y)
        }),
    );
    check(
        "div",
        vec![rand_t(&[2, 3], -1.0, 1.0), rand_t(&[3], 0.5, 2.0)],
        Box::new(|t, v| {
            let y = t.div(v[0], v[1]);
            t.sum(y)
        }),
    );
    check(
        "sum",
        vec![rand_t(&[2, 3], -1.0, 1.0)],
        Box::new(|t, v| {
            let y = t.square(v[0]);
            t.sum(y)
        }),
    );
    check(
        "mean",
        vec![rand_t(&[7], -1.0, 1.0)],
        Box::new(|t, v| {
            let y = t.square(v[0]);
            t.mean(y)
        }),
    );
    check(
        "sum_last",
        vec![rand_t(&[2, 5], -1.0, 1.0)],
        Box::new(|t, v| {
            let y = t.sum_last(v[0]);
            let y = t.square(y);
            t.sum(y)
        }),
    );
    check(
        "exp",
        vec![rand_t(&[2, 3], -1.0, 1.0)],
        Box::new(|t, v| {
            let y = t.exp(v[0]);
            t.sum(y)
        }),
    );
    check(
        "log",
        vec![rand_t(&[2, 3], 0.2, 2.0)],
        Box::new(|t, v| {
            let y = t.log(v[0]);
            t.sum(y)
        }),
    );
    check(
        "tanh",
        vec![rand_t(&[2, 3], -2.0, 2.0)],
        Box::new(|t, v| {
            let y = t.tanh(v[0]);
            t.sum(y)
        }),
    );
    check(
        "relu",
        vec![rand_t(&[2, 3], 0.1, 1.0)],
        Box::new(|t, v| {
            let y = t.relu(v[0]);
            t.sum(y)
        }),
    );
    check(
        "relu_negative",
        vec![rand_t(&[2, 3], -1.0, -0.1)],
        Box::new(|t, v| {
            let y = t.relu(v[0]);
            t.sum(y)
        }),
    );
    check(
        "mish",
        vec![rand_t(&[2, 5], -3.0, 3.0)],
        Box::new(|t, v| {
            let y = t.mish(v[0]);
            t.sum(y)
        }),
    );
    check(
        "sqrt",
        vec![rand_t(&[5], 0.3, 2.0)],
        Box::new(|t, v| {
            let y = t.sqrt(v[0]);
            t.sum(y)
        }),
    );
    check(
        "square",
        vec![rand_t(&[5], -1.0, 1.0)],
        Box::new(|t, v| {
            let y = t.square(v[0]);
            t.sum(y)
        }),
    );
    check(
        "sin",
        vec![rand_t(&[5], -3.0, 3.0)],
        Box::new(|t, v| {
            let y = t.sin(v[0]);
            t.sum(y)
        }),
    );
    check(
        "cos",
        vec![rand_t(&[5], -3.0, 3.0)],
        Box::new(|t, v| {
            let y = t.cos(v[0]);
            t.sum(y)
        }),
    );
    check(
        "neg_scale_add_scalar",
        vec![rand_t(&[4], -1.0, 1.0)],
        Box::new(|t, v| {
            let y = t.neg(v[0]);
            let y = t.scale(y, 1.7);
            let y = t.add_scalar(y, 0.3);
            let y = t.square(y);
            t.sum(y)
        }),
    );
    check(
        "clamp_interior",
        vec![rand_t(&[5], -0.4, 0.4)],
        Box::new(|t, v| {
            let y = t.clamp(v[0], -0.5, 0.5);
            let y = t.square(y);
            t.sum(y)
        }),
    );
    check(
        "wrap_angle_principal_branch",
        vec![rand_t(&[5], -2.5, 2.5)],
        Box::new(|t, v| {
            let y = t.wrap_angle(v[0]);
            let y = t.square(y);
            t.sum(y)
        }),
    );
    check(
        "wrap_angle_shifted_branch",
        vec![rand_t(&[5], 4.0, 5.5)],
        Box::new(|t, v| {
            let y = t.wrap_angle(v[0]);
            let y = t.square(y);
            t.sum(y)
        }),
    );
    check(
        "clamp_exterior",
        vec![rand_t(&[5], 1.0, 2.0)],
        Box::new(|t, v| {
            let y = t.clamp(v[0], -0.5, 0.5);
            let y = t.square(y);
            t.sum(y)
        }),
    );
    check(
        "softmax_last",
        vec![rand_t(&[2, 5], -2.0, 2.0), rand_t(&[2, 5], -1.0, 1.0)],
        Box::new(|t, v| {
            let y = t.softmax_last(v[0]);
            let y = t.mul(y, v[1]);
            t.sum(y)
        }),
    );
    check(
        "layer_norm_last",
        vec![rand_t(&[3, 6], -2.0, 2.0), rand_t(&[3, 6], -1.0, 1.0)],
        Box::new(|t, v| {
            let y = t.layer_norm_last(v[0], 1e-5);
            let y = t.mul(y, v[1]);
            t.sum(y)
        }),
    );
    check(
        "ln_affine_act_mish",
        vec![rand_t(&[3, 6], -2.0, 2.0), rand_t(&[6], 0.5, 1.5), rand_t(&[6], -0.5, 0.5)],
        Box::new(|t, v| {
            let y = t.ln_affine_act(v[0], v[1], v[2], 1e-5, crate::autodiff::FusedAct::Mish);
            t.sum(y)
        }),
    );
    check(
        "ln_affine_act_relu",
        vec![rand_t(&[3, 6], -2.0, 2.0), rand_t(&[6], 0.5, 1.5), rand_t(&[6], 1.0, 1.5)],
        Box::new(|t, v| {
            let y = t.ln_affine_act(v[0], v[1], v[2], 1e-5, crate::autodiff::FusedAct::Relu);
            t.sum(y)
        }),
    );
    check(
        "ln_affine_act_identity",
        vec![rand_t(&[3, 6], -2.0, 2.0), rand_t(&[6], 0.5, 1.5), rand_t(&[6], -0.5, 0.5)],
        Box::new(|t, v| {
            let y = t.ln_affine_act(v[0], v[1], v[2], 1e-5, crate::autodiff::FusedAct::Identity);
            let y = t.square(y);
            t.sum(y)
        }),
    );
    check(
        "simnorm",
        vec![rand_t(&[2, 8], -2.0, 2.0), rand_t(&[2, 8], -1.0, 1.0)],
        Box::new(|t, v| {
            let y = t.simnorm(v[0], 4);
            let y = t.mul(y, v[1]);
            t.sum(y)
        }),
    );
    check(
        "mse",
        vec![rand_t(&[2, 3], -1.0, 1.0), rand_t(&[2, 3], -1.0, 1.0)],
        Box::new(|t, v| t.mse(v[0], v[1])),
    );
    check(
        "ce_with_logits_last",
        vec![rand_t(&[2, 5], -2.0, 2.0), rand_t(&[2, 5], 0.05, 0.3)],
        Box::new(|t, v| {
            let y = t.ce_with_logits_last(v[0], v[1]);
            t.mean(y)
        }),
    );
    check(
        "concat_last",
        vec![rand_t(&[2, 3], -1.0, 1.0), rand_t(&[2, 2], -1.0, 1.0), rand_t(&[2, 4], -1.0, 1.0)],
        Box::new(|t, v| {
            let y = t.concat_last(&[v[0], v[1], v[2]]);
            let y = t.square(y);
            t.sum(y)
        }),
    );
    check(
        "slice_last",
        vec![rand_t(&[2, 6], -1.0, 1.0)],
        Box::new(|t, v| {
            let y = t.slice_last(v[0], 1, 3);
            let y = t.square(y);
            t.sum(y)
        }),
    );
    check(
        "reshape",
        vec![rand_t(&[2, 6], -1.0, 1.0)],
        Box::new(|t, v| {
            let y = t.reshape(v[0], [3, 4]);
            let y = t.square(y);
            t.mean(y)
        }),
    );
    check(
        "composite_chain",
        vec![rand_t(&[4, 3], -1.0, 1.0), rand_t(&[3, 3], -0.7, 0.7), rand_t(&[3], -0.2, 0.2)],
        Box::new(|t, v| {
            // A small recurrent chain: x_{k+1} = tanh(x_k @ w + b), probing
            // repeated-parameter accumulation like BPTT does.
            let mut x = v[0];
            for _ in 0..4 {
                let h = t.linear(x, v[1], v[2]);
                x = t.tanh(h);
            }
            let y = t.square(x);
            t.mean(y)
        }),
    );

    results
}
