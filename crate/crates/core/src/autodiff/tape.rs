//! The Wengert tape: op recording and reverse-mode gradient computation.

use thiserror::Error;

use super::scalar::Scalar;
use super::tensor::Tensor;

/// Handle to a node on a [`Tape`]. Only valid for the tape that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Errors surfaced by [`Tape::backward`].
#[derive(Debug, Error)]
pub enum TapeError {
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    /// Reported lazily: with debug checks enabled the forward pass records the
    /// first op that produced a non-finite value, and backward refuses to run.
    #[error("non-finite value in `{op}` output (node {node})")]
    NonFinite { op: &'static str, node: usize },
}

/// Activation selector for the fused [`Tape::ln_affine_act`] op.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusedAct {
    Identity,
    Relu,
    Mish,
}

impl FusedAct {
    #[inline]
    fn apply<T: Scalar>(self, y: T) -> T {
        match self {
            FusedAct::Identity => y,
            FusedAct::Relu => y.maxv(T::ZERO),
            FusedAct::Mish => y * softplus(y).tanh(),
        }
    }

    #[inline]
    fn derivative<T: Scalar>(self, y: T) -> T {
        match self {
            FusedAct::Identity => T::ONE,
            FusedAct::Relu => {
                if y > T::ZERO {
                    T::ONE
                } else {
                    T::ZERO
                }
            }
            FusedAct::Mish => {
                let sp = softplus(y);
                let tsp = sp.tanh();
                let sig = T::ONE / (T::ONE + (-y).exp());
                tsp + y * (T::ONE - tsp * tsp) * sig
            }
        }
    }
}

enum Op<T> {
    Leaf,
    Neg(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Relu(Var),
    Mish(Var),
    Sqrt(Var),
    Square(Var),
    Sin(Var),
    Cos(Var),
    Scale(Var, T),
    AddScalar(Var),
    Clamp(Var, T, T),
    WrapAngle(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Matmul(Var, Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    SoftmaxLast(Var),
    LayerNormLast(Var, T),
    Mse(Var, Var),
    CeLogitsLast(Var, Var),
    ConcatLast(Vec<Var>),
    SliceLast { src: Var, start: usize, len: usize },
    Reshape(Var),
    StopGrad,
    // Fused ops. Semantically each is a composition of the primitives above;
    // they exist because BPTT through small MLPs is dominated by per-op
    // traversal, and fusing a whole layer cuts that overhead severalfold.
    Linear { x: Var, w: Var, b: Var },
    LnAffineAct { x: Var, gain: Var, bias: Var, eps: T, act: FusedAct },
    SimNorm { x: Var, p: usize },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Arena of forward values plus enough structure to replay them backwards.
///
/// Usage contract:
/// - shape mismatches panic with the op kind and the offending shapes; they
///   are programming errors, not runtime conditions;
/// - a tape is single-use per backward pass unless [`Tape::reset`] is called;
///   calling backward repeatedly without a reset accumulates gradients
///   additively into the same buffers;
/// - gradients of subgraphs disconnected from the root stay `None` and read
///   back as zero through [`Tape::grad_or_zeros`]; that is not an error.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    debug_checks: bool,
    first_nonfinite: Option<(usize, &'static str)>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), debug_checks: false, first_nonfinite: None }
    }

    /// Enables per-op finiteness checks on forward outputs. The first offender
    /// is reported as an error by the next [`Tape::backward`] call.
    pub fn with_debug_checks(mut self) -> Self {
        self.debug_checks = true;
        self
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Clears all nodes and gradients so the allocation can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.first_nonfinite = None;
    }

    /// Records a trainable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true, "leaf")
    }

    /// Records a non-trainable input; gradients never flow into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false, "constant")
    }

    /// Forward value of a node.
    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated for `v`, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for `v`, densified to zeros when disconnected from the root.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.nodes[v.0].value.shape().to_vec()),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, name: &'static str) -> Var {
        if self.debug_checks && self.first_nonfinite.is_none() && !value.all_finite() {
            self.first_nonfinite = Some((self.nodes.len(), name));
        }
        self.nodes.push(Node { value, op, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ---- unary ops ----

    fn unary(&mut self, a: Var, name: &'static str, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.nodes[a.0].value.map(&f);
        let rg = self.rg(a);
        self.push(value, op, rg, name)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, "neg", |x| -x, Op::Neg(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, "exp", |x| x.exp(), Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, "log", |x| x.ln(), Op::Log(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, "tanh", |x| x.tanh(), Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, "relu", |x| x.maxv(T::ZERO), Op::Relu(a))
    }

    /// `x * tanh(softplus(x))`, the smooth self-gated activation.
    pub fn mish(&mut self, a: Var) -> Var {
        self.unary(a, "mish", |x| x * softplus(x).tanh(), Op::Mish(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, "sqrt", |x| x.sqrt(), Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, "square", |x| x * x, Op::Square(a))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, "sin", |x| x.sin(), Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, "cos", |x| x.cos(), Op::Cos(a))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, "scale", |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.unary(a, "add_scalar", |x| x + c, Op::AddScalar(a))
    }

    /// Element-wise clamp. The subgradient at the boundaries is 1 (pass-through
    /// inside the closed interval, zero strictly outside).
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        assert!(lo <= hi, "clamp: lo {lo} must not exceed hi {hi}");
        self.unary(a, "clamp", |x| x.maxv(lo).minv(hi), Op::Clamp(a, lo, hi))
    }

    /// Principal angle: wraps each element into `[-pi, pi)` by subtracting
    /// the nearest multiple of `2*pi`. The subtracted shift is locally
    /// constant, so the gradient passes through unchanged; at the seam itself
    /// the subgradient is taken from the interior.
    pub fn wrap_angle(&mut self, a: Var) -> Var {
        let wrap = |x: T| {
            let x = x.to_f64();
            T::from_f64(x - std::f64::consts::TAU * (x / std::f64::consts::TAU).round())
        };
        self.unary(a, "wrap_angle", wrap, Op::WrapAngle(a))
    }

    /// Forwards the value and blocks the gradient.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.clone();
        self.push(value, Op::StopGrad, false, "stop_gradient")
    }

    /// Same data, new shape (element count must match).
    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Var {
        let value = self.nodes[a.0].value.reshaped(shape);
        let rg = self.rg(a);
        self.push(value, Op::Reshape(a), rg, "reshape")
    }

    // ---- binary element-wise ops with trailing-suffix broadcasting ----

    fn broadcast_shape(&self, a: Var, b: Var, name: &str) -> Vec<usize> {
        let sa = self.nodes[a.0].value.shape();
        let sb = self.nodes[b.0].value.shape();
        if sa == sb || sa.ends_with(sb) {
            sa.to_vec()
        } else if sb.ends_with(sa) {
            sb.to_vec()
        } else {
            panic!("{name}: incompatible shapes {sa:?} vs {sb:?}");
        }
    }

    fn ew_binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Var {
        let shape = self.broadcast_shape(a, b, name);
        let numel: usize = shape.iter().product();
        let da = self.nodes[a.0].value.data();
        let db = self.nodes[b.0].value.data();
        let (la, lb) = (da.len(), db.len());
        let mut out = Vec::with_capacity(numel);
        // Row-major suffix broadcasting reduces to index modulo: the smaller
        // operand tiles exactly along the leading axes.
        for i in 0..numel {
            out.push(f(da[i % la], db[i % lb]));
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(shape, out), op, rg, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.ew_binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.ew_binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.ew_binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.ew_binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    // ---- matmul ----

    /// `[m, k] @ [k, n] -> [m, n]`, strictly 2-D.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let sa = self.nodes[a.0].value.shape().to_vec();
        let sb = self.nodes[b.0].value.shape().to_vec();
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul: incompatible shapes {sa:?} vs {sb:?}"
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::ZERO; m * n];
        T::gemm(
            m,
            k,
            n,
            self.nodes[a.0].value.data(),
            k as isize,
            1,
            self.nodes[b.0].value.data(),
            n as isize,
            1,
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new([m, n], out), Op::Matmul(a, b), rg, "matmul")
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.nodes[a.0].value.data().iter().copied().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        assert!(v.numel() > 0, "mean: empty tensor");
        let s: T = v.data().iter().copied().sum();
        let m = s / T::from_f64(v.numel() as f64);
        let rg = self.rg(a);
        self.push(Tensor::scalar(m), Op::Mean(a), rg, "mean")
    }

    /// Sums over the last axis, dropping it: `[.., d] -> [..]`.
    pub fn sum_last(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        assert!(v.ndim() >= 1, "sum_last: needs rank >= 1, got shape {:?}", v.shape());
        let d = v.last_dim();
        let rows = v.lead_rows();
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            out.push(v.data()[r * d..(r + 1) * d].iter().copied().sum());
        }
        let shape = v.shape()[..v.ndim() - 1].to_vec();
        let rg = self.rg(a);
        self.push(Tensor::new(shape, out), Op::SumLast(a), rg, "sum_last")
    }

    // ---- row-wise ops over the last axis ----

    /// Shift-stable softmax over the last axis.
    pub fn softmax_last(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        assert!(v.ndim() >= 1, "softmax_last: needs rank >= 1, got shape {:?}", v.shape());
        let d = v.last_dim();
        let rows = v.lead_rows();
        let mut out = vec![T::ZERO; v.numel()];
        for r in 0..rows {
            let row = &v.data()[r * d..(r + 1) * d];
            let mut mx = row[0];
            for &x in row {
                mx = mx.maxv(x);
            }
            let mut z = T::ZERO;
            for (o, &x) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (x - mx).exp();
                z += *o;
            }
            for o in &mut out[r * d..(r + 1) * d] {
                *o = *o / z;
            }
        }
        let shape = v.shape().to_vec();
        let rg = self.rg(a);
        self.push(Tensor::new(shape, out), Op::SoftmaxLast(a), rg, "softmax_last")
    }

    /// Normalizes each row of the last axis to zero mean and unit variance.
    /// Affine gain/bias, when wanted, are separate parameters applied by the
    /// caller; the op itself is parameter-free.
    pub fn layer_norm_last(&mut self, a: Var, eps: T) -> Var {
        let v = &self.nodes[a.0].value;
        assert!(v.ndim() >= 1, "layer_norm_last: needs rank >= 1, got shape {:?}", v.shape());
        let d = v.last_dim();
        let rows = v.lead_rows();
        let dn = T::from_f64(d as f64);
        let mut out = vec![T::ZERO; v.numel()];
        for r in 0..rows {
            let row = &v.data()[r * d..(r + 1) * d];
            let mu = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&x| (x - mu) * (x - mu)).sum::<T>() / dn;
            let rstd = T::ONE / (var + eps).sqrt();
            for (o, &x) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (x - mu) * rstd;
            }
        }
        let shape = v.shape().to_vec();
        let rg = self.rg(a);
        self.push(Tensor::new(shape, out), Op::LayerNormLast(a, eps), rg, "layer_norm_last")
    }

    // ---- losses ----

    /// Mean squared error over all elements; shapes must match exactly.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let sa = self.nodes[a.0].value.shape();
        let sb = self.nodes[b.0].value.shape();
        assert_eq!(sa, sb, "mse: shape mismatch {sa:?} vs {sb:?}");
        let da = self.nodes[a.0].value.data();
        let db = self.nodes[b.0].value.data();
        let n = T::from_f64(da.len() as f64);
        let mut s = T::ZERO;
        for (&x, &y) in da.iter().zip(db) {
            s += (x - y) * (x - y);
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::scalar(s / n), Op::Mse(a, b), rg, "mse")
    }

    /// Cross-entropy between a soft target distribution and logits, rowwise
    /// over the last axis: `ce[r] = -sum_j target[r,j] * log_softmax(logits)[r,j]`.
    pub fn ce_with_logits_last(&mut self, logits: Var, target: Var) -> Var {
        let sl = self.nodes[logits.0].value.shape().to_vec();
        let st = self.nodes[target.0].value.shape();
        assert_eq!(&sl, st, "ce_with_logits_last: shape mismatch {sl:?} vs {st:?}");
        assert!(!sl.is_empty(), "ce_with_logits_last: needs rank >= 1");
        let d = *sl.last().unwrap();
        let rows: usize = sl[..sl.len() - 1].iter().product();
        let dl = self.nodes[logits.0].value.data();
        let dt = self.nodes[target.0].value.data();
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let lrow = &dl[r * d..(r + 1) * d];
            let trow = &dt[r * d..(r + 1) * d];
            let mut mx = lrow[0];
            for &x in lrow {
                mx = mx.maxv(x);
            }
            let z: T = lrow.iter().map(|&x| (x - mx).exp()).sum();
            let lse = z.ln() + mx;
            let mut ce = T::ZERO;
            for (&l, &t) in lrow.iter().zip(trow) {
                ce += t * (lse - l);
            }
            out.push(ce);
        }
        let rg = self.rg(logits) || self.rg(target);
        self.push(
            Tensor::new(sl[..sl.len() - 1].to_vec(), out),
            Op::CeLogitsLast(logits, target),
            rg,
            "ce_with_logits_last",
        )
    }

    // ---- structural ops ----

    /// Concatenates along the last axis; leading dims must match.
    pub fn concat_last(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_last: no inputs");
        let lead = self.nodes[parts[0].0].value.shape().to_vec();
        let lead = &lead[..lead.len().saturating_sub(1)];
        let mut total_last = 0;
        for &p in parts {
            let s = self.nodes[p.0].value.shape();
            assert!(
                s.len() >= 1 && &s[..s.len() - 1] == lead,
                "concat_last: leading dims mismatch, {:?} vs expected {lead:?}",
                s
            );
            total_last += *s.last().unwrap();
        }
        let rows: usize = lead.iter().product();
        let mut out = vec![T::ZERO; rows * total_last];
        let mut off = 0;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            let d = v.last_dim();
            for r in 0..rows {
                out[r * total_last + off..r * total_last + off + d]
                    .copy_from_slice(&v.data()[r * d..(r + 1) * d]);
            }
            off += d;
        }
        let mut shape = lead.to_vec();
        shape.push(total_last);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::new(shape, out), Op::ConcatLast(parts.to_vec()), rg, "concat_last")
    }

    /// Takes `[start, start+len)` of the last axis.
    pub fn slice_last(&mut self, src: Var, start: usize, len: usize) -> Var {
        let v = &self.nodes[src.0].value;
        let d = v.last_dim();
        assert!(
            v.ndim() >= 1 && start + len <= d,
            "slice_last: range {start}..{} out of last dim {d} (shape {:?})",
            start + len,
            v.shape()
        );
        let rows = v.lead_rows();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&v.data()[r * d + start..r * d + start + len]);
        }
        let mut shape = v.shape()[..v.ndim() - 1].to_vec();
        shape.push(len);
        let rg = self.rg(src);
        self.push(Tensor::new(shape, out), Op::SliceLast { src, start, len }, rg, "slice_last")
    }

    // ---- fused layer ops ----

    /// `x @ w + b` in one node: `[B, in] @ [in, out] + [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let sx = self.nodes[x.0].value.shape().to_vec();
        let sw = self.nodes[w.0].value.shape().to_vec();
        let sb = self.nodes[b.0].value.shape().to_vec();
        assert!(
            sx.len() == 2 && sw.len() == 2 && sx[1] == sw[0] && sb == [sw[1]],
            "linear: incompatible shapes x={sx:?} w={sw:?} b={sb:?}"
        );
        let (m, k, n) = (sx[0], sx[1], sw[1]);
        let mut out = vec![T::ZERO; m * n];
        T::gemm(
            m,
            k,
            n,
            self.nodes[x.0].value.data(),
            k as isize,
            1,
            self.nodes[w.0].value.data(),
            n as isize,
            1,
            &mut out,
        );
        let bd = self.nodes[b.0].value.data();
        for row in out.chunks_exact_mut(n) {
            for (o, &bv) in row.iter_mut().zip(bd) {
                *o += bv;
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(Tensor::new([m, n], out), Op::Linear { x, w, b }, rg, "linear")
    }

    /// Row-wise LayerNorm followed by a learnable affine map and activation:
    /// `act(norm(x) * gain + bias)` over the last axis, in one node.
    pub fn ln_affine_act(&mut self, x: Var, gain: Var, bias: Var, eps: T, act: FusedAct) -> Var {
        let sx = self.nodes[x.0].value.shape().to_vec();
        let d = *sx.last().expect("ln_affine_act: needs rank >= 1");
        let sg = self.nodes[gain.0].value.shape();
        let sb = self.nodes[bias.0].value.shape();
        assert!(
            sg == [d] && sb == [d],
            "ln_affine_act: gain/bias must be [{d}], got {sg:?} and {sb:?}"
        );
        let rows = self.nodes[x.0].value.lead_rows();
        let dn = T::from_f64(d as f64);
        let mut out = vec![T::ZERO; rows * d];
        {
            let xd = self.nodes[x.0].value.data();
            let gd = self.nodes[gain.0].value.data();
            let bd = self.nodes[bias.0].value.data();
            for r in 0..rows {
                let xr = &xd[r * d..(r + 1) * d];
                let mu = xr.iter().copied().sum::<T>() / dn;
                let var = xr.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / dn;
                let rstd = T::ONE / (var + eps).sqrt();
                for ((o, &xi), (&gi, &bi)) in
                    out[r * d..(r + 1) * d].iter_mut().zip(xr).zip(gd.iter().zip(bd))
                {
                    *o = act.apply((xi - mu) * rstd * gi + bi);
                }
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            Tensor::new(sx, out),
            Op::LnAffineAct { x, gain, bias, eps, act },
            rg,
            "ln_affine_act",
        )
    }

    /// Partitions the last axis into groups of `p` and applies a softmax to
    /// each group, projecting every group onto the probability simplex.
    pub fn simnorm(&mut self, x: Var, p: usize) -> Var {
        let v = &self.nodes[x.0].value;
        let d = v.last_dim();
        assert!(
            p >= 1 && v.ndim() >= 1 && d % p == 0,
            "simnorm: last dim {d} not divisible by group size {p} (shape {:?})",
            v.shape()
        );
        let groups = v.numel() / p;
        let mut out = vec![T::ZERO; v.numel()];
        for gi in 0..groups {
            let row = &v.data()[gi * p..(gi + 1) * p];
            let mut mx = row[0];
            for &xv in row {
                mx = mx.maxv(xv);
            }
            let mut z = T::ZERO;
            for (o, &xv) in out[gi * p..(gi + 1) * p].iter_mut().zip(row) {
                *o = (xv - mx).exp();
                z += *o;
            }
            for o in &mut out[gi * p..(gi + 1) * p] {
                *o = *o / z;
            }
        }
        let shape = v.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, out), Op::SimNorm { x, p }, rg, "simnorm")
    }

    // ---- backward ----

    /// Seeds the root with 1 and accumulates gradients into every reachable
    /// node that requires them. The root must be a scalar.
    pub fn backward(&mut self, root: Var) -> Result<(), TapeError> {
        if let Some((node, op)) = self.first_nonfinite {
            return Err(TapeError::NonFinite { op, node });
        }
        if self.nodes[root.0].value.numel() != 1 {
            return Err(TapeError::NonScalarRoot(self.nodes[root.0].value.shape().to_vec()));
        }
        // Leaf gradients persist and accumulate across backward calls;
        // intermediate buffers are cleared so each pass re-propagates from a
        // fresh seed rather than compounding earlier flow.
        for idx in 0..self.nodes.len() {
            if !matches!(self.nodes[idx].op, Op::Leaf) {
                self.grads[idx] = None;
            }
        }
        let seed = Tensor::full(self.nodes[root.0].value.shape().to_vec(), T::ONE);
        self.acc_grad(root, seed);

        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad || self.grads[idx].is_none() {
                continue;
            }
            let g = self.grads[idx].clone().expect("checked above");
            self.backprop_node(idx, &g);
        }
        Ok(())
    }

    fn acc_grad(&mut self, v: Var, contribution: Tensor<T>) {
        debug_assert_eq!(
            contribution.shape(),
            self.nodes[v.0].value.shape(),
            "gradient shape mismatch at node {}",
            v.0
        );
        match &mut self.grads[v.0] {
            Some(g) => {
                for (gi, &ci) in g.data_mut().iter_mut().zip(contribution.data()) {
                    *gi += ci;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    /// Adds `grad` into parent `p`, reducing over broadcast leading axes when
    /// the parent is smaller than the op output.
    fn acc_grad_reduced(&mut self, p: Var, grad_data: &[T], out_numel: usize) {
        let pshape = self.nodes[p.0].value.shape().to_vec();
        let pn: usize = pshape.iter().product();
        if pn == out_numel {
            self.acc_grad(p, Tensor::new(pshape, grad_data.to_vec()));
        } else {
            let mut red = vec![T::ZERO; pn];
            for (i, &g) in grad_data.iter().enumerate() {
                red[i % pn] += g;
            }
            self.acc_grad(p, Tensor::new(pshape, red));
        }
    }

    fn backprop_node(&mut self, idx: usize, g: &Tensor<T>) {
        // `Op` stores parent handles by value, so cloning the small enum data
        // up front sidesteps borrow conflicts with acc_grad below.
        macro_rules! val {
            ($v:expr) => {
                self.nodes[$v.0].value.data()
            };
        }
        match &self.nodes[idx].op {
            Op::Leaf | Op::StopGrad => {}
            Op::Neg(a) => {
                let a = *a;
                if self.rg(a) {
                    let contrib = g.map(|x| -x);
                    self.acc_grad(a, contrib);
                }
            }
            Op::Exp(a) => {
                let a = *a;
                if self.rg(a) {
                    let y = self.nodes[idx].value.data();
                    let d: Vec<T> = g.data().iter().zip(y).map(|(&gi, &yi)| gi * yi).collect();
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    self.acc_grad(a, Tensor::new(shape, d));
                }
            }
            Op::Log(a) => {
                let a = *a;
                if self.rg(a) {
                    let d: Vec<T> =
                        g.data().iter().zip(val!(a)).map(|(&gi, &xi)| gi / xi).collect();
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    self.acc_grad(a, Tensor::new(shape, d));
                }
            }
            Op::Tanh(a) => {
                let a = *a;
                if self.rg(a) {
                    let y = self.nodes[idx].value.data();
                    let d: Vec<T> =
                        g.data().iter().zip(y).map(|(&gi, &yi)| gi * (T::ONE - yi * yi)).collect();
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    self.acc_grad(a, Tensor::new(shape, d));
                }
            }
            Op::Relu(a) => {
                let a = *a;
                if self.rg(a) {
                    let d: Vec<T> = g
                        .data()
                        .iter()
                        .zip(val!(a))
                        .map(|(&gi, &xi)| if xi > T::ZERO { gi } else { T::ZERO })
                        .collect();
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    self.acc_grad(a, Tensor::new(shape, d));
                }
            }
            Op::Mish(a) => {
                let a = *a;
                if self.rg(a) {
                    let d: Vec<T> = g
                        .data()
                        .iter()
                        .zip(val!(a))
                        .map(|(&gi, &xi)| {
                            let sp = softplus(xi);
                            let tsp = sp.tanh();
                            let sig = T::ONE / (T::ONE + (-xi).exp());
                            gi * (tsp + xi * (T::ONE - tsp * tsp) * sig)
                        })
                        .collect();
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    self.acc_grad(a, Tensor::new(shape, d));
                }
            }
            Op::Sqrt(a) => {
                let a = *a;
                if self.rg(a) {
                    let y = self.nodes[idx].value.data();
                    let half = T::from_f64(0.5);
                    let d: Vec<T> =
                        g.data().iter().zip(y).map(|(&gi, &yi)| gi * half / yi).collect();
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    self.acc_grad(a, Tensor::new(shape, d));
                }
            }
            Op::Square(a) => {
                let a = *a;
                if self.rg(a) {
                    let two = T::from_f64(2.0);
                    let d: Vec<T> =
                        g.data().iter().zip(val!(a)).map(|(&gi, &xi)| gi * two * xi).collect();
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    self.acc_grad(a, Tensor::new(shape, d));
                }
            }
            Op::Sin(a) => {
                let a = *a;
                if self.rg(a) {
                    let d: Vec<T> =
                        g.data().iter().zip(val!(a)).map(|(&gi, &xi)| gi * xi.cos()).collect();
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    self.acc_grad(a, Tensor::new(shape, d));
                }
            }
            Op::Cos(a) => {
                let a = *a;
                if self.rg(a) {
                    let d: Vec<T> =
                        g.data().iter().zip(val!(a)).map(|(&gi, &xi)| -(gi * xi.sin())).collect();
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    self.acc_grad(a, Tensor::new(shape, d));
                }
            }
            Op::Scale(a, c) => {
                let (a, c) = (*a, *c);
                if self.rg(a) {
                    let contrib = g.map(|x| x * c);
                    self.acc_grad(a, contrib);
                }
            }
            Op::AddScalar(a) => {
                let a = *a;
                if self.rg(a) {
                    self.acc_grad(a, g.clone());
                }
            }
            Op::Clamp(a, lo, hi) => {
                let (a, lo, hi) = (*a, *lo, *hi);
                if self.rg(a) {
                    let d: Vec<T> = g
                        .data()
                        .iter()
                        .zip(val!(a))
                        .map(|(&gi, &xi)| if xi >= lo && xi <= hi { gi } else { T::ZERO })
                        .collect();
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    self.acc_grad(a, Tensor::new(shape, d));
                }
            }
            Op::WrapAngle(a) => {
                let a = *a;
                if self.rg(a) {
                    self.acc_grad(a, g.clone());
                }
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                if self.rg(a) {
                    self.acc_grad_reduced(a, g.data(), g.numel());
                }
                if self.rg(b) {
                    self.acc_grad_reduced(b, g.data(), g.numel());
                }
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                if self.rg(a) {
                    self.acc_grad_reduced(a, g.data(), g.numel());
                }
                if self.rg(b) {
                    let neg: Vec<T> = g.data().iter().map(|&x| -x).collect();
                    self.acc_grad_reduced(b, &neg, g.numel());
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let (la, lb) = (val!(a).len(), val!(b).len());
                if self.rg(a) {
                    let db = val!(b);
                    let d: Vec<T> =
                        g.data().iter().enumerate().map(|(i, &gi)| gi * db[i % lb]).collect();
                    self.acc_grad_reduced(a, &d, g.numel());
                }
                if self.rg(b) {
                    let da = val!(a);
                    let d: Vec<T> =
                        g.data().iter().enumerate().map(|(i, &gi)| gi * da[i % la]).collect();
                    self.acc_grad_reduced(b, &d, g.numel());
                }
            }
            Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                let (la, lb) = (val!(a).len(), val!(b).len());
                if self.rg(a) {
                    let db = val!(b);
                    let d: Vec<T> =
                        g.data().iter().enumerate().map(|(i, &gi)| gi / db[i % lb]).collect();
                    self.acc_grad_reduced(a, &d, g.numel());
                }
                if self.rg(b) {
                    let da = val!(a);
                    let db = val!(b);
                    let d: Vec<T> = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &gi)| {
                            let bi = db[i % lb];
                            -(gi * da[i % la] / (bi * bi))
                        })
                        .collect();
                    self.acc_grad_reduced(b, &d, g.numel());
                }
            }
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                let m = self.nodes[a.0].value.shape()[0];
                let k = self.nodes[a.0].value.shape()[1];
                let n = self.nodes[b.0].value.shape()[1];
                if self.rg(a) {
                    // dA = G @ B^T, reading B transposed via strides.
                    let mut da = vec![T::ZERO; m * k];
                    T::gemm(m, n, k, g.data(), n as isize, 1, val!(b), 1, n as isize, &mut da);
                    self.acc_grad(a, Tensor::new([m, k], da));
                }
                if self.rg(b) {
                    // dB = A^T @ G.
                    let mut db = vec![T::ZERO; k * n];
                    T::gemm(k, m, n, val!(a), 1, k as isize, g.data(), n as isize, 1, &mut db);
                    self.acc_grad(b, Tensor::new([k, n], db));
                }
            }
            Op::Sum(a) => {
                let a = *a;
                if self.rg(a) {
                    let gs = g.item();
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    self.acc_grad(a, Tensor::full(shape, gs));
                }
            }
            Op::Mean(a) => {
                let a = *a;
                if self.rg(a) {
                    let n = T::from_f64(self.nodes[a.0].value.numel() as f64);
                    let gs = g.item() / n;
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    self.acc_grad(a, Tensor::full(shape, gs));
                }
            }
            Op::SumLast(a) => {
                let a = *a;
                if self.rg(a) {
                    let d = self.nodes[a.0].value.last_dim();
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    let mut out = Vec::with_capacity(shape.iter().product());
                    for &gr in g.data() {
                        out.extend(std::iter::repeat(gr).take(d));
                    }
                    self.acc_grad(a, Tensor::new(shape, out));
                }
            }
            Op::SoftmaxLast(a) => {
                let a = *a;
                if self.rg(a) {
                    let y = self.nodes[idx].value.data();
                    let d = self.nodes[idx].value.last_dim();
                    let rows = self.nodes[idx].value.lead_rows();
                    let mut out = vec![T::ZERO; y.len()];
                    for r in 0..rows {
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &g.data()[r * d..(r + 1) * d];
                        let dot: T = yr.iter().zip(gr).map(|(&yi, &gi)| yi * gi).sum();
                        for ((o, &yi), &gi) in out[r * d..(r + 1) * d].iter_mut().zip(yr).zip(gr) {
                            *o = yi * (gi - dot);
                        }
                    }
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    self.acc_grad(a, Tensor::new(shape, out));
                }
            }
            Op::LayerNormLast(a, eps) => {
                let (a, eps) = (*a, *eps);
                if self.rg(a) {
                    let x = val!(a);
                    let d = self.nodes[a.0].value.last_dim();
                    let rows = self.nodes[a.0].value.lead_rows();
                    let dn = T::from_f64(d as f64);
                    let mut out = vec![T::ZERO; x.len()];
                    for r in 0..rows {
                        let xr = &x[r * d..(r + 1) * d];
                        let gr = &g.data()[r * d..(r + 1) * d];
                        let mu = xr.iter().copied().sum::<T>() / dn;
                        let var = xr.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / dn;
                        let rstd = T::ONE / (var + eps).sqrt();
                        let gmean = gr.iter().copied().sum::<T>() / dn;
                        let mut gydot = T::ZERO;
                        for (&xi, &gi) in xr.iter().zip(gr) {
                            gydot += gi * (xi - mu) * rstd;
                        }
                        let gydot = gydot / dn;
                        for ((o, &xi), &gi) in out[r * d..(r + 1) * d].iter_mut().zip(xr).zip(gr) {
                            let yi = (xi - mu) * rstd;
                            *o = (gi - gmean - yi * gydot) * rstd;
                        }
                    }
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    self.acc_grad(a, Tensor::new(shape, out));
                }
            }
            Op::Mse(a, b) => {
                let (a, b) = (*a, *b);
                let gs = g.item();
                let n = T::from_f64(val!(a).len() as f64);
                let two = T::from_f64(2.0);
                if self.rg(a) || self.rg(b) {
                    let d: Vec<T> = val!(a)
                        .iter()
                        .zip(val!(b))
                        .map(|(&x, &y)| gs * two * (x - y) / n)
                        .collect();
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    if self.rg(a) {
                        self.acc_grad(a, Tensor::new(shape.clone(), d.clone()));
                    }
                    if self.rg(b) {
                        let neg: Vec<T> = d.iter().map(|&x| -x).collect();
                        self.acc_grad(b, Tensor::new(shape, neg));
                    }
                }
            }
            Op::CeLogitsLast(l, t) => {
                let (l, t) = (*l, *t);
                let d = self.nodes[l.0].value.last_dim();
                let rows = self.nodes[l.0].value.lead_rows();
                let dl = val!(l);
                let dt = val!(t);
                let rg_l = self.rg(l);
                let rg_t = self.rg(t);
                let mut gl = if rg_l { vec![T::ZERO; dl.len()] } else { Vec::new() };
                let mut gt = if rg_t { vec![T::ZERO; dt.len()] } else { Vec::new() };
                for r in 0..rows {
                    let gr = g.data()[r];
                    let lrow = &dl[r * d..(r + 1) * d];
                    let trow = &dt[r * d..(r + 1) * d];
                    let mut mx = lrow[0];
                    for &x in lrow {
                        mx = mx.maxv(x);
                    }
                    let z: T = lrow.iter().map(|&x| (x - mx).exp()).sum();
                    let tsum: T = trow.iter().copied().sum();
                    if rg_l {
                        for (j, (&lj, &tj)) in lrow.iter().zip(trow).enumerate() {
                            let p = (lj - mx).exp() / z;
                            gl[r * d + j] = gr * (p * tsum - tj);
                        }
                    }
                    if rg_t {
                        let lse = z.ln() + mx;
                        for (j, &lj) in lrow.iter().enumerate() {
                            gt[r * d + j] = gr * (lse - lj);
                        }
                    }
                }
                if rg_l {
                    let shape = self.nodes[l.0].value.shape().to_vec();
                    self.acc_grad(l, Tensor::new(shape, gl));
                }
                if rg_t {
                    let shape = self.nodes[t.0].value.shape().to_vec();
                    self.acc_grad(t, Tensor::new(shape, gt));
                }
            }
            Op::ConcatLast(parts) => {
                let parts = parts.clone();
                let total = self.nodes[idx].value.last_dim();
                let rows = self.nodes[idx].value.lead_rows();
                let mut off = 0;
                for p in parts {
                    let d = self.nodes[p.0].value.last_dim();
                    if self.rg(p) {
                        let mut out = Vec::with_capacity(rows * d);
                        for r in 0..rows {
                            out.extend_from_slice(&g.data()[r * total + off..r * total + off + d]);
                        }
                        let shape = self.nodes[p.0].value.shape().to_vec();
                        self.acc_grad(p, Tensor::new(shape, out));
                    }
                    off += d;
                }
            }
            Op::SliceLast { src, start, len } => {
                let (src, start, len) = (*src, *start, *len);
                if self.rg(src) {
                    let d = self.nodes[src.0].value.last_dim();
                    let rows = self.nodes[src.0].value.lead_rows();
                    let mut out = vec![T::ZERO; self.nodes[src.0].value.numel()];
                    for r in 0..rows {
                        out[r * d + start..r * d + start + len]
                            .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                    }
                    let shape = self.nodes[src.0].value.shape().to_vec();
                    self.acc_grad(src, Tensor::new(shape, out));
                }
            }
            Op::Reshape(a) => {
                let a = *a;
                if self.rg(a) {
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    self.acc_grad(a, g.reshaped(shape));
                }
            }
            Op::Linear { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let m = self.nodes[x.0].value.shape()[0];
                let k = self.nodes[x.0].value.shape()[1];
                let n = self.nodes[w.0].value.shape()[1];
                if self.rg(x) {
                    let mut dx = vec![T::ZERO; m * k];
                    T::gemm(m, n, k, g.data(), n as isize, 1, val!(w), 1, n as isize, &mut dx);
                    self.acc_grad(x, Tensor::new([m, k], dx));
                }
                if self.rg(w) {
                    let mut dw = vec![T::ZERO; k * n];
                    T::gemm(k, m, n, val!(x), 1, k as isize, g.data(), n as isize, 1, &mut dw);
                    self.acc_grad(w, Tensor::new([k, n], dw));
                }
                if self.rg(b) {
                    let mut db = vec![T::ZERO; n];
                    for row in g.data().chunks_exact(n) {
                        for (d, &gv) in db.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                    self.acc_grad(b, Tensor::new([n], db));
                }
            }
            Op::LnAffineAct { x, gain, bias, eps, act } => {
                let (x, gain, bias, eps, act) = (*x, *gain, *bias, *eps, *act);
                let d = self.nodes[x.0].value.last_dim();
                let rows = self.nodes[x.0].value.lead_rows();
                let dn = T::from_f64(d as f64);
                let rg_x = self.rg(x);
                let rg_g = self.rg(gain);
                let rg_b = self.rg(bias);
                let mut dx = if rg_x { vec![T::ZERO; rows * d] } else { Vec::new() };
                let mut dgain = vec![T::ZERO; d];
                let mut dbias = vec![T::ZERO; d];
                {
                    let xd = val!(x);
                    let gaind = val!(gain);
                    let biasd = val!(bias);
                    let mut yhat = vec![T::ZERO; d];
                    let mut dy = vec![T::ZERO; d];
                    for r in 0..rows {
                        let xr = &xd[r * d..(r + 1) * d];
                        let gr = &g.data()[r * d..(r + 1) * d];
                        let mu = xr.iter().copied().sum::<T>() / dn;
                        let var = xr.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / dn;
                        let rstd = T::ONE / (var + eps).sqrt();
                        for j in 0..d {
                            yhat[j] = (xr[j] - mu) * rstd;
                            let y = yhat[j] * gaind[j] + biasd[j];
                            dy[j] = gr[j] * act.derivative(y);
                        }
                        if rg_g || rg_b {
                            for j in 0..d {
                                dgain[j] += dy[j] * yhat[j];
                                dbias[j] += dy[j];
                            }
                        }
                        if rg_x {
                            let mut dyh_mean = T::ZERO;
                            let mut dyh_dot = T::ZERO;
                            for j in 0..d {
                                let dyh = dy[j] * gaind[j];
                                dyh_mean += dyh;
                                dyh_dot += dyh * yhat[j];
                            }
                            dyh_mean = dyh_mean / dn;
                            dyh_dot = dyh_dot / dn;
                            for j in 0..d {
                                let dyh = dy[j] * gaind[j];
                                dx[r * d + j] = (dyh - dyh_mean - yhat[j] * dyh_dot) * rstd;
                            }
                        }
                    }
                }
                if rg_x {
                    let shape = self.nodes[x.0].value.shape().to_vec();
                    self.acc_grad(x, Tensor::new(shape, dx));
                }
                if rg_g {
                    self.acc_grad(gain, Tensor::new([d], dgain));
                }
                if rg_b {
                    self.acc_grad(bias, Tensor::new([d], dbias));
                }
            }
            Op::SimNorm { x, p } => {
                let (x, p) = (*x, *p);
                if self.rg(x) {
                    let y = self.nodes[idx].value.data();
                    let groups = y.len() / p;
                    let mut dx = vec![T::ZERO; y.len()];
                    for gi in 0..groups {
                        let yr = &y[gi * p..(gi + 1) * p];
                        let gr = &g.data()[gi * p..(gi + 1) * p];
                        let dot: T = yr.iter().zip(gr).map(|(&yi, &gi_)| yi * gi_).sum();
                        for ((o, &yi), &gv) in dx[gi * p..(gi + 1) * p].iter_mut().zip(yr).zip(gr)
                        {
                            *o = yi * (gv - dot);
                        }
                    }
                    let shape = self.nodes[x.0].value.shape().to_vec();
                    self.acc_grad(x, Tensor::new(shape, dx));
                }
            }
        }
    }
}

/// Numerically stable `ln(1 + exp(x))`.
fn softplus<T: Scalar>(x: T) -> T {
    x.maxv(T::ZERO) + (T::ONE + (-x.abs()).exp()).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::op_oracle_suite;

    #[test]
    fn every_op_matches_finite_differences_in_f64() {
        for (name, err) in op_oracle_suite() {
            assert!(err <= 1e-6, "op `{name}` disagrees with finite differences: {err:.3e}");
        }
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![0.0f64, -1.0, 2.0]));
        let y = tape.relu(x);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn clamp_subgradient_at_boundary_is_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![-0.5f64, 0.5, 0.0, 0.7, -0.9]));
        let y = tape.clamp(x, -0.5, 0.5);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn wrap_angle_is_periodic_with_identity_gradient() {
        let tau = std::f64::consts::TAU;
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![0.3, 0.3 + tau, 0.3 - 2.0 * tau, -2.9]));
        let y = tape.wrap_angle(x);
        for &v in tape.value(y).data() {
            assert!((-std::f64::consts::PI..std::f64::consts::PI).contains(&v));
        }
        assert!(tape.value(y).data().iter().take(3).all(|&v| (v - 0.3).abs() < 1e-12));
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0f64, 2.0]));
        let y = tape.square(x);
        let frozen = tape.stop_gradient(y);
        let z = tape.mul(frozen, x);
        let s = tape.sum(z);
        tape.backward(s).unwrap();
        // d/dx of sg(x^2) * x is just sg(x^2) = x^2.
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 4.0]);
    }

    #[test]
    fn disconnected_subgraph_reads_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0f64]));
        let unused = tape.leaf(Tensor::from_vec(vec![5.0f64, 6.0]));
        let _dangling = tape.square(unused);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(tape.grad(unused).is_none());
        assert_eq!(tape.grad_or_zeros(unused).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_root_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0f64, 2.0]));
        let y = tape.square(x);
        assert!(matches!(tape.backward(y), Err(TapeError::NonScalarRoot(_))));
    }

    #[test]
    fn debug_checks_surface_non_finite_forward_values() {
        let mut tape = Tape::<f64>::new().with_debug_checks();
        let x = tape.leaf(Tensor::from_vec(vec![-1.0f64]));
        let y = tape.log(x); // ln of a negative number: NaN
        let s = tape.sum(y);
        match tape.backward(s) {
            Err(TapeError::NonFinite { op, .. }) => assert_eq!(op, "log"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn repeated_backward_accumulates_additively() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![3.0f64]));
        let y = tape.square(x);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        let once = tape.grad(x).unwrap().data()[0];
        tape.backward(s).unwrap();
        let twice = tape.grad(x).unwrap().data()[0];
        assert_eq!(once, 6.0);
        assert_eq!(twice, 12.0);
    }

    #[test]
    fn reset_clears_nodes_for_reuse() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0f64]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        tape.reset();
        assert!(tape.is_empty());
        let x2 = tape.leaf(Tensor::from_vec(vec![2.0f64]));
        let s2 = tape.sum(x2);
        tape.backward(s2).unwrap();
        assert_eq!(tape.grad(x2).unwrap().data(), &[1.0]);
    }

    #[test]
    #[should_panic(expected = "matmul: incompatible shapes")]
    fn matmul_shape_mismatch_names_op_and_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::<f32>::zeros([2, 3]));
        let b = tape.leaf(Tensor::<f32>::zeros([4, 2]));
        let _ = tape.matmul(a, b);
    }

    #[test]
    #[should_panic(expected = "add: incompatible shapes")]
    fn broadcast_requires_trailing_suffix_match() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::<f32>::zeros([2, 3]));
        let b = tape.leaf(Tensor::<f32>::zeros([2]));
        let _ = tape.add(a, b);
    }

    #[test]
    fn constants_do_not_collect_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![2.0f64]));
        let c = tape.constant(Tensor::from_vec(vec![3.0f64]));
        let y = tape.mul(x, c);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[3.0]);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn f32_tanh_matches_f64_reference() {
        for i in -400..=400 {
            let x = i as f32 * 0.025;
            let fast = Scalar::tanh(x);
            let refv = (x as f64).tanh() as f32;
            assert!(
                (fast - refv).abs() <= 2e-7,
                "tanh({x}) = {fast}, reference {refv}"
            );
        }
        assert_eq!(Scalar::tanh(50.0f32), 1.0);
        assert_eq!(Scalar::tanh(-50.0f32), -1.0);
    }

    #[test]
    fn fused_linear_matches_primitive_composition() {
        let x = Tensor::new([3, 4], (0..12).map(|i| i as f32 * 0.1 - 0.5).collect());
        let w = Tensor::new([4, 2], (0..8).map(|i| i as f32 * 0.05).collect());
        let b = Tensor::from_vec(vec![0.1f32, -0.2]);

        let mut t1 = Tape::new();
        let (xv, wv, bv) = (t1.leaf(x.clone()), t1.leaf(w.clone()), t1.leaf(b.clone()));
        let fused = t1.linear(xv, wv, bv);

        let mut t2 = Tape::new();
        let (xv2, wv2, bv2) = (t2.leaf(x), t2.leaf(w), t2.leaf(b));
        let mm = t2.matmul(xv2, wv2);
        let composed = t2.add(mm, bv2);

        assert_eq!(t1.value(fused).data(), t2.value(composed).data());
    }
}
