//! Discrete reward codec: symlog two-hot encoding and its two decode paths.
//!
//! Rewards are compressed with symlog, clamped to `[vmin, vmax]`, and spread
//! over the two adjacent bins of a uniform grid. Decoding has two variants:
//!
//! - [`TwoHotCodec::decode_pseudo`]: expectation of the bin centers under the
//!   softmax of the logits, *without* the final symexp. The training path
//!   deliberately stays in the compressed symlog space; the results are
//!   "pseudo-rewards" whose gradients are what policy extraction
//!   differentiates.
//! - [`TwoHotCodec::decode_eval`]: the same expectation mapped back through
//!   symexp, used wherever real-scale rewards are needed (value targets,
//!   logging, evaluation).
//! - [`TwoHotCodec::decode_real_diff`]: a differentiable variant of the
//!   real-scale decode for gradient diagnostics.

use crate::autodiff::{Tape, Tensor, Var};

/// `sign(x) * ln(1 + |x|)`.
pub fn symlog(x: f32) -> f32 {
    x.signum() * (1.0 + x.abs()).ln()
}

/// Inverse of [`symlog`]: `sign(x) * (exp(|x|) - 1)`.
pub fn symexp(x: f32) -> f32 {
    x.signum() * (x.abs().exp() - 1.0)
}

/// Uniform-grid two-hot codec over symlog-compressed values.
#[derive(Clone, Debug)]
pub struct TwoHotCodec {
    num_bins: usize,
    vmin: f32,
    vmax: f32,
    centers: Vec<f32>,
}

impl TwoHotCodec {
    pub fn new(num_bins: usize, vmin: f32, vmax: f32) -> Self {
        assert!(num_bins >= 2, "two-hot codec needs at least 2 bins");
        assert!(vmin < vmax, "two-hot codec needs vmin < vmax");
        let step = (vmax - vmin) / (num_bins - 1) as f32;
        let centers = (0..num_bins).map(|i| vmin + step * i as f32).collect();
        TwoHotCodec { num_bins, vmin, vmax, centers }
    }

    pub fn num_bins(&self) -> usize {
        self.num_bins
    }

    /// Bin centers in symlog space, `linspace(vmin, vmax, num_bins)`.
    pub fn centers(&self) -> &[f32] {
        &self.centers
    }

    fn bin_size(&self) -> f32 {
        (self.vmax - self.vmin) / (self.num_bins - 1) as f32
    }

    /// Writes the two-hot distribution for reward `r` into `out`
    /// (length `num_bins`; cleared first).
    pub fn encode_into(&self, r: f32, out: &mut [f32]) {
        assert_eq!(out.len(), self.num_bins, "two-hot encode: wrong buffer size");
        out.fill(0.0);
        let x = symlog(r).clamp(self.vmin, self.vmax);
        let pos = (x - self.vmin) / self.bin_size();
        let idx = (pos.floor() as usize).min(self.num_bins - 1);
        let offset = pos - idx as f32;
        if idx + 1 < self.num_bins {
            out[idx] = 1.0 - offset;
            out[idx + 1] = offset;
        } else {
            // Clamped onto the top edge: all mass in the last bin.
            out[idx] = 1.0;
        }
    }

    /// Two-hot distribution for reward `r`.
    pub fn encode(&self, r: f32) -> Vec<f32> {
        let mut out = vec![0.0; self.num_bins];
        self.encode_into(r, &mut out);
        out
    }

    /// Dense `[B, num_bins]` batch of two-hot targets.
    pub fn encode_batch(&self, rewards: &[f32]) -> Tensor<f32> {
        let mut data = vec![0.0; rewards.len() * self.num_bins];
        for (r, chunk) in rewards.iter().zip(data.chunks_exact_mut(self.num_bins)) {
            self.encode_into(*r, chunk);
        }
        Tensor::new([rewards.len(), self.num_bins], data)
    }

    /// Differentiable symlog-space decode of `[.., num_bins]` logits:
    /// `sum(softmax(logits) * centers)` per row, shape `[..]`.
    pub fn decode_pseudo(&self, tape: &mut Tape<f32>, logits: Var) -> Var {
        let probs = tape.softmax_last(logits);
        let centers = tape.constant(Tensor::from_vec(self.centers.clone()));
        let weighted = tape.mul(probs, centers);
        tape.sum_last(weighted)
    }

    /// Differentiable *real-scale* decode, for diagnostics that must compare
    /// model rewards against true-environment rewards on the same scale.
    ///
    /// Uses the sign-free identity `symexp(x) = exp(relu(x)) - exp(relu(-x))`
    /// (exact for every `x`, gradient `e^|x|` except at 0), so the whole
    /// path stays on the tape.
    pub fn decode_real_diff(&self, tape: &mut Tape<f32>, logits: Var) -> Var {
        let x = self.decode_pseudo(tape, logits);
        let pos = tape.relu(x);
        let epos = tape.exp(pos);
        let nx = tape.neg(x);
        let neg = tape.relu(nx);
        let eneg = tape.exp(neg);
        tape.sub(epos, eneg)
    }

    /// Real-scale decode of one probability distribution (no gradients).
    pub fn decode_eval_dist(&self, probs: &[f32]) -> f32 {
        assert_eq!(probs.len(), self.num_bins, "two-hot decode: wrong distribution size");
        let x: f32 = probs.iter().zip(&self.centers).map(|(&p, &c)| p * c).sum();
        symexp(x)
    }

    /// Real-scale decode of `[.., num_bins]` logits, one value per row.
    pub fn decode_eval(&self, logits: &Tensor<f32>) -> Vec<f32> {
        let d = logits.last_dim();
        assert_eq!(d, self.num_bins, "two-hot decode: last dim {d} != {}", self.num_bins);
        logits
            .data()
            .chunks_exact(d)
            .map(|row| {
                let mx = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let mut z = 0.0f32;
                let mut acc = 0.0f32;
                for (&l, &c) in row.iter().zip(&self.centers) {
                    let e = (l - mx).exp();
                    z += e;
                    acc += e * c;
                }
                symexp(acc / z)
            })
            .collect()
    }
}
