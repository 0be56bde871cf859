//! Adam with global-norm gradient clipping.

use crate::autodiff::Tensor;

/// Hyperparameters for [`Adam`].
#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Global-norm clip applied across all parameter gradients jointly;
    /// `None` disables clipping.
    pub grad_clip: Option<f32>,
}

impl AdamConfig {
    pub fn new(lr: f32) -> Self {
        AdamConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, grad_clip: None }
    }

    pub fn grad_clip(mut self, clip: f32) -> Self {
        self.grad_clip = Some(clip);
        self
    }
}

/// Outcome of one [`Adam::step`].
#[derive(Clone, Copy, Debug)]
pub struct StepReport {
    /// Global gradient norm before clipping.
    pub grad_norm: f32,
    /// Whether the clip rescaled the gradients.
    pub clipped: bool,
    /// Whether the update was skipped because a gradient was non-finite.
    pub skipped: bool,
}

/// First-moment/second-moment optimizer state for a fixed parameter list.
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
    t: u64,
}

impl Adam {
    /// State sized from the parameter shapes it will update.
    pub fn new(cfg: AdamConfig, params: &[&Tensor<f32>]) -> Self {
        let m = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        let v = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        Adam { cfg, m, v, t: 0 }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    /// Applies one update in place. Gradients pair with `params` by position.
    ///
    /// Non-finite gradients skip the update entirely (parameters and moments
    /// untouched) and report it, so callers can log and continue from the last
    /// good state.
    pub fn step(&mut self, params: &mut [&mut Tensor<f32>], grads: &[Tensor<f32>]) -> StepReport {
        assert_eq!(params.len(), grads.len(), "adam: {} params vs {} grads", params.len(), grads.len());
        assert_eq!(params.len(), self.m.len(), "adam: state built for {} params", self.m.len());

        let mut sq_sum = 0.0f64;
        let mut finite = true;
        for g in grads {
            for &x in g.data() {
                if !x.is_finite() {
                    finite = false;
                }
                sq_sum += (x as f64) * (x as f64);
            }
        }
        let grad_norm = (sq_sum as f32).sqrt();
        if !finite || !grad_norm.is_finite() {
            return StepReport { grad_norm: f32::NAN, clipped: false, skipped: true };
        }

        let mut scale = 1.0f32;
        let mut clipped = false;
        if let Some(clip) = self.cfg.grad_clip {
            if grad_norm > clip {
                scale = clip / grad_norm;
                clipped = true;
            }
        }

        self.t += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        // With beta = 0 the bias correction divides by exactly 1.
        let corr1 = 1.0 - b1.powi(self.t as i32);
        let corr2 = 1.0 - b2.powi(self.t as i32);
        for ((p, g), (m, v)) in
            params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            debug_assert_eq!(p.shape(), g.shape(), "adam: param/grad shape mismatch");
            for ((pv, &gv), (mv, vv)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                let gv = gv * scale;
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let m_hat = *mv / corr1;
                let v_hat = *vv / corr2;
                *pv -= self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
        }
        StepReport { grad_norm, clipped, skipped: false }
    }
}
