//! Why do smooth world models beat the true dynamics for gradient-based
//! policy search? This module measures it directly: Monte-Carlo studies of
//! policy-gradient mean, variance, and empirical signal-to-noise ratio
//! through either the true differentiable dynamics or a frozen world model,
//! plus landscape sweeps and optimality gaps on the ball-wall task.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Tensor, Var};
use crate::envs::{BallWall, DiffEnv};
use crate::worldmodel::WorldModel;
use crate::{PwmError, Result};

// ---- empirical signal-to-noise ratio ----

/// `ESNR = Σ mean² / Σ variance` over all parameter coordinates.
///
/// Conventions for the degenerate denominators: `0/0 -> 0` (no signal, no
/// noise) and `x/0 -> +∞` for `x > 0` (a deterministic, nonzero gradient has
/// infinite signal-to-noise).
pub fn esnr(mean: &[f32], variance: &[f32]) -> f32 {
    assert_eq!(mean.len(), variance.len(), "esnr: mismatched lengths");
    let signal: f32 = mean.iter().map(|&m| m * m).sum();
    let noise: f32 = variance.iter().sum();
    if noise == 0.0 {
        if signal == 0.0 {
            0.0
        } else {
            f32::INFINITY
        }
    } else {
        signal / noise
    }
}

/// Per-coordinate sample mean and Bessel-corrected variance of gradient
/// vectors (all the same length).
pub fn gradient_moments(samples: &[Vec<f32>]) -> (Vec<f32>, Vec<f32>) {
    assert!(samples.len() >= 2, "moments need at least 2 samples");
    let dim = samples[0].len();
    // Welford in f64 for stable accumulation.
    let mut mean = vec![0.0f64; dim];
    let mut m2 = vec![0.0f64; dim];
    for (i, s) in samples.iter().enumerate() {
        assert_eq!(s.len(), dim, "moments: inconsistent gradient lengths");
        let n = (i + 1) as f64;
        for (j, &x) in s.iter().enumerate() {
            let x = x as f64;
            let delta = x - mean[j];
            mean[j] += delta / n;
            m2[j] += delta * (x - mean[j]);
        }
    }
    let denom = (samples.len() - 1) as f64;
    (
        mean.iter().map(|&m| m as f32).collect(),
        m2.iter().map(|&v| (v / denom) as f32).collect(),
    )
}

// ---- Monte-Carlo gradient studies ----

/// What the gradient is taken through.
pub enum GradSource<'a> {
    /// The environment's own differentiable dynamics and reward.
    TrueDynamics { env: &'a dyn DiffEnv },
    /// A frozen world model; rewards are decoded back to the real scale
    /// differentiably so both sources measure the same objective.
    WorldModel { wm: &'a WorldModel, task: usize },
}

impl GradSource<'_> {
    pub fn label(&self) -> &'static str {
        match self {
            GradSource::TrueDynamics { .. } => "true-dynamics",
            GradSource::WorldModel { .. } => "world-model",
        }
    }
}

/// The fixed evaluation policy of a gradient study: an open-loop sequence of
/// normalized mean actions. Sample `i` executes `a_t = θ_t + σ·ε_t^(i)`,
/// with the same `ε` replayed bit-identically across gradient sources
/// (common random numbers), and the study differentiates the return with
/// respect to `θ`. Environments clamp actions to `[-1, 1]` internally and
/// the world-model source applies the identical clamp, so both sources see
/// the same action map.
#[derive(Clone, Debug)]
pub struct OpenLoopPolicy {
    /// `[max_horizon, act_dim]`.
    pub actions: Tensor<f32>,
    /// Exploration noise scale; 0 makes every sample identical.
    pub sigma: f32,
}

impl OpenLoopPolicy {
    pub fn max_horizon(&self) -> usize {
        self.actions.shape()[0]
    }

    pub fn act_dim(&self) -> usize {
        self.actions.shape()[1]
    }
}

/// One start state, in both representations the two sources need.
#[derive(Clone, Debug)]
pub struct StartPoint {
    /// Environment state vector (true-dynamics source).
    pub state: Vec<f32>,
    /// Observation of that state (world-model source encodes this).
    pub obs: Vec<f32>,
}

impl StartPoint {
    pub fn from_env(env: &dyn DiffEnv, state: Vec<f32>) -> Self {
        let obs = env.obs(&state);
        StartPoint { state, obs }
    }
}

/// Moments of one `(source, horizon)` cell of a study.
#[derive(Clone, Debug)]
pub struct GradientStats {
    pub horizon: usize,
    /// Finite samples that entered the moments.
    pub n_samples: usize,
    /// Samples dropped for non-finite gradients.
    pub n_nonfinite: usize,
    pub mean: Vec<f32>,
    pub variance: Vec<f32>,
    /// Σ of per-coordinate variances.
    pub variance_total: f32,
    pub esnr: f32,
}

/// SplitMix64 of `(seed, index)`: every Monte-Carlo sample owns an
/// independent, reproducible RNG stream.
fn sample_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `[max_horizon, act_dim]` standard-normal noise for one sample. Drawn for
/// the full horizon so shorter-horizon studies of the same sample share the
/// prefix.
fn sample_noise(policy: &OpenLoopPolicy, seed: u64, index: u64) -> Tensor<f32> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, index));
    let n = policy.actions.numel();
    let data: Vec<f32> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new([policy.max_horizon(), policy.act_dim()], data)
}

/// One sample's gradient (flattened `[h * act_dim]`) and the executed
/// actions; the latter exist so tests can assert bit-identical common
/// random numbers across sources.
struct SampleGrad {
    grad: Vec<f32>,
    #[cfg_attr(not(test), allow(dead_code))]
    actions: Vec<Tensor<f32>>,
}

/// Places the first `h` policy rows on the tape as leaves and returns the
/// noisy per-step actions `θ_t + σ·ε_t` along with the leaf handles.
fn stage_actions(
    tape: &mut Tape<f32>,
    policy: &OpenLoopPolicy,
    noise: &Tensor<f32>,
    horizon: usize,
) -> (Vec<Var>, Vec<Var>) {
    let ad = policy.act_dim();
    let mut leaves = Vec::with_capacity(horizon);
    let mut acts = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let row = policy.actions.data()[t * ad..(t + 1) * ad].to_vec();
        let theta = tape.leaf(Tensor::new([1, ad], row));
        let eps_row = noise.data()[t * ad..(t + 1) * ad].to_vec();
        let eps = tape.constant(Tensor::new([1, ad], eps_row));
        let scaled = tape.scale(eps, policy.sigma);
        let a = tape.add(theta, scaled);
        leaves.push(theta);
        acts.push(a);
    }
    (leaves, acts)
}

fn flatten_leaf_grads(tape: &Tape<f32>, leaves: &[Var]) -> Vec<f32> {
    let mut out = Vec::new();
    for &l in leaves {
        out.extend_from_slice(tape.grad_or_zeros(l).data());
    }
    out
}

/// Undiscounted return of one noisy open-loop rollout, differentiated with
/// respect to the action-sequence parameters.
fn one_sample_grad(
    source: &GradSource,
    policy: &OpenLoopPolicy,
    start: &StartPoint,
    horizon: usize,
    noise: &Tensor<f32>,
) -> Result<SampleGrad> {
    let mut tape = Tape::new();
    let (leaves, acts) = stage_actions(&mut tape, policy, noise, horizon);

    let total = match source {
        GradSource::TrueDynamics { env } => {
            let mut s = tape.constant(Tensor::new([1, start.state.len()], start.state.clone()));
            let mut acc: Option<Var> = None;
            for &a in &acts {
                let r = env.reward_tape(&mut tape, s, a);
                s = env.step_tape(&mut tape, s, a);
                acc = Some(match acc {
                    Some(p) => tape.add(p, r),
                    None => r,
                });
            }
            acc.expect("horizon >= 1")
        }
        GradSource::WorldModel { wm, task } => {
            let staged = wm.stage(&mut tape, false);
            let emb = staged.embed_for(&mut tape, &[*task])?;
            let mut obs = start.obs.clone();
            obs.resize(wm.cfg().obs_dim, 0.0);
            let o = tape.constant(Tensor::new([1, wm.cfg().obs_dim], obs));
            let mut z = staged.encode(&mut tape, o, emb);
            let mut acc: Option<Var> = None;
            for &a in &acts {
                // The true environments clamp actions to [-1, 1] internally;
                // applying the identical clamp here keeps both sources
                // differentiating the same function of the policy.
                let a = tape.clamp(a, -1.0, 1.0);
                let logits = staged.reward_logits(&mut tape, z, a, emb);
                let r = wm.codec().decode_real_diff(&mut tape, logits);
                z = staged.step(&mut tape, z, a, emb);
                acc = Some(match acc {
                    Some(p) => tape.add(p, r),
                    None => r,
                });
            }
            acc.expect("horizon >= 1")
        }
    };
    let objective = tape.sum(total);
    tape.backward(objective).map_err(|e| PwmError::Numerical(e.to_string()))?;
    let grad = flatten_leaf_grads(&tape, &leaves);
    let actions = acts.iter().map(|&a| tape.value(a).clone()).collect();
    Ok(SampleGrad { grad, actions })
}

/// Monte-Carlo gradient study: for each horizon, draws `n_samples` noisy
/// action sequences (common random numbers across sources via
/// `hash(seed, sample)` streams), differentiates the undiscounted return
/// with respect to the action parameters, and reports per-coordinate
/// moments, total variance, and ESNR. Non-finite gradients are counted,
/// excluded, and warned about.
pub fn grad_mc_study(
    source: &GradSource,
    policy: &OpenLoopPolicy,
    start: &StartPoint,
    horizons: &[usize],
    n_samples: usize,
    seed: u64,
) -> Result<Vec<GradientStats>> {
    if n_samples < 2 {
        return Err(PwmError::Shape(format!(
            "gradient study needs at least 2 samples, got {n_samples}"
        )));
    }
    if horizons.is_empty() {
        return Err(PwmError::Shape("gradient study needs at least one horizon".into()));
    }
    for &h in horizons {
        if h == 0 || h > policy.max_horizon() {
            return Err(PwmError::Shape(format!(
                "horizon {h} outside the policy's 1..={} range",
                policy.max_horizon()
            )));
        }
    }

    let mut out = Vec::with_capacity(horizons.len());
    for &h in horizons {
        let mut finite = Vec::with_capacity(n_samples);
        let mut n_nonfinite = 0usize;
        for i in 0..n_samples {
            let noise = sample_noise(policy, seed, i as u64);
            let sample = one_sample_grad(source, policy, start, h, &noise)?;
            if sample.grad.iter().all(|g| g.is_finite()) {
                finite.push(sample.grad);
            } else {
                n_nonfinite += 1;
            }
        }
        if finite.len() < 2 {
            return Err(PwmError::Numerical(format!(
                "gradient study at horizon {h}: only {} finite samples of {n_samples}",
                finite.len()
            )));
        }
        if n_nonfinite > 0 {
            eprintln!(
                "warning: gradient study ({}, horizon {h}) dropped {n_nonfinite} non-finite \
                 samples of {n_samples}",
                source.label()
            );
        }
        let (mean, variance) = gradient_moments(&finite);
        let variance_total = variance.iter().sum();
        let e = esnr(&mean, &variance);
        out.push(GradientStats {
            horizon: h,
            n_samples: finite.len(),
            n_nonfinite,
            mean,
            variance,
            variance_total,
            esnr: e,
        });
    }
    Ok(out)
}

/// One row of the study summary table.
#[derive(Clone, Debug)]
pub struct EsnrRow {
    pub source: String,
    pub horizon: usize,
    pub n_samples: usize,
    pub variance_total: f32,
    pub esnr: f32,
    pub n_nonfinite: usize,
}

/// Flattens one study into labeled summary rows.
pub fn esnr_rows(source: &str, stats: &[GradientStats]) -> Vec<EsnrRow> {
    stats
        .iter()
        .map(|s| EsnrRow {
            source: source.to_string(),
            horizon: s.horizon,
            n_samples: s.n_samples,
            variance_total: s.variance_total,
            esnr: s.esnr,
            n_nonfinite: s.n_nonfinite,
        })
        .collect()
}

/// Renders summary rows as CSV (`+∞` prints as `inf`).
pub fn esnr_csv(rows: &[EsnrRow]) -> String {
    let mut out = String::from("source,horizon,n_samples,variance_total,esnr,n_nonfinite\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.source, r.horizon, r.n_samples, r.variance_total, r.esnr, r.n_nonfinite
        ));
    }
    out
}

// ---- landscape sweeps and optimality gaps ----

/// Aligned sweep of several objectives over one parameter grid.
#[derive(Clone, Debug)]
pub struct LandscapeTable {
    pub labels: Vec<String>,
    pub thetas: Vec<f64>,
    /// `columns[c][i] = objective_c(thetas[i])`.
    pub columns: Vec<Vec<f64>>,
}

impl LandscapeTable {
    pub fn column(&self, label: &str) -> Result<&[f64]> {
        let idx = self
            .labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| PwmError::Shape(format!("no landscape column named {label}")))?;
        Ok(&self.columns[idx])
    }

    /// Grid point with the largest value in the given column.
    pub fn argmax(&self, label: &str) -> Result<f64> {
        let col = self.column(label)?;
        let (mut best_i, mut best) = (0usize, f64::NEG_INFINITY);
        for (i, &v) in col.iter().enumerate() {
            if v > best {
                best = v;
                best_i = i;
            }
        }
        Ok(self.thetas[best_i])
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("theta");
        for l in &self.labels {
            out.push(',');
            out.push_str(l);
        }
        out.push('\n');
        for (i, th) in self.thetas.iter().enumerate() {
            out.push_str(&format!("{th}"));
            for col in &self.columns {
                out.push_str(&format!(",{}", col[i]));
            }
            out.push('\n');
        }
        out
    }
}

/// Evaluates every labeled objective on the same grid.
pub fn landscape_sweep(
    thetas: &[f64],
    objectives: &[(&str, &dyn Fn(f64) -> f64)],
) -> LandscapeTable {
    let labels = objectives.iter().map(|(l, _)| l.to_string()).collect();
    let columns = objectives
        .iter()
        .map(|(_, f)| thetas.iter().map(|&t| f(t)).collect())
        .collect();
    LandscapeTable { labels, thetas: thetas.to_vec(), columns }
}

/// Minimum brute-force grid size accepted when locating the true optimum.
pub const MIN_OPTIMUM_RESOLUTION: usize = 10_000;

/// `|J(θ*) - J(θ̂)|` on the true ball-wall landscape, with `θ*` located by
/// brute force over at least [`MIN_OPTIMUM_RESOLUTION`] grid points.
pub fn optimality_gap(wall: &BallWall, theta_hat: f64, resolution: usize) -> f64 {
    assert!(
        resolution >= MIN_OPTIMUM_RESOLUTION,
        "optimality gap needs a brute-force resolution of at least {MIN_OPTIMUM_RESOLUTION}"
    );
    let (_, j_star) = wall.optimum(resolution);
    (j_star - wall.distance(theta_hat)).abs()
}
