//! Ball-throw-over-a-wall: a one-parameter control problem whose objective is
//! discontinuous by construction.
//!
//! A ball is launched from `(x0, 0)` at fixed speed and flies for a fixed
//! time. A wall of height `h` stands at `x = w`. If the ball's arc crosses
//! the wall plane below the top edge, it sticks to the wall (distance `w`,
//! no contact dynamics); otherwise it lands at the free-flight distance.
//! The resulting landscape `J(theta)` has a plateau at `w` and one
//! discontinuous jump at the clearance boundary, which makes it a clean
//! probe for what gradient descent does on true-but-nasty objectives versus
//! smooth learned surrogates of them.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor};
use crate::nn::{Activation, Adam, AdamConfig, Mlp, MlpSpec};
use crate::{PwmError, Result};

#[derive(Clone, Debug)]
pub struct BallWall {
    pub gravity: f64,
    /// Launch speed, m/s.
    pub speed: f64,
    /// Total flight time, s.
    pub flight_time: f64,
    /// Wall position along x, m.
    pub wall_x: f64,
    /// Wall height, m.
    pub wall_h: f64,
    /// Launch x position, m (launch height is 0).
    pub start_x: f64,
}

impl Default for BallWall {
    fn default() -> Self {
        BallWall {
            gravity: 9.81,
            speed: 10.0,
            flight_time: 2.0,
            wall_x: 1.0,
            wall_h: 0.4,
            start_x: 0.0,
        }
    }
}

impl BallWall {
    /// Forward distance reached when throwing at angle `theta` (radians from
    /// the horizontal). Total on all of `[-pi, pi]` and beyond.
    pub fn distance(&self, theta: f64) -> f64 {
        let c = theta.cos();
        let free = self.start_x + self.speed * c * self.flight_time;
        if self.hits_wall(theta) {
            self.wall_x
        } else {
            free
        }
    }

    /// True when the arc reaches the wall plane within the flight time at a
    /// height at or below the top edge (the "sticks to the wall" branch).
    fn hits_wall(&self, theta: f64) -> bool {
        let c = theta.cos();
        if c <= 0.0 {
            return false;
        }
        let crossing = (self.wall_x - self.start_x) / (self.speed * c);
        if crossing > self.flight_time {
            return false;
        }
        let y = self.speed * theta.sin() * crossing - 0.5 * self.gravity * crossing * crossing;
        y <= self.wall_h
    }

    /// Branch derivative of [`Self::distance`]: zero on the plateau, the
    /// free-flight derivative elsewhere. Undefined exactly at the jump, where
    /// we return the plateau side.
    pub fn distance_grad(&self, theta: f64) -> f64 {
        if self.hits_wall(theta) {
            0.0
        } else {
            -self.speed * self.flight_time * theta.sin()
        }
    }

    /// Brute-force global maximum of the landscape over `[-pi, pi]` on a grid
    /// of `resolution` points. Returns `(theta_star, j_star)`.
    pub fn optimum(&self, resolution: usize) -> (f64, f64) {
        assert!(resolution >= 2);
        let mut best = (f64::NEG_INFINITY, 0.0);
        for i in 0..resolution {
            let theta = -std::f64::consts::PI
                + 2.0 * std::f64::consts::PI * (i as f64) / ((resolution - 1) as f64);
            let j = self.distance(theta);
            if j > best.0 {
                best = (j, theta);
            }
        }
        (best.1, best.0)
    }

    /// Evenly spaced `(theta, J)` sweep, endpoints included.
    pub fn landscape(&self, n: usize) -> Vec<(f64, f64)> {
        assert!(n >= 2);
        (0..n)
            .map(|i| {
                let theta = -std::f64::consts::PI
                    + 2.0 * std::f64::consts::PI * (i as f64) / ((n - 1) as f64);
                (theta, self.distance(theta))
            })
            .collect()
    }
}

/// Hidden activation of the learned surrogate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SurrogateKind {
    Relu,
    /// Groupwise-softmax hidden activation (groups of 8), the smoothing
    /// regularizer under study.
    SimNorm,
}

/// Result of one surrogate-descent experiment.
#[derive(Clone, Debug)]
pub struct BallWallOutcome {
    /// Final training loss (MSE over the full sample set).
    pub model_error: f64,
    /// `|J(theta_star) - J(theta_hat)|` on the true landscape.
    pub optimality_gap: f64,
    /// Final descent iterate.
    pub theta_hat: f64,
    pub theta_star: f64,
    pub j_star: f64,
}

// Long enough for an iterate riding a shallow-but-consistent surrogate slope
// to cross the whole plateau; a sharp surrogate traps Adam in a local
// wiggle near the plateau edge regardless of the budget.
const DESCENT_STEPS: usize = 12_000;
const DESCENT_LR: f64 = 2e-3;

/// Ascends the true landscape from `theta0` with scalar Adam on the branch
/// gradient. On the plateau the gradient vanishes, so the iterate stalls
/// there; this is the point of the experiment.
pub fn descend_true_landscape(wall: &BallWall, theta0: f64, steps: usize, lr: f64) -> f64 {
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let (mut m, mut v) = (0.0f64, 0.0f64);
    let mut theta = theta0;
    for k in 1..=steps {
        let g = -wall.distance_grad(theta); // minimize -J
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(k as i32));
        let vh = v / (1.0 - b2.powi(k as i32));
        theta -= lr * mh / (vh.sqrt() + eps);
    }
    theta
}

/// Ascends a learned surrogate from `theta0` with Adam, differentiating
/// through the frozen network. Returns the final iterate.
pub fn descend_surrogate(model: &Mlp, theta0: f32, steps: usize, lr: f32) -> f32 {
    let mut theta = Tensor::new([1, 1], vec![theta0]);
    let mut adam = Adam::new(AdamConfig::new(lr), &[&theta]);
    for _ in 0..steps {
        let mut tape = Tape::new();
        let th = tape.leaf(theta.clone());
        let staged = model.stage(&mut tape, false);
        let pred = staged.forward(&mut tape, th);
        let neg = tape.neg(pred);
        let root = tape.sum(neg);
        tape.backward(root).expect("surrogate descent backward");
        let g = tape.grad_or_zeros(th);
        adam.step(&mut [&mut theta], &[g]);
    }
    theta.data()[0]
}

/// Fits an MLP surrogate (1 -> 32 -> 32 -> 1, no LayerNorm) to uniform
/// samples of the landscape. Returns the model and its final full-set MSE.
pub fn train_surrogate(
    wall: &BallWall,
    kind: SurrogateKind,
    seed: u64,
) -> Result<(Mlp, f64)> {
    const SAMPLES: usize = 1000;
    const EPOCHS: usize = 100;
    const BATCH: usize = 50;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let thetas: Vec<f32> = (0..SAMPLES)
        .map(|_| rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI) as f32)
        .collect();
    let targets: Vec<f32> = thetas.iter().map(|&t| wall.distance(t as f64) as f32).collect();

    let act = match kind {
        SurrogateKind::Relu => Activation::Relu,
        SurrogateKind::SimNorm => Activation::SimNorm(8),
    };
    let spec = MlpSpec::new(1, vec![32, 32], 1).hidden_act(act).layer_norm(false);
    let mut model = Mlp::init(spec, &mut rng);
    let mut adam = Adam::new(AdamConfig::new(2e-3), &model.params());

    let mut order: Vec<usize> = (0..SAMPLES).collect();
    for _ in 0..EPOCHS {
        order.shuffle(&mut rng);
        for chunk in order.chunks(BATCH) {
            let x = Tensor::new([chunk.len(), 1], chunk.iter().map(|&i| thetas[i]).collect());
            let y = Tensor::new([chunk.len(), 1], chunk.iter().map(|&i| targets[i]).collect());
            let mut tape = Tape::new();
            let xin = tape.constant(x);
            let yref = tape.constant(y);
            let staged = model.stage(&mut tape, true);
            let pred = staged.forward(&mut tape, xin);
            let loss = tape.mse(pred, yref);
            let loss_val = tape.value(loss).item();
            if !loss_val.is_finite() {
                return Err(PwmError::Numerical(format!(
                    "ball-wall surrogate training diverged (seed {seed})"
                )));
            }
            tape.backward(loss)
                .map_err(|e| PwmError::Numerical(format!("seed {seed}: {e}")))?;
            let grads = staged.grads(&tape);
            adam.step(&mut model.params_mut(), &grads);
        }
    }

    // Final training loss over the whole sample set.
    let preds = model.forward_plain(&Tensor::new([SAMPLES, 1], thetas));
    let mse = preds
        .data()
        .iter()
        .zip(&targets)
        .map(|(&p, &t)| ((p - t) as f64).powi(2))
        .sum::<f64>()
        / SAMPLES as f64;
    Ok((model, mse))
}

/// Full experiment: fit a surrogate to the sampled landscape, run gradient
/// ascent on it from `theta = -pi`, and score the final iterate on the true
/// landscape against the brute-force optimum.
pub fn ballwall_experiment(
    wall: &BallWall,
    kind: SurrogateKind,
    seed: u64,
) -> Result<BallWallOutcome> {
    let (model, model_error) = train_surrogate(wall, kind, seed)?;
    let theta_hat =
        descend_surrogate(&model, -std::f32::consts::PI, DESCENT_STEPS, DESCENT_LR as f32) as f64;
    let (theta_star, j_star) = wall.optimum(200_001);
    let optimality_gap = (j_star - wall.distance(theta_hat)).abs();
    if !optimality_gap.is_finite() {
        return Err(PwmError::Numerical(format!(
            "ball-wall experiment produced a non-finite gap (seed {seed})"
        )));
    }
    Ok(BallWallOutcome { model_error, optimality_gap, theta_hat, theta_star, j_star })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn free_flight_distances_match_ballistics() {
        // Push the wall out of reach: pure ballistics, maximized at theta=0.
        let far = BallWall { wall_x: 1e6, ..BallWall::default() };
        assert!((far.distance(0.0) - 20.0).abs() < 1e-12);
        // Thrown backward the wall is never reached even at the default
        // position.
        let wall = BallWall::default();
        assert!((wall.distance(std::f64::consts::PI) - (-20.0)).abs() < 1e-12);
    }

    #[test]
    fn low_throws_stick_to_the_wall() {
        let wall = BallWall::default();
        // Horizontal throw crosses the wall plane below the top edge.
        assert_eq!(wall.distance(0.0), wall.wall_x);
        assert_eq!(wall.distance_grad(0.0), 0.0);
    }

    #[test]
    fn landscape_has_one_jump_and_a_plateau() {
        let wall = BallWall::default();
        let sweep = wall.landscape(2000);
        let mut jumps = 0;
        for pair in sweep.windows(2) {
            if (pair[1].1 - pair[0].1).abs() > 5.0 {
                jumps += 1;
            }
        }
        assert_eq!(jumps, 1, "expected exactly one discontinuous jump");
        let plateau = sweep.iter().filter(|(_, j)| *j == wall.wall_x).count();
        assert!(
            plateau as f64 > 0.25 * sweep.len() as f64,
            "plateau covers only {plateau}/{} samples",
            sweep.len()
        );
    }

    #[test]
    fn brute_force_optimum_matches_the_analytic_clearance_root() {
        // Independent derivation: the best throw is the flattest angle that
        // still clears, where y_contact(theta) = h. With A = g w'^2 / (2 v^2)
        // that reads A tan^2 - w' tan + (h + A) = 0; take the smaller root.
        let wall = BallWall::default();
        let w = wall.wall_x - wall.start_x;
        let a = wall.gravity * w * w / (2.0 * wall.speed * wall.speed);
        let disc = (w * w - 4.0 * a * (wall.wall_h + a)).sqrt();
        let theta_lo = ((w - disc) / (2.0 * a)).atan();
        let (theta_star, j_star) = wall.optimum(400_001);
        assert!(
            (theta_star - theta_lo).abs() < 1e-4,
            "grid {theta_star} vs analytic {theta_lo}"
        );
        let j_analytic = wall.speed * wall.flight_time * theta_lo.cos();
        assert!((j_star - j_analytic).abs() < 1e-3, "{j_star} vs {j_analytic}");
        // Sanity on magnitude: optimum well above the plateau.
        assert!(j_star > 18.0 && j_star < 20.0);
    }

    #[test]
    fn branch_gradient_matches_finite_differences_off_the_jump() {
        let wall = BallWall::default();
        for theta in [3.0f64, 1.0, -2.2, 0.8] {
            let h = 1e-6;
            let fd = (wall.distance(theta + h) - wall.distance(theta - h)) / (2.0 * h);
            let an = wall.distance_grad(theta);
            assert!((fd - an).abs() < 1e-4, "theta {theta}: fd {fd} vs analytic {an}");
        }
    }

    #[test]
    fn descending_the_true_landscape_stalls_on_the_plateau() {
        let wall = BallWall::default();
        let theta_hat = descend_true_landscape(&wall, -std::f64::consts::PI, 3000, 2e-3);
        assert_eq!(wall.distance(theta_hat), wall.wall_x, "expected to stall at the wall");
        let (_, j_star) = wall.optimum(200_001);
        let gap = j_star - wall.distance(theta_hat);
        assert!(gap > 15.0, "gap {gap}");
    }

    #[test]
    fn constant_surrogate_never_moves_the_iterate() {
        let wall = BallWall::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = MlpSpec::new(1, vec![32, 32], 1).layer_norm(false);
        let mut model = Mlp::init(spec, &mut rng);
        for p in model.params_mut() {
            for v in p.data_mut() {
                *v = 0.0;
            }
        }
        let theta_hat = descend_surrogate(&model, -std::f32::consts::PI, 500, 2e-3);
        assert_eq!(theta_hat, -std::f32::consts::PI, "zero gradient must not move");
        let (_, j_star) = wall.optimum(200_001);
        let gap = (j_star - wall.distance(theta_hat as f64)).abs();
        assert!(gap > 35.0, "stuck-at-start gap should be maximal, got {gap}");
    }

    #[test]
    fn experiment_returns_finite_scores_for_both_surrogates() {
        let wall = BallWall::default();
        for kind in [SurrogateKind::Relu, SurrogateKind::SimNorm] {
            let out = ballwall_experiment(&wall, kind, 7).unwrap();
            assert!(out.model_error.is_finite() && out.model_error >= 0.0);
            assert!(out.optimality_gap.is_finite() && out.optimality_gap >= 0.0);
            assert!(out.theta_hat.is_finite());
        }
    }

    proptest! {
        #[test]
        fn distance_is_bounded_and_total(theta in -std::f64::consts::PI..std::f64::consts::PI,
                                         wall_x in 0.1f64..30.0,
                                         wall_h in 0.0f64..5.0) {
            let wall = BallWall { wall_x, wall_h, ..BallWall::default() };
            let j = wall.distance(theta);
            let bound = (wall.start_x.abs() + wall.speed * wall.flight_time).max(wall.wall_x);
            prop_assert!(j.is_finite());
            prop_assert!(j.abs() <= bound + 1e-9);
        }
    }
}
