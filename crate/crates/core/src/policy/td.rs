//! TD(λ) regression targets.
//!
//! Targets are plain `f32` computations on detached rewards and values: the
//! critic regresses toward them, so nothing here touches the tape.

use crate::{PwmError, Result};

/// Validates the flattened time-major layouts shared by both estimators.
fn check_shapes(rewards: &[f32], values: &[f32], batch: usize, horizon: usize) -> Result<()> {
    if horizon == 0 || batch == 0 {
        return Err(PwmError::Shape("td targets: empty horizon or batch".into()));
    }
    if rewards.len() != horizon * batch {
        return Err(PwmError::Shape(format!(
            "td targets: expected {} rewards, got {}",
            horizon * batch,
            rewards.len()
        )));
    }
    if values.len() != (horizon + 1) * batch {
        return Err(PwmError::Shape(format!(
            "td targets: expected {} values, got {}",
            (horizon + 1) * batch,
            values.len()
        )));
    }
    Ok(())
}

/// λ-returns over an `H`-step segment, by backward recursion.
///
/// Inputs are time-major: `rewards[t*B + b]` is the reward earned leaving
/// state `t` of sample `b` (`t = 0..H`), `values[t*B + b]` is `V(z_t)`
/// (`t = 0..=H`). The recursion is
///
/// `target(t) = r_t + γ·((1-λ)·V(z_{t+1}) + λ·target(t+1))`
///
/// anchored at `target(H) := V(z_H)`, so the last computed entry is
/// `target(H-1) = r_{H-1} + γ·V(z_H)` for every λ. Returns `[H, B]`
/// targets for latents `z_0..z_{H-1}`.
pub fn td_lambda_targets(
    rewards: &[f32],
    values: &[f32],
    batch: usize,
    horizon: usize,
    gamma: f32,
    lambda: f32,
) -> Result<Vec<f32>> {
    check_shapes(rewards, values, batch, horizon)?;
    let mut targets = vec![0.0f32; horizon * batch];
    for b in 0..batch {
        let mut next = values[horizon * batch + b];
        for t in (0..horizon).rev() {
            let boot = (1.0 - lambda) * values[(t + 1) * batch + b] + lambda * next;
            let tgt = rewards[t * batch + b] + gamma * boot;
            targets[t * batch + b] = tgt;
            next = tgt;
        }
    }
    Ok(targets)
}

/// Reference λ-return by direct summation over n-step returns: O(H²) per
/// sample, used to cross-check the recursion.
///
/// `target(t) = (1-λ)·Σ_{n=1}^{H-t-1} λ^{n-1}·G_t^(n)  +  λ^{H-t-1}·G_t^(H-t)`
///
/// where `G_t^(n) = Σ_{k=0}^{n-1} γ^k·r_{t+k} + γ^n·V(z_{t+n})`.
pub fn td_lambda_targets_direct(
    rewards: &[f32],
    values: &[f32],
    batch: usize,
    horizon: usize,
    gamma: f32,
    lambda: f32,
) -> Result<Vec<f32>> {
    check_shapes(rewards, values, batch, horizon)?;
    let n_step = |t: usize, n: usize, b: usize| -> f32 {
        let mut g = 0.0f32;
        let mut disc = 1.0f32;
        for k in 0..n {
            g += disc * rewards[(t + k) * batch + b];
            disc *= gamma;
        }
        g + disc * values[(t + n) * batch + b]
    };
    let mut targets = vec![0.0f32; horizon * batch];
    for b in 0..batch {
        for t in 0..horizon {
            let maxn = horizon - t;
            let mut acc = 0.0f32;
            let mut lam_pow = 1.0f32;
            for n in 1..maxn {
                acc += (1.0 - lambda) * lam_pow * n_step(t, n, b);
                lam_pow *= lambda;
            }
            acc += lam_pow * n_step(t, maxn, b);
            targets[t * batch + b] = acc;
        }
    }
    Ok(targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pinned_three_step_example_matches_both_estimators() {
        // H=3, γ=0.9, λ=0.5, rewards all 1, values all 0:
        //   target(2) = 1
        //   target(1) = 1 + 0.9*0.5*1        = 1.45
        //   target(0) = 1 + 0.9*0.5*1.45     = 1.6525
        // and by direct summation 0.5*1 + 0.25*1.9 + 0.25*2.71 = 1.6525.
        let rewards = [1.0f32; 3];
        let values = [0.0f32; 4];
        let rec = td_lambda_targets(&rewards, &values, 1, 3, 0.9, 0.5).unwrap();
        let dir = td_lambda_targets_direct(&rewards, &values, 1, 3, 0.9, 0.5).unwrap();
        assert!((rec[0] - 1.6525).abs() < 1e-6, "recursion gave {}", rec[0]);
        assert!((dir[0] - 1.6525).abs() < 1e-6, "summation gave {}", dir[0]);
        assert!((rec[1] - 1.45).abs() < 1e-6);
        assert!((rec[2] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn recursion_matches_direct_summation_on_random_segments() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..50 {
            let horizon = rng.gen_range(1..=8);
            let batch = rng.gen_range(1..=4);
            let gamma = rng.gen_range(0.0f32..=1.0);
            let lambda = rng.gen_range(0.0f32..=1.0);
            let rewards: Vec<f32> =
                (0..horizon * batch).map(|_| rng.gen_range(-2.0f32..2.0)).collect();
            let values: Vec<f32> =
                (0..(horizon + 1) * batch).map(|_| rng.gen_range(-2.0f32..2.0)).collect();
            let rec =
                td_lambda_targets(&rewards, &values, batch, horizon, gamma, lambda).unwrap();
            let dir = td_lambda_targets_direct(&rewards, &values, batch, horizon, gamma, lambda)
                .unwrap();
            for (i, (r, d)) in rec.iter().zip(&dir).enumerate() {
                assert!(
                    (r - d).abs() <= 1e-6 * d.abs().max(1.0),
                    "trial {trial} idx {i}: recursion {r} vs summation {d} \
                     (H={horizon}, γ={gamma}, λ={lambda})"
                );
            }
        }
    }

    #[test]
    fn lambda_zero_is_the_one_step_bootstrap() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (batch, horizon, gamma) = (3, 6, 0.97f32);
        let rewards: Vec<f32> = (0..horizon * batch).map(|_| rng.gen::<f32>()).collect();
        let values: Vec<f32> = (0..(horizon + 1) * batch).map(|_| rng.gen::<f32>()).collect();
        let got = td_lambda_targets(&rewards, &values, batch, horizon, gamma, 0.0).unwrap();
        for t in 0..horizon {
            for b in 0..batch {
                let want = rewards[t * batch + b] + gamma * values[(t + 1) * batch + b];
                assert_eq!(got[t * batch + b], want, "λ=0 must be exact at t={t}, b={b}");
            }
        }
    }

    #[test]
    fn lambda_one_is_the_discounted_monte_carlo_return() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (batch, horizon, gamma) = (2, 5, 0.9f32);
        let rewards: Vec<f32> = (0..horizon * batch).map(|_| rng.gen::<f32>()).collect();
        let values: Vec<f32> = (0..(horizon + 1) * batch).map(|_| rng.gen::<f32>()).collect();
        let got = td_lambda_targets(&rewards, &values, batch, horizon, gamma, 1.0).unwrap();
        for t in 0..horizon {
            for b in 0..batch {
                let mut want = 0.0f32;
                let mut disc = 1.0f32;
                for k in t..horizon {
                    want += disc * rewards[k * batch + b];
                    disc *= gamma;
                }
                want += disc * values[horizon * batch + b];
                let g = got[t * batch + b];
                assert!(
                    (g - want).abs() <= 1e-6 * want.abs().max(1.0),
                    "λ=1 mismatch at t={t}, b={b}: {g} vs {want}"
                );
            }
        }
    }

    #[test]
    fn boundary_target_is_reward_plus_discounted_terminal_value() {
        let rewards = [0.3f32, -0.7];
        let values = [9.0f32, 9.0, 2.0, -1.0]; // V(z_2)=2, V(z_... ) per batch
        // batch=2, horizon=1: values rows are t=0 -> [9,9], t=1 -> [2,-1].
        let got = td_lambda_targets(&rewards, &values, 2, 1, 0.5, 0.3).unwrap();
        assert_eq!(got[0], 0.3 + 0.5 * 2.0);
        assert_eq!(got[1], -0.7 + 0.5 * -1.0);
    }

    #[test]
    fn shape_mismatches_are_rejected() {
        let err = td_lambda_targets(&[1.0; 5], &[0.0; 7], 2, 3, 0.9, 0.5);
        assert!(matches!(err, Err(crate::PwmError::Shape(_))));
        let err = td_lambda_targets(&[1.0; 6], &[0.0; 6], 2, 3, 0.9, 0.5);
        assert!(matches!(err, Err(crate::PwmError::Shape(_))));
    }
}
