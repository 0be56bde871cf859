//! Torque-limited pendulum with two reward variants.
//!
//! State is `[theta, theta_dot]` with `theta = 0` pointing up. The dynamics
//! integrate the raw angle, but the swing-up cost measures the *wrapped*
//! angle — distance on the circle from upright — as in the classic
//! formulation, so revolutions are free and only posture is scored. The
//! torque limit is well below the gravity torque at the horizontal, which
//! forces energy-pumping swings rather than a direct lift.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Scalar, Tape, Var};
use crate::envs::DiffEnv;

/// Which reward the pendulum optimizes. Dynamics are shared.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PendulumTask {
    /// Reach and hold the upright: `-theta^2 - 0.1 theta_dot^2 - 0.001 tau^2`
    /// with `theta` wrapped to the principal branch.
    Swingup,
    /// Hold a constant spin rate: `-0.1 (theta_dot - 5)^2 - 0.001 tau^2`.
    Spin,
}

#[derive(Clone, Debug)]
pub struct Pendulum {
    pub task: PendulumTask,
    pub gravity: f64,
    pub dt: f64,
    pub torque_limit: f64,
    pub steps: usize,
    /// Target angular velocity for the spin variant, rad/s.
    pub target_spin: f64,
}

impl Pendulum {
    pub fn new(task: PendulumTask) -> Self {
        Pendulum { task, gravity: 9.81, dt: 0.05, torque_limit: 2.0, steps: 200, target_spin: 5.0 }
    }

    /// Clamps the normalized action to `[-1, 1]` and scales by the torque
    /// limit. The clamp makes the limit a hard guarantee of the environment
    /// rather than a convention the policy is trusted to follow.
    fn applied_torque<T: Scalar>(&self, tape: &mut Tape<T>, action: Var) -> Var {
        let bounded = tape.clamp(action, -T::ONE, T::ONE);
        tape.scale(bounded, T::from_f64(self.torque_limit))
    }

    /// Semi-implicit Euler step of `theta_ddot = g sin(theta) + tau` for a
    /// unit-mass, unit-length pole. Generic so the same expression graph can
    /// be finite-difference checked in 64-bit.
    pub fn step_op<T: Scalar>(&self, tape: &mut Tape<T>, state: Var, action: Var) -> Var {
        let th = tape.slice_last(state, 0, 1);
        let om = tape.slice_last(state, 1, 1);
        let tau = self.applied_torque(tape, action);
        let sin_th = tape.sin(th);
        let grav = tape.scale(sin_th, T::from_f64(self.gravity));
        let acc = tape.add(grav, tau);
        let dt = T::from_f64(self.dt);
        let dom = tape.scale(acc, dt);
        let om_next = tape.add(om, dom);
        let dth = tape.scale(om_next, dt);
        let th_next = tape.add(th, dth);
        tape.concat_last(&[th_next, om_next])
    }

    pub fn reward_op<T: Scalar>(&self, tape: &mut Tape<T>, state: Var, action: Var) -> Var {
        let th = tape.slice_last(state, 0, 1);
        let om = tape.slice_last(state, 1, 1);
        let tau = self.applied_torque(tape, action);
        let tau_sq = tape.square(tau);
        let act_cost = tape.scale(tau_sq, T::from_f64(1e-3));
        let state_cost = match self.task {
            PendulumTask::Swingup => {
                let th_w = tape.wrap_angle(th);
                let th_sq = tape.square(th_w);
                let om_sq = tape.square(om);
                let om_cost = tape.scale(om_sq, T::from_f64(0.1));
                tape.add(th_sq, om_cost)
            }
            PendulumTask::Spin => {
                let dev = tape.add_scalar(om, T::from_f64(-self.target_spin));
                let dev_sq = tape.square(dev);
                tape.scale(dev_sq, T::from_f64(0.1))
            }
        };
        let cost = tape.add(state_cost, act_cost);
        let r = tape.neg(cost);
        let rows = tape.value(r).lead_rows();
        tape.reshape(r, [rows])
    }

    pub fn obs_op<T: Scalar>(&self, tape: &mut Tape<T>, state: Var) -> Var {
        let th = tape.slice_last(state, 0, 1);
        let om = tape.slice_last(state, 1, 1);
        let c = tape.cos(th);
        let s = tape.sin(th);
        tape.concat_last(&[c, s, om])
    }
}

impl DiffEnv for Pendulum {
    fn name(&self) -> &'static str {
        match self.task {
            PendulumTask::Swingup => "pendulum-swingup",
            PendulumTask::Spin => "pendulum-spin",
        }
    }

    fn state_dim(&self) -> usize {
        2
    }

    fn obs_dim(&self) -> usize {
        3
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn episode_len(&self) -> usize {
        self.steps
    }

    fn action_limit(&self) -> f32 {
        self.torque_limit as f32
    }

    /// Gym-style init: uniform posture over the whole circle plus a small
    /// spin. Low starts demand a full energy-pumping swing-up; high starts
    /// exercise the balance controller directly.
    fn sample_init(&self, rng: &mut ChaCha8Rng) -> Vec<f32> {
        let th = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let om = rng.gen_range(-1.0..1.0);
        vec![th as f32, om as f32]
    }

    fn step_tape(&self, tape: &mut Tape<f32>, state: Var, action: Var) -> Var {
        self.step_op(tape, state, action)
    }

    fn reward_tape(&self, tape: &mut Tape<f32>, state: Var, action: Var) -> Var {
        self.reward_op(tape, state, action)
    }

    fn obs_tape(&self, tape: &mut Tape<f32>, state: Var) -> Var {
        self.obs_op(tape, state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradcheck, Tensor};

    #[test]
    fn swingup_reward_is_zero_at_upright_rest() {
        let env = Pendulum::new(PendulumTask::Swingup);
        assert_eq!(env.reward(&[0.0, 0.0], &[0.0]), 0.0);
        let r = env.reward(&[1.0, 0.0], &[0.0]);
        assert!((r - (-1.0)).abs() < 1e-6, "got {r}");
    }

    #[test]
    fn swingup_cost_scores_the_wrapped_angle() {
        // A full revolution is the same posture: only circle distance from
        // upright is penalized, so pumping amplitude is never punished for
        // passing the seam.
        let env = Pendulum::new(PendulumTask::Swingup);
        let tau = std::f32::consts::TAU;
        let r0 = env.reward(&[0.4, 0.0], &[0.0]);
        let r1 = env.reward(&[0.4 + tau, 0.0], &[0.0]);
        assert!((r0 - r1).abs() < 1e-5, "wrap broke periodicity: {r0} vs {r1}");
        let near_top_other_branch = env.reward(&[tau - 0.1, 0.0], &[0.0]);
        assert!((near_top_other_branch - (-0.01)).abs() < 1e-4);
    }

    #[test]
    fn spin_reward_peaks_at_target_rate() {
        let env = Pendulum::new(PendulumTask::Spin);
        assert_eq!(env.reward(&[2.0, 5.0], &[0.0]), 0.0);
        let r = env.reward(&[0.0, 0.0], &[0.0]);
        assert!((r - (-2.5)).abs() < 1e-6, "got {r}");
    }

    #[test]
    fn upright_rest_is_an_equilibrium() {
        let env = Pendulum::new(PendulumTask::Swingup);
        let s = env.step(&[0.0, 0.0], &[0.0]);
        assert_eq!(s, vec![0.0, 0.0]);
    }

    #[test]
    fn torque_limit_is_too_weak_for_a_direct_lift() {
        // From hanging, saturated torque must not be able to hold the pole
        // at the horizontal: gravity wins, so swinging is required.
        let env = Pendulum::new(PendulumTask::Swingup);
        assert!(env.torque_limit < env.gravity);
    }

    #[test]
    fn out_of_range_actions_are_clamped_to_the_torque_limit() {
        let env = Pendulum::new(PendulumTask::Swingup);
        let s = [0.0, 0.0];
        assert_eq!(env.step(&s, &[5.0]), env.step(&s, &[1.0]));
        // At the upright the applied torque is the only acceleration, so one
        // saturated step pins the effective torque at exactly the limit.
        let next = env.step(&s, &[5.0]);
        let applied = next[1] as f64 / env.dt;
        assert!((applied - env.torque_limit).abs() < 1e-5, "applied {applied}");
    }

    #[test]
    fn single_step_matches_finite_differences_in_f64() {
        let env = Pendulum::new(PendulumTask::Swingup);
        let state = Tensor::new([1, 2], vec![2.3f64, -0.7]);
        let action = Tensor::new([1, 1], vec![0.4f64]);
        for probe in 0..2 {
            let e = env.clone();
            let report = gradcheck(
                &move |t: &mut Tape<f64>, v: &[Var]| {
                    let next = e.step_op(t, v[0], v[1]);
                    let picked = t.slice_last(next, probe, 1);
                    t.sum(picked)
                },
                &[state.clone(), action.clone()],
                1e-6,
            );
            assert!(report.max_err < 1e-8, "state coord {probe}: err {}", report.max_err);
        }
    }

    #[test]
    fn reward_gradient_matches_finite_differences_in_f64() {
        for task in [PendulumTask::Swingup, PendulumTask::Spin] {
            let env = Pendulum::new(task);
            let state = Tensor::new([1, 2], vec![1.1f64, 2.9]);
            let action = Tensor::new([1, 1], vec![-0.6f64]);
            let report = gradcheck(
                &move |t: &mut Tape<f64>, v: &[Var]| {
                    let r = env.reward_op(t, v[0], v[1]);
                    t.sum(r)
                },
                &[state, action],
                1e-6,
            );
            assert!(report.max_err < 1e-8, "{task:?}: err {}", report.max_err);
        }
    }

    #[test]
    fn bptt_chain_of_16_steps_matches_finite_differences() {
        // 32-bit reverse-mode gradients through a 16-step rollout, with
        // respect to the initial state and the whole action sequence, against
        // a 64-bit central-difference oracle on the identical graph.
        let env = Pendulum::new(PendulumTask::Swingup);
        let s0 = [2.5f64, 0.3];
        let actions: Vec<f64> = (0..16).map(|i| ((i as f64) * 0.37).sin() * 0.8).collect();
        let err = crate::envs::bptt_gradient_error(&env, &s0, &actions, 16);
        assert!(err < 1e-2, "BPTT chain err {err}");
    }

    #[test]
    fn observation_embeds_angle_on_the_circle() {
        let env = Pendulum::new(PendulumTask::Swingup);
        let o = env.obs(&[std::f32::consts::PI, 1.5]);
        assert!((o[0] - (-1.0)).abs() < 1e-6);
        assert!(o[1].abs() < 1e-6);
        assert_eq!(o[2], 1.5);
        assert_eq!(o.len(), 3);
    }
}
