//! Underactuated double pendulum (acrobot) with torque on the elbow only.
//!
//! Both link angles are absolute, measured from the upright (`phi = 0` points
//! up), and left unwrapped. Links are unit-length with unit point masses at
//! their tips; the only control is a bounded torque at the joint between the
//! links, which acts on the second link and reacts on the first.
//!
//! With `delta = phi1 - phi2` the mass matrix is `[[2, cos d], [cos d, 1]]`
//! (determinant `2 - cos^2 d`, never singular) and the generalized forces are
//!
//! ```text
//! b1 = -tau - sin(d) phi2dot^2 + 2 g sin(phi1)
//! b2 =  tau + sin(d) phi1dot^2 +   g sin(phi2)
//! ```
//!
//! Integration is semi-implicit Euler, which keeps the zero-torque energy
//! drift bounded. The free system is chaotic, which is exactly the property
//! the gradient-variance studies lean on.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Scalar, Tape, Var};
use crate::envs::DiffEnv;

#[derive(Clone, Debug)]
pub struct Acrobot {
    pub gravity: f64,
    pub dt: f64,
    pub torque_limit: f64,
    pub steps: usize,
}

impl Default for Acrobot {
    fn default() -> Self {
        Acrobot { gravity: 9.81, dt: 0.01, torque_limit: 1.0, steps: 240 }
    }
}

impl Acrobot {
    /// One semi-implicit Euler step, generic over the scalar type so the
    /// identical graph can be finite-difference checked in 64-bit.
    pub fn step_op<T: Scalar>(&self, tape: &mut Tape<T>, state: Var, action: Var) -> Var {
        let q1 = tape.slice_last(state, 0, 1);
        let q2 = tape.slice_last(state, 1, 1);
        let w1 = tape.slice_last(state, 2, 1);
        let w2 = tape.slice_last(state, 3, 1);
        let g = T::from_f64(self.gravity);
        let bounded = tape.clamp(action, -T::ONE, T::ONE);
        let tau = tape.scale(bounded, T::from_f64(self.torque_limit));

        let delta = tape.sub(q1, q2);
        let sd = tape.sin(delta);
        let cd = tape.cos(delta);
        let cd_sq = tape.square(cd);
        let neg_cd_sq = tape.neg(cd_sq);
        let det = tape.add_scalar(neg_cd_sq, T::from_f64(2.0));

        // b1 = -tau - sd * w2^2 + 2 g sin(q1)
        let w2_sq = tape.square(w2);
        let cent1 = tape.mul(sd, w2_sq);
        let sin_q1 = tape.sin(q1);
        let grav1 = tape.scale(sin_q1, g + g);
        let neg_tau = tape.neg(tau);
        let b1_part = tape.sub(neg_tau, cent1);
        let b1 = tape.add(b1_part, grav1);

        // b2 = tau + sd * w1^2 + g sin(q2)
        let w1_sq = tape.square(w1);
        let cent2 = tape.mul(sd, w1_sq);
        let sin_q2 = tape.sin(q2);
        let grav2 = tape.scale(sin_q2, g);
        let b2_part = tape.add(tau, cent2);
        let b2 = tape.add(b2_part, grav2);

        // Solve the 2x2 mass matrix system directly.
        let cd_b2 = tape.mul(cd, b2);
        let num1 = tape.sub(b1, cd_b2);
        let acc1 = tape.div(num1, det);
        let b2_twice = tape.scale(b2, T::from_f64(2.0));
        let cd_b1 = tape.mul(cd, b1);
        let num2 = tape.sub(b2_twice, cd_b1);
        let acc2 = tape.div(num2, det);

        let dt = T::from_f64(self.dt);
        let dw1 = tape.scale(acc1, dt);
        let w1_next = tape.add(w1, dw1);
        let dw2 = tape.scale(acc2, dt);
        let w2_next = tape.add(w2, dw2);
        let dq1 = tape.scale(w1_next, dt);
        let q1_next = tape.add(q1, dq1);
        let dq2 = tape.scale(w2_next, dt);
        let q2_next = tape.add(q2, dq2);
        tape.concat_last(&[q1_next, q2_next, w1_next, w2_next])
    }

    /// Quadratic cost on both angles and the elbow rate:
    /// `-phi1^2 - phi2^2 - 0.1 phi2dot^2`.
    pub fn reward_op<T: Scalar>(&self, tape: &mut Tape<T>, state: Var, _action: Var) -> Var {
        let q1 = tape.slice_last(state, 0, 1);
        let q2 = tape.slice_last(state, 1, 1);
        let w2 = tape.slice_last(state, 3, 1);
        let q1_sq = tape.square(q1);
        let q2_sq = tape.square(q2);
        let w2_sq = tape.square(w2);
        let w2_cost = tape.scale(w2_sq, T::from_f64(0.1));
        let angle_cost = tape.add(q1_sq, q2_sq);
        let cost = tape.add(angle_cost, w2_cost);
        let r = tape.neg(cost);
        let rows = tape.value(r).lead_rows();
        tape.reshape(r, [rows])
    }

    pub fn obs_op<T: Scalar>(&self, tape: &mut Tape<T>, state: Var) -> Var {
        let q1 = tape.slice_last(state, 0, 1);
        let q2 = tape.slice_last(state, 1, 1);
        let w1 = tape.slice_last(state, 2, 1);
        let w2 = tape.slice_last(state, 3, 1);
        let c1 = tape.cos(q1);
        let s1 = tape.sin(q1);
        let c2 = tape.cos(q2);
        let s2 = tape.sin(q2);
        tape.concat_last(&[c1, s1, c2, s2, w1, w2])
    }

    /// Total mechanical energy in 64-bit, used as a conservation oracle for
    /// the zero-torque system.
    pub fn energy(&self, state: &[f64]) -> f64 {
        let (q1, q2, w1, w2) = (state[0], state[1], state[2], state[3]);
        let kinetic = w1 * w1 + 0.5 * w2 * w2 + w1 * w2 * (q1 - q2).cos();
        let potential = self.gravity * (2.0 * q1.cos() + q2.cos());
        kinetic + potential
    }

    /// Plain 64-bit step used by the energy oracle, mirroring `step_op`.
    pub fn step_f64(&self, state: &[f64], tau: f64) -> Vec<f64> {
        let mut tape = Tape::<f64>::new();
        let s = tape.constant(crate::autodiff::Tensor::new([1, 4], state.to_vec()));
        let a = tape.constant(crate::autodiff::Tensor::new(
            [1, 1],
            vec![tau / self.torque_limit],
        ));
        let next = self.step_op(&mut tape, s, a);
        tape.value(next).data().to_vec()
    }
}

impl DiffEnv for Acrobot {
    fn name(&self) -> &'static str {
        "acrobot"
    }

    fn state_dim(&self) -> usize {
        4
    }

    fn obs_dim(&self) -> usize {
        6
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

    fn sample_init(&self, rng: &mut ChaCha8Rng) -> Vec<f32> {
        let pi = std::f64::consts::PI;
        vec![
            (pi + rng.gen_range(-0.1..0.1)) as f32,
            (pi + rng.gen_range(-0.1..0.1)) as f32,
            rng.gen_range(-0.1..0.1) as f32,
            rng.gen_range(-0.1..0.1) as f32,
        ]
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
