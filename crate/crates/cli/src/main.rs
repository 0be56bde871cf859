use pwm_core::autodiff::{Tape, Tensor, Var};
use pwm_core::envs::{DiffEnv, Pendulum, PendulumTask};
use pwm_core::nn::{Adam, AdamConfig};
use pwm_core::policy::{Actor, ActorConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Pendulum with gym-style uniform inits over the whole circle.
struct WideInit(Pendulum);

impl DiffEnv for WideInit {
    fn name(&self) -> &'static str {
        self.0.name()
    }
    fn state_dim(&self) -> usize {
        self.0.state_dim()
    }
    fn obs_dim(&self) -> usize {
        self.0.obs_dim()
    }
    fn action_dim(&self) -> usize {
        self.0.action_dim()
    }
    fn episode_len(&self) -> usize {
        self.0.episode_len()
    }
    fn action_limit(&self) -> f32 {
        self.0.action_limit()
    }
    fn sample_init(&self, rng: &mut ChaCha8Rng) -> Vec<f32> {
        let th = rng.gen_range(-std::f32::consts::PI..std::f32::consts::PI);
        let om = rng.gen_range(-1.0f32..1.0);
        vec![th, om]
    }
    fn step_tape(&self, tape: &mut Tape<f32>, state: Var, action: Var) -> Var {
        self.0.step_tape(tape, state, action)
    }
    fn reward_tape(&self, tape: &mut Tape<f32>, state: Var, action: Var) -> Var {
        self.0.reward_tape(tape, state, action)
    }
    fn obs_tape(&self, tape: &mut Tape<f32>, state: Var) -> Var {
        self.0.obs_tape(tape, state)
    }
}

fn train_variant(
    env: &dyn DiffEnv,
    noise: f32,
    lr: f32,
    clip: f32,
    steps: usize,
    batch: usize,
    seed: u64,
) -> Actor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut actor = Actor::init(ActorConfig::desk(env.obs_dim(), env.action_dim()), &mut rng);
    let mut adam = Adam::new(AdamConfig::new(lr).grad_clip(clip), &actor.params());
    let mut tape = Tape::new();
    let sd = env.state_dim();
    let ad = env.action_dim();
    for _ in 0..steps {
        let mut starts = Vec::with_capacity(batch * sd);
        for _ in 0..batch {
            starts.extend(env.sample_init(&mut rng));
        }
        tape.reset();
        let staged = actor.stage(&mut tape, true);
        let mut s = tape.constant(Tensor::new([batch, sd], starts));
        let mut acc = None;
        for _ in 0..env.episode_len() {
            let obs = env.obs_tape(&mut tape, s);
            let mu = staged.mean_action(&mut tape, obs);
            let a = if noise > 0.0 {
                let eps = tape.constant(Actor::sample_noise(batch, ad, &mut rng));
                let n = tape.scale(eps, noise);
                let sum = tape.add(mu, n);
                tape.clamp(sum, -1.0, 1.0)
            } else {
                mu
            };
            let r = env.reward_tape(&mut tape, s, a);
            s = env.step_tape(&mut tape, s, a);
            acc = Some(match acc {
                Some(prev) => tape.add(prev, r),
                None => r,
            });
        }
        let objective = tape.mean(acc.unwrap());
        let loss = tape.scale(objective, -1.0);
        tape.backward(loss).unwrap();
        let grads = staged.grads(&tape);
        let mut params = actor.params_mut();
        adam.step(&mut params, &grads);
    }
    actor
}

fn eval_actor(env: &dyn DiffEnv, actor: &Actor, episodes: usize, seed: u64) -> f32 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0f32;
    for _ in 0..episodes {
        let mut state = env.sample_init(&mut rng);
        for _ in 0..env.episode_len() {
            let obs = env.obs(&state);
            let a = actor.act_plain(&Tensor::new([1, obs.len()], obs));
            total += env.reward(&state, a.data());
            state = env.step(&state, a.data());
        }
    }
    total / episodes as f32
}

fn main() {
    let hanging = Pendulum::new(PendulumTask::Swingup);
    let uniform = WideInit(Pendulum::new(PendulumTask::Swingup));
    let envs: [(&str, &dyn DiffEnv); 2] = [("hanging", &hanging), ("uniform", &uniform)];
    for (init, env) in envs {
        for noise in [0.0f32, 0.2] {
            for (lr, clip) in [(3e-3f32, 1.0f32), (1e-2, 10.0)] {
                let t = std::time::Instant::now();
                let actor = train_variant(env, noise, lr, clip, 500, 16, 7);
                let ret = eval_actor(env, &actor, 8, 99);
                println!(
                    "{init} noise {noise:.1} lr {lr:.0e} clip {clip:>4.0}: eval {ret:>7.0}  ({:.0} s)",
                    t.elapsed().as_secs_f64()
                );
            }
        }
    }
}
