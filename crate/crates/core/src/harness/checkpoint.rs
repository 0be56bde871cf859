//! Binary checkpoints for world models, actors, and critic ensembles.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic      4 bytes   "PWMC"
//! version    u32       currently 1
//! component  u16 len + utf8   "wm" | "actor" | "critic"
//! config     u32 len + utf8   resolved flat-config snapshot
//! rng        u32 len + bytes  opaque RNG state (see rng_state_bytes)
//! n_params   u32
//! each param:
//!   name     u16 len + utf8
//!   ndim     u8, then u32 per dimension
//!   data     f32 × numel
//! ```
//!
//! Save → load → save is byte-identical.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::policy::{Actor, ActorConfig, CriticConfig, CriticEnsemble};
use crate::worldmodel::WorldModel;
use crate::{PwmError, Result};

const MAGIC: &[u8; 4] = b"PWMC";
const VERSION: u32 = 1;

/// A named-parameter snapshot of one trainable component.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// `wm`, `actor`, or `critic`.
    pub component: String,
    /// Resolved flat-config text captured at save time.
    pub config: String,
    /// Opaque RNG state; [`rng_state_bytes`] / [`rng_from_state`] round-trip
    /// the crate's generator.
    pub rng_state: Vec<u8>,
    pub params: Vec<(String, Tensor<f32>)>,
}

fn snapshot_params(names: Vec<String>, tensors: Vec<&Tensor<f32>>) -> Vec<(String, Tensor<f32>)> {
    assert_eq!(names.len(), tensors.len(), "param name/tensor count mismatch");
    names.into_iter().zip(tensors.iter().map(|&t| t.clone())).collect()
}

impl Checkpoint {
    pub fn of_world_model(wm: &WorldModel, config: &str, rng_state: Vec<u8>) -> Checkpoint {
        Checkpoint {
            component: "wm".into(),
            config: config.into(),
            rng_state,
            params: snapshot_params(wm.param_names(), wm.params()),
        }
    }

    pub fn of_actor(actor: &Actor, config: &str, rng_state: Vec<u8>) -> Checkpoint {
        Checkpoint {
            component: "actor".into(),
            config: config.into(),
            rng_state,
            params: snapshot_params(actor.param_names(), actor.params()),
        }
    }

    pub fn of_critic(critic: &CriticEnsemble, config: &str, rng_state: Vec<u8>) -> Checkpoint {
        Checkpoint {
            component: "critic".into(),
            config: config.into(),
            rng_state,
            params: snapshot_params(critic.param_names(), critic.params()),
        }
    }

    fn expect_component(&self, want: &str) -> Result<()> {
        if self.component != want {
            return Err(PwmError::Format(format!(
                "checkpoint holds a `{}` component, expected `{want}`",
                self.component
            )));
        }
        Ok(())
    }

    fn check_names(&self, expected: &[String]) -> Result<()> {
        let stored: Vec<&str> = self.params.iter().map(|(n, _)| n.as_str()).collect();
        let wanted: Vec<&str> = expected.iter().map(|n| n.as_str()).collect();
        if stored != wanted {
            return Err(PwmError::Format(format!(
                "checkpoint parameter names do not match the target model \
                 (stored {} params, target wants {})",
                stored.len(),
                wanted.len()
            )));
        }
        Ok(())
    }

    fn tensors(&self) -> Vec<Tensor<f32>> {
        self.params.iter().map(|(_, t)| t.clone()).collect()
    }

    /// Restores world-model parameters; the model must already have the
    /// architecture the checkpoint was saved from.
    pub fn apply_to_world_model(&self, wm: &mut WorldModel) -> Result<()> {
        self.expect_component("wm")?;
        self.check_names(&wm.param_names())?;
        wm.set_params(&self.tensors())
    }

    pub fn apply_to_actor(&self, actor: &mut Actor) -> Result<()> {
        self.expect_component("actor")?;
        self.check_names(&actor.param_names())?;
        actor.set_params(&self.tensors())
    }

    pub fn apply_to_critic(&self, critic: &mut CriticEnsemble) -> Result<()> {
        self.expect_component("critic")?;
        self.check_names(&critic.param_names())?;
        critic.set_params(&self.tensors())
    }

    /// Rebuilds an actor from the stored shapes: input and action dimensions
    /// come from the first mean-layer weight and the log-std vector, hidden
    /// widths from the intermediate weights.
    pub fn to_actor(&self) -> Result<Actor> {
        self.expect_component("actor")?;
        let weights: Vec<&Tensor<f32>> = self
            .params
            .iter()
            .filter(|(n, _)| n.starts_with("actor.w"))
            .map(|(_, t)| t)
            .collect();
        let log_std = self
            .params
            .iter()
            .find(|(n, _)| n == "actor.log_std")
            .ok_or_else(|| PwmError::Format("actor checkpoint lacks actor.log_std".into()))?;
        if weights.is_empty() {
            return Err(PwmError::Format("actor checkpoint lacks mean-layer weights".into()));
        }
        let input_dim = weights[0].shape()[0];
        let act_dim = log_std.1.shape()[0];
        let hidden: Vec<usize> =
            weights[..weights.len() - 1].iter().map(|w| w.shape()[1]).collect();
        let cfg = ActorConfig { input_dim, act_dim, hidden, init_log_std: 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut actor = Actor::init(cfg, &mut rng);
        self.apply_to_actor(&mut actor)?;
        Ok(actor)
    }

    /// Rebuilds a critic ensemble from the stored shapes.
    pub fn to_critic(&self) -> Result<CriticEnsemble> {
        self.expect_component("critic")?;
        let members = self
            .params
            .iter()
            .filter(|(n, _)| n.starts_with("critic") && n.contains(".w0"))
            .count();
        let weights: Vec<&Tensor<f32>> = self
            .params
            .iter()
            .filter(|(n, _)| n.starts_with("critic0.w"))
            .map(|(_, t)| t)
            .collect();
        if members == 0 || weights.is_empty() {
            return Err(PwmError::Format("critic checkpoint lacks member weights".into()));
        }
        let input_dim = weights[0].shape()[0];
        let hidden: Vec<usize> =
            weights[..weights.len() - 1].iter().map(|w| w.shape()[1]).collect();
        let cfg = CriticConfig { input_dim, hidden, members };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut critic = CriticEnsemble::init(cfg, &mut rng);
        self.apply_to_critic(&mut critic)?;
        Ok(critic)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        write_str16(&mut out, &self.component);
        write_bytes32(&mut out, self.config.as_bytes());
        write_bytes32(&mut out, &self.rng_state);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, tensor) in &self.params {
            write_str16(&mut out, name);
            let shape = tensor.shape();
            out.push(shape.len() as u8);
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in tensor.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(PwmError::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(PwmError::Format(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let component = r.str16()?;
        let config = String::from_utf8(r.bytes32()?)
            .map_err(|_| PwmError::Format("checkpoint config is not valid UTF-8".into()))?;
        let rng_state = r.bytes32()?;
        let n_params = r.u32()? as usize;
        let mut params = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            let name = r.str16()?;
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 4)?;
            let data: Vec<f32> =
                raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            params.push((name, Tensor::new(shape, data)));
        }
        if r.pos != bytes.len() {
            return Err(PwmError::Format(format!(
                "checkpoint has {} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint { component, config, rng_state, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::dataset::write_all(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }
}

fn write_str16(out: &mut Vec<u8>, s: &str) {
    let b = s.as_bytes();
    assert!(b.len() <= u16::MAX as usize, "string too long for checkpoint");
    out.extend_from_slice(&(b.len() as u16).to_le_bytes());
    out.extend_from_slice(b);
}

fn write_bytes32(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(PwmError::Format(format!(
                "checkpoint truncated: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn str16(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        let b = self.take(len)?;
        String::from_utf8(b.to_vec())
            .map_err(|_| PwmError::Format("checkpoint string is not valid UTF-8".into()))
    }

    fn bytes32(&mut self) -> Result<Vec<u8>> {
        let len = self.u32()? as usize;
        Ok(self.take(len)?.to_vec())
    }
}

/// Serializes the full generator state: 32-byte seed, u64 stream, u128 word
/// position.
pub fn rng_state_bytes(rng: &ChaCha8Rng) -> Vec<u8> {
    let mut out = Vec::with_capacity(56);
    out.extend_from_slice(&rng.get_seed());
    out.extend_from_slice(&rng.get_stream().to_le_bytes());
    out.extend_from_slice(&rng.get_word_pos().to_le_bytes());
    out
}

/// Rebuilds a generator from [`rng_state_bytes`] output; continuing to draw
/// from it matches the original stream exactly.
pub fn rng_from_state(bytes: &[u8]) -> Result<ChaCha8Rng> {
    if bytes.len() != 56 {
        return Err(PwmError::Format(format!(
            "RNG state must be 56 bytes, got {}",
            bytes.len()
        )));
    }
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&bytes[..32]);
    let stream = u64::from_le_bytes(bytes[32..40].try_into().expect("8 bytes"));
    let word_pos = u128::from_le_bytes(bytes[40..56].try_into().expect("16 bytes"));
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    Ok(rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worldmodel::WorldModelConfig;
    use rand::Rng;

    fn scratch_dir(tag: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("pwm-ckpt-{tag}-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn tiny_wm(seed: u64) -> WorldModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cfg = WorldModelConfig::desk(3, 1, 2);
        cfg.latent_dim = 16;
        cfg.enc_hidden = vec![24];
        cfg.dyn_hidden = vec![24];
        cfg.rew_hidden = vec![24];
        cfg.task_embed_dim = 4;
        WorldModel::init(cfg, &mut rng).unwrap()
    }

    #[test]
    fn save_load_save_produces_byte_identical_files() {
        let wm = tiny_wm(7);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let _: f32 = rng.gen();
        let ckpt = Checkpoint::of_world_model(&wm, "wm.latent_dim = 16\n", rng_state_bytes(&rng));
        let dir = scratch_dir("roundtrip");
        let p1 = dir.join("a.pwmc");
        let p2 = dir.join("b.pwmc");
        ckpt.save(&p1).unwrap();
        let loaded = Checkpoint::load(&p1).unwrap();
        loaded.save(&p2).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        let b2 = std::fs::read(&p2).unwrap();
        assert_eq!(b1, b2, "save → load → save must be byte-identical");
        assert_eq!(loaded, ckpt);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn world_model_round_trip_restores_every_parameter() {
        let wm = tiny_wm(11);
        let ckpt = Checkpoint::of_world_model(&wm, "", vec![]);
        let bytes = ckpt.to_bytes();
        let loaded = Checkpoint::from_bytes(&bytes).unwrap();
        let mut target = tiny_wm(99);
        assert_ne!(target.param_hash(), wm.param_hash());
        loaded.apply_to_world_model(&mut target).unwrap();
        assert_eq!(target.param_hash(), wm.param_hash());
    }

    #[test]
    fn actor_and_critic_rebuild_from_stored_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let actor = Actor::init(
            ActorConfig { input_dim: 16, act_dim: 2, hidden: vec![24, 12], init_log_std: 0.1 },
            &mut rng,
        );
        let a_ckpt = Checkpoint::of_actor(&actor, "", vec![]);
        let rebuilt = Checkpoint::from_bytes(&a_ckpt.to_bytes()).unwrap().to_actor().unwrap();
        assert_eq!(rebuilt.cfg().input_dim, 16);
        assert_eq!(rebuilt.cfg().act_dim, 2);
        assert_eq!(rebuilt.cfg().hidden, vec![24, 12]);
        let obs = Tensor::new([1, 16], (0..16).map(|i| i as f32 * 0.1).collect::<Vec<_>>());
        assert_eq!(rebuilt.act_plain(&obs).data(), actor.act_plain(&obs).data());

        let critic = CriticEnsemble::init(
            CriticConfig { input_dim: 16, hidden: vec![24, 12], members: 3 },
            &mut rng,
        );
        let c_ckpt = Checkpoint::of_critic(&critic, "", vec![]);
        let rebuilt = Checkpoint::from_bytes(&c_ckpt.to_bytes()).unwrap().to_critic().unwrap();
        assert_eq!(rebuilt.num_members(), 3);
        assert_eq!(rebuilt.value_mean_plain(&obs), critic.value_mean_plain(&obs));
    }

    #[test]
    fn component_mismatch_is_rejected() {
        let wm = tiny_wm(1);
        let ckpt = Checkpoint::of_world_model(&wm, "", vec![]);
        match ckpt.to_actor() {
            Err(PwmError::Format(msg)) => {
                assert!(msg.contains("wm") && msg.contains("actor"), "got: {msg}")
            }
            other => panic!("expected a format error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn corrupted_and_truncated_bytes_are_format_errors() {
        let wm = tiny_wm(2);
        let ckpt = Checkpoint::of_world_model(&wm, "cfg", vec![1, 2, 3]);
        let mut bytes = ckpt.to_bytes();
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(PwmError::Format(_))));

        let bytes = ckpt.to_bytes();
        for cut in [3usize, 9, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(PwmError::Format(_))),
                "cut at {cut} must fail"
            );
        }

        let mut extended = ckpt.to_bytes();
        extended.push(0);
        assert!(matches!(Checkpoint::from_bytes(&extended), Err(PwmError::Format(_))));
    }

    #[test]
    fn rng_state_round_trip_resumes_the_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..5 {
            let _: f64 = rng.gen();
        }
        let state = rng_state_bytes(&rng);
        let expected: Vec<f64> = (0..5).map(|_| rng.gen()).collect();
        let mut resumed = rng_from_state(&state).unwrap();
        let got: Vec<f64> = (0..5).map(|_| resumed.gen()).collect();
        assert_eq!(got, expected);
    }
}
