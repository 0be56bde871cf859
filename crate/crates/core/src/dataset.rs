//! Trajectory datasets: in-memory episode storage, window sampling for
//! training, and a little-endian binary file format.
//!
//! An episode of length `L` holds `L+1` observations (including the terminal
//! one), `L` actions, and `L` rewards, all already padded to the registry's
//! shared dims. Files store five flat 32-bit arrays — observations, actions,
//! rewards, done flags, task ids — with a JSON manifest; episode boundaries
//! are reconstructed from the done flags.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::{PwmError, Result};

const MAGIC: &[u8; 4] = b"PWMD";
const VERSION: u32 = 1;

/// One rollout: `len()+1` observations, `len()` actions and rewards.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub task: usize,
    obs_dim: usize,
    act_dim: usize,
    /// `(len+1) * obs_dim`, row-major.
    pub obs: Vec<f32>,
    /// `len * act_dim`, row-major.
    pub actions: Vec<f32>,
    /// `len`.
    pub rewards: Vec<f32>,
}

impl Episode {
    pub fn new(
        task: usize,
        obs_dim: usize,
        act_dim: usize,
        obs: Vec<f32>,
        actions: Vec<f32>,
        rewards: Vec<f32>,
    ) -> Self {
        let len = rewards.len();
        assert_eq!(obs.len(), (len + 1) * obs_dim, "episode obs rows must be len+1");
        assert_eq!(actions.len(), len * act_dim, "episode action rows must be len");
        Episode { task, obs_dim, act_dim, obs, actions, rewards }
    }

    /// Number of transitions.
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn obs_at(&self, t: usize) -> &[f32] {
        &self.obs[t * self.obs_dim..(t + 1) * self.obs_dim]
    }

    pub fn action_at(&self, t: usize) -> &[f32] {
        &self.actions[t * self.act_dim..(t + 1) * self.act_dim]
    }

    /// Sum of rewards.
    pub fn episode_return(&self) -> f64 {
        self.rewards.iter().map(|&r| r as f64).sum()
    }
}

/// Manifest stored inside dataset files.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub version: u32,
    pub task_names: Vec<String>,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub episodes: usize,
    pub transitions: usize,
    /// Human-readable description of the behavior policies that produced the
    /// data.
    pub provenance: String,
}

/// A collection of episodes over a fixed task registry, padded to shared
/// dims.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub task_names: Vec<String>,
    pub provenance: String,
    pub episodes: Vec<Episode>,
}

/// A batch of fixed-horizon trajectory windows, laid out time-major per
/// field: index `[b][t]` lives at row `b * steps + t`.
#[derive(Clone, Debug)]
pub struct TrajBatch {
    pub batch: usize,
    pub horizon: usize,
    pub obs_dim: usize,
    pub act_dim: usize,
    /// `batch * (horizon+1) * obs_dim`.
    obs: Vec<f32>,
    /// `batch * horizon * act_dim`.
    act: Vec<f32>,
    /// `batch * horizon`.
    rew: Vec<f32>,
    pub tasks: Vec<usize>,
}

impl TrajBatch {
    /// Builds a batch from already-flattened window arrays. Lengths must
    /// match the documented field layouts.
    #[allow(clippy::too_many_arguments)]
    pub fn from_raw(
        batch: usize,
        horizon: usize,
        obs_dim: usize,
        act_dim: usize,
        obs: Vec<f32>,
        act: Vec<f32>,
        rew: Vec<f32>,
        tasks: Vec<usize>,
    ) -> Self {
        assert_eq!(obs.len(), batch * (horizon + 1) * obs_dim, "trajbatch obs length");
        assert_eq!(act.len(), batch * horizon * act_dim, "trajbatch action length");
        assert_eq!(rew.len(), batch * horizon, "trajbatch reward length");
        assert_eq!(tasks.len(), batch, "trajbatch task length");
        TrajBatch { batch, horizon, obs_dim, act_dim, obs, act, rew, tasks }
    }

    /// The same windows cut down to their first `horizon` steps.
    pub fn truncate(&self, horizon: usize) -> TrajBatch {
        assert!(horizon >= 1 && horizon <= self.horizon, "truncate horizon out of range");
        let (od, ad) = (self.obs_dim, self.act_dim);
        let mut obs = Vec::with_capacity(self.batch * (horizon + 1) * od);
        let mut act = Vec::with_capacity(self.batch * horizon * ad);
        let mut rew = Vec::with_capacity(self.batch * horizon);
        for b in 0..self.batch {
            let o = b * (self.horizon + 1) * od;
            obs.extend_from_slice(&self.obs[o..o + (horizon + 1) * od]);
            let a = b * self.horizon * ad;
            act.extend_from_slice(&self.act[a..a + horizon * ad]);
            let r = b * self.horizon;
            rew.extend_from_slice(&self.rew[r..r + horizon]);
        }
        TrajBatch {
            batch: self.batch,
            horizon,
            obs_dim: od,
            act_dim: ad,
            obs,
            act,
            rew,
            tasks: self.tasks.clone(),
        }
    }

    /// Observations at window step `t` as a `[batch, obs_dim]` tensor.
    pub fn obs_t(&self, t: usize) -> Tensor<f32> {
        assert!(t <= self.horizon);
        let d = self.obs_dim;
        let mut data = Vec::with_capacity(self.batch * d);
        for b in 0..self.batch {
            let row = (b * (self.horizon + 1) + t) * d;
            data.extend_from_slice(&self.obs[row..row + d]);
        }
        Tensor::new([self.batch, d], data)
    }

    /// Actions at window step `t` as a `[batch, act_dim]` tensor.
    pub fn act_t(&self, t: usize) -> Tensor<f32> {
        assert!(t < self.horizon);
        let d = self.act_dim;
        let mut data = Vec::with_capacity(self.batch * d);
        for b in 0..self.batch {
            let row = (b * self.horizon + t) * d;
            data.extend_from_slice(&self.act[row..row + d]);
        }
        Tensor::new([self.batch, d], data)
    }

    /// Rewards at window step `t`, one per batch row.
    pub fn rew_t(&self, t: usize) -> Vec<f32> {
        assert!(t < self.horizon);
        (0..self.batch).map(|b| self.rew[b * self.horizon + t]).collect()
    }

    /// All next-step observations (`t = 1..=horizon`), time-major:
    /// rows `(t-1) * batch + b`, as one `[batch * horizon, obs_dim]` tensor.
    /// This is the layout the world-model consistency targets want.
    pub fn next_obs_time_major(&self) -> Tensor<f32> {
        let d = self.obs_dim;
        let mut data = Vec::with_capacity(self.batch * self.horizon * d);
        for t in 1..=self.horizon {
            for b in 0..self.batch {
                let row = (b * (self.horizon + 1) + t) * d;
                data.extend_from_slice(&self.obs[row..row + d]);
            }
        }
        Tensor::new([self.batch * self.horizon, d], data)
    }
}

impl Dataset {
    pub fn new(
        obs_dim: usize,
        act_dim: usize,
        task_names: Vec<String>,
        provenance: String,
    ) -> Self {
        Dataset { obs_dim, act_dim, task_names, provenance, episodes: Vec::new() }
    }

    pub fn push(&mut self, ep: Episode) {
        assert_eq!(ep.obs_dim, self.obs_dim, "episode obs dim mismatch");
        assert_eq!(ep.act_dim, self.act_dim, "episode action dim mismatch");
        assert!(ep.task < self.task_names.len(), "episode task id out of range");
        self.episodes.push(ep);
    }

    pub fn transitions(&self) -> usize {
        self.episodes.iter().map(Episode::len).sum()
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            version: VERSION,
            task_names: self.task_names.clone(),
            obs_dim: self.obs_dim,
            act_dim: self.act_dim,
            episodes: self.episodes.len(),
            transitions: self.transitions(),
            provenance: self.provenance.clone(),
        }
    }

    /// Samples `batch` windows of `horizon` transitions uniformly over all
    /// valid (episode, offset) windows, restricted to `task` when given.
    pub fn sample_windows(
        &self,
        rng: &mut ChaCha8Rng,
        batch: usize,
        horizon: usize,
        task: Option<usize>,
    ) -> Result<TrajBatch> {
        let eligible: Vec<(usize, usize)> = self
            .episodes
            .iter()
            .enumerate()
            .filter(|(_, e)| e.len() >= horizon && task.map_or(true, |t| e.task == t))
            .map(|(i, e)| (i, e.len() - horizon + 1))
            .collect();
        let total_windows: usize = eligible.iter().map(|&(_, n)| n).sum();
        if total_windows == 0 {
            return Err(PwmError::Shape(format!(
                "no episodes long enough for horizon {horizon}{}",
                task.map_or(String::new(), |t| format!(" in task {t}"))
            )));
        }

        let (od, ad) = (self.obs_dim, self.act_dim);
        let mut obs = Vec::with_capacity(batch * (horizon + 1) * od);
        let mut act = Vec::with_capacity(batch * horizon * ad);
        let mut rew = Vec::with_capacity(batch * horizon);
        let mut tasks = Vec::with_capacity(batch);
        for _ in 0..batch {
            let mut w = rng.gen_range(0..total_windows);
            let (ep_idx, offset) = eligible
                .iter()
                .find_map(|&(i, n)| {
                    if w < n {
                        Some((i, w))
                    } else {
                        w -= n;
                        None
                    }
                })
                .expect("window index in range");
            let ep = &self.episodes[ep_idx];
            obs.extend_from_slice(&ep.obs[offset * od..(offset + horizon + 1) * od]);
            act.extend_from_slice(&ep.actions[offset * ad..(offset + horizon) * ad]);
            rew.extend_from_slice(&ep.rewards[offset..offset + horizon]);
            tasks.push(ep.task);
        }
        Ok(TrajBatch { batch, horizon, obs_dim: od, act_dim: ad, obs, act, rew, tasks })
    }

    /// Samples `batch` observations uniformly over all visited states,
    /// restricted to `task` when given. Returns the tensor and task ids.
    pub fn sample_obs(
        &self,
        rng: &mut ChaCha8Rng,
        batch: usize,
        task: Option<usize>,
    ) -> Result<(Tensor<f32>, Vec<usize>)> {
        let eligible: Vec<usize> = self
            .episodes
            .iter()
            .enumerate()
            .filter(|(_, e)| task.map_or(true, |t| e.task == t) && !e.is_empty())
            .map(|(i, _)| i)
            .collect();
        if eligible.is_empty() {
            return Err(PwmError::Shape(format!(
                "no episodes available{}",
                task.map_or(String::new(), |t| format!(" for task {t}"))
            )));
        }
        let mut data = Vec::with_capacity(batch * self.obs_dim);
        let mut tasks = Vec::with_capacity(batch);
        for _ in 0..batch {
            let ep = &self.episodes[eligible[rng.gen_range(0..eligible.len())]];
            let t = rng.gen_range(0..=ep.len());
            data.extend_from_slice(ep.obs_at(t));
            tasks.push(ep.task);
        }
        Ok((Tensor::new([batch, self.obs_dim], data), tasks))
    }

    // ---- persistence ----

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        // Flatten: obs rows include each episode's terminal observation;
        // transition-level arrays mark episode ends in `done`.
        let n = self.transitions();
        let mut s = Vec::with_capacity((n + self.episodes.len()) * self.obs_dim);
        let mut a = Vec::with_capacity(n * self.act_dim);
        let mut r = Vec::with_capacity(n);
        let mut done = Vec::with_capacity(n);
        let mut task = Vec::with_capacity(n);
        for ep in &self.episodes {
            s.extend_from_slice(&ep.obs);
            a.extend_from_slice(&ep.actions);
            r.extend_from_slice(&ep.rewards);
            for t in 0..ep.len() {
                done.push(if t + 1 == ep.len() { 1.0 } else { 0.0 });
                task.push(ep.task as f32);
            }
        }

        let manifest = serde_json::to_vec(&self.manifest())?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(&manifest);
        for arr in [&s, &a, &r, &done, &task] {
            out.extend_from_slice(&(arr.len() as u64).to_le_bytes());
            for &v in arr.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Dataset> {
        let mut cur = std::io::Cursor::new(bytes);
        let mut magic = [0u8; 4];
        cur.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(PwmError::Format("not a dataset file (bad magic)".into()));
        }
        let version = read_u32(&mut cur)?;
        if version != VERSION {
            return Err(PwmError::Format(format!(
                "unsupported dataset version {version} (expected {VERSION})"
            )));
        }
        let mlen = read_u32(&mut cur)? as usize;
        let mut mbytes = vec![0u8; mlen];
        cur.read_exact(&mut mbytes)?;
        let manifest: DatasetManifest = serde_json::from_slice(&mbytes)?;

        let s = read_f32_array(&mut cur)?;
        let a = read_f32_array(&mut cur)?;
        let r = read_f32_array(&mut cur)?;
        let done = read_f32_array(&mut cur)?;
        let task = read_f32_array(&mut cur)?;

        let (od, ad) = (manifest.obs_dim, manifest.act_dim);
        if r.len() != manifest.transitions
            || done.len() != r.len()
            || task.len() != r.len()
            || a.len() != r.len() * ad
            || s.len() != (r.len() + manifest.episodes) * od
        {
            return Err(PwmError::Format(
                "dataset arrays inconsistent with manifest".into(),
            ));
        }

        let mut ds = Dataset::new(od, ad, manifest.task_names, manifest.provenance);
        let (mut si, mut ti) = (0usize, 0usize);
        let mut start = 0usize;
        for t in 0..r.len() {
            if done[t] == 1.0 {
                let len = t - start + 1;
                let obs = s[si..si + (len + 1) * od].to_vec();
                let actions = a[start * ad..(t + 1) * ad].to_vec();
                let rewards = r[start..=t].to_vec();
                let task_id = task[start] as usize;
                ds.push(Episode::new(task_id, od, ad, obs, actions, rewards));
                si += (len + 1) * od;
                start = t + 1;
                ti += 1;
            }
        }
        if ti != manifest.episodes || start != r.len() {
            return Err(PwmError::Format("done flags inconsistent with manifest".into()));
        }
        Ok(ds)
    }
}

fn read_u32(cur: &mut std::io::Cursor<&[u8]>) -> Result<u32> {
    let mut b = [0u8; 4];
    cur.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32_array(cur: &mut std::io::Cursor<&[u8]>) -> Result<Vec<f32>> {
    let mut b = [0u8; 8];
    cur.read_exact(&mut b)?;
    let n = u64::from_le_bytes(b) as usize;
    let mut out = Vec::with_capacity(n);
    let mut buf = [0u8; 4];
    for _ in 0..n {
        cur.read_exact(&mut buf)?;
        out.push(f32::from_le_bytes(buf));
    }
    Ok(out)
}

/// Writes raw bytes through a [`Write`], a convenience for tests.
pub fn write_all(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}
