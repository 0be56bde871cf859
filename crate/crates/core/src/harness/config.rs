//! Flat `key = value` run configuration.
//!
//! Grammar: one `key = value` pair per line; `#` starts a comment (whole-line
//! or trailing); blank lines are ignored; keys are dotted lowercase names and
//! values are scalars, names, or comma-separated lists. There is no nesting.
//! Every valid key has a built-in default, so unknown keys are rejected by
//! name. Precedence, lowest to highest: built-in defaults, then the config
//! file, then `--override key=value` flags in order.

use std::collections::BTreeMap;
use std::path::Path;

use crate::policy::{ActorBackend, PwmConfig};
use crate::worldmodel::{WmRegularization, WorldModelConfig};
use crate::{PwmError, Result};

/// Every recognized key with its built-in default.
pub const DEFAULT_KEYS: &[(&str, &str)] = &[
    // Task set and seeds.
    ("tasks", "pendulum-swingup"),
    ("seeds", "0"),
    // Offline data collection.
    ("data.episodes", "2000"),
    ("data.random_fraction", "0.3"),
    ("data.checkpoints", "4"),
    ("data.collector_steps", "150"),
    ("data.noise", "0.2"),
    // World model.
    ("wm.latent_dim", "32"),
    ("wm.enc_hidden", "64"),
    ("wm.dyn_hidden", "64"),
    ("wm.rew_hidden", "64"),
    ("wm.task_embed_dim", "8"),
    ("wm.simnorm_group", "8"),
    ("wm.regularization", "mish-simnorm"),
    ("wm.num_bins", "101"),
    ("wm.vmin", "-10"),
    ("wm.vmax", "10"),
    ("wm.horizon", "16"),
    ("wm.gamma", "0.99"),
    ("wm.lr", "0.0003"),
    ("wm.grad_clip", "20"),
    ("wm.batch", "64"),
    ("wm.steps", "10000"),
    // Policy extraction.
    ("policy.horizon", "16"),
    ("policy.batch", "64"),
    ("policy.gamma", "0.99"),
    ("policy.lambda", "0.95"),
    ("policy.actor_lr", "0.0005"),
    ("policy.critic_lr", "0.0005"),
    ("policy.actor_clip", "1"),
    ("policy.critic_clip", "100"),
    ("policy.critic_splits", "4"),
    ("policy.critic_iters", "8"),
    ("policy.actor_hidden", "64,64"),
    ("policy.critic_hidden", "64,64"),
    ("policy.num_critics", "3"),
    ("policy.backend", "terminal"),
    ("policy.ema_target", "false"),
    ("policy.ema_tau", "0.01"),
    ("policy.eval_every", "500"),
    ("policy.eval_episodes", "3"),
    ("policy.steps", "10000"),
    // Gradient diagnostics.
    ("diag.horizons", "3,16,50"),
    ("diag.samples", "100"),
    ("diag.sigma", "0.1"),
    ("diag.checkpoints", "3"),
    ("diag.short_horizon", "3"),
    // Standalone evaluation.
    ("eval.episodes", "20"),
    // Ablation study selector: ladder | batch | objective.
    ("ablate.study", "ladder"),
];

/// A resolved flat configuration: defaults overlaid with file and CLI
/// overrides.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunConfig {
    map: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            map: DEFAULT_KEYS.iter().map(|&(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl RunConfig {
    /// Defaults, then the optional file, then overrides, in that order.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)?;
            cfg.apply_file(&text)?;
        }
        for ov in overrides {
            cfg.apply_override(ov)?;
        }
        Ok(cfg)
    }

    fn set_checked(&mut self, key: &str, value: &str) -> Result<()> {
        if !self.map.contains_key(key) {
            return Err(PwmError::UnknownConfigKey { key: key.to_string() });
        }
        self.map.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies a config-file body (the `key = value` grammar above).
    pub fn apply_file(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                PwmError::ConfigSyntax(format!("line {}: expected `key = value`, got `{raw}`", lineno + 1))
            })?;
            self.set_checked(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Applies one `key=value` CLI override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| PwmError::ConfigSyntax(format!("override `{kv}` is not key=value")))?;
        self.set_checked(key.trim(), value.trim())
    }

    /// Raw string value of a known key.
    pub fn get(&self, key: &str) -> &str {
        self.map
            .get(key)
            .unwrap_or_else(|| panic!("config key {key} is not in the schema"))
            .as_str()
    }

    /// Sorted `key = value` lines; applying this text to fresh defaults
    /// reproduces the config exactly.
    pub fn resolved_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.map {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    fn bad(&self, key: &str) -> PwmError {
        PwmError::InvalidConfigValue { key: key.to_string(), value: self.get(key).to_string() }
    }

    pub fn usize_of(&self, key: &str) -> Result<usize> {
        self.get(key).parse().map_err(|_| self.bad(key))
    }

    pub fn f32_of(&self, key: &str) -> Result<f32> {
        let v: f32 = self.get(key).parse().map_err(|_| self.bad(key))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(self.bad(key))
        }
    }

    pub fn f64_of(&self, key: &str) -> Result<f64> {
        let v: f64 = self.get(key).parse().map_err(|_| self.bad(key))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(self.bad(key))
        }
    }

    pub fn bool_of(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(self.bad(key)),
        }
    }

    pub fn usize_list(&self, key: &str) -> Result<Vec<usize>> {
        self.get(key)
            .split(',')
            .map(|s| s.trim().parse().map_err(|_| self.bad(key)))
            .collect()
    }

    /// Task names, in registry order.
    pub fn tasks(&self) -> Vec<String> {
        self.get("tasks").split(',').map(|s| s.trim().to_string()).collect()
    }

    /// Seed list; must be nonempty.
    pub fn seeds(&self) -> Result<Vec<u64>> {
        let seeds: Vec<u64> = self
            .get("seeds")
            .split(',')
            .map(|s| s.trim().parse().map_err(|_| self.bad("seeds")))
            .collect::<Result<_>>()?;
        if seeds.is_empty() {
            return Err(self.bad("seeds"));
        }
        Ok(seeds)
    }

    pub fn regularization(&self) -> Result<WmRegularization> {
        match self.get("wm.regularization") {
            "relu" => Ok(WmRegularization::Relu),
            "mish" => Ok(WmRegularization::Mish),
            "mish-simnorm" => Ok(WmRegularization::MishSimNorm),
            _ => Err(self.bad("wm.regularization")),
        }
    }

    /// Builds the world-model config for the given (padded) dimensions.
    pub fn world_model_config(
        &self,
        obs_dim: usize,
        act_dim: usize,
        num_tasks: usize,
    ) -> Result<WorldModelConfig> {
        let mut cfg = WorldModelConfig::desk(obs_dim, act_dim, num_tasks);
        cfg.latent_dim = self.usize_of("wm.latent_dim")?;
        cfg.enc_hidden = self.usize_list("wm.enc_hidden")?;
        cfg.dyn_hidden = self.usize_list("wm.dyn_hidden")?;
        cfg.rew_hidden = self.usize_list("wm.rew_hidden")?;
        cfg.task_embed_dim = self.usize_of("wm.task_embed_dim")?;
        cfg.simnorm_group = self.usize_of("wm.simnorm_group")?;
        cfg.regularization = self.regularization()?;
        cfg.num_bins = self.usize_of("wm.num_bins")?;
        cfg.vmin = self.f32_of("wm.vmin")?;
        cfg.vmax = self.f32_of("wm.vmax")?;
        cfg.horizon = self.usize_of("wm.horizon")?;
        cfg.gamma = self.f32_of("wm.gamma")?;
        cfg.lr = self.f32_of("wm.lr")?;
        cfg.grad_clip = self.f32_of("wm.grad_clip")?;
        cfg.batch = self.usize_of("wm.batch")?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Builds the policy-extraction config.
    pub fn pwm_config(&self) -> Result<PwmConfig> {
        let mut cfg = PwmConfig::desk();
        cfg.horizon = self.usize_of("policy.horizon")?;
        cfg.batch = self.usize_of("policy.batch")?;
        cfg.gamma = self.f32_of("policy.gamma")?;
        cfg.lambda = self.f32_of("policy.lambda")?;
        cfg.actor_lr = self.f32_of("policy.actor_lr")?;
        cfg.critic_lr = self.f32_of("policy.critic_lr")?;
        cfg.actor_clip = self.f32_of("policy.actor_clip")?;
        cfg.critic_clip = self.f32_of("policy.critic_clip")?;
        cfg.critic_splits = self.usize_of("policy.critic_splits")?;
        cfg.critic_iters = self.usize_of("policy.critic_iters")?;
        cfg.actor_hidden = self.usize_list("policy.actor_hidden")?;
        cfg.critic_hidden = self.usize_list("policy.critic_hidden")?;
        cfg.num_critics = self.usize_of("policy.num_critics")?;
        cfg.backend = match self.get("policy.backend") {
            "terminal" => ActorBackend::TerminalValue,
            "td-lambda" => ActorBackend::TdLambda,
            _ => return Err(self.bad("policy.backend")),
        };
        cfg.ema_target = self.bool_of("policy.ema_target")?;
        cfg.ema_tau = self.f32_of("policy.ema_tau")?;
        cfg.eval_every = self.usize_of("policy.eval_every")?;
        cfg.eval_episodes = self.usize_of("policy.eval_episodes")?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_pin_the_training_hyperparameters() {
        let cfg = RunConfig::default();
        let pwm = cfg.pwm_config().unwrap();
        assert_eq!(pwm.horizon, 16);
        assert_eq!(pwm.batch, 64);
        assert_eq!(pwm.gamma, 0.99);
        assert_eq!(pwm.lambda, 0.95);
        assert_eq!(pwm.actor_lr, 5e-4);
        assert_eq!(pwm.critic_lr, 5e-4);
        assert_eq!(pwm.actor_clip, 1.0);
        assert_eq!(pwm.critic_clip, 100.0);
        assert_eq!(pwm.critic_splits, 4);
        assert_eq!(pwm.critic_iters, 8);
        assert_eq!(pwm.num_critics, 3);
        let wm = cfg.world_model_config(3, 1, 1).unwrap();
        assert_eq!(wm.num_bins, 101);
        assert_eq!(wm.horizon, 16);
        assert_eq!(wm.grad_clip, 20.0);
        assert_eq!(wm.lr, 3e-4);
        assert_eq!(cfg.usize_of("data.episodes").unwrap(), 2000);
        assert_eq!(cfg.usize_of("wm.steps").unwrap(), 10_000);
    }

    #[test]
    fn three_layers_stack_with_override_on_top() {
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.get("wm.latent_dim"), "32");
        cfg.apply_file("wm.latent_dim = 48\npolicy.batch = 16\n").unwrap();
        assert_eq!(cfg.get("wm.latent_dim"), "48");
        assert_eq!(cfg.get("policy.batch"), "16");
        cfg.apply_override("wm.latent_dim=64").unwrap();
        assert_eq!(cfg.get("wm.latent_dim"), "64", "override must beat the file");
        assert_eq!(cfg.get("policy.batch"), "16", "file must beat the default");
        assert_eq!(cfg.get("policy.horizon"), "16", "untouched keys keep defaults");
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let mut cfg = RunConfig::default();
        let err = cfg.apply_file("wm.latent_dimension = 48\n").unwrap_err();
        match err {
            PwmError::UnknownConfigKey { key } => assert_eq!(key, "wm.latent_dimension"),
            other => panic!("expected UnknownConfigKey, got {other:?}"),
        }
        let err = cfg.apply_override("polcy.batch=8").unwrap_err();
        match err {
            PwmError::UnknownConfigKey { key } => assert_eq!(key, "polcy.batch"),
            other => panic!("expected UnknownConfigKey, got {other:?}"),
        }
    }

    #[test]
    fn comments_and_blanks_are_ignored_and_bad_lines_are_syntax_errors() {
        let mut cfg = RunConfig::default();
        cfg.apply_file("# leading comment\n\n  wm.batch = 32  # trailing comment\n").unwrap();
        assert_eq!(cfg.get("wm.batch"), "32");
        let err = cfg.apply_file("wm.batch 32\n").unwrap_err();
        assert!(matches!(err, PwmError::ConfigSyntax(_)));
        let err = cfg.apply_override("just-a-word").unwrap_err();
        assert!(matches!(err, PwmError::ConfigSyntax(_)));
    }

    #[test]
    fn bad_values_name_the_key_and_value() {
        let mut cfg = RunConfig::default();
        cfg.apply_override("policy.batch=many").unwrap();
        match cfg.pwm_config().unwrap_err() {
            PwmError::InvalidConfigValue { key, value } => {
                assert_eq!(key, "policy.batch");
                assert_eq!(value, "many");
            }
            other => panic!("expected InvalidConfigValue, got {other:?}"),
        }
        let mut cfg = RunConfig::default();
        cfg.apply_override("policy.backend=zeroth-order").unwrap();
        assert!(matches!(cfg.pwm_config(), Err(PwmError::InvalidConfigValue { .. })));
    }

    #[test]
    fn resolved_text_round_trips_to_an_equal_config() {
        let mut cfg = RunConfig::default();
        cfg.apply_override("wm.enc_hidden=128,128").unwrap();
        cfg.apply_override("tasks=pendulum-swingup,pendulum-spin").unwrap();
        let text = cfg.resolved_text();
        let mut again = RunConfig::default();
        again.apply_file(&text).unwrap();
        assert_eq!(cfg, again);
        assert!(text.contains("wm.enc_hidden = 128,128\n"));
    }

    #[test]
    fn lists_parse_into_dims_and_tasks() {
        let mut cfg = RunConfig::default();
        cfg.apply_override("policy.actor_hidden=400,200,100").unwrap();
        cfg.apply_override("tasks= pendulum-swingup , acrobot ").unwrap();
        assert_eq!(cfg.usize_list("policy.actor_hidden").unwrap(), vec![400, 200, 100]);
        assert_eq!(cfg.tasks(), vec!["pendulum-swingup", "acrobot"]);
        assert_eq!(cfg.seeds().unwrap(), vec![0]);
        cfg.apply_override("seeds=3,1,4").unwrap();
        assert_eq!(cfg.seeds().unwrap(), vec![3, 1, 4]);
    }
}
