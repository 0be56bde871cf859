//! Policy extraction from a frozen world model: a stochastic tanh actor, a
//! value ensemble, TD(λ) targets, and the first-order training loop that
//! backpropagates model rollouts into the actor alone.

pub mod actor;
pub mod critic;
pub mod fog;
pub mod td;
pub mod trainer;

pub use actor::{Actor, ActorConfig, StagedActor, STD_FLOOR};
pub use critic::{critic_update, CriticConfig, CriticEnsemble, CriticOpt, StagedCritic};
pub use fog::{train_fog_oracle, FogConfig, FogOracle, FogTrainLog};
pub use td::{td_lambda_targets, td_lambda_targets_direct};
pub use trainer::{
    actor_objective, actor_objective_td_lambda, actor_rollout, eval_policy, multitask_extract,
    pwm_train_policy, ActorBackend, EvalPoint, EvalReport, MultitaskArtifacts, MultitaskMode,
    PolicyArtifacts, PolicyTrainEntry, PwmConfig, Rollout, TrainPolicyLog,
};
