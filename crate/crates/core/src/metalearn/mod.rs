//! Meta-learners (Reptile, first-order MAML, prototypical networks) and the
//! training, fine-tuning and evaluation regimes built on them.
//!
//! Task heads are keyed by the dataset's task tag, so every language of one
//! task shares a head and an auxiliary task type gets its own. Head
//! cross-entropy always uses dataset label ids; the prototypical loss uses
//! episode-local class positions.

mod learners;
mod metrics;
mod regimes;

use serde::{Deserialize, Serialize};

use crate::episodes::{EpisodeSpec, Scenario};
use crate::error::{Error, Result};
use crate::numerics::AdamWConfig;

pub use learners::{
    head_accuracy, head_loss, maml_inner_update, maml_step, proto_classify, proto_episode_accuracy,
    proto_episode_loss, prototypes, reptile_inner, reptile_inner_step, reptile_outer, InnerRun, ProtoLoss,
};
pub use metrics::{MetricRow, RunMetrics};
pub use regimes::{
    evaluate, finetune, train, EvalMethod, Evaluation, FinetuneConfig, FinetuneMode, TrainData,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReptileConfig {
    /// Inner AdamW steps `m` per task.
    pub inner_steps: usize,
    pub inner: AdamWConfig,
    /// Outer step size `β` at iteration 0.
    pub outer_step: f64,
    /// Decay `β` linearly to 0 over the run.
    pub decay_outer_step: bool,
    /// Tasks per outer update.
    pub queue_length: usize,
    pub way: usize,
    pub shot: usize,
}

impl Default for ReptileConfig {
    fn default() -> Self {
        ReptileConfig {
            inner_steps: 3,
            inner: AdamWConfig::default(),
            outer_step: 0.5,
            decay_outer_step: true,
            queue_length: 4,
            way: 2,
            shot: 4,
        }
    }
}

impl ReptileConfig {
    pub fn validate(&self) -> Result<()> {
        if self.inner_steps == 0 || self.queue_length == 0 {
            return Err(Error::InvalidConfig("reptile inner_steps and queue_length must be at least 1".into()));
        }
        if !(self.outer_step > 0.0 && self.outer_step <= 1.0) {
            return Err(Error::InvalidConfig(format!("reptile outer_step {} outside (0, 1]", self.outer_step)));
        }
        self.inner.validate()
    }

    fn episode(&self, scenario: Scenario, target_fraction: f64) -> EpisodeSpec {
        // support only
        EpisodeSpec { way: self.way, shot: self.shot, query_per_class: Some(0), scenario, target_fraction }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MamlConfig {
    /// Inner SGD rate `α`.
    pub inner_lr: f64,
    /// Outer rate `β`.
    pub outer_lr: f64,
    pub inner_steps: usize,
    /// Episodes per meta-batch.
    pub meta_batch: usize,
    pub way: usize,
    pub shot: usize,
    pub query_per_class: Option<usize>,
}

impl Default for MamlConfig {
    fn default() -> Self {
        MamlConfig {
            inner_lr: 1e-2,
            outer_lr: 1e-3,
            inner_steps: 1,
            meta_batch: 4,
            way: 3,
            shot: 4,
            query_per_class: None,
        }
    }
}

impl MamlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.inner_lr > 0.0 && self.outer_lr > 0.0) {
            return Err(Error::InvalidConfig("maml learning rates must be positive".into()));
        }
        if self.inner_steps == 0 || self.meta_batch == 0 {
            return Err(Error::InvalidConfig("maml inner_steps and meta_batch must be at least 1".into()));
        }
        Ok(())
    }

    fn episode(&self, scenario: Scenario, target_fraction: f64) -> EpisodeSpec {
        EpisodeSpec {
            way: self.way,
            shot: self.shot,
            query_per_class: self.query_per_class,
            scenario,
            target_fraction,
        }
    }
}

/// Prototypical network settings; the distance is squared Euclidean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtoConfig {
    pub way: usize,
    pub shot: usize,
    pub query_per_class: Option<usize>,
    /// Weight of the distance cross-entropy.
    pub lambda_dce: f64,
    /// Weight of the task-head cross-entropy.
    pub lambda_ce: f64,
    pub optimizer: AdamWConfig,
}

impl Default for ProtoConfig {
    fn default() -> Self {
        ProtoConfig {
            way: 3,
            shot: 4,
            query_per_class: None,
            lambda_dce: 1.0,
            lambda_ce: 1.0,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl ProtoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_dce >= 0.0 && self.lambda_ce >= 0.0) || self.lambda_dce + self.lambda_ce == 0.0 {
            return Err(Error::InvalidConfig("prototypical loss weights must be non-negative and not both zero".into()));
        }
        if self.way < 2 {
            return Err(Error::InvalidConfig("prototypical episodes need way >= 2".into()));
        }
        self.optimizer.validate()
    }

    fn episode(&self, scenario: Scenario, target_fraction: f64) -> EpisodeSpec {
        EpisodeSpec {
            way: self.way,
            shot: self.shot,
            query_per_class: self.query_per_class,
            scenario,
            target_fraction,
        }
    }
}

/// Plain mini-batch training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BatchConfig {
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
}

impl Default for BatchConfig {
    fn default() -> Self {
        BatchConfig { batch_size: 32, optimizer: AdamWConfig::default() }
    }
}

impl BatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        self.optimizer.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Learner {
    Reptile(ReptileConfig),
    Maml(MamlConfig),
    Protonet(ProtoConfig),
    NonEpisodic(BatchConfig),
}

impl Default for Learner {
    fn default() -> Self {
        Learner::Reptile(ReptileConfig::default())
    }
}

impl Learner {
    pub fn name(&self) -> &'static str {
        match self {
            Learner::Reptile(_) => "reptile",
            Learner::Maml(_) => "maml",
            Learner::Protonet(_) => "protonet",
            Learner::NonEpisodic(_) => "non_episodic",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Learner::Reptile(c) => c.validate(),
            Learner::Maml(c) => c.validate(),
            Learner::Protonet(c) => c.validate(),
            Learner::NonEpisodic(c) => c.validate(),
        }
    }
}

/// Schedule and learner for one training run. `iterations` counts learner
/// updates (one Reptile outer step, one MAML meta-batch, one ProtoNet
/// episode, one mini-batch); the `epochs` partition them evenly and only
/// label metric rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learner: Learner,
    pub iterations: usize,
    pub epochs: usize,
    /// A metric row every this many iterations.
    pub eval_interval: usize,
    /// Dev episodes per evaluation (prototypical learner only).
    pub eval_episodes: usize,
    pub scenario: Scenario,
    pub target_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learner: Learner::default(),
            iterations: 20000,
            epochs: 2,
            eval_interval: 500,
            eval_episodes: 20,
            scenario: Scenario::AuxOnly,
            target_fraction: 1.0 / 3.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.eval_interval == 0 {
            return Err(Error::InvalidConfig("epochs and eval_interval must be at least 1".into()));
        }
        self.learner.validate()?;
        self.episode_spec().map_or(Ok(()), |s| s.validate())
    }

    /// Episode shape for episodic learners.
    pub fn episode_spec(&self) -> Option<EpisodeSpec> {
        match &self.learner {
            Learner::Reptile(c) => Some(c.episode(self.scenario, self.target_fraction)),
            Learner::Maml(c) => Some(c.episode(self.scenario, self.target_fraction)),
            Learner::Protonet(c) => Some(c.episode(self.scenario, self.target_fraction)),
            Learner::NonEpisodic(_) => None,
        }
    }

    /// Zero-based epoch of one-based iteration `t`.
    pub fn epoch_of(&self, t: usize) -> usize {
        if self.iterations == 0 {
            return 0;
        }
        ((t - 1) * self.epochs / self.iterations).min(self.epochs - 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documented_defaults() {
        let r = ReptileConfig::default();
        assert_eq!((r.inner_steps, r.queue_length, r.way), (3, 4, 2));
        assert_eq!(r.inner.lr, 1e-5);
        let p = ProtoConfig::default();
        assert_eq!((p.way, p.lambda_dce, p.lambda_ce), (3, 1.0, 1.0));
        let t = TrainConfig::default();
        assert_eq!((t.iterations, t.epochs), (20000, 2));
    }

    #[test]
    fn learner_json_is_tagged() {
        let l: Learner = serde_json::from_str(r#"{"kind": "protonet", "shot": 1}"#).unwrap();
        assert_eq!(l, Learner::Protonet(ProtoConfig { shot: 1, ..Default::default() }));
        assert!(serde_json::from_str::<Learner>(r#"{"kind": "protonet", "shots": 1}"#).is_err());
        assert!(serde_json::from_str::<Learner>(r#"{"kind": "anil"}"#).is_err());
    }

    #[test]
    fn invalid_configs() {
        let bad = ProtoConfig { lambda_dce: 0.0, lambda_ce: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
        assert!(ReptileConfig { outer_step: 1.5, ..Default::default() }.validate().is_err());
        assert!(ReptileConfig { inner_steps: 0, ..Default::default() }.validate().is_err());
        assert!(MamlConfig { inner_lr: 0.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn epochs_partition_iterations() {
        let t = TrainConfig { iterations: 10, epochs: 2, ..Default::default() };
        let e: Vec<usize> = (1..=10).map(|i| t.epoch_of(i)).collect();
        assert_eq!(e, vec![0, 0, 0, 0, 0, 1, 1, 1, 1, 1]);
    }
}
