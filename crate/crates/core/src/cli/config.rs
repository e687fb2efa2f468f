use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::SyntheticSpec;
use crate::dreca::DrecaConfig;
use crate::episodes::Temperature;
use crate::error::{Error, Result};
use crate::metalearn::{FinetuneConfig, Learner, TrainConfig};
use crate::model::EncoderConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    /// JSONL datasets; `labels` fixes the label order for all of them.
    Files { paths: Vec<PathBuf>, labels: Option<PathBuf> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub target_language: String,
    /// Task of the target dataset; needed only when the target language
    /// carries more than one task.
    pub target_task: Option<String>,
    /// Stratified train/dev/test fractions applied to every dataset.
    pub split: [f64; 3],
    /// Caps the labeled target pool used for fine-tuning and prototypes.
    pub target_train_per_label: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic(SyntheticSpec::default()),
            target_language: "l4".into(),
            target_task: None,
            split: [0.7, 0.1, 0.2],
            target_train_per_label: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QueueConfig {
    pub temperature: Temperature,
    /// Put the target training split into the meta-training queue.
    pub add_target: bool,
}

impl Default for QueueConfig {
    fn default() -> Self {
        QueueConfig { temperature: Temperature::Finite(1.0), add_target: false }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DrecaPlan {
    pub enabled: bool,
    #[serde(flatten)]
    pub config: DrecaConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cell {
    ZeroShot,
    NonEpisodic,
    Episodic,
}

impl Cell {
    pub fn name(self) -> &'static str {
        match self {
            Cell::ZeroShot => "zero_shot",
            Cell::NonEpisodic => "non_episodic",
            Cell::Episodic => "episodic",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodChoice {
    /// Prototypes for the prototypical learner, the task head otherwise.
    Auto,
    Head,
    Prototype,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrototypeSource {
    Auxiliary,
    TargetTrain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalPlan {
    pub cells: Vec<Cell>,
    pub method: MethodChoice,
    /// Prototype source for the zero-shot cell; fine-tuned cells always use
    /// the target training pool.
    pub zero_shot_prototypes: PrototypeSource,
}

impl Default for EvalPlan {
    fn default() -> Self {
        EvalPlan {
            cells: vec![Cell::ZeroShot, Cell::NonEpisodic, Cell::Episodic],
            method: MethodChoice::Auto,
            zero_shot_prototypes: PrototypeSource::Auxiliary,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisPlan {
    /// Examples per label taken from each test split for PCA and Hausdorff.
    pub points_per_label: usize,
}

impl Default for AnalysisPlan {
    fn default() -> Self {
        AnalysisPlan { points_per_label: 50 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Run directory; the `XMETA_OUTPUT_DIR` variable and `--output-dir`
    /// take precedence. Never written to the resolved config.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub queue: QueueConfig,
    pub train: TrainConfig,
    pub dreca: DrecaPlan,
    pub finetune: FinetuneConfig,
    pub evaluation: EvalPlan,
    pub analysis: AnalysisPlan,
}


impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<ExperimentConfig> {
        let config: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::InvalidConfig(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::InvalidConfig(m) => Error::InvalidConfig(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.train.validate()?;
        if self.dreca.enabled {
            self.dreca.config.validate()?;
        }
        if self.finetune.eval_interval == 0 {
            return Err(Error::InvalidConfig("finetune eval_interval must be at least 1".into()));
        }
        let [a, b, c] = self.data.split;
        if [a, b, c].iter().any(|f| f.is_nan() || *f <= 0.0) || (a + b + c - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!("data split {:?} must be positive and sum to 1", self.data.split)));
        }
        if let DataSource::Synthetic(spec) = &self.data.source {
            spec.validate()?;
            if spec.feature_dim != self.encoder.input_dim {
                return Err(Error::InvalidConfig(format!(
                    "encoder input_dim {} differs from synthetic feature_dim {}",
                    self.encoder.input_dim, spec.feature_dim
                )));
            }
        }
        if matches!(self.train.learner, Learner::NonEpisodic(_)) && self.evaluation.cells.contains(&Cell::Episodic) {
            return Err(Error::InvalidConfig("the episodic cell needs an episodic learner".into()));
        }
        Ok(())
    }

    /// Pretty JSON of the config without `output_dir`, newline-terminated.
    pub fn resolved_json(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        serde_json::to_string_pretty(&c).expect("config serializes") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        assert_eq!(ExperimentConfig::from_json(&c.resolved_json()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"seed": 1, "sede": 2}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"train": {"iteration": 2}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"dreca": {"enabled": true, "klusters": 2}}"#).is_err());
    }

    #[test]
    fn output_dir_not_serialized() {
        let c = ExperimentConfig { output_dir: Some("x".into()), ..Default::default() };
        assert!(!c.resolved_json().contains("output_dir"));
    }

    #[test]
    fn inconsistent_dims_rejected() {
        let mut c = ExperimentConfig::default();
        c.encoder.input_dim = 3;
        assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
    }
}
