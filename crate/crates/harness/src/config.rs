//! Experiment configuration: a TOML document with dotted sections.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use lethe_core::attacks::{AttackParams, FgsmTarget};
use lethe_core::engine::{CorrDefense, CorrMode, StopCriterion, TTTPolicy, UpdateScope};
use lethe_core::model::ArchConfig;
use lethe_core::training::PretrainConfig;

use crate::error::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    pub data: DataConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arch: Option<ArchConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrain: Option<PretrainSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub ttt: TttSection,
    #[serde(default)]
    pub attack: AttackSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub stop: StopSection,
    #[serde(default)]
    pub probe: ProbeSection,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        #[serde(default = "default_classes")]
        classes: usize,
        per_class: usize,
        test_per_class: usize,
        shape: Vec<usize>,
        #[serde(default = "default_separation")]
        separation: f64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    Cifar10 {
        dir: PathBuf,
    },
}

fn default_classes() -> usize {
    10
}

fn default_separation() -> f64 {
    1.0
}

/// Unknown keys are rejected by the tagged `source` variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    #[serde(flatten)]
    pub source: DataSource,
    /// Use only the first `train_limit` training images.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_limit: Option<usize>,
    /// Size of the fixed evaluation subset drawn from the test split.
    #[serde(default = "default_eval_limit")]
    pub eval_limit: usize,
    #[serde(default)]
    pub per_channel_stats: bool,
}

fn default_eval_limit() -> usize {
    2000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay: f64,
    pub lr_step_epochs: usize,
    pub aux_weight: f64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let d = PretrainConfig::default();
        PretrainSection {
            epochs: d.epochs,
            batch_size: d.batch_size,
            lr: d.lr,
            momentum: d.momentum,
            weight_decay: d.weight_decay,
            lr_decay: d.lr_decay,
            lr_step_epochs: d.lr_step_epochs,
            aux_weight: d.aux_weight,
        }
    }
}

impl PretrainSection {
    pub fn to_config(&self, seed: u64) -> PretrainConfig {
        PretrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            lr_decay: self.lr_decay,
            lr_step_epochs: self.lr_step_epochs,
            aux_weight: self.aux_weight,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TttSection {
    pub eta: f64,
    /// `shared+aux` or `shared`.
    pub scope: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
    pub steps_per_instance: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corr: Option<CorrSection>,
}

impl Default for TttSection {
    fn default() -> Self {
        TttSection {
            eta: 0.001,
            scope: "shared+aux".into(),
            confidence: None,
            steps_per_instance: 1,
            corr: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrSection {
    pub decay: f64,
    pub floor: f64,
    /// `reject` or `project`.
    pub mode: String,
}

impl TttSection {
    pub fn to_policy(&self) -> Result<TTTPolicy> {
        let scope = match self.scope.as_str() {
            "shared+aux" => UpdateScope::SharedAndAux,
            "shared" => UpdateScope::SharedOnly,
            other => {
                return Err(HarnessError::Config(format!(
                    "ttt.scope `{other}` is not one of shared+aux, shared"
                )))
            }
        };
        let corr_defense = match &self.corr {
            None => None,
            Some(c) => Some(CorrDefense {
                decay: c.decay,
                floor: c.floor,
                mode: match c.mode.as_str() {
                    "reject" => CorrMode::Reject,
                    "project" => CorrMode::Project,
                    other => {
                        return Err(HarnessError::Config(format!(
                            "ttt.corr.mode `{other}` is not one of reject, project"
                        )))
                    }
                },
            }),
        };
        let policy = TTTPolicy {
            eta: self.eta,
            scope,
            confidence_threshold: self.confidence,
            corr_defense,
            steps_per_instance: self.steps_per_instance,
        };
        policy.validate()?;
        Ok(policy)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub name: String,
    pub corruption: CorruptionSection,
    pub fgsm: FgsmSection,
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection {
            name: "lethean".into(),
            corruption: CorruptionSection::default(),
            fgsm: FgsmSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptionSection {
    pub sigma: f64,
}

impl Default for CorruptionSection {
    fn default() -> Self {
        CorruptionSection {
            sigma: AttackParams::default().corruption_sigma,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FgsmSection {
    pub epsilon: f64,
    /// `online` or `frozen`.
    pub target: String,
}

impl Default for FgsmSection {
    fn default() -> Self {
        FgsmSection {
            epsilon: AttackParams::default().fgsm_epsilon,
            target: "online".into(),
        }
    }
}

impl AttackSection {
    pub fn to_params(&self) -> Result<AttackParams> {
        let fgsm_target = match self.fgsm.target.as_str() {
            "online" => FgsmTarget::Online,
            "frozen" => FgsmTarget::Frozen,
            other => {
                return Err(HarnessError::Config(format!(
                    "attack.fgsm.target `{other}` is not one of online, frozen"
                )))
            }
        };
        Ok(AttackParams {
            corruption_sigma: self.corruption.sigma,
            fgsm_epsilon: self.fgsm.epsilon,
            fgsm_target,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub interval: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { interval: 50 }
    }
}

/// Stop rule; the accuracy defaults to coin-flip plus 0.05.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StopSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
}

impl StopSection {
    pub fn to_criterion(&self, num_classes: usize) -> StopCriterion {
        let d = StopCriterion::for_classes(num_classes);
        StopCriterion {
            accuracy: self.accuracy.unwrap_or(d.accuracy),
            max_steps: self.max_steps.unwrap_or(d.max_steps),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    /// Seen training samples the historical gradients are averaged over.
    pub samples: usize,
    /// Lethean items probed against that history.
    pub items: usize,
}

impl Default for ProbeSection {
    fn default() -> Self {
        ProbeSection {
            samples: 200,
            items: 200,
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| HarnessError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file, or the `[config]` table of a run manifest.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let value: toml::Table =
            toml::from_str(&text).map_err(|e| HarnessError::Config(e.message().to_string()))?;
        match value.get("config") {
            Some(toml::Value::Table(inner)) if value.contains_key("config_sha256") => {
                let cfg: ExperimentConfig = inner
                    .clone()
                    .try_into()
                    .map_err(|e: toml::de::Error| HarnessError::Config(e.message().to_string()))?;
                cfg.validate()?;
                Ok(cfg)
            }
            _ => Self::parse(&text),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.pretrain, &self.checkpoint) {
            (Some(_), Some(_)) => {
                return Err(HarnessError::Config(
                    "set exactly one of [pretrain] and checkpoint, not both".into(),
                ))
            }
            (None, None) => {
                return Err(HarnessError::Config(
                    "set exactly one of [pretrain] and checkpoint".into(),
                ))
            }
            _ => {}
        }
        if self.seed > i64::MAX as u64 {
            return Err(HarnessError::Config("seed must fit in a signed 64-bit TOML integer".into()));
        }
        if self.eval.interval == 0 {
            return Err(HarnessError::Config("eval.interval must be >= 1".into()));
        }
        if self.data.eval_limit == 0 {
            return Err(HarnessError::Config("data.eval_limit must be >= 1".into()));
        }
        self.ttt.to_policy()?;
        self.attack.to_params()?;
        Ok(())
    }

    /// Canonical TOML text; hashing it identifies the experiment.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
