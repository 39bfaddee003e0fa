use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::compose::{FreezePolicy, RoutingRule};
use crate::error::{Error, Result};
use crate::model::{BlockRole, ModelConfig, SyntheticDataConfig};
use crate::optim::{HyperParams, OptimizerKind, OptimizerSpec, Schedule};

pub const SCHEMA_VERSION: u32 = 1;

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

fn default_optimizer() -> OptimizerSpec {
    OptimizerSpec::new(OptimizerKind::Adamw, HyperParams::default())
}

fn default_eval_batches() -> usize {
    16
}

/// Complete description of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub data: SyntheticDataConfig,
    /// Used for every trainable block unless `routing` is given.
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub routing: Option<Vec<RoutingRule>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub freeze: Option<FreezePolicy>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub untrainable_roles: Vec<BlockRole>,
    #[serde(default)]
    pub schedule: Schedule,
    /// Fixed-lr routing rules ignore the schedule shape when set.
    #[serde(default)]
    pub constant_fixed_lr: bool,
    pub steps: usize,
    pub batch: usize,
    #[serde(default)]
    pub seed: u64,
    /// Evaluation period in steps; 0 evaluates only at the start and end.
    #[serde(default)]
    pub eval_every: usize,
    #[serde(default = "default_eval_batches")]
    pub eval_batches: usize,
    /// Effective-lr snapshot period; 0 records only the final step.
    #[serde(default)]
    pub efflr_every: usize,
    /// Snapshot effective lrs with bias-corrected v.
    #[serde(default)]
    pub efflr_corrected: bool,
}

impl RunConfig {
    /// Nano-model defaults around `optimizer`.
    pub fn new(optimizer: OptimizerSpec) -> Self {
        let model = ModelConfig::nano();
        Self {
            schema_version: SCHEMA_VERSION,
            data: SyntheticDataConfig {
                vocab: model.vocab,
                ..Default::default()
            },
            model,
            optimizer,
            routing: None,
            freeze: None,
            untrainable_roles: Vec::new(),
            schedule: Schedule::default(),
            constant_fixed_lr: false,
            steps: 1000,
            batch: 32,
            seed: 0,
            eval_every: 0,
            eval_batches: default_eval_batches(),
            efflr_every: 0,
            efflr_corrected: false,
        }
    }

    pub fn with_kind(kind: OptimizerKind, lr: f64) -> Self {
        Self::new(OptimizerSpec::new(kind, HyperParams::for_kind(kind, lr)))
    }

    /// Routing rules in effect: the explicit list, or one rule covering
    /// everything with `optimizer`.
    pub fn rules(&self) -> Vec<RoutingRule> {
        match &self.routing {
            Some(r) => r.clone(),
            None => vec![RoutingRule::everything(self.optimizer.clone())],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.model.validate()?;
        self.data.validate()?;
        if self.data.vocab != self.model.vocab {
            return Err(Error::Config(format!(
                "data vocab {} differs from model vocab {}",
                self.data.vocab, self.model.vocab
            )));
        }
        self.schedule.validate()?;
        if self.batch == 0 {
            return Err(Error::Config("batch must be >= 1".into()));
        }
        if self.eval_batches == 0 {
            return Err(Error::Config("eval_batches must be >= 1".into()));
        }
        let rules = self.rules();
        if rules.is_empty() {
            return Err(Error::Config("routing must contain at least one rule".into()));
        }
        for r in &rules {
            r.optimizer.validate()?;
            if let crate::compose::LrSource::Fixed(v) = r.lr_source {
                if !(v.is_finite() && v >= 0.0) {
                    return Err(Error::Config(format!("fixed lr must be finite and >= 0, got {v}")));
                }
            }
        }
        if self.routing.is_none() {
            self.optimizer.validate()?;
        }
        if let Some(f) = &self.freeze {
            f.validate()?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run config serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}
