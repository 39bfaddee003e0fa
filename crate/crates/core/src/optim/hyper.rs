use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adamw,
    Adafactor,
    Lion,
    Signum,
    Adalayer,
    AdalayerStar,
    Adasgd,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 8] = [
        OptimizerKind::Sgd,
        OptimizerKind::Adamw,
        OptimizerKind::Adafactor,
        OptimizerKind::Lion,
        OptimizerKind::Signum,
        OptimizerKind::Adalayer,
        OptimizerKind::AdalayerStar,
        OptimizerKind::Adasgd,
    ];

    pub fn id(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adamw => "adamw",
            OptimizerKind::Adafactor => "adafactor",
            OptimizerKind::Lion => "lion",
            OptimizerKind::Signum => "signum",
            OptimizerKind::Adalayer => "adalayer",
            OptimizerKind::AdalayerStar => "adalayer_star",
            OptimizerKind::Adasgd => "adasgd",
        }
    }

    /// Whether the second moment is one scalar per block.
    pub fn has_scalar_v(self) -> bool {
        matches!(
            self,
            OptimizerKind::Adalayer | OptimizerKind::AdalayerStar | OptimizerKind::Adasgd
        )
    }

    /// Whether the optimizer keeps any second-moment estimate.
    pub fn has_v(self) -> bool {
        !matches!(self, OptimizerKind::Sgd | OptimizerKind::Lion | OptimizerKind::Signum)
    }

    /// Partition used when the spec does not override it.
    pub fn default_partition(self) -> PartitionMode {
        match self {
            OptimizerKind::AdalayerStar => PartitionMode::PerLogitLastLayer,
            OptimizerKind::Adasgd => PartitionMode::GlobalMatrix,
            _ => PartitionMode::WholeLayer,
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace(['-', ' '], "_");
        let kind = match norm.as_str() {
            "sgd" | "sgdw" => OptimizerKind::Sgd,
            "adam" | "adamw" => OptimizerKind::Adamw,
            "adafactor" | "adafactor_m" | "adafactorm" => OptimizerKind::Adafactor,
            "lion" => OptimizerKind::Lion,
            "signum" => OptimizerKind::Signum,
            "adalayer" => OptimizerKind::Adalayer,
            "adalayer_star" | "adalayer*" => OptimizerKind::AdalayerStar,
            "adasgd" => OptimizerKind::Adasgd,
            _ => return Err(Error::Config(format!("unknown optimizer id `{s}`"))),
        };
        Ok(kind)
    }
}

/// How scalar-v optimizers group parameters into preconditioning blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    /// One block per parameter tensor.
    WholeLayer,
    /// As `WholeLayer`, except each unembedding row is its own block.
    PerLogitLastLayer,
    /// Every scalar parameter is its own block.
    Singleton,
    /// All matrix-role tensors fused into one block; gains stay per tensor.
    GlobalMatrix,
}

/// Scale applied to `‖g‖²` in the scalar second-moment update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SecondMomentNorm {
    /// `p^(-1/2) · ‖g‖²`.
    #[default]
    Alg1,
    /// `p^(-1) · ‖g‖²`, the block mean of `g²`.
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-15,
            weight_decay: 0.0,
        }
    }
}

impl HyperParams {
    /// Defaults for `kind` with the given peak learning rate.
    pub fn for_kind(kind: OptimizerKind, lr: f64) -> Self {
        let beta1 = if kind == OptimizerKind::Sgd { 0.98 } else { 0.9 };
        Self {
            lr,
            beta1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, what: &str, v: f64| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(format!("{what} out of range: {v}")))
            }
        };
        check(self.lr.is_finite() && self.lr >= 0.0, "lr", self.lr)?;
        check((0.0..1.0).contains(&self.beta1), "beta1", self.beta1)?;
        check((0.0..1.0).contains(&self.beta2), "beta2", self.beta2)?;
        check(self.eps.is_finite() && self.eps >= 0.0, "eps", self.eps)?;
        check(
            self.weight_decay.is_finite() && self.weight_decay >= 0.0,
            "weight_decay",
            self.weight_decay,
        )
    }
}

/// Everything needed to instantiate one optimizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    #[serde(default)]
    pub hp: HyperParams,
    #[serde(default)]
    pub second_moment_norm: SecondMomentNorm,
    /// Overrides [`OptimizerKind::default_partition`]; only meaningful for
    /// scalar-v optimizers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition: Option<PartitionMode>,
}

impl OptimizerSpec {
    pub fn new(kind: OptimizerKind, hp: HyperParams) -> Self {
        Self {
            kind,
            hp,
            second_moment_norm: SecondMomentNorm::default(),
            partition: None,
        }
    }

    pub fn with_partition(mut self, mode: PartitionMode) -> Self {
        self.partition = Some(mode);
        self
    }

    pub fn partition_mode(&self) -> PartitionMode {
        self.partition.unwrap_or(self.kind.default_partition())
    }

    pub fn validate(&self) -> Result<()> {
        self.hp.validate()?;
        if self.partition.is_some() && !self.kind.has_scalar_v() {
            return Err(Error::Config(format!(
                "partition override given for `{}`, which has no block-scalar second moment",
                self.kind
            )));
        }
        Ok(())
    }
}
