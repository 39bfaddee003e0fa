use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{HyperParams, OptimizerKind};

/// Model size at which a learning rate was reported optimal.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScaleTag {
    #[default]
    #[serde(rename = "150m")]
    M150,
    #[serde(rename = "300m")]
    M300,
    #[serde(rename = "600m")]
    M600,
    #[serde(rename = "1.2b")]
    B1_2,
}

impl ScaleTag {
    pub const ALL: [ScaleTag; 4] = [ScaleTag::M150, ScaleTag::M300, ScaleTag::M600, ScaleTag::B1_2];

    pub fn as_str(self) -> &'static str {
        match self {
            ScaleTag::M150 => "150m",
            ScaleTag::M300 => "300m",
            ScaleTag::M600 => "600m",
            ScaleTag::B1_2 => "1.2b",
        }
    }
}

impl fmt::Display for ScaleTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScaleTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScaleTag::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown scale tag `{s}` (expected 150m, 300m, 600m or 1.2b)")))
    }
}

/// Optimal peak learning rate reported for `kind` at `scale`.
///
/// SGD and the Adalayer family have no reported optimum; SGD gets 0.1 (the
/// middle of its usual grid) and the Adalayer family 3.16e-3, the fixed
/// rate used for the adaptive half of the hybrid runs.
pub fn optimal_lr(kind: OptimizerKind, scale: ScaleTag) -> f64 {
    use OptimizerKind::*;
    use ScaleTag::*;
    match (kind, scale) {
        (Adamw | Adafactor, M150) => 3.16e-3,
        (Adamw | Adafactor, _) => 1e-3,
        (Lion, B1_2) => 1e-4,
        (Lion | Signum, _) => 3.16e-4,
        (Sgd, _) => 0.1,
        (Adalayer | AdalayerStar | Adasgd, _) => 3.16e-3,
    }
}

/// Starting hyperparameters for `kind` at `scale`.
pub fn defaults_for(kind: OptimizerKind, scale: ScaleTag) -> HyperParams {
    HyperParams::for_kind(kind, optimal_lr(kind, scale))
}

/// Same as [`defaults_for`] but taking string ids, as the CLI does.
pub fn defaults_for_id(id: &str, scale: &str) -> Result<HyperParams> {
    Ok(defaults_for(id.parse()?, scale.parse()?))
}

/// `count` points spaced by √10 starting at `start`.
pub fn sqrt10_grid(start: f64, count: usize) -> Vec<f64> {
    (0..count).map(|i| start * libm::pow(10f64, i as f64 / 2.0)).collect()
}

/// Default learning-rate grid for `kind`, in √10 multiples.
pub fn lr_grid(kind: OptimizerKind) -> Vec<f64> {
    match kind {
        OptimizerKind::Lion | OptimizerKind::Signum => sqrt10_grid(1e-5, 9),
        OptimizerKind::Sgd => sqrt10_grid(1e-3, 9),
        _ => sqrt10_grid(1e-4, 9),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reported_optima() {
        assert_eq!(defaults_for(OptimizerKind::Adamw, ScaleTag::M150).lr, 3.16e-3);
        assert_eq!(defaults_for(OptimizerKind::Signum, ScaleTag::B1_2).lr, 3.16e-4);
        assert_eq!(defaults_for(OptimizerKind::Lion, ScaleTag::B1_2).lr, 1e-4);
        assert_eq!(defaults_for(OptimizerKind::Adafactor, ScaleTag::M600).lr, 1e-3);
        assert_eq!(defaults_for(OptimizerKind::Sgd, ScaleTag::M150).beta1, 0.98);
        assert!(defaults_for_id("adagrad", "150m").is_err());
        assert!(defaults_for_id("adam", "7b").is_err());
    }

    #[test]
    fn grids_span_reported_ranges() {
        let g = lr_grid(OptimizerKind::Adamw);
        assert!((g[0] - 1e-4).abs() < 1e-18 && (g[8] - 1.0).abs() < 1e-12);
        let g = lr_grid(OptimizerKind::Lion);
        assert!((g[8] - 0.1).abs() < 1e-12);
        let g = lr_grid(OptimizerKind::Sgd);
        assert!((g[8] - 10.0).abs() < 1e-10);
        for w in g.windows(2) {
            assert!((w[1] / w[0] - 10f64.sqrt()).abs() < 1e-12);
        }
    }
}
