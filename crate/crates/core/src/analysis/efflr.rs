use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::RunLog;
use crate::model::BlockRole;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub p1: f64,
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
    pub p99: f64,
}

impl Quantiles {
    /// Linear-interpolation quantiles of `values`, which need not be sorted.
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("quantiles of an empty set".into()));
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Ok(Self {
            p1: quantile_sorted(&v, 0.01),
            p25: quantile_sorted(&v, 0.25),
            p50: quantile_sorted(&v, 0.5),
            p75: quantile_sorted(&v, 0.75),
            p99: quantile_sorted(&v, 0.99),
        })
    }

    /// `p99 / p1`.
    pub fn spread(&self) -> f64 {
        self.p99 / self.p1
    }
}

/// Quantile `q ∈ [0, 1]` of ascending `sorted` at position `q·(n−1)`,
/// interpolating linearly between neighbours.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffLrSnapshot {
    pub step: usize,
    /// Number of matching groups.
    pub count: usize,
    pub quantiles: Quantiles,
}

/// Quantiles of the effective learning rates of the groups whose role is in
/// `roles` (every role when empty), one entry per snapshot in the log.
pub fn efflr_quantiles(log: &RunLog, roles: &[BlockRole]) -> Result<Vec<EffLrSnapshot>> {
    let mut out = Vec::new();
    for snap in log.efflr_snapshots() {
        let values: Vec<f64> = snap
            .groups
            .iter()
            .filter(|g| roles.is_empty() || roles.contains(&g.role))
            .map(|g| g.value)
            .collect();
        if values.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "no effective-lr groups match roles {roles:?} at step {}",
                snap.step
            )));
        }
        out.push(EffLrSnapshot {
            step: snap.step,
            count: values.len(),
            quantiles: Quantiles::of(&values)?,
        });
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument(
            "run log has no effective-lr snapshots; was a block-scalar optimizer used?".into(),
        ));
    }
    Ok(out)
}
