use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{RunConfig, SCHEMA_VERSION};
use super::defaults::{defaults_for, ScaleTag};
use super::run::run;
use super::runlog::{RunLog, RunStatus};
use crate::compose::{FreezePolicy, LrSource, RoutingRule};
use crate::error::{Error, Result};
use crate::model::BlockRole;
use crate::optim::{OptimizerKind, OptimizerSpec};

/// The single hyperparameter a sweep varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Lr,
    Beta1,
    Beta2,
    Eps,
    WeightDecay,
    WarmupFrac,
    /// Batch size at a fixed number of steps.
    Batch,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 7] = [
        SweepAxis::Lr,
        SweepAxis::Beta1,
        SweepAxis::Beta2,
        SweepAxis::Eps,
        SweepAxis::WeightDecay,
        SweepAxis::WarmupFrac,
        SweepAxis::Batch,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::Lr => "lr",
            SweepAxis::Beta1 => "beta1",
            SweepAxis::Beta2 => "beta2",
            SweepAxis::Eps => "eps",
            SweepAxis::WeightDecay => "weight_decay",
            SweepAxis::WarmupFrac => "warmup_frac",
            SweepAxis::Batch => "batch",
        }
    }

    /// Whether the axis is naturally read on a log scale.
    pub fn is_log(self) -> bool {
        matches!(self, SweepAxis::Lr | SweepAxis::Eps)
    }

    /// Writes `value` into `cfg`. Optimizer hyperparameters change on every
    /// rule whose learning rate is swept; fixed-lr rules keep theirs.
    pub fn apply(self, cfg: &mut RunConfig, value: f64) -> Result<()> {
        match self {
            SweepAxis::WarmupFrac => cfg.schedule.warmup_frac = value,
            SweepAxis::Batch => {
                if !(value >= 1.0 && value.fract() == 0.0 && value <= usize::MAX as f64) {
                    return Err(Error::Config(format!(
                        "batch sweep value must be a positive integer, got {value}"
                    )));
                }
                cfg.batch = value as usize;
            }
            _ => {
                let set = |spec: &mut OptimizerSpec| {
                    let hp = &mut spec.hp;
                    match self {
                        SweepAxis::Lr => hp.lr = value,
                        SweepAxis::Beta1 => hp.beta1 = value,
                        SweepAxis::Beta2 => hp.beta2 = value,
                        SweepAxis::Eps => hp.eps = value,
                        SweepAxis::WeightDecay => hp.weight_decay = value,
                        _ => unreachable!(),
                    }
                };
                match &mut cfg.routing {
                    Some(rules) => {
                        let mut touched = false;
                        for r in rules.iter_mut().filter(|r| r.lr_source == LrSource::Swept) {
                            set(&mut r.optimizer);
                            touched = true;
                        }
                        if !touched {
                            return Err(Error::Config(format!(
                                "sweep over {self} but every routing rule has a fixed lr"
                            )));
                        }
                    }
                    None => set(&mut cfg.optimizer),
                }
            }
        }
        Ok(())
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SweepAxis::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown sweep axis `{s}`")))
    }
}

/// A sweep arm beyond a plain optimizer id: hybrid routing, freezing or
/// untrainable roles layered over the base config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Arm {
    pub label: String,
    /// Defaults to the base config's optimizer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub routing: Option<Vec<RoutingRule>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub freeze: Option<FreezePolicy>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub untrainable_roles: Vec<BlockRole>,
}

/// An optimizer id (run at its default hyperparameters) or a custom arm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ArmSpec {
    Id(String),
    Custom(Arm),
}

impl ArmSpec {
    pub fn label(&self) -> &str {
        match self {
            ArmSpec::Id(id) => id,
            ArmSpec::Custom(a) => &a.label,
        }
    }

    /// Base config with this arm's optimizer setup, before the axis value.
    fn config(&self, base: &RunConfig, scale: ScaleTag) -> Result<RunConfig> {
        let mut cfg = base.clone();
        match self {
            ArmSpec::Id(id) => {
                let kind: OptimizerKind = id.parse()?;
                cfg.optimizer = OptimizerSpec::new(kind, defaults_for(kind, scale));
                cfg.routing = None;
            }
            ArmSpec::Custom(a) => {
                if let Some(o) = &a.optimizer {
                    cfg.optimizer = o.clone();
                }
                if a.routing.is_some() {
                    cfg.routing = a.routing.clone();
                }
                if a.freeze.is_some() {
                    cfg.freeze = a.freeze.clone();
                }
                cfg.untrainable_roles.extend(a.untrainable_roles.iter().copied());
            }
        }
        Ok(cfg)
    }
}

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

/// One-dimensional sweep: every arm is run at every grid value, all else
/// held fixed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub base: RunConfig,
    pub axis: SweepAxis,
    /// Used by every arm without an entry in `grid_overrides`.
    #[serde(default)]
    pub grid: Vec<f64>,
    pub optimizers: Vec<ArmSpec>,
    /// Per-arm grids, keyed by arm label.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub grid_overrides: BTreeMap<String, Vec<f64>>,
    /// Seeds to repeat every point with; empty means the base seed only.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub seeds: Vec<u64>,
    /// Scale whose reported optima seed the id arms' hyperparameters.
    #[serde(default)]
    pub scale_tag: ScaleTag,
}

impl SweepSpec {
    pub fn new(base: RunConfig, axis: SweepAxis, grid: Vec<f64>, optimizers: Vec<ArmSpec>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            base,
            axis,
            grid,
            optimizers,
            grid_overrides: BTreeMap::new(),
            seeds: Vec::new(),
            scale_tag: ScaleTag::default(),
        }
    }

    pub fn grid_for(&self, label: &str) -> &[f64] {
        self.grid_overrides.get(label).map_or(&self.grid, |g| g)
    }

    pub fn seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.base.seed]
        } else {
            self.seeds.clone()
        }
    }

    /// Every run of the sweep, in output order, validated.
    pub fn plan(&self) -> Result<Vec<PlannedRun>> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {}",
                self.schema_version
            )));
        }
        if self.optimizers.is_empty() {
            return Err(Error::Config("sweep needs at least one optimizer".into()));
        }
        let mut labels = std::collections::BTreeSet::new();
        for arm in &self.optimizers {
            if !labels.insert(arm.label()) {
                return Err(Error::Config(format!("duplicate arm label `{}`", arm.label())));
            }
        }
        if let Some(k) = self.grid_overrides.keys().find(|k| !labels.contains(k.as_str())) {
            return Err(Error::Config(format!("grid override for unknown arm `{k}`")));
        }
        let mut out = Vec::new();
        for arm in &self.optimizers {
            let grid = self.grid_for(arm.label());
            if grid.is_empty() {
                return Err(Error::Config(format!("empty grid for `{}`", arm.label())));
            }
            let arm_cfg = arm.config(&self.base, self.scale_tag)?;
            for &value in grid {
                for seed in self.seeds() {
                    let mut cfg = arm_cfg.clone();
                    cfg.seed = seed;
                    self.axis.apply(&mut cfg, value)?;
                    cfg.validate()
                        .map_err(|e| Error::Config(format!("arm `{}` at {}={value}: {e}", arm.label(), self.axis)))?;
                    out.push(PlannedRun {
                        label: arm.label().to_string(),
                        value,
                        seed,
                        config: cfg,
                    });
                }
            }
        }
        Ok(out)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("sweep spec: {e}")))?;
        spec.plan()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("sweep spec serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlannedRun {
    pub label: String,
    pub value: f64,
    pub seed: u64,
    pub config: RunConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub label: String,
    pub value: f64,
    pub seed: u64,
    pub log: RunLog,
}

impl SweepPoint {
    pub fn status(&self) -> RunStatus {
        self.log.status().expect("finished runs end with a status")
    }
}

/// One row of the summary table, aggregated over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub optimizer: String,
    pub axis: SweepAxis,
    pub value: f64,
    /// Mean over completed seeds.
    pub final_val_loss: Option<f64>,
    /// `completed` only when every seed completed.
    pub status: String,
    /// Earliest divergence over seeds.
    pub divergence_step: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completed_seeds: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stderr: Option<f64>,
}

impl SummaryRow {
    pub fn is_completed(&self) -> bool {
        self.status == "completed"
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub multi_seed: bool,
    pub points: Vec<SweepPoint>,
}

impl SweepResult {
    /// Summary rows in sweep order.
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut rows: Vec<SummaryRow> = Vec::new();
        let mut i = 0;
        while i < self.points.len() {
            let head = &self.points[i];
            let group: Vec<&SweepPoint> = self.points[i..]
                .iter()
                .take_while(|p| p.label == head.label && p.value.to_bits() == head.value.to_bits())
                .collect();
            i += group.len();
            let losses: Vec<f64> = group.iter().filter_map(|p| p.log.final_val_loss()).collect();
            let n = losses.len();
            let mean = (n > 0).then(|| losses.iter().sum::<f64>() / n as f64);
            let stderr = match (mean, n) {
                (Some(m), n) if n > 1 => {
                    let var = losses.iter().map(|l| (l - m) * (l - m)).sum::<f64>() / (n - 1) as f64;
                    Some((var / n as f64).sqrt())
                }
                _ => None,
            };
            let divergence_step = group.iter().filter_map(|p| p.status().divergence_step()).min();
            rows.push(SummaryRow {
                optimizer: head.label.clone(),
                axis: self.axis,
                value: head.value,
                final_val_loss: mean,
                status: if n == group.len() { "completed" } else { "diverged" }.into(),
                divergence_step,
                seeds: self.multi_seed.then_some(group.len()),
                completed_seeds: self.multi_seed.then_some(n),
                stderr: if self.multi_seed { stderr } else { None },
            });
        }
        rows
    }

    pub fn all_diverged(&self) -> bool {
        self.points.iter().all(|p| !p.status().is_completed())
    }

    /// Points of one arm in grid order (first seed only).
    pub fn arm(&self, label: &str) -> Vec<&SweepPoint> {
        let first_seed = self.points.iter().find(|p| p.label == label).map(|p| p.seed);
        self.points
            .iter()
            .filter(|p| p.label == label && Some(p.seed) == first_seed)
            .collect()
    }

    /// Writes `summary.csv` and one `logs/<arm>_<axis>=<value>_seed<s>.jsonl`
    /// per run under `dir`.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let logs = dir.join("logs");
        std::fs::create_dir_all(&logs).map_err(|e| Error::io(&logs, e))?;
        write_summary(&self.summary(), dir.join("summary.csv"))?;
        for p in &self.points {
            let name = format!("{}_{}={}_seed{}.jsonl", p.label, self.axis, p.value, p.seed);
            p.log.save(logs.join(name))?;
        }
        Ok(())
    }
}

/// Writes summary rows as CSV. Seed columns appear only when present.
pub fn write_summary(rows: &[SummaryRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    let multi = rows.iter().any(|r| r.seeds.is_some());
    let mut header = vec![
        "optimizer",
        "axis",
        "value",
        "final_val_loss",
        "status",
        "divergence_step",
    ];
    if multi {
        header.extend(["seeds", "completed_seeds", "stderr"]);
    }
    w.write_record(&header)?;
    let opt = |x: Option<String>| x.unwrap_or_default();
    for r in rows {
        let mut rec = vec![
            r.optimizer.clone(),
            r.axis.to_string(),
            r.value.to_string(),
            opt(r.final_val_loss.map(|x| x.to_string())),
            r.status.clone(),
            opt(r.divergence_step.map(|x| x.to_string())),
        ];
        if multi {
            rec.push(opt(r.seeds.map(|x| x.to_string())));
            rec.push(opt(r.completed_seeds.map(|x| x.to_string())));
            rec.push(opt(r.stderr.map(|x| x.to_string())));
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a summary written by [`write_summary`].
pub fn read_summary(path: impl AsRef<Path>) -> Result<Vec<SummaryRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let need =
        |name: &str| col(name).ok_or_else(|| Error::Config(format!("{}: missing column `{name}`", path.display())));
    let (io, ia, iv, il, is, id) = (
        need("optimizer")?,
        need("axis")?,
        need("value")?,
        need("final_val_loss")?,
        need("status")?,
        need("divergence_step")?,
    );
    let (ins, inc, ise) = (col("seeds"), col("completed_seeds"), col("stderr"));
    let bad = |what: &str, v: &str| Error::Config(format!("{}: bad {what} `{v}`", path.display()));
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let f = |i: usize| rec.get(i).unwrap_or("");
        let num = |i: usize, what: &str| -> Result<Option<f64>> {
            let s = f(i);
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad(what, s))
            }
        };
        let int = |i: Option<usize>, what: &str| -> Result<Option<usize>> {
            match i.map(f) {
                None | Some("") => Ok(None),
                Some(s) => s.parse().map(Some).map_err(|_| bad(what, s)),
            }
        };
        rows.push(SummaryRow {
            optimizer: f(io).to_string(),
            axis: f(ia).parse()?,
            value: num(iv, "value")?.ok_or_else(|| bad("value", ""))?,
            final_val_loss: num(il, "final_val_loss")?,
            status: f(is).to_string(),
            divergence_step: int(Some(id), "divergence_step")?,
            seeds: int(ins, "seeds")?,
            completed_seeds: int(inc, "completed_seeds")?,
            stderr: match ise {
                Some(i) => num(i, "stderr")?,
                None => None,
            },
        });
    }
    Ok(rows)
}

/// Runs every planned run, in parallel, preserving plan order. A diverged
/// run is recorded and never stops the sweep.
pub fn sweep(spec: &SweepSpec) -> Result<SweepResult> {
    let plan = spec.plan()?;
    let logs: Vec<Result<RunLog>> = plan.par_iter().map(|p| run(&p.config)).collect();
    let points = plan
        .into_iter()
        .zip(logs)
        .map(|(p, log)| {
            Ok(SweepPoint {
                label: p.label,
                value: p.value,
                seed: p.seed,
                log: log?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult {
        axis: spec.axis,
        multi_seed: spec.seeds().len() > 1,
        points,
    })
}
