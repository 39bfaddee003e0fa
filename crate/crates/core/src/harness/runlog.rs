use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::BlockRole;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Learning rate of the first routing rule.
    pub lr: f64,
    /// One entry per routing rule; omitted for single-rule runs.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rule_lrs: Vec<f64>,
    pub loss: f64,
    pub zloss: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub val_loss: f64,
}

/// Effective learning rate of one scalar-v group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffLrEntry {
    pub label: String,
    pub role: BlockRole,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffLrRecord {
    pub step: usize,
    pub groups: Vec<EffLrEntry>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Diverged { step: usize },
}

impl RunStatus {
    pub fn is_completed(self) -> bool {
        matches!(self, RunStatus::Completed)
    }

    pub fn divergence_step(self) -> Option<usize> {
        match self {
            RunStatus::Completed => None,
            RunStatus::Diverged { step } => Some(step),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RunStatus::Completed => "completed",
            RunStatus::Diverged { .. } => "diverged",
        }
    }
}

/// One line of a run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Record {
    Step(StepRecord),
    Eval(EvalRecord),
    Efflr(EffLrRecord),
    End(RunStatus),
}

impl Record {
    pub fn step(&self) -> Option<usize> {
        match self {
            Record::Step(r) => Some(r.step),
            Record::Eval(r) => Some(r.step),
            Record::Efflr(r) => Some(r.step),
            Record::End(_) => None,
        }
    }
}

/// Ordered records of one run, ending with its status.
///
/// Step `t` logs the loss of the forward pass taken before the `t`-th
/// update; eval and effective-lr records at step `t` describe the
/// parameters after `t` updates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub records: Vec<Record>,
}

impl RunLog {
    pub fn push(&mut self, r: Record) {
        self.records.push(r);
    }

    pub fn status(&self) -> Option<RunStatus> {
        match self.records.last() {
            Some(Record::End(s)) => Some(*s),
            _ => None,
        }
    }

    pub fn steps(&self) -> impl Iterator<Item = &StepRecord> {
        self.records.iter().filter_map(|r| match r {
            Record::Step(s) => Some(s),
            _ => None,
        })
    }

    pub fn evals(&self) -> impl Iterator<Item = &EvalRecord> {
        self.records.iter().filter_map(|r| match r {
            Record::Eval(s) => Some(s),
            _ => None,
        })
    }

    pub fn efflr_snapshots(&self) -> impl Iterator<Item = &EffLrRecord> {
        self.records.iter().filter_map(|r| match r {
            Record::Efflr(s) => Some(s),
            _ => None,
        })
    }

    /// Validation loss of the last eval record of a completed run.
    pub fn final_val_loss(&self) -> Option<f64> {
        match self.status() {
            Some(RunStatus::Completed) => self.evals().last().map(|e| e.val_loss),
            _ => None,
        }
    }

    /// Steps never decrease, a status ends the log and nothing follows a
    /// divergence step.
    pub fn check_ordering(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("run log: {m}")));
        let status = match self.status() {
            Some(s) => s,
            None => return bad("missing terminal status".into()),
        };
        let mut last = 0;
        for r in &self.records[..self.records.len() - 1] {
            let Some(s) = r.step() else {
                return bad("status record before the end".into());
            };
            if s < last {
                return bad(format!("step {s} after step {last}"));
            }
            if let Some(d) = status.divergence_step() {
                if s > d {
                    return bad(format!("record at step {s} past divergence at {d}"));
                }
            }
            last = s;
        }
        Ok(())
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n").map_err(|e| Error::io("<run log>", e))?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("json is utf-8")
    }

    pub fn read_jsonl(r: impl BufRead) -> Result<Self> {
        let mut records = Vec::new();
        for line in r.lines() {
            let line = line.map_err(|e| Error::io("<run log>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line)?);
        }
        Ok(Self { records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_jsonl(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_jsonl(BufReader::new(file))
    }
}
