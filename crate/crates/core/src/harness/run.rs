use crate::compose::{set_trainable, warmstart_freeze, Router};
use crate::error::Result;
use crate::model::{build_transformer, forward_loss, ParamStore, SyntheticData, TokenBatch};
use crate::ndcore::{Rng, Tensor};

use super::config::RunConfig;
use super::runlog::{EffLrEntry, EffLrRecord, EvalRecord, Record, RunLog, RunStatus, StepRecord};

/// RNG stream ids under the run seed.
const INIT_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 2;

/// Step-by-step training of one [`RunConfig`] in `f32`.
///
/// [`run`] drives this to completion; use it directly to inspect the
/// parameters or optimizer state between steps.
pub struct Trainer {
    cfg: RunConfig,
    data: SyntheticData,
    store: ParamStore<f32>,
    router: Router<f32>,
    train_rng: Rng,
    eval_set: Vec<TokenBatch>,
    has_scalar_v: bool,
    t: usize,
    log: RunLog,
    status: Option<RunStatus>,
}

impl Trainer {
    /// Validates the config, initializes the model and performs the
    /// warm-start pass when a freeze policy is set. Logs the step-0 eval.
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let cfg = cfg.clone();
        let data = SyntheticData::new(cfg.data.clone())?;
        let mut store = build_transformer::<f32>(&cfg.model, &mut Rng::with_stream(cfg.seed, INIT_STREAM))?;
        set_trainable(&mut store, &cfg.untrainable_roles, false);
        let router = Router::new(&store, &cfg.rules())?;
        let mut eval_rng = Rng::with_stream(cfg.seed, EVAL_STREAM);
        let eval_set = (0..cfg.eval_batches)
            .map(|_| data.sample_batch(&mut eval_rng, cfg.batch, cfg.model.seq_len))
            .collect();
        let has_scalar_v = router.optimizers().iter().any(|o| o.kind().has_scalar_v());
        let mut tr = Self {
            train_rng: Rng::with_stream(cfg.seed, TRAIN_STREAM),
            cfg,
            data,
            store,
            router,
            eval_set,
            has_scalar_v,
            t: 0,
            log: RunLog::default(),
            status: None,
        };
        if let Some(policy) = tr.cfg.freeze.clone() {
            // The warm-start draws from the training stream, which is not
            // rewound afterwards.
            let (data, rng, model) = (&tr.data, &mut tr.train_rng, &tr.cfg.model);
            let batch = tr.cfg.batch;
            warmstart_freeze(&tr.store, &mut tr.router, &policy, |store| {
                let b = data.sample_batch(rng, batch, model.seq_len);
                forward_loss(store, &b, model)?.param_grads()
            })?;
        }
        tr.evaluate()?;
        if tr.status.is_none() && tr.cfg.steps == 0 {
            tr.finish(RunStatus::Completed);
        }
        Ok(tr)
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    pub fn router(&self) -> &Router<f32> {
        &self.router
    }

    /// Number of updates taken so far.
    pub fn step_count(&self) -> usize {
        self.t
    }

    pub fn status(&self) -> Option<RunStatus> {
        self.status
    }

    pub fn log(&self) -> &RunLog {
        &self.log
    }

    pub fn is_done(&self) -> bool {
        self.status.is_some()
    }

    /// Mean cross-entropy over the held-out batches.
    pub fn val_loss(&self) -> Result<f64> {
        let mut total = 0.0;
        for b in &self.eval_set {
            total += forward_loss(&self.store, b, &self.cfg.model)?.ce_value() as f64;
        }
        Ok(total / self.eval_set.len() as f64)
    }

    fn finish(&mut self, status: RunStatus) {
        self.log.push(Record::End(status));
        self.status = Some(status);
    }

    fn diverge(&mut self) {
        self.finish(RunStatus::Diverged { step: self.t });
    }

    fn evaluate(&mut self) -> Result<()> {
        let val_loss = self.val_loss()?;
        if !val_loss.is_finite() {
            self.diverge();
        } else {
            self.log.push(Record::Eval(EvalRecord { step: self.t, val_loss }));
        }
        Ok(())
    }

    fn snapshot_efflr(&mut self, lrs: &[f64]) -> Result<()> {
        let mut groups = Vec::new();
        for (opt, &lr) in self.router.optimizers().iter().zip(lrs) {
            if !opt.kind().has_scalar_v() {
                continue;
            }
            for e in opt.effective_lrs(lr, self.cfg.efflr_corrected)? {
                groups.push(EffLrEntry {
                    label: e.label,
                    role: e.role,
                    value: e.value,
                });
            }
        }
        self.log.push(Record::Efflr(EffLrRecord { step: self.t, groups }));
        Ok(())
    }

    fn due(&self, every: usize) -> bool {
        self.t == self.cfg.steps || (every > 0 && self.t.is_multiple_of(every))
    }

    /// Takes one update. Does nothing once the run has ended.
    pub fn step(&mut self) -> Result<()> {
        if self.is_done() {
            return Ok(());
        }
        self.t += 1;
        let batch = self
            .data
            .sample_batch(&mut self.train_rng, self.cfg.batch, self.cfg.model.seq_len);
        let pass = forward_loss(&self.store, &batch, &self.cfg.model)?;
        let loss = pass.loss_value() as f64;
        let zloss = pass.zloss_value() as f64;
        let grads: Vec<Tensor<f32>> = pass.param_grads()?;
        drop(pass);
        let grad_norm = self
            .store
            .trainable_indices()
            .into_iter()
            .map(|i| grads[i].data().iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if !loss.is_finite() || !grad_norm.is_finite() {
            self.diverge();
            return Ok(());
        }
        let lrs = self
            .router
            .lrs(&self.cfg.schedule, self.t, self.cfg.steps, self.cfg.constant_fixed_lr)?;
        self.log.push(Record::Step(StepRecord {
            step: self.t,
            lr: lrs[0],
            rule_lrs: if lrs.len() > 1 { lrs.clone() } else { Vec::new() },
            loss,
            zloss,
            grad_norm,
        }));
        self.router.step(&mut self.store, &grads, &lrs)?;
        if !self.store.all_finite() {
            self.diverge();
            return Ok(());
        }
        if self.has_scalar_v && self.due(self.cfg.efflr_every) {
            self.snapshot_efflr(&lrs)?;
        }
        if self.due(self.cfg.eval_every) {
            self.evaluate()?;
        }
        if self.status.is_none() && self.t == self.cfg.steps {
            self.finish(RunStatus::Completed);
        }
        Ok(())
    }

    pub fn into_parts(self) -> (RunLog, ParamStore<f32>) {
        (self.log, self.store)
    }
}

/// Trains `cfg` to completion or divergence.
pub fn run(cfg: &RunConfig) -> Result<RunLog> {
    Ok(run_with_store(cfg)?.0)
}

/// [`run`], also returning the final parameters.
pub fn run_with_store(cfg: &RunConfig) -> Result<(RunLog, ParamStore<f32>)> {
    let mut tr = Trainer::new(cfg)?;
    while !tr.is_done() {
        tr.step()?;
    }
    Ok(tr.into_parts())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::optim::OptimizerKind;

    fn tiny(kind: OptimizerKind, lr: f64, steps: usize) -> RunConfig {
        let mut cfg = RunConfig::with_kind(kind, lr);
        cfg.model = ModelConfig::desk();
        cfg.model.width = 16;
        cfg.model.heads = 2;
        cfg.model.head_dim = 8;
        cfg.model.seq_len = 8;
        cfg.data.vocab = cfg.model.vocab;
        cfg.batch = 2;
        cfg.eval_batches = 2;
        cfg.steps = steps;
        cfg
    }

    #[test]
    fn zero_steps_is_one_eval() {
        let log = run(&tiny(OptimizerKind::Adamw, 1e-3, 0)).unwrap();
        assert_eq!(log.records.len(), 2);
        let v = log.final_val_loss().unwrap();
        assert!((v - (64f64).ln()).abs() < 0.05, "{v}");
    }

    #[test]
    fn schedule_and_eval_cadence() {
        let mut cfg = tiny(OptimizerKind::Adamw, 1e-3, 10);
        cfg.eval_every = 4;
        let log = run(&cfg).unwrap();
        log.check_ordering().unwrap();
        let evals: Vec<usize> = log.evals().map(|e| e.step).collect();
        assert_eq!(evals, vec![0, 4, 8, 10]);
        for s in log.steps() {
            assert_eq!(s.lr, cfg.schedule.lr(s.step, 10, 1e-3).unwrap());
        }
    }

    #[test]
    fn huge_lr_diverges_cleanly() {
        let log = run(&tiny(OptimizerKind::Sgd, 1e30, 5)).unwrap();
        let status = log.status().unwrap();
        assert!(!status.is_completed());
        log.check_ordering().unwrap();
    }
}
