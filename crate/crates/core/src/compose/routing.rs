use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BlockRole, ParamStore};
use crate::ndcore::{Float, Tensor};
use crate::optim::{Optimizer, OptimizerSpec, Schedule};

/// Where a rule's peak learning rate comes from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSource {
    /// The rule's own `optimizer.hp.lr`, which sweeps over `lr` modify.
    Swept,
    /// A peak that sweeps leave alone.
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingRule {
    pub selector: Vec<BlockRole>,
    pub optimizer: OptimizerSpec,
    #[serde(default = "swept")]
    pub lr_source: LrSource,
}

fn swept() -> LrSource {
    LrSource::Swept
}

impl RoutingRule {
    pub fn new(selector: &[BlockRole], optimizer: OptimizerSpec, lr_source: LrSource) -> Self {
        Self {
            selector: selector.to_vec(),
            optimizer,
            lr_source,
        }
    }

    /// One rule sending every role to `optimizer`.
    pub fn everything(optimizer: OptimizerSpec) -> Self {
        Self::new(&BlockRole::ALL, optimizer, LrSource::Swept)
    }

    pub fn peak_lr(&self) -> f64 {
        match self.lr_source {
            LrSource::Swept => self.optimizer.hp.lr,
            LrSource::Fixed(v) => v,
        }
    }

    pub fn label(&self) -> String {
        let roles: Vec<&str> = self.selector.iter().map(|r| r.as_str()).collect();
        format!("{}:{}", self.optimizer.kind, roles.join("+"))
    }
}

/// Assigns each trainable block to exactly one rule. Returns, per rule, the
/// store indices it serves in store order.
pub fn route<T: Float>(store: &ParamStore<T>, rules: &[RoutingRule]) -> Result<Vec<Vec<usize>>> {
    if rules.is_empty() {
        return Err(Error::Routing("no routing rules given".into()));
    }
    let mut out = vec![Vec::new(); rules.len()];
    for idx in store.trainable_indices() {
        let blk = store.block(idx);
        let hits: Vec<usize> = rules
            .iter()
            .enumerate()
            .filter(|(_, r)| r.selector.contains(&blk.role))
            .map(|(i, _)| i)
            .collect();
        match hits[..] {
            [i] => out[i].push(idx),
            [] => {
                return Err(Error::Routing(format!(
                    "block `{}` (role {}) is not covered by any rule",
                    blk.name, blk.role
                )))
            }
            _ => {
                return Err(Error::Routing(format!(
                    "block `{}` (role {}) is covered by rules {hits:?}",
                    blk.name, blk.role
                )))
            }
        }
    }
    Ok(out)
}

/// Routed optimizer instances for one run, one per rule.
#[derive(Clone, Debug)]
pub struct Router<T> {
    rules: Vec<RoutingRule>,
    optimizers: Vec<Optimizer<T>>,
}

impl<T: Float> Router<T> {
    pub fn new(store: &ParamStore<T>, rules: &[RoutingRule]) -> Result<Self> {
        let assignment = route(store, rules)?;
        let optimizers = rules
            .iter()
            .zip(&assignment)
            .map(|(rule, blocks)| Optimizer::new(rule.optimizer.clone(), store, blocks))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            rules: rules.to_vec(),
            optimizers,
        })
    }

    pub fn rules(&self) -> &[RoutingRule] {
        &self.rules
    }

    pub fn optimizers(&self) -> &[Optimizer<T>] {
        &self.optimizers
    }

    /// Scheduled learning rate of every rule at step `t` of `total`.
    pub fn lrs(&self, schedule: &Schedule, t: usize, total: usize, constant_fixed: bool) -> Result<Vec<f64>> {
        self.rules
            .iter()
            .map(|r| match r.lr_source {
                LrSource::Fixed(v) if constant_fixed => Ok(v),
                _ => schedule.lr(t, total, r.peak_lr()),
            })
            .collect()
    }

    /// Steps every optimizer with its rule's learning rate.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>], lrs: &[f64]) -> Result<()> {
        for (opt, &lr) in self.optimizers.iter_mut().zip(lrs) {
            opt.step(store, grads, lr)?;
        }
        Ok(())
    }

    /// Second-moment accumulation for every optimizer that keeps one.
    pub fn accumulate_second_moment(&mut self, store: &ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        for opt in self.optimizers.iter_mut().filter(|o| o.kind().has_v()) {
            opt.accumulate_second_moment(store, grads)?;
        }
        Ok(())
    }

    /// The optimizer serving store block `block`, if any.
    pub fn optimizer_for(&self, block: usize) -> Option<&Optimizer<T>> {
        self.optimizers.iter().find(|o| o.blocks().contains(&block))
    }

    pub(crate) fn optimizers_mut(&mut self) -> &mut [Optimizer<T>] {
        &mut self.optimizers
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::{HyperParams, OptimizerKind};

    fn store() -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.register("e", BlockRole::Embedding, Tensor::zeros(vec![2, 2]))
            .unwrap();
        s.register("g", BlockRole::LayernormGain, Tensor::zeros(vec![2]))
            .unwrap();
        s.register("u", BlockRole::Unembedding, Tensor::zeros(vec![2, 2]))
            .unwrap();
        s
    }

    fn spec(kind: OptimizerKind) -> OptimizerSpec {
        OptimizerSpec::new(kind, HyperParams::default())
    }

    #[test]
    fn uncovered_block_is_named() {
        let rules = [RoutingRule::new(
            &[BlockRole::Embedding],
            spec(OptimizerKind::Sgd),
            LrSource::Swept,
        )];
        let err = route(&store(), &rules).unwrap_err().to_string();
        assert!(err.contains("`g`"), "{err}");
    }

    #[test]
    fn double_cover_is_named() {
        let rules = [
            RoutingRule::everything(spec(OptimizerKind::Sgd)),
            RoutingRule::new(&[BlockRole::Unembedding], spec(OptimizerKind::Adamw), LrSource::Swept),
        ];
        let err = route(&store(), &rules).unwrap_err().to_string();
        assert!(err.contains("`u`"), "{err}");
    }

    #[test]
    fn untrainable_blocks_need_no_rule() {
        let mut s = store();
        s.set_trainable(&[BlockRole::LayernormGain], false);
        let rules = [RoutingRule::new(
            &[BlockRole::Embedding, BlockRole::Unembedding],
            spec(OptimizerKind::Sgd),
            LrSource::Swept,
        )];
        assert_eq!(route(&s, &rules).unwrap(), vec![vec![0, 2]]);
    }

    #[test]
    fn fixed_rules_follow_schedule_shape() {
        let rules = [
            RoutingRule::new(&[BlockRole::Embedding], spec(OptimizerKind::Sgd), LrSource::Swept),
            RoutingRule::new(
                &[BlockRole::LayernormGain, BlockRole::Unembedding],
                spec(OptimizerKind::AdalayerStar),
                LrSource::Fixed(3.16e-3),
            ),
        ];
        let r = Router::new(&store(), &rules).unwrap();
        let sched = Schedule::default();
        assert_eq!(r.lrs(&sched, 10, 100, false).unwrap(), vec![1e-3, 3.16e-3]);
        assert_eq!(r.lrs(&sched, 5, 100, false).unwrap()[1], 3.16e-3 * 0.5);
        assert_eq!(r.lrs(&sched, 5, 100, true).unwrap()[1], 3.16e-3);
    }
}
