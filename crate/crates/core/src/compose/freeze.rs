use serde::{Deserialize, Serialize};

use super::routing::Router;
use crate::error::{Error, Result};
use crate::model::{BlockRole, ParamStore};
use crate::ndcore::{Float, Tensor};

/// Warm-start priming of second moments, then freezing them for some roles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FreezePolicy {
    pub warmstart_batches: usize,
    pub frozen_roles: Vec<BlockRole>,
    /// Roles whose second moments keep updating after the warm start.
    /// Every role not listed in `frozen_roles` keeps updating anyway; this
    /// list documents the intent and is checked for overlap.
    pub exempt_roles: Vec<BlockRole>,
}

impl Default for FreezePolicy {
    fn default() -> Self {
        Self {
            warmstart_batches: 1000,
            frozen_roles: BlockRole::HIDDEN_MATRICES.to_vec(),
            exempt_roles: vec![BlockRole::Unembedding, BlockRole::LayernormGain, BlockRole::QkNormGain],
        }
    }
}

impl FreezePolicy {
    pub fn validate(&self) -> Result<()> {
        if let Some(r) = self.frozen_roles.iter().find(|r| self.exempt_roles.contains(r)) {
            return Err(Error::Config(format!("role {r} is both frozen and exempt")));
        }
        if self.warmstart_batches == 0 && !self.frozen_roles.is_empty() {
            return Err(Error::Config(
                "frozen roles with warmstart_batches = 0 would freeze v at zero".into(),
            ));
        }
        Ok(())
    }
}

/// Runs `policy.warmstart_batches` gradient evaluations, folding each into
/// the second moments of every optimizer that has one, without touching
/// the parameters. Afterwards second moments of `frozen_roles` stop
/// updating and all first moments are zero.
///
/// `next_grads` supplies one gradient list (store-indexed) per call.
pub fn warmstart_freeze<T: Float>(
    store: &ParamStore<T>,
    router: &mut Router<T>,
    policy: &FreezePolicy,
    mut next_grads: impl FnMut(&ParamStore<T>) -> Result<Vec<Tensor<T>>>,
) -> Result<()> {
    policy.validate()?;
    for opt in router.optimizers() {
        let serves_frozen = opt
            .blocks()
            .iter()
            .any(|&b| policy.frozen_roles.contains(&store.block(b).role));
        if serves_frozen && !opt.kind().has_v() {
            return Err(Error::Config(format!(
                "`{}` serves frozen roles but keeps no second moment",
                opt.kind()
            )));
        }
    }
    for _ in 0..policy.warmstart_batches {
        let grads = next_grads(store)?;
        router.accumulate_second_moment(store, &grads)?;
    }
    for opt in router.optimizers_mut() {
        if opt.kind().has_v() {
            opt.freeze_roles(store, &policy.frozen_roles)?;
        }
        opt.reset_first_moments();
    }
    Ok(())
}

/// Marks every block whose role is in `roles` as (un)trainable. Untrainable
/// blocks are left out of routing, so their gradients are discarded.
pub fn set_trainable<T: Float>(store: &mut ParamStore<T>, roles: &[BlockRole], flag: bool) {
    store.set_trainable(roles, flag);
}
