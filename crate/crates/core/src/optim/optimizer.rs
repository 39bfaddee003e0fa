use super::hyper::{HyperParams, OptimizerKind, OptimizerSpec, SecondMomentNorm};
use super::partition::BlockPartition;
use crate::error::{Error, Result};
use crate::model::{BlockRole, ParamStore};
use crate::ndcore::{Float, Tensor};

/// Per-tensor optimizer state. Vectors are flat and match the block's
/// element order.
#[derive(Clone, Debug, PartialEq)]
pub enum BlockState<T> {
    /// SGD momentum buffer.
    Momentum { buf: Vec<T> },
    /// Per-parameter first and second moments.
    Adam { m: Vec<T>, v: Vec<T> },
    /// First moment plus row and column sums of the squared-gradient EMA.
    Factored {
        m: Vec<T>,
        row: Vec<T>,
        col: Vec<T>,
        rows: usize,
        cols: usize,
    },
    /// First moment only: Lion and Signum, or a block whose second moment
    /// lives in the scalar groups.
    FirstMoment { m: Vec<T> },
}

/// Scalar second moments, one per partition group.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarMoments<T> {
    pub partition: BlockPartition,
    pub v: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    /// Parameter updates taken; drives the first-moment bias correction.
    pub step: u64,
    /// Second-moment accumulations, including warm-start passes; drives the
    /// second-moment bias correction.
    pub v_step: u64,
    /// Parallel to [`Optimizer::blocks`].
    pub blocks: Vec<BlockState<T>>,
    pub scalar: Option<ScalarMoments<T>>,
    /// Parallel to [`Optimizer::blocks`]; frozen blocks keep their v.
    pub frozen_v: Vec<bool>,
}

/// `η / (√v + ε)` for one scalar-v group.
#[derive(Clone, Debug, PartialEq)]
pub struct EffectiveLr {
    pub label: String,
    pub role: BlockRole,
    pub value: f64,
}

/// One optimizer instance serving a fixed set of store blocks.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    spec: OptimizerSpec,
    blocks: Vec<usize>,
    state: OptimState<T>,
}

struct Coeffs<T> {
    b1: T,
    one_b1: T,
    b2: T,
    one_b2: T,
    bc1: T,
    bc2: T,
    eps: T,
    lr: T,
    lr_wd: T,
}

impl<T: Float> Coeffs<T> {
    fn new(hp: &HyperParams, beta2: f64, step: u64, v_step: u64, lr: f64) -> Self {
        Self {
            b1: T::from_f64(hp.beta1),
            one_b1: T::from_f64(1.0 - hp.beta1),
            b2: T::from_f64(beta2),
            one_b2: T::from_f64(1.0 - beta2),
            bc1: T::from_f64(1.0 - libm::pow(hp.beta1, step as f64)),
            bc2: T::from_f64(1.0 - libm::pow(beta2, v_step as f64)),
            eps: T::from_f64(hp.eps),
            lr: T::from_f64(lr),
            lr_wd: T::from_f64(lr * hp.weight_decay),
        }
    }

    #[inline]
    fn adam_update(&self, w: &mut T, m: T, v: T) {
        let u = (m / self.bc1) / ((v / self.bc2).sqrt() + self.eps);
        *w = *w - self.lr * u - self.lr_wd * *w;
    }
}

impl<T: Float> Optimizer<T> {
    /// Optimizer over the store blocks `blocks`, in that order.
    pub fn new(spec: OptimizerSpec, store: &ParamStore<T>, blocks: &[usize]) -> Result<Self> {
        spec.validate()?;
        if let Some(&b) = blocks.iter().find(|&&b| b >= store.len()) {
            return Err(Error::InvalidArgument(format!("block index {b} out of range")));
        }
        let kind = spec.kind;
        let states = blocks
            .iter()
            .map(|&b| {
                let blk = store.block(b);
                let n = blk.numel();
                let zeros = || vec![T::ZERO; n];
                match (kind, blk.shape()) {
                    (OptimizerKind::Sgd, _) => BlockState::Momentum { buf: zeros() },
                    (OptimizerKind::Adamw, _) => BlockState::Adam { m: zeros(), v: zeros() },
                    (OptimizerKind::Adafactor, &[rows, cols]) => BlockState::Factored {
                        m: zeros(),
                        row: vec![T::ZERO; rows],
                        col: vec![T::ZERO; cols],
                        rows,
                        cols,
                    },
                    (OptimizerKind::Adafactor, _) => BlockState::Adam { m: zeros(), v: zeros() },
                    _ => BlockState::FirstMoment { m: zeros() },
                }
            })
            .collect();
        let scalar = if kind.has_scalar_v() {
            let partition = BlockPartition::new(store, blocks, spec.partition_mode())?;
            let v = vec![T::ZERO; partition.groups.len()];
            Some(ScalarMoments { partition, v })
        } else {
            None
        };
        Ok(Self {
            spec,
            blocks: blocks.to_vec(),
            state: OptimState {
                step: 0,
                v_step: 0,
                blocks: states,
                scalar,
                frozen_v: vec![false; blocks.len()],
            },
        })
    }

    pub fn spec(&self) -> &OptimizerSpec {
        &self.spec
    }

    pub fn kind(&self) -> OptimizerKind {
        self.spec.kind
    }

    /// Store indices served by this instance.
    pub fn blocks(&self) -> &[usize] {
        &self.blocks
    }

    pub fn state(&self) -> &OptimState<T> {
        &self.state
    }

    fn check_grads(&self, store: &ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::shape(
                "optimizer",
                format!("{} gradients for a store of {} blocks", grads.len(), store.len()),
            ));
        }
        for &b in &self.blocks {
            if grads[b].shape() != store.block(b).shape() {
                return Err(Error::shape(
                    "optimizer",
                    format!(
                        "gradient for `{}` is {:?}, parameter is {:?}",
                        store.block(b).name,
                        grads[b].shape(),
                        store.block(b).shape()
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Beta used for the slow EMA: Signum ties it to `beta1`.
    fn beta2(&self) -> f64 {
        match self.spec.kind {
            OptimizerKind::Signum => self.spec.hp.beta1,
            _ => self.spec.hp.beta2,
        }
    }

    /// One update of every served block with peak-scaled learning rate `lr`.
    /// `grads` is indexed like the store.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        self.check_grads(store, grads)?;
        self.state.step += 1;
        if self.spec.kind.has_v() {
            self.state.v_step += 1;
        }
        let c = Coeffs::<T>::new(&self.spec.hp, self.beta2(), self.state.step, self.state.v_step, lr);
        if self.spec.kind.has_scalar_v() {
            self.update_scalar_v(grads, &c);
        }
        let kind = self.spec.kind;
        for (pos, &b) in self.blocks.iter().enumerate() {
            let g = grads[b].data();
            let frozen = self.state.frozen_v[pos];
            let w = store.block_mut(b).values_mut();
            match &mut self.state.blocks[pos] {
                BlockState::Momentum { buf } => {
                    for ((w, buf), &g) in w.iter_mut().zip(buf.iter_mut()).zip(g) {
                        *buf = c.b1 * *buf + g;
                        *w = *w - c.lr * *buf - c.lr_wd * *w;
                    }
                }
                BlockState::Adam { m, v } => {
                    for (((w, m), v), &g) in w.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
                        *m = c.b1 * *m + c.one_b1 * g;
                        if !frozen {
                            *v = c.b2 * *v + c.one_b2 * (g * g);
                        }
                        c.adam_update(w, *m, *v);
                    }
                }
                BlockState::Factored {
                    m,
                    row,
                    col,
                    rows,
                    cols,
                } => {
                    if !frozen {
                        accumulate_factored(row, col, *rows, *cols, g, &c);
                    }
                    let total: T = col.iter().copied().sum();
                    for i in 0..*rows {
                        for j in 0..*cols {
                            let k = i * *cols + j;
                            m[k] = c.b1 * m[k] + c.one_b1 * g[k];
                            let v = if total > T::ZERO {
                                row[i] * col[j] / total
                            } else {
                                T::ZERO
                            };
                            c.adam_update(&mut w[k], m[k], v);
                        }
                    }
                }
                BlockState::FirstMoment { m } if kind.has_scalar_v() => {
                    for (m, &g) in m.iter_mut().zip(g) {
                        *m = c.b1 * *m + c.one_b1 * g;
                    }
                }
                BlockState::FirstMoment { m } => {
                    // Lion and Signum.
                    for (w, (m, &g)) in w.iter_mut().zip(m.iter_mut().zip(g)) {
                        let dir = c.b1 * *m + c.one_b1 * g;
                        *w = *w - c.lr * dir.sign() - c.lr_wd * *w;
                        *m = c.b2 * *m + c.one_b2 * g;
                    }
                }
            }
        }
        if let Some(sc) = &self.state.scalar {
            // Scalar-v parameter update, after all first moments are current.
            for (group, &v) in sc.partition.groups.iter().zip(&sc.v) {
                for seg in &group.segments {
                    let pos = self.position(seg.block);
                    let BlockState::FirstMoment { m } = &self.state.blocks[pos] else {
                        unreachable!("scalar-v blocks keep only a first moment")
                    };
                    let w = &mut store.block_mut(seg.block).values_mut()[seg.start..seg.start + seg.len];
                    for (w, &m) in w.iter_mut().zip(&m[seg.start..seg.start + seg.len]) {
                        c.adam_update(w, m, v);
                    }
                }
            }
        }
        Ok(())
    }

    fn position(&self, block: usize) -> usize {
        self.blocks.iter().position(|&b| b == block).expect("served block")
    }

    fn group_frozen(&self, group: &super::partition::Group) -> bool {
        group
            .segments
            .iter()
            .all(|s| self.state.frozen_v[self.position(s.block)])
    }

    fn update_scalar_v(&mut self, grads: &[Tensor<T>], c: &Coeffs<T>) {
        let norm = self.spec.second_moment_norm;
        let frozen: Vec<bool> = match &self.state.scalar {
            Some(sc) => sc.partition.groups.iter().map(|g| self.group_frozen(g)).collect(),
            None => return,
        };
        let sc = self.state.scalar.as_mut().expect("scalar moments");
        for ((group, v), frozen) in sc.partition.groups.iter().zip(sc.v.iter_mut()).zip(frozen) {
            if frozen {
                continue;
            }
            let mut sumsq = T::ZERO;
            for seg in &group.segments {
                for &g in &grads[seg.block].data()[seg.start..seg.start + seg.len] {
                    sumsq += g * g;
                }
            }
            let p = group.numel() as f64;
            let scale = T::from_f64(match norm {
                SecondMomentNorm::Alg1 => 1.0 / p.sqrt(),
                SecondMomentNorm::Mean => 1.0 / p,
            });
            *v = c.b2 * *v + c.one_b2 * (scale * sumsq);
        }
    }

    /// Folds `grads` into the second-moment estimates without touching the
    /// parameters or the first moments. Used to prime v before training.
    pub fn accumulate_second_moment(&mut self, store: &ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if !self.spec.kind.has_v() {
            return Err(Error::Unsupported(format!(
                "`{}` keeps no second moment to accumulate",
                self.spec.kind
            )));
        }
        self.check_grads(store, grads)?;
        self.state.v_step += 1;
        let c = Coeffs::<T>::new(&self.spec.hp, self.beta2(), self.state.step, self.state.v_step, 0.0);
        if self.spec.kind.has_scalar_v() {
            self.update_scalar_v(grads, &c);
            return Ok(());
        }
        for (pos, &b) in self.blocks.iter().enumerate() {
            if self.state.frozen_v[pos] {
                continue;
            }
            let g = grads[b].data();
            match &mut self.state.blocks[pos] {
                BlockState::Adam { v, .. } => {
                    for (v, &g) in v.iter_mut().zip(g) {
                        *v = c.b2 * *v + c.one_b2 * (g * g);
                    }
                }
                BlockState::Factored {
                    row, col, rows, cols, ..
                } => accumulate_factored(row, col, *rows, *cols, g, &c),
                _ => unreachable!("optimizer with v has v-bearing block states"),
            }
        }
        Ok(())
    }

    /// Stops second-moment updates for every served block whose role is in
    /// `roles`. Scalar-v groups must not straddle frozen and live blocks.
    pub fn freeze_roles(&mut self, store: &ParamStore<T>, roles: &[BlockRole]) -> Result<()> {
        if !self.spec.kind.has_v() {
            return Err(Error::Unsupported(format!(
                "`{}` keeps no second moment to freeze",
                self.spec.kind
            )));
        }
        for (pos, &b) in self.blocks.iter().enumerate() {
            if roles.contains(&store.block(b).role) {
                self.state.frozen_v[pos] = true;
            }
        }
        if let Some(sc) = &self.state.scalar {
            for g in &sc.partition.groups {
                let flags: Vec<bool> = g
                    .segments
                    .iter()
                    .map(|s| self.state.frozen_v[self.position(s.block)])
                    .collect();
                if flags.iter().any(|&f| f) && !flags.iter().all(|&f| f) {
                    return Err(Error::Config(format!(
                        "preconditioning block `{}` mixes frozen and unfrozen tensors",
                        g.label
                    )));
                }
            }
        }
        Ok(())
    }

    /// Zeroes first moments and momentum buffers, keeping second moments.
    pub fn reset_first_moments(&mut self) {
        for st in &mut self.state.blocks {
            match st {
                BlockState::Momentum { buf: m }
                | BlockState::Adam { m, .. }
                | BlockState::Factored { m, .. }
                | BlockState::FirstMoment { m } => m.iter_mut().for_each(|x| *x = T::ZERO),
            }
        }
        self.state.step = 0;
    }

    /// Raw per-parameter second moment of store block `block`: the Adam EMA,
    /// the rank-1 reconstruction `R_i C_j / ΣC` for factored blocks, or the
    /// group scalar broadcast over its parameters. `None` when the optimizer
    /// keeps no v or does not serve the block.
    pub fn second_moment(&self, block: usize) -> Option<Vec<T>> {
        let pos = self.blocks.iter().position(|&b| b == block)?;
        match &self.state.blocks[pos] {
            BlockState::Adam { v, .. } => Some(v.clone()),
            BlockState::Factored {
                row, col, rows, cols, ..
            } => {
                let total: T = col.iter().copied().sum();
                let mut out = Vec::with_capacity(rows * cols);
                for &r in row {
                    for &cj in col {
                        out.push(if total > T::ZERO { r * cj / total } else { T::ZERO });
                    }
                }
                Some(out)
            }
            BlockState::FirstMoment { m } => {
                let sc = self.state.scalar.as_ref()?;
                let mut out = vec![T::ZERO; m.len()];
                for (g, &v) in sc.partition.groups.iter().zip(&sc.v) {
                    for s in g.segments.iter().filter(|s| s.block == block) {
                        out[s.start..s.start + s.len].iter_mut().for_each(|x| *x = v);
                    }
                }
                Some(out)
            }
            BlockState::Momentum { .. } => None,
        }
    }

    /// First moment (or SGD buffer) of store block `block`.
    pub fn first_moment(&self, block: usize) -> Option<&[T]> {
        let pos = self.blocks.iter().position(|&b| b == block)?;
        Some(match &self.state.blocks[pos] {
            BlockState::Momentum { buf: m }
            | BlockState::Adam { m, .. }
            | BlockState::Factored { m, .. }
            | BlockState::FirstMoment { m } => m,
        })
    }

    /// `lr / (√v + ε)` per scalar-v group, with raw `v` unless `corrected`.
    pub fn effective_lrs(&self, lr: f64, corrected: bool) -> Result<Vec<EffectiveLr>> {
        let sc = self.state.scalar.as_ref().ok_or_else(|| {
            Error::Unsupported(format!(
                "effective learning rates need a block-scalar second moment; `{}` has none",
                self.spec.kind
            ))
        })?;
        let bc2 = 1.0 - libm::pow(self.beta2(), self.state.v_step as f64);
        Ok(sc
            .partition
            .groups
            .iter()
            .zip(&sc.v)
            .map(|(g, v)| {
                let v = v.to_f64();
                let v = if corrected && bc2 > 0.0 { v / bc2 } else { v };
                EffectiveLr {
                    label: g.label.clone(),
                    role: g.role,
                    value: effective_lr(lr, v, self.spec.hp.eps),
                }
            })
            .collect())
    }
}

/// `lr / (√v + ε)`.
pub fn effective_lr(lr: f64, v: f64, eps: f64) -> f64 {
    lr / (v.sqrt() + eps)
}

fn accumulate_factored<T: Float>(row: &mut [T], col: &mut [T], rows: usize, cols: usize, g: &[T], c: &Coeffs<T>) {
    let mut col_sums = vec![T::ZERO; cols];
    for i in 0..rows {
        let mut rs = T::ZERO;
        for j in 0..cols {
            let sq = g[i * cols + j] * g[i * cols + j];
            rs += sq;
            col_sums[j] += sq;
        }
        row[i] = c.b2 * row[i] + c.one_b2 * rs;
    }
    for (cj, s) in col.iter_mut().zip(col_sums) {
        *cj = c.b2 * *cj + c.one_b2 * s;
    }
}
