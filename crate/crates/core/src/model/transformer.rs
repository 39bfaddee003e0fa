//! Bias-free pre-LN decoder-only transformer.
//!
//! Block layout, in registration order:
//!
//! - `embed` (vocab × width)
//! - per layer `l{i}.`: `ln_attn`, optional `q_norm`/`k_norm`, `attn_qkv`
//!   (3·width × width, fused), `attn_out`, `ln_mlp`, `mlp_in` (4·width ×
//!   width), `mlp_out` (width × 4·width)
//! - `ln_final`, `unembed` (vocab × width)
//!
//! Matrices are stored `[out, in]` and applied as `x · Wᵀ`. Positions are
//! encoded with rotary embeddings on q and k, so there is no position table.

use serde::{Deserialize, Serialize};

use super::data::TokenBatch;
use super::params::{BlockRole, ParamStore};
use crate::error::{Error, Result};
use crate::ndcore::{Float, Rng, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub vocab: usize,
    pub seq_len: usize,
    pub qk_norm: bool,
    pub z_coef: f64,
    pub tied_embeddings: bool,
    pub ln_eps: f64,
    pub init_std: f64,
    pub rope_base: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::nano()
    }
}

impl ModelConfig {
    /// Width 64, depth 2, 4 heads of 16, vocab 256, sequences of 64 tokens,
    /// QK-norm and z-loss on.
    pub fn nano() -> Self {
        Self {
            width: 64,
            depth: 2,
            heads: 4,
            head_dim: 16,
            vocab: 256,
            seq_len: 64,
            qk_norm: true,
            z_coef: 1e-4,
            tied_embeddings: false,
            ln_eps: 1e-5,
            init_std: 0.02,
            rope_base: 10_000.0,
        }
    }

    /// Smaller sibling of [`ModelConfig::nano`] sized so that full sweeps fit
    /// in a few minutes on one core.
    pub fn desk() -> Self {
        Self {
            width: 32,
            depth: 2,
            heads: 2,
            head_dim: 16,
            vocab: 64,
            seq_len: 17,
            ..Self::nano()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.width == 0 || self.heads == 0 || self.head_dim == 0 {
            return bad(format!(
                "width, heads and head_dim must be positive (got {}, {}, {})",
                self.width, self.heads, self.head_dim
            ));
        }
        if self.width != self.heads * self.head_dim {
            return bad(format!(
                "width {} != heads {} x head_dim {}",
                self.width, self.heads, self.head_dim
            ));
        }
        if !self.head_dim.is_multiple_of(2) {
            return bad(format!("head_dim {} must be even for rotary embeddings", self.head_dim));
        }
        if self.width < 2 {
            return bad("width must be >= 2 for layer normalization".into());
        }
        if self.vocab < 2 {
            return bad(format!("vocab must be >= 2, got {}", self.vocab));
        }
        if self.seq_len < 2 {
            return bad(format!("seq_len must be >= 2, got {}", self.seq_len));
        }
        if self.tied_embeddings {
            return bad("tied embeddings are not supported".into());
        }
        if !(self.z_coef >= 0.0) || !self.z_coef.is_finite() {
            return bad(format!("z_coef must be finite and >= 0, got {}", self.z_coef));
        }
        if !(self.ln_eps > 0.0) {
            return bad(format!("ln_eps must be > 0, got {}", self.ln_eps));
        }
        if !(self.init_std > 0.0) || !(self.rope_base > 0.0) {
            return bad("init_std and rope_base must be > 0".into());
        }
        Ok(())
    }

    /// Closed-form parameter count of [`build_transformer`].
    pub fn param_count(&self) -> usize {
        let (w, v) = (self.width, self.vocab);
        let qk = if self.qk_norm { 2 * w } else { 0 };
        2 * v * w + w + self.depth * (12 * w * w + 2 * w + qk)
    }
}

pub fn build_transformer<T: Float>(cfg: &ModelConfig, rng: &mut Rng) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let (w, v) = (cfg.width, cfg.vocab);
    let mut store = ParamStore::new();
    let mut matrix =
        |rows: usize, cols: usize| Tensor::from_fn(vec![rows, cols], |_| T::from_f64(cfg.init_std * rng.normal()));
    let ones = || Tensor::full(vec![w], T::ONE);

    let embed = matrix(v, w);
    store.register("embed", BlockRole::Embedding, embed)?;
    for i in 0..cfg.depth {
        store.register(format!("l{i}.ln_attn"), BlockRole::LayernormGain, ones())?;
        if cfg.qk_norm {
            store.register(format!("l{i}.q_norm"), BlockRole::QkNormGain, ones())?;
            store.register(format!("l{i}.k_norm"), BlockRole::QkNormGain, ones())?;
        }
        store.register(format!("l{i}.attn_qkv"), BlockRole::AttnQkv, matrix(3 * w, w))?;
        store.register(format!("l{i}.attn_out"), BlockRole::AttnOut, matrix(w, w))?;
        store.register(format!("l{i}.ln_mlp"), BlockRole::LayernormGain, ones())?;
        store.register(format!("l{i}.mlp_in"), BlockRole::MlpIn, matrix(4 * w, w))?;
        store.register(format!("l{i}.mlp_out"), BlockRole::MlpOut, matrix(w, 4 * w))?;
    }
    store.register("ln_final", BlockRole::LayernormGain, ones())?;
    let unembed = matrix(v, w);
    store.register("unembed", BlockRole::Unembedding, unembed)?;
    Ok(store)
}

/// How the QK-norm gains are applied. `Identity` skips the normalization
/// while keeping the gain blocks on the tape; it exists so tests can compare
/// against a model built without QK-norm.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum QkNormImpl {
    #[default]
    LayerNorm,
    Identity,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    pub qk_norm: QkNormImpl,
}

/// One segment of the forward computation. Every parameter block belongs to
/// exactly one stage, and each stage after `Embed` reads only the residual
/// stream produced by the stage before it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Embed,
    Attention(usize),
    Mlp(usize),
    Head,
}

impl Stage {
    /// Stage that reads the block called `name`.
    pub fn of_block(name: &str) -> Result<Stage> {
        match name {
            "embed" => return Ok(Stage::Embed),
            "ln_final" | "unembed" => return Ok(Stage::Head),
            _ => {}
        }
        let parsed = name
            .strip_prefix('l')
            .and_then(|rest| rest.split_once('.'))
            .and_then(|(i, part)| Some((i.parse::<usize>().ok()?, part)));
        match parsed {
            Some((i, "ln_attn" | "q_norm" | "k_norm" | "attn_qkv" | "attn_out")) => Ok(Stage::Attention(i)),
            Some((i, "ln_mlp" | "mlp_in" | "mlp_out")) => Ok(Stage::Mlp(i)),
            _ => Err(Error::InvalidArgument(format!("`{name}` is not a transformer block"))),
        }
    }

    /// All stages of a model with `depth` layers, in execution order.
    pub fn sequence(depth: usize) -> Vec<Stage> {
        let mut out = vec![Stage::Embed];
        for i in 0..depth {
            out.push(Stage::Attention(i));
            out.push(Stage::Mlp(i));
        }
        out.push(Stage::Head);
        out
    }
}

/// A recorded forward pass. `params[i]` is the leaf for store block `i`;
/// `stage_inputs` holds the residual stream entering each stage after
/// `Embed`.
#[derive(Debug)]
pub struct ForwardPass<T> {
    pub tape: Tape<T>,
    pub loss: Var,
    pub ce: Var,
    pub zloss: Var,
    pub params: Vec<Var>,
    pub stage_inputs: Vec<(Stage, Var)>,
}

impl<T: Float> ForwardPass<T> {
    pub fn loss_value(&self) -> T {
        self.tape.value(self.loss).data()[0]
    }

    pub fn ce_value(&self) -> T {
        self.tape.value(self.ce).data()[0]
    }

    pub fn zloss_value(&self) -> T {
        self.tape.value(self.zloss).data()[0]
    }

    /// Value of the residual stream entering `stage`.
    pub fn stage_input(&self, stage: Stage) -> Option<&Tensor<T>> {
        self.stage_inputs
            .iter()
            .find(|(s, _)| *s == stage)
            .map(|&(_, v)| self.tape.value(v))
    }

    /// Gradients of the total loss for every store block, in store order.
    pub fn param_grads(&self) -> Result<Vec<Tensor<T>>> {
        Ok(self.tape.backward(self.loss)?.take(&self.params))
    }
}

/// Next-token loss on `batch`: positions `0..L-1` predict `1..L`.
pub fn forward_loss<T: Float>(store: &ParamStore<T>, batch: &TokenBatch, cfg: &ModelConfig) -> Result<ForwardPass<T>> {
    forward_loss_with(store, batch, cfg, ForwardOptions::default())
}

pub fn forward_loss_with<T: Float>(
    store: &ParamStore<T>,
    batch: &TokenBatch,
    cfg: &ModelConfig,
    opts: ForwardOptions,
) -> Result<ForwardPass<T>> {
    let run = Runner::new(store, batch, cfg, opts)?;
    let mut tape = Tape::new();
    let mut leaves = vec![None; store.len()];
    let mut stage_inputs = Vec::new();
    let mut x = None;
    for stage in Stage::sequence(cfg.depth) {
        if let Some(v) = x {
            stage_inputs.push((stage, v));
        }
        match run.stage(&mut tape, &mut leaves, stage, x)? {
            StageOut::Hidden(v) => x = Some(v),
            StageOut::Loss { ce, zloss } => {
                let loss = tape.add(ce, zloss)?;
                let params = store
                    .blocks()
                    .iter()
                    .zip(leaves)
                    .map(|(blk, leaf)| leaf.unwrap_or_else(|| tape.leaf(blk.tensor().clone())))
                    .collect();
                return Ok(ForwardPass {
                    tape,
                    loss,
                    ce,
                    zloss,
                    params,
                    stage_inputs,
                });
            }
        }
    }
    unreachable!("stage sequence ends with the head")
}

/// Total loss of the stages from `from` onward, fed with the residual
/// stream `x` (ignored for `Stage::Embed`, which starts from the tokens).
/// Matches [`forward_loss_with`] when `x` is the recorded stage input.
pub fn resume_loss<T: Float>(
    store: &ParamStore<T>,
    batch: &TokenBatch,
    cfg: &ModelConfig,
    opts: ForwardOptions,
    from: Stage,
    x: &Tensor<T>,
) -> Result<T> {
    let run = Runner::new(store, batch, cfg, opts)?;
    let mut tape = Tape::new();
    let mut leaves = vec![None; store.len()];
    let mut h = (from != Stage::Embed).then(|| tape.leaf(x.clone()));
    for stage in Stage::sequence(cfg.depth).into_iter().skip_while(|&s| s != from) {
        match run.stage(&mut tape, &mut leaves, stage, h)? {
            StageOut::Hidden(v) => h = Some(v),
            StageOut::Loss { ce, zloss } => {
                return Ok(tape.value(ce).data()[0] + tape.value(zloss).data()[0]);
            }
        }
    }
    Err(Error::InvalidArgument(format!(
        "{from:?} is not a stage of a depth-{} model",
        cfg.depth
    )))
}

enum StageOut {
    Hidden(Var),
    Loss { ce: Var, zloss: Var },
}

struct Runner<'a, T> {
    store: &'a ParamStore<T>,
    cfg: &'a ModelConfig,
    opts: ForwardOptions,
    inputs: Vec<usize>,
    targets: Vec<usize>,
    rows: usize,
    positions: usize,
}

impl<'a, T: Float> Runner<'a, T> {
    fn new(store: &'a ParamStore<T>, batch: &TokenBatch, cfg: &'a ModelConfig, opts: ForwardOptions) -> Result<Self> {
        cfg.validate()?;
        if batch.cols < 2 {
            return Err(Error::shape(
                "forward_loss",
                format!("need at least 2 tokens per row, got {}", batch.cols),
            ));
        }
        if let Some(&bad) = batch.tokens.iter().find(|&&t| t >= cfg.vocab) {
            return Err(Error::InvalidArgument(format!(
                "token {bad} out of range for vocabulary of {}",
                cfg.vocab
            )));
        }
        let (rows, positions) = (batch.rows, batch.cols - 1);
        let mut inputs = Vec::with_capacity(rows * positions);
        let mut targets = Vec::with_capacity(rows * positions);
        for r in 0..rows {
            let row = batch.row(r);
            inputs.extend_from_slice(&row[..positions]);
            targets.extend_from_slice(&row[1..]);
        }
        Ok(Self {
            store,
            cfg,
            opts,
            inputs,
            targets,
            rows,
            positions,
        })
    }

    /// Leaf for block `name` with the expected `shape`, created on first use.
    fn param(&self, tape: &mut Tape<T>, leaves: &mut [Option<Var>], name: &str, shape: &[usize]) -> Result<Var> {
        let idx = self
            .store
            .index_of(name)
            .ok_or_else(|| Error::InvalidArgument(format!("parameter `{name}` missing from store")))?;
        if let Some(v) = leaves[idx] {
            return Ok(v);
        }
        let t = self.store.block(idx).tensor();
        if t.shape() != shape {
            return Err(Error::shape(
                "forward_loss",
                format!("`{name}` is {:?}, expected {shape:?}", t.shape()),
            ));
        }
        let v = tape.leaf(t.clone());
        leaves[idx] = Some(v);
        Ok(v)
    }

    fn stage(&self, tape: &mut Tape<T>, leaves: &mut [Option<Var>], stage: Stage, x: Option<Var>) -> Result<StageOut> {
        let cfg = self.cfg;
        let (w, h, hd) = (cfg.width, cfg.heads, cfg.head_dim);
        let (b, l) = (self.rows, self.positions);
        let n = b * l;
        let x_in = || x.ok_or_else(|| Error::InvalidArgument(format!("{stage:?} needs a residual input")));
        let mut p = |tape: &mut Tape<T>, name: String, shape: &[usize]| self.param(tape, leaves, &name, shape);
        let out = match stage {
            Stage::Embed => {
                let table = p(tape, "embed".into(), &[cfg.vocab, w])?;
                StageOut::Hidden(tape.gather(table, &self.inputs)?)
            }
            Stage::Attention(i) => {
                let x = x_in()?;
                let hn = {
                    let g = p(tape, format!("l{i}.ln_attn"), &[w])?;
                    tape.layernorm(x, g, cfg.ln_eps)?
                };
                let wqkv = p(tape, format!("l{i}.attn_qkv"), &[3 * w, w])?;
                let qkv = tape.linear(hn, wqkv)?;
                let mut q = tape.narrow(qkv, 0, w)?;
                let mut k = tape.narrow(qkv, w, w)?;
                let v = tape.narrow(qkv, 2 * w, w)?;
                if cfg.qk_norm && self.opts.qk_norm == QkNormImpl::LayerNorm {
                    let gq = p(tape, format!("l{i}.q_norm"), &[w])?;
                    let gk = p(tape, format!("l{i}.k_norm"), &[w])?;
                    q = tape.layernorm(q, gq, cfg.ln_eps)?;
                    k = tape.layernorm(k, gk, cfg.ln_eps)?;
                }
                let q = tape.reshape(q, vec![b, l, h, hd])?;
                let k = tape.reshape(k, vec![b, l, h, hd])?;
                let v = tape.reshape(v, vec![b, l, h, hd])?;
                let q = tape.rope(q, cfg.rope_base)?;
                let k = tape.rope(k, cfg.rope_base)?;
                let att = tape.causal_attention(q, k, v)?;
                let att = tape.reshape(att, vec![n, w])?;
                let wo = p(tape, format!("l{i}.attn_out"), &[w, w])?;
                let att = tape.linear(att, wo)?;
                StageOut::Hidden(tape.add(x, att)?)
            }
            Stage::Mlp(i) => {
                let x = x_in()?;
                let g = p(tape, format!("l{i}.ln_mlp"), &[w])?;
                let hn = tape.layernorm(x, g, cfg.ln_eps)?;
                let w_in = p(tape, format!("l{i}.mlp_in"), &[4 * w, w])?;
                let up = tape.linear(hn, w_in)?;
                let up = tape.gelu(up);
                let w_out = p(tape, format!("l{i}.mlp_out"), &[w, 4 * w])?;
                let down = tape.linear(up, w_out)?;
                StageOut::Hidden(tape.add(x, down)?)
            }
            Stage::Head => {
                let x = x_in()?;
                let g = p(tape, "ln_final".into(), &[w])?;
                let hn = tape.layernorm(x, g, cfg.ln_eps)?;
                let unembed = p(tape, "unembed".into(), &[cfg.vocab, w])?;
                let logits = tape.linear(hn, unembed)?;
                let (ce, zloss) = tape.cross_entropy_with_zloss(logits, &self.targets, cfg.z_coef)?;
                StageOut::Loss { ce, zloss }
            }
        };
        Ok(out)
    }
}
