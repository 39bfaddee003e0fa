use crate::error::{Error, Result};
use crate::model::{BlockRole, ParamStore};
use crate::ndcore::Tensor;
use crate::optim::{HyperParams, Optimizer, OptimizerKind, OptimizerSpec};

/// Settings for [`check_lemma1`]. Signum uses `beta1`. Because `ρ` is read off
/// the realized moments, the per-step identity holds for any `beta2`; tying the
/// betas matters for the expectation form, where `ρ` is a signal-to-noise ratio.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lemma1Config {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: f64,
}

impl Lemma1Config {
    pub fn tied(beta: f64) -> Self {
        Self {
            beta1: beta,
            beta2: beta,
            eps: 0.0,
            lr: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lemma1Sample {
    /// 1-based step.
    pub step: usize,
    pub param: usize,
    pub delta_adam: f64,
    pub delta_signum: f64,
    /// Raw first-moment EMA after the step.
    pub m: f64,
    /// Raw second-moment EMA after the step.
    pub v: f64,
    /// `|δ_Adam − δ_Signum·ρ| / lr` with `ρ = (|m|/(1−β₁ᵗ)) / √(v/(1−β₂ᵗ))`.
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Lemma1Report {
    pub config: Lemma1Config,
    pub samples: Vec<Lemma1Sample>,
    /// Over samples with `m ≠ 0`.
    pub max_residual: f64,
    /// Fraction of samples with `m ≠ 0` where both updates share a sign.
    pub sign_agreement: f64,
    /// Number of samples with `m ≠ 0`.
    pub compared: usize,
}

/// Runs AdamW (no weight decay) and Signum side by side on the same gradient
/// stream and compares every per-parameter update with the rescaled Signum
/// update.
///
/// `grads[t][i]` is the gradient of parameter `i` at step `t + 1`. Rows must
/// share one length.
pub fn check_lemma1(grads: &[Vec<f64>], cfg: Lemma1Config) -> Result<Lemma1Report> {
    if cfg.eps != 0.0 {
        return Err(Error::InvalidArgument(format!(
            "the Adam/Signum identity needs eps = 0, got {}",
            cfg.eps
        )));
    }
    if !(cfg.lr > 0.0) {
        return Err(Error::InvalidArgument(format!("lr must be positive, got {}", cfg.lr)));
    }
    let n = grads.first().map_or(0, |g| g.len());
    if n == 0 || grads.iter().any(|g| g.len() != n) {
        return Err(Error::InvalidArgument(
            "gradient rows must be non-empty and of equal length".into(),
        ));
    }
    let hp = |b2| HyperParams {
        lr: cfg.lr,
        beta1: cfg.beta1,
        beta2: b2,
        eps: 0.0,
        weight_decay: 0.0,
    };
    let mut store_a = ParamStore::<f64>::new();
    store_a.register("p", BlockRole::MlpIn, Tensor::zeros(vec![1, n]))?;
    let mut store_s = store_a.clone();
    let mut adam = Optimizer::new(OptimizerSpec::new(OptimizerKind::Adamw, hp(cfg.beta2)), &store_a, &[0])?;
    let mut signum = Optimizer::new(OptimizerSpec::new(OptimizerKind::Signum, hp(cfg.beta1)), &store_s, &[0])?;

    let mut samples = Vec::with_capacity(grads.len() * n);
    let (mut max_residual, mut agree, mut compared) = (0f64, 0usize, 0usize);
    for (t, g) in grads.iter().enumerate() {
        let step = t + 1;
        let grad = [Tensor::new(vec![1, n], g.clone())?];
        let before_a = store_a.block(0).tensor().data().to_vec();
        let before_s = store_s.block(0).tensor().data().to_vec();
        adam.step(&mut store_a, &grad, cfg.lr)?;
        signum.step(&mut store_s, &grad, cfg.lr)?;
        let m = adam.first_moment(0).expect("adam keeps m").to_vec();
        let v = adam.second_moment(0).expect("adam keeps v");
        let bc1 = 1.0 - libm::pow(cfg.beta1, step as f64);
        let bc2 = 1.0 - libm::pow(cfg.beta2, step as f64);
        for i in 0..n {
            let delta_adam = store_a.block(0).tensor().data()[i] - before_a[i];
            let delta_signum = store_s.block(0).tensor().data()[i] - before_s[i];
            let (mi, vi) = (m[i], v[i]);
            let residual = if mi == 0.0 {
                0.0
            } else {
                let rho = (mi.abs() / bc1) / (vi / bc2).sqrt();
                (delta_adam - delta_signum * rho).abs() / cfg.lr
            };
            if mi != 0.0 {
                compared += 1;
                max_residual = max_residual.max(residual);
                if delta_adam.signum() == delta_signum.signum() {
                    agree += 1;
                }
            }
            samples.push(Lemma1Sample {
                step,
                param: i,
                delta_adam,
                delta_signum,
                m: mi,
                v: vi,
                residual,
            });
        }
    }
    Ok(Lemma1Report {
        config: cfg,
        samples,
        max_residual,
        sign_agreement: if compared == 0 {
            1.0
        } else {
            agree as f64 / compared as f64
        },
        compared,
    })
}
