//! Small closed-form objectives for optimizer tests.

use super::params::{BlockRole, ParamStore};
use crate::error::{Error, Result};
use crate::ndcore::{Rng, Tensor};

/// A differentiable loss over a flat parameter vector.
pub trait Objective {
    fn dim(&self) -> usize;
    fn loss(&self, w: &[f64]) -> f64;
    fn grad(&self, w: &[f64]) -> Vec<f64>;

    /// Store holding `w` as a single matrix-role block named `w`, shaped
    /// `[1, dim]`, ready to hand to an optimizer.
    fn store(&self, w: &[f64]) -> Result<ParamStore<f64>> {
        let mut store = ParamStore::new();
        store.register("w", BlockRole::MlpIn, Tensor::new(vec![1, self.dim()], w.to_vec())?)?;
        Ok(store)
    }
}

/// `L(w) = ½ wᵀ D w` with `D` diagonal.
#[derive(Clone, Debug)]
pub struct Quadratic {
    pub diag: Vec<f64>,
}

/// Diagonal quadratic whose eigenvalues are log-spaced from 1 to
/// `condition_number`.
pub fn quadratic_testbed(dim: usize, condition_number: f64) -> Result<Quadratic> {
    if dim == 0 {
        return Err(Error::InvalidArgument("quadratic dim must be >= 1".into()));
    }
    if !(condition_number >= 1.0) || !condition_number.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "condition number must be finite and >= 1, got {condition_number}"
        )));
    }
    let diag = (0..dim)
        .map(|i| {
            if dim == 1 {
                1.0
            } else {
                libm::pow(condition_number, i as f64 / (dim - 1) as f64)
            }
        })
        .collect();
    Ok(Quadratic { diag })
}

impl Objective for Quadratic {
    fn dim(&self) -> usize {
        self.diag.len()
    }

    fn loss(&self, w: &[f64]) -> f64 {
        0.5 * self.diag.iter().zip(w).map(|(d, x)| d * x * x).sum::<f64>()
    }

    fn grad(&self, w: &[f64]) -> Vec<f64> {
        self.diag.iter().zip(w).map(|(d, x)| d * x).collect()
    }
}

/// Mean logistic loss `(1/n) Σ ln(1 + exp(−yᵢ xᵢ·w))` on a fixed design with
/// ±1 labels.
#[derive(Clone, Debug)]
pub struct Logistic {
    pub n: usize,
    pub d: usize,
    /// Row-major `n × d` design.
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

/// Standard-normal design; labels drawn from the logistic model around a
/// standard-normal planted weight vector.
pub fn logistic_testbed(n: usize, d: usize, rng: &mut Rng) -> Result<Logistic> {
    if n == 0 || d == 0 {
        return Err(Error::InvalidArgument(format!(
            "logistic testbed needs n, d >= 1, got {n}, {d}"
        )));
    }
    let planted: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    let x: Vec<f64> = (0..n * d).map(|_| rng.normal()).collect();
    let y = x
        .chunks_exact(d)
        .map(|row| {
            let margin: f64 = row.iter().zip(&planted).map(|(a, b)| a * b).sum();
            if rng.uniform() < 1.0 / (1.0 + libm::exp(-margin)) {
                1.0
            } else {
                -1.0
            }
        })
        .collect();
    Ok(Logistic { n, d, x, y })
}

/// `ln(1 + eᶻ)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + libm::log1p(libm::exp(-z))
    } else {
        libm::log1p(libm::exp(z))
    }
}

impl Logistic {
    fn margins(&self, w: &[f64]) -> impl Iterator<Item = (&[f64], f64, f64)> + '_ {
        let w = w.to_vec();
        self.x.chunks_exact(self.d).zip(&self.y).map(move |(row, &y)| {
            let m: f64 = row.iter().zip(&w).map(|(a, b)| a * b).sum();
            (row, y, y * m)
        })
    }
}

impl Objective for Logistic {
    fn dim(&self) -> usize {
        self.d
    }

    fn loss(&self, w: &[f64]) -> f64 {
        self.margins(w).map(|(_, _, m)| softplus(-m)).sum::<f64>() / self.n as f64
    }

    fn grad(&self, w: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.d];
        for (row, y, m) in self.margins(w) {
            // d/dw softplus(−y x·w) = −y x σ(−y x·w)
            let s = 1.0 / (1.0 + libm::exp(m));
            for (gj, xj) in g.iter_mut().zip(row) {
                *gj -= y * xj * s;
            }
        }
        g.iter_mut().for_each(|gj| *gj /= self.n as f64);
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::max_rel_err;

    fn fd_grad(obj: &dyn Objective, w: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        (0..w.len())
            .map(|i| {
                let mut p = w.to_vec();
                let mut m = w.to_vec();
                p[i] += h;
                m[i] -= h;
                (obj.loss(&p) - obj.loss(&m)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn scalar_quadratic() {
        let q = quadratic_testbed(1, 1.0).unwrap();
        assert_eq!(q.grad(&[3.0]), vec![3.0]);
        assert_eq!(q.loss(&[0.0]), 0.0);
    }

    #[test]
    fn log_spaced_spectrum() {
        let q = quadratic_testbed(3, 100.0).unwrap();
        assert!((q.diag[1] - 10.0).abs() < 1e-12);
        assert_eq!(q.diag[0], 1.0);
        assert!((q.diag[2] - 100.0).abs() < 1e-12);
        assert!(quadratic_testbed(3, 0.5).is_err());
    }

    #[test]
    fn gd_contracts_by_one_minus_lr() {
        let q = quadratic_testbed(1, 1.0).unwrap();
        for lr in [0.1, 0.5, 1.5] {
            let mut w = 2.0;
            for _ in 0..5 {
                let next = w - lr * q.grad(&[w])[0];
                assert!((next / w - (1.0 - lr)).abs() < 1e-12);
                w = next;
            }
        }
    }

    #[test]
    fn logistic_at_zero() {
        let obj = logistic_testbed(50, 4, &mut Rng::new(2)).unwrap();
        let zero = vec![0.0; 4];
        assert!((obj.loss(&zero) - std::f64::consts::LN_2).abs() < 1e-15);
        let g = obj.grad(&zero);
        for j in 0..4 {
            let expect = -(0..50).map(|i| obj.y[i] * obj.x[i * 4 + j]).sum::<f64>() / 50.0 / 2.0;
            assert!((g[j] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn logistic_gradcheck() {
        let mut rng = Rng::new(4);
        let obj = logistic_testbed(30, 5, &mut rng).unwrap();
        let w: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
        assert!(max_rel_err(&obj.grad(&w), &fd_grad(&obj, &w)) < 1e-6);
    }

    #[test]
    fn logistic_is_deterministic() {
        let a = logistic_testbed(10, 3, &mut Rng::new(9)).unwrap();
        let b = logistic_testbed(10, 3, &mut Rng::new(9)).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.y, b.y);
    }
}
