use serde::{Deserialize, Serialize};

use crate::error::{KrnetError, Result};
use crate::numkit::Batch;
use crate::real::Real;

/// Per-dimension `out = a * x + b` on the listed columns. Parameters are laid
/// out `a | b`; `a = 1, b = 0` until [`ScaleBias::data_init`] runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleBias {
    pub cols: Vec<usize>,
    pub initialized: bool,
}

impl ScaleBias {
    pub fn new(cols: Vec<usize>) -> Self {
        ScaleBias {
            cols,
            initialized: false,
        }
    }

    pub fn n_params(&self) -> usize {
        2 * self.cols.len()
    }

    pub fn init_params<T: Real>(&self, theta: &mut [T]) {
        let k = self.cols.len();
        theta[..k].iter_mut().for_each(|v| *v = T::one());
        theta[k..].iter_mut().for_each(|v| *v = T::zero());
    }

    /// Sets `a = 1/std`, `b = -mean/std` (population statistics) from `x` so
    /// the layer output is standardized, then marks the layer initialized.
    pub fn data_init<T: Real>(&mut self, theta: &mut [T], x: &Batch<T>) -> Result<()> {
        if x.rows() == 0 {
            return Err(KrnetError::EmptyInput("scale-bias initialization"));
        }
        let sub = x.gather_cols(&self.cols);
        let mean = sub.col_mean();
        let std = sub.col_std();
        let k = self.cols.len();
        for j in 0..k {
            if !(std[j] > T::lit(1e-12)) {
                return Err(KrnetError::Singular {
                    context: "scale-bias initialization batch std".into(),
                    value: std[j].as_f64(),
                });
            }
            theta[j] = T::one() / std[j];
            theta[k + j] = -mean[j] / std[j];
        }
        self.initialized = true;
        Ok(())
    }

    fn check<T: Real>(&self, theta: &[T]) -> Result<T> {
        let k = self.cols.len();
        let mut ld = T::zero();
        for &a in &theta[..k] {
            if a == T::zero() || !a.is_finite() {
                return Err(KrnetError::Singular {
                    context: "scale-bias scale".into(),
                    value: a.as_f64(),
                });
            }
            ld += a.abs().ln();
        }
        Ok(ld)
    }

    pub fn forward<T: Real>(
        &self,
        theta: &[T],
        x: &mut Batch<T>,
        logdet: &mut [T],
        keep: bool,
    ) -> Result<Option<Batch<T>>> {
        let ld = self.check(theta)?;
        let cache = keep.then(|| x.gather_cols(&self.cols));
        let k = self.cols.len();
        for r in 0..x.rows() {
            let row = x.row_mut(r);
            for (j, &c) in self.cols.iter().enumerate() {
                row[c] = theta[j] * row[c] + theta[k + j];
            }
            logdet[r] += ld;
        }
        Ok(cache)
    }

    pub fn inverse<T: Real>(
        &self,
        theta: &[T],
        z: &mut Batch<T>,
        logdet: Option<&mut [T]>,
        keep: bool,
    ) -> Result<Option<Batch<T>>> {
        let ld = self.check(theta)?;
        let k = self.cols.len();
        for r in 0..z.rows() {
            let row = z.row_mut(r);
            for (j, &c) in self.cols.iter().enumerate() {
                row[c] = (row[c] - theta[k + j]) / theta[j];
            }
        }
        if let Some(l) = logdet {
            l.iter_mut().for_each(|v| *v += ld);
        }
        Ok(keep.then(|| z.gather_cols(&self.cols)))
    }

    fn param_grads<T: Real>(&self, theta: &[T], x: &Batch<T>, c: &Batch<T>, cg: &[T], grad: &mut [T]) {
        let k = self.cols.len();
        let cg_sum: T = cg.iter().copied().sum();
        for r in 0..x.rows() {
            let (xr, cr) = (x.row(r), c.row(r));
            for j in 0..k {
                grad[j] += cr[j] * xr[j];
                grad[k + j] += cr[j];
            }
        }
        for j in 0..k {
            grad[j] += cg_sum / theta[j];
        }
    }

    pub fn vjp<T: Real>(
        &self,
        theta: &[T],
        cache: &Batch<T>,
        cot: &mut Batch<T>,
        cot_logdet: &[T],
        grad: &mut [T],
    ) -> Result<()> {
        let c = cot.gather_cols(&self.cols);
        self.param_grads(theta, cache, &c, cot_logdet, grad);
        for r in 0..cot.rows() {
            let row = cot.row_mut(r);
            for (j, &col) in self.cols.iter().enumerate() {
                row[col] *= theta[j];
            }
        }
        Ok(())
    }

    pub fn inverse_vjp<T: Real>(
        &self,
        theta: &[T],
        cache: &Batch<T>,
        cot: &mut Batch<T>,
        cot_logdet: &[T],
        grad: &mut [T],
    ) -> Result<()> {
        for r in 0..cot.rows() {
            let row = cot.row_mut(r);
            for (j, &col) in self.cols.iter().enumerate() {
                row[col] /= theta[j];
            }
        }
        let neg = cot.gather_cols(&self.cols).map(|v| -v);
        self.param_grads(theta, cache, &neg, cot_logdet, grad);
        Ok(())
    }
}
