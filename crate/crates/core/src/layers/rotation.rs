use serde::{Deserialize, Serialize};

use crate::error::{KrnetError, Result};
use crate::numkit::{gemm, Batch};
use crate::real::Real;

/// Smallest admissible `|u_ii|`.
pub const PIVOT_FLOOR: f64 = 1e-12;

/// Linear map `x -> L U x` on the listed columns, `L` unit lower triangular.
///
/// Parameters: strict lower part of `L` row by row, then the upper part of
/// `U` (diagonal included) row by row; `k^2` in total.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rotation {
    pub cols: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct RotationCache<T> {
    x: Batch<T>,
    v: Batch<T>,
}

impl<T: Real> RotationCache<T> {
    pub fn scalars(&self) -> usize {
        self.x.as_slice().len() + self.v.as_slice().len()
    }
}

struct Dense<T> {
    l: Vec<T>,
    u: Vec<T>,
}

impl Rotation {
    pub fn new(cols: Vec<usize>) -> Self {
        Rotation { cols }
    }

    pub fn k(&self) -> usize {
        self.cols.len()
    }

    pub fn n_params(&self) -> usize {
        self.k() * self.k()
    }

    fn n_lower(&self) -> usize {
        self.k() * (self.k() - 1) / 2
    }

    pub fn init_params<T: Real>(&self, theta: &mut [T]) {
        theta.iter_mut().for_each(|v| *v = T::zero());
        let k = self.k();
        let mut idx = self.n_lower();
        for i in 0..k {
            theta[idx] = T::one();
            idx += k - i;
        }
    }

    /// Parameter index of `U[i][i]`.
    pub fn diag_index(&self, i: usize) -> usize {
        let k = self.k();
        self.n_lower() + (0..i).map(|r| k - r).sum::<usize>()
    }

    fn dense<T: Real>(&self, theta: &[T]) -> Result<Dense<T>> {
        let k = self.k();
        let mut l = vec![T::zero(); k * k];
        let mut u = vec![T::zero(); k * k];
        let mut idx = 0;
        for i in 0..k {
            l[i * k + i] = T::one();
            for j in 0..i {
                l[i * k + j] = theta[idx];
                idx += 1;
            }
        }
        for i in 0..k {
            for j in i..k {
                u[i * k + j] = theta[idx];
                idx += 1;
            }
            let d = u[i * k + i];
            if !(d.abs() >= T::lit(PIVOT_FLOOR)) {
                return Err(KrnetError::Singular {
                    context: format!("rotation U[{i}][{i}]"),
                    value: d.as_f64(),
                });
            }
        }
        Ok(Dense { l, u })
    }

    fn logdet<T: Real>(&self, d: &Dense<T>) -> T {
        let k = self.k();
        (0..k).map(|i| d.u[i * k + i].abs().ln()).sum()
    }

    pub fn forward<T: Real>(
        &self,
        theta: &[T],
        x: &mut Batch<T>,
        logdet: &mut [T],
        keep: bool,
    ) -> Result<Option<RotationCache<T>>> {
        let d = self.dense(theta)?;
        let k = self.k();
        let n = x.rows();
        let xa = x.gather_cols(&self.cols);
        let mut v = vec![T::zero(); n * k];
        gemm(T::one(), xa.as_slice(), n, k, false, &d.u, k, k, true, T::zero(), &mut v);
        let mut out = vec![T::zero(); n * k];
        gemm(T::one(), &v, n, k, false, &d.l, k, k, true, T::zero(), &mut out);
        x.scatter_cols(&self.cols, &Batch::new(n, k, out)?);
        let ld = self.logdet(&d);
        logdet.iter_mut().for_each(|v| *v += ld);
        Ok(keep.then(|| RotationCache {
            x: xa,
            v: Batch::new(n, k, v).expect("shape"),
        }))
    }

    pub fn inverse<T: Real>(
        &self,
        theta: &[T],
        z: &mut Batch<T>,
        logdet: Option<&mut [T]>,
        keep: bool,
    ) -> Result<Option<RotationCache<T>>> {
        let d = self.dense(theta)?;
        let k = self.k();
        let n = z.rows();
        let mut v = z.gather_cols(&self.cols);
        let mut xs = Batch::zeros(n, k);
        for r in 0..n {
            let vr = v.row_mut(r);
            // L v = z
            for i in 0..k {
                let mut s = vr[i];
                for j in 0..i {
                    s -= d.l[i * k + j] * vr[j];
                }
                vr[i] = s;
            }
            // U x = v
            let xr = xs.row_mut(r);
            for i in (0..k).rev() {
                let mut s = vr[i];
                for j in i + 1..k {
                    s -= d.u[i * k + j] * xr[j];
                }
                xr[i] = s / d.u[i * k + i];
            }
        }
        z.scatter_cols(&self.cols, &xs);
        if let Some(l) = logdet {
            let ld = self.logdet(&d);
            l.iter_mut().for_each(|v| *v += ld);
        }
        Ok(keep.then_some(RotationCache { x: xs, v }))
    }

    /// Adds parameter gradients for output cotangent `c` (`rows x k`) and
    /// returns the input cotangent.
    fn grads<T: Real>(
        &self,
        d: &Dense<T>,
        cache: &RotationCache<T>,
        c: &Batch<T>,
        cg: &[T],
        grad: &mut [T],
    ) -> Result<Batch<T>> {
        let k = self.k();
        let n = c.rows();
        if cache.x.rows() != n {
            return Err(KrnetError::StaleCache("rotation cache batch size"));
        }
        let one = T::one();
        let mut gl = vec![T::zero(); k * k];
        gemm(one, c.as_slice(), n, k, true, cache.v.as_slice(), n, k, false, T::zero(), &mut gl);
        let mut cv = vec![T::zero(); n * k];
        gemm(one, c.as_slice(), n, k, false, &d.l, k, k, false, T::zero(), &mut cv);
        let mut gu = vec![T::zero(); k * k];
        gemm(one, &cv, n, k, true, cache.x.as_slice(), n, k, false, T::zero(), &mut gu);
        let cg_sum: T = cg.iter().copied().sum();
        let mut idx = 0;
        for i in 0..k {
            for j in 0..i {
                grad[idx] += gl[i * k + j];
                idx += 1;
            }
        }
        for i in 0..k {
            for j in i..k {
                grad[idx] += gu[i * k + j];
                if i == j {
                    grad[idx] += cg_sum / d.u[i * k + i];
                }
                idx += 1;
            }
        }
        let mut cx = vec![T::zero(); n * k];
        gemm(one, &cv, n, k, false, &d.u, k, k, false, T::zero(), &mut cx);
        Batch::new(n, k, cx)
    }

    pub fn vjp<T: Real>(
        &self,
        theta: &[T],
        cache: &RotationCache<T>,
        cot: &mut Batch<T>,
        cot_logdet: &[T],
        grad: &mut [T],
    ) -> Result<()> {
        let d = self.dense(theta)?;
        let c = cot.gather_cols(&self.cols);
        let cx = self.grads(&d, cache, &c, cot_logdet, grad)?;
        cot.scatter_cols(&self.cols, &cx);
        Ok(())
    }

    pub fn inverse_vjp<T: Real>(
        &self,
        theta: &[T],
        cache: &RotationCache<T>,
        cot: &mut Batch<T>,
        cot_logdet: &[T],
        grad: &mut [T],
    ) -> Result<()> {
        let d = self.dense(theta)?;
        let k = self.k();
        let mut mu = cot.gather_cols(&self.cols);
        for r in 0..mu.rows() {
            let m = mu.row_mut(r);
            // U^T a = c (lower triangular)
            for i in 0..k {
                let mut s = m[i];
                for j in 0..i {
                    s -= d.u[j * k + i] * m[j];
                }
                m[i] = s / d.u[i * k + i];
            }
            // L^T mu = a (unit upper triangular)
            for i in (0..k).rev() {
                let mut s = m[i];
                for j in i + 1..k {
                    s -= d.l[j * k + i] * m[j];
                }
                m[i] = s;
            }
        }
        let neg = mu.map(|v| -v);
        self.grads(&d, cache, &neg, cot_logdet, grad)?;
        cot.scatter_cols(&self.cols, &mu);
        Ok(())
    }
}
