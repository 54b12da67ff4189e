use serde::{Deserialize, Serialize};

use crate::error::{KrnetError, Result};
use crate::numkit::Batch;
use crate::real::Real;

/// Logistic preprocessing `y = (s/2) ln(u / (1 - u))` with `u = (x - lo) / (hi - lo)`,
/// mapping the box `(lo, hi)` onto the real line. Inverse
/// `x = lo + (hi - lo) (tanh(y/s) + 1) / 2`. No trainable parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Logit {
    pub cols: Vec<usize>,
    pub scale: f64,
    pub lo: f64,
    pub hi: f64,
}

impl Logit {
    pub fn new(cols: Vec<usize>, scale: f64, lo: f64, hi: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(KrnetError::config("logit.scale", "must be positive"));
        }
        if !(hi > lo) {
            return Err(KrnetError::config("logit.hi", "must exceed logit.lo"));
        }
        Ok(Logit {
            cols,
            scale,
            lo,
            hi,
        })
    }

    fn unit<T: Real>(&self, x: T) -> Result<T> {
        let u = (x - T::lit(self.lo)) / T::lit(self.hi - self.lo);
        if !(u > T::zero() && u < T::one()) {
            return Err(KrnetError::Domain {
                context: "logit preprocessing",
                value: x.as_f64(),
            });
        }
        Ok(u)
    }

    /// `ln(s / (2 (hi - lo)))`, the constant part of every log-derivative.
    fn ld_const<T: Real>(&self) -> T {
        T::lit((self.scale / (2.0 * (self.hi - self.lo))).ln())
    }

    pub fn forward<T: Real>(
        &self,
        x: &mut Batch<T>,
        logdet: &mut [T],
        keep: bool,
    ) -> Result<Option<Batch<T>>> {
        let cache = keep.then(|| x.gather_cols(&self.cols));
        let half_s = T::lit(self.scale / 2.0);
        let c0 = self.ld_const::<T>();
        for r in 0..x.rows() {
            let row = x.row_mut(r);
            let mut ld = T::zero();
            for &c in &self.cols {
                let u = self.unit(row[c])?;
                let (lu, l1u) = (u.ln(), (-u).ln_1p());
                row[c] = half_s * (lu - l1u);
                ld += c0 - lu - l1u;
            }
            logdet[r] += ld;
        }
        Ok(cache)
    }

    pub fn inverse<T: Real>(
        &self,
        z: &mut Batch<T>,
        mut logdet: Option<&mut [T]>,
        keep: bool,
    ) -> Result<Option<Batch<T>>> {
        let s = T::lit(self.scale);
        let (lo, w) = (T::lit(self.lo), T::lit(self.hi - self.lo));
        let half = T::lit(0.5);
        let c0 = self.ld_const::<T>();
        let ln2 = T::LN_2();
        for r in 0..z.rows() {
            let row = z.row_mut(r);
            let mut ld = T::zero();
            for &c in &self.cols {
                let v = row[c] / s;
                row[c] = lo + w * half * (v.tanh() + T::one());
                // u(1-u) = sech(v)^2 / 4, so -ln(u(1-u)) = 2 ln cosh v + 2 ln 2
                let av = v.abs();
                let ln_cosh = av + (-(av + av)).exp().ln_1p() - ln2;
                ld += c0 + ln_cosh + ln_cosh + ln2 + ln2;
            }
            if let Some(l) = logdet.as_deref_mut() {
                l[r] += ld;
            }
        }
        Ok(keep.then(|| z.gather_cols(&self.cols)))
    }

    /// Per entry `(dy/dx, d ln(dy/dx) / dx)` at the cached inputs.
    fn local<T: Real>(&self, xs: &Batch<T>) -> Result<(Vec<T>, Vec<T>)> {
        let s = T::lit(self.scale);
        let w = T::lit(self.hi - self.lo);
        let two = T::lit(2.0);
        let mut d = Vec::with_capacity(xs.as_slice().len());
        let mut dl = Vec::with_capacity(xs.as_slice().len());
        for &x in xs.as_slice() {
            let u = self.unit(x)?;
            let uu = u * (T::one() - u);
            d.push(s / (two * uu * w));
            dl.push((two * u - T::one()) / (uu * w));
        }
        Ok((d, dl))
    }

    pub fn vjp<T: Real>(&self, cache: &Batch<T>, cot: &mut Batch<T>, cot_logdet: &[T]) -> Result<()> {
        let (d, dl) = self.local(cache)?;
        let k = self.cols.len();
        for r in 0..cot.rows() {
            let row = cot.row_mut(r);
            for (j, &c) in self.cols.iter().enumerate() {
                row[c] = row[c] * d[r * k + j] + cot_logdet[r] * dl[r * k + j];
            }
        }
        Ok(())
    }

    pub fn inverse_vjp<T: Real>(
        &self,
        cache: &Batch<T>,
        cot: &mut Batch<T>,
        cot_logdet: &[T],
    ) -> Result<()> {
        let (d, dl) = self.local(cache)?;
        let k = self.cols.len();
        for r in 0..cot.rows() {
            let row = cot.row_mut(r);
            for (j, &c) in self.cols.iter().enumerate() {
                row[c] = (row[c] + cot_logdet[r] * dl[r * k + j]) / d[r * k + j];
            }
        }
        Ok(())
    }
}
