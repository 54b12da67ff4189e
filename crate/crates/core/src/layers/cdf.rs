use serde::{Deserialize, Serialize};

use crate::error::{KrnetError, Result};
use crate::numkit::Batch;
use crate::real::Real;

/// Mesh and tail settings of the component-wise CDF layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CdfConfig {
    /// Half-width `a` of the meshed interval `[-a, a]`.
    pub half_width: f64,
    /// Number of mesh elements (even, symmetric about 0).
    pub n_elements: usize,
    /// Width ratio between neighbouring elements, growing outward.
    pub ratio: f64,
    /// Slope of the linear tails outside `[-a, a]`.
    pub tail_slope: f64,
}

impl Default for CdfConfig {
    fn default() -> Self {
        CdfConfig {
            half_width: 20.0,
            n_elements: 32,
            ratio: 1.15,
            tail_slope: 1e-10,
        }
    }
}

impl CdfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.half_width > 0.0 && self.half_width.is_finite()) {
            return Err(KrnetError::config("cdf.half_width", "must be positive"));
        }
        if self.n_elements < 2 || self.n_elements % 2 != 0 {
            return Err(KrnetError::config("cdf.n_elements", "must be even and at least 2"));
        }
        if !(self.ratio > 0.0 && self.ratio.is_finite()) {
            return Err(KrnetError::config("cdf.ratio", "must be positive"));
        }
        if !(self.tail_slope > 0.0 && self.tail_slope.is_finite()) {
            return Err(KrnetError::config("cdf.tail_slope", "must be positive"));
        }
        Ok(())
    }

    /// Number of knots (trainable weights per dimension).
    pub fn n_knots(&self) -> usize {
        self.n_elements + 1
    }

    /// Knot positions on `[-a, a]`: widths `w0 r^j` from the centre outward,
    /// scaled so each half sums to `a`.
    pub fn mesh(&self) -> Vec<f64> {
        let half = self.n_elements / 2;
        let a = self.half_width;
        let total: f64 = (0..half).map(|j| self.ratio.powi(j as i32)).sum();
        let w0 = a / total;
        let mut right = Vec::with_capacity(half + 1);
        let mut x = 0.0;
        right.push(0.0);
        for j in 0..half {
            x += w0 * self.ratio.powi(j as i32);
            right.push(x);
        }
        right[half] = a;
        let mut knots: Vec<f64> = right.iter().rev().map(|v| -v).collect();
        knots.extend_from_slice(&right[1..]);
        knots
    }
}

/// Component-wise monotone map built from a piecewise-linear density on a
/// nonuniform mesh; parameters are `n_knots` log-weights per column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CdfLayer {
    pub cols: Vec<usize>,
    pub config: CdfConfig,
    /// Knots mapped to `[0, 1]`.
    knots_u: Vec<f64>,
}

/// Per-column quantities derived from the weights.
struct Tables<T> {
    q: Vec<T>,
    z: T,
    cum: Vec<T>,
}

/// Location of a point inside the mesh.
struct Loc<T> {
    i: usize,
    xi: T,
    du: T,
}

impl CdfLayer {
    pub fn new(cols: Vec<usize>, config: CdfConfig) -> Result<Self> {
        config.validate()?;
        let a = config.half_width;
        let knots_u = config.mesh().iter().map(|x| (x + a) / (2.0 * a)).collect();
        Ok(CdfLayer {
            cols,
            config,
            knots_u,
        })
    }

    pub fn n_knots(&self) -> usize {
        self.config.n_knots()
    }

    pub fn n_params(&self) -> usize {
        self.cols.len() * self.n_knots()
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots_u
    }

    pub fn init_params<T: Real>(&self, theta: &mut [T]) {
        theta.iter_mut().for_each(|v| *v = T::zero());
    }

    fn du<T: Real>(&self, i: usize) -> T {
        T::lit(self.knots_u[i + 1] - self.knots_u[i])
    }

    fn tables<T: Real>(&self, w: &[T]) -> Result<Tables<T>> {
        let m = w.iter().copied().fold(T::neg_infinity(), T::max);
        if !m.is_finite() {
            return Err(KrnetError::NonFinite {
                context: "cdf weights".into(),
            });
        }
        let q: Vec<T> = w.iter().map(|&v| (v - m).exp()).collect();
        let half = T::lit(0.5);
        let mut cum = Vec::with_capacity(q.len());
        cum.push(T::zero());
        for i in 0..q.len() - 1 {
            let next = cum[i] + half * (q[i] + q[i + 1]) * self.du(i);
            cum.push(next);
        }
        let z = *cum.last().unwrap();
        Ok(Tables { q, z, cum })
    }

    fn locate<T: Real>(&self, u: T) -> Loc<T> {
        let n = self.knots_u.len() - 1;
        let uf = u.as_f64();
        let i = self.knots_u.partition_point(|&k| k <= uf).clamp(1, n) - 1;
        Loc {
            i,
            xi: u - T::lit(self.knots_u[i]),
            du: self.du(i),
        }
    }

    fn a<T: Real>(&self) -> T {
        T::lit(self.config.half_width)
    }

    fn tail<T: Real>(&self) -> T {
        T::lit(self.config.tail_slope)
    }

    /// `(z, ln dz/dx)` for one scalar.
    fn map_scalar<T: Real>(&self, t: &Tables<T>, x: T) -> (T, T) {
        let a = self.a::<T>();
        let tail = self.tail::<T>();
        if x < -a {
            return (tail * (x + a) - a, tail.ln());
        }
        if x > a {
            return (tail * (x - a) + a, tail.ln());
        }
        let two_a = a + a;
        let u = (x + a) / two_a;
        let l = self.locate(u);
        let (qi, qn) = (t.q[l.i], t.q[l.i + 1]);
        let r = l.xi / l.du;
        let half = T::lit(0.5);
        let g = t.cum[l.i] + qi * l.xi + half * (qn - qi) * l.xi * r;
        let pu = qi * (T::one() - r) + qn * r;
        (two_a * (g / t.z) - a, (pu / t.z).ln())
    }

    fn invert_scalar<T: Real>(&self, t: &Tables<T>, z: T) -> T {
        let a = self.a::<T>();
        let tail = self.tail::<T>();
        if z < -a {
            return (z + a) / tail - a;
        }
        if z > a {
            return (z - a) / tail + a;
        }
        let two_a = a + a;
        let g_target = (z + a) / two_a * t.z;
        let n = t.cum.len() - 1;
        let i = t.cum.partition_point(|&c| c <= g_target).clamp(1, n) - 1;
        let du = self.du::<T>(i);
        let c = (g_target - t.cum[i]).max(T::zero());
        let b = t.q[i];
        let slope = (t.q[i + 1] - t.q[i]) / du;
        let disc = (b * b + (slope + slope) * c).max(T::zero());
        let xi = ((c + c) / (b + disc.sqrt())).min(du).max(T::zero());
        let u = T::lit(self.knots_u[i]) + xi;
        two_a * u - a
    }

    fn all_tables<T: Real>(&self, theta: &[T]) -> Result<Vec<Tables<T>>> {
        let np = self.n_knots();
        (0..self.cols.len())
            .map(|d| self.tables(&theta[d * np..(d + 1) * np]))
            .collect()
    }

    pub fn forward<T: Real>(
        &self,
        theta: &[T],
        x: &mut Batch<T>,
        logdet: &mut [T],
        keep: bool,
    ) -> Result<Option<Batch<T>>> {
        let tabs = self.all_tables(theta)?;
        let cache = keep.then(|| x.gather_cols(&self.cols));
        for r in 0..x.rows() {
            let row = x.row_mut(r);
            let mut ld = T::zero();
            for (d, &c) in self.cols.iter().enumerate() {
                let (z, l) = self.map_scalar(&tabs[d], row[c]);
                row[c] = z;
                ld += l;
            }
            logdet[r] += ld;
        }
        Ok(cache)
    }

    pub fn inverse<T: Real>(
        &self,
        theta: &[T],
        z: &mut Batch<T>,
        mut logdet: Option<&mut [T]>,
        keep: bool,
    ) -> Result<Option<Batch<T>>> {
        let tabs = self.all_tables(theta)?;
        for r in 0..z.rows() {
            let row = z.row_mut(r);
            let mut ld = T::zero();
            for (d, &c) in self.cols.iter().enumerate() {
                let x = self.invert_scalar(&tabs[d], row[c]);
                row[c] = x;
                if logdet.is_some() {
                    ld += self.map_scalar(&tabs[d], x).1;
                }
            }
            if let Some(l) = logdet.as_deref_mut() {
                l[r] += ld;
            }
        }
        Ok(keep.then(|| z.gather_cols(&self.cols)))
    }

    /// Parameter gradients for output cotangent `cz` and logdet cotangent
    /// `cg` at cached inputs `xs`; returns `(dz/dx, d ln(dz/dx)/dx)` per entry.
    fn grads<T: Real>(
        &self,
        tabs: &[Tables<T>],
        xs: &Batch<T>,
        cz: &Batch<T>,
        cg: &[T],
        grad: &mut [T],
    ) -> (Vec<T>, Vec<T>) {
        let np = self.n_knots();
        let ne = np - 1;
        let a = self.a::<T>();
        let tail = self.tail::<T>();
        let two_a = a + a;
        let half = T::lit(0.5);
        let k = self.cols.len();
        let n = xs.rows();
        let mut deriv = vec![T::zero(); n * k];
        let mut dlog = vec![T::zero(); n * k];
        for d in 0..k {
            let t = &tabs[d];
            let mut gq = vec![T::zero(); np];
            let mut hist = vec![T::zero(); ne];
            let mut s = T::zero();
            for r in 0..n {
                let x = xs.get(r, d);
                let idx = r * k + d;
                if x < -a || x > a {
                    deriv[idx] = tail;
                    continue;
                }
                let u = (x + a) / two_a;
                let l = self.locate(u);
                let (qi, qn) = (t.q[l.i], t.q[l.i + 1]);
                let rr = l.xi / l.du;
                let pu = qi * (T::one() - rr) + qn * rr;
                let g = t.cum[l.i] + qi * l.xi + half * (qn - qi) * l.xi * rr;
                let f = g / t.z;
                deriv[idx] = pu / t.z;
                dlog[idx] = (qn - qi) / (l.du * pu) / two_a;

                let c = cz.get(r, d) * two_a / t.z;
                let cgr = cg[r];
                hist[l.i] += c;
                s += c * f + cgr / t.z;
                let xi2 = half * l.xi * rr;
                gq[l.i] += c * (l.xi - xi2) + cgr * (T::one() - rr) / pu;
                gq[l.i + 1] += c * xi2 + cgr * rr / pu;
            }
            // Elements left of the sample's element are fully integrated.
            let mut suffix = T::zero();
            for l in (0..ne).rev() {
                let w = suffix * self.du::<T>(l) * half;
                gq[l] += w;
                gq[l + 1] += w;
                suffix += hist[l];
            }
            let g = &mut grad[d * np..(d + 1) * np];
            for j in 0..np {
                let left = if j > 0 { self.du::<T>(j - 1) } else { T::zero() };
                let right = if j < ne { self.du::<T>(j) } else { T::zero() };
                let dz = half * (left + right);
                g[j] += t.q[j] * (gq[j] - s * dz);
            }
        }
        (deriv, dlog)
    }

    pub fn vjp<T: Real>(
        &self,
        theta: &[T],
        cache: &Batch<T>,
        cot: &mut Batch<T>,
        cot_logdet: &[T],
        grad: &mut [T],
    ) -> Result<()> {
        if cache.rows() != cot.rows() {
            return Err(KrnetError::StaleCache("cdf cache batch size"));
        }
        let tabs = self.all_tables(theta)?;
        let cz = cot.gather_cols(&self.cols);
        let (deriv, dlog) = self.grads(&tabs, cache, &cz, cot_logdet, grad);
        let k = self.cols.len();
        for r in 0..cot.rows() {
            let row = cot.row_mut(r);
            for (d, &c) in self.cols.iter().enumerate() {
                let i = r * k + d;
                row[c] = row[c] * deriv[i] + cot_logdet[r] * dlog[i];
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
        if cache.rows() != cot.rows() {
            return Err(KrnetError::StaleCache("cdf cache batch size"));
        }
        let tabs = self.all_tables(theta)?;
        let k = self.cols.len();
        let n = cot.rows();
        // First pass only needs the local derivatives.
        let mut scratch = vec![T::zero(); grad.len()];
        let zero = Batch::zeros(n, k);
        let zeros_g = vec![T::zero(); n];
        let (deriv, dlog) = self.grads(&tabs, cache, &zero, &zeros_g, &mut scratch);
        let mut neg_mu = Batch::zeros(n, k);
        for r in 0..n {
            let row = cot.row_mut(r);
            for (d, &c) in self.cols.iter().enumerate() {
                let i = r * k + d;
                let mu = (row[c] + cot_logdet[r] * dlog[i]) / deriv[i];
                row[c] = mu;
                neg_mu.set(r, d, -mu);
            }
        }
        self.grads(&tabs, cache, &neg_mu, cot_logdet, grad);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mesh_is_symmetric_and_geometric() {
        let cfg = CdfConfig::default();
        let m = cfg.mesh();
        assert_eq!(m.len(), 33);
        assert_eq!(m[0], -20.0);
        assert_eq!(m[32], 20.0);
        assert_eq!(m[16], 0.0);
        for i in 0..33 {
            assert!((m[i] + m[32 - i]).abs() < 1e-12);
        }
        let w0 = m[17] - m[16];
        let w1 = m[18] - m[17];
        assert!((w1 / w0 - 1.15).abs() < 1e-12);
    }
}
