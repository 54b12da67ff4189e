use serde::{Deserialize, Serialize};

use crate::error::{KrnetError, Result};
use crate::nn::{InitScheme, Mlp, MlpCache};
use crate::numkit::{Batch, RngState};
use crate::real::Real;

/// Scale form of an affine coupling.
///
/// `Discrete`: `z2 = y2 * (1 + alpha tanh s) + e^beta tanh t`, fixed `0 < alpha < 1`.
/// `Ode`: `z2 = y2 * (1 + dt e^a tanh s) + dt e^beta tanh t`, trainable `a`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingMode {
    Discrete { alpha: f64 },
    Ode { dt: f64 },
}

/// Affine coupling: columns `upd` are updated from columns `cond`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coupling {
    pub mlp: Mlp,
    pub cond: Vec<usize>,
    pub upd: Vec<usize>,
    pub mode: CouplingMode,
}

#[derive(Clone, Debug)]
pub struct CouplingCache<T> {
    mlp: MlpCache<T>,
    /// tanh(s), tanh(t), the updated input and the scale `w`, all `rows x upd`.
    ts: Vec<T>,
    tt: Vec<T>,
    y2: Vec<T>,
    w: Vec<T>,
}

impl<T: Real> CouplingCache<T> {
    pub fn scalars(&self) -> usize {
        self.mlp.scalars() + self.ts.len() + self.tt.len() + self.y2.len() + self.w.len()
    }
}

/// Per-column constants `(k, shift)` with `w = 1 + k tanh s`, `b = shift tanh t`.
struct Coeffs<T> {
    k: Vec<T>,
    shift: Vec<T>,
}

impl Coupling {
    pub fn new(cond: Vec<usize>, upd: Vec<usize>, hidden: usize, mode: CouplingMode) -> Result<Self> {
        if cond.is_empty() || upd.is_empty() {
            return Err(KrnetError::config("coupling", "both partitions must be nonempty"));
        }
        match mode {
            CouplingMode::Discrete { alpha } if !(alpha > 0.0 && alpha < 1.0) => {
                return Err(KrnetError::config("alpha", "must lie in (0, 1)"))
            }
            CouplingMode::Ode { dt } if !(dt > 0.0 && dt.is_finite()) => {
                return Err(KrnetError::config("dt", "must be positive"))
            }
            _ => {}
        }
        let mlp = Mlp::new(cond.len(), hidden, upd.len())?;
        Ok(Coupling {
            mlp,
            cond,
            upd,
            mode,
        })
    }

    fn n_vec(&self) -> usize {
        match self.mode {
            CouplingMode::Discrete { .. } => 1,
            CouplingMode::Ode { .. } => 2,
        }
    }

    pub fn n_params(&self) -> usize {
        self.mlp.n_params() + self.n_vec() * self.upd.len()
    }

    /// Offset of the `beta` vector inside this layer's parameter slice.
    pub fn beta_offset(&self) -> usize {
        self.mlp.n_params()
    }

    pub fn init_params<T: Real>(&self, rng: &mut RngState, scheme: InitScheme, theta: &mut [T]) {
        let n = self.mlp.n_params();
        self.mlp.init(rng, scheme, &mut theta[..n]);
        theta[n..].iter_mut().for_each(|v| *v = T::zero());
    }

    pub fn set_dt(&mut self, dt: f64) {
        if let CouplingMode::Ode { dt: d } = &mut self.mode {
            *d = dt;
        }
    }

    fn coeffs<T: Real>(&self, theta: &[T]) -> Coeffs<T> {
        let u = self.upd.len();
        let nb = self.mlp.n_params();
        let beta = &theta[nb..nb + u];
        match self.mode {
            CouplingMode::Discrete { alpha } => Coeffs {
                k: vec![T::lit(alpha); u],
                shift: beta.iter().map(|b| b.exp()).collect(),
            },
            CouplingMode::Ode { dt } => {
                let dt = T::lit(dt);
                let a = &theta[nb + u..nb + 2 * u];
                Coeffs {
                    k: a.iter().map(|a| dt * a.exp()).collect(),
                    shift: beta.iter().map(|b| dt * b.exp()).collect(),
                }
            }
        }
    }

    /// MLP output passed through tanh: returns `(tanh s, tanh t)` flattened `rows x u`.
    fn st<T: Real>(
        &self,
        theta: &[T],
        y1: &Batch<T>,
        keep: bool,
    ) -> Result<(Vec<T>, Vec<T>, Option<MlpCache<T>>)> {
        let nm = self.mlp.n_params();
        let (out, cache) = self.mlp.forward_raw(&theta[..nm], y1, keep)?;
        let u = self.upd.len();
        let rows = out.rows();
        let mut ts = Vec::with_capacity(rows * u);
        let mut tt = Vec::with_capacity(rows * u);
        for r in out.row_iter() {
            ts.extend_from_slice(&r[..u]);
            tt.extend_from_slice(&r[u..]);
        }
        T::tanh_in_place(&mut ts);
        T::tanh_in_place(&mut tt);
        Ok((ts, tt, cache))
    }

    fn scale_error<T: Real>(w: T) -> KrnetError {
        KrnetError::Singular {
            context: "coupling scale 1 + k tanh(s)".into(),
            value: w.as_f64(),
        }
    }

    pub fn forward<T: Real>(
        &self,
        theta: &[T],
        x: &mut Batch<T>,
        logdet: &mut [T],
        keep: bool,
    ) -> Result<Option<CouplingCache<T>>> {
        let y1 = x.gather_cols(&self.cond);
        let (ts, tt, mlp) = self.st(theta, &y1, keep)?;
        let c = self.coeffs(theta);
        let u = self.upd.len();
        let mut y2s = Vec::new();
        let mut ws = Vec::new();
        if keep {
            y2s.reserve(ts.len());
            ws.reserve(ts.len());
        }
        for r in 0..x.rows() {
            let row = x.row_mut(r);
            let mut ld = T::zero();
            for (j, &col) in self.upd.iter().enumerate() {
                let idx = r * u + j;
                let w = T::one() + c.k[j] * ts[idx];
                if !(w > T::zero()) {
                    return Err(Self::scale_error(w));
                }
                let y2 = row[col];
                row[col] = y2 * w + c.shift[j] * tt[idx];
                ld += w.ln();
                if keep {
                    y2s.push(y2);
                    ws.push(w);
                }
            }
            logdet[r] += ld;
        }
        Ok(mlp.map(|mlp| CouplingCache {
            mlp,
            ts,
            tt,
            y2: y2s,
            w: ws,
        }))
    }

    /// Exact inverse in place. With `logdet`, adds the forward log-determinant
    /// at the reconstructed point. With `keep`, returns the forward cache at
    /// that point (one network evaluation serves both).
    pub fn inverse<T: Real>(
        &self,
        theta: &[T],
        z: &mut Batch<T>,
        mut logdet: Option<&mut [T]>,
        keep: bool,
    ) -> Result<Option<CouplingCache<T>>> {
        let y1 = z.gather_cols(&self.cond);
        let (ts, tt, mlp) = self.st(theta, &y1, keep)?;
        let c = self.coeffs(theta);
        let u = self.upd.len();
        let mut y2s = Vec::new();
        let mut ws = Vec::new();
        for r in 0..z.rows() {
            let row = z.row_mut(r);
            let mut ld = T::zero();
            for (j, &col) in self.upd.iter().enumerate() {
                let idx = r * u + j;
                let w = T::one() + c.k[j] * ts[idx];
                if !(w > T::zero()) {
                    return Err(Self::scale_error(w));
                }
                let y2 = (row[col] - c.shift[j] * tt[idx]) / w;
                row[col] = y2;
                ld += w.ln();
                if keep {
                    y2s.push(y2);
                    ws.push(w);
                }
            }
            if let Some(l) = logdet.as_deref_mut() {
                l[r] += ld;
            }
        }
        Ok(mlp.map(|mlp| CouplingCache {
            mlp,
            ts,
            tt,
            y2: y2s,
            w: ws,
        }))
    }

    /// Parameter gradients for cotangent `c2` on the updated output and
    /// `cg` on the log-determinant; returns the cotangent flowing into the
    /// conditioning columns through the network (the `w`-diagonal part of
    /// the updated columns is left to the caller).
    fn vjp_core<T: Real>(
        &self,
        theta: &[T],
        cache: &CouplingCache<T>,
        c2: &[T],
        cg: &[T],
        grad: &mut [T],
    ) -> Result<Batch<T>> {
        let u = self.upd.len();
        let rows = cache.mlp.rows();
        let c = self.coeffs(theta);
        let nm = self.mlp.n_params();
        let ode = matches!(self.mode, CouplingMode::Ode { .. });
        let mut cot = Vec::with_capacity(rows * 2 * u);
        let mut g_beta = vec![T::zero(); u];
        let mut g_alpha = vec![T::zero(); u];
        let one = T::one();
        for r in 0..rows {
            let base = r * u;
            for j in 0..u {
                let i = base + j;
                let a = c2[i] * cache.y2[i] + cg[r] / cache.w[i];
                let ts = cache.ts[i];
                cot.push(a * c.k[j] * (one - ts * ts));
                if ode {
                    g_alpha[j] += a * c.k[j] * ts;
                }
            }
            for j in 0..u {
                let i = base + j;
                let tt = cache.tt[i];
                let sh = c2[i] * c.shift[j];
                cot.push(sh * (one - tt * tt));
                g_beta[j] += sh * tt;
            }
        }
        let cot = Batch::new(rows, 2 * u, cot)?;
        let (g_mlp, g_rest) = grad.split_at_mut(nm);
        let gx = self.mlp.vjp_raw(&theta[..nm], &cache.mlp, &cot, g_mlp)?;
        for j in 0..u {
            g_rest[j] += g_beta[j];
            if ode {
                g_rest[u + j] += g_alpha[j];
            }
        }
        Ok(gx)
    }

    pub fn vjp<T: Real>(
        &self,
        theta: &[T],
        cache: &CouplingCache<T>,
        cot: &mut Batch<T>,
        cot_logdet: &[T],
        grad: &mut [T],
    ) -> Result<()> {
        let c2 = cot.gather_cols(&self.upd).into_vec();
        let gx = self.vjp_core(theta, cache, &c2, cot_logdet, grad)?;
        let u = self.upd.len();
        for r in 0..cot.rows() {
            let row = cot.row_mut(r);
            for (j, &col) in self.upd.iter().enumerate() {
                row[col] = c2[r * u + j] * cache.w[r * u + j];
            }
        }
        cot.scatter_add_cols(&self.cond, &gx);
        Ok(())
    }

    /// Reverse pass through the inverse map: `cot` enters as the cotangent of
    /// the reconstructed input and leaves as the cotangent of the output.
    pub fn inverse_vjp<T: Real>(
        &self,
        theta: &[T],
        cache: &CouplingCache<T>,
        cot: &mut Batch<T>,
        cot_logdet: &[T],
        grad: &mut [T],
    ) -> Result<()> {
        let u = self.upd.len();
        let cx2 = cot.gather_cols(&self.upd).into_vec();
        let mu: Vec<T> = cx2.iter().zip(&cache.w).map(|(&c, &w)| c / w).collect();
        let neg: Vec<T> = mu.iter().map(|&m| -m).collect();
        let gx = self.vjp_core(theta, cache, &neg, cot_logdet, grad)?;
        for r in 0..cot.rows() {
            let row = cot.row_mut(r);
            for (j, &col) in self.upd.iter().enumerate() {
                row[col] = mu[r * u + j];
            }
        }
        cot.scatter_add_cols(&self.cond, &gx);
        Ok(())
    }
}
