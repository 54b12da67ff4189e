//! Exact parameter gradients of the flow losses, by cached reverse
//! accumulation or by the adjoint recursion that rebuilds every layer input
//! from its output through the exact inverse, plus a finite-difference audit.

use serde::{Deserialize, Serialize};

use crate::error::{KrnetError, Result};
use crate::flow::FlowModel;
use crate::layers::LayerCache;
use crate::numkit::{std_normal_logpdf, streams, Batch, RngState};
use crate::real::Real;
use crate::targets::LogDensity;

/// Which reverse pass computes estimation gradients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradPath {
    #[default]
    Adjoint,
    Backprop,
}

impl std::str::FromStr for GradPath {
    type Err = KrnetError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adjoint" => Ok(GradPath::Adjoint),
            "backprop" => Ok(GradPath::Backprop),
            _ => Err(KrnetError::config("grad_path", format!("expected adjoint or backprop, got `{s}`"))),
        }
    }
}

/// Retained-memory accounting of one gradient evaluation, in scalars.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryStats {
    /// Layer caches alive when the forward pass finished.
    pub caches_after_forward: usize,
    /// Scalars held by those caches.
    pub cache_scalars_after_forward: usize,
    /// Largest single-layer cache held at any point of the reverse pass.
    pub peak_layer_cache: usize,
    /// Size of the state (and cotangent) batch.
    pub state_scalars: usize,
}

/// Loss, flat parameter gradient aligned with the model registry, and the
/// gradient with respect to the input state batch.
#[derive(Clone, Debug)]
pub struct GradientBundle<T> {
    pub loss: T,
    pub grad: Vec<T>,
    pub input_grad: Batch<T>,
    pub memory: MemoryStats,
}

impl<T: Real> GradientBundle<T> {
    /// Gradient entries owned by layer `i` of `model`.
    pub fn layer_slice<'a>(&'a self, model: &FlowModel<T>, i: usize) -> &'a [T] {
        &self.grad[model.param_range(i)]
    }

    pub fn max_abs(&self) -> T {
        self.grad.iter().fold(T::zero(), |m, g| m.max(g.abs()))
    }
}

/// `max |a - b| / (max |b| + 1e-12)`, the path-agreement measure.
pub fn relative_discrepancy<T: Real>(a: &[T], b: &[T]) -> f64 {
    let num = a
        .iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((*x - *y).abs().as_f64()));
    let den = b.iter().fold(0.0f64, |m, y| m.max(y.abs().as_f64()));
    num / (den + 1e-12)
}

/// Mean negative log-density of the state batch `x` and its per-sample
/// log-density. Requires a nonempty batch.
fn nll_from<T: Real>(z: &Batch<T>, ld: &[T]) -> Result<T> {
    let n = z.rows();
    let lp = std_normal_logpdf(z);
    let sum = lp.iter().zip(ld).fold(T::zero(), |s, (&a, &b)| s + a + b);
    let loss = -sum / T::from_usize(n).unwrap();
    if !loss.is_finite() {
        return Err(KrnetError::NonFinite {
            context: "estimation loss".into(),
        });
    }
    Ok(loss)
}

fn state_batch<T: Real>(model: &FlowModel<T>, y: &Batch<T>, gamma: Option<&Batch<T>>) -> Result<Batch<T>> {
    if y.rows() == 0 {
        return Err(KrnetError::EmptyInput("gradient batch"));
    }
    model.assemble(y, gamma)
}

/// Estimation loss `-(1/N) sum log p(x)` of a state batch, without gradients.
pub fn estimation_loss_value<T: Real>(model: &FlowModel<T>, x: &Batch<T>) -> Result<T> {
    if x.rows() == 0 {
        return Err(KrnetError::EmptyInput("loss batch"));
    }
    let (z, ld) = model.forward(x)?;
    nll_from(&z, &ld)
}

fn initial_cot<T: Real>(z: &Batch<T>) -> (Batch<T>, Vec<T>) {
    let inv_n = T::one() / T::from_usize(z.rows()).unwrap();
    let mut cot = z.clone();
    cot.scale(inv_n);
    (cot, vec![-inv_n; z.rows()])
}

/// Reverse accumulation with every layer's forward cache kept.
pub fn backprop_grad<T: Real>(
    model: &FlowModel<T>,
    y: &Batch<T>,
    gamma: Option<&Batch<T>>,
) -> Result<GradientBundle<T>> {
    let x = state_batch(model, y, gamma)?;
    backprop_grad_state(model, &x)
}

pub fn backprop_grad_state<T: Real>(model: &FlowModel<T>, x: &Batch<T>) -> Result<GradientBundle<T>> {
    if x.rows() == 0 {
        return Err(KrnetError::EmptyInput("gradient batch"));
    }
    let mut z = x.clone();
    let mut ld = vec![T::zero(); x.rows()];
    let mut caches = Vec::with_capacity(model.n_layers());
    for i in 0..model.n_layers() {
        caches.push(model.layer_forward(i, &mut z, &mut ld, true)?);
    }
    let loss = nll_from(&z, &ld)?;
    let mut mem = MemoryStats {
        caches_after_forward: caches.iter().filter(|c| !matches!(c, LayerCache::Empty)).count(),
        cache_scalars_after_forward: caches.iter().map(LayerCache::size_hint).sum(),
        peak_layer_cache: 0,
        state_scalars: z.as_slice().len(),
    };
    mem.peak_layer_cache = caches.iter().map(LayerCache::size_hint).max().unwrap_or(0);
    let (mut cot, cg) = initial_cot(&z);
    let mut grad = vec![T::zero(); model.n_params()];
    for i in (0..model.n_layers()).rev() {
        let r = model.param_range(i);
        model.layers()[i]
            .vjp(model.layer_params(i), &caches[i], &mut cot, &cg, &mut grad[r])
            .map_err(|e| e.at_layer(i, model.layers()[i].kind()))?;
    }
    finish(loss, grad, cot, mem)
}

/// Discrete adjoint: the forward pass keeps only the latent batch; the
/// reverse pass rebuilds each layer input by exact inversion, re-linearizes
/// that layer and propagates the cotangent.
pub fn adjoint_grad<T: Real>(
    model: &FlowModel<T>,
    y: &Batch<T>,
    gamma: Option<&Batch<T>>,
) -> Result<GradientBundle<T>> {
    let x = state_batch(model, y, gamma)?;
    adjoint_grad_state(model, &x)
}

pub fn adjoint_grad_state<T: Real>(model: &FlowModel<T>, x: &Batch<T>) -> Result<GradientBundle<T>> {
    if x.rows() == 0 {
        return Err(KrnetError::EmptyInput("gradient batch"));
    }
    let (z, ld) = model.forward(x)?;
    let loss = nll_from(&z, &ld)?;
    let mut mem = MemoryStats {
        caches_after_forward: 0,
        cache_scalars_after_forward: 0,
        peak_layer_cache: 0,
        state_scalars: z.as_slice().len(),
    };
    let (mut cot, cg) = initial_cot(&z);
    let mut state = z;
    let mut grad = vec![T::zero(); model.n_params()];
    for i in (0..model.n_layers()).rev() {
        let cache = model.layer_inverse(i, &mut state, None, true)?;
        mem.peak_layer_cache = mem.peak_layer_cache.max(cache.size_hint());
        let r = model.param_range(i);
        model.layers()[i]
            .vjp(model.layer_params(i), &cache, &mut cot, &cg, &mut grad[r])
            .map_err(|e| e.at_layer(i, model.layers()[i].kind()))?;
    }
    finish(loss, grad, cot, mem)
}

/// Estimation gradient through the chosen path.
pub fn estimation_grad<T: Real>(model: &FlowModel<T>, x: &Batch<T>, path: GradPath) -> Result<GradientBundle<T>> {
    match path {
        GradPath::Adjoint => adjoint_grad_state(model, x),
        GradPath::Backprop => backprop_grad_state(model, x),
    }
}

fn finish<T: Real>(loss: T, grad: Vec<T>, input_grad: Batch<T>, memory: MemoryStats) -> Result<GradientBundle<T>> {
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(KrnetError::NonFinite {
            context: "parameter gradient".into(),
        });
    }
    Ok(GradientBundle {
        loss,
        grad,
        input_grad,
        memory,
    })
}

/// Reverse-KL loss against `target` (times `p_gamma` for augmented models)
/// for fixed prior noise `z`, without gradients. Returns `(loss, x)`.
pub fn approximation_loss_value<T: Real>(
    model: &FlowModel<T>,
    z: &Batch<T>,
    target: &dyn LogDensity,
) -> Result<(T, Batch<T>)> {
    let (x, ld) = model.inverse(z)?;
    let (loss, _) = reverse_kl_terms(model, z, &x, &ld, target, false)?;
    Ok((loss, x))
}

/// Per-sample `log q(x) - log p_target(y) - log p_gamma(gamma)` averaged,
/// plus (optionally) the cotangent of the loss with respect to `x`.
fn reverse_kl_terms<T: Real>(
    model: &FlowModel<T>,
    z: &Batch<T>,
    x: &Batch<T>,
    ld: &[T],
    target: &dyn LogDensity,
    want_cot: bool,
) -> Result<(T, Option<Batch<T>>)> {
    let n = z.rows();
    if n == 0 {
        return Err(KrnetError::EmptyInput("approximation batch"));
    }
    let (y, gamma) = model.split(x);
    let y64 = y.to_f64();
    let lt = target.log_density(&y64)?;
    if lt.iter().all(|&v| v <= ZERO_DENSITY) {
        return Err(KrnetError::NonFinite {
            context: "target density is zero at every model sample".into(),
        });
    }
    let lpz = std_normal_logpdf(z);
    let lpg = gamma.as_ref().map(std_normal_logpdf);
    let mut sum = 0.0f64;
    for r in 0..n {
        let mut v = lpz[r].as_f64() + ld[r].as_f64() - lt[r];
        if let Some(g) = &lpg {
            v -= g[r].as_f64();
        }
        sum += v;
    }
    let loss = T::lit(sum / n as f64);
    if !loss.is_finite() {
        return Err(KrnetError::NonFinite {
            context: "approximation loss".into(),
        });
    }
    if !want_cot {
        return Ok((loss, None));
    }
    let gt = target.grad_log_density(&y64)?;
    let m = model.m_aug();
    let inv_n = 1.0 / n as f64;
    let mut cot = Batch::zeros(n, model.dims());
    for r in 0..n {
        let row = cot.row_mut(r);
        for j in 0..m {
            row[j] = x.get(r, j) * T::lit(inv_n);
        }
        for j in 0..model.n_data() {
            row[m + j] = T::lit(-gt.get(r, j) * inv_n);
        }
    }
    Ok((loss, Some(cot)))
}

/// Log-density values at or below this mark zero-density regions.
pub const ZERO_DENSITY: f64 = -1e29;

/// Reverse-KL gradient by the reparameterization path: `x = F^{-1}(z)` with
/// fixed noise `z`, differentiated through the inverse stack.
pub fn approximation_grad<T: Real>(
    model: &FlowModel<T>,
    z: &Batch<T>,
    target: &dyn LogDensity,
) -> Result<GradientBundle<T>> {
    z.expect_cols(model.dims(), "latent batch")?;
    let nl = model.n_layers();
    let mut x = z.clone();
    let mut ld = vec![T::zero(); z.rows()];
    let mut caches: Vec<LayerCache<T>> = Vec::with_capacity(nl);
    for i in (0..nl).rev() {
        caches.push(model.layer_inverse(i, &mut x, Some(&mut ld), true)?);
    }
    caches.reverse();
    let (loss, cot) = reverse_kl_terms(model, z, &x, &ld, target, true)?;
    let mut cot = cot.expect("cotangent requested");
    let cg = vec![T::one() / T::from_usize(z.rows()).unwrap(); z.rows()];
    let mem = MemoryStats {
        caches_after_forward: caches.iter().filter(|c| !matches!(c, LayerCache::Empty)).count(),
        cache_scalars_after_forward: caches.iter().map(LayerCache::size_hint).sum(),
        peak_layer_cache: caches.iter().map(LayerCache::size_hint).max().unwrap_or(0),
        state_scalars: x.as_slice().len(),
    };
    let mut grad = vec![T::zero(); model.n_params()];
    for (i, cache) in caches.iter().enumerate() {
        let r = model.param_range(i);
        model.layers()[i]
            .inverse_vjp(model.layer_params(i), cache, &mut cot, &cg, &mut grad[r])
            .map_err(|e| e.at_layer(i, model.layers()[i].kind()))?;
    }
    finish(loss, grad, cot, mem)
}

/// Outcome of a finite-difference audit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub n_probes: usize,
    /// Parameter index with the worst error, if any probe ran.
    pub worst_index: Option<usize>,
    /// Set when no probe ran, so the zero error is vacuous.
    pub warning: Option<String>,
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Components below this fraction of the largest gradient entry are judged
/// at that scale: near saddles some entries are exactly zero and the
/// difference quotient there is pure roundoff, so a bare relative error
/// would be meaningless.
pub const REL_FLOOR_FRACTION: f64 = 1e-3;

/// Central differences on `n_probes` randomly chosen parameters (drawn from
/// the `PROBES` substream of `rng`) against the adjoint gradient of the
/// estimation loss on the state batch `x`.
pub fn grad_check<T: Real>(
    model: &FlowModel<T>,
    x: &Batch<T>,
    eps: f64,
    n_probes: usize,
    rng: &RngState,
) -> Result<GradCheckReport> {
    if !(eps > 0.0) {
        return Err(KrnetError::config("eps", "must be positive"));
    }
    let g = adjoint_grad_state(model, x)?;
    let mut probe = model.clone();
    grad_check_with(model, &g.grad, eps, n_probes, rng, |p: &[T]| {
        probe.set_params(p)?;
        Ok(estimation_loss_value(&probe, x)?.as_f64())
    })
}

/// Central differences of an arbitrary scalar function of the parameters.
pub fn grad_check_with<T: Real>(
    model: &FlowModel<T>,
    grad: &[T],
    eps: f64,
    n_probes: usize,
    rng: &RngState,
    mut loss: impl FnMut(&[T]) -> Result<f64>,
) -> Result<GradCheckReport> {
    if n_probes == 0 {
        return Ok(GradCheckReport {
            max_rel_error: 0.0,
            n_probes: 0,
            worst_index: None,
            warning: Some("no parameters probed".into()),
        });
    }
    let np = model.n_params();
    let mut idx: Vec<usize> = model
        .owning_layers()
        .into_iter()
        .flat_map(|i| model.param_range(i))
        .collect();
    idx.sort_unstable();
    idx.dedup();
    let mut r = rng.substream(streams::PROBES);
    r.shuffle(&mut idx);
    idx.truncate(n_probes.min(np));
    let gmax = grad.iter().fold(0.0f64, |m, g| m.max(g.as_f64().abs()));
    let floor = (REL_FLOOR_FRACTION * gmax).max(1e-6);
    let mut p = model.params().to_vec();
    let mut worst = (0.0f64, None);
    for &k in &idx {
        let orig = p[k];
        p[k] = orig + T::lit(eps);
        let up = loss(&p)?;
        p[k] = orig - T::lit(eps);
        let dn = loss(&p)?;
        p[k] = orig;
        let fd = (up - dn) / (2.0 * eps);
        let e = rel_error(grad[k].as_f64(), fd, floor);
        if e > worst.0 || worst.1.is_none() {
            worst = (e, Some(k));
        }
    }
    let warning = (idx.len() < n_probes).then(|| format!("only {} parameters available", idx.len()));
    Ok(GradCheckReport {
        max_rel_error: worst.0,
        n_probes: idx.len(),
        worst_index: worst.1,
        warning,
    })
}
