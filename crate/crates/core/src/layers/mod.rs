//! Invertible building blocks. Every layer acts in place on the full state
//! batch (`[gamma | y]` columns) and touches only the columns it owns, so
//! frozen columns pass through bit-identically.

mod cdf;
mod coupling;
mod logit;
mod rotation;
mod scale_bias;

pub use cdf::{CdfConfig, CdfLayer};
pub use coupling::{Coupling, CouplingCache, CouplingMode};
pub use logit::Logit;
pub use rotation::{Rotation, RotationCache, PIVOT_FLOOR};
pub use scale_bias::ScaleBias;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::InitScheme;
use crate::numkit::{Batch, RngState};
use crate::real::Real;

/// Which state columns are still being transformed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveMask {
    mask: Vec<bool>,
}

impl ActiveMask {
    pub fn all(dims: usize) -> Self {
        ActiveMask {
            mask: vec![true; dims],
        }
    }

    pub fn from_bools(mask: Vec<bool>) -> Self {
        ActiveMask { mask }
    }

    pub fn from_indices(dims: usize, active: &[usize]) -> Self {
        let mut mask = vec![false; dims];
        for &i in active {
            mask[i] = true;
        }
        ActiveMask { mask }
    }

    pub fn dims(&self) -> usize {
        self.mask.len()
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    pub fn is_active(&self, i: usize) -> bool {
        self.mask[i]
    }

    pub fn active(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| self.mask[i]).collect()
    }

    pub fn frozen(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| !self.mask[i]).collect()
    }

    /// Splits `x` into `(active, frozen)` column groups, original order kept.
    pub fn split<T: Real>(&self, x: &Batch<T>) -> (Batch<T>, Batch<T>) {
        (x.gather_cols(&self.active()), x.gather_cols(&self.frozen()))
    }

    /// Inverse of [`ActiveMask::split`].
    pub fn merge<T: Real>(&self, active: &Batch<T>, frozen: &Batch<T>) -> Batch<T> {
        let mut out = Batch::zeros(active.rows(), self.dims());
        out.scatter_cols(&self.active(), active);
        out.scatter_cols(&self.frozen(), frozen);
        out
    }
}

/// Deactivates (or, at an ODE step boundary, reactivates) columns. The map
/// itself is the identity with zero log-determinant; the masks record the
/// schedule that later layers were built against.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Squeeze {
    pub before: ActiveMask,
    pub after: ActiveMask,
}

impl Squeeze {
    pub fn newly_frozen(&self) -> Vec<usize> {
        (0..self.before.dims())
            .filter(|&i| self.before.is_active(i) && !self.after.is_active(i))
            .collect()
    }

    pub fn is_reactivation(&self) -> bool {
        self.after.count() > self.before.count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Rotation(Rotation),
    ScaleBias(ScaleBias),
    Coupling(Coupling),
    Squeeze(Squeeze),
    Cdf(CdfLayer),
    Logit(Logit),
}

/// Activations a layer needs for its reverse pass.
#[derive(Clone, Debug)]
pub enum LayerCache<T> {
    Coupling(CouplingCache<T>),
    Rotation(RotationCache<T>),
    /// Input columns of an element-wise layer.
    Input(Batch<T>),
    Empty,
}

impl<T: Real> LayerCache<T> {
    /// Approximate retained size in scalars, for memory accounting.
    pub fn size_hint(&self) -> usize {
        match self {
            LayerCache::Coupling(c) => c.scalars(),
            LayerCache::Rotation(c) => c.scalars(),
            LayerCache::Input(b) => b.as_slice().len(),
            LayerCache::Empty => 0,
        }
    }
}

fn wrong_cache() -> crate::error::KrnetError {
    crate::error::KrnetError::StaleCache("cache belongs to a different layer type")
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Rotation(_) => "rotation",
            Layer::ScaleBias(_) => "scale_bias",
            Layer::Coupling(_) => "coupling",
            Layer::Squeeze(_) => "squeeze",
            Layer::Cdf(_) => "cdf",
            Layer::Logit(_) => "logit",
        }
    }

    pub fn n_params(&self) -> usize {
        match self {
            Layer::Rotation(l) => l.n_params(),
            Layer::ScaleBias(l) => l.n_params(),
            Layer::Coupling(l) => l.n_params(),
            Layer::Cdf(l) => l.n_params(),
            Layer::Squeeze(_) | Layer::Logit(_) => 0,
        }
    }

    pub fn init_params<T: Real>(&self, rng: &mut RngState, scheme: InitScheme, theta: &mut [T]) {
        match self {
            Layer::Rotation(l) => l.init_params(theta),
            Layer::ScaleBias(l) => l.init_params(theta),
            Layer::Coupling(l) => l.init_params(rng, scheme, theta),
            Layer::Cdf(l) => l.init_params(theta),
            Layer::Squeeze(_) | Layer::Logit(_) => {}
        }
    }

    /// Columns whose values this layer may change.
    pub fn touched_cols(&self) -> Vec<usize> {
        match self {
            Layer::Rotation(l) => l.cols.clone(),
            Layer::ScaleBias(l) => l.cols.clone(),
            Layer::Coupling(l) => l.upd.clone(),
            Layer::Cdf(l) => l.cols.clone(),
            Layer::Logit(l) => l.cols.clone(),
            Layer::Squeeze(_) => Vec::new(),
        }
    }

    /// In-place forward map; adds the per-sample log-determinant to `logdet`.
    pub fn forward<T: Real>(
        &self,
        theta: &[T],
        x: &mut Batch<T>,
        logdet: &mut [T],
        keep: bool,
    ) -> Result<LayerCache<T>> {
        let c = match self {
            Layer::Rotation(l) => l.forward(theta, x, logdet, keep)?.map(LayerCache::Rotation),
            Layer::ScaleBias(l) => l.forward(theta, x, logdet, keep)?.map(LayerCache::Input),
            Layer::Coupling(l) => l.forward(theta, x, logdet, keep)?.map(LayerCache::Coupling),
            Layer::Cdf(l) => l.forward(theta, x, logdet, keep)?.map(LayerCache::Input),
            Layer::Logit(l) => l.forward(x, logdet, keep)?.map(LayerCache::Input),
            Layer::Squeeze(_) => None,
        };
        Ok(c.unwrap_or(LayerCache::Empty))
    }

    /// In-place exact inverse. With `logdet`, adds the forward log-determinant
    /// evaluated at the reconstructed input; with `keep`, also returns the
    /// forward cache at that input.
    pub fn inverse<T: Real>(
        &self,
        theta: &[T],
        z: &mut Batch<T>,
        logdet: Option<&mut [T]>,
        keep: bool,
    ) -> Result<LayerCache<T>> {
        let c = match self {
            Layer::Rotation(l) => l.inverse(theta, z, logdet, keep)?.map(LayerCache::Rotation),
            Layer::ScaleBias(l) => l.inverse(theta, z, logdet, keep)?.map(LayerCache::Input),
            Layer::Coupling(l) => l.inverse(theta, z, logdet, keep)?.map(LayerCache::Coupling),
            Layer::Cdf(l) => l.inverse(theta, z, logdet, keep)?.map(LayerCache::Input),
            Layer::Logit(l) => l.inverse(z, logdet, keep)?.map(LayerCache::Input),
            Layer::Squeeze(_) => None,
        };
        Ok(c.unwrap_or(LayerCache::Empty))
    }

    /// Reverse pass: `cot` holds the output cotangent on entry and the input
    /// cotangent on exit; parameter gradients are added into `grad`.
    pub fn vjp<T: Real>(
        &self,
        theta: &[T],
        cache: &LayerCache<T>,
        cot: &mut Batch<T>,
        cot_logdet: &[T],
        grad: &mut [T],
    ) -> Result<()> {
        match (self, cache) {
            (Layer::Rotation(l), LayerCache::Rotation(c)) => l.vjp(theta, c, cot, cot_logdet, grad),
            (Layer::ScaleBias(l), LayerCache::Input(c)) => l.vjp(theta, c, cot, cot_logdet, grad),
            (Layer::Coupling(l), LayerCache::Coupling(c)) => l.vjp(theta, c, cot, cot_logdet, grad),
            (Layer::Cdf(l), LayerCache::Input(c)) => l.vjp(theta, c, cot, cot_logdet, grad),
            (Layer::Logit(l), LayerCache::Input(c)) => l.vjp(c, cot, cot_logdet),
            (Layer::Squeeze(_), _) => Ok(()),
            _ => Err(wrong_cache()),
        }
    }

    /// Reverse pass through the inverse map `x = F^{-1}(z)` for the scalar
    /// `<cot, x> + <cot_logdet, logdet F(x)>`: `cot` enters as the cotangent
    /// of `x` and leaves as the cotangent of `z`.
    pub fn inverse_vjp<T: Real>(
        &self,
        theta: &[T],
        cache: &LayerCache<T>,
        cot: &mut Batch<T>,
        cot_logdet: &[T],
        grad: &mut [T],
    ) -> Result<()> {
        match (self, cache) {
            (Layer::Rotation(l), LayerCache::Rotation(c)) => {
                l.inverse_vjp(theta, c, cot, cot_logdet, grad)
            }
            (Layer::ScaleBias(l), LayerCache::Input(c)) => {
                l.inverse_vjp(theta, c, cot, cot_logdet, grad)
            }
            (Layer::Coupling(l), LayerCache::Coupling(c)) => {
                l.inverse_vjp(theta, c, cot, cot_logdet, grad)
            }
            (Layer::Cdf(l), LayerCache::Input(c)) => l.inverse_vjp(theta, c, cot, cot_logdet, grad),
            (Layer::Logit(l), LayerCache::Input(c)) => l.inverse_vjp(c, cot, cot_logdet),
            (Layer::Squeeze(_), _) => Ok(()),
            _ => Err(wrong_cache()),
        }
    }
}
