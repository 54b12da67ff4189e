//! Assembly of layers into KRnet, augmented KRnet and time-stepped models,
//! with joint and marginal densities, sampling and a parameter audit.

mod config;
mod count;
mod ode;

pub use config::{FlowConfig, LogitConfig, OdeConfig, Variant};
pub use count::{closed_form_pair, rotation_closed_form, ParamCount, ParamPrediction};
pub use ode::{split_euler, OdeProbeRow};

use serde::{Deserialize, Serialize};

use crate::error::{KrnetError, Result};
use crate::layers::{ActiveMask, CdfLayer, Coupling, CouplingMode, Layer, LayerCache, Logit, Rotation, ScaleBias, Squeeze};
use crate::nn::InitScheme;
use crate::numkit::{logsumexp, std_normal_logpdf, streams, Batch, RngState};
use crate::real::Real;

/// Position of a layer within the outer structure.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSite {
    /// Time step (always 0 for discrete models).
    pub step: usize,
    /// 1-based outer stage; 0 for preprocessing and the final CDF layer.
    pub stage: usize,
}

/// Marginal recovery of `p_Y` from an augmented model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginalMethod {
    /// Average of `p(y, gamma) / p_gamma(gamma)` over `n` draws of `gamma`.
    Mc(usize),
    /// Joint density at `gamma = 0` rescaled by `(2 pi)^{m/2}`.
    GammaStar,
}

/// Ordered layer stack with a flat parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowModel<T> {
    config: FlowConfig,
    layers: Vec<Layer>,
    offsets: Vec<usize>,
    sites: Vec<LayerSite>,
    params: Vec<T>,
}

struct Builder {
    layers: Vec<Layer>,
    sites: Vec<LayerSite>,
    site: LayerSite,
}

impl Builder {
    fn push(&mut self, l: Layer) {
        self.layers.push(l);
        self.sites.push(self.site);
    }
}

impl<T: Real> FlowModel<T> {
    /// Builds the layer stack and draws initial parameters from the `INIT`
    /// substream of `rng`. Every coupling starts as the identity.
    pub fn build(cfg: &FlowConfig, rng: &RngState) -> Result<Self> {
        Self::build_with(cfg, rng, InitScheme::GlorotUniform)
    }

    pub fn build_with(cfg: &FlowConfig, rng: &RngState, scheme: InitScheme) -> Result<Self> {
        cfg.validate()?;
        let m = cfg.m_aug;
        let dims = cfg.total_dims();
        let kb = cfg.k();
        let gamma_cols: Vec<usize> = (0..m).collect();
        let mut block_cols = Vec::with_capacity(kb);
        let mut off = m;
        for &b in &cfg.block_sizes {
            block_cols.push((off..off + b).collect::<Vec<usize>>());
            off += b;
        }
        let data_cols: Vec<usize> = (m..dims).collect();
        let mut b = Builder {
            layers: Vec::new(),
            sites: Vec::new(),
            site: LayerSite { step: 0, stage: 0 },
        };
        if let Some(lg) = &cfg.logit {
            b.push(Layer::Logit(Logit::new(data_cols.clone(), lg.scale, lg.lo, lg.hi)?));
        }
        let n_steps = cfg.ode.map_or(1, |o| o.n_steps);
        let mode = match cfg.ode {
            Some(o) => CouplingMode::Ode { dt: o.dt },
            None => CouplingMode::Discrete { alpha: cfg.alpha },
        };
        let stages = cfg.n_stages();
        let mut active = ActiveMask::all(dims);
        for step in 0..n_steps {
            if step > 0 && active.count() < dims {
                b.site = LayerSite { step, stage: 0 };
                let after = ActiveMask::all(dims);
                b.push(Layer::Squeeze(Squeeze {
                    before: active.clone(),
                    after: after.clone(),
                }));
                active = after;
            }
            for k in 1..=stages {
                b.site = LayerSite { step, stage: k };
                let n_active_blocks = kb + 1 - k;
                let act_data: Vec<usize> =
                    block_cols[..n_active_blocks].iter().flatten().copied().collect();
                let mut act_all = gamma_cols.clone();
                act_all.extend_from_slice(&act_data);
                let (p, q) = if m > 0 {
                    (gamma_cols.clone(), act_data.clone())
                } else {
                    let last = block_cols[n_active_blocks - 1].clone();
                    let rest: Vec<usize> =
                        block_cols[..n_active_blocks - 1].iter().flatten().copied().collect();
                    (last, rest)
                };
                let h = cfg.hidden_at(k);
                if cfg.use_rotation && k < kb && act_data.len() >= 2 {
                    b.push(Layer::Rotation(Rotation::new(act_data.clone())));
                }
                for i in 0..cfg.n_inner {
                    if cfg.ode.is_none() {
                        b.push(Layer::ScaleBias(ScaleBias::new(act_all.clone())));
                    }
                    let (cond, upd) = if i % 2 == 0 { (&q, &p) } else { (&p, &q) };
                    let mut c = Coupling::new(cond.clone(), upd.clone(), h, mode)?;
                    c.mlp = c.mlp.with_activation(cfg.activation);
                    b.push(Layer::Coupling(c));
                }
                if k < kb {
                    let frozen = &block_cols[n_active_blocks - 1];
                    let mut after = active.clone();
                    let mut mask: Vec<bool> = (0..dims).map(|i| after.is_active(i)).collect();
                    for &c in frozen {
                        mask[c] = false;
                    }
                    after = ActiveMask::from_bools(mask);
                    b.push(Layer::Squeeze(Squeeze {
                        before: active.clone(),
                        after: after.clone(),
                    }));
                    active = after;
                }
            }
        }
        if cfg.use_cdf {
            b.site = LayerSite { step: 0, stage: 0 };
            let cols = if cfg.cdf_on_aug {
                (0..dims).collect()
            } else {
                data_cols.clone()
            };
            b.push(Layer::Cdf(CdfLayer::new(cols, cfg.cdf)?));
        }

        // Parameter layout; tied time steps reuse the offsets of step 0.
        let tied = cfg.ode.is_some_and(|o| o.tied);
        let mut offsets = Vec::with_capacity(b.layers.len());
        let mut total = 0usize;
        let per_step: usize = b
            .layers
            .iter()
            .zip(&b.sites)
            .filter(|(_, s)| s.step == 0)
            .count();
        let first_logit = usize::from(cfg.logit.is_some());
        let mut step0_offsets = Vec::new();
        for (idx, (layer, site)) in b.layers.iter().zip(&b.sites).enumerate() {
            if tied && site.step > 0 && !matches!(layer, Layer::Cdf(_)) {
                // Position within the step, skipping the reactivation squeeze.
                let within = step_position(&b.layers, &b.sites, idx);
                offsets.push(step0_offsets[within]);
                continue;
            }
            offsets.push(total);
            if site.step == 0 && idx >= first_logit && idx < per_step {
                step0_offsets.push(total);
            }
            total += layer.n_params();
        }
        let mut params = vec![T::zero(); total];
        let mut init_rng = rng.substream(streams::INIT);
        for (layer, &o) in b.layers.iter().zip(&offsets) {
            let n = layer.n_params();
            layer.init_params(&mut init_rng, scheme, &mut params[o..o + n]);
        }
        Ok(FlowModel {
            config: cfg.clone(),
            layers: b.layers,
            offsets,
            sites: b.sites,
            params,
        })
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn sites(&self) -> &[LayerSite] {
        &self.sites
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn n_data(&self) -> usize {
        self.config.n_data
    }

    pub fn m_aug(&self) -> usize {
        self.config.m_aug
    }

    pub fn dims(&self) -> usize {
        self.config.total_dims()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn set_params(&mut self, p: &[T]) -> Result<()> {
        if p.len() != self.params.len() {
            return Err(KrnetError::DimMismatch {
                context: "set_params",
                expected: self.params.len(),
                got: p.len(),
            });
        }
        self.params.copy_from_slice(p);
        Ok(())
    }

    pub fn offset(&self, layer: usize) -> usize {
        self.offsets[layer]
    }

    /// Parameter range owned by layer `i` (shared ranges in tied mode).
    pub fn param_range(&self, i: usize) -> std::ops::Range<usize> {
        let o = self.offsets[i];
        o..o + self.layers[i].n_params()
    }

    pub fn layer_params(&self, i: usize) -> &[T] {
        &self.params[self.param_range(i)]
    }

    pub fn layer_params_mut(&mut self, i: usize) -> &mut [T] {
        let r = self.param_range(i);
        &mut self.params[r]
    }

    pub fn layer_mut(&mut self, i: usize) -> &mut Layer {
        &mut self.layers[i]
    }

    /// Indices of layers that own (rather than share) their parameters.
    pub fn owning_layers(&self) -> Vec<usize> {
        let mut seen = std::collections::HashSet::new();
        (0..self.layers.len())
            .filter(|&i| self.layers[i].n_params() > 0 && seen.insert(self.offsets[i]))
            .collect()
    }

    /// `[gamma | y]` state batch; `gamma = None` means zeros.
    pub fn assemble(&self, y: &Batch<T>, gamma: Option<&Batch<T>>) -> Result<Batch<T>> {
        y.expect_cols(self.n_data(), "data batch")?;
        let m = self.m_aug();
        if m == 0 {
            if gamma.is_some_and(|g| g.cols() > 0) {
                return Err(KrnetError::DimMismatch {
                    context: "augmented batch",
                    expected: 0,
                    got: gamma.unwrap().cols(),
                });
            }
            return Ok(y.clone());
        }
        let g = match gamma {
            Some(g) => {
                g.expect_cols(m, "augmented batch")?;
                g.clone()
            }
            None => Batch::zeros(y.rows(), m),
        };
        Batch::hstack(&g, y)
    }

    /// Splits a state batch into `(y, gamma)`.
    pub fn split(&self, x: &Batch<T>) -> (Batch<T>, Option<Batch<T>>) {
        let m = self.m_aug();
        let y = x.gather_cols(&(m..self.dims()).collect::<Vec<_>>());
        let g = (m > 0).then(|| x.gather_cols(&(0..m).collect::<Vec<_>>()));
        (y, g)
    }

    /// Forward map of a full state batch; returns `(z, sum of logdets)`.
    pub fn forward(&self, x: &Batch<T>) -> Result<(Batch<T>, Vec<T>)> {
        x.expect_cols(self.dims(), "state batch")?;
        let mut z = x.clone();
        let mut ld = vec![T::zero(); x.rows()];
        for (i, layer) in self.layers.iter().enumerate() {
            layer
                .forward(self.layer_params(i), &mut z, &mut ld, false)
                .map_err(|e| e.at_layer(i, layer.kind()))?;
            check_finite(&z, &ld, i, layer.kind())?;
        }
        Ok((z, ld))
    }

    /// Inverse map of a latent batch; returns `(x, forward logdet at x)`.
    pub fn inverse(&self, z: &Batch<T>) -> Result<(Batch<T>, Vec<T>)> {
        z.expect_cols(self.dims(), "latent batch")?;
        let mut x = z.clone();
        let mut ld = vec![T::zero(); z.rows()];
        for (i, layer) in self.layers.iter().enumerate().rev() {
            layer
                .inverse(self.layer_params(i), &mut x, Some(&mut ld), false)
                .map_err(|e| e.at_layer(i, layer.kind()))?;
            check_finite(&x, &ld, i, layer.kind())?;
        }
        Ok((x, ld))
    }

    /// Joint log-density of `(gamma, y)` (or of `y` without augmentation).
    pub fn forward_logdensity(&self, y: &Batch<T>, gamma: Option<&Batch<T>>) -> Result<(Batch<T>, Vec<T>)> {
        let x = self.assemble(y, gamma)?;
        let (z, ld) = self.forward(&x)?;
        let lp = std_normal_logpdf(&z)
            .into_iter()
            .zip(ld)
            .map(|(a, b)| a + b)
            .collect();
        Ok((z, lp))
    }

    /// Draws `n` samples; returns `(y, gamma)`.
    pub fn sample(&self, rng: &mut RngState, n: usize) -> Result<(Batch<T>, Option<Batch<T>>)> {
        let z = rng.gauss_sample(n, self.dims());
        let (x, _) = self.inverse(&z)?;
        Ok(self.split(&x))
    }

    /// Log-density of the data marginal of an augmented model.
    pub fn marginal_logdensity(&self, y: &Batch<T>, method: MarginalMethod, rng: &mut RngState) -> Result<Vec<T>> {
        let m = self.m_aug();
        if m == 0 {
            return Err(KrnetError::Unsupported(
                "marginal density requested from a model without augmentation".into(),
            ));
        }
        match method {
            MarginalMethod::GammaStar => {
                let (_, lp) = self.forward_logdensity(y, None)?;
                let c = T::lit(0.5 * m as f64 * (2.0 * std::f64::consts::PI).ln());
                Ok(lp.into_iter().map(|v| v + c).collect())
            }
            MarginalMethod::Mc(0) => Err(KrnetError::config("mc", "needs at least one draw")),
            MarginalMethod::Mc(nmc) => {
                let rows = y.rows();
                let idx: Vec<usize> = (0..rows).flat_map(|r| std::iter::repeat(r).take(nmc)).collect();
                let yy = y.select_rows(&idx);
                let g = rng.gauss_sample(rows * nmc, m);
                let (_, lp) = self.forward_logdensity(&yy, Some(&g))?;
                let lpg = std_normal_logpdf(&g);
                let ln_n = T::from_usize(nmc).unwrap().ln();
                let mut out = Vec::with_capacity(rows);
                for r in 0..rows {
                    let w: Vec<T> = (0..nmc).map(|j| lp[r * nmc + j] - lpg[r * nmc + j]).collect();
                    out.push(logsumexp(&w)? - ln_n);
                }
                Ok(out)
            }
        }
    }

    /// Data-dependent initialization: every scale-bias layer that has not
    /// been initialized standardizes the activations it receives from `x`.
    pub fn data_init(&mut self, x: &Batch<T>) -> Result<()> {
        x.expect_cols(self.dims(), "state batch")?;
        let mut z = x.clone();
        let mut ld = vec![T::zero(); x.rows()];
        for i in 0..self.layers.len() {
            let r = self.param_range(i);
            if let Layer::ScaleBias(sb) = &mut self.layers[i] {
                if !sb.initialized {
                    sb.data_init(&mut self.params[r.clone()], &z)
                        .map_err(|e| e.at_layer(i, "scale_bias"))?;
                }
            }
            self.layers[i]
                .forward(&self.params[r], &mut z, &mut ld, false)
                .map_err(|e| e.at_layer(i, self.layers[i].kind()))?;
        }
        Ok(())
    }

    pub fn is_initialized(&self) -> bool {
        self.layers.iter().all(|l| match l {
            Layer::ScaleBias(sb) => sb.initialized,
            _ => true,
        })
    }

    /// Marks every scale-bias layer initialized with its current parameters.
    pub fn mark_initialized(&mut self) {
        for l in &mut self.layers {
            if let Layer::ScaleBias(sb) = l {
                sb.initialized = true;
            }
        }
    }

    /// Runs one layer forward with an optional cache (used by the gradient module).
    pub(crate) fn layer_forward(&self, i: usize, x: &mut Batch<T>, ld: &mut [T], keep: bool) -> Result<LayerCache<T>> {
        let layer = &self.layers[i];
        let c = layer
            .forward(self.layer_params(i), x, ld, keep)
            .map_err(|e| e.at_layer(i, layer.kind()))?;
        check_finite(x, ld, i, layer.kind())?;
        Ok(c)
    }

    pub(crate) fn layer_inverse(&self, i: usize, z: &mut Batch<T>, ld: Option<&mut [T]>, keep: bool) -> Result<LayerCache<T>> {
        let layer = &self.layers[i];
        let c = layer
            .inverse(self.layer_params(i), z, ld, keep)
            .map_err(|e| e.at_layer(i, layer.kind()))?;
        z.ensure_finite(&format!("layer {i} ({}) inverse", layer.kind()))
            .map_err(|e| e.at_layer(i, layer.kind()))?;
        Ok(c)
    }

    /// Layer indices belonging to time step `step`.
    pub fn step_layers(&self, step: usize) -> Vec<usize> {
        (0..self.layers.len()).filter(|&i| self.sites[i].step == step && self.sites[i].stage > 0).collect()
    }
}

fn check_finite<T: Real>(x: &Batch<T>, ld: &[T], i: usize, kind: &'static str) -> Result<()> {
    if !x.is_finite() || ld.iter().any(|v| !v.is_finite()) {
        return Err(KrnetError::NonFinite {
            context: "layer output".into(),
        }
        .at_layer(i, kind));
    }
    Ok(())
}

/// Index of layer `idx` among the parameterized structure of its time step,
/// counted the same way as step 0 (reactivation squeezes skipped).
fn step_position(layers: &[Layer], sites: &[LayerSite], idx: usize) -> usize {
    let step = sites[idx].step;
    (0..idx)
        .filter(|&j| sites[j].step == step && sites[j].stage > 0)
        .filter(|&j| !matches!(&layers[j], Layer::Squeeze(s) if s.is_reactivation()))
        .count()
}
