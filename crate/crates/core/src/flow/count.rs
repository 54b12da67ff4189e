use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::FlowModel;
use crate::layers::{CouplingMode, Layer};
use crate::real::Real;

/// Parameters of one coupling pair acting on `n_k` dims with hidden width
/// `h`: `2h^2 + 4h + 3(h+1)n_k` (both networks and both `beta` vectors).
pub fn closed_form_pair(h: usize, n_k: usize) -> usize {
    2 * h * h + 4 * h + 3 * (h + 1) * n_k
}

/// Total rotation parameters `sum_{i=2}^K (i m)^2` for `n = m K`, written as
/// `(m n (K+1)(2K+1) - 6 m^2) / 6`.
pub fn rotation_closed_form(m: usize, k: usize) -> usize {
    let n = m * k;
    (m * n * (k + 1) * (2 * k + 1) - 6 * m * m) / 6
}

/// Closed-form predictions. `rotation` and `total` are `None` when the
/// partition is not uniform (the rotation formula assumes equal blocks).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamPrediction {
    pub coupling: usize,
    pub scale_bias: usize,
    pub rotation: Option<usize>,
    pub cdf: usize,
    pub total: Option<usize>,
}

/// Parameter audit: exact enumeration by category plus predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub per_category: BTreeMap<String, usize>,
    pub total: usize,
    /// Coupling parameters (network, `beta`, `alpha`) per pair, in build order.
    pub pairs: Vec<usize>,
    pub prediction: ParamPrediction,
}

impl ParamCount {
    pub fn category(&self, name: &str) -> usize {
        self.per_category.get(name).copied().unwrap_or(0)
    }

    /// Enumerated coupling total (network weights plus scale vectors).
    pub fn coupling(&self) -> usize {
        self.category("coupling_mlp") + self.category("coupling_beta") + self.category("coupling_alpha")
    }

    /// True when every available prediction matches the enumeration.
    pub fn matches_prediction(&self) -> bool {
        let p = &self.prediction;
        p.coupling == self.coupling()
            && p.scale_bias == self.category("scale_bias")
            && p.cdf == self.category("cdf")
            && p.rotation.map_or(true, |r| r == self.category("rotation"))
            && p.total.map_or(true, |t| t == self.total)
    }
}

impl<T: Real> FlowModel<T> {
    /// Enumerates the parameter registry (shared parameters counted once)
    /// and evaluates the closed-form predictions.
    pub fn count_params(&self) -> ParamCount {
        let mut per: BTreeMap<String, usize> = BTreeMap::new();
        let mut pairs = Vec::new();
        let mut pending: Option<usize> = None;
        for i in self.owning_layers() {
            match &self.layers[i] {
                Layer::Coupling(c) => {
                    let u = c.upd.len();
                    *per.entry("coupling_mlp".into()).or_default() += c.mlp.n_params();
                    *per.entry("coupling_beta".into()).or_default() += u;
                    if matches!(c.mode, CouplingMode::Ode { .. }) {
                        *per.entry("coupling_alpha".into()).or_default() += u;
                    }
                    let n = c.n_params();
                    match pending.take() {
                        Some(first) => pairs.push(first + n),
                        None => pending = Some(n),
                    }
                }
                l => *per.entry(l.kind().into()).or_default() += l.n_params(),
            }
        }
        let total = per.values().sum();
        ParamCount {
            per_category: per,
            total,
            pairs,
            prediction: self.predict_params(),
        }
    }

    fn predict_params(&self) -> ParamPrediction {
        let cfg = &self.config;
        let kb = cfg.k();
        let m = cfg.m_aug;
        let ode = cfg.ode.is_some();
        let steps = match cfg.ode {
            Some(o) if !o.tied => o.n_steps,
            _ => 1,
        };
        let mut coupling = 0;
        let mut scale_bias = 0;
        for k in 1..=cfg.n_stages() {
            let n_k = m + cfg.block_sizes[..kb + 1 - k].iter().sum::<usize>();
            let h = cfg.hidden_at(k);
            let mut pair = closed_form_pair(h, n_k);
            if ode {
                pair += n_k;
            } else {
                scale_bias += cfg.n_inner * 2 * n_k;
            }
            coupling += pair * cfg.n_inner / 2;
        }
        coupling *= steps;
        let cdf = if cfg.use_cdf {
            let cols = if cfg.cdf_on_aug { cfg.total_dims() } else { cfg.n_data };
            cols * cfg.cdf.n_knots()
        } else {
            0
        };
        let uniform = cfg.block_sizes.iter().all(|&b| b == cfg.block_sizes[0]);
        let rotation = if !cfg.use_rotation {
            Some(0)
        } else if uniform {
            Some(rotation_closed_form(cfg.block_sizes[0], kb))
        } else {
            None
        };
        ParamPrediction {
            coupling,
            scale_bias,
            rotation,
            cdf,
            total: rotation.map(|r| coupling + scale_bias + cdf + r),
        }
    }
}
