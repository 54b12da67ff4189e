#![allow(dead_code)]

use krnet_core::flow::{FlowConfig, FlowModel, Variant};
use krnet_core::numkit::{Batch, RngState};

/// Builds a model and jitters every parameter so no layer is the identity.
pub fn random_model(cfg: &FlowConfig, seed: u64, scale: f64) -> FlowModel<f64> {
    let mut m = FlowModel::<f64>::build(cfg, &RngState::new(seed)).expect("build");
    jitter(&mut m, seed.wrapping_add(1000), scale);
    m
}

pub fn jitter(m: &mut FlowModel<f64>, seed: u64, scale: f64) {
    let mut r = RngState::new(seed);
    for p in m.params_mut() {
        *p += scale * r.normal();
    }
    m.mark_initialized();
}

pub fn gauss(rows: usize, cols: usize, seed: u64) -> Batch<f64> {
    RngState::new(seed).gauss_sample(rows, cols)
}

/// Every variant at data dimension `n` with block size `block`.
pub fn variant_configs(n: usize, block: usize, l: usize, hidden: usize) -> Vec<(Variant, FlowConfig)> {
    Variant::ALL
        .iter()
        .map(|v| (*v, v.config(n, block, l, hidden).expect("variant config")))
        .collect()
}

/// Shorter ODE discretization for tests that only need the structure.
pub fn shorten_ode(mut cfg: FlowConfig, steps: usize) -> FlowConfig {
    if cfg.ode.is_some() {
        cfg.ode = Some(krnet_core::flow::OdeConfig::uniform(steps));
    }
    cfg
}
