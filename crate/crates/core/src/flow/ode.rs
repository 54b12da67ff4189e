use serde::{Deserialize, Serialize};

use super::FlowModel;
use crate::error::{KrnetError, Result};
use crate::layers::Layer;
use crate::numkit::Batch;
use crate::real::Real;

/// One row of the first-order limit table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OdeProbeRow {
    pub dt: f64,
    /// RMS of `q(dt) = (f_step(y; dt) - y) / dt`.
    pub q_rms: f64,
    /// RMS of `q(dt) - q(dt/2)`.
    pub diff: f64,
}

impl<T: Real> FlowModel<T> {
    /// Applies the first time step of an ODE model with its parameters
    /// re-instantiated at step size `dt`.
    pub fn ode_step(&self, x: &Batch<T>, dt: f64) -> Result<Batch<T>> {
        if self.config.ode.is_none() {
            return Err(KrnetError::Unsupported("time-step probe needs an ODE model".into()));
        }
        if !(dt > 0.0) {
            return Err(KrnetError::config("dt", "must be positive"));
        }
        x.expect_cols(self.dims(), "state batch")?;
        let mut z = x.clone();
        let mut ld = vec![T::zero(); x.rows()];
        for i in self.step_layers(0) {
            let mut layer = self.layers[i].clone();
            if let Layer::Coupling(c) = &mut layer {
                c.set_dt(dt);
            }
            layer
                .forward(self.layer_params(i), &mut z, &mut ld, false)
                .map_err(|e| e.at_layer(i, layer.kind()))?;
        }
        Ok(z)
    }

    /// Difference quotient `q(dt)` of one step.
    pub fn ode_velocity(&self, x: &Batch<T>, dt: f64) -> Result<Batch<T>> {
        let z = self.ode_step(x, dt)?;
        let inv = T::lit(1.0 / dt);
        let data = z
            .as_slice()
            .iter()
            .zip(x.as_slice())
            .map(|(&a, &b)| (a - b) * inv)
            .collect();
        Batch::new(x.rows(), x.cols(), data)
    }

    /// Convergence table of the step quotient: for each `dt`, `q(dt)` and
    /// `||q(dt) - q(dt/2)||`, which shrinks linearly when the limit exists.
    pub fn ode_limit_probe(&self, x: &Batch<T>, dts: &[f64]) -> Result<Vec<OdeProbeRow>> {
        let rms = |v: &mut dyn Iterator<Item = f64>, n: usize| {
            (v.map(|a| a * a).sum::<f64>() / n.max(1) as f64).sqrt()
        };
        let n = x.as_slice().len();
        dts.iter()
            .map(|&dt| {
                let q = self.ode_velocity(x, dt)?;
                let qh = self.ode_velocity(x, dt / 2.0)?;
                let q_rms = rms(&mut q.as_slice().iter().map(|v| v.as_f64()), n);
                let diff = rms(
                    &mut q.as_slice().iter().zip(qh.as_slice()).map(|(a, b)| (*a - *b).as_f64()),
                    n,
                );
                Ok(OdeProbeRow { dt, q_rms, diff })
            })
            .collect()
    }
}

/// Exactly invertible split Euler scheme for the volume-preserving system
/// `gamma' = b1(y)`, `y' = b2(gamma)`: `gamma` is advanced first and the
/// updated value drives `y`. Returns the trajectory including the start.
pub fn split_euler(
    gamma0: f64,
    y0: f64,
    b1: impl Fn(f64) -> f64,
    b2: impl Fn(f64) -> f64,
    dt: f64,
    n_steps: usize,
) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(n_steps + 1);
    let (mut g, mut y) = (gamma0, y0);
    out.push((g, y));
    for _ in 0..n_steps {
        g += dt * b1(y);
        y += dt * b2(g);
        out.push((g, y));
    }
    out
}
