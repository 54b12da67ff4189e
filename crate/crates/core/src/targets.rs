//! Benchmark distributions: samplers, log-densities with gradients,
//! differential entropies, and the rejection-sampled logistic "holes" family.

use std::f64::consts::PI;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{KrnetError, Result};
use crate::numkit::{mean_and_stderr, Batch, RngState};

/// Log-density stand-in for zero density, kept finite so sums stay total.
pub const NEG_INF_SENTINEL: f64 = -1e30;

/// Proposals examined before a rejection sampler may declare its
/// acceptance region degenerate.
pub const PROBE_WINDOW: usize = 2_000_000;

/// Acceptance rate below which the region counts as degenerate.
pub const MIN_ACCEPTANCE: f64 = 1e-6;

/// Minimum proposals for a normalizer estimate.
pub const MIN_NORMALIZER_MC: usize = 10_000;

/// (Possibly unnormalized) log-density with its gradient, evaluated row-wise.
pub trait LogDensity {
    fn dim(&self) -> usize;
    fn log_density(&self, y: &Batch<f64>) -> Result<Vec<f64>>;
    fn grad_log_density(&self, y: &Batch<f64>) -> Result<Batch<f64>>;
}

/// Logistic family with an elliptic hole on every pair of adjacent
/// coordinates: accept `y` when `||R_j [y_j, y_{j+1}]|| >= threshold` for
/// all `j`, with `R_j = diag(aspect, 1) rot(theta_j)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HoleSpec {
    pub dims: usize,
    /// Logistic scale `s` of each coordinate.
    pub scale: f64,
    pub aspect: f64,
    pub threshold: f64,
}

impl HoleSpec {
    pub fn new(dims: usize) -> Self {
        HoleSpec {
            dims,
            scale: 2.0,
            aspect: 3.0,
            threshold: 7.6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims < 2 {
            return Err(KrnetError::config("holes.dims", "need at least two dimensions"));
        }
        if !(self.scale > 0.0) {
            return Err(KrnetError::config("holes.scale", "must be positive"));
        }
        if !(self.aspect > 0.0) {
            return Err(KrnetError::config("holes.aspect", "must be positive"));
        }
        if !(self.threshold >= 0.0 && self.threshold.is_finite()) {
            return Err(KrnetError::config("holes.threshold", "must be finite and non-negative"));
        }
        Ok(())
    }

    /// Angle of pair `j` (1-based): `pi/4` for even `j`, `3 pi/4` for odd.
    pub fn angle(j: usize) -> f64 {
        if j % 2 == 0 {
            PI / 4.0
        } else {
            3.0 * PI / 4.0
        }
    }

    /// Smallest constraint margin `||R_j [y_j, y_{j+1}]|| - threshold` over all pairs.
    pub fn margin(&self, y: &[f64]) -> f64 {
        let mut worst = f64::INFINITY;
        for j in 1..y.len() {
            let (s, c) = Self::angle(j).sin_cos();
            let (a, b) = (y[j - 1], y[j]);
            let u = self.aspect * (c * a - s * b);
            let v = s * a + c * b;
            worst = worst.min(u.hypot(v) - self.threshold);
        }
        worst
    }

    pub fn accepts(&self, y: &[f64]) -> bool {
        self.margin(y) >= 0.0
    }
}

/// `ln E[I_B]` estimated from logistic proposals.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalizer {
    pub ln_eib: f64,
    pub std_err: f64,
    pub n_mc: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetSpec {
    Logistic { loc: f64, scale: f64 },
    /// `exp` of a standard normal variable.
    Lognormal,
    Uniform { lo: f64, hi: f64 },
    /// Uniform on `[-1.5, -0.5] U [0.5, 1.5]`.
    UniformHole,
    /// Six unit Gaussians at `5 (cos(i pi/3), sin(i pi/3))`.
    Mixture2d,
    Holes(HoleSpec),
    /// Standard normal in `dims` dimensions.
    Gaussian { dims: usize },
}

/// Target distribution with an optional attached normalizer estimate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Target {
    pub spec: TargetSpec,
    pub normalizer: Option<Normalizer>,
}

/// Mean and standard error of a Monte Carlo estimate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    /// `None` when fewer than two samples were used.
    pub std_err: Option<f64>,
}

fn mixture_centers() -> [(f64, f64); 6] {
    let mut c = [(0.0, 0.0); 6];
    for (i, ci) in c.iter_mut().enumerate() {
        let a = (i + 1) as f64 * PI / 3.0;
        *ci = (5.0 * a.cos(), 5.0 * a.sin());
    }
    c
}

fn logistic_logpdf(y: f64, loc: f64, s: f64) -> f64 {
    let u = ((y - loc) / s).abs();
    // e^{-u} / (s (1 + e^{-u})^2), symmetric in u
    -u - 2.0 * (-u).exp().ln_1p() - s.ln()
}

fn logistic_dlog(y: f64, loc: f64, s: f64) -> f64 {
    -((y - loc) / (2.0 * s)).tanh() / s
}

fn logistic_sample(rng: &mut RngState, loc: f64, s: f64) -> f64 {
    let u = rng.uniform_open();
    loc + s * (u / (1.0 - u)).ln()
}

impl Target {
    pub fn new(spec: TargetSpec) -> Self {
        Target {
            spec,
            normalizer: None,
        }
    }

    pub fn logistic() -> Self {
        Target::new(TargetSpec::Logistic { loc: 0.0, scale: 2.0 })
    }

    pub fn holes(spec: HoleSpec) -> Self {
        Target::new(TargetSpec::Holes(spec))
    }

    pub fn with_normalizer(mut self, n: Normalizer) -> Self {
        self.normalizer = Some(n);
        self
    }

    pub fn name(&self) -> &'static str {
        match self.spec {
            TargetSpec::Logistic { .. } => "logistic",
            TargetSpec::Lognormal => "lognormal",
            TargetSpec::Uniform { .. } => "uniform",
            TargetSpec::UniformHole => "uniform_hole",
            TargetSpec::Mixture2d => "mixture2d",
            TargetSpec::Holes(_) => "holes",
            TargetSpec::Gaussian { .. } => "gaussian",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.spec {
            TargetSpec::Logistic { scale, .. } if !(*scale > 0.0) => {
                Err(KrnetError::config("target.scale", "must be positive"))
            }
            TargetSpec::Uniform { lo, hi } if !(hi > lo) => {
                Err(KrnetError::config("target.hi", "must exceed target.lo"))
            }
            TargetSpec::Holes(h) => h.validate(),
            TargetSpec::Gaussian { dims: 0 } => Err(KrnetError::config("target.dims", "must be positive")),
            _ => Ok(()),
        }
    }

    /// True when the log-density lacks a constant that has not been estimated.
    pub fn is_unnormalized(&self) -> bool {
        matches!(self.spec, TargetSpec::Holes(_)) && self.normalizer.is_none()
    }

    /// Exact differential entropy where a closed form exists.
    pub fn analytic_entropy(&self) -> Option<f64> {
        match self.spec {
            TargetSpec::Logistic { scale, .. } => Some(scale.ln() + 2.0),
            TargetSpec::Lognormal => Some(0.5 * (2.0 * PI).ln() + 0.5),
            TargetSpec::Uniform { lo, hi } => Some((hi - lo).ln()),
            TargetSpec::UniformHole => Some(2f64.ln()),
            TargetSpec::Gaussian { dims } => Some(0.5 * dims as f64 * (2.0 * PI * std::f64::consts::E).ln()),
            TargetSpec::Mixture2d | TargetSpec::Holes(_) => None,
        }
    }

    /// Draws `n` exact samples.
    pub fn sample(&self, rng: &mut RngState, n: usize) -> Result<Batch<f64>> {
        if n == 0 {
            return Err(KrnetError::EmptyInput("target sampler"));
        }
        self.validate()?;
        let d = self.dim();
        let mut data = Vec::with_capacity(n * d);
        match &self.spec {
            TargetSpec::Logistic { loc, scale } => {
                data.extend((0..n).map(|_| logistic_sample(rng, *loc, *scale)))
            }
            TargetSpec::Lognormal => data.extend((0..n).map(|_| rng.normal().exp())),
            TargetSpec::Uniform { lo, hi } => {
                data.extend((0..n).map(|_| lo + (hi - lo) * rng.uniform_open()))
            }
            TargetSpec::UniformHole => data.extend((0..n).map(|_| {
                let v = 0.5 + rng.uniform_open();
                if rng.uniform() < 0.5 {
                    -v
                } else {
                    v
                }
            })),
            TargetSpec::Mixture2d => {
                let c = mixture_centers();
                for _ in 0..n {
                    let (cx, cy) = c[rng.below(6)];
                    data.push(cx + rng.normal());
                    data.push(cy + rng.normal());
                }
            }
            TargetSpec::Gaussian { dims } => data.extend((0..n * dims).map(|_| rng.normal())),
            TargetSpec::Holes(h) => {
                let mut y = vec![0.0; d];
                let (mut tried, mut got) = (0usize, 0usize);
                while got < n {
                    for v in y.iter_mut() {
                        *v = logistic_sample(rng, 0.0, h.scale);
                    }
                    tried += 1;
                    if h.accepts(&y) {
                        data.extend_from_slice(&y);
                        got += 1;
                    }
                    if tried >= PROBE_WINDOW && (got as f64) < MIN_ACCEPTANCE * tried as f64 {
                        return Err(KrnetError::DegenerateTarget(format!(
                            "hole constraint accepted {got} of {tried} proposals"
                        )));
                    }
                }
            }
        }
        Batch::new(n, d, data)
    }

    /// Estimates `ln E[I_B]` for a holes target from `n_mc` proposals.
    pub fn estimate_normalizer(spec: &HoleSpec, rng: &mut RngState, n_mc: usize) -> Result<Normalizer> {
        spec.validate()?;
        if n_mc < MIN_NORMALIZER_MC {
            return Err(KrnetError::config("n_mc", format!("need at least {MIN_NORMALIZER_MC} proposals")));
        }
        let seed = rng.seed();
        let mut y = vec![0.0; spec.dims];
        let mut hits = 0usize;
        for _ in 0..n_mc {
            for v in y.iter_mut() {
                *v = logistic_sample(rng, 0.0, spec.scale);
            }
            if spec.accepts(&y) {
                hits += 1;
            }
        }
        if hits == 0 {
            return Err(KrnetError::DegenerateTarget(format!("no acceptances in {n_mc} proposals")));
        }
        let p = hits as f64 / n_mc as f64;
        // delta method: se(ln p) = se(p) / p
        let se = (p * (1.0 - p) / n_mc as f64).sqrt() / p;
        Ok(Normalizer {
            ln_eib: p.ln(),
            std_err: se,
            n_mc,
            seed,
        })
    }

    /// Monte Carlo differential entropy `-(1/n) sum log p(y_i)`.
    pub fn estimate_entropy_mc(&self, rng: &mut RngState, n: usize) -> Result<Estimate> {
        if self.is_unnormalized() {
            return Err(KrnetError::MissingNormalizer(self.name().into()));
        }
        let y = self.sample(rng, n)?;
        let lp = self.log_density(&y)?;
        let neg: Vec<f64> = lp.iter().map(|v| -v).collect();
        let (value, std_err) = mean_and_stderr(&neg);
        Ok(Estimate { value, std_err })
    }

    fn log_density_row(&self, y: &[f64]) -> f64 {
        match &self.spec {
            TargetSpec::Logistic { loc, scale } => logistic_logpdf(y[0], *loc, *scale),
            TargetSpec::Lognormal => {
                let v = y[0];
                if v > 0.0 {
                    let l = v.ln();
                    -l - 0.5 * (2.0 * PI).ln() - 0.5 * l * l
                } else {
                    NEG_INF_SENTINEL
                }
            }
            TargetSpec::Uniform { lo, hi } => {
                if y[0] >= *lo && y[0] <= *hi {
                    -(hi - lo).ln()
                } else {
                    NEG_INF_SENTINEL
                }
            }
            TargetSpec::UniformHole => {
                let a = y[0].abs();
                if (0.5..=1.5).contains(&a) {
                    -(2f64.ln())
                } else {
                    NEG_INF_SENTINEL
                }
            }
            TargetSpec::Mixture2d => {
                let c = mixture_centers();
                let e: Vec<f64> = c
                    .iter()
                    .map(|(cx, cy)| -0.5 * ((y[0] - cx).powi(2) + (y[1] - cy).powi(2)))
                    .collect();
                let m = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = e.iter().map(|v| (v - m).exp()).sum();
                m + s.ln() - 6f64.ln() - (2.0 * PI).ln()
            }
            TargetSpec::Gaussian { .. } => {
                -0.5 * y.iter().map(|v| v * v).sum::<f64>() - 0.5 * y.len() as f64 * (2.0 * PI).ln()
            }
            TargetSpec::Holes(h) => {
                if !h.accepts(y) {
                    return NEG_INF_SENTINEL;
                }
                let base: f64 = y.iter().map(|&v| logistic_logpdf(v, 0.0, h.scale)).sum();
                base - self.normalizer.map_or(0.0, |n| n.ln_eib)
            }
        }
    }

    fn grad_row(&self, y: &[f64], g: &mut [f64]) {
        g.iter_mut().for_each(|v| *v = 0.0);
        match &self.spec {
            TargetSpec::Logistic { loc, scale } => g[0] = logistic_dlog(y[0], *loc, *scale),
            TargetSpec::Lognormal => {
                if y[0] > 0.0 {
                    g[0] = -(1.0 + y[0].ln()) / y[0];
                }
            }
            TargetSpec::Uniform { .. } | TargetSpec::UniformHole => {}
            TargetSpec::Mixture2d => {
                let c = mixture_centers();
                let e: Vec<f64> = c
                    .iter()
                    .map(|(cx, cy)| -0.5 * ((y[0] - cx).powi(2) + (y[1] - cy).powi(2)))
                    .collect();
                let m = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = e.iter().map(|v| (v - m).exp()).collect();
                let s: f64 = w.iter().sum();
                for (wi, (cx, cy)) in w.iter().zip(c.iter()) {
                    g[0] += wi / s * (cx - y[0]);
                    g[1] += wi / s * (cy - y[1]);
                }
            }
            TargetSpec::Gaussian { .. } => {
                for (gi, yi) in g.iter_mut().zip(y) {
                    *gi = -yi;
                }
            }
            TargetSpec::Holes(h) => {
                if h.accepts(y) {
                    for (gi, &yi) in g.iter_mut().zip(y) {
                        *gi = logistic_dlog(yi, 0.0, h.scale);
                    }
                }
            }
        }
    }

    /// Writes samples as comma-separated text with a `y1,...,yn` header.
    pub fn write_csv<W: Write>(w: &mut W, samples: &Batch<f64>) -> std::io::Result<()> {
        write_batch_csv(w, samples, "y")
    }
}

/// Comma-separated text with a `{prefix}1,...` header, one row per sample.
pub fn write_batch_csv<W: Write>(w: &mut W, b: &Batch<f64>, prefix: &str) -> std::io::Result<()> {
    let header: Vec<String> = (1..=b.cols()).map(|j| format!("{prefix}{j}")).collect();
    writeln!(w, "{}", header.join(","))?;
    for row in b.row_iter() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        writeln!(w, "{}", cells.join(","))?;
    }
    Ok(())
}

impl LogDensity for Target {
    fn dim(&self) -> usize {
        match &self.spec {
            TargetSpec::Logistic { .. }
            | TargetSpec::Lognormal
            | TargetSpec::Uniform { .. }
            | TargetSpec::UniformHole => 1,
            TargetSpec::Mixture2d => 2,
            TargetSpec::Holes(h) => h.dims,
            TargetSpec::Gaussian { dims } => *dims,
        }
    }

    fn log_density(&self, y: &Batch<f64>) -> Result<Vec<f64>> {
        y.expect_cols(self.dim(), "target density")?;
        y.ensure_finite("target density input")?;
        Ok(y.row_iter().map(|r| self.log_density_row(r)).collect())
    }

    fn grad_log_density(&self, y: &Batch<f64>) -> Result<Batch<f64>> {
        y.expect_cols(self.dim(), "target density")?;
        let mut g = Batch::zeros(y.rows(), y.cols());
        for r in 0..y.rows() {
            self.grad_row(y.row(r), g.row_mut(r));
        }
        Ok(g)
    }
}

/// A target density shifted by a constant, for invariance checks.
pub struct Shifted<'a, D: LogDensity + ?Sized> {
    pub inner: &'a D,
    pub shift: f64,
}

impl<D: LogDensity + ?Sized> LogDensity for Shifted<'_, D> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn log_density(&self, y: &Batch<f64>) -> Result<Vec<f64>> {
        Ok(self.inner.log_density(y)?.into_iter().map(|v| v + self.shift).collect())
    }

    fn grad_log_density(&self, y: &Batch<f64>) -> Result<Batch<f64>> {
        self.inner.grad_log_density(y)
    }
}
