use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{KrnetError, Result};
use crate::layers::CdfConfig;
use crate::nn::Activation;

/// Time stepping of the ODE-discretized model on `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OdeConfig {
    pub n_steps: usize,
    pub dt: f64,
    /// Share one parameter set across all time steps.
    pub tied: bool,
}

impl OdeConfig {
    pub fn uniform(n_steps: usize) -> Self {
        OdeConfig {
            n_steps,
            dt: 1.0 / n_steps as f64,
            tied: false,
        }
    }
}

/// Logistic preprocessing of the data columns from the box `(lo, hi)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogitConfig {
    pub scale: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Full structural description of a flow model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub n_data: usize,
    pub m_aug: usize,
    /// Partition of the data dimensions into `K` blocks.
    pub block_sizes: Vec<usize>,
    /// Coupling layers per stage (`L`, even).
    pub n_inner: usize,
    /// Hidden width of the stage-1 networks.
    pub hidden: usize,
    /// Width decay `h_{k+1} = ceil(r h_k)`.
    pub width_decay: f64,
    pub use_rotation: bool,
    pub use_cdf: bool,
    /// Also apply the CDF layer to the augmented columns.
    pub cdf_on_aug: bool,
    pub alpha: f64,
    pub cdf: CdfConfig,
    pub activation: Activation,
    pub ode: Option<OdeConfig>,
    pub logit: Option<LogitConfig>,
}

impl FlowConfig {
    /// Regular KRnet defaults: no augmentation, rotation or CDF layer.
    pub fn new(block_sizes: Vec<usize>, n_inner: usize, hidden: usize) -> Self {
        FlowConfig {
            n_data: block_sizes.iter().sum(),
            m_aug: 0,
            block_sizes,
            n_inner,
            hidden,
            width_decay: 1.0,
            use_rotation: false,
            use_cdf: false,
            cdf_on_aug: false,
            alpha: 0.6,
            cdf: CdfConfig::default(),
            activation: Activation::Tanh,
            ode: None,
            logit: None,
        }
    }

    pub fn with_aug(mut self, m: usize) -> Self {
        self.m_aug = m;
        self
    }

    pub fn with_rotation_and_cdf(mut self) -> Self {
        self.use_rotation = true;
        self.use_cdf = true;
        self
    }

    pub fn with_decay(mut self, r: f64) -> Self {
        self.width_decay = r;
        self
    }

    pub fn with_ode(mut self, ode: OdeConfig) -> Self {
        self.ode = Some(ode);
        self
    }

    pub fn with_logit(mut self, logit: LogitConfig) -> Self {
        self.logit = Some(logit);
        self
    }

    pub fn k(&self) -> usize {
        self.block_sizes.len()
    }

    pub fn total_dims(&self) -> usize {
        self.n_data + self.m_aug
    }

    /// Number of outer stages: `K` with augmentation, `K - 1` without.
    pub fn n_stages(&self) -> usize {
        if self.m_aug > 0 {
            self.k()
        } else {
            self.k() - 1
        }
    }

    /// Hidden width at 1-based stage `k`.
    pub fn hidden_at(&self, k: usize) -> usize {
        let mut h = self.hidden;
        for _ in 1..k {
            h = ((self.width_decay * h as f64) - 1e-9).ceil().max(1.0) as usize;
        }
        h
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_data == 0 {
            return Err(KrnetError::config("n_data", "must be positive"));
        }
        if self.block_sizes.is_empty() || self.block_sizes.contains(&0) {
            return Err(KrnetError::config("block_sizes", "need at least one positive block"));
        }
        if self.block_sizes.iter().sum::<usize>() != self.n_data {
            return Err(KrnetError::config("block_sizes", "must sum to n_data"));
        }
        if self.m_aug == 0 && self.k() < 2 {
            return Err(KrnetError::config(
                "block_sizes",
                "a model without augmentation needs at least two blocks",
            ));
        }
        if self.n_inner == 0 || self.n_inner % 2 != 0 {
            return Err(KrnetError::config("n_inner", "must be even and positive"));
        }
        if self.hidden == 0 {
            return Err(KrnetError::config("hidden", "must be positive"));
        }
        if !(self.width_decay > 0.0 && self.width_decay <= 1.0) {
            return Err(KrnetError::config("width_decay", "must lie in (0, 1]"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(KrnetError::config("alpha", "must lie in (0, 1)"));
        }
        if self.use_cdf {
            self.cdf.validate()?;
        }
        if let Some(ode) = &self.ode {
            if ode.n_steps == 0 {
                return Err(KrnetError::config("ode.n_steps", "must be positive"));
            }
            if !(ode.dt > 0.0) || (ode.dt * ode.n_steps as f64 - 1.0).abs() > 1e-9 {
                return Err(KrnetError::config("ode.dt", "dt * n_steps must equal 1"));
            }
            if self.use_rotation || self.use_cdf {
                return Err(KrnetError::config(
                    "ode",
                    "time-stepped models contain only couplings and squeezes",
                ));
            }
        }
        if let Some(l) = &self.logit {
            if !(l.scale > 0.0) || !(l.hi > l.lo) {
                return Err(KrnetError::config("logit", "need scale > 0 and hi > lo"));
            }
        }
        Ok(())
    }

    /// True when all blocks share one size `m` and the augmentation is 0 or `m`.
    pub fn is_uniform_partition(&self) -> bool {
        let m = self.block_sizes[0];
        self.block_sizes.iter().all(|&b| b == m) && (self.m_aug == 0 || self.m_aug == m)
    }
}

/// Named model families compared in the benchmarks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "KRnet")]
    Krnet,
    #[serde(rename = "KRnet_aug")]
    KrnetAug,
    #[serde(rename = "KRnet_R&N")]
    KrnetRn,
    #[serde(rename = "KRnet_aug_R&N")]
    KrnetAugRn,
    #[serde(rename = "KRnet_ODE")]
    KrnetOde,
    #[serde(rename = "realNVP-equivalent")]
    RealNvp,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Krnet,
        Variant::KrnetAug,
        Variant::KrnetRn,
        Variant::KrnetAugRn,
        Variant::KrnetOde,
        Variant::RealNvp,
    ];

    pub fn tag(&self) -> &'static str {
        match self {
            Variant::Krnet => "KRnet",
            Variant::KrnetAug => "KRnet_aug",
            Variant::KrnetRn => "KRnet_R&N",
            Variant::KrnetAugRn => "KRnet_aug_R&N",
            Variant::KrnetOde => "KRnet_ODE",
            Variant::RealNvp => "realNVP-equivalent",
        }
    }

    pub fn is_augmented(&self) -> bool {
        matches!(self, Variant::KrnetAug | Variant::KrnetAugRn | Variant::KrnetOde)
    }

    /// Model for `n_data` dimensions split into blocks of `block` (the
    /// augmentation width, when present, equals `block`). The real-NVP
    /// equivalent ignores `block` and uses two halves.
    pub fn config(&self, n_data: usize, block: usize, n_inner: usize, hidden: usize) -> Result<FlowConfig> {
        if block == 0 || n_data % block != 0 {
            return Err(KrnetError::config("block", "must divide n_data"));
        }
        let blocks = vec![block; n_data / block];
        let cfg = match self {
            Variant::Krnet => FlowConfig::new(blocks, n_inner, hidden),
            Variant::KrnetAug => FlowConfig::new(blocks, n_inner, hidden).with_aug(block),
            Variant::KrnetRn => FlowConfig::new(blocks, n_inner, hidden).with_rotation_and_cdf(),
            Variant::KrnetAugRn => FlowConfig::new(blocks, n_inner, hidden)
                .with_aug(block)
                .with_rotation_and_cdf(),
            Variant::KrnetOde => FlowConfig::new(blocks, n_inner, hidden)
                .with_aug(block)
                .with_ode(OdeConfig::uniform(20)),
            Variant::RealNvp => {
                if n_data < 2 {
                    return Err(KrnetError::config("n_data", "real NVP needs at least 2 dims"));
                }
                let a = n_data / 2;
                FlowConfig::new(vec![a, n_data - a], n_inner, hidden)
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Variant {
    type Err = KrnetError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.tag() == s)
            .ok_or_else(|| KrnetError::config("variant", format!("unknown variant `{s}`")))
    }
}
