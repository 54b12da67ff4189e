//! Experiment configuration files.

use std::path::{Path, PathBuf};

use krnet_core::flow::{FlowConfig, Variant};
use krnet_core::nn::InitScheme;
use krnet_core::targets::{LogDensity, Target, TargetSpec};
use krnet_core::train::{TrainConfig, TrainMode};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

/// Sample and Monte Carlo sizes used after training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Generated samples written per run.
    pub samples: usize,
    /// Proposal draws for the normalizer of constrained targets.
    pub normalizer_mc: usize,
    /// Target draws for the entropy when no closed form exists.
    pub entropy_mc: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            samples: 10_000,
            normalizer_mc: 1_000_000,
            entropy_mc: 1_000_000,
        }
    }
}

/// Everything needed to reproduce a run. Every field must appear in the
/// file (optional ones as `null`) and unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub variant: Variant,
    pub model: FlowConfig,
    /// Initialization of the coupling networks.
    pub init: InitScheme,
    pub target: TargetSpec,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub seed: u64,
    pub runs: usize,
    pub out: PathBuf,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        let raw: Value = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        let cfg: ExperimentConfig =
            serde_json::from_value(raw.clone()).map_err(|e| CliError::Config(e.to_string()))?;
        // serde fills absent `Option` fields with `None`; saved runs must be explicit
        let canonical = serde_json::to_value(&cfg).expect("config serializes");
        let mut missing = Vec::new();
        missing_keys(&canonical, &raw, String::new(), &mut missing);
        if let Some(m) = missing.first() {
            return Err(CliError::Config(format!("missing field `{m}`")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        std::fs::write(path, self.to_json() + "\n").map_err(|e| CliError::io(path, e))
    }

    pub fn target(&self) -> Target {
        Target::new(self.target.clone())
    }

    pub fn validate(&self) -> CliResult<()> {
        self.model.validate()?;
        self.train.validate()?;
        let target = self.target();
        target.validate()?;
        let bad = |m: String| Err(CliError::Config(m));
        if target.dim() != self.model.n_data {
            return bad(format!(
                "target `{}` has {} dimensions but the model has {}",
                target.name(),
                target.dim(),
                self.model.n_data
            ));
        }
        let v = self.variant;
        if v.is_augmented() != (self.model.m_aug > 0) {
            return bad(format!("variant {v} does not match model.m_aug = {}", self.model.m_aug));
        }
        if (v == Variant::KrnetOde) != self.model.ode.is_some() {
            return bad(format!("variant {v} does not match model.ode"));
        }
        let rn = matches!(v, Variant::KrnetRn | Variant::KrnetAugRn);
        if rn != (self.model.use_rotation && self.model.use_cdf)
            || (!rn && (self.model.use_rotation || self.model.use_cdf))
        {
            return bad(format!("variant {v} does not match model.use_rotation / model.use_cdf"));
        }
        if self.runs == 0 {
            return bad("runs must be positive".into());
        }
        if self.eval.samples == 0 {
            return bad("eval.samples must be positive".into());
        }
        Ok(())
    }

    pub fn expect_mode(&self, mode: TrainMode) -> CliResult<()> {
        if self.train.mode != mode {
            return Err(CliError::Config(format!(
                "train.mode is {:?}, this command needs {:?}",
                self.train.mode, mode
            )));
        }
        Ok(())
    }

    /// SHA-256 of the configuration without `seed`, `runs` and `out`, so
    /// runs that differ only by seed share a hash.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(m) = &mut v {
            m.remove("seed");
            m.remove("runs");
            m.remove("out");
        }
        let digest = Sha256::digest(v.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Seed of the `r`-th run.
    pub fn run_seed(&self, r: usize) -> u64 {
        self.seed.wrapping_add(r as u64)
    }
}

fn missing_keys(canonical: &Value, raw: &Value, path: String, out: &mut Vec<String>) {
    if let (Value::Object(c), Value::Object(r)) = (canonical, raw) {
        for (k, cv) in c {
            let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
            match r.get(k) {
                None => out.push(p),
                Some(rv) => missing_keys(cv, rv, p, out),
            }
        }
    }
}

/// Command-line overrides applied on top of a loaded configuration.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub runs: Option<usize>,
    pub grad_path: Option<krnet_core::GradPath>,
    pub epochs: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(r) = self.runs {
            cfg.runs = r;
        }
        if let Some(g) = self.grad_path {
            cfg.train.grad_path = g;
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
    }
}
