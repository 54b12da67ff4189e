//! Checkpoint files: a plain-text metadata header, a `---` separator, then a
//! JSON body whose parameter blocks are base64-encoded little-endian `f64`.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use krnet_core::flow::FlowModel;
use krnet_core::numkit::{RngSnapshot, RngState};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "KRNET-CHECKPOINT";
const SEPARATOR: &str = "---";

/// Parameters of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamBlock {
    pub layer: usize,
    pub kind: String,
    pub offset: usize,
    pub len: usize,
    /// Base64 of `len` little-endian `f64` values.
    pub data: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ExperimentConfig,
    pub config_hash: String,
    /// Seed of the run that produced the parameters.
    pub seed: u64,
    pub epoch: usize,
    pub rng: RngSnapshot,
    /// Whether data-dependent initialization has run.
    pub initialized: bool,
    pub blocks: Vec<ParamBlock>,
}

pub fn encode_f64(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    STANDARD.encode(bytes)
}

pub fn decode_f64(text: &str) -> CliResult<Vec<f64>> {
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| CliError::Checkpoint(format!("bad base64: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(CliError::Checkpoint("parameter block is not a whole number of f64".into()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

impl Checkpoint {
    pub fn new(
        config: &ExperimentConfig,
        model: &FlowModel<f64>,
        seed: u64,
        epoch: usize,
        rng: &RngState,
    ) -> Self {
        let blocks = model
            .owning_layers()
            .into_iter()
            .map(|i| {
                let r = model.param_range(i);
                ParamBlock {
                    layer: i,
                    kind: model.layers()[i].kind().to_string(),
                    offset: r.start,
                    len: r.len(),
                    data: encode_f64(&model.params()[r]),
                }
            })
            .collect();
        Checkpoint {
            format_version: FORMAT_VERSION,
            config: config.clone(),
            config_hash: config.hash(),
            seed,
            epoch,
            rng: rng.snapshot(),
            initialized: model.is_initialized(),
            blocks,
        }
    }

    /// Rebuilds the model with the stored parameters.
    pub fn model(&self) -> CliResult<FlowModel<f64>> {
        let mut m = FlowModel::<f64>::build_with(&self.config.model, &RngState::new(self.seed), self.config.init)?;
        let mut params = m.params().to_vec();
        let mut covered = vec![false; params.len()];
        for b in &self.blocks {
            if b.layer >= m.n_layers() || m.param_range(b.layer) != (b.offset..b.offset + b.len) {
                return Err(CliError::Checkpoint(format!(
                    "block for layer {} does not fit the configured model",
                    b.layer
                )));
            }
            if m.layers()[b.layer].kind() != b.kind {
                return Err(CliError::Checkpoint(format!(
                    "layer {} is {} in the model but {} in the file",
                    b.layer,
                    m.layers()[b.layer].kind(),
                    b.kind
                )));
            }
            let v = decode_f64(&b.data)?;
            if v.len() != b.len {
                return Err(CliError::Checkpoint(format!("layer {} block has {} values", b.layer, v.len())));
            }
            params[b.offset..b.offset + b.len].copy_from_slice(&v);
            covered[b.offset..b.offset + b.len].iter_mut().for_each(|c| *c = true);
        }
        if let Some(i) = covered.iter().position(|c| !c) {
            return Err(CliError::Checkpoint(format!("parameter {i} missing from the file")));
        }
        m.set_params(&params)?;
        if self.initialized {
            m.mark_initialized();
        }
        Ok(m)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(MAGIC);
        s.push('\n');
        s.push_str(&format!("format_version: {}\n", self.format_version));
        s.push_str(&format!("variant: {}\n", self.config.variant));
        s.push_str(&format!("target: {}\n", self.config.target().name()));
        s.push_str(&format!("config_hash: {}\n", self.config_hash));
        s.push_str(&format!("seed: {}\n", self.seed));
        s.push_str(&format!("epoch: {}\n", self.epoch));
        s.push_str(SEPARATOR);
        s.push('\n');
        s.push_str(&serde_json::to_string_pretty(self).expect("checkpoint serializes"));
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> CliResult<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(MAGIC) {
            return Err(CliError::Checkpoint("not a checkpoint file".into()));
        }
        let mut header_version = None;
        let mut header_hash = None;
        let mut consumed = MAGIC.len() + 1;
        for line in lines.by_ref() {
            consumed += line.len() + 1;
            if line == SEPARATOR {
                break;
            }
            if let Some((k, v)) = line.split_once(": ") {
                match k {
                    "format_version" => header_version = Some(v.to_string()),
                    "config_hash" => header_hash = Some(v.to_string()),
                    _ => {}
                }
            }
        }
        let version = header_version.ok_or_else(|| CliError::Checkpoint("header lacks format_version".into()))?;
        if version != FORMAT_VERSION.to_string() {
            return Err(CliError::Checkpoint(format!("unsupported format_version {version}")));
        }
        let body = text.get(consumed..).unwrap_or("");
        let ck: Checkpoint =
            serde_json::from_str(body).map_err(|e| CliError::Checkpoint(format!("body: {e}")))?;
        if ck.format_version != FORMAT_VERSION {
            return Err(CliError::Checkpoint(format!(
                "unsupported format_version {}",
                ck.format_version
            )));
        }
        ck.config.validate()?;
        if ck.config_hash != ck.config.hash() || header_hash.as_deref() != Some(ck.config_hash.as_str()) {
            return Err(CliError::Checkpoint("config hash does not match the stored config".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        std::fs::write(path, self.to_text()).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_text(&text)
    }
}
