//! On-disk model checkpoints: config, seed and the flat parameter vector,
//! guarded by a SHA-256 checksum over the little-endian parameter bytes.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "zsda-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint<C> {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub config: C,
    pub seed: u64,
    pub trained_steps: u64,
    pub num_params: usize,
    /// Hex SHA-256 of the parameters as little-endian `f64` bytes.
    pub checksum: String,
    /// Base64 of the same bytes.
    pub params: String,
}

fn param_bytes(params: &[f64]) -> Vec<u8> {
    params.iter().flat_map(|p| p.to_le_bytes()).collect()
}

pub fn params_checksum(params: &[f64]) -> String {
    hex_digest(&param_bytes(params))
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

impl<C: Serialize + DeserializeOwned> Checkpoint<C> {
    pub fn new(kind: &str, config: C, seed: u64, trained_steps: u64, params: &[f64]) -> Self {
        let bytes = param_bytes(params);
        Self {
            format: CHECKPOINT_FORMAT.to_owned(),
            version: CHECKPOINT_VERSION,
            kind: kind.to_owned(),
            config,
            seed,
            trained_steps,
            num_params: params.len(),
            checksum: hex_digest(&bytes),
            params: BASE64.encode(bytes),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Load and verify format, kind, length and checksum.
    pub fn load(path: &Path, kind: &str) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "{}: unsupported checkpoint {} v{}",
                path.display(),
                ckpt.format,
                ckpt.version
            )));
        }
        if ckpt.kind != kind {
            return Err(Error::Format(format!(
                "{}: expected a {kind} checkpoint, found {}",
                path.display(),
                ckpt.kind
            )));
        }
        let params = ckpt.decode_params()?;
        let found = params_checksum(&params);
        if found != ckpt.checksum || params.len() != ckpt.num_params {
            return Err(Error::Checksum {
                path: path.to_owned(),
                expected: ckpt.checksum.clone(),
                found,
            });
        }
        Ok(ckpt)
    }

    pub fn decode_params(&self) -> Result<Vec<f64>> {
        let bytes = BASE64
            .decode(&self.params)
            .map_err(|e| Error::Format(format!("checkpoint parameters: {e}")))?;
        if bytes.len() % 8 != 0 {
            return Err(Error::Format("checkpoint parameter bytes not a multiple of 8".into()));
        }
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }
}
