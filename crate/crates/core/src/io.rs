//! Checkpoint files and the line-delimited metrics log.
//!
//! A checkpoint is a one-line header carrying a SHA-256 digest followed by a
//! JSON payload; the digest covers the payload bytes exactly as written.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::optimize::{MetricsRecord, OptimizerState, TrainConfig};
use crate::policy::{ToyGridPolicy, ToyLayout};

pub const CHECKPOINT_MAGIC: &str = "segrl-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub step: u64,
    pub layout: ToyLayout,
    pub params: Vec<f64>,
    pub reference: Vec<f64>,
    pub optimizer: OptimizerState,
    pub config: TrainConfig,
}

impl Checkpoint {
    pub fn policy(&self) -> Result<ToyGridPolicy> {
        ToyGridPolicy::from_params(self.layout, self.params.clone())
            .map_err(|e| Error::IncompatibleCheckpoint(e.to_string()))
    }

    pub fn reference_policy(&self) -> Result<ToyGridPolicy> {
        ToyGridPolicy::from_params(self.layout, self.reference.clone())
            .map_err(|e| Error::IncompatibleCheckpoint(e.to_string()))
    }

    /// Fails unless a run configured as `cfg` may continue from here.
    pub fn check_compatible(&self, cfg: &TrainConfig) -> Result<()> {
        if self.config.compatibility_key() != cfg.compatibility_key() {
            return Err(Error::IncompatibleCheckpoint(
                "training configuration differs from the checkpointed run".into(),
            ));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let payload = serde_json::to_vec(self)?;
        let mut out = format!("{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION} sha256={}\n", hex(&Sha256::digest(&payload)))
            .into_bytes();
        out.extend_from_slice(&payload);
        out.push(b'\n');
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
        let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| corrupt("missing header line"))?;
        let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| corrupt("header is not text"))?;
        let mut parts = header.split(' ');
        if parts.next() != Some(CHECKPOINT_MAGIC) {
            return Err(corrupt("not a checkpoint file"));
        }
        let version = parts
            .next()
            .and_then(|v| v.strip_prefix('v'))
            .and_then(|v| v.parse::<u32>().ok())
            .ok_or_else(|| corrupt("unreadable version"))?;
        let digest = parts
            .next()
            .and_then(|d| d.strip_prefix("sha256="))
            .ok_or_else(|| corrupt("missing digest"))?;
        let mut payload = &bytes[nl + 1..];
        if let Some(stripped) = payload.strip_suffix(b"\n") {
            payload = stripped;
        }
        if hex(&Sha256::digest(payload)) != digest {
            return Err(corrupt("digest mismatch"));
        }
        if version != CHECKPOINT_VERSION {
            return Err(Error::IncompatibleCheckpoint(format!(
                "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let ckpt: Checkpoint =
            serde_json::from_slice(payload).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        if ckpt.params.len() != ckpt.layout.num_params() || ckpt.reference.len() != ckpt.layout.num_params() {
            return Err(Error::IncompatibleCheckpoint("parameter count does not match layout".into()));
        }
        Ok(ckpt)
    }

    /// Writes atomically through a sibling temporary file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Appends records to a line-delimited log.
pub struct MetricsWriter {
    file: File,
}

impl MetricsWriter {
    pub fn append(path: &Path) -> Result<Self> {
        Ok(MetricsWriter { file: OpenOptions::new().create(true).append(true).open(path)? })
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        let mut line = serde_json::to_vec(record)?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.flush()?;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Drops records past `step` so a resumed run can append without gaps or
/// duplicates. A missing file is left missing.
pub fn truncate_metrics(path: &Path, step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(path)?;
    let mut kept = String::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let rec: MetricsRecord = serde_json::from_str(line)?;
        if rec.step <= step {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept)?;
    Ok(())
}
