//! Layered configuration: built-in defaults, then the TOML file, then
//! `SEGRL_` environment variables, then command-line flags.
//!
//! Environment keys name a config path with `__` between levels, e.g.
//! `SEGRL_TRAIN__LEARNING_RATE=0.5` or `SEGRL_ENV__SERIES_LEN=256`.

use std::path::Path;

use segrl_core::eval::ControllerMode;
use segrl_core::optimize::{EvalDecoding, TrainConfig};
use segrl_core::synthenv::{EnvConfig, OracleParams};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::Failure;

pub const ENV_PREFIX: &str = "SEGRL_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenSection {
    pub seed: u64,
    pub count: usize,
}

impl Default for GenSection {
    fn default() -> Self {
        GenSection { seed: 0, count: 1000 }
    }
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReasonerKind {
    #[default]
    Policy,
    Oracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub controller: ControllerMode,
    pub reasoner: ReasonerKind,
    pub oracle: OracleParams,
    pub decoding: EvalDecoding,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            controller: ControllerMode::Policy,
            reasoner: ReasonerKind::Policy,
            oracle: OracleParams::default(),
            decoding: EvalDecoding::Sampled,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    /// Worker threads; 0 lets the pool decide, 1 runs sequentially.
    pub workers: usize,
    pub gen: GenSection,
    pub env: EnvConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

impl Default for FileConfig {
    fn default() -> Self {
        FileConfig {
            workers: 0,
            gen: GenSection::default(),
            env: EnvConfig::default(),
            train: TrainConfig::desk(),
            eval: EvalSection::default(),
        }
    }
}

impl FileConfig {
    /// Defaults overlaid with `file` and then with the `SEGRL_` entries of `env`.
    pub fn load(file: Option<&Path>, env: &[(String, String)]) -> Result<Self, Failure> {
        let mut value = Value::try_from(FileConfig::default()).map_err(|e| Failure::config(e.to_string()))?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::config(format!("cannot read {}: {e}", path.display())))?;
            let table: Table =
                toml::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
            merge(&mut value, Value::Table(table));
        }
        let mut overrides: Vec<&(String, String)> = env.iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        overrides.sort();
        for (key, raw) in overrides {
            let path: Vec<String> = key[ENV_PREFIX.len()..].split("__").map(str::to_lowercase).collect();
            set_path(&mut value, &path, scalar(raw)).map_err(|m| Failure::config(format!("{key}: {m}")))?;
        }
        value.try_into().map_err(|e: toml::de::Error| Failure::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), Failure> {
        self.env.validate().map_err(|e| Failure::config(e.to_string()))?;
        self.train.validate().map_err(|e| Failure::config(e.to_string()))?;
        let o = &self.eval.oracle;
        if !((0.0..=1.0).contains(&o.theta) && (0.0..=1.0).contains(&o.p_hi)) {
            return Err(Failure::config("eval.oracle theta and p_hi must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Table(b), Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// TOML literal when the text parses as one, otherwise a bare string.
fn scalar(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_path(root: &mut Value, path: &[String], v: Value) -> Result<(), String> {
    let (last, parents) = path.split_last().ok_or("empty key")?;
    let mut node = root;
    for p in parents {
        node = node
            .as_table_mut()
            .ok_or_else(|| format!("{p} is not a section"))?
            .entry(p.clone())
            .or_insert_with(|| Value::Table(Table::new()));
    }
    node.as_table_mut().ok_or_else(|| format!("{last} has no parent section"))?.insert(last.clone(), v);
    Ok(())
}
