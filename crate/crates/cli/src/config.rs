//! Run configuration: defaults, JSON file, then `--set` and flag overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use tide_core::diag::{Accumulation, MassSource};
use tide_core::toydit::{MethodPreset, ToyDitConfig};

use crate::error::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Overrides `model.seed` when set.
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    /// Weight file to load instead of seeded random init.
    pub weights: Option<PathBuf>,
    pub model: ToyDitConfig,
    pub schedule: ScheduleConfig,
    pub analyze: AnalyzeConfig,
    pub sample: SampleConfig,
    pub bench: BenchConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    /// Target latent grid for the timestep table.
    pub grid: [usize; 2],
    /// Extrapolation scales for the bias table.
    pub scales: Vec<f64>,
    /// Image-token counts for the shift table.
    pub tokens: Vec<usize>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            grid: [64, 64],
            scales: (1..=8).map(f64::from).collect(),
            tokens: vec![256, 1024, 4096, 16384, 65536],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyzeConfig {
    pub resolutions: Vec<[usize; 2]>,
    pub source: MassSource,
    pub accumulate: Accumulation,
    /// Also write un-normalized maps.
    pub absolute_maps: bool,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        Self {
            resolutions: vec![[16, 16], [32, 32], [64, 64]],
            source: MassSource::Toy,
            accumulate: Accumulation::default(),
            absolute_maps: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub grid: [usize; 2],
    pub presets: Vec<MethodPreset>,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            grid: [32, 32],
            presets: vec![
                MethodPreset::Direct,
                MethodPreset::Yarn,
                MethodPreset::DynamicGlobal,
                MethodPreset::Tide,
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    /// Joint sequence lengths.
    pub lengths: Vec<usize>,
    /// Query rows timed per length.
    pub rows: usize,
    pub repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            lengths: vec![512, 2048, 8192],
            rows: 256,
            repeats: 3,
        }
    }
}

impl RunConfig {
    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(self.model.seed)
    }

    /// Model config with the top-level seed applied.
    pub fn model(&self) -> ToyDitConfig {
        ToyDitConfig {
            seed: self.seed(),
            ..self.model.clone()
        }
    }
}

/// Layers `file`, then each `key=value` in `sets`, over the defaults.
pub fn load(file: Option<&Path>, sets: &[String]) -> Result<RunConfig, CliError> {
    let mut value = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)?;
        let overlay: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if !overlay.is_object() {
            return Err(CliError::Config(format!(
                "{}: top level must be an object",
                path.display()
            )));
        }
        merge(&mut value, overlay);
    }
    for s in sets {
        apply_set(&mut value, s)?;
    }
    serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// `a.b.c=value`; the value is parsed as JSON, or taken as a string.
fn apply_set(root: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--set expects key=value, got `{assignment}`")))?;
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(CliError::Config(format!(
            "--set has an empty key in `{assignment}`"
        )));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let obj = match node {
            Value::Object(m) => m,
            Value::Null => {
                *node = Value::Object(Map::new());
                node.as_object_mut().unwrap()
            }
            _ => {
                return Err(CliError::Config(format!(
                    "--set {path}: `{}` is not an object",
                    keys[..i].join(".")
                )))
            }
        };
        if i + 1 == keys.len() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        node = obj.entry(key.to_string()).or_insert(Value::Null);
    }
    unreachable!()
}
