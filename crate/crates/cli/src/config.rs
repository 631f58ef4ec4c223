//! Run configuration: built-in defaults, overridden by a TOML file, overridden
//! by command-line flags. Every file key can also be given on the command line
//! with `--set section.key=value`.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rainsep_core::network::NetworkConfig;
use rainsep_core::rainsynth::{BlendMode, RainParamRanges};
use rainsep_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

pub const DEVICE_ENV: &str = "RAINSEP_DEVICE";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub count: usize,
    pub mode: BlendMode,
    pub crop: usize,
    /// Directory of clean PNG backgrounds; procedural backgrounds when unset.
    pub backgrounds: Option<PathBuf>,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self { count: 10_400, mode: BlendMode::Screen, crop: 224, backgrounds: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub sizes: Vec<usize>,
    pub warmup: usize,
    pub runs: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self { sizes: vec![250, 500], warmup: 2, runs: 10 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub device: Option<String>,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub rain: RainParamRanges,
    pub synth: SynthSection,
    pub bench: BenchSection,
}

/// Parses `value` as a TOML literal, falling back to a bare string.
fn parse_value(value: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(value.to_string()))
}

/// Sets a dotted key such as `train.batch` inside `table`.
pub fn set_key(table: &mut Table, dotted: &str, value: Value) -> Result<()> {
    let mut parts: Vec<&str> = dotted.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| anyhow!("empty key in `{dotted}`"))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| anyhow!("`{p}` in `{dotted}` is not a section"))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Applies one `key=value` override.
pub fn apply_assignment(table: &mut Table, assignment: &str) -> Result<()> {
    let (key, value) =
        assignment.split_once('=').ok_or_else(|| anyhow!("override `{assignment}` is not of the form key=value"))?;
    set_key(table, key.trim(), parse_value(value.trim()))
}

pub fn load_table(path: Option<&Path>) -> Result<Table> {
    match path {
        None => Ok(Table::new()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
        }
    }
}

impl RunConfig {
    /// Deserializes and validates a merged table. Unknown keys are errors.
    pub fn from_table(table: Table) -> Result<Self> {
        let mut cfg: RunConfig = Value::Table(table).try_into().context("invalid configuration")?;
        if let Some(seed) = cfg.seed {
            cfg.train.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()?;
        self.rain.validate()?;
        if self.synth.count == 0 {
            bail!("synth.count must be at least 1");
        }
        if self.synth.crop < self.rain.streak_length.1 as usize {
            bail!("synth.crop {} is shorter than the longest streak ({})", self.synth.crop, self.rain.streak_length.1);
        }
        if self.bench.runs == 0 || self.bench.sizes.is_empty() {
            bail!("bench needs at least one run and one size");
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(self.train.seed)
    }

    /// Device label after resolution. Only the CPU backend exists, so any
    /// other request falls back to it with a warning.
    pub fn resolve_device(&self) -> String {
        let requested = self.device.clone().or_else(|| std::env::var(DEVICE_ENV).ok()).unwrap_or_else(|| "cpu".into());
        if !requested.eq_ignore_ascii_case("cpu") {
            log::warn!("device `{requested}` is not available; using the CPU");
        }
        rainsep_core::metrics::cpu_device_label()
    }

    /// One-line summary of the training hyperparameters.
    pub fn train_header(&self) -> String {
        let t = &self.train;
        let schedule: Vec<String> = t.lr_schedule.0.iter().map(|(i, lr)| format!("{i}:{lr:e}")).collect();
        format!(
            "batch={} patch={} optimizer=sgd momentum={} weight_decay={:e} lr_schedule=[{}] max_iter={} \
             finetune_iter={} finetune_lr={:e} d_steps_per_g={} seed={} checkpoint_every={}",
            t.batch,
            t.patch,
            t.momentum,
            t.weight_decay,
            schedule.join(", "),
            t.max_iter,
            t.finetune_iter,
            t.finetune_lr,
            t.d_steps_per_g,
            t.seed,
            t.checkpoint_every
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let cfg = RunConfig::from_table(Table::new()).unwrap();
        assert_eq!(cfg.train.batch, 8);
        assert!(cfg.train_header().contains("lr_schedule=[0:1e-3, 70000:1e-4]"));
    }

    #[test]
    fn overrides_and_unknown_keys() {
        let mut t: Table = toml::from_str("[train]\nbatch = 4\n").unwrap();
        apply_assignment(&mut t, "train.max_iter=20").unwrap();
        apply_assignment(&mut t, "synth.mode=additive").unwrap();
        let cfg = RunConfig::from_table(t).unwrap();
        assert_eq!((cfg.train.batch, cfg.train.max_iter), (4, 20));
        assert_eq!(cfg.synth.mode, BlendMode::Additive);

        let mut bad = Table::new();
        apply_assignment(&mut bad, "train.bacth=4").unwrap();
        assert!(RunConfig::from_table(bad).is_err());
        let mut bad = Table::new();
        apply_assignment(&mut bad, "colour=1").unwrap();
        assert!(RunConfig::from_table(bad).is_err());
    }
}
