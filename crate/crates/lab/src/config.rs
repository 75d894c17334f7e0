//! Experiment configuration: TOML documents, preset composition, key
//! overrides, canonical serialization and hashing.
//!
//! Precedence is flag > file > default: a document is the deep merge of the
//! files it extends, then its own keys, then `--set key=value` overrides;
//! keys still absent take the serde defaults of the core types.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use alp_core::diagnostics::EnvelopeSpec;
use alp_core::engines::MismatchModel;
use alp_core::objectives::{Method, ObjectiveConfig};
use alp_core::policy::{PerturbationSpec, PolicyConfig};
use alp_core::tasks::TaskSpec;
use alp_core::trainer::{Setup, TrainerConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::error::{io_at, LabError, Result};
use crate::presets;

/// Environment variable naming the root directory for relative output paths.
pub const OUTPUT_ROOT_ENV: &str = "ALPLAB_OUTPUT_ROOT";

/// Diagnostics and artifact settings of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsConfig {
    pub envelope: EnvelopeSpec,
    /// Iterations between envelope tables; the last iteration always gets one.
    pub envelope_every: usize,
    /// Iterations between checkpoints; the last iteration always gets one.
    pub checkpoint_every: usize,
    /// Prompts in the final pass@k evaluation.
    pub eval_prompts: usize,
    /// Samples per prompt in the final pass@k evaluation.
    pub pass_k_samples: usize,
    /// Moving-average window of the emitted smoothed reward series.
    pub smoothing_window: usize,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            envelope: EnvelopeSpec::default(),
            envelope_every: 10,
            checkpoint_every: 50,
            eval_prompts: 64,
            pass_k_samples: 8,
            smoothing_window: 10,
        }
    }
}

impl DiagnosticsConfig {
    pub fn validate(&self) -> Result<()> {
        self.envelope.validate()?;
        if self.envelope_every == 0 || self.checkpoint_every == 0 || self.smoothing_window == 0 {
            return Err(LabError::Config("envelope_every, checkpoint_every and smoothing_window must be positive".into()));
        }
        if self.eval_prompts == 0 || self.pass_k_samples == 0 {
            return Err(LabError::Config("pass@k evaluation needs prompts and samples".into()));
        }
        Ok(())
    }
}

/// Grid of variants expanded into one run per entry and seed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub methods: Vec<Method>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub perturbations: Vec<PerturbationSpec>,
}

impl Sweep {
    pub fn is_empty(&self) -> bool {
        self.methods.is_empty() && self.perturbations.is_empty()
    }
}

/// A complete experiment. `seeds` overrides `trainer.seed` run by run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Parent of the run directories; relative paths resolve against the
    /// output root.
    pub output_dir: String,
    pub seeds: Vec<u64>,
    pub policy: PolicyConfig,
    pub task: TaskSpec,
    pub trainer: TrainerConfig,
    pub objective: ObjectiveConfig,
    pub mismatch: MismatchModel,
    pub perturbation: PerturbationSpec,
    pub diagnostics: DiagnosticsConfig,
    #[serde(default, skip_serializing_if = "Sweep::is_empty")]
    pub sweep: Sweep,
}

/// Short label of a perturbation target set.
pub fn perturbation_label(p: &PerturbationSpec) -> String {
    match p {
        PerturbationSpec::None => "none".into(),
        PerturbationSpec::AllLayers => "all".into(),
        PerturbationSpec::LayerBand { lo, hi } => format!("band{lo}-{hi}"),
        PerturbationSpec::LogitsOnly => "logits".into(),
    }
}

/// One fully resolved run: a single method, perturbation and seed.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSpec {
    pub label: String,
    pub config: ExperimentConfig,
    pub dir: PathBuf,
}

impl ExperimentConfig {
    /// Parses a TOML document that has no `extends` key.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: Table = text.parse()?;
        Self::from_table(table)
    }

    pub fn from_table(table: Table) -> Result<Self> {
        if table.contains_key("extends") {
            return Err(LabError::Config("unresolved `extends` key".into()));
        }
        Ok(Value::Table(table).try_into()?)
    }

    /// Byte-exact serialized form; run directories store exactly this text.
    pub fn canonical_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// SHA-256 of [`Self::canonical_toml`], lowercase hex.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(self.canonical_toml()?.as_bytes()))
    }

    pub fn setup(&self) -> Setup {
        Setup {
            trainer: self.trainer.clone(),
            objective: self.objective.clone(),
            mismatch: self.mismatch.clone(),
            task: self.task.clone(),
            perturbation: self.perturbation.clone(),
            envelope: self.diagnostics.envelope.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.output_dir.is_empty() {
            return Err(LabError::Config("name and output_dir must be nonempty".into()));
        }
        if self.seeds.is_empty() {
            return Err(LabError::Config("seed list is empty".into()));
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return Err(LabError::Config("seed list has duplicates".into()));
        }
        self.diagnostics.validate()?;
        for spec in self.expand_unrooted() {
            spec.config.setup().validate(&spec.config.policy)?;
        }
        Ok(())
    }

    fn expand_unrooted(&self) -> Vec<RunSpec> {
        let methods = if self.sweep.methods.is_empty() { vec![self.objective.method] } else { self.sweep.methods.clone() };
        let perturbations = if self.sweep.perturbations.is_empty() {
            vec![self.perturbation.clone()]
        } else {
            self.sweep.perturbations.clone()
        };
        let mut out = Vec::new();
        for &m in &methods {
            for p in &perturbations {
                for &seed in &self.seeds {
                    let mut c = self.clone();
                    c.objective.method = m;
                    c.perturbation = p.clone();
                    c.seeds = vec![seed];
                    c.trainer.seed = seed;
                    c.sweep = Sweep::default();
                    let mut label = m.name().to_string();
                    if perturbations.len() > 1 {
                        label.push('-');
                        label.push_str(&perturbation_label(p));
                    }
                    label.push_str(&format!("-seed{seed}"));
                    out.push(RunSpec {
                        dir: PathBuf::from(&label),
                        label,
                        config: c,
                    });
                }
            }
        }
        out
    }

    /// One run per sweep entry and seed, placed under `root/output_dir`.
    pub fn expand(&self, root: &Path) -> Result<Vec<RunSpec>> {
        self.validate()?;
        let base = resolve_output(root, &self.output_dir);
        Ok(self
            .expand_unrooted()
            .into_iter()
            .map(|mut s| {
                s.dir = base.join(&s.dir);
                s
            })
            .collect())
    }
}

/// Output root: the explicit value, else the environment variable, else `.`.
pub fn output_root(explicit: Option<&Path>) -> PathBuf {
    match explicit {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(".")),
    }
}

fn resolve_output(root: &Path, dir: &str) -> PathBuf {
    let p = Path::new(dir);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Recursively merges `over` into `base`; tables merge, everything else
/// replaces.
pub fn deep_merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => deep_merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Where an `extends` entry is looked up.
#[derive(Clone, Debug)]
enum Origin {
    Preset,
    File(PathBuf),
}

fn resolve_document(text: &str, origin: Origin, depth: usize) -> Result<Table> {
    if depth > 16 {
        return Err(LabError::Config("`extends` chain is too deep".into()));
    }
    let mut own: Table = text.parse()?;
    let parents = match own.remove("extends") {
        None => Vec::new(),
        Some(Value::String(s)) => vec![s],
        Some(Value::Array(a)) => a
            .into_iter()
            .map(|v| match v {
                Value::String(s) => Ok(s),
                _ => Err(LabError::Config("`extends` entries must be strings".into())),
            })
            .collect::<Result<_>>()?,
        Some(_) => return Err(LabError::Config("`extends` must be a string or a list of strings".into())),
    };
    let mut merged = Table::new();
    for p in parents {
        let parent = if let Some(t) = presets::get(&p) {
            resolve_document(t, Origin::Preset, depth + 1)?
        } else {
            let path = match &origin {
                Origin::File(f) => f.parent().unwrap_or(Path::new(".")).join(&p),
                Origin::Preset => return Err(LabError::Config(format!("unknown preset `{p}`"))),
            };
            let t = std::fs::read_to_string(&path).map_err(|_| LabError::Config(format!("cannot read extended file {}", path.display())))?;
            resolve_document(&t, Origin::File(path), depth + 1)?
        };
        deep_merge(&mut merged, parent);
    }
    deep_merge(&mut merged, own);
    Ok(merged)
}

/// Parses `key.path=value`; the value is read as TOML and falls back to a
/// bare string.
pub fn parse_override(s: &str) -> Result<(Vec<String>, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| LabError::Config(format!("override `{s}` is not key=value")))?;
    let path: Vec<String> = k.trim().split('.').map(str::to_string).collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(LabError::Config(format!("bad override key `{k}`")));
    }
    let v = v.trim();
    let value = match format!("v = {v}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(v.to_string()),
    };
    Ok((path, value))
}

pub fn apply_override(table: &mut Table, path: &[String], value: Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("nonempty path");
    let mut t = table;
    for p in parents {
        let entry = t.entry(p.clone()).or_insert_with(|| Value::Table(Table::new()));
        t = match entry {
            Value::Table(t) => t,
            _ => return Err(LabError::Config(format!("override path crosses non-table key `{p}`"))),
        };
    }
    t.insert(last.clone(), value);
    Ok(())
}

/// Where an experiment document comes from.
#[derive(Clone, Debug)]
pub enum Source {
    Preset(String),
    File(PathBuf),
}

/// Resolves a document, applies overrides and parses the result.
pub fn load(source: &Source, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut table = match source {
        Source::Preset(name) => {
            let text = presets::get(name).ok_or_else(|| LabError::Config(format!("unknown preset `{name}`")))?;
            resolve_document(text, Origin::Preset, 0)?
        }
        Source::File(path) => {
            let text = std::fs::read_to_string(path).map_err(io_at(path))?;
            resolve_document(&text, Origin::File(path.clone()), 0)?
        }
    };
    for o in overrides {
        let (path, value) = parse_override(o)?;
        apply_override(&mut table, &path, value)?;
    }
    let cfg = ExperimentConfig::from_table(table)?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn override_values_are_typed() {
        let (p, v) = parse_override("trainer.lr_theta=3e-4").unwrap();
        assert_eq!(p, vec!["trainer", "lr_theta"]);
        assert_eq!(v, Value::Float(3e-4));
        let (_, v) = parse_override("objective.method=seq-alp").unwrap();
        assert_eq!(v, Value::String("seq-alp".into()));
        let (_, v) = parse_override("seeds=[1, 2]").unwrap();
        assert_eq!(v.as_array().unwrap().len(), 2);
        assert!(parse_override("novalue").is_err());
    }

    #[test]
    fn merge_is_recursive() {
        let mut a: Table = "x = 1\n[t]\na = 1\nb = 2".parse().unwrap();
        let b: Table = "[t]\nb = 3".parse().unwrap();
        deep_merge(&mut a, b);
        assert_eq!(a["t"]["a"].as_integer(), Some(1));
        assert_eq!(a["t"]["b"].as_integer(), Some(3));
        assert_eq!(a["x"].as_integer(), Some(1));
    }
}
