//! Executes one resolved run: training loop, metrics CSV, envelope tables,
//! checkpoints, pass@k and the manifest.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use alp_core::diagnostics::{self, Envelope, EnvelopeSpec, IterationMetrics};
use alp_core::engines::{self, RolloutBatch, RolloutConfig};
use alp_core::policy::{PolicyConfig, PolicyParams};
use alp_core::tasks;
use alp_core::trainer::RunState;
use serde::{Deserialize, Serialize};

use crate::config::{sha256_hex, ExperimentConfig, RunSpec};
use crate::error::{io_at, LabError, Result};

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const METRICS_PARTIAL: &str = "metrics.csv.partial";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PASSK_FILE: &str = "passk.csv";
pub const ENVELOPE_DIR: &str = "envelopes";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// Version string recorded in manifests.
pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Completed,
    Diverged,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceInfo {
    pub iter: usize,
    pub update: usize,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub iterations: usize,
    /// Mean per-iteration reward over the final smoothing window.
    pub final_reward_mean: f64,
    /// Largest per-update 99th percentile of the method's `|log ratio|`.
    pub max_ratio_abs_p99: f64,
    pub final_entropy: f64,
    pub final_sigma: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub label: String,
    pub config_hash: String,
    pub code_version: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub seed: u64,
    pub method: String,
    pub status: RunStatus,
    pub divergence: Option<DivergenceInfo>,
    /// SHA-256 of the first iteration's rollout batch in JSONL form.
    pub first_rollout_sha256: Option<String>,
    pub summary: RunSummary,
    pub files: Vec<FileEntry>,
}

impl RunManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(io_at(&path))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Reads the exact config stored in a run directory.
pub fn read_run_config(dir: &Path) -> Result<ExperimentConfig> {
    let path = dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&path).map_err(io_at(&path))?;
    ExperimentConfig::from_toml_str(&text)
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// `ln π^D_θ − ln π^infer_θold` on the model tokens of a rollout batch, with
/// the matching rollout probabilities.
pub fn mismatch_log_ratios(params: &PolicyParams, batch: &RolloutBatch) -> Result<(Vec<f64>, Vec<f64>)> {
    let train = engines::eval_train_batch(params, batch.params_version + 1, batch)?;
    let (mut ratios, mut probs) = (Vec::new(), Vec::new());
    for (r, lp) in batch.responses.iter().zip(train) {
        for t in 0..r.response.len() {
            if r.roles[t].is_model() {
                ratios.push(lp.values[t] - r.infer_logprobs[t]);
                probs.push(r.infer_logprobs[t].exp());
            }
        }
    }
    Ok((ratios, probs))
}

/// Envelope of the mismatch log ratio between `params` and the engine that
/// produced `batch`, binned by rollout probability.
pub fn mismatch_envelope(params: &PolicyParams, batch: &RolloutBatch, spec: &EnvelopeSpec) -> Result<(Envelope, Option<f64>)> {
    let (ratios, probs) = mismatch_log_ratios(params, batch)?;
    let env = diagnostics::ratio_envelope(&ratios, &probs, spec)?;
    let p99 = diagnostics::lowest_bin_abs_p99(&ratios, &probs, spec)?;
    Ok((env, p99))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeRecord {
    pub iter: usize,
    pub lowest_bin_abs_p99: Option<f64>,
    pub envelope: Envelope,
}

/// `k ∈ {1, 2, 4, …}` up to and including `n`.
pub fn pass_k_grid(n: usize) -> Vec<usize> {
    let mut ks = Vec::new();
    let mut k = 1;
    while k < n {
        ks.push(k);
        k *= 2;
    }
    ks.push(n);
    ks
}

/// Per-prompt `(n, correct)` counts of the final policy on fresh prompts,
/// sampled from the serving engine.
pub fn evaluate_pass_counts(cfg: &ExperimentConfig, params: &PolicyParams, version: u64) -> Result<Vec<(usize, usize)>> {
    // disjoint from the training and held-out prompt streams
    let seed = cfg.trainer.seed ^ 0xE7A1_0000_0000_0000;
    let mut prompts = tasks::gen_prompts(&cfg.task, cfg.diagnostics.eval_prompts, seed)?;
    for p in prompts.iter_mut() {
        p.id |= 1 << 62;
    }
    let n = cfg.diagnostics.pass_k_samples;
    let rc = RolloutConfig {
        group_size: n,
        temperature: cfg.trainer.temperature,
        max_new: cfg.trainer.max_new,
        workers: cfg.trainer.workers,
        seed: seed ^ 0x5eed,
    };
    let batch = engines::rollout(params, version, &cfg.mismatch, &cfg.task, &prompts, &rc)?;
    Ok(batch
        .responses
        .chunks(n)
        .map(|g| (g.len(), g.iter().filter(|r| r.reward > 0.5).count()))
        .collect())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_at(&tmp))?;
    fs::rename(&tmp, path).map_err(io_at(path))
}

fn inventory(dir: &Path) -> Result<Vec<FileEntry>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<FileEntry>) -> Result<()> {
        let mut entries: Vec<_> = fs::read_dir(dir).map_err(io_at(dir))?.collect::<std::io::Result<_>>().map_err(io_at(dir))?;
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            let p = e.path();
            if p.is_dir() {
                walk(root, &p, out)?;
            } else if p.file_name().is_some_and(|n| n != MANIFEST_FILE) {
                let bytes = fs::read(&p).map_err(io_at(&p))?;
                out.push(FileEntry {
                    path: p.strip_prefix(root).unwrap_or(&p).to_string_lossy().into_owned(),
                    bytes: bytes.len() as u64,
                    sha256: sha256_hex(&bytes),
                });
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    Ok(out)
}

pub fn checkpoint_path(dir: &Path, iter: usize) -> PathBuf {
    dir.join(CHECKPOINT_DIR).join(format!("iter_{iter:05}.bin"))
}

/// Most recent checkpoint of a run directory.
pub fn latest_checkpoint(dir: &Path) -> Result<PathBuf> {
    let cdir = dir.join(CHECKPOINT_DIR);
    let mut found: Vec<PathBuf> = fs::read_dir(&cdir)
        .map_err(|_| LabError::MissingCheckpoint(cdir.display().to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "bin"))
        .collect();
    found.sort();
    found.pop().ok_or_else(|| LabError::MissingCheckpoint(cdir.display().to_string()))
}

pub fn load_checkpoint(policy: &PolicyConfig, path: &Path) -> Result<RunState> {
    if !path.is_file() {
        return Err(LabError::MissingCheckpoint(path.display().to_string()));
    }
    let a = alp_core::policy::TensorArchive::read(path)?;
    Ok(RunState::from_archive(policy, &a)?)
}

/// Outcome of [`execute`].
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub metrics: Vec<IterationMetrics>,
}

/// Runs the training loop and writes every artifact. A divergence abort is
/// recorded in the manifest and returned as `Ok` with status `Diverged`.
pub fn execute(spec: &RunSpec) -> Result<RunOutcome> {
    let cfg = &spec.config;
    cfg.validate()?;
    let dir = &spec.dir;
    if dir.join(MANIFEST_FILE).exists() || dir.join(METRICS_PARTIAL).exists() {
        return Err(LabError::Config(format!("run directory {} is already in use", dir.display())));
    }
    fs::create_dir_all(dir.join(ENVELOPE_DIR)).map_err(io_at(dir))?;
    fs::create_dir_all(dir.join(CHECKPOINT_DIR)).map_err(io_at(dir))?;
    let started_unix = now_unix();
    let text = cfg.canonical_toml()?;
    fs::write(dir.join(CONFIG_FILE), &text).map_err(io_at(dir.join(CONFIG_FILE)))?;

    let setup = cfg.setup();
    let mut state = RunState::init(&cfg.policy, &cfg.trainer)?;
    let partial = dir.join(METRICS_PARTIAL);
    let mut csv_out = csv::Writer::from_writer(BufWriter::new(File::create(&partial).map_err(io_at(&partial))?));
    csv_out.write_record(IterationMetrics::csv_header(&cfg.diagnostics.envelope.quantiles, cfg.policy.n_targets()))?;
    csv_out.flush().map_err(io_at(&partial))?;

    let mut all = Vec::new();
    let mut rewards = Vec::new();
    let mut first_rollout = None;
    let mut divergence = None;
    let total = cfg.trainer.total_iters;
    for it in 0..total {
        let out = match setup.run_iteration(&mut state) {
            Ok(o) => o,
            Err(alp_core::Error::Divergence { iter, update, reason }) => {
                divergence = Some(DivergenceInfo { iter, update, reason });
                break;
            }
            Err(e) => return Err(e.into()),
        };
        if it == 0 {
            first_rollout = Some(sha256_hex(out.prepared.batch.to_jsonl()?.as_bytes()));
        }
        for m in &out.metrics {
            csv_out.write_record(m.csv_row())?;
        }
        csv_out.flush().map_err(io_at(&partial))?;
        rewards.push(out.metrics.first().map(|m| m.reward_mean).unwrap_or(0.0));
        let last = it + 1 == total;
        if (it + 1) % cfg.diagnostics.envelope_every == 0 || last {
            let (envelope, p99) = mismatch_envelope(&state.params, &out.prepared.batch, &cfg.diagnostics.envelope)?;
            let rec = EnvelopeRecord {
                iter: it,
                lowest_bin_abs_p99: p99,
                envelope,
            };
            let path = dir.join(ENVELOPE_DIR).join(format!("iter_{it:05}.json"));
            write_atomic(&path, serde_json::to_string_pretty(&rec)?.as_bytes())?;
        }
        if (it + 1) % cfg.diagnostics.checkpoint_every == 0 || last {
            state.to_archive()?.write(&checkpoint_path(dir, it))?;
        }
        all.extend(out.metrics);
    }
    drop(csv_out);
    fs::rename(&partial, dir.join(METRICS_FILE)).map_err(io_at(dir.join(METRICS_FILE)))?;

    if divergence.is_none() {
        let counts = evaluate_pass_counts(cfg, &state.params, state.iter as u64)?;
        let mut w = csv::Writer::from_path(dir.join(PASSK_FILE))?;
        w.write_record(["method", "k", "pass_at_k"])?;
        for k in pass_k_grid(cfg.diagnostics.pass_k_samples) {
            let v = diagnostics::pass_at_k(&counts, k)?;
            w.write_record([cfg.objective.method.name().to_string(), k.to_string(), format!("{v}")])?;
        }
        w.flush().map_err(io_at(dir.join(PASSK_FILE)))?;
    }

    let window = cfg.diagnostics.smoothing_window.min(rewards.len()).max(1);
    let tail = &rewards[rewards.len().saturating_sub(window)..];
    let summary = RunSummary {
        iterations: rewards.len(),
        final_reward_mean: if tail.is_empty() { 0.0 } else { tail.iter().sum::<f64>() / tail.len() as f64 },
        max_ratio_abs_p99: all.iter().map(|m| m.ratio_abs_p99).fold(0.0, f64::max),
        final_entropy: all.last().map(|m| m.entropy).unwrap_or(0.0),
        final_sigma: state.params.perturb_log_sigma.iter().map(|l| l.exp()).collect(),
    };
    let manifest = RunManifest {
        label: spec.label.clone(),
        config_hash: sha256_hex(text.as_bytes()),
        code_version: CODE_VERSION.to_string(),
        started_unix,
        finished_unix: now_unix(),
        seed: cfg.trainer.seed,
        method: cfg.objective.method.name().to_string(),
        status: if divergence.is_some() { RunStatus::Diverged } else { RunStatus::Completed },
        divergence,
        first_rollout_sha256: first_rollout,
        summary,
        files: inventory(dir)?,
    };
    write_atomic(&dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(RunOutcome {
        dir: dir.clone(),
        manifest,
        metrics: all,
    })
}

/// Runs every expanded run of an experiment in order.
pub fn execute_all(specs: &[RunSpec]) -> Result<Vec<RunOutcome>> {
    specs.iter().map(execute).collect()
}
