//! Controlled replay: from one checkpoint and one frozen rollout batch,
//! the same optimizer updates with and without perturbation.
//!
//! Both arms are measured the same way: the unperturbed training engine
//! under the updated weights against the serving engine that produced the
//! batch, binned by rollout probability.

use std::path::{Path, PathBuf};

use alp_core::diagnostics::Envelope;
use alp_core::objectives::{Aggregation, Method};
use alp_core::trainer::{PreparedBatch, RunState};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{io_at, LabError, Result};
use crate::run::{self, mismatch_envelope};

pub const REPLAY_FILE: &str = "replay.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayArm {
    pub name: String,
    /// Per-target noise scale used by the arm's updates.
    pub sigma: Vec<f64>,
    pub envelope: Envelope,
    pub lowest_bin_abs_p99: Option<f64>,
    /// Final weights, flattened; omitted from serialized reports.
    #[serde(skip)]
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub run_dir: String,
    pub checkpoint: String,
    pub method: String,
    pub n_updates: usize,
    pub seed: u64,
    pub arms: Vec<ReplayArm>,
}

impl ReplayReport {
    pub fn arm(&self, name: &str) -> Option<&ReplayArm> {
        self.arms.iter().find(|a| a.name == name)
    }
}

/// Perturbed method matching the aggregation of `m`.
pub fn replay_method(m: Method) -> Method {
    if m.is_alp() {
        m
    } else if m.aggregation() == Aggregation::Token {
        Method::TokenAlp
    } else {
        Method::SeqAlp
    }
}

fn run_arm(cfg: &ExperimentConfig, start: &RunState, prep: &PreparedBatch, sigma: Option<f64>, name: &str) -> Result<ReplayArm> {
    let setup = cfg.setup();
    let mut state = start.clone();
    if let Some(s) = sigma {
        state.params.set_sigma(s);
    }
    let used = state.params.perturb_log_sigma.iter().map(|l| l.exp()).collect();
    for u in 0..cfg.trainer.updates_per_iter {
        setup.update(&mut state, prep, u)?;
    }
    let (envelope, p99) = mismatch_envelope(&state.params, &prep.batch, &cfg.diagnostics.envelope)?;
    Ok(ReplayArm {
        name: name.to_string(),
        sigma: used,
        envelope,
        lowest_bin_abs_p99: p99,
        weights: state.params.flat_weights(),
    })
}

/// Replays `n_updates` from `checkpoint` (latest when `None`) on a batch
/// collected with `seed`. Arms: `unperturbed` (σ = 0) and `perturbed`
/// (σ from the checkpoint).
pub fn replay_envelope(run_dir: &Path, checkpoint: Option<&Path>, n_updates: usize, seed: u64) -> Result<ReplayReport> {
    let mut cfg = run::read_run_config(run_dir)?;
    let ckpt: PathBuf = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => run::latest_checkpoint(run_dir)?,
    };
    let state = run::load_checkpoint(&cfg.policy, &ckpt)?;
    cfg.objective.method = replay_method(cfg.objective.method);
    cfg.trainer.seed = seed;
    cfg.seeds = vec![seed];
    if n_updates > 0 {
        cfg.trainer.updates_per_iter = n_updates;
        if cfg.trainer.shard_updates && cfg.trainer.batch_size() % n_updates != 0 {
            return Err(LabError::Config(format!(
                "batch of {} sequences does not split into {n_updates} updates",
                cfg.trainer.batch_size()
            )));
        }
        if cfg.trainer.shard_size() % cfg.trainer.micro_batch != 0 {
            cfg.trainer.micro_batch = cfg.trainer.shard_size();
        }
    } else {
        cfg.trainer.updates_per_iter = 0;
    }
    if cfg.perturbation.is_none() {
        return Err(LabError::Config("replay needs a perturbation target set".into()));
    }
    let setup = cfg.setup();
    let prep = setup.collect(&state.params, state.iter)?;
    let arms = vec![
        run_arm(&cfg, &state, &prep, Some(0.0), "unperturbed")?,
        run_arm(&cfg, &state, &prep, None, "perturbed")?,
    ];
    Ok(ReplayReport {
        run_dir: run_dir.display().to_string(),
        checkpoint: ckpt.display().to_string(),
        method: cfg.objective.method.name().to_string(),
        n_updates,
        seed,
        arms,
    })
}

/// Writes `replay.json` and one envelope table per arm into `out`.
pub fn write_report(report: &ReplayReport, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(io_at(out))?;
    let p = out.join(REPLAY_FILE);
    std::fs::write(&p, serde_json::to_string_pretty(report)?).map_err(io_at(&p))?;
    for a in &report.arms {
        let p = out.join(format!("envelope_{}.json", a.name));
        std::fs::write(&p, serde_json::to_string_pretty(&a.envelope)?).map_err(io_at(&p))?;
    }
    Ok(())
}
