//! Tidy long-format CSV bundles for plotting, one per figure kind.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use alp_core::diagnostics::{self, Envelope};
use serde::{Deserialize, Serialize};

use crate::error::{io_at, LabError, Result};
use crate::replay::{ReplayReport, REPLAY_FILE};
use crate::run::{self, EnvelopeRecord, ENVELOPE_DIR, METRICS_FILE, PASSK_FILE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Figure {
    /// Reward, gradient norm, entropy, KL and ratio-quantile series.
    Training,
    /// Per-bin log-ratio quantiles, one series per replay arm or run.
    Envelope,
    /// `method, k, pass_at_k`, averaged over the runs of each method.
    PassK,
    /// Noise scales and perturbation-induced probability shifts.
    Perturbation,
}

impl FromStr for Figure {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "training" => Ok(Figure::Training),
            "envelope" => Ok(Figure::Envelope),
            "passk" | "pass-k" => Ok(Figure::PassK),
            "perturbation" => Ok(Figure::Perturbation),
            _ => Err(LabError::Config(format!("unknown figure `{s}`"))),
        }
    }
}

fn fmt(x: f64) -> String {
    format!("{x}")
}

fn label_of(dir: &Path) -> String {
    run::RunManifest::read(dir)
        .map(|m| m.label)
        .unwrap_or_else(|_| dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default())
}

/// Metrics table of a run: header and rows.
struct Metrics {
    path: PathBuf,
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Metrics {
    fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(METRICS_FILE);
        let mut r = csv::Reader::from_path(&path)?;
        let header = r.headers()?.iter().map(str::to_string).collect();
        let rows = r.records().map(|rec| rec.map(|r| r.iter().map(str::to_string).collect())).collect::<std::result::Result<_, _>>()?;
        Ok(Self { path, header, rows })
    }

    fn require(&self, cols: &[&str]) -> Result<Vec<usize>> {
        let missing: Vec<String> = cols.iter().filter(|c| !self.header.iter().any(|h| h == *c)).map(|c| c.to_string()).collect();
        if !missing.is_empty() {
            return Err(LabError::MissingColumns {
                path: self.path.clone(),
                columns: missing,
            });
        }
        Ok(cols.iter().map(|c| self.header.iter().position(|h| h == c).unwrap()).collect())
    }

    fn column(&self, i: usize) -> Result<Vec<f64>> {
        self.rows
            .iter()
            .map(|r| r[i].parse::<f64>().map_err(|_| LabError::Config(format!("non-numeric value `{}` in {}", r[i], self.path.display()))))
            .collect()
    }

    fn columns_with_prefix(&self, prefix: &str) -> Vec<(usize, String)> {
        self.header
            .iter()
            .enumerate()
            .filter_map(|(i, h)| h.strip_prefix(prefix).map(|s| (i, s.to_string())))
            .collect()
    }
}

type Rows = Vec<[String; 4]>;

fn training_rows(dir: &Path, window: usize) -> Result<Rows> {
    let label = label_of(dir);
    let m = Metrics::read(dir)?;
    let idx = m.require(&["iter", "update", "reward_mean", "grad_norm", "entropy", "kl_train_infer", "kl_policy_update", "kl_heldout", "ratio_abs_p99"])?;
    let iters = m.column(idx[0])?;
    let updates = m.column(idx[1])?;
    let mut out = Rows::new();
    // reward is per iteration; take the first update's row of each
    let mut per_iter: Vec<(f64, f64)> = Vec::new();
    for (k, (&it, &u)) in iters.iter().zip(&updates).enumerate() {
        if u == 0.0 {
            per_iter.push((it, m.column(idx[2])?[k]));
        }
    }
    let smooth = diagnostics::moving_average(&per_iter.iter().map(|p| p.1).collect::<Vec<_>>(), window);
    for (k, (it, r)) in per_iter.iter().enumerate() {
        out.push([format!("{label}/reward_mean"), fmt(*it), fmt(*r), String::new()]);
        out.push([format!("{label}/reward_mean_smoothed"), fmt(*it), fmt(smooth[k]), String::new()]);
    }
    for (j, name) in [(3, "grad_norm"), (4, "entropy"), (5, "kl_train_infer"), (6, "kl_policy_update"), (7, "kl_heldout"), (8, "ratio_abs_p99")] {
        for (step, v) in m.column(idx[j])?.into_iter().enumerate() {
            out.push([format!("{label}/{name}"), step.to_string(), fmt(v), String::new()]);
        }
    }
    for (i, q) in m.columns_with_prefix("log_ratio_q") {
        for (step, v) in m.column(i)?.into_iter().enumerate() {
            out.push([format!("{label}/log_ratio"), step.to_string(), fmt(v), q.clone()]);
        }
    }
    Ok(out)
}

fn perturbation_rows(dir: &Path) -> Result<Rows> {
    let label = label_of(dir);
    let m = Metrics::read(dir)?;
    let idx = m.require(&["dp_mean", "dp_p75", "dp_p99"])?;
    let mut out = Rows::new();
    for (i, t) in m.columns_with_prefix("sigma_") {
        for (step, v) in m.column(i)?.into_iter().enumerate() {
            out.push([format!("{label}/sigma_{t}"), step.to_string(), fmt(v), String::new()]);
        }
    }
    for (j, name) in idx.iter().zip(["dp_mean", "dp_p75", "dp_p99"]) {
        for (step, v) in m.column(*j)?.into_iter().enumerate() {
            out.push([format!("{label}/{name}"), step.to_string(), fmt(v), String::new()]);
        }
    }
    Ok(out)
}

fn envelope_rows(series: &str, env: &Envelope, out: &mut Rows) {
    for b in &env.bins {
        for (i, q) in env.quantile_levels.iter().enumerate() {
            // empty bins keep their rows with a blank value
            let y = b.quantiles.as_ref().map(|qs| fmt(qs[i])).unwrap_or_default();
            out.push([series.to_string(), format!("({:e},{:e}]", b.lo, b.hi), y, fmt(*q)]);
        }
    }
}

/// Envelope series of a replay directory (one per arm) or of a run
/// directory (its last envelope table).
fn envelope_source(dir: &Path, out: &mut Rows) -> Result<()> {
    let replay = dir.join(REPLAY_FILE);
    if replay.is_file() {
        let text = fs::read_to_string(&replay).map_err(io_at(&replay))?;
        let rep: ReplayReport = serde_json::from_str(&text)?;
        for a in &rep.arms {
            envelope_rows(&a.name, &a.envelope, out);
        }
        return Ok(());
    }
    let edir = dir.join(ENVELOPE_DIR);
    let mut files: Vec<PathBuf> = fs::read_dir(&edir)
        .map_err(io_at(&edir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    let last = files.pop().ok_or_else(|| LabError::Config(format!("no envelope tables in {}", edir.display())))?;
    let text = fs::read_to_string(&last).map_err(io_at(&last))?;
    let rec: EnvelopeRecord = serde_json::from_str(&text)?;
    envelope_rows(&label_of(dir), &rec.envelope, out);
    Ok(())
}

fn passk_table(dirs: &[PathBuf]) -> Result<Vec<[String; 3]>> {
    let mut acc: BTreeMap<(String, usize), (f64, usize)> = BTreeMap::new();
    for d in dirs {
        let path = d.join(PASSK_FILE);
        let mut r = csv::Reader::from_path(&path)?;
        let h = r.headers()?.clone();
        for c in ["method", "k", "pass_at_k"] {
            if !h.iter().any(|x| x == c) {
                return Err(LabError::MissingColumns {
                    path: path.clone(),
                    columns: vec![c.to_string()],
                });
            }
        }
        for rec in r.records() {
            let rec = rec?;
            let k: usize = rec[1].parse().map_err(|_| LabError::Config(format!("bad k in {}", path.display())))?;
            let v: f64 = rec[2].parse().map_err(|_| LabError::Config(format!("bad pass_at_k in {}", path.display())))?;
            let e = acc.entry((rec[0].to_string(), k)).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
    }
    Ok(acc
        .into_iter()
        .map(|((m, k), (s, n))| [m, k.to_string(), fmt(s / n as f64)])
        .collect())
}

/// Renders one figure's CSV from the given directories.
pub fn emit_plotdata(dirs: &[PathBuf], figure: Figure, smoothing_window: usize) -> Result<String> {
    if dirs.is_empty() {
        return Err(LabError::Config("no run directories given".into()));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    match figure {
        Figure::PassK => {
            w.write_record(["method", "k", "pass_at_k"])?;
            for r in passk_table(dirs)? {
                w.write_record(r)?;
            }
        }
        _ => {
            w.write_record(["series", "x", "y", "quantile"])?;
            for d in dirs {
                let rows = match figure {
                    Figure::Training => training_rows(d, smoothing_window)?,
                    Figure::Perturbation => perturbation_rows(d)?,
                    Figure::Envelope => {
                        let mut r = Rows::new();
                        envelope_source(d, &mut r)?;
                        r
                    }
                    Figure::PassK => unreachable!(),
                };
                for r in rows {
                    w.write_record(r)?;
                }
            }
        }
    }
    let bytes = w.into_inner().map_err(|e| LabError::Config(format!("csv buffer: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
