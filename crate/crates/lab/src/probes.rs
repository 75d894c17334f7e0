//! Theory probe suites: fixed model families and grids around the
//! `theorylab` checks, each with a pass/fail verdict and a flat CSV view.

use std::path::Path;
use std::str::FromStr;

use alp_core::theorylab::{
    self, KlProbeConfig, LandscapeReport, OneLayerModel, SmoothnessConfig, SmoothnessReport, SpikeSoftmax, SteinReport,
    TaylorReport, TheoremProbe, TwoBump,
};
use serde::{Deserialize, Serialize};

use crate::error::{io_at, LabError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Probe {
    Stein,
    KlBound,
    Taylor,
    Smoothness,
    Landscape,
}

impl Probe {
    pub const ALL: [Probe; 5] = [Probe::Stein, Probe::KlBound, Probe::Taylor, Probe::Smoothness, Probe::Landscape];

    pub fn name(self) -> &'static str {
        match self {
            Probe::Stein => "stein",
            Probe::KlBound => "kl-bound",
            Probe::Taylor => "taylor",
            Probe::Smoothness => "smoothness",
            Probe::Landscape => "landscape",
        }
    }
}

impl FromStr for Probe {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        Probe::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| LabError::Config(format!("unknown probe `{s}`")))
    }
}

/// Largest `|lhs − rhs|` in combined standard errors that still passes.
pub const STEIN_MAX_Z: f64 = 5.0;
/// Smallest remainder slope that passes the Taylor probe.
pub const TAYLOR_MIN_SLOPE: f64 = 2.5;
/// Largest smoothed-to-raw Hessian ratio at the widest σ that passes.
pub const SMOOTHNESS_MAX_CONTRACTION: f64 = 0.8;
/// Largest switch-point spread across quadrature resolutions that passes.
pub const LANDSCAPE_MAX_SPREAD: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteinSuite {
    pub n_mc: usize,
    pub reports: Vec<SteinReport>,
    pub max_z: f64,
    pub pass: bool,
}

/// Two random `d = 2`, `|A| = 3` models at one input each, over σ ∈
/// {0.3, 0.5, 1.0}.
pub fn stein_suite(n_mc: usize, seed: u64) -> Result<SteinSuite> {
    let mut reports = Vec::new();
    for m in 0..2u64 {
        let model = OneLayerModel::random(3, 2, 1.0, seed.wrapping_add(m))?;
        let x = [0.4 - 0.8 * m as f64, 0.3];
        for (i, &s) in [0.3, 0.5, 1.0].iter().enumerate() {
            reports.push(theorylab::stein_check(&model, &x, s, n_mc, seed.wrapping_add(100 * m + i as u64))?);
        }
    }
    let max_z = reports.iter().map(|r| r.max_z).fold(0.0, f64::max);
    Ok(SteinSuite {
        n_mc,
        reports,
        max_z,
        pass: max_z < STEIN_MAX_Z,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlSuite {
    pub probe: TheoremProbe,
    pub pass: bool,
}

/// `d = 4`, `|A| = 8` model over σ ∈ {0.1, 0.2, 0.4} and ‖ζ‖ ∈ {0.01, 0.05}.
pub fn kl_suite(n_mc: usize, n_zeta: usize, seed: u64) -> Result<KlSuite> {
    let model = OneLayerModel::random(8, 4, 1.0, seed)?;
    let cfg = KlProbeConfig {
        sigmas: vec![0.1, 0.2, 0.4],
        zeta_norms: vec![0.01, 0.05],
        n_mc,
        n_zeta,
        xs: theorylab::input_grid(4, 8, seed),
        seed,
    };
    let probe = theorylab::kl_bound_check(&model, &cfg)?;
    let pass = probe.supported_exponent.is_some();
    Ok(KlSuite { probe, pass })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaylorSuite {
    pub report: TaylorReport,
    pub pass: bool,
}

/// Remainder of the quadratic KL expansion on ‖ζ‖ ∈ {0.2, 0.1, 0.05}.
pub fn taylor_suite(n_draws: usize, seed: u64) -> Result<TaylorSuite> {
    let model = OneLayerModel::random(8, 4, 1.0, seed)?;
    let x = [0.3, -0.2, 0.5, 0.1];
    let report = theorylab::taylor_kl_check(&model, &x, &[0.2, 0.1, 0.05], n_draws, seed)?;
    let pass = report.gap_slope.is_some_and(|s| s >= TAYLOR_MIN_SLOPE);
    Ok(TaylorSuite { report, pass })
}

/// Spike objective used by the smoothness probe and its parameter point.
pub fn spike_family() -> (SpikeSoftmax, Vec<f64>) {
    let family = SpikeSoftmax {
        rewards: vec![1.0, 0.0, 0.5],
        spike_center: 0.0,
        spike_width: 0.02,
        spike_scale: 4.0,
    };
    let theta = vec![0.2, 0.5, 0.3, -0.1, -0.4, -0.2, 0.0, 0.1, 0.1];
    (family, theta)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessSuite {
    pub report: SmoothnessReport,
    /// Contraction at the widest σ.
    pub final_contraction: f64,
    pub pass: bool,
}

/// Hessian sup of the spike objective, raw and smoothed up to σ = 4w.
pub fn smoothness_suite(cfg: &SmoothnessConfig) -> Result<SmoothnessSuite> {
    let (family, theta) = spike_family();
    let report = theorylab::smoothness_check(&family, &theta, cfg)?;
    let final_contraction = *report.contraction.last().ok_or_else(|| LabError::Config("empty sigma grid".into()))?;
    Ok(SmoothnessSuite {
        pass: final_contraction <= SMOOTHNESS_MAX_CONTRACTION,
        final_contraction,
        report,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapeSuite {
    pub report: LandscapeReport,
    pub pass: bool,
}

/// Two-bump landscape smoothed over σ ∈ [0, 0.5] with the switch point at
/// 200, 400 and 800 quadrature intervals.
pub fn landscape_suite() -> Result<LandscapeSuite> {
    let bump = TwoBump::default();
    let xs: Vec<f64> = (0..=400).map(|i| -2.0 + i as f64 * 0.01).collect();
    let sigmas = [0.0, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5];
    let report = theorylab::landscape_toy(&bump, &xs, &sigmas, &[200, 400, 800])?;
    let pass = report.sigma_star_spread <= LANDSCAPE_MAX_SPREAD;
    Ok(LandscapeSuite { report, pass })
}

/// Outcome of one probe, serialized whole and flattened for plotting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "probe", rename_all = "kebab-case")]
pub enum ProbeOutcome {
    Stein(SteinSuite),
    KlBound(KlSuite),
    Taylor(TaylorSuite),
    Smoothness(SmoothnessSuite),
    Landscape(LandscapeSuite),
}

impl ProbeOutcome {
    pub fn pass(&self) -> bool {
        match self {
            ProbeOutcome::Stein(s) => s.pass,
            ProbeOutcome::KlBound(s) => s.pass,
            ProbeOutcome::Taylor(s) => s.pass,
            ProbeOutcome::Smoothness(s) => s.pass,
            ProbeOutcome::Landscape(s) => s.pass,
        }
    }

    /// Long-format rows `series, x, y, quantile`.
    pub fn rows(&self) -> Vec<[String; 4]> {
        let f = |x: f64| format!("{x}");
        let row = |s: String, x: f64, y: f64| [s, f(x), f(y), String::new()];
        let mut out = Vec::new();
        match self {
            ProbeOutcome::Stein(s) => {
                for r in &s.reports {
                    for (a, (l, rh)) in r.lhs.iter().zip(&r.rhs).enumerate() {
                        for (j, (lv, rv)) in l.iter().zip(rh).enumerate() {
                            out.push(row(format!("lhs/a{a}/x{j}"), r.sigma, *lv));
                            out.push(row(format!("rhs/a{a}/x{j}"), r.sigma, *rv));
                        }
                    }
                    out.push(row("max_z".into(), r.sigma, r.max_z));
                }
            }
            ProbeOutcome::KlBound(s) => {
                for p in &s.probe.points {
                    let tag = format!("zeta{}", p.zeta_norm);
                    out.push(row(format!("kl/{tag}"), p.sigma, p.kl));
                    out.push(row(format!("bound_sigma2/{tag}"), p.sigma, p.bound_sigma2));
                    out.push(row(format!("bound_sigma4/{tag}"), p.sigma, p.bound_sigma4));
                }
            }
            ProbeOutcome::Taylor(s) => {
                for p in &s.report.points {
                    out.push(row("exact".into(), p.zeta_norm, p.exact));
                    out.push(row("approx".into(), p.zeta_norm, p.approx));
                    out.push(row("gap".into(), p.zeta_norm, p.gap));
                }
            }
            ProbeOutcome::Smoothness(s) => {
                out.push(row("hessian_sup".into(), 0.0, s.report.raw_sup));
                for (sig, v) in s.report.sigmas.iter().zip(&s.report.smoothed_sup) {
                    out.push(row("hessian_sup".into(), *sig, *v));
                }
            }
            ProbeOutcome::Landscape(s) => {
                for (sig, c) in s.report.sigmas.iter().zip(&s.report.curves) {
                    for (x, y) in s.report.xs.iter().zip(c) {
                        out.push(row(format!("sigma{sig}"), *x, *y));
                    }
                }
            }
        }
        out
    }
}

/// Sample sizes for the probes; the defaults are the full-size settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSettings {
    pub seed: u64,
    pub stein_n_mc: usize,
    pub kl_n_mc: usize,
    pub kl_n_zeta: usize,
    pub taylor_draws: usize,
    pub smoothness: SmoothnessConfig,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self {
            seed: 0,
            stein_n_mc: 1_000_000,
            kl_n_mc: 1_000_000,
            kl_n_zeta: 4096,
            taylor_draws: 256,
            smoothness: SmoothnessConfig::default(),
        }
    }
}

pub fn run_probe(probe: Probe, s: &ProbeSettings) -> Result<ProbeOutcome> {
    Ok(match probe {
        Probe::Stein => ProbeOutcome::Stein(stein_suite(s.stein_n_mc, s.seed)?),
        Probe::KlBound => ProbeOutcome::KlBound(kl_suite(s.kl_n_mc, s.kl_n_zeta, s.seed)?),
        Probe::Taylor => ProbeOutcome::Taylor(taylor_suite(s.taylor_draws, s.seed)?),
        Probe::Smoothness => ProbeOutcome::Smoothness(smoothness_suite(&s.smoothness)?),
        Probe::Landscape => ProbeOutcome::Landscape(landscape_suite()?),
    })
}

/// Writes `<name>.json` and `<name>.csv` into `out`.
pub fn write_outcome(probe: Probe, outcome: &ProbeOutcome, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(io_at(out))?;
    let json = out.join(format!("{}.json", probe.name()));
    std::fs::write(&json, serde_json::to_string_pretty(outcome)?).map_err(io_at(&json))?;
    let mut w = csv::Writer::from_path(out.join(format!("{}.csv", probe.name())))?;
    w.write_record(["series", "x", "y", "quantile"])?;
    for r in outcome.rows() {
        w.write_record(r)?;
    }
    w.flush().map_err(io_at(out))?;
    Ok(())
}
