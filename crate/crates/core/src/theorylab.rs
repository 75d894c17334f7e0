//! Numerical probes of the smoothing theory on one-layer softmax models.
//!
//! Every probe computes expectations over actions exactly and only the
//! Gaussian expectations by Monte Carlo, with common random numbers shared
//! across the two sides of an identity and across neighbouring grid points.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{hvp, log_softmax, power_iteration, softmax};
use crate::rng::{self, Domain};

/// `π(a|x) = softmax(Wx)_a` with `W` of shape `[n_actions, d]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneLayerModel {
    pub n_actions: usize,
    pub d: usize,
    /// Row-major `W`.
    pub w: Vec<f64>,
}

impl OneLayerModel {
    pub fn new(n_actions: usize, d: usize, w: Vec<f64>) -> Result<Self> {
        if n_actions < 2 || d == 0 || w.len() != n_actions * d {
            return Err(Error::Config(format!(
                "W must be {n_actions}x{d} with at least two actions, got {} entries",
                w.len()
            )));
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "one_layer_model" });
        }
        Ok(Self { n_actions, d, w })
    }

    /// `W` with i.i.d. `N(0, scale²)` entries.
    pub fn random(n_actions: usize, d: usize, scale: f64, seed: u64) -> Result<Self> {
        let mut s = rng::stream(seed, Domain::Theory, &[0, n_actions as u64, d as u64]);
        let w = rng::normals(&mut s, n_actions * d).into_iter().map(|z| z * scale).collect();
        Self::new(n_actions, d, w)
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n_actions)
            .map(|a| self.w[a * self.d..(a + 1) * self.d].iter().zip(x).map(|(w, x)| w * x).sum())
            .collect()
    }

    pub fn probs(&self, x: &[f64]) -> Vec<f64> {
        softmax(&self.logits(x))
    }

    pub fn log_probs(&self, x: &[f64]) -> Vec<f64> {
        log_softmax(&self.logits(x))
    }

    /// `∇_x ln π(a|x) = W_a − Σ_b π_b W_b`, one row per action.
    pub fn grad_x_log_probs(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let p = self.probs(x);
        let mut mean = vec![0.0; self.d];
        for (a, pa) in p.iter().enumerate() {
            for j in 0..self.d {
                mean[j] += pa * self.w[a * self.d + j];
            }
        }
        (0..self.n_actions)
            .map(|a| (0..self.d).map(|j| self.w[a * self.d + j] - mean[j]).collect())
            .collect()
    }
}

fn shifted(x: &[f64], eps: &[f64], sigma: f64) -> Vec<f64> {
    x.iter().zip(eps).map(|(x, e)| x + sigma * e).collect()
}

/// Standard-normal draws, `n` rows of `d`, from one keyed stream.
pub fn standard_draws(seed: u64, tag: u64, n: usize, d: usize) -> Vec<f64> {
    let mut s = rng::stream(seed, Domain::Theory, &[1, tag]);
    rng::normals(&mut s, n * d)
}

/// Monte-Carlo `π̃(·|x) = E_δ π(·|x+δ)` with `δ = σ·ε` over the given draws.
pub fn smoothed_probs(model: &OneLayerModel, x: &[f64], sigma: f64, eps: &[f64]) -> Vec<f64> {
    let n = eps.len() / model.d;
    let mut acc = vec![0.0; model.n_actions];
    for k in 0..n {
        let p = model.probs(&shifted(x, &eps[k * model.d..(k + 1) * model.d], sigma));
        for (a, v) in acc.iter_mut().zip(p) {
            *a += v;
        }
    }
    acc.iter().map(|v| v / n as f64).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteinReport {
    pub sigma: f64,
    pub n_mc: usize,
    /// `∇_x ln π̃(a|x)` by central differences, `[a][j]`.
    pub lhs: Vec<Vec<f64>>,
    /// `E_q[δ]/σ²` by self-normalized weighting, `[a][j]`.
    pub rhs: Vec<Vec<f64>>,
    /// Standard error of `lhs − rhs` from the paired influence functions.
    pub stderr: Vec<Vec<f64>>,
    pub max_abs_deviation: f64,
    /// Largest `|lhs − rhs| / stderr`.
    pub max_z: f64,
    pub min_ess: f64,
}

pub const STEIN_MIN_ESS: f64 = 100.0;

/// Compares both sides of `∇_x ln π̃(a|x) = E_{q(δ|a,x)}[δ] / σ²` with
/// shared draws.
pub fn stein_check(model: &OneLayerModel, x: &[f64], sigma: f64, n_mc: usize, seed: u64) -> Result<SteinReport> {
    if !(sigma > 0.0) {
        return Err(Error::Config("sigma must be positive".into()));
    }
    if n_mc < 10_000 {
        return Err(Error::Config("stein_check needs n_mc >= 10^4".into()));
    }
    if x.len() != model.d {
        return Err(crate::error::shape_err("stein_check", "x has the wrong dimension"));
    }
    let (na, d) = (model.n_actions, model.d);
    let h = 1e-4 * sigma.max(1e-2);
    let mut s = rng::stream(seed, Domain::Theory, &[2]);
    let eps = rng::normals(&mut s, n_mc * d);
    let eval = |k: usize| -> (Vec<f64>, Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let e = &eps[k * d..(k + 1) * d];
        let xd = shifted(x, e, sigma);
        let delta: Vec<f64> = e.iter().map(|v| v * sigma).collect();
        let p0 = model.probs(&xd);
        let mut plus = vec![vec![0.0; d]; na];
        let mut minus = vec![vec![0.0; d]; na];
        for j in 0..d {
            let mut xp = xd.clone();
            xp[j] += h;
            let mut xm = xd.clone();
            xm[j] -= h;
            let (pp, pm) = (model.probs(&xp), model.probs(&xm));
            for a in 0..na {
                plus[a][j] = pp[a];
                minus[a][j] = pm[a];
            }
        }
        (p0, delta, plus, minus)
    };
    let mut s0 = vec![0.0; na];
    let mut s0sq = vec![0.0; na];
    let mut sd = vec![vec![0.0; d]; na];
    let mut sp = vec![vec![0.0; d]; na];
    let mut sm = vec![vec![0.0; d]; na];
    for k in 0..n_mc {
        let (p0, delta, plus, minus) = eval(k);
        for a in 0..na {
            s0[a] += p0[a];
            s0sq[a] += p0[a] * p0[a];
            for j in 0..d {
                sd[a][j] += p0[a] * delta[j];
                sp[a][j] += plus[a][j];
                sm[a][j] += minus[a][j];
            }
        }
    }
    let n = n_mc as f64;
    let min_ess = (0..na).map(|a| s0[a] * s0[a] / s0sq[a]).fold(f64::INFINITY, f64::min);
    if !(min_ess >= STEIN_MIN_ESS) {
        return Err(Error::Degenerate(format!("effective sample size {min_ess:.1} below {STEIN_MIN_ESS}")));
    }
    let s2 = sigma * sigma;
    let m0: Vec<f64> = s0.iter().map(|v| v / n).collect();
    let mut lhs = vec![vec![0.0; d]; na];
    let mut rhs = vec![vec![0.0; d]; na];
    for a in 0..na {
        for j in 0..d {
            lhs[a][j] = ((sp[a][j] / n).ln() - (sm[a][j] / n).ln()) / (2.0 * h);
            rhs[a][j] = sd[a][j] / n / (m0[a] * s2);
        }
    }
    let mut var = vec![vec![0.0; d]; na];
    for k in 0..n_mc {
        let (p0, delta, plus, minus) = eval(k);
        for a in 0..na {
            for j in 0..d {
                let il = (plus[a][j] / (sp[a][j] / n) - minus[a][j] / (sm[a][j] / n)) / (2.0 * h);
                let ir = (p0[a] * delta[j] - rhs[a][j] * s2 * p0[a]) / (m0[a] * s2);
                let dk = il - ir;
                var[a][j] += dk * dk;
            }
        }
    }
    let mut stderr = vec![vec![0.0; d]; na];
    let (mut max_dev, mut max_z) = (0.0f64, 0.0f64);
    for a in 0..na {
        for j in 0..d {
            stderr[a][j] = (var[a][j] / n / n).sqrt();
            let dev = (lhs[a][j] - rhs[a][j]).abs();
            max_dev = max_dev.max(dev);
            let z = if stderr[a][j] > 0.0 { dev / stderr[a][j] } else if dev == 0.0 { 0.0 } else { f64::INFINITY };
            max_z = max_z.max(z);
        }
    }
    Ok(SteinReport {
        sigma,
        n_mc,
        lhs,
        rhs,
        stderr,
        max_abs_deviation: max_dev,
        max_z,
        min_ess,
    })
}

/// Empirical constants of the two smoothing conditions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conditions {
    /// `min_{a,x} π(a|x) / π̃(a|x)`.
    pub alpha: f64,
    /// `max_{a,x} ‖E_q[δ]‖² / (d σ²)`.
    pub c: f64,
}

/// Per-`x` smoothed policy and posterior means from one set of draws.
struct Smoothed {
    pi_tilde: Vec<f64>,
    post_mean_sq: Vec<f64>,
}

fn smooth_point(model: &OneLayerModel, x: &[f64], sigma: f64, eps: &[f64]) -> Result<Smoothed> {
    let (na, d) = (model.n_actions, model.d);
    let n = eps.len() / d;
    let mut s0 = vec![0.0; na];
    let mut sd = vec![vec![0.0; d]; na];
    for k in 0..n {
        let e = &eps[k * d..(k + 1) * d];
        let p = model.probs(&shifted(x, e, sigma));
        for a in 0..na {
            s0[a] += p[a];
            for j in 0..d {
                sd[a][j] += p[a] * sigma * e[j];
            }
        }
    }
    if s0.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Degenerate("smoothed policy underflowed to zero".into()));
    }
    Ok(Smoothed {
        pi_tilde: s0.iter().map(|v| v / n as f64).collect(),
        post_mean_sq: (0..na)
            .map(|a| sd[a].iter().map(|v| (v / s0[a]).powi(2)).sum())
            .collect(),
    })
}

fn conditions_from(model: &OneLayerModel, xs: &[Vec<f64>], sm: &[Smoothed], sigma: f64) -> Conditions {
    let mut alpha = f64::INFINITY;
    let mut c = 0.0f64;
    for (x, s) in xs.iter().zip(sm) {
        let p = model.probs(x);
        for a in 0..model.n_actions {
            alpha = alpha.min(p[a] / s.pi_tilde[a]);
            c = c.max(s.post_mean_sq[a] / (model.d as f64 * sigma * sigma));
        }
    }
    Conditions { alpha, c }
}

/// Estimates `(α̂, Ĉ)` over an input grid with `n_mc` draws of `δ`.
pub fn estimate_conditions(model: &OneLayerModel, sigma: f64, n_mc: usize, xs: &[Vec<f64>], seed: u64) -> Result<Conditions> {
    if !(sigma > 0.0) || n_mc == 0 || xs.is_empty() {
        return Err(Error::Config("need sigma > 0, n_mc >= 1 and a nonempty grid".into()));
    }
    let eps = standard_draws(seed, 3, n_mc, model.d);
    let sm = xs
        .iter()
        .map(|x| smooth_point(model, x, sigma, &eps))
        .collect::<Result<Vec<_>>>()?;
    Ok(conditions_from(model, xs, &sm, sigma))
}

/// Which power of `σ` divides the mismatch term of the KL bound.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SigmaExponent {
    Two,
    Four,
}

impl SigmaExponent {
    pub fn power(self) -> i32 {
        match self {
            SigmaExponent::Two => 2,
            SigmaExponent::Four => 4,
        }
    }
}

/// `−ln α + C d E‖ζ‖² / (2σ^p)`.
pub fn kl_bound(alpha: f64, c: f64, d: usize, zeta_sq: f64, sigma: f64, exponent: SigmaExponent) -> f64 {
    -alpha.ln() + c * d as f64 * zeta_sq / (2.0 * sigma.powi(exponent.power()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlProbeConfig {
    pub sigmas: Vec<f64>,
    pub zeta_norms: Vec<f64>,
    /// Draws of `δ` per input point for `π̃`, `α̂` and `Ĉ`.
    pub n_mc: usize,
    /// Draws of `ζ` per grid point, split evenly over the inputs.
    pub n_zeta: usize,
    pub xs: Vec<Vec<f64>>,
    pub seed: u64,
}

/// Standard-normal inputs for a probe grid.
pub fn input_grid(d: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let e = standard_draws(seed, 4, n, d);
    e.chunks(d).map(|c| c.to_vec()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlGridPoint {
    pub sigma: f64,
    pub zeta_norm: f64,
    pub alpha: f64,
    pub c: f64,
    /// `E_x E_ζ KL(π̃(·|x) ‖ π(·|x+ζ))`.
    pub kl: f64,
    pub kl_stderr: f64,
    pub bound_sigma2: f64,
    pub bound_sigma4: f64,
    pub holds_sigma2: bool,
    pub holds_sigma4: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoremProbe {
    pub d: usize,
    pub n_actions: usize,
    pub n_mc: usize,
    pub n_zeta: usize,
    pub points: Vec<KlGridPoint>,
    /// Tightest exponent whose bound holds at every grid point.
    pub supported_exponent: Option<SigmaExponent>,
}

/// Measures the smoothed-vs-inference KL against the bound with empirical
/// `(α̂, Ĉ)`; a verdict holds when `KL ≤ bound + 3·stderr`.
pub fn kl_bound_check(model: &OneLayerModel, cfg: &KlProbeConfig) -> Result<TheoremProbe> {
    if cfg.sigmas.is_empty() || cfg.zeta_norms.is_empty() || cfg.xs.is_empty() {
        return Err(Error::Config("kl probe needs sigma, zeta and input grids".into()));
    }
    if cfg.sigmas.iter().any(|s| !(*s > 0.0)) || cfg.zeta_norms.iter().any(|z| !(*z >= 0.0)) {
        return Err(Error::Config("sigmas must be positive and zeta norms non-negative".into()));
    }
    let d = model.d;
    let eps = standard_draws(cfg.seed, 5, cfg.n_mc, d);
    let per_x = (cfg.n_zeta / cfg.xs.len()).max(2);
    let zeta_std = standard_draws(cfg.seed, 6, per_x * cfg.xs.len(), d);
    let mut points = Vec::new();
    for &sigma in &cfg.sigmas {
        let sm = cfg
            .xs
            .iter()
            .map(|x| smooth_point(model, x, sigma, &eps))
            .collect::<Result<Vec<_>>>()?;
        let cond = conditions_from(model, &cfg.xs, &sm, sigma);
        if !(cond.alpha > 0.0) {
            return Err(Error::Degenerate(format!("alpha estimate is zero at sigma {sigma}")));
        }
        for &zn in &cfg.zeta_norms {
            let scale = zn / (d as f64).sqrt();
            let mut kl_sum = 0.0;
            let mut var_sum = 0.0;
            for (i, (x, s)) in cfg.xs.iter().zip(&sm).enumerate() {
                let neg_ent: f64 = s.pi_tilde.iter().map(|p| p * p.ln()).sum();
                let (mut m1, mut m2) = (0.0, 0.0);
                for k in 0..per_x {
                    let z = &zeta_std[(i * per_x + k) * d..(i * per_x + k + 1) * d];
                    let lp = model.log_probs(&shifted(x, z, scale));
                    let cross: f64 = s.pi_tilde.iter().zip(&lp).map(|(p, l)| p * l).sum();
                    let v = neg_ent - cross;
                    m1 += v;
                    m2 += v * v;
                }
                let n = per_x as f64;
                let mean = m1 / n;
                kl_sum += mean;
                var_sum += ((m2 / n - mean * mean).max(0.0)) / n;
            }
            let nx = cfg.xs.len() as f64;
            let kl = kl_sum / nx;
            let kl_stderr = var_sum.sqrt() / nx;
            let b2 = kl_bound(cond.alpha, cond.c, d, zn * zn, sigma, SigmaExponent::Two);
            let b4 = kl_bound(cond.alpha, cond.c, d, zn * zn, sigma, SigmaExponent::Four);
            points.push(KlGridPoint {
                sigma,
                zeta_norm: zn,
                alpha: cond.alpha,
                c: cond.c,
                kl,
                kl_stderr,
                bound_sigma2: b2,
                bound_sigma4: b4,
                holds_sigma2: kl <= b2 + 3.0 * kl_stderr,
                holds_sigma4: kl <= b4 + 3.0 * kl_stderr,
            });
        }
    }
    let all2 = points.iter().all(|p| p.holds_sigma2);
    let all4 = points.iter().all(|p| p.holds_sigma4);
    // for σ < 1 the σ² bound is the tighter one
    let tighter_is_two = cfg.sigmas.iter().all(|&s| s <= 1.0);
    let supported_exponent = match (all2, all4, tighter_is_two) {
        (true, true, true) | (true, false, _) => Some(SigmaExponent::Two),
        (true, true, false) | (false, true, _) => Some(SigmaExponent::Four),
        (false, false, _) => None,
    };
    Ok(TheoremProbe {
        d,
        n_actions: model.n_actions,
        n_mc: cfg.n_mc,
        n_zeta: per_x * cfg.xs.len(),
        points,
        supported_exponent,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaylorPoint {
    pub zeta_norm: f64,
    /// Mean over draws of `KL(π(·|x) ‖ π(·|x+ζ))`.
    pub exact: f64,
    /// `½ Tr(Ê[ζζᵀ] F)` with `F` the input Fisher matrix.
    pub approx: f64,
    pub gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaylorReport {
    pub points: Vec<TaylorPoint>,
    /// Least-squares slope of `ln|gap|` against `ln zeta_norm`.
    pub gap_slope: Option<f64>,
}

/// Fisher information of `π(·|x)` with respect to `x`.
pub fn input_fisher(model: &OneLayerModel, x: &[f64]) -> Vec<f64> {
    let d = model.d;
    let p = model.probs(x);
    let g = model.grad_x_log_probs(x);
    let mut f = vec![0.0; d * d];
    for a in 0..model.n_actions {
        for i in 0..d {
            for j in 0..d {
                f[i * d + j] += p[a] * g[a][i] * g[a][j];
            }
        }
    }
    f
}

/// KL of the second-order expansion against the exact value, with `ζ`
/// drawn `N(0, (zeta_norm²/d) I)` from the same standardized draws at every
/// grid point.
pub fn taylor_kl_check(model: &OneLayerModel, x: &[f64], zeta_norms: &[f64], n_draws: usize, seed: u64) -> Result<TaylorReport> {
    if x.len() != model.d || n_draws == 0 {
        return Err(Error::Config("x must match the model and n_draws must be positive".into()));
    }
    let d = model.d;
    let z = standard_draws(seed, 7, n_draws, d);
    let fisher = input_fisher(model, x);
    let p = model.probs(x);
    let lp = model.log_probs(x);
    let mut points = Vec::new();
    for &zn in zeta_norms {
        let scale = zn / (d as f64).sqrt();
        let (mut exact, mut approx) = (0.0, 0.0);
        for k in 0..n_draws {
            let zk: Vec<f64> = z[k * d..(k + 1) * d].iter().map(|v| v * scale).collect();
            let lq = model.log_probs(&shifted(x, &zk, 1.0));
            exact += p.iter().zip(lp.iter().zip(&lq)).map(|(pa, (a, b))| pa * (a - b)).sum::<f64>();
            let mut quad = 0.0;
            for i in 0..d {
                for j in 0..d {
                    quad += zk[i] * fisher[i * d + j] * zk[j];
                }
            }
            approx += 0.5 * quad;
        }
        let n = n_draws as f64;
        let (exact, approx) = (exact / n, approx / n);
        points.push(TaylorPoint {
            zeta_norm: zn,
            exact,
            approx,
            gap: exact - approx,
        });
    }
    let fit: Vec<(f64, f64)> = points
        .iter()
        .filter(|p| p.zeta_norm > 0.0 && p.gap != 0.0)
        .map(|p| (p.zeta_norm.ln(), p.gap.abs().ln()))
        .collect();
    Ok(TaylorReport {
        gap_slope: slope(&fit),
        points,
    })
}

/// Least-squares slope; `None` for fewer than two distinct abscissae.
pub fn slope(pts: &[(f64, f64)]) -> Option<f64> {
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// A per-input objective `J(θ; x)` whose parameter gradient is known.
pub trait SurrogateFamily {
    fn dim(&self) -> usize;
    fn grad(&self, theta: &[f64], x: f64) -> Vec<f64>;
}

/// REINFORCE surrogate `J(θ; x) = Σ_a softmax(W z(x))_a R_a` on features
/// `z(x) = [1, x, s·exp(−(x−c)²/(2w²))]`. The third feature is a narrow
/// spike that multiplies the curvature near `c` by roughly `s²`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpikeSoftmax {
    pub rewards: Vec<f64>,
    pub spike_center: f64,
    pub spike_width: f64,
    pub spike_scale: f64,
}

impl SpikeSoftmax {
    pub const FEATURES: usize = 3;

    pub fn features(&self, x: f64) -> [f64; 3] {
        let u = (x - self.spike_center) / self.spike_width;
        [1.0, x, self.spike_scale * (-0.5 * u * u).exp()]
    }

    pub fn value(&self, theta: &[f64], x: f64) -> f64 {
        let z = self.features(x);
        let logits: Vec<f64> = theta.chunks(3).map(|w| w.iter().zip(&z).map(|(a, b)| a * b).sum()).collect();
        softmax(&logits).iter().zip(&self.rewards).map(|(p, r)| p * r).sum()
    }
}

impl SurrogateFamily for SpikeSoftmax {
    fn dim(&self) -> usize {
        self.rewards.len() * Self::FEATURES
    }

    fn grad(&self, theta: &[f64], x: f64) -> Vec<f64> {
        let z = self.features(x);
        let logits: Vec<f64> = theta.chunks(3).map(|w| w.iter().zip(&z).map(|(a, b)| a * b).sum()).collect();
        let p = softmax(&logits);
        let j: f64 = p.iter().zip(&self.rewards).map(|(p, r)| p * r).sum();
        let mut g = Vec::with_capacity(theta.len());
        for (pa, ra) in p.iter().zip(&self.rewards) {
            let dl = pa * (ra - j);
            g.extend(z.iter().map(|zi| dl * zi));
        }
        g
    }
}

/// `J(θ) = ½ θᵀAθ`, the same at every input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quadratic {
    pub n: usize,
    /// Row-major symmetric `A`.
    pub a: Vec<f64>,
}

impl SurrogateFamily for Quadratic {
    fn dim(&self) -> usize {
        self.n
    }

    fn grad(&self, theta: &[f64], _x: f64) -> Vec<f64> {
        (0..self.n)
            .map(|i| (0..self.n).map(|j| self.a[i * self.n + j] * theta[j]).sum())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessConfig {
    pub xs: Vec<f64>,
    pub sigmas: Vec<f64>,
    /// Input draws averaged in each smoothed gradient.
    pub n_mc: usize,
    pub hvp_step: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for SmoothnessConfig {
    fn default() -> Self {
        Self {
            xs: (0..=80).map(|i| -1.0 + i as f64 * 0.025).collect(),
            sigmas: vec![0.01, 0.02, 0.04, 0.08],
            n_mc: 256,
            hvp_step: 1e-4,
            max_iters: 5000,
            tol: 1e-10,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessReport {
    pub raw_sup: f64,
    pub raw_argmax_x: f64,
    pub sigmas: Vec<f64>,
    pub smoothed_sup: Vec<f64>,
    /// Per-draw Rayleigh-quotient standard error at the maximizing input.
    pub smoothed_stderr: Vec<f64>,
    /// `smoothed_sup / raw_sup` per σ.
    pub contraction: Vec<f64>,
    /// Smallest grid σ with contraction below 1.
    pub min_contracting_sigma: Option<f64>,
}

/// Spectral norm of `∇²_θ` of the input-smoothed objective at `x`, plus the
/// per-draw Rayleigh quotients along the top direction.
pub fn hessian_norm_at<F: SurrogateFamily>(family: &F, theta: &[f64], x: f64, sigma: f64, eps: &[f64], cfg: &SmoothnessConfig) -> Result<(f64, Vec<f64>)> {
    let xs: Vec<f64> = if sigma == 0.0 { vec![x] } else { eps.iter().map(|e| x + sigma * e).collect() };
    let grad = |xi: f64| {
        move |t: &[f64]| -> Result<Vec<f64>> { Ok(family.grad(t, xi)) }
    };
    let smoothed_grad = |t: &[f64]| -> Result<Vec<f64>> {
        let mut g = vec![0.0; family.dim()];
        for &xi in &xs {
            for (a, b) in g.iter_mut().zip(family.grad(t, xi)) {
                *a += b;
            }
        }
        let n = xs.len() as f64;
        Ok(g.into_iter().map(|v| v / n).collect())
    };
    let est = power_iteration(
        |v| hvp(smoothed_grad, theta, v, cfg.hvp_step),
        family.dim(),
        cfg.max_iters,
        cfg.tol,
        cfg.seed,
    )?;
    let rq = xs
        .iter()
        .map(|&xi| {
            let hv = hvp(grad(xi), theta, &est.vector, cfg.hvp_step)?;
            Ok(hv.iter().zip(&est.vector).map(|(a, b)| a * b).sum::<f64>().abs())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok((est.norm, rq))
}

/// Sup over the input grid of the Hessian spectral norm, raw and smoothed
/// at each σ, with paired input draws across σ.
pub fn smoothness_check<F: SurrogateFamily>(family: &F, theta: &[f64], cfg: &SmoothnessConfig) -> Result<SmoothnessReport> {
    if theta.len() != family.dim() || cfg.xs.is_empty() || cfg.n_mc == 0 {
        return Err(Error::Config("theta must match the family; grid and n_mc must be nonempty".into()));
    }
    let eps = standard_draws(cfg.seed, 8, cfg.n_mc, 1);
    let sup = |sigma: f64| -> Result<(f64, Vec<f64>, f64)> {
        let mut best = (f64::NEG_INFINITY, Vec::new(), 0.0);
        for &x in &cfg.xs {
            let (n, rq) = hessian_norm_at(family, theta, x, sigma, &eps, cfg)?;
            if n > best.0 {
                best = (n, rq, x);
            }
        }
        Ok(best)
    };
    let (raw_sup, _, raw_argmax_x) = sup(0.0)?;
    let mut smoothed_sup = Vec::new();
    let mut smoothed_stderr = Vec::new();
    for &s in &cfg.sigmas {
        let (n, rq, _) = sup(s)?;
        let m = rq.iter().sum::<f64>() / rq.len() as f64;
        let var = rq.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (rq.len().max(2) - 1) as f64;
        smoothed_sup.push(n);
        smoothed_stderr.push((var / rq.len() as f64).sqrt());
    }
    let contraction: Vec<f64> = smoothed_sup.iter().map(|s| s / raw_sup).collect();
    let min_contracting_sigma = cfg
        .sigmas
        .iter()
        .zip(&contraction)
        .find(|(_, &c)| c < 1.0)
        .map(|(s, _)| *s);
    Ok(SmoothnessReport {
        raw_sup,
        raw_argmax_x,
        sigmas: cfg.sigmas.clone(),
        smoothed_sup,
        smoothed_stderr,
        contraction,
        min_contracting_sigma,
    })
}

/// Narrow tall bump plus broad lower bump, both Gaussian-shaped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoBump {
    pub spike_center: f64,
    pub spike_width: f64,
    pub spike_height: f64,
    pub broad_center: f64,
    pub broad_width: f64,
    pub broad_height: f64,
}

impl Default for TwoBump {
    fn default() -> Self {
        Self {
            spike_center: 1.0,
            spike_width: 0.02,
            spike_height: 1.0,
            broad_center: -1.0,
            broad_width: 0.5,
            broad_height: 0.8,
        }
    }
}

impl TwoBump {
    pub fn eval(&self, x: f64) -> f64 {
        let g = |c: f64, w: f64| (-0.5 * ((x - c) / w).powi(2)).exp();
        self.spike_height * g(self.spike_center, self.spike_width) + self.broad_height * g(self.broad_center, self.broad_width)
    }

    /// Peak heights of the exactly smoothed bumps, ignoring each bump's
    /// tail under the other.
    pub fn closed_form_peaks(&self, sigma: f64) -> (f64, f64) {
        let s = |w: f64| w / (w * w + sigma * sigma).sqrt();
        (self.spike_height * s(self.spike_width), self.broad_height * s(self.broad_width))
    }
}

/// `(f ⋆ N(0, σ²))(x)` by composite Simpson over `[−8σ, 8σ]` with
/// `n_quad` intervals; `σ = 0` returns `f(x)`.
pub fn smooth_at<F: Fn(f64) -> f64>(f: &F, x: f64, sigma: f64, n_quad: usize) -> f64 {
    if sigma == 0.0 {
        return f(x);
    }
    let n = n_quad.max(2) + n_quad % 2;
    let (a, b) = (-8.0 * sigma, 8.0 * sigma);
    let h = (b - a) / n as f64;
    let norm = 1.0 / (sigma * (2.0 * std::f64::consts::PI).sqrt());
    let integrand = |u: f64| f(x - u) * norm * (-0.5 * (u / sigma).powi(2)).exp();
    let mut s = integrand(a) + integrand(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * integrand(a + i as f64 * h);
    }
    s * h / 3.0
}

fn golden_max<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64, tol: f64) -> (f64, f64) {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - r * (hi - lo);
    let mut d = lo + r * (hi - lo);
    let (mut fc, mut fd) = (f(c), f(d));
    while hi - lo > tol {
        if fc > fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - r * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + r * (hi - lo);
            fd = f(d);
        }
    }
    let x = 0.5 * (lo + hi);
    (x, f(x))
}

/// Peak heights of the smoothed curve near each bump. Each search window
/// stays on its own side of the midpoint between the centers.
pub fn smoothed_peaks(bump: &TwoBump, sigma: f64, n_quad: usize) -> ((f64, f64), (f64, f64)) {
    let f = |x: f64| bump.eval(x);
    let g = |x: f64| smooth_at(&f, x, sigma, n_quad);
    let half = 0.5 * (bump.spike_center - bump.broad_center).abs();
    let sw = (5.0 * (bump.spike_width + sigma)).min(half);
    let bw = (2.0 * (bump.broad_width + sigma)).min(half);
    let spike = golden_max(g, bump.spike_center - sw, bump.spike_center + sw, 1e-10);
    let broad = golden_max(g, bump.broad_center - bw, bump.broad_center + bw, 1e-10);
    (spike, broad)
}

/// Smallest σ at which the smoothed broad bump is at least as high as the
/// smoothed spike, by bisection on `[lo, hi]`.
pub fn switch_sigma(bump: &TwoBump, lo: f64, hi: f64, n_quad: usize, tol: f64) -> Result<f64> {
    let broad_wins = |s: f64| {
        let ((_, hs), (_, hb)) = smoothed_peaks(bump, s, n_quad);
        hb >= hs
    };
    if broad_wins(lo) || !broad_wins(hi) {
        return Err(Error::Config(format!("argmax does not switch inside [{lo}, {hi}]")));
    }
    let (mut a, mut b) = (lo, hi);
    while b - a > tol {
        let m = 0.5 * (a + b);
        if broad_wins(m) {
            b = m;
        } else {
            a = m;
        }
    }
    Ok(0.5 * (a + b))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapeReport {
    pub xs: Vec<f64>,
    pub sigmas: Vec<f64>,
    /// One smoothed curve per σ; σ = 0 is the raw objective.
    pub curves: Vec<Vec<f64>>,
    /// Grid argmax of each curve.
    pub argmax: Vec<f64>,
    /// Switch point per quadrature resolution.
    pub sigma_star: Vec<(usize, f64)>,
    pub sigma_star_spread: f64,
}

pub fn landscape_toy(bump: &TwoBump, xs: &[f64], sigmas: &[f64], resolutions: &[usize]) -> Result<LandscapeReport> {
    if xs.is_empty() || resolutions.is_empty() {
        return Err(Error::Config("landscape needs an x grid and quadrature resolutions".into()));
    }
    let f = |x: f64| bump.eval(x);
    let n_plot = *resolutions.last().unwrap();
    let curves: Vec<Vec<f64>> = sigmas
        .iter()
        .map(|&s| xs.iter().map(|&x| smooth_at(&f, x, s, n_plot)).collect())
        .collect();
    let argmax = curves
        .iter()
        .map(|c| {
            let i = (0..c.len()).fold(0, |b, i| if c[i] > c[b] { i } else { b });
            xs[i]
        })
        .collect();
    let sigma_star = resolutions
        .iter()
        .map(|&n| Ok((n, switch_sigma(bump, 1e-4, 1.0, n, 1e-9)?)))
        .collect::<Result<Vec<_>>>()?;
    let lo = sigma_star.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
    let hi = sigma_star.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    Ok(LandscapeReport {
        xs: xs.to_vec(),
        sigmas: sigmas.to_vec(),
        curves,
        argmax,
        sigma_star,
        sigma_star_spread: hi - lo,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bound_scales_inverse_square() {
        let b1 = kl_bound(1.0, 0.7, 4, 0.01, 0.2, SigmaExponent::Two);
        let b2 = kl_bound(1.0, 0.7, 4, 0.01, 0.4, SigmaExponent::Two);
        assert!((b2 / b1 - 0.25).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_give_trivial_conditions() {
        let m = OneLayerModel::new(3, 2, vec![0.0; 6]).unwrap();
        let c = estimate_conditions(&m, 0.5, 1000, &[vec![0.3, -0.2]], 1).unwrap();
        assert!((c.alpha - 1.0).abs() < 1e-12);
        assert!(c.c < 1e-2);
    }

    #[test]
    fn stein_rejects_small_samples() {
        let m = OneLayerModel::random(3, 2, 1.0, 0).unwrap();
        assert!(stein_check(&m, &[0.0, 0.0], 0.5, 100, 0).is_err());
    }

    #[test]
    fn smoothing_at_zero_sigma_is_identity() {
        let b = TwoBump::default();
        let f = |x: f64| b.eval(x);
        for x in [-1.0, 0.0, 0.99] {
            assert_eq!(smooth_at(&f, x, 0.0, 100), b.eval(x));
        }
    }

    #[test]
    fn zero_zeta_taylor() {
        let m = OneLayerModel::random(4, 3, 1.0, 2).unwrap();
        let r = taylor_kl_check(&m, &[0.1, 0.2, -0.3], &[0.0], 10, 0).unwrap();
        assert_eq!(r.points[0].exact, 0.0);
        assert_eq!(r.points[0].approx, 0.0);
    }
}
