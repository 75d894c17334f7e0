//! Training-dynamics instruments: KL estimators, entropy, log-ratio
//! quantile envelopes, perturbation shift statistics, and pass@k.

use serde::{Deserialize, Serialize};

use crate::engines::TokenLogProbs;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlEstimator {
    K1,
    K3,
}

/// Estimates `KL(p ‖ q)` from tokens sampled under `p`.
pub fn kl_estimate(lp_p: &TokenLogProbs, lp_q: &TokenLogProbs, estimator: KlEstimator) -> Result<f64> {
    kl_from_values(&lp_p.values, &lp_q.values, estimator)
}

pub fn kl_from_values(lp_p: &[f64], lp_q: &[f64], estimator: KlEstimator) -> Result<f64> {
    if lp_p.len() != lp_q.len() {
        return Err(crate::error::shape_err("kl_estimate", "length mismatch"));
    }
    if lp_p.is_empty() {
        return Ok(0.0);
    }
    let n = lp_p.len() as f64;
    let s: f64 = match estimator {
        KlEstimator::K1 => lp_p.iter().zip(lp_q).map(|(p, q)| p - q).sum(),
        KlEstimator::K3 => lp_p
            .iter()
            .zip(lp_q)
            .map(|(p, q)| {
                let d = q - p;
                d.exp() - d - 1.0
            })
            .sum(),
    };
    Ok(s / n)
}

/// Mean entropy of full next-token distributions given as log-prob rows.
pub fn entropy(rows: &[Vec<f64>]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    rows.iter()
        .map(|r| -r.iter().map(|&l| if l == f64::NEG_INFINITY { 0.0 } else { l.exp() * l }).sum::<f64>())
        .sum::<f64>()
        / rows.len() as f64
}

/// Linear-interpolation quantile (`q` in percent) of a sorted slice.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        n => {
            let pos = (q / 100.0).clamp(0.0, 1.0) * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            let frac = pos - lo as f64;
            sorted[lo] + (sorted[hi] - sorted[lo]) * frac
        }
    }
}

pub fn quantiles(values: &[f64], qs: &[f64]) -> Vec<f64> {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    qs.iter().map(|&q| quantile_sorted(&s, q)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvelopeSpec {
    /// Upper edges of the probability bins; the first bin is `(0, e_0]`
    /// and the last edge must be 1.
    pub edges: Vec<f64>,
    /// Quantile levels in percent.
    pub quantiles: Vec<f64>,
}

impl Default for EnvelopeSpec {
    fn default() -> Self {
        Self {
            edges: vec![1e-6, 1e-4, 1e-2, 1e-1, 1.0],
            quantiles: vec![1.0, 25.0, 50.0, 75.0, 99.0],
        }
    }
}

impl EnvelopeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.edges.is_empty() || *self.edges.last().unwrap() != 1.0 {
            return Err(Error::Config("envelope edges must end at 1".into()));
        }
        if !(self.edges[0] > 0.0) || self.edges.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Config("envelope edges must be positive and strictly increasing".into()));
        }
        if self.quantiles.is_empty()
            || self.quantiles.iter().any(|q| !(0.0..=100.0).contains(q))
            || self.quantiles.windows(2).any(|w| !(w[0] < w[1]))
        {
            return Err(Error::Config("quantiles must be strictly increasing within [0, 100]".into()));
        }
        Ok(())
    }

    /// Index of the bin holding probability `p ∈ (0, 1]`.
    pub fn bin_of(&self, p: f64) -> Option<usize> {
        if !(p > 0.0 && p <= 1.0) {
            return None;
        }
        self.edges.iter().position(|&e| p <= e)
    }

    pub fn bin_label(&self, b: usize) -> String {
        let lo = if b == 0 { 0.0 } else { self.edges[b - 1] };
        format!("({lo:e},{:e}]", self.edges[b])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Absent for empty bins.
    pub quantiles: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub quantile_levels: Vec<f64>,
    pub bins: Vec<EnvelopeBin>,
}

impl Envelope {
    pub fn total_count(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }

    /// Lowest-probability bin that holds any tokens.
    pub fn lowest_nonempty(&self) -> Option<&EnvelopeBin> {
        self.bins.iter().find(|b| b.count > 0)
    }
}

/// Quantiles of `log_ratios` per bin of the matching rollout probability.
pub fn ratio_envelope(log_ratios: &[f64], rollout_probs: &[f64], spec: &EnvelopeSpec) -> Result<Envelope> {
    spec.validate()?;
    if log_ratios.len() != rollout_probs.len() {
        return Err(crate::error::shape_err("ratio_envelope", "one probability per ratio required"));
    }
    let mut per_bin: Vec<Vec<f64>> = vec![Vec::new(); spec.edges.len()];
    for (&r, &p) in log_ratios.iter().zip(rollout_probs) {
        let b = spec
            .bin_of(p)
            .ok_or_else(|| Error::Config(format!("rollout probability {p} outside (0, 1]")))?;
        per_bin[b].push(r);
    }
    let bins = per_bin
        .into_iter()
        .enumerate()
        .map(|(b, vals)| EnvelopeBin {
            lo: if b == 0 { 0.0 } else { spec.edges[b - 1] },
            hi: spec.edges[b],
            count: vals.len(),
            quantiles: (!vals.is_empty()).then(|| quantiles(&vals, &spec.quantiles)),
        })
        .collect();
    Ok(Envelope {
        quantile_levels: spec.quantiles.clone(),
        bins,
    })
}

/// 99th percentile of `|log ratio|` in the lowest nonempty bin.
pub fn lowest_bin_abs_p99(log_ratios: &[f64], rollout_probs: &[f64], spec: &EnvelopeSpec) -> Result<Option<f64>> {
    spec.validate()?;
    let env = ratio_envelope(log_ratios, rollout_probs, spec)?;
    let Some(idx) = env.bins.iter().position(|b| b.count > 0) else {
        return Ok(None);
    };
    let abs: Vec<f64> = log_ratios
        .iter()
        .zip(rollout_probs)
        .filter(|(_, &p)| spec.bin_of(p) == Some(idx))
        .map(|(r, _)| r.abs())
        .collect();
    Ok(Some(quantiles(&abs, &[99.0])[0]))
}

/// Unbiased pass@k for one prompt with `c` correct out of `n`.
pub fn pass_at_k_single(n: usize, c: usize, k: usize) -> Result<f64> {
    if k > n || k == 0 || c > n {
        return Err(Error::Config(format!("pass@k needs 1 <= k <= n and c <= n (n={n}, c={c}, k={k})")));
    }
    if n - c < k {
        return Ok(1.0);
    }
    // C(n−c, k)/C(n, k) = Π_{i=0}^{k-1} (n−c−i)/(n−i)
    let mut ratio = 1.0;
    for i in 0..k {
        ratio *= (n - c - i) as f64 / (n - i) as f64;
    }
    Ok(1.0 - ratio)
}

/// Mean pass@k over prompts given `(n, c)` per prompt.
pub fn pass_at_k(counts: &[(usize, usize)], k: usize) -> Result<f64> {
    if counts.is_empty() {
        return Err(Error::Config("pass@k needs at least one prompt".into()));
    }
    let mut s = 0.0;
    for &(n, c) in counts {
        s += pass_at_k_single(n, c, k)?;
    }
    Ok(s / counts.len() as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ShiftStats {
    pub mean: f64,
    pub p75: f64,
    pub p99: f64,
}

/// Summary of `|exp(lp_perturbed) − exp(lp_unperturbed)|` per token.
pub fn perturb_shift_stats(lp_perturbed: &[f64], lp_unperturbed: &[f64]) -> Result<ShiftStats> {
    if lp_perturbed.len() != lp_unperturbed.len() {
        return Err(crate::error::shape_err("perturb_shift_stats", "length mismatch"));
    }
    if lp_perturbed.is_empty() {
        return Ok(ShiftStats::default());
    }
    let d: Vec<f64> = lp_perturbed
        .iter()
        .zip(lp_unperturbed)
        .map(|(a, b)| (a.exp() - b.exp()).abs())
        .collect();
    let q = quantiles(&d, &[75.0, 99.0]);
    Ok(ShiftStats {
        mean: d.iter().sum::<f64>() / d.len() as f64,
        p75: q[0],
        p99: q[1],
    })
}

/// Trailing moving average with window `w` (shorter at the start).
pub fn moving_average(xs: &[f64], w: usize) -> Vec<f64> {
    let w = w.max(1);
    (0..xs.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            xs[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

/// Pearson correlation; `None` when either side is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// One row of the per-update metrics table.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iter: usize,
    pub update: usize,
    pub reward_mean: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub entropy: f64,
    /// k1 of `π^infer_θold` vs `π^D_θold` on rollout tokens.
    pub kl_train_infer: f64,
    /// k3 of `π^D_θold` vs the unperturbed `π^D_θ` on the update's shard,
    /// measured before the step.
    pub kl_policy_update: f64,
    /// k3 of `π^D_θold` vs `π^D_θ` on held-out prompts after the iteration.
    pub kl_heldout: f64,
    /// Quantiles of the method's token log-ratio.
    pub ratio_quantiles: Vec<f64>,
    pub ratio_abs_p99: f64,
    pub clipped_frac: f64,
    pub masked_frac: f64,
    pub sigma: Vec<f64>,
    pub dp_mean: f64,
    pub dp_p75: f64,
    pub dp_p99: f64,
}

impl IterationMetrics {
    pub fn csv_header(quantile_levels: &[f64], n_sigma: usize) -> Vec<String> {
        let mut h: Vec<String> = [
            "iter",
            "update",
            "reward_mean",
            "loss",
            "grad_norm",
            "entropy",
            "kl_train_infer",
            "kl_policy_update",
            "kl_heldout",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        h.extend(quantile_levels.iter().map(|q| format!("log_ratio_q{q}")));
        h.extend(["ratio_abs_p99", "clipped_frac", "masked_frac"].map(String::from));
        h.extend((0..n_sigma).map(|i| format!("sigma_{i}")));
        h.extend(["dp_mean", "dp_p75", "dp_p99"].map(String::from));
        h
    }

    pub fn csv_row(&self) -> Vec<String> {
        let f = |x: f64| format!("{x}");
        let mut r = vec![self.iter.to_string(), self.update.to_string()];
        r.extend(
            [
                self.reward_mean,
                self.loss,
                self.grad_norm,
                self.entropy,
                self.kl_train_infer,
                self.kl_policy_update,
                self.kl_heldout,
            ]
            .map(f),
        );
        r.extend(self.ratio_quantiles.iter().copied().map(f));
        r.extend([self.ratio_abs_p99, self.clipped_frac, self.masked_frac].map(f));
        r.extend(self.sigma.iter().copied().map(f));
        r.extend([self.dp_mean, self.dp_p75, self.dp_p99].map(f));
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn pass_at_k_examples() {
        assert_eq!(pass_at_k_single(4, 4, 2).unwrap(), 1.0);
        assert_eq!(pass_at_k_single(4, 0, 2).unwrap(), 0.0);
        assert!(pass_at_k_single(2, 1, 3).is_err());
    }

    #[test]
    fn uniform_entropy() {
        let row = vec![-(32f64).ln(); 32];
        assert_abs_diff_eq!(entropy(&[row]), 32f64.ln(), epsilon = 1e-12);
        let mut one_hot = vec![f64::NEG_INFINITY; 4];
        one_hot[2] = 0.0;
        assert_eq!(entropy(&[one_hot]), 0.0);
    }

    #[test]
    fn kl_identity() {
        let a = [-0.1, -2.0, -0.7];
        assert_eq!(kl_from_values(&a, &a, KlEstimator::K1).unwrap(), 0.0);
        assert_eq!(kl_from_values(&a, &a, KlEstimator::K3).unwrap(), 0.0);
        assert!(kl_from_values(&a, &a[..2], KlEstimator::K1).is_err());
    }

    #[test]
    fn envelope_single_token() {
        let env = ratio_envelope(&[0.3], &[0.05], &EnvelopeSpec::default()).unwrap();
        let b = env.lowest_nonempty().unwrap();
        assert_eq!(b.quantiles.as_ref().unwrap(), &vec![0.3; 5]);
        assert_eq!(env.bins.iter().filter(|b| b.quantiles.is_none()).count(), 4);
    }

    #[test]
    fn envelope_rejects_bad_edges() {
        let spec = EnvelopeSpec {
            edges: vec![0.1, 0.01, 1.0],
            ..EnvelopeSpec::default()
        };
        assert!(ratio_envelope(&[], &[], &spec).is_err());
        let spec = EnvelopeSpec {
            edges: vec![0.1, 0.5],
            ..EnvelopeSpec::default()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn shift_stats_zero() {
        let s = perturb_shift_stats(&[-0.2, -1.0], &[-0.2, -1.0]).unwrap();
        assert_eq!(s, ShiftStats::default());
    }

    #[test]
    fn moving_average_window() {
        assert_eq!(moving_average(&[1.0, 3.0, 5.0], 2), vec![1.0, 2.0, 4.0]);
    }
}
