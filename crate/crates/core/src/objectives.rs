//! Group advantages, importance ratios, clipping and masking, and the
//! scalar training loss.
//!
//! Which log-prob sources a method reads:
//!
//! | method      | numerator      | denominator      | correction mask       | level    |
//! |-------------|----------------|------------------|-----------------------|----------|
//! | grpo-token  | `π^D_θ`        | `π^D_θold`       | none                  | token    |
//! | gspo-geo    | `π^D_θ`        | `π^D_θold`       | none                  | geometric|
//! | token-mis   | `π^D_θ`        | `π^D_θold`       | sequence `ρ′ > C`     | token    |
//! | seq-mis     | `π^D_θ`        | `π^D_θold`       | sequence `ρ′ > C`     | sequence |
//! | seq-bypass  | `π^D_θ`        | `π^infer_θold`   | none                  | sequence |
//! | token-alp   | `π_θ,σ`        | `π^infer_θold`   | none                  | token    |
//! | seq-alp     | `π_θ,σ`        | `π^infer_θold`   | none                  | sequence |
//!
//! with `ρ′ = π^D_θold / π^infer_θold`. Denominators and masks are constants.

use serde::{Deserialize, Serialize};

use crate::engines::{EngineTag, TokenLogProbs};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    GrpoToken,
    GspoGeo,
    TokenMis,
    SeqMis,
    SeqBypass,
    TokenAlp,
    SeqAlp,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::GrpoToken,
        Method::GspoGeo,
        Method::TokenMis,
        Method::SeqMis,
        Method::SeqBypass,
        Method::TokenAlp,
        Method::SeqAlp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::GrpoToken => "grpo-token",
            Method::GspoGeo => "gspo-geo",
            Method::TokenMis => "token-mis",
            Method::SeqMis => "seq-mis",
            Method::SeqBypass => "seq-bypass",
            Method::TokenAlp => "token-alp",
            Method::SeqAlp => "seq-alp",
        }
    }

    pub fn aggregation(self) -> Aggregation {
        match self {
            Method::GrpoToken | Method::TokenMis | Method::TokenAlp => Aggregation::Token,
            Method::SeqMis | Method::SeqBypass | Method::SeqAlp => Aggregation::Sequence,
            Method::GspoGeo => Aggregation::GeometricMean,
        }
    }

    /// Whether the numerator is the perturbed training policy.
    pub fn is_alp(self) -> bool {
        matches!(self, Method::TokenAlp | Method::SeqAlp)
    }

    /// Whether the denominator is the stored inference log-prob.
    pub fn uses_infer_denominator(self) -> bool {
        matches!(self, Method::SeqBypass | Method::TokenAlp | Method::SeqAlp)
    }

    pub fn uses_mis(self) -> bool {
        matches!(self, Method::TokenMis | Method::SeqMis)
    }

    pub fn numerator_tag(self) -> EngineTag {
        if self.is_alp() {
            EngineTag::TrainPerturbed
        } else {
            EngineTag::Train
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    Token,
    Sequence,
    GeometricMean,
}

/// Clip bounds applied to sequence-level ratios.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeqClip {
    /// `(seq_clip_lo, seq_clip_hi)` as absolute ratio bounds.
    Absolute,
    /// `(1 − eps_lo, 1 + eps_hi)`, as at token level.
    Relative,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub method: Method,
    #[serde(default = "d_eps_lo")]
    pub eps_lo: f64,
    #[serde(default = "d_eps_hi")]
    pub eps_hi: f64,
    #[serde(default = "d_seq_lo")]
    pub seq_clip_lo: f64,
    #[serde(default = "d_seq_hi")]
    pub seq_clip_hi: f64,
    #[serde(default = "d_seq_clip")]
    pub seq_clip: SeqClip,
    #[serde(default = "d_mask")]
    pub mask_threshold: f64,
    #[serde(default = "d_dual")]
    pub dual_clip_c: f64,
    #[serde(default = "d_coef")]
    pub kl_coef: f64,
    #[serde(default = "d_coef")]
    pub entropy_coef: f64,
}

fn d_eps_lo() -> f64 {
    0.2
}
fn d_eps_hi() -> f64 {
    0.28
}
fn d_seq_lo() -> f64 {
    0.5
}
fn d_seq_hi() -> f64 {
    3.0
}
fn d_seq_clip() -> SeqClip {
    SeqClip::Absolute
}
fn d_mask() -> f64 {
    2.0
}
fn d_dual() -> f64 {
    10.0
}
fn d_coef() -> f64 {
    0.001
}

impl ObjectiveConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            eps_lo: d_eps_lo(),
            eps_hi: d_eps_hi(),
            seq_clip_lo: d_seq_lo(),
            seq_clip_hi: d_seq_hi(),
            seq_clip: d_seq_clip(),
            mask_threshold: d_mask(),
            dual_clip_c: d_dual(),
            kl_coef: d_coef(),
            entropy_coef: d_coef(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.eps_lo > 0.0 && self.eps_lo < 1.0) {
            return bad("eps_lo must lie in (0, 1)");
        }
        if !(self.eps_hi > 0.0) {
            return bad("eps_hi must be positive");
        }
        if !(self.mask_threshold > 1.0) {
            return bad("mask_threshold must exceed 1");
        }
        if !(self.dual_clip_c > 1.0 + self.eps_hi) {
            return bad("dual_clip_c must exceed 1 + eps_hi");
        }
        if !(self.seq_clip_lo > 0.0 && self.seq_clip_lo < 1.0 && self.seq_clip_hi > 1.0) {
            return bad("sequence clip bounds must satisfy 0 < lo < 1 < hi");
        }
        if !(self.kl_coef >= 0.0 && self.entropy_coef >= 0.0) {
            return bad("kl_coef and entropy_coef must be non-negative");
        }
        Ok(())
    }

    fn token_bounds(&self) -> (f64, f64) {
        (1.0 - self.eps_lo, 1.0 + self.eps_hi)
    }

    fn seq_bounds(&self) -> (f64, f64) {
        match self.seq_clip {
            SeqClip::Absolute => (self.seq_clip_lo, self.seq_clip_hi),
            SeqClip::Relative => self.token_bounds(),
        }
    }
}

/// Per-response group-normalized advantages.
#[derive(Clone, Debug, PartialEq)]
pub struct AdvantageSet {
    pub values: Vec<f64>,
    pub group_size: usize,
}

/// `A_i = (r_i − mean) / max(std, std_floor)` within consecutive groups of
/// `group_size`, using the population standard deviation.
pub fn group_advantage(rewards: &[f64], group_size: usize, std_floor: f64) -> Result<AdvantageSet> {
    if group_size < 2 {
        return Err(Error::Objective("groups need at least 2 members".into()));
    }
    if rewards.is_empty() || rewards.len() % group_size != 0 {
        return Err(Error::Objective(format!(
            "{} rewards do not split into groups of {group_size}",
            rewards.len()
        )));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite { op: "group_advantage" });
    }
    let mut values = Vec::with_capacity(rewards.len());
    for g in rewards.chunks(group_size) {
        let n = g.len() as f64;
        let mean = g.iter().sum::<f64>() / n;
        let var = g.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
        let denom = var.sqrt().max(std_floor);
        values.extend(g.iter().map(|r| (r - mean) / denom));
    }
    Ok(AdvantageSet { values, group_size })
}

/// Importance ratios in log space.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RatioSet {
    pub token_log: Vec<f64>,
    /// `Σ_t` of `token_log`; `None` until [`seq_ratio`] is applied.
    pub seq_log: Option<f64>,
    pub token_clipped: Vec<bool>,
    pub seq_clipped: bool,
}

fn check_pair(num: &TokenLogProbs, den: &TokenLogProbs) -> Result<()> {
    if num.len() != den.len() {
        return Err(crate::error::shape_err(
            "ratio",
            format!("{} numerator vs {} denominator positions", num.len(), den.len()),
        ));
    }
    Ok(())
}

/// `log ρ_t = lp_num_t − lp_den_t`.
pub fn token_ratio(num: &TokenLogProbs, den: &TokenLogProbs) -> Result<RatioSet> {
    check_pair(num, den)?;
    Ok(RatioSet {
        token_log: num.values.iter().zip(&den.values).map(|(a, b)| a - b).collect(),
        seq_log: None,
        token_clipped: vec![false; num.len()],
        seq_clipped: false,
    })
}

/// Fills the sequence slot with the sum of the token log-ratios.
pub fn seq_ratio(mut ratios: RatioSet) -> Result<RatioSet> {
    if ratios.token_log.is_empty() {
        return Err(Error::Objective("empty response has no sequence ratio".into()));
    }
    ratios.seq_log = Some(ratios.token_log.iter().sum());
    Ok(ratios)
}

/// `exp(mean_t log ρ_t)` over a response of `len` tokens.
pub fn gspo_ratio(ratios: &RatioSet, len: usize) -> Result<f64> {
    if len == 0 || ratios.token_log.len() != len {
        return Err(Error::Objective("geometric ratio needs a nonempty response of matching length".into()));
    }
    Ok((ratios.token_log.iter().sum::<f64>() / len as f64).exp())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskLevel {
    Token,
    Sequence,
}

/// Flags where the correction ratio `ρ′` exceeds `threshold`. At sequence
/// level every position of a flagged response is flagged.
pub fn mis_mask(correction: &RatioSet, threshold: f64, level: MaskLevel) -> Result<Vec<bool>> {
    if !(threshold > 0.0) {
        return Err(Error::Objective("mask threshold must be positive".into()));
    }
    let ln_c = threshold.ln();
    Ok(match level {
        MaskLevel::Token => correction.token_log.iter().map(|&l| l > ln_c).collect(),
        MaskLevel::Sequence => {
            let s = correction.seq_log.unwrap_or_else(|| correction.token_log.iter().sum());
            vec![s > ln_c; correction.token_log.len()]
        }
    })
}

/// `ρ^ALP = π_θ,σ / π^infer_θold`, token slots and sequence sum.
pub fn alp_ratio(perturbed: &TokenLogProbs, infer: &TokenLogProbs) -> Result<RatioSet> {
    if perturbed.engine_tag != EngineTag::TrainPerturbed {
        return Err(Error::Objective(format!(
            "numerator must be train-perturbed, got {:?}",
            perturbed.engine_tag
        )));
    }
    if infer.engine_tag != EngineTag::Infer {
        return Err(Error::Objective(format!("denominator must be infer, got {:?}", infer.engine_tag)));
    }
    seq_ratio(token_ratio(perturbed, infer)?)
}

/// `min(ρA, clip(ρ, lo, hi)A)`, lower-bounded by `cA` when `A < 0`.
/// Returns the surrogate and its derivative in `ρ`.
pub fn clipped_surrogate(rho: f64, adv: f64, lo: f64, hi: f64, dual_c: f64) -> (f64, f64, bool) {
    let unclipped = rho * adv;
    let clipped = rho.clamp(lo, hi) * adv;
    let (mut s, mut ds, mut was_clipped) = if unclipped <= clipped {
        (unclipped, adv, false)
    } else {
        (clipped, 0.0, true)
    };
    if adv < 0.0 && s < dual_c * adv {
        s = dual_c * adv;
        ds = 0.0;
        was_clipped = true;
    }
    (s, ds, was_clipped)
}

/// Inputs of [`assemble_loss`], flattened over the responses of a shard.
/// Slices are indexed by response position; `spans[i] = (offset, len)`.
#[derive(Clone, Copy, Debug)]
pub struct LossInputs<'a> {
    pub spans: &'a [(usize, usize)],
    pub advantages: &'a [f64],
    /// False for tool and void tokens.
    pub model_mask: &'a [bool],
    /// Numerator log-probs: `π^D_θ` or `π_θ,σ`.
    pub lp_num: &'a [f64],
    /// `π^D_θold`, also the KL reference.
    pub lp_old: &'a [f64],
    /// `π^infer_θold` recorded at rollout.
    pub lp_infer: &'a [f64],
    /// Entropy of the numerator distribution at each position.
    pub entropy: &'a [f64],
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossStats {
    pub surrogate: f64,
    pub entropy: f64,
    pub kl: f64,
    /// Fraction of model tokens whose ratio was clipped.
    pub clipped_frac: f64,
    /// Fraction of model tokens removed by the correction mask.
    pub masked_frac: f64,
    /// Method ratio `lp_num − lp_den` at every model token.
    pub token_log_ratio: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    /// `∂loss/∂lp_num` per position.
    pub d_lp_num: Vec<f64>,
    /// `∂loss/∂entropy` per position.
    pub d_entropy: Vec<f64>,
    pub stats: LossStats,
}

/// `loss = −surrogate − entropy_coef·H + kl_coef·KL`.
///
/// Token-level surrogates average over unmasked model tokens of the shard;
/// sequence-level and geometric surrogates average over unmasked
/// responses. Entropy and the k3 KL to `π^D_θold` average over model tokens.
pub fn assemble_loss(cfg: &ObjectiveConfig, inp: &LossInputs<'_>) -> Result<LossOutput> {
    let n = inp.lp_num.len();
    for (name, len) in [
        ("model_mask", inp.model_mask.len()),
        ("lp_old", inp.lp_old.len()),
        ("lp_infer", inp.lp_infer.len()),
        ("entropy", inp.entropy.len()),
    ] {
        if len != n {
            return Err(crate::error::shape_err("assemble_loss", format!("{name} has {len} entries, expected {n}")));
        }
    }
    if inp.spans.len() != inp.advantages.len() {
        return Err(crate::error::shape_err("assemble_loss", "one advantage per response required"));
    }
    let mut covered = 0;
    for &(o, l) in inp.spans {
        if o != covered {
            return Err(crate::error::shape_err("assemble_loss", "spans must tile the positions in order"));
        }
        covered += l;
    }
    if covered != n {
        return Err(crate::error::shape_err("assemble_loss", "spans do not cover every position"));
    }
    for (name, v) in [
        ("advantages", inp.advantages),
        ("lp_num", inp.lp_num),
        ("lp_old", inp.lp_old),
        ("lp_infer", inp.lp_infer),
        ("entropy", inp.entropy),
    ] {
        if v.iter().any(|x| x.is_nan()) {
            return Err(Error::Objective(format!("NaN in {name}")));
        }
    }

    let method = cfg.method;
    let den = if method.uses_infer_denominator() { inp.lp_infer } else { inp.lp_old };
    let mut d_lp = vec![0.0; n];
    let mut d_ent = vec![0.0; n];
    let mut stats = LossStats::default();

    let model_tokens = inp.model_mask.iter().filter(|&&m| m).count();
    let mut surrogate_sum = 0.0;
    let mut units = 0usize;
    let mut clipped_tokens = 0usize;
    let mut masked_tokens = 0usize;

    // sequence-level correction mask from ρ′ over model tokens
    let seq_masked: Vec<bool> = inp
        .spans
        .iter()
        .map(|&(o, l)| {
            method.uses_mis() && {
                let s: f64 = (o..o + l)
                    .filter(|&t| inp.model_mask[t])
                    .map(|t| inp.lp_old[t] - inp.lp_infer[t])
                    .sum();
                s > cfg.mask_threshold.ln()
            }
        })
        .collect();

    for (i, &(o, l)) in inp.spans.iter().enumerate() {
        let adv = inp.advantages[i];
        let toks: Vec<usize> = (o..o + l).filter(|&t| inp.model_mask[t]).collect();
        for &t in &toks {
            stats.token_log_ratio.push(inp.lp_num[t] - den[t]);
        }
        if toks.is_empty() {
            continue;
        }
        if seq_masked[i] {
            masked_tokens += toks.len();
            continue;
        }
        match method.aggregation() {
            Aggregation::Token => {
                let (lo, hi) = cfg.token_bounds();
                for &t in &toks {
                    let rho = (inp.lp_num[t] - den[t]).exp();
                    let (s, ds, c) = clipped_surrogate(rho, adv, lo, hi, cfg.dual_clip_c);
                    surrogate_sum += s;
                    d_lp[t] = ds * rho;
                    clipped_tokens += c as usize;
                    units += 1;
                }
            }
            Aggregation::Sequence | Aggregation::GeometricMean => {
                let log_sum: f64 = toks.iter().map(|&t| inp.lp_num[t] - den[t]).sum();
                let (log_r, scale, (lo, hi)) = if method.aggregation() == Aggregation::Sequence {
                    (log_sum, 1.0, cfg.seq_bounds())
                } else {
                    (log_sum / toks.len() as f64, 1.0 / toks.len() as f64, cfg.token_bounds())
                };
                // beyond this the clip region is active and the gradient is zero anyway
                let rho = log_r.min(700.0).exp();
                let (s, ds, c) = clipped_surrogate(rho, adv, lo, hi, cfg.dual_clip_c);
                surrogate_sum += s;
                for &t in &toks {
                    d_lp[t] = ds * rho * scale;
                }
                if c {
                    clipped_tokens += toks.len();
                }
                units += 1;
            }
        }
    }

    let surrogate = if units > 0 { surrogate_sum / units as f64 } else { 0.0 };
    if units > 0 {
        let inv = 1.0 / units as f64;
        d_lp.iter_mut().for_each(|g| *g *= -inv);
    }

    let (mut h, mut kl) = (0.0, 0.0);
    if model_tokens > 0 {
        let inv = 1.0 / model_tokens as f64;
        for t in 0..n {
            if !inp.model_mask[t] {
                continue;
            }
            h += inp.entropy[t];
            d_ent[t] = -cfg.entropy_coef * inv;
            let delta = inp.lp_old[t] - inp.lp_num[t];
            let e = delta.exp();
            kl += e - delta - 1.0;
            // d/d lp_num of exp(Δ) − Δ − 1 with Δ = lp_old − lp_num
            d_lp[t] += cfg.kl_coef * inv * (1.0 - e);
        }
        h *= inv;
        kl *= inv;
    }
    let loss = -surrogate - cfg.entropy_coef * h + cfg.kl_coef * kl;
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "assemble_loss" });
    }
    stats.surrogate = surrogate;
    stats.entropy = h;
    stats.kl = kl;
    if model_tokens > 0 {
        stats.clipped_frac = clipped_tokens as f64 / model_tokens as f64;
        stats.masked_frac = masked_tokens as f64 / model_tokens as f64;
    }
    Ok(LossOutput {
        loss,
        d_lp_num: d_lp,
        d_entropy: d_ent,
        stats,
    })
}
