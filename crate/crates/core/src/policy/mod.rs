//! Decoder-only transformer policy with Gaussian perturbation injection.
//!
//! A perturbation target is either the input hidden state of a block (added
//! to the residual stream before the block's first layer norm) or the final
//! logits. Target `h < n_layers` is block `h`; target `n_layers` is the
//! logits. Each target has its own scale `σ_h = exp(log σ_h)`.

mod archive;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use archive::TensorArchive;

use crate::engines::{EngineTag, TokenLogProbs};
use crate::error::{Error, Result};
use crate::numcore::{logsumexp, Tape, Tensor, Var};
use crate::rng::{self, Domain};

pub type Token = usize;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub vocab_size: usize,
    pub context_len: usize,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
}

fn default_ln_eps() -> f64 {
    1e-5
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            context_len: 16,
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            ln_eps: default_ln_eps(),
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 {
            return Err(Error::Config("vocab_size must be at least 4".into()));
        }
        if self.context_len < 2 {
            return Err(Error::Config("context_len must be at least 2".into()));
        }
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 {
            return Err(Error::Config("layers, width and heads must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::Config("ln_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }

    /// Number of perturbation targets: one per block plus the logits.
    pub fn n_targets(&self) -> usize {
        self.n_layers + 1
    }

    /// Parameter names and shapes in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (v, l, d, f) = (self.vocab_size, self.context_len, self.d_model, self.d_ff());
        let mut out = vec![
            ("tok_emb".to_string(), vec![v, d]),
            ("pos_emb".to_string(), vec![l, d]),
        ];
        for h in 0..self.n_layers {
            let p = |s: &str| format!("blocks.{h}.{s}");
            out.extend([
                (p("ln1.g"), vec![d]),
                (p("ln1.b"), vec![d]),
                (p("attn.wq"), vec![d, d]),
                (p("attn.wk"), vec![d, d]),
                (p("attn.wv"), vec![d, d]),
                (p("attn.wo"), vec![d, d]),
                (p("attn.bo"), vec![d]),
                (p("ln2.g"), vec![d]),
                (p("ln2.b"), vec![d]),
                (p("mlp.w1"), vec![d, f]),
                (p("mlp.b1"), vec![f]),
                (p("mlp.w2"), vec![f, d]),
                (p("mlp.b2"), vec![d]),
            ]);
        }
        out.extend([
            ("ln_f.g".to_string(), vec![d]),
            ("ln_f.b".to_string(), vec![d]),
            ("lm_head".to_string(), vec![d, v]),
        ]);
        out
    }
}

const PER_BLOCK: usize = 13;

/// Which hidden states receive Gaussian noise.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum PerturbationSpec {
    None,
    AllLayers,
    LayerBand { lo: usize, hi: usize },
    LogitsOnly,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        Self::AllLayers
    }
}

impl PerturbationSpec {
    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if let Self::LayerBand { lo, hi } = self {
            if lo > hi || *hi >= n_layers {
                return Err(Error::Config(format!(
                    "layer band ({lo},{hi}) must satisfy 0 <= lo <= hi < {n_layers}"
                )));
            }
        }
        Ok(())
    }

    /// Active target indices (see module docs for numbering).
    pub fn targets(&self, n_layers: usize) -> Vec<usize> {
        match self {
            Self::None => vec![],
            Self::AllLayers => (0..n_layers).collect(),
            Self::LayerBand { lo, hi } => (*lo..=(*hi).min(n_layers.saturating_sub(1))).collect(),
            Self::LogitsOnly => vec![n_layers],
        }
    }

    pub fn is_none(&self) -> bool {
        matches!(self, Self::None)
    }
}

/// Standard-normal noise for one sequence: per target, one row per input
/// position. Scaling by `σ_h` happens at injection.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationDraw {
    pub seed: u64,
    targets: Vec<Option<Tensor>>,
}

impl PerturbationDraw {
    /// Row `r` of target `t` comes from the stream keyed by
    /// `(seed, stream_key, t, r)`, so a draw restricted to a subset of
    /// targets or to a prefix of positions matches the full draw exactly.
    pub fn sample(config: &PolicyConfig, spec: &PerturbationSpec, rows: usize, seed: u64, stream_key: u64) -> Self {
        let mut targets = vec![None; config.n_targets()];
        for t in spec.targets(config.n_layers) {
            let width = if t == config.n_layers { config.vocab_size } else { config.d_model };
            let mut data = Vec::with_capacity(rows * width);
            for r in 0..rows {
                let mut s = rng::stream(seed, Domain::Perturbation, &[stream_key, t as u64, r as u64]);
                data.extend(rng::normals(&mut s, width));
            }
            targets[t] = Some(Tensor::new(vec![rows, width], data).expect("draw shape"));
        }
        Self { seed, targets }
    }

    /// A draw of explicit tensors (tests, zero draws).
    pub fn from_tensors(seed: u64, targets: Vec<Option<Tensor>>) -> Self {
        Self { seed, targets }
    }

    pub fn target(&self, t: usize) -> Option<&Tensor> {
        self.targets.get(t).and_then(|x| x.as_ref())
    }

    pub fn zeroed(&self) -> Self {
        Self {
            seed: self.seed,
            targets: self
                .targets
                .iter()
                .map(|t| t.as_ref().map(|t| Tensor::zeros(t.shape().to_vec())))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    pub config: PolicyConfig,
    tensors: Vec<Tensor>,
    /// One entry per perturbation target; `-inf` encodes `σ = 0`.
    pub perturb_log_sigma: Vec<f64>,
}

impl PolicyParams {
    pub fn init(config: &PolicyConfig, seed: u64, sigma_init: f64) -> Result<Self> {
        config.validate()?;
        let layers = config.n_layers as f64;
        let tensors = config
            .layout()
            .into_iter()
            .enumerate()
            .map(|(i, (name, shape))| {
                let n: usize = shape.iter().product();
                let mut s = rng::stream(seed, Domain::Init, &[i as u64]);
                let data = if name.ends_with(".g") {
                    vec![1.0; n]
                } else if name.ends_with(".b") || name.ends_with(".bo") || name.ends_with(".b1") || name.ends_with(".b2") {
                    vec![0.0; n]
                } else {
                    let std = if name.ends_with("_emb") {
                        1.0
                    } else if name == "lm_head" {
                        0.5 / (shape[0] as f64).sqrt()
                    } else if name.ends_with("wo") || name.ends_with("w2") {
                        1.0 / (shape[0] as f64 * 2.0 * layers).sqrt()
                    } else {
                        1.0 / (shape[0] as f64).sqrt()
                    };
                    rng::normals(&mut s, n).into_iter().map(|z| z * std).collect()
                };
                Tensor::new(shape, data)
            })
            .collect::<Result<Vec<_>>>()?;
        let log_sigma = if sigma_init > 0.0 { sigma_init.ln() } else { f64::NEG_INFINITY };
        Ok(Self {
            config: config.clone(),
            tensors,
            perturb_log_sigma: vec![log_sigma; config.n_targets()],
        })
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn sigma(&self, target: usize) -> f64 {
        self.perturb_log_sigma[target].exp()
    }

    pub fn set_sigma(&mut self, sigma: f64) {
        let l = if sigma > 0.0 { sigma.ln() } else { f64::NEG_INFINITY };
        self.perturb_log_sigma.iter_mut().for_each(|x| *x = l);
    }

    pub fn n_weights(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// All weights flattened in layout order.
    pub fn flat_weights(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat_weights(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_weights() {
            return Err(crate::error::shape_err("set_flat_weights", "length differs"));
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn to_archive(&self) -> Result<TensorArchive> {
        let mut a = TensorArchive::new();
        for ((name, _), t) in self.config.layout().into_iter().zip(&self.tensors) {
            a.push(name, t.clone())?;
        }
        a.push("perturb.log_sigma", Tensor::vector(self.perturb_log_sigma.clone()))?;
        Ok(a)
    }

    pub fn from_archive(config: &PolicyConfig, archive: &TensorArchive) -> Result<Self> {
        config.validate()?;
        let mut tensors = Vec::new();
        for (name, shape) in config.layout() {
            let t = archive.require(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Format(format!("{name}: shape {:?}, expected {shape:?}", t.shape())));
            }
            tensors.push(t.clone());
        }
        let ls = archive.require("perturb.log_sigma")?;
        if ls.len() != config.n_targets() {
            return Err(Error::Format("perturb.log_sigma has the wrong length".into()));
        }
        Ok(Self {
            config: config.clone(),
            tensors,
            perturb_log_sigma: ls.data().to_vec(),
        })
    }
}

/// Parameters bound as leaves on a tape.
pub struct BoundParams {
    pub weights: Vec<Var>,
    /// `None` where `σ = 0`.
    pub log_sigma: Vec<Option<Var>>,
}

impl BoundParams {
    pub fn bind(tape: &mut Tape, params: &PolicyParams) -> Result<Self> {
        let weights = params
            .tensors
            .iter()
            .map(|t| tape.leaf(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let log_sigma = params
            .perturb_log_sigma
            .iter()
            .map(|&l| if l.is_finite() { tape.leaf(Tensor::scalar(l)).map(Some) } else { Ok(None) })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { weights, log_sigma })
    }
}

/// One sequence in a packed forward pass.
pub struct SeqInput<'a> {
    /// Input tokens, one row each.
    pub tokens: &'a [Token],
    /// Rows whose logits are wanted.
    pub rows: Vec<usize>,
    /// Additive shift on the embedding output, `[tokens.len(), d_model]`.
    pub embed_shift: Option<&'a Tensor>,
    /// Perturbation noise; rows must cover `tokens.len()`.
    pub draw: Option<&'a PerturbationDraw>,
}

/// Runs the transformer over packed sequences and returns the logits of
/// the requested rows, stacked in input order: `[Σ rows, vocab]`.
pub fn forward_logits(tape: &mut Tape, params: &PolicyParams, bound: &BoundParams, spec: &PerturbationSpec, seqs: &[SeqInput<'_>]) -> Result<Var> {
    let cfg = &params.config;
    let (d, vocab) = (cfg.d_model, cfg.vocab_size);
    let mut ids = Vec::new();
    let mut pos = Vec::new();
    let mut segments = Vec::with_capacity(seqs.len());
    let mut select = Vec::new();
    for s in seqs {
        if s.tokens.is_empty() {
            return Err(crate::error::shape_err("forward", "empty sequence"));
        }
        if s.tokens.len() > cfg.context_len {
            return Err(crate::error::shape_err(
                "forward",
                format!("{} tokens exceed context {}", s.tokens.len(), cfg.context_len),
            ));
        }
        if let Some(&t) = s.tokens.iter().find(|&&t| t >= vocab) {
            return Err(Error::OutOfVocab { token: t, vocab });
        }
        let start = ids.len();
        segments.push((start, s.tokens.len()));
        ids.extend_from_slice(s.tokens);
        pos.extend(0..s.tokens.len());
        for &r in &s.rows {
            if r >= s.tokens.len() {
                return Err(crate::error::shape_err("forward", "requested row beyond sequence"));
            }
            select.push(start + r);
        }
    }
    let n_rows = ids.len();
    let targets = spec.targets(cfg.n_layers);
    for s in seqs {
        for &t in &targets {
            match s.draw.and_then(|dr| dr.target(t)) {
                Some(dt) => {
                    let width = if t == cfg.n_layers { vocab } else { d };
                    if dt.rows() < s.tokens.len() || dt.cols() != width {
                        return Err(crate::error::shape_err(
                            "forward",
                            format!("draw for target {t} is {:?}, need {}x{width}", dt.shape(), s.tokens.len()),
                        ));
                    }
                }
                None if s.draw.is_some() => {
                    return Err(crate::error::shape_err("forward", format!("draw lacks target {t}")));
                }
                None => {}
            }
        }
    }
    let perturbing = !targets.is_empty() && seqs.iter().any(|s| s.draw.is_some());
    if perturbing && seqs.iter().any(|s| s.draw.is_none()) {
        return Err(crate::error::shape_err("forward", "either all or no sequences carry a draw"));
    }

    let w = &bound.weights;
    let tok = tape.embedding(w[0], &ids)?;
    let pe = tape.embedding(w[1], &pos)?;
    let mut x = tape.add(tok, pe)?;
    if seqs.iter().any(|s| s.embed_shift.is_some()) {
        let mut data = Vec::with_capacity(n_rows * d);
        for s in seqs {
            match s.embed_shift {
                Some(z) => {
                    if z.rows() < s.tokens.len() || z.cols() != d {
                        return Err(crate::error::shape_err("forward", "embedding shift shape"));
                    }
                    data.extend_from_slice(&z.data()[..s.tokens.len() * d]);
                }
                None => data.extend(std::iter::repeat(0.0).take(s.tokens.len() * d)),
            }
        }
        let shift = tape.leaf(Tensor::matrix(n_rows, d, data)?)?;
        x = tape.add(x, shift)?;
    }

    let noise = |tape: &mut Tape, t: usize, width: usize| -> Result<Option<Var>> {
        if !perturbing || !targets.contains(&t) {
            return Ok(None);
        }
        let Some(ls) = bound.log_sigma[t] else { return Ok(None) };
        let mut data = Vec::with_capacity(n_rows * width);
        for s in seqs {
            let dt = s.draw.and_then(|dr| dr.target(t)).expect("validated draw");
            data.extend_from_slice(&dt.data()[..s.tokens.len() * width]);
        }
        let delta = tape.leaf(Tensor::matrix(n_rows, width, data)?)?;
        let sigma = tape.exp(ls)?;
        Ok(Some(tape.scale_by(delta, sigma)?))
    };

    for h in 0..cfg.n_layers {
        if let Some(n) = noise(tape, h, d)? {
            x = tape.add(x, n)?;
        }
        let b = &w[2 + h * PER_BLOCK..2 + (h + 1) * PER_BLOCK];
        let a = tape.layer_norm(x, b[0], b[1], cfg.ln_eps)?;
        let q = tape.matmul(a, b[2])?;
        let k = tape.matmul(a, b[3])?;
        let v = tape.matmul(a, b[4])?;
        let att = tape.causal_attention(q, k, v, &segments, cfg.n_heads)?;
        let o = tape.matmul(att, b[5])?;
        let o = tape.add_row(o, b[6])?;
        x = tape.add(x, o)?;
        let m = tape.layer_norm(x, b[7], b[8], cfg.ln_eps)?;
        let m = tape.matmul(m, b[9])?;
        let m = tape.add_row(m, b[10])?;
        let m = tape.gelu(m)?;
        let m = tape.matmul(m, b[11])?;
        let m = tape.add_row(m, b[12])?;
        x = tape.add(x, m)?;
    }
    let fin = 2 + cfg.n_layers * PER_BLOCK;
    let xf = tape.layer_norm(x, w[fin], w[fin + 1], cfg.ln_eps)?;
    let sel = tape.select_rows(xf, &select)?;
    let mut logits = tape.matmul(sel, w[fin + 2])?;
    if let Some(n) = noise(tape, cfg.n_layers, vocab)? {
        let n = tape.select_rows(n, &select)?;
        logits = tape.add(logits, n)?;
    }
    Ok(logits)
}

/// Log-probabilities and entropies of realized response tokens for a batch.
pub struct ScoredBatch {
    pub tape: Tape,
    pub bound: BoundParams,
    /// Gathered `log π(a_t | prefix)`, `[total response tokens]`.
    pub logprobs: Var,
    /// Per-position entropy of the full next-token distribution.
    pub entropy: Var,
    /// `(offset, len)` of each sequence's response slice in `logprobs`.
    pub spans: Vec<(usize, usize)>,
}

impl ScoredBatch {
    pub fn logprob_values(&self) -> &[f64] {
        self.tape.value(self.logprobs).data()
    }

    pub fn seq_logprobs(&self, i: usize) -> &[f64] {
        let (o, l) = self.spans[i];
        &self.logprob_values()[o..o + l]
    }

    pub fn entropy_values(&self) -> &[f64] {
        self.tape.value(self.entropy).data()
    }
}

/// A response to score: `tokens = prompt ++ response`.
pub struct ScoreItem<'a> {
    pub tokens: &'a [Token],
    pub prompt_len: usize,
    pub embed_shift: Option<&'a Tensor>,
    pub draw: Option<&'a PerturbationDraw>,
}

/// Records a full scoring pass on a fresh tape.
pub fn score(params: &PolicyParams, spec: &PerturbationSpec, items: &[ScoreItem<'_>]) -> Result<ScoredBatch> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params)?;
    let mut inputs = Vec::with_capacity(items.len());
    let mut targets = Vec::new();
    let mut spans = Vec::with_capacity(items.len());
    for it in items {
        if it.prompt_len == 0 || it.prompt_len >= it.tokens.len() {
            return Err(crate::error::shape_err("score", "need a nonempty prompt and response"));
        }
        let input = &it.tokens[..it.tokens.len() - 1];
        let rows: Vec<usize> = (it.prompt_len - 1..input.len()).collect();
        spans.push((targets.len(), rows.len()));
        targets.extend_from_slice(&it.tokens[it.prompt_len..]);
        inputs.push(SeqInput {
            tokens: input,
            rows,
            embed_shift: it.embed_shift,
            draw: it.draw,
        });
    }
    let logits = forward_logits(&mut tape, params, &bound, spec, &inputs)?;
    let logp = tape.log_softmax(logits)?;
    let logprobs = tape.gather(logp, &targets)?;
    let entropy = tape.row_entropy(logp)?;
    Ok(ScoredBatch {
        tape,
        bound,
        logprobs,
        entropy,
        spans,
    })
}

/// Per-token log-probabilities of the response `tokens[prompt_len..]`.
///
/// With `draw = None` (or `spec = none`) this is the exact policy `π_θ`;
/// with a draw it is the perturbed policy `π_{θ,σ}`.
pub fn logprobs(params: &PolicyParams, tokens: &[Token], prompt_len: usize, draw: Option<&PerturbationDraw>, spec: &PerturbationSpec) -> Result<TokenLogProbs> {
    let draw = if spec.is_none() { None } else { draw };
    let scored = score(
        params,
        spec,
        &[ScoreItem {
            tokens,
            prompt_len,
            embed_shift: None,
            draw,
        }],
    )?;
    let tag = if draw.is_some() { EngineTag::TrainPerturbed } else { EngineTag::Train };
    Ok(TokenLogProbs::new(tag, 0, scored.logprob_values().to_vec()))
}

/// `log((1/n) Σ_k exp(lp_k))` per position, over `n` evaluations.
pub fn log_mean_exp_rows<F>(n_samples: usize, mut eval: F) -> Result<Vec<f64>>
where
    F: FnMut(usize) -> Result<Vec<f64>>,
{
    if n_samples == 0 {
        return Err(Error::Config("n_samples must be at least 1".into()));
    }
    let mut cols: Vec<Vec<f64>> = Vec::new();
    for k in 0..n_samples {
        let lp = eval(k)?;
        if cols.is_empty() {
            cols = vec![Vec::with_capacity(n_samples); lp.len()];
        }
        if lp.len() != cols.len() {
            return Err(crate::error::shape_err("log_mean_exp_rows", "sample lengths differ"));
        }
        for (c, v) in cols.iter_mut().zip(lp) {
            c.push(v);
        }
    }
    let ln_n = (n_samples as f64).ln();
    Ok(cols.iter().map(|c| logsumexp(c) - ln_n).collect())
}

/// Monte-Carlo smoothed policy `log E_δ π_{θ,σ}(a_t | prefix, δ)`.
pub fn logprobs_smoothed(params: &PolicyParams, tokens: &[Token], prompt_len: usize, spec: &PerturbationSpec, n_samples: usize, seed: u64) -> Result<TokenLogProbs> {
    let rows = tokens.len().saturating_sub(1);
    let values = log_mean_exp_rows(n_samples, |k| {
        let draw = PerturbationDraw::sample(&params.config, spec, rows, seed, k as u64);
        Ok(logprobs(params, tokens, prompt_len, Some(&draw), spec)?.values)
    })?;
    Ok(TokenLogProbs::new(EngineTag::TrainPerturbed, 0, values))
}

/// Below this temperature sampling is argmax.
pub const GREEDY_TEMPERATURE: f64 = 1e-6;

/// Draws one token from a log-probability row at the given temperature
/// using a single uniform variate `u ∈ [0, 1)`.
pub fn sample_from_logprobs(logp: &[f64], temperature: f64, u: f64) -> Token {
    if temperature < GREEDY_TEMPERATURE {
        let mut best = 0;
        for (i, &v) in logp.iter().enumerate() {
            if v > logp[best] {
                best = i;
            }
        }
        return best;
    }
    let scaled: Vec<f64> = logp.iter().map(|v| v / temperature).collect();
    let lse = logsumexp(&scaled);
    let mut acc = 0.0;
    for (i, v) in scaled.iter().enumerate() {
        acc += (v - lse).exp();
        if u < acc {
            return i;
        }
    }
    // u landed in the rounding slack above the last cumulative sum
    scaled
        .iter()
        .enumerate()
        .rev()
        .find(|(_, v)| v.is_finite())
        .map(|(i, _)| i)
        .unwrap_or(logp.len() - 1)
}

/// Autoregressive sampling from the unperturbed policy.
pub fn sample<R: Rng>(params: &PolicyParams, prompt: &[Token], temperature: f64, max_new: usize, rng: &mut R) -> Result<Vec<Token>> {
    if !(temperature > 0.0) {
        return Err(Error::Config("temperature must be positive".into()));
    }
    if max_new == 0 {
        return Err(Error::Config("max_new must be at least 1".into()));
    }
    let mut seq = prompt.to_vec();
    for _ in 0..max_new {
        if seq.len() >= params.config.context_len {
            break;
        }
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, params)?;
        let logits = forward_logits(
            &mut tape,
            params,
            &bound,
            &PerturbationSpec::None,
            &[SeqInput {
                tokens: &seq,
                rows: vec![seq.len() - 1],
                embed_shift: None,
                draw: None,
            }],
        )?;
        let lp = crate::numcore::log_softmax(tape.value(logits).data());
        let u: f64 = rng.random();
        seq.push(sample_from_logprobs(&lp, temperature, u));
    }
    Ok(seq[prompt.len()..].to_vec())
}
