//! Training and inference engines over one parameter snapshot, and the
//! rollout sampler.
//!
//! The inference engine evaluates `π(a | x + ζ)`: a Gaussian shift `ζ` is
//! added to the embedding output at every position, and logits may be
//! rounded to a reduced mantissa. `ζ` is keyed by `(seed_stream, prompt id,
//! sample id)` with rows drawn in position order, so the engine is
//! deterministic per request and replaying a response reproduces the
//! probabilities recorded while sampling it.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{log_softmax, Tape, Tensor};
use crate::policy::{
    forward_logits, sample_from_logprobs, BoundParams, PerturbationSpec, PolicyParams, ScoreItem, SeqInput, Token,
};
use crate::rng::{self, Domain};
use crate::tasks::{self, Episode, Prompt, TaskSpec, TokenRole};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EngineTag {
    Train,
    Infer,
    TrainPerturbed,
}

/// Per-position log-probabilities of a realized response.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenLogProbs {
    pub engine_tag: EngineTag,
    pub params_version: u64,
    pub values: Vec<f64>,
}

impl TokenLogProbs {
    pub fn new(engine_tag: EngineTag, params_version: u64, values: Vec<f64>) -> Self {
        Self {
            engine_tag,
            params_version,
            values,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MismatchModel {
    pub zeta_std: f64,
    #[serde(default)]
    pub round_bits: Option<u32>,
    #[serde(default)]
    pub seed_stream: u64,
}

impl Default for MismatchModel {
    fn default() -> Self {
        Self {
            zeta_std: 0.02,
            round_bits: None,
            seed_stream: 0,
        }
    }
}

impl MismatchModel {
    pub fn none() -> Self {
        Self {
            zeta_std: 0.0,
            round_bits: None,
            seed_stream: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.zeta_std >= 0.0) || !self.zeta_std.is_finite() {
            return Err(Error::Config("zeta_std must be finite and non-negative".into()));
        }
        if let Some(b) = self.round_bits {
            if !(4..=52).contains(&b) {
                return Err(Error::Config(format!("round_bits {b} outside [4, 52]")));
            }
        }
        Ok(())
    }

    /// `ζ` for one request, `[rows, d_model]`, or `None` when `zeta_std = 0`.
    pub fn zeta(&self, prompt_id: u64, sample_id: u64, rows: usize, d_model: usize) -> Option<Tensor> {
        if self.zeta_std == 0.0 {
            return None;
        }
        let mut s = rng::stream(self.seed_stream, Domain::Mismatch, &[prompt_id, sample_id]);
        let data = rng::normals(&mut s, rows * d_model)
            .into_iter()
            .map(|z| z * self.zeta_std)
            .collect();
        Some(Tensor::new(vec![rows, d_model], data).expect("zeta shape"))
    }

    fn apply_rounding(&self, logits: &mut [f64]) {
        if let Some(b) = self.round_bits {
            logits.iter_mut().for_each(|x| *x = round_mantissa(*x, b));
        }
    }
}

/// Rounds to `bits` explicit mantissa bits, ties to even.
pub fn round_mantissa(x: f64, bits: u32) -> f64 {
    if bits >= 52 || !x.is_finite() {
        return x;
    }
    let drop = 52 - bits;
    let b = x.to_bits();
    let mask = (1u64 << drop) - 1;
    let half = 1u64 << (drop - 1);
    let low = b & mask;
    let mut kept = b & !mask;
    if low > half || (low == half && (kept >> drop) & 1 == 1) {
        kept += 1u64 << drop;
    }
    f64::from_bits(kept)
}

/// Exact training-engine log-probs of `tokens[prompt_len..]`.
pub fn eval_train(params: &PolicyParams, version: u64, tokens: &[Token], prompt_len: usize) -> Result<TokenLogProbs> {
    let mut lp = crate::policy::logprobs(params, tokens, prompt_len, None, &PerturbationSpec::None)?;
    lp.params_version = version;
    Ok(lp)
}

/// Training-engine log-probs for every response of a batch, packed into one
/// forward pass.
pub fn eval_train_batch(params: &PolicyParams, version: u64, batch: &RolloutBatch) -> Result<Vec<TokenLogProbs>> {
    let full: Vec<Vec<Token>> = batch.responses.iter().map(|r| r.full_tokens()).collect();
    let items: Vec<ScoreItem<'_>> = batch
        .responses
        .iter()
        .zip(&full)
        .map(|(r, t)| ScoreItem {
            tokens: t,
            prompt_len: r.prompt.len(),
            embed_shift: None,
            draw: None,
        })
        .collect();
    let scored = crate::policy::score(params, &PerturbationSpec::None, &items)?;
    Ok((0..items.len())
        .map(|i| TokenLogProbs::new(EngineTag::Train, version, scored.seq_logprobs(i).to_vec()))
        .collect())
}

/// Logits of the requested rows, one `Vec` per row.
fn infer_rows(params: &PolicyParams, mismatch: &MismatchModel, seqs: &[SeqInput<'_>]) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params)?;
    let logits = forward_logits(&mut tape, params, &bound, &PerturbationSpec::None, seqs)?;
    let t = tape.value(logits);
    Ok((0..t.rows())
        .map(|i| {
            let mut row = t.row(i).to_vec();
            mismatch.apply_rounding(&mut row);
            log_softmax(&row)
        })
        .collect())
}

/// Inference-engine log-probs of `tokens[prompt_len..]` for request
/// `(prompt_id, sample_id)`.
pub fn eval_infer(params: &PolicyParams, version: u64, tokens: &[Token], prompt_len: usize, mismatch: &MismatchModel, prompt_id: u64, sample_id: u64) -> Result<TokenLogProbs> {
    mismatch.validate()?;
    if prompt_len == 0 || prompt_len >= tokens.len() {
        return Err(crate::error::shape_err("eval_infer", "need a nonempty prompt and response"));
    }
    let input = &tokens[..tokens.len() - 1];
    let zeta = mismatch.zeta(prompt_id, sample_id, input.len(), params.config.d_model);
    let rows: Vec<usize> = (prompt_len - 1..input.len()).collect();
    let lps = infer_rows(
        params,
        mismatch,
        &[SeqInput {
            tokens: input,
            rows: rows.clone(),
            embed_shift: zeta.as_ref(),
            draw: None,
        }],
    )?;
    let values = rows.iter().zip(&lps).map(|(&r, lp)| lp[tokens[r + 1]]).collect();
    Ok(TokenLogProbs::new(EngineTag::Infer, version, values))
}

pub const ROLLOUT_SCHEMA_VERSION: u32 = 1;

/// One sampled response with everything the objectives need.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub prompt_id: u64,
    pub sample_id: u64,
    pub prompt: Vec<Token>,
    pub response: Vec<Token>,
    pub roles: Vec<TokenRole>,
    /// `log π^infer_{θ_old}` recorded while sampling.
    pub infer_logprobs: Vec<f64>,
    pub reward: f64,
    #[serde(default)]
    pub advantage: f64,
}

impl Response {
    pub fn full_tokens(&self) -> Vec<Token> {
        let mut t = self.prompt.clone();
        t.extend(&self.response);
        t
    }

    pub fn model_mask(&self) -> Vec<bool> {
        self.roles.iter().map(|r| r.is_model()).collect()
    }
}

/// Responses laid out group-major: the `group_size` samples of prompt 0,
/// then prompt 1, and so on.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutBatch {
    pub params_version: u64,
    pub group_size: usize,
    pub responses: Vec<Response>,
}

#[derive(Serialize, Deserialize)]
struct Record<'a> {
    schema_version: u32,
    params_version: u64,
    group_size: usize,
    #[serde(flatten)]
    response: std::borrow::Cow<'a, Response>,
}

impl RolloutBatch {
    pub fn n_groups(&self) -> usize {
        self.responses.len() / self.group_size.max(1)
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.responses.iter().map(|r| r.reward).collect()
    }

    pub fn n_tokens(&self) -> usize {
        self.responses.iter().map(|r| r.response.len()).sum()
    }

    /// JSON lines, one record per response.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.responses {
            let rec = Record {
                schema_version: ROLLOUT_SCHEMA_VERSION,
                params_version: self.params_version,
                group_size: self.group_size,
                response: std::borrow::Cow::Borrowed(r),
            };
            out.push_str(&serde_json::to_string(&rec)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut batch: Option<Self> = None;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let rec: Record<'static> = serde_json::from_str(line)?;
            if rec.schema_version != ROLLOUT_SCHEMA_VERSION {
                return Err(Error::Format(format!("unsupported rollout schema {}", rec.schema_version)));
            }
            let b = batch.get_or_insert_with(|| Self {
                params_version: rec.params_version,
                group_size: rec.group_size,
                responses: Vec::new(),
            });
            if b.params_version != rec.params_version || b.group_size != rec.group_size {
                return Err(Error::Format("records disagree on batch metadata".into()));
            }
            b.responses.push(rec.response.into_owned());
        }
        batch.ok_or_else(|| Error::Format("empty rollout file".into()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutConfig {
    pub group_size: usize,
    pub temperature: f64,
    /// Model-token budget of single-turn tasks.
    pub max_new: usize,
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// Base seed of the sampling streams.
    #[serde(default)]
    pub seed: u64,
}

fn default_workers() -> usize {
    1
}

struct Job<'a> {
    prompt: &'a Prompt,
    sample_id: u64,
    episode: Episode,
    zeta: Option<Tensor>,
    logprobs: Vec<f64>,
    rng: rand_chacha::ChaCha8Rng,
}

impl Job<'_> {
    fn seq(&self) -> Vec<Token> {
        let mut s = self.prompt.tokens.clone();
        s.extend(&self.episode.response);
        s
    }
}

/// Samples `group_size` responses per prompt from the inference engine.
///
/// Each request draws from its own stream keyed by `(seed, prompt id,
/// sample id)`, and all per-row computation is independent of which other
/// requests share a forward pass, so the batch does not depend on
/// `workers`.
pub fn rollout(params: &PolicyParams, version: u64, mismatch: &MismatchModel, task: &TaskSpec, prompts: &[Prompt], cfg: &RolloutConfig) -> Result<RolloutBatch> {
    mismatch.validate()?;
    task.validate()?;
    if prompts.is_empty() {
        return Err(Error::Task("rollout needs at least one prompt".into()));
    }
    if cfg.group_size < 2 {
        return Err(Error::Config("group_size must be at least 2".into()));
    }
    if !(cfg.temperature > 0.0) {
        return Err(Error::Config("temperature must be positive".into()));
    }
    if cfg.max_new == 0 {
        return Err(Error::Config("max_new must be at least 1".into()));
    }
    let worst = task.max_prompt_len() + task.max_response_len().min(match task.kind {
        tasks::TaskKind::MultiTurnCalc => usize::MAX,
        _ => cfg.max_new,
    });
    if worst > params.config.context_len {
        return Err(Error::Config(format!(
            "episodes may reach {worst} tokens but context_len is {}",
            params.config.context_len
        )));
    }
    let d = params.config.d_model;
    let ctx = params.config.context_len;
    let jobs: Vec<(usize, u64)> = (0..prompts.len())
        .flat_map(|p| (0..cfg.group_size as u64).map(move |s| (p, s)))
        .collect();
    let workers = cfg.workers.max(1);
    let chunk = jobs.len().div_ceil(workers);
    let run_chunk = |chunk: &[(usize, u64)]| -> Result<Vec<Response>> {
        let mut live: Vec<Job<'_>> = chunk
            .iter()
            .map(|&(p, s)| {
                let prompt = &prompts[p];
                Job {
                    prompt,
                    sample_id: s,
                    episode: Episode::new(task, cfg.max_new),
                    zeta: mismatch.zeta(prompt.id, s, ctx, d),
                    logprobs: Vec::new(),
                    rng: rng::stream(cfg.seed, Domain::Sampling, &[prompt.id, s]),
                }
            })
            .collect();
        loop {
            let active: Vec<usize> = (0..live.len()).filter(|&i| !live[i].episode.is_done()).collect();
            if active.is_empty() {
                break;
            }
            let seqs: Vec<Vec<Token>> = active.iter().map(|&i| live[i].seq()).collect();
            let inputs: Vec<SeqInput<'_>> = active
                .iter()
                .zip(&seqs)
                .map(|(&i, s)| {
                    let j = &live[i];
                    let p = j.prompt.tokens.len();
                    // rows predicting response tokens still lacking a log-prob, then the next token
                    let rows = (p - 1 + j.logprobs.len()..s.len()).collect();
                    SeqInput {
                        tokens: s,
                        rows,
                        embed_shift: j.zeta.as_ref(),
                        draw: None,
                    }
                })
                .collect();
            let counts: Vec<usize> = inputs.iter().map(|s| s.rows.len()).collect();
            let lps = infer_rows(params, mismatch, &inputs)?;
            drop(inputs);
            let mut it = lps.into_iter();
            for ((&i, s), n) in active.iter().zip(&seqs).zip(counts) {
                let job = &mut live[i];
                let p = job.prompt.tokens.len();
                for k in 0..n - 1 {
                    let row = it.next().expect("row count");
                    let pos = p + job.logprobs.len();
                    debug_assert!(k < n);
                    job.logprobs.push(row[s[pos]]);
                }
                let last = it.next().expect("row count");
                let u: f64 = rand::Rng::random(&mut job.rng);
                let tok = sample_from_logprobs(&last, cfg.temperature, u);
                job.logprobs.push(last[tok]);
                job.episode.push(tok)?;
            }
        }
        // tool tokens appended by the final step still need their log-probs
        let pending: Vec<usize> = (0..live.len())
            .filter(|&i| live[i].logprobs.len() < live[i].episode.response.len())
            .collect();
        if !pending.is_empty() {
            let seqs: Vec<Vec<Token>> = pending.iter().map(|&i| live[i].seq()).collect();
            let inputs: Vec<SeqInput<'_>> = pending
                .iter()
                .zip(&seqs)
                .map(|(&i, s)| {
                    let j = &live[i];
                    let p = j.prompt.tokens.len();
                    SeqInput {
                        tokens: &s[..s.len() - 1],
                        rows: (p - 1 + j.logprobs.len()..s.len() - 1).collect(),
                        embed_shift: j.zeta.as_ref(),
                        draw: None,
                    }
                })
                .collect();
            let counts: Vec<usize> = inputs.iter().map(|s| s.rows.len()).collect();
            let lps = infer_rows(params, mismatch, &inputs)?;
            drop(inputs);
            let mut it = lps.into_iter();
            for ((&i, s), n) in pending.iter().zip(&seqs).zip(counts) {
                let job = &mut live[i];
                let p = job.prompt.tokens.len();
                for _ in 0..n {
                    let row = it.next().expect("row count");
                    let pos = p + job.logprobs.len();
                    job.logprobs.push(row[s[pos]]);
                }
            }
        }
        Ok(live
            .into_iter()
            .map(|j| {
                let reward = tasks::verify(task, j.prompt, &j.episode.response);
                Response {
                    prompt_id: j.prompt.id,
                    sample_id: j.sample_id,
                    prompt: j.prompt.tokens.clone(),
                    response: j.episode.response,
                    roles: j.episode.roles,
                    infer_logprobs: j.logprobs,
                    reward,
                    advantage: 0.0,
                }
            })
            .collect())
    };
    let chunks: Vec<&[(usize, u64)]> = jobs.chunks(chunk).collect();
    let parts: Vec<Result<Vec<Response>>> = if workers == 1 {
        chunks.into_iter().map(run_chunk).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| chunks.into_par_iter().map(run_chunk).collect())
    };
    let mut responses = Vec::with_capacity(jobs.len());
    for p in parts {
        responses.extend(p?);
    }
    Ok(RolloutBatch {
        params_version: version,
        group_size: cfg.group_size,
        responses,
    })
}
