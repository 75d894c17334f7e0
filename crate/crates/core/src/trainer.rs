//! The iteration loop: snapshot `θ_old`, roll out on the inference engine,
//! then take several AdamW steps on `θ` (and on the perturbation scales for
//! ALP methods), each on its own shard of the batch.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{self, EnvelopeSpec, IterationMetrics, KlEstimator};
use crate::engines::{self, MismatchModel, RolloutBatch, RolloutConfig};
use crate::error::{Error, Result};
use crate::numcore::{l2, Tensor};
use crate::objectives::{self, LossInputs, LossOutput, ObjectiveConfig};
use crate::policy::{self, PerturbationDraw, PerturbationSpec, PolicyConfig, PolicyParams, ScoreItem, TensorArchive, Token};
use crate::rng::{self, Domain};
use crate::tasks::{self, Prompt, TaskSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    pub prompts_per_iter: usize,
    pub group_size: usize,
    pub updates_per_iter: usize,
    /// Sequences per gradient-accumulation chunk within one update.
    pub micro_batch: usize,
    /// Each update consumes its own `1/updates_per_iter` slice of the batch;
    /// when false every update sees the whole batch.
    #[serde(default = "yes")]
    pub shard_updates: bool,
    pub lr_theta: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub lr_sigma: f64,
    pub sigma_init: f64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_adam_eps")]
    pub adam_eps: f64,
    pub total_iters: usize,
    pub seed: u64,
    #[serde(default = "d_temperature")]
    pub temperature: f64,
    pub max_new: usize,
    #[serde(default = "d_workers")]
    pub workers: usize,
    #[serde(default = "d_heldout")]
    pub heldout_prompts: usize,
    /// Abort when the gradient norm exceeds this multiple of its trailing median.
    #[serde(default = "d_div_factor")]
    pub divergence_factor: f64,
    #[serde(default = "d_div_window")]
    pub divergence_window: usize,
    #[serde(default = "d_std_floor")]
    pub std_floor: f64,
}

fn yes() -> bool {
    true
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_adam_eps() -> f64 {
    1e-8
}
fn d_temperature() -> f64 {
    1.0
}
fn d_workers() -> usize {
    1
}
fn d_heldout() -> usize {
    16
}
fn d_div_factor() -> f64 {
    1e3
}
fn d_div_window() -> usize {
    50
}
fn d_std_floor() -> f64 {
    1e-6
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            prompts_per_iter: 32,
            group_size: 8,
            updates_per_iter: 16,
            micro_batch: 16,
            shard_updates: true,
            lr_theta: 1e-3,
            weight_decay: 0.01,
            lr_sigma: 5e-4,
            sigma_init: 1e-4,
            beta1: d_beta1(),
            beta2: d_beta2(),
            adam_eps: d_adam_eps(),
            total_iters: 300,
            seed: 0,
            temperature: d_temperature(),
            max_new: 2,
            workers: d_workers(),
            heldout_prompts: d_heldout(),
            divergence_factor: d_div_factor(),
            divergence_window: d_div_window(),
            std_floor: d_std_floor(),
        }
    }
}

impl TrainerConfig {
    pub fn batch_size(&self) -> usize {
        self.prompts_per_iter * self.group_size
    }

    pub fn shard_size(&self) -> usize {
        if self.shard_updates {
            self.batch_size() / self.updates_per_iter.max(1)
        } else {
            self.batch_size()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.prompts_per_iter == 0 {
            return bad("prompts_per_iter must be at least 1".into());
        }
        if self.group_size < 2 {
            return bad("group_size must be at least 2".into());
        }
        if self.updates_per_iter == 0 {
            return bad("updates_per_iter must be at least 1".into());
        }
        if self.shard_updates && self.batch_size() % self.updates_per_iter != 0 {
            return bad(format!(
                "batch of {} sequences does not split into {} updates",
                self.batch_size(),
                self.updates_per_iter
            ));
        }
        if self.micro_batch == 0 || self.shard_size() % self.micro_batch != 0 {
            return bad(format!(
                "micro_batch {} must divide the per-update batch of {}",
                self.micro_batch,
                self.shard_size()
            ));
        }
        if !(self.sigma_init > 0.0) {
            return bad("sigma_init must be positive".into());
        }
        if !(self.lr_sigma >= 0.0 && self.lr_theta >= 0.0 && self.weight_decay >= 0.0) {
            return bad("learning rates and weight decay must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be positive".into());
        }
        if !(self.temperature > 0.0) || self.max_new == 0 {
            return bad("temperature must be positive and max_new at least 1".into());
        }
        if !(self.divergence_factor > 1.0) {
            return bad("divergence_factor must exceed 1".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First and second moments plus step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One decoupled-weight-decay Adam step with bias-corrected moments.
pub fn adamw_step(params: &mut [f64], grads: &[f64], st: &mut AdamState, lr: f64, wd: f64, cfg: AdamConfig) -> Result<()> {
    if params.len() != grads.len() || st.m.len() != params.len() {
        return Err(crate::error::shape_err("adamw_step", "params, grads and moments differ in length"));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite { op: "adamw_step" });
    }
    st.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(st.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(st.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        st.m[i] = cfg.beta1 * st.m[i] + (1.0 - cfg.beta1) * g;
        st.v[i] = cfg.beta2 * st.v[i] + (1.0 - cfg.beta2) * g * g;
        let mhat = st.m[i] / bc1;
        let vhat = st.v[i] / bc2;
        params[i] -= lr * wd * params[i];
        params[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Everything needed to resume a run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunState {
    pub iter: usize,
    pub step: usize,
    pub params: PolicyParams,
    pub adam_theta: AdamState,
    pub adam_sigma: AdamState,
    pub grad_norms: Vec<f64>,
}

impl RunState {
    pub fn init(policy: &PolicyConfig, cfg: &TrainerConfig) -> Result<Self> {
        let params = PolicyParams::init(policy, cfg.seed, cfg.sigma_init)?;
        let n = params.n_weights();
        let h = params.perturb_log_sigma.len();
        Ok(Self {
            iter: 0,
            step: 0,
            params,
            adam_theta: AdamState::new(n),
            adam_sigma: AdamState::new(h),
            grad_norms: Vec::new(),
        })
    }

    pub fn to_archive(&self) -> Result<TensorArchive> {
        let mut a = self.params.to_archive()?;
        a.push("adam.theta.m", Tensor::vector(self.adam_theta.m.clone()))?;
        a.push("adam.theta.v", Tensor::vector(self.adam_theta.v.clone()))?;
        a.push("adam.sigma.m", Tensor::vector(self.adam_sigma.m.clone()))?;
        a.push("adam.sigma.v", Tensor::vector(self.adam_sigma.v.clone()))?;
        // counters are exact in f64 far beyond any run length
        a.push(
            "state.counters",
            Tensor::vector(vec![
                self.iter as f64,
                self.step as f64,
                self.adam_theta.t as f64,
                self.adam_sigma.t as f64,
            ]),
        )?;
        a.push("state.grad_norms", Tensor::vector(self.grad_norms.clone()))?;
        Ok(a)
    }

    pub fn from_archive(policy: &PolicyConfig, a: &TensorArchive) -> Result<Self> {
        let params = PolicyParams::from_archive(policy, a)?;
        let vec_of = |name: &str, n: Option<usize>| -> Result<Vec<f64>> {
            let t = a.require(name)?;
            if let Some(n) = n {
                if t.len() != n {
                    return Err(Error::Format(format!("{name} has {} entries, expected {n}", t.len())));
                }
            }
            Ok(t.data().to_vec())
        };
        let n = params.n_weights();
        let h = params.perturb_log_sigma.len();
        let c = vec_of("state.counters", Some(4))?;
        Ok(Self {
            iter: c[0] as usize,
            step: c[1] as usize,
            adam_theta: AdamState {
                m: vec_of("adam.theta.m", Some(n))?,
                v: vec_of("adam.theta.v", Some(n))?,
                t: c[2] as u64,
            },
            adam_sigma: AdamState {
                m: vec_of("adam.sigma.m", Some(h))?,
                v: vec_of("adam.sigma.v", Some(h))?,
                t: c[3] as u64,
            },
            grad_norms: vec_of("state.grad_norms", None)?,
            params,
        })
    }
}

/// A rollout batch with advantages and the `θ_old` training-engine
/// log-probs, fixed for all updates of an iteration.
#[derive(Clone, Debug)]
pub struct PreparedBatch {
    pub batch: RolloutBatch,
    pub full_tokens: Vec<Vec<Token>>,
    pub lp_old: Vec<Vec<f64>>,
}

impl PreparedBatch {
    pub fn new(batch: RolloutBatch, params_old: &PolicyParams, std_floor: f64) -> Result<Self> {
        let mut batch = batch;
        let adv = objectives::group_advantage(&batch.rewards(), batch.group_size, std_floor)?;
        for (r, a) in batch.responses.iter_mut().zip(adv.values) {
            r.advantage = a;
        }
        let lp_old = engines::eval_train_batch(params_old, batch.params_version, &batch)?
            .into_iter()
            .map(|t| t.values)
            .collect();
        let full_tokens = batch.responses.iter().map(|r| r.full_tokens()).collect();
        Ok(Self {
            batch,
            full_tokens,
            lp_old,
        })
    }

    /// `k1` estimate of `KL(π^infer_θold ‖ π^D_θold)` over model tokens.
    pub fn kl_train_infer(&self) -> f64 {
        let (mut p, mut q) = (Vec::new(), Vec::new());
        for (r, old) in self.batch.responses.iter().zip(&self.lp_old) {
            for t in 0..r.response.len() {
                if r.roles[t].is_model() {
                    p.push(r.infer_logprobs[t]);
                    q.push(old[t]);
                }
            }
        }
        diagnostics::kl_from_values(&p, &q, KlEstimator::K1).unwrap_or(0.0)
    }
}

/// Loss and gradients of one update on a set of responses.
#[derive(Clone, Debug)]
pub struct GradResult {
    pub loss: LossOutput,
    pub weight_grad: Vec<f64>,
    /// Gradient on `log σ` per target (zero where inactive).
    pub sigma_grad: Vec<f64>,
    /// Numerator log-probs as used by the loss.
    pub lp_num: Vec<f64>,
}

/// The perturbation draws of update `update` in iteration `iter`: one draw
/// per response, keyed by the response's prompt and sample ids.
pub fn update_draws(params: &PolicyParams, spec: &PerturbationSpec, seed: u64, iter: usize, update: usize, prep: &PreparedBatch, idx: &[usize]) -> Vec<PerturbationDraw> {
    let draw_seed: u64 = rng::stream(seed, Domain::Perturbation, &[iter as u64, update as u64]).random();
    idx.iter()
        .map(|&i| {
            let r = &prep.batch.responses[i];
            let rows = prep.full_tokens[i].len() - 1;
            let key = r.prompt_id.wrapping_mul(0x1_0000_0000).wrapping_add(r.sample_id);
            PerturbationDraw::sample(&params.config, spec, rows, draw_seed, key)
        })
        .collect()
}

/// Loss and parameter gradients on responses `idx` of a prepared batch.
/// `draws` (aligned with `idx`) perturb the numerator when given.
pub fn shard_gradient(params: &PolicyParams, obj: &ObjectiveConfig, spec: &PerturbationSpec, prep: &PreparedBatch, idx: &[usize], draws: Option<&[PerturbationDraw]>, micro_batch: usize) -> Result<GradResult> {
    if idx.is_empty() {
        return Err(Error::Objective("empty shard".into()));
    }
    if let Some(d) = draws {
        if d.len() != idx.len() {
            return Err(crate::error::shape_err("shard_gradient", "one draw per response required"));
        }
    }
    let spec_eff = if draws.is_some() { spec.clone() } else { PerturbationSpec::None };
    let mb = micro_batch.max(1);
    let mut scored = Vec::new();
    for (c, chunk) in idx.chunks(mb).enumerate() {
        let items: Vec<ScoreItem<'_>> = chunk
            .iter()
            .enumerate()
            .map(|(k, &i)| ScoreItem {
                tokens: &prep.full_tokens[i],
                prompt_len: prep.batch.responses[i].prompt.len(),
                embed_shift: None,
                draw: draws.map(|d| &d[c * mb + k]),
            })
            .collect();
        scored.push(policy::score(params, &spec_eff, &items)?);
    }
    let mut spans = Vec::with_capacity(idx.len());
    let (mut lp_num, mut entropy, mut mask, mut lp_old, mut lp_infer, mut adv) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for s in &scored {
        lp_num.extend_from_slice(s.logprob_values());
        entropy.extend_from_slice(s.entropy_values());
    }
    for &i in idx {
        let r = &prep.batch.responses[i];
        spans.push((lp_old.len(), r.response.len()));
        lp_old.extend_from_slice(&prep.lp_old[i]);
        lp_infer.extend_from_slice(&r.infer_logprobs);
        mask.extend(r.roles.iter().map(|x| x.is_model()));
        adv.push(r.advantage);
    }
    let loss = objectives::assemble_loss(
        obj,
        &LossInputs {
            spans: &spans,
            advantages: &adv,
            model_mask: &mask,
            lp_num: &lp_num,
            lp_old: &lp_old,
            lp_infer: &lp_infer,
            entropy: &entropy,
        },
    )?;
    let mut weight_grad = vec![0.0; params.n_weights()];
    let mut sigma_grad = vec![0.0; params.perturb_log_sigma.len()];
    let mut off = 0;
    for s in &scored {
        let n = s.logprob_values().len();
        let g = s.tape.backward(&[
            (s.logprobs, Tensor::vector(loss.d_lp_num[off..off + n].to_vec())),
            (s.entropy, Tensor::vector(loss.d_entropy[off..off + n].to_vec())),
        ])?;
        off += n;
        let mut k = 0;
        for (j, &w) in s.bound.weights.iter().enumerate() {
            if let Some(gw) = g.wrt_slice(w) {
                for (a, b) in weight_grad[k..k + gw.len()].iter_mut().zip(gw) {
                    *a += b;
                }
            }
            k += params.tensors()[j].len();
        }
        for (t, ls) in s.bound.log_sigma.iter().enumerate() {
            if let Some(v) = ls {
                if let Some(gs) = g.wrt_slice(*v) {
                    sigma_grad[t] += gs[0];
                }
            }
        }
    }
    Ok(GradResult {
        loss,
        weight_grad,
        sigma_grad,
        lp_num,
    })
}

/// Result of one iteration.
#[derive(Clone, Debug)]
pub struct IterationOutcome {
    pub metrics: Vec<IterationMetrics>,
    /// `(group size, correct count)` per prompt.
    pub correct_counts: Vec<(usize, usize)>,
    pub prepared: PreparedBatch,
}

/// Everything an iteration reads besides the run state.
#[derive(Clone, Debug)]
pub struct Setup {
    pub trainer: TrainerConfig,
    pub objective: ObjectiveConfig,
    pub mismatch: MismatchModel,
    pub task: TaskSpec,
    pub perturbation: PerturbationSpec,
    pub envelope: EnvelopeSpec,
}

impl Setup {
    pub fn validate(&self, policy: &PolicyConfig) -> Result<()> {
        policy.validate()?;
        self.trainer.validate()?;
        self.objective.validate()?;
        self.mismatch.validate()?;
        self.task.validate()?;
        self.envelope.validate()?;
        self.perturbation.validate(policy.n_layers)?;
        if self.task.vocab_size != policy.vocab_size {
            return Err(Error::Config(format!(
                "task vocabulary {} differs from policy vocabulary {}",
                self.task.vocab_size, policy.vocab_size
            )));
        }
        Ok(())
    }

    fn rollout_config(&self) -> RolloutConfig {
        RolloutConfig {
            group_size: self.trainer.group_size,
            temperature: self.trainer.temperature,
            max_new: self.trainer.max_new,
            workers: self.trainer.workers,
            seed: self.trainer.seed,
        }
    }

    /// Prompts of iteration `iter`; ids are unique across the run.
    pub fn iteration_prompts(&self, iter: usize) -> Result<Vec<Prompt>> {
        let n = self.trainer.prompts_per_iter;
        let start = (iter * n) as u64;
        let mut out = tasks::gen_prompts(&self.task, n, self.trainer.seed ^ ((iter as u64) << 32))?;
        for (k, p) in out.iter_mut().enumerate() {
            p.id = start + k as u64;
        }
        Ok(out)
    }

    /// Fixed held-out prompts for the policy-update KL.
    pub fn heldout_prompts(&self) -> Result<Vec<Prompt>> {
        let seed: u64 = rng::stream(self.trainer.seed, Domain::Heldout, &[]).random();
        let mut out = tasks::gen_prompts(&self.task, self.trainer.heldout_prompts.max(1), seed)?;
        for p in out.iter_mut() {
            p.id |= 1 << 63;
        }
        Ok(out)
    }

    /// Rolls out under `θ_old` and prepares the batch.
    pub fn collect(&self, params_old: &PolicyParams, iter: usize) -> Result<PreparedBatch> {
        let prompts = self.iteration_prompts(iter)?;
        let batch = engines::rollout(params_old, iter as u64, &self.mismatch, &self.task, &prompts, &self.rollout_config())?;
        PreparedBatch::new(batch, params_old, self.trainer.std_floor)
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.trainer.beta1,
            beta2: self.trainer.beta2,
            eps: self.trainer.adam_eps,
        }
    }

    /// Response indices consumed by update `u`.
    pub fn shard(&self, n_responses: usize, u: usize) -> Vec<usize> {
        if self.trainer.shard_updates {
            let s = n_responses / self.trainer.updates_per_iter;
            (u * s..(u + 1) * s).collect()
        } else {
            (0..n_responses).collect()
        }
    }

    /// One optimizer update on a prepared batch. Returns the metrics row
    /// (held-out KL left at zero).
    pub fn update(&self, state: &mut RunState, prep: &PreparedBatch, u: usize) -> Result<IterationMetrics> {
        let idx = self.shard(prep.batch.responses.len(), u);
        let method = self.objective.method;
        let perturb = method.is_alp() && !self.perturbation.is_none();
        let draws = perturb.then(|| update_draws(&state.params, &self.perturbation, self.trainer.seed, state.iter, u, prep, &idx));
        let g = shard_gradient(
            &state.params,
            &self.objective,
            &self.perturbation,
            prep,
            &idx,
            draws.as_deref(),
            self.trainer.micro_batch,
        )?;

        // unperturbed numerator for drift and shift diagnostics
        let lp_plain = if perturb {
            let full: Vec<ScoreItem<'_>> = idx
                .iter()
                .map(|&i| ScoreItem {
                    tokens: &prep.full_tokens[i],
                    prompt_len: prep.batch.responses[i].prompt.len(),
                    embed_shift: None,
                    draw: None,
                })
                .collect();
            policy::score(&state.params, &PerturbationSpec::None, &full)?
                .logprob_values()
                .to_vec()
        } else {
            g.lp_num.clone()
        };
        let mut old = Vec::new();
        let mut plain_model = Vec::new();
        let mut num_model = Vec::new();
        let mut off = 0;
        for &i in &idx {
            let r = &prep.batch.responses[i];
            for t in 0..r.response.len() {
                if r.roles[t].is_model() {
                    old.push(prep.lp_old[i][t]);
                    plain_model.push(lp_plain[off + t]);
                    num_model.push(g.lp_num[off + t]);
                }
            }
            off += r.response.len();
        }
        let kl_policy_update = diagnostics::kl_from_values(&old, &plain_model, KlEstimator::K3)?;
        let shift = diagnostics::perturb_shift_stats(&num_model, &plain_model)?;

        let grad_norm = l2(&g.weight_grad);
        // updates whose advantages are all zero carry only regularizer gradients
        let signal = idx.iter().any(|&i| prep.batch.responses[i].advantage != 0.0);
        let reason = if !g.loss.loss.is_finite() || !grad_norm.is_finite() {
            Some("non-finite loss or gradient".to_string())
        } else if !signal {
            None
        } else {
            let w = self.trainer.divergence_window;
            let hist = &state.grad_norms[state.grad_norms.len().saturating_sub(w)..];
            (hist.len() >= 10)
                .then(|| {
                    let mut s = hist.to_vec();
                    s.sort_by(f64::total_cmp);
                    let med = diagnostics::quantile_sorted(&s, 50.0);
                    (grad_norm > self.trainer.divergence_factor * med).then(|| {
                        format!(
                            "gradient norm {grad_norm:e} exceeds {}x trailing median {med:e}",
                            self.trainer.divergence_factor
                        )
                    })
                })
                .flatten()
        };
        if let Some(reason) = reason {
            return Err(Error::Divergence {
                iter: state.iter,
                update: u,
                reason,
            });
        }
        if signal {
            state.grad_norms.push(grad_norm);
        }

        let adam = self.adam();
        let mut flat = state.params.flat_weights();
        adamw_step(&mut flat, &g.weight_grad, &mut state.adam_theta, self.trainer.lr_theta, self.trainer.weight_decay, adam)?;
        state.params.set_flat_weights(&flat)?;
        if perturb && self.trainer.lr_sigma > 0.0 {
            let active: Vec<bool> = state.params.perturb_log_sigma.iter().map(|l| l.is_finite()).collect();
            let mut ls: Vec<f64> = state
                .params
                .perturb_log_sigma
                .iter()
                .map(|&l| if l.is_finite() { l } else { 0.0 })
                .collect();
            adamw_step(&mut ls, &g.sigma_grad, &mut state.adam_sigma, self.trainer.lr_sigma, 0.0, adam)?;
            for (t, a) in active.into_iter().enumerate() {
                if a {
                    state.params.perturb_log_sigma[t] = ls[t];
                }
            }
        }
        state.step += 1;

        let lr = &g.loss.stats.token_log_ratio;
        let abs: Vec<f64> = lr.iter().map(|x| x.abs()).collect();
        Ok(IterationMetrics {
            iter: state.iter,
            update: u,
            reward_mean: prep.batch.rewards().iter().sum::<f64>() / prep.batch.responses.len() as f64,
            loss: g.loss.loss,
            grad_norm,
            entropy: g.loss.stats.entropy,
            kl_train_infer: prep.kl_train_infer(),
            kl_policy_update,
            kl_heldout: 0.0,
            ratio_quantiles: if lr.is_empty() {
                vec![0.0; self.envelope.quantiles.len()]
            } else {
                diagnostics::quantiles(lr, &self.envelope.quantiles)
            },
            ratio_abs_p99: if abs.is_empty() { 0.0 } else { diagnostics::quantiles(&abs, &[99.0])[0] },
            clipped_frac: g.loss.stats.clipped_frac,
            masked_frac: g.loss.stats.masked_frac,
            sigma: state.params.perturb_log_sigma.iter().map(|l| l.exp()).collect(),
            dp_mean: shift.mean,
            dp_p75: shift.p75,
            dp_p99: shift.p99,
        })
    }

    /// k3 estimate of `KL(π_θold ‖ π_θ)` on held-out prompts, responses
    /// sampled from `θ_old` on the training engine.
    pub fn heldout_kl(&self, params_old: &PolicyParams, params: &PolicyParams, iter: usize) -> Result<f64> {
        let prompts = self.heldout_prompts()?;
        let cfg = RolloutConfig {
            group_size: 2,
            seed: self.trainer.seed ^ (iter as u64).wrapping_mul(0x9E37_79B9),
            ..self.rollout_config()
        };
        let batch = engines::rollout(params_old, iter as u64, &MismatchModel::none(), &self.task, &prompts, &cfg)?;
        let old = engines::eval_train_batch(params_old, iter as u64, &batch)?;
        let new = engines::eval_train_batch(params, iter as u64 + 1, &batch)?;
        let (mut p, mut q) = (Vec::new(), Vec::new());
        for ((r, o), n) in batch.responses.iter().zip(old).zip(new) {
            for t in 0..r.response.len() {
                if r.roles[t].is_model() {
                    p.push(o.values[t]);
                    q.push(n.values[t]);
                }
            }
        }
        diagnostics::kl_from_values(&p, &q, KlEstimator::K3)
    }

    /// Runs one full iteration and advances `state.iter`.
    pub fn run_iteration(&self, state: &mut RunState) -> Result<IterationOutcome> {
        let params_old = state.params.clone();
        let prepared = self.collect(&params_old, state.iter)?;
        let mut metrics = Vec::with_capacity(self.trainer.updates_per_iter);
        for u in 0..self.trainer.updates_per_iter {
            metrics.push(self.update(state, &prepared, u)?);
        }
        let kl = self.heldout_kl(&params_old, &state.params, state.iter)?;
        for m in &mut metrics {
            m.kl_heldout = kl;
        }
        let correct_counts = prepared
            .batch
            .responses
            .chunks(prepared.batch.group_size)
            .map(|g| (g.len(), g.iter().filter(|r| r.reward > 0.5).count()))
            .collect();
        state.iter += 1;
        Ok(IterationOutcome {
            metrics,
            correct_counts,
            prepared,
        })
    }
}
