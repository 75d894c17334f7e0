//! Transformer policy: perturbation identities, explicit-shift oracles,
//! smoothed policy, sampling statistics and checkpoint round trips.

use alp_core::engines::EngineTag;
use alp_core::numcore::{log_softmax, softmax};
use alp_core::numcore::{Tape, Tensor};
use alp_core::policy::{
    self, forward_logits, log_mean_exp_rows, logprobs, logprobs_smoothed, sample_from_logprobs, BoundParams, PerturbationDraw,
    PerturbationSpec, PolicyConfig, PolicyParams, SeqInput, TensorArchive, GREEDY_TEMPERATURE,
};
use alp_core::theorylab::{smoothed_probs, standard_draws, OneLayerModel};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cfg(n_layers: usize, d_model: usize) -> PolicyConfig {
    PolicyConfig {
        vocab_size: 16,
        context_len: 12,
        n_layers,
        d_model,
        n_heads: 2,
        ..PolicyConfig::default()
    }
}

const TOKENS: [usize; 9] = [0, 11, 6, 14, 5, 12, 3, 15, 1];
const PROMPT_LEN: usize = 5;

fn rows() -> usize {
    TOKENS.len() - 1
}

fn logits_of(params: &PolicyParams, spec: &PerturbationSpec, draw: Option<&PerturbationDraw>, shift: Option<&Tensor>) -> Vec<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params).unwrap();
    let input = &TOKENS[..rows()];
    let seq = SeqInput {
        tokens: input,
        rows: (0..rows()).collect(),
        embed_shift: shift,
        draw,
    };
    let l = forward_logits(&mut tape, params, &bound, spec, &[seq]).unwrap();
    let v = params.config.vocab_size;
    tape.value(l).data().chunks(v).map(|c| c.to_vec()).collect()
}

#[test]
fn config_validation() {
    assert!(cfg(2, 16).validate().is_ok());
    assert!(PolicyConfig { d_model: 15, ..cfg(2, 16) }.validate().is_err());
    assert!(PolicyConfig { context_len: 1, ..cfg(2, 16) }.validate().is_err());
    assert!(PolicyConfig { vocab_size: 3, ..cfg(2, 16) }.validate().is_err());
}

#[test]
fn layer_band_bounds_are_checked() {
    assert!(PerturbationSpec::LayerBand { lo: 0, hi: 1 }.validate(2).is_ok());
    assert!(PerturbationSpec::LayerBand { lo: 1, hi: 2 }.validate(2).is_err());
    assert!(PerturbationSpec::LayerBand { lo: 2, hi: 1 }.validate(4).is_err());
    assert_eq!(PerturbationSpec::LogitsOnly.targets(3), vec![3]);
    assert_eq!(PerturbationSpec::AllLayers.targets(3), vec![0, 1, 2]);
    assert!(PerturbationSpec::None.targets(3).is_empty());
}

#[test]
fn spec_none_ignores_the_draw() {
    let p = PolicyParams::init(&cfg(2, 8), 1, 0.3).unwrap();
    let draw = PerturbationDraw::sample(&p.config, &PerturbationSpec::AllLayers, rows(), 5, 0);
    let a = logprobs(&p, &TOKENS, PROMPT_LEN, Some(&draw), &PerturbationSpec::None).unwrap();
    let b = logprobs(&p, &TOKENS, PROMPT_LEN, None, &PerturbationSpec::AllLayers).unwrap();
    assert_eq!(a.values, b.values);
    assert_eq!(a.engine_tag, EngineTag::Train);
}

#[test]
fn zero_sigma_is_bitwise_unperturbed() {
    let p = PolicyParams::init(&cfg(2, 8), 1, 0.0).unwrap();
    for spec in [PerturbationSpec::AllLayers, PerturbationSpec::LogitsOnly, PerturbationSpec::LayerBand { lo: 1, hi: 1 }] {
        let draw = PerturbationDraw::sample(&p.config, &spec, rows(), 5, 0);
        let a = logprobs(&p, &TOKENS, PROMPT_LEN, Some(&draw), &spec).unwrap();
        let b = logprobs(&p, &TOKENS, PROMPT_LEN, None, &spec).unwrap();
        assert_eq!(a.values, b.values);
        assert_eq!(a.engine_tag, EngineTag::TrainPerturbed);
    }
}

#[test]
fn first_block_shift_matches_explicit_input_shift() {
    let sigma = 0.1;
    let p = PolicyParams::init(&cfg(2, 8), 2, sigma).unwrap();
    let spec = PerturbationSpec::LayerBand { lo: 0, hi: 0 };
    let draw = PerturbationDraw::sample(&p.config, &spec, rows(), 7, 3);
    let perturbed = logits_of(&p, &spec, Some(&draw), None);
    let delta = draw.target(0).unwrap();
    let shift = Tensor::new(delta.shape().to_vec(), delta.data().iter().map(|z| sigma * z).collect()).unwrap();
    let explicit = logits_of(&p, &PerturbationSpec::None, None, Some(&shift));
    let clean = logits_of(&p, &PerturbationSpec::None, None, None);
    let mut moved = 0.0f64;
    for ((a, b), c) in perturbed.iter().zip(&explicit).zip(&clean) {
        let (la, lb, lc) = (log_softmax(a), log_softmax(b), log_softmax(c));
        for j in 0..la.len() {
            assert!(((la[j] - lc[j]) - (lb[j] - lc[j])).abs() < 1e-12);
            moved = moved.max((la[j] - lc[j]).abs());
        }
    }
    assert!(moved > 1e-3, "the shift must change the policy");
}

#[test]
fn logits_target_adds_scaled_noise_to_clean_logits() {
    let sigma = 0.1;
    let p = PolicyParams::init(&cfg(2, 8), 2, sigma).unwrap();
    let spec = PerturbationSpec::LogitsOnly;
    let draw = PerturbationDraw::sample(&p.config, &spec, rows(), 7, 3);
    let perturbed = logits_of(&p, &spec, Some(&draw), None);
    let clean = logits_of(&p, &PerturbationSpec::None, None, None);
    let delta = draw.target(2).unwrap();
    let s = p.sigma(2);
    for (r, (a, c)) in perturbed.iter().zip(&clean).enumerate() {
        for j in 0..a.len() {
            // hidden states are untouched, so only the additive logit term remains
            assert_eq!(a[j], c[j] + delta.row(r)[j] * s);
        }
    }
}

#[test]
fn all_layer_draw_restricted_to_a_band_reproduces_the_band_run() {
    let p = PolicyParams::init(&cfg(3, 8), 4, 0.05).unwrap();
    let band = PerturbationSpec::LayerBand { lo: 1, hi: 2 };
    let full = PerturbationDraw::sample(&p.config, &PerturbationSpec::AllLayers, rows(), 11, 2);
    let own = PerturbationDraw::sample(&p.config, &band, rows(), 11, 2);
    let a = logprobs(&p, &TOKENS, PROMPT_LEN, Some(&full), &band).unwrap();
    let b = logprobs(&p, &TOKENS, PROMPT_LEN, Some(&own), &band).unwrap();
    assert_eq!(a.values, b.values);
}

#[test]
fn forward_never_mutates_parameters() {
    let p = PolicyParams::init(&cfg(2, 8), 4, 0.05).unwrap();
    let before = p.clone();
    let draw = PerturbationDraw::sample(&p.config, &PerturbationSpec::AllLayers, rows(), 1, 0);
    logprobs(&p, &TOKENS, PROMPT_LEN, Some(&draw), &PerturbationSpec::AllLayers).unwrap();
    assert_eq!(p, before);
}

#[test]
fn out_of_vocab_and_draw_shape_errors() {
    let p = PolicyParams::init(&cfg(2, 8), 4, 0.05).unwrap();
    assert!(logprobs(&p, &[0, 3, 99], 1, None, &PerturbationSpec::None).is_err());
    let short = PerturbationDraw::sample(&p.config, &PerturbationSpec::AllLayers, 2, 1, 0);
    assert!(logprobs(&p, &TOKENS, PROMPT_LEN, Some(&short), &PerturbationSpec::AllLayers).is_err());
    let band = PerturbationDraw::sample(&p.config, &PerturbationSpec::LayerBand { lo: 0, hi: 0 }, rows(), 1, 0);
    assert!(logprobs(&p, &TOKENS, PROMPT_LEN, Some(&band), &PerturbationSpec::AllLayers).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn next_token_distributions_are_normalized(seed in 0u64..1000, sigma in 0.0f64..1.0, mode in 0usize..4) {
        let p = PolicyParams::init(&cfg(2, 8), seed, sigma).unwrap();
        let spec = [PerturbationSpec::None, PerturbationSpec::AllLayers, PerturbationSpec::LogitsOnly, PerturbationSpec::LayerBand { lo: 1, hi: 1 }][mode].clone();
        let draw = PerturbationDraw::sample(&p.config, &spec, rows(), seed + 1, 0);
        let d = if spec.is_none() { None } else { Some(&draw) };
        for row in logits_of(&p, &spec, d, None) {
            let s: f64 = log_softmax(&row).iter().map(|l| l.exp()).sum();
            prop_assert!((s - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn draws_are_standard_normal_and_position_independent(seed in 0u64..1000) {
        let c = cfg(2, 8);
        let d = PerturbationDraw::sample(&c, &PerturbationSpec::AllLayers, 64, seed, 0);
        let t = d.target(0).unwrap();
        let n = t.len() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        prop_assert!(mean.abs() < 4.0 / n.sqrt());
        prop_assert!((var - 1.0).abs() < 0.25);
        prop_assert_ne!(t.row(0), t.row(1));
        let prefix = PerturbationDraw::sample(&c, &PerturbationSpec::AllLayers, 8, seed, 0);
        prop_assert_eq!(prefix.target(0).unwrap().row(7), t.row(7));
    }
}

#[test]
fn smoothed_policy_at_zero_sigma_is_the_policy() {
    let p = PolicyParams::init(&cfg(2, 8), 3, 0.0).unwrap();
    let clean = logprobs(&p, &TOKENS, PROMPT_LEN, None, &PerturbationSpec::None).unwrap();
    for n in [1, 5] {
        let s = logprobs_smoothed(&p, &TOKENS, PROMPT_LEN, &PerturbationSpec::AllLayers, n, 9).unwrap();
        for (a, b) in s.values.iter().zip(&clean.values) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn single_sample_smoothing_equals_that_draw() {
    let p = PolicyParams::init(&cfg(2, 8), 3, 0.2).unwrap();
    let spec = PerturbationSpec::AllLayers;
    let s = logprobs_smoothed(&p, &TOKENS, PROMPT_LEN, &spec, 1, 9).unwrap();
    let draw = PerturbationDraw::sample(&p.config, &spec, rows(), 9, 0);
    let d = logprobs(&p, &TOKENS, PROMPT_LEN, Some(&draw), &spec).unwrap();
    for (a, b) in s.values.iter().zip(&d.values) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(logprobs_smoothed(&p, &TOKENS, PROMPT_LEN, &spec, 0, 9).is_err());
}

#[test]
fn log_mean_exp_matches_direct_average() {
    let samples = [vec![-1.0, -2.0], vec![-0.5, -3.0], vec![-2.5, -0.1]];
    let got = log_mean_exp_rows(3, |k| Ok(samples[k].clone())).unwrap();
    for j in 0..2 {
        let direct = (samples.iter().map(|s| s[j].exp()).sum::<f64>() / 3.0).ln();
        assert!((got[j] - direct).abs() < 1e-14);
    }
}

/// Gauss-Hermite nodes and weights for `∫ f(t) e^{-t²} dt` by the
/// Golub-Welsch eigenproblem.
fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let j = DMatrix::<f64>::from_fn(n, n, |i, k| if i + 1 == k || k + 1 == i { ((i.max(k)) as f64 / 2.0).sqrt() } else { 0.0 });
    let e = j.symmetric_eigen();
    let w = (0..n).map(|i| std::f64::consts::PI.sqrt() * e.eigenvectors[(0, i)].powi(2)).collect();
    (e.eigenvalues.iter().copied().collect(), w)
}

#[test]
fn smoothed_one_layer_policy_matches_quadrature() {
    let model = OneLayerModel::new(3, 1, vec![1.5, -0.7, 0.2]).unwrap();
    let (x, sigma, n) = ([0.3], 0.5, 100_000);
    let eps = standard_draws(4, 0, n, 1);
    let mc = smoothed_probs(&model, &x, sigma, &eps);
    let (nodes, weights) = gauss_hermite(60);
    let mut exact = [0.0; 3];
    for (t, w) in nodes.iter().zip(&weights) {
        let p = softmax(&model.logits(&[x[0] + sigma * std::f64::consts::SQRT_2 * t]));
        for a in 0..3 {
            exact[a] += w * p[a] / std::f64::consts::PI.sqrt();
        }
    }
    for a in 0..3 {
        let vals: Vec<f64> = eps.iter().map(|e| model.probs(&[x[0] + sigma * e])[a]).collect();
        let m = vals.iter().sum::<f64>() / n as f64;
        let se = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64 / n as f64).sqrt();
        assert!((mc[a] - exact[a]).abs() < 3.0 * se, "action {a}: {} vs {} (se {se:e})", mc[a], exact[a]);
    }
}

#[test]
fn greedy_sampling_is_repeatable() {
    let p = PolicyParams::init(&cfg(2, 8), 6, 0.0).unwrap();
    let a = policy::sample(&p, &TOKENS[..4], GREEDY_TEMPERATURE / 2.0, 5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = policy::sample(&p, &TOKENS[..4], GREEDY_TEMPERATURE / 2.0, 5, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_eq!(a, b);
    assert!(policy::sample(&p, &TOKENS[..4], 1.0, 0, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    assert!(policy::sample(&p, &TOKENS[..4], 0.0, 3, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
}

#[test]
fn dominant_logit_is_always_sampled() {
    let lp = log_softmax(&[0.0, 31.0, 0.5, -2.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10_000 {
        assert_eq!(sample_from_logprobs(&lp, 1.0, rng.random::<f64>()), 1);
    }
}

#[test]
fn uniform_policy_frequencies_are_binomial() {
    let lp = log_softmax(&[0.0; 4]);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 100_000;
    let mut counts = [0usize; 4];
    for _ in 0..n {
        counts[sample_from_logprobs(&lp, 1.0, rng.random::<f64>())] += 1;
    }
    let sd = (0.25f64 * 0.75 / n as f64).sqrt();
    for c in counts {
        assert!((c as f64 / n as f64 - 0.25).abs() < 3.0 * sd, "{counts:?}");
    }
}

#[test]
fn checkpoints_round_trip_byte_exactly() {
    let p = PolicyParams::init(&cfg(2, 8), 8, 0.01).unwrap();
    let bytes = p.to_archive().unwrap().encode();
    let back = TensorArchive::decode(&bytes).unwrap();
    assert_eq!(back.encode(), bytes);
    assert_eq!(PolicyParams::from_archive(&p.config, &back).unwrap(), p);
    assert!(PolicyParams::from_archive(&cfg(3, 8), &back).is_err());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.bin");
    p.to_archive().unwrap().write(&path).unwrap();
    assert_eq!(TensorArchive::read(&path).unwrap().encode(), bytes);
}
