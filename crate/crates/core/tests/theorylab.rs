//! Smoothing-theory probes on one-layer models: the Gaussian Stein
//! identity, the smoothing conditions, the KL bound, the second-order KL
//! expansion, Hessian contraction and the two-bump landscape.

use alp_core::theorylab::{
    estimate_conditions, hessian_norm_at, input_grid, kl_bound, kl_bound_check, landscape_toy, slope, smooth_at,
    smoothed_peaks, smoothness_check, standard_draws, stein_check, switch_sigma, taylor_kl_check, KlProbeConfig,
    OneLayerModel, Quadratic, SigmaExponent, SmoothnessConfig, SpikeSoftmax, SurrogateFamily, TwoBump,
};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn spike() -> (SpikeSoftmax, Vec<f64>) {
    (
        SpikeSoftmax {
            rewards: vec![1.0, 0.0, 0.5],
            spike_center: 0.0,
            spike_width: 0.02,
            spike_scale: 4.0,
        },
        vec![0.2, 0.5, 0.3, -0.1, -0.4, -0.2, 0.0, 0.1, 0.1],
    )
}

#[test]
fn input_gradient_matches_finite_differences() {
    let m = OneLayerModel::random(5, 3, 1.0, 9).unwrap();
    let x = [0.3, -0.7, 0.2];
    let g = m.grad_x_log_probs(&x);
    let h = 1e-6;
    for j in 0..3 {
        let (mut xp, mut xm) = (x, x);
        xp[j] += h;
        xm[j] -= h;
        let (lp, lm) = (m.log_probs(&xp), m.log_probs(&xm));
        for a in 0..5 {
            let fd = (lp[a] - lm[a]) / (2.0 * h);
            assert!((fd - g[a][j]).abs() < 1e-8);
        }
    }
    assert!(OneLayerModel::new(1, 2, vec![0.0; 2]).is_err());
    assert!(OneLayerModel::new(2, 2, vec![0.0; 3]).is_err());
    assert!(OneLayerModel::new(2, 1, vec![f64::NAN, 0.0]).is_err());
}

#[test]
fn stein_constant_policy_has_zero_sides() {
    let m = OneLayerModel::new(3, 2, vec![0.0; 6]).unwrap();
    let r = stein_check(&m, &[0.4, -0.1], 0.5, 20_000, 1).unwrap();
    for a in 0..3 {
        for j in 0..2 {
            assert!(r.lhs[a][j].abs() < 1e-9);
            // the posterior mean is the prior's sample mean: O(σ/√n)/σ²
            assert!(r.rhs[a][j].abs() < 5.0 / (0.5 * (20_000f64).sqrt()));
        }
    }
}

#[test]
fn stein_symmetric_model_is_antisymmetric() {
    let m = OneLayerModel::new(2, 1, vec![1.5, -1.5]).unwrap();
    let r = stein_check(&m, &[0.0], 0.5, 20_000, 2).unwrap();
    // Σ_a π̃_a ∇ ln π̃_a = ∇ Σ_a π̃_a = 0 and π̃ = (½, ½) at x = 0, up to
    // the Monte Carlo error in π̃
    assert!((r.lhs[0][0] + r.lhs[1][0]).abs() < 0.05 * r.lhs[0][0].abs());
    assert!((r.rhs[0][0] + r.rhs[1][0]).abs() < 0.05 * r.rhs[0][0].abs());
    assert!(r.lhs[0][0] > 0.0);
    assert!(r.max_z < 5.0);
}

#[test]
fn stein_identity_holds_on_a_random_model() {
    let m = OneLayerModel::random(3, 2, 1.0, 3).unwrap();
    let r = stein_check(&m, &[0.2, -0.4], 0.5, 200_000, 4).unwrap();
    assert!(r.max_z < 5.0, "max z {}", r.max_z);
    assert!(r.min_ess >= 100.0);
    assert!(stein_check(&m, &[0.2, -0.4], 0.0, 20_000, 4).is_err());
    assert!(stein_check(&m, &[0.2], 0.5, 20_000, 4).is_err());
}

#[test]
fn stein_error_shrinks_at_the_monte_carlo_rate() {
    let m = OneLayerModel::random(3, 2, 1.0, 5).unwrap();
    let pts: Vec<(f64, f64)> = [10_000usize, 40_000, 160_000]
        .iter()
        .map(|&n| {
            let r = stein_check(&m, &[0.1, 0.3], 0.5, n, 6).unwrap();
            let mean_se = r.stderr.iter().flatten().sum::<f64>() / 6.0;
            ((n as f64).ln(), mean_se.ln())
        })
        .collect();
    let s = slope(&pts).unwrap();
    assert!((s + 0.5).abs() < 0.1, "slope {s}");
}

#[test]
fn conditions_in_the_small_sigma_and_constant_limits() {
    let m = OneLayerModel::random(4, 3, 1.0, 7).unwrap();
    let xs = input_grid(3, 8, 7);
    let c = estimate_conditions(&m, 1e-4, 10_000, &xs, 1).unwrap();
    assert!(c.alpha >= 1.0 - 1e-3 && c.alpha <= 1.0, "alpha {}", c.alpha);

    let zero = OneLayerModel::new(4, 3, vec![0.0; 12]).unwrap();
    let n = 10_000;
    let c = estimate_conditions(&zero, 0.3, n, &xs, 1).unwrap();
    assert!((c.alpha - 1.0).abs() < 1e-12);
    // the sample mean of the prior draws, squared: of order 1/n
    assert!(c.c < 10.0 / n as f64, "C {}", c.c);
    assert!(estimate_conditions(&m, 0.0, n, &xs, 1).is_err());
}

#[test]
fn condition_constant_is_stable_across_halves() {
    let m = OneLayerModel::random(4, 3, 1.0, 8).unwrap();
    let xs = input_grid(3, 6, 8);
    let a = estimate_conditions(&m, 0.3, 100_000, &xs, 10).unwrap();
    let b = estimate_conditions(&m, 0.3, 100_000, &xs, 11).unwrap();
    assert!((a.c - b.c).abs() <= 0.1 * a.c.max(b.c), "{} vs {}", a.c, b.c);
}

#[test]
fn bound_arithmetic() {
    let t2 = |s| kl_bound(1.0, 0.7, 4, 0.01, s, SigmaExponent::Two);
    let t4 = |s| kl_bound(1.0, 0.7, 4, 0.01, s, SigmaExponent::Four);
    assert!((t2(0.4) / t2(0.2) - 0.25).abs() < 1e-12);
    assert!((t4(0.4) / t4(0.2) - 0.0625).abs() < 1e-12);
    assert!((kl_bound(0.5, 0.0, 4, 1.0, 0.3, SigmaExponent::Two) - 2f64.ln()).abs() < 1e-15);
}

#[test]
fn near_identity_kl_point_holds() {
    let m = OneLayerModel::random(8, 4, 1.0, 9).unwrap();
    let cfg = KlProbeConfig {
        sigmas: vec![1e-4],
        zeta_norms: vec![0.0],
        n_mc: 10_000,
        n_zeta: 256,
        xs: input_grid(4, 4, 9),
        seed: 1,
    };
    let r = kl_bound_check(&m, &cfg).unwrap();
    let p = &r.points[0];
    assert!(p.kl <= 1e-4);
    assert!(p.bound_sigma2 >= 0.0 && (p.bound_sigma2 + p.alpha.ln()).abs() < 1e-15);
    assert!(p.holds_sigma2 && p.holds_sigma4);
    assert!(kl_bound_check(&m, &KlProbeConfig { sigmas: vec![], ..cfg.clone() }).is_err());
}

#[test]
fn reduced_kl_grid_supports_a_bound() {
    let m = OneLayerModel::random(8, 4, 1.0, 0).unwrap();
    let cfg = KlProbeConfig {
        sigmas: vec![0.1, 0.2, 0.4],
        zeta_norms: vec![0.01, 0.05],
        n_mc: 50_000,
        n_zeta: 2048,
        xs: input_grid(4, 8, 0),
        seed: 0,
    };
    let r = kl_bound_check(&m, &cfg).unwrap();
    assert_eq!(r.points.len(), 6);
    for p in &r.points {
        assert!(p.alpha > 0.0 && p.alpha <= 1.0);
        assert!(p.kl >= 0.0);
        assert!(p.bound_sigma4 >= p.bound_sigma2);
    }
    assert!(r.supported_exponent.is_some(), "{:#?}", r.points);
}

#[test]
fn taylor_term_scales_quadratically_and_gap_cubically() {
    let m = OneLayerModel::random(8, 4, 1.0, 0).unwrap();
    let x = [0.3, -0.2, 0.5, 0.1];
    let r = taylor_kl_check(&m, &x, &[0.2, 0.1, 0.05], 256, 0).unwrap();
    for w in r.points.windows(2) {
        assert!((w[1].approx / w[0].approx - 0.25).abs() < 0.05 * 0.25);
        assert!(w[1].exact > 0.0);
    }
    assert!(r.gap_slope.unwrap() >= 2.5, "slope {:?}", r.gap_slope);
    let zero = taylor_kl_check(&m, &x, &[0.0], 8, 0).unwrap();
    assert_eq!((zero.points[0].exact, zero.points[0].approx), (0.0, 0.0));
}

#[test]
fn constant_curvature_is_not_contracted() {
    let q = Quadratic {
        n: 3,
        a: vec![2.0, 0.5, 0.0, 0.5, 1.0, 0.0, 0.0, 0.0, 3.0],
    };
    let cfg = SmoothnessConfig {
        xs: vec![-0.5, 0.0, 0.5],
        sigmas: vec![0.1, 0.5],
        n_mc: 16,
        ..SmoothnessConfig::default()
    };
    let r = smoothness_check(&q, &[0.3, -0.2, 0.1], &cfg).unwrap();
    let dense = DMatrix::from_row_slice(3, 3, &q.a).symmetric_eigen();
    let top = dense.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    assert!((r.raw_sup - top).abs() < 1e-6 * top);
    for c in &r.contraction {
        assert!((c - 1.0).abs() < 1e-6, "{c}");
    }
}

/// Dense `∇²_θ J(θ; x)` by central differences of the analytic gradient.
fn dense_hessian<F: SurrogateFamily>(f: &F, theta: &[f64], x: f64) -> DMatrix<f64> {
    let n = f.dim();
    let h = 1e-5;
    let mut m = DMatrix::zeros(n, n);
    for j in 0..n {
        let (mut p, mut q) = (theta.to_vec(), theta.to_vec());
        p[j] += h;
        q[j] -= h;
        let (gp, gq) = (f.grad(&p, x), f.grad(&q, x));
        for i in 0..n {
            m[(i, j)] = (gp[i] - gq[i]) / (2.0 * h);
        }
    }
    (&m + m.transpose()) * 0.5
}

#[test]
fn power_iteration_agrees_with_the_dense_eigensolver() {
    let (fam, theta) = spike();
    assert!(fam.dim() <= 20);
    let cfg = SmoothnessConfig {
        tol: 1e-12,
        ..SmoothnessConfig::default()
    };
    for x in [-0.5, -0.03, 0.0, 0.01, 0.4] {
        let (norm, _) = hessian_norm_at(&fam, &theta, x, 0.0, &[], &cfg).unwrap();
        let dense = dense_hessian(&fam, &theta, x).symmetric_eigen();
        let top = dense.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!((norm - top).abs() <= 1e-6 * top.max(1.0), "x {x}: {norm} vs {top}");
    }
}

#[test]
fn smoothing_contracts_the_spike() {
    let (fam, theta) = spike();
    let cfg = SmoothnessConfig {
        sigmas: vec![0.01, 0.02, 0.04, 0.08],
        ..SmoothnessConfig::default()
    };
    let r = smoothness_check(&fam, &theta, &cfg).unwrap();
    assert!(r.raw_argmax_x.abs() < 0.1);
    // σ = 4w
    let i = cfg.sigmas.iter().position(|&s| s == 0.08).unwrap();
    assert!(r.smoothed_sup[i] < r.raw_sup);
    for (k, w) in r.smoothed_sup.windows(2).enumerate() {
        let tol = 2.0 * (r.smoothed_stderr[k] + r.smoothed_stderr[k + 1]);
        assert!(w[1] <= w[0] + tol, "{:?}", r.smoothed_sup);
    }
    for (c, se) in r.contraction.iter().zip(&r.smoothed_stderr) {
        assert!(*c <= 1.0 + 2.0 * se / r.raw_sup);
    }
    assert!(*r.contraction.last().unwrap() <= 0.8);
    assert!(r.min_contracting_sigma.is_some());
}

#[test]
fn smoothing_preserves_the_raw_curve_and_symmetry() {
    let b = TwoBump::default();
    let r = landscape_toy(&b, &[-1.0, 0.0, 1.0], &[0.0, 0.1], &[200]).unwrap();
    for (x, y) in r.xs.iter().zip(&r.curves[0]) {
        assert_eq!(*y, b.eval(*x));
    }
    let sym = TwoBump {
        spike_center: 0.5,
        spike_width: 0.1,
        spike_height: 1.0,
        broad_center: -0.5,
        broad_width: 0.1,
        broad_height: 1.0,
    };
    let f = |x: f64| sym.eval(x);
    for x in [0.1, 0.3, 0.5, 0.77] {
        assert!((smooth_at(&f, x, 0.2, 400) - smooth_at(&f, -x, 0.2, 400)).abs() < 1e-12);
    }
}

#[test]
fn smoothing_integrates_gaussians_exactly() {
    // a unit Gaussian of width w smoothed by σ has peak w / √(w² + σ²)
    let b = TwoBump {
        broad_height: 0.0,
        ..TwoBump::default()
    };
    let f = |x: f64| b.eval(x);
    for sigma in [0.01, 0.05, 0.3] {
        let want = b.closed_form_peaks(sigma).0;
        assert!((smooth_at(&f, 1.0, sigma, 800) - want).abs() < 1e-9);
    }
}

#[test]
fn argmax_switch_is_stable_and_matches_the_closed_form() {
    let b = TwoBump::default();
    let r = landscape_toy(
        &b,
        &(0..=400).map(|i| -2.0 + 0.01 * i as f64).collect::<Vec<_>>(),
        &[0.0, 0.005, 0.05, 0.2],
        &[200, 400, 800],
    )
    .unwrap();
    assert!(r.sigma_star_spread <= 1e-3, "{:?}", r.sigma_star);
    assert!((r.argmax[0] - 1.0).abs() < 1e-9);
    assert!((r.argmax[1] - 1.0).abs() < 1e-9);
    assert!((r.argmax[3] + 1.0).abs() < 0.05);
    // equal smoothed peak heights, ignoring each bump's tail under the other
    let (hs, ws, hb, wb) = (b.spike_height, b.spike_width, b.broad_height, b.broad_width);
    let (s, t) = ((hs * ws).powi(2), (hb * wb).powi(2));
    let closed = ((t * ws * ws - s * wb * wb) / (s - t)).sqrt();
    for (_, star) in &r.sigma_star {
        assert!((star - closed).abs() < 1e-3, "{star} vs {closed}");
    }
    let ((_, spike_h), (_, broad_h)) = smoothed_peaks(&b, r.sigma_star[2].1 * 1.1, 800);
    assert!(broad_h > spike_h);
    assert!(switch_sigma(&b, 0.5, 1.0, 200, 1e-6).is_err());
}

#[test]
fn draws_are_keyed_and_reproducible() {
    assert_eq!(standard_draws(1, 2, 10, 3), standard_draws(1, 2, 10, 3));
    assert_ne!(standard_draws(1, 2, 10, 3), standard_draws(1, 3, 10, 3));
}

proptest! {
    #[test]
    fn one_layer_policy_is_normalized(seed in 0u64..1000, x in proptest::collection::vec(-3.0f64..3.0, 4)) {
        let m = OneLayerModel::random(6, 4, 2.0, seed).unwrap();
        let p = m.probs(&x);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let lp = m.log_probs(&x);
        for (a, b) in p.iter().zip(&lp) {
            prop_assert!((a.ln() - b).abs() < 1e-12);
        }
    }
}
