//! Run directories, controlled replays and plot-data emission on the tiny
//! preset.

use std::fs;
use std::path::{Path, PathBuf};

use alp_core::objectives::Method;
use alp_core::trainer::RunState;
use alp_lab::config::{self, sha256_hex, ExperimentConfig, RunSpec, Source};
use alp_lab::error::LabError;
use alp_lab::plotdata::{emit_plotdata, Figure};
use alp_lab::replay::{replay_envelope, write_report, REPLAY_FILE};
use alp_lab::run::{self, RunManifest, RunStatus, CONFIG_FILE, MANIFEST_FILE, METRICS_FILE, METRICS_PARTIAL, PASSK_FILE};

fn specs(root: &Path, preset: &str, overrides: &[&str]) -> Vec<RunSpec> {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    config::load(&Source::Preset(preset.into()), &o).unwrap().expand(root).unwrap()
}

fn tiny(root: &Path, overrides: &[&str]) -> RunSpec {
    let mut s = specs(root, "tiny", overrides);
    assert_eq!(s.len(), 1);
    s.pop().unwrap()
}

#[test]
fn a_run_writes_every_artifact() {
    let root = tempfile::tempdir().unwrap();
    let spec = tiny(root.path(), &[]);
    let out = run::execute(&spec).unwrap();
    let dir = &out.dir;
    let m = &out.manifest;
    assert_eq!(m.status, RunStatus::Completed);
    assert_eq!(m.summary.iterations, 4);

    let text = fs::read_to_string(dir.join(CONFIG_FILE)).unwrap();
    assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), spec.config);
    assert_eq!(m.config_hash, sha256_hex(text.as_bytes()));
    assert_eq!(m.config_hash, spec.config.hash().unwrap());
    assert_eq!(RunManifest::read(dir).unwrap(), *m);
    assert!(m.finished_unix >= m.started_unix);
    assert!(!dir.join(METRICS_PARTIAL).exists());

    let mut r = csv::Reader::from_path(dir.join(METRICS_FILE)).unwrap();
    assert_eq!(r.headers().unwrap().get(0), Some("iter"));
    assert_eq!(r.records().count(), 4 * 4);
    assert_eq!(out.metrics.len(), 16);

    for entry in &m.files {
        let bytes = fs::read(dir.join(&entry.path)).unwrap();
        assert_eq!(entry.bytes, bytes.len() as u64);
        assert_eq!(entry.sha256, sha256_hex(&bytes));
    }
    let names: Vec<&str> = m.files.iter().map(|f| f.path.as_str()).collect();
    for want in [
        "checkpoints/iter_00001.bin",
        "checkpoints/iter_00003.bin",
        "config.toml",
        "envelopes/iter_00001.json",
        "envelopes/iter_00003.json",
        "metrics.csv",
        "passk.csv",
    ] {
        assert!(names.contains(&want), "{want} missing from {names:?}");
    }
    assert!(!names.contains(&MANIFEST_FILE));

    // pass@k over k ∈ {1, 2, 4}, nondecreasing
    let mut r = csv::Reader::from_path(dir.join(PASSK_FILE)).unwrap();
    assert_eq!(r.headers().unwrap(), vec!["method", "k", "pass_at_k"]);
    let rows: Vec<(usize, f64)> = r.records().map(|x| x.unwrap()).map(|x| (x[1].parse().unwrap(), x[2].parse().unwrap())).collect();
    assert_eq!(rows.iter().map(|r| r.0).collect::<Vec<_>>(), [1, 2, 4]);
    assert!(rows.windows(2).all(|w| w[1].1 >= w[0].1));

    // the latest checkpoint restores the final state
    let st = run::load_checkpoint(&spec.config.policy, &run::latest_checkpoint(dir).unwrap()).unwrap();
    assert_eq!(st.iter, 4);
    assert!(matches!(run::execute(&spec), Err(LabError::Config(_))));
}

#[test]
fn runs_are_bit_identical_across_worker_counts() {
    let root = tempfile::tempdir().unwrap();
    let a = run::execute(&tiny(&root.path().join("a"), &["trainer.workers=1"])).unwrap();
    let b = run::execute(&tiny(&root.path().join("b"), &["trainer.workers=3"])).unwrap();
    let read = |d: &PathBuf| fs::read(d.join(METRICS_FILE)).unwrap();
    assert_eq!(read(&a.dir), read(&b.dir));
    assert_eq!(fs::read(a.dir.join(PASSK_FILE)).unwrap(), fs::read(b.dir.join(PASSK_FILE)).unwrap());
    assert_eq!(a.manifest.first_rollout_sha256, b.manifest.first_rollout_sha256);
}

#[test]
fn a_run_replays_from_its_stored_config() {
    let root = tempfile::tempdir().unwrap();
    let a = run::execute(&tiny(root.path(), &["trainer.total_iters=2"])).unwrap();
    let cfg = run::read_run_config(&a.dir).unwrap();
    let again = RunSpec {
        label: "again".into(),
        dir: root.path().join("again"),
        config: cfg,
    };
    let b = run::execute(&again).unwrap();
    assert_eq!(fs::read(a.dir.join(METRICS_FILE)).unwrap(), fs::read(b.dir.join(METRICS_FILE)).unwrap());
}

#[test]
fn method_sweep_shares_its_first_rollout() {
    let root = tempfile::tempdir().unwrap();
    let all = specs(
        root.path(),
        "method-sweep",
        &[
            "policy.d_model=16",
            "trainer.prompts_per_iter=4",
            "trainer.group_size=4",
            "trainer.updates_per_iter=2",
            "trainer.micro_batch=4",
            "trainer.total_iters=1",
            "trainer.heldout_prompts=4",
            "diagnostics.eval_prompts=4",
            "diagnostics.pass_k_samples=2",
        ],
    );
    assert_eq!(all.len(), 6);
    let outs = run::execute_all(&all).unwrap();
    let h = outs[0].manifest.first_rollout_sha256.clone().unwrap();
    for o in &outs {
        assert_eq!(o.manifest.first_rollout_sha256.as_deref(), Some(h.as_str()), "{}", o.manifest.label);
    }
    let dirs: Vec<PathBuf> = outs.iter().map(|o| o.dir.clone()).collect();
    assert_eq!(fs::read_dir(root.path().join("runs/method-sweep")).unwrap().count(), 6);

    let csv = emit_plotdata(&dirs, Figure::PassK, 10).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("method,k,pass_at_k"));
    assert_eq!(lines.count(), 6 * 2);
}

#[test]
fn divergence_is_recorded_in_the_manifest() {
    let root = tempfile::tempdir().unwrap();
    let spec = tiny(root.path(), &["trainer.divergence_factor=1.000001", "trainer.total_iters=20", "trainer.group_size=8"]);
    let out = run::execute(&spec).unwrap();
    assert_eq!(out.manifest.status, RunStatus::Diverged);
    let d = out.manifest.divergence.as_ref().unwrap();
    assert!(d.reason.contains("trailing median"));
    assert!(out.dir.join(METRICS_FILE).exists());
    assert!(!out.dir.join(PASSK_FILE).exists());
}

fn alp_run(root: &Path) -> PathBuf {
    run::execute(&tiny(root, &["objective.method=seq-alp", "trainer.sigma_init=0.05"])).unwrap().dir
}

#[test]
fn replay_without_updates_gives_identical_arms() {
    let root = tempfile::tempdir().unwrap();
    let dir = alp_run(root.path());
    let rep = replay_envelope(&dir, None, 0, 1).unwrap();
    let (u, p) = (rep.arm("unperturbed").unwrap(), rep.arm("perturbed").unwrap());
    assert_eq!(u.sigma, vec![0.0; u.sigma.len()]);
    assert!(p.sigma.iter().all(|s| *s > 0.0));
    assert_eq!(u.weights, p.weights);
    assert_eq!(u.envelope, p.envelope);
    assert_eq!(u.lowest_bin_abs_p99, p.lowest_bin_abs_p99);
}

#[test]
fn unperturbed_arm_is_the_bypass_update() {
    let root = tempfile::tempdir().unwrap();
    let dir = alp_run(root.path());
    let rep = replay_envelope(&dir, None, 4, 2).unwrap();
    assert_eq!(rep.method, "seq-alp");

    let mut cfg = run::read_run_config(&dir).unwrap();
    cfg.objective.method = Method::SeqBypass;
    cfg.trainer.seed = 2;
    cfg.trainer.updates_per_iter = 4;
    let setup = cfg.setup();
    let mut st: RunState = run::load_checkpoint(&cfg.policy, &run::latest_checkpoint(&dir).unwrap()).unwrap();
    let prep = setup.collect(&st.params, st.iter).unwrap();
    for u in 0..4 {
        setup.update(&mut st, &prep, u).unwrap();
    }
    assert_eq!(rep.arm("unperturbed").unwrap().weights, st.params.flat_weights());
    assert_ne!(rep.arm("perturbed").unwrap().weights, st.params.flat_weights());
}

#[test]
fn replay_errors() {
    let root = tempfile::tempdir().unwrap();
    let dir = alp_run(root.path());
    let missing = dir.join("checkpoints/iter_99999.bin");
    assert!(matches!(replay_envelope(&dir, Some(&missing), 4, 0), Err(LabError::MissingCheckpoint(_))));
    // 32 sequences do not split into 5 updates
    assert!(matches!(replay_envelope(&dir, None, 5, 0), Err(LabError::Config(_))));
    fs::remove_dir_all(dir.join("checkpoints")).unwrap();
    assert!(matches!(replay_envelope(&dir, None, 4, 0), Err(LabError::MissingCheckpoint(_))));
}

#[test]
fn plot_data_is_tidy_and_idempotent() {
    let root = tempfile::tempdir().unwrap();
    let dir = alp_run(root.path());
    let rep = replay_envelope(&dir, None, 4, 0).unwrap();
    let rdir = dir.join("replay-seed0");
    write_report(&rep, &rdir).unwrap();
    assert!(rdir.join(REPLAY_FILE).exists());

    for fig in [Figure::Training, Figure::Envelope, Figure::PassK, Figure::Perturbation] {
        let a = emit_plotdata(&[dir.clone()], fig, 3).unwrap();
        let b = emit_plotdata(&[dir.clone()], fig, 3).unwrap();
        assert_eq!(a, b, "{fig:?}");
        if fig != Figure::PassK {
            assert!(a.starts_with("series,x,y,quantile\n"));
        }
    }

    let env = &rep.arms[0].envelope;
    let csv = emit_plotdata(&[rdir.clone()], Figure::Envelope, 10).unwrap();
    assert_eq!(csv.lines().count() - 1, env.bins.len() * env.quantile_levels.len() * rep.arms.len());

    let training = emit_plotdata(&[dir.clone()], Figure::Training, 3).unwrap();
    assert!(training.lines().any(|l| l.contains("/reward_mean_smoothed,")));
    assert!(training.lines().any(|l| l.contains("/log_ratio,") && l.ends_with(",99")));

    // a metrics table without the needed columns
    let bad = root.path().join("bad");
    fs::create_dir_all(&bad).unwrap();
    fs::write(bad.join(METRICS_FILE), "iter,update,reward_mean\n0,0,0.5\n").unwrap();
    match emit_plotdata(&[bad], Figure::Training, 3) {
        Err(LabError::MissingColumns { columns, .. }) => assert!(columns.contains(&"grad_norm".to_string())),
        other => panic!("{other:?}"),
    }
    assert!(emit_plotdata(&[], Figure::Training, 3).is_err());
}
