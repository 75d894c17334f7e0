//! `alplab` command line: run experiments, replay checkpoints, run theory
//! probes, validate configs and emit plot data.
//!
//! Config values resolve as `--set` flag, then file (with its `extends`
//! chain), then built-in default. `ALPLAB_OUTPUT_ROOT` selects the output
//! root when `--output-root` is absent.

use std::path::PathBuf;
use std::process::ExitCode;

use alp_lab::config::{self, Source};
use alp_lab::error::{LabError, Result, EXIT_DIVERGENCE, EXIT_OK};
use alp_lab::plotdata::{self, Figure};
use alp_lab::probes::{self, Probe, ProbeSettings};
use alp_lab::replay;
use alp_lab::run::{self, RunStatus};
use alp_lab::presets;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "alplab", version, about = "Off-policy RL laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config file.
    #[arg(conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in preset name.
    #[arg(long)]
    preset: Option<String>,
    /// Override a config key, e.g. `--set trainer.lr_theta=1e-4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn source(&self) -> Result<Source> {
        match (&self.config, &self.preset) {
            (Some(p), None) => Ok(Source::File(p.clone())),
            (None, Some(n)) => Ok(Source::Preset(n.clone())),
            _ => Err(LabError::Config(format!(
                "give a config file or --preset (one of: {})",
                presets::names().collect::<Vec<_>>().join(", ")
            ))),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run every (method, perturbation, seed) combination of an experiment.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output root; defaults to `ALPLAB_OUTPUT_ROOT`, then `.`.
        #[arg(long)]
        output_root: Option<PathBuf>,
    },
    /// Replay updates from a checkpoint with and without perturbation.
    ReplayEnvelope {
        run_dir: PathBuf,
        /// Checkpoint file; defaults to the run's latest.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        n_updates: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Report directory; defaults to `<run_dir>/replay-seed<seed>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write one tidy CSV for a figure from run or replay directories.
    EmitPlotdata {
        /// training, envelope, passk or perturbation.
        #[arg(long)]
        figure: Figure,
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        smoothing_window: usize,
    },
    /// Run theory probes and write their JSON and CSV reports.
    TheoryProbe {
        /// stein, kl-bound, taylor, smoothness or landscape; all when absent.
        probes: Vec<Probe>,
        #[arg(long, default_value = "theory")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Resolve and validate a config, printing its canonical form and hash.
    ValidateConfig {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Run { cfg, output_root } => {
            let exp = config::load(&cfg.source()?, &cfg.overrides)?;
            let specs = exp.expand(&config::output_root(output_root.as_deref()))?;
            let mut code = EXIT_OK;
            for spec in &specs {
                let out = run::execute(spec)?;
                let s = &out.manifest.summary;
                println!(
                    "{}\t{}\treward={:.4}\tmax_ratio_p99={:.4}\t{}",
                    out.manifest.label,
                    match out.manifest.status {
                        RunStatus::Completed => "completed",
                        RunStatus::Diverged => "diverged",
                    },
                    s.final_reward_mean,
                    s.max_ratio_abs_p99,
                    out.dir.display()
                );
                if out.manifest.status == RunStatus::Diverged {
                    code = EXIT_DIVERGENCE;
                }
            }
            Ok(code)
        }
        Command::ReplayEnvelope {
            run_dir,
            checkpoint,
            n_updates,
            seed,
            out,
        } => {
            let rep = replay::replay_envelope(&run_dir, checkpoint.as_deref(), n_updates, seed)?;
            let out = out.unwrap_or_else(|| run_dir.join(format!("replay-seed{seed}")));
            replay::write_report(&rep, &out)?;
            for a in &rep.arms {
                println!("{}\tlowest_bin_abs_p99={:?}", a.name, a.lowest_bin_abs_p99);
            }
            Ok(EXIT_OK)
        }
        Command::EmitPlotdata {
            figure,
            dirs,
            out,
            smoothing_window,
        } => {
            let csv = plotdata::emit_plotdata(&dirs, figure, smoothing_window)?;
            match out {
                Some(p) => std::fs::write(&p, csv).map_err(|source| LabError::Io { path: p, source })?,
                None => print!("{csv}"),
            }
            Ok(EXIT_OK)
        }
        Command::TheoryProbe { probes: list, out, seed } => {
            let settings = ProbeSettings { seed, ..ProbeSettings::default() };
            let list = if list.is_empty() { Probe::ALL.to_vec() } else { list };
            let mut code = EXIT_OK;
            for p in list {
                let outcome = probes::run_probe(p, &settings)?;
                probes::write_outcome(p, &outcome, &out)?;
                println!("{}\t{}", p.name(), if outcome.pass() { "pass" } else { "fail" });
                if !outcome.pass() {
                    code = 1;
                }
            }
            Ok(code)
        }
        Command::ValidateConfig { cfg } => {
            let exp = config::load(&cfg.source()?, &cfg.overrides)?;
            print!("{}", exp.canonical_toml()?);
            println!("# sha256 {}", exp.hash()?);
            Ok(EXIT_OK)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
