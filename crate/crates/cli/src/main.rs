//! `pbkd`: preference-based knowledge distillation experiments from the
//! command line.
//!
//! Exit codes: 0 on success, 2 for configuration errors, 3 for numeric
//! failures (non-finite values or failed numerical checks), 1 otherwise.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pbkd_core::harness::{
    compare_runs, preset, preset_names, read_summary_csv, run_sweep, run_to_dir, CompareMetric,
    CompareReport, ExperimentConfig, SweepAxis, SweepSpec, SweepSummary,
};
use pbkd_core::seed::SeedSpring;
use pbkd_core::{
    bellman_inversion_check, check_clipped_gradient, check_mle_gradient,
    check_reward_step_gradient, lemma_l1_tv_check, lemma_tv_logexp_check, pdl_identity_check,
    rate_fit, Error, GradCheck, LemmaReport,
};

#[derive(Parser)]
#[command(name = "pbkd", version, about = "Preference-based distillation lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a named preset config to a file or stdout.
    GenConfig {
        /// Preset name; see --list.
        #[arg(long, default_value = "smoke")]
        preset: String,
        /// Destination file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// List available presets and exit.
        #[arg(long)]
        list: bool,
    },
    /// Execute one experiment and persist its run directory.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Master seed override.
        #[arg(long)]
        seed: Option<u64>,
        /// Output root; defaults to the config's output_dir, then $PBKD_OUT.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a seeded grid along one axis and fit the rate through seed means.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// N (offline dataset size) or T (online iterations).
        #[arg(long)]
        axis: String,
        /// Comma-separated, strictly increasing axis values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<u64>,
        /// Number of consecutive master seeds per value.
        #[arg(long, default_value_t = 2)]
        seeds: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Order persisted runs by a final metric with paired errors.
    Compare {
        /// Run directories.
        #[arg(long, value_delimiter = ',', required = true)]
        runs: Vec<PathBuf>,
        /// j_rstar or regret.
        #[arg(long, default_value = "j_rstar")]
        metric: String,
    },
    /// Numerical checks: inequality probes and gradient verification.
    Diag {
        /// One of l1tv, tvlog, pdl, gradients.
        #[arg(long)]
        check: String,
        /// Trial count; 0 picks the check's default (1000 lemma trials,
        /// 100 identity instances, 50 gradient configurations).
        #[arg(long, default_value_t = 0)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fit a power law through a sweep summary table.
    Rates {
        /// Path to a summary.csv written by sweep.
        #[arg(long)]
        input: PathBuf,
        /// subopt or regret; labels the report.
        #[arg(long, default_value = "subopt")]
        quantity: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::ConfigInvalid(_) | Error::Parse(_) => ExitCode::from(2),
                Error::NonFinite(_) => ExitCode::from(3),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn dispatch(command: Command) -> Result<ExitCode, Error> {
    match command {
        Command::GenConfig {
            preset: name,
            out,
            list,
        } => {
            if list {
                for name in preset_names() {
                    println!("{name}");
                }
                return Ok(ExitCode::SUCCESS);
            }
            let config = preset(&name)?;
            let text = config.to_json();
            match out {
                Some(path) => {
                    fs::write(&path, text)?;
                    println!("wrote {}", path.display());
                }
                None => print!("{text}"),
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Run { config, seed, out } => {
            let mut config = ExperimentConfig::from_path(&config)?;
            if let Some(seed) = seed {
                config.master_seed = seed;
            }
            let dir = run_to_dir(&config, out.as_deref())?;
            println!("run {}", dir.display());
            let manifest = pbkd_core::harness::load_manifest(&dir)?;
            for (key, value) in &manifest.final_metrics {
                println!("{key} {value}");
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep {
            config,
            axis,
            values,
            seeds,
            out,
        } => {
            let config = ExperimentConfig::from_path(&config)?;
            let spec = SweepSpec {
                axis: SweepAxis::parse(&axis)?,
                values,
                seeds,
            };
            let root = out.unwrap_or_else(|| {
                config
                    .output_dir
                    .clone()
                    .map(PathBuf::from)
                    .unwrap_or_else(pbkd_core::harness::default_out_root)
            });
            let summary = run_sweep(&config, &spec, &root)?;
            print_sweep(&summary);
            Ok(ExitCode::SUCCESS)
        }
        Command::Compare { runs, metric } => {
            let metric = CompareMetric::parse(&metric)?;
            let paths: Vec<&std::path::Path> = runs.iter().map(|p| p.as_path()).collect();
            let report = compare_runs(&paths, metric)?;
            print_compare(&report);
            Ok(ExitCode::SUCCESS)
        }
        Command::Diag {
            check,
            trials,
            seed,
        } => diag(&check, trials, seed),
        Command::Rates { input, quantity } => {
            if quantity != "subopt" && quantity != "regret" {
                return Err(Error::ConfigInvalid(format!(
                    "quantity must be subopt or regret, got {quantity:?}"
                )));
            }
            let points = read_summary_csv(&input)?;
            let series: Vec<(f64, f64)> =
                points.iter().map(|p| (p.value as f64, p.mean)).collect();
            let fit = rate_fit(&series)?;
            println!(
                "{quantity}: slope {:.4} intercept {:.4} residual_rms {:.4} r2 {:.4} points {}",
                fit.slope, fit.intercept, fit.residual_rms, fit.r_squared, fit.points
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn print_sweep(summary: &SweepSummary) {
    println!("sweep {}", summary.dir.display());
    println!("value,mean,stderr,seeds");
    for p in &summary.points {
        println!("{},{},{},{}", p.value, p.mean, p.stderr, p.seeds);
    }
    println!(
        "{}: slope {:.4} intercept {:.4} residual_rms {:.4} points {}",
        summary.quantity,
        summary.fit.slope,
        summary.fit.intercept,
        summary.fit.residual_rms,
        summary.fit.points
    );
}

fn print_compare(report: &CompareReport) {
    println!("metric {}", report.metric);
    println!("{:<24} {:>12} {:>12} {:>6}", "method", "mean", "stderr", "seeds");
    for m in &report.methods {
        println!(
            "{:<24} {:>12.6} {:>12.6} {:>6}",
            m.label,
            m.mean,
            m.stderr,
            m.by_seed.len()
        );
    }
    for g in &report.gaps {
        println!(
            "gap {} -> {}: {:.6} (paired se {:.6}, {})",
            g.low,
            g.high,
            g.gap,
            g.paired_stderr,
            if g.exceeds_stderr {
                "exceeds"
            } else {
                "within noise"
            }
        );
    }
}

fn fail_if(bad: bool) -> ExitCode {
    if bad {
        ExitCode::from(3)
    } else {
        ExitCode::SUCCESS
    }
}

fn print_lemma(name: &str, report: &LemmaReport) {
    println!(
        "{name}: trials {} violations {} worst_margin {:.3e}",
        report.trials.len(),
        report.violations,
        report.worst_margin()
    );
}

fn worst_rel_err(checks: &[GradCheck]) -> f64 {
    checks.iter().map(|c| c.rel_err).fold(0.0, f64::max)
}

fn diag(check: &str, trials: usize, seed: u64) -> Result<ExitCode, Error> {
    let spring = SeedSpring::new(seed);
    match check {
        "l1tv" => {
            let trials = if trials == 0 { 1000 } else { trials };
            let report = lemma_l1_tv_check(trials, 1.0, &spring)?;
            print_lemma("l1tv", &report);
            Ok(fail_if(report.violations > 0))
        }
        "tvlog" => {
            let trials = if trials == 0 { 1000 } else { trials };
            let report = lemma_tv_logexp_check(trials, &spring)?;
            print_lemma("tvlog", &report);
            Ok(fail_if(report.violations > 0))
        }
        "pdl" => {
            let trials = if trials == 0 { 100 } else { trials };
            let identity = pdl_identity_check(trials, &spring)?;
            let inversion = bellman_inversion_check(trials, &spring)?;
            let worst_pdl = identity.iter().map(|c| c.error).fold(0.0, f64::max);
            let worst_inv = inversion.iter().map(|c| c.error).fold(0.0, f64::max);
            println!("pdl identity: trials {trials} worst_error {worst_pdl:.3e}");
            println!("bellman inversion: trials {trials} worst_error {worst_inv:.3e}");
            Ok(fail_if(worst_pdl > 1e-8 || worst_inv > 1e-10))
        }
        "gradients" => {
            let trials = if trials == 0 { 50 } else { trials };
            let worst_mle = worst_rel_err(&check_mle_gradient(trials, &spring)?);
            let worst_reward = worst_rel_err(&check_reward_step_gradient(trials, &spring)?);
            let worst_clip = worst_rel_err(&check_clipped_gradient(trials, &spring)?);
            println!("mle gradient: configs {trials} worst_rel_err {worst_mle:.3e}");
            println!("reward step gradient: configs {trials} worst_rel_err {worst_reward:.3e}");
            println!("clipped surrogate gradient: configs {trials} worst_rel_err {worst_clip:.3e}");
            Ok(fail_if(
                worst_mle > 1e-6 || worst_reward > 1e-4 || worst_clip > 1e-4,
            ))
        }
        other => Err(Error::ConfigInvalid(format!(
            "check must be l1tv, tvlog, pdl, or gradients, got {other:?}"
        ))),
    }
}
