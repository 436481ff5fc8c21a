//! Seeded sweeps along a dataset-size or iteration axis with rate fitting.
//!
//! A sweep runs the cross product of axis values and master seeds (base
//! seed, base + 1, ...) in parallel, persists every cell as an ordinary run
//! directory under `sweep-<id>/`, aggregates seed means with standard
//! errors, and fits a power law through the means. Failed cells leave a
//! `failures.json` next to the completed ones before the error propagates.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{rate_fit, RateFit};
use crate::error::{Error, Result};
use crate::harness::config::{AlgorithmSpec, DatasetSpec, ExperimentConfig};
use crate::harness::run::run_to_dir;
use crate::seed::{hash_bytes, mix};

/// What the sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepAxis {
    /// Offline dataset size.
    N,
    /// Online iteration budget.
    T,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "N" | "n" => Ok(SweepAxis::N),
            "T" | "t" => Ok(SweepAxis::T),
            other => Err(Error::ConfigInvalid(format!(
                "axis must be N or T, got {other:?}"
            ))),
        }
    }

    /// Metric aggregated along the axis.
    pub fn quantity(self) -> &'static str {
        match self {
            SweepAxis::N => "suboptimality",
            SweepAxis::T => "regret_cumulative",
        }
    }
}

/// Sweep request: axis values and the number of consecutive master seeds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<u64>,
    pub seeds: u64,
}

impl SweepSpec {
    fn validate(&self) -> Result<()> {
        if self.values.len() < 3 {
            return Err(Error::ConfigInvalid(format!(
                "sweep needs at least 3 axis values, got {}",
                self.values.len()
            )));
        }
        if self.values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::ConfigInvalid(
                "sweep values must be strictly increasing".into(),
            ));
        }
        if self.values[0] == 0 {
            return Err(Error::ConfigInvalid("sweep values must be positive".into()));
        }
        if self.seeds == 0 {
            return Err(Error::ConfigInvalid("sweep needs at least one seed".into()));
        }
        Ok(())
    }
}

/// Rewrites the base config for one axis value.
pub fn apply_axis(
    base: &ExperimentConfig,
    axis: SweepAxis,
    value: u64,
) -> Result<ExperimentConfig> {
    let mut config = base.clone();
    match axis {
        SweepAxis::N => {
            if !config.algorithm.uses_offline_dataset() {
                return Err(Error::ConfigInvalid(format!(
                    "axis N needs an offline-dataset algorithm, got {}",
                    config.algorithm.label()
                )));
            }
            match &mut config.dataset {
                DatasetSpec::Generate { n, .. } => *n = value as usize,
                DatasetSpec::Path { .. } => {
                    return Err(Error::ConfigInvalid(
                        "axis N needs a generated dataset, not a fixed path".into(),
                    ))
                }
            }
        }
        SweepAxis::T => match &mut config.algorithm {
            AlgorithmSpec::PbkdOnline(cfg) => cfg.iterations = value as usize,
            AlgorithmSpec::MmOnline(spec) => spec.config.iterations = value as usize,
            other => {
                return Err(Error::ConfigInvalid(format!(
                    "axis T needs an online algorithm, got {}",
                    other.label()
                )))
            }
        },
    }
    Ok(config)
}

/// One completed cell.
#[derive(Debug, Clone)]
pub struct SweepCell {
    pub value: u64,
    pub master_seed: u64,
    pub metric: f64,
    pub run_dir: PathBuf,
}

/// Seed-aggregated point on the sweep curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub value: u64,
    pub mean: f64,
    /// Standard error of the seed mean; zero for a single seed.
    pub stderr: f64,
    pub seeds: usize,
}

/// Aggregated sweep result.
#[derive(Debug, Clone)]
pub struct SweepSummary {
    pub dir: PathBuf,
    pub axis: SweepAxis,
    pub quantity: &'static str,
    pub points: Vec<SweepPoint>,
    pub fit: RateFit,
    pub cells: Vec<SweepCell>,
}

#[derive(Debug, Serialize)]
struct FailureEntry {
    value: u64,
    master_seed: u64,
    error: String,
}

#[derive(Debug, Serialize)]
struct RatesFile<'a> {
    quantity: &'a str,
    fit: &'a RateFit,
}

fn sweep_dir_name(base: &ExperimentConfig, spec: &SweepSpec) -> String {
    let mut h = hash_bytes(base.config_hash().as_bytes());
    h = mix(h, base.master_seed);
    h = mix(h, spec.seeds);
    h = mix(h, matches!(spec.axis, SweepAxis::T) as u64);
    for v in &spec.values {
        h = mix(h, *v);
    }
    format!("sweep-{h:016x}")
}

/// Runs the sweep and writes `cells.csv`, `summary.csv`, and `rates.json`
/// under the returned summary's directory.
pub fn run_sweep(
    base: &ExperimentConfig,
    spec: &SweepSpec,
    out_root: &Path,
) -> Result<SweepSummary> {
    spec.validate()?;
    base.validate()?;
    for &v in &spec.values {
        apply_axis(base, spec.axis, v)?;
    }
    let dir = out_root.join(sweep_dir_name(base, spec));
    fs::create_dir_all(&dir)?;

    let mut grid = Vec::new();
    for &value in &spec.values {
        for s in 0..spec.seeds {
            grid.push((value, base.master_seed + s));
        }
    }
    let quantity = spec.axis.quantity();
    let outcomes: Vec<std::result::Result<SweepCell, (u64, u64, Error)>> = grid
        .par_iter()
        .map(|&(value, master_seed)| {
            let cell = || -> Result<SweepCell> {
                let mut config = apply_axis(base, spec.axis, value)?;
                config.master_seed = master_seed;
                let run_dir = run_to_dir(&config, Some(&dir))?;
                let manifest = crate::harness::artifact::load_manifest(&run_dir)?;
                let metric = *manifest.final_metrics.get(quantity).ok_or_else(|| {
                    Error::IncompatibleRuns(format!(
                        "run {} lacks metric {quantity}",
                        run_dir.display()
                    ))
                })?;
                Ok(SweepCell {
                    value,
                    master_seed,
                    metric,
                    run_dir,
                })
            };
            cell().map_err(|e| (value, master_seed, e))
        })
        .collect();

    let mut cells = Vec::new();
    let mut failures = Vec::new();
    for outcome in outcomes {
        match outcome {
            Ok(cell) => cells.push(cell),
            Err((value, master_seed, error)) => failures.push(FailureEntry {
                value,
                master_seed,
                error: error.to_string(),
            }),
        }
    }
    if !failures.is_empty() {
        crate::harness::artifact::write_json_pretty(&dir.join("failures.json"), &failures)?;
        let first = failures.remove(0);
        return Err(Error::ConfigInvalid(format!(
            "sweep cell (value {}, seed {}) failed: {}",
            first.value, first.master_seed, first.error
        )));
    }

    let mut points = Vec::new();
    for &value in &spec.values {
        let metrics: Vec<f64> = cells
            .iter()
            .filter(|c| c.value == value)
            .map(|c| c.metric)
            .collect();
        points.push(aggregate(value, &metrics));
    }
    let fit = rate_fit(
        &points
            .iter()
            .map(|p| (p.value as f64, p.mean))
            .collect::<Vec<_>>(),
    )?;

    write_cells_csv(&dir, quantity, &cells)?;
    write_summary_csv(&dir.join("summary.csv"), &points)?;
    crate::harness::artifact::write_json_pretty(
        &dir.join("rates.json"),
        &RatesFile {
            quantity,
            fit: &fit,
        },
    )?;
    Ok(SweepSummary {
        dir,
        axis: spec.axis,
        quantity,
        points,
        fit,
        cells,
    })
}

fn aggregate(value: u64, metrics: &[f64]) -> SweepPoint {
    let n = metrics.len() as f64;
    let mean = metrics.iter().sum::<f64>() / n;
    let stderr = if metrics.len() > 1 {
        let var = metrics.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    SweepPoint {
        value,
        mean,
        stderr,
        seeds: metrics.len(),
    }
}

fn write_cells_csv(dir: &Path, quantity: &str, cells: &[SweepCell]) -> Result<()> {
    let mut text = format!("value,master_seed,{quantity}\n");
    for c in cells {
        if !c.metric.is_finite() {
            return Err(Error::NonFinite(format!(
                "sweep cell (value {}, seed {})",
                c.value, c.master_seed
            )));
        }
        text.push_str(&format!("{},{},{}\n", c.value, c.master_seed, c.metric));
    }
    fs::write(dir.join("cells.csv"), text)?;
    Ok(())
}

/// Writes the aggregated table: `value,mean,stderr,seeds`, one row per axis
/// value.
pub fn write_summary_csv(path: &Path, points: &[SweepPoint]) -> Result<()> {
    let mut text = String::from("value,mean,stderr,seeds\n");
    for p in points {
        if !p.mean.is_finite() || !p.stderr.is_finite() {
            return Err(Error::NonFinite(format!("summary point at value {}", p.value)));
        }
        text.push_str(&format!("{},{},{},{}\n", p.value, p.mean, p.stderr, p.seeds));
    }
    fs::write(path, text)?;
    Ok(())
}

/// Reads a `summary.csv` written by `write_summary_csv`.
pub fn read_summary_csv(path: &Path) -> Result<Vec<SweepPoint>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse(format!("{}: empty summary", path.display())))?;
    if header != "value,mean,stderr,seeds" {
        return Err(Error::Parse(format!(
            "{}: unexpected header {header:?}",
            path.display()
        )));
    }
    let mut points = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::Parse(format!(
                "{}: row {} has {} fields",
                path.display(),
                i + 2,
                fields.len()
            )));
        }
        let parse_f = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| Error::Parse(format!("{}: bad {what} {s:?}: {e}", path.display())))
        };
        let value = fields[0]
            .parse::<u64>()
            .map_err(|e| Error::Parse(format!("{}: bad value {:?}: {e}", path.display(), fields[0])))?;
        let seeds = fields[3]
            .parse::<usize>()
            .map_err(|e| Error::Parse(format!("{}: bad seeds {:?}: {e}", path.display(), fields[3])))?;
        points.push(SweepPoint {
            value,
            mean: parse_f(fields[1], "mean")?,
            stderr: parse_f(fields[2], "stderr")?,
            seeds,
        });
    }
    Ok(points)
}
