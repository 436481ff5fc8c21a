//! Cross-method comparison of persisted runs.
//!
//! Runs are grouped by their seed-independent config hash, so the same
//! method at the same settings aggregates across master seeds. All runs
//! must share the MDP and ground-truth reward fingerprints. Methods are
//! ordered by seed-mean metric and each adjacent gap gets a paired standard
//! error over the seeds the two methods have in common.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::artifact::{load_run, RunHandle};

/// Which final metric the comparison reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompareMetric {
    JRstar,
    Regret,
}

impl CompareMetric {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "j_rstar" => Ok(CompareMetric::JRstar),
            "regret" => Ok(CompareMetric::Regret),
            other => Err(Error::ConfigInvalid(format!(
                "metric must be j_rstar or regret, got {other:?}"
            ))),
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            CompareMetric::JRstar => "j_student_rstar",
            CompareMetric::Regret => "regret_cumulative",
        }
    }
}

/// Seed-aggregated view of one method.
#[derive(Debug, Clone)]
pub struct MethodSummary {
    pub label: String,
    pub algorithm: String,
    pub config_hash: String,
    pub mean: f64,
    /// Standard error across seeds; zero for a single seed.
    pub stderr: f64,
    pub by_seed: BTreeMap<u64, f64>,
}

/// Gap between two neighbors in the method ordering.
#[derive(Debug, Clone)]
pub struct AdjacentGap {
    pub low: String,
    pub high: String,
    /// `mean(high) - mean(low)`, non-negative by construction.
    pub gap: f64,
    /// Paired standard error of the per-seed differences.
    pub paired_stderr: f64,
    pub common_seeds: usize,
    pub exceeds_stderr: bool,
}

/// Ordered comparison across methods.
#[derive(Debug, Clone)]
pub struct CompareReport {
    pub metric: &'static str,
    /// Methods sorted by ascending seed-mean metric.
    pub methods: Vec<MethodSummary>,
    pub gaps: Vec<AdjacentGap>,
}

pub fn compare_runs(dirs: &[&Path], metric: CompareMetric) -> Result<CompareReport> {
    if dirs.is_empty() {
        return Err(Error::ConfigInvalid("compare needs at least one run".into()));
    }
    let handles: Vec<RunHandle> = dirs.iter().map(|d| load_run(d)).collect::<Result<_>>()?;
    let first = &handles[0].manifest;
    for h in &handles[1..] {
        if h.manifest.mdp_fingerprint != first.mdp_fingerprint {
            return Err(Error::IncompatibleRuns(format!(
                "{} and {} were produced on different MDPs",
                handles[0].dir.display(),
                h.dir.display()
            )));
        }
        if h.manifest.rstar_fingerprint != first.rstar_fingerprint {
            return Err(Error::IncompatibleRuns(format!(
                "{} and {} use different ground-truth rewards",
                handles[0].dir.display(),
                h.dir.display()
            )));
        }
    }

    let key = metric.key();
    let mut groups: BTreeMap<String, MethodSummary> = BTreeMap::new();
    for h in &handles {
        let m = &h.manifest;
        let value = *m.final_metrics.get(key).ok_or_else(|| {
            Error::IncompatibleRuns(format!("run {} lacks metric {key}", h.dir.display()))
        })?;
        let entry = groups
            .entry(m.config_hash.clone())
            .or_insert_with(|| MethodSummary {
                label: m.label.clone(),
                algorithm: m.algorithm.clone(),
                config_hash: m.config_hash.clone(),
                mean: 0.0,
                stderr: 0.0,
                by_seed: BTreeMap::new(),
            });
        if let Some(prev) = entry.by_seed.insert(m.master_seed, value) {
            if prev != value {
                return Err(Error::IncompatibleRuns(format!(
                    "two runs of {} at seed {} disagree on {key}",
                    m.label, m.master_seed
                )));
            }
        }
    }

    let mut methods: Vec<MethodSummary> = groups.into_values().collect();
    for m in &mut methods {
        let n = m.by_seed.len() as f64;
        m.mean = m.by_seed.values().sum::<f64>() / n;
        if m.by_seed.len() > 1 {
            let var = m
                .by_seed
                .values()
                .map(|v| (v - m.mean) * (v - m.mean))
                .sum::<f64>()
                / (n - 1.0);
            m.stderr = (var / n).sqrt();
        }
    }
    methods.sort_by(|a, b| a.mean.total_cmp(&b.mean));

    let mut gaps = Vec::new();
    for pair in methods.windows(2) {
        let (low, high) = (&pair[0], &pair[1]);
        let diffs: Vec<f64> = low
            .by_seed
            .iter()
            .filter_map(|(seed, lv)| high.by_seed.get(seed).map(|hv| hv - lv))
            .collect();
        if diffs.is_empty() {
            return Err(Error::IncompatibleRuns(format!(
                "{} and {} share no master seeds for a paired comparison",
                low.label, high.label
            )));
        }
        let n = diffs.len() as f64;
        let mean_diff = diffs.iter().sum::<f64>() / n;
        let paired_stderr = if diffs.len() > 1 {
            let var = diffs
                .iter()
                .map(|d| (d - mean_diff) * (d - mean_diff))
                .sum::<f64>()
                / (n - 1.0);
            (var / n).sqrt()
        } else {
            0.0
        };
        let gap = high.mean - low.mean;
        gaps.push(AdjacentGap {
            low: low.label.clone(),
            high: high.label.clone(),
            gap,
            paired_stderr,
            common_seeds: diffs.len(),
            exceeds_stderr: gap > paired_stderr,
        });
    }

    Ok(CompareReport {
        metric: key,
        methods,
        gaps,
    })
}
