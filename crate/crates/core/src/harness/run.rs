//! Resolving a config into live objects, executing it, and persisting the
//! run directory.
//!
//! Seeding: the master seed feeds a `SeedSpring`; the offline dataset draws
//! from the `dataset` substream, the algorithm runs inside the `algorithm`
//! child, and Monte Carlo evaluation uses the `eval` stream. Adding a
//! consumer therefore never perturbs existing ones.

use std::collections::BTreeMap;
use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use crate::diagnostics::suboptimality;
use crate::error::{Error, Result};
use crate::harness::artifact::{
    render_policy, write_json_pretty, Manifest, ParamBlock, TraceTable, MANIFEST_SCHEMA,
};
use crate::harness::config::{AlgorithmSpec, BcSpec, BehaviorSpec, DatasetSpec, ExperimentConfig};
use crate::mdp::TokenMdp;
use crate::moment_match::{solve_mm, MmConfig, MmMode, MmOutcome, MmTraceRow};
use crate::offline::{bc_baseline, solve_offline, OfflineTraceRow};
use crate::online::{run_online, OnlineOutcome, OnlineTraceRow};
use crate::policy::{
    best_of_n, dp_solve, exact_value, teacher_policy, BcOptions, Policy, SoftmaxLinearPolicy,
    TabularPolicy,
};
use crate::preference::{gen_offline, Annotators, PreferenceDataset};
use crate::reward::{fit_mle, LinearReward, MleOptions};
use crate::seed::{hash_bytes, SeedSpring};

/// Environment variable naming the default output root.
pub const ENV_OUT: &str = "PBKD_OUT";

/// Output root used when neither a flag nor the config provides one.
pub fn default_out_root() -> PathBuf {
    env::var_os(ENV_OUT)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("pbkd-runs"))
}

/// A validated config together with the objects it denotes.
#[derive(Debug, Clone)]
pub struct ResolvedExperiment {
    pub config: ExperimentConfig,
    pub mdp: TokenMdp,
    pub rstar: LinearReward,
    pub teacher_reward: LinearReward,
    pub teacher: TabularPolicy,
}

pub fn resolve(config: &ExperimentConfig) -> Result<ResolvedExperiment> {
    config.validate()?;
    let mdp = config.mdp.build()?;
    let rstar = config.reward.build(&mdp)?;
    let teacher_reward = match &config.teacher.theta {
        Some(spec) => spec.build(&mdp)?,
        None => rstar.clone(),
    };
    let teacher = teacher_policy(&mdp, &teacher_reward, config.teacher.temperature)?;
    Ok(ResolvedExperiment {
        config: config.clone(),
        mdp,
        rstar,
        teacher_reward,
        teacher,
    })
}

/// In-memory result of one run, ready to persist.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub algorithm: &'static str,
    pub trace: TraceTable,
    pub final_metrics: BTreeMap<String, f64>,
    pub policy: Option<SoftmaxLinearPolicy>,
    pub params: Option<ParamBlock>,
    pub dataset: Option<PreferenceDataset>,
}

fn behavior(
    spec: &BehaviorSpec,
    resolved: &ResolvedExperiment,
) -> Result<Box<dyn Policy>> {
    Ok(match spec {
        BehaviorSpec::Uniform => Box::new(SoftmaxLinearPolicy::uniform(&resolved.mdp)?),
        BehaviorSpec::Teacher => Box::new(resolved.teacher.clone()),
        BehaviorSpec::SoftenedTeacher { temperature } => Box::new(teacher_policy(
            &resolved.mdp,
            &resolved.teacher_reward,
            *temperature,
        )?),
    })
}

/// Builds or loads the offline dataset named by the config.
pub fn obtain_dataset(
    resolved: &ResolvedExperiment,
    spring: &SeedSpring,
) -> Result<PreferenceDataset> {
    match &resolved.config.dataset {
        DatasetSpec::Generate { n, mu0, mu1 } => {
            let p0 = behavior(mu0, resolved)?;
            let p1 = behavior(mu1, resolved)?;
            let mut rng = spring.substream("dataset", 0);
            gen_offline(
                &resolved.mdp,
                p0.as_ref(),
                p1.as_ref(),
                &resolved.rstar,
                *n,
                &mut rng,
                Annotators {
                    name0: mu0.name(),
                    name1: mu1.name(),
                    seed: spring.seed_for("dataset", 0),
                },
            )
        }
        DatasetSpec::Path { path } => PreferenceDataset::read_from(Path::new(path), &resolved.mdp),
    }
}

fn bc_options(spec: &BcSpec) -> BcOptions {
    BcOptions {
        context_len: spec.context_len,
        temperature: spec.temperature,
        epochs: spec.epochs,
        step: spec.step,
    }
}

fn offline_trace(rows: &[OfflineTraceRow]) -> Result<TraceTable> {
    let mut table = TraceTable::new(vec![
        "round",
        "gap",
        "loglik",
        "theta_norm",
        "j_student_rstar",
    ]);
    for r in rows {
        table.push(vec![
            r.round as f64,
            r.gap,
            r.loglik,
            r.theta_norm,
            r.j_student_rstar.ok_or(Error::MissingOracle)?,
        ])?;
    }
    Ok(table)
}

fn mm_offline_trace(rows: &[MmTraceRow]) -> Result<TraceTable> {
    let mut table = TraceTable::new(vec![
        "round",
        "gap",
        "loglik",
        "w_norm",
        "j_student_rstar",
        "pdl",
    ]);
    for r in rows {
        table.push(vec![
            r.round as f64,
            r.gap,
            r.loglik,
            r.w_norm,
            r.j_student_rstar.ok_or(Error::MissingOracle)?,
            r.pdl,
        ])?;
    }
    Ok(table)
}

const ONLINE_HEADERS: [&str; 9] = [
    "iteration",
    "samples",
    "j_student_rstar",
    "j_teacher_rstar",
    "gap_estimate",
    "loglik",
    "theta_norm",
    "sigma_logdet",
    "regret_cumulative",
];

fn online_cells(r: &OnlineTraceRow) -> Result<Vec<f64>> {
    Ok(vec![
        r.t as f64,
        r.n_t as f64,
        r.j_student_rstar.ok_or(Error::MissingOracle)?,
        r.j_teacher_rstar.ok_or(Error::MissingOracle)?,
        r.gap_estimate,
        r.loglik,
        r.theta_norm,
        r.sigma_logdet,
        r.regret_cumulative.ok_or(Error::MissingOracle)?,
    ])
}

fn online_trace(rows: &[OnlineTraceRow]) -> Result<TraceTable> {
    let mut table = TraceTable::new(ONLINE_HEADERS.to_vec());
    for r in rows {
        table.push(online_cells(r)?)?;
    }
    Ok(table)
}

fn mm_online_trace(rows: &[OnlineTraceRow], pdl: &[f64]) -> Result<TraceTable> {
    if rows.len() != pdl.len() {
        return Err(Error::DimensionMismatch(format!(
            "online trace has {} rows, pdl series has {}",
            rows.len(),
            pdl.len()
        )));
    }
    let mut headers = ONLINE_HEADERS.to_vec();
    headers.push("pdl");
    let mut table = TraceTable::new(headers);
    for (r, &p) in rows.iter().zip(pdl) {
        let mut cells = online_cells(r)?;
        cells.push(p);
        table.push(cells)?;
    }
    Ok(table)
}

fn online_metrics(
    outcome: &OnlineOutcome,
    metrics: &mut BTreeMap<String, f64>,
) -> Result<()> {
    let last = outcome
        .trace
        .last()
        .ok_or_else(|| Error::ConfigInvalid("online run produced an empty trace".into()))?;
    metrics.insert(
        "regret_cumulative".into(),
        last.regret_cumulative.ok_or(Error::MissingOracle)?,
    );
    metrics.insert(
        "j_teacher_rstar".into(),
        last.j_teacher_rstar.ok_or(Error::MissingOracle)?,
    );
    metrics.insert("loglik_final".into(), last.loglik);
    metrics.insert("sigma_logdet_final".into(), last.sigma_logdet);
    Ok(())
}

/// Runs the configured algorithm. Pure given the config: every random
/// stream derives from the master seed.
pub fn execute(resolved: &ResolvedExperiment) -> Result<RunRecord> {
    let config = &resolved.config;
    let mdp = &resolved.mdp;
    let teacher: &dyn Policy = &resolved.teacher;
    let rstar = &resolved.rstar;
    let spring = SeedSpring::new(config.master_seed);
    let algo_spring = spring.child("algorithm", 0);
    let mut metrics = BTreeMap::new();

    let record = match &config.algorithm {
        AlgorithmSpec::Bc(spec) => {
            let (policy, losses) =
                bc_baseline(mdp, teacher, spec.rollouts, &bc_options(spec), &algo_spring)?;
            let mut table = TraceTable::new(vec!["epoch", "loss"]);
            for (i, loss) in losses.iter().enumerate() {
                table.push(vec![i as f64, *loss])?;
            }
            metrics.insert(
                "bc_loss_final".into(),
                losses.last().copied().unwrap_or(f64::NAN),
            );
            finish_policy_run("bc", table, policy, None, None, resolved, metrics)?
        }
        AlgorithmSpec::BestOfN(spec) => {
            let dataset = obtain_dataset(resolved, &spring)?;
            let (rhat, _) = fit_mle(mdp, &dataset, spec.bound, &MleOptions::default())?;
            let (base, _) = bc_baseline(
                mdp,
                teacher,
                spec.base.rollouts,
                &bc_options(&spec.base),
                &algo_spring,
            )?;
            let mut rng = spring.stream("eval");
            let mut sum = 0.0;
            let mut sumsq = 0.0;
            for _ in 0..spec.eval_samples {
                let prompt = mdp.sample_prompt(&mut rng);
                let traj = best_of_n(mdp, &base, &rhat, prompt, spec.n, &mut rng)?;
                let v = rstar.traj_reward(mdp, &traj)?;
                sum += v;
                sumsq += v * v;
            }
            let n = spec.eval_samples as f64;
            let mean = sum / n;
            let se = if spec.eval_samples > 1 {
                (((sumsq - n * mean * mean) / (n - 1.0)).max(0.0) / n).sqrt()
            } else {
                0.0
            };
            let mut table = TraceTable::new(vec!["candidates", "j_estimate", "std_error"]);
            table.push(vec![spec.n as f64, mean, se])?;
            metrics.insert("j_student_rstar".into(), mean);
            metrics.insert("j_se".into(), se);
            metrics.insert(
                "suboptimality".into(),
                dp_solve(mdp, rstar, 0.0)?.value - mean,
            );
            RunRecord {
                algorithm: config.algorithm.label(),
                trace: table,
                final_metrics: metrics,
                policy: Some(base),
                params: Some(ParamBlock {
                    kind: "reward",
                    bound: rhat.bound(),
                    values: rhat.theta().to_vec(),
                }),
                dataset: Some(dataset),
            }
        }
        AlgorithmSpec::PbkdOffline(cfg) => {
            let dataset = obtain_dataset(resolved, &spring)?;
            let outcome = solve_offline(mdp, teacher, &dataset, cfg, Some(rstar), &algo_spring)?;
            let table = offline_trace(&outcome.trace)?;
            if let Some(last) = outcome.trace.last() {
                metrics.insert("gap_final".into(), last.gap);
                metrics.insert("loglik_final".into(), last.loglik);
            }
            let params = ParamBlock {
                kind: "reward",
                bound: outcome.reward.bound(),
                values: outcome.reward.theta().to_vec(),
            };
            finish_policy_run(
                "pbkd-offline",
                table,
                outcome.policy,
                Some(params),
                Some(dataset),
                resolved,
                metrics,
            )?
        }
        AlgorithmSpec::PbkdOnline(cfg) => {
            let outcome = run_online(mdp, teacher, cfg, Some(rstar), &algo_spring)?;
            let table = online_trace(&outcome.trace)?;
            online_metrics(&outcome, &mut metrics)?;
            let reward = outcome.state.reward()?;
            let params = ParamBlock {
                kind: "reward",
                bound: reward.bound(),
                values: reward.theta().to_vec(),
            };
            let dataset = outcome.state.dataset.clone();
            finish_policy_run(
                "pbkd-online",
                table,
                outcome.state.policy,
                Some(params),
                Some(dataset),
                resolved,
                metrics,
            )?
        }
        AlgorithmSpec::MmOffline(spec) => {
            let dataset = obtain_dataset(resolved, &spring)?;
            let mm = MmConfig {
                q_class: spec.q_class,
                mode: MmMode::Offline(spec.config),
            };
            let outcome = solve_mm(mdp, teacher, Some(&dataset), &mm, Some(rstar), &algo_spring)?;
            let MmOutcome::Offline { policy, q, trace } = outcome else {
                return Err(Error::ConfigInvalid(
                    "offline moment matching returned an online outcome".into(),
                ));
            };
            let table = mm_offline_trace(&trace)?;
            if let Some(last) = trace.last() {
                metrics.insert("gap_final".into(), last.gap);
                metrics.insert("loglik_final".into(), last.loglik);
                metrics.insert("pdl_final".into(), last.pdl);
            }
            let params = ParamBlock {
                kind: "q-linear",
                bound: q.bound(),
                values: q.w().to_vec(),
            };
            finish_policy_run(
                "mm-offline",
                table,
                policy,
                Some(params),
                Some(dataset),
                resolved,
                metrics,
            )?
        }
        AlgorithmSpec::MmOnline(spec) => {
            let mm = MmConfig {
                q_class: spec.q_class,
                mode: MmMode::Online(spec.config),
            };
            let out = solve_mm(mdp, teacher, None, &mm, Some(rstar), &algo_spring)?;
            let MmOutcome::Online { outcome, q, pdl } = out else {
                return Err(Error::ConfigInvalid(
                    "online moment matching returned an offline outcome".into(),
                ));
            };
            let table = mm_online_trace(&outcome.trace, &pdl)?;
            online_metrics(&outcome, &mut metrics)?;
            metrics.insert(
                "pdl_final".into(),
                pdl.last().copied().ok_or(Error::EmptyDataset)?,
            );
            let params = ParamBlock {
                kind: "q-linear",
                bound: q.bound(),
                values: q.w().to_vec(),
            };
            let dataset = outcome.state.dataset.clone();
            finish_policy_run(
                "mm-online",
                table,
                outcome.state.policy,
                Some(params),
                Some(dataset),
                resolved,
                metrics,
            )?
        }
    };
    Ok(record)
}

fn finish_policy_run(
    algorithm: &'static str,
    trace: TraceTable,
    policy: SoftmaxLinearPolicy,
    params: Option<ParamBlock>,
    dataset: Option<PreferenceDataset>,
    resolved: &ResolvedExperiment,
    mut metrics: BTreeMap<String, f64>,
) -> Result<RunRecord> {
    metrics.insert(
        "j_student_rstar".into(),
        exact_value(&resolved.mdp, &policy, &resolved.rstar)?,
    );
    metrics.insert(
        "suboptimality".into(),
        suboptimality(&resolved.mdp, &policy, &resolved.rstar)?,
    );
    Ok(RunRecord {
        algorithm,
        trace,
        final_metrics: metrics,
        policy: Some(policy),
        params,
        dataset,
    })
}

fn reward_fingerprint(reward: &LinearReward) -> String {
    let mut bytes = Vec::with_capacity(8 * (reward.dim() + 1));
    for v in reward.theta() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes.extend_from_slice(&reward.bound().to_le_bytes());
    format!("{:016x}", hash_bytes(&bytes))
}

/// Writes the run directory and returns its path. Everything is rendered
/// and checked before the first write, so a failed run leaves no partially
/// finite trace behind.
pub fn persist(
    resolved: &ResolvedExperiment,
    record: &RunRecord,
    out_root: &Path,
) -> Result<PathBuf> {
    let config = &resolved.config;
    let dir = out_root.join(format!("run-{}", config.run_id()));
    let trace_text = record.trace.render()?;
    let policy_text = record.policy.as_ref().map(render_policy).transpose()?;
    let params_text = record.params.as_ref().map(|p| p.render()).transpose()?;
    for v in record.final_metrics.values() {
        if !v.is_finite() {
            return Err(Error::NonFinite("final metric".into()));
        }
    }

    fs::create_dir_all(&dir)?;
    let mut artifacts = vec!["config.json".to_string(), "trace.csv".to_string()];
    fs::write(dir.join("config.json"), config.to_json())?;
    fs::write(dir.join("trace.csv"), trace_text)?;
    if let Some(text) = policy_text {
        fs::write(dir.join("policy.txt"), text)?;
        artifacts.push("policy.txt".into());
    }
    if let Some(text) = params_text {
        fs::write(dir.join("reward.txt"), text)?;
        artifacts.push("reward.txt".into());
    }
    if let Some(dataset) = &record.dataset {
        dataset.write_to(&dir.join("dataset.pref"))?;
        artifacts.push("dataset.pref".into());
    }
    let manifest = Manifest {
        schema: MANIFEST_SCHEMA.into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        algorithm: record.algorithm.into(),
        label: config.display_label(),
        master_seed: config.master_seed,
        config_hash: config.config_hash(),
        run_id: config.run_id(),
        mdp_fingerprint: format!("{:016x}", resolved.mdp.fingerprint()),
        rstar_fingerprint: reward_fingerprint(&resolved.rstar),
        final_metrics: record.final_metrics.clone(),
        artifacts,
    };
    write_json_pretty(&dir.join("manifest.json"), &manifest)?;
    Ok(dir)
}

/// Full pipeline: validate, execute, persist. The output root is the
/// explicit argument, else the config's `output_dir`, else `$PBKD_OUT`,
/// else `pbkd-runs`.
pub fn run_to_dir(config: &ExperimentConfig, out_root: Option<&Path>) -> Result<PathBuf> {
    let resolved = resolve(config)?;
    let record = execute(&resolved)?;
    let root = match out_root {
        Some(p) => p.to_path_buf(),
        None => config
            .output_dir
            .clone()
            .map(PathBuf::from)
            .unwrap_or_else(default_out_root),
    };
    persist(&resolved, &record, &root)
}
