//! Offline preference distillation.
//!
//! Given a fixed preference dataset, the solver alternates between fitting
//! an adversarial linear reward inside a likelihood ball and improving the
//! student against it. It also exposes the certified worst-case gap probe
//! used to compare the distilled student with behavior cloning.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{
    effective_records, expected_features, solve_saddle, RewardFeatures, SaddleConfig, ValueMode,
};
use crate::error::{Error, Result};
use crate::mdp::TokenMdp;
use crate::optim::{projected_ascent, AscentOpts};
use crate::policy::{
    behavior_cloning_fit, clone_deterministic, rollout, BcOptions, Policy, SoftmaxLinearPolicy,
};
use crate::preference::PreferenceDataset;
use crate::reward::{fit_mle, loglik, LinearReward, MleOptions};
use crate::seed::SeedSpring;
use crate::vecmath::{add_scaled, dot, norm2, sub};

fn default_beta() -> f64 {
    1.0
}
fn default_reward_steps() -> usize {
    25
}
fn default_policy_steps() -> usize {
    5
}
fn default_rounds() -> usize {
    200
}
fn default_step() -> f64 {
    0.5
}
fn default_bound() -> f64 {
    2.0
}
fn default_context() -> usize {
    1
}
fn default_temperature() -> f64 {
    1.0
}
fn default_true() -> bool {
    true
}
fn default_value_mode() -> ValueMode {
    ValueMode::Exact
}
fn default_bc_rollouts() -> usize {
    128
}
fn default_bc_epochs() -> usize {
    200
}
fn default_clone_logit() -> f64 {
    25.0
}

/// How the student is initialized before any distillation round runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudentInit {
    Uniform,
    BehaviorCloning {
        #[serde(default = "default_bc_rollouts")]
        rollouts: usize,
        #[serde(default = "default_bc_epochs")]
        epochs: usize,
        #[serde(default = "default_step")]
        step: f64,
    },
    /// Copies a deterministic teacher into the softmax table with a large
    /// logit on each greedy action. Exact only when the student context
    /// covers the full prefix.
    CloneTeacher {
        #[serde(default = "default_clone_logit")]
        logit: f64,
    },
}

impl Default for StudentInit {
    fn default() -> Self {
        StudentInit::BehaviorCloning {
            rollouts: default_bc_rollouts(),
            epochs: default_bc_epochs(),
            step: default_step(),
        }
    }
}

/// Offline solver knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OfflineConfig {
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_reward_steps")]
    pub reward_steps: usize,
    #[serde(default = "default_policy_steps")]
    pub policy_steps: usize,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_step")]
    pub reward_step_init: f64,
    #[serde(default = "default_step")]
    pub policy_lr: f64,
    #[serde(default = "default_value_mode")]
    pub value_mode: ValueMode,
    #[serde(default = "default_bound")]
    pub bound: f64,
    #[serde(default = "default_context")]
    pub student_context: usize,
    #[serde(default = "default_temperature")]
    pub student_temperature: f64,
    #[serde(default)]
    pub init: StudentInit,
    #[serde(default = "default_true")]
    pub baseline: bool,
}

impl Default for OfflineConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults are complete")
    }
}

impl OfflineConfig {
    pub(crate) fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::ConfigInvalid("beta must be finite and >= 0".into()));
        }
        if self.rounds == 0 {
            return Err(Error::ConfigInvalid("rounds must be positive".into()));
        }
        if !(self.bound.is_finite() && self.bound > 0.0) {
            return Err(Error::ConfigInvalid("bound must be positive".into()));
        }
        if !(self.reward_step_init > 0.0 && self.policy_lr > 0.0) {
            return Err(Error::ConfigInvalid("step sizes must be positive".into()));
        }
        if !(self.student_temperature.is_finite() && self.student_temperature > 0.0) {
            return Err(Error::ConfigInvalid(
                "student temperature must be positive".into(),
            ));
        }
        Ok(())
    }

    pub(crate) fn saddle(&self) -> SaddleConfig {
        SaddleConfig {
            rounds: self.rounds,
            reward_steps: self.reward_steps,
            policy_steps: self.policy_steps,
            beta: self.beta,
            bound: self.bound,
            reward_step_init: self.reward_step_init,
            policy_lr: self.policy_lr,
            value_mode: self.value_mode,
            baseline: self.baseline,
        }
    }
}

/// One row of the offline trace, recorded after each round's updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OfflineTraceRow {
    pub round: usize,
    pub gap: f64,
    pub loglik: f64,
    pub theta_norm: f64,
    pub j_student_rstar: Option<f64>,
}

/// Final student, adversarial reward, and per-round trace.
#[derive(Debug, Clone)]
pub struct OfflineOutcome {
    pub policy: SoftmaxLinearPolicy,
    pub reward: LinearReward,
    pub trace: Vec<OfflineTraceRow>,
}

/// Builds the student initialization shared by the offline and online loops.
pub(crate) fn init_student(
    mdp: &TokenMdp,
    teacher: &dyn Policy,
    init: StudentInit,
    context_len: usize,
    temperature: f64,
    spring: &SeedSpring,
) -> Result<SoftmaxLinearPolicy> {
    match init {
        StudentInit::Uniform => SoftmaxLinearPolicy::zeros(mdp, context_len, temperature),
        StudentInit::BehaviorCloning {
            rollouts,
            epochs,
            step,
        } => {
            if rollouts == 0 {
                return Err(Error::ConfigInvalid(
                    "behavior cloning needs at least one rollout".into(),
                ));
            }
            let mut rng = spring.stream("init-bc-rollouts");
            let mut demos = Vec::with_capacity(rollouts);
            for _ in 0..rollouts {
                let prompt = mdp.sample_prompt(&mut rng);
                demos.push(rollout(mdp, teacher, prompt, &mut rng)?);
            }
            let opts = BcOptions {
                context_len,
                temperature,
                epochs,
                step,
            };
            Ok(behavior_cloning_fit(mdp, &demos, &opts)?.0)
        }
        StudentInit::CloneTeacher { logit } => {
            clone_deterministic(mdp, teacher, context_len, temperature, logit)
        }
    }
}

/// Current adversarial gap `w . (phi_teacher - phi_student)` under a reward.
pub fn gap(
    mdp: &TokenMdp,
    teacher: &dyn Policy,
    student: &dyn Policy,
    reward: &LinearReward,
    mode: ValueMode,
    rng: &mut impl Rng,
) -> Result<f64> {
    let eff = RewardFeatures;
    let phi_teacher = expected_features(mdp, teacher, &eff, mode, rng)?;
    let phi_student = expected_features(mdp, student, &eff, mode, rng)?;
    Ok(dot(reward.theta(), &sub(&phi_teacher, &phi_student)))
}

/// Runs the offline solver on a fixed preference dataset.
///
/// When `rstar` is given the trace carries the student's exact value under
/// it, which the solver itself never sees.
pub fn solve_offline(
    mdp: &TokenMdp,
    teacher: &dyn Policy,
    dataset: &PreferenceDataset,
    config: &OfflineConfig,
    rstar: Option<&LinearReward>,
    spring: &SeedSpring,
) -> Result<OfflineOutcome> {
    config.validate()?;
    if dataset.is_empty() && config.beta != 0.0 {
        return Err(Error::EmptyDataset);
    }
    let eff = RewardFeatures;
    let records = effective_records(mdp, dataset, &eff)?;
    let student = init_student(
        mdp,
        teacher,
        config.init,
        config.student_context,
        config.student_temperature,
        &spring.child("init", 0),
    )?;
    let (policy, w, rows) = solve_saddle(
        mdp,
        teacher,
        &eff,
        &records,
        student,
        &config.saddle(),
        rstar,
        &spring.child("saddle", 0),
        None,
    )?;
    let reward = LinearReward::new(w, config.bound)?;
    let trace = rows
        .into_iter()
        .map(|r| OfflineTraceRow {
            round: r.round,
            gap: r.gap,
            loglik: r.loglik,
            theta_norm: r.w_norm,
            j_student_rstar: r.j_student_rstar,
        })
        .collect();
    Ok(OfflineOutcome {
        policy,
        reward,
        trace,
    })
}

/// Certified pessimism probe: maximizes `theta . (phi_teacher - phi_student)`
/// over rewards whose log likelihood stays within `zeta` of the maximum.
///
/// Multi-start penalized ascent with a feasibility repair pass; the fitted
/// maximum likelihood point itself is always one of the starts, so a
/// feasible value exists whenever the dataset is nonempty.
pub fn worst_case_gap(
    mdp: &TokenMdp,
    teacher: &dyn Policy,
    student: &dyn Policy,
    dataset: &PreferenceDataset,
    bound: f64,
    zeta: f64,
    restarts: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    if zeta < 0.0 || !zeta.is_finite() {
        return Err(Error::ConfigInvalid("zeta must be finite and >= 0".into()));
    }
    let (mle, report) = fit_mle(mdp, dataset, bound, &MleOptions::default())?;
    let threshold = report.loglik - zeta;
    let eff = RewardFeatures;
    let mut probe_rng = rand::rngs::mock::StepRng::new(0, 0);
    let phi_teacher = expected_features(mdp, teacher, &eff, ValueMode::Exact, &mut probe_rng)?;
    let phi_student = expected_features(mdp, student, &eff, ValueMode::Exact, &mut probe_rng)?;
    let direction = sub(&phi_teacher, &phi_student);
    let records = effective_records(mdp, dataset, &eff)?;

    let feasible = |theta: &[f64]| crate::reward::records_loglik(theta, &records) >= threshold;
    let mu = 10.0 * (norm2(&direction) + 1.0);
    let penalized = |theta: &[f64]| {
        let ll = crate::reward::records_loglik(theta, &records);
        let slack = threshold - ll;
        dot(theta, &direction) - if slack > 0.0 { mu * slack } else { 0.0 }
    };
    let penalized_grad = |theta: &[f64]| {
        let ll = crate::reward::records_loglik(theta, &records);
        let mut g = direction.clone();
        if threshold - ll > 0.0 {
            let lg = crate::reward::records_loglik_grad(theta, &records);
            add_scaled(&mut g, &lg, mu);
        }
        g
    };

    let opts = AscentOpts {
        max_iters: 400,
        grad_tol: 1e-10,
        init_step: 0.5,
        ..AscentOpts::default()
    };
    let mut best: Option<f64> = None;
    for start in 0..restarts.max(1) {
        let x0 = if start == 0 {
            mle.theta().to_vec()
        } else {
            let mut x: Vec<f64> = (0..mdp.feature_dim())
                .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
                .collect();
            let radius: f64 = rng.gen::<f64>().powf(1.0 / mdp.feature_dim() as f64) * bound;
            let n = norm2(&x);
            if n > 0.0 {
                for v in x.iter_mut() {
                    *v *= radius / n;
                }
            }
            x
        };
        let (mut theta, _) = projected_ascent(x0, bound, penalized, penalized_grad, &opts)?;
        if !feasible(&theta) {
            let repair = AscentOpts {
                max_iters: 2_000,
                grad_tol: 1e-12,
                init_step: 0.5,
                ..AscentOpts::default()
            };
            let (repaired, _) = projected_ascent(
                theta,
                bound,
                |x| crate::reward::records_loglik(x, &records),
                |x| crate::reward::records_loglik_grad(x, &records),
                &repair,
            )?;
            theta = repaired;
        }
        if feasible(&theta) {
            let value = dot(&theta, &direction);
            if best.map_or(true, |b| value > b) {
                best = Some(value);
            }
        }
    }
    best.ok_or_else(|| Error::NonFinite("no feasible reward found in the confidence set".into()))
}

/// Behavior cloning baseline packaged like the solvers: fits on fresh
/// teacher rollouts and reports per-epoch loss.
pub fn bc_baseline(
    mdp: &TokenMdp,
    teacher: &dyn Policy,
    rollouts: usize,
    opts: &BcOptions,
    spring: &SeedSpring,
) -> Result<(SoftmaxLinearPolicy, Vec<f64>)> {
    if rollouts == 0 {
        return Err(Error::ConfigInvalid(
            "behavior cloning needs at least one rollout".into(),
        ));
    }
    let mut rng = spring.stream("bc-rollouts");
    let mut demos = Vec::with_capacity(rollouts);
    for _ in 0..rollouts {
        let prompt = mdp.sample_prompt(&mut rng);
        demos.push(rollout(mdp, teacher, prompt, &mut rng)?);
    }
    let (policy, report) = behavior_cloning_fit(mdp, &demos, opts)?;
    Ok((policy, report.losses))
}

/// Checks membership of a reward in the offline likelihood ball, exposed for
/// diagnostics and tests.
pub fn offline_confidence_radius(
    mdp: &TokenMdp,
    dataset: &PreferenceDataset,
    reward: &LinearReward,
) -> Result<f64> {
    let (_, report) = fit_mle(mdp, dataset, reward.bound(), &MleOptions::default())?;
    Ok(report.loglik - loglik(reward, mdp, dataset)?)
}
