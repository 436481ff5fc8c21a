//! Online preference distillation.
//!
//! Each iteration freezes the current student as a snapshot, collects fresh
//! teacher-versus-snapshot preference pairs, takes fixed-step projected
//! reward updates on the growing dataset, improves the student with clipped
//! importance-weighted policy steps against the snapshot, and finally takes
//! an exploration step toward poorly covered feature directions measured by
//! the running preference covariance.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{
    expected_features, policy_ascent_step, sample_pair_batch, EffectiveFeatures, RewardFeatures,
    ValueMode,
};
use crate::error::{Error, Result};
use crate::mdp::{TokenMdp, Trajectory};
use crate::offline::{init_student, StudentInit};
use crate::policy::{dp_solve, exact_value, log_prob, mc_value, rollout, Policy, SoftmaxLinearPolicy};
use crate::preference::{gen_online_sample, Labeling, PreferenceDataset, PreferenceSample};
use crate::reward::{records_loglik, records_loglik_grad, LinearReward};
use crate::seed::SeedSpring;
use crate::vecmath::{add_scaled, dot, norm2, project_ball, sub};

fn default_iterations() -> usize {
    50
}
fn default_pref_batch() -> usize {
    16
}
fn default_opt_batch() -> usize {
    32
}
fn default_beta() -> f64 {
    1.0
}
fn default_clip() -> f64 {
    0.2
}
fn default_bonus_weight() -> f64 {
    0.1
}
fn default_inner_steps() -> usize {
    5
}
fn default_lr() -> f64 {
    0.5
}
fn default_labeling() -> Labeling {
    Labeling::Forced
}
fn default_ridge() -> f64 {
    1e-2
}
fn default_bound() -> f64 {
    2.0
}
fn default_value_mode() -> ValueMode {
    ValueMode::Exact
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

/// Online solver knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OnlineConfig {
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    /// Preference pairs collected per iteration.
    #[serde(default = "default_pref_batch")]
    pub pref_batch: usize,
    /// Fresh rollout pairs per optimization step.
    #[serde(default = "default_opt_batch")]
    pub opt_batch: usize,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_clip")]
    pub clip: f64,
    /// Scale of the exploration step; zero disables it exactly.
    #[serde(default = "default_bonus_weight")]
    pub bonus_weight: f64,
    #[serde(default = "default_inner_steps")]
    pub reward_steps: usize,
    #[serde(default = "default_inner_steps")]
    pub policy_steps: usize,
    #[serde(default = "default_lr")]
    pub reward_lr: f64,
    #[serde(default = "default_lr")]
    pub policy_lr: f64,
    #[serde(default = "default_labeling")]
    pub labeling: Labeling,
    #[serde(default = "default_ridge")]
    pub ridge: f64,
    #[serde(default = "default_bound")]
    pub bound: f64,
    #[serde(default = "default_value_mode")]
    pub value_mode: ValueMode,
    #[serde(default = "default_context")]
    pub student_context: usize,
    #[serde(default = "default_temperature")]
    pub student_temperature: f64,
    #[serde(default)]
    pub init: StudentInit,
    #[serde(default = "default_true")]
    pub baseline: bool,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults are complete")
    }
}

impl OnlineConfig {
    pub(crate) fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.pref_batch == 0 || self.opt_batch == 0 {
            return Err(Error::ConfigInvalid(
                "iterations, pref_batch, and opt_batch must be positive".into(),
            ));
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(Error::ConfigInvalid("clip must lie in (0, 1)".into()));
        }
        if !(self.ridge.is_finite() && self.ridge > 0.0) {
            return Err(Error::ConfigInvalid("ridge must be positive".into()));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0)
            || !(self.bonus_weight.is_finite() && self.bonus_weight >= 0.0)
        {
            return Err(Error::ConfigInvalid(
                "beta and bonus_weight must be finite and >= 0".into(),
            ));
        }
        if !(self.bound.is_finite() && self.bound > 0.0) {
            return Err(Error::ConfigInvalid("bound must be positive".into()));
        }
        if !(self.reward_lr > 0.0 && self.policy_lr > 0.0) {
            return Err(Error::ConfigInvalid("learning rates must be positive".into()));
        }
        if !(self.student_temperature.is_finite() && self.student_temperature > 0.0) {
            return Err(Error::ConfigInvalid(
                "student temperature must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Objective value of one reward update, before and after the step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardStepReport {
    pub objective_before: f64,
    pub objective_after: f64,
}

/// Mutable state of the online loop: the labeled dataset with its feature
/// difference records, the reward parameter, the student and its snapshot,
/// and the running preference covariance.
#[derive(Debug, Clone)]
pub struct OnlineState {
    pub iteration: usize,
    pub dataset: PreferenceDataset,
    records: Vec<(Vec<f64>, u8)>,
    theta: Vec<f64>,
    bound: f64,
    pub policy: SoftmaxLinearPolicy,
    pub snapshot: SoftmaxLinearPolicy,
    sigma_sum: DMatrix<f64>,
    ridge: f64,
}

impl OnlineState {
    pub fn new(
        dataset: PreferenceDataset,
        student: SoftmaxLinearPolicy,
        feature_dim: usize,
        bound: f64,
        ridge: f64,
    ) -> Result<Self> {
        if !(bound.is_finite() && bound > 0.0) {
            return Err(Error::ConfigInvalid("bound must be positive".into()));
        }
        if !(ridge.is_finite() && ridge > 0.0) {
            return Err(Error::ConfigInvalid("ridge must be positive".into()));
        }
        if !dataset.is_empty() {
            return Err(Error::ConfigInvalid(
                "online state starts from an empty dataset".into(),
            ));
        }
        Ok(Self {
            iteration: 0,
            dataset,
            records: Vec::new(),
            theta: vec![0.0; feature_dim],
            bound,
            snapshot: student.clone(),
            policy: student,
            sigma_sum: DMatrix::zeros(feature_dim, feature_dim),
            ridge,
        })
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn reward(&self) -> Result<LinearReward> {
        LinearReward::new(self.theta.clone(), self.bound)
    }

    /// Log likelihood of the current reward parameter on all data so far.
    pub fn loglik(&self) -> f64 {
        records_loglik(&self.theta, &self.records)
    }

    /// Ridge-regularized preference covariance.
    pub fn sigma(&self) -> DMatrix<f64> {
        let d = self.theta.len();
        DMatrix::identity(d, d) * self.ridge + &self.sigma_sum
    }

    pub fn sigma_logdet(&self) -> Result<f64> {
        let chol = nalgebra::Cholesky::new(self.sigma())
            .ok_or_else(|| Error::NonFinite("preference covariance lost definiteness".into()))?;
        Ok(2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>())
    }

    /// Appends freshly collected samples and returns their effective feature
    /// differences, which later feed the covariance update.
    pub(crate) fn append_batch_eff(
        &mut self,
        mdp: &TokenMdp,
        eff: &dyn EffectiveFeatures,
        samples: Vec<PreferenceSample>,
    ) -> Result<Vec<Vec<f64>>> {
        let mut diffs = Vec::with_capacity(samples.len());
        for sample in &samples {
            let f0 = eff.traj_features(mdp, sample.traj0.prompt, &sample.traj0.actions)?;
            let f1 = eff.traj_features(mdp, sample.traj1.prompt, &sample.traj1.actions)?;
            let diff = sub(&f0, &f1);
            self.records.push((diff.clone(), sample.label));
            diffs.push(diff);
        }
        if let Err(e) = self.dataset.append(samples) {
            self.records.truncate(self.dataset.len());
            return Err(e);
        }
        Ok(diffs)
    }

    pub fn append_batch(
        &mut self,
        mdp: &TokenMdp,
        samples: Vec<PreferenceSample>,
    ) -> Result<Vec<Vec<f64>>> {
        self.append_batch_eff(mdp, &RewardFeatures, samples)
    }

    pub(crate) fn reward_step_eff(
        &mut self,
        mdp: &TokenMdp,
        eff: &dyn EffectiveFeatures,
        batch: &[(Trajectory, Trajectory)],
        beta: f64,
        lr: f64,
    ) -> Result<RewardStepReport> {
        if batch.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut batch_diffs = Vec::with_capacity(batch.len());
        for (t0, t1) in batch {
            let f0 = eff.traj_features(mdp, t0.prompt, &t0.actions)?;
            let f1 = eff.traj_features(mdp, t1.prompt, &t1.actions)?;
            batch_diffs.push(sub(&f0, &f1));
        }
        let objective = |theta: &[f64]| {
            let mut v: f64 = batch_diffs.iter().map(|d| dot(theta, d)).sum();
            if beta != 0.0 {
                v += beta * records_loglik(theta, &self.records);
            }
            v
        };
        let objective_before = objective(&self.theta);
        let mut grad = vec![0.0; self.theta.len()];
        for d in &batch_diffs {
            add_scaled(&mut grad, d, 1.0);
        }
        if beta != 0.0 {
            let lg = records_loglik_grad(&self.theta, &self.records);
            add_scaled(&mut grad, &lg, beta);
        }
        add_scaled(&mut self.theta, &grad, lr);
        project_ball(&mut self.theta, self.bound);
        let objective_after = objective(&self.theta);
        if !objective_after.is_finite() {
            return Err(Error::NonFinite("reward step objective".into()));
        }
        Ok(RewardStepReport {
            objective_before,
            objective_after,
        })
    }

    /// One projected gradient step on the batch reward gap plus the scaled
    /// dataset log likelihood.
    pub fn reward_step(
        &mut self,
        mdp: &TokenMdp,
        batch: &[(Trajectory, Trajectory)],
        beta: f64,
        lr: f64,
    ) -> Result<RewardStepReport> {
        self.reward_step_eff(mdp, &RewardFeatures, batch, beta, lr)
    }

    /// One clipped importance-weighted policy step against the snapshot.
    ///
    /// The surrogate is the batch mean of `score_m * min(rho_m, clamp(rho_m))`
    /// with `rho_m` the current-to-snapshot probability ratio; samples whose
    /// ratio exceeds the upper clip contribute no gradient. Returns the
    /// surrogate value before the step.
    pub fn policy_clipped_step(
        &mut self,
        mdp: &TokenMdp,
        batch: &[Trajectory],
        scores: &[f64],
        clip: f64,
        lr: f64,
        baseline: bool,
    ) -> Result<f64> {
        let (surrogate, grad) = clipped_surrogate(
            mdp,
            &self.policy,
            &self.snapshot,
            batch,
            scores,
            clip,
            baseline,
        )?;
        self.policy.apply_step(&grad, lr)?;
        Ok(surrogate)
    }

    /// Accumulates the batch mean of outer products of feature differences
    /// into the running covariance.
    pub fn covariance_update(&mut self, diffs: &[Vec<f64>]) -> Result<()> {
        if diffs.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let d = self.theta.len();
        let inv_n = 1.0 / diffs.len() as f64;
        for diff in diffs {
            if diff.len() != d {
                return Err(Error::DimensionMismatch(format!(
                    "difference has dimension {}, covariance expects {d}",
                    diff.len()
                )));
            }
            let v = DVector::from_column_slice(diff);
            self.sigma_sum.ger(inv_n, &v, &v, 1.0);
        }
        Ok(())
    }

    pub(crate) fn uncertainty_step_eff(
        &mut self,
        mdp: &TokenMdp,
        teacher: &dyn Policy,
        eff: &dyn EffectiveFeatures,
        alpha: f64,
        lr: f64,
        mode: ValueMode,
        baseline: bool,
        rng: &mut impl Rng,
    ) -> Result<f64> {
        if alpha == 0.0 {
            return Ok(0.0);
        }
        let phi_student = expected_features(mdp, &self.policy, eff, mode, rng)?;
        let phi_teacher = expected_features(mdp, teacher, eff, mode, rng)?;
        let diff = sub(&phi_student, &phi_teacher);
        let chol = nalgebra::Cholesky::new(self.sigma())
            .ok_or_else(|| Error::NonFinite("preference covariance lost definiteness".into()))?;
        let solved = chol.solve(&DVector::from_column_slice(&diff));
        let value = dot(&diff, solved.as_slice());
        let direction: Vec<f64> = solved.iter().map(|x| 2.0 * x).collect();
        policy_ascent_step(
            mdp,
            &mut self.policy,
            eff,
            &direction,
            alpha * lr,
            mode,
            baseline,
            rng,
        )?;
        Ok(value)
    }

    /// One exploration step up the covariance-weighted disagreement
    /// `(phi_student - phi_teacher)' sigma^{-1} (phi_student - phi_teacher)`.
    ///
    /// Returns the disagreement value; `alpha == 0` leaves the policy and
    /// the random stream untouched.
    pub fn uncertainty_step(
        &mut self,
        mdp: &TokenMdp,
        teacher: &dyn Policy,
        alpha: f64,
        lr: f64,
        mode: ValueMode,
        baseline: bool,
        rng: &mut impl Rng,
    ) -> Result<f64> {
        self.uncertainty_step_eff(mdp, teacher, &RewardFeatures, alpha, lr, mode, baseline, rng)
    }
}

/// Value and gradient of the clipped surrogate
/// `mean_m (score_m - shift) * min(rho_m, clamp(rho_m, 1 - clip, 1 + clip))`
/// with respect to the current policy's weights, where `rho_m` is the
/// current-to-snapshot probability ratio of the sample. A sample whose ratio
/// exceeds the upper clip has zero gradient; below it the gradient is the
/// shifted score times the ratio times the log probability gradient.
pub fn clipped_surrogate(
    mdp: &TokenMdp,
    policy: &SoftmaxLinearPolicy,
    snapshot: &dyn Policy,
    batch: &[Trajectory],
    scores: &[f64],
    clip: f64,
    baseline: bool,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if batch.len() != scores.len() {
        return Err(Error::DimensionMismatch(
            "batch and score lengths differ".into(),
        ));
    }
    if !(clip > 0.0 && clip < 1.0) {
        return Err(Error::ConfigInvalid("clip must lie in (0, 1)".into()));
    }
    let shift = if baseline {
        scores.iter().sum::<f64>() / scores.len() as f64
    } else {
        0.0
    };
    let inv_m = 1.0 / batch.len() as f64;
    let hi = 1.0 + clip;
    let lo = 1.0 - clip;
    let mut surrogate = 0.0;
    let mut grad = vec![0.0; policy.param_len()];
    for (traj, &s) in batch.iter().zip(scores) {
        let a = s - shift;
        let lp_cur = log_prob(mdp, policy, traj)?;
        let lp_old = log_prob(mdp, snapshot, traj)?;
        let rho = (lp_cur - lp_old).exp();
        if !rho.is_finite() {
            return Err(Error::NonFinite("importance ratio".into()));
        }
        surrogate += inv_m * a * rho.min(rho.clamp(lo, hi));
        if rho <= hi {
            let coeff = inv_m * a * rho;
            for (h, &action) in traj.actions.iter().enumerate() {
                let offset = policy.row_offset(traj.prompt, &traj.actions[..h]);
                let dist = policy.distribution_at(offset);
                policy.accumulate_log_grad(&mut grad, offset, &dist, action, coeff);
            }
        }
    }
    if !surrogate.is_finite() {
        return Err(Error::NonFinite("clipped surrogate".into()));
    }
    Ok((surrogate, grad))
}

/// One row of the online trace, recorded after each iteration's updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OnlineTraceRow {
    pub t: usize,
    /// Dataset size after this iteration's collection.
    pub n_t: usize,
    pub j_student_rstar: Option<f64>,
    pub j_teacher_rstar: Option<f64>,
    pub gap_estimate: f64,
    pub loglik: f64,
    pub theta_norm: f64,
    pub sigma_logdet: f64,
    pub regret_cumulative: Option<f64>,
}

/// Final state, every per-iteration student and reward parameter, and the
/// trace.
#[derive(Debug, Clone)]
pub struct OnlineOutcome {
    pub policies: Vec<SoftmaxLinearPolicy>,
    pub thetas: Vec<Vec<f64>>,
    pub trace: Vec<OnlineTraceRow>,
    pub state: OnlineState,
}

pub(crate) fn run_online_eff(
    mdp: &TokenMdp,
    teacher: &dyn Policy,
    eff: &dyn EffectiveFeatures,
    config: &OnlineConfig,
    rstar: Option<&LinearReward>,
    spring: &SeedSpring,
) -> Result<OnlineOutcome> {
    config.validate()?;
    if config.labeling == Labeling::Oracle && rstar.is_none() {
        return Err(Error::MissingOracle);
    }
    let student = init_student(
        mdp,
        teacher,
        config.init,
        config.student_context,
        config.student_temperature,
        &spring.child("init", 0),
    )?;
    let dataset = PreferenceDataset::new(
        "teacher".into(),
        "student".into(),
        spring.seed_for("online-dataset", 0),
    );
    let mut state = OnlineState::new(
        dataset,
        student,
        eff.dim(mdp),
        config.bound,
        config.ridge,
    )?;
    let optimum = match rstar {
        Some(r) => Some(dp_solve(mdp, r, 0.0)?.value),
        None => None,
    };
    let j_teacher = match rstar {
        None => None,
        Some(r) => Some(match config.value_mode {
            ValueMode::Exact => exact_value(mdp, teacher, r)?,
            ValueMode::Mc { samples } => {
                mc_value(mdp, teacher, r, samples, &mut spring.stream("j-teacher"))?.mean
            }
        }),
    };
    let mut policies = Vec::with_capacity(config.iterations);
    let mut thetas = Vec::with_capacity(config.iterations);
    let mut trace = Vec::with_capacity(config.iterations);
    let mut regret_sum = 0.0;
    for t in 1..=config.iterations {
        state.snapshot = state.policy.clone();
        let mut collect_rng = spring.substream("collect", t as u64);
        let mut fresh = Vec::with_capacity(config.pref_batch);
        for _ in 0..config.pref_batch {
            fresh.push(gen_online_sample(
                mdp,
                teacher,
                &state.snapshot,
                t as i64,
                config.labeling,
                rstar,
                &mut collect_rng,
            )?);
        }
        let diffs = state.append_batch_eff(mdp, eff, fresh)?;
        for step in 0..config.reward_steps {
            let mut rng =
                spring.substream("reward-batch", (t * config.reward_steps + step) as u64);
            let batch = sample_pair_batch(
                mdp,
                teacher,
                &state.snapshot,
                config.opt_batch,
                &mut rng,
            )?;
            state.reward_step_eff(mdp, eff, &batch, config.beta, config.reward_lr)?;
        }
        for step in 0..config.policy_steps {
            let mut rng =
                spring.substream("policy-batch", (t * config.policy_steps + step) as u64);
            let mut batch = Vec::with_capacity(config.opt_batch);
            for _ in 0..config.opt_batch {
                let prompt = mdp.sample_prompt(&mut rng);
                batch.push(rollout(mdp, &state.snapshot, prompt, &mut rng)?);
            }
            let scores = batch
                .iter()
                .map(|traj| {
                    Ok(dot(
                        &state.theta,
                        &eff.traj_features(mdp, traj.prompt, &traj.actions)?,
                    ))
                })
                .collect::<Result<Vec<f64>>>()?;
            state.policy_clipped_step(
                mdp,
                &batch,
                &scores,
                config.clip,
                config.policy_lr,
                config.baseline,
            )?;
        }
        state.uncertainty_step_eff(
            mdp,
            teacher,
            eff,
            config.bonus_weight,
            config.policy_lr,
            config.value_mode,
            config.baseline,
            &mut spring.substream("bonus", t as u64),
        )?;
        state.covariance_update(&diffs)?;
        state.iteration = t;

        let mut trace_rng = spring.substream("trace", t as u64);
        let j_student = match rstar {
            None => None,
            Some(r) => Some(match config.value_mode {
                ValueMode::Exact => exact_value(mdp, &state.policy, r)?,
                ValueMode::Mc { samples } => {
                    mc_value(mdp, &state.policy, r, samples, &mut trace_rng)?.mean
                }
            }),
        };
        let phi_teacher =
            expected_features(mdp, teacher, eff, config.value_mode, &mut trace_rng)?;
        let phi_student =
            expected_features(mdp, &state.policy, eff, config.value_mode, &mut trace_rng)?;
        let gap_estimate = dot(&state.theta, &sub(&phi_teacher, &phi_student));
        let regret_cumulative = match (optimum, j_student) {
            (Some(star), Some(j)) => {
                regret_sum += star - j;
                Some(regret_sum)
            }
            _ => None,
        };
        let row = OnlineTraceRow {
            t,
            n_t: state.dataset.len(),
            j_student_rstar: j_student,
            j_teacher_rstar: j_teacher,
            gap_estimate,
            loglik: state.loglik(),
            theta_norm: norm2(&state.theta),
            sigma_logdet: state.sigma_logdet()?,
            regret_cumulative,
        };
        if !(row.gap_estimate.is_finite() && row.loglik.is_finite() && row.sigma_logdet.is_finite())
        {
            return Err(Error::NonFinite(format!("online trace at iteration {t}")));
        }
        policies.push(state.policy.clone());
        thetas.push(state.theta.clone());
        trace.push(row);
    }
    Ok(OnlineOutcome {
        policies,
        thetas,
        trace,
        state,
    })
}

/// Runs the online solver for the configured number of iterations.
///
/// `rstar` powers oracle labeling and the evaluation columns; the reward
/// updates never see it.
pub fn run_online(
    mdp: &TokenMdp,
    teacher: &dyn Policy,
    config: &OnlineConfig,
    rstar: Option<&LinearReward>,
    spring: &SeedSpring,
) -> Result<OnlineOutcome> {
    run_online_eff(mdp, teacher, &RewardFeatures, config, rstar, spring)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::MdpSpec;
    use crate::policy::{dp_optimal_policy, mc_score_gradient, teacher_policy};
    use crate::seed::SeedSpring;

    fn small_mdp() -> TokenMdp {
        MdpSpec {
            vocab_size: 3,
            horizon: 3,
            prompt_count: 2,
            prompt_distribution: None,
            discount: 1.0,
            feature_dim: 6,
            context_len: 1,
            feature_seed: 70,
            enumeration_cap: 1_000_000,
        }
        .build()
        .unwrap()
    }

    fn oracle(mdp: &TokenMdp, seed: u64) -> LinearReward {
        let spring = SeedSpring::new(seed);
        let mut rng = spring.stream("oracle");
        let theta: Vec<f64> = (0..mdp.feature_dim())
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let mut reward = LinearReward::new(theta, 2.0).unwrap();
        let scaled: Vec<f64> = reward.theta().iter().map(|x| 1.8 * x / reward.norm()).collect();
        reward.set_theta(scaled).unwrap();
        reward
    }

    fn quick_config() -> OnlineConfig {
        OnlineConfig {
            iterations: 5,
            pref_batch: 4,
            opt_batch: 8,
            reward_steps: 2,
            policy_steps: 2,
            init: StudentInit::Uniform,
            ..OnlineConfig::default()
        }
    }

    fn fresh_state(mdp: &TokenMdp) -> OnlineState {
        let student = SoftmaxLinearPolicy::uniform(mdp).unwrap();
        OnlineState::new(
            PreferenceDataset::new("teacher".into(), "student".into(), 0),
            student,
            mdp.feature_dim(),
            2.0,
            1e-2,
        )
        .unwrap()
    }

    #[test]
    fn dataset_grows_by_the_preference_batch_each_iteration() {
        let mdp = small_mdp();
        let rstar = oracle(&mdp, 1);
        let teacher = dp_optimal_policy(&mdp, &rstar).unwrap();
        let cfg = quick_config();
        let out = run_online(&mdp, &teacher, &cfg, Some(&rstar), &SeedSpring::new(2)).unwrap();
        assert_eq!(out.trace.len(), cfg.iterations);
        assert_eq!(out.policies.len(), cfg.iterations);
        for (i, row) in out.trace.iter().enumerate() {
            assert_eq!(row.t, i + 1);
            assert_eq!(row.n_t, (i + 1) * cfg.pref_batch);
        }
        assert_eq!(out.state.dataset.len(), cfg.iterations * cfg.pref_batch);
    }

    #[test]
    fn reward_step_without_likelihood_moves_along_the_batch_gap() {
        let mdp = small_mdp();
        let rstar = oracle(&mdp, 5);
        let teacher = dp_optimal_policy(&mdp, &rstar).unwrap();
        let mut state = fresh_state(&mdp);
        // A huge ball keeps the projection inactive.
        state.bound = 1e9;
        let spring = SeedSpring::new(6);
        let batch = sample_pair_batch(
            &mdp,
            &teacher,
            &state.snapshot.clone(),
            6,
            &mut spring.stream("batch"),
        )
        .unwrap();
        let lr = 0.3;
        state.reward_step(&mdp, &batch, 0.0, lr).unwrap();
        let mut expect = vec![0.0; mdp.feature_dim()];
        for (t0, t1) in &batch {
            for (e, (a, b)) in expect.iter_mut().zip(t0.features.iter().zip(&t1.features)) {
                *e += a - b;
            }
        }
        for (got, e) in state.theta().iter().zip(&expect) {
            assert!((got - lr * e).abs() <= 1e-12, "got {got}, expect {}", lr * e);
        }
    }

    #[test]
    fn unit_ratios_reduce_the_clipped_step_to_the_plain_score_gradient() {
        let mdp = small_mdp();
        let rstar = oracle(&mdp, 7);
        let teacher = dp_optimal_policy(&mdp, &rstar).unwrap();
        let mut state = fresh_state(&mdp);
        let spring = SeedSpring::new(8);
        let mut rng = spring.stream("batch");
        let mut batch = Vec::new();
        for _ in 0..10 {
            let prompt = mdp.sample_prompt(&mut rng);
            batch.push(rollout(&mdp, &teacher, prompt, &mut rng).unwrap());
        }
        let scores: Vec<f64> = batch
            .iter()
            .map(|t| rstar.traj_reward(&mdp, t).unwrap())
            .collect();
        let expect_grad = mc_score_gradient(&mdp, &state.policy, &batch, &scores, true).unwrap();
        let mut expect_policy = state.policy.clone();
        expect_policy.apply_step(&expect_grad, 0.4).unwrap();
        state
            .policy_clipped_step(&mdp, &batch, &scores, 0.2, 0.4, true)
            .unwrap();
        assert_eq!(state.policy.weights(), expect_policy.weights());
    }

    #[test]
    fn ratios_beyond_the_upper_clip_contribute_no_gradient() {
        let mdp = small_mdp();
        let mut state = fresh_state(&mdp);
        // Push the current policy far from the snapshot so every sampled
        // trajectory of action zero has a large ratio.
        for w in state.policy.weights_mut().iter_mut().step_by(3) {
            *w = 3.0;
        }
        let traj = mdp.make_trajectory(0, vec![0, 0, 0]).unwrap();
        let before = state.policy.weights().to_vec();
        let lp_cur = log_prob(&mdp, &state.policy, &traj).unwrap();
        let lp_old = log_prob(&mdp, &state.snapshot, &traj).unwrap();
        assert!((lp_cur - lp_old).exp() > 1.2);
        let surrogate = state
            .policy_clipped_step(&mdp, &[traj], &[2.0], 0.2, 0.5, false)
            .unwrap();
        assert!((surrogate - 2.0 * 1.2).abs() <= 1e-12);
        assert_eq!(state.policy.weights(), before.as_slice());
    }

    #[test]
    fn covariance_stays_above_the_ridge_floor() {
        let mdp = small_mdp();
        let rstar = oracle(&mdp, 9);
        let teacher = dp_optimal_policy(&mdp, &rstar).unwrap();
        let cfg = quick_config();
        let out = run_online(&mdp, &teacher, &cfg, Some(&rstar), &SeedSpring::new(10)).unwrap();
        let d = mdp.feature_dim();
        let floored = out.state.sigma() - DMatrix::<f64>::identity(d, d) * (0.5 * 1e-2);
        assert!(nalgebra::Cholesky::new(floored).is_some());
    }

    #[test]
    fn zero_bonus_weight_is_an_exact_no_op() {
        let mdp = small_mdp();
        let rstar = oracle(&mdp, 11);
        let teacher = dp_optimal_policy(&mdp, &rstar).unwrap();
        let mut state = fresh_state(&mdp);
        let before = state.policy.weights().to_vec();
        let spring = SeedSpring::new(12);
        let value = state
            .uncertainty_step(
                &mdp,
                &teacher,
                0.0,
                0.5,
                ValueMode::Exact,
                true,
                &mut spring.stream("bonus"),
            )
            .unwrap();
        assert_eq!(value, 0.0);
        assert_eq!(state.policy.weights(), before.as_slice());
    }

    #[test]
    fn matched_feature_expectations_leave_the_uncertainty_step_idle() {
        let mdp = small_mdp();
        let mut state = fresh_state(&mdp);
        let teacher = SoftmaxLinearPolicy::uniform(&mdp).unwrap();
        let before = state.policy.weights().to_vec();
        let spring = SeedSpring::new(13);
        let value = state
            .uncertainty_step(
                &mdp,
                &teacher,
                0.1,
                0.5,
                ValueMode::Exact,
                true,
                &mut spring.stream("bonus"),
            )
            .unwrap();
        assert!(value.abs() <= 1e-16, "disagreement {value}");
        let drift: f64 = state
            .policy
            .weights()
            .iter()
            .zip(&before)
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(drift <= 1e-12, "drift {drift}");
    }

    #[test]
    fn oracle_labeling_without_the_reward_is_refused() {
        let mdp = small_mdp();
        let rstar = oracle(&mdp, 14);
        let teacher = dp_optimal_policy(&mdp, &rstar).unwrap();
        let cfg = OnlineConfig {
            labeling: Labeling::Oracle,
            ..quick_config()
        };
        let err = run_online(&mdp, &teacher, &cfg, None, &SeedSpring::new(15));
        assert!(matches!(err, Err(Error::MissingOracle)));
    }

    #[test]
    fn online_runs_reproduce_bit_for_bit_from_the_same_spring() {
        let mdp = small_mdp();
        let rstar = oracle(&mdp, 16);
        let teacher = teacher_policy(&mdp, &rstar, 1.5).unwrap();
        let cfg = OnlineConfig {
            labeling: Labeling::Oracle,
            value_mode: ValueMode::Mc { samples: 16 },
            ..quick_config()
        };
        let a = run_online(&mdp, &teacher, &cfg, Some(&rstar), &SeedSpring::new(17)).unwrap();
        let b = run_online(&mdp, &teacher, &cfg, Some(&rstar), &SeedSpring::new(17)).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(
            a.state.policy.weights(),
            b.state.policy.weights()
        );
        assert_eq!(a.state.theta(), b.state.theta());
    }

    #[test]
    fn distillation_raises_the_student_value_over_iterations() {
        let mdp = small_mdp();
        let rstar = oracle(&mdp, 18);
        let teacher = dp_optimal_policy(&mdp, &rstar).unwrap();
        let cfg = OnlineConfig {
            iterations: 30,
            labeling: Labeling::Oracle,
            init: StudentInit::Uniform,
            ..OnlineConfig::default()
        };
        let out = run_online(&mdp, &teacher, &cfg, Some(&rstar), &SeedSpring::new(19)).unwrap();
        let first = out.trace.first().unwrap().j_student_rstar.unwrap();
        let last = out.trace.last().unwrap().j_student_rstar.unwrap();
        assert!(last > first + 0.05, "first {first}, last {last}");
        let regret = out.trace.last().unwrap().regret_cumulative.unwrap();
        assert!(regret.is_finite() && regret >= 0.0);
    }
}
