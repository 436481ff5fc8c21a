//! Shared machinery for the adversarial distillation solvers.
//!
//! Every solver in this crate plays the same game: an inner player maximizes
//! a linear functional of trajectory features plus a scaled log likelihood
//! over a parameter ball, and an outer player updates a softmax-linear
//! student against the induced reward. The solvers differ only in which
//! effective feature map they use, so that map is a trait and the loops live
//! here once.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{StepFeatures, TokenMdp, Trajectory};
use crate::optim::{projected_ascent, AscentOpts};
use crate::policy::{
    exact_score_gradient, exact_value, for_each_trajectory, mc_score_gradient, mc_value, rollout,
    Policy, SoftmaxLinearPolicy,
};
use crate::preference::PreferenceDataset;
use crate::reward::{records_loglik, records_loglik_grad, LinearReward};
use crate::vecmath::{add_scaled, dot, norm2, sub};

/// Whether expectations are computed by exact enumeration or Monte Carlo.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueMode {
    Exact,
    Mc { samples: usize },
}

/// Trajectory features as seen by one solver's inner player.
pub(crate) trait EffectiveFeatures {
    fn dim(&self, mdp: &TokenMdp) -> usize;
    fn traj_features(&self, mdp: &TokenMdp, prompt: u32, actions: &[u32]) -> Result<Vec<f64>>;
}

/// The reward model's own features: the MDP trajectory features.
pub(crate) struct RewardFeatures;

impl EffectiveFeatures for RewardFeatures {
    fn dim(&self, mdp: &TokenMdp) -> usize {
        mdp.feature_dim()
    }

    fn traj_features(&self, mdp: &TokenMdp, prompt: u32, actions: &[u32]) -> Result<Vec<f64>> {
        mdp.trajectory_features(prompt, actions)
    }
}

/// Features of the reward induced by a linear Q function:
/// `f(s_h, a_h) - discount * E_{a' ~ teacher(s_{h+1})} f(s_{h+1}, a')`
/// accumulated with the trajectory's discount weights.
pub(crate) struct InducedQFeatures<'a> {
    pub features: &'a StepFeatures,
    pub teacher: &'a dyn Policy,
}

impl EffectiveFeatures for InducedQFeatures<'_> {
    fn dim(&self, _mdp: &TokenMdp) -> usize {
        self.features.dim()
    }

    fn traj_features(&self, mdp: &TokenMdp, prompt: u32, actions: &[u32]) -> Result<Vec<f64>> {
        if actions.len() != mdp.horizon() {
            return Err(Error::MalformedTrajectory(format!(
                "trajectory length {} vs horizon {}",
                actions.len(),
                mdp.horizon()
            )));
        }
        let gamma = mdp.discount();
        let mut acc = vec![0.0; self.features.dim()];
        let mut weight = 1.0;
        for (h, &a) in actions.iter().enumerate() {
            self.features.with_psi(prompt, &actions[..h], a, |psi| {
                for (x, p) in acc.iter_mut().zip(psi) {
                    *x += weight * p;
                }
            });
            let terminal = h + 1 == mdp.horizon();
            if gamma != 0.0 && !terminal {
                let successor = &actions[..h + 1];
                let dist = self.teacher.action_distribution(mdp, prompt, successor)?;
                for (next_a, &p) in dist.iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    self.features
                        .with_psi(prompt, successor, next_a as u32, |psi| {
                            let c = -weight * gamma * p;
                            for (x, q) in acc.iter_mut().zip(psi) {
                                *x += c * q;
                            }
                        });
                }
            }
            weight *= gamma;
        }
        Ok(acc)
    }
}

/// Expected effective features of the policy under the prompt distribution.
pub(crate) fn expected_features(
    mdp: &TokenMdp,
    policy: &dyn Policy,
    eff: &dyn EffectiveFeatures,
    mode: ValueMode,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    match mode {
        ValueMode::Exact => {
            let mut acc = vec![0.0; eff.dim(mdp)];
            for prompt in 0..mdp.prompt_count() {
                let weight = mdp.prompt_distribution()[prompt as usize];
                if weight == 0.0 {
                    continue;
                }
                for_each_trajectory(mdp, policy, prompt, &mut |prob, actions| {
                    let phi = eff.traj_features(mdp, prompt, actions)?;
                    add_scaled(&mut acc, &phi, weight * prob);
                    Ok(())
                })?;
            }
            Ok(acc)
        }
        ValueMode::Mc { samples } => {
            if samples == 0 {
                return Err(Error::ConfigInvalid(
                    "monte carlo mode needs a positive sample count".into(),
                ));
            }
            let mut acc = vec![0.0; eff.dim(mdp)];
            for _ in 0..samples {
                let prompt = mdp.sample_prompt(rng);
                let traj = rollout(mdp, policy, prompt, rng)?;
                let phi = eff.traj_features(mdp, traj.prompt, &traj.actions)?;
                add_scaled(&mut acc, &phi, 1.0);
            }
            for x in acc.iter_mut() {
                *x /= samples as f64;
            }
            Ok(acc)
        }
    }
}

/// Per-sample effective feature differences and labels.
pub(crate) fn effective_records(
    mdp: &TokenMdp,
    dataset: &PreferenceDataset,
    eff: &dyn EffectiveFeatures,
) -> Result<Vec<(Vec<f64>, u8)>> {
    let mut records = Vec::with_capacity(dataset.len());
    for sample in dataset.samples() {
        let f0 = eff.traj_features(mdp, sample.traj0.prompt, &sample.traj0.actions)?;
        let f1 = eff.traj_features(mdp, sample.traj1.prompt, &sample.traj1.actions)?;
        records.push((sub(&f0, &f1), sample.label));
    }
    Ok(records)
}

/// Samples `m` prompt-matched (teacher, student) trajectory pairs.
pub(crate) fn sample_pair_batch(
    mdp: &TokenMdp,
    teacher: &dyn Policy,
    student: &dyn Policy,
    m: usize,
    rng: &mut impl Rng,
) -> Result<Vec<(Trajectory, Trajectory)>> {
    let mut out = Vec::with_capacity(m);
    for _ in 0..m {
        let prompt = mdp.sample_prompt(rng);
        let t0 = rollout(mdp, teacher, prompt, rng)?;
        let t1 = rollout(mdp, student, prompt, rng)?;
        out.push((t0, t1));
    }
    Ok(out)
}

/// One round of the inner maximization: `steps` projected ascent iterations
/// on `w . direction + beta * loglik(w)`, warm-started at the given `w`.
pub(crate) fn inner_ascent(
    w: Vec<f64>,
    bound: f64,
    direction: &[f64],
    beta: f64,
    records: &[(Vec<f64>, u8)],
    steps: usize,
    init_step: f64,
) -> Result<(Vec<f64>, f64)> {
    let opts = AscentOpts {
        max_iters: steps,
        grad_tol: 1e-12,
        init_step,
        ..AscentOpts::default()
    };
    let f = |x: &[f64]| {
        let mut v = dot(x, direction);
        if beta != 0.0 {
            v += beta * records_loglik(x, records);
        }
        v
    };
    let g = |x: &[f64]| {
        let mut grad = direction.to_vec();
        if beta != 0.0 {
            let lg = records_loglik_grad(x, records);
            add_scaled(&mut grad, &lg, beta);
        }
        grad
    };
    let (w, report) = projected_ascent(w, bound, f, g, &opts)?;
    Ok((w, report.value))
}

/// One policy improvement step: plain score-function ascent on the expected
/// effective score `w . phi_eff`, exact or Monte Carlo.
pub(crate) fn policy_ascent_step(
    mdp: &TokenMdp,
    student: &mut SoftmaxLinearPolicy,
    eff: &dyn EffectiveFeatures,
    w: &[f64],
    lr: f64,
    mode: ValueMode,
    baseline: bool,
    rng: &mut impl Rng,
) -> Result<()> {
    let grad = match mode {
        ValueMode::Exact => {
            let mut score = |prompt: u32, actions: &[u32]| -> Result<f64> {
                Ok(dot(w, &eff.traj_features(mdp, prompt, actions)?))
            };
            exact_score_gradient(mdp, student, &mut score)?
        }
        ValueMode::Mc { samples } => {
            let mut batch = Vec::with_capacity(samples);
            for _ in 0..samples {
                let prompt = mdp.sample_prompt(rng);
                batch.push(rollout(mdp, &*student, prompt, rng)?);
            }
            let scores = batch
                .iter()
                .map(|t| Ok(dot(w, &eff.traj_features(mdp, t.prompt, &t.actions)?)))
                .collect::<Result<Vec<f64>>>()?;
            mc_score_gradient(mdp, student, &batch, &scores, baseline)?
        }
    };
    student.apply_step(&grad, lr)
}

/// Knobs of the offline saddle loop, shared across feature maps.
#[derive(Debug, Clone, Copy)]
pub(crate) struct SaddleConfig {
    pub rounds: usize,
    pub reward_steps: usize,
    pub policy_steps: usize,
    pub beta: f64,
    pub bound: f64,
    pub reward_step_init: f64,
    pub policy_lr: f64,
    pub value_mode: ValueMode,
    pub baseline: bool,
}

/// One trace row of the offline saddle loop.
#[derive(Debug, Clone, Copy)]
pub(crate) struct SaddleRow {
    pub round: usize,
    pub gap: f64,
    pub loglik: f64,
    pub w_norm: f64,
    pub j_student_rstar: Option<f64>,
    /// Solver-specific extra column, e.g. the definitional performance
    /// difference for the moment-matching solver.
    pub extra: Option<f64>,
}

/// Observer invoked once per round with the current inner parameter and
/// student, supplying the trace's extra column.
pub(crate) type RoundObserver<'a> =
    &'a mut dyn FnMut(usize, &[f64], &SoftmaxLinearPolicy) -> Result<f64>;

/// Alternating best-response loop. Per round: the inner player takes
/// `reward_steps` ascent steps against the student's current feature
/// expectation, then the student takes `policy_steps` score-function steps
/// against the inner player's parameter, then the trace row is recorded at
/// the round's final iterates.
pub(crate) fn solve_saddle(
    mdp: &TokenMdp,
    teacher: &dyn Policy,
    eff: &dyn EffectiveFeatures,
    records: &[(Vec<f64>, u8)],
    mut student: SoftmaxLinearPolicy,
    cfg: &SaddleConfig,
    rstar: Option<&LinearReward>,
    spring: &crate::seed::SeedSpring,
    mut observer: Option<RoundObserver<'_>>,
) -> Result<(SoftmaxLinearPolicy, Vec<f64>, Vec<SaddleRow>)> {
    let dim = eff.dim(mdp);
    let mut w = vec![0.0; dim];
    let phi_teacher = expected_features(
        mdp,
        teacher,
        eff,
        cfg.value_mode,
        &mut spring.stream("saddle-phi-teacher"),
    )?;
    let mut phi_student = expected_features(
        mdp,
        &student,
        eff,
        cfg.value_mode,
        &mut spring.stream("saddle-phi-student-init"),
    )?;
    let mut trace = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        let direction = sub(&phi_teacher, &phi_student);
        let (w_next, _) = inner_ascent(
            w,
            cfg.bound,
            &direction,
            cfg.beta,
            records,
            cfg.reward_steps,
            cfg.reward_step_init,
        )?;
        w = w_next;
        for step in 0..cfg.policy_steps {
            let mut rng = spring.substream("saddle-policy", (round * cfg.policy_steps + step) as u64);
            policy_ascent_step(
                mdp,
                &mut student,
                eff,
                &w,
                cfg.policy_lr,
                cfg.value_mode,
                cfg.baseline,
                &mut rng,
            )?;
        }
        phi_student = expected_features(
            mdp,
            &student,
            eff,
            cfg.value_mode,
            &mut spring.substream("saddle-phi-student", round as u64),
        )?;
        let gap = dot(&w, &sub(&phi_teacher, &phi_student));
        let ll = records_loglik(&w, records);
        if !gap.is_finite() || !ll.is_finite() {
            return Err(Error::NonFinite(format!("saddle trace at round {round}")));
        }
        let j_student_rstar = match rstar {
            None => None,
            Some(r) => Some(match cfg.value_mode {
                ValueMode::Exact => exact_value(mdp, &student, r)?,
                ValueMode::Mc { samples } => {
                    mc_value(
                        mdp,
                        &student,
                        r,
                        samples,
                        &mut spring.substream("saddle-j-eval", round as u64),
                    )?
                    .mean
                }
            }),
        };
        let extra = match observer.as_mut() {
            None => None,
            Some(obs) => Some(obs(round, &w, &student)?),
        };
        trace.push(SaddleRow {
            round,
            gap,
            loglik: ll,
            w_norm: norm2(&w),
            j_student_rstar,
            extra,
        });
    }
    Ok((student, w, trace))
}
