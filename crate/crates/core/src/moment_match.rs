//! Moment matching through Q-function classes.
//!
//! Any function `f(s, a)` over state-action pairs induces a per-step reward
//! `f(s, a) - discount * E_{a' ~ teacher(s')} f(s', a')` whose teacher
//! Q-function is `f` itself. Under that induced reward the performance
//! difference between teacher and student equals the discounted advantage
//! sum along student trajectories, so matching feature moments in the
//! induced space is the same saddle problem the reward-space solvers play.
//! With a zero discount and the MDP's own feature map the two coincide
//! update for update.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::engine::{effective_records, solve_saddle, InducedQFeatures, SaddleRow, ValueMode};
use crate::error::{Error, Result};
use crate::mdp::{StepFeatures, TokenMdp};
use crate::offline::{init_student, OfflineConfig};
use crate::online::{run_online_eff, OnlineConfig, OnlineOutcome};
use crate::policy::{for_each_trajectory, rollout, Policy, SoftmaxLinearPolicy};
use crate::preference::PreferenceDataset;
use crate::reward::LinearReward;
use crate::seed::SeedSpring;
use crate::vecmath::{dot, norm2, project_ball};

/// A function over (prompt, prefix, action) triples used as a Q-function
/// hypothesis.
pub trait QFunction {
    fn q_value(&self, mdp: &TokenMdp, prompt: u32, state: &[u32], action: u32) -> Result<f64>;
}

/// Explicit Q table over full prefixes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TabularQ {
    table: BTreeMap<(u32, Vec<u32>), Vec<f64>>,
}

impl TabularQ {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, prompt: u32, state: Vec<u32>, values: Vec<f64>) {
        self.table.insert((prompt, state), values);
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl QFunction for TabularQ {
    fn q_value(&self, _mdp: &TokenMdp, prompt: u32, state: &[u32], action: u32) -> Result<f64> {
        let values = self
            .table
            .get(&(prompt, state.to_vec()))
            .ok_or_else(|| Error::UnknownState(format!("prompt {prompt}, prefix {state:?}")))?;
        values.get(action as usize).copied().ok_or_else(|| {
            Error::UnknownState(format!("action {action} at prompt {prompt}, prefix {state:?}"))
        })
    }
}

/// Linear Q-function over its own step feature map.
#[derive(Debug, Clone)]
pub struct LinearQ {
    w: Vec<f64>,
    bound: f64,
    features: StepFeatures,
}

impl LinearQ {
    pub fn new(features: StepFeatures, w: Vec<f64>, bound: f64) -> Result<Self> {
        if !(bound.is_finite() && bound > 0.0) {
            return Err(Error::ConfigInvalid("bound must be positive".into()));
        }
        if w.len() != features.dim() {
            return Err(Error::DimensionMismatch(format!(
                "parameter has dimension {}, feature map has {}",
                w.len(),
                features.dim()
            )));
        }
        if w.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("q parameter".into()));
        }
        let mut w = w;
        project_ball(&mut w, bound);
        Ok(Self { w, bound, features })
    }

    /// Uses the MDP's own feature map.
    pub fn from_mdp(mdp: &TokenMdp, w: Vec<f64>, bound: f64) -> Result<Self> {
        Self::new(mdp.features().clone(), w, bound)
    }

    pub fn w(&self) -> &[f64] {
        &self.w
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn features(&self) -> &StepFeatures {
        &self.features
    }

    pub fn norm(&self) -> f64 {
        norm2(&self.w)
    }
}

impl QFunction for LinearQ {
    fn q_value(&self, _mdp: &TokenMdp, prompt: u32, state: &[u32], action: u32) -> Result<f64> {
        Ok(self.features.with_psi(prompt, state, action, |psi| dot(&self.w, psi)))
    }
}

/// Borrowed view used on the solver's hot path to avoid cloning the feature
/// table every round.
struct LinearQView<'a> {
    w: &'a [f64],
    features: &'a StepFeatures,
}

impl QFunction for LinearQView<'_> {
    fn q_value(&self, _mdp: &TokenMdp, prompt: u32, state: &[u32], action: u32) -> Result<f64> {
        Ok(self.features.with_psi(prompt, state, action, |psi| dot(self.w, psi)))
    }
}

/// Exact teacher Q-function under a reward, by backward induction over the
/// prefix tree. Values follow the local convention
/// `Q(s, a) = r(s, a) + discount * E_{a' ~ teacher(s')} Q(s', a')`
/// with no positional discount weighting.
pub fn q_teacher_exact(
    mdp: &TokenMdp,
    teacher: &dyn Policy,
    reward: &LinearReward,
) -> Result<TabularQ> {
    mdp.check_cap("q_teacher_exact")?;
    reward.check_dim(mdp)?;
    fn descend(
        mdp: &TokenMdp,
        teacher: &dyn Policy,
        reward: &LinearReward,
        prompt: u32,
        prefix: &mut Vec<u32>,
        out: &mut TabularQ,
    ) -> Result<Vec<f64>> {
        let vocab = mdp.vocab_size();
        let gamma = mdp.discount();
        let terminal = prefix.len() + 1 == mdp.horizon();
        let mut values = Vec::with_capacity(vocab as usize);
        for a in 0..vocab {
            let r = mdp
                .features()
                .with_psi(prompt, prefix, a, |psi| dot(reward.theta(), psi));
            if terminal {
                values.push(r);
                continue;
            }
            prefix.push(a);
            let next = descend(mdp, teacher, reward, prompt, prefix, out)?;
            let dist = teacher.action_distribution(mdp, prompt, prefix)?;
            prefix.pop();
            let cont: f64 = dist.iter().zip(&next).map(|(p, q)| p * q).sum();
            values.push(r + gamma * cont);
        }
        out.insert(prompt, prefix.clone(), values.clone());
        Ok(values)
    }
    let mut out = TabularQ::new();
    for prompt in 0..mdp.prompt_count() {
        let mut prefix = Vec::with_capacity(mdp.horizon());
        descend(mdp, teacher, reward, prompt, &mut prefix, &mut out)?;
    }
    Ok(out)
}

/// Per-step reward induced by a Q-function hypothesis:
/// `f(s, a) - discount * E_{a' ~ teacher(s')} f(s', a')`, with the
/// correction dropped at the last position.
pub fn induced_reward(
    f: &dyn QFunction,
    mdp: &TokenMdp,
    teacher: &dyn Policy,
    prompt: u32,
    state: &[u32],
    action: u32,
) -> Result<f64> {
    let base = f.q_value(mdp, prompt, state, action)?;
    if state.len() + 1 >= mdp.horizon() || mdp.discount() == 0.0 {
        return Ok(base);
    }
    let mut successor = state.to_vec();
    successor.push(action);
    let dist = teacher.action_distribution(mdp, prompt, &successor)?;
    let mut cont = 0.0;
    for (a, &p) in dist.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        cont += p * f.q_value(mdp, prompt, &successor, a as u32)?;
    }
    Ok(base - mdp.discount() * cont)
}

fn trajectory_advantage_sum(
    mdp: &TokenMdp,
    teacher: &dyn Policy,
    f: &dyn QFunction,
    prompt: u32,
    actions: &[u32],
) -> Result<f64> {
    let mut total = 0.0;
    let mut weight = 1.0;
    for (h, &a) in actions.iter().enumerate() {
        let dist = teacher.action_distribution(mdp, prompt, &actions[..h])?;
        let mut teacher_value = 0.0;
        for (b, &p) in dist.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            teacher_value += p * f.q_value(mdp, prompt, &actions[..h], b as u32)?;
        }
        total += weight * (teacher_value - f.q_value(mdp, prompt, &actions[..h], a)?);
        weight *= mdp.discount();
    }
    Ok(total)
}

/// Discounted advantage sum along student trajectories:
/// `E_{traj ~ student} sum_h discount^h (E_{a ~ teacher} f(s_h, a) - f(s_h, a_h))`.
///
/// For any `f` this equals the teacher-minus-student performance difference
/// under the reward `f` induces.
pub fn pdl_gap(
    mdp: &TokenMdp,
    teacher: &dyn Policy,
    student: &dyn Policy,
    f: &dyn QFunction,
    mode: ValueMode,
    rng: &mut impl Rng,
) -> Result<f64> {
    match mode {
        ValueMode::Exact => {
            let mut total = 0.0;
            for prompt in 0..mdp.prompt_count() {
                let weight = mdp.prompt_distribution()[prompt as usize];
                if weight == 0.0 {
                    continue;
                }
                let mut prompt_total = 0.0;
                for_each_trajectory(mdp, student, prompt, &mut |prob, actions| {
                    prompt_total +=
                        prob * trajectory_advantage_sum(mdp, teacher, f, prompt, actions)?;
                    Ok(())
                })?;
                total += weight * prompt_total;
            }
            Ok(total)
        }
        ValueMode::Mc { samples } => {
            if samples == 0 {
                return Err(Error::ConfigInvalid(
                    "monte carlo mode needs a positive sample count".into(),
                ));
            }
            let mut total = 0.0;
            for _ in 0..samples {
                let prompt = mdp.sample_prompt(rng);
                let traj = rollout(mdp, student, prompt, rng)?;
                total += trajectory_advantage_sum(mdp, teacher, f, traj.prompt, &traj.actions)?;
            }
            Ok(total / samples as f64)
        }
    }
}

/// Which feature map the Q class uses; both fields defaulting leaves it on
/// the MDP's own map, making the zero-discount solver coincide with the
/// reward-space one exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QClassSpec {
    #[serde(default)]
    pub dim: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl QClassSpec {
    fn build(&self, mdp: &TokenMdp) -> Result<StepFeatures> {
        match (self.dim, self.seed) {
            (None, None) => Ok(mdp.features().clone()),
            (dim, seed) => mdp.custom_features(
                dim.unwrap_or(mdp.feature_dim()),
                seed.unwrap_or_else(|| mdp.features().seed()),
            ),
        }
    }
}

/// Offline or online optimization of the moment-matching objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MmMode {
    Offline(OfflineConfig),
    Online(OnlineConfig),
}

/// Moment-matching solver knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MmConfig {
    #[serde(default)]
    pub q_class: QClassSpec,
    pub mode: MmMode,
}

/// One row of the offline moment-matching trace. `gap` is the saddle value
/// in the induced feature space and `pdl` recomputes it definitionally from
/// student trajectories, so the two agree up to numerical error in exact
/// mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmTraceRow {
    pub round: usize,
    pub gap: f64,
    pub loglik: f64,
    pub w_norm: f64,
    pub j_student_rstar: Option<f64>,
    pub pdl: f64,
}

/// Outcome of a moment-matching run.
#[derive(Debug, Clone)]
pub enum MmOutcome {
    Offline {
        policy: SoftmaxLinearPolicy,
        q: LinearQ,
        trace: Vec<MmTraceRow>,
    },
    Online {
        outcome: OnlineOutcome,
        q: LinearQ,
        /// Definitional advantage-sum gap per iteration.
        pdl: Vec<f64>,
    },
}

impl MmOutcome {
    pub fn policy(&self) -> &SoftmaxLinearPolicy {
        match self {
            MmOutcome::Offline { policy, .. } => policy,
            MmOutcome::Online { outcome, .. } => &outcome.state.policy,
        }
    }

    pub fn q(&self) -> &LinearQ {
        match self {
            MmOutcome::Offline { q, .. } | MmOutcome::Online { q, .. } => q,
        }
    }
}

/// Runs the moment-matching solver. Offline mode consumes a fixed dataset;
/// online mode collects its own and follows the online loop step for step,
/// with the covariance and exploration defined over induced Q features.
pub fn solve_mm(
    mdp: &TokenMdp,
    teacher: &dyn Policy,
    dataset: Option<&PreferenceDataset>,
    config: &MmConfig,
    rstar: Option<&LinearReward>,
    spring: &SeedSpring,
) -> Result<MmOutcome> {
    let qf = config.q_class.build(mdp)?;
    let eff = InducedQFeatures {
        features: &qf,
        teacher,
    };
    match &config.mode {
        MmMode::Offline(cfg) => {
            cfg.validate()?;
            let dataset = dataset.ok_or(Error::EmptyDataset)?;
            if dataset.is_empty() && cfg.beta != 0.0 {
                return Err(Error::EmptyDataset);
            }
            let records = effective_records(mdp, dataset, &eff)?;
            let student = init_student(
                mdp,
                teacher,
                cfg.init,
                cfg.student_context,
                cfg.student_temperature,
                &spring.child("init", 0),
            )?;
            let pdl_spring = spring.child("pdl", 0);
            let mut observer = |round: usize, w: &[f64], policy: &SoftmaxLinearPolicy| {
                let view = LinearQView {
                    w,
                    features: &qf,
                };
                pdl_gap(
                    mdp,
                    teacher,
                    policy,
                    &view,
                    cfg.value_mode,
                    &mut pdl_spring.substream("round", round as u64),
                )
            };
            let (policy, w, rows) = solve_saddle(
                mdp,
                teacher,
                &eff,
                &records,
                student,
                &cfg.saddle(),
                rstar,
                &spring.child("saddle", 0),
                Some(&mut observer),
            )?;
            let trace = rows
                .into_iter()
                .map(|r: SaddleRow| MmTraceRow {
                    round: r.round,
                    gap: r.gap,
                    loglik: r.loglik,
                    w_norm: r.w_norm,
                    j_student_rstar: r.j_student_rstar,
                    pdl: r.extra.unwrap_or(f64::NAN),
                })
                .collect();
            let q = LinearQ::new(qf, w, cfg.bound)?;
            Ok(MmOutcome::Offline { policy, q, trace })
        }
        MmMode::Online(cfg) => {
            let outcome = run_online_eff(mdp, teacher, &eff, cfg, rstar, spring)?;
            let pdl_spring = spring.child("pdl", 0);
            let mut pdl = Vec::with_capacity(outcome.policies.len());
            for (i, (policy, w)) in outcome.policies.iter().zip(&outcome.thetas).enumerate() {
                let view = LinearQView {
                    w,
                    features: &qf,
                };
                pdl.push(pdl_gap(
                    mdp,
                    teacher,
                    policy,
                    &view,
                    cfg.value_mode,
                    &mut pdl_spring.substream("iteration", i as u64),
                )?);
            }
            let q = LinearQ::new(qf, outcome.state.theta().to_vec(), cfg.bound)?;
            Ok(MmOutcome::Online { outcome, q, pdl })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::MdpSpec;
    use crate::offline::{solve_offline, StudentInit};
    use crate::online::run_online;
    use crate::policy::{dp_optimal_policy, exact_value, teacher_policy};
    use crate::preference::{gen_offline, Annotators, Labeling};
    use crate::seed::SeedSpring;

    fn mdp_with_discount(discount: f64, seed: u64) -> TokenMdp {
        MdpSpec {
            vocab_size: 3,
            horizon: 3,
            prompt_count: 2,
            prompt_distribution: None,
            discount,
            feature_dim: 6,
            context_len: 1,
            feature_seed: seed,
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

    fn random_softmax(mdp: &TokenMdp, seed: u64) -> SoftmaxLinearPolicy {
        let mut policy = SoftmaxLinearPolicy::zeros(mdp, 1, 1.0).unwrap();
        let spring = SeedSpring::new(seed);
        let mut rng = spring.stream("weights");
        for w in policy.weights_mut() {
            *w = rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
        policy
    }

    fn sample_dataset(mdp: &TokenMdp, rstar: &LinearReward, n: usize, seed: u64) -> PreferenceDataset {
        let spring = SeedSpring::new(seed);
        let teacher = dp_optimal_policy(mdp, rstar).unwrap();
        let uniform = SoftmaxLinearPolicy::uniform(mdp).unwrap();
        gen_offline(
            mdp,
            &teacher,
            &uniform,
            rstar,
            n,
            &mut spring.stream("dataset"),
            Annotators::default(),
        )
        .unwrap()
    }

    #[test]
    fn teacher_q_inverts_back_to_the_generating_reward() {
        let mdp = mdp_with_discount(0.9, 81);
        let rstar = oracle(&mdp, 82);
        let teacher = teacher_policy(&mdp, &rstar, 1.3).unwrap();
        let q = q_teacher_exact(&mdp, &teacher, &rstar).unwrap();
        let mut worst: f64 = 0.0;
        for prompt in 0..mdp.prompt_count() {
            let mut stack = vec![Vec::new()];
            while let Some(prefix) = stack.pop() {
                for a in 0..mdp.vocab_size() {
                    let r = induced_reward(&q, &mdp, &teacher, prompt, &prefix, a).unwrap();
                    let expect = mdp
                        .features()
                        .with_psi(prompt, &prefix, a, |psi| dot(rstar.theta(), psi));
                    worst = worst.max((r - expect).abs());
                }
                if prefix.len() + 1 < mdp.horizon() {
                    for a in 0..mdp.vocab_size() {
                        let mut next = prefix.clone();
                        next.push(a);
                        stack.push(next);
                    }
                }
            }
        }
        assert!(worst <= 1e-10, "worst inversion error {worst}");
    }

    #[test]
    fn advantage_sum_equals_the_value_difference_for_the_teacher_q() {
        for trial in 0..20 {
            let mdp = mdp_with_discount(if trial % 2 == 0 { 1.0 } else { 0.7 }, 90 + trial);
            let rstar = oracle(&mdp, 190 + trial);
            let teacher = teacher_policy(&mdp, &rstar, 1.1).unwrap();
            let student = random_softmax(&mdp, 290 + trial);
            let q = q_teacher_exact(&mdp, &teacher, &rstar).unwrap();
            let spring = SeedSpring::new(390 + trial);
            let lhs = pdl_gap(
                &mdp,
                &teacher,
                &student,
                &q,
                ValueMode::Exact,
                &mut spring.stream("unused"),
            )
            .unwrap();
            let rhs = exact_value(&mdp, &teacher, &rstar).unwrap()
                - exact_value(&mdp, &student, &rstar).unwrap();
            assert!((lhs - rhs).abs() <= 1e-8, "trial {trial}: lhs {lhs}, rhs {rhs}");
        }
    }

    #[test]
    fn advantage_sum_matches_induced_reward_values_for_arbitrary_q() {
        let mdp = mdp_with_discount(0.85, 101);
        let teacher = teacher_policy(&mdp, &oracle(&mdp, 102), 1.4).unwrap();
        let student = random_softmax(&mdp, 103);
        let qf = mdp.custom_features(4, 999).unwrap();
        let spring = SeedSpring::new(104);
        let mut rng = spring.stream("w");
        let w: Vec<f64> = (0..4).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
        let q = LinearQ::new(qf, w, 5.0).unwrap();
        let lhs = pdl_gap(&mdp, &teacher, &student, &q, ValueMode::Exact, &mut rng).unwrap();

        let value_under_induced = |policy: &dyn Policy| -> f64 {
            let mut total = 0.0;
            for prompt in 0..mdp.prompt_count() {
                let weight = mdp.prompt_distribution()[prompt as usize];
                let mut prompt_total = 0.0;
                for_each_trajectory(&mdp, policy, prompt, &mut |prob, actions| {
                    let mut ret = 0.0;
                    let mut disc = 1.0;
                    for (h, &a) in actions.iter().enumerate() {
                        ret += disc
                            * induced_reward(&q, &mdp, &teacher, prompt, &actions[..h], a)?;
                        disc *= mdp.discount();
                    }
                    prompt_total += prob * ret;
                    Ok(())
                })
                .unwrap();
                total += weight * prompt_total;
            }
            total
        };
        let rhs = value_under_induced(&teacher) - value_under_induced(&student);
        assert!((lhs - rhs).abs() <= 1e-9, "lhs {lhs}, rhs {rhs}");
    }

    #[test]
    fn tabular_q_rejects_states_it_never_saw() {
        let mdp = mdp_with_discount(1.0, 111);
        let q = TabularQ::new();
        let err = q.q_value(&mdp, 0, &[0], 0);
        assert!(matches!(err, Err(Error::UnknownState(_))));
    }

    #[test]
    fn zero_discount_offline_run_coincides_with_the_reward_space_solver() {
        let mdp = mdp_with_discount(0.0, 121);
        let rstar = oracle(&mdp, 122);
        let teacher = teacher_policy(&mdp, &rstar, 1.2).unwrap();
        let dataset = sample_dataset(&mdp, &rstar, 80, 123);
        let base = OfflineConfig {
            rounds: 8,
            reward_steps: 6,
            policy_steps: 2,
            init: StudentInit::default(),
            ..OfflineConfig::default()
        };
        let plain = solve_offline(&mdp, &teacher, &dataset, &base, Some(&rstar), &SeedSpring::new(124)).unwrap();
        let mm_cfg = MmConfig {
            q_class: QClassSpec::default(),
            mode: MmMode::Offline(base),
        };
        let mm = solve_mm(&mdp, &teacher, Some(&dataset), &mm_cfg, Some(&rstar), &SeedSpring::new(124)).unwrap();
        let MmOutcome::Offline { policy, q, trace } = mm else {
            panic!("offline mode returns an offline outcome");
        };
        assert_eq!(policy.weights(), plain.policy.weights());
        assert_eq!(q.w(), plain.reward.theta());
        assert_eq!(trace.len(), plain.trace.len());
        for (m, p) in trace.iter().zip(&plain.trace) {
            assert_eq!(m.gap, p.gap);
            assert_eq!(m.loglik, p.loglik);
            assert_eq!(m.w_norm, p.theta_norm);
            assert_eq!(m.j_student_rstar, p.j_student_rstar);
        }
    }

    #[test]
    fn zero_discount_online_run_coincides_with_the_reward_space_solver() {
        let mdp = mdp_with_discount(0.0, 131);
        let rstar = oracle(&mdp, 132);
        let teacher = teacher_policy(&mdp, &rstar, 1.2).unwrap();
        let base = OnlineConfig {
            iterations: 6,
            pref_batch: 4,
            opt_batch: 8,
            reward_steps: 2,
            policy_steps: 2,
            labeling: Labeling::Oracle,
            init: StudentInit::Uniform,
            ..OnlineConfig::default()
        };
        let plain = run_online(&mdp, &teacher, &base, Some(&rstar), &SeedSpring::new(133)).unwrap();
        let mm_cfg = MmConfig {
            q_class: QClassSpec::default(),
            mode: MmMode::Online(base),
        };
        let mm = solve_mm(&mdp, &teacher, None, &mm_cfg, Some(&rstar), &SeedSpring::new(133)).unwrap();
        let MmOutcome::Online { outcome, q, pdl } = mm else {
            panic!("online mode returns an online outcome");
        };
        assert_eq!(outcome.trace, plain.trace);
        assert_eq!(q.w(), plain.state.theta());
        assert_eq!(
            outcome.state.policy.weights(),
            plain.state.policy.weights()
        );
        assert_eq!(pdl.len(), plain.trace.len());
    }

    #[test]
    fn saddle_gap_and_definitional_gap_tell_the_same_story_each_round() {
        let mdp = mdp_with_discount(1.0, 141);
        let rstar = oracle(&mdp, 142);
        let teacher = teacher_policy(&mdp, &rstar, 1.5).unwrap();
        let dataset = sample_dataset(&mdp, &rstar, 60, 143);
        let cfg = MmConfig {
            q_class: QClassSpec {
                dim: Some(5),
                seed: Some(77),
            },
            mode: MmMode::Offline(OfflineConfig {
                rounds: 10,
                reward_steps: 8,
                policy_steps: 3,
                init: StudentInit::Uniform,
                ..OfflineConfig::default()
            }),
        };
        let out = solve_mm(&mdp, &teacher, Some(&dataset), &cfg, Some(&rstar), &SeedSpring::new(144)).unwrap();
        let MmOutcome::Offline { trace, q, .. } = out else {
            panic!("offline mode returns an offline outcome");
        };
        assert_eq!(q.features().dim(), 5);
        for row in &trace {
            assert!(
                (row.gap - row.pdl).abs() <= 1e-8,
                "round {}: saddle {} vs definitional {}",
                row.round,
                row.gap,
                row.pdl
            );
        }
    }

    #[test]
    fn mm_runs_reproduce_bit_for_bit_from_the_same_spring() {
        let mdp = mdp_with_discount(0.95, 151);
        let rstar = oracle(&mdp, 152);
        let teacher = teacher_policy(&mdp, &rstar, 1.2).unwrap();
        let dataset = sample_dataset(&mdp, &rstar, 50, 153);
        let cfg = MmConfig {
            q_class: QClassSpec::default(),
            mode: MmMode::Offline(OfflineConfig {
                rounds: 5,
                reward_steps: 5,
                policy_steps: 2,
                value_mode: ValueMode::Mc { samples: 16 },
                init: StudentInit::default(),
                ..OfflineConfig::default()
            }),
        };
        let a = solve_mm(&mdp, &teacher, Some(&dataset), &cfg, Some(&rstar), &SeedSpring::new(154)).unwrap();
        let b = solve_mm(&mdp, &teacher, Some(&dataset), &cfg, Some(&rstar), &SeedSpring::new(154)).unwrap();
        let (MmOutcome::Offline { policy: pa, trace: ta, .. }, MmOutcome::Offline { policy: pb, trace: tb, .. }) =
            (a, b)
        else {
            panic!("offline mode returns offline outcomes");
        };
        assert_eq!(pa.weights(), pb.weights());
        assert_eq!(ta, tb);
    }
}
