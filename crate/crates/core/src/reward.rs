//! Linear trajectory rewards and the Bradley-Terry preference model.
//!
//! A reward is `theta . phi(x, trajectory)` with `theta` confined to a
//! Euclidean ball. Preference probabilities come from the logistic of the
//! reward gap; the gap is clamped to [-30, 30] before the logistic for
//! numerical safety, which is inactive for any ball radius below 15 because
//! trajectory features have norm at most one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{TokenMdp, Trajectory};
use crate::optim::{projected_ascent, AscentOpts};
use crate::preference::PreferenceDataset;
use crate::vecmath::{add_scaled, dot, norm2, project_ball, sub};

/// Clamp applied to reward gaps before the logistic.
pub const GAP_CLAMP: f64 = 30.0;

pub(crate) fn clamp_gap(gap: f64) -> f64 {
    gap.clamp(-GAP_CLAMP, GAP_CLAMP)
}

/// Numerically stable logistic function.
pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `log(sigmoid(z))`.
pub(crate) fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

/// Preference probability for label 1 given the clamped reward gap.
pub(crate) fn pref_prob(gap: f64) -> f64 {
    sigmoid(clamp_gap(gap))
}

/// Log probability of a binary label given the clamped reward gap.
pub(crate) fn log_pref_prob(gap: f64, label: u8) -> f64 {
    let g = clamp_gap(gap);
    if label == 1 {
        log_sigmoid(g)
    } else {
        log_sigmoid(-g)
    }
}

/// Linear reward model with its ball radius; the parameter is projected back
/// onto the ball after every construction and update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearReward {
    theta: Vec<f64>,
    bound: f64,
}

impl LinearReward {
    pub fn new(theta: Vec<f64>, bound: f64) -> Result<Self> {
        if !(bound > 0.0) || !bound.is_finite() {
            return Err(Error::ConfigInvalid(format!(
                "reward bound must be positive and finite, got {bound}"
            )));
        }
        if theta.is_empty() {
            return Err(Error::ConfigInvalid("reward parameter is empty".into()));
        }
        if !theta.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("reward parameter".into()));
        }
        let mut theta = theta;
        project_ball(&mut theta, bound);
        Ok(Self { theta, bound })
    }

    pub fn zeros(dim: usize, bound: f64) -> Result<Self> {
        Self::new(vec![0.0; dim], bound)
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    pub fn norm(&self) -> f64 {
        norm2(&self.theta)
    }

    /// Replaces the parameter, projecting onto the ball.
    pub fn set_theta(&mut self, theta: Vec<f64>) -> Result<()> {
        if theta.len() != self.theta.len() {
            return Err(Error::DimensionMismatch(format!(
                "new parameter has dimension {}, expected {}",
                theta.len(),
                self.theta.len()
            )));
        }
        if !theta.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("reward parameter".into()));
        }
        self.theta = theta;
        project_ball(&mut self.theta, self.bound);
        Ok(())
    }

    pub(crate) fn check_dim(&self, mdp: &TokenMdp) -> Result<()> {
        if self.theta.len() != mdp.feature_dim() {
            return Err(Error::DimensionMismatch(format!(
                "reward dimension {} vs feature dimension {}",
                self.theta.len(),
                mdp.feature_dim()
            )));
        }
        Ok(())
    }

    /// Reward of a whole trajectory through its cached features.
    pub fn traj_reward(&self, mdp: &TokenMdp, traj: &Trajectory) -> Result<f64> {
        self.check_dim(mdp)?;
        if traj.features.len() != self.theta.len() {
            return Err(Error::DimensionMismatch(
                "trajectory features do not match reward dimension".into(),
            ));
        }
        Ok(dot(&self.theta, &traj.features))
    }
}

/// Probability that `traj0` is preferred over `traj1`.
pub fn btl_prob(
    rm: &LinearReward,
    mdp: &TokenMdp,
    traj0: &Trajectory,
    traj1: &Trajectory,
) -> Result<f64> {
    let r0 = rm.traj_reward(mdp, traj0)?;
    let r1 = rm.traj_reward(mdp, traj1)?;
    Ok(pref_prob(r0 - r1))
}

/// Total log likelihood of the dataset's labels under the reward model.
pub fn loglik(rm: &LinearReward, mdp: &TokenMdp, dataset: &PreferenceDataset) -> Result<f64> {
    rm.check_dim(mdp)?;
    let mut total = 0.0;
    for sample in dataset.samples() {
        let diff = sub(&sample.traj0.features, &sample.traj1.features);
        total += log_pref_prob(dot(&rm.theta, &diff), sample.label);
    }
    Ok(total)
}

/// Half the log likelihood ratio of a single sample against a reference
/// model; zero when the reference assigns the label probability zero.
pub fn relative_loss(
    rm: &LinearReward,
    reference: &LinearReward,
    mdp: &TokenMdp,
    sample: &crate::preference::PreferenceSample,
) -> Result<f64> {
    rm.check_dim(mdp)?;
    reference.check_dim(mdp)?;
    let diff = sub(&sample.traj0.features, &sample.traj1.features);
    let log_ref = log_pref_prob(dot(reference.theta(), &diff), sample.label);
    if log_ref == f64::NEG_INFINITY {
        return Ok(0.0);
    }
    let log_rm = log_pref_prob(dot(rm.theta(), &diff), sample.label);
    Ok(0.5 * (log_rm - log_ref))
}

/// Reward-fitting options.
#[derive(Debug, Clone, Copy)]
pub struct MleOptions {
    pub max_iters: usize,
    pub grad_tol: f64,
    pub init_step: f64,
}

impl Default for MleOptions {
    fn default() -> Self {
        Self {
            max_iters: 10_000,
            grad_tol: 1e-8,
            init_step: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MleReport {
    pub loglik: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    /// Log likelihood after each accepted ascent step.
    pub history: Vec<f64>,
}

/// Per-sample data the likelihood depends on: feature difference and label.
pub(crate) fn preference_records(
    mdp: &TokenMdp,
    dataset: &PreferenceDataset,
) -> Result<Vec<(Vec<f64>, u8)>> {
    let mut records = Vec::with_capacity(dataset.len());
    for sample in dataset.samples() {
        if sample.traj0.features.len() != mdp.feature_dim()
            || sample.traj1.features.len() != mdp.feature_dim()
        {
            return Err(Error::DimensionMismatch(
                "sample features do not match the MDP".into(),
            ));
        }
        records.push((
            sub(&sample.traj0.features, &sample.traj1.features),
            sample.label,
        ));
    }
    Ok(records)
}

pub(crate) fn records_loglik(theta: &[f64], records: &[(Vec<f64>, u8)]) -> f64 {
    records
        .iter()
        .map(|(diff, label)| log_pref_prob(dot(theta, diff), *label))
        .sum()
}

pub(crate) fn records_loglik_grad(theta: &[f64], records: &[(Vec<f64>, u8)]) -> Vec<f64> {
    let mut grad = vec![0.0; theta.len()];
    for (diff, label) in records {
        let p = pref_prob(dot(theta, diff));
        add_scaled(&mut grad, diff, f64::from(*label) - p);
    }
    grad
}

/// Maximum likelihood fit of a linear reward by projected gradient ascent
/// with backtracking; stops when the gradient norm falls below `grad_tol`
/// or after `max_iters` iterations.
pub fn fit_mle(
    mdp: &TokenMdp,
    dataset: &PreferenceDataset,
    bound: f64,
    opts: &MleOptions,
) -> Result<(LinearReward, MleReport)> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let records = preference_records(mdp, dataset)?;
    let ascent_opts = AscentOpts {
        max_iters: opts.max_iters,
        grad_tol: opts.grad_tol,
        init_step: opts.init_step,
        ..AscentOpts::default()
    };
    let dim = mdp.feature_dim();
    let (theta, report) = projected_ascent(
        vec![0.0; dim],
        bound,
        |t| records_loglik(t, &records),
        |t| records_loglik_grad(t, &records),
        &ascent_opts,
    )?;
    Ok((
        LinearReward::new(theta, bound)?,
        MleReport {
            loglik: report.value,
            iterations: report.iterations,
            grad_norm: report.grad_norm,
            history: report.history,
        },
    ))
}

/// Membership test for the likelihood-ratio confidence set: the model's log
/// likelihood must come within `zeta` of the maximum.
pub fn in_confidence_set(
    rm: &LinearReward,
    mdp: &TokenMdp,
    dataset: &PreferenceDataset,
    max_loglik: f64,
    zeta: f64,
) -> Result<bool> {
    Ok(loglik(rm, mdp, dataset)? >= max_loglik - zeta)
}

/// Offline confidence radius schedule in log likelihood units, growing like
/// `sqrt(n log n)` so the per-sample radius shrinks as `sqrt(log n / n)`.
pub fn zeta_offline(dim: usize, bound: f64, n: usize, scale: f64) -> f64 {
    let n = n.max(1) as f64;
    // Floor the log argument at 2 so the schedule stays finite for tiny B*n.
    let log_term = (bound * n).max(2.0).ln();
    scale * (dim as f64 * log_term / n).sqrt() * n
}

/// Online confidence radius schedule in log likelihood units.
pub fn zeta_online(dim: usize, bound: f64, iteration: usize, delta: f64, scale: f64) -> f64 {
    let t = iteration.max(2) as f64;
    let log_term = (bound * t).max(2.0).ln();
    scale * (dim as f64 * log_term + (1.0 / delta).ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::MdpSpec;
    use crate::policy::{rollout, SoftmaxLinearPolicy};
    use crate::preference::{gen_offline, Annotators};
    use crate::seed::SeedSpring;
    use crate::vecmath::cosine;
    use rand::Rng;

    fn tiny() -> TokenMdp {
        MdpSpec {
            vocab_size: 3,
            horizon: 3,
            prompt_count: 2,
            prompt_distribution: None,
            discount: 1.0,
            feature_dim: 5,
            context_len: 1,
            feature_seed: 42,
            enumeration_cap: 1_000_000,
        }
        .build()
        .unwrap()
    }

    fn unit_reward(mdp: &TokenMdp, seed: u64, norm: f64, bound: f64) -> LinearReward {
        let mut rng = SeedSpring::new(seed).stream("theta");
        let mut theta: Vec<f64> = (0..mdp.feature_dim())
            .map(|_| rng.gen::<f64>() - 0.5)
            .collect();
        let n = norm2(&theta);
        for x in theta.iter_mut() {
            *x *= norm / n;
        }
        LinearReward::new(theta, bound).unwrap()
    }

    #[test]
    fn construction_projects_onto_the_ball() {
        let rm = LinearReward::new(vec![3.0, 4.0], 1.0).unwrap();
        assert!((rm.norm() - 1.0).abs() < 1e-12);
        assert!((rm.theta()[0] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn zero_parameter_gives_even_preferences() {
        let mdp = tiny();
        let rm = LinearReward::zeros(mdp.feature_dim(), 1.0).unwrap();
        let t0 = mdp.make_trajectory(0, vec![0, 1, 2]).unwrap();
        let t1 = mdp.make_trajectory(0, vec![2, 2, 0]).unwrap();
        assert_eq!(btl_prob(&rm, &mdp, &t0, &t1).unwrap(), 0.5);
    }

    #[test]
    fn preference_probability_increases_with_the_gap() {
        let mdp = tiny();
        let t0 = mdp.make_trajectory(0, vec![0, 1, 2]).unwrap();
        let t1 = mdp.make_trajectory(0, vec![2, 2, 0]).unwrap();
        let direction = sub(&t0.features, &t1.features);
        let mut last = 0.0;
        for scale in [0.0, 0.5, 1.0, 1.9] {
            let mut theta = direction.clone();
            let n = norm2(&theta);
            for x in theta.iter_mut() {
                *x *= scale / n;
            }
            let rm = LinearReward::new(theta, 2.0).unwrap();
            let p = btl_prob(&rm, &mdp, &t0, &t1).unwrap();
            assert!(p >= last);
            last = p;
        }
        assert!(last > 0.5);
    }

    #[test]
    fn preferences_between_the_two_orders_partition_unity() {
        let mdp = tiny();
        let rm = unit_reward(&mdp, 5, 1.4, 2.0);
        let t0 = mdp.make_trajectory(1, vec![0, 0, 1]).unwrap();
        let t1 = mdp.make_trajectory(1, vec![2, 1, 0]).unwrap();
        let p01 = btl_prob(&rm, &mdp, &t0, &t1).unwrap();
        let p10 = btl_prob(&rm, &mdp, &t1, &t0).unwrap();
        assert!((p01 + p10 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn oversized_gaps_are_clamped() {
        let mdp = tiny();
        let t0 = mdp.make_trajectory(0, vec![0, 1, 2]).unwrap();
        let t1 = mdp.make_trajectory(0, vec![2, 2, 0]).unwrap();
        let mut direction = sub(&t0.features, &t1.features);
        let n = norm2(&direction);
        let bound = 2.0 * GAP_CLAMP / n;
        for x in direction.iter_mut() {
            *x *= bound / n;
        }
        let rm = LinearReward::new(direction, bound).unwrap();
        let p = btl_prob(&rm, &mdp, &t0, &t1).unwrap();
        assert_eq!(p, sigmoid(GAP_CLAMP));
    }

    #[test]
    fn loglik_is_additive_over_dataset_concatenation() {
        let mdp = tiny();
        let rstar = unit_reward(&mdp, 1, 1.0, 2.0);
        let uniform = SoftmaxLinearPolicy::uniform(&mdp).unwrap();
        let spring = SeedSpring::new(2);
        let a = gen_offline(
            &mdp,
            &uniform,
            &uniform,
            &rstar,
            40,
            &mut spring.stream("a"),
            Annotators::default(),
        )
        .unwrap();
        let b = gen_offline(
            &mdp,
            &uniform,
            &uniform,
            &rstar,
            25,
            &mut spring.stream("b"),
            Annotators::default(),
        )
        .unwrap();
        let rm = unit_reward(&mdp, 3, 0.9, 2.0);
        let mut joined = a.clone();
        joined.append(b.samples().to_vec()).unwrap();
        let sum = loglik(&rm, &mdp, &a).unwrap() + loglik(&rm, &mdp, &b).unwrap();
        let whole = loglik(&rm, &mdp, &joined).unwrap();
        assert!((sum - whole).abs() < 1e-12);
    }

    #[test]
    fn loglik_of_an_empty_dataset_is_zero() {
        let mdp = tiny();
        let rm = unit_reward(&mdp, 4, 1.0, 2.0);
        let empty = PreferenceDataset::new("a".into(), "b".into(), 0);
        assert_eq!(loglik(&rm, &mdp, &empty).unwrap(), 0.0);
    }

    #[test]
    fn relative_loss_vanishes_at_the_reference_model() {
        let mdp = tiny();
        let rstar = unit_reward(&mdp, 6, 1.2, 2.0);
        let uniform = SoftmaxLinearPolicy::uniform(&mdp).unwrap();
        let spring = SeedSpring::new(7);
        let data = gen_offline(
            &mdp,
            &uniform,
            &uniform,
            &rstar,
            10,
            &mut spring.stream("d"),
            Annotators::default(),
        )
        .unwrap();
        for sample in data.samples() {
            assert_eq!(relative_loss(&rstar, &rstar, &mdp, sample).unwrap(), 0.0);
        }
    }

    #[test]
    fn summed_relative_loss_bridges_to_the_loglik_difference() {
        let mdp = tiny();
        let rstar = unit_reward(&mdp, 8, 1.2, 2.0);
        let rm = unit_reward(&mdp, 9, 0.7, 2.0);
        let uniform = SoftmaxLinearPolicy::uniform(&mdp).unwrap();
        let spring = SeedSpring::new(10);
        let data = gen_offline(
            &mdp,
            &uniform,
            &uniform,
            &rstar,
            60,
            &mut spring.stream("d"),
            Annotators::default(),
        )
        .unwrap();
        let total: f64 = data
            .samples()
            .iter()
            .map(|s| relative_loss(&rm, &rstar, &mdp, s).unwrap())
            .sum();
        let bridge =
            0.5 * (loglik(&rm, &mdp, &data).unwrap() - loglik(&rstar, &mdp, &data).unwrap());
        assert!((total - bridge).abs() < 1e-12);
    }

    #[test]
    fn mle_recovers_the_generating_direction() {
        let mdp = tiny();
        let rstar = unit_reward(&mdp, 11, 1.5, 2.0);
        let uniform = SoftmaxLinearPolicy::uniform(&mdp).unwrap();
        let spring = SeedSpring::new(12);
        let data = gen_offline(
            &mdp,
            &uniform,
            &uniform,
            &rstar,
            5_000,
            &mut spring.stream("d"),
            Annotators::default(),
        )
        .unwrap();
        let (fit, report) = fit_mle(&mdp, &data, 2.0, &MleOptions::default()).unwrap();
        let cos = cosine(fit.theta(), rstar.theta());
        assert!(cos >= 0.9, "cosine {cos}");
        for w in report.history.windows(2) {
            assert!(w[1] >= w[0]);
        }
    }

    #[test]
    fn separable_labels_push_the_fit_onto_the_ball_boundary() {
        let mdp = tiny();
        // Label every pair deterministically in the direction of a fixed
        // reward, which makes the likelihood monotone in the scale of theta.
        let rstar = unit_reward(&mdp, 13, 1.5, 2.0);
        let uniform = SoftmaxLinearPolicy::uniform(&mdp).unwrap();
        let spring = SeedSpring::new(14);
        let mut rng = spring.stream("d");
        let mut dataset = PreferenceDataset::new("det".into(), "det".into(), 14);
        let mut samples = Vec::new();
        for _ in 0..200 {
            let prompt = mdp.sample_prompt(&mut rng);
            let t0 = rollout(&mdp, &uniform, prompt, &mut rng).unwrap();
            let t1 = rollout(&mdp, &uniform, prompt, &mut rng).unwrap();
            let gap = rstar.traj_reward(&mdp, &t0).unwrap() - rstar.traj_reward(&mdp, &t1).unwrap();
            let label = u8::from(gap >= 0.0);
            samples.push(crate::preference::PreferenceSample {
                label,
                traj0: t0,
                traj1: t1,
                provenance: crate::preference::Provenance::OfflineBtl,
                iteration: -1,
            });
        }
        dataset.append(samples).unwrap();
        let (fit, _) = fit_mle(&mdp, &dataset, 1.0, &MleOptions::default()).unwrap();
        assert!((fit.norm() - 1.0).abs() <= 1e-9, "norm {}", fit.norm());
    }

    #[test]
    fn mle_rejects_an_empty_dataset() {
        let mdp = tiny();
        let empty = PreferenceDataset::new("a".into(), "b".into(), 0);
        assert!(matches!(
            fit_mle(&mdp, &empty, 1.0, &MleOptions::default()),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn confidence_set_contains_the_maximizer_and_excludes_distant_models() {
        let mdp = tiny();
        let rstar = unit_reward(&mdp, 15, 1.4, 2.0);
        let uniform = SoftmaxLinearPolicy::uniform(&mdp).unwrap();
        let spring = SeedSpring::new(16);
        let data = gen_offline(
            &mdp,
            &uniform,
            &uniform,
            &rstar,
            2_000,
            &mut spring.stream("d"),
            Annotators::default(),
        )
        .unwrap();
        let (fit, report) = fit_mle(&mdp, &data, 2.0, &MleOptions::default()).unwrap();
        assert!(in_confidence_set(&fit, &mdp, &data, report.loglik, 0.0).unwrap());
        let mut flipped = fit.theta().to_vec();
        for x in flipped.iter_mut() {
            *x = -*x;
        }
        let far = LinearReward::new(flipped, 2.0).unwrap();
        assert!(!in_confidence_set(&far, &mdp, &data, report.loglik, 1.0).unwrap());
        assert!(in_confidence_set(&far, &mdp, &data, report.loglik, f64::INFINITY).unwrap());
    }

    #[test]
    fn zeta_schedules_stay_positive_and_finite() {
        for n in [1usize, 2, 10, 100_000] {
            let z = zeta_offline(8, 2.0, n, 1.0);
            assert!(z.is_finite() && z > 0.0, "offline n={n} gave {z}");
        }
        for t in [1usize, 2, 50, 10_000] {
            let z = zeta_online(8, 2.0, t, 0.05, 1.0);
            assert!(z.is_finite() && z > 0.0, "online t={t} gave {z}");
        }
        // Per-sample offline radius shrinks with n.
        let early = zeta_offline(8, 2.0, 100, 1.0) / 100.0;
        let late = zeta_offline(8, 2.0, 10_000, 1.0) / 10_000.0;
        assert!(late < early);
    }
}
