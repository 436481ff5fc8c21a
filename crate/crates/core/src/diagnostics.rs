//! Numerical checks behind the method's guarantees.
//!
//! The lemma checkers verify, by exact enumeration over randomly drawn small
//! instances, the two inequalities that convert preference likelihood into
//! reward error. The identity checkers do the same for the advantage-sum
//! decomposition and Q-to-reward inversion. The gradient checkers compare
//! every analytic gradient the solvers use against central finite
//! differences. The rest are the measurement tools: offline coverage
//! matrices, covariance-weighted norms, suboptimality, and log-log rate
//! fits.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;

use crate::engine::ValueMode;
use crate::error::{Error, Result};
use crate::mdp::{MdpSpec, TokenMdp};
use crate::moment_match::{induced_reward, pdl_gap, q_teacher_exact};
use crate::online::{clipped_surrogate, OnlineTraceRow};
use crate::policy::{
    dp_solve, exact_value, feature_expectation, for_each_trajectory, rollout, teacher_policy,
    Policy, SoftmaxLinearPolicy,
};
use crate::preference::{gen_offline, Annotators};
use crate::reward::{pref_prob, records_loglik, records_loglik_grad, LinearReward};
use crate::seed::SeedSpring;
use crate::vecmath::{dot, norm2, sub};

/// Worst-case inverse slope of the logistic link on gaps reachable under a
/// parameter ball of the given radius.
pub fn kappa_linear(bound: f64) -> f64 {
    (2.0 * bound).exp() + (-2.0 * bound).exp() + 2.0
}

/// Offline coverage matrix `(lambda / bound) I + E[diff diff']` over pairs
/// drawn independently from the two behavior policies, exactly or from
/// samples.
pub fn build_sigma_offline(
    mdp: &TokenMdp,
    mu0: &dyn Policy,
    mu1: &dyn Policy,
    bound: f64,
    lambda: f64,
    mode: ValueMode,
    rng: &mut impl Rng,
) -> Result<DMatrix<f64>> {
    if !(bound.is_finite() && bound > 0.0) {
        return Err(Error::ConfigInvalid("bound must be positive".into()));
    }
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::ConfigInvalid("lambda must be positive".into()));
    }
    let d = mdp.feature_dim();
    let mut sigma = DMatrix::<f64>::identity(d, d) * (lambda / bound);
    match mode {
        ValueMode::Exact => {
            let pairs = mdp.trajectory_count().saturating_mul(mdp.trajectory_count());
            if pairs > mdp.enumeration_cap() {
                return Err(Error::CapExceeded {
                    needed: pairs,
                    cap: mdp.enumeration_cap(),
                });
            }
            for prompt in 0..mdp.prompt_count() {
                let weight = mdp.prompt_distribution()[prompt as usize];
                if weight == 0.0 {
                    continue;
                }
                let side = |policy: &dyn Policy| -> Result<Vec<(f64, Vec<f64>)>> {
                    let mut out = Vec::new();
                    for_each_trajectory(mdp, policy, prompt, &mut |prob, actions| {
                        out.push((prob, mdp.trajectory_features(prompt, actions)?));
                        Ok(())
                    })?;
                    Ok(out)
                };
                let side0 = side(mu0)?;
                let side1 = side(mu1)?;
                for (p0, f0) in &side0 {
                    for (p1, f1) in &side1 {
                        let diff = DVector::from_vec(sub(f0, f1));
                        sigma.ger(weight * p0 * p1, &diff, &diff, 1.0);
                    }
                }
            }
        }
        ValueMode::Mc { samples } => {
            if samples == 0 {
                return Err(Error::ConfigInvalid(
                    "monte carlo mode needs a positive sample count".into(),
                ));
            }
            let inv = 1.0 / samples as f64;
            for _ in 0..samples {
                let prompt = mdp.sample_prompt(rng);
                let t0 = rollout(mdp, mu0, prompt, rng)?;
                let t1 = rollout(mdp, mu1, prompt, rng)?;
                let diff = DVector::from_vec(sub(&t0.features, &t1.features));
                sigma.ger(inv, &diff, &diff, 1.0);
            }
        }
    }
    Ok(sigma)
}

/// `sqrt(v' sigma^{-1} v)` through a Cholesky solve.
pub fn weighted_norm(v: &[f64], sigma: &DMatrix<f64>) -> Result<f64> {
    if sigma.nrows() != v.len() || sigma.ncols() != v.len() {
        return Err(Error::DimensionMismatch(format!(
            "vector of dimension {} against a {}x{} matrix",
            v.len(),
            sigma.nrows(),
            sigma.ncols()
        )));
    }
    let chol = Cholesky::new(sigma.clone())
        .ok_or_else(|| Error::NonFinite("coverage matrix is not positive definite".into()))?;
    let x = DVector::from_column_slice(v);
    let solved = chol.solve(&x);
    let value = dot(v, solved.as_slice());
    if !value.is_finite() || value < -1e-12 {
        return Err(Error::NonFinite("weighted norm".into()));
    }
    Ok(value.max(0.0).sqrt())
}

/// Single-policy concentrability of a comparator against the data coverage:
/// `sqrt(2) * || phi_teacher - phi_comparator ||_{sigma^{-1}}`.
pub fn concentrability_linear(
    mdp: &TokenMdp,
    teacher: &dyn Policy,
    comparator: &dyn Policy,
    sigma: &DMatrix<f64>,
) -> Result<f64> {
    let phi_teacher = feature_expectation(mdp, teacher)?;
    let phi_comparator = feature_expectation(mdp, comparator)?;
    Ok(2.0_f64.sqrt() * weighted_norm(&sub(&phi_teacher, &phi_comparator), sigma)?)
}

/// Exact optimality gap `max_pi J(pi, rstar) - J(policy, rstar)`.
pub fn suboptimality(mdp: &TokenMdp, policy: &dyn Policy, rstar: &LinearReward) -> Result<f64> {
    let best = dp_solve(mdp, rstar, 0.0)?.value;
    Ok(best - exact_value(mdp, policy, rstar)?)
}

/// `(t, cumulative regret)` points from an online trace.
pub fn regret_curve(trace: &[OnlineTraceRow]) -> Result<Vec<(f64, f64)>> {
    trace
        .iter()
        .map(|row| {
            let r = row.regret_cumulative.ok_or(Error::MissingOracle)?;
            Ok((row.t as f64, r))
        })
        .collect()
}

/// Least squares fit of `log y = intercept + slope * log x`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Root mean square of the log-space residuals.
    pub residual_rms: f64,
    pub points: usize,
}

/// Fits a power law through points with positive coordinates.
pub fn rate_fit(points: &[(f64, f64)]) -> Result<RateFit> {
    if points.len() < 3 {
        return Err(Error::ConfigInvalid(format!(
            "rate fit needs at least 3 points, got {}",
            points.len()
        )));
    }
    for &(x, y) in points {
        if !(x > 0.0 && y > 0.0) || !x.is_finite() || !y.is_finite() {
            return Err(Error::NonPositivePoint { x, y });
        }
    }
    let n = points.len() as f64;
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let mean_x = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mean_x) * (p.0 - mean_x)).sum();
    let sxy: f64 = logs.iter().map(|p| (p.0 - mean_x) * (p.1 - mean_y)).sum();
    if sxx == 0.0 {
        return Err(Error::ConfigInvalid(
            "rate fit needs at least two distinct x values".into(),
        ));
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let syy: f64 = logs.iter().map(|p| (p.1 - mean_y) * (p.1 - mean_y)).sum();
    let r_squared = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    let sse: f64 = logs
        .iter()
        .map(|p| {
            let e = p.1 - (intercept + slope * p.0);
            e * e
        })
        .sum();
    Ok(RateFit {
        slope,
        intercept,
        r_squared,
        residual_rms: (sse / n).sqrt(),
        points: points.len(),
    })
}

/// One enumerated inequality instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LemmaTrial {
    pub id: usize,
    pub lhs: f64,
    pub rhs: f64,
    /// `rhs - lhs`; negative beyond tolerance counts as a violation.
    pub margin: f64,
    pub violation: bool,
}

/// Outcome of a batch of lemma trials.
#[derive(Debug, Clone)]
pub struct LemmaReport {
    pub trials: Vec<LemmaTrial>,
    pub violations: usize,
}

impl LemmaReport {
    fn from_trials(trials: Vec<LemmaTrial>) -> Self {
        let violations = trials.iter().filter(|t| t.violation).count();
        Self { trials, violations }
    }

    pub fn worst_margin(&self) -> f64 {
        self.trials
            .iter()
            .map(|t| t.margin)
            .fold(f64::INFINITY, f64::min)
    }
}

const LEMMA_TOLERANCE: f64 = 1e-9;

struct LemmaInstance {
    mdp: TokenMdp,
    reward_a: LinearReward,
    reward_b: LinearReward,
    mu0: SoftmaxLinearPolicy,
    mu1: SoftmaxLinearPolicy,
    bound: f64,
}

fn ball_point(rng: &mut impl Rng, dim: usize, bound: f64) -> Vec<f64> {
    let mut x: Vec<f64> = (0..dim)
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    let radius = rng.gen::<f64>().powf(1.0 / dim as f64) * bound;
    let n = norm2(&x);
    if n > 0.0 {
        for v in x.iter_mut() {
            *v *= radius / n;
        }
    }
    x
}

fn random_softmax(mdp: &TokenMdp, rng: &mut impl Rng, scale: f64) -> Result<SoftmaxLinearPolicy> {
    let mut policy = SoftmaxLinearPolicy::zeros(mdp, 1, 1.0)?;
    for w in policy.weights_mut() {
        *w = scale * rng.sample::<f64, _>(rand_distr::StandardNormal);
    }
    Ok(policy)
}

fn random_lemma_instance(id: usize, spring: &SeedSpring) -> Result<LemmaInstance> {
    let mut rng = spring.substream("instance", id as u64);
    let vocab = [2u32, 3][rng.gen_range(0..2)];
    let horizon = rng.gen_range(1..=3);
    let prompt_count = rng.gen_range(1..=2);
    let dim = rng.gen_range(2..=6);
    let discount = [0.5, 0.9, 1.0][rng.gen_range(0..3)];
    let mdp = MdpSpec {
        vocab_size: vocab,
        horizon,
        prompt_count,
        prompt_distribution: None,
        discount,
        feature_dim: dim,
        context_len: 1,
        feature_seed: rng.gen(),
        enumeration_cap: 1_000_000,
    }
    .build()?;
    // Log-uniform radii reach the small-parameter regime where the logistic
    // link is steepest and the inequality is tight.
    let bound = (rng.gen::<f64>() * (2.0_f64.ln() - 0.05_f64.ln()) + 0.05_f64.ln()).exp();
    let reward_a = LinearReward::new(ball_point(&mut rng, dim, bound), bound)?;
    let reward_b = LinearReward::new(ball_point(&mut rng, dim, bound), bound)?;
    let mu0 = random_softmax(&mdp, &mut rng, 1.0)?;
    let mu1 = random_softmax(&mdp, &mut rng, 1.0)?;
    Ok(LemmaInstance {
        mdp,
        reward_a,
        reward_b,
        mu0,
        mu1,
        bound,
    })
}

fn enumerate_pairs(
    inst: &LemmaInstance,
    mut visit: impl FnMut(f64, f64, f64),
) -> Result<()> {
    let mdp = &inst.mdp;
    for prompt in 0..mdp.prompt_count() {
        let weight = mdp.prompt_distribution()[prompt as usize];
        if weight == 0.0 {
            continue;
        }
        let side = |policy: &dyn Policy| -> Result<Vec<(f64, f64, f64)>> {
            let mut out = Vec::new();
            for_each_trajectory(mdp, policy, prompt, &mut |prob, actions| {
                let phi = mdp.trajectory_features(prompt, actions)?;
                out.push((
                    prob,
                    dot(inst.reward_a.theta(), &phi),
                    dot(inst.reward_b.theta(), &phi),
                ));
                Ok(())
            })?;
            Ok(out)
        };
        let side0 = side(&inst.mu0)?;
        let side1 = side(&inst.mu1)?;
        for &(p0, a0, b0) in &side0 {
            for &(p1, a1, b1) in &side1 {
                visit(weight * p0 * p1, a0 - a1, b0 - b1);
            }
        }
    }
    Ok(())
}

/// Checks, by exact enumeration over random small instances, that the mean
/// squared reward-gap difference between two models in the ball is at most
/// `(kappa_scale * kappa(bound))^2` times the mean squared total variation
/// between the label distributions they induce. At scale one the inequality
/// must hold; scales below one are the falsification probe.
pub fn lemma_l1_tv_check(trials: usize, kappa_scale: f64, spring: &SeedSpring) -> Result<LemmaReport> {
    if trials == 0 {
        return Err(Error::ConfigInvalid("at least one trial is needed".into()));
    }
    if !(kappa_scale.is_finite() && kappa_scale > 0.0) {
        return Err(Error::ConfigInvalid("kappa scale must be positive".into()));
    }
    let mut out = Vec::with_capacity(trials);
    for id in 0..trials {
        let inst = random_lemma_instance(id, spring)?;
        let mut lhs = 0.0;
        let mut tv2 = 0.0;
        enumerate_pairs(&inst, |w, gap_a, gap_b| {
            lhs += w * (gap_a - gap_b) * (gap_a - gap_b);
            let tv = pref_prob(gap_a) - pref_prob(gap_b);
            tv2 += w * tv * tv;
        })?;
        let kappa = kappa_scale * kappa_linear(inst.bound);
        let rhs = kappa * kappa * tv2;
        let margin = rhs - lhs;
        out.push(LemmaTrial {
            id,
            lhs,
            rhs,
            margin,
            violation: margin < -LEMMA_TOLERANCE,
        });
    }
    Ok(LemmaReport::from_trials(out))
}

/// Checks, by exact enumeration over random small instances, that the mean
/// squared total variation between induced label distributions is at most
/// `-2 log` of the mean Bhattacharyya coefficient, which is never negative.
pub fn lemma_tv_logexp_check(trials: usize, spring: &SeedSpring) -> Result<LemmaReport> {
    if trials == 0 {
        return Err(Error::ConfigInvalid("at least one trial is needed".into()));
    }
    let mut out = Vec::with_capacity(trials);
    for id in 0..trials {
        let inst = random_lemma_instance(id, spring)?;
        let mut tv2 = 0.0;
        let mut bc = 0.0;
        enumerate_pairs(&inst, |w, gap_a, gap_b| {
            let pa = pref_prob(gap_a);
            let pb = pref_prob(gap_b);
            let tv = pa - pb;
            tv2 += w * tv * tv;
            bc += w * ((pa * pb).sqrt() + ((1.0 - pa) * (1.0 - pb)).sqrt());
        })?;
        // The coefficient is at most one; rounding may overshoot by an ulp,
        // which would push the log to the wrong side of zero.
        let rhs = -2.0 * bc.min(1.0).ln();
        let margin = rhs - tv2;
        out.push(LemmaTrial {
            id,
            lhs: tv2,
            rhs,
            margin,
            violation: margin < -LEMMA_TOLERANCE,
        });
    }
    Ok(LemmaReport::from_trials(out))
}

/// One identity trial: the largest absolute error observed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentityCheck {
    pub id: usize,
    pub error: f64,
}

fn random_identity_mdp(rng: &mut impl Rng) -> Result<TokenMdp> {
    MdpSpec {
        vocab_size: rng.gen_range(2..=3),
        horizon: rng.gen_range(1..=4),
        prompt_count: rng.gen_range(1..=2),
        prompt_distribution: None,
        discount: [0.5, 1.0][rng.gen_range(0..2)],
        feature_dim: rng.gen_range(2..=6),
        context_len: 1,
        feature_seed: rng.gen(),
        enumeration_cap: 1_000_000,
    }
    .build()
}

/// Compares the advantage-sum gap under the exact teacher Q-function with
/// the directly computed teacher-minus-student value difference on random
/// instances.
pub fn pdl_identity_check(trials: usize, spring: &SeedSpring) -> Result<Vec<IdentityCheck>> {
    let mut out = Vec::with_capacity(trials);
    for id in 0..trials {
        let mut rng = spring.substream("pdl", id as u64);
        let mdp = random_identity_mdp(&mut rng)?;
        let rstar = LinearReward::new(ball_point(&mut rng, mdp.feature_dim(), 2.0), 2.0)?;
        let temperature = [0.0, 0.7, 1.5][rng.gen_range(0..3)];
        let teacher = teacher_policy(&mdp, &rstar, temperature)?;
        let student = random_softmax(&mdp, &mut rng, 1.0)?;
        let q = q_teacher_exact(&mdp, &teacher, &rstar)?;
        let lhs = pdl_gap(&mdp, &teacher, &student, &q, ValueMode::Exact, &mut rng)?;
        let rhs = exact_value(&mdp, &teacher, &rstar)? - exact_value(&mdp, &student, &rstar)?;
        out.push(IdentityCheck {
            id,
            error: (lhs - rhs).abs(),
        });
    }
    Ok(out)
}

/// Compares the reward induced by the exact teacher Q-function against the
/// generating reward at every reachable (prompt, prefix, action) triple.
pub fn bellman_inversion_check(trials: usize, spring: &SeedSpring) -> Result<Vec<IdentityCheck>> {
    let mut out = Vec::with_capacity(trials);
    for id in 0..trials {
        let mut rng = spring.substream("bellman", id as u64);
        let mdp = random_identity_mdp(&mut rng)?;
        let rstar = LinearReward::new(ball_point(&mut rng, mdp.feature_dim(), 2.0), 2.0)?;
        let temperature = [0.0, 1.2][rng.gen_range(0..2)];
        let teacher = teacher_policy(&mdp, &rstar, temperature)?;
        let q = q_teacher_exact(&mdp, &teacher, &rstar)?;
        let mut worst: f64 = 0.0;
        for prompt in 0..mdp.prompt_count() {
            let mut stack = vec![Vec::new()];
            while let Some(prefix) = stack.pop() {
                for a in 0..mdp.vocab_size() {
                    let r = induced_reward(&q, &mdp, &teacher, prompt, &prefix, a)?;
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
        out.push(IdentityCheck { id, error: worst });
    }
    Ok(out)
}

/// One analytic-versus-numeric gradient comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub id: usize,
    /// `||analytic - numeric|| / max(1, ||numeric||)`.
    pub rel_err: f64,
}

fn central_difference(mut f: impl FnMut(&[f64]) -> Result<f64>, x: &[f64], eps: f64) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let up = f(&probe)?;
        probe[i] = x[i] - eps;
        let down = f(&probe)?;
        probe[i] = x[i];
        grad[i] = (up - down) / (2.0 * eps);
    }
    Ok(grad)
}

fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = sub(analytic, numeric);
    norm2(&diff) / norm2(numeric).max(1.0)
}

fn random_grad_records(
    mdp: &TokenMdp,
    rng: &mut impl Rng,
    n: usize,
) -> Result<Vec<(Vec<f64>, u8)>> {
    let rstar = LinearReward::new(ball_point(rng, mdp.feature_dim(), 2.0), 2.0)?;
    let mu0 = random_softmax(mdp, rng, 1.0)?;
    let mu1 = random_softmax(mdp, rng, 1.0)?;
    let dataset = gen_offline(mdp, &mu0, &mu1, &rstar, n, rng, Annotators::default())?;
    let mut records = Vec::with_capacity(n);
    for sample in dataset.samples() {
        records.push((
            sub(&sample.traj0.features, &sample.traj1.features),
            sample.label,
        ));
    }
    Ok(records)
}

/// Checks the preference log likelihood gradient on random datasets.
pub fn check_mle_gradient(trials: usize, spring: &SeedSpring) -> Result<Vec<GradCheck>> {
    let mut out = Vec::with_capacity(trials);
    for id in 0..trials {
        let mut rng = spring.substream("mle-grad", id as u64);
        let mdp = random_identity_mdp(&mut rng)?;
        let n = rng.gen_range(5..30);
        let records = random_grad_records(&mdp, &mut rng, n)?;
        let theta = ball_point(&mut rng, mdp.feature_dim(), 1.5);
        let analytic = records_loglik_grad(&theta, &records);
        let numeric = central_difference(
            |x| Ok(records_loglik(x, &records)),
            &theta,
            1e-5,
        )?;
        out.push(GradCheck {
            id,
            rel_err: rel_error(&analytic, &numeric),
        });
    }
    Ok(out)
}

/// Checks the online reward-step objective gradient: batch reward gaps plus
/// the scaled dataset log likelihood.
pub fn check_reward_step_gradient(trials: usize, spring: &SeedSpring) -> Result<Vec<GradCheck>> {
    let mut out = Vec::with_capacity(trials);
    for id in 0..trials {
        let mut rng = spring.substream("reward-grad", id as u64);
        let mdp = random_identity_mdp(&mut rng)?;
        let n = rng.gen_range(5..20);
        let records = random_grad_records(&mdp, &mut rng, n)?;
        let mut batch_diffs = Vec::new();
        let mu = random_softmax(&mdp, &mut rng, 1.0)?;
        let pairs = rng.gen_range(2..10);
        for _ in 0..pairs {
            let prompt = mdp.sample_prompt(&mut rng);
            let t0 = rollout(&mdp, &mu, prompt, &mut rng)?;
            let t1 = rollout(&mdp, &mu, prompt, &mut rng)?;
            batch_diffs.push(sub(&t0.features, &t1.features));
        }
        let beta = rng.gen_range(0.2..2.0);
        let theta = ball_point(&mut rng, mdp.feature_dim(), 1.5);
        let objective = |x: &[f64]| -> Result<f64> {
            let gaps: f64 = batch_diffs.iter().map(|d| dot(x, d)).sum();
            Ok(gaps + beta * records_loglik(x, &records))
        };
        let mut analytic = vec![0.0; theta.len()];
        for d in &batch_diffs {
            for (g, v) in analytic.iter_mut().zip(d) {
                *g += v;
            }
        }
        let lg = records_loglik_grad(&theta, &records);
        for (g, v) in analytic.iter_mut().zip(&lg) {
            *g += beta * v;
        }
        let numeric = central_difference(objective, &theta, 1e-5)?;
        out.push(GradCheck {
            id,
            rel_err: rel_error(&analytic, &numeric),
        });
    }
    Ok(out)
}

/// Checks the clipped surrogate gradient with respect to the policy weights.
/// Instances are redrawn until every importance ratio sits away from the
/// clip threshold, so the finite difference never straddles the kink.
pub fn check_clipped_gradient(trials: usize, spring: &SeedSpring) -> Result<Vec<GradCheck>> {
    let mut out = Vec::with_capacity(trials);
    for id in 0..trials {
        let mut rng = spring.substream("clip-grad", id as u64);
        let mdp = random_identity_mdp(&mut rng)?;
        let snapshot = random_softmax(&mdp, &mut rng, 0.8)?;
        let mut policy = snapshot.clone();
        for w in policy.weights_mut() {
            *w += 0.3 * rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
        let m = rng.gen_range(3..10);
        let mut batch = Vec::with_capacity(m);
        let mut scores = Vec::with_capacity(m);
        for _ in 0..m {
            let prompt = mdp.sample_prompt(&mut rng);
            batch.push(rollout(&mdp, &snapshot, prompt, &mut rng)?);
            scores.push(rng.sample::<f64, _>(rand_distr::StandardNormal));
        }
        let mut ratios = Vec::with_capacity(m);
        for traj in &batch {
            let lp_cur = crate::policy::log_prob(&mdp, &policy, traj)?;
            let lp_old = crate::policy::log_prob(&mdp, &snapshot, traj)?;
            ratios.push((lp_cur - lp_old).exp());
        }
        let clip = [0.2, 0.25, 0.3, 0.35, 0.4, 0.45]
            .iter()
            .copied()
            .find(|&c| ratios.iter().all(|&rho| (rho - (1.0 + c)).abs() > 0.02))
            .unwrap_or(0.5);
        let baseline = rng.gen_bool(0.5);
        let (_, analytic) =
            clipped_surrogate(&mdp, &policy, &snapshot, &batch, &scores, clip, baseline)?;
        let base_weights = policy.weights().to_vec();
        let mut probe = policy.clone();
        let numeric = central_difference(
            |x| {
                probe.weights_mut().copy_from_slice(x);
                Ok(clipped_surrogate(&mdp, &probe, &snapshot, &batch, &scores, clip, baseline)?.0)
            },
            &base_weights,
            1e-5,
        )?;
        out.push(GradCheck {
            id,
            rel_err: rel_error(&analytic, &numeric),
        });
    }
    Ok(out)
}
