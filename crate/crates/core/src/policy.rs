//! Policies over the token MDP and their evaluation.
//!
//! Two families: softmax-linear students that read (prompt, position,
//! truncated context), and tabular policies keyed by full prefixes. Exact
//! evaluation enumerates the prefix tree; Monte Carlo evaluation uses
//! caller-supplied RNG streams so every estimate is replayable.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::mdp::{ContextIndexer, TokenMdp, Trajectory};
use crate::reward::LinearReward;
use crate::vecmath::{dot, norm2};

/// Anything that maps a (prompt, prefix) state to a distribution over tokens.
pub trait Policy {
    fn action_distribution(&self, mdp: &TokenMdp, prompt: u32, state: &[u32]) -> Result<Vec<f64>>;
}

/// Log-linear policy over (prompt, position, last-k context) state slots.
///
/// Logits for a state are one weight row divided by the temperature, so the
/// class is strictly stochastic; k controls how much of the prefix the
/// student can see and therefore how expressive the class is.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxLinearPolicy {
    weights: Vec<f64>,
    temperature: f64,
    context_len: usize,
    indexer: ContextIndexer,
    prompt_count: u32,
}

impl SoftmaxLinearPolicy {
    pub fn zeros(mdp: &TokenMdp, context_len: usize, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::ConfigInvalid(format!(
                "softmax temperature must be positive and finite, got {temperature}"
            )));
        }
        let indexer = ContextIndexer::new(mdp.vocab_size(), mdp.horizon(), context_len)?;
        let rows = mdp.prompt_count() as usize * indexer.total;
        let len = rows
            .checked_mul(mdp.vocab_size() as usize)
            .filter(|&n| n <= 100_000_000)
            .ok_or_else(|| Error::ConfigInvalid("policy weight table too large".into()))?;
        Ok(Self {
            weights: vec![0.0; len],
            temperature,
            context_len,
            indexer,
            prompt_count: mdp.prompt_count(),
        })
    }

    /// The uniform policy, independent of prompt and context.
    pub fn uniform(mdp: &TokenMdp) -> Result<Self> {
        Self::zeros(mdp, 0, 1.0)
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn context_len(&self) -> usize {
        self.context_len
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn param_len(&self) -> usize {
        self.weights.len()
    }

    /// Flat index of the first weight of the state's row.
    pub(crate) fn row_offset(&self, prompt: u32, state: &[u32]) -> usize {
        (prompt as usize * self.indexer.total + self.indexer.state_slot(state))
            * self.indexer.vocab as usize
    }

    fn check_shape(&self, mdp: &TokenMdp) -> Result<()> {
        if self.indexer.vocab != mdp.vocab_size()
            || self.indexer.horizon != mdp.horizon()
            || self.prompt_count != mdp.prompt_count()
        {
            return Err(Error::DimensionMismatch(
                "policy was built for a different MDP shape".into(),
            ));
        }
        Ok(())
    }

    fn check_state(&self, mdp: &TokenMdp, prompt: u32, state: &[u32]) -> Result<()> {
        self.check_shape(mdp)?;
        if prompt >= self.prompt_count {
            return Err(Error::MalformedTrajectory(format!(
                "prompt {prompt} out of range"
            )));
        }
        if state.len() >= self.indexer.horizon {
            return Err(Error::MalformedTrajectory(format!(
                "state length {} reaches past the horizon",
                state.len()
            )));
        }
        if let Some(&a) = state.iter().find(|&&a| a >= self.indexer.vocab) {
            return Err(Error::MalformedTrajectory(format!(
                "state token {a} out of range"
            )));
        }
        Ok(())
    }

    /// Stable softmax of one weight row.
    pub(crate) fn distribution_at(&self, offset: usize) -> Vec<f64> {
        let v = self.indexer.vocab as usize;
        let row = &self.weights[offset..offset + v];
        let inv_t = 1.0 / self.temperature;
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut out: Vec<f64> = row.iter().map(|&w| ((w - max) * inv_t).exp()).collect();
        let total: f64 = out.iter().sum();
        for p in out.iter_mut() {
            *p /= total;
        }
        out
    }

    /// In-place gradient step `weights += step * grad`.
    pub fn apply_step(&mut self, grad: &[f64], step: f64) -> Result<()> {
        if grad.len() != self.weights.len() {
            return Err(Error::DimensionMismatch(format!(
                "gradient length {} vs parameter length {}",
                grad.len(),
                self.weights.len()
            )));
        }
        for (w, g) in self.weights.iter_mut().zip(grad) {
            *w += step * g;
        }
        if !self.weights.iter().all(|w| w.is_finite()) {
            return Err(Error::NonFinite("policy weights after step".into()));
        }
        Ok(())
    }

    /// Adds `(onehot(action) - dist) / temperature` into the state's row of
    /// `grad`, scaled by `coeff`; this is `coeff * grad_W log pi(action | state)`.
    pub(crate) fn accumulate_log_grad(
        &self,
        grad: &mut [f64],
        offset: usize,
        dist: &[f64],
        action: u32,
        coeff: f64,
    ) {
        let inv_t = coeff / self.temperature;
        for (v, &p) in dist.iter().enumerate() {
            let indicator = if v as u32 == action { 1.0 } else { 0.0 };
            grad[offset + v] += inv_t * (indicator - p);
        }
    }
}

impl Policy for SoftmaxLinearPolicy {
    fn action_distribution(&self, mdp: &TokenMdp, prompt: u32, state: &[u32]) -> Result<Vec<f64>> {
        self.check_state(mdp, prompt, state)?;
        Ok(self.distribution_at(self.row_offset(prompt, state)))
    }
}

/// Policy stored as an explicit table over (prompt, full prefix).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TabularPolicy {
    table: BTreeMap<(u32, Vec<u32>), Vec<f64>>,
}

impl TabularPolicy {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, prompt: u32, state: Vec<u32>, dist: Vec<f64>) {
        self.table.insert((prompt, state), dist);
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl Policy for TabularPolicy {
    fn action_distribution(&self, _mdp: &TokenMdp, prompt: u32, state: &[u32]) -> Result<Vec<f64>> {
        self.table
            .get(&(prompt, state.to_vec()))
            .cloned()
            .ok_or_else(|| Error::UnknownState(format!("prompt {prompt}, prefix {state:?}")))
    }
}

/// Inverse-CDF categorical draw from one uniform variate.
///
/// A single uniform per step keeps rollouts usable with common random
/// numbers: nearby policies map the same variate to nearby action choices.
pub(crate) fn sample_categorical(dist: &[f64], u: f64) -> u32 {
    let mut acc = 0.0;
    for (i, &p) in dist.iter().enumerate() {
        acc += p;
        if u < acc {
            return i as u32;
        }
    }
    dist.len() as u32 - 1
}

/// Samples one episode from the policy.
pub fn rollout(
    mdp: &TokenMdp,
    policy: &dyn Policy,
    prompt: u32,
    rng: &mut impl Rng,
) -> Result<Trajectory> {
    let mut actions = Vec::with_capacity(mdp.horizon());
    for _ in 0..mdp.horizon() {
        let dist = policy.action_distribution(mdp, prompt, &actions)?;
        let u: f64 = rng.gen();
        actions.push(sample_categorical(&dist, u));
    }
    mdp.make_trajectory(prompt, actions)
}

/// Sum of per-step log probabilities of the trajectory's actions.
///
/// Finite for softmax policies; may be negative infinity when a tabular
/// policy assigns zero mass to an action on the path.
pub fn log_prob(mdp: &TokenMdp, policy: &dyn Policy, traj: &Trajectory) -> Result<f64> {
    if traj.actions.len() != mdp.horizon() {
        return Err(Error::MalformedTrajectory(format!(
            "trajectory length {} vs horizon {}",
            traj.actions.len(),
            mdp.horizon()
        )));
    }
    let mut total = 0.0;
    for (h, &a) in traj.actions.iter().enumerate() {
        let dist = policy.action_distribution(mdp, traj.prompt, &traj.actions[..h])?;
        if a as usize >= dist.len() {
            return Err(Error::MalformedTrajectory(format!(
                "action {a} out of range"
            )));
        }
        total += dist[a as usize].ln();
    }
    Ok(total)
}

/// Depth-first walk over all trajectories of one prompt with their policy
/// probabilities. Children are visited in ascending action order and
/// zero-probability branches are pruned, so the visit order and the floating
/// point accumulation order are fixed.
pub(crate) fn for_each_trajectory(
    mdp: &TokenMdp,
    policy: &dyn Policy,
    prompt: u32,
    f: &mut dyn FnMut(f64, &[u32]) -> Result<()>,
) -> Result<()> {
    mdp.check_cap("exact enumeration")?;
    fn descend(
        mdp: &TokenMdp,
        policy: &dyn Policy,
        prompt: u32,
        actions: &mut Vec<u32>,
        prob: f64,
        f: &mut dyn FnMut(f64, &[u32]) -> Result<()>,
    ) -> Result<()> {
        if actions.len() == mdp.horizon() {
            return f(prob, actions);
        }
        let dist = policy.action_distribution(mdp, prompt, actions)?;
        for (a, &p) in dist.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            actions.push(a as u32);
            descend(mdp, policy, prompt, actions, prob * p, f)?;
            actions.pop();
        }
        Ok(())
    }
    let mut actions = Vec::with_capacity(mdp.horizon());
    descend(mdp, policy, prompt, &mut actions, 1.0, f)
}

/// Exact expected trajectory reward under the prompt distribution.
pub fn exact_value(mdp: &TokenMdp, policy: &dyn Policy, reward: &LinearReward) -> Result<f64> {
    let mut value = 0.0;
    for prompt in 0..mdp.prompt_count() {
        let weight = mdp.prompt_distribution()[prompt as usize];
        if weight == 0.0 {
            continue;
        }
        let mut prompt_value = 0.0;
        for_each_trajectory(mdp, policy, prompt, &mut |prob, actions| {
            let phi = mdp.trajectory_features(prompt, actions)?;
            prompt_value += prob * dot(reward.theta(), &phi);
            Ok(())
        })?;
        value += weight * prompt_value;
    }
    Ok(value)
}

/// Monte Carlo value estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub samples: usize,
}

/// Estimates expected trajectory reward from `n` rollouts.
pub fn mc_value(
    mdp: &TokenMdp,
    policy: &dyn Policy,
    reward: &LinearReward,
    n: usize,
    rng: &mut impl Rng,
) -> Result<McEstimate> {
    if n == 0 {
        return Err(Error::ConfigInvalid("mc_value needs at least one sample".into()));
    }
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        let prompt = mdp.sample_prompt(rng);
        let traj = rollout(mdp, policy, prompt, rng)?;
        values.push(reward.traj_reward(mdp, &traj)?);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std_error = if n < 2 {
        0.0
    } else {
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0);
        (var / n as f64).sqrt()
    };
    Ok(McEstimate {
        mean,
        std_error,
        samples: n,
    })
}

/// Exact expected trajectory features under the prompt distribution.
pub fn feature_expectation(mdp: &TokenMdp, policy: &dyn Policy) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; mdp.feature_dim()];
    for prompt in 0..mdp.prompt_count() {
        let weight = mdp.prompt_distribution()[prompt as usize];
        if weight == 0.0 {
            continue;
        }
        for_each_trajectory(mdp, policy, prompt, &mut |prob, actions| {
            let phi = mdp.trajectory_features(prompt, actions)?;
            for (a, x) in acc.iter_mut().zip(&phi) {
                *a += weight * prob * x;
            }
            Ok(())
        })?;
    }
    Ok(acc)
}

/// Monte Carlo estimate of expected trajectory features.
pub fn feature_expectation_mc(
    mdp: &TokenMdp,
    policy: &dyn Policy,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::ConfigInvalid(
            "feature_expectation_mc needs at least one sample".into(),
        ));
    }
    let mut acc = vec![0.0; mdp.feature_dim()];
    for _ in 0..n {
        let prompt = mdp.sample_prompt(rng);
        let traj = rollout(mdp, policy, prompt, rng)?;
        for (a, x) in acc.iter_mut().zip(&traj.features) {
            *a += x;
        }
    }
    for a in acc.iter_mut() {
        *a /= n as f64;
    }
    Ok(acc)
}

/// Dynamic programming solution under a linear reward.
#[derive(Debug, Clone)]
pub struct DpSolve {
    pub policy: TabularPolicy,
    /// Optimal value under the prompt distribution.
    pub value: f64,
}

/// Backward induction over the prefix tree.
///
/// Action values carry the from-root discount weight, so maximization at
/// depth h compares `discount^h * r(s, a) +` continuation. Ties go to the
/// smallest action index. With `temperature > 0` the returned policy is a
/// softmax over these root-weighted action values instead of the argmax;
/// the reported value is always the hard optimum.
pub fn dp_solve(mdp: &TokenMdp, reward: &LinearReward, temperature: f64) -> Result<DpSolve> {
    mdp.check_cap("dp_solve")?;
    if temperature < 0.0 || !temperature.is_finite() {
        return Err(Error::ConfigInvalid(format!(
            "teacher temperature must be non-negative, got {temperature}"
        )));
    }
    reward.check_dim(mdp)?;
    fn descend(
        mdp: &TokenMdp,
        reward: &LinearReward,
        temperature: f64,
        policy: &mut TabularPolicy,
        prompt: u32,
        state: &mut Vec<u32>,
        weight: f64,
    ) -> f64 {
        let vocab = mdp.vocab_size() as usize;
        let mut q = vec![0.0; vocab];
        for a in 0..vocab {
            let step = mdp
                .features()
                .with_psi(prompt, state, a as u32, |psi| dot(reward.theta(), psi));
            let cont = if state.len() + 1 == mdp.horizon() {
                0.0
            } else {
                state.push(a as u32);
                let v = descend(
                    mdp,
                    reward,
                    temperature,
                    policy,
                    prompt,
                    state,
                    weight * mdp.discount(),
                );
                state.pop();
                v
            };
            q[a] = weight * step + cont;
        }
        let mut best = 0usize;
        for a in 1..vocab {
            if q[a] > q[best] {
                best = a;
            }
        }
        let dist = if temperature == 0.0 {
            let mut d = vec![0.0; vocab];
            d[best] = 1.0;
            d
        } else {
            let top = q[best];
            let mut d: Vec<f64> = q.iter().map(|&v| ((v - top) / temperature).exp()).collect();
            let total: f64 = d.iter().sum();
            for p in d.iter_mut() {
                *p /= total;
            }
            d
        };
        policy.insert(prompt, state.clone(), dist);
        q[best]
    }
    let mut policy = TabularPolicy::new();
    let mut value = 0.0;
    for prompt in 0..mdp.prompt_count() {
        let mut state = Vec::with_capacity(mdp.horizon());
        let root = descend(mdp, reward, temperature, &mut policy, prompt, &mut state, 1.0);
        value += mdp.prompt_distribution()[prompt as usize] * root;
    }
    Ok(DpSolve { policy, value })
}

/// Deterministic optimal policy under the reward.
pub fn dp_optimal_policy(mdp: &TokenMdp, reward: &LinearReward) -> Result<TabularPolicy> {
    Ok(dp_solve(mdp, reward, 0.0)?.policy)
}

/// Teacher construction: the DP-optimal policy, optionally softened to a
/// softmax over action values at the given temperature.
pub fn teacher_policy(
    mdp: &TokenMdp,
    reward: &LinearReward,
    temperature: f64,
) -> Result<TabularPolicy> {
    Ok(dp_solve(mdp, reward, temperature)?.policy)
}

/// Writes a deterministic policy into a softmax table by putting `logit` on
/// each state's greedy action and zero elsewhere.
///
/// Every prefix of every prompt is visited, so aliased rows (context shorter
/// than the prefix) are overwritten by the longest prefix visited last; the
/// copy is exact only when `context_len` covers the full prefix. The source
/// policy's most probable action is taken, with ties going to the smallest
/// action index.
pub fn clone_deterministic(
    mdp: &TokenMdp,
    source: &dyn Policy,
    context_len: usize,
    temperature: f64,
    logit: f64,
) -> Result<SoftmaxLinearPolicy> {
    if !logit.is_finite() {
        return Err(Error::ConfigInvalid("clone logit must be finite".into()));
    }
    mdp.check_cap("clone_deterministic")?;
    let mut policy = SoftmaxLinearPolicy::zeros(mdp, context_len, temperature)?;
    let vocab = mdp.vocab_size() as usize;
    for prompt in 0..mdp.prompt_count() {
        let mut prefix: Vec<u32> = Vec::with_capacity(mdp.horizon());
        loop {
            let dist = source.action_distribution(mdp, prompt, &prefix)?;
            let mut best = 0usize;
            for (a, &p) in dist.iter().enumerate() {
                if p > dist[best] {
                    best = a;
                }
            }
            let offset = policy.row_offset(prompt, &prefix);
            for a in 0..vocab {
                policy.weights_mut()[offset + a] = if a == best { logit } else { 0.0 };
            }
            if prefix.len() + 1 < mdp.horizon() {
                prefix.push(0);
                continue;
            }
            // Odometer over prefixes of every length below the horizon.
            while let Some(last) = prefix.pop() {
                if (last as usize) + 1 < vocab {
                    prefix.push(last + 1);
                    break;
                }
            }
            if prefix.is_empty() {
                break;
            }
        }
    }
    Ok(policy)
}

/// Options for behavior cloning.
#[derive(Debug, Clone, PartialEq)]
pub struct BcOptions {
    pub context_len: usize,
    pub temperature: f64,
    pub epochs: usize,
    /// Initial step size for the backtracking line search.
    pub step: f64,
}

impl Default for BcOptions {
    fn default() -> Self {
        Self {
            context_len: 1,
            temperature: 1.0,
            epochs: 200,
            step: 0.5,
        }
    }
}

/// Behavior cloning report.
#[derive(Debug, Clone)]
pub struct BcReport {
    /// Negative total log likelihood after each accepted epoch.
    pub losses: Vec<f64>,
    pub final_loss: f64,
}

/// Fits a softmax-linear policy to demonstrations by full-batch gradient
/// ascent on total log likelihood with a backtracking step size, so the
/// reported loss never increases across epochs.
pub fn behavior_cloning_fit(
    mdp: &TokenMdp,
    trajectories: &[Trajectory],
    opts: &BcOptions,
) -> Result<(SoftmaxLinearPolicy, BcReport)> {
    if trajectories.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut policy = SoftmaxLinearPolicy::zeros(mdp, opts.context_len, opts.temperature)?;
    // State rows never change, so resolve them once.
    let mut steps = Vec::new();
    for traj in trajectories {
        if traj.actions.len() != mdp.horizon() {
            return Err(Error::MalformedTrajectory(
                "demonstration length does not match horizon".into(),
            ));
        }
        for (h, &a) in traj.actions.iter().enumerate() {
            policy.check_state(mdp, traj.prompt, &traj.actions[..h])?;
            steps.push((policy.row_offset(traj.prompt, &traj.actions[..h]), a));
        }
    }
    let loss_of = |p: &SoftmaxLinearPolicy| -> f64 {
        let mut total = 0.0;
        for &(offset, a) in &steps {
            let dist = p.distribution_at(offset);
            total -= dist[a as usize].ln();
        }
        total
    };
    let grad_of = |p: &SoftmaxLinearPolicy| -> Vec<f64> {
        let mut grad = vec![0.0; p.param_len()];
        for &(offset, a) in &steps {
            let dist = p.distribution_at(offset);
            p.accumulate_log_grad(&mut grad, offset, &dist, a, 1.0);
        }
        grad
    };
    let mut loss = loss_of(&policy);
    let mut losses = vec![loss];
    let mut step = opts.step;
    for _ in 0..opts.epochs {
        let grad = grad_of(&policy);
        if norm2(&grad) <= 1e-10 {
            break;
        }
        let mut accepted = false;
        for _ in 0..40 {
            let mut candidate = policy.clone();
            candidate.apply_step(&grad, step)?;
            let candidate_loss = loss_of(&candidate);
            if candidate_loss <= loss {
                policy = candidate;
                loss = candidate_loss;
                step = (step * 1.5).min(opts.step * 64.0);
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        losses.push(loss);
    }
    Ok((
        policy,
        BcReport {
            final_loss: loss,
            losses,
        },
    ))
}

/// Samples `n` candidates and returns the one the reward model scores
/// highest; ties keep the earliest candidate.
pub fn best_of_n(
    mdp: &TokenMdp,
    policy: &dyn Policy,
    reward: &LinearReward,
    prompt: u32,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Trajectory> {
    if n == 0 {
        return Err(Error::ConfigInvalid("best_of_n needs n >= 1".into()));
    }
    let mut best = rollout(mdp, policy, prompt, rng)?;
    let mut best_score = reward.traj_reward(mdp, &best)?;
    for _ in 1..n {
        let candidate = rollout(mdp, policy, prompt, rng)?;
        let score = reward.traj_reward(mdp, &candidate)?;
        if score > best_score {
            best = candidate;
            best_score = score;
        }
    }
    Ok(best)
}

/// Exact policy gradient of `E_trajectory[score(trajectory)]` with respect to
/// the softmax weights, computed by enumerating the prefix tree.
pub(crate) fn exact_score_gradient(
    mdp: &TokenMdp,
    policy: &SoftmaxLinearPolicy,
    score: &mut dyn FnMut(u32, &[u32]) -> Result<f64>,
) -> Result<Vec<f64>> {
    policy.check_shape(mdp)?;
    let mut grad = vec![0.0; policy.param_len()];
    for prompt in 0..mdp.prompt_count() {
        let weight = mdp.prompt_distribution()[prompt as usize];
        if weight == 0.0 {
            continue;
        }
        // Path of (row offset, action, distribution) triples.
        let mut path: Vec<(usize, u32, Vec<f64>)> = Vec::with_capacity(mdp.horizon());
        fn descend(
            mdp: &TokenMdp,
            policy: &SoftmaxLinearPolicy,
            prompt: u32,
            actions: &mut Vec<u32>,
            path: &mut Vec<(usize, u32, Vec<f64>)>,
            prob: f64,
            grad: &mut [f64],
            score: &mut dyn FnMut(u32, &[u32]) -> Result<f64>,
            weight: f64,
        ) -> Result<()> {
            if actions.len() == mdp.horizon() {
                let coeff = weight * prob * score(prompt, actions)?;
                if coeff != 0.0 {
                    for (offset, action, dist) in path.iter() {
                        policy.accumulate_log_grad(grad, *offset, dist, *action, coeff);
                    }
                }
                return Ok(());
            }
            let offset = policy.row_offset(prompt, actions);
            let dist = policy.distribution_at(offset);
            for (a, &p) in dist.iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                actions.push(a as u32);
                path.push((offset, a as u32, dist.clone()));
                descend(mdp, policy, prompt, actions, path, prob * p, grad, score, weight)?;
                path.pop();
                actions.pop();
            }
            Ok(())
        }
        let mut actions = Vec::with_capacity(mdp.horizon());
        descend(
            mdp,
            policy,
            prompt,
            &mut actions,
            &mut path,
            1.0,
            &mut grad,
            score,
            weight,
        )?;
    }
    Ok(grad)
}

/// Score-function estimate of the same gradient from sampled trajectories,
/// with an optional batch-mean baseline.
pub(crate) fn mc_score_gradient(
    mdp: &TokenMdp,
    policy: &SoftmaxLinearPolicy,
    batch: &[Trajectory],
    scores: &[f64],
    baseline: bool,
) -> Result<Vec<f64>> {
    policy.check_shape(mdp)?;
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if batch.len() != scores.len() {
        return Err(Error::DimensionMismatch(
            "batch and score lengths differ".into(),
        ));
    }
    let b = if baseline {
        scores.iter().sum::<f64>() / scores.len() as f64
    } else {
        0.0
    };
    let mut grad = vec![0.0; policy.param_len()];
    let inv_m = 1.0 / batch.len() as f64;
    for (traj, &s) in batch.iter().zip(scores) {
        let coeff = inv_m * (s - b);
        for (h, &a) in traj.actions.iter().enumerate() {
            let offset = policy.row_offset(traj.prompt, &traj.actions[..h]);
            let dist = policy.distribution_at(offset);
            policy.accumulate_log_grad(&mut grad, offset, &dist, a, coeff);
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::MdpSpec;
    use crate::seed::SeedSpring;
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

    fn random_reward(mdp: &TokenMdp, seed: u64, norm: f64) -> LinearReward {
        let mut rng = SeedSpring::new(seed).stream("theta");
        let mut theta: Vec<f64> = (0..mdp.feature_dim()).map(|_| rng.gen::<f64>() - 0.5).collect();
        let n = norm2(&theta);
        for x in theta.iter_mut() {
            *x *= norm / n;
        }
        LinearReward::new(theta, 2.0).unwrap()
    }

    #[test]
    fn zero_weights_give_the_uniform_distribution() {
        let mdp = tiny();
        let policy = SoftmaxLinearPolicy::zeros(&mdp, 1, 1.0).unwrap();
        let dist = policy.action_distribution(&mdp, 0, &[1]).unwrap();
        for p in dist {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn distributions_normalize_and_stay_positive() {
        let mdp = tiny();
        let mut policy = SoftmaxLinearPolicy::zeros(&mdp, 2, 0.7).unwrap();
        let mut rng = SeedSpring::new(3).stream("weights");
        for w in policy.weights_mut() {
            *w = 4.0 * (rng.gen::<f64>() - 0.5);
        }
        for state in [&[][..], &[0][..], &[2, 1][..]] {
            let dist = policy.action_distribution(&mdp, 1, state).unwrap();
            assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(dist.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn shifting_a_whole_logit_row_leaves_the_distribution_unchanged() {
        let mdp = tiny();
        let mut policy = SoftmaxLinearPolicy::zeros(&mdp, 1, 1.3).unwrap();
        let mut rng = SeedSpring::new(4).stream("weights");
        for w in policy.weights_mut() {
            *w = rng.gen::<f64>();
        }
        let before = policy.action_distribution(&mdp, 0, &[2]).unwrap();
        let offset = policy.row_offset(0, &[2]);
        for v in 0..3 {
            policy.weights_mut()[offset + v] += 5.0;
        }
        let after = policy.action_distribution(&mdp, 0, &[2]).unwrap();
        for (a, b) in before.iter().zip(&after) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn tabular_lookup_errors_off_support() {
        let mdp = tiny();
        let mut policy = TabularPolicy::new();
        policy.insert(0, vec![], vec![1.0, 0.0, 0.0]);
        assert!(policy.action_distribution(&mdp, 0, &[]).is_ok());
        assert!(matches!(
            policy.action_distribution(&mdp, 0, &[1]),
            Err(Error::UnknownState(_))
        ));
    }

    #[test]
    fn rollouts_are_seed_deterministic() {
        let mdp = tiny();
        let policy = SoftmaxLinearPolicy::uniform(&mdp).unwrap();
        let spring = SeedSpring::new(11);
        let a = rollout(&mdp, &policy, 0, &mut spring.stream("r")).unwrap();
        let b = rollout(&mdp, &policy, 0, &mut spring.stream("r")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rollout_of_a_deterministic_policy_follows_the_argmax_path() {
        let mdp = tiny();
        let reward = random_reward(&mdp, 9, 1.0);
        let teacher = dp_optimal_policy(&mdp, &reward).unwrap();
        let spring = SeedSpring::new(5);
        let traj = rollout(&mdp, &teacher, 1, &mut spring.stream("r")).unwrap();
        // Recompute the greedy path by hand.
        let mut state: Vec<u32> = vec![];
        for _ in 0..mdp.horizon() {
            let dist = teacher.action_distribution(&mdp, 1, &state).unwrap();
            let a = dist.iter().position(|&p| p == 1.0).unwrap() as u32;
            state.push(a);
        }
        assert_eq!(traj.actions, state);
    }

    #[test]
    fn log_prob_sums_per_step_logs_and_stays_finite_for_softmax() {
        let mdp = tiny();
        let policy = SoftmaxLinearPolicy::uniform(&mdp).unwrap();
        let traj = mdp.make_trajectory(0, vec![2, 0, 1]).unwrap();
        let lp = log_prob(&mdp, &policy, &traj).unwrap();
        assert!((lp - 3.0 * (1.0f64 / 3.0).ln()).abs() < 1e-12);
        assert!(lp.is_finite());
    }

    #[test]
    fn exact_value_of_a_deterministic_policy_is_that_trajectorys_reward() {
        let mdp = tiny();
        let reward = random_reward(&mdp, 21, 1.5);
        let teacher = dp_optimal_policy(&mdp, &reward).unwrap();
        let value = exact_value(&mdp, &teacher, &reward).unwrap();
        let mut expect = 0.0;
        for prompt in 0..mdp.prompt_count() {
            let spring = SeedSpring::new(0);
            let traj = rollout(&mdp, &teacher, prompt, &mut spring.stream("x")).unwrap();
            expect += mdp.prompt_distribution()[prompt as usize]
                * reward.traj_reward(&mdp, &traj).unwrap();
        }
        assert!((value - expect).abs() < 1e-12);
    }

    #[test]
    fn exact_value_is_linear_in_the_feature_expectation() {
        let mdp = tiny();
        let spring = SeedSpring::new(7);
        for trial in 0..100 {
            let reward = random_reward(&mdp, 1000 + trial, 1.2);
            let mut policy = SoftmaxLinearPolicy::zeros(&mdp, 1, 1.0).unwrap();
            let mut rng = spring.substream("w", trial);
            for w in policy.weights_mut() {
                *w = 2.0 * (rng.gen::<f64>() - 0.5);
            }
            let direct = exact_value(&mdp, &policy, &reward).unwrap();
            let phi = feature_expectation(&mdp, &policy).unwrap();
            let via_features = dot(reward.theta(), &phi);
            assert!(
                (direct - via_features).abs() <= 1e-10,
                "trial {trial}: {direct} vs {via_features}"
            );
        }
    }

    #[test]
    fn mc_value_with_one_sample_of_a_deterministic_policy_is_exact() {
        let mdp = tiny();
        let reward = random_reward(&mdp, 33, 0.8);
        let teacher = dp_optimal_policy(&mdp, &reward).unwrap();
        let spring = SeedSpring::new(1);
        let est = mc_value(&mdp, &teacher, &reward, 1, &mut spring.stream("mc")).unwrap();
        let prompt = {
            let mut rng = spring.stream("mc");
            mdp.sample_prompt(&mut rng)
        };
        let exact_traj = {
            let spring2 = SeedSpring::new(2);
            rollout(&mdp, &teacher, prompt, &mut spring2.stream("any")).unwrap()
        };
        assert_eq!(est.std_error, 0.0);
        assert_eq!(est.mean, reward.traj_reward(&mdp, &exact_traj).unwrap());
    }

    #[test]
    fn feature_expectation_of_a_deterministic_policy_matches_its_trajectory() {
        let mut spec = MdpSpec {
            vocab_size: 3,
            horizon: 3,
            prompt_count: 1,
            prompt_distribution: None,
            discount: 1.0,
            feature_dim: 5,
            context_len: 1,
            feature_seed: 42,
            enumeration_cap: 1_000_000,
        };
        spec.prompt_distribution = Some(vec![1.0]);
        let mdp = spec.build().unwrap();
        let reward = random_reward(&mdp, 2, 1.0);
        let teacher = dp_optimal_policy(&mdp, &reward).unwrap();
        let phi = feature_expectation(&mdp, &teacher).unwrap();
        let spring = SeedSpring::new(0);
        let traj = rollout(&mdp, &teacher, 0, &mut spring.stream("r")).unwrap();
        assert_eq!(phi, traj.features);
    }

    #[test]
    fn dp_value_matches_brute_force_enumeration() {
        let mdp = tiny();
        for trial in 0..20 {
            let reward = random_reward(&mdp, 300 + trial, 1.3);
            let solve = dp_solve(&mdp, &reward, 0.0).unwrap();
            let mut brute = 0.0;
            for prompt in 0..mdp.prompt_count() {
                let best = mdp
                    .enumerate_trajectories(prompt)
                    .unwrap()
                    .iter()
                    .map(|t| reward.traj_reward(&mdp, t).unwrap())
                    .fold(f64::NEG_INFINITY, f64::max);
                brute += mdp.prompt_distribution()[prompt as usize] * best;
            }
            assert!(
                (solve.value - brute).abs() <= 1e-10,
                "trial {trial}: dp {} vs brute {brute}",
                solve.value
            );
        }
    }

    #[test]
    fn dp_breaks_ties_toward_the_smallest_action() {
        let mdp = tiny();
        let zero = LinearReward::new(vec![0.0; mdp.feature_dim()], 1.0).unwrap();
        let policy = dp_optimal_policy(&mdp, &zero).unwrap();
        for state in [&[][..], &[0][..], &[2, 2][..]] {
            let dist = policy.action_distribution(&mdp, 0, state).unwrap();
            assert_eq!(dist[0], 1.0);
        }
    }

    #[test]
    fn zero_discount_makes_later_positions_tie_to_action_zero() {
        let mut spec = MdpSpec {
            vocab_size: 3,
            horizon: 3,
            prompt_count: 1,
            prompt_distribution: None,
            discount: 0.0,
            feature_dim: 5,
            context_len: 1,
            feature_seed: 42,
            enumeration_cap: 1_000_000,
        };
        spec.prompt_distribution = Some(vec![1.0]);
        let mdp = spec.build().unwrap();
        let reward = random_reward(&mdp, 8, 1.0);
        let policy = dp_optimal_policy(&mdp, &reward).unwrap();
        // Depth 0 follows the immediate reward; deeper levels have zero
        // weight on every action and must fall back to action 0.
        let d1 = policy.action_distribution(&mdp, 0, &[1]).unwrap();
        let d2 = policy.action_distribution(&mdp, 0, &[1, 2]).unwrap();
        assert_eq!(d1[0], 1.0);
        assert_eq!(d2[0], 1.0);
        let d0 = policy.action_distribution(&mdp, 0, &[]).unwrap();
        let best = (0..3)
            .max_by(|&a, &b| {
                let ra = mdp.features().with_psi(0, &[], a, |p| dot(reward.theta(), p));
                let rb = mdp.features().with_psi(0, &[], b, |p| dot(reward.theta(), p));
                ra.partial_cmp(&rb).unwrap()
            })
            .unwrap();
        assert_eq!(d0[best as usize], 1.0);
    }

    #[test]
    fn softened_teacher_interpolates_between_greedy_and_uniform() {
        let mdp = tiny();
        let reward = random_reward(&mdp, 15, 1.5);
        let sharp = teacher_policy(&mdp, &reward, 1e-4).unwrap();
        let soft = teacher_policy(&mdp, &reward, 1e4).unwrap();
        let greedy = dp_optimal_policy(&mdp, &reward).unwrap();
        let g = greedy.action_distribution(&mdp, 0, &[]).unwrap();
        let s = sharp.action_distribution(&mdp, 0, &[]).unwrap();
        let u = soft.action_distribution(&mdp, 0, &[]).unwrap();
        let best = g.iter().position(|&p| p == 1.0).unwrap();
        assert!(s[best] > 0.999);
        for p in u {
            assert!((p - 1.0 / 3.0).abs() < 1e-3);
        }
    }

    #[test]
    fn behavior_cloning_memorizes_a_single_demonstration() {
        let mdp = tiny();
        let traj = mdp.make_trajectory(0, vec![2, 1, 0]).unwrap();
        let opts = BcOptions {
            context_len: 2,
            epochs: 300,
            ..BcOptions::default()
        };
        let (policy, report) = behavior_cloning_fit(&mdp, &[traj.clone()], &opts).unwrap();
        let p = log_prob(&mdp, &policy, &traj).unwrap().exp();
        assert!(p >= 0.9, "memorized probability {p}");
        for w in report.losses.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
        assert!((report.final_loss - -log_prob(&mdp, &policy, &traj).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn behavior_cloning_rejects_an_empty_dataset() {
        let mdp = tiny();
        assert!(matches!(
            behavior_cloning_fit(&mdp, &[], &BcOptions::default()),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn behavior_cloning_recovers_a_stochastic_teacher_roughly() {
        let mdp = tiny();
        let reward = random_reward(&mdp, 77, 1.5);
        let teacher = teacher_policy(&mdp, &reward, 1.0).unwrap();
        let spring = SeedSpring::new(99);
        let mut rng = spring.stream("demos");
        let trajs: Vec<Trajectory> = (0..2000)
            .map(|_| {
                let prompt = mdp.sample_prompt(&mut rng);
                rollout(&mdp, &teacher, prompt, &mut rng).unwrap()
            })
            .collect();
        let opts = BcOptions {
            context_len: 2,
            epochs: 150,
            ..BcOptions::default()
        };
        let (student, _) = behavior_cloning_fit(&mdp, &trajs, &opts).unwrap();
        let t = teacher.action_distribution(&mdp, 0, &[]).unwrap();
        let s = student.action_distribution(&mdp, 0, &[]).unwrap();
        for (a, b) in t.iter().zip(&s) {
            assert!((a - b).abs() < 0.08, "teacher {t:?} student {s:?}");
        }
    }

    #[test]
    fn best_of_one_equals_a_plain_rollout() {
        let mdp = tiny();
        let policy = SoftmaxLinearPolicy::uniform(&mdp).unwrap();
        let reward = random_reward(&mdp, 1, 1.0);
        let spring = SeedSpring::new(6);
        let a = best_of_n(&mdp, &policy, &reward, 1, 1, &mut spring.stream("bon")).unwrap();
        let b = rollout(&mdp, &policy, 1, &mut spring.stream("bon")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn best_of_n_picks_the_highest_scoring_candidate() {
        let mdp = tiny();
        let policy = SoftmaxLinearPolicy::uniform(&mdp).unwrap();
        let reward = random_reward(&mdp, 13, 1.5);
        let spring = SeedSpring::new(8);
        let chosen = best_of_n(&mdp, &policy, &reward, 0, 16, &mut spring.stream("bon")).unwrap();
        // Replay the same stream to recover the candidate set.
        let mut rng = spring.stream("bon");
        let mut best_score = f64::NEG_INFINITY;
        let mut best: Option<Trajectory> = None;
        for _ in 0..16 {
            let t = rollout(&mdp, &policy, 0, &mut rng).unwrap();
            let s = reward.traj_reward(&mdp, &t).unwrap();
            if s > best_score {
                best_score = s;
                best = Some(t);
            }
        }
        assert_eq!(chosen, best.unwrap());
    }

    #[test]
    fn ties_keep_the_earliest_candidate() {
        let mdp = tiny();
        let policy = SoftmaxLinearPolicy::uniform(&mdp).unwrap();
        let zero = LinearReward::new(vec![0.0; mdp.feature_dim()], 1.0).unwrap();
        let spring = SeedSpring::new(10);
        let chosen = best_of_n(&mdp, &policy, &zero, 0, 8, &mut spring.stream("bon")).unwrap();
        let first = rollout(&mdp, &policy, 0, &mut spring.stream("bon")).unwrap();
        assert_eq!(chosen, first);
    }

    #[test]
    fn score_function_gradient_matches_common_random_number_finite_differences() {
        let mdp = MdpSpec {
            vocab_size: 2,
            horizon: 2,
            prompt_count: 1,
            prompt_distribution: Some(vec![1.0]),
            discount: 1.0,
            feature_dim: 3,
            context_len: 1,
            feature_seed: 5,
            enumeration_cap: 1_000_000,
        }
        .build()
        .unwrap();
        let reward = random_reward(&mdp, 50, 1.0);
        let mut policy = SoftmaxLinearPolicy::zeros(&mdp, 1, 1.0).unwrap();
        policy.weights_mut()[0] = 0.3;
        policy.weights_mut()[3] = -0.2;

        let coord = 0usize;
        let eps = 5e-3;
        let n = 60_000usize;
        let spring = SeedSpring::new(404);

        let mc_at = |w: f64, rng_label: &str| -> Vec<f64> {
            let mut p = policy.clone();
            p.weights_mut()[coord] = w;
            let mut rng = spring.stream(rng_label);
            (0..n)
                .map(|_| {
                    let t = rollout(&mdp, &p, 0, &mut rng).unwrap();
                    reward.traj_reward(&mdp, &t).unwrap()
                })
                .collect()
        };
        let base = policy.weights()[coord];
        let plus = mc_at(base + eps, "crn");
        let minus = mc_at(base - eps, "crn");
        let diffs: Vec<f64> = plus
            .iter()
            .zip(&minus)
            .map(|(a, b)| (a - b) / (2.0 * eps))
            .collect();
        let fd = diffs.iter().sum::<f64>() / n as f64;
        let var = diffs.iter().map(|d| (d - fd) * (d - fd)).sum::<f64>() / (n as f64 - 1.0);
        let se = (var / n as f64).sqrt();

        let mut score = |prompt: u32, actions: &[u32]| -> Result<f64> {
            let phi = mdp.trajectory_features(prompt, actions)?;
            Ok(dot(reward.theta(), &phi))
        };
        let exact = exact_score_gradient(&mdp, &policy, &mut score).unwrap();
        assert!(
            (fd - exact[coord]).abs() <= 3.0 * se.max(1e-4),
            "fd {fd} vs exact {} (se {se})",
            exact[coord]
        );
    }

    #[test]
    fn mc_score_gradient_agrees_with_the_exact_gradient_in_expectation() {
        let mdp = tiny();
        let reward = random_reward(&mdp, 60, 1.2);
        let mut policy = SoftmaxLinearPolicy::zeros(&mdp, 1, 1.0).unwrap();
        let spring = SeedSpring::new(61);
        let mut wrng = spring.stream("w");
        for w in policy.weights_mut() {
            *w = 0.6 * (wrng.gen::<f64>() - 0.5);
        }
        let mut score = |prompt: u32, actions: &[u32]| -> Result<f64> {
            let phi = mdp.trajectory_features(prompt, actions)?;
            Ok(dot(reward.theta(), &phi))
        };
        let exact = exact_score_gradient(&mdp, &policy, &mut score).unwrap();
        let mut rng = spring.stream("batch");
        let batch: Vec<Trajectory> = (0..40_000)
            .map(|_| {
                let prompt = mdp.sample_prompt(&mut rng);
                rollout(&mdp, &policy, prompt, &mut rng).unwrap()
            })
            .collect();
        let scores: Vec<f64> = batch
            .iter()
            .map(|t| reward.traj_reward(&mdp, t).unwrap())
            .collect();
        let mc = mc_score_gradient(&mdp, &policy, &batch, &scores, true).unwrap();
        let err = norm2(&crate::vecmath::sub(&mc, &exact));
        assert!(err < 0.05 * norm2(&exact).max(0.1), "err {err}");
    }
}
