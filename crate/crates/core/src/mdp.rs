//! Synthetic token-generation MDP.
//!
//! States are token prefixes, actions are vocabulary tokens, transitions are
//! deterministic concatenation, and episodes last exactly `horizon` steps.
//! Each (prompt, context, position, action) tuple carries a fixed step
//! feature vector drawn from a seeded random projection; trajectory features
//! are the discount-weighted sum of step features.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{hash_bytes, mix};
use crate::vecmath::norm2;

fn default_context_len() -> usize {
    1
}

fn default_discount() -> f64 {
    1.0
}

fn default_enumeration_cap() -> u64 {
    1_000_000
}

/// Declarative MDP description, the form that appears in config files.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MdpSpec {
    pub vocab_size: u32,
    pub horizon: usize,
    pub prompt_count: u32,
    /// Prompt distribution d0; uniform when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_distribution: Option<Vec<f64>>,
    #[serde(default = "default_discount")]
    pub discount: f64,
    pub feature_dim: usize,
    /// Context length k of the step feature map.
    #[serde(default = "default_context_len")]
    pub context_len: usize,
    pub feature_seed: u64,
    #[serde(default = "default_enumeration_cap")]
    pub enumeration_cap: u64,
}

impl MdpSpec {
    pub fn build(&self) -> Result<TokenMdp> {
        TokenMdp::new(self.clone())
    }
}

/// Maps (position, last-k context) pairs to dense slot indices.
///
/// Positions before `k` have shorter contexts, so each position `h` owns a
/// block of `v^min(h, k)` slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct ContextIndexer {
    pub(crate) vocab: u32,
    pub(crate) horizon: usize,
    pub(crate) context_len: usize,
    /// Slot offset of each position's block.
    base: Vec<usize>,
    /// Total slots across all positions.
    pub(crate) total: usize,
}

impl ContextIndexer {
    pub(crate) fn new(vocab: u32, horizon: usize, context_len: usize) -> Result<Self> {
        let mut base = Vec::with_capacity(horizon);
        let mut total: usize = 0;
        for h in 0..horizon {
            base.push(total);
            let width = (vocab as u128).pow(h.min(context_len) as u32);
            let next = total as u128 + width;
            if next > 100_000_000 {
                return Err(Error::ConfigInvalid(format!(
                    "context space too large: vocab {vocab}, context_len {context_len}"
                )));
            }
            total = next as usize;
        }
        Ok(Self {
            vocab,
            horizon,
            context_len,
            base,
            total,
        })
    }

    /// Dense slot of the state reached after emitting `state` tokens.
    pub(crate) fn state_slot(&self, state: &[u32]) -> usize {
        let h = state.len();
        debug_assert!(h < self.horizon);
        let m = h.min(self.context_len);
        let mut code: usize = 0;
        for &t in &state[h - m..] {
            code = code * self.vocab as usize + t as usize;
        }
        self.base[h] + code
    }
}

/// One completed episode with cached trajectory features.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub prompt: u32,
    pub actions: Vec<u32>,
    /// Discount-weighted sum of step features, cached at construction.
    pub features: Vec<f64>,
}

/// Step feature map: a seeded random projection of the one-hot encoding of
/// (prompt, last-k context, position, action), scaled so every step feature
/// has Euclidean norm exactly 1 / horizon.
#[derive(Debug, Clone)]
pub struct StepFeatures {
    dim: usize,
    horizon: usize,
    seed: u64,
    indexer: ContextIndexer,
    /// Dense table of all step features when the tuple space is small.
    cache: Option<Vec<f64>>,
}

const FEATURE_CACHE_BUDGET: usize = 4_000_000;

impl StepFeatures {
    pub(crate) fn new(
        prompt_count: u32,
        vocab: u32,
        horizon: usize,
        context_len: usize,
        dim: usize,
        seed: u64,
    ) -> Result<Self> {
        let indexer = ContextIndexer::new(vocab, horizon, context_len)?;
        let mut out = Self {
            dim,
            horizon,
            seed,
            indexer,
            cache: None,
        };
        let entries = (prompt_count as u128)
            * (out.indexer.total as u128)
            * (vocab as u128)
            * (dim as u128);
        if entries <= FEATURE_CACHE_BUDGET as u128 {
            let n = entries as usize;
            let mut table = vec![0.0; n];
            for prompt in 0..prompt_count {
                for slot in 0..out.indexer.total {
                    for action in 0..vocab {
                        let at = out.entry_offset(prompt, slot, action);
                        out.generate(prompt, slot, action, &mut table[at..at + dim]);
                    }
                }
            }
            out.cache = Some(table);
        }
        Ok(out)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn entry_offset(&self, prompt: u32, slot: usize, action: u32) -> usize {
        (((prompt as usize) * self.indexer.total + slot) * self.indexer.vocab as usize
            + action as usize)
            * self.dim
    }

    /// Deterministically fills `out` with the feature of one tuple.
    fn generate(&self, prompt: u32, slot: usize, action: u32, out: &mut [f64]) {
        let mut s = mix(self.seed, hash_bytes(b"step-feature"));
        s = mix(s, u64::from(prompt));
        s = mix(s, slot as u64);
        s = mix(s, u64::from(action));
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        for x in out.iter_mut() {
            *x = rng.sample::<f64, _>(StandardNormal);
        }
        let n = norm2(out);
        if n == 0.0 {
            out.fill(0.0);
            out[0] = 1.0 / self.horizon as f64;
        } else {
            let scale = 1.0 / (n * self.horizon as f64);
            for x in out.iter_mut() {
                *x *= scale;
            }
        }
    }

    /// Runs `f` on the step feature of (prompt, state, action).
    pub(crate) fn with_psi<R>(
        &self,
        prompt: u32,
        state: &[u32],
        action: u32,
        f: impl FnOnce(&[f64]) -> R,
    ) -> R {
        let slot = self.indexer.state_slot(state);
        if let Some(table) = &self.cache {
            let at = self.entry_offset(prompt, slot, action);
            f(&table[at..at + self.dim])
        } else {
            let mut buf = vec![0.0; self.dim];
            self.generate(prompt, slot, action, &mut buf);
            f(&buf)
        }
    }

    /// Step feature as an owned vector.
    pub fn psi(&self, prompt: u32, state: &[u32], action: u32) -> Vec<f64> {
        self.with_psi(prompt, state, action, |p| p.to_vec())
    }

}

/// The synthetic MDP: shape parameters, prompt distribution, and the step
/// feature map. Immutable after construction.
#[derive(Debug, Clone)]
pub struct TokenMdp {
    spec: MdpSpec,
    d0: Vec<f64>,
    features: StepFeatures,
}

impl TokenMdp {
    pub fn new(spec: MdpSpec) -> Result<Self> {
        if spec.vocab_size == 0 {
            return Err(Error::ConfigInvalid("vocab_size must be positive".into()));
        }
        if spec.horizon == 0 {
            return Err(Error::ConfigInvalid("horizon must be positive".into()));
        }
        if spec.prompt_count == 0 {
            return Err(Error::ConfigInvalid("prompt_count must be positive".into()));
        }
        if spec.feature_dim == 0 {
            return Err(Error::ConfigInvalid("feature_dim must be positive".into()));
        }
        if !(0.0..=1.0).contains(&spec.discount) {
            return Err(Error::ConfigInvalid(format!(
                "discount must lie in [0, 1], got {}",
                spec.discount
            )));
        }
        let d0 = match &spec.prompt_distribution {
            None => {
                let p = 1.0 / f64::from(spec.prompt_count);
                vec![p; spec.prompt_count as usize]
            }
            Some(d) => {
                if d.len() != spec.prompt_count as usize {
                    return Err(Error::ConfigInvalid(format!(
                        "prompt_distribution has {} entries, prompt_count is {}",
                        d.len(),
                        spec.prompt_count
                    )));
                }
                if d.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                    return Err(Error::ConfigInvalid(
                        "prompt_distribution entries must be finite and non-negative".into(),
                    ));
                }
                let total: f64 = d.iter().sum();
                if (total - 1.0).abs() > 1e-12 {
                    return Err(Error::ConfigInvalid(format!(
                        "prompt_distribution sums to {total}, expected 1"
                    )));
                }
                d.clone()
            }
        };
        let features = StepFeatures::new(
            spec.prompt_count,
            spec.vocab_size,
            spec.horizon,
            spec.context_len,
            spec.feature_dim,
            spec.feature_seed,
        )?;
        Ok(Self { spec, d0, features })
    }

    pub fn spec(&self) -> &MdpSpec {
        &self.spec
    }

    pub fn vocab_size(&self) -> u32 {
        self.spec.vocab_size
    }

    pub fn horizon(&self) -> usize {
        self.spec.horizon
    }

    pub fn prompt_count(&self) -> u32 {
        self.spec.prompt_count
    }

    pub fn discount(&self) -> f64 {
        self.spec.discount
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim
    }

    pub fn enumeration_cap(&self) -> u64 {
        self.spec.enumeration_cap
    }

    pub fn prompt_distribution(&self) -> &[f64] {
        &self.d0
    }

    pub fn features(&self) -> &StepFeatures {
        &self.features
    }

    /// A fresh feature map over this MDP's state space with its own
    /// dimension and seed, for function classes decoupled from the reward.
    pub fn custom_features(&self, dim: usize, seed: u64) -> Result<StepFeatures> {
        if dim == 0 {
            return Err(Error::ConfigInvalid("feature dimension must be positive".into()));
        }
        StepFeatures::new(
            self.spec.prompt_count,
            self.spec.vocab_size,
            self.spec.horizon,
            self.spec.context_len,
            dim,
            seed,
        )
    }

    /// Number of trajectories per prompt, saturating on overflow.
    pub fn trajectory_count(&self) -> u64 {
        let mut n: u64 = 1;
        for _ in 0..self.spec.horizon {
            n = n.saturating_mul(u64::from(self.spec.vocab_size));
        }
        n
    }

    pub(crate) fn check_cap(&self, context: &str) -> Result<()> {
        let needed = self.trajectory_count();
        if needed > self.spec.enumeration_cap {
            let _ = context;
            return Err(Error::CapExceeded {
                needed,
                cap: self.spec.enumeration_cap,
            });
        }
        Ok(())
    }

    fn check_prompt(&self, prompt: u32) -> Result<()> {
        if prompt >= self.spec.prompt_count {
            return Err(Error::MalformedTrajectory(format!(
                "prompt {prompt} out of range (prompt_count {})",
                self.spec.prompt_count
            )));
        }
        Ok(())
    }

    /// Samples a prompt from d0 with one uniform draw.
    pub fn sample_prompt(&self, rng: &mut impl Rng) -> u32 {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, &p) in self.d0.iter().enumerate() {
            acc += p;
            if u < acc {
                return i as u32;
            }
        }
        self.spec.prompt_count - 1
    }

    /// Discount-weighted sum of step features along the action sequence.
    pub fn trajectory_features(&self, prompt: u32, actions: &[u32]) -> Result<Vec<f64>> {
        self.check_prompt(prompt)?;
        if actions.len() != self.spec.horizon {
            return Err(Error::MalformedTrajectory(format!(
                "trajectory length {} does not match horizon {}",
                actions.len(),
                self.spec.horizon
            )));
        }
        if let Some(&a) = actions.iter().find(|&&a| a >= self.spec.vocab_size) {
            return Err(Error::MalformedTrajectory(format!(
                "action {a} out of range (vocab_size {})",
                self.spec.vocab_size
            )));
        }
        let mut phi = vec![0.0; self.spec.feature_dim];
        let mut weight = 1.0;
        for (h, &a) in actions.iter().enumerate() {
            self.features.with_psi(prompt, &actions[..h], a, |psi| {
                for (acc, x) in phi.iter_mut().zip(psi) {
                    *acc += weight * x;
                }
            });
            weight *= self.spec.discount;
        }
        Ok(phi)
    }

    /// Builds a trajectory, validating shape and caching features.
    pub fn make_trajectory(&self, prompt: u32, actions: Vec<u32>) -> Result<Trajectory> {
        let features = self.trajectory_features(prompt, &actions)?;
        Ok(Trajectory {
            prompt,
            actions,
            features,
        })
    }

    /// All trajectories for a prompt in lexicographic action order.
    pub fn enumerate_trajectories(&self, prompt: u32) -> Result<Vec<Trajectory>> {
        self.check_prompt(prompt)?;
        self.check_cap("enumerate_trajectories")?;
        let count = self.trajectory_count() as usize;
        let mut out = Vec::with_capacity(count);
        let mut actions = vec![0u32; self.spec.horizon];
        loop {
            out.push(self.make_trajectory(prompt, actions.clone())?);
            // odometer increment in lexicographic order
            let mut pos = self.spec.horizon;
            loop {
                if pos == 0 {
                    return Ok(out);
                }
                pos -= 1;
                actions[pos] += 1;
                if actions[pos] < self.spec.vocab_size {
                    break;
                }
                actions[pos] = 0;
            }
        }
    }

    /// Stable hash of everything that defines this MDP's dynamics and
    /// features; used to refuse cross-task comparisons.
    pub fn fingerprint(&self) -> u64 {
        let mut s = hash_bytes(b"token-mdp-v1");
        s = mix(s, u64::from(self.spec.vocab_size));
        s = mix(s, self.spec.horizon as u64);
        s = mix(s, u64::from(self.spec.prompt_count));
        s = mix(s, self.spec.discount.to_bits());
        s = mix(s, self.spec.feature_dim as u64);
        s = mix(s, self.spec.context_len as u64);
        s = mix(s, self.spec.feature_seed);
        for &p in &self.d0 {
            s = mix(s, p.to_bits());
        }
        s
    }
}
