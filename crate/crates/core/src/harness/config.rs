//! On-disk experiment schema.
//!
//! A config file is a single JSON tree versioned by the `schema` field.
//! Unknown keys are hard errors everywhere: silent defaults are the main
//! reproducibility hazard, so anything the file says must be understood.
//!
//! Identity is split in two. `config_hash` ignores the master seed and the
//! cosmetic fields (`label`, `output_dir`), so runs of the same task and
//! algorithm group together across seeds. `run_id` additionally folds in the
//! master seed and names the run directory.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{MdpSpec, TokenMdp};
use crate::moment_match::QClassSpec;
use crate::offline::OfflineConfig;
use crate::online::OnlineConfig;
use crate::reward::LinearReward;
use crate::seed::{hash_bytes, SeedSpring};
use crate::vecmath::norm2;

/// Schema id every config file must carry.
pub const CONFIG_SCHEMA: &str = "pbkd-exp-v1";

fn default_bound() -> f64 {
    2.0
}

fn default_norm() -> f64 {
    1.0
}

fn default_mu0() -> BehaviorSpec {
    BehaviorSpec::SoftenedTeacher { temperature: 2.0 }
}

fn default_mu1() -> BehaviorSpec {
    BehaviorSpec::Uniform
}

fn default_n() -> usize {
    1000
}

/// Linear reward coefficients, either written out or drawn from a dedicated
/// seed. The seed lives in the spec rather than the master seed chain so the
/// task stays fixed while master seeds vary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum ThetaSpec {
    Values {
        values: Vec<f64>,
        #[serde(default = "default_bound")]
        bound: f64,
    },
    /// Uniform random direction scaled to `norm`.
    Random {
        seed: u64,
        #[serde(default = "default_norm")]
        norm: f64,
        #[serde(default = "default_bound")]
        bound: f64,
    },
}

impl ThetaSpec {
    pub fn build(&self, mdp: &TokenMdp) -> Result<LinearReward> {
        match self {
            ThetaSpec::Values { values, bound } => {
                if values.len() != mdp.feature_dim() {
                    return Err(Error::ConfigInvalid(format!(
                        "reward values have dimension {}, mdp features have {}",
                        values.len(),
                        mdp.feature_dim()
                    )));
                }
                LinearReward::new(values.clone(), *bound)
            }
            ThetaSpec::Random { seed, norm, bound } => {
                let mut rng = SeedSpring::new(*seed).stream("theta-spec");
                let mut theta: Vec<f64> = (0..mdp.feature_dim())
                    .map(|_| rng.sample(StandardNormal))
                    .collect();
                let mut len = norm2(&theta);
                while len < 1e-12 {
                    for x in theta.iter_mut() {
                        *x = rng.sample(StandardNormal);
                    }
                    len = norm2(&theta);
                }
                for x in theta.iter_mut() {
                    *x *= norm / len;
                }
                LinearReward::new(theta, *bound)
            }
        }
    }

    fn validate(&self, field: &str) -> Result<()> {
        let (norm, bound) = match self {
            ThetaSpec::Values { values, bound } => {
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::ConfigInvalid(format!(
                        "{field}: values must be finite"
                    )));
                }
                (norm2(values), *bound)
            }
            ThetaSpec::Random { norm, bound, .. } => (*norm, *bound),
        };
        if !(bound > 0.0) || !bound.is_finite() {
            return Err(Error::ConfigInvalid(format!(
                "{field}: bound must be positive, got {bound}"
            )));
        }
        if !norm.is_finite() || norm > bound + 1e-9 {
            return Err(Error::ConfigInvalid(format!(
                "{field}: norm {norm} exceeds bound {bound}"
            )));
        }
        Ok(())
    }
}

/// Teacher construction: DP-optimal for its reward, optionally softened.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSpec {
    /// Reward the teacher optimizes; the oracle reward when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<ThetaSpec>,
    /// Softmax temperature over action values; zero keeps the hard argmax.
    #[serde(default)]
    pub temperature: f64,
}

impl Default for TeacherSpec {
    fn default() -> Self {
        Self {
            theta: None,
            temperature: 0.0,
        }
    }
}

/// Annotator behaviors that sample the offline comparison trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum BehaviorSpec {
    Uniform,
    /// The run's teacher policy itself.
    Teacher,
    /// DP policy of the teacher reward re-softened at this temperature.
    SoftenedTeacher { temperature: f64 },
}

impl BehaviorSpec {
    /// Stable name recorded in dataset metadata.
    pub fn name(&self) -> String {
        match self {
            BehaviorSpec::Uniform => "uniform".into(),
            BehaviorSpec::Teacher => "teacher".into(),
            BehaviorSpec::SoftenedTeacher { temperature } => {
                format!("softened-teacher@{temperature}")
            }
        }
    }

    fn validate(&self, field: &str) -> Result<()> {
        if let BehaviorSpec::SoftenedTeacher { temperature } = self {
            if !temperature.is_finite() || *temperature < 0.0 {
                return Err(Error::ConfigInvalid(format!(
                    "{field}: temperature must be finite and non-negative, got {temperature}"
                )));
            }
        }
        Ok(())
    }
}

/// Offline preference data: generated on the fly or loaded from a record
/// file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    Generate {
        n: usize,
        #[serde(default = "default_mu0")]
        mu0: BehaviorSpec,
        #[serde(default = "default_mu1")]
        mu1: BehaviorSpec,
    },
    Path { path: String },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Generate {
            n: default_n(),
            mu0: default_mu0(),
            mu1: default_mu1(),
        }
    }
}

impl DatasetSpec {
    fn validate(&self) -> Result<()> {
        match self {
            DatasetSpec::Generate { n, mu0, mu1 } => {
                if *n == 0 {
                    return Err(Error::ConfigInvalid("dataset.n must be positive".into()));
                }
                mu0.validate("dataset.mu0")?;
                mu1.validate("dataset.mu1")
            }
            DatasetSpec::Path { path } => {
                if path.is_empty() {
                    return Err(Error::ConfigInvalid("dataset.path must not be empty".into()));
                }
                Ok(())
            }
        }
    }
}

/// Behavior cloning options as they appear in config files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BcSpec {
    #[serde(default = "default_bc_rollouts")]
    pub rollouts: usize,
    #[serde(default = "default_context")]
    pub context_len: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_step")]
    pub step: f64,
}

fn default_bc_rollouts() -> usize {
    128
}

fn default_context() -> usize {
    1
}

fn default_temperature() -> f64 {
    1.0
}

fn default_epochs() -> usize {
    200
}

fn default_step() -> f64 {
    0.5
}

impl Default for BcSpec {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults are complete")
    }
}

impl BcSpec {
    fn validate(&self, field: &str) -> Result<()> {
        if self.rollouts == 0 || self.epochs == 0 {
            return Err(Error::ConfigInvalid(format!(
                "{field}: rollouts and epochs must be positive"
            )));
        }
        if !(self.step > 0.0) || !(self.temperature > 0.0) {
            return Err(Error::ConfigInvalid(format!(
                "{field}: step and temperature must be positive"
            )));
        }
        Ok(())
    }
}

/// Best-of-n over a behavior-cloned proposal, scored by a reward model fit
/// on the offline dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BestOfNSpec {
    #[serde(default = "default_candidates")]
    pub n: usize,
    /// Monte Carlo draws used to estimate the sampler's value.
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
    /// Norm bound of the fitted reward model.
    #[serde(default = "default_bound")]
    pub bound: f64,
    #[serde(default)]
    pub base: BcSpec,
}

fn default_candidates() -> usize {
    8
}

fn default_eval_samples() -> usize {
    2000
}

impl Default for BestOfNSpec {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults are complete")
    }
}

/// Moment matching driven by the offline saddle solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MmOfflineSpec {
    #[serde(default)]
    pub q_class: QClassSpec,
    #[serde(default)]
    pub config: OfflineConfig,
}

/// Moment matching driven by the online loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MmOnlineSpec {
    #[serde(default)]
    pub q_class: QClassSpec,
    #[serde(default)]
    pub config: OnlineConfig,
}

/// Algorithm selector plus its sub-config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum AlgorithmSpec {
    Bc(BcSpec),
    BestOfN(BestOfNSpec),
    PbkdOffline(OfflineConfig),
    PbkdOnline(OnlineConfig),
    MmOffline(MmOfflineSpec),
    MmOnline(MmOnlineSpec),
}

impl AlgorithmSpec {
    /// Stable name used for grouping and reporting.
    pub fn label(&self) -> &'static str {
        match self {
            AlgorithmSpec::Bc(_) => "bc",
            AlgorithmSpec::BestOfN(_) => "best-of-n",
            AlgorithmSpec::PbkdOffline(_) => "pbkd-offline",
            AlgorithmSpec::PbkdOnline(_) => "pbkd-online",
            AlgorithmSpec::MmOffline(_) => "mm-offline",
            AlgorithmSpec::MmOnline(_) => "mm-online",
        }
    }

    /// Whether the run consumes the configured offline dataset.
    pub fn uses_offline_dataset(&self) -> bool {
        matches!(
            self,
            AlgorithmSpec::BestOfN(_) | AlgorithmSpec::PbkdOffline(_) | AlgorithmSpec::MmOffline(_)
        )
    }

    fn validate(&self) -> Result<()> {
        match self {
            AlgorithmSpec::Bc(spec) => spec.validate("algorithm.bc"),
            AlgorithmSpec::BestOfN(spec) => {
                if spec.n == 0 || spec.eval_samples == 0 {
                    return Err(Error::ConfigInvalid(
                        "algorithm.best-of-n: n and eval_samples must be positive".into(),
                    ));
                }
                if !(spec.bound > 0.0) {
                    return Err(Error::ConfigInvalid(
                        "algorithm.best-of-n: bound must be positive".into(),
                    ));
                }
                spec.base.validate("algorithm.best-of-n.base")
            }
            AlgorithmSpec::PbkdOffline(cfg) => cfg.validate(),
            AlgorithmSpec::PbkdOnline(cfg) => cfg.validate(),
            AlgorithmSpec::MmOffline(spec) => spec.config.validate(),
            AlgorithmSpec::MmOnline(spec) => spec.config.validate(),
        }
    }
}

/// One experiment: task, data source, algorithm, and seeding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: String,
    #[serde(default)]
    pub master_seed: u64,
    /// Display name for comparisons; the algorithm label when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    /// Output root override; flags and the environment take precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
    pub mdp: MdpSpec,
    /// Ground-truth reward the oracle labels with.
    pub reward: ThetaSpec,
    #[serde(default)]
    pub teacher: TeacherSpec,
    #[serde(default)]
    pub dataset: DatasetSpec,
    pub algorithm: AlgorithmSpec,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema != CONFIG_SCHEMA {
            return Err(Error::ConfigInvalid(format!(
                "schema: expected {CONFIG_SCHEMA:?}, got {:?}",
                self.schema
            )));
        }
        let mdp = self.mdp.build()?;
        self.reward.validate("reward")?;
        self.reward.build(&mdp)?;
        if let Some(theta) = &self.teacher.theta {
            theta.validate("teacher.theta")?;
            theta.build(&mdp)?;
        }
        if !self.teacher.temperature.is_finite() || self.teacher.temperature < 0.0 {
            return Err(Error::ConfigInvalid(format!(
                "teacher.temperature must be finite and non-negative, got {}",
                self.teacher.temperature
            )));
        }
        self.dataset.validate()?;
        if !self.algorithm.uses_offline_dataset() {
            if let DatasetSpec::Path { .. } = &self.dataset {
                return Err(Error::ConfigInvalid(format!(
                    "algorithm {} collects its own data; dataset.path would be ignored",
                    self.algorithm.label()
                )));
            }
        }
        self.algorithm.validate()
    }

    /// Parses and validates a config document.
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text)
            .map_err(|e| Error::ConfigInvalid(format!("config parse: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    /// Canonical pretty-printed form, used both for files and hashing input.
    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("config serializes");
        text.push('\n');
        text
    }

    pub fn display_label(&self) -> String {
        self.label
            .clone()
            .unwrap_or_else(|| self.algorithm.label().to_string())
    }

    /// Task and algorithm identity, independent of seed and cosmetics.
    pub fn config_hash(&self) -> String {
        let mut canon = self.clone();
        canon.master_seed = 0;
        canon.label = None;
        canon.output_dir = None;
        hash_hex(&canon)
    }

    /// Identity of one concrete run, including the master seed.
    pub fn run_id(&self) -> String {
        let mut canon = self.clone();
        canon.label = None;
        canon.output_dir = None;
        hash_hex(&canon)
    }
}

fn hash_hex(config: &ExperimentConfig) -> String {
    let bytes = serde_json::to_vec(config).expect("config serializes");
    format!("{:016x}", hash_bytes(&bytes))
}
