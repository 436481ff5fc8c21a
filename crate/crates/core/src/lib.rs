//! Desk-scale laboratory for preference-based knowledge distillation.
//!
//! The crate builds synthetic token-generation MDPs with linear ground-truth
//! rewards, fits Bradley-Terry reward models from preference data, and
//! distills teacher policies into softmax-linear students with offline,
//! online, and moment-matching adversarial solvers. Diagnostics check the
//! inequalities the method's guarantees rest on, and the harness runs
//! reproducible experiments, sweeps, and comparisons.

pub mod diagnostics;
mod engine;
pub mod error;
pub mod harness;
pub mod mdp;
pub mod moment_match;
pub mod offline;
pub mod online;
mod optim;
pub mod policy;
pub mod preference;
pub mod reward;
pub mod seed;
pub(crate) mod vecmath;

pub use diagnostics::{
    bellman_inversion_check, build_sigma_offline, check_clipped_gradient, check_mle_gradient,
    check_reward_step_gradient, concentrability_linear, kappa_linear, lemma_l1_tv_check,
    lemma_tv_logexp_check, pdl_identity_check, rate_fit, regret_curve, suboptimality,
    weighted_norm, GradCheck, IdentityCheck, LemmaReport, LemmaTrial, RateFit,
};
pub use engine::ValueMode;
pub use error::{Error, Result};
pub use mdp::{MdpSpec, StepFeatures, TokenMdp, Trajectory};
pub use moment_match::{
    induced_reward, pdl_gap, q_teacher_exact, solve_mm, LinearQ, MmConfig, MmMode, MmOutcome,
    MmTraceRow, QClassSpec, QFunction, TabularQ,
};
pub use online::{
    clipped_surrogate, run_online, OnlineConfig, OnlineOutcome, OnlineState, OnlineTraceRow,
    RewardStepReport,
};
pub use offline::{
    bc_baseline, gap, offline_confidence_radius, solve_offline, worst_case_gap, OfflineConfig,
    OfflineOutcome, OfflineTraceRow, StudentInit,
};
pub use policy::{
    behavior_cloning_fit, best_of_n, clone_deterministic, dp_optimal_policy, dp_solve, exact_value,
    feature_expectation, feature_expectation_mc, log_prob, mc_value, rollout, teacher_policy,
    BcOptions, BcReport, DpSolve, McEstimate, Policy, SoftmaxLinearPolicy, TabularPolicy,
};
pub use preference::{
    gen_offline, gen_online_sample, Annotators, Labeling, PreferenceDataset, PreferenceSample,
    Provenance,
};
pub use reward::{
    btl_prob, fit_mle, in_confidence_set, loglik, relative_loss, zeta_offline, zeta_online,
    LinearReward, MleOptions, MleReport, GAP_CLAMP,
};
pub use seed::SeedSpring;
