//! Named reference configurations.
//!
//! These are the tasks the rate checks and ordering comparisons run on, and
//! the same definitions back `gen-config`, so a shipped config file
//! reproduces exactly what the test suite measures. The task identity
//! (features, ground-truth reward, teacher) is pinned by dedicated seeds
//! inside the specs; master seeds only move the data and optimization
//! streams.

use crate::engine::ValueMode;
use crate::error::{Error, Result};
use crate::harness::config::{
    AlgorithmSpec, BcSpec, BehaviorSpec, DatasetSpec, ExperimentConfig, TeacherSpec, ThetaSpec,
    CONFIG_SCHEMA,
};
use crate::mdp::MdpSpec;
use crate::offline::{OfflineConfig, StudentInit};
use crate::online::OnlineConfig;
use crate::preference::Labeling;

/// All preset names, in the order `gen-config` lists them.
pub fn preset_names() -> &'static [&'static str] {
    &[
        "smoke",
        "smoke-online",
        "mm-smoke",
        "mm-smoke-online",
        "offline-rates",
        "online-rates",
        "ordering-bc",
        "ordering-offline",
        "ordering-online-1",
        "ordering-online-3",
        "ordering-online-5",
    ]
}

/// Builds a named preset.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let config = match name {
        "smoke" => smoke(),
        "smoke-online" => smoke_online(),
        "mm-smoke" => mm_smoke(),
        "mm-smoke-online" => mm_smoke_online(),
        "offline-rates" => offline_rates(),
        "online-rates" => online_rates(),
        "ordering-bc" => ordering_bc(),
        "ordering-offline" => ordering_offline(),
        "ordering-online-1" => ordering_online(1),
        "ordering-online-3" => ordering_online(3),
        "ordering-online-5" => ordering_online(5),
        other => {
            return Err(Error::ConfigInvalid(format!(
                "unknown preset {other:?}; known: {}",
                preset_names().join(", ")
            )))
        }
    };
    config.validate()?;
    Ok(config)
}

/// The reference task every rate and ordering preset shares: three tokens,
/// three steps, two prompts, eight-dimensional features.
fn reference_mdp() -> MdpSpec {
    MdpSpec {
        vocab_size: 3,
        horizon: 3,
        prompt_count: 2,
        prompt_distribution: None,
        discount: 1.0,
        feature_dim: 8,
        context_len: 1,
        feature_seed: 7,
        enumeration_cap: 1_000_000,
    }
}

fn reference_reward() -> ThetaSpec {
    ThetaSpec::Random {
        seed: 11,
        norm: 1.8,
        bound: 2.0,
    }
}

fn reference_dataset(n: usize) -> DatasetSpec {
    DatasetSpec::Generate {
        n,
        mu0: BehaviorSpec::SoftenedTeacher { temperature: 1.5 },
        mu1: BehaviorSpec::Uniform,
    }
}

fn skeleton(algorithm: AlgorithmSpec) -> ExperimentConfig {
    ExperimentConfig {
        schema: CONFIG_SCHEMA.into(),
        master_seed: 0,
        label: None,
        output_dir: None,
        mdp: reference_mdp(),
        reward: reference_reward(),
        teacher: TeacherSpec {
            theta: None,
            temperature: 0.6,
        },
        dataset: reference_dataset(1000),
        algorithm,
    }
}

/// Full-context student the saddle solvers train on the reference task.
fn reference_offline() -> OfflineConfig {
    let mut cfg = OfflineConfig::default();
    cfg.rounds = 120;
    cfg.reward_steps = 20;
    cfg.policy_steps = 5;
    cfg.student_context = 2;
    cfg.init = StudentInit::Uniform;
    cfg.value_mode = ValueMode::Exact;
    cfg
}

fn reference_online(iterations: usize) -> OnlineConfig {
    let mut cfg = OnlineConfig::default();
    cfg.iterations = iterations;
    cfg.pref_batch = 32;
    cfg.opt_batch = 32;
    cfg.policy_steps = 15;
    cfg.labeling = Labeling::Oracle;
    cfg.student_context = 2;
    cfg.value_mode = ValueMode::Exact;
    cfg
}

fn offline_rates() -> ExperimentConfig {
    skeleton(AlgorithmSpec::PbkdOffline(reference_offline()))
}

fn online_rates() -> ExperimentConfig {
    skeleton(AlgorithmSpec::PbkdOnline(reference_online(200)))
}

/// Teacher used by the ordering family: soft enough that cloning it leaves
/// clear headroom below the optimum.
fn ordering_skeleton(algorithm: AlgorithmSpec) -> ExperimentConfig {
    let mut config = skeleton(algorithm);
    config.teacher.temperature = 1.0;
    config.dataset = reference_dataset(256);
    config
}

fn ordering_bc() -> ExperimentConfig {
    ordering_skeleton(AlgorithmSpec::Bc(BcSpec {
        rollouts: 256,
        context_len: 2,
        ..Default::default()
    }))
}

fn ordering_offline() -> ExperimentConfig {
    let mut cfg = reference_offline();
    cfg.rounds = 60;
    ordering_skeleton(AlgorithmSpec::PbkdOffline(cfg))
}

fn ordering_online(multiplier: usize) -> ExperimentConfig {
    let base = 32;
    let mut config = ordering_skeleton(AlgorithmSpec::PbkdOnline(reference_online(
        base * multiplier,
    )));
    config.label = Some(format!("pbkd-online-{multiplier}x"));
    config
}

fn smoke_mdp() -> MdpSpec {
    MdpSpec {
        vocab_size: 3,
        horizon: 2,
        prompt_count: 1,
        prompt_distribution: None,
        discount: 1.0,
        feature_dim: 4,
        context_len: 1,
        feature_seed: 19,
        enumeration_cap: 1_000_000,
    }
}

fn smoke_skeleton(algorithm: AlgorithmSpec) -> ExperimentConfig {
    ExperimentConfig {
        schema: CONFIG_SCHEMA.into(),
        master_seed: 0,
        label: None,
        output_dir: None,
        mdp: smoke_mdp(),
        reward: ThetaSpec::Random {
            seed: 3,
            norm: 1.5,
            bound: 2.0,
        },
        teacher: TeacherSpec {
            theta: None,
            temperature: 0.8,
        },
        dataset: reference_dataset(64),
        algorithm,
    }
}

fn smoke() -> ExperimentConfig {
    let mut cfg = OfflineConfig::default();
    cfg.rounds = 10;
    cfg.reward_steps = 6;
    cfg.policy_steps = 3;
    smoke_skeleton(AlgorithmSpec::PbkdOffline(cfg))
}

fn smoke_online() -> ExperimentConfig {
    let mut cfg = OnlineConfig::default();
    cfg.iterations = 6;
    cfg.pref_batch = 8;
    cfg.opt_batch = 16;
    cfg.labeling = Labeling::Oracle;
    smoke_skeleton(AlgorithmSpec::PbkdOnline(cfg))
}

fn mm_smoke() -> ExperimentConfig {
    let mut cfg = OfflineConfig::default();
    cfg.rounds = 10;
    cfg.reward_steps = 6;
    cfg.policy_steps = 3;
    smoke_skeleton(AlgorithmSpec::MmOffline(crate::harness::config::MmOfflineSpec {
        q_class: Default::default(),
        config: cfg,
    }))
}

fn mm_smoke_online() -> ExperimentConfig {
    let mut cfg = OnlineConfig::default();
    cfg.iterations = 6;
    cfg.pref_batch = 8;
    cfg.opt_batch = 16;
    cfg.labeling = Labeling::Oracle;
    smoke_skeleton(AlgorithmSpec::MmOnline(crate::harness::config::MmOnlineSpec {
        q_class: Default::default(),
        config: cfg,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_validates() {
        for name in preset_names() {
            let config = preset(name).unwrap();
            assert_eq!(config.schema, CONFIG_SCHEMA, "{name}");
        }
    }

    #[test]
    fn unknown_preset_is_a_config_error() {
        let err = preset("nope").unwrap_err();
        assert!(matches!(err, Error::ConfigInvalid(msg) if msg.contains("nope")));
    }

    #[test]
    fn rate_presets_share_the_task_identity() {
        let offline = preset("offline-rates").unwrap();
        let online = preset("online-rates").unwrap();
        assert_eq!(offline.mdp, online.mdp);
        assert_eq!(offline.reward, online.reward);
        let ordering: Vec<_> = ["ordering-bc", "ordering-offline", "ordering-online-1"]
            .iter()
            .map(|n| preset(n).unwrap())
            .collect();
        for config in &ordering {
            assert_eq!(config.mdp, offline.mdp);
            assert_eq!(config.teacher.temperature, 1.0);
        }
    }

    #[test]
    fn ordering_online_budgets_scale_with_the_multiplier() {
        for (name, expect) in [
            ("ordering-online-1", 32),
            ("ordering-online-3", 96),
            ("ordering-online-5", 160),
        ] {
            let config = preset(name).unwrap();
            let AlgorithmSpec::PbkdOnline(cfg) = config.algorithm else {
                panic!("{name} should be an online preset");
            };
            assert_eq!(cfg.iterations, expect);
        }
    }
}
