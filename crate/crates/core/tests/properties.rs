//! Randomized invariant checks over MDP shapes, policies, and file formats.

use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use pbkd_core::harness::{preset, preset_names, ExperimentConfig};
use pbkd_core::{
    btl_prob, gen_offline, Annotators, LinearReward, MdpSpec, Policy, PreferenceDataset,
    SoftmaxLinearPolicy, TokenMdp,
};

fn build_mdp(
    vocab: u32,
    horizon: usize,
    prompts: u32,
    dim: usize,
    context: usize,
    seed: u64,
    discount: f64,
) -> TokenMdp {
    TokenMdp::new(MdpSpec {
        vocab_size: vocab,
        horizon,
        prompt_count: prompts,
        prompt_distribution: None,
        discount,
        feature_dim: dim,
        context_len: context,
        feature_seed: seed,
        enumeration_cap: 1_000_000,
    })
    .expect("small spec builds")
}

fn random_theta(dim: usize, seed: u64) -> LinearReward {
    let mut rng = StdRng::seed_from_u64(seed);
    let theta: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    LinearReward::new(theta, 2.0).expect("finite parameter")
}

fn random_actions(mdp: &TokenMdp, rng: &mut StdRng) -> Vec<u32> {
    (0..mdp.horizon())
        .map(|_| rng.gen_range(0..mdp.vocab_size()))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn trajectory_features_stay_in_the_unit_ball(
        vocab in 2u32..=4,
        horizon in 1usize..=3,
        prompts in 1u32..=2,
        dim in 2usize..=6,
        context in 0usize..=2,
        feature_seed in any::<u64>(),
        traj_seed in any::<u64>(),
    ) {
        let mdp = build_mdp(vocab, horizon, prompts, dim, context, feature_seed, 1.0);
        let mut rng = StdRng::seed_from_u64(traj_seed);
        let prompt = rng.gen_range(0..prompts);
        let actions = random_actions(&mdp, &mut rng);
        let phi = mdp.trajectory_features(prompt, &actions).expect("valid actions");
        let norm = phi.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!(norm <= 1.0 + 1e-9, "feature norm {norm} exceeds the unit ball");
    }

    #[test]
    fn action_distributions_normalize(
        vocab in 2u32..=4,
        horizon in 1usize..=3,
        context in 0usize..=2,
        feature_seed in any::<u64>(),
        weight_seed in any::<u64>(),
        temperature in 0.2f64..3.0,
    ) {
        let mdp = build_mdp(vocab, horizon, 2, 4, context, feature_seed, 1.0);
        let mut policy = SoftmaxLinearPolicy::zeros(&mdp, context.min(horizon - 1), temperature)
            .expect("policy shape fits");
        let mut rng = StdRng::seed_from_u64(weight_seed);
        for w in policy.weights_mut() {
            *w = rng.gen_range(-3.0..3.0);
        }
        let prompt = rng.gen_range(0..2);
        let len = rng.gen_range(0..horizon);
        let state: Vec<u32> = (0..len).map(|_| rng.gen_range(0..vocab)).collect();
        let probs = policy.action_distribution(&mdp, prompt, &state).expect("in range");
        prop_assert_eq!(probs.len(), vocab as usize);
        prop_assert!(probs.iter().all(|p| *p >= 0.0));
        let total: f64 = probs.iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-12, "probabilities sum to {total}");
    }

    #[test]
    fn preference_probabilities_are_antisymmetric(
        vocab in 2u32..=4,
        horizon in 1usize..=3,
        dim in 2usize..=6,
        feature_seed in any::<u64>(),
        theta_seed in any::<u64>(),
        traj_seed in any::<u64>(),
    ) {
        let mdp = build_mdp(vocab, horizon, 2, dim, 1, feature_seed, 1.0);
        let rm = random_theta(dim, theta_seed);
        let mut rng = StdRng::seed_from_u64(traj_seed);
        let prompt = rng.gen_range(0..2);
        let t0 = mdp.make_trajectory(prompt, random_actions(&mdp, &mut rng)).expect("valid");
        let t1 = mdp.make_trajectory(prompt, random_actions(&mdp, &mut rng)).expect("valid");
        let p01 = btl_prob(&rm, &mdp, &t0, &t1).expect("finite rewards");
        let p10 = btl_prob(&rm, &mdp, &t1, &t0).expect("finite rewards");
        prop_assert!(p01 > 0.0 && p01 < 1.0, "probability {p01} leaves the open interval");
        prop_assert!((p01 + p10 - 1.0).abs() <= 1e-12, "p01 {p01} + p10 {p10} is not 1");
    }

    #[test]
    fn datasets_round_trip_through_the_record_format(
        vocab in 2u32..=3,
        horizon in 1usize..=3,
        dim in 2usize..=4,
        feature_seed in any::<u64>(),
        theta_seed in any::<u64>(),
        data_seed in any::<u64>(),
        n in 1usize..=12,
    ) {
        let mdp = build_mdp(vocab, horizon, 2, dim, 1, feature_seed, 1.0);
        let rstar = random_theta(dim, theta_seed);
        let uniform = SoftmaxLinearPolicy::uniform(&mdp).expect("uniform");
        let mut rng = StdRng::seed_from_u64(data_seed);
        let dataset = gen_offline(&mdp, &uniform, &uniform, &rstar, n, &mut rng, Annotators::default())
            .expect("generation succeeds");
        let mut buffer = Vec::new();
        dataset.write_records(&mut buffer).expect("serialize");
        let reread = PreferenceDataset::read_records(buffer.as_slice(), &mdp).expect("parse");
        prop_assert_eq!(dataset, reread);
    }

    #[test]
    fn configs_round_trip_through_json(
        which in 0usize..11,
        master_seed in any::<u64>(),
    ) {
        let name = preset_names()[which];
        let mut config = preset(name).expect("known preset");
        config.master_seed = master_seed;
        let text = config.to_json();
        let reread = ExperimentConfig::from_json(&text).expect("own output parses");
        prop_assert_eq!(config, reread);
    }
}
