//! Shared fixtures for the criterion benches: a reference-sized task with a
//! ground-truth reward, a softened teacher, and oracle-labeled preferences.

use pbkd_core::{
    gen_offline, teacher_policy, Annotators, LinearReward, MdpSpec, PreferenceDataset, SeedSpring,
    TabularPolicy, TokenMdp,
};

pub struct Fixture {
    pub mdp: TokenMdp,
    pub rstar: LinearReward,
    pub teacher: TabularPolicy,
    pub spring: SeedSpring,
}

pub fn fixture() -> Fixture {
    let mdp = MdpSpec {
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
    .build()
    .expect("fixture mdp");
    let spring = SeedSpring::new(42);
    let mut theta = vec![0.0; 8];
    for (i, t) in theta.iter_mut().enumerate() {
        *t = ((i as f64) * 0.73 + 0.21).sin();
    }
    let norm = theta.iter().map(|t| t * t).sum::<f64>().sqrt();
    for t in &mut theta {
        *t *= 1.8 / norm;
    }
    let rstar = LinearReward::new(theta, 2.0).expect("fixture reward");
    let teacher = teacher_policy(&mdp, &rstar, 0.6).expect("fixture teacher");
    Fixture {
        mdp,
        rstar,
        teacher,
        spring,
    }
}

pub fn dataset(fx: &Fixture, n: usize) -> PreferenceDataset {
    let mut rng = fx.spring.stream("bench-dataset");
    gen_offline(
        &fx.mdp,
        &fx.teacher,
        &fx.teacher,
        &fx.rstar,
        n,
        &mut rng,
        Annotators::default(),
    )
    .expect("fixture dataset")
}
