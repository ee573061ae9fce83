use proptest::prelude::*;
use star_mec_core::env::{Policy, RandomPolicy};
use star_mec_core::scenario::{angles, zone_indicator};
use star_mec_core::{EnvConfig, Protocol, ScenarioConfig, Scheme, StarMecEnv};

fn small(protocol: Protocol, scheme: Scheme) -> EnvConfig {
    let scenario = ScenarioConfig {
        num_uds: 3,
        num_elements: 16,
        num_subsurfaces: 4,
        ..ScenarioConfig::default()
    };
    EnvConfig::new(scenario, protocol, scheme)
}

fn protocol() -> impl Strategy<Value = Protocol> {
    prop_oneof![Just(Protocol::Es), Just(Protocol::Ms), Just(Protocol::Ts)]
}

fn scheme() -> impl Strategy<Value = Scheme> {
    prop_oneof![
        Just(Scheme::Rotatable),
        Just(Scheme::FixedOrientation),
        Just(Scheme::ReflectOnly),
        Just(Scheme::TransmitOnly),
        Just(Scheme::LocalOnly),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn episodes_keep_their_invariants(p in protocol(), s in scheme(), seed in any::<u64>()) {
        let mut env = StarMecEnv::new(small(p, s), seed).unwrap();
        let mut policy = RandomPolicy::new(seed);
        let mut obs = env.reset(seed).unwrap();
        let mut returns = 0.0;
        let mut steps = 0;
        loop {
            prop_assert_eq!(obs.features(5).len(), env.feature_dim());
            prop_assert!(obs.features(5).iter().all(|x| x.is_finite()));
            let a = policy.act(&obs, &env);
            let out = env.step(&a).unwrap();
            steps += 1;
            let b = out.breakdown;
            prop_assert_eq!(out.reward, -(b.offload_energy + b.local_energy + b.p1 + b.p2));
            prop_assert!(b.offload_energy >= 0.0 && b.local_energy >= 0.0 && b.p1 >= 0.0 && b.p2 >= 0.0);
            let ang = angles(env.world()).unwrap();
            prop_assert_eq!(zone_indicator(ang.theta_bs), 1);
            if s == Scheme::FixedOrientation {
                prop_assert_eq!(out.info.delta, 0.0);
            }
            if s == Scheme::LocalOnly {
                prop_assert!(out.info.alloc.iter().all(|x| x.alpha == 0.0));
            }
            prop_assert!(env.world().uds.iter().all(|u| (0.0..=1.0).contains(&u.alpha_cu)));
            returns += out.reward;
            obs = out.observation;
            if out.done {
                let cycle = out.cycle.unwrap();
                let total: f64 = cycle.iter().map(|r| r.energy()).sum();
                let expect = total + b.p1 + b.p2;
                prop_assert!((-returns - expect).abs() <= 1e-12 * expect);
                break;
            }
        }
        prop_assert_eq!(steps, env.episode_len());
        prop_assert!(env.step(&policy.act(&obs, &env)).is_err());
    }

    #[test]
    fn reset_is_a_pure_function_of_the_seed(p in protocol(), seed in any::<u64>()) {
        let run = |env_seed: u64| {
            let mut env = StarMecEnv::new(small(p, Scheme::Rotatable), env_seed).unwrap();
            let mut policy = RandomPolicy::new(7);
            let mut obs = env.reset(seed).unwrap();
            let mut rewards = Vec::new();
            loop {
                let out = env.step(&policy.act(&obs, &env)).unwrap();
                rewards.push(out.reward);
                obs = out.observation;
                if out.done {
                    return rewards;
                }
            }
        };
        prop_assert_eq!(run(1), run(2));
    }
}
