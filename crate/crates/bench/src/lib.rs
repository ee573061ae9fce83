//! Fixtures shared by the benchmarks.

use star_mec_core::env::{Policy, RandomPolicy};
use star_mec_core::sac::{Batch, ReplayBuffer, Transition};
use star_mec_core::{AgentConfig, EnvConfig, Protocol, SacAgent, ScenarioConfig, Scheme, StarMecEnv};

/// K = 2, N = 16, N_bar = 4.
pub fn smoke_scenario() -> ScenarioConfig {
    ScenarioConfig {
        num_uds: 2,
        num_elements: 16,
        num_subsurfaces: 4,
        ..ScenarioConfig::default()
    }
}

pub fn env(scenario: ScenarioConfig, protocol: Protocol) -> StarMecEnv {
    StarMecEnv::new(EnvConfig::new(scenario, protocol, Scheme::Rotatable), 1).expect("valid scenario")
}

pub fn agent(env: &StarMecEnv, hidden: usize, batch: usize) -> SacAgent {
    let cfg = AgentConfig {
        hidden: vec![hidden, hidden],
        batch_size: batch,
        ..AgentConfig::default()
    };
    SacAgent::new(cfg, env.feature_dim(), env.action_dim(), 1)
}

/// A replay batch filled from random-policy rollouts.
pub fn rollout_batch(env: &mut StarMecEnv, size: usize) -> Batch {
    let slots = env.config().scenario.num_slots;
    let mut buf = ReplayBuffer::new(size, 0.6, 1e-6);
    let mut policy = RandomPolicy::new(2);
    let mut ep = 0;
    while buf.len() < size {
        let mut obs = env.reset(ep).expect("reset");
        ep += 1;
        loop {
            let a = policy.act(&obs, env);
            let out = env.step(&a).expect("step");
            buf.push(Transition {
                state: obs.features(slots),
                action: a.0,
                reward: out.reward,
                next_state: out.observation.features(slots),
                done: out.done,
            });
            obs = out.observation;
            if out.done || buf.len() == size {
                break;
            }
        }
    }
    let mut rng = star_mec_core::rng::stream(3, 0);
    buf.sample(size, 0.4, &mut rng)
}
