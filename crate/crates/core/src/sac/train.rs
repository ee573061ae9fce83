//! The training loop and its per-episode log.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{AgentCheckpoint, AgentConfig, ReplayBuffer, SacAgent, Transition};
use crate::env::{ActionVector, EnvConfig, EnvError, Policy, StarMecEnv};
use crate::rng::{self, derive_seed};
use crate::scenario::ConfigError;

/// Offset separating in-training evaluation seeds from final evaluation seeds.
const MONITOR_SEED_OFFSET: u64 = 1 << 40;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("non-finite {what} at episode {episode}, env step {env_steps}")]
    NonFinite {
        what: &'static str,
        episode: usize,
        env_steps: usize,
        checkpoint: Box<AgentCheckpoint>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub episode: usize,
    pub env_steps: usize,
    /// Mean return over the trailing epoch.
    pub mean_return: f64,
    pub critic_loss: Option<f64>,
    pub actor_loss: Option<f64>,
    pub alpha: f64,
    #[serde(rename = "eval_energy_J")]
    pub eval_energy_j: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingLog {
    pub rows: Vec<TrainLogRow>,
}

impl TrainingLog {
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r)?;
        }
        if self.rows.is_empty() {
            w.write_record(["episode", "env_steps", "mean_return", "critic_loss", "actor_loss", "alpha", "eval_energy_J"])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> csv::Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let rows = r.deserialize().collect::<Result<Vec<TrainLogRow>, _>>()?;
        Ok(Self { rows })
    }
}

pub struct TrainOutcome {
    pub agent: SacAgent,
    pub log: TrainingLog,
    pub env_steps: usize,
    pub replay_len: usize,
    /// Environment step of the returned snapshot.
    pub selected_at: usize,
}

/// Mean system energy of the deterministic policy over `episodes` seeded
/// episodes.
pub fn evaluate_energy<P: Policy>(
    env: &mut StarMecEnv,
    policy: &mut P,
    seeds: impl IntoIterator<Item = u64>,
) -> Result<f64, EnvError> {
    let mut total = 0.0;
    let mut n = 0;
    for seed in seeds {
        let mut obs = env.reset(seed)?;
        loop {
            let a = policy.act(&obs, env);
            let out = env.step(&a)?;
            total -= out.reward;
            obs = out.observation;
            if out.done {
                break;
            }
        }
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Runs SAC on a fresh environment until `total_steps` environment steps or
/// `max_episodes` episodes, whichever comes first.
pub fn train(env_cfg: &EnvConfig, cfg: &AgentConfig, seed: u64) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let mut env = StarMecEnv::new(env_cfg.clone(), seed)?;
    let mut eval_env = StarMecEnv::new(env_cfg.clone(), seed)?;
    let num_slots = env_cfg.scenario.num_slots;
    let mut agent = SacAgent::new(cfg.clone(), env.feature_dim(), env.action_dim(), seed);
    let mut buffer = ReplayBuffer::new(cfg.replay_capacity, cfg.priority_exponent, cfg.priority_floor);
    let mut warmup_rng = rng::stream(seed, rng::TAG_WARMUP);
    let mut replay_rng = rng::stream(seed, rng::TAG_REPLAY);

    let episodes_per_epoch = (cfg.steps_per_epoch / env.episode_len()).max(1);
    let mut log = TrainingLog::default();
    let mut returns: Vec<f64> = Vec::new();
    let mut steps = 0usize;
    let mut episode = 0usize;
    let mut last_epoch = 0usize;
    let mut best: Option<(f64, usize, AgentCheckpoint)> = None;

    while steps < cfg.total_steps && episode < cfg.max_episodes {
        let mut obs = env.reset(derive_seed(seed, rng::TAG_TRAIN_EPISODE, episode as u64))?;
        let mut ret = 0.0;
        let mut critic_losses = Vec::new();
        let mut actor_losses = Vec::new();
        loop {
            let features = obs.features(num_slots);
            let action = if steps < cfg.warmup_steps {
                ActionVector((0..env.action_dim()).map(|_| warmup_rng.random_range(-1.0..=1.0)).collect())
            } else {
                agent.select_action(&features, false)
            };
            let out = env.step(&action)?;
            ret += out.reward;
            buffer.push(Transition {
                state: features,
                action: action.0,
                reward: out.reward,
                next_state: out.observation.features(num_slots),
                done: out.done,
            });
            steps += 1;

            if steps >= cfg.warmup_steps && buffer.len() >= cfg.batch_size {
                let progress = (steps as f64 / cfg.total_steps as f64).min(1.0);
                let beta = cfg.is_beta_start + (cfg.is_beta_end - cfg.is_beta_start) * progress;
                let batch = buffer.sample(cfg.batch_size, beta, &mut replay_rng);
                let stats = agent.update(&batch);
                let what = if !stats.critic_loss.is_finite() {
                    Some("critic loss")
                } else if !stats.actor_loss.is_finite() {
                    Some("actor loss")
                } else if !stats.alpha.is_finite() {
                    Some("temperature")
                } else {
                    None
                };
                if let Some(what) = what {
                    return Err(TrainError::NonFinite {
                        what,
                        episode,
                        env_steps: steps,
                        checkpoint: Box::new(agent.checkpoint()),
                    });
                }
                buffer.update_priorities(&batch.indices, &stats.td);
                critic_losses.push(stats.critic_loss);
                actor_losses.push(stats.actor_loss);
            }
            obs = out.observation;
            if out.done {
                break;
            }
        }
        returns.push(ret);
        episode += 1;

        let epoch = steps / cfg.steps_per_epoch.max(1);
        let finished = steps >= cfg.total_steps || episode >= cfg.max_episodes;
        let eval_energy_j = if (epoch > last_epoch || finished) && cfg.eval_episodes > 0 {
            last_epoch = epoch;
            let seeds = (0..cfg.eval_episodes as u64)
                .map(|i| derive_seed(seed, rng::TAG_EVAL_EPISODE, MONITOR_SEED_OFFSET + i));
            let e = evaluate_energy(&mut eval_env, &mut agent, seeds)?;
            if cfg.keep_best && steps >= cfg.warmup_steps && best.as_ref().is_none_or(|b| e <= b.0) {
                best = Some((e, steps, agent.checkpoint()));
            }
            Some(e)
        } else {
            None
        };
        let window = &returns[returns.len().saturating_sub(episodes_per_epoch)..];
        log.rows.push(TrainLogRow {
            episode,
            env_steps: steps,
            mean_return: mean(window).unwrap_or(0.0),
            critic_loss: mean(&critic_losses),
            actor_loss: mean(&actor_losses),
            alpha: agent.alpha(),
            eval_energy_j,
        });
    }
    let mut selected_at = steps;
    if let Some((_, at, ck)) = best {
        agent = SacAgent::from_checkpoint(&ck, seed).expect("own checkpoint restores");
        selected_at = at;
    }
    Ok(TrainOutcome {
        agent,
        log,
        env_steps: steps,
        replay_len: buffer.len(),
        selected_at,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Scheme;
    use crate::protocol::Protocol;
    use crate::scenario::ScenarioConfig;

    fn tiny() -> (EnvConfig, AgentConfig) {
        let scenario = ScenarioConfig {
            num_uds: 2,
            num_elements: 16,
            num_subsurfaces: 4,
            ..ScenarioConfig::default()
        };
        let agent = AgentConfig {
            hidden: vec![16, 16],
            batch_size: 16,
            replay_capacity: 64,
            warmup_steps: 40,
            total_steps: 200,
            eval_episodes: 2,
            ..AgentConfig::default()
        };
        (EnvConfig::new(scenario, Protocol::Es, Scheme::Rotatable), agent)
    }

    #[test]
    fn log_rows_match_episodes_and_replay_is_bounded() {
        let (env, agent) = tiny();
        let out = train(&env, &agent, 3).unwrap();
        assert_eq!(out.env_steps, 200);
        assert_eq!(out.log.rows.len(), 50);
        assert_eq!(out.replay_len, 64);
        assert!(out.log.rows.iter().take(9).all(|r| r.critic_loss.is_none()));
        assert!(out.log.rows.last().unwrap().eval_energy_j.is_some());
        assert_eq!(out.log.rows.iter().filter(|r| r.eval_energy_j.is_some()).count(), 2);
    }

    #[test]
    fn training_is_deterministic() {
        let (env, agent) = tiny();
        let a = train(&env, &agent, 4).unwrap();
        let b = train(&env, &agent, 4).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.agent.actor(), b.agent.actor());
    }

    #[test]
    fn log_csv_round_trip() {
        let (env, agent) = tiny();
        let out = train(&env, &agent, 5).unwrap();
        let mut buf = Vec::new();
        out.log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("episode,env_steps,mean_return,critic_loss,actor_loss,alpha,eval_energy_J\n"));
        assert_eq!(TrainingLog::read_csv(&buf[..]).unwrap(), out.log);
    }

    #[test]
    fn keep_best_returns_the_best_monitored_snapshot() {
        let (env, mut agent) = tiny();
        agent.eval_episodes = 3;
        let out = train(&env, &agent, 7).unwrap();
        let monitored: Vec<(usize, f64)> = out
            .log
            .rows
            .iter()
            .filter(|r| r.env_steps >= agent.warmup_steps)
            .filter_map(|r| r.eval_energy_j.map(|e| (r.env_steps, e)))
            .collect();
        let best = monitored.iter().map(|m| m.1).fold(f64::INFINITY, f64::min);
        let (at, _) = monitored.iter().rev().find(|m| m.1 == best).unwrap();
        assert_eq!(out.selected_at, *at);
        let mut eval_env = StarMecEnv::new(env.clone(), 7).unwrap();
        let mut a = out.agent;
        let seeds = (0..3).map(|i| derive_seed(7, rng::TAG_EVAL_EPISODE, MONITOR_SEED_OFFSET + i));
        assert_eq!(evaluate_energy(&mut eval_env, &mut a, seeds).unwrap(), best);

        agent.keep_best = false;
        assert_eq!(train(&env, &agent, 7).unwrap().selected_at, 200);
    }

    #[test]
    fn max_episodes_caps_training() {
        let (env, mut agent) = tiny();
        agent.max_episodes = 3;
        let out = train(&env, &agent, 6).unwrap();
        assert_eq!(out.log.rows.len(), 3);
        assert_eq!(out.env_steps, 12);
    }
}
