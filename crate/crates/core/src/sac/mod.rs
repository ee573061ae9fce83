//! Soft actor-critic with twin critics, learned temperature and prioritized
//! replay.

pub mod replay;
pub mod train;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::env::{ActionVector, Observation, Policy, StarMecEnv};
use crate::nn::{Adam, AdamConfig, DenseNet, NetCheckpoint, NnError, ScalarAdam, SquashedGaussian};
use crate::rng;
use crate::scenario::ConfigError;

pub use replay::{Batch, ReplayBuffer, SumTree, Transition};
pub use train::{train, TrainError, TrainLogRow, TrainOutcome, TrainingLog};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub gamma: f64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub lr_alpha: f64,
    #[serde(rename = "batch")]
    pub batch_size: usize,
    pub replay_capacity: usize,
    /// Soft target-update rate.
    pub rho_soft: f64,
    /// Updates between target refreshes.
    pub target_period: usize,
    pub priority_exponent: f64,
    pub priority_floor: f64,
    pub is_beta_start: f64,
    pub is_beta_end: f64,
    /// `None` means `-A`.
    pub target_entropy: Option<f64>,
    pub init_alpha: f64,
    #[serde(rename = "L")]
    pub hidden: Vec<usize>,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub max_episodes: usize,
    pub steps_per_epoch: usize,
    pub eval_episodes: usize,
    /// Multiplies rewards before they enter the critic targets.
    pub reward_scale: f64,
    /// Return the snapshot with the lowest monitored energy rather than the
    /// final one.
    pub keep_best: bool,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lr_actor: 1e-4,
            lr_critic: 1e-4,
            lr_alpha: 1e-4,
            batch_size: 256,
            replay_capacity: 1_000_000,
            rho_soft: 5e-3,
            target_period: 1,
            priority_exponent: 0.6,
            priority_floor: 1e-6,
            is_beta_start: 0.4,
            is_beta_end: 1.0,
            target_entropy: None,
            init_alpha: 1.0,
            hidden: vec![256, 256],
            warmup_steps: 1000,
            total_steps: 30_000,
            max_episodes: 5000,
            steps_per_epoch: 100,
            eval_episodes: 5,
            reward_scale: 1.0,
            keep_best: true,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        use crate::scenario::ConfigError as E;
        let bad = |field: &'static str, reason: &str| Err(E::invalid(field, reason));
        for (field, v) in [
            ("gamma", self.gamma),
            ("lr_actor", self.lr_actor),
            ("lr_critic", self.lr_critic),
            ("lr_alpha", self.lr_alpha),
            ("rho_soft", self.rho_soft),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return bad(field, "must lie in (0, 1]");
            }
        }
        if self.batch_size == 0 {
            return bad("batch", "must be positive");
        }
        if self.replay_capacity < self.batch_size {
            return bad("replay_capacity", "must be at least the batch size");
        }
        if self.target_period == 0 {
            return bad("target_period", "must be positive");
        }
        if !(self.priority_exponent >= 0.0) || !(self.priority_floor > 0.0) {
            return bad("priority_exponent", "exponent must be non-negative and floor positive");
        }
        if !(self.init_alpha > 0.0) {
            return bad("init_alpha", "must be positive");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("L", "hidden widths must be non-empty and positive");
        }
        if !(self.reward_scale > 0.0) {
            return bad("reward_scale", "must be positive");
        }
        Ok(())
    }
}

/// Losses and TD errors from one gradient update.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub alpha: f64,
    pub td: Vec<f64>,
    pub entropy: f64,
}

impl UpdateStats {
    pub fn is_finite(&self) -> bool {
        self.critic_loss.is_finite() && self.actor_loss.is_finite() && self.alpha.is_finite()
    }
}

#[derive(Debug, Clone)]
pub struct SacAgent {
    pub config: AgentConfig,
    state_dim: usize,
    action_dim: usize,
    actor: DenseNet,
    critics: [DenseNet; 2],
    targets: [DenseNet; 2],
    actor_opt: Adam,
    critic_opts: [Adam; 2],
    log_alpha: f64,
    alpha_opt: ScalarAdam,
    head: SquashedGaussian,
    target_entropy: f64,
    rng: ChaCha8Rng,
    updates: u64,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

impl SacAgent {
    pub fn new(config: AgentConfig, state_dim: usize, action_dim: usize, seed: u64) -> Self {
        let mut rng = rng::stream(seed, rng::TAG_AGENT);
        let widths = |inp: usize, out: usize| {
            let mut w = vec![inp];
            w.extend(&config.hidden);
            w.push(out);
            w
        };
        let actor = DenseNet::new(&widths(state_dim, 2 * action_dim), &mut rng);
        let critics = [
            DenseNet::new(&widths(state_dim + action_dim, 1), &mut rng),
            DenseNet::new(&widths(state_dim + action_dim, 1), &mut rng),
        ];
        let targets = critics.clone();
        let actor_opt = Adam::new(&actor, AdamConfig::with_lr(config.lr_actor));
        let critic_opts = [
            Adam::new(&critics[0], AdamConfig::with_lr(config.lr_critic)),
            Adam::new(&critics[1], AdamConfig::with_lr(config.lr_critic)),
        ];
        Self {
            target_entropy: config.target_entropy.unwrap_or(-(action_dim as f64)),
            log_alpha: config.init_alpha.ln(),
            alpha_opt: ScalarAdam::new(AdamConfig::with_lr(config.lr_alpha)),
            config,
            state_dim,
            action_dim,
            actor,
            critics,
            targets,
            actor_opt,
            critic_opts,
            head: SquashedGaussian::default(),
            rng,
            updates: 0,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    pub fn target_entropy(&self) -> f64 {
        self.target_entropy
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn actor(&self) -> &DenseNet {
        &self.actor
    }

    pub fn critics(&self) -> &[DenseNet; 2] {
        &self.critics
    }

    pub fn targets(&self) -> &[DenseNet; 2] {
        &self.targets
    }

    /// Squashed mean when `deterministic`, otherwise a fresh policy sample.
    pub fn select_action(&mut self, features: &[f64], deterministic: bool) -> ActionVector {
        let x = ArrayView2::from_shape((1, self.state_dim), features).expect("feature length");
        let out = self.actor.predict(x);
        let a = if deterministic {
            self.head.deterministic(out.view())
        } else {
            let eps = gaussian(&mut self.rng, 1, self.action_dim);
            self.head.sample(out.view(), eps.view()).action
        };
        ActionVector(a.row(0).to_vec())
    }

    fn q_input(states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Array2<f64> {
        concatenate![Axis(1), states, actions]
    }

    /// Soft Bellman targets `scale r + gamma (1 - done) (min Q' - alpha log pi)`.
    pub fn critic_targets(&mut self, batch: &Batch) -> Array1<f64> {
        let n = batch.rewards.len();
        let out = self.actor.predict(batch.next_states.view());
        let eps = gaussian(&mut self.rng, n, self.action_dim);
        let smp = self.head.sample(out.view(), eps.view());
        let x = Self::q_input(batch.next_states.view(), smp.action.view());
        let q0 = self.targets[0].predict(x.view());
        let q1 = self.targets[1].predict(x.view());
        let alpha = self.alpha();
        let (gamma, scale) = (self.config.gamma, self.config.reward_scale);
        Array1::from_shape_fn(n, |i| {
            let soft = q0[[i, 0]].min(q1[[i, 0]]) - alpha * smp.log_prob[i];
            scale * batch.rewards[i] + gamma * (1.0 - batch.dones[i]) * soft
        })
    }

    /// Importance-weighted squared TD loss on both critics; returns the mean of
    /// the two losses and the per-sample TD errors.
    pub fn update_critics(&mut self, batch: &Batch) -> (f64, Vec<f64>) {
        let y = self.critic_targets(batch);
        let n = y.len() as f64;
        let x = Self::q_input(batch.states.view(), batch.actions.view());
        let mut loss = 0.0;
        let mut td = vec![0.0; y.len()];
        for c in 0..2 {
            let (q, cache) = self.critics[c].forward(x.view());
            let mut grad = Array2::zeros((y.len(), 1));
            for i in 0..y.len() {
                let d = q[[i, 0]] - y[i];
                let w = batch.weights[i];
                loss += 0.5 * w * d * d / n;
                grad[[i, 0]] = w * d / n;
                td[i] += 0.5 * d.abs();
            }
            let (g, _) = self.critics[c].backward(&cache, grad.view());
            self.critic_opts[c].step(&mut self.critics[c], &g);
        }
        (0.5 * loss, td)
    }

    /// Reparameterized step on `mean(alpha log pi - min Q)`; returns the loss and
    /// the batch mean of `log pi`.
    pub fn update_actor(&mut self, states: ArrayView2<f64>) -> (f64, f64) {
        let n = states.nrows();
        let (out, cache) = self.actor.forward(states);
        let eps = gaussian(&mut self.rng, n, self.action_dim);
        let smp = self.head.sample(out.view(), eps.view());
        let x = Self::q_input(states, smp.action.view());
        let (q0, c0) = self.critics[0].forward(x.view());
        let (q1, c1) = self.critics[1].forward(x.view());
        let alpha = self.alpha();
        let mut dq0 = Array2::zeros((n, 1));
        let mut dq1 = Array2::zeros((n, 1));
        let mut loss = 0.0;
        for i in 0..n {
            let (a, b) = (q0[[i, 0]], q1[[i, 0]]);
            if a <= b {
                dq0[[i, 0]] = -1.0 / n as f64;
            } else {
                dq1[[i, 0]] = -1.0 / n as f64;
            }
            loss += (alpha * smp.log_prob[i] - a.min(b)) / n as f64;
        }
        let (_, gx0) = self.critics[0].backward(&c0, dq0.view());
        let (_, gx1) = self.critics[1].backward(&c1, dq1.view());
        let d_action = gx0.slice(s![.., self.state_dim..]).to_owned() + gx1.slice(s![.., self.state_dim..]);
        let d_logp = Array2::from_elem((n, 1), alpha / n as f64);
        let g_out = self.head.backward(&smp, d_action.view(), d_logp.view());
        let (g, _) = self.actor.backward(&cache, g_out.view());
        self.actor_opt.step(&mut self.actor, &g);
        (loss, smp.log_prob.mean().unwrap_or(0.0))
    }

    /// Gradient step on `-log_alpha (log pi + H_min)`.
    pub fn update_temperature(&mut self, mean_log_prob: f64) -> f64 {
        let grad = -(mean_log_prob + self.target_entropy);
        self.alpha_opt.step(&mut self.log_alpha, grad);
        self.alpha()
    }

    pub fn soft_update_targets(&mut self, rho: f64) {
        for c in 0..2 {
            self.targets[c].soft_update(&self.critics[c], rho);
        }
    }

    /// Critics, actor, temperature, then targets on their period.
    pub fn update(&mut self, batch: &Batch) -> UpdateStats {
        let (critic_loss, td) = self.update_critics(batch);
        let (actor_loss, mean_logp) = self.update_actor(batch.states.view());
        let alpha = self.update_temperature(mean_logp);
        self.updates += 1;
        if self.updates % self.config.target_period as u64 == 0 {
            self.soft_update_targets(self.config.rho_soft);
        }
        UpdateStats {
            critic_loss,
            actor_loss,
            alpha,
            td,
            entropy: -mean_logp,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.log_alpha.is_finite()
            && self.actor.is_finite()
            && self.critics.iter().chain(&self.targets).all(DenseNet::is_finite)
    }

    pub fn checkpoint(&self) -> AgentCheckpoint {
        AgentCheckpoint {
            version: crate::nn::CHECKPOINT_VERSION,
            config: self.config.clone(),
            state_dim: self.state_dim,
            action_dim: self.action_dim,
            log_alpha: self.log_alpha,
            actor: self.actor.to_checkpoint(),
            critics: self.critics.iter().map(DenseNet::to_checkpoint).collect(),
            targets: self.targets.iter().map(DenseNet::to_checkpoint).collect(),
        }
    }

    /// Rebuilds an agent for inference or further training. Optimizer moments
    /// restart from zero.
    pub fn from_checkpoint(ck: &AgentCheckpoint, seed: u64) -> Result<Self, NnError> {
        if ck.version != crate::nn::CHECKPOINT_VERSION {
            return Err(NnError::Version(ck.version));
        }
        if ck.critics.len() != 2 || ck.targets.len() != 2 {
            return Err(NnError::Shape("expected two critics and two targets".into()));
        }
        let mut agent = Self::new(ck.config.clone(), ck.state_dim, ck.action_dim, seed);
        let load = |nc: &NetCheckpoint, like: &DenseNet| -> Result<DenseNet, NnError> {
            let net = DenseNet::from_checkpoint(nc)?;
            if net.widths() != like.widths() {
                return Err(NnError::Shape(format!("widths {:?}, expected {:?}", net.widths(), like.widths())));
            }
            Ok(net)
        };
        agent.actor = load(&ck.actor, &agent.actor)?;
        for c in 0..2 {
            agent.critics[c] = load(&ck.critics[c], &agent.critics[c])?;
            agent.targets[c] = load(&ck.targets[c], &agent.targets[c])?;
        }
        agent.log_alpha = ck.log_alpha;
        Ok(agent)
    }
}

/// Deterministic (evaluation-mode) policy.
impl Policy for SacAgent {
    fn act(&mut self, obs: &Observation, env: &StarMecEnv) -> ActionVector {
        let f = obs.features(env.config().scenario.num_slots);
        self.select_action(&f, true)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentCheckpoint {
    pub version: u32,
    pub config: AgentConfig,
    pub state_dim: usize,
    pub action_dim: usize,
    pub log_alpha: f64,
    pub actor: NetCheckpoint,
    pub critics: Vec<NetCheckpoint>,
    pub targets: Vec<NetCheckpoint>,
}
