//! Experiment runners: flat JSON configuration, schemes and baselines, per-seed
//! runs, result rows and scheme comparison.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::env::{
    ActionVector, ConstantPolicy, EnvConfig, EnvError, Policy, RandomPolicy, Scheme, StarMecEnv, TraceRow,
};
use crate::protocol::Protocol;
use crate::rng::{self, derive_seed};
use crate::sac::{self, AgentConfig, SacAgent, TrainError, TrainingLog};
use crate::scenario::{ConfigError, ScenarioConfig};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("config must be a flat JSON object")]
    NotObject,
    #[error("unknown config key(s): {0}")]
    UnknownKeys(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("{0}")]
    Compare(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Every knob of a run in one flat object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(flatten)]
    pub scenario: ScenarioConfig,
    #[serde(flatten)]
    pub agent: AgentConfig,
    /// Episodes per seed in the final evaluation.
    #[serde(default = "default_eval_episodes")]
    pub final_eval_episodes: usize,
    /// Evaluation episodes written to the trace file.
    #[serde(default = "default_trace_episodes")]
    pub trace_episodes: usize,
}

fn default_eval_episodes() -> usize {
    200
}

fn default_trace_episodes() -> usize {
    20
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioConfig::default(),
            agent: AgentConfig::default(),
            final_eval_episodes: default_eval_episodes(),
            trace_episodes: default_trace_episodes(),
        }
    }
}

impl ExperimentConfig {
    /// Parses a flat JSON object; missing keys take defaults, unknown keys are
    /// rejected.
    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        let value: Value = serde_json::from_str(text)?;
        let Value::Object(map) = &value else {
            return Err(ExperimentError::NotObject);
        };
        let known = Self::known_keys();
        let unknown: Vec<&str> = map.keys().map(String::as_str).filter(|k| !known.contains(*k)).collect();
        if !unknown.is_empty() {
            return Err(ExperimentError::UnknownKeys(unknown.join(", ")));
        }
        let cfg: Self = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn known_keys() -> BTreeSet<String> {
        match serde_json::to_value(Self::default()) {
            Ok(Value::Object(m)) => m.keys().cloned().collect::<BTreeSet<_>>(),
            _ => unreachable!("config serializes to an object"),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.scenario.validate()?;
        self.agent.validate()?;
        if self.final_eval_episodes == 0 {
            return Err(ConfigError::invalid("final_eval_episodes", "must be positive"));
        }
        Ok(())
    }

    pub fn env_config(&self, protocol: Protocol, scheme: Scheme) -> EnvConfig {
        EnvConfig::new(self.scenario.clone(), protocol, scheme)
    }

    /// Shared across schemes so comparisons are paired.
    pub fn eval_seeds(&self, seed: u64) -> Vec<u64> {
        (0..self.final_eval_episodes as u64)
            .map(|i| derive_seed(seed, rng::TAG_EVAL_EPISODE, i))
            .collect()
    }
}

/// Overrides applied on top of a parsed object, for sweeps.
pub fn with_overrides(cfg: &ExperimentConfig, overrides: &Map<String, Value>) -> Result<ExperimentConfig, ExperimentError> {
    let Value::Object(mut base) = serde_json::to_value(cfg)? else {
        return Err(ExperimentError::NotObject);
    };
    for (k, v) in overrides {
        base.insert(k.clone(), v.clone());
    }
    ExperimentConfig::from_json(&Value::Object(base).to_string())
}

/// The full scheme and its baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeName {
    Rotatable,
    FixedOrientation,
    ReflectOnly,
    TransmitOnly,
    LocalOnly,
    RandomPolicy,
}

impl SchemeName {
    pub const BASELINES: [SchemeName; 5] = [
        SchemeName::FixedOrientation,
        SchemeName::ReflectOnly,
        SchemeName::TransmitOnly,
        SchemeName::LocalOnly,
        SchemeName::RandomPolicy,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SchemeName::Rotatable => "rotatable",
            SchemeName::FixedOrientation => "fixed-orientation",
            SchemeName::ReflectOnly => "reflect-only",
            SchemeName::TransmitOnly => "transmit-only",
            SchemeName::LocalOnly => "local-only",
            SchemeName::RandomPolicy => "random-policy",
        }
    }

    pub fn env_scheme(self) -> Scheme {
        match self {
            SchemeName::Rotatable | SchemeName::RandomPolicy => Scheme::Rotatable,
            SchemeName::FixedOrientation => Scheme::FixedOrientation,
            SchemeName::ReflectOnly => Scheme::ReflectOnly,
            SchemeName::TransmitOnly => Scheme::TransmitOnly,
            SchemeName::LocalOnly => Scheme::LocalOnly,
        }
    }

    pub fn is_trained(self) -> bool {
        !matches!(self, SchemeName::LocalOnly | SchemeName::RandomPolicy)
    }
}

impl fmt::Display for SchemeName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown scheme `{0}`")]
pub struct UnknownScheme(pub String);

impl FromStr for SchemeName {
    type Err = UnknownScheme;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [SchemeName::Rotatable]
            .into_iter()
            .chain(SchemeName::BASELINES)
            .find(|n| n.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| UnknownScheme(s.to_string()))
    }
}

/// One `(configuration, scheme, seed)` result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub protocol: Protocol,
    pub scheme: SchemeName,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub seed: u64,
    pub episodes: usize,
    /// Mean per-episode system energy `sum_k E_k`.
    #[serde(rename = "energy_J")]
    pub energy_j: f64,
    #[serde(rename = "energy_std_J")]
    pub energy_std_j: f64,
    /// Mean per-UD energies joined by `;`.
    #[serde(rename = "per_ud_energy_J")]
    pub per_ud_energy_j: String,
    pub p1: f64,
    pub p2: f64,
    pub wall_clock_s: f64,
}

impl ResultRow {
    pub fn per_ud(&self) -> Vec<f64> {
        self.per_ud_energy_j.split(';').filter_map(|s| s.parse().ok()).collect()
    }
}

pub fn join_values(xs: &[f64]) -> String {
    xs.iter().map(f64::to_string).collect::<Vec<_>>().join(";")
}

pub fn write_results<W: Write>(rows: &[ResultRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results<R: Read>(input: R) -> csv::Result<Vec<ResultRow>> {
    csv::Reader::from_reader(input).deserialize().collect()
}

/// Sample mean and standard deviation (`n - 1` denominator; 0 for one value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}

/// Aggregates of an evaluation sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// System energy of each episode.
    pub energies: Vec<f64>,
    pub per_ud: Vec<f64>,
    pub p1: f64,
    pub p2: f64,
    pub trace: Vec<(usize, TraceRow)>,
}

/// Runs one episode per seed with `policy`, keeping the first `trace_episodes`
/// episodes as trace rows.
pub fn evaluate<P: Policy>(
    env: &mut StarMecEnv,
    policy: &mut P,
    seeds: &[u64],
    trace_episodes: usize,
) -> Result<Evaluation, EnvError> {
    let k = env.config().scenario.num_uds;
    let mut ev = Evaluation {
        energies: Vec::with_capacity(seeds.len()),
        per_ud: vec![0.0; k],
        p1: 0.0,
        p2: 0.0,
        trace: Vec::new(),
    };
    for (ep, &seed) in seeds.iter().enumerate() {
        let mut obs = env.reset(seed)?;
        let mut q = 1;
        loop {
            let a = policy.act(&obs, env);
            let out = env.step(&a)?;
            if ep < trace_episodes {
                ev.trace.push((ep + 1, TraceRow::from_outcome(q, &out)));
            }
            q += 1;
            if let Some(cycle) = &out.cycle {
                ev.energies.push(crate::compute::total_energy(cycle));
                for (acc, r) in ev.per_ud.iter_mut().zip(cycle) {
                    *acc += r.energy();
                }
                ev.p1 += out.breakdown.p1;
                ev.p2 += out.breakdown.p2;
            }
            obs = out.observation;
            if out.done {
                break;
            }
        }
    }
    let n = seeds.len().max(1) as f64;
    ev.per_ud.iter_mut().for_each(|x| *x /= n);
    ev.p1 /= n;
    ev.p2 /= n;
    Ok(ev)
}

/// Everything one seed of one scheme produces.
pub struct SeedRun {
    pub row: ResultRow,
    pub log: Option<TrainingLog>,
    pub trace: Vec<(usize, TraceRow)>,
    pub agent: Option<SacAgent>,
    pub evaluation: Evaluation,
}

fn make_row(
    cfg: &ExperimentConfig,
    protocol: Protocol,
    scheme: SchemeName,
    seed: u64,
    ev: &Evaluation,
    started: Instant,
) -> ResultRow {
    let (m, s) = mean_std(&ev.energies);
    ResultRow {
        protocol,
        scheme,
        n: cfg.scenario.num_elements,
        k: cfg.scenario.num_uds,
        seed,
        episodes: ev.energies.len(),
        energy_j: m,
        energy_std_j: s,
        per_ud_energy_j: join_values(&ev.per_ud),
        p1: ev.p1,
        p2: ev.p2,
        wall_clock_s: started.elapsed().as_secs_f64(),
    }
}

/// Trains when the scheme learns, then evaluates on the shared seeds.
pub fn run_seed(
    cfg: &ExperimentConfig,
    protocol: Protocol,
    scheme: SchemeName,
    seed: u64,
) -> Result<SeedRun, ExperimentError> {
    let started = Instant::now();
    let env_cfg = cfg.env_config(protocol, scheme.env_scheme());
    let mut env = StarMecEnv::new(env_cfg.clone(), seed)?;
    let seeds = cfg.eval_seeds(seed);
    let (ev, log, agent) = match scheme {
        SchemeName::LocalOnly => {
            let mut p = ConstantPolicy(ActionVector(vec![-1.0; env.action_dim()]));
            (evaluate(&mut env, &mut p, &seeds, cfg.trace_episodes)?, None, None)
        }
        SchemeName::RandomPolicy => {
            let mut p = RandomPolicy::new(seed);
            (evaluate(&mut env, &mut p, &seeds, cfg.trace_episodes)?, None, None)
        }
        _ => {
            let out = sac::train(&env_cfg, &cfg.agent, seed)?;
            let mut agent = out.agent;
            let ev = evaluate(&mut env, &mut agent, &seeds, cfg.trace_episodes)?;
            (ev, Some(out.log), Some(agent))
        }
    };
    Ok(SeedRun {
        row: make_row(cfg, protocol, scheme, seed, &ev, started),
        log,
        trace: ev.trace.clone(),
        agent,
        evaluation: ev,
    })
}

/// Evaluates an already trained agent.
pub fn eval_agent(
    cfg: &ExperimentConfig,
    protocol: Protocol,
    scheme: SchemeName,
    seed: u64,
    agent: &mut SacAgent,
) -> Result<SeedRun, ExperimentError> {
    let started = Instant::now();
    let mut env = StarMecEnv::new(cfg.env_config(protocol, scheme.env_scheme()), seed)?;
    if agent.state_dim() != env.feature_dim() || agent.action_dim() != env.action_dim() {
        return Err(ExperimentError::Compare(format!(
            "checkpoint dimensions ({}, {}) do not match the environment ({}, {})",
            agent.state_dim(),
            agent.action_dim(),
            env.feature_dim(),
            env.action_dim()
        )));
    }
    let ev = evaluate(&mut env, agent, &cfg.eval_seeds(seed), cfg.trace_episodes)?;
    Ok(SeedRun {
        row: make_row(cfg, protocol, scheme, seed, &ev, started),
        log: None,
        trace: ev.trace.clone(),
        agent: None,
        evaluation: ev,
    })
}

/// Per-`(protocol, N, K, scheme)` aggregate across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub protocol: Protocol,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub scheme: SchemeName,
    pub seeds: usize,
    #[serde(rename = "mean_energy_J")]
    pub mean_energy_j: f64,
    #[serde(rename = "std_energy_J")]
    pub std_energy_j: f64,
    /// `100 (fixed - rotatable) / fixed`, on the rotatable row.
    pub reduction_vs_fixed_pct: Option<f64>,
    /// 1 is the lowest mean energy within the configuration.
    pub rank: usize,
}

/// Means and standard deviations across seeds, the rotatable-vs-fixed reduction
/// and a per-configuration ranking.
pub fn compare(rows: &[ResultRow]) -> Result<Vec<SummaryRow>, ExperimentError> {
    type Key = (Protocol, usize, usize);
    let mut groups: BTreeMap<Key, BTreeMap<SchemeName, Vec<&ResultRow>>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.protocol, r.n, r.k)).or_default().entry(r.scheme).or_default().push(r);
    }
    let mut out = Vec::new();
    for ((protocol, n, k), schemes) in groups {
        let mut seed_sets = schemes
            .iter()
            .map(|(s, rs)| (*s, rs.iter().map(|r| r.seed).collect::<BTreeSet<_>>()));
        let (first_scheme, first) = seed_sets.next().expect("group is non-empty");
        for (s, set) in seed_sets {
            if set != first {
                return Err(ExperimentError::Compare(format!(
                    "{protocol} N={n} K={k}: scheme {s} has seeds {set:?} but {first_scheme} has {first:?}"
                )));
            }
        }
        for (s, rs) in &schemes {
            if rs.len() != first.len() {
                return Err(ExperimentError::Compare(format!(
                    "{protocol} N={n} K={k}: scheme {s} has duplicate seeds"
                )));
            }
        }
        let stats: BTreeMap<SchemeName, (f64, f64)> = schemes
            .iter()
            .map(|(s, rs)| (*s, mean_std(&rs.iter().map(|r| r.energy_j).collect::<Vec<_>>())))
            .collect();
        let mut order: Vec<SchemeName> = stats.keys().copied().collect();
        order.sort_by(|a, b| stats[a].0.total_cmp(&stats[b].0).then(a.cmp(b)));
        let fixed = stats.get(&SchemeName::FixedOrientation).map(|s| s.0);
        for (s, &(m, sd)) in &stats {
            let reduction = match (s, fixed) {
                (SchemeName::Rotatable, Some(f)) => Some(reduction_pct(f, m)),
                _ => None,
            };
            out.push(SummaryRow {
                protocol,
                n,
                k,
                scheme: *s,
                seeds: first.len(),
                mean_energy_j: m,
                std_energy_j: sd,
                reduction_vs_fixed_pct: reduction,
                rank: order.iter().position(|o| o == s).unwrap() + 1,
            });
        }
    }
    Ok(out)
}

/// `100 (baseline - value) / baseline`, 0 when both are equal.
pub fn reduction_pct(baseline: f64, value: f64) -> f64 {
    if baseline == value {
        0.0
    } else {
        100.0 * (baseline - value) / baseline
    }
}

pub fn write_summary<W: Write>(rows: &[SummaryRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Concatenated training logs with a leading `seed` column.
pub fn write_train_logs<W: Write>(logs: &[(u64, &TrainingLog)], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "seed",
        "episode",
        "env_steps",
        "mean_return",
        "critic_loss",
        "actor_loss",
        "alpha",
        "eval_energy_J",
    ])?;
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    for (seed, log) in logs {
        for r in &log.rows {
            w.write_record([
                seed.to_string(),
                r.episode.to_string(),
                r.env_steps.to_string(),
                r.mean_return.to_string(),
                opt(r.critic_loss),
                opt(r.actor_loss),
                r.alpha.to_string(),
                opt(r.eval_energy_j),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
