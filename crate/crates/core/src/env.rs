//! The Markov decision process over one task cycle.
//!
//! An episode is one cycle of `Q` slots. The agent acts in the first `Q - 1`
//! slots; the edge server finishes in the last one.

use std::f64::consts::PI;
use std::io::Write;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{self, phase_set, ChannelError, ChannelTraceRow, PhaseSet, Side, C64};
use crate::compute::{self, AllocationResult, CycleBudget, DinkelbachParams, LinkBudget, SlotAllocation};
use crate::protocol::{self, BuildError, Protocol, StarConfig};
use crate::rng;
use crate::scenario::{self, ConfigError, GeometryError, ScenarioConfig, World};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("step called on a finished episode")]
    EpisodeDone,
    #[error("action has {got} entries, expected {expected}")]
    ActionLength { got: usize, expected: usize },
    #[error("action entry {index} = {value} is outside [-1, 1]")]
    ActionRange { index: usize, value: f64 },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Build(#[from] BuildError),
}

/// Which decisions the agent controls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// Rotatable STAR-RIS, everything learned.
    Rotatable,
    /// Rotation frozen at the BS-facing orientation.
    FixedOrientation,
    /// Only the reflection side is active.
    ReflectOnly,
    /// Only the transmission side is active.
    TransmitOnly,
    /// Nothing is offloaded.
    LocalOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub scenario: ScenarioConfig,
    pub protocol: Protocol,
    pub scheme: Scheme,
    pub dinkelbach: DinkelbachParams,
    /// Keep per-slot channel rows for export.
    pub record_channels: bool,
}

impl EnvConfig {
    pub fn new(scenario: ScenarioConfig, protocol: Protocol, scheme: Scheme) -> Self {
        Self {
            scenario,
            protocol,
            scheme,
            dinkelbach: DinkelbachParams::default(),
            record_channels: false,
        }
    }
}

/// `s_q`: azimuths, elevations and cumulative offloaded fractions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub theta: Vec<f64>,
    pub phi: Vec<f64>,
    pub alpha_cu: Vec<f64>,
    /// Zero-based slot index.
    pub slot: usize,
}

impl Observation {
    pub fn num_uds(&self) -> usize {
        self.theta.len()
    }

    /// Agent input: `(sin theta, cos theta, phi, alpha_cu)` per UD, then slot progress.
    pub fn features(&self, num_slots: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(feature_dim(self.num_uds()));
        for k in 0..self.num_uds() {
            out.extend([self.theta[k].sin(), self.theta[k].cos(), self.phi[k], self.alpha_cu[k]]);
        }
        out.push(self.slot as f64 / (num_slots.max(2) - 1) as f64);
        out
    }
}

pub fn feature_dim(num_uds: usize) -> usize {
    4 * num_uds + 1
}

/// Raw agent output, every entry in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionVector(pub Vec<f64>);

impl ActionVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `3 N_bar + K + 1` for ES/MS, `N_bar + K + 2` for TS.
pub fn action_dim(protocol: Protocol, num_subsurfaces: usize, num_uds: usize) -> usize {
    match protocol {
        Protocol::Es | Protocol::Ms => 3 * num_subsurfaces + num_uds + 1,
        Protocol::Ts => num_subsurfaces + num_uds + 2,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub offload_energy: f64,
    pub local_energy: f64,
    pub p1: f64,
    pub p2: f64,
    pub reward: f64,
}

/// Per-UD quantities of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepInfo {
    pub delta: f64,
    pub star: StarConfig,
    pub alloc: Vec<SlotAllocation>,
    pub h: Vec<C64>,
    pub gain: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
    pub breakdown: RewardBreakdown,
    pub info: StepInfo,
    /// Whole-cycle allocations, present on the terminal step.
    pub cycle: Option<Vec<AllocationResult>>,
}

/// Decoded decisions for one slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub delta: f64,
    pub star: StarConfig,
    pub alphas: Vec<f64>,
}

fn unit(raw: f64) -> f64 {
    ((raw + 1.0) / 2.0).clamp(0.0, 1.0)
}

fn phase_bin(raw: f64, levels: usize) -> usize {
    ((unit(raw) * levels as f64).floor() as usize).min(levels - 1)
}

fn threshold(raw: f64) -> u8 {
    u8::from(raw >= 0.0)
}

/// Maps a raw action to the rotation, surface configuration and offload fractions.
///
/// The rotation is the affine image of `[-1, 1]` on `[theta0_B - pi, theta0_B]`;
/// offload fractions are clipped to each UD's remaining budget `1 - alpha_cu`.
pub fn decode_action(
    action: &ActionVector,
    protocol: Protocol,
    phases: &PhaseSet,
    theta0_bs: f64,
    num_subsurfaces: usize,
    alpha_cu: &[f64],
) -> Decoded {
    let a = &action.0;
    let m = num_subsurfaces;
    let k = alpha_cu.len();
    let levels = phases.len();
    let delta = theta0_bs - PI + unit(a[0]) * PI;
    let (star, alpha_off) = match protocol {
        Protocol::Es | Protocol::Ms => {
            let phase_r: Vec<usize> = a[1..1 + m].iter().map(|&x| phase_bin(x, levels)).collect();
            let phase_t: Vec<usize> = a[1 + m..1 + 2 * m].iter().map(|&x| phase_bin(x, levels)).collect();
            let beta_r: Vec<f64> = a[1 + 2 * m..1 + 3 * m]
                .iter()
                .map(|&x| if protocol == Protocol::Es { unit(x) } else { f64::from(threshold(x)) })
                .collect();
            let beta_t = beta_r.iter().map(|b| 1.0 - b).collect();
            (
                StarConfig {
                    kind: protocol,
                    phase_r,
                    phase_t,
                    beta_r,
                    beta_t,
                    lambda_r: 0,
                    lambda_t: 0,
                },
                1 + 3 * m,
            )
        }
        Protocol::Ts => {
            let phase: Vec<usize> = a[1..1 + m].iter().map(|&x| phase_bin(x, levels)).collect();
            let lambda_r = threshold(a[1 + m]);
            (
                StarConfig {
                    kind: protocol,
                    phase_r: phase.clone(),
                    phase_t: phase,
                    beta_r: Vec::new(),
                    beta_t: Vec::new(),
                    lambda_r,
                    lambda_t: 1 - lambda_r,
                },
                2 + m,
            )
        }
    };
    let alphas = (0..k)
        .map(|i| unit(a[alpha_off + i]).min((1.0 - alpha_cu[i]).max(0.0)))
        .collect();
    Decoded { delta, star, alphas }
}

/// Forces the scheme's fixed decisions onto a decoded action.
fn apply_scheme(scheme: Scheme, d: &mut Decoded) {
    match scheme {
        Scheme::Rotatable => {}
        Scheme::FixedOrientation => d.delta = 0.0,
        Scheme::ReflectOnly | Scheme::TransmitOnly => {
            let reflect = scheme == Scheme::ReflectOnly;
            match d.star.kind {
                Protocol::Es | Protocol::Ms => {
                    let (r, t) = if reflect { (1.0, 0.0) } else { (0.0, 1.0) };
                    d.star.beta_r.iter_mut().for_each(|b| *b = r);
                    d.star.beta_t.iter_mut().for_each(|b| *b = t);
                }
                Protocol::Ts => {
                    d.star.lambda_r = u8::from(reflect);
                    d.star.lambda_t = u8::from(!reflect);
                }
            }
        }
        Scheme::LocalOnly => d.alphas.iter_mut().for_each(|a| *a = 0.0),
    }
}

#[derive(Debug, Clone)]
pub struct StarMecEnv {
    config: EnvConfig,
    phases: PhaseSet,
    world: World,
    rng: ChaCha8Rng,
    done: bool,
    slots: Vec<Vec<SlotAllocation>>,
    channel_rows: Vec<ChannelTraceRow>,
}

impl StarMecEnv {
    pub fn new(config: EnvConfig, seed: u64) -> Result<Self, EnvError> {
        let world = scenario::init_world(&config.scenario, seed)?;
        let phases = phase_set(config.scenario.phase_bits);
        let k = config.scenario.num_uds;
        Ok(Self {
            phases,
            world,
            rng: rng::stream(seed, rng::TAG_DYNAMICS),
            done: false,
            slots: vec![Vec::new(); k],
            channel_rows: Vec::new(),
            config,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn phases(&self) -> &PhaseSet {
        &self.phases
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn action_dim(&self) -> usize {
        let s = &self.config.scenario;
        action_dim(self.config.protocol, s.num_subsurfaces, s.num_uds)
    }

    pub fn feature_dim(&self) -> usize {
        feature_dim(self.config.scenario.num_uds)
    }

    /// Steps per episode, `Q - 1`.
    pub fn episode_len(&self) -> usize {
        self.config.scenario.num_slots - 1
    }

    pub fn channel_trace(&self) -> &[ChannelTraceRow] {
        &self.channel_rows
    }

    /// Fresh placement and dynamics from `seed`, at the first slot with nothing
    /// offloaded.
    pub fn reset(&mut self, seed: u64) -> Result<Observation, EnvError> {
        self.world = scenario::init_world(&self.config.scenario, seed)?;
        self.rng = rng::stream(seed, rng::TAG_DYNAMICS);
        self.done = false;
        self.slots.iter_mut().for_each(Vec::clear);
        self.channel_rows.clear();
        self.observe()
    }

    pub fn observe(&self) -> Result<Observation, EnvError> {
        let ang = scenario::angles(&self.world)?;
        Ok(Observation {
            theta: ang.theta_ud,
            phi: ang.phi_ud,
            alpha_cu: self.world.uds.iter().map(|u| u.alpha_cu).collect(),
            slot: self.world.slot,
        })
    }

    fn check_action(&self, action: &ActionVector) -> Result<(), EnvError> {
        let expected = self.action_dim();
        if action.len() != expected {
            return Err(EnvError::ActionLength {
                got: action.len(),
                expected,
            });
        }
        if let Some((index, &value)) = action.0.iter().enumerate().find(|(_, x)| !(x.abs() <= 1.0)) {
            return Err(EnvError::ActionRange { index, value });
        }
        Ok(())
    }

    /// Decodes with the scheme overrides applied, without touching the state.
    pub fn decode(&self, action: &ActionVector) -> Result<Decoded, EnvError> {
        self.check_action(action)?;
        let s = &self.config.scenario;
        let alpha_cu: Vec<f64> = self.world.uds.iter().map(|u| u.alpha_cu).collect();
        let mut d = decode_action(
            action,
            self.config.protocol,
            &self.phases,
            self.world.orientation.theta0_bs,
            s.num_subsurfaces,
            &alpha_cu,
        );
        apply_scheme(self.config.scheme, &mut d);
        d.delta = scenario::clamp_rotation(d.delta, &self.world.orientation);
        Ok(d)
    }

    fn link(&self) -> LinkBudget {
        let s = &self.config.scenario;
        LinkBudget {
            task_bits: s.task_bits,
            bandwidth_hz: s.ud_bandwidth_hz(),
            slot_s: s.slot_s(),
            noise_w: s.noise_w,
            p_max: s.p_max,
            dinkelbach: self.config.dinkelbach.clone(),
        }
    }

    fn cycle_budget(&self) -> CycleBudget {
        let s = &self.config.scenario;
        CycleBudget {
            task_bits: s.task_bits,
            cycles_per_bit: s.cycles_per_bit,
            cycle_s: s.cycle_s,
            num_slots: s.num_slots,
            slot_s: s.slot_s(),
            capacitance: s.capacitance,
            local_max_hz: s.local_max_hz,
        }
    }

    pub fn step(&mut self, action: &ActionVector) -> Result<StepOutcome, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeDone);
        }
        let decoded = self.decode(action)?;
        let s = self.config.scenario.clone();

        self.world.orientation.delta = decoded.delta;
        let ang = scenario::angles(&self.world)?;
        let real = channel::draw_channels(&self.world, &mut self.rng)?;
        let coeffs = protocol::build_matrices(&decoded.star, &self.phases, s.num_elements)?;
        let link = self.link();

        let mut alloc = Vec::with_capacity(s.num_uds);
        let mut hs = Vec::with_capacity(s.num_uds);
        let mut gains = Vec::with_capacity(s.num_uds);
        for k in 0..s.num_uds {
            let u_k = scenario::zone_indicator(ang.theta_ud[k]);
            let mut g = channel::star_gain_scalar(&ang, k, s.pattern_exponent, s.max_directivity);
            if decoded.star.kind == Protocol::Ts && !protocol::ts_serving_indicator(decoded.star.lambda_r == 1, u_k == 1)
            {
                g = 0.0;
            }
            let h = channel::effective_channel(&real, &coeffs, g, k, Side::from_zone(u_k))?;
            let a = compute::allocate_slot(decoded.alphas[k], h, &link);
            if self.config.record_channels {
                self.channel_rows.push(ChannelTraceRow {
                    q: self.world.slot + 1,
                    k: k + 1,
                    re_h: h.re,
                    im_h: h.im,
                    g,
                });
            }
            hs.push(h);
            gains.push(g);
            alloc.push(a);
        }

        let offload_energy: f64 = alloc.iter().map(|a| a.e_off).sum();
        for (k, a) in alloc.iter().enumerate() {
            self.slots[k].push(a.clone());
            let ud = &mut self.world.uds[k];
            ud.alpha_cu = (ud.alpha_cu + a.alpha).min(1.0);
        }

        let terminal = self.world.slot + 2 >= s.num_slots;
        let mut breakdown = RewardBreakdown {
            offload_energy,
            ..RewardBreakdown::default()
        };
        let mut cycle = None;
        if terminal {
            let budget = self.cycle_budget();
            let results: Vec<AllocationResult> =
                self.slots.iter().map(|sl| compute::complete_cycle(sl.clone(), &budget)).collect();
            breakdown.local_energy = results.iter().map(|r| r.e_loc).sum();
            let edge: f64 = results.iter().map(|r| r.f_edge).sum();
            breakdown.p1 = (edge - s.edge_total_hz).max(0.0) * s.penalty_w;
            if results.iter().any(AllocationResult::any_infeasible) {
                breakdown.p2 = s.penalty_w;
            }
            cycle = Some(results);
        }
        breakdown.reward =
            -(breakdown.offload_energy + breakdown.local_energy + breakdown.p1 + breakdown.p2);

        scenario::step_mobility(&mut self.world, &mut self.rng);
        self.done = terminal;
        Ok(StepOutcome {
            observation: self.observe()?,
            reward: breakdown.reward,
            done: terminal,
            breakdown,
            info: StepInfo {
                delta: decoded.delta,
                star: decoded.star,
                alloc,
                h: hs,
                gain: gains,
            },
            cycle,
        })
    }
}

/// Anything that maps observations to raw actions.
pub trait Policy {
    fn act(&mut self, obs: &Observation, env: &StarMecEnv) -> ActionVector;
}

/// Uniform actions on `[-1, 1]^A`.
pub struct RandomPolicy {
    rng: ChaCha8Rng,
}

impl RandomPolicy {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: rng::stream(seed, rng::TAG_RANDOM_POLICY),
        }
    }
}

impl Policy for RandomPolicy {
    fn act(&mut self, _obs: &Observation, env: &StarMecEnv) -> ActionVector {
        ActionVector((0..env.action_dim()).map(|_| self.rng.random_range(-1.0..=1.0)).collect())
    }
}

/// The same action every slot.
pub struct ConstantPolicy(pub ActionVector);

impl Policy for ConstantPolicy {
    fn act(&mut self, _obs: &Observation, _env: &StarMecEnv) -> ActionVector {
        self.0.clone()
    }
}

/// One row of an episode trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub q: usize,
    pub delta: f64,
    pub reward: f64,
    pub breakdown: RewardBreakdown,
    pub alpha: Vec<f64>,
    pub power: Vec<f64>,
    pub e_off: Vec<f64>,
    pub h: Vec<C64>,
}

impl TraceRow {
    pub fn from_outcome(q: usize, out: &StepOutcome) -> Self {
        Self {
            q,
            delta: out.info.delta,
            reward: out.reward,
            breakdown: out.breakdown,
            alpha: out.info.alloc.iter().map(|a| a.alpha).collect(),
            power: out.info.alloc.iter().map(|a| a.power).collect(),
            e_off: out.info.alloc.iter().map(|a| a.e_off).collect(),
            h: out.info.h.clone(),
        }
    }
}

pub fn trace_header(num_uds: usize) -> Vec<String> {
    let mut h: Vec<String> = ["episode", "q", "delta", "reward", "offload_energy", "local_energy", "p1", "p2"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for name in ["alpha", "p", "e_off", "re_h", "im_h"] {
        h.extend((1..=num_uds).map(|k| format!("{name}_{k}")));
    }
    h
}

/// Writes `(episode, row)` pairs as CSV with per-UD column groups.
pub fn write_trace<W: Write>(rows: &[(usize, TraceRow)], num_uds: usize, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(trace_header(num_uds))?;
    for (ep, r) in rows {
        let mut rec = vec![
            ep.to_string(),
            r.q.to_string(),
            r.delta.to_string(),
            r.reward.to_string(),
            r.breakdown.offload_energy.to_string(),
            r.breakdown.local_energy.to_string(),
            r.breakdown.p1.to_string(),
            r.breakdown.p2.to_string(),
        ];
        for col in [&r.alpha, &r.power, &r.e_off] {
            rec.extend(col.iter().map(f64::to_string));
        }
        rec.extend(r.h.iter().map(|h| h.re.to_string()));
        rec.extend(r.h.iter().map(|h| h.im.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small(protocol: Protocol, scheme: Scheme) -> StarMecEnv {
        let scenario = ScenarioConfig {
            num_uds: 2,
            num_elements: 16,
            num_subsurfaces: 4,
            ..ScenarioConfig::default()
        };
        StarMecEnv::new(EnvConfig::new(scenario, protocol, scheme), 7).unwrap()
    }

    fn const_action(dim: usize, v: f64) -> ActionVector {
        ActionVector(vec![v; dim])
    }

    #[test]
    fn action_dims() {
        assert_eq!(action_dim(Protocol::Es, 10, 6), 37);
        assert_eq!(action_dim(Protocol::Ms, 10, 6), 37);
        assert_eq!(action_dim(Protocol::Ts, 10, 6), 18);
    }

    #[test]
    fn reset_is_deterministic() {
        let mut a = small(Protocol::Es, Scheme::Rotatable);
        let mut b = small(Protocol::Es, Scheme::Rotatable);
        assert_eq!(a.reset(11).unwrap(), b.reset(11).unwrap());
        let o = a.reset(11).unwrap();
        assert_eq!(o.slot, 0);
        assert!(o.alpha_cu.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn local_only_episode() {
        let scenario = ScenarioConfig::default();
        let mut env = StarMecEnv::new(EnvConfig::new(scenario, Protocol::Es, Scheme::LocalOnly), 1).unwrap();
        env.reset(1).unwrap();
        let a = const_action(env.action_dim(), 0.5);
        let mut rewards = Vec::new();
        loop {
            let out = env.step(&a).unwrap();
            rewards.push(out.reward);
            if out.done {
                assert_eq!(out.breakdown.p2, 0.0);
                break;
            }
        }
        assert_eq!(rewards.len(), 4);
        assert!(rewards[..3].iter().all(|&r| r == 0.0));
        assert!((rewards[3] + 12.96).abs() < 1e-10, "{}", rewards[3]);
        assert!(matches!(env.step(&a), Err(EnvError::EpisodeDone)));
    }

    #[test]
    fn zero_alpha_nonterminal_reward_is_zero() {
        let mut env = small(Protocol::Ms, Scheme::Rotatable);
        env.reset(3).unwrap();
        let out = env.step(&const_action(env.action_dim(), -1.0)).unwrap();
        assert_eq!(out.reward, 0.0);
        assert!(!out.done);
    }

    #[test]
    fn action_validation() {
        let mut env = small(Protocol::Ts, Scheme::Rotatable);
        env.reset(3).unwrap();
        assert!(matches!(
            env.step(&const_action(3, 0.0)),
            Err(EnvError::ActionLength { .. })
        ));
        let mut a = const_action(env.action_dim(), 0.0);
        a.0[2] = 1.5;
        assert!(matches!(env.step(&a), Err(EnvError::ActionRange { index: 2, .. })));
        a.0[2] = f64::NAN;
        assert!(env.step(&a).is_err());
    }

    #[test]
    fn decode_extremes() {
        let ph = phase_set(2);
        let theta0 = PI / 2.0;
        let lo = decode_action(&const_action(action_dim(Protocol::Es, 4, 2), -1.0), Protocol::Es, &ph, theta0, 4, &[0.0, 0.9]);
        assert_eq!(lo.delta, theta0 - PI);
        assert!(lo.star.phase_r.iter().all(|&i| i == 0));
        assert!(lo.star.beta_r.iter().all(|&b| b == 0.0));
        assert_eq!(lo.alphas, vec![0.0, 0.0]);
        let hi = decode_action(&const_action(action_dim(Protocol::Es, 4, 2), 1.0), Protocol::Es, &ph, theta0, 4, &[0.0, 0.75]);
        assert_eq!(hi.delta, theta0);
        assert!(hi.star.phase_t.iter().all(|&i| i == 3));
        assert!(hi.star.beta_t.iter().all(|&b| b == 0.0));
        assert_eq!(hi.alphas, vec![1.0, 0.25]);
        let ts = decode_action(&const_action(action_dim(Protocol::Ts, 4, 2), 0.0), Protocol::Ts, &ph, theta0, 4, &[0.0, 0.0]);
        assert_eq!((ts.star.lambda_r, ts.star.lambda_t), (1, 0));
        assert_eq!(ts.star.phase_r, ts.star.phase_t);
        assert_eq!(ts.alphas, vec![0.5, 0.5]);
    }

    #[test]
    fn phase_bins_are_uniform() {
        let counts = (0..4000).fold([0usize; 4], |mut c, i| {
            let raw = -1.0 + 2.0 * (i as f64 + 0.5) / 4000.0;
            c[phase_bin(raw, 4)] += 1;
            c
        });
        assert_eq!(counts, [1000; 4]);
    }

    #[test]
    fn fixed_orientation_keeps_delta_zero() {
        let mut env = small(Protocol::Es, Scheme::FixedOrientation);
        env.reset(5).unwrap();
        let out = env.step(&const_action(env.action_dim(), -0.7)).unwrap();
        assert_eq!(out.info.delta, 0.0);
    }

    #[test]
    fn ts_unserved_ud_gets_direct_link_only() {
        let mut env = small(Protocol::Ts, Scheme::Rotatable);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut seen = [false; 2];
        for ep in 0..200 {
            env.reset(ep).unwrap();
            let mut a = ActionVector((0..env.action_dim()).map(|_| rng.random_range(-1.0..1.0)).collect());
            let lambda_r = ep % 2 == 0;
            a.0[1 + 4] = if lambda_r { 0.5 } else { -0.5 };
            let theta0 = env.world().orientation.theta0_ud.clone();
            let out = env.step(&a).unwrap();
            for k in 0..2 {
                let u_k = scenario::zone_indicator(scenario::rotate_angle(theta0[k], out.info.delta)) == 1;
                let served = protocol::ts_serving_indicator(lambda_r, u_k);
                seen[usize::from(served)] = true;
                if served {
                    assert!(out.info.gain[k] > 0.0);
                } else {
                    assert_eq!(out.info.gain[k], 0.0);
                }
            }
        }
        assert_eq!(seen, [true, true]);
    }

    #[test]
    fn reward_identity_over_random_episodes() {
        for protocol in Protocol::ALL {
            let mut env = small(protocol, Scheme::Rotatable);
            let mut pol = RandomPolicy::new(1);
            for ep in 0..50 {
                let mut obs = env.reset(ep).unwrap();
                let mut ret = 0.0;
                let mut e_off = 0.0;
                loop {
                    let a = pol.act(&obs, &env);
                    let out = env.step(&a).unwrap();
                    ret += out.reward;
                    e_off += out.info.alloc.iter().map(|a| a.e_off).sum::<f64>();
                    obs = out.observation.clone();
                    assert!(obs.alpha_cu.iter().all(|&x| (0.0..=1.0).contains(&x)));
                    if let Some(c) = out.cycle {
                        let total = compute::total_energy(&c) + out.breakdown.p1 + out.breakdown.p2;
                        assert!((-ret - total).abs() <= 1e-9 * total.max(1e-300));
                        assert!((c.iter().map(|r| r.offload_energy()).sum::<f64>() - e_off).abs() <= 1e-12 * e_off.max(1e-300));
                        break;
                    }
                }
            }
        }
    }

    #[test]
    fn trace_csv_header() {
        let mut buf = Vec::new();
        write_trace(&[], 2, &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("episode,q,delta,reward,offload_energy,local_energy,p1,p2,alpha_1,alpha_2,p_1"));
    }
}
