//! Scenario configuration, geometry, surface rotation and UD mobility.
//!
//! Angles follow one convention throughout: the azimuth of a point relative to the
//! surface is measured from the surface's zero-degree half-plane, chosen so that an
//! unrotated surface sees the BS at exactly `pi/2`. Azimuths in `[0, pi]` lie in the
//! reflection area (RA), the rest in the transmission area (TA).

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("invalid configuration field `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
}

impl ConfigError {
    pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        ConfigError::Invalid {
            field,
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("UD {ud} is co-located with the surface")]
    CoLocated { ud: usize },
}

/// Physical and simulation parameters. Serialized key names mirror the usual
/// symbols (`K`, `N`, `N_bar`, `Q`, `T`, ...).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    #[serde(rename = "K")]
    pub num_uds: usize,
    #[serde(rename = "N")]
    pub num_elements: usize,
    #[serde(rename = "N_bar")]
    pub num_subsurfaces: usize,
    #[serde(rename = "Q")]
    pub num_slots: usize,
    /// Cycle duration in seconds.
    #[serde(rename = "T")]
    pub cycle_s: f64,
    #[serde(rename = "b")]
    pub phase_bits: u32,
    /// Exponent of the exponential-Lambertian radiation pattern.
    #[serde(rename = "z")]
    pub pattern_exponent: f64,
    pub bs_pos: [f64; 3],
    pub ris_pos: [f64; 3],
    /// Centre of the UD placement annulus; its z-coordinate is ignored.
    pub ud_center: [f64; 3],
    /// Inner and outer placement radii (m).
    pub ud_radii: [f64; 2],
    #[serde(rename = "H")]
    pub ud_height: f64,
    /// Speed range in m/s.
    #[serde(rename = "v")]
    pub speed_range: [f64; 2],
    /// Standard deviation of the per-slot heading perturbation (rad).
    pub heading_std: f64,
    #[serde(rename = "D_k")]
    pub task_bits: f64,
    #[serde(rename = "C_k")]
    pub cycles_per_bit: f64,
    #[serde(rename = "B")]
    pub bandwidth_hz: f64,
    /// Noise power in watts.
    #[serde(rename = "sigma2")]
    pub noise_w: f64,
    pub p_max: f64,
    #[serde(rename = "f_total_e")]
    pub edge_total_hz: f64,
    #[serde(rename = "f_max_loc")]
    pub local_max_hz: f64,
    /// Effective switched capacitance of the UD CPU.
    #[serde(rename = "c_loc")]
    pub capacitance: f64,
    /// Path gain at the 1 m reference distance (linear).
    pub rho0: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    #[serde(rename = "K1")]
    pub rician_ud: f64,
    #[serde(rename = "K2")]
    pub rician_bs: f64,
    /// Penalty constant.
    #[serde(rename = "W")]
    pub penalty_w: f64,
    /// Maximum directivity of the surface.
    #[serde(rename = "D_m")]
    pub max_directivity: f64,
    pub carrier_hz: f64,
    /// Path-loss exponent of the blocked UD-BS link.
    pub direct_exponent: f64,
    /// Extra attenuation of the blocked UD-BS link (dB).
    pub blockage_db: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let z = 2.0;
        Self {
            num_uds: 6,
            num_elements: 100,
            num_subsurfaces: 10,
            num_slots: 5,
            cycle_s: 10.0,
            phase_bits: 2,
            pattern_exponent: z,
            bs_pos: [0.0, 0.0, 10.0],
            ris_pos: [50.0, 0.0, 1.0],
            ud_center: [50.0, 0.0, 0.0],
            ud_radii: [2.0, 7.0],
            ud_height: 0.0,
            speed_range: [1.1, 1.5],
            heading_std: 0.3,
            task_bits: 10e6,
            cycles_per_bit: 600.0,
            bandwidth_hz: 5e6,
            noise_w: dbm_to_watt(-110.0),
            p_max: 0.2,
            edge_total_hz: 10e9,
            local_max_hz: 0.6e9,
            capacitance: 1e-27,
            rho0: 1e-3,
            alpha1: 2.0,
            alpha2: 2.0,
            rician_ud: 10.0,
            rician_bs: 10.0,
            penalty_w: 10.0,
            max_directivity: 2.0 * (z + 1.0),
            carrier_hz: 2.4e9,
            direct_exponent: 3.5,
            blockage_db: 20.0,
            seed: 2024,
        }
    }
}

pub fn dbm_to_watt(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

impl ScenarioConfig {
    /// Slot length `T / Q`.
    pub fn slot_s(&self) -> f64 {
        self.cycle_s / self.num_slots as f64
    }

    /// Per-UD bandwidth `B / K`.
    pub fn ud_bandwidth_hz(&self) -> f64 {
        self.bandwidth_hz / self.num_uds as f64
    }

    pub fn wavelength_m(&self) -> f64 {
        299_792_458.0 / self.carrier_hz
    }

    pub fn elements_per_subsurface(&self) -> usize {
        self.num_elements / self.num_subsurfaces
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.num_uds == 0 {
            return Err(ConfigError::invalid("K", "must be at least 1"));
        }
        if self.num_elements == 0 {
            return Err(ConfigError::invalid("N", "must be at least 1"));
        }
        if self.num_subsurfaces == 0 || self.num_elements % self.num_subsurfaces != 0 {
            return Err(ConfigError::invalid(
                "N_bar",
                format!("must divide N = {}", self.num_elements),
            ));
        }
        if self.num_slots < 2 {
            return Err(ConfigError::invalid("Q", "must be at least 2"));
        }
        if self.phase_bits == 0 || self.phase_bits > 16 {
            return Err(ConfigError::invalid("b", "must be in 1..=16"));
        }
        let positive: [(&'static str, f64); 13] = [
            ("T", self.cycle_s),
            ("D_k", self.task_bits),
            ("C_k", self.cycles_per_bit),
            ("B", self.bandwidth_hz),
            ("sigma2", self.noise_w),
            ("p_max", self.p_max),
            ("f_total_e", self.edge_total_hz),
            ("f_max_loc", self.local_max_hz),
            ("c_loc", self.capacitance),
            ("rho0", self.rho0),
            ("D_m", self.max_directivity),
            ("carrier_hz", self.carrier_hz),
            ("W", self.penalty_w),
        ];
        for (field, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(ConfigError::invalid(field, "must be finite and strictly positive"));
            }
        }
        let nonneg: [(&'static str, f64); 7] = [
            ("z", self.pattern_exponent),
            ("alpha1", self.alpha1),
            ("alpha2", self.alpha2),
            ("direct_exponent", self.direct_exponent),
            ("heading_std", self.heading_std),
            ("K1", self.rician_ud),
            ("K2", self.rician_bs),
        ];
        for (field, value) in nonneg {
            // Rician factors may be +inf (pure line of sight).
            if value.is_nan() || value < 0.0 || (value.is_infinite() && !field.starts_with('K')) {
                return Err(ConfigError::invalid(field, "must be non-negative"));
            }
        }
        let [v_lo, v_hi] = self.speed_range;
        if !(v_lo.is_finite() && v_hi.is_finite() && 0.0 <= v_lo && v_lo <= v_hi) {
            return Err(ConfigError::invalid("v", "need 0 <= v_min <= v_max"));
        }
        let [r_lo, r_hi] = self.ud_radii;
        if !(r_lo.is_finite() && r_hi.is_finite() && 0.0 <= r_lo && r_lo <= r_hi) {
            return Err(ConfigError::invalid("ud_radii", "need 0 <= r_min <= r_max"));
        }
        if !self.blockage_db.is_finite() {
            return Err(ConfigError::invalid("blockage_db", "must be finite"));
        }
        let bs_h = [self.bs_pos[0] - self.ris_pos[0], self.bs_pos[1] - self.ris_pos[1]];
        if bs_h[0] == 0.0 && bs_h[1] == 0.0 {
            return Err(ConfigError::invalid("bs_pos", "BS must not sit directly above the surface"));
        }
        Ok(())
    }
}

pub type Vec3 = [f64; 3];

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn norm(a: Vec3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

pub fn distance(a: Vec3, b: Vec3) -> f64 {
    norm(sub(a, b))
}

/// Maps any angle into `[0, 2*pi)`.
pub fn wrap_angle(x: f64) -> f64 {
    if (0.0..TAU).contains(&x) {
        return x;
    }
    let r = x.rem_euclid(TAU);
    // rem_euclid can round up to exactly TAU for tiny negative inputs.
    if r >= TAU {
        0.0
    } else {
        r
    }
}

/// Rotated azimuth `(theta0 - delta + 2*pi) mod 2*pi`.
pub fn rotate_angle(theta0: f64, delta: f64) -> f64 {
    wrap_angle(theta0 - delta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UdState {
    pub position: Vec3,
    /// Mobility direction on the XOY plane (rad).
    pub heading: f64,
    pub speed: f64,
    /// Cumulative offloaded fraction of the task.
    pub alpha_cu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Orientation {
    /// Current rotation of the surface (rad). Not wrapped: it lives in
    /// `[theta0_bs - pi, theta0_bs]`.
    pub delta: f64,
    pub theta0_bs: f64,
    pub theta0_ud: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AngleSet {
    pub theta_ud: Vec<f64>,
    /// Elevation of each UD seen from the surface.
    pub phi_ud: Vec<f64>,
    pub theta_bs: f64,
    pub phi_bs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub config: ScenarioConfig,
    pub uds: Vec<UdState>,
    pub orientation: Orientation,
    /// Zero-based slot index within the cycle.
    pub slot: usize,
}

/// Azimuth of the surface's zero-degree half-plane, chosen so the BS sits at `pi/2`.
fn reference_azimuth(config: &ScenarioConfig) -> f64 {
    let d = sub(config.bs_pos, config.ris_pos);
    d[1].atan2(d[0]) - FRAC_PI_2
}

fn initial_azimuth(config: &ScenarioConfig, p: Vec3) -> f64 {
    let d = sub(p, config.ris_pos);
    wrap_angle(d[1].atan2(d[0]) - reference_azimuth(config))
}

pub fn init_world(config: &ScenarioConfig, seed: u64) -> Result<World, ConfigError> {
    config.validate()?;
    let mut rng = rng::stream(seed, rng::TAG_PLACEMENT);
    let [r_lo, r_hi] = config.ud_radii;
    let [v_lo, v_hi] = config.speed_range;
    let uds: Vec<UdState> = (0..config.num_uds)
        .map(|_| {
            // Uniform over the annulus area.
            let r = rng.random_range(r_lo * r_lo..=r_hi * r_hi).sqrt();
            let a = rng.random_range(0.0..TAU);
            let heading = rng.random_range(0.0..TAU);
            let speed = rng.random_range(v_lo..=v_hi);
            UdState {
                position: [
                    config.ud_center[0] + r * a.cos(),
                    config.ud_center[1] + r * a.sin(),
                    config.ud_height,
                ],
                heading,
                speed,
                alpha_cu: 0.0,
            }
        })
        .collect();
    let theta0_ud = uds.iter().map(|u| initial_azimuth(config, u.position)).collect();
    Ok(World {
        config: config.clone(),
        uds,
        orientation: Orientation {
            delta: 0.0,
            theta0_bs: FRAC_PI_2,
            theta0_ud,
        },
        slot: 0,
    })
}

/// Advances every UD by one slot of constant-velocity motion, then perturbs the
/// heading and resamples the speed.
pub fn step_mobility<R: Rng + ?Sized>(world: &mut World, rng: &mut R) {
    let tau = world.config.slot_s();
    let [v_lo, v_hi] = world.config.speed_range;
    let heading_noise = Normal::new(0.0, world.config.heading_std).ok();
    for ud in &mut world.uds {
        ud.position[0] += ud.speed * ud.heading.cos() * tau;
        ud.position[1] += ud.speed * ud.heading.sin() * tau;
        let turn = heading_noise.map_or(0.0, |n| n.sample(rng));
        ud.heading = wrap_angle(ud.heading + turn);
        ud.speed = rng.random_range(v_lo..=v_hi);
    }
    let config = &world.config;
    world.orientation.theta0_ud = world
        .uds
        .iter()
        .map(|u| initial_azimuth(config, u.position))
        .collect();
    world.slot += 1;
}

pub fn angles(world: &World) -> Result<AngleSet, GeometryError> {
    let cfg = &world.config;
    let delta = world.orientation.delta;
    let mut phi_ud = Vec::with_capacity(world.uds.len());
    for (k, ud) in world.uds.iter().enumerate() {
        let d = distance(cfg.ris_pos, ud.position);
        if d == 0.0 {
            return Err(GeometryError::CoLocated { ud: k });
        }
        phi_ud.push(elevation((cfg.ris_pos[2] - ud.position[2]).abs(), d));
    }
    let theta_ud = world
        .orientation
        .theta0_ud
        .iter()
        .map(|&t| rotate_angle(t, delta))
        .collect();
    let d_bs = distance(cfg.bs_pos, cfg.ris_pos);
    Ok(AngleSet {
        theta_ud,
        phi_ud,
        theta_bs: rotate_angle(world.orientation.theta0_bs, delta),
        phi_bs: elevation((cfg.bs_pos[2] - cfg.ris_pos[2]).abs(), d_bs),
    })
}

fn elevation(height_diff: f64, dist: f64) -> f64 {
    (height_diff / dist).min(1.0).asin()
}

/// 1 for the reflection area `[0, pi]`, 0 for the transmission area.
pub fn zone_indicator(theta: f64) -> u8 {
    u8::from((0.0..=PI).contains(&theta))
}

/// Clamps a requested rotation so the BS stays in the reflection area.
pub fn clamp_rotation(delta_raw: f64, orientation: &Orientation) -> f64 {
    let hi = orientation.theta0_bs;
    let lo = hi - PI;
    let mut delta = if delta_raw.is_nan() { hi } else { delta_raw.clamp(lo, hi) };
    // Float rounding at the lower edge can push the BS azimuth a hair past pi.
    while zone_indicator(rotate_angle(orientation.theta0_bs, delta)) == 0 {
        delta = next_toward(delta, hi);
    }
    delta
}

fn next_toward(x: f64, target: f64) -> f64 {
    if x == target {
        return x;
    }
    let bits = x.to_bits();
    let up = target > x;
    let next = if x == 0.0 {
        if up {
            f64::from_bits(1)
        } else {
            -f64::from_bits(1)
        }
    } else if (x > 0.0) == up {
        f64::from_bits(bits + 1)
    } else {
        f64::from_bits(bits - 1)
    };
    next
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn same_seed_gives_identical_worlds() {
        let cfg = ScenarioConfig::default();
        assert_eq!(init_world(&cfg, 7).unwrap(), init_world(&cfg, 7).unwrap());
        assert_ne!(init_world(&cfg, 7).unwrap(), init_world(&cfg, 8).unwrap());
    }

    #[test]
    fn placement_stays_in_annulus() {
        let cfg = ScenarioConfig::default();
        let mut min_d = f64::INFINITY;
        let mut max_d: f64 = 0.0;
        for seed in 0..10_000 {
            let w = init_world(&cfg, seed).unwrap();
            for ud in &w.uds {
                let dx = ud.position[0] - 50.0;
                let dy = ud.position[1];
                let d = (dx * dx + dy * dy).sqrt();
                min_d = min_d.min(d);
                max_d = max_d.max(d);
                assert_eq!(ud.position[2], cfg.ud_height);
                assert_eq!(ud.alpha_cu, 0.0);
            }
        }
        assert!(min_d >= 2.0 - 1e-12, "{min_d}");
        assert!(max_d <= 7.0 + 1e-12, "{max_d}");
    }

    #[test]
    fn invalid_config_names_field() {
        let cfg = ScenarioConfig {
            num_subsurfaces: 7,
            ..ScenarioConfig::default()
        };
        let err = init_world(&cfg, 1).unwrap_err();
        assert!(err.to_string().contains("N_bar"), "{err}");
        let cfg = ScenarioConfig {
            num_slots: 1,
            ..ScenarioConfig::default()
        };
        assert!(cfg.validate().unwrap_err().to_string().contains("`Q`"));
        let cfg = ScenarioConfig {
            p_max: 0.0,
            ..ScenarioConfig::default()
        };
        assert!(cfg.validate().unwrap_err().to_string().contains("p_max"));
    }

    #[test]
    fn zero_speed_keeps_position() {
        let cfg = ScenarioConfig {
            speed_range: [0.0, 0.0],
            ..ScenarioConfig::default()
        };
        let mut w = init_world(&cfg, 3).unwrap();
        let before: Vec<_> = w.uds.iter().map(|u| u.position).collect();
        step_mobility(&mut w, &mut ChaCha8Rng::seed_from_u64(1));
        let after: Vec<_> = w.uds.iter().map(|u| u.position).collect();
        assert_eq!(before, after);
        assert_eq!(w.slot, 1);
    }

    #[test]
    fn straight_line_step() {
        let cfg = ScenarioConfig {
            num_uds: 1,
            ..ScenarioConfig::default()
        };
        let mut w = init_world(&cfg, 3).unwrap();
        w.uds[0].position = [40.0, 1.0, 0.0];
        w.uds[0].heading = 0.0;
        w.uds[0].speed = 1.5;
        step_mobility(&mut w, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(w.uds[0].position, [43.0, 1.0, 0.0]);
    }

    #[test]
    fn per_step_displacement_bounded_by_speed_range() {
        let cfg = ScenarioConfig {
            num_uds: 1,
            ..ScenarioConfig::default()
        };
        let mut w = init_world(&cfg, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10_000 {
            let p0 = w.uds[0].position;
            step_mobility(&mut w, &mut rng);
            let d = distance(p0, w.uds[0].position);
            assert!((2.2 - 1e-9..=3.0 + 1e-9).contains(&d), "{d}");
            assert!((1.1..=1.5).contains(&w.uds[0].speed));
            assert!((0.0..TAU).contains(&w.uds[0].heading));
        }
    }

    #[test]
    fn unrotated_angles_equal_initial() {
        let w = init_world(&ScenarioConfig::default(), 2).unwrap();
        let a = angles(&w).unwrap();
        assert_eq!(a.theta_ud, w.orientation.theta0_ud);
        assert_eq!(a.theta_bs, FRAC_PI_2);
    }

    #[test]
    fn bs_elevation_matches_geometry() {
        let w = init_world(&ScenarioConfig::default(), 2).unwrap();
        let a = angles(&w).unwrap();
        // asin(9 / sqrt(50^2 + 9^2)) evaluated independently.
        assert!((a.phi_bs - 0.178_092_938_231_197_54).abs() < 1e-12, "{}", a.phi_bs);
        for &p in &a.phi_ud {
            assert!((0.0..=FRAC_PI_2).contains(&p));
        }
    }

    #[test]
    fn full_turn_wraps_to_zero() {
        let t0 = 1.234;
        assert_eq!(rotate_angle(t0, t0 + TAU), 0.0);
    }

    #[test]
    fn colocated_ud_is_a_geometry_error() {
        let mut w = init_world(&ScenarioConfig::default(), 2).unwrap();
        w.uds[1].position = w.config.ris_pos;
        assert_eq!(angles(&w), Err(GeometryError::CoLocated { ud: 1 }));
    }

    #[test]
    fn zone_truth_table() {
        assert_eq!(zone_indicator(FRAC_PI_2), 1);
        assert_eq!(zone_indicator(3.0 * FRAC_PI_2), 0);
        assert_eq!(zone_indicator(PI), 1);
        assert_eq!(zone_indicator(0.0), 1);
    }

    #[test]
    fn rotation_clamp_edges() {
        let o = Orientation {
            delta: 0.0,
            theta0_bs: FRAC_PI_2,
            theta0_ud: vec![],
        };
        assert_eq!(clamp_rotation(FRAC_PI_2, &o), FRAC_PI_2);
        assert_eq!(clamp_rotation(FRAC_PI_2 + 1.0, &o), FRAC_PI_2);
        assert_eq!(clamp_rotation(FRAC_PI_2 - 4.0, &o), FRAC_PI_2 - PI);
    }

    #[test]
    fn default_slot_and_bandwidth() {
        let cfg = ScenarioConfig::default();
        assert_eq!(cfg.slot_s(), 2.0);
        assert_eq!(cfg.ud_bandwidth_hz(), 5e6 / 6.0);
        assert!((cfg.noise_w - 1e-14).abs() < 1e-28);
    }

    proptest! {
        #[test]
        fn bs_always_in_reflection_area(raw in -20.0f64..20.0, theta0 in 0.0f64..TAU) {
            let o = Orientation { delta: 0.0, theta0_bs: theta0, theta0_ud: vec![] };
            let d = clamp_rotation(raw, &o);
            prop_assert!(d <= theta0 && d >= theta0 - PI - 1e-12);
            prop_assert_eq!(zone_indicator(rotate_angle(theta0, d)), 1);
        }

        #[test]
        fn rotation_round_trip(theta0 in 0.0f64..TAU, delta in -PI..PI) {
            let t = rotate_angle(theta0, delta);
            prop_assert!((0.0..TAU).contains(&t));
            let back = wrap_angle(t + delta);
            let diff = (back - theta0).abs();
            prop_assert!(diff < 1e-12 || (TAU - diff) < 1e-12);
        }
    }
}
