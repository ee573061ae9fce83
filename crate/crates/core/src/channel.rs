//! Fading realizations, radiation-pattern gain, effective channels and rates.

use std::f64::consts::{FRAC_1_SQRT_2, PI, TAU};
use std::io::Write;

use num_complex::Complex;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::CoefficientMatrices;
use crate::scenario::{self, distance, AngleSet, ConfigError, GeometryError, World};

pub type C64 = Complex<f64>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ChannelError {
    #[error("dimension mismatch: {what} has length {got}, expected {expected}")]
    Dimension {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("UD index {0} out of range")]
    NoSuchUd(usize),
}

/// One slot's worth of small-scale fading.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    pub slot: usize,
    /// `h_ud_ris[k][n]`: UD k to element n.
    pub h_ud_ris: Vec<Vec<C64>>,
    /// Element n to BS.
    pub v_ris_bs: Vec<C64>,
    /// Blocked direct UD-BS links.
    pub h_ud_bs: Vec<C64>,
}

/// The `2^b` uniformly spaced discrete phases.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseSet {
    bits: u32,
    values: Vec<f64>,
}

impl PhaseSet {
    pub fn new(bits: u32) -> Self {
        assert!((1..=16).contains(&bits), "phase bits must be in 1..=16");
        let levels = 1usize << bits;
        let step = PI / (1u64 << (bits - 1)) as f64;
        Self {
            bits,
            values: (0..levels).map(|i| i as f64 * step).collect(),
        }
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Spacing `pi / 2^(b-1)`.
    pub fn spacing(&self) -> f64 {
        PI / (1u64 << (self.bits - 1)) as f64
    }

    pub fn value(&self, index: usize) -> f64 {
        self.values[index]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn contains(&self, phase: f64) -> bool {
        self.values.iter().any(|&v| v == phase)
    }
}

pub fn phase_set(bits: u32) -> PhaseSet {
    PhaseSet::new(bits)
}

/// Repeats each sub-surface value over its `n / sub_values.len()` contiguous elements.
pub fn expand_groups<T: Clone>(sub_values: &[T], n: usize) -> Result<Vec<T>, ConfigError> {
    let groups = sub_values.len();
    if groups == 0 || n % groups != 0 {
        return Err(ConfigError::invalid(
            "N_bar",
            format!("{groups} sub-surfaces do not divide {n} elements"),
        ));
    }
    let per = n / groups;
    Ok(sub_values
        .iter()
        .flat_map(|v| std::iter::repeat_n(v.clone(), per))
        .collect())
}

fn cn01<R: Rng + ?Sized>(rng: &mut R) -> C64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    C64::new(re * FRAC_1_SQRT_2, im * FRAC_1_SQRT_2)
}

fn rician_weights(k_factor: f64) -> (f64, f64) {
    if k_factor.is_infinite() {
        (1.0, 0.0)
    } else {
        ((k_factor / (1.0 + k_factor)).sqrt(), (1.0 / (1.0 + k_factor)).sqrt())
    }
}

/// Draws one Rician element channel. The NLoS sample is always consumed so the
/// stream layout does not depend on the Rician factor.
fn rician_sample<R: Rng + ?Sized>(
    amplitude: f64,
    k_factor: f64,
    los_phase: f64,
    rng: &mut R,
) -> C64 {
    let (w_los, w_nlos) = rician_weights(k_factor);
    let nlos = cn01(rng);
    amplitude * (C64::from_polar(w_los, -los_phase) + nlos * w_nlos)
}

/// Element offsets along the horizontal array axis, `lambda/2` apart and centred.
fn element_offsets(n: usize, wavelength: f64) -> impl Iterator<Item = f64> {
    let centre = (n as f64 - 1.0) / 2.0;
    (0..n).map(move |i| (i as f64 - centre) * wavelength / 2.0)
}

/// Independent per-link Rician draws for the current world state.
///
/// Path loss uses the surface-centre distance; the LoS phase of element `n` uses
/// the far-field distance `d - x_n cos(theta) cos(phi)`.
pub fn draw_channels<R: Rng + ?Sized>(
    world: &World,
    rng: &mut R,
) -> Result<ChannelRealization, GeometryError> {
    let cfg = &world.config;
    let ang = scenario::angles(world)?;
    let n = cfg.num_elements;
    let lambda = cfg.wavelength_m();
    let wavenumber = TAU / lambda;

    let mut h_ud_ris = Vec::with_capacity(world.uds.len());
    let mut h_ud_bs = Vec::with_capacity(world.uds.len());
    for (k, ud) in world.uds.iter().enumerate() {
        let d = distance(ud.position, cfg.ris_pos);
        let amp = (cfg.rho0 / d.powf(cfg.alpha1)).sqrt();
        let proj = ang.theta_ud[k].cos() * ang.phi_ud[k].cos();
        let h: Vec<C64> = element_offsets(n, lambda)
            .map(|x| rician_sample(amp, cfg.rician_ud, wavenumber * (d - x * proj), rng))
            .collect();
        h_ud_ris.push(h);
    }
    let d_bs = distance(cfg.bs_pos, cfg.ris_pos);
    let amp_bs = (cfg.rho0 / d_bs.powf(cfg.alpha2)).sqrt();
    let proj_bs = ang.theta_bs.cos() * ang.phi_bs.cos();
    let v_ris_bs: Vec<C64> = element_offsets(n, lambda)
        .map(|x| rician_sample(amp_bs, cfg.rician_bs, wavenumber * (d_bs - x * proj_bs), rng))
        .collect();
    let blockage = 10f64.powf(-cfg.blockage_db / 10.0);
    for ud in &world.uds {
        let d = distance(ud.position, cfg.bs_pos);
        let amp = (cfg.rho0 * blockage / d.powf(cfg.direct_exponent)).sqrt();
        h_ud_bs.push(cn01(rng) * amp);
    }
    Ok(ChannelRealization {
        slot: world.slot,
        h_ud_ris,
        v_ris_bs,
        h_ud_bs,
    })
}

/// Radiation-pattern gain `D_m^2 |sin(theta_k) cos(phi_k) sin(theta_B) cos(phi_B)|^z`.
pub fn star_gain_scalar(angles: &AngleSet, k: usize, z: f64, d_m: f64) -> f64 {
    let s = angles.theta_ud[k].sin()
        * angles.phi_ud[k].cos()
        * angles.theta_bs.sin()
        * angles.phi_bs.cos();
    d_m * d_m * s.abs().powf(z)
}

/// Which coefficient vector serves a UD.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Reflect,
    Transmit,
}

impl Side {
    pub fn from_zone(u_k: u8) -> Self {
        if u_k == 1 {
            Side::Reflect
        } else {
            Side::Transmit
        }
    }
}

/// Per-element cascade terms `conj(v_n) h_n` for UD `k`.
pub fn cascade(real: &ChannelRealization, k: usize) -> Result<Vec<C64>, ChannelError> {
    let h = real.h_ud_ris.get(k).ok_or(ChannelError::NoSuchUd(k))?;
    if h.len() != real.v_ris_bs.len() {
        return Err(ChannelError::Dimension {
            what: "h_ud_ris",
            got: h.len(),
            expected: real.v_ris_bs.len(),
        });
    }
    Ok(real.v_ris_bs.iter().zip(h).map(|(v, h)| v.conj() * h).collect())
}

/// `h_k = v^H (g_k Phi_m) h_{k,R} + h_{k,B}`.
pub fn effective_channel(
    real: &ChannelRealization,
    coeffs: &CoefficientMatrices,
    gain: f64,
    k: usize,
    side: Side,
) -> Result<C64, ChannelError> {
    let phi = match side {
        Side::Reflect => &coeffs.phi_r,
        Side::Transmit => &coeffs.phi_t,
    };
    let terms = cascade(real, k)?;
    if phi.len() != terms.len() {
        return Err(ChannelError::Dimension {
            what: "coefficient vector",
            got: phi.len(),
            expected: terms.len(),
        });
    }
    let direct = *real.h_ud_bs.get(k).ok_or(ChannelError::NoSuchUd(k))?;
    let ris: C64 = terms.iter().zip(phi).map(|(t, p)| t * p).sum();
    Ok(ris * gain + direct)
}

/// `B_k log2(1 + p |h|^2 / sigma^2)` in bits/s.
pub fn achievable_rate(h: C64, p: f64, bandwidth_hz: f64, noise_w: f64) -> f64 {
    bandwidth_hz * (p * h.norm_sqr() / noise_w).ln_1p() / std::f64::consts::LN_2
}

/// Exact maximizer of `|fixed + sum_i a_i e^{j phase(idx_i)}|` over discrete phase
/// indices.
///
/// At the optimum every term is the discrete phase closest to the direction of the
/// total, so scanning one reference direction per interval between quantization
/// breakpoints visits the optimal pattern.
pub fn align_phases(terms: &[C64], fixed: C64, set: &PhaseSet) -> Vec<usize> {
    let levels = set.len();
    let step = set.spacing();
    let active: Vec<(usize, f64)> = terms
        .iter()
        .enumerate()
        .filter(|(_, t)| t.norm_sqr() > 0.0)
        .map(|(i, t)| (i, t.arg()))
        .collect();
    let mut best = vec![0usize; terms.len()];
    if active.is_empty() {
        return best;
    }
    let mut breaks: Vec<f64> = active
        .iter()
        .flat_map(|&(_, arg)| (0..levels).map(move |m| scenario::wrap_angle(arg + (m as f64 + 0.5) * step)))
        .collect();
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();

    let quantize = |psi: f64, out: &mut Vec<usize>| {
        for &(i, arg) in &active {
            let x = scenario::wrap_angle(psi - arg) / step;
            out[i] = (x.round() as usize) % levels;
        }
    };
    let magnitude = |idx: &[usize]| -> f64 {
        let s: C64 = terms
            .iter()
            .zip(idx)
            .map(|(t, &i)| t * C64::from_polar(1.0, set.value(i)))
            .sum();
        (s + fixed).norm_sqr()
    };

    let mut best_val = f64::NEG_INFINITY;
    let mut cand = vec![0usize; terms.len()];
    for (j, &b) in breaks.iter().enumerate() {
        let next = if j + 1 < breaks.len() { breaks[j + 1] } else { breaks[0] + TAU };
        quantize(0.5 * (b + next), &mut cand);
        let val = magnitude(&cand);
        if val > best_val {
            best_val = val;
            best.copy_from_slice(&cand);
        }
    }
    best
}

/// One row of the optional channel trace dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelTraceRow {
    pub q: usize,
    pub k: usize,
    pub re_h: f64,
    pub im_h: f64,
    pub g: f64,
}

pub fn write_channel_trace<W: Write>(rows: &[ChannelTraceRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
