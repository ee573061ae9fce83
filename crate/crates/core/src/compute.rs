//! Computation and energy model, closed-form frequency allocation and the
//! Dinkelbach transmit-power solver.

use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{achievable_rate, C64};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ComputeError {
    #[error("offloading a nonzero fraction over a zero-rate link")]
    InfeasibleOffload,
    #[error("minimum power {p_hat} exceeds the power budget {p_max}")]
    PowerBudget { p_hat: f64, p_max: f64 },
    #[error("Dinkelbach needs a positive offload fraction, got {0}")]
    NonPositiveFraction(f64),
}

/// `(t_off, E_off)` for offloading `alpha * task_bits` at `rate` with power `p`.
pub fn offload_time_energy(alpha: f64, task_bits: f64, rate: f64, p: f64) -> Result<(f64, f64), ComputeError> {
    if alpha == 0.0 {
        return Ok((0.0, 0.0));
    }
    if !(rate > 0.0) {
        return Err(ComputeError::InfeasibleOffload);
    }
    let t = alpha * task_bits / rate;
    Ok((t, t * p))
}

/// Local frequency that finishes the local share exactly at the cycle end.
pub fn optimal_local_freq(task_bits: f64, cycles_per_bit: f64, eta: f64, cycle_s: f64) -> f64 {
    task_bits * cycles_per_bit * (1.0 - eta) / cycle_s
}

/// `c f^2 D C (1 - eta)`.
pub fn local_energy(capacitance: f64, freq: f64, task_bits: f64, cycles_per_bit: f64, eta: f64) -> f64 {
    capacitance * freq * freq * task_bits * cycles_per_bit * (1.0 - eta)
}

/// Edge frequency that finishes the offloaded share within the last `Q - 1` slots.
pub fn optimal_edge_freq(task_bits: f64, cycles_per_bit: f64, eta: f64, num_slots: usize, slot_s: f64) -> f64 {
    task_bits * cycles_per_bit * eta / ((num_slots as f64 - 1.0) * slot_s)
}

/// Smallest power that ships `alpha * task_bits` within one slot.
pub fn min_power(
    alpha: f64,
    task_bits: f64,
    bandwidth_hz: f64,
    slot_s: f64,
    h: C64,
    noise_w: f64,
) -> Result<f64, ComputeError> {
    if alpha == 0.0 {
        return Ok(0.0);
    }
    let gain = h.norm_sqr();
    if gain == 0.0 {
        return Err(ComputeError::InfeasibleOffload);
    }
    let spectral = alpha * task_bits / (slot_s * bandwidth_hz);
    Ok(noise_w * (spectral * LN_2).exp_m1() / gain)
}

/// The offload fraction at which the minimum power reaches `p_max`, capped at 1.
pub fn max_offload_ratio(
    p_max: f64,
    h: C64,
    noise_w: f64,
    bandwidth_hz: f64,
    slot_s: f64,
    task_bits: f64,
) -> f64 {
    let bits = slot_s * achievable_rate(h, p_max, bandwidth_hz, noise_w);
    (bits / task_bits).min(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DinkelbachParams {
    pub eps: f64,
    pub max_iters: usize,
}

impl Default for DinkelbachParams {
    fn default() -> Self {
        Self {
            eps: 1e-8,
            max_iters: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DinkelbachOutcome {
    pub power: f64,
    /// `y^1, y^2, ...`; non-increasing.
    pub y: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
}

/// Offload energy `alpha D p / (B log2(1 + p |h|^2 / sigma^2))`.
pub fn offload_energy_at(alpha: f64, task_bits: f64, bandwidth_hz: f64, h: C64, noise_w: f64, p: f64) -> f64 {
    alpha * task_bits * p / achievable_rate(h, p, bandwidth_hz, noise_w)
}

/// Minimizes the offload energy over `[p_hat, p_max]` with Dinkelbach's method.
///
/// The parametric subproblem `min_p alpha D p - y B log2(1 + p c)` is convex, so
/// each inner solve is its stationary point `y B / (alpha D ln 2) - 1/c` clamped to
/// the box.
#[allow(clippy::too_many_arguments)]
pub fn dinkelbach_power(
    alpha: f64,
    task_bits: f64,
    bandwidth_hz: f64,
    h: C64,
    noise_w: f64,
    p_hat: f64,
    p_max: f64,
    params: &DinkelbachParams,
) -> Result<DinkelbachOutcome, ComputeError> {
    if !(alpha > 0.0) {
        return Err(ComputeError::NonPositiveFraction(alpha));
    }
    if p_hat > p_max {
        return Err(ComputeError::PowerBudget { p_hat, p_max });
    }
    let c = h.norm_sqr() / noise_w;
    if c == 0.0 {
        return Err(ComputeError::InfeasibleOffload);
    }
    let numer = |p: f64| alpha * task_bits * p;
    let denom = |p: f64| bandwidth_hz * (p * c).ln_1p() / LN_2;

    let mut p = p_hat;
    let mut y = vec![numer(p) / denom(p)];
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < params.max_iters.max(1) {
        iterations += 1;
        let yt = *y.last().unwrap();
        let stationary = yt * bandwidth_hz / (alpha * task_bits * LN_2) - 1.0 / c;
        p = stationary.clamp(p_hat, p_max);
        residual = (numer(p) - yt * denom(p)).abs();
        let next = numer(p) / denom(p);
        if residual <= params.eps {
            break;
        }
        y.push(next.min(yt));
    }
    Ok(DinkelbachOutcome {
        power: p,
        y,
        residual,
        iterations,
    })
}

/// Link constants used by the per-slot allocator.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkBudget {
    pub task_bits: f64,
    pub bandwidth_hz: f64,
    pub slot_s: f64,
    pub noise_w: f64,
    pub p_max: f64,
    pub dinkelbach: DinkelbachParams,
}

/// One UD's decision outcome in one slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotAllocation {
    pub alpha_requested: f64,
    /// Fraction actually offloaded (after the power-budget clip).
    pub alpha: f64,
    pub p_hat: f64,
    pub power: f64,
    pub rate: f64,
    pub t_off: f64,
    pub e_off: f64,
    pub clipped: bool,
    pub infeasible: bool,
}

/// Picks the transmit power for one slot.
///
/// Within budget the power comes from Dinkelbach; otherwise the UD transmits at
/// `p_max` and the fraction is cut to what that power can carry in one slot.
pub fn allocate_slot(alpha: f64, h: C64, link: &LinkBudget) -> SlotAllocation {
    let mut out = SlotAllocation {
        alpha_requested: alpha,
        alpha,
        p_hat: 0.0,
        power: 0.0,
        rate: 0.0,
        t_off: 0.0,
        e_off: 0.0,
        clipped: false,
        infeasible: false,
    };
    if alpha <= 0.0 {
        out.alpha = 0.0;
        return out;
    }
    let p_hat = match min_power(alpha, link.task_bits, link.bandwidth_hz, link.slot_s, h, link.noise_w) {
        Ok(p) => p,
        Err(_) => f64::INFINITY,
    };
    out.p_hat = p_hat;
    if p_hat <= link.p_max {
        match dinkelbach_power(
            alpha,
            link.task_bits,
            link.bandwidth_hz,
            h,
            link.noise_w,
            p_hat,
            link.p_max,
            &link.dinkelbach,
        ) {
            Ok(sol) => out.power = sol.power,
            Err(_) => {
                out.infeasible = true;
                return out;
            }
        }
    } else {
        out.power = link.p_max;
        out.alpha = max_offload_ratio(link.p_max, h, link.noise_w, link.bandwidth_hz, link.slot_s, link.task_bits)
            .min(alpha);
        out.clipped = true;
    }
    out.rate = achievable_rate(h, out.power, link.bandwidth_hz, link.noise_w);
    if out.alpha == 0.0 {
        out.power = 0.0;
        return out;
    }
    match offload_time_energy(out.alpha, link.task_bits, out.rate, out.power) {
        Ok((t, e)) => {
            out.t_off = t;
            out.e_off = e;
            // Relative slack for rounding at the p_hat boundary.
            if t > link.slot_s * (1.0 + 1e-9) {
                out.infeasible = true;
            }
        }
        Err(_) => out.infeasible = true,
    }
    out
}

/// A UD's whole-cycle allocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationResult {
    pub slots: Vec<SlotAllocation>,
    pub eta: f64,
    pub f_loc: f64,
    pub f_edge: f64,
    pub e_loc: f64,
    pub local_infeasible: bool,
}

impl AllocationResult {
    pub fn offload_energy(&self) -> f64 {
        self.slots.iter().map(|s| s.e_off).sum()
    }

    /// `E_loc + sum_q E_off[q]`.
    pub fn energy(&self) -> f64 {
        self.e_loc + self.offload_energy()
    }

    pub fn any_infeasible(&self) -> bool {
        self.local_infeasible || self.slots.iter().any(|s| s.infeasible)
    }
}

/// Task and CPU constants for the cycle-level completion.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleBudget {
    pub task_bits: f64,
    pub cycles_per_bit: f64,
    pub cycle_s: f64,
    pub num_slots: usize,
    pub slot_s: f64,
    pub capacitance: f64,
    pub local_max_hz: f64,
}

/// Closes a UD's cycle: local frequency/energy from the optimal-frequency rule and
/// edge frequency from the `(Q - 1)` slot window.
pub fn complete_cycle(slots: Vec<SlotAllocation>, budget: &CycleBudget) -> AllocationResult {
    let eta: f64 = slots.iter().map(|s| s.alpha).sum::<f64>().min(1.0);
    let f_loc = optimal_local_freq(budget.task_bits, budget.cycles_per_bit, eta, budget.cycle_s);
    let e_loc = local_energy(budget.capacitance, f_loc, budget.task_bits, budget.cycles_per_bit, eta);
    let f_edge = optimal_edge_freq(budget.task_bits, budget.cycles_per_bit, eta, budget.num_slots, budget.slot_s);
    AllocationResult {
        slots,
        eta,
        f_loc,
        f_edge,
        e_loc,
        local_infeasible: f_loc > budget.local_max_hz,
    }
}

/// System energy `sum_k E_k`.
pub fn total_energy(per_ud: &[AllocationResult]) -> f64 {
    per_ud.iter().map(AllocationResult::energy).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const D: f64 = 1e7;
    const C: f64 = 600.0;

    #[test]
    fn offload_basics() {
        assert_eq!(offload_time_energy(0.0, D, 0.0, 1.0), Ok((0.0, 0.0)));
        let (t, e) = offload_time_energy(0.5, D, 2.5e6, 0.1).unwrap();
        assert_eq!(t, 2.0);
        assert_eq!(e, 0.2);
        let (_, e2) = offload_time_energy(0.5, D, 2.5e6, 0.3).unwrap();
        assert!((e2 - 3.0 * e).abs() < 1e-15);
        assert_eq!(offload_time_energy(0.1, D, 0.0, 1.0), Err(ComputeError::InfeasibleOffload));
    }

    #[test]
    fn local_frequency_and_energy() {
        assert_eq!(optimal_local_freq(D, C, 1.0, 10.0), 0.0);
        let f = optimal_local_freq(D, C, 0.0, 10.0);
        assert_eq!(f, 6e8);
        let e = local_energy(1e-27, f, D, C, 0.0);
        assert!((e - 2.16).abs() < 1e-12, "{e}");
    }

    #[test]
    fn edge_frequency() {
        assert_eq!(optimal_edge_freq(D, C, 0.0, 5, 2.0), 0.0);
        assert_eq!(optimal_edge_freq(D, C, 1.0, 5, 2.0), 7.5e8);
        let a = optimal_edge_freq(D, C, 0.3, 5, 2.0);
        let b = optimal_edge_freq(D, C, 0.6, 5, 2.0);
        assert!((b - 2.0 * a).abs() < 1e-6);
    }

    #[test]
    fn minimum_power_values() {
        let h = C64::new(1.0, 0.0);
        assert_eq!(min_power(0.0, D, 1.0, 1.0, h, 1.0), Ok(0.0));
        // alpha D / (tau B) = 1 -> 2^1 - 1.
        assert!((min_power(1.0, 2.0, 1.0, 2.0, h, 1.0).unwrap() - 1.0).abs() < 1e-15);
        let mut last = 0.0;
        for i in 1..=100 {
            let p = min_power(i as f64 / 100.0, D, 1e6, 2.0, h, 1e-14).unwrap();
            assert!(p > last);
            last = p;
        }
        assert_eq!(
            min_power(0.5, D, 1e6, 2.0, C64::new(0.0, 0.0), 1e-14),
            Err(ComputeError::InfeasibleOffload)
        );
    }

    #[test]
    fn max_ratio_inverts_min_power() {
        let (b, tau, s2) = (5e6 / 6.0, 2.0, 1e-14);
        assert_eq!(max_offload_ratio(0.2, C64::new(0.0, 0.0), s2, b, tau, D), 0.0);
        assert_eq!(max_offload_ratio(0.2, C64::new(1.0, 0.0), s2, b, tau, D), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let g: f64 = 10f64.powf(rng.random_range(-16.0..-12.5));
            let h = C64::from_polar(g.sqrt(), rng.random_range(0.0..6.0));
            let a = max_offload_ratio(0.2, h, s2, b, tau, D);
            if a < 1.0 && a > 0.0 {
                let p = min_power(a, D, b, tau, h, s2).unwrap();
                assert!(((p - 0.2) / 0.2).abs() < 1e-9, "{p}");
            }
        }
    }

    #[test]
    fn dinkelbach_preconditions() {
        let h = C64::new(1e-3, 0.0);
        let p = DinkelbachParams::default();
        assert!(matches!(
            dinkelbach_power(0.5, D, 1e6, h, 1e-14, 0.3, 0.2, &p),
            Err(ComputeError::PowerBudget { .. })
        ));
        assert!(matches!(
            dinkelbach_power(0.0, D, 1e6, h, 1e-14, 0.0, 0.2, &p),
            Err(ComputeError::NonPositiveFraction(_))
        ));
    }

    #[test]
    fn dinkelbach_returns_p_hat_with_small_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let params = DinkelbachParams::default();
        for _ in 0..200 {
            let alpha = rng.random_range(0.01..1.0);
            let bw = 5e6 / 6.0;
            let g: f64 = 10f64.powf(rng.random_range(-13.0..-7.0));
            let h = C64::from_polar(g.sqrt(), 0.3);
            let p_hat = min_power(alpha, D, bw, 2.0, h, 1e-14).unwrap();
            if p_hat > 0.2 {
                continue;
            }
            let out = dinkelbach_power(alpha, D, bw, h, 1e-14, p_hat, 0.2, &params).unwrap();
            assert!(out.residual <= params.eps);
            assert!((out.power - p_hat).abs() <= 1e-12 * p_hat.max(1e-30));
            for w in out.y.windows(2) {
                assert!(w[1] <= w[0]);
            }
        }
    }

    #[test]
    fn small_fraction_limit() {
        let h = C64::new(1e-4, 0.0);
        let p_hat = min_power(1e-9, D, 1e6, 2.0, h, 1e-14).unwrap();
        assert!(p_hat < 1e-12);
        let e = offload_energy_at(1e-9, D, 1e6, h, 1e-14, p_hat);
        assert!(e < 1e-12);
    }

    fn link() -> LinkBudget {
        LinkBudget {
            task_bits: D,
            bandwidth_hz: 2.5e6,
            slot_s: 2.0,
            noise_w: 1e-14,
            p_max: 0.2,
            dinkelbach: DinkelbachParams::default(),
        }
    }

    #[test]
    fn slot_allocation_paths() {
        let l = link();
        let zero = allocate_slot(0.0, C64::new(1e-4, 0.0), &l);
        assert_eq!((zero.power, zero.e_off), (0.0, 0.0));

        let good = allocate_slot(0.5, C64::new(1e-4, 0.0), &l);
        assert!(!good.clipped && !good.infeasible);
        assert!(good.t_off <= l.slot_s * (1.0 + 1e-9));
        assert_eq!(good.alpha, 0.5);

        // Weak channel forces the p_max path.
        let weak = allocate_slot(1.0, C64::new(1e-7, 0.0), &l);
        assert!(weak.clipped);
        assert_eq!(weak.power, 0.2);
        assert!(weak.alpha < 1.0 && weak.alpha > 0.0);
        assert!((weak.t_off - l.slot_s).abs() < 1e-9);

        let dead = allocate_slot(0.3, C64::new(0.0, 0.0), &l);
        assert!(dead.clipped);
        assert_eq!(dead.alpha, 0.0);
        assert_eq!(dead.e_off, 0.0);
    }

    fn budget() -> CycleBudget {
        CycleBudget {
            task_bits: D,
            cycles_per_bit: C,
            cycle_s: 10.0,
            num_slots: 5,
            slot_s: 2.0,
            capacitance: 1e-27,
            local_max_hz: 6e8,
        }
    }

    #[test]
    fn local_only_cycle_energy() {
        let uds: Vec<_> = (0..6)
            .map(|_| complete_cycle(vec![allocate_slot(0.0, C64::new(1.0, 0.0), &link()); 4], &budget()))
            .collect();
        let total = total_energy(&uds);
        assert!((total - 12.96).abs() < 1e-10, "{total}");
        assert!(uds.iter().all(|u| !u.any_infeasible()));
    }

    #[test]
    fn full_offload_has_no_local_energy() {
        let l = link();
        let slots: Vec<_> = [0.25, 0.25, 0.25, 0.25]
            .iter()
            .map(|&a| allocate_slot(a, C64::new(1e-4, 0.0), &l))
            .collect();
        let r = complete_cycle(slots, &budget());
        assert_eq!(r.eta, 1.0);
        assert_eq!(r.e_loc, 0.0);
        assert_eq!(r.energy(), r.offload_energy());
        let a = r.clone();
        assert!((total_energy(&[a.clone(), a]) - 2.0 * r.energy()).abs() < 1e-18);
    }
}
