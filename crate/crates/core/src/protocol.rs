//! Coefficient matrices for the energy splitting (ES), mode switching (MS) and
//! time switching (TS) protocols.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{expand_groups, PhaseSet, C64};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Protocol {
    #[serde(rename = "ES")]
    Es,
    #[serde(rename = "MS")]
    Ms,
    #[serde(rename = "TS")]
    Ts,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::Es, Protocol::Ms, Protocol::Ts];
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Es => "ES",
            Protocol::Ms => "MS",
            Protocol::Ts => "TS",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown protocol `{0}` (expected es, ms or ts)")]
pub struct UnknownProtocol(pub String);

impl FromStr for Protocol {
    type Err = UnknownProtocol;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "es" => Ok(Protocol::Es),
            "ms" => Ok(Protocol::Ms),
            "ts" => Ok(Protocol::Ts),
            _ => Err(UnknownProtocol(s.to_string())),
        }
    }
}

/// Per-sub-surface surface configuration for one slot.
///
/// Under TS a single phase vector serves whichever mode is active; it is stored in
/// both `phase_r` and `phase_t` and the amplitude vectors are unused.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StarConfig {
    pub kind: Protocol,
    pub phase_r: Vec<usize>,
    pub phase_t: Vec<usize>,
    pub beta_r: Vec<f64>,
    pub beta_t: Vec<f64>,
    pub lambda_r: u8,
    pub lambda_t: u8,
}

impl StarConfig {
    pub fn num_subsurfaces(&self) -> usize {
        self.phase_r.len()
    }
}

/// Diagonals of the reflection and transmission coefficient matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientMatrices {
    pub phi_r: Vec<C64>,
    pub phi_t: Vec<C64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Violation {
    LengthMismatch { field: &'static str, got: usize, expected: usize },
    PhaseOutOfRange { side: char, index: usize, value: usize },
    AmplitudeOutOfRange { side: char, index: usize },
    AmplitudeSum { index: usize },
    AmplitudeNotBinary { index: usize },
    ModeNotBinary,
    ModeSum,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::LengthMismatch { field, got, expected } => {
                write!(f, "{field} has length {got}, expected {expected}")
            }
            Violation::PhaseOutOfRange { side, index, value } => {
                write!(f, "phase index {value} out of range at sub-surface {index} ({side})")
            }
            Violation::AmplitudeOutOfRange { side, index } => {
                write!(f, "amplitude outside [0, 1] at sub-surface {index} ({side})")
            }
            Violation::AmplitudeSum { index } => {
                write!(f, "amplitudes do not sum to 1 at sub-surface {index}")
            }
            Violation::AmplitudeNotBinary { index } => {
                write!(f, "amplitude not binary at sub-surface {index}")
            }
            Violation::ModeNotBinary => f.write_str("operating mode not binary"),
            Violation::ModeSum => f.write_str("operating modes do not sum to 1"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("protocol constraint violated: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
pub struct ProtocolError(pub Vec<Violation>);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BuildError {
    #[error(transparent)]
    Constraint(#[from] ProtocolError),
    #[error(transparent)]
    Grouping(#[from] crate::scenario::ConfigError),
}

const SUM_TOL: f64 = 1e-12;

/// Checks the constraint row of `cfg.kind`. Every violation is reported.
pub fn validate(cfg: &StarConfig, phases: &PhaseSet) -> Result<(), Vec<Violation>> {
    let mut out = Vec::new();
    let m = cfg.phase_r.len();
    if cfg.phase_t.len() != m {
        out.push(Violation::LengthMismatch {
            field: "phase_t",
            got: cfg.phase_t.len(),
            expected: m,
        });
    }
    for (side, v) in [('r', &cfg.phase_r), ('t', &cfg.phase_t)] {
        for (index, &value) in v.iter().enumerate() {
            if value >= phases.len() {
                out.push(Violation::PhaseOutOfRange { side, index, value });
            }
        }
    }
    match cfg.kind {
        Protocol::Es | Protocol::Ms => {
            for (field, v) in [("beta_r", &cfg.beta_r), ("beta_t", &cfg.beta_t)] {
                if v.len() != m {
                    out.push(Violation::LengthMismatch {
                        field,
                        got: v.len(),
                        expected: m,
                    });
                }
            }
            for (index, (&r, &t)) in cfg.beta_r.iter().zip(&cfg.beta_t).enumerate() {
                for (side, b) in [('r', r), ('t', t)] {
                    if !(0.0..=1.0).contains(&b) {
                        out.push(Violation::AmplitudeOutOfRange { side, index });
                    }
                }
                if cfg.kind == Protocol::Ms && !(is_bit(r) && is_bit(t)) {
                    out.push(Violation::AmplitudeNotBinary { index });
                }
                if !((r + t) - 1.0).abs().le(&SUM_TOL) {
                    out.push(Violation::AmplitudeSum { index });
                }
            }
        }
        Protocol::Ts => {
            if cfg.lambda_r > 1 || cfg.lambda_t > 1 {
                out.push(Violation::ModeNotBinary);
            }
            if cfg.lambda_r + cfg.lambda_t != 1 {
                out.push(Violation::ModeSum);
            }
        }
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

fn is_bit(x: f64) -> bool {
    x == 0.0 || x == 1.0
}

/// Expands a validated configuration to per-element coefficient vectors.
pub fn build_matrices(
    cfg: &StarConfig,
    phases: &PhaseSet,
    n: usize,
) -> Result<CoefficientMatrices, BuildError> {
    validate(cfg, phases).map_err(ProtocolError)?;
    let (sub_r, sub_t): (Vec<C64>, Vec<C64>) = match cfg.kind {
        Protocol::Es | Protocol::Ms => (
            cfg.phase_r
                .iter()
                .zip(&cfg.beta_r)
                .map(|(&i, &b)| C64::from_polar(b.sqrt(), phases.value(i)))
                .collect(),
            cfg.phase_t
                .iter()
                .zip(&cfg.beta_t)
                .map(|(&i, &b)| C64::from_polar(b.sqrt(), phases.value(i)))
                .collect(),
        ),
        Protocol::Ts => {
            let lr = f64::from(cfg.lambda_r);
            let lt = f64::from(cfg.lambda_t);
            (
                cfg.phase_r.iter().map(|&i| C64::from_polar(lr, phases.value(i))).collect(),
                cfg.phase_t.iter().map(|&i| C64::from_polar(lt, phases.value(i))).collect(),
            )
        }
    };
    Ok(CoefficientMatrices {
        phi_r: expand_groups(&sub_r, n)?,
        phi_t: expand_groups(&sub_t, n)?,
    })
}

/// `i_k = NOT(lambda_r XOR u_k)`: whether a UD is served in the current TS mode.
pub fn ts_serving_indicator(lambda_r: bool, u_k: bool) -> bool {
    !(lambda_r ^ u_k)
}
