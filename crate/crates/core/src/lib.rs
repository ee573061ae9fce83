//! Simulator and optimizer for a rotatable STAR-RIS assisted mobile edge
//! computing system.
//!
//! The crate is organised bottom-up:
//!
//! - [`scenario`]: configuration, 3-D geometry, surface rotation and UD mobility.
//! - [`channel`]: Rician/Rayleigh fading draws, radiation-pattern gain, effective
//!   channels and achievable rates.
//! - [`protocol`]: energy splitting, mode switching and time switching coefficient
//!   matrices and their constraint checks.
//! - [`compute`]: offloading/local energy model, closed-form frequency allocators and
//!   the Dinkelbach power solver.
//! - [`env`]: the Markov decision process wrapped around all of the above.
//! - [`nn`]: dense networks with hand-written backpropagation, Adam and the
//!   squashed-Gaussian policy head.
//! - [`sac`]: soft actor-critic with twin critics, learned temperature and
//!   prioritized replay.
//! - [`experiment`]: training/evaluation runners, baselines, result rows and
//!   scheme comparison.

pub mod channel;
pub mod compute;
pub mod env;
pub mod experiment;
pub mod nn;
pub mod protocol;
pub mod rng;
pub mod sac;
pub mod scenario;

pub use channel::{ChannelRealization, PhaseSet, C64};
pub use compute::{AllocationResult, DinkelbachOutcome};
pub use env::{ActionVector, EnvConfig, Observation, RewardBreakdown, Scheme, StarMecEnv, StepOutcome};
pub use experiment::{ExperimentConfig, ResultRow, SchemeName, SummaryRow};
pub use protocol::{CoefficientMatrices, Protocol, StarConfig};
pub use sac::{AgentConfig, SacAgent, TrainingLog};
pub use scenario::{AngleSet, Orientation, ScenarioConfig, UdState, World};
