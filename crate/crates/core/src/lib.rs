//! Simulation and analysis of composite pulses on the Bloch sphere.
//!
//! A composite pulse drives an ensemble of two-level systems through a
//! sequence of constant-amplitude rotating-frame segments. Each segment acts
//! as a fixed-axis rotation, so the dynamics are exactly solvable; what makes
//! the problem interesting is that every ensemble member feels a slightly
//! different field (inhomogeneity) or detuning (resonance offset), and a
//! well-designed pulse refocuses all of them near the target state anyway.
//!
//! The crate is organized around that workflow:
//!
//! * [`pulse`] — parse `90(x)180(y)90(x)`-style notation into a validated
//!   segment sequence with clock-time bookkeeping.
//! * [`frame`] — per-member rotating-frame generators and exact (matrix
//!   exponential) propagation, including time-sliced trajectories.
//! * [`ode`] — an independent fixed-step RK4 integration of the Cartesian
//!   Bloch equations, used as a cross-check on the exact propagator.
//! * [`canonical`] — the canonical chart `(phi, eta)` on the sphere,
//!   Hamilton's equations in those variables, Lagrangian/momentum machinery
//!   and pole handling.
//! * [`stability`] — finite-difference stability-matrix elements from
//!   central/satellite trajectory swarms, ensemble averages, range
//!   parameters (caustic detection), and the imperfection measure.
//! * [`ensemble`] — construction of the two imperfection ensembles, width
//!   diagnostics, and the Liouville patch-area check.
//! * [`config`] / [`report`] — declarative experiment configs and the
//!   deterministic CSV/JSON report pipeline behind the CLI.

pub mod canonical;
pub mod config;
pub mod ensemble;
pub mod error;
pub mod frame;
pub mod ode;
pub mod pulse;
pub mod report;
pub mod stability;

pub use canonical::{CanonicalState, CanonicalTrajectory};
pub use ensemble::{Ensemble, EnsembleKind};
pub use error::{ConfigError, DynamicsError, PulseError, StabilityError};
pub use frame::{EnsembleMember, OmegaVector, TimeGrid, Trajectory};
pub use ode::PiecewiseGenerator;
pub use pulse::{PulseSegment, PulseSequence};
pub use stability::{Direction, StabilitySeries, SwarmSpec};
