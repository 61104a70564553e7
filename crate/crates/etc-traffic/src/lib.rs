//! Traffic analysis for event-triggered control (ETC) of LTI systems.
//!
//! The crate models the sampling behavior of a linear plant under a quadratic
//! event-triggering condition, checked either continuously (CETC) or
//! periodically (PETC). It provides:
//!
//! - the sampled-data closed loop itself: hold matrices, triggering forms,
//!   the inter-sample-time map and the sample map ([`system`]);
//! - homogeneous quadratic regions (isochronous / isosequential sets) and
//!   feasibility oracles over them, including an exact decision procedure on
//!   the projective circle and an SMT-LIB 2 subprocess backend ([`region`],
//!   [`feasibility`], [`circle`], [`smt`]);
//! - qualitative analysis of periodic sampling patterns: cycle verification
//!   through invariant lines and planes, fixed-line search for CETC, local
//!   attractivity, Schur and instability tests ([`spectral`], [`cycles`]);
//! - finite traffic abstractions of PETC built from feasible inter-sample
//!   sequences with domino transitions, and their refinement ([`traffic`]);
//! - quantitative metrics on abstractions: limit inferior/average values,
//!   minimum-average cycles, behavioral entropy, robust variants after
//!   pruning absolutely unstable cycles ([`metrics`]);
//! - a simulation-based ergodicity test over chaos-suspect components
//!   ([`ergodic`]).

pub mod circle;
pub mod cycles;
pub mod ergodic;
mod error;
pub mod feasibility;
pub mod linalg;
pub mod metrics;
pub mod region;
mod rng;
pub mod smt;
pub mod spectral;
pub mod system;
pub mod traffic;

pub use error::{Error, Result};
pub use system::{EtcKind, EtcSystem, SampleTrajectory, Tolerances, TriggeringSpec};
