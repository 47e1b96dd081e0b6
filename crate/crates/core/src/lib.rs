//! Simulation and bifurcation-analysis toolkit for delayed oscillators of
//! Suarez-Schopf type and related delay systems.
//!
//! The crate integrates constant-delay and neutral delay equations with
//! dense output ([`dde`]), evaluates the model right-hand sides and
//! parameter bundles ([`models`]), analyzes the transcendental
//! characteristic equations, transfer functions and the two-dimensional
//! spectral projector ([`spectral`]), traces stability and hidden-orbit
//! curves in the `(tau, alpha)` plane ([`curves`]), classifies attractors
//! as hidden or self-excited ([`orbit`]), quantifies forced chaos through
//! Poincare maps and Lyapunov exponents ([`chaos`]), and simulates a ring
//! array of coupled neutral equations ([`ring`]).

pub mod chaos;
pub mod curves;
pub mod dde;
pub mod error;
pub mod models;
pub mod orbit;
pub mod ring;
pub mod spectral;

pub use dde::{
    integrate, integrate_neutral, DelayRhs, FnRhs, HistorySegment, NeutralStepper, Stepper,
    StepperConfig, Trajectory, DIVERGENCE_GUARD,
};
pub use error::{Error, Result};
pub use models::{
    dissipativity_radius, equilibria, f_cubic, f_eps, family_rhs, forced_rhs, gain_g, in_s,
    ring_rhs, ss_rhs, truncated_rhs, ForcingSpec, GainFamilyParams, KeyValueConfig, RingParams,
    SuarezSchopfParams, TruncationSpec,
};
