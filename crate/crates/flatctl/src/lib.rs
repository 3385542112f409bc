//! Quasi-static feedback linearization and tracking control for (x,u)-flat
//! nonlinear systems.
//!
//! Given a control system `ẋ = f(x,u)` and a flat output `y = φ(x,u)` as
//! symbolic expressions, the crate
//!
//! 1. runs the staged procedure that determines the minimal derivative
//!    multi-index `κ` with `|κ| = n` ([`kappa::run_procedure`]),
//! 2. synthesizes the exactly linearizing quasi-static feedback
//!    `u = α(x, v, v̇, …)` of the classical state ([`kappa::synthesize_feedback`]),
//! 3. builds a trajectory-tracking law `u = α(x, y^d, ẏ^d, …)` with
//!    pole-placeable linear error dynamics ([`track`]), and
//! 4. verifies the closed loop by fixed-step simulation ([`sim`]).
//!
//! The two systems worked out in the underlying theory — a 10-state academic
//! example and a 3D gantry crane — ship as built-ins ([`flatsys`]).

pub mod expr;
pub mod flatsys;
pub mod jets;
pub mod kappa;
pub mod report;
pub mod sample;
pub mod sim;
pub mod track;

/// Default RNG seed used when neither `--seed` nor `FLATCTL_SEED` is given.
pub const DEFAULT_SEED: u64 = 7;
