//! Bell's beable dynamics for a one-dimensional staggered-fermion field theory.
//!
//! The beable is the fermion-number density of a Banks–Susskind–Kogut
//! staggered lattice: an ordered set of occupied sites inside a fixed
//! fermion-number sector. It jumps between neighbouring configurations with
//! Bell's rates `T = max(J, 0) / P`, driven by a pilot state that evolves by
//! the Schrödinger equation. As the lattice spacing shrinks the jump process
//! approaches the deterministic guidance law `dX/dt = J / ρ`.
//!
//! Modules, bottom up:
//!
//! * [`fock`]: exact Fock-space matrices, used as a brute-force oracle.
//! * [`lattice`]: sector bases, the staggered Hamiltonian, dispersion.
//! * [`evolution`]: pilot-state propagation and initial packets.
//! * [`beable`]: transition currents, jump rates, trajectories, master equation.
//! * [`continuum`]: spinor merging, guidance integration, convergence and
//!   non-locality studies.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod beable;
pub mod continuum;
pub mod error;
pub mod evolution;
pub mod fock;
pub mod lattice;

pub use error::{Error, Result};

/// Complex amplitude type used throughout.
pub type C64 = nalgebra::Complex<f64>;
