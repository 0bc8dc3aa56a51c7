//! # rezo — sensitivity and yield analysis of resonant RLC networks
//!
//! This crate turns an RLC netlist with capacitively-coupled ports into a
//! descriptor state-space model, solves the generalized eigenvalue problem of
//! its `(M, N)` pencil, and differentiates the pole frequencies and the
//! on-resonance scattering response with respect to every component value by
//! first-order eigenvalue perturbation. The resulting Jacobian feeds
//! covariance propagation and a linearized Monte Carlo yield analysis, with
//! full re-solve oracles available for every step.
//!
//! Pipeline:
//!
//! 1. [`netlist`] — parse and validate the circuit description.
//! 2. [`statespace`] — assemble `M`, `N`, `B`, `D`, `E` plus per-parameter
//!    derivative stamps; direct transfer function and full-MNA AC oracle.
//! 3. [`eigen`] — QZ solve of the pencil, bi-orthonormal left/right
//!    eigenvectors, resolvent and modal transfer function.
//! 4. [`sensitivity`] — eigenvalue/transfer-function derivatives, scattering
//!    conversion, Jacobian assembly, finite-difference oracles.
//! 5. [`modal`] — natural response, residues, eigenvector/residue/zero
//!    derivatives.
//! 6. [`stats`] — covariance propagation, deterministic Monte Carlo sampling,
//!    spec evaluation, yield and Venn-region reports.

pub mod eigen;
pub mod error;
pub mod linalg;
pub mod modal;
pub mod netlist;
pub mod sensitivity;
pub mod statespace;

pub use eigen::{
    match_resonance, modal_transfer, polish_mode, resolvent, solve_pencil, EigenSolution, Pairing,
};
pub use error::{Error, Result};
pub use modal::{
    eigvec_derivs, find_zeros, natural_response, residue_derivs, residues, zero_derivs,
    ResidueExpansion, ZeroSet,
};
pub use netlist::{parse_netlist, validate_circuit, Circuit};
pub use sensitivity::{
    assemble_sensitivity, fd_oracle, to_scattering, Resonance, ResponseSpec, SensitivityMatrix,
};
pub use statespace::{build_stamps, build_state_space, direct_transfer, mna_ac_oracle};
