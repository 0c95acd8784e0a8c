//! Discrete-time simulation of a quantum robot on a periodic 1D lattice.
//!
//! The robot carries an on-board finite machine (node, output symbol `o`,
//! running memory `d`, permanent memory `s`) and a control qubit `c`. One
//! time step is a unitary `T = T_a + T_c`: on the `c = 0` sector the machine
//! computes (a permutation compiled from the task's decision diagram), on the
//! `c = 1` sector the robot moves according to a translation-invariant action
//! kernel selected by `o`. The shipped task measures the distance between the
//! robot and a single particle and records it in `s`.
//!
//! The crate is organised bottom-up:
//!
//! - [`config_space`]: basis packing, state vectors, projectors and marginals.
//! - [`task_machine`]: the compiled reversible transition table and its audit.
//! - [`action_kernel`]: strict and Gaussian kernels, momentum-space unitarization.
//! - [`operator`]: sparse step-operator assembly, unitarity audit, environment
//!   composition and the binary operator format.
//! - [`evolution`]: iteration `Ψ(n) = Tⁿ Ψ(0)` with observable records.
//! - [`paths`]: decomposition of amplitudes into alternating phase paths.
//! - [`stats`]: distance distributions, coherence terms, fidelity and sweeps.

pub mod action_kernel;
pub mod config_space;
pub mod evolution;
pub mod operator;
pub mod paths;
pub mod stats;
pub mod task_machine;

mod codec;
mod error;

pub use error::{Error, Result};

pub use num_complex::Complex64 as C64;

/// Version string embedded in every emitted artifact.
pub const TOOL_VERSION: &str = concat!("qrobot ", env!("CARGO_PKG_VERSION"));
