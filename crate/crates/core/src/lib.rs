//! Decentralized convex optimization over networks.
//!
//! The crate simulates an `m`-node network in a single process. Node iterates
//! are stacked row-wise into an `m x n` matrix ([`NodeState`]); every
//! multiplication by a mixing matrix (or by the lifted Laplacian on the dual
//! side) counts as one communication round.
//!
//! Modules, bottom-up:
//!
//! * [`netgraph`]: graphs, Laplacians, mixing matrices, spectra, time-varying sequences.
//! * [`consensus`]: plain and accelerated gossip.
//! * [`oracle`]: first-order, stochastic and zeroth-order oracles with call accounting.
//! * [`problems`]: test objectives with known constants and reference solutions.
//! * [`primal`]: DGD, EXTRA, Acc-DNGD, DIGing and AGD with a consensus subroutine.
//! * [`sliding`]: penalty reformulation, gradient sliding and zeroth-order sliding.
//! * [`dual`]: conjugate-oracle methods on the dual of `min f(x) s.t. Ax = 0`.
//! * [`harness`]: configuration, experiment runner and scaling sweeps.

pub mod consensus;
pub mod dual;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod netgraph;
pub mod oracle;
pub mod primal;
pub mod problems;
pub mod record;
pub mod rng;
pub mod sliding;

pub use consensus::NodeState;
pub use error::{Error, Result};
pub use netgraph::{Graph, GraphFamily, GraphSequence, LaplacianMatrix, MixingMatrix, SpectralSummary};
pub use problems::{ConstantSummary, NodeFunction, ProblemInstance, ReferenceSolution};
pub use record::{DualRunRecord, RunRecord, TraceRow};

pub use nalgebra::{DMatrix, DVector};
