//! Forge low-rank matrix-sensing instances that satisfy the restricted
//! isometry property yet have spurious local minima, certify them, and run
//! the SGD landscape experiments built on top of them.
//!
//! Module map:
//! - [`sensing`]: instances, objective, gradient, Hessian, RIP constants, certification.
//! - [`lmi`]: the operators `L` and `M`, LMI problem assembly, kernel factorization.
//! - [`sdp`]: a dense primal-dual interior-point SDP solver.
//! - [`rank1`]: closed-form rank-one constructions and their supporting bounds.
//! - [`sgd`]: SGD with momentum, outcome classification and trial statistics.
//! - [`experiments`]: fixtures and experiment drivers used by the CLI.

pub mod error;
pub mod experiments;
pub mod linalg;
pub mod lmi;
pub mod rank1;
pub mod sdp;
pub mod sensing;
pub mod sgd;
pub mod symbasis;

pub use error::{Error, Result};
pub use lmi::{ForgeResult, KernelMatrix, LmiOperators};
pub use rank1::Rank1Geometry;
pub use sdp::{SdpProblem, SdpSolution, SdpStatus, SolveOptions};
pub use sensing::{CandidatePoint, CertifyTolerances, CriticalityCertificate, RipReport, SensingInstance, Verdict};
pub use sgd::{ExperimentSummary, SgdConfig, TrialRecord};
