//! Sampling-based synthesis of control barrier functions from hard state
//! constraints, plus a QP safety filter for closed-loop simulation.

pub mod boundary;
mod error;
pub mod fitter;
pub mod qp;
pub mod sampler;
mod search;
pub mod simulator;
pub mod system;

pub use boundary::BoundarySet;
pub use error::{Error, Result};
pub use fitter::{FitConfig, FitMode, FitResult, FitStatus, ObjectiveKind, VerificationReport};
pub use qp::{solve_box_qp, QpProblem, QpSolution, QpStatus};
pub use sampler::{ExtraFeasible, SampleClass, SampleRecord, SampleSet, SamplingConfig};
pub use simulator::{FilterConfig, InvarianceReport, SimConfig, StepStatus, Trajectory};
pub use system::{BoxSet, CbfCandidate, HardConstraint, Plant, SystemModel, SystemRegistry};
