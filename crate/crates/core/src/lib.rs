//! Principal-agent learning with empirical-likelihood aggregation.
//!
//! A fixed population of `k` agents runs synchronized gradient descent, each on
//! its own data shard. Between rounds a principal scores the agents' estimates
//! on a held-out datum by solving a kernel-smoothed empirical-likelihood
//! program under residual mean/variance moment restrictions, and broadcasts the
//! resulting aggregation probabilities. Each agent then descends from the
//! probability-weighted blend of all current estimates rather than from its own
//! iterate.
//!
//! The crate is organized along that pipeline:
//!
//! * [`model`] — hypothesis families, local empirical risk, analytic gradients
//! * [`data`] — seeded synthetic data, sharding, held-out stream, private signals
//! * [`smoothing`] — kernels, bandwidth selection, row-stochastic weights
//! * [`principal`] — the EL dual solver, outer moment-parameter fit, aggregation
//!   probabilities
//! * [`agents`] — the consensus-then-descend parameter update
//! * [`orchestrator`] — the full round loop, baselines, structured failure
//!   reports
//! * [`oracle`] — independent brute-force reference implementations used by
//!   tests and the CLI's verification command
//!
//! Everything is deterministic given a seed: reruns of the same configuration
//! reproduce results bit for bit on a given platform.

pub mod agents;
pub mod data;
pub mod error;
pub mod model;
pub mod oracle;
pub mod orchestrator;
pub mod principal;
mod simplex;
pub mod smoothing;

pub use error::{Error, Result};
pub use model::{HypothesisSpec, LocalObjective, Loss, ParameterVector};
pub use data::{DataPoint, DataShard, DrawMode, GeneratorConfig, HeldOutStream, PrivateSignals};
pub use smoothing::{KernelSpec, WeightKind, WeightMatrix};
pub use principal::{BetaParams, DualVariables, MomentValue, PrincipalSolution};
pub use orchestrator::{BaselineKind, RoundRecord, RunConfig, RunResult};
