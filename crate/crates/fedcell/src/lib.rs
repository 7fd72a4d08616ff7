//! Federated learning over an unreliable cellular uplink.
//!
//! The library models a single tagged cell of a Poisson cellular network in
//! which a base station trains a global model over `N` devices using `M`
//! uplink resource blocks per round. Uplink transmissions fail with a
//! distance-dependent probability, and the aggregation step compensates for
//! both partial participation and channel unreliability so that the global
//! update stays unbiased.
//!
//! Modules:
//! - [`wireless`]: cell geometry sampling, SINR simulation, and the analytic
//!   per-device success probability with a Monte-Carlo cross-check.
//! - [`datasets`]: synthetic non-iid data generation, IDX loading, and
//!   two-digits-per-device partitioning.
//! - [`model`]: MLP and L2-regularized multinomial logistic losses with
//!   exact gradients over flat parameter vectors.
//! - [`flcore`]: device sampling schemes, local SGD, and the unbiased /
//!   biased aggregation rules.
//! - [`scheduling`]: the optimal expected resource-block allocation.
//! - [`bounds`]: the convergence-bound calculator.
//! - [`harness`]: config parsing and experiment orchestration for the CLI.

pub mod bounds;
pub mod datasets;
pub mod error;
pub mod flcore;
pub mod harness;
pub mod model;
pub mod quad;
pub mod rng;
pub mod scheduling;
pub mod wireless;

pub use error::{Error, Result};
