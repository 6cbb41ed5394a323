//! Federated learning by fitness exchange.
//!
//! Clients train locally, score a shared population of seeded perturbations
//! against their trained model, and upload only the resulting fitness
//! matrix. Every node decodes the aggregated fitness into the same model
//! step, so no parameters cross the wire after initialization.

pub mod baselines;
pub mod datasets;
pub mod detrng;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod fitness_codec;
pub mod nn;
pub mod pbge;

pub use error::{Error, Result};
