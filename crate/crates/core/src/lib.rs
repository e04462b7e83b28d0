//! Stochastic computation graphs with pluggable gradient estimators.
//!
//! The pipeline: build a define-by-run autodiff tape ([`graph::Graph`])
//! over parameters in a [`store::ParamStore`], record discrete draws as
//! [`distributions::CategoricalSample`]s, attach scalar costs, then ask
//! [`estimator`] for a surrogate loss whose ordinary backward pass realizes
//! the chosen gradient estimator: naive (ignore sampling paths), full
//! (score function with control variate), or Gumbel reparameterization.
//! A toy attention seq2seq model ([`seq2seq`]) exercises the machinery in
//! three training regimes, and [`oracle`] certifies the estimators against
//! exhaustive enumeration and finite differences.

pub mod data;
pub mod distributions;
pub mod error;
pub mod estimator;
pub mod graph;
pub mod metrics;
pub mod optim;
pub mod oracle;
pub mod rng;
pub mod sampling;
pub mod seq2seq;
pub mod store;
pub mod tensor;

pub use error::{Error, Result};
