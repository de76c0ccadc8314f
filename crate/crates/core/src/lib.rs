//! Binary-tree Gaussian process surrogates for unknown stochastic systems,
//! interval Markov chain abstraction and certified reachability bounds.
//!
//! The numeric core is generic over [`Real`] (`f32` or `f64`); the aliases
//! at the crate root fix the scalar to `f64`, which is what the pipeline
//! and the command-line front end use.

// `!(a < b)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod abstraction;
pub mod config;
pub mod errbound;
pub mod error;
pub mod export;
pub mod gp;
pub mod io;
pub mod kernel;
pub mod linalg;
pub mod partition;
pub mod pipeline;
pub mod real;
pub mod systems;
pub mod verify;

pub use abstraction::{build_imc, build_imc_continuous_reference, ImcOptions, TransitionVariance};
pub use config::PipelineConfig;
pub use errbound::{error_table, Eps1Branch, ErrorConfig};
pub use error::{Error, Result};
pub use gp::{aggregate, fit, AggregatedDataset, Posterior, SeGp};
pub use partition::CellId;
pub use pipeline::{run_pipeline, PipelineReport};
pub use real::Real;
pub use systems::{simulate, BenchmarkSystem};
pub use verify::{certify, interval_iteration, solve_inner, Certificate, IterationOptions, Sense, ValueBounds};

pub type StateBox = partition::StateBox<f64>;
pub type PartitionScheme = partition::PartitionScheme<f64>;
pub type BtKernel = kernel::BtKernel<f64>;
pub type SeKernel = kernel::SeKernel<f64>;
pub type Dataset = gp::Dataset<f64>;
pub type BtgpModel = gp::BtgpModel<f64>;
pub type ErrorTable = errbound::ErrorTable<f64>;
pub type Imc = abstraction::Imc<f64>;
