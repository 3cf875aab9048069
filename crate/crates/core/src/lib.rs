//! Demand inversion for discrete-choice models via two-sided matching.
//!
//! Observed market shares are treated as jar counts in a square matching
//! market between sampled consumers and units of each alternative. The
//! identified set of systematic utilities is a lattice; this crate recovers
//! its upper and lower bounds with a deferred-acceptance adjustment solver
//! ([`msa`]), an epsilon-scaled auction plus monotone bound propagation
//! ([`assignment`]), and exports the equivalent linear programs for external
//! cross-validation ([`lp`]). A smoothed contraction baseline ([`blp`]) and
//! a replication harness ([`bench`]) round out the toolkit.
//!
//! Numeric code is generic over the scalar type through [`scalar::Scalar`]
//! (implemented for `f32` and `f64`); the serde, CLI, and benchmark layers
//! are concrete in `f64`. The aliases below pin the common case.

pub mod assignment;
pub mod bench;
pub mod blp;
pub mod error;
pub mod lp;
pub mod market;
pub mod model;
pub mod msa;
pub mod scalar;
pub mod seed;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default-precision aliases for the core value types.
pub type MarketShares = market::MarketShares<f64>;
pub type DeltaVector = market::DeltaVector<f64>;
pub type ConsumerSample = market::ConsumerSample<f64>;
pub type DiscreteMarket = market::DiscreteMarket<f64>;
pub type Model = model::Model<f64>;
pub type ShockMatrix = model::ShockMatrix<f64>;
pub type MsaParams = msa::MsaParams<f64>;
pub type SmoothingParams = blp::SmoothingParams<f64>;
pub type EpsilonSchedule = assignment::EpsilonSchedule<f64>;
pub type PriceVector = assignment::PriceVector<f64>;
