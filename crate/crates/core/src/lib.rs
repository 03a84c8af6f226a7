//! Chance-constrained trajectory optimisation by set erosion.
//!
//! A stochastic closed loop that contracts at rate `c` stays, with probability
//! at least `1 - delta`, inside a tube of computable radius around its noise-free
//! twin. Inflating obstacles by that radius turns the chance constraint into a
//! deterministic one, which a collocation solver then handles directly.

pub mod contraction;
pub mod dynamics;
pub mod error;
pub mod geometry;
pub mod optimizer;
pub mod scenario;
pub mod tube;
pub mod verify;

pub use error::{Error, Result};
