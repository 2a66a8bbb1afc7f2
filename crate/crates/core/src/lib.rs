//! Aligned network diagonalization for K×K×K two-hop relay networks.
//!
//! The crate is `no_std` with `alloc`. It carries the channel model, the
//! monomial direction algebra, both forms of the scheme (time-varying linear
//! precoding and constant-channel integer constellations) and the closed-form
//! degrees-of-freedom analysis. IO, reports and the CLI live in the `netdiag`
//! crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod channel;
pub mod constant;
pub mod direction;
pub mod dof;
mod error;
pub mod linalg;
mod math;
pub mod rng;
pub mod stats;
pub mod tv;

pub use channel::{ChannelRealization, GainDistribution, Hop};
pub use direction::{DirectionMatrix, DirectionSet, ExponentVector};
pub use error::{Error, Result};
pub use linalg::{Lu, Matrix};
