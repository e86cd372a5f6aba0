//! Certified numerics for stable manifolds of nonuniform dichotomies with
//! general growth rates.

pub mod cli;
pub mod cocycle;
pub mod conditions;
pub mod error;
pub mod rates;
pub mod solver;
pub mod verify;

pub use error::{Error, Result};
