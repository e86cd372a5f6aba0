//! Compiles and runs the listings of the guide in `book/src` as doc-tests.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/growth-rates.md")]
pub mod growth_rates {}

#[doc = include_str!("../../../book/src/dichotomies.md")]
pub mod dichotomies {}

#[doc = include_str!("../../../book/src/admissibility.md")]
pub mod admissibility {}

#[doc = include_str!("../../../book/src/solving.md")]
pub mod solving {}

#[doc = include_str!("../../../book/src/verification.md")]
pub mod verification {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
