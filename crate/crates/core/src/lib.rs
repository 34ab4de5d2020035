//! Fixed-effects binary-choice panels with generalized logistic shocks.
//!
//! The crate covers the shock family ([`glogit`]), the determinant moment
//! kernel ([`kernel`]), data-generating processes and exact conditional
//! objects ([`dgp`]), identification diagnostics ([`ident`]) and GMM
//! estimation ([`gmm`]).

pub mod dgp;
pub mod error;
pub mod glogit;
pub mod gmm;
pub mod ident;
pub mod kernel;
mod linalg;
pub mod quadrature;
pub mod rng;

pub use error::{Error, Result};
pub use glogit::{FamilyType, GenLogistic};
