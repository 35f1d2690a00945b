//! Replica master equations for monitored free-fermion-like chains, with
//! trace-preserving closures built from partial-trace null spaces.

mod binio;
pub mod dynamics;
pub mod ensemble;
pub mod error;
pub mod fock;
pub mod linalg;
pub mod master;
pub mod nnls;
pub mod observables;
pub mod nullspace;
pub mod replica;
pub mod transfer;

pub use error::{Error, Result};
