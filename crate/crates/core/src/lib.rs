//! Many-body Chern numbers of spin SSH chains in external fields.
//!
//! The crate covers operator construction ([`spinops`]), exact
//! diagonalization ([`spectra`]), Berry curvature and Chern invariants
//! ([`geometry`]), time evolution and quench protocols ([`dynamics`]) and an
//! idealized NMR realization layer ([`nmr`]).

pub mod dynamics;
pub mod error;
pub mod fit;
pub mod geometry;
pub mod linalg;
pub mod nmr;
pub mod spectra;
pub mod spinops;

pub use error::{Error, Result};
pub use spinops::{ChainSpec, FieldPoint, Operator, PauliTerm, State, C64};
