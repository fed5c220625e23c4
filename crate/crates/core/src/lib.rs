//! Perfect sampling of nearest-neighbour Markov random fields on Z^d.
//!
//! Coupled heat-bath block dynamics are run backward in time from an
//! addressable random field until the value at a target site no longer
//! depends on the initial state. Exact enumeration on small regions supplies
//! the conditional laws, the optimal couplings, and the checks of the
//! standard spatial-mixing conditions.

pub mod coupling;
pub mod domain;
pub mod dynamics;
pub mod error;
pub mod experiments;
pub mod exactgibbs;
pub mod lattice;
pub mod model;
pub mod par;
pub mod randomness;
pub mod schedules;

pub use error::{Error, Result};
pub use lattice::{Region, Torus, Vertex};
pub use model::{BoundaryCondition, Spec, Symbol, SymbolSet};
