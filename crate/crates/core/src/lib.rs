//! Dynamical optimal transport with mixed finite elements.
//!
//! Densities are cellwise constant in space and continuous piecewise linear
//! in time, momenta are H(div)-conforming in space and piecewise constant in
//! time. The discrete Benamou–Brenier problem is solved by a primal-dual
//! splitting whose primal step is a mixed projection onto the space of
//! fields satisfying the continuity equation exactly.

pub mod assembly;
pub mod density;
pub mod fespace;
pub mod mesh;
pub mod ordering;
pub mod par;
pub mod quadrature;
pub mod solver;
pub mod sparse;
mod timemodes;
pub mod transport;

pub use par::Exec;
