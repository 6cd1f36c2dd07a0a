//! Periodic pseudospectral solver for the generalized KdV equations
//! `u_t + u_xxx ± u^α u_x = 0` and `u_t + u_xxx ± |u|^α u_x = 0`.

pub mod cli;
pub mod diagnostics;
pub mod experiments;
pub mod grid;
pub mod integrators;
pub mod model;
