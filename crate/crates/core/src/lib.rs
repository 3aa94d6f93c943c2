//! Exact gradients and Hessian-vector products of cost functions of
//! Runge–Kutta solutions, computed by sweeping the first- and second-order
//! adjoint systems backward with the symplectic partner tableau.

#![allow(clippy::needless_range_loop)]

pub mod adjoint;
pub mod cost;
pub mod error;
pub mod expcli;
pub mod krylov;
pub mod lmrn;
pub mod ode;
pub mod problems;
pub mod sensitivity;
pub mod tableau;
pub mod vecops;

pub use error::{Error, Result};
