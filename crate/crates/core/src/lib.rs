//! Multi-level power-grid model: synchronous states, energy-function stability
//! certificates, linearized dynamics and distributed versus centralized LQR.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod control;
pub mod dynamics;
pub mod error;
pub mod exec;
pub mod linalg;
pub mod network;
pub mod scenario;
pub mod stability;
pub mod steady_state;

pub use error::{GridError, Result};
pub use exec::Exec;
