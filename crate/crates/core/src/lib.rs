//! Topology optimization of nonlinear forced response curves.
//!
//! A geometrically nonlinear plane-stress finite element model is reduced to a
//! single complex mode on a cubic spectral submanifold. The reduced dynamics
//! give the forced response curve, its peak, backbone and saddle-node folds in
//! closed form, and adjoint sensitivities of all of them drive an MMA loop.
//!
//! Units follow the ng–μm–ms system: stiffness in ng/(μm·ms²), forces in
//! ng·μm/ms², frequencies in rad/ms.

pub mod error;
pub mod check;
pub mod config;
pub mod density;
pub mod fe;
pub mod frc;
pub mod io;
pub mod linalg;
pub mod mma;
pub mod modal;
pub mod optimize;
pub mod oracle;
pub mod sensitivity;
pub mod ssm;

pub use error::{Error, Result};
