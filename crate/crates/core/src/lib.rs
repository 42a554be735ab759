//! Entropic dynamics on exponential-family statistical manifolds.
//!
//! Everything numeric is generic over [`Real`] (`f32` or `f64`); the aliases
//! below fix the scalar to `f64`.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod acceptance;
pub mod ensemble;
pub mod error;
pub mod exp_family;
pub mod fokker_planck;
pub mod geometry;
pub mod kernel;
pub mod linalg;
pub mod onsager;
pub mod quadrature;
pub mod rng;
pub mod scalar;
pub mod stats;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Model = exp_family::ExpFamilyModel<f64>;
pub type Point = exp_family::ManifoldPoint<f64>;
pub type Dual = exp_family::DualCoordinates<f64>;
pub type Custom = exp_family::CustomFamily<f64>;
pub type Matrix = linalg::Matrix<f64>;
pub type Bundle = geometry::GeometryBundle<f64>;
pub type Step = kernel::StepParams<f64>;
pub type Path = ensemble::Trajectory<f64>;
pub type Grid = fokker_planck::FpGrid<f64>;
pub type Linearization = onsager::LinearizationReport<f64>;
