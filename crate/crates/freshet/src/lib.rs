//! Reconstruction of divergence-free 3D fluid velocity from single-view
//! screen observations, and recovery of physical simulation parameters by
//! differentiable grid-based fluid simulation.
//!
//! The crate is organized around a Lagrangian particle set coupled to a
//! collocated Eulerian grid:
//!
//! - [`grid`]: cell typing, finite-difference operators, boundary conditions
//! - [`apic`]: affine particle/grid transfers, advection, deformation
//! - [`step`]: the split incompressible update and its pressure solvers
//! - [`surface`]: screen-space velocity completion and volumetric projection
//! - [`cloud`]: point-cloud cleanup (prune, interior fill, frame union)
//! - [`tape`], [`loss`], [`optimize`]: differentiable rollouts and the
//!   parameter-estimation loop
//! - [`io`], [`pipeline`]: file formats and the four CLI stages

pub mod apic;
pub mod cloud;
pub mod error;
pub mod field;
pub mod grid;
pub mod io;
pub mod loss;
pub mod optimize;
pub mod params;
pub mod pipeline;
pub mod step;
pub mod surface;
pub mod tape;

pub use error::{Error, Result};
