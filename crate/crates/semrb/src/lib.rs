//! Steady incompressible Navier-Stokes in a parametrized channel, solved
//! with quadrilateral spectral elements, multilevel static condensation and
//! an Oseen fixed-point iteration, plus a POD reduced-basis model with an
//! exact offline-online split for fast viscosity sweeps.

pub mod assembly;
pub mod basis;
pub mod condense;
pub mod error;
pub mod io;
pub mod kovasznay;
pub mod mesh;
pub mod rom;
pub mod solver;

pub use error::{Error, Result};
