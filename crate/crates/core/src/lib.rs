//! Constructive enumeration of the general solutions of Bellman/HJB equations
//! for linear-quadratic control, closed-loop classification, and neural
//! value-function learning on control-affine systems.

pub mod closed_loop;
pub mod dynamics;
pub mod error;
pub mod hamiltonian;
pub mod learn;
pub mod linalg;
pub mod linear_system;
pub mod network;
pub mod riccati;
pub mod tabular;

pub use error::{AtlasError, Result};
pub use linear_system::{LinearSystem, SystemDiagnostics, TimeMode};
