//! Geodesic X-ray transform toolkit.
//!
//! The crate models a compact manifold-with-boundary `M` sitting inside a
//! slightly larger open manifold `M1`, both given as negative sublevel sets of
//! smooth functions on a single coordinate chart.  On top of that it provides:
//!
//! * Hamiltonian geodesic tracing with Jacobi fields and conjugate-point
//!   detection ([`geodesics`]),
//! * families of geodesics parametrized by a hypersurface and a direction
//!   window, with smooth cutoff weights ([`family`]),
//! * the weighted ray transform of symmetric m-tensors (m = 0, 1, 2), its
//!   discrete adjoint and normal operator ([`transform`]),
//! * solenoidal/potential decomposition of symmetric 2-tensors
//!   ([`decomposition`]),
//! * principal symbol and ellipticity diagnostics for the normal operator
//!   ([`symbols`]),
//! * injectivity, stability, and reconstruction probes ([`analysis`]),
//! * binary/CSV artifact serialization ([`io`]).
//!
//! All numeric defaults live in [`tolerances`]; every solver takes explicit
//! tolerances so experiments stay reproducible.

pub mod analysis;
pub mod decomposition;
pub mod error;
pub mod family;
pub mod geodesics;
pub mod grid;
pub mod manifold;
pub mod symbols;
pub mod tolerances;
pub mod transform;

pub use error::{GxError, Result};
