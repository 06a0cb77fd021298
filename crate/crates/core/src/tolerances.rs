//! Central numeric tolerances and solver defaults.
//!
//! Every tolerance used by more than one module lives here so that tests,
//! the acceptance suite, and the CLI all pin the same values.  Functions
//! take these as arguments where a caller may reasonably want to override
//! them; the constants are the defaults.

/// Maximum allowed drift of the geodesic Hamiltonian E = (1/2) g^{ij} xi_i xi_j
/// away from 1/2 along a traced path.  Unit-speed parametrization keeps E at
/// exactly 1/2, so drift measures integrator error directly.
pub const TOL_ENERGY: f64 = 1e-8;

/// Traces abort with an integrator failure once drift exceeds this multiple
/// of [`TOL_ENERGY`].
pub const ENERGY_ABORT_FACTOR: f64 = 10.0;

/// Bisection width (in the path parameter t) for locating boundary-level
/// crossings of a traced geodesic.
pub const TOL_CROSSING: f64 = 1e-10;

/// Bisection width (in t) for conjugate-point location via the sign change
/// of the restricted Jacobi determinant.
pub const TOL_CONJUGATE: f64 = 1e-3;

/// Finite-difference step for the variational (linearized flow) Jacobian
/// used by Jacobi-field integration.
pub const FD_STEP_VARIATIONAL: f64 = 1e-6;

/// Relative finite-difference step for metric derivatives: the actual step
/// is this factor times the bounding-box diameter.
pub const FD_STEP_METRIC_REL: f64 = 1e-4;

/// Agreement required between analytic and finite-difference boundary-frame
/// metrics (the off-diagonal g_{in} entries must vanish in normal coordinates).
pub const TOL_BOUNDARY_FRAME: f64 = 1e-8;

/// Residual bound asserted by boundary normalization: after subtracting d(v0)
/// the normal components f_{ni} must be below this in the inner collar half.
pub const TOL_BOUNDARY_NORMALIZE: f64 = 1e-6;

/// Relative residual target for conjugate-gradient solves (Dirichlet solve,
/// decomposition projectors).
pub const TOL_CG: f64 = 1e-10;

/// Relative residual target for the reconstruction CG on the normal equations.
pub const TOL_CG_RECONSTRUCT: f64 = 1e-8;

/// Hard iteration cap for CG solves; hitting it is reported as divergence.
pub const CG_MAX_ITERS: usize = 50_000;

/// Fraction of the direction/surface window on which the family cutoff is
/// identically 1 (the cutoff falls smoothly to 0 toward the window edges).
pub const INNER_WINDOW_FRACTION: f64 = 0.5;

/// Lower bound on |<nu, theta>|_g enforced on the support of the family
/// cutoff (transversality of rays to the initial hypersurface).
pub const MIN_TRANSVERSALITY: f64 = 0.05;

/// Spatial tolerance of the completeness search, in grid cells: a ray covers
/// a point when it passes within this many cells of it.
pub const COVER_DIST_CELLS: f64 = 2.0;

/// Angular tolerance (degrees) of the completeness search: the ray direction
/// must be orthogonal to a given covector within this angle.
pub const COVER_ANGLE_DEG: f64 = 5.0;

/// Nodes of the trapezoid rule on the orthogonal direction circle in the
/// 3-dimensional principal-symbol quadrature.
pub const SYMBOL_QUAD_NODES: usize = 64;

/// Nodes of the angular trapezoid rule that integrates the normal-operator
/// kernel exactly over the singular grid cell in polar form.
pub const KERNEL_ANGLE_NODES: usize = 64;

/// Relative eigenvalue threshold for ellipticity: positivity of the symbol
/// on solenoidal tensors is declared when the smallest restricted eigenvalue
/// exceeds this factor times the largest.
pub const TOL_ELLIPTIC_REL: f64 = 1e-10;

/// Singular values below this factor times the largest are dropped when
/// orthonormalizing discrete bases (solenoidal/potential subspaces).
pub const BASIS_DROP_REL: f64 = 1e-10;

/// Dense SVD probes refuse grids with more nodes per axis than this.
pub const PROBE_GRID_CAP: usize = 24;

/// Default boundary-collar width, in grid cells, for weighted Sobolev norms
/// and boundary normalization.
pub const COLLAR_WIDTH_CELLS: f64 = 10.0;

/// Default ODE step rule: h = min(h_grid / 2, HODE_CAP) where h_grid is the
/// smallest grid spacing of the field grid in play.
pub const HODE_CAP: f64 = 1e-2;

/// Default step for the ODE-based traces when no grid is involved.
pub fn default_h_ode(h_grid: Option<f64>) -> f64 {
    match h_grid {
        Some(h) => (h / 2.0).min(HODE_CAP),
        None => HODE_CAP,
    }
}
