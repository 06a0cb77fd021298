//! Metric charts, built-in manifolds, tensor fields, and boundary collar
//! frames.
//!
//! A [`MetricChart`] is one coordinate chart carrying a Riemannian metric
//! together with two smooth level functions whose negative sublevel sets
//! define the compact domain `M` and a slightly larger open neighborhood
//! `M1`.  Everything downstream (tracing, transforms, decompositions) works
//! in these coordinates.
//!
//! Charts of dimension 2 are embedded in the fixed 3-component point
//! representation with the third coordinate frozen at 0 and `g_33 = 1`, so
//! the Hamiltonian flow and all linear algebra are dimension-uniform.

mod builtins;
mod field;
mod frame;

pub use builtins::{
    builtin_chart, builtin_names, conjugate_strip_example1, euclidean_disc, flat_torus_example2,
    halfplane_test, hyperbolic_disc, sphere_cap, sphere_cap_antipode, sphere_cap_pole,
    sphere_distance, sphere_polar, SPHERE_CAP_RADIUS, SPHERE_CAP_RADIUS_M1,
    STRIP_LENS_AMPLITUDE, STRIP_LENS_SIGMA,
};
pub use field::{comp_count, comp_pairs, Support, SymmetricTensorField, TensorValue};
pub use frame::{boundary_frame, BoundaryNormalFrame};

use crate::error::{GxError, Result};
use crate::grid::{BBox, Grid, Mat3, Vec3};
use crate::tolerances;
use std::sync::Arc;

pub type MetricFn = Arc<dyn Fn(&Vec3) -> Mat3 + Send + Sync>;
pub type MetricGradFn = Arc<dyn Fn(&Vec3) -> [Mat3; 3] + Send + Sync>;
pub type LevelFn = Arc<dyn Fn(&Vec3) -> f64 + Send + Sync>;

/// Hint describing the shape of `∂M`, used to pick closed-form boundary
/// collar frames where one exists.
#[derive(Clone)]
pub enum BoundaryHint {
    /// `∂M` is the chart circle `|x| = r` of a rotationally symmetric metric;
    /// radial chart lines are geodesics and `rho` maps chart radius to
    /// geodesic distance from the origin (with inverse `rho_inv`).
    RadialConformal {
        r_m_chart: f64,
        rho: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
        rho_inv: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    },
    /// Flat 3-dimensional chart with `∂M` the cylinder `x_0^2 + x_1^2 = r^2`
    /// over a periodic third axis.
    Cylinder { r_m: f64 },
    /// Flat chart with `∂M = {x_1 = 0}` and `M` the lower half plane.
    HalfPlane,
    /// Round-sphere chart in stereographic coordinates with `∂M` the
    /// geodesic circle of angular radius `r_m_angle` around `pole`;
    /// normal geodesics are great-circle arcs through the pole.
    SphereStereo { pole: Vec3, r_m_angle: f64 },
    /// No collar frame available (e.g. `∂M` is disconnected in this chart).
    None,
}

/// One coordinate chart with metric and domain level functions.
#[derive(Clone)]
pub struct MetricChart {
    pub name: String,
    pub dim: usize,
    pub bbox: BBox,
    /// Period per axis for wrap-around coordinates.
    pub periods: [Option<f64>; 3],
    pub boundary_hint: BoundaryHint,
    metric_fn: MetricFn,
    metric_grad_fn: Option<MetricGradFn>,
    level_m_fn: LevelFn,
    level_m1_fn: LevelFn,
    /// Step for finite-difference metric derivatives when no analytic
    /// gradient is supplied.
    pub h_fd: f64,
}

/// Metric, inverse, and volume factor at one point.
#[derive(Debug, Clone, Copy)]
pub struct MetricEval {
    pub g: Mat3,
    pub g_inv: Mat3,
    pub sqrt_det: f64,
}

impl MetricChart {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        bbox: BBox,
        periods: [Option<f64>; 3],
        metric_fn: MetricFn,
        metric_grad_fn: Option<MetricGradFn>,
        level_m_fn: LevelFn,
        level_m1_fn: LevelFn,
        boundary_hint: BoundaryHint,
    ) -> Result<Self> {
        if dim != 2 && dim != 3 {
            return Err(GxError::DimensionMismatch {
                expected: 2,
                got: dim,
            });
        }
        let h_fd = tolerances::FD_STEP_METRIC_REL * bbox.diameter();
        Ok(MetricChart {
            name: name.into(),
            dim,
            bbox,
            periods,
            boundary_hint,
            metric_fn,
            metric_grad_fn,
            level_m_fn,
            level_m1_fn,
            h_fd,
        })
    }

    /// Wrap periodic coordinates into the box span.
    pub fn wrap(&self, x: &Vec3) -> Vec3 {
        let mut y = *x;
        for a in 0..self.dim {
            if let Some(p) = self.periods[a] {
                y[a] = self.bbox.min[a] + (y[a] - self.bbox.min[a]).rem_euclid(p);
            }
        }
        y
    }

    pub fn contains(&self, x: &Vec3) -> bool {
        self.bbox.contains(&self.wrap(x), self.dim)
    }

    /// Metric with inverse and `sqrt(det g)`; errors when g fails to be
    /// positive definite.
    pub fn metric_at(&self, x: &Vec3) -> Result<MetricEval> {
        let xw = self.wrap(x);
        let g = (self.metric_fn)(&xw);
        let chol = nalgebra::Cholesky::new(g).ok_or(GxError::DegenerateMetric {
            x: xw[0],
            y: xw[1],
            z: xw[2],
        })?;
        let sqrt_det = chol.l().diagonal().iter().product::<f64>();
        let g_inv = chol.inverse();
        Ok(MetricEval {
            g,
            g_inv,
            sqrt_det,
        })
    }

    /// Partial derivatives of the metric, `[k] -> d g / d x^k`.  Uses the
    /// analytic gradient when the chart has one, otherwise central finite
    /// differences with step `h_fd`.
    pub fn metric_grad(&self, x: &Vec3) -> [Mat3; 3] {
        let xw = self.wrap(x);
        if let Some(f) = &self.metric_grad_fn {
            return f(&xw);
        }
        let mut out = [Mat3::zeros(); 3];
        for k in 0..self.dim {
            let mut xp = xw;
            let mut xm = xw;
            xp[k] += self.h_fd;
            xm[k] -= self.h_fd;
            out[k] = ((self.metric_fn)(&xp) - (self.metric_fn)(&xm)) / (2.0 * self.h_fd);
        }
        out
    }

    /// Christoffel symbols `G[k][(i, j)] = Gamma^k_{ij}`.
    pub fn christoffel(&self, x: &Vec3) -> Result<[Mat3; 3]> {
        let ev = self.metric_at(x)?;
        let dg = self.metric_grad(x);
        let mut out = [Mat3::zeros(); 3];
        for k in 0..self.dim {
            for i in 0..self.dim {
                for j in i..self.dim {
                    let mut s = 0.0;
                    for l in 0..self.dim {
                        s += ev.g_inv[(k, l)] * (dg[i][(j, l)] + dg[j][(i, l)] - dg[l][(i, j)]);
                    }
                    let v = 0.5 * s;
                    out[k][(i, j)] = v;
                    out[k][(j, i)] = v;
                }
            }
        }
        Ok(out)
    }

    pub fn level_m(&self, x: &Vec3) -> f64 {
        (self.level_m_fn)(&self.wrap(x))
    }

    pub fn level_m1(&self, x: &Vec3) -> f64 {
        (self.level_m1_fn)(&self.wrap(x))
    }

    pub fn in_m(&self, x: &Vec3) -> bool {
        self.level_m(x) <= 0.0
    }

    pub fn in_m1(&self, x: &Vec3) -> bool {
        self.level_m1(x) <= 0.0
    }

    /// Uniform grid over the chart box with `n` nodes along the first axis
    /// and matching spacing (node counts rounded up) on the others.
    pub fn grid(&self, n: usize) -> Result<Grid> {
        let h = (self.bbox.max[0] - self.bbox.min[0]) / (n.max(2) - 1) as f64;
        let mut dims = [1usize; 3];
        for a in 0..self.dim {
            let span = self.bbox.max[a] - self.bbox.min[a];
            dims[a] = if self.periods[a].is_some() {
                (span / h).round().max(4.0) as usize
            } else {
                ((span / h).round() as usize + 1).max(4)
            };
        }
        Grid::new(self.dim, dims, self.bbox, self.periods)
    }

    /// Metric norm of a tangent vector at x.
    pub fn norm_vec(&self, x: &Vec3, v: &Vec3) -> Result<f64> {
        let ev = self.metric_at(x)?;
        Ok((v.dot(&(ev.g * v))).max(0.0).sqrt())
    }

    /// Metric norm of a covector at x.
    pub fn norm_covec(&self, x: &Vec3, xi: &Vec3) -> Result<f64> {
        let ev = self.metric_at(x)?;
        Ok((xi.dot(&(ev.g_inv * xi))).max(0.0).sqrt())
    }
}
