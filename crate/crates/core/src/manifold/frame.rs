//! Boundary collar frames: coordinates `(s, d)` near `∂M` in which `d` is
//! the geodesic distance to the boundary (positive into M) and `s`
//! parametrizes the boundary.  In these coordinates the pulled-back metric
//! satisfies `g~_dd = 1` and `g~_sd = 0`, which is what the normalization
//! step of the tensor decomposition integrates against.
//!
//! Frames are closed forms selected by the chart's [`BoundaryHint`];
//! construction validates the orthonormality relations on a sample grid and
//! rejects hints that do not hold to [`tolerances::TOL_BOUNDARY_FRAME`].

use super::{BoundaryHint, MetricChart};
use crate::error::{GxError, Result};
use crate::grid::{Mat3, Vec3};
use crate::tolerances;
use std::f64::consts::{PI, TAU};
use std::sync::Arc;

/// Step for differentiating the collar map; coarse enough to keep round-off
/// out of the frame vectors, fine enough for curvature terms.
const FD_STEP_FRAME: f64 = 1e-6;

enum FrameKind {
    /// Rotationally symmetric 2-d chart, `rho` maps chart radius to
    /// geodesic distance from the origin.
    Radial {
        rho: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
        rho_inv: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
        /// Geodesic distance from the origin to `∂M`.
        r_m_dist: f64,
    },
    /// Stereographic sphere chart; `p0` is the embedded cap pole and
    /// `(u, v)` an orthonormal basis of its tangent plane.
    Sphere {
        p0: [f64; 3],
        u: [f64; 3],
        v: [f64; 3],
        r_m: f64,
    },
    /// Flat 3-d chart, boundary cylinder of radius `r_m` over a periodic
    /// axis.
    Cylinder { r_m: f64 },
    /// Flat 2-d chart, `M = {x_1 <= 0}`.
    HalfPlane,
}

/// Collar coordinate system around `∂M`.  Tangential parameters come first,
/// depth last; 2-d charts have one tangential parameter, 3-d charts two.
pub struct BoundaryNormalFrame {
    pub w_collar: f64,
    pub n_tang: usize,
    /// Period of each tangential parameter, if it wraps.
    pub s_period: [Option<f64>; 2],
    /// Range of each tangential parameter.
    pub s_range: [(f64, f64); 2],
    kind: FrameKind,
}

/// Frame vectors at a collar point, expressed in chart coordinates.
pub struct CollarPoint {
    pub x: Vec3,
    /// Tangential coordinate vectors `dPhi/ds_k`.
    pub e_s: [Vec3; 2],
    /// Inward unit normal `dPhi/dd`.
    pub e_d: Vec3,
}

fn stereo_to_sphere(x: &Vec3) -> [f64; 3] {
    let n = 1.0 + x[0] * x[0] + x[1] * x[1];
    [2.0 * x[0] / n, 2.0 * x[1] / n, (2.0 - n) / n]
}

fn sphere_to_stereo(p: [f64; 3]) -> Vec3 {
    Vec3::new(p[0] / (1.0 + p[2]), p[1] / (1.0 + p[2]), 0.0)
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize3(a: [f64; 3]) -> [f64; 3] {
    let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

impl BoundaryNormalFrame {
    /// Signed geodesic distance to `∂M`, positive inside M.
    pub fn signed_depth(&self, x: &Vec3) -> f64 {
        match &self.kind {
            FrameKind::Radial { rho, r_m_dist, .. } => {
                r_m_dist - rho(x[0].hypot(x[1]))
            }
            FrameKind::Sphere { p0, r_m, .. } => {
                let w = stereo_to_sphere(x);
                let c = (w[0] * p0[0] + w[1] * p0[1] + w[2] * p0[2]).clamp(-1.0, 1.0);
                r_m - c.acos()
            }
            FrameKind::Cylinder { r_m } => r_m - x[0].hypot(x[1]),
            FrameKind::HalfPlane => -x[1],
        }
    }

    /// Tangential parameters of the boundary point nearest to `x`.
    pub fn foot_params(&self, x: &Vec3) -> [f64; 2] {
        match &self.kind {
            FrameKind::Radial { .. } => [x[1].atan2(x[0]), 0.0],
            FrameKind::Sphere { u, v, .. } => {
                let w = stereo_to_sphere(x);
                let tu = w[0] * u[0] + w[1] * u[1] + w[2] * u[2];
                let tv = w[0] * v[0] + w[1] * v[1] + w[2] * v[2];
                [tv.atan2(tu), 0.0]
            }
            FrameKind::Cylinder { .. } => [x[1].atan2(x[0]), x[2]],
            FrameKind::HalfPlane => [x[0], 0.0],
        }
    }

    /// Collar map `Phi(s, d)` into chart coordinates.
    pub fn chart_point(&self, s: &[f64; 2], d: f64) -> Vec3 {
        match &self.kind {
            FrameKind::Radial {
                rho_inv, r_m_dist, ..
            } => {
                let r = rho_inv(r_m_dist - d);
                Vec3::new(r * s[0].cos(), r * s[0].sin(), 0.0)
            }
            FrameKind::Sphere { p0, u, v, r_m } => {
                let om = r_m - d;
                let (so, co) = om.sin_cos();
                let (ss, cs) = s[0].sin_cos();
                let q = [
                    co * p0[0] + so * (cs * u[0] + ss * v[0]),
                    co * p0[1] + so * (cs * u[1] + ss * v[1]),
                    co * p0[2] + so * (cs * u[2] + ss * v[2]),
                ];
                sphere_to_stereo(q)
            }
            FrameKind::Cylinder { r_m } => {
                let r = r_m - d;
                Vec3::new(r * s[0].cos(), r * s[0].sin(), s[1])
            }
            FrameKind::HalfPlane => Vec3::new(s[0], -d, 0.0),
        }
    }

    /// Frame vectors at `(s, d)` by central differences of the collar map.
    pub fn frame_at(&self, s: &[f64; 2], d: f64) -> CollarPoint {
        let h = FD_STEP_FRAME;
        let x = self.chart_point(s, d);
        let mut e_s = [Vec3::zeros(); 2];
        for k in 0..self.n_tang {
            let mut sp = *s;
            let mut sm = *s;
            sp[k] += h;
            sm[k] -= h;
            e_s[k] = (self.chart_point(&sp, d) - self.chart_point(&sm, d)) / (2.0 * h);
        }
        let e_d = (self.chart_point(s, d + h) - self.chart_point(s, d - h)) / (2.0 * h);
        CollarPoint { x, e_s, e_d }
    }

    /// Pulled-back metric in collar coordinates, order `(s_0 [, s_1], d)`,
    /// returned in the leading `(n_tang + 1)` block.
    pub fn frame_metric(&self, chart: &MetricChart, s: &[f64; 2], d: f64) -> Result<Mat3> {
        let f = self.frame_at(s, d);
        let ev = chart.metric_at(&f.x)?;
        let n = self.n_tang;
        let mut vecs = [Vec3::zeros(); 3];
        vecs[..n].copy_from_slice(&f.e_s[..n]);
        vecs[n] = f.e_d;
        let mut gt = Mat3::zeros();
        for i in 0..=n {
            for j in 0..=n {
                gt[(i, j)] = vecs[i].dot(&(ev.g * vecs[j]));
            }
        }
        Ok(gt)
    }
}

/// Build and validate the collar frame of width `w_collar` around `∂M`.
pub fn boundary_frame(chart: &MetricChart, w_collar: f64) -> Result<BoundaryNormalFrame> {
    if !(w_collar > 0.0) {
        return Err(GxError::InvalidArgument(
            "collar width must be positive".into(),
        ));
    }
    let frame = match &chart.boundary_hint {
        BoundaryHint::RadialConformal {
            r_m_chart,
            rho,
            rho_inv,
        } => {
            if chart.dim != 2 {
                return Err(GxError::CollarInvalid(
                    "radial collar frames are 2-dimensional".into(),
                ));
            }
            let r_m_dist = rho(*r_m_chart);
            if w_collar > 0.75 * r_m_dist {
                return Err(GxError::CollarInvalid(format!(
                    "collar width {w_collar} too wide for boundary at distance {r_m_dist}"
                )));
            }
            BoundaryNormalFrame {
                w_collar,
                n_tang: 1,
                s_period: [Some(TAU), None],
                s_range: [(-PI, PI), (0.0, 0.0)],
                kind: FrameKind::Radial {
                    rho: rho.clone(),
                    rho_inv: rho_inv.clone(),
                    r_m_dist,
                },
            }
        }
        BoundaryHint::SphereStereo { pole, r_m_angle } => {
            if w_collar > 0.75 * r_m_angle {
                return Err(GxError::CollarInvalid(format!(
                    "collar width {w_collar} too wide for cap of radius {r_m_angle}"
                )));
            }
            let p0 = stereo_to_sphere(pole);
            // Seed axis least aligned with the pole.
            let seed = if p0[0].abs() <= p0[1].abs() && p0[0].abs() <= p0[2].abs() {
                [1.0, 0.0, 0.0]
            } else if p0[1].abs() <= p0[2].abs() {
                [0.0, 1.0, 0.0]
            } else {
                [0.0, 0.0, 1.0]
            };
            let u = normalize3(cross(seed, p0));
            let v = cross(p0, u);
            BoundaryNormalFrame {
                w_collar,
                n_tang: 1,
                s_period: [Some(TAU), None],
                s_range: [(-PI, PI), (0.0, 0.0)],
                kind: FrameKind::Sphere {
                    p0,
                    u,
                    v,
                    r_m: *r_m_angle,
                },
            }
        }
        BoundaryHint::Cylinder { r_m } => {
            if chart.dim != 3 {
                return Err(GxError::CollarInvalid(
                    "cylinder collar frames are 3-dimensional".into(),
                ));
            }
            if w_collar > 0.75 * r_m {
                return Err(GxError::CollarInvalid(format!(
                    "collar width {w_collar} too wide for cylinder radius {r_m}"
                )));
            }
            let z = (chart.bbox.min[2], chart.bbox.max[2]);
            BoundaryNormalFrame {
                w_collar,
                n_tang: 2,
                s_period: [Some(TAU), chart.periods[2]],
                s_range: [(-PI, PI), z],
                kind: FrameKind::Cylinder { r_m: *r_m },
            }
        }
        BoundaryHint::HalfPlane => {
            if chart.dim != 2 {
                return Err(GxError::CollarInvalid(
                    "half-plane collar frames are 2-dimensional".into(),
                ));
            }
            BoundaryNormalFrame {
                w_collar,
                n_tang: 1,
                s_period: [None, None],
                s_range: [(chart.bbox.min[0], chart.bbox.max[0]), (0.0, 0.0)],
                kind: FrameKind::HalfPlane,
            }
        }
        BoundaryHint::None => {
            return Err(GxError::Unsupported(format!(
                "chart '{}' has no boundary collar frame",
                chart.name
            )))
        }
    };
    validate_frame(chart, &frame)?;
    Ok(frame)
}

/// Check orthonormality `g~_dd = 1`, `g~_sd = 0`, depth consistency, and
/// chart containment on a sample grid over the collar.
fn validate_frame(chart: &MetricChart, frame: &BoundaryNormalFrame) -> Result<()> {
    let tol = tolerances::TOL_BOUNDARY_FRAME;
    let n_s = 9;
    let n_d = 5;
    let mut s_vals: Vec<[f64; 2]> = Vec::new();
    for i in 0..n_s {
        let t = i as f64 / (n_s - 1) as f64;
        let (lo0, hi0) = frame.s_range[0];
        // Stay off the exact range ends of non-periodic parameters.
        let a0 = if frame.s_period[0].is_some() {
            lo0 + t * (hi0 - lo0)
        } else {
            lo0 + (0.05 + 0.9 * t) * (hi0 - lo0)
        };
        if frame.n_tang == 1 {
            s_vals.push([a0, 0.0]);
        } else {
            for j in 0..n_s {
                let r = j as f64 / (n_s - 1) as f64;
                let (lo1, hi1) = frame.s_range[1];
                let a1 = if frame.s_period[1].is_some() {
                    lo1 + r * (hi1 - lo1)
                } else {
                    lo1 + (0.05 + 0.9 * r) * (hi1 - lo1)
                };
                s_vals.push([a0, a1]);
            }
        }
    }
    for s in &s_vals {
        for i in 0..n_d {
            let d = -frame.w_collar + 2.0 * frame.w_collar * i as f64 / (n_d - 1) as f64;
            let x = frame.chart_point(s, d);
            if !chart.contains(&x) {
                return Err(GxError::CollarInvalid(format!(
                    "collar point ({s:?}, {d}) maps outside the chart box"
                )));
            }
            let depth = frame.signed_depth(&x);
            if (depth - d).abs() > 1e-9 * (1.0 + d.abs()) {
                return Err(GxError::CollarInvalid(format!(
                    "depth of Phi({s:?}, {d}) is {depth}"
                )));
            }
            let gt = frame.frame_metric(chart, s, d)?;
            let nd = frame.n_tang;
            if (gt[(nd, nd)] - 1.0).abs() > tol {
                return Err(GxError::CollarInvalid(format!(
                    "normal direction is not unit at ({s:?}, {d}): g_dd = {}",
                    gt[(nd, nd)]
                )));
            }
            for k in 0..nd {
                if gt[(k, nd)].abs() > tol {
                    return Err(GxError::CollarInvalid(format!(
                        "normal is not orthogonal at ({s:?}, {d}): g_sd = {}",
                        gt[(k, nd)]
                    )));
                }
            }
        }
    }
    Ok(())
}
