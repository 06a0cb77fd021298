//! Built-in example manifolds.
//!
//! All domains are given on a single chart.  `M` and `M1` are negative
//! sublevel sets of smooth functions; `M` must sit inside the interior of
//! `M1`, and `M1` inside the bounding box with room for ray endpoints.

use super::{BoundaryHint, LevelFn, MetricChart, MetricFn, MetricGradFn};
use crate::grid::{BBox, Mat3, Vec3};
use std::f64::consts::{PI, TAU};
use std::sync::Arc;

/// Flat unit disc: `M = {|x| <= 1}`, `M1 = {|x| <= 1.2}`.
pub fn euclidean_disc() -> MetricChart {
    let metric: MetricFn = Arc::new(|_: &Vec3| Mat3::identity());
    let grad: MetricGradFn = Arc::new(|_: &Vec3| [Mat3::zeros(); 3]);
    let level_m: LevelFn = Arc::new(|x: &Vec3| x[0] * x[0] + x[1] * x[1] - 1.0);
    let level_m1: LevelFn = Arc::new(|x: &Vec3| x[0] * x[0] + x[1] * x[1] - 1.44);
    MetricChart::new(
        "euclidean_disc",
        2,
        BBox::new_2d([-1.3, -1.3], [1.3, 1.3]),
        [None, None, None],
        metric,
        Some(grad),
        level_m,
        level_m1,
        BoundaryHint::RadialConformal {
            r_m_chart: 1.0,
            rho: Arc::new(|r| r),
            rho_inv: Arc::new(|d| d),
        },
    )
    .expect("static chart")
}

/// Chart-center offset of the spherical cap's pole.
pub const SPHERE_CAP_POLE_X: f64 = 0.414_213_562_373_095_1; // tan(pi/8)
/// Geodesic radius of the cap `M`.
pub const SPHERE_CAP_RADIUS: f64 = 0.3 * PI;
/// Geodesic radius of the enlarged cap `M1`.
pub const SPHERE_CAP_RADIUS_M1: f64 = 0.35 * PI;

/// Spherical distance between two points of the curvature +1 sphere in
/// conformal (stereographic) coordinates.
pub fn sphere_distance(a: &Vec3, b: &Vec3) -> f64 {
    let d2 = (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
    let na = 1.0 + a[0] * a[0] + a[1] * a[1];
    let nb = 1.0 + b[0] * b[0] + b[1] * b[1];
    2.0 * (d2 / (na * nb)).sqrt().clamp(0.0, 1.0).asin()
}

/// Curvature +1 spherical cap in conformal coordinates,
/// `g = 4 (1 + |x|^2)^{-2} I`.
///
/// The cap is centered at a pole placed off the chart origin so that the
/// pole's antipode is a regular chart point: the whole length-pi geodesic
/// from the pole stays inside the box.  `M` is the geodesic ball of radius
/// 0.3 pi around the pole, `M1` the ball of radius 0.35 pi.
pub fn sphere_cap() -> MetricChart {
    let metric: MetricFn = Arc::new(|x: &Vec3| {
        let lam = 4.0 / (1.0 + x[0] * x[0] + x[1] * x[1]).powi(2);
        let mut g = Mat3::identity();
        g[(0, 0)] = lam;
        g[(1, 1)] = lam;
        g
    });
    let grad: MetricGradFn = Arc::new(|x: &Vec3| {
        let s = 1.0 + x[0] * x[0] + x[1] * x[1];
        let dlam = -16.0 / s.powi(3);
        let mut out = [Mat3::zeros(); 3];
        for k in 0..2 {
            out[k][(0, 0)] = dlam * x[k];
            out[k][(1, 1)] = dlam * x[k];
        }
        out
    });
    let pole = sphere_cap_pole();
    let level_m: LevelFn = Arc::new(move |x: &Vec3| sphere_distance(x, &pole) - SPHERE_CAP_RADIUS);
    let level_m1: LevelFn =
        Arc::new(move |x: &Vec3| sphere_distance(x, &pole) - SPHERE_CAP_RADIUS_M1);
    MetricChart::new(
        "sphere_cap",
        2,
        BBox::new_2d([-3.5, -3.5], [3.5, 3.5]),
        [None, None, None],
        metric,
        Some(grad),
        level_m,
        level_m1,
        BoundaryHint::SphereStereo {
            pole: sphere_cap_pole(),
            r_m_angle: SPHERE_CAP_RADIUS,
        },
    )
    .expect("static chart")
}

/// Pole of the spherical cap in chart coordinates.
pub fn sphere_cap_pole() -> Vec3 {
    Vec3::new(SPHERE_CAP_POLE_X, 0.0, 0.0)
}

/// Antipode of the cap pole in chart coordinates (`x -> -x / |x|^2`).
pub fn sphere_cap_antipode() -> Vec3 {
    let p = sphere_cap_pole();
    let n2 = p[0] * p[0] + p[1] * p[1];
    Vec3::new(-p[0] / n2, -p[1] / n2, 0.0)
}

/// Geodesic polar coordinates `(r, phi)` of the unit sphere,
/// `g = diag(1, sin^2 r)`, with `M` an annular band `0.3 <= r <= 1.2`.
///
/// The chart degenerates at `r = 0` and `r = pi`, so the box keeps clear of
/// both; use [`sphere_cap`] when a pole must be a regular point.  Meridians
/// `phi = const` are unit-speed geodesics: `r(t) = r_0 + t` exactly.
pub fn sphere_polar() -> MetricChart {
    let metric: MetricFn = Arc::new(|x: &Vec3| {
        let mut g = Mat3::identity();
        g[(1, 1)] = x[0].sin().powi(2);
        g
    });
    let grad: MetricGradFn = Arc::new(|x: &Vec3| {
        let mut out = [Mat3::zeros(); 3];
        out[0][(1, 1)] = (2.0 * x[0]).sin();
        out
    });
    let level_m: LevelFn = Arc::new(|x: &Vec3| (x[0] - 0.75) * (x[0] - 0.75) - 0.45 * 0.45);
    let level_m1: LevelFn = Arc::new(|x: &Vec3| (x[0] - 0.75) * (x[0] - 0.75) - 0.5 * 0.5);
    MetricChart::new(
        "sphere_polar",
        2,
        BBox::new_2d([0.15, -PI], [1.35, PI]),
        [None, Some(TAU), None],
        metric,
        Some(grad),
        level_m,
        level_m1,
        // ∂M is two disjoint circles in this chart; no star-shaped frame.
        BoundaryHint::None,
    )
    .expect("static chart")
}

/// Curvature -1 hyperbolic disc in conformal coordinates,
/// `g = 4 (1 - |x|^2)^{-2} I`, with `M` the geodesic ball of radius 1.0
/// around the origin and `M1` the ball of radius 1.2.
pub fn hyperbolic_disc() -> MetricChart {
    let metric: MetricFn = Arc::new(|x: &Vec3| {
        let lam = 4.0 / (1.0 - x[0] * x[0] - x[1] * x[1]).powi(2);
        let mut g = Mat3::identity();
        g[(0, 0)] = lam;
        g[(1, 1)] = lam;
        g
    });
    let grad: MetricGradFn = Arc::new(|x: &Vec3| {
        let s = 1.0 - x[0] * x[0] - x[1] * x[1];
        let dlam = 16.0 / s.powi(3);
        let mut out = [Mat3::zeros(); 3];
        for k in 0..2 {
            out[k][(0, 0)] = dlam * x[k];
            out[k][(1, 1)] = dlam * x[k];
        }
        out
    });
    // Geodesic distance from the origin: 2 artanh(|x|).
    let dist = |x: &Vec3| {
        let r = (x[0] * x[0] + x[1] * x[1]).sqrt().min(1.0 - 1e-12);
        2.0 * r.atanh()
    };
    let level_m: LevelFn = Arc::new(move |x: &Vec3| dist(x) - 1.0);
    let level_m1: LevelFn = Arc::new(move |x: &Vec3| dist(x) - 1.2);
    MetricChart::new(
        "hyperbolic_disc",
        2,
        BBox::new_2d([-0.62, -0.62], [0.62, 0.62]),
        [None, None, None],
        metric,
        Some(grad),
        level_m,
        level_m1,
        BoundaryHint::RadialConformal {
            r_m_chart: (0.5f64).tanh(),
            rho: Arc::new(|r| 2.0 * r.atanh()),
            rho_inv: Arc::new(|d| (0.5 * d).tanh()),
        },
    )
    .expect("static chart")
}

/// Flat solid torus: `{x_0^2 + x_1^2 <= 1} x S^1` with the identity metric
/// and a periodic third coordinate of period 2 pi.
///
/// Geodesics running along the periodic axis are closed with period 2 pi and
/// never reach the boundary; geodesics transverse to the axis cross the
/// unit-disc cross-section with chords of length at most 2.
pub fn flat_torus_example2() -> MetricChart {
    let metric: MetricFn = Arc::new(|_: &Vec3| Mat3::identity());
    let grad: MetricGradFn = Arc::new(|_: &Vec3| [Mat3::zeros(); 3]);
    let level_m: LevelFn = Arc::new(|x: &Vec3| x[0] * x[0] + x[1] * x[1] - 1.0);
    let level_m1: LevelFn = Arc::new(|x: &Vec3| x[0] * x[0] + x[1] * x[1] - 1.44);
    MetricChart::new(
        "flat_torus_example2",
        3,
        BBox::new_3d([-1.3, -1.3, 0.0], [1.3, 1.3, TAU]),
        [None, None, Some(TAU)],
        metric,
        Some(grad),
        level_m,
        level_m1,
        BoundaryHint::Cylinder { r_m: 1.0 },
    )
    .expect("static chart")
}

/// Lens strength of the strip metric (conformal exponent at the center).
pub const STRIP_LENS_AMPLITUDE: f64 = 1.0;
/// Lens width of the strip metric.
pub const STRIP_LENS_SIGMA: f64 = 0.4;

/// Strip with a conformal Gaussian lens at the origin,
/// `g = e^{2 phi} I` with `phi = b exp(-|x|^2 / (2 s^2))`.
///
/// The Gauss curvature `K = -e^{-2 phi} (Lap phi)` is positive on the core
/// `|x| < sqrt(2) s`, so the horizontal axis (a geodesic, by symmetry)
/// focuses its neighbors: its Jacobi fields vanish again about 3.3 length
/// units past entry.  Steep geodesics crossing the strip sideways miss the
/// lens core and stay simple.
pub fn conjugate_strip_example1() -> MetricChart {
    let phi = |x: &Vec3| {
        let r2 = x[0] * x[0] + x[1] * x[1];
        STRIP_LENS_AMPLITUDE * (-r2 / (2.0 * STRIP_LENS_SIGMA * STRIP_LENS_SIGMA)).exp()
    };
    let metric: MetricFn = Arc::new(move |x: &Vec3| {
        let lam = (2.0 * phi(x)).exp();
        let mut g = Mat3::identity();
        g[(0, 0)] = lam;
        g[(1, 1)] = lam;
        g
    });
    let grad: MetricGradFn = Arc::new(move |x: &Vec3| {
        let s2 = STRIP_LENS_SIGMA * STRIP_LENS_SIGMA;
        let p = phi(x);
        let lam = (2.0 * p).exp();
        let mut out = [Mat3::zeros(); 3];
        for k in 0..2 {
            // d_k lam = -2 x_k / s^2 * phi * lam
            let d = -2.0 * x[k] / s2 * p * lam;
            out[k][(0, 0)] = d;
            out[k][(1, 1)] = d;
        }
        out
    });
    let level_m: LevelFn =
        Arc::new(|x: &Vec3| (x[0] / 1.8).powi(4) + (x[1] / 0.7).powi(4) - 1.0);
    let level_m1: LevelFn =
        Arc::new(|x: &Vec3| (x[0] / 2.0).powi(4) + (x[1] / 0.85).powi(4) - 1.0);
    MetricChart::new(
        "conjugate_strip_example1",
        2,
        BBox::new_2d([-2.2, -1.0], [2.2, 1.0]),
        [None, None, None],
        metric,
        Some(grad),
        level_m,
        level_m1,
        // Normal geodesics of the superellipse have no closed form here.
        BoundaryHint::None,
    )
    .expect("static chart")
}

/// Flat half-plane test chart: `M = {x_1 <= 0}`, `M1 = {x_1 <= 0.3}`.
/// Used by collar/normalization tests where closed-form answers exist.
pub fn halfplane_test() -> MetricChart {
    let metric: MetricFn = Arc::new(|_: &Vec3| Mat3::identity());
    let grad: MetricGradFn = Arc::new(|_: &Vec3| [Mat3::zeros(); 3]);
    let level_m: LevelFn = Arc::new(|x: &Vec3| x[1]);
    let level_m1: LevelFn = Arc::new(|x: &Vec3| x[1] - 0.3);
    MetricChart::new(
        "halfplane_test",
        2,
        BBox::new_2d([-1.0, -1.0], [1.0, 0.5]),
        [None, None, None],
        metric,
        Some(grad),
        level_m,
        level_m1,
        BoundaryHint::HalfPlane,
    )
    .expect("static chart")
}

/// Names of the charts available through [`builtin_chart`].
pub fn builtin_names() -> &'static [&'static str] {
    &[
        "euclidean_disc",
        "sphere_cap",
        "sphere_polar",
        "hyperbolic_disc",
        "flat_torus_example2",
        "conjugate_strip_example1",
    ]
}

/// Look up a built-in chart by name.
pub fn builtin_chart(name: &str) -> crate::error::Result<MetricChart> {
    match name {
        "euclidean_disc" => Ok(euclidean_disc()),
        "sphere_cap" => Ok(sphere_cap()),
        "sphere_polar" => Ok(sphere_polar()),
        "hyperbolic_disc" => Ok(hyperbolic_disc()),
        "flat_torus_example2" => Ok(flat_torus_example2()),
        "conjugate_strip_example1" => Ok(conjugate_strip_example1()),
        other => Err(crate::error::GxError::InvalidArgument(format!(
            "unknown manifold '{other}'; available: {}",
            builtin_names().join(", ")
        ))),
    }
}
