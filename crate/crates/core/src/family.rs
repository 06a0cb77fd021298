//! Families of geodesics parametrized by points of a reference hypersurface
//! and a window of inward directions.
//!
//! A family chart is a surface `H` kept between `∂M` and `∂M1`, a grid of
//! nodes on `H`, and a grid of directions around the inward normal at each
//! node.  Every (node, direction) pair is traced into a [`Ray`] that carries
//! its taper weight `alpha`, its quadrature weight `mu`, and its traced
//! path.  Rays that fail the simplicity checks are kept for inspection but
//! forced to `alpha = 0` so they never contribute data.

use crate::error::{GxError, Result};
use crate::geodesics::{self, GeodesicPath, PhasePoint, TraceOptions};
use crate::grid::{smoothstep, Vec3};
use crate::manifold::MetricChart;
use crate::tolerances;
use rayon::prelude::*;
use std::f64::consts::{PI, TAU};

/// Reference hypersurface carrying the family nodes.
#[derive(Debug, Clone)]
pub enum SurfaceSpec {
    /// Chart circle around `center`, optionally restricted to the arc
    /// `s in [arc.0, arc.1]` (radians, taper applied at the arc ends).
    Circle {
        center: [f64; 2],
        radius: f64,
        n_s: usize,
        arc: Option<(f64, f64)>,
    },
    /// Straight chart segment from `a` to `b` (tapered at both ends).
    Segment { a: [f64; 2], b: [f64; 2], n_s: usize },
    /// Vertical cylinder `x_0^2 + x_1^2 = radius^2` over the third axis,
    /// which must be periodic.
    Cylinder {
        radius: f64,
        n_azimuth: usize,
        n_axial: usize,
    },
}

impl SurfaceSpec {
    fn n_nodes(&self) -> (usize, usize) {
        match self {
            SurfaceSpec::Circle { n_s, .. } | SurfaceSpec::Segment { n_s, .. } => (*n_s, 1),
            SurfaceSpec::Cylinder {
                n_azimuth, n_axial, ..
            } => (*n_azimuth, *n_axial),
        }
    }

    /// Parameter ranges; cell-centered nodes are laid over these.
    fn param_ranges(&self, chart: &MetricChart) -> [(f64, f64); 2] {
        match self {
            SurfaceSpec::Circle { arc, .. } => {
                [arc.unwrap_or((0.0, TAU)), (0.0, 0.0)]
            }
            SurfaceSpec::Segment { .. } => [(0.0, 1.0), (0.0, 0.0)],
            SurfaceSpec::Cylinder { .. } => {
                [(0.0, TAU), (chart.bbox.min[2], chart.bbox.max[2])]
            }
        }
    }

    /// Whether each parameter wraps (no taper at its ends).
    fn param_periodic(&self) -> [bool; 2] {
        match self {
            SurfaceSpec::Circle { arc, .. } => [arc.is_none(), false],
            SurfaceSpec::Segment { .. } => [false, false],
            SurfaceSpec::Cylinder { .. } => [true, true],
        }
    }

    pub fn point(&self, s: &[f64; 2]) -> Vec3 {
        match self {
            SurfaceSpec::Circle { center, radius, .. } => Vec3::new(
                center[0] + radius * s[0].cos(),
                center[1] + radius * s[0].sin(),
                0.0,
            ),
            SurfaceSpec::Segment { a, b, .. } => Vec3::new(
                a[0] + s[0] * (b[0] - a[0]),
                a[1] + s[0] * (b[1] - a[1]),
                0.0,
            ),
            SurfaceSpec::Cylinder { radius, .. } => {
                Vec3::new(radius * s[0].cos(), radius * s[0].sin(), s[1])
            }
        }
    }

    /// Chart tangent vectors of the parametrization.
    fn tangents(&self, s: &[f64; 2]) -> [Vec3; 2] {
        match self {
            SurfaceSpec::Circle { radius, .. } => [
                Vec3::new(-radius * s[0].sin(), radius * s[0].cos(), 0.0),
                Vec3::zeros(),
            ],
            SurfaceSpec::Segment { a, b, .. } => {
                [Vec3::new(b[0] - a[0], b[1] - a[1], 0.0), Vec3::zeros()]
            }
            SurfaceSpec::Cylinder { radius, .. } => [
                Vec3::new(-radius * s[0].sin(), radius * s[0].cos(), 0.0),
                Vec3::new(0.0, 0.0, 1.0),
            ],
        }
    }

    /// Signed level function vanishing on the surface.
    pub fn level(&self, x: &Vec3) -> f64 {
        match self {
            SurfaceSpec::Circle { center, radius, .. } => {
                (x[0] - center[0]).hypot(x[1] - center[1]) - radius
            }
            SurfaceSpec::Segment { a, b, .. } => {
                // Signed distance to the segment's supporting line.
                let t = Vec3::new(b[0] - a[0], b[1] - a[1], 0.0);
                let n = Vec3::new(-t[1], t[0], 0.0).normalize();
                (x[0] - a[0]) * n[0] + (x[1] - a[1]) * n[1]
            }
            SurfaceSpec::Cylinder { radius, .. } => x[0].hypot(x[1]) - radius,
        }
    }

    /// Surface parameters of a point on (or near) the surface.
    pub fn params_of(&self, x: &Vec3) -> [f64; 2] {
        match self {
            SurfaceSpec::Circle { center, .. } => {
                [(x[1] - center[1]).atan2(x[0] - center[0]).rem_euclid(TAU), 0.0]
            }
            SurfaceSpec::Segment { a, b, .. } => {
                let t = [b[0] - a[0], b[1] - a[1]];
                let len2 = t[0] * t[0] + t[1] * t[1];
                [((x[0] - a[0]) * t[0] + (x[1] - a[1]) * t[1]) / len2, 0.0]
            }
            SurfaceSpec::Cylinder { .. } => [x[1].atan2(x[0]).rem_euclid(TAU), x[2]],
        }
    }
}

/// Window of directions around the inward normal.
#[derive(Debug, Clone)]
pub enum DirWindow {
    /// Planar fan: directions `cos(psi) n + sin(psi) t` with
    /// `|psi| <= half_angle < pi/2`.
    Fan { half_angle: f64, n_psi: usize },
    /// Spatial cone for cylinder surfaces: azimuth `psi` in the horizontal
    /// plane, tilt `phi` toward the axis; direction measure `cos(phi)`.
    Cone {
        half_azimuth: f64,
        half_tilt: f64,
        n_psi: usize,
        n_phi: usize,
    },
}

impl DirWindow {
    fn n_nodes(&self) -> (usize, usize) {
        match self {
            DirWindow::Fan { n_psi, .. } => (*n_psi, 1),
            DirWindow::Cone { n_psi, n_phi, .. } => (*n_psi, *n_phi),
        }
    }

    fn half_widths(&self) -> [f64; 2] {
        match self {
            DirWindow::Fan { half_angle, .. } => [*half_angle, 0.0],
            DirWindow::Cone {
                half_azimuth,
                half_tilt,
                ..
            } => [*half_azimuth, *half_tilt],
        }
    }
}

/// Taper profile over a window parameter normalized to `[-1, 1]`: flat at 1
/// on the inner fraction, quintic roll-off to 0 at the edges.
pub fn window_taper(u: f64) -> f64 {
    let inner = tolerances::INNER_WINDOW_FRACTION;
    smoothstep(((1.0 - u.abs()) / (1.0 - inner)).clamp(0.0, 1.0))
}

/// One family chart: a surface, a direction window, and a trace budget.
#[derive(Debug, Clone)]
pub struct FamilyChartSpec {
    pub label: String,
    pub surface: SurfaceSpec,
    pub window: DirWindow,
    /// Tracing horizon; rays must leave M for good before this parameter.
    pub t_max: f64,
}

/// A traced family member.
#[derive(Debug, Clone)]
pub struct Ray {
    /// Node index on the surface grid (flattened) and in the window grid.
    pub iz: usize,
    pub itheta: usize,
    pub surface_params: [f64; 2],
    pub window_params: [f64; 2],
    /// Start point on the surface.
    pub z: Vec3,
    /// Unit (in g) direction at the start.
    pub theta: Vec3,
    /// Taper weight; zero rays carry no data.
    pub alpha: f64,
    /// Quadrature weight `|<nu, theta>_g| dS dtheta`.
    pub mu: f64,
    pub path: GeodesicPath,
    pub simple: bool,
    /// Sample index bounding the data interval `[0, t(k_hi)]`; `None` when
    /// the ray misses M.
    pub k_hi: Option<usize>,
}

impl Ray {
    /// Whether the ray contributes data rows.
    pub fn active(&self) -> bool {
        self.alpha > 0.0 && self.k_hi.is_some()
    }

    pub fn length_in_m(&self, chart: &MetricChart) -> f64 {
        self.path.length_in_m(chart)
    }
}

pub struct FamilyChart {
    pub spec: FamilyChartSpec,
    pub rays: Vec<Ray>,
    pub warnings: Vec<String>,
}

pub struct GeodesicFamily {
    pub charts: Vec<FamilyChart>,
}

/// Cell-centered nodes over `(lo, hi)`.
fn centered(lo: f64, hi: f64, n: usize, i: usize) -> f64 {
    lo + (hi - lo) * (i as f64 + 0.5) / n as f64
}

/// g-orthonormal frame at a surface point: inward unit normal first, then
/// unit tangents.
fn surface_frame(
    chart: &MetricChart,
    surface: &SurfaceSpec,
    s: &[f64; 2],
) -> Result<(Vec3, [Vec3; 2])> {
    let z = surface.point(s);
    let ev = chart.metric_at(&z)?;
    let t = surface.tangents(s);
    let mut tang = [Vec3::zeros(); 2];
    // Normal covector annihilating the tangents.
    let n_cov = if chart.dim == 2 {
        Vec3::new(-t[0][1], t[0][0], 0.0)
    } else {
        t[0].cross(&t[1])
    };
    let mut nu = ev.g_inv * n_cov;
    nu /= nu.dot(&(ev.g * nu)).sqrt();
    // Point into M: the M level must decrease.
    let h = 1e-6;
    if chart.level_m(&(z + h * nu)) > chart.level_m(&(z - h * nu)) {
        nu = -nu;
    }
    tang[0] = t[0] / t[0].dot(&(ev.g * t[0])).sqrt();
    if chart.dim == 3 {
        let mut t2 = t[1] - tang[0] * t[1].dot(&(ev.g * tang[0]));
        t2 /= t2.dot(&(ev.g * t2)).sqrt();
        tang[1] = t2;
    }
    Ok((nu, tang))
}

/// Direction vector for window parameters `w` in the frame `(nu, tang)`.
fn window_direction(window: &DirWindow, nu: &Vec3, tang: &[Vec3; 2], w: &[f64; 2]) -> Vec3 {
    match window {
        DirWindow::Fan { .. } => nu * w[0].cos() + tang[0] * w[0].sin(),
        DirWindow::Cone { .. } => {
            (nu * w[0].cos() + tang[0] * w[0].sin()) * w[1].cos() + tang[1] * w[1].sin()
        }
    }
}

impl FamilyChart {
    /// Trace every (node, direction) pair of `spec`.
    pub fn build(
        chart: &MetricChart,
        spec: FamilyChartSpec,
        opts: &TraceOptions,
    ) -> Result<FamilyChart> {
        let (ns0, ns1) = spec.surface.n_nodes();
        let (nw0, nw1) = spec.window.n_nodes();
        if ns0 * ns1 == 0 || nw0 * nw1 == 0 {
            return Err(GxError::InvalidArgument(
                "family chart needs at least one node per parameter".into(),
            ));
        }
        if matches!(spec.surface, SurfaceSpec::Cylinder { .. }) {
            if chart.dim != 3 || chart.periods[2].is_none() {
                return Err(GxError::InvalidArgument(
                    "cylinder surfaces need a 3-d chart with a periodic axis".into(),
                ));
            }
        } else if chart.dim != 2 {
            return Err(GxError::InvalidArgument(
                "planar surfaces need a 2-d chart".into(),
            ));
        }

        let ranges = spec.surface.param_ranges(chart);
        let periodic = spec.surface.param_periodic();
        let half = spec.window.half_widths();
        let (wn0, wn1) = spec.window.n_nodes();

        // Quadrature cell sizes per parameter.
        let ds = [
            (ranges[0].1 - ranges[0].0) / ns0 as f64,
            if ns1 > 1 {
                (ranges[1].1 - ranges[1].0) / ns1 as f64
            } else {
                1.0
            },
        ];
        let dw = [
            2.0 * half[0] / wn0 as f64,
            if wn1 > 1 { 2.0 * half[1] / wn1 as f64 } else { 1.0 },
        ];

        let node_ids: Vec<(usize, usize)> = (0..ns0 * ns1)
            .flat_map(|iz| (0..nw0 * nw1).map(move |it| (iz, it)))
            .collect();

        let results: Vec<Result<(Ray, Option<String>)>> = node_ids
            .par_iter()
            .map(|&(iz, it)| {
                build_ray(chart, &spec, opts, iz, it, &ranges, &periodic, &half, &ds, &dw)
            })
            .collect();

        let mut rays = Vec::with_capacity(results.len());
        let mut warnings = Vec::new();
        for r in results {
            let (ray, warn) = r?;
            if let Some(w) = warn {
                warnings.push(w);
            }
            rays.push(ray);
        }
        Ok(FamilyChart {
            spec,
            rays,
            warnings,
        })
    }

    /// Continuous taper weight at arbitrary surface/window parameters.
    pub fn alpha_continuous(&self, s: &[f64; 2], w: &[f64; 2]) -> f64 {
        alpha_value(
            &self.spec,
            s,
            w,
            &self.spec.surface.param_ranges_cached(),
            &self.spec.surface.param_periodic(),
            &self.spec.window.half_widths(),
        )
    }

    /// Taper weight of the family member through an interior point: the
    /// geodesic from `x` with g-direction `theta` is followed backwards to
    /// this chart's surface and the tapers are evaluated at the crossing
    /// parameters.  Zero when the backward ray leaves the box first.
    pub fn alpha_at(
        &self,
        chart: &MetricChart,
        x: &Vec3,
        theta: &Vec3,
        opts: &TraceOptions,
    ) -> Result<f64> {
        let surf = &self.spec.surface;
        let level = |p: &Vec3| surf.level(&chart.wrap(p));
        if level(x) >= 0.0 {
            return Ok(0.0);
        }
        let start = PhasePoint::from_direction(chart, *x, -theta)?;
        let path = geodesics::trace(chart, &start, (0.0, self.spec.t_max), opts)?;
        let mut k_cross = None;
        for k in 1..path.samples.len() {
            if level(&path.samples[k].x) >= 0.0 {
                k_cross = Some(k);
                break;
            }
        }
        let Some(k) = k_cross else {
            return Ok(0.0);
        };
        // Bisect the crossing parameter within the bracketing step.
        let (mut t_lo, mut t_hi) = (path.t_at(k - 1), path.t_at(k));
        let mut hit = path.samples[k];
        while t_hi - t_lo > tolerances::TOL_CROSSING {
            let t_mid = 0.5 * (t_lo + t_hi);
            let p = path.at(chart, t_mid)?;
            if level(&p.x) < 0.0 {
                t_lo = t_mid;
            } else {
                t_hi = t_mid;
                hit = p;
            }
        }
        let z = chart.wrap(&hit.x);
        let s = surf.params_of(&z);
        let (nu, tang) = surface_frame(chart, surf, &s)?;
        // Forward direction of the original ray at the surface.
        let w = -hit.velocity(chart)?;
        let ev = chart.metric_at(&z)?;
        let a = w.dot(&(ev.g * nu));
        let b = w.dot(&(ev.g * tang[0]));
        let wpar = match self.spec.window {
            DirWindow::Fan { .. } => [b.atan2(a), 0.0],
            DirWindow::Cone { .. } => {
                let c = w.dot(&(ev.g * tang[1]));
                [b.atan2(a), c.clamp(-1.0, 1.0).asin()]
            }
        };
        Ok(self.alpha_continuous(&s, &wpar))
    }

    pub fn n_active(&self) -> usize {
        self.rays.iter().filter(|r| r.active()).count()
    }
}

impl SurfaceSpec {
    /// Ranges that do not depend on the chart (the cylinder's axial range is
    /// only needed for node layout, not for tapers).
    fn param_ranges_cached(&self) -> [(f64, f64); 2] {
        match self {
            SurfaceSpec::Circle { arc, .. } => [arc.unwrap_or((0.0, TAU)), (0.0, 0.0)],
            SurfaceSpec::Segment { .. } => [(0.0, 1.0), (0.0, 0.0)],
            SurfaceSpec::Cylinder { .. } => [(0.0, TAU), (0.0, TAU)],
        }
    }
}

/// Taper product over surface and window parameters.
fn alpha_value(
    spec: &FamilyChartSpec,
    s: &[f64; 2],
    w: &[f64; 2],
    ranges: &[(f64, f64); 2],
    periodic: &[bool; 2],
    half: &[f64; 2],
) -> f64 {
    // Angle parameters of a partial circle arrive from atan2 in (-pi, pi];
    // fold them into one period above the arc's lower end before tapering.
    let wrap0 = match &spec.surface {
        SurfaceSpec::Circle { arc: Some(_), .. } => Some(TAU),
        _ => None,
    };
    let mut a = 1.0;
    for k in 0..2 {
        let (lo, hi) = ranges[k];
        if (hi - lo) > 0.0 && !periodic[k] {
            let mut sk = s[k];
            if k == 0 {
                if let Some(p) = wrap0 {
                    sk = lo + (sk - lo).rem_euclid(p);
                }
            }
            // Normalize to [-1, 1] over the parameter range.
            let u = 2.0 * (sk - lo) / (hi - lo) - 1.0;
            a *= window_taper(u);
        }
    }
    for k in 0..2 {
        if half[k] > 0.0 {
            a *= window_taper(w[k] / half[k]);
        }
    }
    a
}

#[allow(clippy::too_many_arguments)]
fn build_ray(
    chart: &MetricChart,
    spec: &FamilyChartSpec,
    opts: &TraceOptions,
    iz: usize,
    it: usize,
    ranges: &[(f64, f64); 2],
    periodic: &[bool; 2],
    half: &[f64; 2],
    ds: &[f64; 2],
    dw: &[f64; 2],
) -> Result<(Ray, Option<String>)> {
    let (ns0, _) = spec.surface.n_nodes();
    let (nw0, nw1) = spec.window.n_nodes();
    let (is0, is1) = (iz % ns0, iz / ns0);
    let (iw0, iw1) = (it % nw0, it / nw0);

    let (sn0, sn1) = spec.surface.n_nodes();
    let s = [
        centered(ranges[0].0, ranges[0].1, sn0, is0),
        if sn1 > 1 {
            centered(ranges[1].0, ranges[1].1, sn1, is1)
        } else {
            0.0
        },
    ];
    let w = [
        centered(-half[0], half[0], nw0, iw0),
        if nw1 > 1 {
            centered(-half[1], half[1], nw1, iw1)
        } else {
            0.0
        },
    ];

    let z = spec.surface.point(&s);
    let (nu, tang) = surface_frame(chart, &spec.surface, &s)?;
    let theta = window_direction(&spec.window, &nu, &tang, &w);
    let start = PhasePoint::from_direction(chart, z, theta)?;
    let path = geodesics::trace(chart, &start, (0.0, spec.t_max), opts)?;

    let ev = chart.metric_at(&z)?;
    let transversality = nu.dot(&(ev.g * theta)).abs();

    // Surface measure: line element (2-d) or area element (3-d) times the
    // parameter cells, from the Gram matrix of the tangents.
    let t = spec.surface.tangents(&s);
    let surf_meas = if chart.dim == 2 {
        t[0].dot(&(ev.g * t[0])).sqrt() * ds[0]
    } else {
        let e = t[0].dot(&(ev.g * t[0]));
        let f = t[0].dot(&(ev.g * t[1]));
        let g2 = t[1].dot(&(ev.g * t[1]));
        (e * g2 - f * f).sqrt() * ds[0] * ds[1]
    };
    // Direction measure: fan arc, or solid angle with the tilt Jacobian.
    let dir_meas = match &spec.window {
        DirWindow::Fan { .. } => dw[0],
        DirWindow::Cone { .. } => w[1].cos() * dw[0] * dw[1],
    };
    let mu = transversality * surf_meas * dir_meas;

    let mut alpha = alpha_value(spec, &s, &w, ranges, periodic, half);
    let mut warning = None;

    // Data interval: from the surface to just past the last exit from M,
    // snapped onto the sample lattice and kept inside the traced span.
    // A path that ends inside M has no complete interval.
    let ends_inside = chart.level_m(&path.end().x) <= 0.0;
    let k_hi = match path.t_exit() {
        Some(t_exit) if !ends_inside => {
            let margin = 0.05_f64.min(2.0 * path.h);
            let k = ((t_exit + margin) / path.h).ceil() as usize;
            Some(k.min(path.samples.len() - 1))
        }
        _ => None,
    };

    // Simplicity is judged on the data interval only; what the geodesic
    // does after leaving M for good is irrelevant.
    let simple = if alpha > 0.0 {
        if let Some(k) = k_hi {
            let rep =
                geodesics::is_simple(chart, &path.truncated(k), tolerances::TOL_CONJUGATE)?;
            if !rep.simple {
                warning = Some(format!(
                    "{}: ray ({iz}, {it}) is not simple ({}); alpha forced to 0",
                    spec.label,
                    rep.failures
                        .iter()
                        .map(|f| f.to_string())
                        .collect::<Vec<_>>()
                        .join("; ")
                ));
                alpha = 0.0;
            }
            rep.simple
        } else {
            // A ray that enters M but never leaves it within the horizon
            // cannot be integrated.
            if path.t_enter().is_some() {
                warning = Some(format!(
                    "{}: ray ({iz}, {it}) did not leave M before t_max = {}; alpha forced to 0",
                    spec.label, spec.t_max
                ));
                alpha = 0.0;
                false
            } else {
                true
            }
        }
    } else {
        true
    };

    if alpha > 0.0 && transversality < tolerances::MIN_TRANSVERSALITY {
        warning = Some(format!(
            "{}: ray ({iz}, {it}) is nearly tangent to the surface \
             (|<nu, theta>| = {transversality:.3}); alpha forced to 0",
            spec.label
        ));
        alpha = 0.0;
    }

    Ok((
        Ray {
            iz,
            itheta: it,
            surface_params: s,
            window_params: w,
            z,
            theta: start.velocity(chart)?,
            alpha,
            mu,
            path,
            simple,
            k_hi,
        },
        warning,
    ))
}

impl GeodesicFamily {
    pub fn build(
        chart: &MetricChart,
        specs: Vec<FamilyChartSpec>,
        opts: &TraceOptions,
    ) -> Result<GeodesicFamily> {
        let charts = specs
            .into_iter()
            .map(|s| FamilyChart::build(chart, s, opts))
            .collect::<Result<Vec<_>>>()?;
        Ok(GeodesicFamily { charts })
    }

    pub fn rays(&self) -> impl Iterator<Item = &Ray> {
        self.charts.iter().flat_map(|c| c.rays.iter())
    }

    pub fn n_rays(&self) -> usize {
        self.charts.iter().map(|c| c.rays.len()).sum()
    }

    pub fn n_active(&self) -> usize {
        self.charts.iter().map(|c| c.n_active()).sum()
    }

    pub fn warnings(&self) -> impl Iterator<Item = &String> {
        self.charts.iter().flat_map(|c| c.warnings.iter())
    }

    /// Squared taper weight of the oriented ray through `(x, theta)`,
    /// summed over the family's charts.
    pub fn alpha_sq_at(
        &self,
        chart: &MetricChart,
        x: &Vec3,
        theta: &Vec3,
        opts: &TraceOptions,
    ) -> Result<f64> {
        let mut sum = 0.0;
        for fc in &self.charts {
            let a = fc.alpha_at(chart, x, theta, opts)?;
            sum += a * a;
        }
        Ok(sum)
    }

    /// Default full-coverage fan family for a 2-d chart: a circle in the
    /// shell between `∂M` and `∂M1` (position by probing the level
    /// functions along the positive axis), fan wide enough to graze M.
    pub fn default_fan(chart: &MetricChart, n_s: usize, n_psi: usize) -> Result<FamilyChartSpec> {
        if chart.dim != 2 {
            return Err(GxError::InvalidArgument(
                "default fan family needs a 2-d chart".into(),
            ));
        }
        // Chart radii of the two level sets along the +x axis.
        let radius_of = |level: &dyn Fn(&Vec3) -> f64| -> f64 {
            let mut lo = 0.0;
            let mut hi = chart.bbox.max[0];
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if level(&Vec3::new(mid, 0.0, 0.0)) < 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        };
        let r_m = radius_of(&|x| chart.level_m(x));
        let r_m1 = radius_of(&|x| chart.level_m1(x));
        let r_h = 0.5 * (r_m + r_m1);
        // Wide enough that the taper's inner plateau still grazes ∂M.
        let graze = (r_m / r_h).asin();
        let half_angle = (1.35 * graze).min(0.45 * PI);
        Ok(FamilyChartSpec {
            label: format!("{}_fan", chart.name),
            surface: SurfaceSpec::Circle {
                center: [0.0, 0.0],
                radius: r_h,
                n_s,
                arc: None,
            },
            window: DirWindow::Fan {
                half_angle,
                n_psi,
            },
            t_max: 2.5 * r_h + 2.0,
        })
    }
}

/// Coverage check over the unit cosphere: a position/codirection pair is
/// covered when an active ray passes nearby with velocity g-orthogonal to
/// the codirection.
pub struct CoverageReport {
    pub n_checked: usize,
    pub n_covered: usize,
    /// Worst remaining angle to exact orthogonality among covered pairs,
    /// in degrees.
    pub worst_covered_angle_deg: f64,
    /// Uncovered (position, codirection) pairs.
    pub uncovered: Vec<(Vec3, Vec3)>,
    /// Covered flag per checked pair, positions outer, codirections inner,
    /// in [`scan_positions`]/[`scan_codirections`] order.
    pub flags: Vec<bool>,
    /// Position tolerance used, in chart units.
    pub dist_tol: f64,
    /// Angular tolerance used, in radians.
    pub ang_tol: f64,
}

impl CoverageReport {
    pub fn fraction(&self) -> f64 {
        if self.n_checked == 0 {
            1.0
        } else {
            self.n_covered as f64 / self.n_checked as f64
        }
    }
}

/// Check how much of the cosphere bundle over `M` the family reaches.
///
/// Positions are an `n_pos`-per-axis grid over the box restricted to `M`,
/// codirections `n_dir` half-turn angles (2-d charts) or a hemisphere grid
/// (3-d).  `h_ref` is the analysis grid spacing: rays count as passing
/// through a position when they come within
/// [`tolerances::COVER_DIST_CELLS`] times `h_ref` of it.
pub fn completeness_check(
    chart: &MetricChart,
    family: &GeodesicFamily,
    n_pos: usize,
    n_dir: usize,
    h_ref: f64,
) -> Result<CoverageReport> {
    let dist_tol = tolerances::COVER_DIST_CELLS * h_ref;
    let ang_tol = tolerances::COVER_ANGLE_DEG.to_radians();

    // Spatial hash of active ray samples inside M.
    let cell = dist_tol;
    let key = |x: &Vec3| -> (i64, i64, i64) {
        (
            (x[0] / cell).floor() as i64,
            (x[1] / cell).floor() as i64,
            (x[2] / cell).floor() as i64,
        )
    };
    let mut index: std::collections::HashMap<(i64, i64, i64), Vec<(Vec3, Vec3)>> =
        std::collections::HashMap::new();
    for ray in family.rays().filter(|r| r.active()) {
        let k_hi = ray.k_hi.unwrap_or(ray.path.samples.len() - 1);
        for p in &ray.path.samples[..=k_hi] {
            let xw = chart.wrap(&p.x);
            if chart.level_m(&xw) > 0.0 {
                continue;
            }
            let v = p.velocity_at(chart)?;
            index.entry(key(&xw)).or_default().push((xw, v));
        }
    }

    let positions = scan_positions(chart, n_pos);
    let dirs = scan_codirections(chart, n_dir);

    let mut n_covered = 0;
    let mut worst_covered: f64 = 0.0;
    let mut uncovered = Vec::new();
    let mut flags = Vec::with_capacity(positions.len() * dirs.len());
    let sin_tol = ang_tol.sin();
    for x in &positions {
        let ev = chart.metric_at(x)?;
        let kx = key(x);
        for xi in &dirs {
            // Unit vector of the codirection (index raised).
            let mut wv = ev.g_inv * xi;
            wv /= wv.dot(&(ev.g * wv)).sqrt();
            let mut best: f64 = f64::INFINITY;
            for di in -1..=1 {
                for dj in -1..=1 {
                    for dk in -1..=1 {
                        let Some(list) = index.get(&(kx.0 + di, kx.1 + dj, kx.2 + dk)) else {
                            continue;
                        };
                        for (p, v) in list {
                            if (p - x).norm() > dist_tol {
                                continue;
                            }
                            let vu = v / v.dot(&(ev.g * v)).sqrt();
                            let c = vu.dot(&(ev.g * wv)).abs();
                            best = best.min(c);
                        }
                    }
                }
            }
            if best <= sin_tol {
                n_covered += 1;
                worst_covered = worst_covered.max(best.asin().to_degrees());
                flags.push(true);
            } else {
                uncovered.push((*x, *xi));
                flags.push(false);
            }
        }
    }
    Ok(CoverageReport {
        n_checked: positions.len() * dirs.len(),
        n_covered,
        worst_covered_angle_deg: worst_covered,
        uncovered,
        flags,
        dist_tol,
        ang_tol,
    })
}

/// Position samples inside M used by coverage and ellipticity scans:
/// an `n_pos`-per-axis cell-centered lattice over the chart box.
pub fn scan_positions(chart: &MetricChart, n_pos: usize) -> Vec<Vec3> {
    let mut positions = Vec::new();
    let n3 = if chart.dim == 3 { n_pos } else { 1 };
    for i in 0..n_pos {
        for j in 0..n_pos {
            for k in 0..n3 {
                let f = |idx: usize, n: usize, a: usize| {
                    chart.bbox.min[a]
                        + (chart.bbox.max[a] - chart.bbox.min[a]) * (idx as f64 + 0.5) / n as f64
                };
                let x = Vec3::new(
                    f(i, n_pos, 0),
                    f(j, n_pos, 1),
                    if chart.dim == 3 { f(k, n3, 2) } else { 0.0 },
                );
                if chart.level_m(&x) < 0.0 {
                    positions.push(x);
                }
            }
        }
    }
    positions
}

/// Codirection samples used by coverage and ellipticity scans; `xi` and
/// `-xi` are equivalent, so only a half turn (2-d) or hemisphere (3-d) is
/// enumerated.
pub fn scan_codirections(chart: &MetricChart, n_dir: usize) -> Vec<Vec3> {
    let mut dirs = Vec::new();
    if chart.dim == 2 {
        for a in 0..n_dir {
            let ang = PI * a as f64 / n_dir as f64;
            dirs.push(Vec3::new(ang.cos(), ang.sin(), 0.0));
        }
    } else {
        let n_incl = (n_dir / 2).max(2);
        for a in 0..n_dir {
            let az = PI * a as f64 / n_dir as f64;
            for b in 0..n_incl {
                let incl = PI * (b as f64 + 0.5) / n_incl as f64 / 2.0;
                dirs.push(Vec3::new(
                    incl.cos() * az.cos(),
                    incl.cos() * az.sin(),
                    incl.sin(),
                ));
            }
        }
    }
    dirs
}

impl PhasePoint {
    /// Velocity shorthand used by coverage checks.
    fn velocity_at(&self, chart: &MetricChart) -> Result<Vec3> {
        self.velocity(chart)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::{euclidean_disc, flat_torus_example2};

    fn disc_family(n_s: usize, n_psi: usize) -> (crate::manifold::MetricChart, GeodesicFamily) {
        let chart = euclidean_disc();
        let spec = GeodesicFamily::default_fan(&chart, n_s, n_psi).unwrap();
        let fam =
            GeodesicFamily::build(&chart, vec![spec], &TraceOptions::default()).unwrap();
        (chart, fam)
    }

    #[test]
    fn disc_fan_rays_are_simple_and_weighted() {
        let (chart, fam) = disc_family(24, 24);
        assert_eq!(fam.n_rays(), 24 * 24);
        assert!(fam.warnings().next().is_none(), "unexpected warnings");
        let mut max_len: f64 = 0.0;
        for ray in fam.rays() {
            assert!(ray.simple);
            assert!(ray.mu >= 0.0);
            if ray.active() {
                max_len = max_len.max(ray.length_in_m(&chart));
                // Endpoint of the data interval lies outside M.
                let k = ray.k_hi.unwrap();
                assert!(chart.level_m(&ray.path.samples[k].x) > 0.0);
            }
        }
        // Longest chord of the unit disc.
        assert!(max_len <= 2.0 + 1e-6, "max chord {max_len}");
        assert!(max_len > 1.9, "central rays missing, max chord {max_len}");
    }

    #[test]
    fn fan_quadrature_recovers_santalo_measure() {
        // sum over rays of mu * length(M) approximates the phase volume
        // 2 pi^2 r_M^2 ... for the unit disc: integral over the circle and
        // fan of |cos psi| * chord length = area x angle: pi * 2pi.
        let (chart, fam) = disc_family(48, 48);
        let total: f64 = fam
            .rays()
            .map(|r| r.mu * r.length_in_m(&chart))
            .sum();
        // With the taper ignored this would be exactly 2 pi^2; the taper
        // only reweights, so compare the untapered sum.
        let want = 2.0 * PI * PI;
        assert!(
            (total - want).abs() < 0.01 * want,
            "phase volume {total} want {want}"
        );
    }

    #[test]
    fn alpha_vanishes_at_window_edges_and_inner_half_is_flat() {
        let (_, fam) = disc_family(16, 16);
        let fc = &fam.charts[0];
        let half = fc.spec.window.half_widths()[0];
        assert_eq!(fc.alpha_continuous(&[0.1, 0.0], &[half, 0.0]), 0.0);
        assert_eq!(fc.alpha_continuous(&[0.1, 0.0], &[-half, 0.0]), 0.0);
        assert_eq!(fc.alpha_continuous(&[0.3, 0.0], &[0.4 * half, 0.0]), 1.0);
        let a = fc.alpha_continuous(&[0.3, 0.0], &[0.8 * half, 0.0]);
        assert!(a > 0.0 && a < 1.0);
    }

    #[test]
    fn disc_fan_covers_the_cosphere() {
        let (chart, fam) = disc_family(40, 40);
        let h_ref = 2.6 / 31.0;
        let rep = completeness_check(&chart, &fam, 12, 12, h_ref).unwrap();
        assert_eq!(rep.uncovered.len(), 0, "uncovered: {:?}", &rep.uncovered[..rep.uncovered.len().min(5)]);
        assert_eq!(rep.fraction(), 1.0);
    }

    #[test]
    fn alpha_at_interior_points_reproduces_ray_tapers() {
        let (chart, fam) = disc_family(24, 24);
        let opts = TraceOptions::default();
        let fc = &fam.charts[0];
        let mut checked = 0;
        for ray in fc.rays.iter().filter(|r| r.active()).step_by(37) {
            let k_hi = ray.k_hi.unwrap();
            let k_mid = k_hi / 2;
            let p = &ray.path.samples[k_mid];
            if chart.level_m(&p.x) > -0.05 {
                continue;
            }
            let v = p.velocity(&chart).unwrap();
            let a = fc.alpha_at(&chart, &p.x, &v, &opts).unwrap();
            assert!(
                (a - ray.alpha).abs() < 1e-5 * ray.alpha.max(1e-3),
                "alpha {} vs stored {} for ray ({}, {})",
                a,
                ray.alpha,
                ray.iz,
                ray.itheta
            );
            // The reversed direction crosses the far side of the circle;
            // its taper belongs to a different family member.
            let a_rev = fc.alpha_at(&chart, &p.x, &(-v), &opts).unwrap();
            assert!((0.0..=1.0).contains(&a_rev));
            checked += 1;
        }
        assert!(checked >= 8, "too few interior probes: {checked}");
    }

    #[test]
    fn gapped_arc_family_misses_directions_and_coverage_is_monotone() {
        let chart = euclidean_disc();
        let mut spec = GeodesicFamily::default_fan(&chart, 40, 40).unwrap();
        spec.surface = match spec.surface {
            SurfaceSpec::Circle {
                center,
                radius,
                n_s,
                ..
            } => SurfaceSpec::Circle {
                center,
                radius,
                n_s,
                // Nodes only on a quarter of the circle.
                arc: Some((-0.25 * PI, 0.25 * PI)),
            },
            s => s,
        };
        // Narrow fans: only near-radial chords, so whole direction sectors
        // go unseen.
        spec.window = DirWindow::Fan {
            half_angle: 30f64.to_radians(),
            n_psi: 40,
        };
        let gapped =
            GeodesicFamily::build(&chart, vec![spec], &TraceOptions::default()).unwrap();
        let h_ref = 2.6 / 31.0;
        let partial = completeness_check(&chart, &gapped, 12, 12, h_ref).unwrap();
        assert!(
            partial.fraction() < 0.9,
            "gapped family should not cover: {}",
            partial.fraction()
        );

        // Adding the full fan back restores coverage.
        let full_spec = GeodesicFamily::default_fan(&chart, 40, 40).unwrap();
        let mut both = gapped;
        both.charts.push(
            FamilyChart::build(&chart, full_spec, &TraceOptions::default()).unwrap(),
        );
        let rep = completeness_check(&chart, &both, 12, 12, h_ref).unwrap();
        assert!(rep.fraction() >= partial.fraction());
        assert_eq!(rep.fraction(), 1.0);
    }

    #[test]
    fn torus_transverse_family_has_short_chords() {
        let chart = flat_torus_example2();
        let spec = FamilyChartSpec {
            label: "torus_transverse".into(),
            surface: SurfaceSpec::Cylinder {
                radius: 1.1,
                n_azimuth: 12,
                n_axial: 8,
            },
            window: DirWindow::Cone {
                half_azimuth: 50f64.to_radians(),
                half_tilt: 25f64.to_radians(),
                n_psi: 6,
                n_phi: 5,
            },
            t_max: 3.0,
        };
        let fam = GeodesicFamily::build(&chart, vec![spec], &TraceOptions::default()).unwrap();
        assert!(fam.warnings().next().is_none());
        let mut n_active = 0;
        for ray in fam.rays() {
            if !ray.active() {
                continue;
            }
            n_active += 1;
            assert!(ray.simple);
            let len = ray.length_in_m(&chart);
            assert!(len <= 2.25, "chord length {len}");
        }
        assert!(n_active > 100, "only {n_active} active rays");
    }
}
