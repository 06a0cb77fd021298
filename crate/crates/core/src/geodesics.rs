//! Geodesic tracing through the Hamiltonian flow of
//! `E_g(x, xi) = (1/2) g^{ij}(x) xi_i xi_j`, plus Jacobi fields, conjugate
//! points, and simplicity checks.
//!
//! Geodesics are kept on the energy level `E_g = 1/2`, which is exactly
//! unit-speed (arc-length) parametrization, so parameter lengths are metric
//! lengths.  Integration is classical fixed-step RK4; there is no adaptive
//! fallback, a drifting trace is an error.
//!
//! Jacobi fields are integrated through the linearized flow: the Jacobian of
//! the Hamiltonian vector field is applied by directional finite differences
//! of the field itself, so no curvature tensor is ever assembled.

use crate::error::{GxError, Result};
use crate::grid::{Mat3, Vec3};
use crate::manifold::MetricChart;
use crate::tolerances;

/// Point of phase space: position and *covector* momentum.
#[derive(Debug, Clone, Copy)]
pub struct PhasePoint {
    pub x: Vec3,
    pub xi: Vec3,
}

impl PhasePoint {
    /// Normalize the momentum so that `E_g = 1/2` (unit speed).
    pub fn unit_speed(chart: &MetricChart, x: Vec3, xi: Vec3) -> Result<PhasePoint> {
        let ev = chart.metric_at(&x)?;
        let e = 0.5 * xi.dot(&(ev.g_inv * xi));
        if !(e > 0.0) || !e.is_finite() {
            return Err(GxError::InvalidArgument(
                "momentum must have positive energy".into(),
            ));
        }
        Ok(PhasePoint {
            x,
            xi: xi / (2.0 * e).sqrt(),
        })
    }

    /// Unit-speed phase point moving along the tangent direction `v`.
    pub fn from_direction(chart: &MetricChart, x: Vec3, v: Vec3) -> Result<PhasePoint> {
        let ev = chart.metric_at(&x)?;
        let n = v.dot(&(ev.g * v)).sqrt();
        if !(n > 0.0) || !n.is_finite() {
            return Err(GxError::InvalidArgument(
                "direction vector must be nonzero".into(),
            ));
        }
        Ok(PhasePoint {
            x,
            xi: ev.g * (v / n),
        })
    }

    pub fn energy(&self, chart: &MetricChart) -> Result<f64> {
        let ev = chart.metric_at(&self.x)?;
        Ok(0.5 * self.xi.dot(&(ev.g_inv * self.xi)))
    }

    /// Velocity `dx/dt = g^{-1} xi`.
    pub fn velocity(&self, chart: &MetricChart) -> Result<Vec3> {
        let ev = chart.metric_at(&self.x)?;
        Ok(ev.g_inv * self.xi)
    }
}

/// Hamiltonian vector field: `dx = g^{-1} xi`, `dxi_k = (1/2) v . (d_k g) v`.
fn ham_rhs(chart: &MetricChart, p: &PhasePoint) -> Result<(Vec3, Vec3)> {
    let ev = chart.metric_at(&p.x)?;
    let v = ev.g_inv * p.xi;
    let dg = chart.metric_grad(&p.x);
    let mut dxi = Vec3::zeros();
    for k in 0..chart.dim {
        dxi[k] = 0.5 * v.dot(&(dg[k] * v));
    }
    Ok((v, dxi))
}

fn rk4_step(chart: &MetricChart, p: &PhasePoint, dt: f64) -> Result<PhasePoint> {
    let (k1x, k1xi) = ham_rhs(chart, p)?;
    let p2 = PhasePoint {
        x: p.x + 0.5 * dt * k1x,
        xi: p.xi + 0.5 * dt * k1xi,
    };
    let (k2x, k2xi) = ham_rhs(chart, &p2)?;
    let p3 = PhasePoint {
        x: p.x + 0.5 * dt * k2x,
        xi: p.xi + 0.5 * dt * k2xi,
    };
    let (k3x, k3xi) = ham_rhs(chart, &p3)?;
    let p4 = PhasePoint {
        x: p.x + dt * k3x,
        xi: p.xi + dt * k3xi,
    };
    let (k4x, k4xi) = ham_rhs(chart, &p4)?;
    Ok(PhasePoint {
        x: p.x + dt / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x),
        xi: p.xi + dt / 6.0 * (k1xi + 2.0 * k2xi + 2.0 * k3xi + k4xi),
    })
}

/// Bounding-box check that ignores periodic axes (those wrap instead of
/// escaping).
fn in_box(chart: &MetricChart, x: &Vec3) -> bool {
    (0..chart.dim).all(|a| {
        chart.periods[a].is_some() || (x[a] >= chart.bbox.min[a] && x[a] <= chart.bbox.max[a])
    })
}

#[derive(Debug, Clone, Copy)]
pub struct TraceOptions {
    pub h_ode: f64,
    pub tol_energy: f64,
    /// Trace aborts once drift exceeds `abort_factor * tol_energy`.
    pub abort_factor: f64,
}

impl Default for TraceOptions {
    fn default() -> Self {
        TraceOptions {
            h_ode: tolerances::default_h_ode(None),
            tol_energy: tolerances::TOL_ENERGY,
            abort_factor: tolerances::ENERGY_ABORT_FACTOR,
        }
    }
}

impl TraceOptions {
    pub fn with_h(h_ode: f64) -> Self {
        TraceOptions {
            h_ode,
            ..Default::default()
        }
    }
}

/// A traced geodesic: uniform phase-space samples plus boundary crossings.
///
/// Sample `k` sits at parameter `t0 + k h`.  Positions are stored unwrapped
/// on periodic axes so the path is continuous; wrap before chart lookups.
#[derive(Debug, Clone)]
pub struct GeodesicPath {
    pub t0: f64,
    pub h: f64,
    pub samples: Vec<PhasePoint>,
    /// Parameters where `level_M` changes sign, ascending.
    pub m_crossings: Vec<f64>,
    /// Parameters where `level_M1` changes sign, ascending.
    pub m1_crossings: Vec<f64>,
    /// The trace left the bounding box before covering the requested span.
    pub escaped: bool,
    pub max_energy_drift: f64,
}

impl GeodesicPath {
    pub fn t_at(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.h
    }

    pub fn t_end(&self) -> f64 {
        self.t_at(self.samples.len() - 1)
    }

    pub fn start(&self) -> &PhasePoint {
        &self.samples[0]
    }

    pub fn end(&self) -> &PhasePoint {
        self.samples.last().expect("nonempty path")
    }

    /// Index of the last sample at parameter <= t.
    fn base_index(&self, t: f64) -> usize {
        let k = ((t - self.t0) / self.h).floor() as isize;
        k.clamp(0, self.samples.len() as isize - 1) as usize
    }

    /// Phase point at arbitrary parameter via one RK4 sub-step from the
    /// nearest stored sample (to its left).
    pub fn at(&self, chart: &MetricChart, t: f64) -> Result<PhasePoint> {
        let k = self.base_index(t);
        let dt = t - self.t_at(k);
        if dt == 0.0 {
            return Ok(self.samples[k]);
        }
        rk4_step(chart, &self.samples[k], dt)
    }

    /// First crossing of `∂M`, if the path meets M.
    pub fn t_enter(&self) -> Option<f64> {
        self.m_crossings.first().copied()
    }

    /// Last crossing of `∂M`.
    pub fn t_exit(&self) -> Option<f64> {
        self.m_crossings.last().copied()
    }

    /// Total parameter length spent inside M (equals metric length at unit
    /// speed), summed over all components the path cuts through M.
    pub fn length_in_m(&self, chart: &MetricChart) -> f64 {
        let mut inside = chart.level_m(&self.samples[0].x) <= 0.0;
        let mut total = 0.0;
        let mut t_prev = self.t0;
        for &tc in &self.m_crossings {
            if inside {
                total += tc - t_prev;
            }
            t_prev = tc;
            inside = !inside;
        }
        if inside {
            total += self.t_end() - t_prev;
        }
        total
    }

    /// Copy of the path restricted to samples `0..=k_hi`.  Crossings beyond
    /// the cut are dropped; the escape flag clears because the restricted
    /// span is fully covered.
    pub fn truncated(&self, k_hi: usize) -> GeodesicPath {
        let k = k_hi.min(self.samples.len() - 1);
        let t_end = self.t_at(k);
        GeodesicPath {
            t0: self.t0,
            h: self.h,
            samples: self.samples[..=k].to_vec(),
            m_crossings: self
                .m_crossings
                .iter()
                .copied()
                .filter(|&t| t <= t_end)
                .collect(),
            m1_crossings: self
                .m1_crossings
                .iter()
                .copied()
                .filter(|&t| t <= t_end)
                .collect(),
            escaped: false,
            max_energy_drift: self.max_energy_drift,
        }
    }

    /// Both span endpoints lie strictly between `∂M` and `∂M1`.
    pub fn endpoints_in_shell(&self, chart: &MetricChart) -> bool {
        [self.start(), self.end()].iter().all(|p| {
            chart.level_m(&p.x) > 0.0 && chart.level_m1(&p.x) < 0.0
        })
    }
}

/// Trace the geodesic through `start` (taken at parameter 0) over
/// `t_span = (t_lo, t_hi)` with `t_lo <= 0 <= t_hi`.  The span is extended
/// outward to whole multiples of the step so samples stay uniform.
pub fn trace(
    chart: &MetricChart,
    start: &PhasePoint,
    t_span: (f64, f64),
    opts: &TraceOptions,
) -> Result<GeodesicPath> {
    let (t_lo, t_hi) = t_span;
    if t_lo > 0.0 || t_hi < 0.0 || !(t_hi - t_lo).is_finite() {
        return Err(GxError::InvalidArgument(format!(
            "trace span ({t_lo}, {t_hi}) must contain 0"
        )));
    }
    let e0 = start.energy(chart)?;
    if (e0 - 0.5).abs() > opts.tol_energy {
        return Err(GxError::InvalidArgument(format!(
            "start point is not unit-speed: E = {e0:.12}"
        )));
    }
    let h = opts.h_ode;
    let n_back = (-t_lo / h).ceil() as usize;
    let n_fwd = (t_hi / h).ceil() as usize;

    let mut escaped = false;
    // Backward half, reversed afterwards so samples ascend in t.
    let mut back = Vec::with_capacity(n_back);
    let mut p = *start;
    for _ in 0..n_back {
        p = rk4_step(chart, &p, -h)?;
        if !in_box(chart, &p.x) {
            escaped = true;
            break;
        }
        back.push(p);
    }
    let mut samples: Vec<PhasePoint> = back.into_iter().rev().collect();
    samples.push(*start);
    let t0 = -(h * (samples.len() - 1) as f64);
    p = *start;
    for _ in 0..n_fwd {
        p = rk4_step(chart, &p, h)?;
        if !in_box(chart, &p.x) {
            escaped = true;
            break;
        }
        samples.push(p);
    }

    let mut max_drift = 0.0f64;
    for s in &samples {
        let drift = (s.energy(chart)? - 0.5).abs();
        max_drift = max_drift.max(drift);
        if drift > opts.abort_factor * opts.tol_energy {
            return Err(GxError::EnergyDrift {
                drift,
                limit: opts.abort_factor * opts.tol_energy,
            });
        }
    }

    let mut path = GeodesicPath {
        t0,
        h,
        samples,
        m_crossings: Vec::new(),
        m1_crossings: Vec::new(),
        escaped,
        max_energy_drift: max_drift,
    };
    path.m_crossings = find_crossings(chart, &path, &|x| chart.level_m(x))?;
    path.m1_crossings = find_crossings(chart, &path, &|x| chart.level_m1(x))?;
    Ok(path)
}

/// Locate all sign changes of `level` along the path by bisection to
/// [`tolerances::TOL_CROSSING`] in the parameter.
fn find_crossings(
    chart: &MetricChart,
    path: &GeodesicPath,
    level: &dyn Fn(&Vec3) -> f64,
) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    let mut prev = level(&path.samples[0].x);
    for k in 1..path.samples.len() {
        let cur = level(&path.samples[k].x);
        if prev == 0.0 {
            out.push(path.t_at(k - 1));
        } else if prev * cur < 0.0 {
            let mut a = path.t_at(k - 1);
            let mut b = path.t_at(k);
            let mut fa = prev;
            while b - a > tolerances::TOL_CROSSING {
                let mid = 0.5 * (a + b);
                let fm = level(&path.at(chart, mid)?.x);
                if fm == 0.0 {
                    a = mid;
                    b = mid;
                } else if fa * fm < 0.0 {
                    b = mid;
                } else {
                    a = mid;
                    fa = fm;
                }
            }
            out.push(0.5 * (a + b));
        }
        prev = cur;
    }
    Ok(out)
}

/// Geodesic exponential map: follow the geodesic from `x` with initial
/// velocity `eta` for parameter `|eta|_g`.
pub fn exp_map(chart: &MetricChart, x: &Vec3, eta: &Vec3, opts: &TraceOptions) -> Result<Vec3> {
    let ev = chart.metric_at(x)?;
    let len = eta.dot(&(ev.g * eta)).sqrt();
    if len == 0.0 {
        return Ok(*x);
    }
    let start = PhasePoint::from_direction(chart, *x, *eta)?;
    let path = trace(chart, &start, (0.0, len), opts)?;
    if path.escaped && path.t_end() < len {
        return Err(GxError::IntegratorFailure(format!(
            "geodesic left the chart after t = {:.6} < |eta| = {len:.6}",
            path.t_end()
        )));
    }
    Ok(path.at(chart, len)?.x)
}

/// Jacobi fields along a path, integrated columnwise through the linearized
/// Hamiltonian flow.
///
/// `j[k]` and `dj[k]` hold the fields and their covariant derivatives at
/// sample `k`: column `c` is the field with initial value `j0` column `c`
/// and initial covariant derivative `dj0` column `c`.  Only the leading
/// `dim` rows/columns are meaningful.
#[derive(Debug, Clone)]
pub struct JacobiSolution {
    pub t0: f64,
    pub h: f64,
    pub cols: usize,
    pub j: Vec<Mat3>,
    pub dj: Vec<Mat3>,
    /// Raw linearized-flow state (position block, momentum block) per sample,
    /// kept so detectors can re-integrate sub-steps.
    var: Vec<(Mat3, Mat3)>,
}

/// Directional derivative of the Hamiltonian field at `p` along
/// `(dx, dxi)`, by central differences of the field itself.
fn flow_jacobian_apply(
    chart: &MetricChart,
    p: &PhasePoint,
    dx: &Vec3,
    dxi: &Vec3,
) -> Result<(Vec3, Vec3)> {
    let norm = (dx.norm_squared() + dxi.norm_squared()).sqrt();
    if norm == 0.0 {
        return Ok((Vec3::zeros(), Vec3::zeros()));
    }
    let eps = tolerances::FD_STEP_VARIATIONAL;
    let s = eps / norm;
    let pp = PhasePoint {
        x: p.x + s * dx,
        xi: p.xi + s * dxi,
    };
    let pm = PhasePoint {
        x: p.x - s * dx,
        xi: p.xi - s * dxi,
    };
    let (fpx, fpxi) = ham_rhs(chart, &pp)?;
    let (fmx, fmxi) = ham_rhs(chart, &pm)?;
    let scale = 1.0 / (2.0 * s);
    Ok(((fpx - fmx) * scale, (fpxi - fmxi) * scale))
}

struct VarState {
    p: PhasePoint,
    dx: Mat3,
    dxi: Mat3,
}

fn var_rhs(chart: &MetricChart, s: &VarState, cols: usize) -> Result<(Vec3, Vec3, Mat3, Mat3)> {
    let (fx, fxi) = ham_rhs(chart, &s.p)?;
    let mut ddx = Mat3::zeros();
    let mut ddxi = Mat3::zeros();
    for c in 0..cols {
        let (ax, axi) = flow_jacobian_apply(
            chart,
            &s.p,
            &Vec3::from(s.dx.column(c)),
            &Vec3::from(s.dxi.column(c)),
        )?;
        ddx.set_column(c, &ax);
        ddxi.set_column(c, &axi);
    }
    Ok((fx, fxi, ddx, ddxi))
}

fn var_rk4_step(chart: &MetricChart, s: &VarState, dt: f64, cols: usize) -> Result<VarState> {
    let k1 = var_rhs(chart, s, cols)?;
    let s2 = VarState {
        p: PhasePoint {
            x: s.p.x + 0.5 * dt * k1.0,
            xi: s.p.xi + 0.5 * dt * k1.1,
        },
        dx: s.dx + 0.5 * dt * k1.2,
        dxi: s.dxi + 0.5 * dt * k1.3,
    };
    let k2 = var_rhs(chart, &s2, cols)?;
    let s3 = VarState {
        p: PhasePoint {
            x: s.p.x + 0.5 * dt * k2.0,
            xi: s.p.xi + 0.5 * dt * k2.1,
        },
        dx: s.dx + 0.5 * dt * k2.2,
        dxi: s.dxi + 0.5 * dt * k2.3,
    };
    let k3 = var_rhs(chart, &s3, cols)?;
    let s4 = VarState {
        p: PhasePoint {
            x: s.p.x + dt * k3.0,
            xi: s.p.xi + dt * k3.1,
        },
        dx: s.dx + dt * k3.2,
        dxi: s.dxi + dt * k3.3,
    };
    let k4 = var_rhs(chart, &s4, cols)?;
    let w = dt / 6.0;
    Ok(VarState {
        p: PhasePoint {
            x: s.p.x + w * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0),
            xi: s.p.xi + w * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1),
        },
        dx: s.dx + w * (k1.2 + 2.0 * k2.2 + 2.0 * k3.2 + k4.2),
        dxi: s.dxi + w * (k1.3 + 2.0 * k2.3 + 2.0 * k3.3 + k4.3),
    })
}

/// Convert Jacobi initial data `(J, DJ)` at a phase point into linearized
/// flow initial data `(dx, dxi)`, and back at every sample.
///
/// With `v = g^{-1} xi` the velocity: `DJ^i = dJ^i/dt + Gamma^i_{jk} v^j J^k`
/// and `dJ^i/dt = d(g^{ij} xi_j) = (d_k g^{ij}) J^k xi_j + g^{ij} dxi_j`.
fn dj_from_var(
    chart: &MetricChart,
    p: &PhasePoint,
    dxcol: &Vec3,
    dxicol: &Vec3,
) -> Result<Vec3> {
    let ev = chart.metric_at(&p.x)?;
    let v = ev.g_inv * p.xi;
    let gam = chart.christoffel(&p.x)?;
    let dg = chart.metric_grad(&p.x);
    let mut out = ev.g_inv * dxicol;
    for i in 0..chart.dim {
        for j in 0..chart.dim {
            for k in 0..chart.dim {
                // d_k g^{ij} = -(g^{-1} d_k g g^{-1})_{ij}
                let dginv = -(ev.g_inv * dg[k] * ev.g_inv)[(i, j)];
                out[i] += dginv * dxcol[k] * p.xi[j];
            }
            out[i] += gam[i][(j, 0)] * v[j] * dxcol[0]
                + gam[i][(j, 1)] * v[j] * dxcol[1]
                + gam[i][(j, 2)] * v[j] * dxcol[2];
        }
    }
    Ok(out)
}

fn var_from_dj(chart: &MetricChart, p: &PhasePoint, j0: &Vec3, dj0: &Vec3) -> Result<Vec3> {
    // Invert dj_from_var for dxi given dx = j0.
    let ev = chart.metric_at(&p.x)?;
    let v = ev.g_inv * p.xi;
    let gam = chart.christoffel(&p.x)?;
    let dg = chart.metric_grad(&p.x);
    let mut rhs = *dj0;
    for i in 0..chart.dim {
        for j in 0..chart.dim {
            for k in 0..chart.dim {
                let dginv = -(ev.g_inv * dg[k] * ev.g_inv)[(i, j)];
                rhs[i] -= dginv * j0[k] * p.xi[j];
            }
            rhs[i] -= gam[i][(j, 0)] * v[j] * j0[0]
                + gam[i][(j, 1)] * v[j] * j0[1]
                + gam[i][(j, 2)] * v[j] * j0[2];
        }
    }
    Ok(ev.g * rhs)
}

/// Integrate Jacobi fields along `path` with initial values `j0` and initial
/// covariant derivatives `dj0` (one field per column, `cols` of them).
pub fn jacobi(
    chart: &MetricChart,
    path: &GeodesicPath,
    j0: &Mat3,
    dj0: &Mat3,
    cols: usize,
) -> Result<JacobiSolution> {
    let n = path.samples.len();
    let p0 = path.samples[0];
    let mut dxi0 = Mat3::zeros();
    for c in 0..cols {
        let dxi = var_from_dj(
            chart,
            &p0,
            &Vec3::from(j0.column(c)),
            &Vec3::from(dj0.column(c)),
        )?;
        dxi0.set_column(c, &dxi);
    }
    let mut state = VarState {
        p: p0,
        dx: *j0,
        dxi: dxi0,
    };
    let mut sol = JacobiSolution {
        t0: path.t0,
        h: path.h,
        cols,
        j: Vec::with_capacity(n),
        dj: Vec::with_capacity(n),
        var: Vec::with_capacity(n),
    };
    for k in 0..n {
        if k > 0 {
            state = var_rk4_step(chart, &state, path.h, cols)?;
            // Keep the base trajectory exactly on the traced samples.
            state.p = path.samples[k];
        }
        sol.var.push((state.dx, state.dxi));
        let mut jm = Mat3::zeros();
        let mut djm = Mat3::zeros();
        for c in 0..cols {
            jm.set_column(c, &Vec3::from(state.dx.column(c)));
            let dj = dj_from_var(
                chart,
                &state.p,
                &Vec3::from(state.dx.column(c)),
                &Vec3::from(state.dxi.column(c)),
            )?;
            djm.set_column(c, &dj);
        }
        sol.j.push(jm);
        sol.dj.push(djm);
    }
    Ok(sol)
}

/// Orthonormal (in g) frame of the orthogonal complement of the velocity at
/// a phase point.  Returns `dim - 1` vectors.  In two dimensions this is the
/// oriented rotation of the velocity, which varies smoothly along any path;
/// in three dimensions two fixed seed axes are projected, which is smooth as
/// long as the velocity stays away from the seeds (adequate for short
/// spans; detectors record dips as warnings rather than chasing frames).
fn orthogonal_frame(chart: &MetricChart, p: &PhasePoint, seeds: &[Vec3]) -> Result<Vec<Vec3>> {
    let ev = chart.metric_at(&p.x)?;
    let v = ev.g_inv * p.xi;
    if chart.dim == 2 {
        // E = sqrt(det g) g^{-1} (eps . v) has |E|_g = 1 and E _|_ v.
        let eta = Vec3::new(v[1], -v[0], 0.0);
        let e = ev.sqrt_det * (ev.g_inv * eta);
        return Ok(vec![e]);
    }
    let mut frame = Vec::new();
    for seed in seeds {
        let mut w = *seed;
        // Gram-Schmidt against v and the frame found so far.
        let vn = v / v.dot(&(ev.g * v)).sqrt();
        w -= vn * w.dot(&(ev.g * vn));
        for f in &frame {
            w -= f * w.dot(&(ev.g * f));
        }
        let n = w.dot(&(ev.g * w)).sqrt();
        if n > 1e-10 {
            frame.push(w / n);
        }
        if frame.len() == chart.dim - 1 {
            break;
        }
    }
    if frame.len() != chart.dim - 1 {
        return Err(GxError::IntegratorFailure(
            "could not build a transverse frame".into(),
        ));
    }
    Ok(frame)
}

fn pick_seeds(chart: &MetricChart, p: &PhasePoint) -> Result<Vec<Vec3>> {
    let ev = chart.metric_at(&p.x)?;
    let v = ev.g_inv * p.xi;
    let mut axes: Vec<Vec3> = (0..chart.dim)
        .map(|a| {
            let mut e = Vec3::zeros();
            e[a] = 1.0;
            e
        })
        .collect();
    axes.sort_by(|a, b| {
        let fa = (a.dot(&(ev.g * v))).abs();
        let fb = (b.dot(&(ev.g * v))).abs();
        fa.partial_cmp(&fb).unwrap()
    });
    Ok(axes)
}

/// Conjugate-point report for one path.
#[derive(Debug, Clone)]
pub struct ConjugateReport {
    /// Parameters conjugate to the path start, ascending.
    pub times: Vec<f64>,
    /// Parameters of near-zero dips of the restricted Jacobi determinant
    /// that did not change sign (possible near-conjugate points).
    pub warnings: Vec<f64>,
}

/// Fraction of the running determinant maximum below which a local dip is
/// recorded as a warning.
const DIP_WARN_FRACTION: f64 = 1e-3;

/// Find parameters conjugate to the start of `path`: zeros of the
/// determinant of the Jacobi matrix with `J(0) = 0`, `DJ(0) = Id` restricted
/// to the orthogonal complement of the velocity.  Zeros are located by sign
/// change plus bisection to `tol_conj`.
pub fn conjugate_points(
    chart: &MetricChart,
    path: &GeodesicPath,
    tol_conj: f64,
) -> Result<ConjugateReport> {
    let p0 = path.samples[0];
    let seeds = pick_seeds(chart, &p0)?;
    let frame0 = orthogonal_frame(chart, &p0, &seeds)?;
    let cols = chart.dim - 1;
    let mut dj0 = Mat3::zeros();
    for (c, f) in frame0.iter().enumerate() {
        dj0.set_column(c, f);
    }
    let sol = jacobi(chart, path, &Mat3::zeros(), &dj0, cols)?;

    // Restricted determinant at every sample.
    let mut dets = Vec::with_capacity(path.samples.len());
    for (k, p) in path.samples.iter().enumerate() {
        dets.push(restricted_det(chart, p, &sol.j[k], cols, &seeds)?);
    }

    let mut times = Vec::new();
    let mut warnings = Vec::new();
    let mut max_abs = 0.0f64;
    // det ~ t^(dim-1) near the start, so skip sample 0 (identically zero).
    for k in 1..dets.len() {
        let (da, db) = (dets[k - 1], dets[k]);
        max_abs = max_abs.max(da.abs());
        if k > 1 && da * db < 0.0 {
            // Bisect with re-integration from the stored state at k-1.
            let mut ta = path.t_at(k - 1);
            let mut tb = path.t_at(k);
            let base = VarState {
                p: path.samples[k - 1],
                dx: sol.var[k - 1].0,
                dxi: sol.var[k - 1].1,
            };
            let mut fa = da;
            while tb - ta > tol_conj {
                let tm = 0.5 * (ta + tb);
                let st = var_rk4_step(chart, &base, tm - path.t_at(k - 1), cols)?;
                let fm = restricted_det(chart, &st.p, &st.dx, cols, &seeds)?;
                if fa * fm <= 0.0 {
                    tb = tm;
                } else {
                    ta = tm;
                    fa = fm;
                }
            }
            times.push(0.5 * (ta + tb));
        } else if k > 2 && k + 1 < dets.len() {
            // Local dip: |det| minimum well below the running scale.
            let here = db.abs();
            if here < DIP_WARN_FRACTION * max_abs
                && here < da.abs()
                && here <= dets[k + 1].abs()
            {
                warnings.push(path.t_at(k));
            }
        }
    }
    Ok(ConjugateReport { times, warnings })
}

fn restricted_det(
    chart: &MetricChart,
    p: &PhasePoint,
    jmat: &Mat3,
    cols: usize,
    seeds: &[Vec3],
) -> Result<f64> {
    let frame = orthogonal_frame(chart, p, seeds)?;
    let ev = chart.metric_at(&p.x)?;
    match cols {
        1 => Ok(Vec3::from(jmat.column(0)).dot(&(ev.g * frame[0]))),
        2 => {
            let a = Vec3::from(jmat.column(0));
            let b = Vec3::from(jmat.column(1));
            let m00 = a.dot(&(ev.g * frame[0]));
            let m01 = a.dot(&(ev.g * frame[1]));
            let m10 = b.dot(&(ev.g * frame[0]));
            let m11 = b.dot(&(ev.g * frame[1]));
            Ok(m00 * m11 - m01 * m10)
        }
        _ => Err(GxError::DimensionMismatch {
            expected: 2,
            got: cols,
        }),
    }
}

/// Why a path fails to be simple.
#[derive(Debug, Clone, PartialEq)]
pub enum SimplicityFailure {
    StartInsideM,
    EndInsideM,
    StartOutsideM1,
    EndOutsideM1,
    EscapedChart,
    ConjugatePoints(Vec<f64>),
}

impl std::fmt::Display for SimplicityFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SimplicityFailure::StartInsideM => write!(f, "start endpoint lies in M"),
            SimplicityFailure::EndInsideM => write!(f, "end endpoint lies in M"),
            SimplicityFailure::StartOutsideM1 => write!(f, "start endpoint lies outside M1"),
            SimplicityFailure::EndOutsideM1 => write!(f, "end endpoint lies outside M1"),
            SimplicityFailure::EscapedChart => write!(f, "path escaped the chart box"),
            SimplicityFailure::ConjugatePoints(ts) => {
                write!(f, "conjugate points at t = {:?}", ts)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimplicityReport {
    pub simple: bool,
    pub failures: Vec<SimplicityFailure>,
    pub conjugate: ConjugateReport,
}

/// A path is simple when both span endpoints lie strictly between `∂M` and
/// `∂M1` and no parameter is conjugate to the start.
pub fn is_simple(
    chart: &MetricChart,
    path: &GeodesicPath,
    tol_conj: f64,
) -> Result<SimplicityReport> {
    let mut failures = Vec::new();
    if path.escaped {
        failures.push(SimplicityFailure::EscapedChart);
    }
    let s = path.start();
    let e = path.end();
    if chart.level_m(&s.x) <= 0.0 {
        failures.push(SimplicityFailure::StartInsideM);
    }
    if chart.level_m1(&s.x) >= 0.0 {
        failures.push(SimplicityFailure::StartOutsideM1);
    }
    if chart.level_m(&e.x) <= 0.0 {
        failures.push(SimplicityFailure::EndInsideM);
    }
    if chart.level_m1(&e.x) >= 0.0 {
        failures.push(SimplicityFailure::EndOutsideM1);
    }
    let conjugate = conjugate_points(chart, path, tol_conj)?;
    if !conjugate.times.is_empty() {
        failures.push(SimplicityFailure::ConjugatePoints(conjugate.times.clone()));
    }
    Ok(SimplicityReport {
        simple: failures.is_empty(),
        failures,
        conjugate,
    })
}
