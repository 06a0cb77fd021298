//! Discrete ray transform of tensor fields along a traced geodesic family.
//!
//! Each active ray contributes one data row: the tapered line integral of
//! the field contracted with the ray's velocity.  Rows are assembled into a
//! sparse matrix `A` so that the adjoint in the tensor mass inner product,
//! `A* = M_T^{-1} A^T W` with `W = diag(mu)`, and the normal operator
//! `A* A` are exact linear-algebra identities of the discretization.  For
//! flat charts [`kernel_normal`] evaluates the normal operator a second,
//! independent way, as a direct quadrature of its geometric kernel.

use std::collections::HashMap;
use std::f64::consts::TAU;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{GxError, Result};
use crate::family::{DirWindow, FamilyChart, GeodesicFamily, Ray, SurfaceSpec};
use crate::grid::{grid_gradient, Grid, Vec3};
use crate::manifold::{
    comp_count, comp_pairs, BoundaryNormalFrame, MetricChart, MetricEval, Support,
    SymmetricTensorField, TensorValue,
};
use crate::tolerances;

/// Stack the stored component planes into one DOF vector, component-major:
/// the DOF of component `c` at node `k` is `c * n_nodes + k`.
pub fn field_to_vec(field: &SymmetricTensorField) -> Vec<f64> {
    field.comps.concat()
}

/// Inverse of [`field_to_vec`].
pub fn vec_to_field(
    order: u8,
    grid: &Grid,
    support: Support,
    dof: &[f64],
) -> Result<SymmetricTensorField> {
    let nc = comp_count(order, grid.dim);
    let n = grid.len();
    if dof.len() != nc * n {
        return Err(GxError::DimensionMismatch {
            expected: nc * n,
            got: dof.len(),
        });
    }
    let mut field = SymmetricTensorField::zeros(order, grid.clone(), support);
    for c in 0..nc {
        field.comps[c].copy_from_slice(&dof[c * n..(c + 1) * n]);
    }
    Ok(field)
}

/// Compressed sparse row matrix; rows are stored in ascending column order.
#[derive(Debug, Clone)]
pub struct CsrMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn from_rows(n_cols: usize, rows: &[Vec<(usize, f64)>]) -> CsrMatrix {
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        let nnz: usize = rows.iter().map(|r| r.len()).sum();
        let mut indices = Vec::with_capacity(nnz);
        let mut values = Vec::with_capacity(nnz);
        indptr.push(0);
        for row in rows {
            for &(j, v) in row {
                indices.push(j);
                values.push(v);
            }
            indptr.push(indices.len());
        }
        CsrMatrix {
            n_rows: rows.len(),
            n_cols,
            indptr,
            indices,
            values,
        }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let (lo, hi) = (self.indptr[i], self.indptr[i + 1]);
        (&self.indices[lo..hi], &self.values[lo..hi])
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n_cols, "matvec operand length");
        (0..self.n_rows)
            .map(|i| {
                let (idx, val) = self.row(i);
                idx.iter().zip(val).map(|(&j, &v)| v * x[j]).sum()
            })
            .collect()
    }

    pub fn matvec_transpose(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.n_rows, "matvec_transpose operand length");
        let mut out = vec![0.0; self.n_cols];
        for i in 0..self.n_rows {
            let yi = y[i];
            if yi == 0.0 {
                continue;
            }
            let (idx, val) = self.row(i);
            for (&j, &v) in idx.iter().zip(val) {
                out[j] += v * yi;
            }
        }
        out
    }
}

/// Index pairs a stored component stands for once the symmetric tensor is
/// written out in full indices.
fn sym_expand(i: usize, j: usize) -> Vec<(usize, usize)> {
    if i == j {
        vec![(i, i)]
    } else {
        vec![(i, j), (j, i)]
    }
}

/// Gram matrix of the pointwise tensor inner product `<f, h>_g` on stored
/// components, with symmetric-index multiplicities expanded.
pub(crate) fn metric_block(order: u8, dim: usize, ev: &MetricEval) -> DMatrix<f64> {
    let pairs = comp_pairs(order, dim);
    let nc = pairs.len();
    let mut b = DMatrix::<f64>::zeros(nc, nc);
    for (c, &(i, j)) in pairs.iter().enumerate() {
        for (c2, &(k, l)) in pairs.iter().enumerate() {
            b[(c, c2)] = match order {
                0 => 1.0,
                1 => ev.g_inv[(i, k)],
                2 => {
                    let mut t = 0.0;
                    for &(ii, jj) in &sym_expand(i, j) {
                        for &(kk, ll) in &sym_expand(k, l) {
                            t += ev.g_inv[(ii, kk)] * ev.g_inv[(jj, ll)];
                        }
                    }
                    t
                }
                _ => unreachable!("orders above 2 are rejected by comp_count"),
            };
        }
    }
    b
}

/// Node-diagonal mass matrix of the pointwise tensor inner product
/// `<f, h>_g sqrt(det g)` under trapezoidal node weights.  Blocks couple the
/// stored components of one node; different nodes never couple.
pub struct TensorMass {
    pub order: u8,
    pub nc: usize,
    n_nodes: usize,
    blocks: Vec<f64>,
    inv_blocks: Vec<f64>,
}

impl TensorMass {
    pub fn build(chart: &MetricChart, grid: &Grid, order: u8) -> Result<TensorMass> {
        let nc = comp_count(order, grid.dim);
        let n_nodes = grid.len();
        let mut blocks = vec![0.0; nc * nc * n_nodes];
        let mut inv_blocks = vec![0.0; nc * nc * n_nodes];
        for (node, x) in grid.iter_nodes() {
            let ev = chart.metric_at(&x)?;
            let wv = grid.node_weight(node) * ev.sqrt_det;
            let b = metric_block(order, grid.dim, &ev) * wv;
            let inv = b.clone().try_inverse().ok_or(GxError::DegenerateMetric {
                x: x[0],
                y: x[1],
                z: x[2],
            })?;
            for c in 0..nc {
                for c2 in 0..nc {
                    blocks[(node * nc + c) * nc + c2] = b[(c, c2)];
                    inv_blocks[(node * nc + c) * nc + c2] = inv[(c, c2)];
                }
            }
        }
        Ok(TensorMass {
            order,
            nc,
            n_nodes,
            blocks,
            inv_blocks,
        })
    }

    pub fn dof_len(&self) -> usize {
        self.nc * self.n_nodes
    }

    fn mul(&self, blocks: &[f64], v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.dof_len(), "mass operand length");
        let (nc, n) = (self.nc, self.n_nodes);
        let mut out = vec![0.0; v.len()];
        for node in 0..n {
            let b = &blocks[node * nc * nc..(node + 1) * nc * nc];
            for c in 0..nc {
                let mut s = 0.0;
                for c2 in 0..nc {
                    s += b[c * nc + c2] * v[c2 * n + node];
                }
                out[c * n + node] = s;
            }
        }
        out
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.mul(&self.blocks, v)
    }

    pub fn apply_inv(&self, v: &[f64]) -> Vec<f64> {
        self.mul(&self.inv_blocks, v)
    }

    /// `a^T M b`.
    pub fn inner(&self, a: &[f64], b: &[f64]) -> f64 {
        let mb = self.apply(b);
        a.iter().zip(&mb).map(|(x, y)| x * y).sum()
    }

    pub fn norm(&self, a: &[f64]) -> f64 {
        self.inner(a, a).max(0.0).sqrt()
    }
}

fn monomial(order: u8, v: &Vec3, i: usize, j: usize, mult: f64) -> f64 {
    match order {
        0 => 1.0,
        1 => v[i],
        2 => mult * v[i] * v[j],
        _ => unreachable!("orders above 2 are rejected by comp_count"),
    }
}

/// Quadrature nodes `(x, xi, w)` of one ray's data interval: composite
/// trapezoid over the tracing samples, closed off exactly at the bisected
/// boundary crossings so each inside-M sub-interval is integrated end to
/// end.  Without the crossing endpoints the quadrature would drop an
/// O(h_ode) sliver wherever the integrand does not vanish on the rim,
/// which is first order and never averages out.  Crossing states are
/// interpolated between the bracketing samples and nudged just inside M
/// so interpolation of M-supported fields keeps them.  Weights carry the
/// segment lengths; the taper is left to the caller.
fn quad_nodes(chart: &MetricChart, ray: &Ray) -> Vec<(Vec3, Vec3, f64)> {
    let Some(k_hi) = ray.k_hi else {
        return Vec::new();
    };
    if !(ray.alpha > 0.0) || k_hi == 0 {
        return Vec::new();
    }
    let h = ray.path.h;
    let t_hi = k_hi as f64 * h;
    struct Node {
        t: f64,
        x: Vec3,
        xi: Vec3,
        w: f64,
    }
    let state_at = |t: f64| -> (Vec3, Vec3) {
        let kf = (t / h).floor().clamp(0.0, (k_hi - 1) as f64);
        let k = kf as usize;
        let lam = (t - kf * h) / h;
        let (a, b) = (&ray.path.samples[k], &ray.path.samples[k + 1]);
        (a.x + (b.x - a.x) * lam, a.xi + (b.xi - a.xi) * lam)
    };
    let mut nodes: Vec<Node> = (0..=k_hi)
        .map(|k| {
            let p = &ray.path.samples[k];
            Node {
                t: k as f64 * h,
                x: p.x,
                xi: p.xi,
                w: 0.0,
            }
        })
        .collect();
    for &tc in &ray.path.m_crossings {
        if tc <= 0.0 || tc >= t_hi {
            continue;
        }
        let (x, xi) = state_at(tc);
        nodes.push(Node { t: tc, x, xi, w: 0.0 });
    }
    nodes.sort_by(|a, b| a.t.partial_cmp(&b.t).expect("finite times"));
    for s in 0..nodes.len() - 1 {
        let seg = nodes[s + 1].t - nodes[s].t;
        if seg <= 1e-12 * h {
            continue;
        }
        let mid = (nodes[s].x + nodes[s + 1].x) * 0.5;
        if chart.level_m(&mid) > 0.0 {
            continue;
        }
        nodes[s].w += 0.5 * seg;
        nodes[s + 1].w += 0.5 * seg;
    }
    // Pull weighted endpoints that bisection left a hair outside M toward
    // their inside neighbour until the support mask accepts them.
    let mut out: Vec<(Vec3, Vec3, f64)> = Vec::with_capacity(nodes.len());
    for s in 0..nodes.len() {
        let n = &nodes[s];
        if n.w == 0.0 {
            continue;
        }
        if chart.level_m(&n.x) <= 0.0 {
            out.push((n.x, n.xi, n.w));
            continue;
        }
        let inside = [s.wrapping_sub(1), s + 1]
            .into_iter()
            .filter_map(|j| nodes.get(j))
            .find(|m| chart.level_m(&m.x) <= 0.0);
        let Some(m) = inside else {
            continue;
        };
        let mut eps = 1e-9;
        while eps <= 1e-2 {
            let x = n.x + (m.x - n.x) * eps;
            if chart.level_m(&x) <= 0.0 {
                out.push((x, n.xi + (m.xi - n.xi) * eps, n.w));
                break;
            }
            eps *= 10.0;
        }
    }
    out
}

/// One matrix row: the crossing-aware trapezoidal quadrature of the
/// tapered transform over the ray's data interval, expressed on
/// interpolation stencils.  Only the inside-M part contributes, matching
/// evaluation of M-supported fields by extension with zero.
fn ray_row(
    chart: &MetricChart,
    grid: &Grid,
    order: u8,
    ray: &Ray,
) -> Result<Vec<(usize, f64)>> {
    let n_nodes = grid.len();
    let nc = comp_count(order, grid.dim);
    let pairs = comp_pairs(order, grid.dim);
    let mut acc: HashMap<usize, f64> = HashMap::new();
    for (x, xi, w) in quad_nodes(chart, ray) {
        let ev = chart.metric_at(&x)?;
        let v = ev.g_inv * xi;
        let w = ray.alpha * w;
        let st = grid.stencil(&x)?;
        let mut coef = [0.0f64; 6];
        for (c, &(i, j)) in pairs.iter().enumerate() {
            coef[c] = monomial(order, &v, i, j, if i == j { 1.0 } else { 2.0 });
        }
        st.for_each(|node, sw| {
            for (c, &cf) in coef.iter().enumerate().take(nc) {
                if cf != 0.0 {
                    *acc.entry(c * n_nodes + node).or_insert(0.0) += w * sw * cf;
                }
            }
        });
    }
    let mut row: Vec<(usize, f64)> = acc.into_iter().collect();
    row.sort_unstable_by_key(|e| e.0);
    Ok(row)
}

/// The assembled transform of one tensor order on one grid.  Row order
/// follows the family's ray order; inactive rays keep an empty row so data
/// vectors stay aligned with the family.
pub struct TransformMatrix {
    pub order: u8,
    pub grid: Grid,
    pub a: CsrMatrix,
    /// Per-ray quadrature weights of the data inner product.
    pub mu: Vec<f64>,
}

impl TransformMatrix {
    pub fn assemble(
        chart: &MetricChart,
        grid: &Grid,
        order: u8,
        family: &GeodesicFamily,
    ) -> Result<TransformMatrix> {
        let nc = comp_count(order, grid.dim);
        let n_cols = nc * grid.len();
        let rays: Vec<&Ray> = family.rays().collect();
        let rows = rays
            .par_iter()
            .map(|r| ray_row(chart, grid, order, r))
            .collect::<Result<Vec<_>>>()?;
        let mu = rays.iter().map(|r| r.mu).collect();
        Ok(TransformMatrix {
            order,
            grid: grid.clone(),
            a: CsrMatrix::from_rows(n_cols, &rows),
            mu,
        })
    }

    pub fn n_rays(&self) -> usize {
        self.a.n_rows
    }

    pub fn dof_len(&self) -> usize {
        self.a.n_cols
    }

    /// `A f`: one line integral per ray.
    pub fn forward(&self, dof: &[f64]) -> Vec<f64> {
        self.a.matvec(dof)
    }

    /// `A* d = M_T^{-1} A^T W d`, the adjoint in the tensor mass inner
    /// product on fields and the mu-weighted inner product on data.
    pub fn adjoint(&self, mass: &TensorMass, data: &[f64]) -> Vec<f64> {
        assert_eq!(data.len(), self.a.n_rows, "data length");
        assert_eq!(mass.dof_len(), self.a.n_cols, "mass size");
        let wd: Vec<f64> = data.iter().zip(&self.mu).map(|(d, m)| d * m).collect();
        mass.apply_inv(&self.a.matvec_transpose(&wd))
    }

    /// `A* A f`.
    pub fn normal(&self, mass: &TensorMass, dof: &[f64]) -> Vec<f64> {
        self.adjoint(mass, &self.forward(dof))
    }

    /// mu-weighted data inner product.
    pub fn data_inner(&self, a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .zip(&self.mu)
            .map(|((x, y), m)| m * x * y)
            .sum()
    }
}

/// Direct line quadrature of the transform through field interpolation,
/// over the inside-M part of each ray.  Numerically identical to the
/// matrix route up to float reassociation.
pub fn xray(
    chart: &MetricChart,
    family: &GeodesicFamily,
    field: &SymmetricTensorField,
) -> Result<Vec<f64>> {
    let rays: Vec<&Ray> = family.rays().collect();
    rays.par_iter()
        .map(|ray| {
            let mut acc = 0.0;
            for (x, xi, w) in quad_nodes(chart, ray) {
                let val = field.eval(chart, &x)?;
                let ev = chart.metric_at(&x)?;
                let v = ev.g_inv * xi;
                acc += w * val.contract(&v);
            }
            Ok(ray.alpha * acc)
        })
        .collect()
}

/// Squared taper weight of the (at most two) family rays whose unoriented
/// line passes `x` with direction `u`, for a circle surface on a flat chart.
/// The circle is crossed entering at the first hit travelling `+u` and at
/// the second travelling `-u`; both orientations carry data for the line.
pub(crate) fn circle_alpha_sharp_sq(fc: &FamilyChart, x: &Vec3, u: &Vec3) -> f64 {
    let SurfaceSpec::Circle { center, radius, .. } = &fc.spec.surface else {
        return 0.0;
    };
    let d = Vec3::new(x[0] - center[0], x[1] - center[1], 0.0);
    let b = d[0] * u[0] + d[1] * u[1];
    let c0 = d[0] * d[0] + d[1] * d[1] - radius * radius;
    let disc = b * b - c0;
    if disc <= 0.0 {
        return 0.0;
    }
    let sq = disc.sqrt();
    let mut total = 0.0;
    for (t, sgn) in [(-b - sq, 1.0), (-b + sq, -1.0)] {
        let rad = Vec3::new(d[0] + t * u[0], d[1] + t * u[1], 0.0);
        let s = rad[1].atan2(rad[0]);
        // Inward normal and counterclockwise tangent of the circle; matches
        // the frame the family was built with when M sits inside the circle.
        let nu = -rad / *radius;
        let tau = Vec3::new(-s.sin(), s.cos(), 0.0);
        let th = Vec3::new(sgn * u[0], sgn * u[1], 0.0);
        let psi = th.dot(&tau).atan2(th.dot(&nu));
        let a = fc.alpha_continuous(&[s, 0.0], &[psi, 0.0]);
        total += a * a;
    }
    total
}

/// Check that a chart's metric is the identity on every grid node.
fn require_euclidean(chart: &MetricChart, grid: &Grid) -> Result<()> {
    for (_, x) in grid.iter_nodes() {
        let ev = chart.metric_at(&x)?;
        for i in 0..grid.dim {
            for j in 0..grid.dim {
                let want = if i == j { 1.0 } else { 0.0 };
                if (ev.g[(i, j)] - want).abs() > 1e-12 {
                    return Err(GxError::Unsupported(
                        "kernel quadrature of the normal operator needs a flat chart".into(),
                    ));
                }
            }
        }
    }
    Ok(())
}

/// Normal operator by direct kernel quadrature on a flat 2-d chart with a
/// circle-fan family:
///
/// `N f (x) = int |a#(x,u)|^2 (f(y) : u^m) u^{(x) m} / |y - x| dy`
///
/// with `u = (y - x)/|y - x|` and `|a#|^2` the squared taper summed over the
/// two family rays of the line through `x` and `y`.  Far nodes use node
/// weights; the node's own cell is integrated exactly in polar form, the
/// radial integral over the square cell being `R(phi) = (h/2)/max(|cos
/// phi|, |sin phi|)`.  Independent of the assembled matrix; used to
/// cross-check the composition `A* A`.
pub fn kernel_normal(
    chart: &MetricChart,
    fc: &FamilyChart,
    field: &SymmetricTensorField,
) -> Result<SymmetricTensorField> {
    if chart.dim != 2 {
        return Err(GxError::Unsupported(
            "kernel quadrature of the normal operator is 2-d only".into(),
        ));
    }
    if !matches!(fc.spec.surface, SurfaceSpec::Circle { .. })
        || !matches!(fc.spec.window, DirWindow::Fan { .. })
    {
        return Err(GxError::Unsupported(
            "kernel quadrature needs a circle surface with a fan window".into(),
        ));
    }
    let grid = field.grid.clone();
    let h = grid.spacing(0);
    if (grid.spacing(1) - h).abs() > 1e-12 * h {
        return Err(GxError::Unsupported(
            "kernel quadrature needs square grid cells".into(),
        ));
    }
    require_euclidean(chart, &grid)?;

    let order = field.order;
    let nc = comp_count(order, 2);
    let pairs = comp_pairs(order, 2);

    // Source nodes, pre-masked by the field's support.
    let mut src: Vec<(Vec3, f64, TensorValue)> = Vec::new();
    for (node, y) in grid.iter_nodes() {
        let masked = match field.support {
            Support::M => chart.level_m(&y) > 0.0,
            Support::M1 => chart.level_m1(&y) > 0.0,
            Support::Box => false,
        };
        if masked {
            continue;
        }
        let mut val = TensorValue::zero(order, 2);
        for c in 0..nc {
            val.comps[c] = field.comps[c][node];
        }
        src.push((y, grid.node_weight(node), val));
    }

    let nq = tolerances::KERNEL_ANGLE_NODES;
    let dphi = TAU / nq as f64;
    let per_node: Vec<[f64; 6]> = (0..grid.len())
        .into_par_iter()
        .map(|node| {
            let x = grid.node_flat(node);
            let mut acc = [0.0f64; 6];
            if chart.level_m(&x) > 0.0 {
                return acc;
            }
            for (y, wy, val) in &src {
                let dx = *y - x;
                let r = dx[0].hypot(dx[1]);
                if r == 0.0 {
                    continue;
                }
                let u = dx / r;
                let a2 = circle_alpha_sharp_sq(fc, &x, &u);
                if a2 == 0.0 {
                    continue;
                }
                let common = wy * a2 * val.contract(&u) / r;
                for (c, &(i, j)) in pairs.iter().enumerate() {
                    acc[c] += common * monomial(order, &u, i, j, 1.0);
                }
            }
            // The node's own cell.
            let mut fx = TensorValue::zero(order, 2);
            for c in 0..nc {
                fx.comps[c] = field.comps[c][node];
            }
            for q in 0..nq {
                let phi = (q as f64 + 0.5) * dphi;
                let u = Vec3::new(phi.cos(), phi.sin(), 0.0);
                let rphi = 0.5 * h / u[0].abs().max(u[1].abs());
                let a2 = circle_alpha_sharp_sq(fc, &x, &u);
                if a2 == 0.0 {
                    continue;
                }
                let common = a2 * fx.contract(&u) * rphi * dphi;
                for (c, &(i, j)) in pairs.iter().enumerate() {
                    acc[c] += common * monomial(order, &u, i, j, 1.0);
                }
            }
            acc
        })
        .collect();

    let mut out = SymmetricTensorField::zeros(order, grid, Support::Box);
    for (node, acc) in per_node.iter().enumerate() {
        for c in 0..nc {
            out.comps[c][node] = acc[c];
        }
    }
    Ok(out)
}

/// Grid Sobolev norms used by the stability estimates: a first-order norm
/// over M1, and second-order variants that integrate all first derivatives
/// over a two-sided boundary collar V around `∂M`.  Derivatives are plain
/// coordinate differences; volumes carry `sqrt(det g)`.
pub struct SobolevNorms {
    grid: Grid,
    node_w: Vec<f64>,
    mults: Vec<f64>,
    m1_sel: Vec<bool>,
    collar_sel: Vec<bool>,
    has_collar: bool,
}

impl SobolevNorms {
    pub fn build(
        chart: &MetricChart,
        grid: &Grid,
        order: u8,
        frame: Option<&BoundaryNormalFrame>,
    ) -> Result<SobolevNorms> {
        let mut node_w = Vec::with_capacity(grid.len());
        let mut m1_sel = Vec::with_capacity(grid.len());
        let mut collar_sel = Vec::with_capacity(grid.len());
        for (node, x) in grid.iter_nodes() {
            let ev = chart.metric_at(&x)?;
            node_w.push(grid.node_weight(node) * ev.sqrt_det);
            m1_sel.push(chart.level_m1(&x) <= 0.0);
            collar_sel.push(match frame {
                Some(fr) => fr.signed_depth(&x).abs() <= fr.w_collar,
                None => false,
            });
        }
        let mults = comp_pairs(order, grid.dim)
            .iter()
            .map(|&(i, j)| if i == j { 1.0 } else { 2.0 })
            .collect();
        Ok(SobolevNorms {
            grid: grid.clone(),
            node_w,
            mults,
            m1_sel,
            collar_sel,
            has_collar: frame.is_some(),
        })
    }

    /// `sum_c mult_c int_sel (f_c^2 + sum_a (d_a f_c)^2)`.
    fn h1_sq_planes(&self, planes: &[Vec<f64>], sel: &[bool]) -> f64 {
        let mut acc = 0.0;
        for (c, p) in planes.iter().enumerate() {
            let grads = grid_gradient(&self.grid, p);
            let mult = self.mults[c];
            for (f, &keep) in sel.iter().enumerate() {
                if !keep {
                    continue;
                }
                let mut s = p[f] * p[f];
                for g in &grads {
                    s += g[f] * g[f];
                }
                acc += mult * self.node_w[f] * s;
            }
        }
        acc
    }

    fn check(&self, field: &SymmetricTensorField) -> Result<()> {
        if field.grid != self.grid || field.n_comps() != self.mults.len() {
            return Err(GxError::GridMismatch(
                "field does not match the norm's grid or order".into(),
            ));
        }
        Ok(())
    }

    /// Squared H^1 norm over M1.
    pub fn h1_m1_sq(&self, field: &SymmetricTensorField) -> Result<f64> {
        self.check(field)?;
        Ok(self.h1_sq_planes(&field.comps, &self.m1_sel))
    }

    /// Per-axis derivative fields and the base field, reduced to squared H^1
    /// norms: derivatives over the collar, the field itself over M1.
    fn h2_parts(&self, field: &SymmetricTensorField) -> Result<Vec<f64>> {
        self.check(field)?;
        if !self.has_collar {
            return Err(GxError::Unsupported(
                "second-order norm needs a boundary collar frame".into(),
            ));
        }
        let mut parts = Vec::with_capacity(self.grid.dim + 1);
        for a in 0..self.grid.dim {
            let dplanes: Vec<Vec<f64>> = field
                .comps
                .iter()
                .map(|p| grid_gradient(&self.grid, p).swap_remove(a))
                .collect();
            parts.push(self.h1_sq_planes(&dplanes, &self.collar_sel));
        }
        parts.push(self.h1_sq_planes(&field.comps, &self.m1_sel));
        Ok(parts)
    }

    /// Sum of the part norms (not squared): the literal reading of the
    /// estimate's right-hand side.
    pub fn collar_h2_literal(&self, field: &SymmetricTensorField) -> Result<f64> {
        Ok(self
            .h2_parts(field)?
            .iter()
            .map(|s| s.max(0.0).sqrt())
            .sum())
    }

    /// Sum of squared part norms: the Hilbertian variant used where an inner
    /// product is needed.
    pub fn collar_h2_hilbert_sq(&self, field: &SymmetricTensorField) -> Result<f64> {
        Ok(self.h2_parts(field)?.iter().sum())
    }

    /// Appends the H^1-part embedding of `planes` over `sel`: values and
    /// derivatives at kept nodes scaled by `sqrt(mult * w)`, so a plain dot
    /// product of two embeddings is the part's inner product.
    fn h1_embedding(&self, planes: &[Vec<f64>], sel: &[bool], out: &mut Vec<f64>) {
        for (c, p) in planes.iter().enumerate() {
            let grads = grid_gradient(&self.grid, p);
            let mult = self.mults[c];
            for (f, &keep) in sel.iter().enumerate() {
                if !keep {
                    continue;
                }
                let s = (mult * self.node_w[f]).max(0.0).sqrt();
                out.push(s * p[f]);
                for g in &grads {
                    out.push(s * g[f]);
                }
            }
        }
    }

    fn h2_embedding(&self, field: &SymmetricTensorField) -> Result<Vec<f64>> {
        self.check(field)?;
        if !self.has_collar {
            return Err(GxError::Unsupported(
                "second-order norm needs a boundary collar frame".into(),
            ));
        }
        let mut out = Vec::new();
        for a in 0..self.grid.dim {
            let dplanes: Vec<Vec<f64>> = field
                .comps
                .iter()
                .map(|p| grid_gradient(&self.grid, p).swap_remove(a))
                .collect();
            self.h1_embedding(&dplanes, &self.collar_sel, &mut out);
        }
        self.h1_embedding(&field.comps, &self.m1_sel, &mut out);
        Ok(out)
    }

    /// Gram matrix of the Hilbertian collar norm over the given fields.
    /// Diagonal entries match [`Self::collar_h2_hilbert_sq`].
    pub fn collar_h2_hilbert_gram(&self, fields: &[SymmetricTensorField]) -> Result<DMatrix<f64>> {
        let embs = fields
            .par_iter()
            .map(|f| self.h2_embedding(f))
            .collect::<Result<Vec<_>>>()?;
        Ok(gram_of(&embs))
    }

    /// Gram matrix of the M1 first-order norm over the given fields.
    pub fn h1_m1_gram(&self, fields: &[SymmetricTensorField]) -> Result<DMatrix<f64>> {
        let embs = fields
            .par_iter()
            .map(|f| {
                self.check(f)?;
                let mut out = Vec::new();
                self.h1_embedding(&f.comps, &self.m1_sel, &mut out);
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(gram_of(&embs))
    }
}

fn gram_of(embs: &[Vec<f64>]) -> DMatrix<f64> {
    let k = embs.len();
    let mut g = DMatrix::zeros(k, k);
    for i in 0..k {
        for j in i..k {
            let d: f64 = embs[i].iter().zip(&embs[j]).map(|(a, b)| a * b).sum();
            g[(i, j)] = d;
            g[(j, i)] = d;
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::family::FamilyChartSpec;
    use crate::geodesics::TraceOptions;
    use crate::manifold::{boundary_frame, euclidean_disc};
    use crate::tolerances::default_h_ode;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn disc_family(chart: &MetricChart, n_s: usize, n_psi: usize, h_ode: f64) -> GeodesicFamily {
        let spec = FamilyChartSpec {
            label: "test_fan".into(),
            surface: SurfaceSpec::Circle {
                center: [0.0, 0.0],
                radius: 1.1,
                n_s,
                arc: None,
            },
            window: DirWindow::Fan {
                half_angle: (1.35 * (1.0 / 1.1_f64).asin()).min(0.45 * std::f64::consts::PI),
                n_psi,
            },
            t_max: 4.75,
        };
        GeodesicFamily::build(chart, vec![spec], &TraceOptions::with_h(h_ode)).unwrap()
    }

    fn smooth_m2_field(grid: &Grid) -> SymmetricTensorField {
        SymmetricTensorField::from_fn(2, grid.clone(), Support::M, |x, out| {
            let r2 = x[0] * x[0] + x[1] * x[1];
            let bump = (1.0 - r2).max(0.0);
            out[0] = bump * bump * (1.0 + 0.3 * x[1]);
            out[1] = 0.5 * bump * bump * x[0];
            out[2] = bump * bump * (1.0 - 0.2 * x[0] * x[1]);
        })
    }

    #[test]
    fn mass_inner_of_metric_is_twice_volume() {
        let chart = euclidean_disc();
        let grid = chart.grid(17).unwrap();
        let mass = TensorMass::build(&chart, &grid, 2).unwrap();
        let field = SymmetricTensorField::from_fn(2, grid.clone(), Support::Box, |_, out| {
            out[0] = 1.0;
            out[1] = 0.0;
            out[2] = 1.0;
        });
        let dof = field_to_vec(&field);
        let area = (chart.bbox.max[0] - chart.bbox.min[0]) * (chart.bbox.max[1] - chart.bbox.min[1]);
        let got = mass.inner(&dof, &dof);
        assert!(
            (got - 2.0 * area).abs() < 1e-12 * area,
            "got {got}, want {}",
            2.0 * area
        );
    }

    #[test]
    fn matrix_and_direct_integration_agree() {
        let chart = euclidean_disc();
        let grid = chart.grid(17).unwrap();
        let family = disc_family(&chart, 16, 11, default_h_ode(Some(grid.min_spacing())));
        assert!(family.n_active() > 0);
        let field = smooth_m2_field(&grid);
        let tm = TransformMatrix::assemble(&chart, &grid, 2, &family).unwrap();
        let by_matrix = tm.forward(&field_to_vec(&field));
        let direct = xray(&chart, &family, &field).unwrap();
        let scale = direct.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for (a, b) in by_matrix.iter().zip(&direct) {
            assert!((a - b).abs() <= 1e-12 * scale, "matrix {a} vs direct {b}");
        }
    }

    #[test]
    fn adjoint_pairing_matches_mass_inner() {
        let chart = euclidean_disc();
        let grid = chart.grid(12).unwrap();
        let family = disc_family(&chart, 10, 7, default_h_ode(Some(grid.min_spacing())));
        let tm = TransformMatrix::assemble(&chart, &grid, 2, &family).unwrap();
        let mass = TensorMass::build(&chart, &grid, 2).unwrap();
        let n_dof = tm.dof_len();
        let n_data = tm.n_rays();
        proptest!(ProptestConfig::with_cases(16), |(seed in any::<u64>())| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f: Vec<f64> = (0..n_dof).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let d: Vec<f64> = (0..n_data).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let lhs = tm.data_inner(&tm.forward(&f), &d);
            let rhs = mass.inner(&f, &tm.adjoint(&mass, &d));
            let scale = lhs.abs().max(rhs.abs()).max(1e-30);
            prop_assert!((lhs - rhs).abs() <= 1e-11 * scale, "lhs {lhs} rhs {rhs}");
        });
    }

    #[test]
    fn scalar_ray_data_matches_metric_trace() {
        // On a flat chart the transform of `phi g` at order 2 equals the
        // transform of `phi` at order 0 because velocities have unit speed.
        let chart = euclidean_disc();
        let grid = chart.grid(17).unwrap();
        let family = disc_family(&chart, 12, 9, default_h_ode(Some(grid.min_spacing())));
        let phi = |x: &Vec3| {
            let r2 = x[0] * x[0] + x[1] * x[1];
            (1.0 - r2).max(0.0).powi(2)
        };
        let f0 = SymmetricTensorField::from_fn(0, grid.clone(), Support::M, |x, out| {
            out[0] = phi(x);
        });
        let f2 = SymmetricTensorField::from_fn(2, grid.clone(), Support::M, |x, out| {
            out[0] = phi(x);
            out[1] = 0.0;
            out[2] = phi(x);
        });
        let d0 = xray(&chart, &family, &f0).unwrap();
        let d2 = xray(&chart, &family, &f2).unwrap();
        let scale = d0.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for (a, b) in d0.iter().zip(&d2) {
            assert!((a - b).abs() <= 1e-10 * scale, "order 0 {a} vs order 2 {b}");
        }
    }

    #[test]
    fn kernel_normal_is_rotation_symmetric_at_center() {
        let chart = euclidean_disc();
        let grid = chart.grid(21).unwrap();
        let family = disc_family(&chart, 24, 15, default_h_ode(Some(grid.min_spacing())));
        let field = SymmetricTensorField::from_fn(2, grid.clone(), Support::M, |x, out| {
            let r2 = x[0] * x[0] + x[1] * x[1];
            let bump = (1.0 - r2).max(0.0).powi(2);
            out[0] = bump;
            out[1] = 0.0;
            out[2] = bump;
        });
        let n = kernel_normal(&chart, &family.charts[0], &field).unwrap();
        let center = grid.len() / 2;
        let x = grid.node_flat(center);
        assert!(x[0].abs() < 1e-12 && x[1].abs() < 1e-12);
        let (n11, n12, n22) = (n.comps[0][center], n.comps[1][center], n.comps[2][center]);
        assert!(n11 > 0.0);
        // The continuous taper is rotation invariant for a full circle, so
        // the grid's xy swap symmetry forces equal diagonal entries and the
        // odd integrand kills the off-diagonal one.
        assert!((n11 - n22).abs() <= 1e-8 * n11, "n11 {n11} n22 {n22}");
        assert!(n12.abs() <= 1e-3 * n11, "n12 {n12} vs n11 {n11}");
    }

    #[test]
    fn kernel_normal_matches_composition() {
        let chart = euclidean_disc();
        let grid = chart.grid(24).unwrap();
        let family = disc_family(&chart, 40, 25, default_h_ode(Some(grid.min_spacing())));
        let field = smooth_m2_field(&grid);
        let tm = TransformMatrix::assemble(&chart, &grid, 2, &family).unwrap();
        let mass = TensorMass::build(&chart, &grid, 2).unwrap();
        let comp = tm.normal(&mass, &field_to_vec(&field));
        let kern = kernel_normal(&chart, &family.charts[0], &field).unwrap();
        let kern_dof = field_to_vec(&kern);
        // Compare well inside M where both discretizations resolve the
        // kernel; the rim rows see the taper cut through single cells.
        let mut num = 0.0;
        let mut den = 0.0;
        let n = grid.len();
        for (node, x) in grid.iter_nodes() {
            if chart.level_m(&x) > -0.25 {
                continue;
            }
            for c in 0..3 {
                let a = comp[c * n + node];
                let b = kern_dof[c * n + node];
                num += (a - b) * (a - b);
                den += a * a;
            }
        }
        let rel = (num / den).sqrt();
        assert!(rel < 0.03, "kernel vs composition relative error {rel}");
    }

    #[test]
    fn sobolev_literal_dominates_hilbert_and_scales() {
        let chart = euclidean_disc();
        let grid = chart.grid(17).unwrap();
        let frame = boundary_frame(&chart, 0.2).unwrap();
        let norms = SobolevNorms::build(&chart, &grid, 2, Some(&frame)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let mut f = SymmetricTensorField::zeros(2, grid.clone(), Support::Box);
            for c in 0..3 {
                for v in f.comps[c].iter_mut() {
                    *v = rng.gen_range(-1.0..1.0);
                }
            }
            let lit = norms.collar_h2_literal(&f).unwrap();
            let hil = norms.collar_h2_hilbert_sq(&f).unwrap().sqrt();
            assert!(lit >= hil - 1e-12, "literal {lit} hilbert {hil}");
            let mut f2 = SymmetricTensorField::zeros(2, grid.clone(), Support::Box);
            f2.axpy(2.0, &f).unwrap();
            let lit2 = norms.collar_h2_literal(&f2).unwrap();
            assert!((lit2 - 2.0 * lit).abs() <= 1e-12 * lit.max(1.0));
            let h1 = norms.h1_m1_sq(&f).unwrap();
            let h12 = norms.h1_m1_sq(&f2).unwrap();
            assert!((h12 - 4.0 * h1).abs() <= 1e-11 * h1.max(1.0));
        }
    }

    #[test]
    fn sobolev_gram_diagonal_matches_square_norms() {
        let chart = euclidean_disc();
        let grid = chart.grid(13).unwrap();
        let frame = boundary_frame(&chart, 0.2).unwrap();
        let norms = SobolevNorms::build(&chart, &grid, 2, Some(&frame)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let fields: Vec<SymmetricTensorField> = (0..4)
            .map(|_| {
                let mut f = SymmetricTensorField::zeros(2, grid.clone(), Support::Box);
                for c in 0..3 {
                    for v in f.comps[c].iter_mut() {
                        *v = rng.gen_range(-1.0..1.0);
                    }
                }
                f
            })
            .collect();
        let g2 = norms.collar_h2_hilbert_gram(&fields).unwrap();
        let g1 = norms.h1_m1_gram(&fields).unwrap();
        for (i, f) in fields.iter().enumerate() {
            let sq2 = norms.collar_h2_hilbert_sq(f).unwrap();
            assert!((g2[(i, i)] - sq2).abs() <= 1e-12 * sq2);
            let sq1 = norms.h1_m1_sq(f).unwrap();
            assert!((g1[(i, i)] - sq1).abs() <= 1e-12 * sq1);
        }
        // Bilinearity against a linear combination.
        let mut f01 = SymmetricTensorField::zeros(2, grid.clone(), Support::Box);
        f01.axpy(1.0, &fields[0]).unwrap();
        f01.axpy(-2.5, &fields[1]).unwrap();
        let both = vec![f01, fields[0].clone(), fields[1].clone()];
        let g = norms.collar_h2_hilbert_gram(&both).unwrap();
        let want = g[(1, 1)] - 2.5 * g[(1, 2)];
        assert!((g[(0, 1)] - want).abs() <= 1e-10 * want.abs().max(1.0));
    }

    #[test]
    fn kernel_normal_rejects_curved_charts() {
        let chart = crate::manifold::hyperbolic_disc();
        let grid = chart.grid(12).unwrap();
        let field = SymmetricTensorField::zeros(2, grid, Support::M);
        let family = disc_family(&euclidean_disc(), 6, 5, 1e-2);
        let err = kernel_normal(&chart, &family.charts[0], &field);
        assert!(matches!(err, Err(GxError::Unsupported(_))));
    }
}
