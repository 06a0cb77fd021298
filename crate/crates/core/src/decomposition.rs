//! Potential/solenoidal splitting of tensor fields and boundary gauge
//! normalization.
//!
//! The symmetrized covariant derivative `d` is discretized with the same
//! finite differences as [`grid_gradient`], both as a pointwise operation
//! and as a sparse matrix.  Its negative adjoint in the mass inner products
//! is the divergence; the potential part of a field is the mass-orthogonal
//! projection onto `d` of the Dirichlet (interior-node) space, computed by
//! conjugate gradients on the normal equations.  Boundary normalization
//! subtracts `d v0` for a one-form `v0` built by integrating ODEs along the
//! inward normal lines of a boundary collar frame, so that the resulting
//! field has vanishing normal components near `∂M`.

use rayon::prelude::*;

use crate::error::{GxError, Result};
use crate::grid::{grid_gradient, smoothstep, BBox, Grid, Mat3, Vec3};
use crate::manifold::{
    comp_count, comp_pairs, BoundaryNormalFrame, MetricChart, Support, SymmetricTensorField,
};
use crate::tolerances;
use crate::transform::{CsrMatrix, TensorMass};

/// Symmetrized covariant derivative: order 0 -> 1 is the plain gradient,
/// order 1 -> 2 is `(dv)_ij = (d_i v_j + d_j v_i)/2 - Gamma^k_ij v_k`.
pub fn sym_diff(chart: &MetricChart, v: &SymmetricTensorField) -> Result<SymmetricTensorField> {
    let grid = &v.grid;
    match v.order {
        0 => {
            let mut out = SymmetricTensorField::zeros(1, grid.clone(), Support::Box);
            out.comps = grid_gradient(grid, &v.comps[0]);
            Ok(out)
        }
        1 => {
            let mut out = SymmetricTensorField::zeros(2, grid.clone(), Support::Box);
            let grads: Vec<Vec<Vec<f64>>> = v
                .comps
                .iter()
                .map(|p| grid_gradient(grid, p))
                .collect();
            let pairs = comp_pairs(2, grid.dim);
            for (node, x) in grid.iter_nodes() {
                let gam = chart.christoffel(&x)?;
                for (c, &(i, j)) in pairs.iter().enumerate() {
                    let mut s = 0.5 * (grads[j][i][node] + grads[i][j][node]);
                    for k in 0..grid.dim {
                        s -= gam[k][(i, j)] * v.comps[k][node];
                    }
                    out.comps[c][node] = s;
                }
            }
            Ok(out)
        }
        o => Err(GxError::InvalidArgument(format!(
            "symmetrized derivative takes orders 0 or 1, got {o}"
        ))),
    }
}

/// Finite-difference row of `d/dx_a` at a node; matches [`grid_gradient`].
fn fd_row(grid: &Grid, idx: [usize; 3], a: usize) -> Vec<(usize, f64)> {
    let n = grid.dims[a];
    let h = grid.spacing(a);
    let node_at = |i: usize| {
        let mut j = idx;
        j[a] = i;
        grid.flat(j)
    };
    let i = idx[a];
    if grid.periods[a].is_some() {
        vec![
            (node_at((i + 1) % n), 0.5 / h),
            (node_at((i + n - 1) % n), -0.5 / h),
        ]
    } else if i == 0 {
        vec![
            (node_at(0), -1.5 / h),
            (node_at(1), 2.0 / h),
            (node_at(2), -0.5 / h),
        ]
    } else if i == n - 1 {
        vec![
            (node_at(n - 1), 1.5 / h),
            (node_at(n - 2), -2.0 / h),
            (node_at(n - 3), 0.5 / h),
        ]
    } else {
        vec![(node_at(i + 1), 0.5 / h), (node_at(i - 1), -0.5 / h)]
    }
}

/// Sparse matrix of [`sym_diff`] from order `out_order - 1` to `out_order`.
pub fn sym_diff_matrix(chart: &MetricChart, grid: &Grid, out_order: u8) -> Result<CsrMatrix> {
    if out_order == 0 || out_order > 2 {
        return Err(GxError::InvalidArgument(format!(
            "symmetrized derivative ranges over orders 1 or 2, got {out_order}"
        )));
    }
    let n = grid.len();
    let nc_out = comp_count(out_order, grid.dim);
    let nc_in = comp_count(out_order - 1, grid.dim);
    let pairs = comp_pairs(out_order, grid.dim);
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::with_capacity(nc_out * n);
    // Row order must stay component-major to match the DOF layout.
    for c in 0..nc_out {
        let (i, j) = pairs[c];
        for node in 0..n {
            let idx = grid.unflat(node);
            let mut acc: Vec<(usize, f64)> = Vec::new();
            if out_order == 1 {
                for (col, w) in fd_row(grid, idx, i) {
                    acc.push((col, w));
                }
            } else {
                for (col, w) in fd_row(grid, idx, i) {
                    acc.push((j * n + col, 0.5 * w));
                }
                for (col, w) in fd_row(grid, idx, j) {
                    acc.push((i * n + col, 0.5 * w));
                }
                let gam = chart.christoffel(&grid.node_flat(node))?;
                for k in 0..grid.dim {
                    let g = gam[k][(i, j)];
                    if g != 0.0 {
                        acc.push((k * n + node, -g));
                    }
                }
            }
            acc.sort_unstable_by_key(|e| e.0);
            // Merge duplicate columns (the two halves coincide when i == j).
            let mut merged: Vec<(usize, f64)> = Vec::with_capacity(acc.len());
            for (col, w) in acc {
                match merged.last_mut() {
                    Some(last) if last.0 == col => last.1 += w,
                    _ => merged.push((col, w)),
                }
            }
            rows.push(merged);
        }
    }
    debug_assert_eq!(rows.len(), nc_out * n);
    Ok(CsrMatrix::from_rows(nc_in * n, &rows))
}

/// Dirichlet interior nodes: the node and all its axis neighbors lie
/// strictly inside M.  Missing neighbors at box edges count as outside.
pub fn interior_mask(chart: &MetricChart, grid: &Grid) -> Vec<bool> {
    let inside = |x: &Vec3| chart.level_m(x) < 0.0;
    (0..grid.len())
        .map(|node| {
            let idx = grid.unflat(node);
            if !inside(&grid.node_flat(node)) {
                return false;
            }
            for a in 0..grid.dim {
                for step in [-1isize, 1] {
                    let i = idx[a] as isize + step;
                    let n = grid.dims[a] as isize;
                    let wrapped = if grid.periods[a].is_some() {
                        i.rem_euclid(n)
                    } else if i < 0 || i >= n {
                        return false;
                    } else {
                        i
                    };
                    let mut jdx = idx;
                    jdx[a] = wrapped as usize;
                    if !inside(&grid.node_flat(grid.flat(jdx))) {
                        return false;
                    }
                }
            }
            true
        })
        .collect()
}

/// The derivative pair (d, masses) on one grid, with the Dirichlet interior
/// space used for potential projections.
pub struct DiffOps {
    /// Tensor order of the range of `d`.
    pub order: u8,
    pub grid: Grid,
    pub d: CsrMatrix,
    pub mass_out: TensorMass,
    pub mass_in: TensorMass,
    interior: Vec<bool>,
    /// Reduced DOF list of the Dirichlet space, component-major.
    reduced: Vec<usize>,
}

/// Result of a Dirichlet potential projection.
pub struct PotentialSolve {
    /// Potential on the full grid (zero outside the interior nodes).
    pub v: Vec<f64>,
    /// Its symmetrized derivative.
    pub dv: Vec<f64>,
    pub iters: usize,
    pub rel_residual: f64,
}

/// A field split into `d v + solenoidal`.
pub struct Decomposition {
    pub potential: PotentialSolve,
    pub solenoidal: Vec<f64>,
    /// Relative mass inner product between the parts.
    pub orth_rel: f64,
}

impl DiffOps {
    pub fn build(chart: &MetricChart, grid: &Grid, order: u8) -> Result<DiffOps> {
        let d = sym_diff_matrix(chart, grid, order)?;
        let mass_out = TensorMass::build(chart, grid, order)?;
        let mass_in = TensorMass::build(chart, grid, order - 1)?;
        let interior = interior_mask(chart, grid);
        let nc_in = comp_count(order - 1, grid.dim);
        let n = grid.len();
        let mut reduced = Vec::new();
        for c in 0..nc_in {
            for (node, &keep) in interior.iter().enumerate() {
                if keep {
                    reduced.push(c * n + node);
                }
            }
        }
        Ok(DiffOps {
            order,
            grid: grid.clone(),
            d,
            mass_out,
            mass_in,
            interior,
            reduced,
        })
    }

    pub fn interior(&self) -> &[bool] {
        &self.interior
    }

    pub fn d_apply(&self, v: &[f64]) -> Vec<f64> {
        self.d.matvec(v)
    }

    /// Divergence as the exact negative adjoint of `d`:
    /// `delta f = -M_in^{-1} d^T M_out f`.
    pub fn divergence(&self, f: &[f64]) -> Vec<f64> {
        let mut out = self
            .mass_in
            .apply_inv(&self.d.matvec_transpose(&self.mass_out.apply(f)));
        for v in out.iter_mut() {
            *v = -*v;
        }
        out
    }

    fn expand(&self, xr: &[f64]) -> Vec<f64> {
        let mut full = vec![0.0; self.d.n_cols];
        for (&dof, &v) in self.reduced.iter().zip(xr) {
            full[dof] = v;
        }
        full
    }

    fn restrict(&self, full: &[f64]) -> Vec<f64> {
        self.reduced.iter().map(|&dof| full[dof]).collect()
    }

    /// Best approximation of `f` by `d v` over the Dirichlet space, in the
    /// mass norm: CG on `(dP)^T M (dP) v = (dP)^T M f`.
    pub fn solve_potential(&self, f: &[f64]) -> Result<PotentialSolve> {
        assert_eq!(f.len(), self.d.n_rows, "field DOF length");
        let rhs = self.restrict(&self.d.matvec_transpose(&self.mass_out.apply(f)));
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let rhs_norm = dot(&rhs, &rhs).sqrt();
        if rhs_norm == 0.0 || self.reduced.is_empty() {
            return Ok(PotentialSolve {
                v: vec![0.0; self.d.n_cols],
                dv: vec![0.0; self.d.n_rows],
                iters: 0,
                rel_residual: 0.0,
            });
        }
        let apply_k = |xr: &[f64]| -> Vec<f64> {
            let df = self.d.matvec(&self.expand(xr));
            self.restrict(&self.d.matvec_transpose(&self.mass_out.apply(&df)))
        };
        let tol = tolerances::TOL_CG * rhs_norm;
        let mut x = vec![0.0; rhs.len()];
        let mut r = rhs.clone();
        let mut p = r.clone();
        let mut rs = dot(&r, &r);
        let mut iters = 0;
        while rs.sqrt() > tol {
            if iters >= tolerances::CG_MAX_ITERS {
                return Err(GxError::CgDiverged {
                    residual: rs.sqrt() / rhs_norm,
                    iters,
                });
            }
            let kp = apply_k(&p);
            let alpha = rs / dot(&p, &kp);
            for (xi, pi) in x.iter_mut().zip(&p) {
                *xi += alpha * pi;
            }
            for (ri, kpi) in r.iter_mut().zip(&kp) {
                *ri -= alpha * kpi;
            }
            let rs_new = dot(&r, &r);
            let beta = rs_new / rs;
            for (pi, ri) in p.iter_mut().zip(&r) {
                *pi = ri + beta * *pi;
            }
            rs = rs_new;
            iters += 1;
        }
        let v = self.expand(&x);
        let dv = self.d.matvec(&v);
        Ok(PotentialSolve {
            v,
            dv,
            iters,
            rel_residual: rs.sqrt() / rhs_norm,
        })
    }

    /// Split `f = d v + f_sol` with the potential part from
    /// [`DiffOps::solve_potential`]; reports the relative mass inner product
    /// of the two parts (zero for an exact projection).
    pub fn decompose(&self, f: &[f64]) -> Result<Decomposition> {
        let potential = self.solve_potential(f)?;
        let solenoidal: Vec<f64> = f
            .iter()
            .zip(&potential.dv)
            .map(|(a, b)| a - b)
            .collect();
        let ip = self.mass_out.inner(&solenoidal, &potential.dv);
        let ns = self.mass_out.norm(&solenoidal);
        let np = self.mass_out.norm(&potential.dv);
        let orth_rel = if ns > 0.0 && np > 0.0 {
            (ip / (ns * np)).abs()
        } else {
            0.0
        };
        Ok(Decomposition {
            potential,
            solenoidal,
            orth_rel,
        })
    }
}

/// Tangential lattice of a collar frame: the `n_tang` surface parameters.
struct SLattice {
    nt: usize,
    dims: [usize; 2],
    lo: [f64; 2],
    step: [f64; 2],
    periodic: [bool; 2],
}

impl SLattice {
    fn build(frame: &BoundaryNormalFrame, n_s: [usize; 2]) -> SLattice {
        let nt = frame.n_tang;
        let mut dims = [1usize; 2];
        let mut lo = [0.0; 2];
        let mut step = [0.0; 2];
        let mut periodic = [false; 2];
        for a in 0..nt {
            let (l, h) = frame.s_range[a];
            dims[a] = n_s[a].max(4);
            lo[a] = l;
            periodic[a] = frame.s_period[a].is_some();
            step[a] = if periodic[a] {
                (h - l) / dims[a] as f64
            } else {
                (h - l) / (dims[a] - 1) as f64
            };
        }
        SLattice {
            nt,
            dims,
            lo,
            step,
            periodic,
        }
    }

    fn len(&self) -> usize {
        self.dims[0] * self.dims[1]
    }

    fn unflat(&self, flat: usize) -> [usize; 2] {
        [flat / self.dims[1], flat % self.dims[1]]
    }

    fn flat(&self, idx: [usize; 2]) -> usize {
        idx[0] * self.dims[1] + idx[1]
    }

    fn params(&self, flat: usize) -> [f64; 2] {
        let idx = self.unflat(flat);
        let mut s = [0.0; 2];
        for a in 0..self.nt {
            s[a] = self.lo[a] + idx[a] as f64 * self.step[a];
        }
        s
    }

    /// d/ds_a of a plane indexed by the lattice, same stencils as
    /// [`grid_gradient`].
    fn deriv(&self, plane: &[f64], flat: usize, a: usize) -> f64 {
        let idx = self.unflat(flat);
        let n = self.dims[a];
        let h = self.step[a];
        let at = |i: usize| {
            let mut j = idx;
            j[a] = i;
            plane[self.flat(j)]
        };
        let i = idx[a];
        if self.periodic[a] {
            (at((i + 1) % n) - at((i + n - 1) % n)) / (2.0 * h)
        } else if i == 0 {
            (-3.0 * at(0) + 4.0 * at(1) - at(2)) / (2.0 * h)
        } else if i == n - 1 {
            (3.0 * at(n - 1) - 4.0 * at(n - 2) + at(n - 3)) / (2.0 * h)
        } else {
            (at(i + 1) - at(i - 1)) / (2.0 * h)
        }
    }
}

/// Tangential Christoffel symbols `Gamma~^a_{b d}` of the collar frame
/// coordinates, from the depth derivative of the tangential metric block.
fn gamma_tilde(
    chart: &MetricChart,
    frame: &BoundaryNormalFrame,
    s: &[f64; 2],
    d: f64,
) -> Result<[[f64; 2]; 2]> {
    let nt = frame.n_tang;
    let eps = 1e-5;
    let gp = frame.frame_metric(chart, s, d + eps)?;
    let gm = frame.frame_metric(chart, s, d - eps)?;
    let g0 = frame.frame_metric(chart, s, d)?;
    let mut gam = [[0.0; 2]; 2];
    if nt == 1 {
        let dg = (gp[(0, 0)] - gm[(0, 0)]) / (2.0 * eps);
        gam[0][0] = 0.5 * dg / g0[(0, 0)];
    } else {
        let det = g0[(0, 0)] * g0[(1, 1)] - g0[(0, 1)] * g0[(1, 0)];
        let inv = [
            [g0[(1, 1)] / det, -g0[(0, 1)] / det],
            [-g0[(1, 0)] / det, g0[(0, 0)] / det],
        ];
        for a in 0..2 {
            for b in 0..2 {
                let mut t = 0.0;
                for c in 0..2 {
                    let dg = (gp[(c, b)] - gm[(c, b)]) / (2.0 * eps);
                    t += inv[a][c] * dg;
                }
                gam[a][b] = 0.5 * t;
            }
        }
    }
    Ok(gam)
}

/// Gauge field and normalized remainder produced by
/// [`boundary_normalize`].
pub struct BoundaryNormalization {
    /// One-form (or scalar, for order-1 input) gauge field, cut off
    /// smoothly at the collar's outer edge.
    pub v0: SymmetricTensorField,
    /// `f - d v0`, masked to M.
    pub f_tilde: SymmetricTensorField,
    /// Largest ODE residual over the inner collar half of the marching
    /// lattice.
    pub residual: f64,
}

/// Remove the normal components of `f` near `∂M` by subtracting `d v0`:
/// `v0` solves `d_d v_d = f_dd` (and, for order 2, the tangential system
/// `d_d v_s = 2 f_sd - d_s v_d + 2 Gamma~^s'_{s d} v_s'`) along each inward
/// normal line, starting from zero on `∂M`, then falls to zero smoothly at
/// depth `w_collar`.
pub fn boundary_normalize(
    chart: &MetricChart,
    frame: &BoundaryNormalFrame,
    f: &SymmetricTensorField,
    n_s: [usize; 2],
) -> Result<BoundaryNormalization> {
    if f.order == 0 {
        return Err(GxError::InvalidArgument(
            "boundary normalization needs a tensor order of 1 or 2".into(),
        ));
    }
    if f.grid.dim != chart.dim {
        return Err(GxError::DimensionMismatch {
            expected: chart.dim,
            got: f.grid.dim,
        });
    }
    let w = frame.w_collar;
    let lat = SLattice::build(frame, n_s);
    let ns = lat.len();
    let nt = frame.n_tang;
    let nd = ((w / 5e-4).ceil() as usize).clamp(200, 800);
    let hd = w / nd as f64;

    // March v_d on half levels: dv_d/dd = f(e_d, e_d), v_d(s, 0) = 0.
    // Depth-0 samples sit on ∂M where rounding can flip the support mask,
    // so they are nudged a negligible step inward.
    let f_dd = |s: &[f64; 2], d: f64| -> Result<f64> {
        let cp = frame.frame_at(s, d.max(1e-9));
        let val = f.eval(chart, &cp.x)?;
        Ok(match f.order {
            1 => val.contract(&cp.e_d),
            _ => val.bilinear(&cp.e_d, &cp.e_d),
        })
    };
    let vd_cols: Vec<Vec<f64>> = (0..ns)
        .into_par_iter()
        .map(|sf| -> Result<Vec<f64>> {
            let s = lat.params(sf);
            let mut col = Vec::with_capacity(2 * nd + 1);
            let mut v = 0.0;
            col.push(v);
            let mut f_lo = f_dd(&s, 0.0)?;
            for l in 0..2 * nd {
                let d0 = 0.5 * hd * l as f64;
                let f_mid = f_dd(&s, d0 + 0.25 * hd)?;
                let f_hi = f_dd(&s, d0 + 0.5 * hd)?;
                v += 0.5 * hd / 6.0 * (f_lo + 4.0 * f_mid + f_hi);
                col.push(v);
                f_lo = f_hi;
            }
            Ok(col)
        })
        .collect::<Result<Vec<_>>>()?;
    // Transpose to level-major planes for tangential derivatives.
    let vd_h: Vec<Vec<f64>> = (0..=2 * nd)
        .map(|l| (0..ns).map(|sf| vd_cols[sf][l]).collect())
        .collect();

    // March v_s on whole levels (order 2 only).
    let mut vs: Vec<Vec<[f64; 2]>> = Vec::new();
    if f.order == 2 {
        // Level-dependent but state-independent pieces of the RHS.
        struct Rhs {
            two_f_sd: [f64; 2],
            ds_vd: [f64; 2],
            gam: [[f64; 2]; 2],
        }
        let pre: Vec<Vec<Rhs>> = (0..=2 * nd)
            .into_par_iter()
            .map(|l| -> Result<Vec<Rhs>> {
                let d = (0.5 * hd * l as f64).max(1e-9);
                (0..ns)
                    .map(|sf| {
                        let s = lat.params(sf);
                        let cp = frame.frame_at(&s, d);
                        let val = f.eval(chart, &cp.x)?;
                        let mut two_f_sd = [0.0; 2];
                        let mut ds_vd = [0.0; 2];
                        for b in 0..nt {
                            two_f_sd[b] = 2.0 * val.bilinear(&cp.e_s[b], &cp.e_d);
                            ds_vd[b] = lat.deriv(&vd_h[l], sf, b);
                        }
                        let gam = gamma_tilde(chart, frame, &s, d)?;
                        Ok(Rhs {
                            two_f_sd,
                            ds_vd,
                            gam,
                        })
                    })
                    .collect()
            })
            .collect::<Result<Vec<_>>>()?;
        let rhs = |l: usize, sf: usize, v: &[f64; 2]| -> [f64; 2] {
            let p = &pre[l][sf];
            let mut out = [0.0; 2];
            for b in 0..nt {
                let mut t = p.two_f_sd[b] - p.ds_vd[b];
                for a in 0..nt {
                    t += 2.0 * p.gam[a][b] * v[a];
                }
                out[b] = t;
            }
            out
        };
        let vs_cols: Vec<Vec<[f64; 2]>> = (0..ns)
            .into_par_iter()
            .map(|sf| {
                let mut col = Vec::with_capacity(nd + 1);
                let mut v = [0.0; 2];
                col.push(v);
                for j in 0..nd {
                    let k1 = rhs(2 * j, sf, &v);
                    let v2 = [v[0] + 0.5 * hd * k1[0], v[1] + 0.5 * hd * k1[1]];
                    let k2 = rhs(2 * j + 1, sf, &v2);
                    let v3 = [v[0] + 0.5 * hd * k2[0], v[1] + 0.5 * hd * k2[1]];
                    let k3 = rhs(2 * j + 1, sf, &v3);
                    let v4 = [v[0] + hd * k3[0], v[1] + hd * k3[1]];
                    let k4 = rhs(2 * j + 2, sf, &v4);
                    for b in 0..2 {
                        v[b] += hd / 6.0 * (k1[b] + 2.0 * k2[b] + 2.0 * k3[b] + k4[b]);
                    }
                    col.push(v);
                }
                col
            })
            .collect();
        vs = (0..=nd)
            .map(|j| (0..ns).map(|sf| vs_cols[sf][j]).collect())
            .collect();

        // Residual of the tangential ODE on the inner half, centered FD in d.
        let mut res = 0.0f64;
        for j in 1..nd {
            let d = hd * j as f64;
            if d > 0.5 * w {
                break;
            }
            for sf in 0..ns {
                for b in 0..nt {
                    let dv = (vs[j + 1][sf][b] - vs[j - 1][sf][b]) / (2.0 * hd);
                    let want = rhs(2 * j, sf, &vs[j][sf])[b];
                    res = res.max((dv - want).abs());
                }
            }
        }
        // Residual of the depth ODE.
        for j in 1..nd {
            let d = hd * j as f64;
            if d > 0.5 * w {
                break;
            }
            for sf in 0..ns {
                let dv = (vd_h[2 * (j + 1)][sf] - vd_h[2 * (j - 1)][sf]) / (2.0 * hd);
                let s = lat.params(sf);
                res = res.max((dv - f_dd(&s, d)?).abs());
            }
        }
        return finish_normalization(chart, frame, f, &lat, nd, &vd_h, &vs, res);
    }

    // Order 1: only the depth ODE.
    let mut res = 0.0f64;
    for j in 1..nd {
        let d = hd * j as f64;
        if d > 0.5 * w {
            break;
        }
        for sf in 0..ns {
            let dv = (vd_h[2 * (j + 1)][sf] - vd_h[2 * (j - 1)][sf]) / (2.0 * hd);
            let s = lat.params(sf);
            res = res.max((dv - f_dd(&s, d)?).abs());
        }
    }
    finish_normalization(chart, frame, f, &lat, nd, &vd_h, &vs, res)
}

/// Interpolate the marched lattice onto the chart grid, apply the cutoff,
/// and subtract `d v0`.
#[allow(clippy::too_many_arguments)]
fn finish_normalization(
    chart: &MetricChart,
    frame: &BoundaryNormalFrame,
    f: &SymmetricTensorField,
    lat: &SLattice,
    nd: usize,
    vd_h: &[Vec<f64>],
    vs: &[Vec<[f64; 2]>],
    residual: f64,
) -> Result<BoundaryNormalization> {
    let w = frame.w_collar;
    let nt = frame.n_tang;
    let grid = &f.grid;

    // Lattice grid for smooth interpolation in (s, d).
    let (lgrid, vd_plane, vs_planes) = {
        let mut dims = [1usize; 3];
        let mut lo = [0.0; 3];
        let mut hi = [0.0; 3];
        let mut periods = [None; 3];
        for a in 0..nt {
            dims[a] = lat.dims[a];
            lo[a] = lat.lo[a];
            hi[a] = lat.lo[a]
                + lat.step[a] * if lat.periodic[a] { lat.dims[a] } else { lat.dims[a] - 1 } as f64;
            if lat.periodic[a] {
                periods[a] = Some(hi[a] - lo[a]);
            }
        }
        dims[nt] = nd + 1;
        lo[nt] = 0.0;
        hi[nt] = w;
        let lgrid = Grid::new(nt + 1, dims, BBox::new_3d(lo, hi), periods)?;
        let mut vd_plane = vec![0.0; lgrid.len()];
        let mut vs_planes = vec![vec![0.0; lgrid.len()]; if vs.is_empty() { 0 } else { nt }];
        for sf in 0..lat.len() {
            let sidx = lat.unflat(sf);
            for j in 0..=nd {
                let mut idx = [0usize; 3];
                idx[..2].copy_from_slice(&sidx);
                if nt == 1 {
                    idx[1] = j;
                } else {
                    idx[2] = j;
                }
                let node = lgrid.flat(idx);
                vd_plane[node] = vd_h[2 * j][sf];
                for (b, plane) in vs_planes.iter_mut().enumerate() {
                    plane[node] = vs[j][sf][b];
                }
            }
        }
        (lgrid, vd_plane, vs_planes)
    };

    let cutoff = |d: f64| 1.0 - smoothstep(2.0 * d / w - 1.0);
    let order_v = f.order - 1;
    let n_out = comp_count(order_v, grid.dim);
    let vals: Vec<[f64; 3]> = (0..grid.len())
        .into_par_iter()
        .map(|node| -> Result<[f64; 3]> {
            let x = grid.node_flat(node);
            let depth = frame.signed_depth(&x);
            if depth <= 0.0 || depth >= w {
                return Ok([0.0; 3]);
            }
            let s = frame.foot_params(&x);
            let mut q = Vec3::zeros();
            for a in 0..nt {
                q[a] = s[a];
            }
            q[nt] = depth;
            let st = lgrid.stencil(&q)?;
            let chi = cutoff(depth);
            let vd = st.apply(&vd_plane);
            if order_v == 0 {
                return Ok([chi * vd, 0.0, 0.0]);
            }
            let mut vfr = [0.0f64; 3];
            for (b, plane) in vs_planes.iter().enumerate() {
                vfr[b] = st.apply(plane);
            }
            vfr[nt] = vd;
            // Chart components of the one-form: v_i = v_a (J^{-1})_{a i}
            // with J = [e_s | e_d].
            let cp = frame.frame_at(&s, depth);
            let mut jm = Mat3::identity();
            for a in 0..nt {
                jm.set_column(a, &cp.e_s[a]);
            }
            jm.set_column(nt, &cp.e_d);
            let jinv = jm.try_inverse().ok_or_else(|| {
                GxError::CollarInvalid("degenerate collar frame jacobian".into())
            })?;
            let mut out = [0.0f64; 3];
            for i in 0..grid.dim {
                let mut t = 0.0;
                for (a, &va) in vfr.iter().enumerate().take(nt + 1) {
                    t += va * jinv[(a, i)];
                }
                out[i] = chi * t;
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut v0 = SymmetricTensorField::zeros(order_v, grid.clone(), Support::Box);
    for (node, val) in vals.iter().enumerate() {
        for c in 0..n_out {
            v0.comps[c][node] = val[c];
        }
    }
    let dv0 = sym_diff(chart, &v0)?;
    let mut f_tilde = SymmetricTensorField::zeros(f.order, grid.clone(), Support::M);
    for c in 0..f.n_comps() {
        for node in 0..grid.len() {
            f_tilde.comps[c][node] = f.comps[c][node] - dv0.comps[c][node];
        }
    }
    Ok(BoundaryNormalization {
        v0,
        f_tilde,
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::{
        boundary_frame, euclidean_disc, flat_torus_example2, halfplane_test, sphere_polar,
    };
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::TAU;

    fn random_dof(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn divergence_is_exact_negative_adjoint() {
        for (chart, order) in [
            (euclidean_disc(), 1u8),
            (euclidean_disc(), 2u8),
            (sphere_polar(), 2u8),
        ] {
            let grid = chart.grid(12).unwrap();
            let ops = DiffOps::build(&chart, &grid, order).unwrap();
            let v = random_dof(ops.d.n_cols, 3);
            let f = random_dof(ops.d.n_rows, 5);
            let lhs = ops.mass_out.inner(&ops.d_apply(&v), &f);
            let rhs = -ops.mass_in.inner(&v, &ops.divergence(&f));
            let scale = lhs.abs().max(rhs.abs()).max(1e-30);
            assert!(
                (lhs - rhs).abs() <= 1e-11 * scale,
                "order {order} on {}: {lhs} vs {rhs}",
                chart.name
            );
        }
    }

    #[test]
    fn matrix_matches_pointwise_sym_diff() {
        for (chart, order_in) in [
            (euclidean_disc(), 0u8),
            (sphere_polar(), 1u8),
            (flat_torus_example2(), 1u8),
        ] {
            let grid = chart.grid(8).unwrap();
            let dmat = sym_diff_matrix(&chart, &grid, order_in + 1).unwrap();
            let mut v =
                SymmetricTensorField::zeros(order_in, grid.clone(), Support::Box);
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            for c in 0..v.n_comps() {
                for val in v.comps[c].iter_mut() {
                    *val = rng.gen_range(-1.0..1.0);
                }
            }
            let by_field = sym_diff(&chart, &v).unwrap();
            let by_matrix = dmat.matvec(&crate::transform::field_to_vec(&v));
            let n = grid.len();
            for c in 0..by_field.n_comps() {
                for node in 0..n {
                    let a = by_field.comps[c][node];
                    let b = by_matrix[c * n + node];
                    assert!(
                        (a - b).abs() <= 1e-12 * a.abs().max(1.0),
                        "{}: comp {c} node {node}: {a} vs {b}",
                        chart.name
                    );
                }
            }
        }
    }

    #[test]
    fn sym_diff_matches_closed_form_on_sphere_polar() {
        // v = (r^2, 0): (dv)_rr = 2r, (dv)_rphi = 0,
        // (dv)_phiphi = sin(r) cos(r) r^2; differences are exact on
        // quadratics and the Christoffel symbols are analytic.
        let chart = sphere_polar();
        let grid = chart.grid(16).unwrap();
        let v = SymmetricTensorField::from_fn(1, grid.clone(), Support::Box, |x, out| {
            out[0] = x[0] * x[0];
            out[1] = 0.0;
        });
        let dv = sym_diff(&chart, &v).unwrap();
        for (node, x) in grid.iter_nodes() {
            let r = x[0];
            let want = [2.0 * r, 0.0, r.sin() * r.cos() * r * r];
            for c in 0..3 {
                assert!(
                    (dv.comps[c][node] - want[c]).abs() < 1e-10,
                    "comp {c} at r={r}: {} vs {}",
                    dv.comps[c][node],
                    want[c]
                );
            }
        }
    }

    /// Analytic potential field on the disc: v vanishes to fourth order at
    /// the unit circle, f = d v (flat metric).
    fn manufactured(grid: &Grid) -> (SymmetricTensorField, SymmetricTensorField) {
        let bump = |r2: f64| (1.0 - r2).max(0.0).powi(4);
        let dbump = |r2: f64| -4.0 * (1.0 - r2).max(0.0).powi(3);
        let v = SymmetricTensorField::from_fn(1, grid.clone(), Support::Box, |x, out| {
            let r2 = x[0] * x[0] + x[1] * x[1];
            out[0] = bump(r2) * (0.3 + x[0]);
            out[1] = bump(r2) * (x[1] - 0.2 * x[0]);
        });
        let f = SymmetricTensorField::from_fn(2, grid.clone(), Support::Box, |x, out| {
            let r2 = x[0] * x[0] + x[1] * x[1];
            let (b, db) = (bump(r2), dbump(r2));
            let p1 = 0.3 + x[0];
            let p2 = x[1] - 0.2 * x[0];
            let d0v1 = db * 2.0 * x[0] * p1 + b;
            let d1v1 = db * 2.0 * x[1] * p1;
            let d0v2 = db * 2.0 * x[0] * p2 - 0.2 * b;
            let d1v2 = db * 2.0 * x[1] * p2 + b;
            out[0] = d0v1;
            out[1] = 0.5 * (d0v2 + d1v1);
            out[2] = d1v2;
        });
        (v, f)
    }

    #[test]
    fn potential_projection_converges_at_second_order() {
        let chart = euclidean_disc();
        let mut errs = Vec::new();
        for n in [17usize, 33] {
            let grid = chart.grid(n).unwrap();
            let ops = DiffOps::build(&chart, &grid, 2).unwrap();
            let (_, f) = manufactured(&grid);
            let f_dof = crate::transform::field_to_vec(&f);
            let sol = ops.solve_potential(&f_dof).unwrap();
            let diff: Vec<f64> = sol.dv.iter().zip(&f_dof).map(|(a, b)| a - b).collect();
            errs.push(ops.mass_out.norm(&diff));
        }
        let ratio = errs[0] / errs[1];
        assert!(
            ratio >= 3.25,
            "convergence ratio {ratio} from errors {errs:?}"
        );
    }

    #[test]
    fn decomposition_is_orthogonal_and_idempotent() {
        let chart = euclidean_disc();
        let grid = chart.grid(17).unwrap();
        let ops = DiffOps::build(&chart, &grid, 2).unwrap();
        let f = SymmetricTensorField::from_fn(2, grid.clone(), Support::Box, |x, out| {
            let r2 = x[0] * x[0] + x[1] * x[1];
            let b = (1.0 - r2).max(0.0).powi(2);
            out[0] = b * (1.0 + x[1]);
            out[1] = b * (x[0] - 0.5 * x[1]);
            out[2] = b * (1.0 - x[0]);
        });
        let f_dof = crate::transform::field_to_vec(&f);
        let dec = ops.decompose(&f_dof).unwrap();
        assert!(dec.orth_rel < 1e-8, "orthogonality {}", dec.orth_rel);
        assert!(ops.mass_out.norm(&dec.potential.dv) > 1e-3);
        let again = ops.decompose(&dec.solenoidal).unwrap();
        let scale = ops.mass_out.norm(&f_dof);
        let repeat = ops.mass_out.norm(&again.potential.dv);
        assert!(repeat <= 1e-6 * scale, "repeat potential {repeat}");
    }

    #[test]
    fn halfplane_normalization_is_exact() {
        let chart = halfplane_test();
        let grid = chart.grid(65).unwrap();
        let frame = boundary_frame(&chart, 0.3).unwrap();
        // f_dd = 1 in the collar frame (depth = -x_1, e_d = (0, -1)).
        let f = SymmetricTensorField::from_fn(2, grid.clone(), Support::M, |_, out| {
            out[2] = 1.0;
        });
        let norm = boundary_normalize(&chart, &frame, &f, [24, 1]).unwrap();
        assert!(norm.residual < 1e-10, "residual {}", norm.residual);
        // v0 = (0, x_1) wherever the cutoff is 1.
        for (node, x) in grid.iter_nodes() {
            let depth = -x[1];
            if depth <= 0.02 || depth >= 0.5 * frame.w_collar {
                continue;
            }
            assert!(norm.v0.comps[0][node].abs() < 1e-10);
            assert!(
                (norm.v0.comps[1][node] - x[1]).abs() < 1e-10,
                "v0_1 {} at {x:?}",
                norm.v0.comps[1][node]
            );
        }
        // f~ vanishes on rows whose finite-difference neighborhood stays in
        // the untouched part of the collar.
        let h = grid.spacing(1);
        for (node, x) in grid.iter_nodes() {
            let depth = -x[1];
            if depth < 2.0 * h + 1e-12 || depth > 0.5 * frame.w_collar - 2.0 * h {
                continue;
            }
            for c in 0..3 {
                assert!(
                    norm.f_tilde.comps[c][node].abs() < 1e-10,
                    "f~ comp {c} = {} at {x:?}",
                    norm.f_tilde.comps[c][node]
                );
            }
        }
    }

    #[test]
    fn disc_normalization_kills_normal_components() {
        let chart = euclidean_disc();
        let grid = chart.grid(97).unwrap();
        let frame = boundary_frame(&chart, 0.3).unwrap();
        let f = SymmetricTensorField::from_fn(2, grid.clone(), Support::M, |x, out| {
            let r2 = x[0] * x[0] + x[1] * x[1];
            let b = (1.2 - r2).max(0.0);
            out[0] = b;
            out[1] = 0.4 * b * (1.0 + x[0]);
            out[2] = b * (1.0 - 0.3 * x[1]);
        });
        let norm = boundary_normalize(&chart, &frame, &f, [128, 1]).unwrap();
        assert!(
            norm.residual < tolerances::TOL_BOUNDARY_NORMALIZE,
            "residual {}",
            norm.residual
        );
        // Frame-normal components of f~ shrink against those of f on the
        // inner collar half.  Probes stay 4 cells inside the rim so the
        // evaluation stencil never touches the kink of v0 at the boundary.
        let h = grid.min_spacing();
        let mut worst_before = 0.0f64;
        let mut worst_after = 0.0f64;
        for k in 0..48 {
            let s = [-std::f64::consts::PI + TAU * k as f64 / 48.0, 0.0];
            for jd in 0..6 {
                let d = 4.0 * h + (0.5 * frame.w_collar - 4.0 * h) * jd as f64 / 5.0;
                let cp = frame.frame_at(&s, d);
                let before = f.eval(&chart, &cp.x).unwrap();
                let after = norm.f_tilde.eval(&chart, &cp.x).unwrap();
                worst_before = worst_before
                    .max(before.bilinear(&cp.e_d, &cp.e_d).abs())
                    .max(before.bilinear(&cp.e_s[0], &cp.e_d).abs());
                worst_after = worst_after
                    .max(after.bilinear(&cp.e_d, &cp.e_d).abs())
                    .max(after.bilinear(&cp.e_s[0], &cp.e_d).abs());
            }
        }
        assert!(worst_before > 0.1, "test field too weak: {worst_before}");
        assert!(
            worst_after < 0.15 * worst_before,
            "normal components {worst_after} vs {worst_before}"
        );
    }

    #[test]
    fn torus_normalization_marches_in_three_dimensions() {
        let chart = flat_torus_example2();
        let grid = chart.grid(12).unwrap();
        let frame = boundary_frame(&chart, 0.3).unwrap();
        // f = (e_d)^flat (x) (e_d)^flat: constant 1 in the frame's dd slot.
        let f = SymmetricTensorField::from_fn(2, grid.clone(), Support::M, |x, out| {
            let r = x[0].hypot(x[1]).max(1e-9);
            let (c, s) = (x[0] / r, x[1] / r);
            out[0] = c * c;
            out[1] = c * s;
            out[3] = s * s;
        });
        let norm = boundary_normalize(&chart, &frame, &f, [32, 8]).unwrap();
        assert!(
            norm.residual < tolerances::TOL_BOUNDARY_NORMALIZE,
            "residual {}",
            norm.residual
        );
        // v0 = d * (e_d)^flat where the cutoff is 1, up to the cubic
        // interpolation wiggle of f on this coarse grid.
        for (node, x) in grid.iter_nodes() {
            let depth = frame.signed_depth(&x);
            if depth <= 0.05 || depth >= 0.4 * frame.w_collar {
                continue;
            }
            let r = x[0].hypot(x[1]);
            let want = [-depth * x[0] / r, -depth * x[1] / r, 0.0];
            for c in 0..3 {
                assert!(
                    (norm.v0.comps[c][node] - want[c]).abs() < 1e-3,
                    "comp {c} {} vs {} at {x:?}",
                    norm.v0.comps[c][node],
                    want[c]
                );
            }
        }
    }
}
