//! Principal symbol of the normal operator and pointwise ellipticity
//! tests on solenoidal tensors.
//!
//! At a cotangent point `(x, xi)` the symbol is a symmetric 2m-index
//! array obtained by integrating the weighted direction monomial
//! `theta^{(2m)}` over the unit directions orthogonal to `xi` (two points
//! in dimension two, a great circle in dimension three).  The operator is
//! elliptic at `(x, xi)` exactly when the induced quadratic form is
//! positive definite on the solenoidal slice `xi^i f_{ij...} = 0`, which
//! happens iff some orthogonal direction carries nonzero family weight.

use std::f64::consts::{PI, TAU};

use nalgebra::{Cholesky, DMatrix};
use rayon::prelude::*;

use crate::error::{GxError, Result};
use crate::family::{scan_codirections, scan_positions, CoverageReport, GeodesicFamily};
use crate::geodesics::TraceOptions;
use crate::grid::Vec3;
use crate::manifold::{comp_pairs, MetricChart};
use crate::tolerances;
use crate::transform::metric_block;

/// Principal symbol at one cotangent point.
///
/// `tensor[(c, c')]` is the full 2m-index array entry with the first m
/// indices grouped into the stored component pair `c` and the last m into
/// `c'`; the matrix is symmetric exactly as stored.  Order 0 gives a
/// 1 x 1 matrix holding the scalar symbol.
#[derive(Debug, Clone)]
pub struct SymbolAtPoint {
    pub order: u8,
    pub dim: usize,
    pub x: Vec3,
    pub xi: Vec3,
    pub tensor: DMatrix<f64>,
    /// Quadrature nodes used on the orthogonal sphere (2 in dimension 2).
    pub n_quad: usize,
}

/// Off-diagonal stored components stand for two plain index tuples.
fn pair_mults(pairs: &[(usize, usize)]) -> Vec<f64> {
    pairs
        .iter()
        .map(|&(i, j)| if i == j { 1.0 } else { 2.0 })
        .collect()
}

impl SymbolAtPoint {
    /// Full contraction `f_{i..} M^{i..k..} f_{k..}` over plain components,
    /// with `f` given on stored components.
    pub fn quad_form(&self, f: &[f64]) -> f64 {
        let mults = pair_mults(&comp_pairs(self.order, self.dim));
        let nc = mults.len();
        assert_eq!(f.len(), nc, "component count mismatch");
        let mut acc = 0.0;
        for c in 0..nc {
            for c2 in 0..nc {
                acc += mults[c] * mults[c2] * f[c] * self.tensor[(c, c2)] * f[c2];
            }
        }
        acc
    }

    /// Largest entry magnitude, a scale for near-zero tests.
    pub fn max_abs(&self) -> f64 {
        self.tensor.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Unit directions orthogonal to `xi` in the coordinate pairing, with the
/// trapezoid weight each node carries.  Dimension two collapses to the two
/// signed perpendiculars with unit weight.
fn orthogonal_nodes(dim: usize, ehat: &Vec3) -> (Vec<Vec3>, f64) {
    if dim == 2 {
        let perp = Vec3::new(-ehat[1], ehat[0], 0.0);
        return (vec![perp, -perp], 1.0);
    }
    // Orthonormal basis of the plane normal to ehat.
    let seed = if ehat[0].abs() <= ehat[1].abs() && ehat[0].abs() <= ehat[2].abs() {
        Vec3::new(1.0, 0.0, 0.0)
    } else if ehat[1].abs() <= ehat[2].abs() {
        Vec3::new(0.0, 1.0, 0.0)
    } else {
        Vec3::new(0.0, 0.0, 1.0)
    };
    let u = ehat.cross(&seed).normalize();
    let v = ehat.cross(&u);
    let q = tolerances::SYMBOL_QUAD_NODES;
    let nodes = (0..q)
        .map(|k| {
            let phi = TAU * k as f64 / q as f64;
            u * phi.cos() + v * phi.sin()
        })
        .collect();
    (nodes, TAU / q as f64)
}

/// Principal symbol of the normal operator at `(x, xi)` for tensors of
/// the given order.
///
/// Each orthogonal direction contributes the family weight
/// `|alpha_sharp(x, theta)|^2` (one orientation per node; the node set
/// contains both), the volume factor `sqrt(det g)`, the metric speed
/// factor `(g_ab theta^a theta^b)^{(1 - n)/2 - m}`, and the monomial
/// `theta^{(2m)}`.  The delta reduction leaves the prefactor
/// `pi / |xi|` with the Euclidean coefficient norm of the codirection.
pub fn principal_symbol(
    chart: &MetricChart,
    family: &GeodesicFamily,
    x: &Vec3,
    xi: &Vec3,
    order: u8,
    opts: &TraceOptions,
) -> Result<SymbolAtPoint> {
    let n = chart.dim;
    let xi_norm = xi.norm();
    if xi_norm == 0.0 {
        return Err(GxError::InvalidArgument(
            "principal symbol needs a nonzero codirection".into(),
        ));
    }
    let ehat = xi / xi_norm;
    let ev = chart.metric_at(x)?;
    let pairs = comp_pairs(order, n);
    let nc = pairs.len();
    let expo = (1.0 - n as f64) / 2.0 - order as f64;

    let (nodes, node_weight) = orthogonal_nodes(n, &ehat);
    let mut tensor = DMatrix::zeros(nc, nc);
    let mut mono = vec![1.0; nc];
    for theta in &nodes {
        let asq = family.alpha_sq_at(chart, x, theta, opts)?;
        if asq == 0.0 {
            continue;
        }
        let gtt = theta.dot(&(ev.g * theta));
        let w = node_weight * asq * ev.sqrt_det * gtt.powf(expo);
        for (c, &(i, j)) in pairs.iter().enumerate() {
            mono[c] = match order {
                0 => 1.0,
                1 => theta[i],
                _ => theta[i] * theta[j],
            };
        }
        for c in 0..nc {
            for c2 in 0..nc {
                tensor[(c, c2)] += w * mono[c] * mono[c2];
            }
        }
    }
    tensor *= PI / xi_norm;

    Ok(SymbolAtPoint {
        order,
        dim: n,
        x: *x,
        xi: *xi,
        tensor,
        n_quad: nodes.len(),
    })
}

/// Pointwise ellipticity verdict on the solenoidal slice.
#[derive(Debug, Clone)]
pub struct EllipticityReport {
    /// Smallest eigenvalue of the symbol form restricted to tensors with
    /// `xi^i f_{ij...} = 0`, in a metric-orthonormal basis of that slice.
    pub min_eig_solenoidal: f64,
    /// Largest eigenvalue over all tensors, the comparison scale.
    pub max_eig: f64,
    /// Dimension of the solenoidal slice.
    pub solenoidal_dim: usize,
    pub elliptic: bool,
}

/// Rows of the contraction `f -> xi^i f_{i...}` on stored components.
fn constraint_rows(order: u8, dim: usize, xi_up: &Vec3) -> DMatrix<f64> {
    let pairs = comp_pairs(order, dim);
    match order {
        1 => {
            let mut c = DMatrix::zeros(1, pairs.len());
            for (col, &(i, _)) in pairs.iter().enumerate() {
                c[(0, col)] = xi_up[i];
            }
            c
        }
        2 => {
            let mut c = DMatrix::zeros(dim, pairs.len());
            for (col, &(a, b)) in pairs.iter().enumerate() {
                c[(b, col)] += xi_up[a];
                if a != b {
                    c[(a, col)] += xi_up[b];
                }
            }
            c
        }
        _ => DMatrix::zeros(0, pairs.len()),
    }
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Decides ellipticity of a symbol by diagonalizing its quadratic form on
/// the solenoidal slice at `x`.
///
/// The form is positive semidefinite by construction; `elliptic` requires
/// its restriction to stay above `TOL_ELLIPTIC_REL` times the largest
/// unrestricted eigenvalue.
pub fn ellipticity_check(chart: &MetricChart, sym: &SymbolAtPoint) -> Result<EllipticityReport> {
    let ev = chart.metric_at(&sym.x)?;
    let pairs = comp_pairs(sym.order, sym.dim);
    let nc = pairs.len();
    let mults = pair_mults(&pairs);

    // Quadratic form and metric Gram over stored components.
    let mut qmat = DMatrix::zeros(nc, nc);
    for c in 0..nc {
        for c2 in 0..nc {
            qmat[(c, c2)] = mults[c] * mults[c2] * sym.tensor[(c, c2)];
        }
    }
    let gram = metric_block(sym.order, sym.dim, &ev);
    let chol = Cholesky::new(gram).ok_or(GxError::DegenerateMetric {
        x: sym.x[0],
        y: sym.x[1],
        z: sym.x[2],
    })?;
    let l_inv = chol
        .l()
        .try_inverse()
        .expect("triangular Cholesky factor is invertible");

    // Generalized eigenvalues of (Q, G) over the whole fiber set the scale.
    let whole = symmetrize(&(&l_inv * &qmat * l_inv.transpose()));
    let max_eig = whole
        .clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(f64::NEG_INFINITY, |m, &v| m.max(v));

    let xi_up = ev.g_inv * sym.xi;
    let cons = constraint_rows(sym.order, sym.dim, &xi_up);
    let (basis, k) = if cons.nrows() == 0 {
        (DMatrix::identity(nc, nc), nc)
    } else {
        // Null space of the constraints from the spectral split of C^T C.
        let ctc = symmetrize(&(cons.transpose() * &cons));
        let ee = ctc.symmetric_eigen();
        let scale = ee
            .eigenvalues
            .iter()
            .fold(0.0f64, |m, &v| m.max(v.abs()))
            .max(f64::MIN_POSITIVE);
        let keep: Vec<usize> = (0..nc)
            .filter(|&i| ee.eigenvalues[i].abs() <= 1e-12 * scale)
            .collect();
        let mut b = DMatrix::zeros(nc, keep.len());
        for (col, &i) in keep.iter().enumerate() {
            b.set_column(col, &ee.eigenvectors.column(i));
        }
        let k = keep.len();
        (b, k)
    };
    if k == 0 {
        return Ok(EllipticityReport {
            min_eig_solenoidal: f64::INFINITY,
            max_eig,
            solenoidal_dim: 0,
            elliptic: max_eig > 0.0,
        });
    }

    // Metric-orthonormalize the slice basis, then diagonalize there.
    let bg = symmetrize(&(basis.transpose() * metric_block(sym.order, sym.dim, &ev) * &basis));
    let chol_b = Cholesky::new(bg).ok_or(GxError::DegenerateMetric {
        x: sym.x[0],
        y: sym.x[1],
        z: sym.x[2],
    })?;
    let l_b_inv = chol_b
        .l()
        .try_inverse()
        .expect("triangular Cholesky factor is invertible");
    let bon = &basis * l_b_inv.transpose();
    let restricted = symmetrize(&(bon.transpose() * &qmat * &bon));
    let min_eig = restricted
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |m, &v| m.min(v));

    Ok(EllipticityReport {
        min_eig_solenoidal: min_eig,
        max_eig,
        solenoidal_dim: k,
        elliptic: max_eig > 0.0 && min_eig > tolerances::TOL_ELLIPTIC_REL * max_eig,
    })
}

/// Ellipticity criterion evaluated inside the coverage tolerance band:
/// true when some direction within `ang_tol` of the orthogonal set carries
/// nonzero family weight at some point within `dist_tol` of `x`.  This is
/// the continuous-trace route to the same predicate the coverage scan
/// answers from discrete ray samples, so the two flags are comparable
/// pair by pair.
fn elliptic_within_band(
    chart: &MetricChart,
    family: &GeodesicFamily,
    x: &Vec3,
    xi: &Vec3,
    dist_tol: f64,
    ang_tol: f64,
    opts: &TraceOptions,
) -> Result<bool> {
    let ev = chart.metric_at(x)?;
    let mut w = ev.g_inv * xi;
    let wn = w.dot(&(ev.g * w)).sqrt();
    if wn == 0.0 {
        return Ok(false);
    }
    w /= wn;

    // Directions orthogonal to xi in the coordinate pairing are already
    // metric-orthogonal to the raised codirection; normalize them in g and
    // tilt toward +-w by up to the angular tolerance.
    let (nodes, _) = orthogonal_nodes(chart.dim, &(xi / xi.norm()));
    let base: Vec<Vec3> = if chart.dim == 2 {
        nodes
    } else {
        nodes.into_iter().step_by(4).collect()
    };
    let n_beta = 5usize;
    let betas: Vec<f64> = (0..=n_beta)
        .map(|k| ang_tol * k as f64 / n_beta as f64)
        .flat_map(|b| if b == 0.0 { vec![0.0] } else { vec![b, -b] })
        .collect();

    // Probe points inside the coverage ball, skipping those outside M.
    let mut probes = vec![*x];
    let dirs2 = if chart.dim == 2 { 8 } else { 0 };
    for k in 0..dirs2 {
        let a = TAU * k as f64 / dirs2 as f64;
        for r in [0.9, 0.45] {
            probes.push(x + Vec3::new(a.cos(), a.sin(), 0.0) * (r * dist_tol));
        }
    }
    if chart.dim == 3 {
        for axis in 0..3 {
            for s in [-1.0, 1.0] {
                let mut e = Vec3::zeros();
                e[axis] = s;
                for r in [0.9, 0.45] {
                    probes.push(x + e * (r * dist_tol));
                }
            }
        }
    }

    for p in &probes {
        if chart.level_m(&chart.wrap(p)) > 0.0 {
            continue;
        }
        for b in &base {
            let bn = b.dot(&(ev.g * b)).sqrt();
            let bu = b / bn;
            for beta in &betas {
                let theta = bu * beta.cos() + w * beta.sin();
                if family.alpha_sq_at(chart, p, &theta, opts)? > 0.0 {
                    return Ok(true);
                }
            }
        }
    }
    Ok(false)
}

/// One entry of an ellipticity scan.
#[derive(Debug, Clone)]
pub struct ScanRecord {
    pub x: Vec3,
    pub xi: Vec3,
    pub min_eig: f64,
    pub elliptic: bool,
    /// Ellipticity within the coverage tolerance band, when a report was
    /// supplied; this is the flag compared against `covered`.
    pub elliptic_in_band: Option<bool>,
    /// Coverage verdict for the same pair when a report was supplied.
    pub covered: Option<bool>,
}

/// Ellipticity over a lattice of positions and codirections.
#[derive(Debug, Clone)]
pub struct ScanReport {
    pub records: Vec<ScanRecord>,
    pub n_elliptic: usize,
    /// Smallest solenoidal eigenvalue seen anywhere.
    pub min_eig_global: f64,
    /// Fraction of pairs where the band ellipticity flag equals the
    /// coverage flag, both at the coverage report's tolerances.
    pub agreement: Option<f64>,
}

impl ScanReport {
    pub fn fraction(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.n_elliptic as f64 / self.records.len() as f64
    }
}

/// Checks ellipticity on the same position/codirection lattice that the
/// coverage scan uses, so the two verdicts can be compared pairwise.
///
/// A coverage report passed in must come from a `completeness_check` with
/// the same `n_pos` and `n_dir`.  The pointwise elliptic flag is exact;
/// for the agreement figure the criterion is re-evaluated inside the
/// report's distance and angle tolerances, since coverage deliberately
/// accepts rays that only nearly pass through the test point.
pub fn ellipticity_scan(
    chart: &MetricChart,
    family: &GeodesicFamily,
    order: u8,
    n_pos: usize,
    n_dir: usize,
    opts: &TraceOptions,
    coverage: Option<&CoverageReport>,
) -> Result<ScanReport> {
    let positions = scan_positions(chart, n_pos);
    let dirs = scan_codirections(chart, n_dir);
    let n_pairs = positions.len() * dirs.len();
    if let Some(cov) = coverage {
        if cov.flags.len() != n_pairs {
            return Err(GxError::InvalidArgument(format!(
                "coverage report has {} pairs, scan lattice has {}",
                cov.flags.len(),
                n_pairs
            )));
        }
    }

    let records = (0..n_pairs)
        .into_par_iter()
        .map(|idx| {
            let x = positions[idx / dirs.len()];
            let xi = dirs[idx % dirs.len()];
            let sym = principal_symbol(chart, family, &x, &xi, order, opts)?;
            let rep = ellipticity_check(chart, &sym)?;
            let elliptic_in_band = match coverage {
                // An exactly elliptic pair is elliptic in any band.
                Some(_) if rep.elliptic => Some(true),
                Some(cov) => Some(elliptic_within_band(
                    chart,
                    family,
                    &x,
                    &xi,
                    cov.dist_tol,
                    cov.ang_tol,
                    opts,
                )?),
                None => None,
            };
            Ok(ScanRecord {
                x,
                xi,
                min_eig: rep.min_eig_solenoidal,
                elliptic: rep.elliptic,
                elliptic_in_band,
                covered: coverage.map(|c| c.flags[idx]),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let n_elliptic = records.iter().filter(|r| r.elliptic).count();
    let min_eig_global = records
        .iter()
        .map(|r| r.min_eig)
        .fold(f64::INFINITY, f64::min);
    let agreement = coverage.map(|_| {
        let agree = records
            .iter()
            .filter(|r| r.covered == r.elliptic_in_band)
            .count();
        agree as f64 / records.len().max(1) as f64
    });

    Ok(ScanReport {
        records,
        n_elliptic,
        min_eig_global,
        agreement,
    })
}
