//! Desk-scale numerical probes of the transform: singular spectra on the
//! solenoidal subspace, stability constants, and closed-loop
//! reconstruction from ray data.
//!
//! Everything here works in an explicit orthonormal basis of the discrete
//! solenoidal subspace, so dense linear algebra applies; grids are capped
//! accordingly.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::decomposition::DiffOps;
use crate::error::{GxError, Result};
use crate::grid::{Grid, Vec3};
use crate::manifold::{comp_count, BoundaryNormalFrame, MetricChart, Support, SymmetricTensorField};
use crate::tolerances;
use crate::transform::{vec_to_field, SobolevNorms, TensorMass, TransformMatrix};

/// Orthonormal bases of the discrete potential and solenoidal subspaces
/// over the grid nodes inside M, in the tensor mass inner product.
///
/// The potential subspace is the range of the symmetrized derivative on
/// interior-supported potentials; the solenoidal subspace is its
/// orthogonal complement within the inside-M degrees of freedom.  Columns
/// are full-length DOF vectors.
pub struct ProbeSpace {
    pub order: u8,
    pub grid: Grid,
    pub mass: TensorMass,
    /// Flat DOF indices whose node lies in M, component-major.
    pub inside: Vec<usize>,
    /// Solenoidal basis, `dof_len x k` with `k = inside - pot_dim`.
    pub sol: DMatrix<f64>,
    /// Potential basis, `dof_len x pot_dim`.
    pub pot: DMatrix<f64>,
    /// Derivative operators of the order; absent for scalars, which have
    /// no potential directions.
    pub ops: Option<DiffOps>,
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Builds the probe bases on a grid small enough for dense factorization.
pub fn probe_space(chart: &MetricChart, grid: &Grid, order: u8) -> Result<ProbeSpace> {
    if grid.dims[..grid.dim]
        .iter()
        .any(|&d| d > tolerances::PROBE_GRID_CAP)
    {
        return Err(GxError::InvalidArgument(format!(
            "probe grid {:?} exceeds the dense cap of {} nodes per axis",
            &grid.dims[..grid.dim],
            tolerances::PROBE_GRID_CAP
        )));
    }
    let nc = comp_count(order, grid.dim);
    let n = grid.len();
    let dof_len = nc * n;
    let mass = TensorMass::build(chart, grid, order)?;

    let mut inside_nodes = Vec::new();
    for (node, x) in grid.iter_nodes() {
        if chart.level_m(&x) <= 0.0 {
            inside_nodes.push(node);
        }
    }
    let inside: Vec<usize> = (0..nc)
        .flat_map(|c| inside_nodes.iter().map(move |&f| c * n + f))
        .collect();
    let n_in = inside.len();
    if n_in == 0 {
        return Err(GxError::InvalidArgument(
            "no grid nodes inside M".into(),
        ));
    }

    // Potential columns: the derivative of each interior potential DOF.
    let (mut pot, ops) = if order == 0 {
        (DMatrix::zeros(dof_len, 0), None)
    } else {
        let ops = DiffOps::build(chart, grid, order)?;
        let nc_in = comp_count(order - 1, grid.dim);
        let mut cols: Vec<Vec<f64>> = Vec::new();
        let mut e = vec![0.0; nc_in * n];
        for c in 0..nc_in {
            for node in 0..n {
                if !ops.interior()[node] {
                    continue;
                }
                e[c * n + node] = 1.0;
                cols.push(ops.d_apply(&e));
                e[c * n + node] = 0.0;
            }
        }
        let m = DMatrix::from_fn(dof_len, cols.len(), |i, j| cols[j][i]);
        (m, Some(ops))
    };
    let p = pot.ncols();

    // Orthonormalize the potential columns in the mass inner product.
    if p > 0 {
        let mpot = apply_mass(&mass, &pot);
        let gram = symmetrize(&(pot.transpose() * &mpot));
        let chol = Cholesky::new(gram).ok_or(GxError::InvalidArgument(
            "potential columns are rank deficient".into(),
        ))?;
        let li = chol
            .l()
            .try_inverse()
            .expect("triangular Cholesky factor is invertible");
        pot *= li.transpose();
    }

    // Canonical inside-M basis with the potential span projected out:
    // S = C - pot W with W = pot^T M C, then an eigen-split of the
    // projected Gram C^T M C - W^T W keeps the nonnull directions.
    let mpot = apply_mass(&mass, &pot);
    let mut w = DMatrix::zeros(p, n_in);
    for (k, &dk) in inside.iter().enumerate() {
        for j in 0..p {
            w[(j, k)] = mpot[(dk, j)];
        }
    }
    let mc = {
        // M columns of the canonical inside DOFs, restricted to inside rows.
        let mut g = DMatrix::zeros(n_in, n_in);
        let mut e = vec![0.0; dof_len];
        for (k, &dk) in inside.iter().enumerate() {
            e[dk] = 1.0;
            let me = mass.apply(&e);
            e[dk] = 0.0;
            for (k2, &dk2) in inside.iter().enumerate() {
                g[(k2, k)] = me[dk2];
            }
        }
        g
    };
    let gram_s = symmetrize(&(mc - w.transpose() * &w));
    let ee = gram_s.symmetric_eigen();
    let lam_max = ee.eigenvalues.iter().fold(0.0f64, |m, &v| m.max(v));
    let keep: Vec<usize> = (0..n_in)
        .filter(|&i| ee.eigenvalues[i] > tolerances::BASIS_DROP_REL * lam_max)
        .collect();
    if keep.len() != n_in - p {
        return Err(GxError::InvalidArgument(format!(
            "solenoidal rank collapsed: kept {} of {} expected",
            keep.len(),
            n_in - p
        )));
    }

    // sol = (C - pot W) V lambda^{-1/2}, assembled without the dense C.
    let mut v = DMatrix::zeros(n_in, keep.len());
    for (col, &i) in keep.iter().enumerate() {
        let s = ee.eigenvalues[i].sqrt();
        for r in 0..n_in {
            v[(r, col)] = ee.eigenvectors[(r, i)] / s;
        }
    }
    let mut sol = DMatrix::zeros(dof_len, keep.len());
    for (k, &dk) in inside.iter().enumerate() {
        for col in 0..keep.len() {
            sol[(dk, col)] += v[(k, col)];
        }
    }
    sol -= pot.clone() * (w * v);

    Ok(ProbeSpace {
        order,
        grid: grid.clone(),
        mass,
        inside,
        sol,
        pot,
        ops,
    })
}

fn apply_mass(mass: &TensorMass, m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    for j in 0..m.ncols() {
        let col: Vec<f64> = m.column(j).iter().copied().collect();
        let mc = mass.apply(&col);
        for (i, v) in mc.iter().enumerate() {
            out[(i, j)] = *v;
        }
    }
    out
}

impl ProbeSpace {
    pub fn sol_dim(&self) -> usize {
        self.sol.ncols()
    }

    pub fn pot_dim(&self) -> usize {
        self.pot.ncols()
    }

    pub fn dof_len(&self) -> usize {
        self.mass.dof_len()
    }

    /// Coordinates of the solenoidal projection of `dof`.
    pub fn sol_coords(&self, dof: &[f64]) -> Vec<f64> {
        let md = self.mass.apply(dof);
        let mv = DVector::from_vec(md);
        (self.sol.transpose() * mv).iter().copied().collect()
    }

    /// DOF vector of the given solenoidal coordinates.
    pub fn sol_dof(&self, coords: &[f64]) -> Vec<f64> {
        let c = DVector::from_column_slice(coords);
        (&self.sol * c).iter().copied().collect()
    }

    /// Largest interior divergence residual over the solenoidal columns,
    /// relative to the column norm.  Zero for scalars.
    pub fn divergence_defect(&self) -> f64 {
        let Some(ops) = &self.ops else {
            return 0.0;
        };
        let n = self.grid.len();
        let mut worst = 0.0f64;
        for j in 0..self.sol.ncols() {
            let col: Vec<f64> = self.sol.column(j).iter().copied().collect();
            let div = ops.divergence(&col);
            let mut defect = 0.0f64;
            for (c_in, plane) in div.chunks_exact(n).enumerate() {
                let _ = c_in;
                for (node, v) in plane.iter().enumerate() {
                    if ops.interior()[node] {
                        defect = defect.max(v.abs());
                    }
                }
            }
            worst = worst.max(defect / self.mass.norm(&col).max(f64::MIN_POSITIVE));
        }
        worst
    }
}

/// Singular spectrum of the ray transform on the probe subspaces.
#[derive(Debug, Clone)]
pub struct InjectivityReport {
    pub order: u8,
    pub grid_dims: [usize; 3],
    pub n_rays: usize,
    pub sol_dim: usize,
    pub pot_dim: usize,
    /// Extremes over the solenoidal subspace.
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Smallest solenoidal singular values, ascending, at most 20.
    pub spectrum_tail: Vec<f64>,
    /// Extremes over the potential subspace.  The smallest value tracks the
    /// annihilation of resolved potentials and decays under refinement; the
    /// largest is dominated by grid-scale potentials whose symmetrized
    /// derivative the ray quadrature cannot resolve, and saturates near
    /// 0.2 x the solenoidal top regardless of resolution.
    pub pot_sigma_min: f64,
    pub pot_sigma_max: f64,
}

/// Dense image of a basis under the transform, with rows scaled by the
/// square root of the data weights so plain singular values are taken in
/// the weighted data norm.
fn weighted_image(a: &TransformMatrix, basis: &DMatrix<f64>) -> DMatrix<f64> {
    let cols: Vec<Vec<f64>> = (0..basis.ncols())
        .into_par_iter()
        .map(|j| {
            let col: Vec<f64> = basis.column(j).iter().copied().collect();
            let mut img = a.forward(&col);
            for (v, mu) in img.iter_mut().zip(&a.mu) {
                *v *= mu.max(0.0).sqrt();
            }
            img
        })
        .collect();
    DMatrix::from_fn(a.n_rays(), basis.ncols(), |i, j| cols[j][i])
}

fn singular_values_ascending(m: DMatrix<f64>) -> Vec<f64> {
    let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| a.partial_cmp(b).expect("singular values are finite"));
    sv
}

/// Dense SVD of the transform restricted to the probe's solenoidal and
/// potential subspaces.  A positive solenoidal floor together with a
/// collapsed potential spectrum is the desk-scale injectivity signal.
pub fn injectivity_probe(a: &TransformMatrix, space: &ProbeSpace) -> Result<InjectivityReport> {
    if a.order != space.order || a.dof_len() != space.dof_len() {
        return Err(GxError::DimensionMismatch {
            expected: space.dof_len(),
            got: a.dof_len(),
        });
    }
    let sv_sol = singular_values_ascending(weighted_image(a, &space.sol));
    let (pot_sigma_min, pot_sigma_max) = if space.pot_dim() == 0 {
        (0.0, 0.0)
    } else {
        let sv = singular_values_ascending(weighted_image(a, &space.pot));
        (sv[0], *sv.last().expect("nonempty spectrum"))
    };
    let tail: Vec<f64> = sv_sol.iter().copied().take(20).collect();
    Ok(InjectivityReport {
        order: a.order,
        grid_dims: space.grid.dims,
        n_rays: a.n_rays(),
        sol_dim: space.sol_dim(),
        pot_dim: space.pot_dim(),
        sigma_min: *sv_sol.first().expect("nonempty spectrum"),
        sigma_max: *sv_sol.last().expect("nonempty spectrum"),
        spectrum_tail: tail,
        pot_sigma_min,
        pot_sigma_max,
    })
}

/// Result of a normal-equation reconstruction in the solenoidal span.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub coords: Vec<f64>,
    pub dof: Vec<f64>,
    pub iters: usize,
    pub converged: bool,
    pub rel_residual: f64,
    pub residual_curve: Vec<f64>,
    /// Relative mass-norm error against the supplied ground truth.
    pub rel_error: Option<f64>,
}

/// Conjugate gradients on the normal equations of the weighted transform,
/// restricted to the probe's solenoidal subspace.  Non-convergence is
/// reported through the flag and residual curve, not as an error.
pub fn reconstruct(
    a: &TransformMatrix,
    space: &ProbeSpace,
    data: &[f64],
    max_iter: usize,
    truth: Option<&[f64]>,
) -> Result<Reconstruction> {
    if data.len() != a.n_rays() {
        return Err(GxError::DimensionMismatch {
            expected: a.n_rays(),
            got: data.len(),
        });
    }
    let k = space.sol_dim();
    let b = weighted_image(a, &space.sol);
    let wd = DVector::from_fn(a.n_rays(), |i, _| data[i] * a.mu[i].max(0.0).sqrt());
    let g = symmetrize(&(b.transpose() * &b));
    let rhs = b.transpose() * wd;

    let rhs_norm = rhs.norm();
    let mut c = DVector::zeros(k);
    let mut r = rhs.clone();
    let mut pdir = r.clone();
    let mut rr = r.norm_squared();
    let mut curve = Vec::new();
    let mut iters = 0;
    let tol = tolerances::TOL_CG_RECONSTRUCT * rhs_norm;
    if rhs_norm > 0.0 {
        while iters < max_iter && rr.sqrt() > tol {
            let gp = &g * &pdir;
            let alpha = rr / pdir.dot(&gp);
            if !alpha.is_finite() {
                break;
            }
            c += &pdir * alpha;
            r -= gp * alpha;
            let rr_new = r.norm_squared();
            curve.push(rr_new.sqrt());
            pdir = &r + &pdir * (rr_new / rr);
            rr = rr_new;
            iters += 1;
        }
    }
    let rel_residual = if rhs_norm > 0.0 {
        rr.sqrt() / rhs_norm
    } else {
        0.0
    };
    let coords: Vec<f64> = c.iter().copied().collect();
    let dof = space.sol_dof(&coords);
    let rel_error = truth.map(|t| {
        let diff: Vec<f64> = dof.iter().zip(t).map(|(u, v)| u - v).collect();
        space.mass.norm(&diff) / space.mass.norm(t).max(f64::MIN_POSITIVE)
    });
    Ok(Reconstruction {
        coords,
        dof,
        iters,
        converged: rel_residual <= tolerances::TOL_CG_RECONSTRUCT || rhs_norm == 0.0,
        rel_residual,
        residual_curve: curve,
        rel_error,
    })
}

/// Estimated stability constant of the normal operator on the solenoidal
/// span.
#[derive(Debug, Clone)]
pub struct StabilityReport {
    pub order: u8,
    /// Reported constant: every solenoidal `f` on this grid satisfies
    /// `|f| <= c * (norm of N f)`, since the literal norm dominates the
    /// Hilbertian one used in the eigensolve.
    pub c: f64,
    /// Largest literal-norm ratio actually observed; tightness witness.
    pub c_observed: f64,
    /// Smallest eigenvalue of the Hilbertian Gram of the normal images.
    pub lambda_min: f64,
    /// Same eigenvalue from inverse power iteration, as a cross-check.
    pub lambda_min_power: f64,
    pub norm: &'static str,
    /// DOF vector of the field realizing `c_observed`.
    pub maximizer: Vec<f64>,
    /// Best observed ratio after each random trial.
    pub history: Vec<f64>,
    pub finite: bool,
}

/// Smallest eigenvalue by inverse power iteration on the Cholesky solves.
fn inverse_power_min(h: &DMatrix<f64>, chol: &Cholesky<f64, nalgebra::Dyn>) -> f64 {
    let k = h.nrows();
    let mut v = DVector::from_fn(k, |i, _| 1.0 + (i as f64 * 0.7).sin());
    v /= v.norm();
    let mut lam = 0.0;
    for _ in 0..500 {
        let w = chol.solve(&v);
        let wn = w.norm();
        if wn == 0.0 {
            break;
        }
        let vn = &w / wn;
        let new_lam = vn.dot(&(h * &vn));
        let done = (new_lam - lam).abs() <= 1e-14 * new_lam.abs().max(1e-300);
        lam = new_lam;
        v = vn;
        if done {
            break;
        }
    }
    lam
}

/// Smooth random field: per component, a handful of Gaussian bumps with
/// centers inside M.  Deterministic under a seeded generator.
pub fn random_bump_field(
    chart: &MetricChart,
    grid: &Grid,
    order: u8,
    rng: &mut ChaCha8Rng,
) -> SymmetricTensorField {
    let nc = comp_count(order, grid.dim);
    let span = (grid.bbox.max - grid.bbox.min).norm();
    let mut bumps: Vec<Vec<(Vec3, f64, f64)>> = Vec::with_capacity(nc);
    for _ in 0..nc {
        let mut list = Vec::with_capacity(6);
        while list.len() < 6 {
            let mut x = Vec3::zeros();
            for a in 0..grid.dim {
                x[a] = rng.gen_range(grid.bbox.min[a]..grid.bbox.max[a]);
            }
            if chart.level_m(&x) >= 0.0 {
                continue;
            }
            let width = span * rng.gen_range(0.05..0.15);
            let amp = rng.gen_range(-1.0..1.0f64);
            list.push((x, width, amp));
        }
        bumps.push(list);
    }
    SymmetricTensorField::from_fn(order, grid.clone(), Support::M, |x, out| {
        for (c, list) in bumps.iter().enumerate() {
            let mut acc = 0.0;
            for (ctr, width, amp) in list {
                let d2 = (x - ctr).norm_squared();
                acc += amp * (-0.5 * d2 / (width * width)).exp();
            }
            out[c] = acc;
        }
    })
}

/// Estimates the stability constant by an eigensolve of the Hilbertian
/// norm Gram of the normal-operator images, tightened by seeded random
/// trials under the literal norm.  Second-order tensors use the collar
/// norm (a frame is required); lower orders use the first-order norm over
/// M1, where the estimate loses no derivatives.
pub fn stability_constant(
    chart: &MetricChart,
    a: &TransformMatrix,
    space: &ProbeSpace,
    frame: Option<&BoundaryNormalFrame>,
    trials: usize,
    seed: u64,
) -> Result<StabilityReport> {
    if a.order != space.order || a.dof_len() != space.dof_len() {
        return Err(GxError::DimensionMismatch {
            expected: space.dof_len(),
            got: a.dof_len(),
        });
    }
    let order = a.order;
    if order == 2 && frame.is_none() {
        return Err(GxError::Unsupported(
            "second-order stability needs a boundary collar frame".into(),
        ));
    }
    let sob = SobolevNorms::build(chart, &space.grid, order, frame)?;
    let k = space.sol_dim();

    // Normal-operator images of the basis columns.
    let images: Vec<SymmetricTensorField> = (0..k)
        .into_par_iter()
        .map(|j| {
            let col: Vec<f64> = space.sol.column(j).iter().copied().collect();
            let img = a.normal(&space.mass, &col);
            vec_to_field(order, &space.grid, Support::Box, &img)
        })
        .collect::<Result<Vec<_>>>()?;
    let (h, norm_name) = if order == 2 {
        (sob.collar_h2_hilbert_gram(&images)?, "collar second-order")
    } else {
        (sob.h1_m1_gram(&images)?, "first-order over M1")
    };

    let ee = h.clone().symmetric_eigen();
    let mut lam_min = f64::INFINITY;
    let mut lam_max = f64::NEG_INFINITY;
    let mut min_idx = 0;
    for (i, &lam) in ee.eigenvalues.iter().enumerate() {
        if lam < lam_min {
            lam_min = lam;
            min_idx = i;
        }
        lam_max = lam_max.max(lam);
    }
    let finite = lam_min > 1e-14 * lam_max.max(0.0);

    let lam_power = match Cholesky::new(symmetrize(&h)) {
        Some(chol) => inverse_power_min(&h, &chol),
        None => 0.0,
    };

    let literal = |f: &SymmetricTensorField| -> Result<f64> {
        if order == 2 {
            sob.collar_h2_literal(f)
        } else {
            Ok(sob.h1_m1_sq(f)?.max(0.0).sqrt())
        }
    };

    // Candidate from the eigensolve; its image is the same linear
    // combination of the precomputed images.
    let combine = |coords: &DVector<f64>| -> Result<SymmetricTensorField> {
        let mut img = SymmetricTensorField::zeros(order, space.grid.clone(), Support::Box);
        for (j, w) in coords.iter().enumerate() {
            if *w != 0.0 {
                img.axpy(*w, &images[j])?;
            }
        }
        Ok(img)
    };

    let ratio_of = |coords: &DVector<f64>| -> Result<f64> {
        let fnorm = coords.norm();
        if fnorm == 0.0 {
            return Ok(0.0);
        }
        let denom = literal(&combine(coords)?)?;
        Ok(if denom > 0.0 {
            fnorm / denom
        } else {
            f64::INFINITY
        })
    };

    let mut best_ratio = 0.0f64;
    let mut best_coords = DVector::zeros(k);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut history = Vec::with_capacity(trials);
    let eig_coords = DVector::from_fn(k, |i, _| ee.eigenvectors[(i, min_idx)]);
    let candidates = std::iter::once(eig_coords).chain((0..trials).map(|_| {
        let bump = random_bump_field(chart, &space.grid, order, &mut rng);
        DVector::from_vec(space.sol_coords(&bump.comps.concat()))
    }));
    for (t, coords) in candidates.enumerate() {
        let ratio = ratio_of(&coords)?;
        if ratio > best_ratio {
            best_ratio = ratio;
            best_coords = coords;
        }
        if t > 0 {
            history.push(best_ratio);
        }
    }
    let maximizer = space.sol_dof(best_coords.as_slice());

    let c = if finite {
        1.0 / lam_min.sqrt()
    } else {
        f64::INFINITY
    };
    Ok(StabilityReport {
        order,
        c,
        c_observed: best_ratio,
        lambda_min: lam_min,
        lambda_min_power: lam_power,
        norm: norm_name,
        maximizer,
        history,
        finite,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::family::{DirWindow, GeodesicFamily, SurfaceSpec};
    use crate::geodesics::TraceOptions;
    use crate::manifold::{boundary_frame, euclidean_disc};
    use rand::SeedableRng;
    use std::f64::consts::PI;

    fn disc_fan(chart: &MetricChart, n_s: usize, n_psi: usize) -> GeodesicFamily {
        let spec = GeodesicFamily::default_fan(chart, n_s, n_psi).unwrap();
        GeodesicFamily::build(chart, vec![spec], &TraceOptions::default()).unwrap()
    }

    fn gapped_fan(chart: &MetricChart, n_s: usize, n_psi: usize) -> GeodesicFamily {
        let mut spec = GeodesicFamily::default_fan(chart, n_s, n_psi).unwrap();
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
                arc: Some((-0.25 * PI, 0.25 * PI)),
            },
            s => s,
        };
        spec.window = DirWindow::Fan {
            half_angle: 30f64.to_radians(),
            n_psi,
        };
        GeodesicFamily::build(chart, vec![spec], &TraceOptions::default()).unwrap()
    }

    #[test]
    fn probe_space_splits_inside_dofs() {
        let chart = euclidean_disc();
        let grid = chart.grid(16).unwrap();
        let space = probe_space(&chart, &grid, 2).unwrap();

        let n_interior = space
            .ops
            .as_ref()
            .unwrap()
            .interior()
            .iter()
            .filter(|&&b| b)
            .count();
        assert_eq!(space.pot_dim(), 2 * n_interior);
        assert_eq!(space.sol_dim(), space.inside.len() - space.pot_dim());

        // Mass-orthonormal columns, and the two spans are orthogonal.
        let msol = apply_mass(&space.mass, &space.sol);
        let gram = space.sol.transpose() * &msol;
        for i in 0..space.sol_dim() {
            for j in 0..space.sol_dim() {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (gram[(i, j)] - want).abs() <= 1e-12,
                    "gram ({i},{j}) = {}",
                    gram[(i, j)]
                );
            }
        }
        let cross = space.pot.transpose() * msol;
        assert!(cross.iter().all(|v| v.abs() <= 1e-10), "spans not orthogonal");

        assert!(
            space.divergence_defect() <= 1e-8,
            "interior divergence defect {}",
            space.divergence_defect()
        );

        // The cap guards the dense path.
        let big = chart.grid(40).unwrap();
        assert!(matches!(
            probe_space(&chart, &big, 2),
            Err(GxError::InvalidArgument(_))
        ));
    }

    #[test]
    fn injectivity_probe_separates_potentials_and_is_deterministic() {
        let chart = euclidean_disc();
        let grid = chart.grid(16).unwrap();
        let fam = disc_fan(&chart, 40, 30);
        let a = TransformMatrix::assemble(&chart, &grid, 2, &fam).unwrap();
        let space = probe_space(&chart, &grid, 2).unwrap();
        let rep = injectivity_probe(&a, &space).unwrap();

        assert!(rep.sigma_min > 0.0, "sigma_min = {}", rep.sigma_min);
        assert!(rep.sigma_min <= rep.sigma_max);
        // Kernel directions are measurably softer than the solenoidal
        // subspace at both ends of the spectrum.  The potential floor is
        // resolution-limited (grid-scale potentials have an unresolved
        // symmetrized derivative), so the separation is a fixed factor
        // rather than machine zero; see the acceptance suite for the
        // measured scaling under refinement.
        assert!(
            rep.pot_sigma_min <= 0.25 * rep.sigma_min,
            "potential floor not separated: {} vs {}",
            rep.pot_sigma_min,
            rep.sigma_min
        );
        assert!(
            rep.pot_sigma_max <= 0.3 * rep.sigma_max,
            "potential top not separated: {} vs {}",
            rep.pot_sigma_max,
            rep.sigma_max
        );
        // A resolved potential (smooth, vanishing at the rim together with
        // its gradient) is annihilated to quadrature error, far below the
        // hat-span worst case.
        let ops = space.ops.as_ref().unwrap();
        let n_nodes = grid.len();
        let mut v = vec![0.0; 2 * n_nodes];
        for (node, x) in grid.iter_nodes() {
            let w = (1.0 - (x[0] * x[0] + x[1] * x[1])).max(0.0).powi(3);
            v[node] = w * (0.3 + 0.7 * x[0]);
            v[n_nodes + node] = w * (x[1] - 0.4 * x[0]);
        }
        let dv = ops.d_apply(&v);
        let img = a.forward(&dv);
        let leak = a.data_inner(&img, &img).sqrt() / space.mass.norm(&dv);
        assert!(
            leak <= 1e-2 * rep.sigma_max,
            "smooth potential leak {} vs sigma_max {}",
            leak,
            rep.sigma_max
        );
        assert_eq!(rep.spectrum_tail.len(), 20.min(rep.sol_dim));
        assert!(rep
            .spectrum_tail
            .windows(2)
            .all(|w| w[0] <= w[1]));

        // Identical inputs reproduce the spectrum bit-for-bit candidates.
        let a2 = TransformMatrix::assemble(&chart, &grid, 2, &fam).unwrap();
        let space2 = probe_space(&chart, &grid, 2).unwrap();
        let rep2 = injectivity_probe(&a2, &space2).unwrap();
        assert!(
            (rep.sigma_min - rep2.sigma_min).abs() <= 1e-12 * rep.sigma_min,
            "probe not deterministic: {} vs {}",
            rep.sigma_min,
            rep2.sigma_min
        );
    }

    #[test]
    fn directional_gap_collapses_the_smallest_singular_value() {
        let chart = euclidean_disc();
        let grid = chart.grid(16).unwrap();
        let space = probe_space(&chart, &grid, 2).unwrap();

        let full = TransformMatrix::assemble(&chart, &grid, 2, &disc_fan(&chart, 40, 30)).unwrap();
        let gapped =
            TransformMatrix::assemble(&chart, &grid, 2, &gapped_fan(&chart, 40, 30)).unwrap();
        let rep_full = injectivity_probe(&full, &space).unwrap();
        let rep_gap = injectivity_probe(&gapped, &space).unwrap();
        assert!(
            rep_gap.sigma_min <= 0.05 * rep_full.sigma_min,
            "gap did not collapse the floor: {} vs {}",
            rep_gap.sigma_min,
            rep_full.sigma_min
        );
    }

    #[test]
    fn reconstruction_closes_the_loop_and_rejects_potentials() {
        let chart = euclidean_disc();
        let grid = chart.grid(16).unwrap();
        let fam = disc_fan(&chart, 40, 30);
        let a = TransformMatrix::assemble(&chart, &grid, 2, &fam).unwrap();
        let space = probe_space(&chart, &grid, 2).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let bump = random_bump_field(&chart, &grid, 2, &mut rng);
        let truth = space.sol_dof(&space.sol_coords(&bump.comps.concat()));
        let data = a.forward(&truth);
        let rec = reconstruct(&a, &space, &data, 5000, Some(&truth)).unwrap();
        assert!(rec.converged, "CG stalled at {}", rec.rel_residual);
        // The CG tolerance of 1e-8 on the normal equations leaves a
        // condition-limited floor around 1e-6 in the recovered field.
        let err = rec.rel_error.unwrap();
        assert!(err <= 1e-4, "closed-loop error {err}");

        // Data from v = (1 - r^2) c: dv is linear, so interpolation and
        // the trapezoid rule are both exact and ray integrals telescope to
        // v at the rim, which is zero.  The pipeline rejects this data at
        // machine level.
        let n = grid.len();
        let mut dv = vec![0.0; 3 * n];
        for (node, x) in grid.iter_nodes() {
            let (c0, c1) = (0.8, -0.55);
            dv[node] = -2.0 * x[0] * c0;
            dv[n + node] = -(x[1] * c0 + x[0] * c1);
            dv[2 * n + node] = -2.0 * x[1] * c1;
        }
        let pot_data = a.forward(&dv);
        let rec_p = reconstruct(&a, &space, &pot_data, 5000, None).unwrap();
        let ratio = space.mass.norm(&rec_p.dof) / space.mass.norm(&dv);
        assert!(ratio <= 1e-6, "potential data leaked {ratio}");

        // A generic smooth potential only annihilates to discretization
        // error, and the normal-equation solve amplifies the residual by
        // the inverse of the soft solenoidal spectrum; the rejection ratio
        // is a few percent at this resolution.
        let mut dvg = vec![0.0; 3 * n];
        for (node, x) in grid.iter_nodes() {
            let r2 = x[0] * x[0] + x[1] * x[1];
            let w = (1.0 - r2).max(0.0).powi(3);
            let wp = -6.0 * (1.0 - r2).max(0.0).powi(2);
            let (v0, v1) = (0.3 + 0.7 * x[0], x[1] - 0.4 * x[0]);
            dvg[node] = wp * x[0] * v0 + w * 0.7;
            dvg[n + node] = 0.5 * (wp * x[1] * v0 + wp * x[0] * v1 + w * (-0.4));
            dvg[2 * n + node] = wp * x[1] * v1 + w;
        }
        let gen_data = a.forward(&dvg);
        let rec_g = reconstruct(&a, &space, &gen_data, 5000, None).unwrap();
        let ratio_g = space.mass.norm(&rec_g.dof) / space.mass.norm(&dvg);
        assert!(ratio_g <= 5e-2, "generic potential data leaked {ratio_g}");

        // Zero data short-circuits.
        let rec0 = reconstruct(&a, &space, &vec![0.0; a.n_rays()], 100, None).unwrap();
        assert_eq!(rec0.iters, 0);
        assert!(rec0.converged);
        assert!(space.mass.norm(&rec0.dof) == 0.0);
    }

    #[test]
    fn stability_constant_bounds_all_tested_ratios() {
        let chart = euclidean_disc();
        let grid = chart.grid(12).unwrap();
        let fam = disc_fan(&chart, 30, 24);
        let a = TransformMatrix::assemble(&chart, &grid, 0, &fam).unwrap();
        let space = probe_space(&chart, &grid, 0).unwrap();
        let rep = stability_constant(&chart, &a, &space, None, 10, 3).unwrap();

        assert!(rep.finite, "complete fan should give a finite constant");
        assert!(rep.c_observed <= rep.c * (1.0 + 1e-10), "witness exceeds bound");
        assert!(
            (rep.lambda_min - rep.lambda_min_power).abs() <= 1e-6 * rep.lambda_min,
            "eigen routes disagree: {} vs {}",
            rep.lambda_min,
            rep.lambda_min_power
        );
        assert_eq!(rep.history.len(), 10);
        assert!(rep.history.windows(2).all(|w| w[0] <= w[1]));

        // Fresh seeded fields respect the reported constant.
        let sob = SobolevNorms::build(&chart, &grid, 0, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        for _ in 0..25 {
            let f = random_bump_field(&chart, &grid, 0, &mut rng);
            let coords = space.sol_coords(&f.comps.concat());
            let dof = space.sol_dof(&coords);
            let fnorm = space.mass.norm(&dof);
            if fnorm == 0.0 {
                continue;
            }
            let nf = vec_to_field(0, &grid, Support::Box, &a.normal(&space.mass, &dof)).unwrap();
            let denom = sob.h1_m1_sq(&nf).unwrap().max(0.0).sqrt();
            assert!(
                fnorm <= rep.c * denom * (1.0 + 1e-8),
                "constant violated: {} vs {}",
                fnorm / denom,
                rep.c
            );
        }
    }

    #[test]
    fn second_order_stability_uses_the_collar_norm() {
        let chart = euclidean_disc();
        let grid = chart.grid(12).unwrap();
        let fam = disc_fan(&chart, 30, 24);
        let a = TransformMatrix::assemble(&chart, &grid, 2, &fam).unwrap();
        let space = probe_space(&chart, &grid, 2).unwrap();

        assert!(matches!(
            stability_constant(&chart, &a, &space, None, 0, 0),
            Err(GxError::Unsupported(_))
        ));

        let frame = boundary_frame(&chart, 0.25).unwrap();
        let rep = stability_constant(&chart, &a, &space, Some(&frame), 5, 11).unwrap();
        assert!(rep.finite);
        assert!(rep.c_observed > 0.0);
        assert!(rep.c_observed <= rep.c * (1.0 + 1e-10));
        assert_eq!(rep.norm, "collar second-order");
    }
}

