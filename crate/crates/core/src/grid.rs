//! Uniform node-centered grids over a chart bounding box, with cubic
//! interpolation stencils.
//!
//! Conventions shared by every module:
//!
//! * points and (co)vectors use a fixed 3-component representation; charts of
//!   dimension 2 freeze the third coordinate at 0,
//! * nodes sit at `min + i * h` per axis; non-periodic axes use
//!   `h = (max - min) / (n - 1)` so the first/last nodes lie on the box faces,
//!   periodic axes use `h = period / n` (the last node is one step short of
//!   the seam),
//! * flat node indices are row-major with the last axis fastest, matching the
//!   on-disk field layout.

use crate::error::{GxError, Result};

pub type Vec3 = nalgebra::Vector3<f64>;
pub type Mat3 = nalgebra::Matrix3<f64>;

/// Axis-aligned bounding box of a chart.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub min: Vec3,
    pub max: Vec3,
}

impl BBox {
    pub fn new_2d(min: [f64; 2], max: [f64; 2]) -> Self {
        BBox {
            min: Vec3::new(min[0], min[1], 0.0),
            max: Vec3::new(max[0], max[1], 0.0),
        }
    }

    pub fn new_3d(min: [f64; 3], max: [f64; 3]) -> Self {
        BBox {
            min: Vec3::from_column_slice(&min),
            max: Vec3::from_column_slice(&max),
        }
    }

    pub fn diameter(&self) -> f64 {
        (self.max - self.min).norm()
    }

    /// Containment check on the first `dim` axes.
    pub fn contains(&self, x: &Vec3, dim: usize) -> bool {
        (0..dim).all(|a| x[a] >= self.min[a] && x[a] <= self.max[a])
    }
}

/// Uniform node-centered grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub dim: usize,
    /// Nodes per axis; unused axes hold 1.
    pub dims: [usize; 3],
    pub bbox: BBox,
    /// Period per axis, if the axis wraps.  The bounding box of a periodic
    /// axis must span exactly one period.
    pub periods: [Option<f64>; 3],
}

impl Grid {
    pub fn new_2d(nx: usize, ny: usize, bbox: BBox) -> Result<Self> {
        Self::build(2, [nx, ny, 1], bbox, [None, None, None])
    }

    pub fn new_3d(dims: [usize; 3], bbox: BBox, periods: [Option<f64>; 3]) -> Result<Self> {
        Self::build(3, dims, bbox, periods)
    }

    pub fn new(
        dim: usize,
        dims: [usize; 3],
        bbox: BBox,
        periods: [Option<f64>; 3],
    ) -> Result<Self> {
        Self::build(dim, dims, bbox, periods)
    }

    fn build(
        dim: usize,
        dims: [usize; 3],
        bbox: BBox,
        periods: [Option<f64>; 3],
    ) -> Result<Self> {
        for a in 0..dim {
            if dims[a] < 4 {
                return Err(GxError::InvalidArgument(format!(
                    "grid axis {a} needs at least 4 nodes for cubic interpolation, got {}",
                    dims[a]
                )));
            }
            if !(bbox.max[a] > bbox.min[a]) {
                return Err(GxError::InvalidArgument(format!(
                    "grid axis {a} has empty extent"
                )));
            }
            if let Some(p) = periods[a] {
                let span = bbox.max[a] - bbox.min[a];
                if (span - p).abs() > 1e-12 * p.abs() {
                    return Err(GxError::InvalidArgument(format!(
                        "periodic axis {a}: box span {span} must equal the period {p}"
                    )));
                }
            }
        }
        for a in dim..3 {
            if dims[a] != 1 {
                return Err(GxError::DimensionMismatch {
                    expected: 1,
                    got: dims[a],
                });
            }
        }
        Ok(Grid {
            dim,
            dims,
            bbox,
            periods,
        })
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Node spacing along an axis.
    pub fn spacing(&self, axis: usize) -> f64 {
        let span = self.bbox.max[axis] - self.bbox.min[axis];
        if self.periods[axis].is_some() {
            span / self.dims[axis] as f64
        } else {
            span / (self.dims[axis] - 1) as f64
        }
    }

    pub fn min_spacing(&self) -> f64 {
        (0..self.dim)
            .map(|a| self.spacing(a))
            .fold(f64::INFINITY, f64::min)
    }

    /// Trapezoidal quadrature weight of a node: full cells inside, half
    /// cells at the ends of bounded axes.
    pub fn node_weight(&self, flat: usize) -> f64 {
        let idx = self.unflat(flat);
        let mut w = 1.0;
        for a in 0..self.dim {
            w *= self.spacing(a);
            if self.periods[a].is_none() && (idx[a] == 0 || idx[a] == self.dims[a] - 1) {
                w *= 0.5;
            }
        }
        w
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.dim).map(|a| self.spacing(a)).product()
    }

    pub fn flat(&self, idx: [usize; 3]) -> usize {
        (idx[0] * self.dims[1] + idx[1]) * self.dims[2] + idx[2]
    }

    pub fn unflat(&self, flat: usize) -> [usize; 3] {
        let k = flat % self.dims[2];
        let rest = flat / self.dims[2];
        let j = rest % self.dims[1];
        let i = rest / self.dims[1];
        [i, j, k]
    }

    pub fn node(&self, idx: [usize; 3]) -> Vec3 {
        let mut x = Vec3::zeros();
        for a in 0..self.dim {
            x[a] = self.bbox.min[a] + idx[a] as f64 * self.spacing(a);
        }
        x
    }

    pub fn node_flat(&self, flat: usize) -> Vec3 {
        self.node(self.unflat(flat))
    }

    pub fn iter_nodes(&self) -> impl Iterator<Item = (usize, Vec3)> + '_ {
        (0..self.len()).map(move |f| (f, self.node_flat(f)))
    }

    /// Wrap periodic coordinates of `x` into the box span.
    pub fn wrap(&self, x: &Vec3) -> Vec3 {
        let mut y = *x;
        for a in 0..self.dim {
            if let Some(p) = self.periods[a] {
                y[a] = self.bbox.min[a] + (y[a] - self.bbox.min[a]).rem_euclid(p);
            }
        }
        y
    }

    /// Cubic interpolation stencil at `x`: up to 4 nodes per axis with
    /// Catmull-Rom weights, wrapped on periodic axes.  On bounded axes the
    /// outermost cells use linearly extrapolated ghost values folded back
    /// onto edge nodes (clamped-end cubic), so linear fields reproduce
    /// exactly everywhere in the box and quadratics away from the edges.
    pub fn stencil(&self, x: &Vec3) -> Result<Stencil> {
        let xw = self.wrap(x);
        if !self.bbox.contains(&xw, self.dim) {
            return Err(GxError::OutsideChart {
                x: xw[0],
                y: xw[1],
                z: xw[2],
            });
        }
        let mut axes = [[(0usize, 0.0f64); 4]; 3];
        for a in 0..3 {
            if a >= self.dim {
                axes[a] = [(0, 1.0), (0, 0.0), (0, 0.0), (0, 0.0)];
                continue;
            }
            let h = self.spacing(a);
            let n = self.dims[a] as isize;
            let s = (xw[a] - self.bbox.min[a]) / h;
            // Base cell [i, i+1]; clamp so u stays in [0, 1] at the far face.
            let mut i = s.floor() as isize;
            let top = if self.periods[a].is_some() { n - 1 } else { n - 2 };
            i = i.clamp(0, top);
            let u = s - i as f64;
            let w = catmull_rom(u);
            let mut entries = [(0usize, 0.0f64); 4];
            let mut slot = 0;
            let mut push = |entries: &mut [(usize, f64); 4], j: usize, wj: f64| {
                for e in entries.iter_mut().take(slot) {
                    if e.0 == j {
                        e.1 += wj;
                        return;
                    }
                }
                entries[slot] = (j, wj);
                slot += 1;
            };
            for (k, off) in (-1isize..=2).enumerate() {
                let j = i + off;
                if self.periods[a].is_some() {
                    push(&mut entries, j.rem_euclid(n) as usize, w[k]);
                } else if j < 0 {
                    // ghost f(-1) := 2 f(0) - f(1)
                    push(&mut entries, 0, 2.0 * w[k]);
                    push(&mut entries, 1, -w[k]);
                } else if j > n - 1 {
                    // ghost f(n) := 2 f(n-1) - f(n-2)
                    push(&mut entries, (n - 1) as usize, 2.0 * w[k]);
                    push(&mut entries, (n - 2) as usize, -w[k]);
                } else {
                    push(&mut entries, j as usize, w[k]);
                }
            }
            axes[a] = entries;
        }
        Ok(Stencil {
            axes,
            dims: self.dims,
        })
    }
}

/// Separable interpolation stencil: 4 (node, weight) pairs per active axis.
#[derive(Debug, Clone, Copy)]
pub struct Stencil {
    axes: [[(usize, f64); 4]; 3],
    dims: [usize; 3],
}

impl Stencil {
    /// Visit every stencil node with its product weight.  Nodes may repeat
    /// near clamped edges; visitors must accumulate.
    pub fn for_each(&self, mut f: impl FnMut(usize, f64)) {
        for &(i0, w0) in &self.axes[0] {
            if w0 == 0.0 {
                continue;
            }
            for &(i1, w1) in &self.axes[1] {
                if w1 == 0.0 {
                    continue;
                }
                for &(i2, w2) in &self.axes[2] {
                    if w2 == 0.0 {
                        continue;
                    }
                    f((i0 * self.dims[1] + i1) * self.dims[2] + i2, w0 * w1 * w2);
                }
            }
        }
    }

    /// Interpolate a scalar array laid out on the owning grid.
    pub fn apply(&self, values: &[f64]) -> f64 {
        let mut acc = 0.0;
        self.for_each(|node, w| acc += w * values[node]);
        acc
    }
}

/// Node-wise partial derivatives of a scalar plane: second-order centered
/// differences, one-sided at the ends of bounded axes, wrapped on periodic
/// ones.  Returns one plane per active axis.
pub fn grid_gradient(grid: &Grid, plane: &[f64]) -> Vec<Vec<f64>> {
    let len = grid.len();
    let mut out = vec![vec![0.0; len]; grid.dim];
    for flat in 0..len {
        let idx = grid.unflat(flat);
        for a in 0..grid.dim {
            let n = grid.dims[a];
            let h = grid.spacing(a);
            let at = |i: usize| -> f64 {
                let mut jdx = idx;
                jdx[a] = i;
                plane[grid.flat(jdx)]
            };
            let i = idx[a];
            let d = if grid.periods[a].is_some() {
                (at((i + 1) % n) - at((i + n - 1) % n)) / (2.0 * h)
            } else if i == 0 {
                (-3.0 * at(0) + 4.0 * at(1) - at(2)) / (2.0 * h)
            } else if i == n - 1 {
                (3.0 * at(n - 1) - 4.0 * at(n - 2) + at(n - 3)) / (2.0 * h)
            } else {
                (at(i + 1) - at(i - 1)) / (2.0 * h)
            };
            out[a][flat] = d;
        }
    }
    out
}

fn catmull_rom(u: f64) -> [f64; 4] {
    let u2 = u * u;
    let u3 = u2 * u;
    [
        0.5 * (-u3 + 2.0 * u2 - u),
        0.5 * (3.0 * u3 - 5.0 * u2 + 2.0),
        0.5 * (-3.0 * u3 + 4.0 * u2 + u),
        0.5 * (u3 - u2),
    ]
}

/// Quintic smoothstep: C^2, 0 below 0, 1 above 1, monotone in between.
pub fn smoothstep(t: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else if t >= 1.0 {
        1.0
    } else {
        t * t * t * (t * (6.0 * t - 15.0) + 10.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::TAU;

    fn grid2(n: usize) -> Grid {
        Grid::new_2d(n, n, BBox::new_2d([-1.0, -1.0], [1.0, 1.0])).unwrap()
    }

    #[test]
    fn node_layout_row_major() {
        let g = grid2(5);
        assert_eq!(g.flat([0, 0, 0]), 0);
        assert_eq!(g.flat([0, 1, 0]), 1);
        assert_eq!(g.flat([1, 0, 0]), 5);
        assert_eq!(g.unflat(7), [1, 2, 0]);
        let x = g.node([4, 0, 0]);
        assert!((x[0] - 1.0).abs() < 1e-15 && (x[1] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn spacing_periodic_vs_bounded() {
        let g = Grid::new_3d(
            [5, 5, 8],
            BBox::new_3d([0.0, 0.0, 0.0], [1.0, 1.0, 2.0]),
            [None, None, Some(2.0)],
        )
        .unwrap();
        assert!((g.spacing(0) - 0.25).abs() < 1e-15);
        assert!((g.spacing(2) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn node_weights_sum_to_box_volume() {
        let g = grid2(9);
        let total: f64 = (0..g.len()).map(|f| g.node_weight(f)).sum();
        assert!((total - 4.0).abs() < 1e-12, "total {total}");
        let gp = Grid::new_3d(
            [5, 5, 8],
            BBox::new_3d([0.0, 0.0, 0.0], [1.0, 1.0, 2.0]),
            [None, None, Some(2.0)],
        )
        .unwrap();
        let total: f64 = (0..gp.len()).map(|f| gp.node_weight(f)).sum();
        assert!((total - 2.0).abs() < 1e-12, "total {total}");
    }

    #[test]
    fn gradient_is_exact_on_linear_fields() {
        let g = grid2(9);
        let vals: Vec<f64> = (0..g.len())
            .map(|f| {
                let x = g.node_flat(f);
                2.0 + 3.0 * x[0] - 0.5 * x[1]
            })
            .collect();
        let grad = grid_gradient(&g, &vals);
        for f in 0..g.len() {
            assert!((grad[0][f] - 3.0).abs() < 1e-12);
            assert!((grad[1][f] + 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_wraps_on_periodic_axes() {
        let g = Grid::new_3d(
            [4, 4, 16],
            BBox::new_3d([0.0, 0.0, 0.0], [1.0, 1.0, TAU]),
            [None, None, Some(TAU)],
        )
        .unwrap();
        let vals: Vec<f64> = (0..g.len()).map(|f| g.node_flat(f)[2].sin()).collect();
        let grad = grid_gradient(&g, &vals);
        // Centered differences of sin on a wrapped axis: cos within O(h^2).
        let h = g.spacing(2);
        let tol = h * h;
        for f in 0..g.len() {
            let z = g.node_flat(f)[2];
            assert!((grad[2][f] - z.cos()).abs() < tol);
        }
    }

    #[test]
    fn stencil_weights_sum_to_one() {
        let g = grid2(9);
        for &x in &[
            Vec3::new(0.13, -0.77, 0.0),
            Vec3::new(-1.0, 1.0, 0.0),
            Vec3::new(0.999, -0.999, 0.0),
        ] {
            let st = g.stencil(&x).unwrap();
            let mut sum = 0.0;
            st.for_each(|_, w| sum += w);
            assert!((sum - 1.0).abs() < 1e-12, "sum {sum} at {x:?}");
        }
    }

    #[test]
    fn interpolation_reproduces_quadratics() {
        let g = grid2(17);
        let vals: Vec<f64> = (0..g.len())
            .map(|f| {
                let p = g.node_flat(f);
                1.5 + 0.3 * p[0] - 0.7 * p[1] + 0.25 * p[0] * p[0] + 0.1 * p[0] * p[1]
            })
            .collect();
        // Stay one cell away from the clamped edges, where the rule degrades.
        for &(x, y) in &[(0.21, -0.37), (0.5, 0.5), (-0.63, 0.11)] {
            let q = Vec3::new(x, y, 0.0);
            let want = 1.5 + 0.3 * x - 0.7 * y + 0.25 * x * x + 0.1 * x * y;
            let got = g.stencil(&q).unwrap().apply(&vals);
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn periodic_axis_wraps_queries_and_stencils() {
        let g = Grid::new_3d(
            [5, 5, 16],
            BBox::new_3d([-1.0, -1.0, 0.0], [1.0, 1.0, std::f64::consts::TAU]),
            [None, None, Some(std::f64::consts::TAU)],
        )
        .unwrap();
        let vals: Vec<f64> = (0..g.len())
            .map(|f| g.node_flat(f)[2].sin() + 2.0)
            .collect();
        let a = g
            .stencil(&Vec3::new(0.0, 0.0, 0.1))
            .unwrap()
            .apply(&vals);
        let b = g
            .stencil(&Vec3::new(0.0, 0.0, 0.1 + std::f64::consts::TAU))
            .unwrap()
            .apply(&vals);
        let c = g
            .stencil(&Vec3::new(0.0, 0.0, 0.1 - std::f64::consts::TAU))
            .unwrap()
            .apply(&vals);
        assert!((a - b).abs() < 1e-14);
        assert!((a - c).abs() < 1e-14);
    }

    #[test]
    fn outside_query_errors() {
        let g = grid2(5);
        assert!(g.stencil(&Vec3::new(1.5, 0.0, 0.0)).is_err());
    }

    proptest! {
        #[test]
        fn smoothstep_in_range_and_monotone(a in -0.5f64..1.5, b in -0.5f64..1.5) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let (slo, shi) = (smoothstep(lo), smoothstep(hi));
            prop_assert!((0.0..=1.0).contains(&slo));
            prop_assert!((0.0..=1.0).contains(&shi));
            prop_assert!(slo <= shi + 1e-15);
        }

        #[test]
        fn interpolation_reproduces_linear_everywhere(
            x in -0.99f64..0.99, y in -0.99f64..0.99,
            c0 in -2.0f64..2.0, cx in -2.0f64..2.0, cy in -2.0f64..2.0,
        ) {
            let g = grid2(9);
            let vals: Vec<f64> = (0..g.len())
                .map(|f| {
                    let p = g.node_flat(f);
                    c0 + cx * p[0] + cy * p[1]
                })
                .collect();
            let got = g.stencil(&Vec3::new(x, y, 0.0)).unwrap().apply(&vals);
            let want = c0 + cx * x + cy * y;
            prop_assert!((got - want).abs() < 1e-10);
        }
    }
}
