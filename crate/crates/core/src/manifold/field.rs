//! Symmetric tensor fields of order 0, 1, 2 sampled on a grid.

use super::MetricChart;
use crate::error::{GxError, Result};
use crate::grid::{Grid, Vec3};

/// Region a field is supported on; evaluation returns 0 outside it
/// (extension by zero).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Support {
    M,
    M1,
    /// No mask: the field lives on the whole box (e.g. raw normal-operator
    /// output before restriction).
    Box,
}

/// Independent components of a symmetric tensor of the given order in `dim`
/// dimensions, as (i, j) index pairs with `i <= j` in lexicographic order.
/// Order 0 yields a single empty pair `(0, 0)` placeholder, order 1 the
/// pairs `(i, i)` are abused to mean the single index `i`.
pub fn comp_pairs(order: u8, dim: usize) -> Vec<(usize, usize)> {
    match order {
        0 => vec![(0, 0)],
        1 => (0..dim).map(|i| (i, i)).collect(),
        2 => {
            let mut v = Vec::new();
            for i in 0..dim {
                for j in i..dim {
                    v.push((i, j));
                }
            }
            v
        }
        _ => panic!("tensor order {order} not supported"),
    }
}

pub fn comp_count(order: u8, dim: usize) -> usize {
    match order {
        0 => 1,
        1 => dim,
        2 => dim * (dim + 1) / 2,
        _ => panic!("tensor order {order} not supported"),
    }
}

/// Value of a tensor field at one point (stored components, `i <= j`).
#[derive(Debug, Clone, Copy)]
pub struct TensorValue {
    pub order: u8,
    pub dim: usize,
    pub comps: [f64; 6],
}

impl TensorValue {
    pub fn zero(order: u8, dim: usize) -> Self {
        TensorValue {
            order,
            dim,
            comps: [0.0; 6],
        }
    }

    /// Full bilinear contraction `f(a, b)` of an order-2 value.
    pub fn bilinear(&self, a: &Vec3, b: &Vec3) -> f64 {
        assert_eq!(self.order, 2, "bilinear contraction needs an order-2 value");
        let mut acc = 0.0;
        for (c, (i, j)) in comp_pairs(2, self.dim).into_iter().enumerate() {
            acc += self.comps[c]
                * if i == j {
                    a[i] * b[i]
                } else {
                    a[i] * b[j] + a[j] * b[i]
                };
        }
        acc
    }

    /// Contraction with `m` copies of a vector: `<f, v^(x) m>`.
    /// Off-diagonal components count twice for order 2.
    pub fn contract(&self, v: &Vec3) -> f64 {
        match self.order {
            0 => self.comps[0],
            1 => (0..self.dim).map(|i| self.comps[i] * v[i]).sum(),
            2 => {
                let mut acc = 0.0;
                for (c, (i, j)) in comp_pairs(2, self.dim).into_iter().enumerate() {
                    let mult = if i == j { 1.0 } else { 2.0 };
                    acc += mult * self.comps[c] * v[i] * v[j];
                }
                acc
            }
            _ => unreachable!(),
        }
    }
}

/// A symmetric tensor field of order 0, 1, or 2, with each independent
/// component stored as a flat node array on a shared grid.
#[derive(Debug, Clone)]
pub struct SymmetricTensorField {
    pub order: u8,
    pub grid: Grid,
    pub support: Support,
    /// `comps[c][node]`, components in `i <= j` lexicographic order.
    pub comps: Vec<Vec<f64>>,
}

impl SymmetricTensorField {
    pub fn zeros(order: u8, grid: Grid, support: Support) -> Self {
        let n = comp_count(order, grid.dim);
        let len = grid.len();
        SymmetricTensorField {
            order,
            grid,
            support,
            comps: vec![vec![0.0; len]; n],
        }
    }

    /// Sample a closure at every grid node.  The closure writes the stored
    /// components for the node into `out`.
    pub fn from_fn(
        order: u8,
        grid: Grid,
        support: Support,
        mut f: impl FnMut(&Vec3, &mut [f64]),
    ) -> Self {
        let mut field = Self::zeros(order, grid, support);
        let ncomp = field.comps.len();
        let mut buf = vec![0.0; ncomp];
        for (node, x) in field.grid.iter_nodes() {
            buf.iter_mut().for_each(|b| *b = 0.0);
            f(&x, &mut buf);
            for c in 0..ncomp {
                field.comps[c][node] = buf[c];
            }
        }
        field
    }

    pub fn n_comps(&self) -> usize {
        self.comps.len()
    }

    fn masked_out(&self, chart: &MetricChart, x: &Vec3) -> bool {
        match self.support {
            Support::M => chart.level_m(x) > 0.0,
            Support::M1 => chart.level_m1(x) > 0.0,
            Support::Box => false,
        }
    }

    /// Evaluate by cubic interpolation, extended by zero outside the support
    /// region.  Errors when `x` leaves the bounding box.
    pub fn eval(&self, chart: &MetricChart, x: &Vec3) -> Result<TensorValue> {
        if self.masked_out(chart, x) {
            return Ok(TensorValue::zero(self.order, self.grid.dim));
        }
        let st = self.grid.stencil(x)?;
        let mut val = TensorValue::zero(self.order, self.grid.dim);
        for (c, comp) in self.comps.iter().enumerate() {
            val.comps[c] = st.apply(comp);
        }
        Ok(val)
    }

    /// In-place `self += a * other`; grids must match.
    pub fn axpy(&mut self, a: f64, other: &Self) -> Result<()> {
        if self.order != other.order || self.grid != other.grid {
            return Err(GxError::GridMismatch(
                "axpy operands live on different grids or orders".into(),
            ));
        }
        for (sc, oc) in self.comps.iter_mut().zip(&other.comps) {
            for (s, o) in sc.iter_mut().zip(oc) {
                *s += a * o;
            }
        }
        Ok(())
    }

    /// Plain (unweighted) max-abs over all stored components.
    pub fn max_abs(&self) -> f64 {
        self.comps
            .iter()
            .flat_map(|c| c.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}
