//! Tensor grids on rectangular boxes and the quadrature operators built on them.
//!
//! Fields are stored row-major with axis 0 varying slowest. Every integral is a
//! weighted sum over nodes with the tensor product of the per-axis quadrature
//! weights; marginalization over a subset of axes uses the same weights
//! restricted to that subset, so the discrete operators satisfy Fubini exactly
//! up to rounding.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Inputs longer than this are reduced on the rayon pool. Every output entry
/// is still summed sequentially in a fixed order, so results do not depend on
/// the thread count.
const PAR_THRESHOLD: usize = 1 << 15;
const CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    #[default]
    Midpoint,
    Trapezoid,
}

/// Neumaier-compensated accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    #[inline]
    pub(crate) fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub(crate) fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

pub(crate) fn compensated_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut acc = CompensatedSum::default();
    for x in xs {
        acc.add(x);
    }
    acc.value()
}

/// One coordinate direction of the box, discretized by a fixed quadrature rule.
#[derive(Debug, Clone, PartialEq)]
pub struct Axis {
    lower: f64,
    upper: f64,
    scheme: Scheme,
    nodes: Vec<f64>,
    weights: Vec<f64>,
    truncated: bool,
}

impl Axis {
    /// Uniform nodes on `[lower, upper]`.
    ///
    /// The midpoint rule places one node at the centre of each of `node_count`
    /// equal cells; the trapezoid rule places nodes on the cell boundaries,
    /// endpoints included, with halved end weights.
    pub fn new(lower: f64, upper: f64, node_count: usize, scheme: Scheme) -> Result<Self> {
        if !(lower.is_finite() && upper.is_finite()) || lower >= upper {
            return Err(Error::config(
                "axis.lower/upper",
                format!("need finite lower < upper, got [{lower}, {upper}]"),
            ));
        }
        if node_count < 2 {
            return Err(Error::config(
                "axis.nodes",
                format!("need at least 2 nodes, got {node_count}"),
            ));
        }
        let len = upper - lower;
        let (nodes, weights) = match scheme {
            Scheme::Midpoint => {
                let h = len / node_count as f64;
                let nodes = (0..node_count)
                    .map(|k| lower + (k as f64 + 0.5) * h)
                    .collect();
                (nodes, vec![h; node_count])
            }
            Scheme::Trapezoid => {
                let h = len / (node_count - 1) as f64;
                let nodes = (0..node_count)
                    .map(|k| {
                        if k + 1 == node_count {
                            upper
                        } else {
                            lower + k as f64 * h
                        }
                    })
                    .collect();
                let mut weights = vec![h; node_count];
                weights[0] = 0.5 * h;
                weights[node_count - 1] = 0.5 * h;
                (nodes, weights)
            }
        };
        Ok(Axis {
            lower,
            upper,
            scheme,
            nodes,
            weights,
            truncated: false,
        })
    }

    /// Marks this axis as a finite cutoff of an unbounded interval.
    pub fn with_truncation(mut self, truncated: bool) -> Self {
        self.truncated = truncated;
        self
    }

    pub fn lower(&self) -> f64 {
        self.lower
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn truncated(&self) -> bool {
        self.truncated
    }

    /// Same interval and rule with twice as many nodes.
    pub fn refined(&self) -> Self {
        let n = match self.scheme {
            Scheme::Midpoint => 2 * self.node_count(),
            Scheme::Trapezoid => 2 * self.node_count() - 1,
        };
        Axis::new(self.lower, self.upper, n, self.scheme)
            .expect("refining a valid axis")
            .with_truncation(self.truncated)
    }

    /// Quadrature of a one-dimensional table sampled at this axis' nodes.
    pub fn quadrature(&self, values: &[f64]) -> f64 {
        assert_eq!(values.len(), self.node_count(), "table length");
        compensated_sum(values.iter().zip(&self.weights).map(|(v, a)| v * a))
    }
}

/// A tensor grid over the box `I_1 x ... x I_n`.
#[derive(Debug, Clone)]
pub struct GridSpec {
    axes: Vec<Axis>,
    shape: Vec<usize>,
    volumes: Vec<f64>,
}

impl PartialEq for GridSpec {
    fn eq(&self, other: &Self) -> bool {
        self.axes == other.axes
    }
}

impl GridSpec {
    /// Problem grids have at least two axes.
    pub fn new(axes: Vec<Axis>) -> Result<Self> {
        if axes.len() < 2 {
            return Err(Error::config(
                "grid.axes",
                format!("need at least 2 axes, got {}", axes.len()),
            ));
        }
        Ok(Self::from_axes(axes))
    }

    /// `dims` identical axes `[lower, upper]` with `node_count` midpoint nodes each.
    pub fn uniform(dims: usize, lower: f64, upper: f64, node_count: usize) -> Result<Self> {
        let axis = Axis::new(lower, upper, node_count, Scheme::Midpoint)?;
        Self::new(vec![axis; dims])
    }

    fn from_axes(axes: Vec<Axis>) -> Self {
        let shape: Vec<usize> = axes.iter().map(Axis::node_count).collect();
        let volumes = tensor_weights(&axes);
        GridSpec {
            axes,
            shape,
            volumes,
        }
    }

    pub fn dims(&self) -> usize {
        self.axes.len()
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn axis(&self, i: usize) -> &Axis {
        &self.axes[i]
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Number of grid nodes.
    pub fn len(&self) -> usize {
        self.volumes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.volumes.is_empty()
    }

    /// Product of the per-axis quadrature weights at every node.
    pub fn volumes(&self) -> &[f64] {
        &self.volumes
    }

    pub fn any_truncated(&self) -> bool {
        self.axes.iter().any(Axis::truncated)
    }

    pub fn check_axis(&self, i: usize) -> Result<()> {
        if i >= self.dims() {
            return Err(Error::Domain(format!(
                "axis index {i} out of range for a {}-dimensional grid",
                self.dims()
            )));
        }
        Ok(())
    }

    /// Splits the flat layout around axis `i` into `(pre, n_i, post)`.
    pub(crate) fn split(&self, i: usize) -> (usize, usize, usize) {
        let pre = self.shape[..i].iter().product();
        let post = self.shape[i + 1..].iter().product();
        (pre, self.shape[i], post)
    }

    /// Multi-index of a flat node position.
    pub fn unravel(&self, mut flat: usize, idx: &mut [usize]) {
        for (slot, &n) in idx.iter_mut().zip(&self.shape).rev() {
            *slot = flat % n;
            flat /= n;
        }
    }

    pub fn ravel(&self, idx: &[usize]) -> usize {
        idx.iter()
            .zip(&self.shape)
            .fold(0, |acc, (&k, &n)| acc * n + k)
    }

    /// Coordinates of the node at `flat`.
    pub fn coords(&self, flat: usize) -> Vec<f64> {
        let mut idx = vec![0; self.dims()];
        self.unravel(flat, &mut idx);
        idx.iter()
            .zip(&self.axes)
            .map(|(&k, a)| a.nodes[k])
            .collect()
    }

    /// The grid with axis `i` removed. For a two-dimensional grid this is a
    /// one-dimensional grid, which is allowed only as a residual grid.
    pub fn residual(&self, i: usize) -> Result<GridSpec> {
        self.check_axis(i)?;
        let axes = self
            .axes
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, a)| a.clone())
            .collect();
        Ok(Self::from_axes(axes))
    }

    /// Every axis refined once.
    pub fn refined(&self) -> GridSpec {
        Self::from_axes(self.axes.iter().map(Axis::refined).collect())
    }

    /// One-dimensional grid along a single axis; used for serializing
    /// per-axis tables such as multipliers.
    pub fn single_axis(axis: Axis) -> GridSpec {
        Self::from_axes(vec![axis])
    }
}

/// Row-major tensor product of the quadrature weights of `axes`.
fn tensor_weights(axes: &[Axis]) -> Vec<f64> {
    let mut out = vec![1.0];
    for axis in axes {
        let mut next = Vec::with_capacity(out.len() * axis.node_count());
        for &v in &out {
            next.extend(axis.weights.iter().map(|a| v * a));
        }
        out = next;
    }
    out
}

/// Real values of a function of `n` variables at every node of a grid.
#[derive(Debug, Clone)]
pub struct ScalarField {
    grid: Arc<GridSpec>,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: Arc<GridSpec>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Shape(format!(
                "field has {} values, grid has {} nodes",
                values.len(),
                grid.len()
            )));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!(
                "non-finite field value {} at node {k}",
                values[k]
            )));
        }
        Ok(ScalarField { grid, values })
    }

    pub fn constant(grid: Arc<GridSpec>, c: f64) -> Self {
        let values = vec![c; grid.len()];
        ScalarField { grid, values }
    }

    /// Samples `f` at the node coordinates.
    pub fn from_fn(grid: Arc<GridSpec>, mut f: impl FnMut(&[f64]) -> f64) -> Result<Self> {
        let dims = grid.dims();
        let mut idx = vec![0; dims];
        let mut x = vec![0.0; dims];
        let mut values = Vec::with_capacity(grid.len());
        for flat in 0..grid.len() {
            grid.unravel(flat, &mut idx);
            for d in 0..dims {
                x[d] = grid.axes[d].nodes[idx[d]];
            }
            values.push(f(&x));
        }
        Self::new(grid, values)
    }

    /// Broadcasts per-axis tables `t_i(xi_i)` combined by `combine` at every node.
    pub fn from_axis_tables(
        grid: Arc<GridSpec>,
        tables: &[Vec<f64>],
        mut combine: impl FnMut(&[f64]) -> f64,
    ) -> Result<Self> {
        check_tables(&grid, tables)?;
        let dims = grid.dims();
        let mut idx = vec![0; dims];
        let mut row = vec![0.0; dims];
        let mut values = Vec::with_capacity(grid.len());
        for flat in 0..grid.len() {
            grid.unravel(flat, &mut idx);
            for d in 0..dims {
                row[d] = tables[d][idx[d]];
            }
            values.push(combine(&row));
        }
        Self::new(grid, values)
    }

    pub fn grid(&self) -> &Arc<GridSpec> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.grid.clone(), self.values.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &ScalarField, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same_grid(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Self::new(self.grid.clone(), values)
    }

    pub fn check_same_grid(&self, other: &ScalarField) -> Result<()> {
        if Arc::ptr_eq(&self.grid, &other.grid) || *self.grid == *other.grid {
            Ok(())
        } else {
            Err(Error::Shape("fields live on different grids".into()))
        }
    }

    /// Largest absolute value.
    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Prescribed one-dimensional marginals `g_i(xi_i)`, one table per axis.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalSet {
    tables: Vec<Vec<f64>>,
}

impl MarginalSet {
    pub fn new(grid: &GridSpec, tables: Vec<Vec<f64>>) -> Result<Self> {
        check_tables(grid, &tables)?;
        for (i, t) in tables.iter().enumerate() {
            if let Some(v) = t.iter().find(|v| !v.is_finite()) {
                return Err(Error::Domain(format!("marginal {i} has non-finite entry {v}")));
            }
        }
        Ok(MarginalSet { tables })
    }

    pub fn zeros(grid: &GridSpec) -> Self {
        MarginalSet {
            tables: grid.shape().iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// `g_i = int g w d xi_i^c` for every axis.
    pub fn from_field(g: &ScalarField, w: &ScalarField) -> Result<Self> {
        let tables = (0..g.grid().dims())
            .map(|i| weighted_marginal(g, w, i))
            .collect::<Result<Vec<_>>>()?;
        Self::new(g.grid(), tables)
    }

    pub fn tables(&self) -> &[Vec<f64>] {
        &self.tables
    }

    pub fn table(&self, i: usize) -> &[f64] {
        &self.tables[i]
    }

    pub fn dims(&self) -> usize {
        self.tables.len()
    }

    /// Axis quadrature of each table; all equal `int g w` for consistent data.
    pub fn masses(&self, grid: &GridSpec) -> Vec<f64> {
        self.tables
            .iter()
            .zip(grid.axes())
            .map(|(t, a)| a.quadrature(t))
            .collect()
    }
}

pub(crate) fn check_tables(grid: &GridSpec, tables: &[Vec<f64>]) -> Result<()> {
    if tables.len() != grid.dims() {
        return Err(Error::Shape(format!(
            "{} axis tables for a {}-dimensional grid",
            tables.len(),
            grid.dims()
        )));
    }
    for (i, (t, &n)) in tables.iter().zip(grid.shape()).enumerate() {
        if t.len() != n {
            return Err(Error::Shape(format!(
                "table {i} has {} entries, axis has {n} nodes",
                t.len()
            )));
        }
    }
    Ok(())
}

/// Weighted sum over all axes except `i`: `out[k] = sum v * prod_{j != i} a_j`.
pub(crate) fn sum_except_axis(grid: &GridSpec, values: &[f64], i: usize) -> Vec<f64> {
    debug_assert_eq!(values.len(), grid.len());
    let (pre, n_i, post) = grid.split(i);
    let pre_w = tensor_weights(&grid.axes[..i]);
    let post_w = tensor_weights(&grid.axes[i + 1..]);
    let slab = |k: usize| {
        let mut acc = CompensatedSum::default();
        for (a, wa) in pre_w.iter().enumerate() {
            let base = (a * n_i + k) * post;
            let mut inner = CompensatedSum::default();
            for (v, wb) in values[base..base + post].iter().zip(&post_w) {
                inner.add(v * wb);
            }
            acc.add(inner.value() * wa);
        }
        acc.value()
    };
    debug_assert_eq!(pre, pre_w.len());
    if values.len() >= PAR_THRESHOLD {
        (0..n_i).into_par_iter().map(slab).collect()
    } else {
        (0..n_i).map(slab).collect()
    }
}

/// Weighted sum over axis `i` only; the result is laid out on the residual grid.
pub(crate) fn sum_along_axis(grid: &GridSpec, values: &[f64], i: usize) -> Vec<f64> {
    debug_assert_eq!(values.len(), grid.len());
    let (pre, n_i, post) = grid.split(i);
    let weights = grid.axes[i].weights();
    let block = |a: usize| {
        let mut out = vec![CompensatedSum::default(); post];
        for (k, wk) in weights.iter().enumerate() {
            let base = (a * n_i + k) * post;
            for (acc, v) in out.iter_mut().zip(&values[base..base + post]) {
                acc.add(v * wk);
            }
        }
        out.into_iter().map(|s| s.value()).collect::<Vec<_>>()
    };
    if values.len() >= PAR_THRESHOLD {
        (0..pre).into_par_iter().flat_map_iter(block).collect()
    } else {
        (0..pre).flat_map(block).collect()
    }
}

/// Quadrature of the node-wise product `values * volumes` over the whole grid.
pub(crate) fn sum_all(grid: &GridSpec, values: &[f64]) -> f64 {
    debug_assert_eq!(values.len(), grid.len());
    let chunk_sum = |(v, a): (&[f64], &[f64])| compensated_sum(v.iter().zip(a).map(|(x, y)| x * y));
    let partials: Vec<f64> = if values.len() >= PAR_THRESHOLD {
        values
            .par_chunks(CHUNK)
            .zip(grid.volumes.par_chunks(CHUNK))
            .map(chunk_sum)
            .collect()
    } else {
        values
            .chunks(CHUNK)
            .zip(grid.volumes.chunks(CHUNK))
            .map(chunk_sum)
            .collect()
    };
    compensated_sum(partials)
}

/// `sum f * w * dV` over the grid.
pub fn integrate(f: &ScalarField, w: &ScalarField) -> Result<f64> {
    f.check_same_grid(w)?;
    let prod: Vec<f64> = f.values.iter().zip(&w.values).map(|(a, b)| a * b).collect();
    Ok(sum_all(&f.grid, &prod))
}

/// `w_i(xi_i)`: `w` integrated over every axis except `i`.
pub fn marginal_density(w: &ScalarField, i: usize) -> Result<Vec<f64>> {
    w.grid.check_axis(i)?;
    Ok(sum_except_axis(&w.grid, &w.values, i))
}

/// `w_i^c(xi_i^c)`: `w` integrated over axis `i` only, on the residual grid.
pub fn comarginal_density(w: &ScalarField, i: usize) -> Result<ScalarField> {
    let residual = Arc::new(w.grid.residual(i)?);
    let values = sum_along_axis(&w.grid, &w.values, i);
    ScalarField::new(residual, values)
}

/// Weighted marginal `int f w d xi_i^c` as a table over axis `i`.
pub fn weighted_marginal(f: &ScalarField, w: &ScalarField, i: usize) -> Result<Vec<f64>> {
    f.check_same_grid(w)?;
    f.grid.check_axis(i)?;
    let prod: Vec<f64> = f.values.iter().zip(&w.values).map(|(a, b)| a * b).collect();
    Ok(sum_except_axis(&f.grid, &prod, i))
}

/// `(int |f|^p w)^(1/p)`.
pub fn weighted_p_norm(f: &ScalarField, w: &ScalarField, p: f64) -> Result<f64> {
    if !(p > 1.0 && p.is_finite()) {
        return Err(Error::config("p", format!("need finite p > 1, got {p}")));
    }
    let abs_p = f.map(|v| v.abs().powf(p))?;
    Ok(integrate(&abs_p, w)?.powf(1.0 / p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn unit_square(n: usize) -> Arc<GridSpec> {
        Arc::new(GridSpec::uniform(2, 0.0, 1.0, n).unwrap())
    }

    #[test]
    fn midpoint_axis_on_unit_interval() {
        let a = Axis::new(0.0, 1.0, 4, Scheme::Midpoint).unwrap();
        assert_eq!(a.nodes(), &[0.125, 0.375, 0.625, 0.875]);
        assert_eq!(a.weights(), &[0.25; 4]);
    }

    #[test]
    fn two_point_trapezoid() {
        let a = Axis::new(0.0, 1.0, 2, Scheme::Trapezoid).unwrap();
        assert_eq!(a.nodes(), &[0.0, 1.0]);
        assert_eq!(a.weights(), &[0.5, 0.5]);
    }

    #[test]
    fn symmetric_midpoint_weights() {
        let a = Axis::new(-3.0, 3.0, 6, Scheme::Midpoint).unwrap();
        assert_eq!(a.weights(), &[1.0; 6]);
    }

    #[test]
    fn axis_rejects_bad_input() {
        assert!(matches!(
            Axis::new(1.0, 1.0, 4, Scheme::Midpoint),
            Err(Error::Config { .. })
        ));
        assert!(Axis::new(0.0, 1.0, 1, Scheme::Midpoint).is_err());
        assert!(Axis::new(0.0, f64::INFINITY, 4, Scheme::Trapezoid).is_err());
        assert!(GridSpec::new(vec![Axis::new(0.0, 1.0, 4, Scheme::Midpoint).unwrap()]).is_err());
    }

    #[test]
    fn trapezoid_weights_sum_to_length() {
        for n in [2, 3, 7, 100] {
            let a = Axis::new(-2.5, 4.0, n, Scheme::Trapezoid).unwrap();
            let s: f64 = a.weights().iter().sum();
            assert_relative_eq!(s, 6.5, max_relative = 1e-12);
            assert!(a.nodes().windows(2).all(|p| p[0] < p[1]));
        }
    }

    #[test]
    fn ravel_roundtrip() {
        let g = GridSpec::new(vec![
            Axis::new(0.0, 1.0, 3, Scheme::Midpoint).unwrap(),
            Axis::new(0.0, 1.0, 4, Scheme::Midpoint).unwrap(),
            Axis::new(0.0, 1.0, 5, Scheme::Midpoint).unwrap(),
        ])
        .unwrap();
        let mut idx = [0; 3];
        for flat in 0..g.len() {
            g.unravel(flat, &mut idx);
            assert_eq!(g.ravel(&idx), flat);
        }
        g.unravel(5 * 4 + 2 * 5 + 3, &mut idx);
        assert_eq!(idx, [1, 2, 3]);
    }

    #[test]
    fn integrate_constants() {
        let g = unit_square(16);
        let w = ScalarField::from_fn(g.clone(), |x| 4.0 * x[0] * x[1]).unwrap();
        let one = ScalarField::constant(g.clone(), 1.0);
        assert!((integrate(&one, &w).unwrap() - 1.0).abs() < 1e-10);
        let c = ScalarField::constant(g, -3.5);
        assert!((integrate(&c, &w).unwrap() + 3.5).abs() < 1e-10);
    }

    #[test]
    fn integrate_xy() {
        let g = unit_square(64);
        let f = ScalarField::from_fn(g.clone(), |x| x[0] * x[1]).unwrap();
        let w = ScalarField::constant(g, 1.0);
        assert!((integrate(&f, &w).unwrap() - 0.25).abs() < 1e-4);
    }

    #[test]
    fn integrate_rejects_grid_mismatch() {
        let f = ScalarField::constant(unit_square(4), 1.0);
        let w = ScalarField::constant(unit_square(5), 1.0);
        assert!(matches!(integrate(&f, &w), Err(Error::Shape(_))));
    }

    #[test]
    fn marginals_of_product_and_uniform() {
        let g = unit_square(8);
        let w = ScalarField::from_fn(g.clone(), |x| 2.0 * x[0] * (1.5 - x[1])).unwrap();
        // v(y) = 1.5 - y integrates to 1 on [0, 1]
        let m0 = marginal_density(&w, 0).unwrap();
        for (m, x) in m0.iter().zip(g.axis(0).nodes()) {
            assert_relative_eq!(*m, 2.0 * x, max_relative = 1e-12);
        }
        let uni = ScalarField::constant(g, 1.0);
        for m in marginal_density(&uni, 1).unwrap() {
            assert_relative_eq!(m, 1.0, max_relative = 1e-12);
        }
        assert!(matches!(marginal_density(&uni, 2), Err(Error::Domain(_))));
    }

    #[test]
    fn marginal_of_two_block_diagonal() {
        let g = Arc::new(GridSpec::uniform(2, 1.0, 3.0, 4).unwrap());
        let w = ScalarField::from_fn(g.clone(), |x| {
            if x[0].floor() == x[1].floor() {
                0.5
            } else {
                0.0
            }
        })
        .unwrap();
        for m in marginal_density(&w, 0).unwrap() {
            assert_relative_eq!(m, 0.5, max_relative = 1e-14);
        }
    }

    #[test]
    fn comarginal_cases() {
        let g = unit_square(6);
        let w = ScalarField::from_fn(g.clone(), |x| (1.0 + x[0]) * (0.5 + x[1]) / 1.5).unwrap();
        let c0 = comarginal_density(&w, 0).unwrap();
        let m1 = marginal_density(&w, 1).unwrap();
        assert_eq!(c0.grid().dims(), 1);
        for (a, b) in c0.values().iter().zip(&m1) {
            assert_relative_eq!(*a, *b, max_relative = 1e-12);
        }
        // product of normalized factors: integrating out axis 1 leaves (1 + x)/1.5
        let c1 = comarginal_density(&w, 1).unwrap();
        for (v, x) in c1.values().iter().zip(g.axis(0).nodes()) {
            assert_relative_eq!(*v, (1.0 + x) / 1.5, max_relative = 1e-12);
        }

        let cube = Arc::new(GridSpec::uniform(3, 0.0, 1.0, 5).unwrap());
        let c = comarginal_density(&ScalarField::constant(cube, 1.0), 1).unwrap();
        assert_eq!(c.grid().shape(), &[5, 5]);
        assert!(c.values().iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn p_norms() {
        let g = unit_square(64);
        let w = ScalarField::constant(g.clone(), 1.0);
        let one = ScalarField::constant(g.clone(), 1.0);
        assert_relative_eq!(weighted_p_norm(&one, &w, 2.5).unwrap(), 1.0, max_relative = 1e-12);
        let m2 = ScalarField::constant(g.clone(), -2.0);
        assert_relative_eq!(weighted_p_norm(&m2, &w, 3.0).unwrap(), 2.0, max_relative = 1e-12);
        let f = ScalarField::from_fn(g, |x| x[0] + x[1]).unwrap();
        let n = weighted_p_norm(&f, &w, 2.0).unwrap();
        assert!((n - (7.0f64 / 6.0).sqrt()).abs() < 1e-4);
        assert!(matches!(weighted_p_norm(&f, &w, 1.0), Err(Error::Config { .. })));
    }

    #[test]
    fn midpoint_refinement_is_second_order() {
        let cases: [fn(&[f64]) -> f64; 3] = [
            |x| (x[0] * x[1]).exp(),
            |x| (3.0 * x[0]).sin() * (1.0 + x[1] * x[1]),
            |x| 1.0 / (1.0 + x[0] + 2.0 * x[1]),
        ];
        for f in cases {
            let errs: Vec<f64> = [8usize, 16, 32]
                .iter()
                .map(|&n| {
                    let g = unit_square(n);
                    let fld = ScalarField::from_fn(g.clone(), f).unwrap();
                    integrate(&fld, &ScalarField::constant(g, 1.0)).unwrap()
                })
                .collect();
            // successive differences shrink by ~4 per doubling
            let d1 = (errs[1] - errs[0]).abs();
            let d2 = (errs[2] - errs[1]).abs();
            let ratio = d1 / d2;
            assert!((3.5..4.5).contains(&ratio), "ratio {ratio}");
        }
    }

    #[test]
    fn parallel_path_matches_sequential_order() {
        // large enough to take the rayon path
        let g = Arc::new(GridSpec::uniform(2, 0.0, 1.0, 256).unwrap());
        let w = ScalarField::from_fn(g.clone(), |x| 1.0 + 0.3 * (7.0 * x[0]).sin() * x[1]).unwrap();
        let m = marginal_density(&w, 1).unwrap();
        let seq: Vec<f64> = {
            let mut out = vec![0.0; 256];
            for (flat, v) in w.values().iter().enumerate() {
                out[flat % 256] += v * g.axis(0).weights()[flat / 256];
            }
            out
        };
        for (a, b) in m.iter().zip(&seq) {
            assert_relative_eq!(*a, *b, max_relative = 1e-12);
        }
        let again = marginal_density(&w, 1).unwrap();
        assert_eq!(m, again);
    }

    fn arb_grid() -> impl Strategy<Value = Arc<GridSpec>> {
        (2usize..4, prop::collection::vec((2usize..7, -2.0f64..2.0, 0.1f64..3.0, any::<bool>()), 3))
            .prop_map(|(dims, specs)| {
                let axes = specs[..dims]
                    .iter()
                    .map(|&(n, lo, len, mid)| {
                        let s = if mid { Scheme::Midpoint } else { Scheme::Trapezoid };
                        Axis::new(lo, lo + len, n, s).unwrap()
                    })
                    .collect();
                Arc::new(GridSpec::new(axes).unwrap())
            })
    }

    proptest! {
        #[test]
        fn affine_integrands_are_exact(grid in arb_grid(), c in prop::collection::vec(-3.0f64..3.0, 4)) {
            let f = ScalarField::from_fn(grid.clone(), |x| {
                c[0] + x.iter().zip(&c[1..]).map(|(xi, ci)| xi * ci).sum::<f64>()
            }).unwrap();
            let one = ScalarField::constant(grid.clone(), 1.0);
            let vol: f64 = grid.axes().iter().map(|a| a.upper() - a.lower()).product();
            let exact = vol * (c[0] + grid.axes().iter().zip(&c[1..])
                .map(|(a, ci)| ci * 0.5 * (a.lower() + a.upper())).sum::<f64>());
            let got = integrate(&f, &one).unwrap();
            prop_assert!((got - exact).abs() <= 1e-12 * (1.0 + exact.abs()) * 10.0);
        }

        #[test]
        fn marginal_mass_and_fubini(grid in arb_grid(), seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let w = ScalarField::new(grid.clone(), (0..grid.len()).map(|_| rng.gen_range(0.1..2.0)).collect()).unwrap();
            let f = ScalarField::new(grid.clone(), (0..grid.len()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let one = ScalarField::constant(grid.clone(), 1.0);
            let mass = integrate(&one, &w).unwrap();
            let total = integrate(&f, &w).unwrap();
            for i in 0..grid.dims() {
                let m = marginal_density(&w, i).unwrap();
                let q = grid.axis(i).quadrature(&m);
                prop_assert!((q - mass).abs() <= 1e-12 * mass.abs());
                let fm = weighted_marginal(&f, &w, i).unwrap();
                let qf = grid.axis(i).quadrature(&fm);
                prop_assert!((qf - total).abs() <= 1e-12 * (mass + total.abs()));
            }
        }
    }
}
