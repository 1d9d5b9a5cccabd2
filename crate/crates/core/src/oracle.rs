//! Direct minimization of `int |h|^p w` over grid fields with prescribed
//! weighted marginals, built on an explicit constraint matrix and independent
//! of the multiplier equations.
//!
//! For p = 2 the KKT system is solved exactly through the Schur complement
//! `S = A C^-1 A^T` with `C = diag(w dV)`. For other p the concave dual
//! `D(lambda) = lambda^T g - sum c |A^T lambda / c|^q / q` is maximized by
//! `S`-preconditioned gradient ascent with backtracking; the primal point
//! `psi(A^T lambda / c)` is then stationary by construction and only its
//! feasibility has to converge.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{self, GridSpec, MarginalSet, ScalarField};
use crate::solver::signed_pow;

/// Marginal residual every returned feasible field satisfies.
pub const FEASIBILITY_TOL: f64 = 1e-10;
const MAX_ASCENT: usize = 5000;

/// Affine set `{h : int h w d xi_i^c = g_i}` in matrix form. One redundant
/// row per axis `i >= 2` is dropped, since all marginals share the total mass.
pub struct FeasibleSet {
    w: ScalarField,
    g: MarginalSet,
    a: DMatrix<f64>,
    rhs: DVector<f64>,
    c: Vec<f64>,
    schur: Cholesky<f64, Dyn>,
}

impl FeasibleSet {
    pub fn new(w: &ScalarField, g: &MarginalSet) -> Result<Self> {
        let grid = w.grid().clone();
        grid::check_tables(&grid, g.tables())?;
        let masses = g.masses(&grid);
        let scale = masses.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        if masses.iter().any(|m| (m - masses[0]).abs() > 1e-8 * scale) {
            return Err(Error::Input(format!("marginal mass mismatch: {masses:?}")));
        }
        let c: Vec<f64> = w.values().iter().zip(grid.volumes()).map(|(w, v)| w * v).collect();
        if c.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Positivity("oracle needs a strictly positive density".into()));
        }
        let mut rows = Vec::new();
        for i in 0..grid.dims() {
            let n = grid.shape()[i];
            let keep = if i == 0 { n } else { n - 1 };
            rows.extend((0..keep).map(|k| (i, k)));
        }
        let m = rows.len();
        let mut a = DMatrix::zeros(m, grid.len());
        let mut offsets = vec![0usize; grid.dims()];
        for i in 1..grid.dims() {
            offsets[i] = offsets[i - 1] + if i == 1 { grid.shape()[0] } else { grid.shape()[i - 1] - 1 };
        }
        let mut idx = vec![0; grid.dims()];
        for flat in 0..grid.len() {
            grid.unravel(flat, &mut idx);
            for i in 0..grid.dims() {
                let k = idx[i];
                if i > 0 && k == grid.shape()[i] - 1 {
                    continue;
                }
                a[(offsets[i] + k, flat)] = c[flat] / grid.axis(i).weights()[k];
            }
        }
        let rhs = DVector::from_iterator(m, rows.iter().map(|&(i, k)| g.table(i)[k]));
        let mut ac = a.clone();
        for (j, mut col) in ac.column_iter_mut().enumerate() {
            col /= c[j];
        }
        let s = &ac * a.transpose();
        let schur = Cholesky::new(s).ok_or_else(|| Error::Domain("constraint Gram matrix is not positive definite".into()))?;
        Ok(FeasibleSet {
            w: w.clone(),
            g: g.clone(),
            a,
            rhs,
            c,
            schur,
        })
    }

    pub fn grid(&self) -> &Arc<GridSpec> {
        self.w.grid()
    }

    pub fn density(&self) -> &ScalarField {
        &self.w
    }

    pub fn constraint_rows(&self) -> usize {
        self.a.nrows()
    }

    /// Sup norm of the marginal residual over all axes (redundant rows included).
    pub fn residual(&self, h: &ScalarField) -> Result<f64> {
        let mut sup: f64 = 0.0;
        for i in 0..self.grid().dims() {
            let m = grid::weighted_marginal(h, &self.w, i)?;
            for (a, b) in m.iter().zip(self.g.table(i)) {
                sup = sup.max((a - b).abs());
            }
        }
        Ok(sup)
    }

    /// Orthogonal projection onto the affine set in the `C`-weighted inner product.
    pub fn project(&self, h: &ScalarField) -> Result<ScalarField> {
        h.check_same_grid(&self.w)?;
        let x = DVector::from_column_slice(h.values());
        let r = &self.a * &x - &self.rhs;
        let y = self.schur.solve(&r);
        let corr = self.a.transpose() * y;
        let values = x.iter().zip(corr.iter()).zip(&self.c).map(|((x, d), c)| x - d / c).collect();
        ScalarField::new(self.grid().clone(), values)
    }

    fn primal_of(&self, lambda: &DVector<f64>, p: f64) -> Vec<f64> {
        let t = self.a.transpose() * lambda;
        t.iter()
            .zip(&self.c)
            .map(|(t, c)| signed_pow(t / c, 1.0 / (p - 1.0)))
            .collect()
    }

    /// `g - A psi(A^T lambda / c)`, the gradient of the dual.
    fn dual_gradient(&self, lambda: &DVector<f64>, p: f64) -> DVector<f64> {
        let h = DVector::from_vec(self.primal_of(lambda, p));
        &self.rhs - &self.a * h
    }

    /// Exact line search on the concave dual along `dir`: finds a root of the
    /// decreasing directional derivative, starting from the bracket guess `t0`.
    fn line_search(&self, lambda: &DVector<f64>, dir: &DVector<f64>, slope0: f64, t0: f64, p: f64) -> Option<f64> {
        if !(slope0 > 0.0) {
            return None;
        }
        let slope = |t: f64| self.dual_gradient(&(lambda + dir * t), p).dot(dir);
        let (mut lo, mut s_lo) = (0.0, slope0);
        let mut hi = t0;
        let mut s_hi = slope(hi);
        let mut expand = 0;
        while s_hi > 0.0 {
            lo = hi;
            s_lo = s_hi;
            hi *= 2.0;
            s_hi = slope(hi);
            expand += 1;
            if expand > 60 || !s_hi.is_finite() {
                return None;
            }
        }
        // regula falsi with the Illinois modification
        let mut side = 0;
        for _ in 0..100 {
            let t = hi - s_hi * (hi - lo) / (s_hi - s_lo);
            let s = slope(t);
            if s.abs() <= 1e-6 * slope0 || (hi - lo) <= 1e-14 * hi {
                return Some(t);
            }
            if s > 0.0 {
                lo = t;
                s_lo = s;
                if side == 1 {
                    s_hi *= 0.5;
                }
                side = 1;
            } else {
                hi = t;
                s_hi = s;
                if side == -1 {
                    s_lo *= 0.5;
                }
                side = -1;
            }
        }
        Some(0.5 * (lo + hi))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleReport {
    pub p: f64,
    pub value: f64,
    pub iterations: usize,
    pub marginal_residual: f64,
    pub converged: bool,
}

/// Minimum of `int |h|^p w` over the feasible set. Returns the minimizer and
/// the report carrying `||h_opt||_p^p`.
pub fn min_norm_direct(w: &ScalarField, g: &MarginalSet, p: f64, tol: f64) -> Result<(ScalarField, OracleReport)> {
    if !(p > 1.0 && p.is_finite()) {
        return Err(Error::config("p", format!("need finite p > 1, got {p}")));
    }
    if !(tol > 0.0) {
        return Err(Error::config("tol", "must be positive"));
    }
    let set = FeasibleSet::new(w, g)?;
    let mut lambda = set.schur.solve(&set.rhs);
    let mut iterations = 0;
    if p != 2.0 {
        let mut step = 1.0;
        loop {
            let grad = set.dual_gradient(&lambda, p);
            if grad.amax() <= tol || iterations >= MAX_ASCENT {
                break;
            }
            iterations += 1;
            let dir = set.schur.solve(&grad);
            match set.line_search(&lambda, &dir, grad.dot(&dir), step, p) {
                Some(t) => {
                    lambda += &dir * t;
                    step = t;
                }
                None => break,
            }
        }
    }
    let h = ScalarField::new(set.grid().clone(), set.primal_of(&lambda, p))?;
    let marginal_residual = set.residual(&h)?;
    let value = grid::integrate(&h.map(|v| v.abs().powf(p))?, w)?;
    let report = OracleReport {
        p,
        value,
        iterations,
        marginal_residual,
        converged: marginal_residual <= tol.max(FEASIBILITY_TOL),
    };
    Ok((h, report))
}

/// `psi - (1/m) sum_i (w_i^c / w) int psi w d xi_i^c + (n - 1) (int psi w) / m`
/// with `m = int w`; every weighted marginal of the result vanishes.
pub fn null_space_element(psi: &ScalarField, w: &ScalarField) -> Result<ScalarField> {
    psi.check_same_grid(w)?;
    if w.values().iter().any(|v| !(*v > 0.0)) {
        return Err(Error::Positivity("null-space construction needs w > 0".into()));
    }
    let grid = w.grid();
    let n = grid.dims();
    let one = ScalarField::constant(grid.clone(), 1.0);
    let mass = grid::integrate(&one, w)?;
    let total = grid::integrate(psi, w)?;
    let mut out: Vec<f64> = psi.values().iter().map(|v| v + (n as f64 - 1.0) * total / mass).collect();
    let mut idx = vec![0; n];
    for i in 0..n {
        let marg = grid::weighted_marginal(psi, w, i)?;
        let comarg = grid::comarginal_density(w, i)?;
        let (_, n_i, post) = grid.split(i);
        for (flat, o) in out.iter_mut().enumerate() {
            grid.unravel(flat, &mut idx);
            let pre_idx = flat / (n_i * post);
            let post_idx = flat % post;
            let c = comarg.values()[pre_idx * post + post_idx];
            *o -= c / w.values()[flat] * marg[idx[i]] / mass;
        }
    }
    ScalarField::new(grid.clone(), out)
}

#[derive(Debug, Clone, Copy)]
pub struct RandomFeasibleOptions {
    /// Null-space components per sample.
    pub components: usize,
    /// Coefficients are drawn uniformly from `[-scale, scale]`.
    pub scale: f64,
}

impl Default for RandomFeasibleOptions {
    fn default() -> Self {
        RandomFeasibleOptions {
            components: 3,
            scale: 1.0,
        }
    }
}

/// Uniform random node values in `[-1, 1]`.
pub fn random_field(grid: &Arc<GridSpec>, rng: &mut ChaCha8Rng) -> Result<ScalarField> {
    let values = (0..grid.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    ScalarField::new(grid.clone(), values)
}

/// `count` feasible fields `base + sum_j c_j null_space_element(psi_j)`.
pub fn random_feasible(
    w: &ScalarField,
    g: &MarginalSet,
    base: &ScalarField,
    seed: u64,
    count: usize,
    opts: RandomFeasibleOptions,
) -> Result<Vec<ScalarField>> {
    let set = FeasibleSet::new(w, g)?;
    let scale = base.sup_norm().max(1.0);
    let r = set.residual(base)?;
    if r > FEASIBILITY_TOL * scale {
        return Err(Error::Input(format!("base field is not feasible: marginal residual {r:.3e}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut values = base.values().to_vec();
        for _ in 0..opts.components {
            let coeff = if opts.scale > 0.0 {
                rng.gen_range(-opts.scale..=opts.scale)
            } else {
                0.0
            };
            let psi = random_field(w.grid(), &mut rng)?;
            if coeff == 0.0 {
                continue;
            }
            let phi = null_space_element(&psi, w)?;
            values.iter_mut().zip(phi.values()).for_each(|(v, p)| *v += coeff * p);
        }
        let h = ScalarField::new(w.grid().clone(), values)?;
        let r = set.residual(&h)?;
        if r > FEASIBILITY_TOL * h.sup_norm().max(1.0) {
            return Err(Error::Domain(format!("sample lost feasibility: residual {r:.3e}")));
        }
        out.push(h);
    }
    Ok(out)
}

/// A smooth, strictly positive seeded field `1 + sum_j a_j prod_i cos(k_ij x_i + s_ij) / 2`,
/// bounded below by 1/2, for generating well-posed test marginals.
pub fn smooth_positive_field(grid: &Arc<GridSpec>, seed: u64) -> Result<ScalarField> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = grid.dims();
    let terms = 4;
    let mut amp = Vec::with_capacity(terms);
    let mut freq = Vec::with_capacity(terms);
    for _ in 0..terms {
        amp.push(rng.gen_range(-1.0..1.0) / (2.0 * terms as f64) * 2.0);
        let row: Vec<(f64, f64)> = (0..n)
            .map(|i| {
                let len = grid.axis(i).upper() - grid.axis(i).lower();
                (rng.gen_range(0.5..3.0) / len, rng.gen_range(0.0..std::f64::consts::TAU))
            })
            .collect();
        freq.push(row);
    }
    ScalarField::from_fn(grid.clone(), |x| {
        1.0 + amp
            .iter()
            .zip(&freq)
            .map(|(a, row)| a * row.iter().zip(x).map(|((k, s), x)| (k * x + s).cos()).product::<f64>())
            .sum::<f64>()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::densities::{DensitySpec, DiagonalSpec};
    use crate::solver::{self, SolveOptions};
    use proptest::prelude::*;

    fn uniform(n: usize, dims: usize) -> ScalarField {
        let g = Arc::new(GridSpec::uniform(dims, 0.0, 1.0, n).unwrap());
        DensitySpec::uniform(dims).assemble(&g).unwrap().field
    }

    fn diagonal(k: usize, per_block: usize) -> ScalarField {
        let g = Arc::new(crate::densities::block_grid(k, per_block).unwrap());
        let spec = DiagonalSpec {
            alpha: 0.5,
            k,
            theta: None,
            background: None,
            study_mode: false,
        };
        crate::densities::assemble_diagonal(&spec, &g).unwrap().field
    }

    #[test]
    fn constant_marginals_give_constant() {
        let w = diagonal(4, 2);
        let c = -1.7;
        let g = MarginalSet::from_field(&ScalarField::constant(w.grid().clone(), c), &w).unwrap();
        for p in [1.5, 2.0, 3.0] {
            let (h, rep) = min_norm_direct(&w, &g, p, 1e-12).unwrap();
            assert!(h.values().iter().all(|v| (v - c).abs() < 1e-9), "p = {p}");
            assert!((rep.value - c.abs().powf(p)).abs() < 1e-9);
        }
    }

    #[test]
    fn p2_hypercube_closed_form() {
        let n = 32;
        let w = uniform(n, 2);
        let gf = ScalarField::from_fn(w.grid().clone(), |x| x[0] + x[1]).unwrap();
        let g = MarginalSet::from_field(&gf, &w).unwrap();
        let (_, rep) = min_norm_direct(&w, &g, 2.0, 1e-12).unwrap();
        let ax = w.grid().axis(0);
        let sq: Vec<f64> = g.table(0).iter().map(|v| v * v).collect();
        let closed = 2.0 * ax.quadrature(&sq) - 1.0;
        assert!((rep.value - closed).abs() < 1e-10);
        assert!((rep.value - 7.0 / 6.0).abs() < 1e-3);
    }

    #[test]
    fn matches_solver_for_p3() {
        let w = uniform(8, 2);
        let h0 = smooth_positive_field(w.grid(), 5).unwrap();
        let g = MarginalSet::from_field(&h0, &w).unwrap();
        let (_, o) = min_norm_direct(&w, &g, 3.0, 1e-12).unwrap();
        let (_, s) = solver::solve_newton(&w, &g, 3.0, &SolveOptions::default()).unwrap();
        assert!(o.converged && s.converged);
        assert!((o.value - s.bound_value).abs() <= 1e-6 * o.value, "{} vs {}", o.value, s.bound_value);
    }

    #[test]
    fn optimum_is_separable_after_power() {
        let w = diagonal(3, 3);
        let h0 = smooth_positive_field(w.grid(), 9).unwrap();
        let g = MarginalSet::from_field(&h0, &w).unwrap();
        for p in [1.5, 3.0] {
            let (h, _) = min_norm_direct(&w, &g, p, 1e-12).unwrap();
            let s = h.map(|v| signed_pow(v, p - 1.0)).unwrap();
            let n = w.grid().shape()[1];
            let v = s.values();
            let mut worst: f64 = 0.0;
            for i in 0..w.grid().shape()[0] - 1 {
                for j in 0..n - 1 {
                    let d = v[(i + 1) * n + j + 1] - v[(i + 1) * n + j] - v[i * n + j + 1] + v[i * n + j];
                    worst = worst.max(d.abs());
                }
            }
            assert!(worst < 1e-6, "p = {p}: {worst}");
        }
    }

    #[test]
    fn null_space_examples() {
        let w = uniform(16, 2);
        let c = ScalarField::constant(w.grid().clone(), 2.5);
        assert!(null_space_element(&c, &w).unwrap().sup_norm() < 1e-13);
        let fx = ScalarField::from_fn(w.grid().clone(), |x| (3.0 * x[0]).sin()).unwrap();
        assert!(null_space_element(&fx, &w).unwrap().sup_norm() < 1e-13);
        let xy = ScalarField::from_fn(w.grid().clone(), |x| x[0] * x[1]).unwrap();
        let t = null_space_element(&xy, &w).unwrap();
        let expect = ScalarField::from_fn(w.grid().clone(), |x| x[0] * x[1] - x[0] / 2.0 - x[1] / 2.0 + 0.25).unwrap();
        let diff = t.zip_map(&expect, |a, b| a - b).unwrap().sup_norm();
        assert!(diff < 1e-14, "{diff}");
    }

    #[test]
    fn null_space_rejects_zero_density() {
        let g = Arc::new(crate::densities::block_grid(3, 1).unwrap());
        let spec = DiagonalSpec {
            alpha: 0.0,
            k: 3,
            theta: None,
            background: None,
            study_mode: true,
        };
        let w = crate::densities::assemble_diagonal(&spec, &g).unwrap().field;
        let psi = ScalarField::constant(g, 1.0);
        assert!(matches!(null_space_element(&psi, &w), Err(Error::Positivity(_))));
    }

    #[test]
    fn random_feasible_counts() {
        let w = uniform(10, 2);
        let h0 = smooth_positive_field(w.grid(), 1).unwrap();
        let g = MarginalSet::from_field(&h0, &w).unwrap();
        assert!(random_feasible(&w, &g, &h0, 3, 0, Default::default()).unwrap().is_empty());
        let zero = RandomFeasibleOptions { components: 2, scale: 0.0 };
        let one = random_feasible(&w, &g, &h0, 3, 1, zero).unwrap();
        assert_eq!(one[0].values(), h0.values());
        let many = random_feasible(&w, &g, &h0, 3, 100, Default::default()).unwrap();
        let set = FeasibleSet::new(&w, &g).unwrap();
        for h in &many {
            assert!(set.residual(h).unwrap() < 1e-10);
        }
        let again = random_feasible(&w, &g, &h0, 3, 100, Default::default()).unwrap();
        assert_eq!(many[99].values(), again[99].values());
        assert!(random_feasible(&w, &g, &ScalarField::constant(w.grid().clone(), 0.0), 3, 1, Default::default()).is_err());
    }

    #[test]
    fn projection_lands_in_feasible_set() {
        let w = diagonal(3, 2);
        let h0 = smooth_positive_field(w.grid(), 2).unwrap();
        let g = MarginalSet::from_field(&h0, &w).unwrap();
        let set = FeasibleSet::new(&w, &g).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_field(w.grid(), &mut rng).unwrap();
        let p = set.project(&x).unwrap();
        assert!(set.residual(&p).unwrap() < 1e-12);
    }

    #[test]
    fn inconsistent_masses_are_rejected() {
        let w = uniform(4, 2);
        let g = MarginalSet::new(w.grid(), vec![vec![1.0; 4], vec![2.0; 4]]).unwrap();
        let err = min_norm_direct(&w, &g, 2.0, 1e-10).err().unwrap();
        assert!(err.to_string().contains("marginal mass mismatch"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn null_space_has_zero_marginals_and_is_idempotent(seed in 0u64..1000, n in 3usize..9, dims in 2usize..4) {
            let w = uniform(n, dims);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let psi = random_field(w.grid(), &mut rng).unwrap();
            let t = null_space_element(&psi, &w).unwrap();
            for i in 0..dims {
                let m = grid::weighted_marginal(&t, &w, i).unwrap();
                prop_assert!(m.iter().all(|v| v.abs() < 1e-12));
            }
            let tt = null_space_element(&t, &w).unwrap();
            prop_assert!(tt.zip_map(&t, |a, b| a - b).unwrap().sup_norm() < 1e-10);
        }

        #[test]
        fn null_space_on_diagonal_density(seed in 0u64..1000) {
            let w = diagonal(4, 2);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let psi = random_field(w.grid(), &mut rng).unwrap();
            let t = null_space_element(&psi, &w).unwrap();
            for i in 0..2 {
                let m = grid::weighted_marginal(&t, &w, i).unwrap();
                prop_assert!(m.iter().all(|v| v.abs() < 1e-10));
            }
        }
    }
}
