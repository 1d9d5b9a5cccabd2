//! Multiplier equations for the marginal-constrained `L^p(w)` minimization.
//!
//! The minimizer has the form `h = psi(phi_bar)` with
//! `psi(t) = sign(t) |t|^(1/(p-1))` and `phi_bar = (1/n) sum_i phi_i(xi_i)`.
//! The unknown one-variable tables `phi_i` solve
//!
//! ```text
//!   int psi(phi_bar) w d xi_i^c = g_i(xi_i),   1 <= i <= n
//!   int phi_i w_i d xi_i        = 0,           2 <= i <= n
//! ```
//!
//! where the second family fixes the additive gauge. On a grid the stacked
//! marginal equations carry `n - 1` redundancies (every marginal integrates to
//! the same total), so the Newton system drops one marginal row per axis
//! `i >= 2` and puts the normalization row in its place, which keeps the
//! Jacobian square.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{self, GridSpec, MarginalSet, ScalarField};

/// Relative tolerance on total marginal masses before iterating.
pub const MASS_TOLERANCE: f64 = 1e-8;
/// `sigma_min / sigma_max` below which the p = 2 system is reported singular.
pub const SINGULAR_RATIO: f64 = 1e-10;
const MAX_HALVINGS: usize = 60;
const ARMIJO: f64 = 1e-4;
const POLISH_STEPS: usize = 3;

/// `sign(t) |t|^a`, with `sign(0) = 0`.
#[inline]
pub fn signed_pow(t: f64, a: f64) -> f64 {
    if t == 0.0 {
        0.0
    } else {
        t.signum() * t.abs().powf(a)
    }
}

/// Smoothed derivative of `t -> sign(t)|t|^(1/(p-1))`:
/// `(1/(p-1)) (t^2 + eps^2)^((2-p)/(2(p-1)))`.
#[inline]
pub fn psi_prime(t: f64, p: f64, eps: f64) -> f64 {
    let e = (2.0 - p) / (2.0 * (p - 1.0));
    if e == 0.0 {
        return 1.0 / (p - 1.0);
    }
    (t * t + eps * eps).powf(e) / (p - 1.0)
}

fn check_p(p: f64) -> Result<()> {
    if p > 1.0 && p.is_finite() {
        Ok(())
    } else {
        Err(Error::config("p", format!("need finite p > 1, got {p}")))
    }
}

/// Lagrange multiplier tables `phi_i` over the axis nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiplierSet {
    pub phi: Vec<Vec<f64>>,
    pub p: f64,
    /// Per axis; entry 0 is always `false` since axis 0 is not normalized.
    pub normalized: Vec<bool>,
}

impl MultiplierSet {
    pub fn zeros(grid: &GridSpec, p: f64) -> Self {
        MultiplierSet {
            phi: grid.shape().iter().map(|&n| vec![0.0; n]).collect(),
            p,
            normalized: vec![false; grid.dims()],
        }
    }

    pub fn dims(&self) -> usize {
        self.phi.len()
    }

    fn check(&self, grid: &GridSpec) -> Result<()> {
        grid::check_tables(grid, &self.phi)?;
        if self.phi.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Domain("multipliers must be finite".into()));
        }
        Ok(())
    }

    /// `phi_bar(xi) = (1/n) sum_i phi_i(xi_i)` on the grid.
    pub fn phi_bar(&self, grid: &Arc<GridSpec>) -> Result<ScalarField> {
        self.check(grid)?;
        let n = self.dims() as f64;
        ScalarField::from_axis_tables(grid.clone(), &self.phi, |row| row.iter().sum::<f64>() / n)
    }

    fn stacked(&self) -> Vec<f64> {
        self.phi.iter().flatten().copied().collect()
    }

    fn from_stacked(grid: &GridSpec, x: &[f64], p: f64) -> Self {
        let mut phi = Vec::with_capacity(grid.dims());
        let mut at = 0;
        for &n in grid.shape() {
            phi.push(x[at..at + n].to_vec());
            at += n;
        }
        MultiplierSet {
            phi,
            p,
            normalized: vec![false; grid.dims()],
        }
    }

    /// Re-imposes `int phi_i w_i = 0` for `i >= 2` by shifting `phi_i` and
    /// compensating on `phi_1`, which leaves `phi_bar` unchanged.
    pub fn normalize(&mut self, w: &ScalarField) -> Result<()> {
        let grid = w.grid();
        self.check(grid)?;
        let one = ScalarField::constant(grid.clone(), 1.0);
        let mass = grid::integrate(&one, w)?;
        let mut total = 0.0;
        for i in 1..self.dims() {
            let wi = grid::marginal_density(w, i)?;
            let prod: Vec<f64> = self.phi[i].iter().zip(&wi).map(|(a, b)| a * b).collect();
            let c = grid.axis(i).quadrature(&prod) / mass;
            self.phi[i].iter_mut().for_each(|v| *v -= c);
            total += c;
            self.normalized[i] = true;
        }
        self.phi[0].iter_mut().for_each(|v| *v += total);
        Ok(())
    }
}

/// `h_* = sign(phi_bar) |phi_bar|^(1/(p-1))` at every node.
pub fn reconstruct_minimizer(phi: &MultiplierSet, grid: &Arc<GridSpec>) -> Result<ScalarField> {
    check_p(phi.p)?;
    let a = 1.0 / (phi.p - 1.0);
    phi.phi_bar(grid)?.map(|t| signed_pow(t, a))
}

/// `int |phi_bar|^(p/(p-1)) w`, which equals `||h_*||_p^p`.
pub fn lower_bound(phi: &MultiplierSet, w: &ScalarField) -> Result<f64> {
    check_p(phi.p)?;
    let p = phi.p;
    let bar = phi.phi_bar(w.grid())?;
    let bound = grid::integrate(&bar.map(|t| t.abs().powf(p / (p - 1.0)))?, w)?;
    #[cfg(debug_assertions)]
    {
        let h = reconstruct_minimizer(phi, w.grid())?;
        let norm_p = grid::integrate(&h.map(|v| v.abs().powf(p))?, w)?;
        debug_assert!(
            (norm_p - bound).abs() <= 1e-12 * bound.abs().max(f64::MIN_POSITIVE) + 1e-300,
            "bound {bound} vs ||h||_p^p {norm_p}"
        );
    }
    Ok(bound)
}

/// Residuals of the marginal and normalization equations.
#[derive(Debug, Clone, Serialize)]
pub struct ResidualReport {
    /// `F_i(xi_i) = int psi(phi_bar) w d xi_i^c - g_i(xi_i)` per axis.
    pub marginal: Vec<Vec<f64>>,
    /// `N_i = int phi_i w_i d xi_i` for axes `2..=n` (entry 0 is axis 2).
    pub normalization: Vec<f64>,
    /// Largest absolute entry over everything above.
    pub sup: f64,
}

impl ResidualReport {
    pub fn marginal_sup(&self) -> Vec<f64> {
        self.marginal
            .iter()
            .map(|t| t.iter().fold(0.0f64, |m, v| m.max(v.abs())))
            .collect()
    }
}

/// The discretized multiplier system for fixed `w`, `g` and `p`.
pub struct MarginalSystem<'a> {
    w: &'a ScalarField,
    g: &'a MarginalSet,
    p: f64,
    offsets: Vec<usize>,
    unknowns: usize,
    /// `w_i` per axis.
    w_marginals: Vec<Vec<f64>>,
    /// `w * dV` per node.
    mass_weights: Vec<f64>,
}

impl<'a> MarginalSystem<'a> {
    pub fn new(w: &'a ScalarField, g: &'a MarginalSet, p: f64) -> Result<Self> {
        check_p(p)?;
        let grid = w.grid();
        grid::check_tables(grid, g.tables())?;
        if w.values().iter().any(|v| *v < 0.0) {
            return Err(Error::Positivity("density has negative node values".into()));
        }
        let mut offsets = Vec::with_capacity(grid.dims());
        let mut at = 0;
        for &n in grid.shape() {
            offsets.push(at);
            at += n;
        }
        let w_marginals = (0..grid.dims())
            .map(|i| grid::marginal_density(w, i))
            .collect::<Result<Vec<_>>>()?;
        let mass_weights = w.values().iter().zip(grid.volumes()).map(|(a, b)| a * b).collect();
        Ok(MarginalSystem {
            w,
            g,
            p,
            offsets,
            unknowns: at,
            w_marginals,
            mass_weights,
        })
    }

    pub fn grid(&self) -> &Arc<GridSpec> {
        self.w.grid()
    }

    pub fn dims(&self) -> usize {
        self.offsets.len()
    }

    /// Number of stacked unknowns `sum_i N_i`.
    pub fn unknowns(&self) -> usize {
        self.unknowns
    }

    /// Length of the full residual: all marginal rows plus `n - 1` normalizations.
    pub fn full_rows(&self) -> usize {
        self.unknowns + self.dims() - 1
    }

    fn phi_bar_values(&self, x: &[f64]) -> Vec<f64> {
        let grid = self.grid();
        let n = self.dims();
        let mut idx = vec![0; n];
        (0..grid.len())
            .map(|flat| {
                grid.unravel(flat, &mut idx);
                idx.iter()
                    .zip(&self.offsets)
                    .map(|(&k, &o)| x[o + k])
                    .sum::<f64>()
                    / n as f64
            })
            .collect()
    }

    pub fn residual_report(&self, x: &[f64]) -> ResidualReport {
        let grid = self.grid();
        let a = 1.0 / (self.p - 1.0);
        let hw: Vec<f64> = self
            .phi_bar_values(x)
            .into_iter()
            .zip(self.w.values())
            .map(|(t, w)| signed_pow(t, a) * w)
            .collect();
        let marginal: Vec<Vec<f64>> = (0..self.dims())
            .map(|i| {
                let m = grid::sum_except_axis(grid, &hw, i);
                m.into_iter().zip(self.g.table(i)).map(|(v, g)| v - g).collect()
            })
            .collect();
        let normalization: Vec<f64> = (1..self.dims())
            .map(|i| {
                let o = self.offsets[i];
                let axis = grid.axis(i);
                grid::compensated_sum(
                    (0..axis.node_count()).map(|k| x[o + k] * self.w_marginals[i][k] * axis.weights()[k]),
                )
            })
            .collect();
        let sup = marginal
            .iter()
            .flatten()
            .chain(&normalization)
            .fold(0.0f64, |m, v| m.max(v.abs()));
        ResidualReport {
            marginal,
            normalization,
            sup,
        }
    }

    /// Full residual vector: `F_1, ..., F_n, N_2, ..., N_n`.
    pub fn residual_vector(&self, x: &[f64]) -> Vec<f64> {
        let r = self.residual_report(x);
        r.marginal.into_iter().flatten().chain(r.normalization).collect()
    }

    /// Analytic Jacobian of `residual_vector`, `full_rows() x unknowns()`,
    /// using the smoothed derivative of `psi`.
    pub fn jacobian(&self, x: &[f64], eps: f64) -> DMatrix<f64> {
        let grid = self.grid();
        let n = self.dims();
        let mut jac = DMatrix::zeros(self.full_rows(), self.unknowns);
        let bar = self.phi_bar_values(x);
        let mut idx = vec![0; n];
        let mut rows = vec![0usize; n];
        let mut scale = vec![0.0; n];
        for (flat, (&t, &mw)) in bar.iter().zip(&self.mass_weights).enumerate() {
            if mw == 0.0 {
                continue;
            }
            grid.unravel(flat, &mut idx);
            let c = psi_prime(t, self.p, eps) * mw / n as f64;
            for i in 0..n {
                rows[i] = self.offsets[i] + idx[i];
                scale[i] = c / grid.axis(i).weights()[idx[i]];
            }
            for i in 0..n {
                for j in 0..n {
                    jac[(rows[i], rows[j])] += scale[i];
                }
            }
        }
        for i in 1..n {
            let row = self.unknowns + i - 1;
            let axis = grid.axis(i);
            for k in 0..axis.node_count() {
                jac[(row, self.offsets[i] + k)] = self.w_marginals[i][k] * axis.weights()[k];
            }
        }
        jac
    }

    /// Rows of the full system kept in the square Newton system: every
    /// marginal row of axis 1, all but the last row of each later axis, and
    /// the normalization rows.
    pub fn square_rows(&self) -> Vec<usize> {
        let grid = self.grid();
        let mut rows = Vec::with_capacity(self.unknowns);
        for i in 0..self.dims() {
            let n = grid.shape()[i];
            let keep = if i == 0 { n } else { n - 1 };
            rows.extend(self.offsets[i]..self.offsets[i] + keep);
        }
        rows.extend(self.unknowns..self.full_rows());
        rows
    }

    fn square(&self, jac: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
        jac.select_rows(rows)
    }

    fn check_masses(&self) -> Result<()> {
        let masses = self.g.masses(self.grid());
        let max = masses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = masses.iter().cloned().fold(f64::INFINITY, f64::min);
        if max - min > MASS_TOLERANCE * max.abs().max(min.abs()).max(1.0) {
            return Err(Error::Input(format!(
                "marginal mass mismatch: axis masses {masses:?} differ by {:.3e}",
                max - min
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    #[default]
    FromP2,
    FromMarginalRatio,
    Zeros,
    User { phi: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SolveOptions {
    pub tol_residual: f64,
    pub max_iter: usize,
    /// Initial step length of the backtracking line search.
    pub damping: f64,
    pub smoothing_eps: f64,
    pub init: Init,
    /// Continuation steps in `p` starting from the p = 2 solution. `None`
    /// uses 3 steps when `|p - 2| > 1` and none otherwise.
    pub homotopy_steps: Option<usize>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tol_residual: 1e-10,
            max_iter: 200,
            damping: 1.0,
            smoothing_eps: 1e-12,
            init: Init::FromP2,
            homotopy_steps: None,
        }
    }
}

impl SolveOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol_residual > 0.0) {
            return Err(Error::config("solver.tol_residual", "must be positive"));
        }
        if self.max_iter < 1 {
            return Err(Error::config("solver.max_iter", "must be at least 1"));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::config("solver.damping", "must lie in (0, 1]"));
        }
        if !(self.smoothing_eps >= 0.0) {
            return Err(Error::config("solver.smoothing_eps", "must be nonnegative"));
        }
        Ok(())
    }
}

/// Near-null direction of a singular p = 2 system.
#[derive(Debug, Clone, Serialize)]
pub struct NullVector {
    pub singular_value_ratio: f64,
    /// Unit sup-norm multipliers spanning (part of) the kernel.
    pub multipliers: MultiplierSet,
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveReport {
    pub p: f64,
    pub converged: bool,
    pub iterations: usize,
    pub final_residual_inf: f64,
    pub bound_value: f64,
    pub marginal_residuals: Vec<f64>,
    pub normalization_residuals: Vec<f64>,
    /// Exponents visited by the continuation, ending at `p`.
    pub homotopy_path: Vec<f64>,
    /// `sigma_min / sigma_max` of the linear system (p = 2 path only).
    pub singular_value_ratio: Option<f64>,
    pub nonuniqueness: Option<NullVector>,
    pub warnings: Vec<String>,
}

fn finish(
    sys: &MarginalSystem,
    mut phi: MultiplierSet,
    iterations: usize,
    tol: f64,
    mut warnings: Vec<String>,
    homotopy_path: Vec<f64>,
) -> Result<(MultiplierSet, SolveReport)> {
    phi.normalize(sys.w)?;
    let x = phi.stacked();
    let res = sys.residual_report(&x);
    let converged = res.sup <= tol;
    if !converged {
        warnings.push(format!("residual {:.3e} above tolerance {tol:.1e}", res.sup));
    }
    let bound_value = lower_bound(&phi, sys.w)?;
    let report = SolveReport {
        p: phi.p,
        converged,
        iterations,
        final_residual_inf: res.sup,
        bound_value,
        marginal_residuals: res.marginal_sup(),
        normalization_residuals: res.normalization.iter().map(|v| v.abs()).collect(),
        homotopy_path,
        singular_value_ratio: None,
        nonuniqueness: None,
        warnings,
    };
    Ok((phi, report))
}

/// Direct solve of the linear p = 2 system. A numerically singular system
/// is solved in the least-squares sense and its smallest right singular vector
/// is returned as a non-uniqueness witness.
pub fn solve_p2(w: &ScalarField, g: &MarginalSet) -> Result<(MultiplierSet, SolveReport)> {
    let sys = MarginalSystem::new(w, g, 2.0)?;
    sys.check_masses()?;
    let rows = sys.square_rows();
    let zero = vec![0.0; sys.unknowns()];
    let jac = sys.square(&sys.jacobian(&zero, 0.0), &rows);
    let r0 = sys.residual_vector(&zero);
    let rhs = DVector::from_iterator(rows.len(), rows.iter().map(|&r| -r0[r]));

    let svd = jac.clone().svd(true, true);
    let sv = &svd.singular_values;
    let (imin, smin) = sv.iter().enumerate().fold((0, f64::INFINITY), |acc, (i, &s)| {
        if s < acc.1 {
            (i, s)
        } else {
            acc
        }
    });
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    let ratio = if smax > 0.0 { smin / smax } else { 0.0 };
    let mut warnings = Vec::new();
    if w.values().iter().any(|v| *v == 0.0) {
        warnings.push("density vanishes on part of the grid".into());
    }

    let (x, nonuniqueness) = if ratio < SINGULAR_RATIO {
        let x = svd
            .solve(&rhs, SINGULAR_RATIO * smax)
            .map_err(|e| Error::Domain(format!("least-squares solve failed: {e}")))?;
        let v_t = svd.v_t.as_ref().expect("requested V^T");
        let mut v: Vec<f64> = v_t.row(imin).iter().copied().collect();
        let s = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        v.iter_mut().for_each(|x| *x /= s);
        warnings.push(format!(
            "singular system: sigma_min / sigma_max = {ratio:.3e}; solutions are not unique"
        ));
        let mut m = MultiplierSet::from_stacked(sys.grid(), &v, 2.0);
        m.normalized = vec![false; sys.dims()];
        (
            x,
            Some(NullVector {
                singular_value_ratio: ratio,
                multipliers: m,
            }),
        )
    } else {
        let x = jac
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Domain("p = 2 system is singular".into()))?;
        (x, None)
    };
    let phi = MultiplierSet::from_stacked(sys.grid(), x.as_slice(), 2.0);
    let (phi, mut report) = finish(&sys, phi, 1, 1e-10, warnings, vec![2.0])?;
    report.singular_value_ratio = Some(ratio);
    report.nonuniqueness = nonuniqueness;
    Ok((phi, report))
}

/// Starting multipliers from the conditional means `g_i / w_i`; exact for
/// constant data and for p = 2 on product densities.
pub fn marginal_ratio_init(w: &ScalarField, g: &MarginalSet, p: f64) -> Result<MultiplierSet> {
    let grid = w.grid();
    let n = grid.dims() as f64;
    let one = ScalarField::constant(grid.clone(), 1.0);
    let wmass = grid::integrate(&one, w)?;
    let gmass = g.masses(grid)[0] / wmass;
    let mut phi = Vec::with_capacity(grid.dims());
    for i in 0..grid.dims() {
        let wi = grid::marginal_density(w, i)?;
        let t: Vec<f64> = g
            .table(i)
            .iter()
            .zip(&wi)
            .map(|(&gv, &wv)| if wv > 0.0 { n * signed_pow(gv / wv, p - 1.0) } else { 0.0 })
            .collect();
        phi.push(t);
    }
    let shift = n * (n - 1.0) * signed_pow(gmass, p - 1.0);
    phi[0].iter_mut().for_each(|v| *v -= shift);
    let mut m = MultiplierSet {
        phi,
        p,
        normalized: vec![false; grid.dims()],
    };
    m.normalize(w)?;
    Ok(m)
}

struct NewtonOutcome {
    x: Vec<f64>,
    iterations: usize,
    residual: f64,
    warnings: Vec<String>,
}

fn newton_step(sys: &MarginalSystem, x: &[f64], rows: &[usize], eps: f64) -> std::result::Result<(DVector<f64>, bool), String> {
    let full = sys.residual_vector(x);
    let jac = sys.square(&sys.jacobian(x, eps), rows);
    let rhs = DVector::from_iterator(rows.len(), rows.iter().map(|&r| -full[r]));
    match jac.clone().lu().solve(&rhs) {
        Some(s) if s.iter().all(|v| v.is_finite()) => Ok((s, false)),
        _ => jac.svd(true, true).solve(&rhs, 1e-14).map(|s| (s, true)).map_err(|e| e.to_string()),
    }
}

fn newton(sys: &MarginalSystem, mut x: Vec<f64>, opts: &SolveOptions, budget: usize) -> NewtonOutcome {
    let rows = sys.square_rows();
    let mut warnings = Vec::new();
    let mut res = sys.residual_report(&x).sup;
    let mut iterations = 0;
    while res > opts.tol_residual && iterations < budget {
        iterations += 1;
        let step = match newton_step(sys, &x, &rows, opts.smoothing_eps) {
            Ok((s, singular)) => {
                if singular {
                    warnings.push(format!("iteration {iterations}: singular Jacobian, least-squares step"));
                }
                s
            }
            Err(e) => {
                warnings.push(format!("iteration {iterations}: step failed: {e}"));
                break;
            }
        };
        let mut t = opts.damping;
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            let trial: Vec<f64> = x.iter().zip(step.iter()).map(|(a, d)| a + t * d).collect();
            let r = sys.residual_report(&trial).sup;
            if r.is_finite() && r <= (1.0 - ARMIJO * t) * res {
                x = trial;
                res = r;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            warnings.push(format!("iteration {iterations}: line search made no progress"));
            break;
        }
    }
    // polish: full steps while they still halve the residual
    if res <= opts.tol_residual {
        for _ in 0..POLISH_STEPS {
            let Ok((step, _)) = newton_step(sys, &x, &rows, opts.smoothing_eps) else { break };
            let trial: Vec<f64> = x.iter().zip(step.iter()).map(|(a, d)| a + d).collect();
            let r = sys.residual_report(&trial).sup;
            if !(r <= 0.5 * res) {
                break;
            }
            x = trial;
            res = r;
        }
    }
    NewtonOutcome {
        x,
        iterations,
        residual: res,
        warnings,
    }
}

/// Damped Newton with backtracking on the sup norm of the unsmoothed residual.
/// Non-convergence is reported, not raised.
pub fn solve_newton(
    w: &ScalarField,
    g: &MarginalSet,
    p: f64,
    opts: &SolveOptions,
) -> Result<(MultiplierSet, SolveReport)> {
    opts.validate()?;
    check_p(p)?;
    let sys = MarginalSystem::new(w, g, p)?;
    sys.check_masses()?;
    let grid = w.grid();

    let mut warnings = Vec::new();
    let mut path = Vec::new();
    let (start, stages): (Vec<f64>, Vec<f64>) = match &opts.init {
        Init::FromP2 => {
            let (phi2, rep2) = solve_p2(w, g)?;
            warnings.extend(rep2.warnings);
            path.push(2.0);
            let steps = opts
                .homotopy_steps
                .unwrap_or(if (p - 2.0).abs() > 1.0 { 3 } else { 0 });
            let stages = (1..=steps.max(1))
                .map(|k| 2.0 + (p - 2.0) * k as f64 / steps.max(1) as f64)
                .collect();
            (phi2.stacked(), stages)
        }
        Init::FromMarginalRatio => (marginal_ratio_init(w, g, p)?.stacked(), vec![p]),
        Init::Zeros => (vec![0.0; sys.unknowns()], vec![p]),
        Init::User { phi } => {
            let m = MultiplierSet {
                phi: phi.clone(),
                p,
                normalized: vec![false; grid.dims()],
            };
            m.check(grid).map_err(|e| Error::config("solver.init.user", e.to_string()))?;
            (m.stacked(), vec![p])
        }
    };

    let mut x = start;
    let mut iterations = 0;
    for &pk in &stages {
        let stage_sys = MarginalSystem::new(w, g, pk)?;
        let budget = opts.max_iter.saturating_sub(iterations);
        let out = newton(&stage_sys, x, opts, budget);
        iterations += out.iterations;
        warnings.extend(out.warnings);
        x = out.x;
        path.push(pk);
        if out.residual > opts.tol_residual && pk != p {
            warnings.push(format!("continuation stage p = {pk} stopped at residual {:.3e}", out.residual));
        }
    }
    let phi = MultiplierSet::from_stacked(grid, &x, p);
    finish(&sys, phi, iterations, opts.tol_residual, warnings, path)
}
