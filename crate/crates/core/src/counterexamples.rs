//! Finite truncations of the diagonal block counterexamples: sequences
//! `(theta_i, f_i, g_i)` for which `f(x) + g(y)` is `q`-integrable against the
//! block density while `f` and `g` are not, and the antisymmetric pair that
//! solves the homogeneous p = 2 equations when the background weight is zero.
//!
//! Divergence is only ever reported as a growth trend along a ladder of
//! truncation lengths.

use std::sync::Arc;

use serde::Serialize;

use crate::densities::{self, block_of, DensitySpec, DiagonalSpec};
use crate::error::{Error, Result};
use crate::grid::{self, compensated_sum, GridSpec, ScalarField};
use crate::solver::MultiplierSet;

/// Required growth of `sum |f_i|^q theta_i` per doubling of the truncation.
pub const GROWTH_RATIO: f64 = 1.2;
/// Required contraction of the `sum |f_i| theta_i` increments per doubling.
pub const CAUCHY_RATIO: f64 = 0.9;
pub const DEFAULT_LADDER: [usize; 4] = [64, 128, 256, 512];

#[derive(Debug, Clone, PartialEq)]
pub enum WitnessFamily {
    /// `theta_i ~ i^-2` with `f_i = i^(1.5/q)` for `q > 1.5` and
    /// `f_i = i^(1/q) ln(i+1)^(2/q)` for `q <= 1.5`.
    PowerLaw,
    User { theta: Vec<f64>, f: Vec<f64> },
}

#[derive(Debug, Clone, Serialize)]
pub struct WitnessSequences {
    pub q: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub family: String,
    pub theta: Vec<f64>,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    /// `sum |f_i| theta_i` at truncation.
    pub l1_sum: f64,
    /// `sum |f_i + g_i|^q theta_i` at truncation.
    pub sum_fg: f64,
}

impl WitnessSequences {
    fn assemble(q: f64, family: String, theta: Vec<f64>, f: Vec<f64>) -> Self {
        let g: Vec<f64> = f.iter().map(|v| -v).collect();
        let l1_sum = compensated_sum(f.iter().zip(&theta).map(|(f, t)| f.abs() * t));
        let sum_fg = compensated_sum(
            f.iter()
                .zip(&g)
                .zip(&theta)
                .map(|((f, g), t)| (f + g).abs().powf(q) * t),
        );
        WitnessSequences {
            q,
            k: theta.len(),
            family,
            theta,
            f,
            g,
            l1_sum,
            sum_fg,
        }
    }

    /// `sum_{i <= k} |f_i|^q theta_i`.
    pub fn lq_partial(&self, k: usize) -> f64 {
        compensated_sum((0..k).map(|i| self.f[i].abs().powf(self.q) * self.theta[i]))
    }

    /// `sum_{i <= k} |f_i| theta_i`.
    pub fn l1_partial(&self, k: usize) -> f64 {
        compensated_sum((0..k).map(|i| self.f[i].abs() * self.theta[i]))
    }
}

pub fn power_law_f(q: f64, i: usize) -> f64 {
    let x = i as f64;
    if q > 1.5 {
        x.powf(1.5 / q)
    } else {
        x.powf(1.0 / q) * (x + 1.0).ln().powf(2.0 / q)
    }
}

pub fn build_witness(q: f64, k: usize, family: WitnessFamily) -> Result<WitnessSequences> {
    if !(q > 1.0 && q.is_finite()) {
        return Err(Error::Domain(format!("need q > 1, got {q}")));
    }
    if k < 2 {
        return Err(Error::config("K", format!("need K >= 2, got {k}")));
    }
    match family {
        WitnessFamily::PowerLaw => {
            let theta = densities::power_law_theta(k);
            let f = (1..=k).map(|i| power_law_f(q, i)).collect();
            let label = if q > 1.5 { "power_law" } else { "power_log" };
            Ok(WitnessSequences::assemble(q, label.into(), theta, f))
        }
        WitnessFamily::User { theta, f } => {
            let theta = densities::normalized_theta(&theta, k)?;
            if f.len() != k {
                return Err(Error::config("f", format!("need {k} entries, got {}", f.len())));
            }
            if f.iter().any(|v| !v.is_finite()) {
                return Err(Error::config("f", "entries must be finite"));
            }
            if f.iter().all(|v| *v == 0.0) {
                return Err(Error::config("f", "the zero sequence cannot diverge"));
            }
            Ok(WitnessSequences::assemble(q, "user".into(), theta, f))
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DivergenceCertificate {
    pub ladder: Vec<usize>,
    /// `S_K = sum_{i <= K} |f_i|^q theta_i` at each rung.
    pub partial_sums: Vec<f64>,
    /// `sum_{i <= K} |f_i| theta_i` at each rung.
    pub l1_partial_sums: Vec<f64>,
    /// `S` growth between rungs, rescaled to one doubling.
    pub growth_ratios: Vec<f64>,
    /// Ratio of consecutive `l1` increments, rescaled to one doubling.
    pub l1_increment_ratios: Vec<f64>,
    /// Least-squares slope of `ln S_K` against `ln K`.
    pub growth_exponent: f64,
    pub monotone: bool,
    pub grows: bool,
    pub l1_cauchy: bool,
    /// `monotone && grows && l1_cauchy`. A trend, not a proof.
    pub certified: bool,
}

pub fn certify_divergence(ws: &WitnessSequences, ladder: &[usize]) -> Result<DivergenceCertificate> {
    if ladder.len() < 3 {
        return Err(Error::config("ladder", "need at least three rungs"));
    }
    if ladder[0] < 1 || ladder.windows(2).any(|p| p[1] <= p[0]) {
        return Err(Error::config("ladder", "rungs must be positive and increasing"));
    }
    let top = *ladder.last().unwrap();
    if top > ws.k {
        return Err(Error::config("ladder", format!("rung {top} exceeds K = {}", ws.k)));
    }
    let s: Vec<f64> = ladder.iter().map(|&k| ws.lq_partial(k)).collect();
    let l1: Vec<f64> = ladder.iter().map(|&k| ws.l1_partial(k)).collect();
    let doublings: Vec<f64> = ladder
        .windows(2)
        .map(|p| (p[1] as f64 / p[0] as f64).log2())
        .collect();
    let growth_ratios: Vec<f64> = s
        .windows(2)
        .zip(&doublings)
        .map(|(p, d)| (p[1] / p[0]).powf(1.0 / d))
        .collect();
    let increments: Vec<f64> = l1.windows(2).map(|p| p[1] - p[0]).collect();
    let l1_increment_ratios: Vec<f64> = increments
        .windows(2)
        .zip(&doublings[1..])
        .map(|(p, d)| (p[1] / p[0]).powf(1.0 / d))
        .collect();

    let xs: Vec<f64> = ladder.iter().map(|&k| (k as f64).ln()).collect();
    let ys: Vec<f64> = s.iter().map(|v| v.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let growth_exponent = sxy / sxx;

    let monotone = s.windows(2).all(|p| p[1] >= p[0]);
    let grows = growth_ratios.iter().all(|r| *r >= GROWTH_RATIO);
    let l1_cauchy = l1_increment_ratios.iter().all(|r| r.is_finite() && *r <= CAUCHY_RATIO);
    Ok(DivergenceCertificate {
        ladder: ladder.to_vec(),
        partial_sums: s,
        l1_partial_sums: l1,
        growth_ratios,
        l1_increment_ratios,
        growth_exponent,
        monotone,
        grows,
        l1_cauchy,
        certified: monotone && grows && l1_cauchy,
    })
}

/// Evidence that the diagonal block density lacks the Smirnov property,
/// consumed by `densities::classify_smirnov`.
#[derive(Debug, Clone, Serialize)]
pub struct ViolationWitness {
    pub q: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub alpha: f64,
    /// `int |f(x) + g(y)|^q w`, finite.
    pub sum_integral: f64,
    pub growth_exponent: f64,
    pub growth_ratios: Vec<f64>,
    pub certified: bool,
}

impl ViolationWitness {
    pub fn summary(&self) -> String {
        format!(
            "q = {}, K = {}, alpha = {}: int |f+g|^q w = {:.3e}, sum |f_i|^q theta_i ~ K^{:.3} (certified: {})",
            self.q, self.k, self.alpha, self.sum_integral, self.growth_exponent, self.certified
        )
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SmirnovViolationReport {
    pub q: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub alpha: f64,
    /// `alpha = 0`: the density vanishes off the diagonal blocks.
    pub study_mode: bool,
    /// Grid quadrature of `|f(x) + g(y)|^q w`.
    pub sum_integral: f64,
    /// `(1 - alpha) sum theta_i |f_i + g_i|^q`.
    pub diagonal_contribution: f64,
    /// `alpha int |f(x) + g(y)|^q w_0`.
    pub background_contribution: f64,
    /// Grid quadrature of `|f(x)|^q w` at truncation `K`.
    pub f_integral: f64,
    pub certificate: DivergenceCertificate,
    pub witness: ViolationWitness,
}

fn block_table(values: &[f64], nodes: &[f64]) -> Vec<f64> {
    nodes.iter().map(|&x| values[block_of(x)]).collect()
}

/// Evaluates the witness against `alpha w0 + (1 - alpha) sum theta_i 1_i(x) 1_i(y)`
/// on a block-aligned grid covering `[1, K+1)^2`.
pub fn smirnov_violation_report(
    ws: &WitnessSequences,
    alpha: f64,
    w0: Option<&DensitySpec>,
    grid: &Arc<GridSpec>,
    ladder: &[usize],
) -> Result<SmirnovViolationReport> {
    densities::check_block_alignment(grid, ws.k)?;
    let spec = DiagonalSpec {
        alpha,
        k: ws.k,
        theta: Some(ws.theta.clone()),
        background: w0.map(|b| Box::new(b.clone())),
        study_mode: alpha == 0.0,
    };
    let w = densities::assemble_diagonal(&spec, grid)?.field;
    let w0 = match w0 {
        Some(b) => b.assemble(grid)?.field,
        None => DensitySpec::uniform(2).assemble(grid)?.field,
    };
    let q = ws.q;
    let fx = block_table(&ws.f, grid.axis(0).nodes());
    let gy = block_table(&ws.g, grid.axis(1).nodes());
    let sum_field = ScalarField::from_axis_tables(grid.clone(), &[fx.clone(), gy], |v| (v[0] + v[1]).abs().powf(q))?;
    let f_field = ScalarField::from_axis_tables(grid.clone(), &[fx, vec![0.0; grid.shape()[1]]], |v| v[0].abs().powf(q))?;
    let sum_integral = grid::integrate(&sum_field, &w)?;
    let diagonal_contribution = (1.0 - alpha) * ws.sum_fg;
    let background_contribution = alpha * grid::integrate(&sum_field, &w0)?;
    let f_integral = grid::integrate(&f_field, &w)?;
    let certificate = certify_divergence(ws, ladder)?;
    let witness = ViolationWitness {
        q,
        k: ws.k,
        alpha,
        sum_integral,
        growth_exponent: certificate.growth_exponent,
        growth_ratios: certificate.growth_ratios.clone(),
        certified: certificate.certified,
    };
    Ok(SmirnovViolationReport {
        q,
        k: ws.k,
        alpha,
        study_mode: alpha == 0.0,
        sum_integral,
        diagonal_contribution,
        background_contribution,
        f_integral,
        certificate,
        witness,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct NonuniquenessResiduals {
    /// `sup_x |f(x) w_X(x) + int g(y) w(x, y) dy|`.
    pub eq1: f64,
    /// `sup_y |g(y) w_Y(y) + int f(x) w(x, y) dx|`.
    pub eq2: f64,
    /// `|int g w_Y|`.
    pub eq3: f64,
    /// `sup |f(x) + g(y)|` over nodes where `w > 0`.
    pub sum_on_support: f64,
    /// `max_i |f_i|`; positive for a nontrivial witness.
    pub f_sup: f64,
    /// Partial sums `sum_{i <= K} f_i^2 theta_i` (that is `||f||_{2,w}^2`) along the ladder.
    pub ladder: Vec<usize>,
    pub norm_partial_sums: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct NonuniquenessWitness {
    pub sequences: WitnessSequences,
    pub density: ScalarField,
    /// `f(x)` as a field on the grid.
    pub f_field: ScalarField,
    /// `g(y)` as a field on the grid.
    pub g_field: ScalarField,
    pub f_table: Vec<f64>,
    pub g_table: Vec<f64>,
    pub residuals: NonuniquenessResiduals,
}

impl NonuniquenessWitness {
    /// The pair as p = 2 multipliers `(phi_1, phi_2) = (f, g)`.
    pub fn multipliers(&self) -> MultiplierSet {
        MultiplierSet {
            phi: vec![self.f_table.clone(), self.g_table.clone()],
            p: 2.0,
            normalized: vec![false, false],
        }
    }
}

/// Builds the antisymmetric solution of the homogeneous p = 2 equations on the
/// `alpha = 0` block density, with `f_1 = -sum_{i >= 2} f_i theta_i / theta_1`.
pub fn nonuniqueness_witness(ws: &WitnessSequences, grid: &Arc<GridSpec>, ladder: &[usize]) -> Result<NonuniquenessWitness> {
    if ws.q != 2.0 {
        return Err(Error::Unsupported(format!(
            "the non-uniqueness construction is Hilbertian (q = 2), got q = {}",
            ws.q
        )));
    }
    densities::check_block_alignment(grid, ws.k)?;
    let mut f = ws.f.clone();
    f[0] = -compensated_sum((1..ws.k).map(|i| f[i] * ws.theta[i])) / ws.theta[0];
    let seq = WitnessSequences::assemble(ws.q, ws.family.clone(), ws.theta.clone(), f);

    let spec = DiagonalSpec {
        alpha: 0.0,
        k: ws.k,
        theta: Some(ws.theta.clone()),
        background: None,
        study_mode: true,
    };
    let w = densities::assemble_diagonal(&spec, grid)?.field;
    let f_table = block_table(&seq.f, grid.axis(0).nodes());
    let g_table = block_table(&seq.g, grid.axis(1).nodes());
    let n0 = f_table.len();
    let n1 = g_table.len();
    let f_field = ScalarField::from_axis_tables(grid.clone(), &[f_table.clone(), vec![0.0; n1]], |v| v[0])?;
    let g_field = ScalarField::from_axis_tables(grid.clone(), &[vec![0.0; n0], g_table.clone()], |v| v[1])?;

    let w_x = grid::marginal_density(&w, 0)?;
    let w_y = grid::marginal_density(&w, 1)?;
    let gw_x = grid::weighted_marginal(&g_field, &w, 0)?;
    let fw_y = grid::weighted_marginal(&f_field, &w, 1)?;
    let sup = |v: &mut dyn Iterator<Item = f64>| v.fold(0.0f64, |m, x| m.max(x.abs()));
    let eq1 = sup(&mut f_table.iter().zip(&w_x).zip(&gw_x).map(|((f, w), gw)| f * w + gw));
    let eq2 = sup(&mut g_table.iter().zip(&w_y).zip(&fw_y).map(|((g, w), fw)| g * w + fw));
    let gwy: Vec<f64> = g_table.iter().zip(&w_y).map(|(g, w)| g * w).collect();
    let eq3 = grid.axis(1).quadrature(&gwy).abs();
    let sum_on_support = sup(&mut w
        .values()
        .iter()
        .zip(f_field.values().iter().zip(g_field.values()))
        .filter(|(w, _)| **w > 0.0)
        .map(|(_, (f, g))| f + g));
    let f_sup = sup(&mut seq.f.iter().copied());
    let ladder: Vec<usize> = ladder.iter().copied().filter(|&k| k <= seq.k).collect();
    let norm_partial_sums = ladder.iter().map(|&k| seq.lq_partial(k)).collect();

    Ok(NonuniquenessWitness {
        residuals: NonuniquenessResiduals {
            eq1,
            eq2,
            eq3,
            sum_on_support,
            f_sup,
            ladder,
            norm_partial_sums,
        },
        sequences: seq,
        density: w,
        f_field,
        g_field,
        f_table,
        g_table,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::densities::{classify_smirnov, Density, Provenance, SmirnovClass};
    use proptest::prelude::*;

    #[test]
    fn q2_power_law_matches_exponents() {
        let ws = build_witness(2.0, 512, WitnessFamily::PowerLaw).unwrap();
        assert!((ws.f[15] - 16f64.powf(0.75)).abs() < 1e-12);
        assert!((ws.theta.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(ws.sum_fg, 0.0);
        let c = certify_divergence(&ws, &DEFAULT_LADDER).unwrap();
        assert!(c.certified, "{c:?}");
        for r in &c.growth_ratios {
            assert!((r - 2f64.sqrt()).abs() < 0.1, "{r}");
        }
        assert!((c.growth_exponent - 0.5).abs() < 0.1);
        for r in &c.l1_increment_ratios {
            assert!((r - 2f64.powf(-0.25)).abs() < 0.03, "{r}");
        }
    }

    #[test]
    fn q3_uses_square_root() {
        let ws = build_witness(3.0, 64, WitnessFamily::PowerLaw).unwrap();
        assert!((ws.f[3] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn constant_f_is_not_certified() {
        let k = 512;
        let ws = build_witness(
            2.0,
            k,
            WitnessFamily::User {
                theta: densities::power_law_theta(k),
                f: vec![1.0; k],
            },
        )
        .unwrap();
        let c = certify_divergence(&ws, &DEFAULT_LADDER).unwrap();
        assert!(!c.grows && !c.certified);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(build_witness(1.0, 8, WitnessFamily::PowerLaw), Err(Error::Domain(_))));
        let zero = WitnessFamily::User {
            theta: vec![0.5, 0.5],
            f: vec![0.0, 0.0],
        };
        assert!(build_witness(2.0, 2, zero).is_err());
        let ws = build_witness(2.0, 100, WitnessFamily::PowerLaw).unwrap();
        assert!(certify_divergence(&ws, &DEFAULT_LADDER).is_err());
        assert!(certify_divergence(&ws, &[10, 5, 20]).is_err());
    }

    #[test]
    fn two_block_hand_example() {
        let ws = build_witness(
            2.0,
            2,
            WitnessFamily::User {
                theta: vec![0.5, 0.5],
                f: vec![7.0, 1.0],
            },
        )
        .unwrap();
        let grid = Arc::new(densities::block_grid(2, 3).unwrap());
        let nw = nonuniqueness_witness(&ws, &grid, &[]).unwrap();
        assert_eq!(nw.sequences.f, vec![-1.0, 1.0]);
        let r = &nw.residuals;
        assert!(r.eq1 < 1e-15 && r.eq2 < 1e-15 && r.eq3 < 1e-15, "{r:?}");
        assert_eq!(r.sum_on_support, 0.0);
    }

    #[test]
    fn zero_witness_is_trivial() {
        let ws = WitnessSequences::assemble(2.0, "user".into(), vec![0.5, 0.5], vec![0.0, 0.0]);
        let grid = Arc::new(densities::block_grid(2, 1).unwrap());
        let nw = nonuniqueness_witness(&ws, &grid, &[]).unwrap();
        assert_eq!(nw.residuals.f_sup, 0.0);
        assert_eq!(nw.residuals.eq1, 0.0);
    }

    #[test]
    fn nonuniqueness_needs_q2() {
        let ws = build_witness(3.0, 4, WitnessFamily::PowerLaw).unwrap();
        let grid = Arc::new(densities::block_grid(4, 1).unwrap());
        assert!(matches!(nonuniqueness_witness(&ws, &grid, &[]), Err(Error::Unsupported(_))));
    }

    #[test]
    fn smirnov_report_cancels_on_blocks() {
        let ws = build_witness(2.0, 256, WitnessFamily::PowerLaw).unwrap();
        let grid = Arc::new(densities::block_grid(256, 1).unwrap());
        let r = smirnov_violation_report(&ws, 0.0, None, &grid, &[32, 64, 128, 256]).unwrap();
        assert!(r.study_mode);
        assert_eq!(r.sum_integral, 0.0);
        assert_eq!(r.diagonal_contribution, 0.0);
        assert!(r.certificate.certified);
        // the grid value of int |f|^2 w is the truncated series
        assert!((r.f_integral - ws.lq_partial(256)).abs() < 1e-10 * r.f_integral);
    }

    #[test]
    fn smirnov_report_background_half() {
        let k = 16;
        let ws = build_witness(2.0, k, WitnessFamily::PowerLaw).unwrap();
        let grid = Arc::new(densities::block_grid(k, 2).unwrap());
        let r = smirnov_violation_report(&ws, 0.5, None, &grid, &[4, 8, 16]).unwrap();
        assert!(!r.study_mode);
        assert!((r.sum_integral - r.background_contribution).abs() < 1e-12 * r.sum_integral);
        // direct quadrature against the uniform block background
        let side = k as f64;
        let mut direct = 0.0;
        for a in 0..k {
            for b in 0..k {
                direct += (ws.f[a] + ws.g[b]).powi(2) / (side * side);
            }
        }
        assert!((r.sum_integral - 0.5 * direct).abs() < 1e-10 * direct);
    }

    #[test]
    fn witness_upgrades_classification() {
        let k = 64;
        let ws = build_witness(2.0, k, WitnessFamily::PowerLaw).unwrap();
        let grid = Arc::new(densities::block_grid(k, 1).unwrap());
        let r = smirnov_violation_report(&ws, 0.5, None, &grid, &[16, 32, 64]).unwrap();
        let spec = DiagonalSpec {
            alpha: 0.5,
            k,
            theta: None,
            background: None,
            study_mode: false,
        };
        let d: Density = densities::assemble_diagonal(&spec, &grid).unwrap();
        assert!(matches!(d.provenance, Provenance::Diagonal { .. }));
        assert_eq!(classify_smirnov(&d, None, None), SmirnovClass::Unknown);
        assert!(matches!(
            classify_smirnov(&d, None, Some(&r.witness)),
            SmirnovClass::ViolationWitness { .. }
        ));
    }

    proptest! {
        #[test]
        fn power_law_certificates_hold(q in 2.0f64..8.0) {
            let ws = build_witness(q, 512, WitnessFamily::PowerLaw).unwrap();
            let c = certify_divergence(&ws, &DEFAULT_LADDER).unwrap();
            prop_assert!(c.certified, "{:?}", c);
            prop_assert_eq!(ws.sum_fg, 0.0);
        }

        #[test]
        fn nonuniqueness_residuals_vanish(k in 2usize..40, per_block in 1usize..3) {
            let ws = build_witness(2.0, k, WitnessFamily::PowerLaw).unwrap();
            let grid = Arc::new(densities::block_grid(k, per_block).unwrap());
            let nw = nonuniqueness_witness(&ws, &grid, &[]).unwrap();
            let r = &nw.residuals;
            prop_assert!(r.eq1 <= 1e-12 && r.eq2 <= 1e-12 && r.eq3 <= 1e-12, "{:?}", r);
            prop_assert_eq!(r.sum_on_support, 0.0);
            prop_assert!(r.f_sup > 0.0);
        }
    }
}
