//! Weight densities: finite product mixtures, the diagonal block family with a
//! background density, truncated correlated Gaussians and tabulated fields,
//! together with the likelihood-ratio diagnostics used to classify them.

use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::counterexamples::ViolationWitness;
use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::grid::{self, Axis, GridSpec, ScalarField, Scheme};

/// Smallest admissible node value of a density.
pub const POSITIVITY_FLOOR: f64 = 1e-300;
/// Default threshold on the largest node ratio for `bounded_ratio`.
pub const DEFAULT_RATIO_THRESHOLD: f64 = 1e6;
/// Relative change allowed between a grid and its refinement (or enlargement)
/// before a ratio estimate is called unstable.
pub const STABILITY_TOL: f64 = 0.05;
/// Per-step factor above which a ratio growth table counts as unbounded.
pub const GROWTH_FACTOR: f64 = 1.2;

/// One-dimensional nonnegative factor; expressions use variable 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Factor {
    Table(Vec<f64>),
    Expr(Expr),
}

impl Factor {
    fn sample(&self, axis: &Axis, key: &str) -> Result<Vec<f64>> {
        let values: Vec<f64> = match self {
            Factor::Table(t) => {
                if t.len() == axis.node_count() {
                    t.clone()
                } else if axis.scheme() == Scheme::Midpoint
                    && t.len() < axis.node_count()
                    && axis.node_count() % t.len() == 0
                {
                    // piecewise-constant prolongation of a coarser table
                    let r = axis.node_count() / t.len();
                    t.iter().flat_map(|&v| std::iter::repeat(v).take(r)).collect()
                } else {
                    return Err(Error::Shape(format!(
                        "{key}: table has {} entries, axis has {} nodes",
                        t.len(),
                        axis.node_count()
                    )));
                }
            }
            Factor::Expr(e) => {
                e.check_dims(1, key)?;
                axis.nodes().iter().map(|&x| e.eval(&[x])).collect()
            }
        };
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::Positivity(format!("{key}: factor value {v} is not a finite nonnegative number")));
        }
        Ok(values)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    /// One factor per axis.
    pub factors: Vec<Factor>,
}

/// `w = sum_j lambda_j prod_i w_i^(j)(xi_i)`, each factor normalized to unit mass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductMixtureSpec {
    pub components: Vec<MixtureComponent>,
}

impl ProductMixtureSpec {
    /// The uniform density on any box.
    pub fn uniform(dims: usize) -> Self {
        ProductMixtureSpec {
            components: vec![MixtureComponent {
                weight: 1.0,
                factors: vec![Factor::Expr(Expr::constant(1.0)); dims],
            }],
        }
    }
}

/// `alpha * w0 + (1 - alpha) * sum_i theta_i 1[i,i+1)(x) 1[i,i+1)(y)` on `[1, k+1)^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagonalSpec {
    pub alpha: f64,
    pub k: usize,
    /// Block masses; defaults to `theta_i ~ i^-2`. Renormalized to sum to one.
    #[serde(default)]
    pub theta: Option<Vec<f64>>,
    /// Background density; defaults to uniform.
    #[serde(default)]
    pub background: Option<Box<DensitySpec>>,
    /// Permits `alpha = 0`, where the density vanishes off the diagonal blocks.
    #[serde(default)]
    pub study_mode: bool,
}

/// Declarative density description, as found in run configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum DensitySpec {
    ProductMixture(ProductMixtureSpec),
    Diagonal(DiagonalSpec),
    /// Standard bivariate normal with correlation `rho`, cut off at the grid box.
    CorrelatedGaussian { rho: f64 },
    /// A field file (see `docs/formats.md`); the grid must match.
    Tabulated { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    ProductMixture { components: usize },
    Diagonal { alpha: f64, k: usize, study_mode: bool },
    CorrelatedGaussian { rho: f64 },
    Tabulated,
}

/// An assembled, normalized density field with its construction record.
#[derive(Debug, Clone)]
pub struct Density {
    pub field: ScalarField,
    pub provenance: Provenance,
    /// Whether any axis truncates an unbounded interval.
    pub truncated: bool,
}

impl Density {
    /// Wraps a user field after checking positivity and normalizing it.
    pub fn tabulated(field: ScalarField) -> Result<Self> {
        check_positive(&field, "tabulated density")?;
        let field = normalize(field)?;
        let truncated = field.grid().any_truncated();
        Ok(Density {
            field,
            provenance: Provenance::Tabulated,
            truncated,
        })
    }

    pub fn grid(&self) -> &Arc<GridSpec> {
        self.field.grid()
    }
}

fn check_positive(field: &ScalarField, what: &str) -> Result<()> {
    if let Some((k, v)) = field
        .values()
        .iter()
        .enumerate()
        .find(|(_, v)| !(**v >= POSITIVITY_FLOOR))
    {
        return Err(Error::Positivity(format!(
            "{what} has value {v} at node {k} (floor {POSITIVITY_FLOOR:e})"
        )));
    }
    Ok(())
}

fn normalize(field: ScalarField) -> Result<ScalarField> {
    let one = ScalarField::constant(field.grid().clone(), 1.0);
    let mass = grid::integrate(&field, &one)?;
    if !(mass > 0.0 && mass.is_finite()) {
        return Err(Error::Positivity(format!("density mass {mass} is not positive")));
    }
    field.map(|v| v / mass)
}

impl DensitySpec {
    pub fn uniform(dims: usize) -> Self {
        DensitySpec::ProductMixture(ProductMixtureSpec::uniform(dims))
    }

    pub fn assemble(&self, grid: &Arc<GridSpec>) -> Result<Density> {
        match self {
            DensitySpec::ProductMixture(spec) => assemble_product_mixture(spec, grid),
            DensitySpec::Diagonal(spec) => assemble_diagonal(spec, grid),
            DensitySpec::CorrelatedGaussian { rho } => assemble_gaussian(*rho, grid),
            DensitySpec::Tabulated { path } => {
                let field = crate::format::read_field(path)?;
                let field = if **field.grid() == **grid {
                    ScalarField::new(grid.clone(), field.into_values())?
                } else {
                    prolong_to(&field, grid)?
                };
                Density::tabulated(field)
            }
        }
    }
}

pub fn assemble_product_mixture(spec: &ProductMixtureSpec, grid: &Arc<GridSpec>) -> Result<Density> {
    if spec.components.is_empty() {
        return Err(Error::config("density.components", "need at least one component"));
    }
    let total: f64 = spec.components.iter().map(|c| c.weight).sum();
    if spec.components.iter().any(|c| !(c.weight >= 0.0)) || (total - 1.0).abs() > 1e-12 {
        return Err(Error::config(
            "density.components.weight",
            format!("mixture weights must be nonnegative and sum to 1, sum is {total}"),
        ));
    }
    let mut values = vec![0.0; grid.len()];
    for (j, comp) in spec.components.iter().enumerate() {
        if comp.factors.len() != grid.dims() {
            return Err(Error::config(
                format!("density.components[{j}].factors"),
                format!("{} factors for a {}-dimensional grid", comp.factors.len(), grid.dims()),
            ));
        }
        let mut tables = Vec::with_capacity(grid.dims());
        for (i, (factor, axis)) in comp.factors.iter().zip(grid.axes()).enumerate() {
            let key = format!("density.components[{j}].factors[{i}]");
            let mut t = factor.sample(axis, &key)?;
            let mass = axis.quadrature(&t);
            if !(mass > 0.0) {
                return Err(Error::Positivity(format!("{key}: factor has zero mass")));
            }
            t.iter_mut().for_each(|v| *v /= mass);
            tables.push(t);
        }
        let product = ScalarField::from_axis_tables(grid.clone(), &tables, |row| row.iter().product())?;
        for (acc, v) in values.iter_mut().zip(product.values()) {
            *acc += comp.weight * v;
        }
    }
    let field = ScalarField::new(grid.clone(), values)?;
    check_positive(&field, "product mixture")?;
    Ok(Density {
        field: normalize(field)?,
        provenance: Provenance::ProductMixture {
            components: spec.components.len(),
        },
        truncated: grid.any_truncated(),
    })
}

/// Checks that `grid` is `[1, k+1)^2` with a whole number of midpoint nodes per
/// unit block; returns the nodes per block.
pub fn check_block_alignment(grid: &GridSpec, k: usize) -> Result<usize> {
    if grid.dims() != 2 {
        return Err(Error::Alignment(format!("need a 2-dimensional grid, got {}", grid.dims())));
    }
    let mut per_block = None;
    for (i, axis) in grid.axes().iter().enumerate() {
        if axis.scheme() != Scheme::Midpoint {
            return Err(Error::Alignment(format!("axis {i} must use the midpoint rule")));
        }
        if axis.lower() != 1.0 || axis.upper() != (k + 1) as f64 {
            return Err(Error::Alignment(format!(
                "axis {i} spans [{}, {}], expected [1, {}]",
                axis.lower(),
                axis.upper(),
                k + 1
            )));
        }
        if axis.node_count() % k != 0 {
            return Err(Error::Alignment(format!(
                "axis {i} has {} nodes, not a multiple of {k} blocks",
                axis.node_count()
            )));
        }
        let m = axis.node_count() / k;
        if per_block.is_some_and(|p| p != m) {
            return Err(Error::Alignment("axes use different block resolutions".into()));
        }
        per_block = Some(m);
    }
    Ok(per_block.unwrap())
}

/// Block-aligned grid `[1, k+1)^2` with `per_block` nodes per unit block.
pub fn block_grid(k: usize, per_block: usize) -> Result<GridSpec> {
    GridSpec::uniform(2, 1.0, (k + 1) as f64, k * per_block)
}

/// `theta_i = C i^-2`, `i = 1..=k`.
pub fn power_law_theta(k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (1..=k).map(|i| (i as f64).powi(-2)).collect();
    let total = grid::compensated_sum(raw.iter().copied());
    raw.into_iter().map(|t| t / total).collect()
}

pub(crate) fn normalized_theta(theta: &[f64], k: usize) -> Result<Vec<f64>> {
    if theta.len() != k {
        return Err(Error::config("theta", format!("need {k} entries, got {}", theta.len())));
    }
    if let Some(t) = theta.iter().find(|t| !(**t > 0.0 && t.is_finite())) {
        return Err(Error::config("theta", format!("entries must be positive, found {t}")));
    }
    let total = grid::compensated_sum(theta.iter().copied());
    Ok(theta.iter().map(|t| t / total).collect())
}

/// Block index (0-based) of a coordinate on a block-aligned grid.
pub(crate) fn block_of(x: f64) -> usize {
    x.floor() as usize - 1
}

pub fn assemble_diagonal(spec: &DiagonalSpec, grid: &Arc<GridSpec>) -> Result<Density> {
    let alpha = spec.alpha;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config("density.alpha", format!("must lie in [0, 1], got {alpha}")));
    }
    if alpha == 0.0 && !spec.study_mode {
        return Err(Error::Positivity(
            "alpha = 0 leaves the density zero off the diagonal; enable study_mode".into(),
        ));
    }
    if spec.k < 1 {
        return Err(Error::config("density.k", "need at least one block"));
    }
    check_block_alignment(grid, spec.k)?;
    let theta = match &spec.theta {
        Some(t) => normalized_theta(t, spec.k)?,
        None => power_law_theta(spec.k),
    };
    let background = match &spec.background {
        Some(b) => b.assemble(grid)?.field,
        None => DensitySpec::uniform(2).assemble(grid)?.field,
    };
    let nodes0 = grid.axis(0).nodes();
    let nodes1 = grid.axis(1).nodes();
    let n1 = nodes1.len();
    let values: Vec<f64> = background
        .values()
        .iter()
        .enumerate()
        .map(|(flat, &b)| {
            let bx = block_of(nodes0[flat / n1]);
            let by = block_of(nodes1[flat % n1]);
            let diag = if bx == by { theta[bx] } else { 0.0 };
            alpha * b + (1.0 - alpha) * diag
        })
        .collect();
    let field = ScalarField::new(grid.clone(), values)?;
    if alpha > 0.0 {
        check_positive(&field, "diagonal density")?;
    }
    Ok(Density {
        field: normalize(field)?,
        provenance: Provenance::Diagonal {
            alpha,
            k: spec.k,
            study_mode: spec.study_mode,
        },
        truncated: false,
    })
}

pub fn assemble_gaussian(rho: f64, grid: &Arc<GridSpec>) -> Result<Density> {
    if grid.dims() != 2 {
        return Err(Error::config("density.type", "correlated_gaussian is bivariate"));
    }
    if !(rho > -1.0 && rho < 1.0) {
        return Err(Error::config("density.rho", format!("need |rho| < 1, got {rho}")));
    }
    let s = 1.0 - rho * rho;
    let field = ScalarField::from_fn(grid.clone(), |x| {
        (-(x[0] * x[0] - 2.0 * rho * x[0] * x[1] + x[1] * x[1]) / (2.0 * s)).exp()
    })?;
    check_positive(&field, "correlated gaussian")?;
    Ok(Density {
        field: normalize(field)?,
        provenance: Provenance::CorrelatedGaussian { rho },
        truncated: grid.any_truncated(),
    })
}

/// Piecewise-constant prolongation of a midpoint field onto a grid whose axes
/// subdivide the field's cells.
fn prolong_to(field: &ScalarField, target: &Arc<GridSpec>) -> Result<ScalarField> {
    let src = field.grid();
    let compatible = src.dims() == target.dims()
        && src.axes().iter().zip(target.axes()).all(|(a, b)| {
            a.scheme() == Scheme::Midpoint
                && b.scheme() == Scheme::Midpoint
                && a.lower() == b.lower()
                && a.upper() == b.upper()
                && b.node_count() % a.node_count() == 0
        });
    if !compatible {
        return Err(Error::Shape("tabulated density grid does not match the problem grid".into()));
    }
    let ratios: Vec<usize> = src
        .shape()
        .iter()
        .zip(target.shape())
        .map(|(a, b)| b / a)
        .collect();
    let mut idx = vec![0; target.dims()];
    let mut coarse = vec![0; target.dims()];
    let values = (0..target.len())
        .map(|flat| {
            target.unravel(flat, &mut idx);
            for d in 0..idx.len() {
                coarse[d] = idx[d] / ratios[d];
            }
            field.values()[src.ravel(&coarse)]
        })
        .collect();
    ScalarField::new(target.clone(), values)
}

/// Maps a node of the full grid to its position on the residual grid of axis `i`.
fn residual_index(grid: &GridSpec, flat: usize, i: usize) -> usize {
    let (_, n_i, post) = grid.split(i);
    let a = flat / (n_i * post);
    let b = flat % post;
    a * post + b
}

fn axis_index(grid: &GridSpec, flat: usize, i: usize) -> usize {
    let (_, n_i, post) = grid.split(i);
    (flat / post) % n_i
}

fn ratio_parts(w: &ScalarField, i: usize) -> Result<(Vec<f64>, ScalarField)> {
    Ok((grid::marginal_density(w, i)?, grid::comarginal_density(w, i)?))
}

/// `w_i(xi_i) w_i^c(xi_i^c) / w(xi)` at every node.
pub fn likelihood_ratio(w: &ScalarField, i: usize) -> Result<ScalarField> {
    if let Some(k) = w.values().iter().position(|v| *v <= 0.0) {
        return Err(Error::Domain(format!(
            "density vanishes at node {k}; the likelihood ratio is undefined there"
        )));
    }
    let (wi, wc) = ratio_parts(w, i)?;
    let g = w.grid();
    let values = w
        .values()
        .iter()
        .enumerate()
        .map(|(flat, &v)| wi[axis_index(g, flat, i)] * wc.values()[residual_index(g, flat, i)] / v)
        .collect();
    ScalarField::new(g.clone(), values)
}

/// Likelihood ratio on the support of `w`; zero elsewhere. The mask marks the
/// support.
pub fn likelihood_ratio_on_support(w: &ScalarField, i: usize) -> Result<(ScalarField, Vec<bool>)> {
    let (wi, wc) = ratio_parts(w, i)?;
    let g = w.grid();
    let support: Vec<bool> = w.values().iter().map(|v| *v > 0.0).collect();
    let values = w
        .values()
        .iter()
        .enumerate()
        .map(|(flat, &v)| {
            if v > 0.0 {
                wi[axis_index(g, flat, i)] * wc.values()[residual_index(g, flat, i)] / v
            } else {
                0.0
            }
        })
        .collect();
    Ok((ScalarField::new(g.clone(), values)?, support))
}

#[derive(Debug, Clone, Serialize)]
pub struct AxisRatio {
    pub axis: usize,
    /// `||w_i w_i^c / w||_{p,w}` on the given grid.
    pub lp_norm: f64,
    /// Largest node value of the ratio.
    pub max_ratio: f64,
    pub lp_norm_refined: f64,
    pub max_ratio_refined: f64,
    /// Largest ratio after enlarging truncated axes, when any are truncated.
    pub max_ratio_enlarged: Option<f64>,
}

/// Growth of the largest node ratio along a family parameter.
#[derive(Debug, Clone, Serialize)]
pub struct RatioGrowthTable {
    pub parameter: String,
    pub values: Vec<f64>,
    pub max_ratio: Vec<f64>,
    pub step_factors: Vec<f64>,
    /// Every step grows by at least `GROWTH_FACTOR`.
    pub unbounded_trend: bool,
}

impl RatioGrowthTable {
    fn new(parameter: &str, values: Vec<f64>, max_ratio: Vec<f64>) -> Self {
        let step_factors: Vec<f64> = max_ratio.windows(2).map(|p| p[1] / p[0]).collect();
        let unbounded_trend = !step_factors.is_empty() && step_factors.iter().all(|f| *f >= GROWTH_FACTOR);
        RatioGrowthTable {
            parameter: parameter.into(),
            values,
            max_ratio,
            step_factors,
            unbounded_trend,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct WeightConditionReport {
    pub p: f64,
    pub threshold: f64,
    pub truncated: bool,
    pub axes: Vec<AxisRatio>,
    pub product_mixture_form: bool,
    pub bounded_ratio: bool,
    #[serde(rename = "condition_Lp_ok")]
    pub condition_lp_ok: bool,
    pub violation_witness: bool,
    pub growth: Option<RatioGrowthTable>,
    pub notes: Vec<String>,
}

impl WeightConditionReport {
    /// Attaches a family growth table; unbounded growth sets `violation_witness`.
    pub fn with_growth(mut self, table: RatioGrowthTable) -> Self {
        self.violation_witness |= table.unbounded_trend;
        self.growth = Some(table);
        self
    }
}

fn ratio_stats(w: &ScalarField, i: usize, p: f64) -> Result<(f64, f64)> {
    let r = likelihood_ratio(w, i)?;
    let max = r.values().iter().fold(0.0f64, |m, v| m.max(*v));
    let lp = grid::weighted_p_norm(&r, w, p)?;
    Ok((lp, max))
}

fn stable(a: f64, b: f64) -> bool {
    a.is_finite() && b.is_finite() && (a - b).abs() <= STABILITY_TOL * a.abs().max(b.abs())
}

/// Grid with every truncated axis widened by half its length on both sides,
/// at the same node spacing.
pub fn enlarged(grid: &GridSpec) -> Result<GridSpec> {
    let axes = grid
        .axes()
        .iter()
        .map(|a| {
            if !a.truncated() {
                return Ok(a.clone());
            }
            let len = a.upper() - a.lower();
            let n = 2 * a.node_count();
            Ok(Axis::new(a.lower() - 0.5 * len, a.upper() + 0.5 * len, n, a.scheme())?.with_truncation(true))
        })
        .collect::<Result<Vec<_>>>()?;
    GridSpec::new(axes)
}

/// Estimates `||w_i w_i^c / w||_{p,w}` and the largest node ratio for every
/// axis, and decides stability under one dyadic refinement (and, for truncated
/// grids, under enlarging the truncation box). A finite grid cannot decide
/// essential boundedness; the flags record the numerical evidence only.
pub fn check_weight_conditions(
    spec: &DensitySpec,
    grid: &Arc<GridSpec>,
    p: f64,
    threshold: f64,
) -> Result<WeightConditionReport> {
    if !(p > 1.0) {
        return Err(Error::config("p", format!("need p > 1, got {p}")));
    }
    let coarse = spec.assemble(grid)?;
    let fine = spec.assemble(&Arc::new(grid.refined()))?;
    let mut notes = Vec::new();
    let wide = if coarse.truncated {
        match spec {
            DensitySpec::Tabulated { .. } => {
                notes.push("tabulated density on a truncated box cannot be enlarged".into());
                None
            }
            _ => Some(spec.assemble(&Arc::new(enlarged(grid)?))?),
        }
    } else {
        None
    };

    let mut axes = Vec::with_capacity(grid.dims());
    let mut bounded = true;
    let mut lp_ok = true;
    for i in 0..grid.dims() {
        let (lp, max) = ratio_stats(&coarse.field, i, p)?;
        let (lp_f, max_f) = ratio_stats(&fine.field, i, p)?;
        let max_e = match &wide {
            Some(d) => Some(ratio_stats(&d.field, i, p)?.1),
            None => None,
        };
        let trunc_ok = match max_e {
            Some(m) => stable(max, m),
            None => !coarse.truncated,
        };
        if !(max < threshold && stable(max, max_f) && trunc_ok) {
            bounded = false;
        }
        if !(lp < threshold && stable(lp, lp_f) && trunc_ok) {
            lp_ok = false;
        }
        if !trunc_ok {
            notes.push(format!("axis {i}: ratio estimate changes when the truncation box is enlarged"));
        }
        axes.push(AxisRatio {
            axis: i,
            lp_norm: lp,
            max_ratio: max,
            lp_norm_refined: lp_f,
            max_ratio_refined: max_f,
            max_ratio_enlarged: max_e,
        });
    }
    Ok(WeightConditionReport {
        p,
        threshold,
        truncated: coarse.truncated,
        axes,
        product_mixture_form: matches!(coarse.provenance, Provenance::ProductMixture { .. }),
        bounded_ratio: bounded,
        condition_lp_ok: lp_ok,
        violation_witness: false,
        growth: None,
        notes,
    })
}

/// Largest likelihood ratio of the diagonal family as the block count grows,
/// with a uniform background on each `[1, k+1)^2`.
pub fn diagonal_ratio_growth(alpha: f64, ks: &[usize], per_block: usize) -> Result<RatioGrowthTable> {
    let mut max = Vec::with_capacity(ks.len());
    for &k in ks {
        let grid = Arc::new(block_grid(k, per_block)?);
        let spec = DiagonalSpec {
            alpha,
            k,
            theta: None,
            background: None,
            study_mode: false,
        };
        let d = assemble_diagonal(&spec, &grid)?;
        let r = likelihood_ratio(&d.field, 0)?;
        max.push(r.values().iter().fold(0.0f64, |m, v| m.max(*v)));
    }
    Ok(RatioGrowthTable::new("k", ks.iter().map(|&k| k as f64).collect(), max))
}

/// Largest likelihood ratio of the correlated Gaussian on `[-r, r]^2` as the
/// truncation radius grows, at fixed node spacing.
pub fn gaussian_truncation_growth(rho: f64, radii: &[f64], nodes_per_unit: usize) -> Result<RatioGrowthTable> {
    let mut max = Vec::with_capacity(radii.len());
    for &r in radii {
        let n = ((2.0 * r) * nodes_per_unit as f64).round().max(2.0) as usize;
        let axis = Axis::new(-r, r, n, Scheme::Midpoint)?.with_truncation(true);
        let grid = Arc::new(GridSpec::new(vec![axis.clone(), axis])?);
        let d = assemble_gaussian(rho, &grid)?;
        let lr = likelihood_ratio(&d.field, 0)?;
        max.push(lr.values().iter().fold(0.0f64, |m, v| m.max(*v)));
    }
    Ok(RatioGrowthTable::new("radius", radii.to_vec(), max))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "class", rename_all = "snake_case")]
pub enum SmirnovClass {
    SufficientProductForm,
    SufficientBoundedRatio,
    Unknown,
    ViolationWitness { detail: String },
}

/// Sufficient-condition classifier. Product-mixture provenance wins; an
/// attached explicit witness yields `ViolationWitness`; a stable bounded ratio
/// yields `SufficientBoundedRatio`; everything else is `Unknown`. Grid data
/// alone never produce a violation.
pub fn classify_smirnov(
    density: &Density,
    report: Option<&WeightConditionReport>,
    witness: Option<&ViolationWitness>,
) -> SmirnovClass {
    if matches!(density.provenance, Provenance::ProductMixture { .. }) {
        return SmirnovClass::SufficientProductForm;
    }
    if let Some(w) = witness {
        return SmirnovClass::ViolationWitness { detail: w.summary() };
    }
    match report {
        Some(r) if r.bounded_ratio => SmirnovClass::SufficientBoundedRatio,
        _ => SmirnovClass::Unknown,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn square(n: usize) -> Arc<GridSpec> {
        Arc::new(GridSpec::uniform(2, 0.0, 1.0, n).unwrap())
    }

    fn tent() -> Factor {
        // 2 - 4|x - 1/2| integrates to 1 on [0, 1]
        Factor::Expr(Expr::Add {
            terms: vec![
                Expr::constant(2.0),
                Expr::Mul {
                    factors: vec![
                        Expr::constant(-4.0),
                        Expr::Abs {
                            arg: Box::new(Expr::Add {
                                terms: vec![Expr::var(0), Expr::constant(-0.5)],
                            }),
                        },
                    ],
                },
            ],
        })
    }

    fn diag(alpha: f64, k: usize, study_mode: bool) -> DiagonalSpec {
        DiagonalSpec {
            alpha,
            k,
            theta: Some(vec![1.0; k]),
            background: None,
            study_mode,
        }
    }

    #[test]
    fn uniform_product_is_one() {
        let d = assemble_product_mixture(&ProductMixtureSpec::uniform(2), &square(8)).unwrap();
        assert!(d.field.values().iter().all(|v| (v - 1.0).abs() < 1e-14));
        assert_eq!(d.provenance, Provenance::ProductMixture { components: 1 });
    }

    #[test]
    fn two_component_mixture_averages() {
        let g = square(8);
        let spec = ProductMixtureSpec {
            components: vec![
                MixtureComponent {
                    weight: 0.5,
                    factors: vec![Factor::Expr(Expr::constant(1.0)); 2],
                },
                MixtureComponent {
                    weight: 0.5,
                    factors: vec![tent(), tent()],
                },
            ],
        };
        let d = assemble_product_mixture(&spec, &g).unwrap();
        let tent_tab: Vec<f64> = g.axis(0).nodes().iter().map(|x| 2.0 - 4.0 * (x - 0.5).abs()).collect();
        // the midpoint rule integrates the tent exactly on an even grid
        assert_relative_eq!(g.axis(0).quadrature(&tent_tab), 1.0, max_relative = 1e-14);
        for (flat, v) in d.field.values().iter().enumerate() {
            let expect = 0.5 + 0.5 * tent_tab[flat / 8] * tent_tab[flat % 8];
            assert_relative_eq!(*v, expect, max_relative = 1e-12);
        }
    }

    #[test]
    fn piecewise_constant_density_is_an_indicator_mixture() {
        use rand::{Rng, SeedableRng};
        let n = 5;
        let g = square(n);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let raw: Vec<f64> = (0..n * n).map(|_| rng.gen_range(0.2..3.0)).collect();
        let tab = Density::tabulated(ScalarField::new(g.clone(), raw).unwrap()).unwrap();
        let h = 1.0 / n as f64;
        let components = (0..n * n)
            .map(|c| {
                let (i, j) = (c / n, c % n);
                let ind = |k: usize| {
                    let mut t = vec![0.0; n];
                    t[k] = 1.0;
                    Factor::Table(t)
                };
                MixtureComponent {
                    weight: tab.field.values()[c] * h * h,
                    factors: vec![ind(i), ind(j)],
                }
            })
            .collect();
        let mut spec = ProductMixtureSpec { components };
        let s: f64 = spec.components.iter().map(|c| c.weight).sum();
        spec.components.iter_mut().for_each(|c| c.weight /= s);
        let mix = assemble_product_mixture(&spec, &g).unwrap();
        for (a, b) in mix.field.values().iter().zip(tab.field.values()) {
            assert_relative_eq!(*a, *b, max_relative = 1e-12);
        }
    }

    #[test]
    fn mixture_rejects_bad_weights_and_zeros() {
        let g = square(4);
        let mut spec = ProductMixtureSpec::uniform(2);
        spec.components[0].weight = 0.9;
        assert!(matches!(assemble_product_mixture(&spec, &g), Err(Error::Config { .. })));
        let zero_row = ProductMixtureSpec {
            components: vec![MixtureComponent {
                weight: 1.0,
                factors: vec![Factor::Table(vec![1.0, 0.0, 1.0, 1.0]), Factor::Table(vec![1.0; 4])],
            }],
        };
        assert!(matches!(assemble_product_mixture(&zero_row, &g), Err(Error::Positivity(_))));
    }

    #[test]
    fn assembled_densities_have_unit_mass() {
        let g = Arc::new(block_grid(3, 4).unwrap());
        let one = ScalarField::constant(g.clone(), 1.0);
        let d = assemble_diagonal(&diag(0.3, 3, false), &g).unwrap();
        assert!((grid::integrate(&one, &d.field).unwrap() - 1.0).abs() < 1e-12);
        let axis = Axis::new(-3.0, 3.0, 24, Scheme::Midpoint).unwrap().with_truncation(true);
        let gg = Arc::new(GridSpec::new(vec![axis.clone(), axis]).unwrap());
        let gauss = assemble_gaussian(0.6, &gg).unwrap();
        assert!(gauss.truncated);
        let one = ScalarField::constant(gg, 1.0);
        assert!((grid::integrate(&one, &gauss.field).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn diagonal_alpha_one_is_background() {
        let g = Arc::new(block_grid(2, 2).unwrap());
        let bg = DensitySpec::ProductMixture(ProductMixtureSpec {
            components: vec![MixtureComponent {
                weight: 1.0,
                factors: vec![Factor::Expr(Expr::var(0)), Factor::Expr(Expr::constant(1.0))],
            }],
        });
        let expect = bg.assemble(&g).unwrap();
        let mut spec = diag(1.0, 2, false);
        spec.background = Some(Box::new(bg));
        let d = assemble_diagonal(&spec, &g).unwrap();
        for (a, b) in d.field.values().iter().zip(expect.field.values()) {
            assert_relative_eq!(*a, *b, max_relative = 1e-14);
        }
    }

    #[test]
    fn diagonal_alpha_zero_blocks() {
        let g = Arc::new(block_grid(2, 2).unwrap());
        assert!(matches!(assemble_diagonal(&diag(0.0, 2, false), &g), Err(Error::Positivity(_))));
        let d = assemble_diagonal(&diag(0.0, 2, true), &g).unwrap();
        for (flat, v) in d.field.values().iter().enumerate() {
            let (x, y) = (flat / 4, flat % 4);
            let expect = if x / 2 == y / 2 { 0.5 } else { 0.0 };
            assert_eq!(*v, expect);
        }
    }

    #[test]
    fn diagonal_half_background() {
        let g = Arc::new(block_grid(2, 3).unwrap());
        let d = assemble_diagonal(&diag(0.5, 2, false), &g).unwrap();
        let one = ScalarField::constant(g.clone(), 1.0);
        assert!((grid::integrate(&one, &d.field).unwrap() - 1.0).abs() < 1e-14);
        for (flat, v) in d.field.values().iter().enumerate() {
            let (x, y) = (flat / 6, flat % 6);
            let expect = if x / 3 == y / 3 { 0.125 + 0.25 } else { 0.125 };
            assert_relative_eq!(*v, expect, max_relative = 1e-14);
        }
        // off-diagonal node by hand: w_1 = w_2 = 0.375 + 0.125 = 0.5 on each
        // block, so the ratio is 0.25 / 0.125 = 2; on the diagonal 0.25 / 0.375
        let r = likelihood_ratio(&d.field, 0).unwrap();
        assert_relative_eq!(r.values()[5], 2.0, max_relative = 1e-12);
        assert_relative_eq!(r.values()[0], 2.0 / 3.0, max_relative = 1e-12);
    }

    #[test]
    fn misaligned_grid_is_rejected() {
        let g = Arc::new(GridSpec::uniform(2, 1.0, 3.5, 5).unwrap());
        assert!(matches!(assemble_diagonal(&diag(0.5, 2, false), &g), Err(Error::Alignment(_))));
        let g = Arc::new(GridSpec::uniform(2, 1.0, 3.0, 5).unwrap());
        assert!(matches!(assemble_diagonal(&diag(0.5, 2, false), &g), Err(Error::Alignment(_))));
    }

    #[test]
    fn product_ratios_are_one() {
        let g = Arc::new(GridSpec::uniform(3, 0.0, 1.0, 5).unwrap());
        let spec = ProductMixtureSpec {
            components: vec![MixtureComponent {
                weight: 1.0,
                factors: vec![
                    tent(),
                    Factor::Expr(Expr::Exp { arg: Box::new(Expr::var(0)) }),
                    Factor::Table(vec![1.0, 2.0, 3.0, 2.0, 1.0]),
                ],
            }],
        };
        let d = assemble_product_mixture(&spec, &g).unwrap();
        for i in 0..3 {
            let r = likelihood_ratio(&d.field, i).unwrap();
            assert!(r.values().iter().all(|v| (v - 1.0).abs() < 1e-12));
        }
    }

    #[test]
    fn ratio_requires_positive_density() {
        let g = Arc::new(block_grid(2, 1).unwrap());
        let d = assemble_diagonal(&diag(0.0, 2, true), &g).unwrap();
        assert!(matches!(likelihood_ratio(&d.field, 0), Err(Error::Domain(_))));
        let (r, support) = likelihood_ratio_on_support(&d.field, 0).unwrap();
        assert_eq!(support, vec![true, false, false, true]);
        // on the support w = 0.5 and w_1 = w_2 = 0.5
        assert_relative_eq!(r.values()[0], 0.5, max_relative = 1e-14);
        assert_eq!(r.values()[1], 0.0);
    }

    #[test]
    fn weight_report_for_product_density() {
        let g = square(6);
        let spec = DensitySpec::uniform(2);
        let rep = check_weight_conditions(&spec, &g, 2.0, DEFAULT_RATIO_THRESHOLD).unwrap();
        assert!(rep.product_mixture_form && rep.bounded_ratio && rep.condition_lp_ok);
        for a in &rep.axes {
            assert_relative_eq!(a.max_ratio, 1.0, max_relative = 1e-12);
            assert_relative_eq!(a.lp_norm, 1.0, max_relative = 1e-12);
        }
        let d = spec.assemble(&g).unwrap();
        assert_eq!(classify_smirnov(&d, Some(&rep), None), SmirnovClass::SufficientProductForm);
    }

    #[test]
    fn diagonal_ratio_grows_with_block_count() {
        let table = diagonal_ratio_growth(0.5, &[4, 8, 16, 32], 1).unwrap();
        assert!(table.unbounded_trend, "{table:?}");
        assert!(table.step_factors.iter().all(|f| *f > 2.0));
        // a fixed truncation is bounded and refinement-stable
        let g = Arc::new(block_grid(8, 1).unwrap());
        let spec = DensitySpec::Diagonal(DiagonalSpec {
            alpha: 0.5,
            k: 8,
            theta: None,
            background: None,
            study_mode: false,
        });
        let rep = check_weight_conditions(&spec, &g, 2.0, DEFAULT_RATIO_THRESHOLD)
            .unwrap()
            .with_growth(table);
        assert!(rep.bounded_ratio);
        assert!(rep.violation_witness);
        // the classifier does not claim a violation without an explicit witness
        let d = spec.assemble(&g).unwrap();
        assert_eq!(classify_smirnov(&d, Some(&rep), None), SmirnovClass::SufficientBoundedRatio);
    }

    #[test]
    fn truncated_gaussian_is_unknown() {
        let table = gaussian_truncation_growth(0.5, &[2.0, 3.0, 4.0, 5.0], 4).unwrap();
        assert!(table.unbounded_trend, "{table:?}");
        let axis = Axis::new(-3.0, 3.0, 24, Scheme::Midpoint).unwrap().with_truncation(true);
        let g = Arc::new(GridSpec::new(vec![axis.clone(), axis]).unwrap());
        let spec = DensitySpec::CorrelatedGaussian { rho: 0.5 };
        let rep = check_weight_conditions(&spec, &g, 2.0, DEFAULT_RATIO_THRESHOLD).unwrap();
        assert!(rep.truncated);
        assert!(rep.axes.iter().all(|a| a.max_ratio < DEFAULT_RATIO_THRESHOLD));
        assert!(!rep.bounded_ratio, "{rep:?}");
        let d = spec.assemble(&g).unwrap();
        assert_eq!(classify_smirnov(&d, Some(&rep), None), SmirnovClass::Unknown);
    }

    #[test]
    fn tabulated_spec_reads_and_prolongs() {
        let dir = tempfile::tempdir().unwrap();
        let coarse = square(3);
        let f = ScalarField::from_fn(coarse, |x| 1.0 + x[0] + 2.0 * x[1]).unwrap();
        let path = dir.path().join("w.json");
        crate::format::write_field(&f, &path, crate::format::Encoding::Csv).unwrap();
        let spec = DensitySpec::Tabulated { path };
        let fine = square(6);
        let d = spec.assemble(&fine).unwrap();
        assert_eq!(d.provenance, Provenance::Tabulated);
        assert_eq!(d.field.values()[0], d.field.values()[1]);
        let rep = check_weight_conditions(&spec, &square(3), 2.0, DEFAULT_RATIO_THRESHOLD).unwrap();
        assert!(rep.bounded_ratio);
        assert!(!rep.product_mixture_form);
    }
}
