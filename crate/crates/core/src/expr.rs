//! A small closed vocabulary of closed-form functions used in configs:
//! polynomials, `exp`, `abs` and indicator products. Anything else is supplied
//! as a tabulated field.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Expr {
    Const { value: f64 },
    /// The coordinate along `axis`.
    Var { axis: usize },
    Add { terms: Vec<Expr> },
    Mul { factors: Vec<Expr> },
    /// Non-negative integer power.
    Pow { base: Box<Expr>, exponent: u32 },
    Exp { arg: Box<Expr> },
    Abs { arg: Box<Expr> },
    /// `prod_j 1[lower_j <= x_axis_j < upper_j]`.
    Indicator { boxes: Vec<IndicatorSide> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndicatorSide {
    pub axis: usize,
    pub lower: f64,
    pub upper: f64,
}

impl Expr {
    pub fn constant(value: f64) -> Self {
        Expr::Const { value }
    }

    pub fn var(axis: usize) -> Self {
        Expr::Var { axis }
    }

    /// `sum_i x_i` over the first `dims` axes.
    pub fn coordinate_sum(dims: usize) -> Self {
        Expr::Add {
            terms: (0..dims).map(Expr::var).collect(),
        }
    }

    /// Largest axis index referenced, if any.
    pub fn max_axis(&self) -> Option<usize> {
        match self {
            Expr::Const { .. } => None,
            Expr::Var { axis } => Some(*axis),
            Expr::Add { terms } => terms.iter().filter_map(Expr::max_axis).max(),
            Expr::Mul { factors } => factors.iter().filter_map(Expr::max_axis).max(),
            Expr::Pow { base, .. } => base.max_axis(),
            Expr::Exp { arg } | Expr::Abs { arg } => arg.max_axis(),
            Expr::Indicator { boxes } => boxes.iter().map(|b| b.axis).max(),
        }
    }

    /// Rejects references to axes beyond `dims`.
    pub fn check_dims(&self, dims: usize, key: &str) -> Result<()> {
        match self.max_axis() {
            Some(a) if a >= dims => Err(Error::config(
                key,
                format!("expression uses axis {a} but only {dims} are available"),
            )),
            _ => Ok(()),
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Expr::Const { value } => *value,
            Expr::Var { axis } => x[*axis],
            Expr::Add { terms } => terms.iter().map(|t| t.eval(x)).sum(),
            Expr::Mul { factors } => factors.iter().map(|t| t.eval(x)).product(),
            Expr::Pow { base, exponent } => base.eval(x).powi(*exponent as i32),
            Expr::Exp { arg } => arg.eval(x).exp(),
            Expr::Abs { arg } => arg.eval(x).abs(),
            Expr::Indicator { boxes } => {
                let inside = boxes
                    .iter()
                    .all(|b| x[b.axis] >= b.lower && x[b.axis] < b.upper);
                if inside {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}
