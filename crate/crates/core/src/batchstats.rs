//! Batch statistics shared by both objectives: centering, per-dimension
//! standard deviation, covariance and cross-correlation.
//!
//! Each statistic has a tape form (`*_var`) used inside the losses, and a
//! value form over [`EmbeddingBatch`] that evaluates the same graph on a
//! scratch tape.

use ndarray::Array2;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// Default epsilon under the square root of the VICReg standard deviation.
pub const STD_EPS: f64 = 1e-4;
/// Default epsilon under the square roots of correlation denominators.
pub const CORR_EPS: f64 = 1e-12;

/// An `n×d` batch of embeddings or representations with finite entries.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBatch(Array2<f64>);

impl EmbeddingBatch {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::Shape(format!(
                "embedding batch must be non-empty, got {:?}",
                data.dim()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument(
                "embedding batch has non-finite entries".into(),
            ));
        }
        Ok(Self(data))
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn dims(&self) -> usize {
        self.0.ncols()
    }
}

/// Variance denominator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Denominator {
    N,
    NMinusOne,
}

impl Denominator {
    fn divisor(self, n: usize) -> Result<f64> {
        match self {
            Denominator::N => Ok(n as f64),
            Denominator::NMinusOne if n < 2 => Err(Error::Degenerate(
                "sample variance needs at least two rows".into(),
            )),
            Denominator::NMinusOne => Ok((n - 1) as f64),
        }
    }
}

fn require_rows(n: usize, what: &str) -> Result<()> {
    if n < 2 {
        return Err(Error::Degenerate(format!("{what} needs at least two rows")));
    }
    Ok(())
}

pub fn center_var(t: &mut Tape, x: Var) -> Var {
    let m = t.mean_rows(x);
    t.sub(x, m)
}

/// `1×d` row of `sqrt(var_j + eps)`.
pub fn column_std_var(t: &mut Tape, x: Var, eps: f64, denom: Denominator) -> Result<Var> {
    let n = t.shape(x).0;
    let div = denom.divisor(n)?;
    let xc = center_var(t, x);
    let sq = t.square(xc);
    let m = t.mean_rows(sq);
    let var = t.scale(m, n as f64 / div);
    let var = t.offset(var, eps);
    Ok(t.sqrt(var))
}

/// `(1/(n-1)) · X̄ᵀ X̄`.
pub fn covariance_var(t: &mut Tape, x: Var) -> Result<Var> {
    let n = t.shape(x).0;
    require_rows(n, "covariance")?;
    let xc = center_var(t, x);
    let xt = t.transpose(xc);
    let c = t.matmul(xt, xc);
    Ok(t.scale(c, 1.0 / (n - 1) as f64))
}

/// Pearson cross-correlation between the columns of two views. Each side
/// is normalised by its own per-column standard deviation.
pub fn cross_correlation_var(t: &mut Tape, za: Var, zb: Var, eps: f64) -> Result<Var> {
    let (n, d) = t.shape(za);
    if t.shape(zb) != (n, d) {
        return Err(Error::Shape(format!(
            "cross-correlation views differ: {:?} vs {:?}",
            t.shape(za),
            t.shape(zb)
        )));
    }
    require_rows(n, "cross-correlation")?;
    let scale = 1.0 / (n - 1) as f64;
    let ac = center_var(t, za);
    let bc = center_var(t, zb);
    let at = t.transpose(ac);
    let cross = t.matmul(at, bc);
    let cov = t.scale(cross, scale);
    let sa = column_std_var(t, za, eps, Denominator::NMinusOne)?;
    let sb = column_std_var(t, zb, eps, Denominator::NMinusOne)?;
    let sa_col = t.transpose(sa);
    let r = t.div(cov, sa_col);
    Ok(t.div(r, sb))
}

fn eval(x: &EmbeddingBatch, f: impl FnOnce(&mut Tape, Var) -> Result<Var>) -> Result<Array2<f64>> {
    let mut t = Tape::new();
    let v = t.constant(x.as_array().clone());
    let out = f(&mut t, v)?;
    Ok(t.value(out).clone())
}

pub fn center(x: &EmbeddingBatch) -> EmbeddingBatch {
    let c = eval(x, |t, v| Ok(center_var(t, v))).expect("centering is total");
    EmbeddingBatch(c)
}

pub fn column_std(x: &EmbeddingBatch, eps: f64, denom: Denominator) -> Result<Vec<f64>> {
    if eps < 0.0 {
        return Err(Error::InvalidArgument("eps must be non-negative".into()));
    }
    let s = eval(x, |t, v| column_std_var(t, v, eps, denom))?;
    Ok(s.row(0).to_vec())
}

pub fn covariance_matrix(x: &EmbeddingBatch) -> Result<Array2<f64>> {
    eval(x, covariance_var)
}

fn degenerate_columns(x: &Array2<f64>) -> Option<usize> {
    let n = x.nrows() as f64;
    x.columns().into_iter().position(|col| {
        let mean = col.sum() / n;
        let scale = col.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        var.sqrt() <= 1e-12 * (1.0 + scale)
    })
}

/// Cross-correlation matrix `R` of two same-shaped batches.
///
/// With `eps == 0` a zero-variance column leaves the correlation undefined
/// and is rejected.
pub fn cross_correlation(za: &EmbeddingBatch, zb: &EmbeddingBatch, eps: f64) -> Result<Array2<f64>> {
    if eps < 0.0 {
        return Err(Error::InvalidArgument("eps must be non-negative".into()));
    }
    if eps == 0.0 {
        for (name, z) in [("first", za), ("second", zb)] {
            if let Some(j) = degenerate_columns(z.as_array()) {
                return Err(Error::Degenerate(format!(
                    "column {j} of the {name} view has zero variance"
                )));
            }
        }
    }
    let mut t = Tape::new();
    let a = t.constant(za.as_array().clone());
    let b = t.constant(zb.as_array().clone());
    let r = cross_correlation_var(&mut t, a, b, eps)?;
    Ok(t.value(r).clone())
}
