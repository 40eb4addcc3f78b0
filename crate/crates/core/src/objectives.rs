//! Barlow Twins and VICReg loss terms, the KL bottleneck and the Monte Carlo
//! objective used by the probabilistic variants.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::batchstats::{
    column_std_var, covariance_var, cross_correlation, cross_correlation_var, Denominator,
    EmbeddingBatch, CORR_EPS,
};
use crate::error::{Error, Result};
use crate::gaussdist::{
    kl_mc_var, kl_standard_normal_var, sample_reparam_var, DiagGaussianBatch, DistVars, Prior,
    PriorVars,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Barlow,
    Vicreg,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Barlow => "barlow",
            Method::Vicreg => "vicreg",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossCoefficients {
    pub lambda_bt: f64,
    pub alpha: f64,
    pub tau: f64,
    pub nu: f64,
    pub gamma: f64,
    pub beta: f64,
    /// Added to the variance under the square root in the VICReg hinge.
    pub eps: f64,
}

impl Default for LossCoefficients {
    fn default() -> Self {
        Self {
            lambda_bt: 0.005,
            alpha: 25.0,
            tau: 25.0,
            nu: 1.0,
            gamma: 1.0,
            beta: 0.0,
            eps: 1e-4,
        }
    }
}

impl LossCoefficients {
    /// Every violated constraint as `(field, message)`.
    pub fn issues(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        for (name, v) in [
            ("lambda_bt", self.lambda_bt),
            ("alpha", self.alpha),
            ("tau", self.tau),
            ("nu", self.nu),
            ("beta", self.beta),
            ("eps", self.eps),
        ] {
            if !v.is_finite() || v < 0.0 {
                out.push((name, format!("must be finite and >= 0, got {v}")));
            }
        }
        if !self.gamma.is_finite() || self.gamma <= 0.0 {
            out.push(("gamma", format!("must be > 0, got {}", self.gamma)));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        match self.issues().first() {
            None => Ok(()),
            Some((k, m)) => Err(Error::InvalidArgument(format!("{k}: {m}"))),
        }
    }
}

/// Scalar loss values for one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub inv: f64,
    pub reg: f64,
    pub reg_var: Option<f64>,
    pub reg_cov: Option<f64>,
    pub div: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Name of the first non-finite term, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        let terms = [
            ("inv", Some(self.inv)),
            ("reg", Some(self.reg)),
            ("reg_var", self.reg_var),
            ("reg_cov", self.reg_cov),
            ("div", Some(self.div)),
            ("total", Some(self.total)),
        ];
        terms
            .into_iter()
            .find(|(_, v)| v.is_some_and(|v| !v.is_finite()))
            .map(|(n, _)| n)
    }
}

/// Tape handles of a [`LossBreakdown`].
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub inv: Var,
    pub reg: Var,
    pub reg_var: Option<Var>,
    pub reg_cov: Option<Var>,
    pub div: Var,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown(&self, t: &Tape) -> LossBreakdown {
        LossBreakdown {
            inv: t.scalar_value(self.inv),
            reg: t.scalar_value(self.reg),
            reg_var: self.reg_var.map(|v| t.scalar_value(v)),
            reg_cov: self.reg_cov.map(|v| t.scalar_value(v)),
            div: t.scalar_value(self.div),
            total: t.scalar_value(self.total),
        }
    }
}

fn same_shape(t: &Tape, a: Var, b: Var) -> Result<()> {
    if t.shape(a) != t.shape(b) {
        return Err(Error::Shape(format!(
            "views differ: {:?} vs {:?}",
            t.shape(a),
            t.shape(b)
        )));
    }
    Ok(())
}

fn off_diagonal_square_sum(t: &mut Tape, m: Var) -> Var {
    let d = t.shape(m).0;
    let mask = Array2::from_shape_fn((d, d), |(i, j)| if i == j { 0.0 } else { 1.0 });
    let mask = t.constant(mask);
    let sq = t.square(m);
    let off = t.mul(sq, mask);
    t.sum(off)
}

/// Barlow `(inv, reg)` from the cross-correlation of the two views.
pub fn barlow_terms_var(t: &mut Tape, za: Var, zb: Var, lambda: f64, eps: f64) -> Result<(Var, Var)> {
    let r = cross_correlation_var(t, za, zb, eps)?;
    let d = t.shape(r).0;
    let eye = t.constant(Array2::eye(d));
    let diag = t.mul(r, eye);
    let one_minus = t.sub(eye, diag);
    let inv_sq = t.square(one_minus);
    let inv = t.sum(inv_sq);
    let off = off_diagonal_square_sum(t, r);
    let reg = t.scale(off, lambda);
    Ok((inv, reg))
}

pub fn vicreg_invariance_var(t: &mut Tape, za: Var, zb: Var, alpha: f64) -> Result<Var> {
    same_shape(t, za, zb)?;
    let n = t.shape(za).0;
    let diff = t.sub(za, zb);
    let sq = t.square(diff);
    let s = t.sum(sq);
    Ok(t.scale(s, alpha / n as f64))
}

pub fn vicreg_variance_var(t: &mut Tape, z: Var, gamma: f64, eps: f64) -> Result<Var> {
    let d = t.shape(z).1;
    let std = column_std_var(t, z, eps, Denominator::NMinusOne)?;
    let neg = t.scale(std, -1.0);
    let gap = t.offset(neg, gamma);
    let hinge = t.relu(gap);
    let s = t.sum(hinge);
    Ok(t.scale(s, 1.0 / d as f64))
}

pub fn vicreg_covariance_var(t: &mut Tape, z: Var) -> Result<Var> {
    let d = t.shape(z).1;
    let c = covariance_var(t, z)?;
    let off = off_diagonal_square_sum(t, c);
    Ok(t.scale(off, 1.0 / d as f64))
}

/// `(reg, reg_var, reg_cov)` where the parts already carry `tau` and `nu`.
pub fn vicreg_regularization_var(
    t: &mut Tape,
    za: Var,
    zb: Var,
    coeffs: &LossCoefficients,
) -> Result<(Var, Var, Var)> {
    same_shape(t, za, zb)?;
    let va = vicreg_variance_var(t, za, coeffs.gamma, coeffs.eps)?;
    let vb = vicreg_variance_var(t, zb, coeffs.gamma, coeffs.eps)?;
    let ca = vicreg_covariance_var(t, za)?;
    let cb = vicreg_covariance_var(t, zb)?;
    let v = t.add(va, vb);
    let c = t.add(ca, cb);
    let reg_var = t.scale(v, coeffs.tau);
    let reg_cov = t.scale(c, coeffs.nu);
    let reg = t.add(reg_var, reg_cov);
    Ok((reg, reg_var, reg_cov))
}

/// A posterior together with the reparametrized draws taken from it.
#[derive(Clone, Debug)]
pub struct PosteriorDraws {
    pub dist: DistVars,
    pub samples: Vec<Var>,
}

/// What one view contributes to the objective: the embeddings the SSL
/// terms act on, and the posterior the KL term acts on (absent for the
/// deterministic pipeline).
#[derive(Clone, Debug)]
pub struct ViewEmbedding {
    pub z_samples: Vec<Var>,
    pub posterior: Option<PosteriorDraws>,
}

impl ViewEmbedding {
    pub fn point(z: Var) -> Self {
        Self {
            z_samples: vec![z],
            posterior: None,
        }
    }
}

fn kl_mean(t: &mut Tape, q: &PosteriorDraws, prior: PriorVars) -> Result<Var> {
    let per_row = match prior {
        PriorVars::StandardNormal => kl_standard_normal_var(t, q.dist),
        PriorVars::Mog { .. } => kl_mc_var(t, q.dist, &q.samples, prior)?,
    };
    Ok(t.mean(per_row))
}

/// `(beta/2) · [mean KL(qa‖p) + mean KL(qb‖p)]`.
pub fn divergence_loss_var(
    t: &mut Tape,
    qa: &PosteriorDraws,
    qb: &PosteriorDraws,
    prior: PriorVars,
    beta: f64,
) -> Result<Var> {
    if t.shape(qa.dist.mu) != t.shape(qb.dist.mu) {
        return Err(Error::Shape("posteriors of the two views differ".into()));
    }
    if beta == 0.0 {
        return Ok(t.scalar(0.0));
    }
    let a = kl_mean(t, qa, prior)?;
    let b = kl_mean(t, qb, prior)?;
    let s = t.add(a, b);
    Ok(t.scale(s, beta / 2.0))
}

fn average(t: &mut Tape, vars: &[Var]) -> Var {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = t.add(acc, v);
    }
    if vars.len() == 1 {
        acc
    } else {
        t.scale(acc, 1.0 / vars.len() as f64)
    }
}

/// Full objective: SSL terms averaged over the K sample pairs, plus the KL
/// bottleneck on the views' posteriors.
pub fn mc_objective_var(
    t: &mut Tape,
    method: Method,
    coeffs: &LossCoefficients,
    prior: PriorVars,
    a: &ViewEmbedding,
    b: &ViewEmbedding,
) -> Result<LossVars> {
    let k = a.z_samples.len();
    if k == 0 || b.z_samples.len() != k {
        return Err(Error::InvalidArgument(format!(
            "need K >= 1 matching sample pairs, got {k} and {}",
            b.z_samples.len()
        )));
    }
    let (mut invs, mut regs, mut vars, mut covs) = (vec![], vec![], vec![], vec![]);
    for (&za, &zb) in a.z_samples.iter().zip(&b.z_samples) {
        same_shape(t, za, zb)?;
        match method {
            Method::Barlow => {
                let (inv, reg) = barlow_terms_var(t, za, zb, coeffs.lambda_bt, CORR_EPS)?;
                invs.push(inv);
                regs.push(reg);
            }
            Method::Vicreg => {
                invs.push(vicreg_invariance_var(t, za, zb, coeffs.alpha)?);
                let (reg, rv, rc) = vicreg_regularization_var(t, za, zb, coeffs)?;
                regs.push(reg);
                vars.push(rv);
                covs.push(rc);
            }
        }
    }
    let inv = average(t, &invs);
    let reg = average(t, &regs);
    let (reg_var, reg_cov) = match method {
        Method::Barlow => (None, None),
        Method::Vicreg => (Some(average(t, &vars)), Some(average(t, &covs))),
    };
    let div = match (&a.posterior, &b.posterior) {
        (Some(qa), Some(qb)) => divergence_loss_var(t, qa, qb, prior, coeffs.beta)?,
        (None, None) => t.scalar(0.0),
        _ => return Err(Error::Variant("only one view carries a posterior".into())),
    };
    let ir = t.add(inv, reg);
    let total = t.add(ir, div);
    Ok(LossVars {
        inv,
        reg,
        reg_var,
        reg_cov,
        div,
        total,
    })
}

fn with_pair<T>(
    za: &EmbeddingBatch,
    zb: &EmbeddingBatch,
    f: impl FnOnce(&mut Tape, Var, Var) -> Result<T>,
) -> Result<T> {
    let mut t = Tape::new();
    let a = t.constant(za.as_array().clone());
    let b = t.constant(zb.as_array().clone());
    f(&mut t, a, b)
}

/// Barlow `(inv, reg)`; a zero-variance column is an error.
pub fn barlow_terms(za: &EmbeddingBatch, zb: &EmbeddingBatch, coeffs: &LossCoefficients) -> Result<(f64, f64)> {
    let r = cross_correlation(za, zb, 0.0)?;
    let d = r.nrows();
    let mut inv = 0.0;
    let mut off = 0.0;
    for i in 0..d {
        for j in 0..d {
            if i == j {
                inv += (1.0 - r[[i, i]]).powi(2);
            } else {
                off += r[[i, j]].powi(2);
            }
        }
    }
    Ok((inv, coeffs.lambda_bt * off))
}

pub fn vicreg_invariance(za: &EmbeddingBatch, zb: &EmbeddingBatch, alpha: f64) -> Result<f64> {
    with_pair(za, zb, |t, a, b| {
        let v = vicreg_invariance_var(t, a, b, alpha)?;
        Ok(t.scalar_value(v))
    })
}

pub fn vicreg_variance(z: &EmbeddingBatch, gamma: f64, eps: f64) -> Result<f64> {
    with_pair(z, z, |t, a, _| {
        let v = vicreg_variance_var(t, a, gamma, eps)?;
        Ok(t.scalar_value(v))
    })
}

pub fn vicreg_covariance(z: &EmbeddingBatch) -> Result<f64> {
    with_pair(z, z, |t, a, _| {
        let v = vicreg_covariance_var(t, a)?;
        Ok(t.scalar_value(v))
    })
}

/// `(reg, reg_var, reg_cov)`.
pub fn vicreg_regularization(
    za: &EmbeddingBatch,
    zb: &EmbeddingBatch,
    coeffs: &LossCoefficients,
) -> Result<(f64, f64, f64)> {
    with_pair(za, zb, |t, a, b| {
        let (r, v, c) = vicreg_regularization_var(t, a, b, coeffs)?;
        Ok((t.scalar_value(r), t.scalar_value(v), t.scalar_value(c)))
    })
}

fn draws(t: &mut Tape, q: &DiagGaussianBatch, noise: &[Array2<f64>]) -> Result<PosteriorDraws> {
    let dist = DistVars::constant(t, q);
    let mut samples = Vec::with_capacity(noise.len());
    for e in noise {
        if e.dim() != q.dim() {
            return Err(Error::Shape(format!(
                "noise {:?} does not match posterior {:?}",
                e.dim(),
                q.dim()
            )));
        }
        samples.push(sample_reparam_var(t, dist, e));
    }
    Ok(PosteriorDraws { dist, samples })
}

/// KL bottleneck for two posteriors. The noise draws are only consumed by
/// the Monte Carlo estimator used for a mixture prior.
pub fn divergence_loss(
    qa: &DiagGaussianBatch,
    qb: &DiagGaussianBatch,
    prior: &Prior,
    beta: f64,
    noise_a: &[Array2<f64>],
    noise_b: &[Array2<f64>],
) -> Result<f64> {
    if matches!(prior, Prior::Mog(_)) && (noise_a.is_empty() || noise_b.is_empty()) {
        return Err(Error::InvalidArgument("mixture KL needs K >= 1 draws".into()));
    }
    let mut t = Tape::new();
    let pa = draws(&mut t, qa, noise_a)?;
    let pb = draws(&mut t, qb, noise_b)?;
    let pv = PriorVars::constant(&mut t, prior);
    let v = divergence_loss_var(&mut t, &pa, &pb, pv, beta)?;
    Ok(t.scalar_value(v))
}

/// One view's encoder/projector output, as seen by the objective.
#[derive(Clone, Debug)]
pub enum PosteriorOutput {
    Point(EmbeddingBatch),
    Gaussian(DiagGaussianBatch),
}

/// Evaluates the objective on already computed outputs. Gaussian outputs
/// are sampled with `noise_a[k]` / `noise_b[k]`; point outputs ignore the
/// noise.
pub fn mc_objective(
    method: Method,
    coeffs: &LossCoefficients,
    prior: &Prior,
    a: &PosteriorOutput,
    b: &PosteriorOutput,
    noise_a: &[Array2<f64>],
    noise_b: &[Array2<f64>],
) -> Result<LossBreakdown> {
    let mut t = Tape::new();
    let view = |t: &mut Tape, out: &PosteriorOutput, noise: &[Array2<f64>]| -> Result<ViewEmbedding> {
        Ok(match out {
            PosteriorOutput::Point(z) => ViewEmbedding::point(t.constant(z.as_array().clone())),
            PosteriorOutput::Gaussian(q) => {
                if noise.is_empty() {
                    return Err(Error::InvalidArgument("stochastic variants need K >= 1".into()));
                }
                let p = draws(t, q, noise)?;
                ViewEmbedding {
                    z_samples: p.samples.clone(),
                    posterior: Some(p),
                }
            }
        })
    };
    let va = view(&mut t, a, noise_a)?;
    let vb = view(&mut t, b, noise_b)?;
    let pv = PriorVars::constant(&mut t, prior);
    let l = mc_objective_var(&mut t, method, coeffs, pv, &va, &vb)?;
    Ok(l.breakdown(&t))
}
