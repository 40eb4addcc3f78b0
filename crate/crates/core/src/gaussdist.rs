//! Diagonal Gaussian posteriors, reparametrized sampling, log-densities and
//! KL divergences to a standard-normal or mixture-of-Gaussians prior.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Var};
use crate::batchstats::EmbeddingBatch;
use crate::error::{Error, Result};

/// Default floor added to every predicted standard deviation.
pub const SIGMA_MIN: f64 = 1e-4;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// Inverse softplus, used to initialise raw sigma parameters.
pub fn softplus_inv(y: f64) -> f64 {
    // ln(exp(y) - 1), written to stay accurate for large y
    y + (-(-y).exp_m1()).ln()
}

/// Per-sample diagonal Gaussians `N(mu, diag(sigma²))`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussianBatch {
    mu: Array2<f64>,
    sigma: Array2<f64>,
}

impl DiagGaussianBatch {
    pub fn new(mu: Array2<f64>, sigma: Array2<f64>) -> Result<Self> {
        if mu.dim() != sigma.dim() {
            return Err(Error::Shape(format!(
                "mu {:?} and sigma {:?} differ",
                mu.dim(),
                sigma.dim()
            )));
        }
        if mu.iter().any(|v| !v.is_finite()) || sigma.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("posterior has non-finite entries".into()));
        }
        if sigma.iter().any(|&s| s <= 0.0) {
            return Err(Error::InvalidArgument("sigma must be strictly positive".into()));
        }
        Ok(Self { mu, sigma })
    }

    pub fn mu(&self) -> &Array2<f64> {
        &self.mu
    }

    pub fn sigma(&self) -> &Array2<f64> {
        &self.sigma
    }

    pub fn dim(&self) -> (usize, usize) {
        self.mu.dim()
    }

    /// Standard-normal noise with this batch's shape.
    pub fn draw_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> Array2<f64> {
        standard_normal(self.dim(), rng)
    }
}

pub fn standard_normal<R: Rng + ?Sized>(shape: (usize, usize), rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || StandardNormal.sample(rng))
}

/// Uniform-weight mixture of diagonal Gaussians.
#[derive(Clone, Debug, PartialEq)]
pub struct MoGPrior {
    pub means: Array2<f64>,
    pub sigmas: Array2<f64>,
}

impl MoGPrior {
    pub fn new(means: Array2<f64>, sigmas: Array2<f64>) -> Result<Self> {
        if means.dim() != sigmas.dim() || means.nrows() == 0 {
            return Err(Error::Shape(format!(
                "mixture means {:?} and sigmas {:?}",
                means.dim(),
                sigmas.dim()
            )));
        }
        if sigmas.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
            return Err(Error::InvalidArgument("mixture sigmas must be positive".into()));
        }
        Ok(Self { means, sigmas })
    }

    pub fn components(&self) -> usize {
        self.means.nrows()
    }

    pub fn dims(&self) -> usize {
        self.means.ncols()
    }

    /// Every component equal to `N(0, I)`.
    pub fn standard(components: usize, dims: usize) -> Self {
        Self {
            means: Array2::zeros((components, dims)),
            sigmas: Array2::ones((components, dims)),
        }
    }
}

/// The prior that posteriors are pulled towards.
#[derive(Clone, Debug, PartialEq)]
pub enum Prior {
    StandardNormal,
    Mog(MoGPrior),
}

/// Tape handles of a diagonal Gaussian batch.
#[derive(Clone, Copy, Debug)]
pub struct DistVars {
    pub mu: Var,
    pub sigma: Var,
}

impl DistVars {
    pub fn constant(t: &mut Tape, q: &DiagGaussianBatch) -> Self {
        Self {
            mu: t.constant(q.mu.clone()),
            sigma: t.constant(q.sigma.clone()),
        }
    }

    pub fn value(&self, t: &Tape) -> DiagGaussianBatch {
        DiagGaussianBatch {
            mu: t.value(self.mu).clone(),
            sigma: t.value(self.sigma).clone(),
        }
    }
}

/// Tape form of [`Prior`]; mixture parameters are tape values so their
/// gradients can be collected.
#[derive(Clone, Copy, Debug)]
pub enum PriorVars {
    StandardNormal,
    Mog { means: Var, sigmas: Var },
}

impl PriorVars {
    pub fn constant(t: &mut Tape, prior: &Prior) -> Self {
        match prior {
            Prior::StandardNormal => PriorVars::StandardNormal,
            Prior::Mog(m) => PriorVars::Mog {
                means: t.constant(m.means.clone()),
                sigmas: t.constant(m.sigmas.clone()),
            },
        }
    }
}

/// `mu + sigma ⊙ noise`.
pub fn sample_reparam_var(t: &mut Tape, q: DistVars, noise: &Array2<f64>) -> Var {
    let e = t.constant(noise.clone());
    let s = t.mul(q.sigma, e);
    t.add(q.mu, s)
}

/// Per-row sum of univariate Gaussian log-densities (`n×1`). `mu` and
/// `sigma` may be `1×d` rows broadcast against `x`.
pub fn log_prob_diag_var(t: &mut Tape, mu: Var, sigma: Var, x: Var) -> Var {
    let diff = t.sub(x, mu);
    let z = t.div(diff, sigma);
    let z2 = t.square(z);
    let half = t.scale(z2, -0.5);
    let ls = t.ln(sigma);
    let per = t.sub(half, ls);
    let per = t.offset(per, -HALF_LN_2PI);
    t.sum_cols(per)
}

fn standard_log_prob_var(t: &mut Tape, x: Var) -> Var {
    let x2 = t.square(x);
    let per = t.scale(x2, -0.5);
    let per = t.offset(per, -HALF_LN_2PI);
    t.sum_cols(per)
}

/// Closed-form `KL(q ‖ N(0, I))` per row (`n×1`).
pub fn kl_standard_normal_var(t: &mut Tape, q: DistVars) -> Var {
    let m2 = t.square(q.mu);
    let s2 = t.square(q.sigma);
    let ls = t.ln(q.sigma);
    let ls2 = t.scale(ls, 2.0);
    let a = t.add(m2, s2);
    let b = t.sub(a, ls2);
    let b = t.offset(b, -1.0);
    let s = t.sum_cols(b);
    t.scale(s, 0.5)
}

/// `log((1/M) Σ_m N(x; μ_m, σ_m²))` per row, with a max shift.
pub fn mog_log_prob_var(t: &mut Tape, means: Var, sigmas: Var, x: Var) -> Var {
    let m = t.shape(means).0;
    let comps: Vec<Var> = (0..m)
        .map(|c| {
            let mu = t.row(means, c);
            let sd = t.row(sigmas, c);
            log_prob_diag_var(t, mu, sd, x)
        })
        .collect();
    let all = t.concat_cols(&comps);
    let lse = t.logsumexp_cols(all);
    t.offset(lse, -(m as f64).ln())
}

pub fn prior_log_prob_var(t: &mut Tape, prior: PriorVars, x: Var) -> Var {
    match prior {
        PriorVars::StandardNormal => standard_log_prob_var(t, x),
        PriorVars::Mog { means, sigmas } => mog_log_prob_var(t, means, sigmas, x),
    }
}

/// Monte Carlo `KL(q ‖ prior)` per row from reparametrized `samples` of `q`.
pub fn kl_mc_var(t: &mut Tape, q: DistVars, samples: &[Var], prior: PriorVars) -> Result<Var> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument(
            "Monte Carlo KL needs at least one sample".into(),
        ));
    }
    let mut acc: Option<Var> = None;
    for &z in samples {
        let lq = log_prob_diag_var(t, q.mu, q.sigma, z);
        let lp = prior_log_prob_var(t, prior, z);
        let d = t.sub(lq, lp);
        acc = Some(match acc {
            Some(a) => t.add(a, d),
            None => d,
        });
    }
    Ok(t.scale(acc.expect("non-empty"), 1.0 / samples.len() as f64))
}

fn check_noise(q: &DiagGaussianBatch, noise: &Array2<f64>) -> Result<()> {
    if noise.dim() != q.dim() {
        return Err(Error::Shape(format!(
            "noise {:?} does not match posterior {:?}",
            noise.dim(),
            q.dim()
        )));
    }
    Ok(())
}

pub fn sample_reparam(q: &DiagGaussianBatch, noise: &Array2<f64>) -> Result<EmbeddingBatch> {
    check_noise(q, noise)?;
    EmbeddingBatch::new(&q.mu + &(&q.sigma * noise))
}

pub fn log_prob_diag(q: &DiagGaussianBatch, x: &EmbeddingBatch) -> Result<Vec<f64>> {
    if x.as_array().dim() != q.dim() {
        return Err(Error::Shape(format!(
            "points {:?} do not match posterior {:?}",
            x.as_array().dim(),
            q.dim()
        )));
    }
    let mut t = Tape::new();
    let qv = DistVars::constant(&mut t, q);
    let xv = t.constant(x.as_array().clone());
    let lp = log_prob_diag_var(&mut t, qv.mu, qv.sigma, xv);
    Ok(t.value(lp).column(0).to_vec())
}

pub fn kl_standard_normal(q: &DiagGaussianBatch) -> Vec<f64> {
    let mut t = Tape::new();
    let qv = DistVars::constant(&mut t, q);
    let kl = kl_standard_normal_var(&mut t, qv);
    t.value(kl).column(0).to_vec()
}

pub fn mog_log_prob(prior: &MoGPrior, x: &EmbeddingBatch) -> Result<Vec<f64>> {
    if x.dims() != prior.dims() {
        return Err(Error::Shape(format!(
            "points have {} dims, prior has {}",
            x.dims(),
            prior.dims()
        )));
    }
    let mut t = Tape::new();
    let means = t.constant(prior.means.clone());
    let sigmas = t.constant(prior.sigmas.clone());
    let xv = t.constant(x.as_array().clone());
    let lp = mog_log_prob_var(&mut t, means, sigmas, xv);
    Ok(t.value(lp).column(0).to_vec())
}

/// Monte Carlo KL estimate from `noise.len()` reparametrized draws.
pub fn kl_to_prior_mc(q: &DiagGaussianBatch, prior: &Prior, noise: &[Array2<f64>]) -> Result<Vec<f64>> {
    if noise.is_empty() {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    if let Prior::Mog(m) = prior {
        if m.dims() != q.dim().1 {
            return Err(Error::Shape("prior and posterior dims differ".into()));
        }
    }
    let mut t = Tape::new();
    let qv = DistVars::constant(&mut t, q);
    let pv = PriorVars::constant(&mut t, prior);
    let mut samples = Vec::with_capacity(noise.len());
    for e in noise {
        check_noise(q, e)?;
        samples.push(sample_reparam_var(&mut t, qv, e));
    }
    let kl = kl_mc_var(&mut t, qv, &samples, pv)?;
    Ok(t.value(kl).column(0).to_vec())
}

/// Univariate normal density, used by the hand oracles below.
pub fn normal_pdf(x: f64, mu: f64, sigma: f64) -> f64 {
    (-(x - mu).powi(2) / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * PI).sqrt())
}
