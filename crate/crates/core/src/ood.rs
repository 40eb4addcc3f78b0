//! Out-of-distribution detectors and AUROC. Every detector is oriented so
//! that a higher score means more likely out of distribution.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::batchstats::EmbeddingBatch;
use crate::error::{Error, Result};
use crate::evalprobe::{argmax_rows, extract_representation, stochastic_sigma, LinearProbe, RepresentationMode};
use crate::gaussdist::DiagGaussianBatch;
use crate::models::{Model, StageVars, Variant};
use crate::params::{Mode, ParamStore, Session};

pub const DEFAULT_SHRINKAGE: f64 = 0.05;
pub const ODIN_TEMPERATURE: f64 = 1000.0;
pub const ODIN_EPSILON: f64 = 0.0014;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Detector {
    SigmaMean,
    SigmaStd,
    Mahalanobis,
    MaxSoftmax,
    Entropy,
    Odin,
}

impl Detector {
    pub const ALL: [Detector; 6] = [
        Detector::SigmaMean,
        Detector::SigmaStd,
        Detector::Mahalanobis,
        Detector::MaxSoftmax,
        Detector::Entropy,
        Detector::Odin,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Detector::SigmaMean => "SigmaMean",
            Detector::SigmaStd => "SigmaStd",
            Detector::Mahalanobis => "Mahalanobis",
            Detector::MaxSoftmax => "MaxSoftmax",
            Detector::Entropy => "Entropy",
            Detector::Odin => "ODIN",
        }
    }
}

/// One score per sample, higher meaning more likely OOD.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorScores {
    pub scores: Vec<f64>,
    pub warning: Option<String>,
}

impl DetectorScores {
    fn new(scores: Vec<f64>) -> Self {
        Self { scores, warning: None }
    }
}

/// Per-sample mean of sigma over dimensions.
pub fn sigma_mean_score(dist: &DiagGaussianBatch) -> DetectorScores {
    DetectorScores::new(dist.sigma().axis_iter(Axis(0)).map(|r| r.mean().unwrap_or(0.0)).collect())
}

/// Per-sample population std of sigma over dimensions. With a single
/// dimension every score is 0 and a warning is attached.
pub fn sigma_std_score(dist: &DiagGaussianBatch) -> DetectorScores {
    let scores = dist.sigma().axis_iter(Axis(0)).map(|r| r.std(0.0)).collect();
    let warning = (dist.sigma().ncols() == 1).then(|| "SigmaStd over one dimension is identically 0".to_string());
    DetectorScores { scores, warning }
}

/// Gaussian fit of training features: mean and shrunk precision.
#[derive(Clone, Debug, PartialEq)]
pub struct MahalanobisFit {
    pub mean: DVector<f64>,
    pub precision: DMatrix<f64>,
}

fn to_matrix(x: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[[i, j]])
}

/// Fits mean and covariance `(1 - rho)·S + rho·diag(S)`, inverted once.
pub fn mahalanobis_fit(train: &EmbeddingBatch, shrinkage: f64) -> Result<MahalanobisFit> {
    let (n, d) = (train.rows(), train.dims());
    if n < d + 1 {
        return Err(Error::InvalidArgument(format!("fit needs at least {} rows, got {n}", d + 1)));
    }
    if !(0.0..=1.0).contains(&shrinkage) {
        return Err(Error::InvalidArgument(format!("shrinkage {shrinkage} outside [0, 1]")));
    }
    let x = to_matrix(train.as_array());
    let mean = x.row_mean().transpose();
    let mut centred = x;
    for mut row in centred.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centred.transpose() * &centred / (n as f64 - 1.0);
    let shrunk = &cov * (1.0 - shrinkage) + DMatrix::from_diagonal(&cov.diagonal()) * shrinkage;
    let chol = shrunk
        .cholesky()
        .ok_or_else(|| Error::Degenerate("covariance is singular after shrinkage".into()))?;
    Ok(MahalanobisFit { mean, precision: chol.inverse() })
}

/// `sqrt((x - mean)^T P (x - mean))` per row.
pub fn mahalanobis_score(fit: &MahalanobisFit, x: &EmbeddingBatch) -> Result<DetectorScores> {
    if x.dims() != fit.mean.len() {
        return Err(Error::Shape(format!("features have {} dims, fit has {}", x.dims(), fit.mean.len())));
    }
    let scores = x
        .as_array()
        .axis_iter(Axis(0))
        .map(|r| {
            let diff = DVector::from_iterator(r.len(), r.iter().copied()) - &fit.mean;
            (diff.dot(&(&fit.precision * &diff))).max(0.0).sqrt()
        })
        .collect();
    Ok(DetectorScores::new(scores))
}

fn softmax_row(r: ndarray::ArrayView1<f64>) -> Vec<f64> {
    let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = r.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// `1 - max softmax`.
pub fn max_softmax_score(logits: &Array2<f64>) -> DetectorScores {
    DetectorScores::new(
        logits
            .axis_iter(Axis(0))
            .map(|r| 1.0 - softmax_row(r).into_iter().fold(0.0, f64::max))
            .collect(),
    )
}

/// Shannon entropy of the softmax, in nats.
pub fn entropy_score(logits: &Array2<f64>) -> DetectorScores {
    DetectorScores::new(
        logits
            .axis_iter(Axis(0))
            .map(|r| {
                softmax_row(r)
                    .into_iter()
                    .filter(|&p| p > 0.0)
                    .map(|p| -p * p.ln())
                    .sum()
            })
            .collect(),
    )
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn probe_logits(model: &Model, store: &ParamStore, probe: &LinearProbe, x: &Array2<f64>) -> Result<Array2<f64>> {
    let h = extract_representation(model, store, x, model.variant, RepresentationMode::Mean)?;
    probe.logits(&h)
}

/// Input-space gradient of `-log max softmax(logits / T)` through encoder
/// and probe, in evaluation mode.
pub fn odin_input_gradient(model: &Model, store: &ParamStore, probe: &LinearProbe, x: &Array2<f64>, temperature: f64) -> Result<Array2<f64>> {
    let mut s = Session::new(store, Mode::Eval, false);
    let xv = s.tape.variable(x.clone());
    let h = match model.encoder_var(&mut s, store, xv)? {
        StageVars::Point(h) => h,
        StageVars::Dist(d) => d.mu,
    };
    let t = &mut s.tape;
    let sq = t.square(h);
    let ss = t.sum_cols(sq);
    let norm = t.sqrt(ss);
    let hn = t.div(h, norm);
    let w = t.constant(probe.weight.clone());
    let b = t.constant(probe.bias.clone());
    let xw = t.matmul(hn, w);
    let logits = t.add(xw, b);
    let scaled = t.scale(logits, 1.0 / temperature);
    let ls = t.log_softmax(scaled);
    let top = argmax_rows(t.value(logits));
    let mut mask = Array2::zeros(t.shape(logits));
    for (i, c) in top.into_iter().enumerate() {
        mask[[i, c]] = 1.0;
    }
    let mask = t.constant(mask);
    let picked = t.mul(ls, mask);
    let total = t.sum(picked);
    let loss = t.scale(total, -1.0);
    let grads = t.backward(loss)?;
    grads
        .get(xv)
        .cloned()
        .ok_or_else(|| Error::InvalidArgument("input is not on the probe path".into()))
}

/// Temperature scaling plus a signed-gradient input perturbation that
/// raises the top softmax score.
pub fn odin_score(model: &Model, store: &ParamStore, probe: &LinearProbe, x: &Array2<f64>, temperature: f64, eps_perturb: f64) -> Result<DetectorScores> {
    if eps_perturb < 0.0 {
        return Err(Error::InvalidArgument(format!("perturbation {eps_perturb} must be >= 0")));
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature {temperature} must be > 0")));
    }
    let perturbed = if eps_perturb == 0.0 {
        x.clone()
    } else {
        let g = odin_input_gradient(model, store, probe, x, temperature)?;
        x - &(g.mapv(sign) * eps_perturb)
    };
    let logits = probe_logits(model, store, probe, &perturbed)?;
    Ok(max_softmax_score(&(logits / temperature)))
}

/// Probability that a random OUT score exceeds a random IN score, ties
/// counted half, from average ranks.
pub fn auroc(in_scores: &[f64], out_scores: &[f64]) -> Result<f64> {
    if in_scores.is_empty() || out_scores.is_empty() {
        return Err(Error::InvalidArgument("both score sets must be non-empty".into()));
    }
    if in_scores.iter().chain(out_scores).any(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument("scores must be finite".into()));
    }
    let mut all: Vec<(f64, bool)> = in_scores
        .iter()
        .map(|&s| (s, false))
        .chain(out_scores.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum_out = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1..=j+1 share their average
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum_out += avg * all[i..=j].iter().filter(|e| e.1).count() as f64;
        i = j + 1;
    }
    let (n_in, n_out) = (in_scores.len() as f64, out_scores.len() as f64);
    let u = rank_sum_out - n_out * (n_out + 1.0) / 2.0;
    Ok(u / (n_in * n_out))
}

/// Uniform random scores, the chance-level baseline.
pub fn random_scores<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DetectorScores {
    DetectorScores::new((0..n).map(|_| rng.random::<f64>()).collect())
}

/// Result of one detector; `auroc` is `None` when the detector does not
/// apply to the checkpoint (no sigma, or no probe).
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorResult {
    pub detector: Detector,
    pub auroc: Option<f64>,
    pub in_scores: Vec<f64>,
    pub out_scores: Vec<f64>,
    pub warning: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OodConfig {
    pub shrinkage: f64,
    pub temperature: f64,
    pub eps_perturb: f64,
}

impl Default for OodConfig {
    fn default() -> Self {
        Self {
            shrinkage: DEFAULT_SHRINKAGE,
            temperature: ODIN_TEMPERATURE,
            eps_perturb: ODIN_EPSILON,
        }
    }
}

fn stage_dist(model: &Model, store: &ParamStore, x: &Array2<f64>) -> Result<DiagGaussianBatch> {
    let sigma = stochastic_sigma(model, store, x)?;
    DiagGaussianBatch::new(Array2::zeros(sigma.dim()), sigma)
}

/// Runs every detector on an IN test split and an OUT split. `train_x`
/// feeds the Mahalanobis fit.
pub fn evaluate_detectors(
    model: &Model,
    store: &ParamStore,
    probe: Option<&LinearProbe>,
    train_x: &Array2<f64>,
    in_x: &Array2<f64>,
    out_x: &Array2<f64>,
    cfg: &OodConfig,
) -> Result<Vec<DetectorResult>> {
    let mut results = Vec::new();
    let mut push = |detector, pair: Option<(DetectorScores, DetectorScores)>| -> Result<()> {
        let result = match pair {
            Some((a, b)) => DetectorResult {
                detector,
                auroc: Some(auroc(&a.scores, &b.scores)?),
                warning: a.warning.or(b.warning),
                in_scores: a.scores,
                out_scores: b.scores,
            },
            None => DetectorResult { detector, auroc: None, in_scores: vec![], out_scores: vec![], warning: None },
        };
        results.push(result);
        Ok(())
    };
    let stochastic = model.variant != Variant::Deterministic;
    let dists = if stochastic {
        Some((stage_dist(model, store, in_x)?, stage_dist(model, store, out_x)?))
    } else {
        None
    };
    push(Detector::SigmaMean, dists.as_ref().map(|(a, b)| (sigma_mean_score(a), sigma_mean_score(b))))?;
    push(Detector::SigmaStd, dists.as_ref().map(|(a, b)| (sigma_std_score(a), sigma_std_score(b))))?;

    let rep = |x| extract_representation(model, store, x, model.variant, RepresentationMode::Mean);
    let fit = mahalanobis_fit(&rep(train_x)?, cfg.shrinkage)?;
    push(Detector::Mahalanobis, Some((mahalanobis_score(&fit, &rep(in_x)?)?, mahalanobis_score(&fit, &rep(out_x)?)?)))?;

    match probe {
        Some(p) => {
            let li = probe_logits(model, store, p, in_x)?;
            let lo = probe_logits(model, store, p, out_x)?;
            push(Detector::MaxSoftmax, Some((max_softmax_score(&li), max_softmax_score(&lo))))?;
            push(Detector::Entropy, Some((entropy_score(&li), entropy_score(&lo))))?;
            push(
                Detector::Odin,
                Some((
                    odin_score(model, store, p, in_x, cfg.temperature, cfg.eps_perturb)?,
                    odin_score(model, store, p, out_x, cfg.temperature, cfg.eps_perturb)?,
                )),
            )?;
        }
        None => {
            for d in [Detector::MaxSoftmax, Detector::Entropy, Detector::Odin] {
                push(d, None)?;
            }
        }
    }
    Ok(results)
}
