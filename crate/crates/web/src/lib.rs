//! Browser demo: loss terms on toy embeddings, Gaussian KL, and AUROC.
//!
//! Each export takes plain numbers or text and returns a JSON string, so
//! the page needs no bundler. The `*_json` functions hold the logic and are
//! what the native tests exercise.

use ndarray::Array2;
use probssl::batchstats::EmbeddingBatch;
use probssl::gaussdist::{kl_standard_normal, kl_to_prior_mc, standard_normal, DiagGaussianBatch, MoGPrior, Prior};
use probssl::objectives::{barlow_terms, vicreg_covariance, vicreg_invariance, vicreg_variance, LossCoefficients};
use probssl::ood::auroc;
use probssl::rng::stream;
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Debug, Serialize)]
pub struct LossBreakdown {
    pub barlow_inv: f64,
    pub barlow_reg: f64,
    pub vicreg_inv: f64,
    pub vicreg_var: f64,
    pub vicreg_cov: f64,
    /// Mean per-dimension std of view A.
    pub std_a: f64,
}

/// Two views of `n` points in `d` dims: a shared signal of scale `spread`
/// plus independent per-view noise of scale `noise`. `shared` in [0, 1]
/// mixes every column toward the first one, which correlates dimensions.
pub fn loss_breakdown_json(n: usize, d: usize, spread: f64, noise: f64, shared: f64, seed: u64) -> Result<String, String> {
    if n < 2 || d == 0 || n > 4096 || d > 256 {
        return Err("need 2 <= n <= 4096 and 1 <= d <= 256".into());
    }
    let mut r = stream(seed, &[]);
    let base = standard_normal((n, d), &mut r);
    let first = base.column(0).to_owned();
    let mut signal = base.clone();
    for mut col in signal.columns_mut() {
        col.zip_mut_with(&first, |v, f| *v = (1.0 - shared) * *v + shared * f);
    }
    let signal = signal * spread;
    let za = &signal + &(standard_normal((n, d), &mut r) * noise);
    let zb = &signal + &(standard_normal((n, d), &mut r) * noise);
    let (a, b) = (batch(za)?, batch(zb)?);
    let c = LossCoefficients::default();
    let err = |e: probssl::Error| e.to_string();
    let (barlow_inv, barlow_reg) = barlow_terms(&a, &b, &c).map_err(err)?;
    let out = LossBreakdown {
        barlow_inv,
        barlow_reg,
        vicreg_inv: vicreg_invariance(&a, &b, c.alpha).map_err(err)?,
        vicreg_var: vicreg_variance(&a, c.gamma, c.eps).map_err(err)?,
        vicreg_cov: vicreg_covariance(&a).map_err(err)?,
        std_a: column_std_mean(a.as_array()),
    };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

fn batch(x: Array2<f64>) -> Result<EmbeddingBatch, String> {
    EmbeddingBatch::new(x).map_err(|e| e.to_string())
}

fn column_std_mean(x: &Array2<f64>) -> f64 {
    let n = x.nrows() as f64;
    x.columns()
        .into_iter()
        .map(|c| {
            let m = c.sum() / n;
            (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        })
        .sum::<f64>()
        / x.ncols() as f64
}

#[derive(Debug, Serialize)]
pub struct KlComparison {
    pub closed_form: f64,
    pub monte_carlo: f64,
    /// MC estimate against a mixture whose components are spread around
    /// the origin.
    pub mixture: f64,
}

/// KL of the one-dimensional N(mu, sigma^2) to N(0, 1) in closed form and
/// with `samples` Monte Carlo draws.
pub fn kl_json(mu: f64, sigma: f64, samples: usize, seed: u64) -> Result<String, String> {
    if !(sigma > 0.0) || !mu.is_finite() || samples == 0 || samples > 100_000 {
        return Err("need sigma > 0, finite mu and 1..=100000 samples".into());
    }
    let q = DiagGaussianBatch::new(Array2::from_elem((1, 1), mu), Array2::from_elem((1, 1), sigma)).map_err(|e| e.to_string())?;
    let mut r = stream(seed, &[]);
    let noise: Vec<_> = (0..samples).map(|_| q.draw_noise(&mut r)).collect();
    let err = |e: probssl::Error| e.to_string();
    let mog = MoGPrior::new(Array2::from_shape_vec((3, 1), vec![-2.0, 0.0, 2.0]).unwrap(), Array2::from_elem((3, 1), 0.7))
        .map_err(err)?;
    let out = KlComparison {
        closed_form: kl_standard_normal(&q)[0],
        monte_carlo: kl_to_prior_mc(&q, &Prior::StandardNormal, &noise).map_err(err)?[0],
        mixture: kl_to_prior_mc(&q, &Prior::Mog(mog), &noise).map_err(err)?[0],
    };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

fn parse_scores(text: &str) -> Result<Vec<f64>, String> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| format!("not a number: {s:?}")))
        .collect()
}

/// AUROC of out-of-distribution scores against in-distribution scores,
/// each given as a comma- or whitespace-separated list.
pub fn auroc_json(in_scores: &str, out_scores: &str) -> Result<String, String> {
    let a = parse_scores(in_scores)?;
    let b = parse_scores(out_scores)?;
    let v = auroc(&a, &b).map_err(|e| e.to_string())?;
    serde_json::to_string(&serde_json::json!({ "auroc": v, "n_in": a.len(), "n_out": b.len() })).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn loss_breakdown(n: usize, d: usize, spread: f64, noise: f64, shared: f64, seed: u32) -> Result<String, JsError> {
    loss_breakdown_json(n, d, spread, noise, shared, seed.into()).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn kl_gaussian(mu: f64, sigma: f64, samples: usize, seed: u32) -> Result<String, JsError> {
    kl_json(mu, sigma, samples, seed.into()).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn auroc_scores(in_scores: &str, out_scores: &str) -> Result<String, JsError> {
    auroc_json(in_scores, out_scores).map_err(|e| JsError::new(&e))
}
