//! Mutual information estimates with a trained statistic network and the
//! Donsker-Varadhan bound.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::data::{gaussian_pairs, make_views, shuffled_indices, AugmentSpec, Dataset};
use crate::error::{Error, Result};
use crate::models::{linear, uniform_fill, ForwardOutput, Model};
use crate::optim::AdamW;
use crate::params::{Mode, OptimState, ParamStore, Session};
use crate::rng::{stream, tag, Rng};

/// `mean(t_joint) - log(mean(exp(t_marginal)))`, with a max shift.
pub fn dv_bound(t_joint: &[f64], t_marginal: &[f64]) -> Result<f64> {
    if t_joint.is_empty() || t_marginal.is_empty() {
        return Err(Error::InvalidArgument("DV bound needs non-empty batches".into()));
    }
    let mean_j = t_joint.iter().sum::<f64>() / t_joint.len() as f64;
    let m = t_marginal.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lme = m + (t_marginal.iter().map(|t| (t - m).exp()).sum::<f64>() / t_marginal.len() as f64).ln();
    Ok(mean_j - lme)
}

/// Two ReLU hidden layers on the concatenated pair, scalar output.
#[derive(Clone, Debug, PartialEq)]
pub struct StatisticNet {
    pub x_dim: usize,
    pub y_dim: usize,
    pub hidden: usize,
    pub params: ParamStore,
}

impl StatisticNet {
    pub fn new<R: rand::Rng + ?Sized>(x_dim: usize, y_dim: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        if x_dim == 0 || y_dim == 0 || hidden == 0 {
            return Err(Error::InvalidArgument("statistic network dims must be positive".into()));
        }
        let mut params = ParamStore::new();
        let mut layer = |name: &str, fan_in: usize, out: usize, rng: &mut R| -> Result<()> {
            params.insert(format!("{name}.weight"), uniform_fill((fan_in, out), fan_in, 1.0, rng))?;
            params.insert(format!("{name}.bias"), uniform_fill((1, out), fan_in, 1.0, rng))
        };
        layer("stat.fc1", x_dim + y_dim, hidden, rng)?;
        layer("stat.fc2", hidden, hidden, rng)?;
        layer("stat.out", hidden, 1, rng)?;
        Ok(Self { x_dim, y_dim, hidden, params })
    }

    fn forward_var(&self, s: &mut Session, x: Var, y: Var) -> Result<Var> {
        let xy = s.tape.concat_cols(&[x, y]);
        let a = linear(s, &self.params, "stat.fc1", xy)?;
        let a = s.tape.relu(a);
        let b = linear(s, &self.params, "stat.fc2", a)?;
        let b = s.tape.relu(b);
        linear(s, &self.params, "stat.out", b)
    }

    /// `T(x, y)` per row.
    pub fn forward(&self, x: &Array2<f64>, y: &Array2<f64>) -> Result<Vec<f64>> {
        self.check(x, y)?;
        let mut s = Session::new(&self.params, Mode::Eval, false);
        let xv = s.tape.constant(x.clone());
        let yv = s.tape.constant(y.clone());
        let t = self.forward_var(&mut s, xv, yv)?;
        Ok(s.tape.value(t).iter().copied().collect())
    }

    fn check(&self, x: &Array2<f64>, y: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.x_dim || y.ncols() != self.y_dim || x.nrows() != y.nrows() {
            return Err(Error::Shape(format!(
                "pair {:?}/{:?} for a ({}, {}) network",
                x.dim(),
                y.dim(),
                self.x_dim,
                self.y_dim
            )));
        }
        Ok(())
    }
}

/// Aligned `(x, y)` mini-batches.
pub trait PairSource {
    fn dims(&self) -> (usize, usize);
    fn next_batch(&mut self, n: usize) -> Result<(Array2<f64>, Array2<f64>)>;
}

/// Correlated Gaussian pairs with known MI `-dims/2 · ln(1 - rho²)`.
pub struct GaussianPairs {
    pub dims: usize,
    pub rho: f64,
    rng: Rng,
}

impl GaussianPairs {
    pub fn new(dims: usize, rho: f64, seed: u64) -> Result<Self> {
        if dims == 0 || !(rho.abs() < 1.0) {
            return Err(Error::InvalidArgument(format!("need dims > 0 and |rho| < 1, got {dims}, {rho}")));
        }
        Ok(Self { dims, rho, rng: stream(seed, &[tag::MI, 1]) })
    }

    pub fn true_mi(&self) -> f64 {
        -0.5 * self.dims as f64 * (1.0 - self.rho * self.rho).ln()
    }
}

impl PairSource for GaussianPairs {
    fn dims(&self) -> (usize, usize) {
        (self.dims, self.dims)
    }

    fn next_batch(&mut self, n: usize) -> Result<(Array2<f64>, Array2<f64>)> {
        Ok(gaussian_pairs(n, self.dims, self.rho, &mut self.rng))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PairKind {
    #[serde(rename = "v:h")]
    VH,
    #[serde(rename = "h:h'")]
    HH,
    #[serde(rename = "h:z")]
    HZ,
    #[serde(rename = "z:z'")]
    ZZ,
}

impl PairKind {
    pub const ALL: [PairKind; 4] = [PairKind::VH, PairKind::HH, PairKind::HZ, PairKind::ZZ];

    pub fn label(self) -> &'static str {
        match self {
            PairKind::VH => "v:h",
            PairKind::HH => "h:h'",
            PairKind::HZ => "h:z",
            PairKind::ZZ => "z:z'",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase().replace(['(', ')', ' ', 'i', ';'], ":");
        let s = s.trim_matches(':');
        match s {
            "v:h" => Ok(PairKind::VH),
            "h:h'" | "h:hp" | "h:h" => Ok(PairKind::HH),
            "h:z" => Ok(PairKind::HZ),
            "z:z'" | "z:zp" | "z:z" => Ok(PairKind::ZZ),
            _ => Err(Error::InvalidArgument(format!("unknown pair {s}; expected v:h, h:h', h:z or z:z'"))),
        }
    }
}

fn spaces(out: &ForwardOutput) -> Result<(Array2<f64>, Array2<f64>)> {
    let first = |v: Option<&[crate::batchstats::EmbeddingBatch]>| {
        v.and_then(|s| s.first())
            .map(|e| e.as_array().clone())
            .ok_or_else(|| Error::Variant("missing posterior sample".into()))
    };
    Ok(match out {
        ForwardOutput::Deterministic { h, z } => (h.as_array().clone(), z.as_array().clone()),
        ForwardOutput::Zprob { h, .. } => (h.as_array().clone(), first(out.z_samples())?),
        ForwardOutput::Hprob { .. } => (first(out.h_samples())?, first(out.z_samples())?),
    })
}

/// Pairs drawn from a trained model's spaces. Stochastic spaces use one
/// posterior sample per item; primed legs use the second view.
pub struct ModelPairs<'a> {
    model: &'a Model,
    store: &'a ParamStore,
    data: &'a Dataset,
    kind: PairKind,
    augment: AugmentSpec,
    seed: u64,
    batch_index: usize,
    rng: Rng,
}

pub fn probe_pairs<'a>(model: &'a Model, store: &'a ParamStore, data: &'a Dataset, kind: PairKind, augment: AugmentSpec, seed: u64) -> Result<ModelPairs<'a>> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("pair source needs data".into()));
    }
    if data.layout != model.input {
        return Err(Error::Shape(format!("data layout {:?} does not match the model's {:?}", data.layout, model.input)));
    }
    Ok(ModelPairs {
        model,
        store,
        data,
        kind,
        augment,
        seed,
        batch_index: 0,
        rng: stream(seed, &[tag::MI, 2]),
    })
}

impl ModelPairs<'_> {
    fn forward(&mut self, x: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let noise = self.model.draw_noise(x.nrows(), 1, &mut self.rng);
        spaces(&self.model.pipeline_forward(self.store, x, &noise, Mode::Eval)?)
    }
}

impl PairSource for ModelPairs<'_> {
    fn dims(&self) -> (usize, usize) {
        let c = &self.model.config;
        match self.kind {
            PairKind::VH => (self.model.input.dim(), c.rep_dim),
            PairKind::HH => (c.rep_dim, c.rep_dim),
            PairKind::HZ => (c.rep_dim, c.proj_dim),
            PairKind::ZZ => (c.proj_dim, c.proj_dim),
        }
    }

    fn next_batch(&mut self, n: usize) -> Result<(Array2<f64>, Array2<f64>)> {
        let order = shuffled_indices(self.data.len(), &mut self.rng);
        let items: Vec<usize> = (0..n).map(|i| order[i % order.len()]).collect();
        let views = make_views(self.data, &items, self.batch_index, self.seed, &self.augment);
        self.batch_index += 1;
        let (h, z) = self.forward(&views.v)?;
        Ok(match self.kind {
            PairKind::VH => (views.v, h),
            PairKind::HZ => (h, z),
            PairKind::HH => (h, self.forward(&views.v_prime)?.0),
            PairKind::ZZ => (z, self.forward(&views.v_prime)?.1),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MineConfig {
    pub hidden: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Decay of the moving average that replaces the bound's denominator
    /// in the gradient.
    pub ema_decay: f64,
    /// Fraction of the curve averaged into the final estimate.
    pub tail_fraction: f64,
    pub seed: u64,
}

impl Default for MineConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            steps: 2000,
            batch_size: 256,
            lr: 1e-3,
            ema_decay: 0.99,
            tail_fraction: 0.1,
            seed: 0,
        }
    }
}

impl MineConfig {
    pub fn issues(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        if self.hidden == 0 {
            out.push(("hidden", "must be positive".to_string()));
        }
        if self.steps == 0 {
            out.push(("steps", "must be positive".to_string()));
        }
        if self.batch_size < 2 {
            out.push(("batch_size", "marginals need at least two rows".to_string()));
        }
        if !(self.lr > 0.0) {
            out.push(("lr", format!("must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            out.push(("ema_decay", format!("must lie in [0, 1), got {}", self.ema_decay)));
        }
        if !(self.tail_fraction > 0.0 && self.tail_fraction <= 1.0) {
            out.push(("tail_fraction", format!("must lie in (0, 1], got {}", self.tail_fraction)));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiEstimate {
    pub label: String,
    /// Mean of the last `window` curve entries, in nats.
    pub value: f64,
    pub window: usize,
    /// Bound on each fresh batch, measured before that batch's update.
    pub curve: Vec<f64>,
}

/// Incremental MINE trainer, usable post hoc or alongside pretraining.
pub struct Mine {
    pub net: StatisticNet,
    cfg: MineConfig,
    opt: AdamW,
    state: OptimState,
    ema: Option<f64>,
    rng: Rng,
    pub curve: Vec<f64>,
}

impl Mine {
    pub fn new(x_dim: usize, y_dim: usize, cfg: &MineConfig) -> Result<Self> {
        if let Some((k, m)) = cfg.issues().into_iter().next() {
            return Err(Error::InvalidArgument(format!("{k}: {m}")));
        }
        let net = StatisticNet::new(x_dim, y_dim, cfg.hidden, &mut stream(cfg.seed, &[tag::MI, 3]))?;
        Ok(Self {
            net,
            cfg: cfg.clone(),
            opt: AdamW { weight_decay: 0.0, ..Default::default() },
            state: OptimState::default(),
            ema: None,
            rng: stream(cfg.seed, &[tag::MI, 4]),
            curve: Vec::new(),
        })
    }

    /// One ascent step on a joint batch; the marginal batch shuffles `y`.
    /// Returns the bound measured before the update.
    pub fn step(&mut self, x: &Array2<f64>, y: &Array2<f64>) -> Result<f64> {
        self.net.check(x, y)?;
        let perm = shuffled_indices(y.nrows(), &mut self.rng);
        let y_marg = y.select(Axis(0), &perm);
        let n = x.nrows() as f64;

        let mut s = Session::new(&self.net.params, Mode::Train, true);
        let xv = s.tape.constant(x.clone());
        let yv = s.tape.constant(y.clone());
        let ym = s.tape.constant(y_marg);
        let tj = self.net.forward_var(&mut s, xv, yv)?;
        let tm = self.net.forward_var(&mut s, xv, ym)?;
        let bound = {
            let j: Vec<f64> = s.tape.value(tj).iter().copied().collect();
            let m: Vec<f64> = s.tape.value(tm).iter().copied().collect();
            dv_bound(&j, &m)?
        };
        if !bound.is_finite() {
            return Err(Error::NonFinite { term: "dv_bound".into(), step: self.curve.len() });
        }

        // Surrogate whose gradient is the bias-corrected one:
        // -(mean T_joint - mean exp(T_marg) / ema)
        let t = &mut s.tape;
        let shift = t.value(tm).iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let shifted = t.offset(tm, -shift);
        let e = t.exp(shifted);
        let mean_e = t.mean(e);
        let batch_mean = t.scalar_value(mean_e) * shift.exp();
        let ema = match self.ema {
            Some(prev) => self.cfg.ema_decay * prev + (1.0 - self.cfg.ema_decay) * batch_mean,
            None => batch_mean,
        };
        self.ema = Some(ema);
        let mj = t.sum(tj);
        let mj = t.scale(mj, 1.0 / n);
        let corr = t.scale(mean_e, shift.exp() / ema);
        let gain = t.sub(mj, corr);
        let loss = t.scale(gain, -1.0);
        s.backward(loss, &mut self.net.params)?;
        self.opt.step(&mut self.net.params, &mut self.state, self.cfg.lr)?;
        self.curve.push(bound);
        Ok(bound)
    }

    pub fn estimate(&self, label: &str) -> Result<MiEstimate> {
        if self.curve.is_empty() {
            return Err(Error::InvalidArgument("no MINE steps taken".into()));
        }
        let window = ((self.curve.len() as f64 * self.cfg.tail_fraction).ceil() as usize).clamp(1, self.curve.len());
        let tail = &self.curve[self.curve.len() - window..];
        Ok(MiEstimate {
            label: label.to_string(),
            value: tail.iter().sum::<f64>() / window as f64,
            window,
            curve: self.curve.clone(),
        })
    }
}

/// Trains a fresh statistic network on `source` for `cfg.steps` batches.
pub fn mine_train(source: &mut dyn PairSource, label: &str, cfg: &MineConfig) -> Result<MiEstimate> {
    let (dx, dy) = source.dims();
    let mut mine = Mine::new(dx, dy, cfg)?;
    for _ in 0..cfg.steps {
        let (x, y) = source.next_batch(cfg.batch_size)?;
        mine.step(&x, &y)?;
    }
    mine.estimate(label)
}
