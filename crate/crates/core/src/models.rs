//! Encoder and projector networks and the three forward pipelines:
//! deterministic, stochastic projector output (Z-prob) and stochastic
//! encoder output (H-prob).

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvGeom, PoolGeom, Var};
use crate::batchstats::EmbeddingBatch;
use crate::error::{Error, Result};
use crate::gaussdist::{
    sample_reparam_var, softplus_inv, standard_normal, DiagGaussianBatch, DistVars, MoGPrior,
    Prior, PriorVars, SIGMA_MIN,
};
use crate::objectives::{PosteriorDraws, ViewEmbedding};
use crate::params::{Mode, ParamStore, Session};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Scale applied to the uniform init of sigma-head weights, so initial
/// sigma stays close to the bias-determined value of 1.
const SIGMA_HEAD_SCALE: f64 = 0.1;
const MOG_MEAN_STD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Deterministic,
    Zprob,
    Hprob,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Deterministic, Variant::Zprob, Variant::Hprob];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Deterministic => "deterministic",
            Variant::Zprob => "zprob",
            Variant::Hprob => "hprob",
        }
    }

    pub fn is_stochastic(self) -> bool {
        self != Variant::Deterministic
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorSpec {
    StandardNormal,
    Mog {
        #[serde(default = "default_components")]
        components: usize,
    },
}

fn default_components() -> usize {
    8
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec::StandardNormal
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    #[default]
    Mlp,
    Conv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderKind,
    /// Width of the MLP encoder's hidden layer.
    pub hidden_dim: usize,
    /// Representation (H) width.
    pub rep_dim: usize,
    pub proj_hidden: usize,
    /// Embedding (Z) width.
    pub proj_dim: usize,
    /// Output channels of the convolutional blocks.
    pub conv_channels: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderKind::Mlp,
            hidden_dim: 256,
            rep_dim: 128,
            proj_hidden: 128,
            proj_dim: 128,
            conv_channels: vec![16, 32, 32, 64],
        }
    }
}

/// Layout of one input row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputLayout {
    Flat { dim: usize },
    Image { channels: usize, height: usize, width: usize },
}

impl InputLayout {
    pub fn dim(&self) -> usize {
        match *self {
            InputLayout::Flat { dim } => dim,
            InputLayout::Image { channels, height, width } => channels * height * width,
        }
    }
}

/// Output of one network stage.
#[derive(Clone, Copy, Debug)]
pub enum StageVars {
    Point(Var),
    Dist(DistVars),
}

/// Tape handles of a full pipeline forward.
#[derive(Clone, Debug)]
pub enum ForwardVars {
    Deterministic { h: Var, z: Var },
    Zprob { h: Var, z_dist: DistVars, z_samples: Vec<Var> },
    Hprob { h_dist: DistVars, h_samples: Vec<Var>, z_samples: Vec<Var> },
}

impl ForwardVars {
    /// What the objective consumes for this view.
    pub fn view_embedding(&self) -> ViewEmbedding {
        match self {
            ForwardVars::Deterministic { z, .. } => ViewEmbedding::point(*z),
            ForwardVars::Zprob { z_dist, z_samples, .. } => ViewEmbedding {
                z_samples: z_samples.clone(),
                posterior: Some(PosteriorDraws { dist: *z_dist, samples: z_samples.clone() }),
            },
            ForwardVars::Hprob { h_dist, h_samples, z_samples } => ViewEmbedding {
                z_samples: z_samples.clone(),
                posterior: Some(PosteriorDraws { dist: *h_dist, samples: h_samples.clone() }),
            },
        }
    }

    /// The posterior that carries sigma, if any.
    pub fn stochastic_dist(&self) -> Option<DistVars> {
        match self {
            ForwardVars::Deterministic { .. } => None,
            ForwardVars::Zprob { z_dist, .. } => Some(*z_dist),
            ForwardVars::Hprob { h_dist, .. } => Some(*h_dist),
        }
    }

    pub fn value(&self, s: &Session) -> Result<ForwardOutput> {
        let t = &s.tape;
        let pt = |v: Var| EmbeddingBatch::new(t.value(v).clone());
        let all = |vs: &[Var]| vs.iter().map(|&v| pt(v)).collect::<Result<Vec<_>>>();
        let dist = |d: DistVars| DiagGaussianBatch::new(t.value(d.mu).clone(), t.value(d.sigma).clone());
        Ok(match self {
            ForwardVars::Deterministic { h, z } => ForwardOutput::Deterministic { h: pt(*h)?, z: pt(*z)? },
            ForwardVars::Zprob { h, z_dist, z_samples } => ForwardOutput::Zprob {
                h: pt(*h)?,
                z_dist: dist(*z_dist)?,
                z_samples: all(z_samples)?,
            },
            ForwardVars::Hprob { h_dist, h_samples, z_samples } => ForwardOutput::Hprob {
                h_dist: dist(*h_dist)?,
                h_samples: all(h_samples)?,
                z_samples: all(z_samples)?,
            },
        })
    }
}

/// Values of a full pipeline forward; exactly the fields of the variant.
#[derive(Clone, Debug, PartialEq)]
pub enum ForwardOutput {
    Deterministic { h: EmbeddingBatch, z: EmbeddingBatch },
    Zprob { h: EmbeddingBatch, z_dist: DiagGaussianBatch, z_samples: Vec<EmbeddingBatch> },
    Hprob { h_dist: DiagGaussianBatch, h_samples: Vec<EmbeddingBatch>, z_samples: Vec<EmbeddingBatch> },
}

impl ForwardOutput {
    pub fn variant(&self) -> Variant {
        match self {
            ForwardOutput::Deterministic { .. } => Variant::Deterministic,
            ForwardOutput::Zprob { .. } => Variant::Zprob,
            ForwardOutput::Hprob { .. } => Variant::Hprob,
        }
    }

    pub fn h_point(&self) -> Option<&EmbeddingBatch> {
        match self {
            ForwardOutput::Deterministic { h, .. } | ForwardOutput::Zprob { h, .. } => Some(h),
            ForwardOutput::Hprob { .. } => None,
        }
    }

    pub fn h_dist(&self) -> Option<&DiagGaussianBatch> {
        match self {
            ForwardOutput::Hprob { h_dist, .. } => Some(h_dist),
            _ => None,
        }
    }

    pub fn z_point(&self) -> Option<&EmbeddingBatch> {
        match self {
            ForwardOutput::Deterministic { z, .. } => Some(z),
            _ => None,
        }
    }

    pub fn z_dist(&self) -> Option<&DiagGaussianBatch> {
        match self {
            ForwardOutput::Zprob { z_dist, .. } => Some(z_dist),
            _ => None,
        }
    }

    pub fn h_samples(&self) -> Option<&[EmbeddingBatch]> {
        match self {
            ForwardOutput::Hprob { h_samples, .. } => Some(h_samples),
            _ => None,
        }
    }

    pub fn z_samples(&self) -> Option<&[EmbeddingBatch]> {
        match self {
            ForwardOutput::Zprob { z_samples, .. } | ForwardOutput::Hprob { z_samples, .. } => Some(z_samples),
            ForwardOutput::Deterministic { .. } => None,
        }
    }

    pub fn stochastic_dist(&self) -> Option<&DiagGaussianBatch> {
        self.z_dist().or(self.h_dist())
    }
}

/// A network architecture bound to a variant and prior.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub input: InputLayout,
    pub variant: Variant,
    pub prior: PriorSpec,
}

pub(crate) fn uniform_fill<R: Rng + ?Sized>(shape: (usize, usize), fan_in: usize, scale: f64, rng: &mut R) -> Array2<f64> {
    let bound = scale / (fan_in as f64).sqrt();
    let u = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Array2::from_shape_simple_fn(shape, || u.sample(rng))
}

fn linear_params<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<()> {
    store.insert(format!("{name}.weight"), uniform_fill((fan_in, fan_out), fan_in, 1.0, rng))?;
    store.insert(format!("{name}.bias"), uniform_fill((1, fan_out), fan_in, 1.0, rng))
}

fn sigma_head_params<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<()> {
    store.insert(
        format!("{name}.weight"),
        uniform_fill((fan_in, fan_out), fan_in, SIGMA_HEAD_SCALE, rng),
    )?;
    store.insert(
        format!("{name}.bias"),
        Array2::from_elem((1, fan_out), softplus_inv(1.0 - SIGMA_MIN)),
    )
}

fn bn_params(store: &mut ParamStore, name: &str, width: usize) -> Result<()> {
    store.insert(format!("{name}.weight"), Array2::ones((1, width)))?;
    store.insert(format!("{name}.bias"), Array2::zeros((1, width)))?;
    store.insert_buffer(format!("{name}.running_mean"), Array2::zeros((1, width)))?;
    store.insert_buffer(format!("{name}.running_var"), Array2::ones((1, width)))
}

pub(crate) fn linear(s: &mut Session, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = s.param(store, &format!("{name}.weight"))?;
    let b = s.param(store, &format!("{name}.bias"))?;
    let (_, in_w) = s.tape.shape(x);
    if s.tape.shape(w).0 != in_w {
        return Err(Error::Shape(format!(
            "{name} expects {} inputs, got {in_w}",
            s.tape.shape(w).0
        )));
    }
    let y = s.tape.matmul(x, w);
    Ok(s.tape.add(y, b))
}

/// `softplus(x·W + b) + SIGMA_MIN`.
fn sigma_head(s: &mut Session, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let raw = linear(s, store, name, x)?;
    let sp = s.tape.softplus(raw);
    Ok(s.tape.offset(sp, SIGMA_MIN))
}

fn batch_norm(s: &mut Session, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let gamma = s.param(store, &format!("{name}.weight"))?;
    let beta = s.param(store, &format!("{name}.bias"))?;
    let xhat = match s.mode() {
        Mode::Train => {
            let n = s.tape.shape(x).0;
            if n < 2 {
                return Err(Error::Degenerate("batch norm needs at least two rows in training".into()));
            }
            let mean = s.tape.mean_rows(x);
            let xc = s.tape.sub(x, mean);
            let sq = s.tape.square(xc);
            let var = s.tape.mean_rows(sq);
            let unbiased = s.tape.value(var) * (n as f64 / (n - 1) as f64);
            let mean_v = s.tape.value(mean).clone();
            s.record_batch_norm(name, mean_v, unbiased);
            let ve = s.tape.offset(var, BN_EPS);
            let sd = s.tape.sqrt(ve);
            s.tape.div(xc, sd)
        }
        Mode::Eval => {
            let rm = store.buffer(&format!("{name}.running_mean"))?.clone();
            let rv = store.buffer(&format!("{name}.running_var"))?.mapv(|v| (v + BN_EPS).sqrt());
            let rm = s.tape.constant(rm);
            let sd = s.tape.constant(rv);
            let xc = s.tape.sub(x, rm);
            s.tape.div(xc, sd)
        }
    };
    let y = s.tape.mul(xhat, gamma);
    Ok(s.tape.add(y, beta))
}

impl Model {
    pub fn new(config: ModelConfig, input: InputLayout, variant: Variant, prior: PriorSpec) -> Result<Self> {
        let m = Self { config, input, variant, prior };
        let issues = m.issues();
        if let Some((k, msg)) = issues.first() {
            return Err(Error::InvalidArgument(format!("{k}: {msg}")));
        }
        Ok(m)
    }

    /// Constraint violations as `(field, message)`.
    pub fn issues(&self) -> Vec<(&'static str, String)> {
        let c = &self.config;
        let mut out = Vec::new();
        for (k, v) in [
            ("hidden_dim", c.hidden_dim),
            ("rep_dim", c.rep_dim),
            ("proj_hidden", c.proj_hidden),
            ("proj_dim", c.proj_dim),
        ] {
            if v == 0 {
                out.push((k, "must be positive".to_string()));
            }
        }
        if self.input.dim() == 0 {
            out.push(("input", "input dimension must be positive".to_string()));
        }
        if c.encoder == EncoderKind::Conv {
            match self.input {
                InputLayout::Image { height, width, .. } => {
                    let f = 1usize << c.conv_channels.len();
                    if c.conv_channels.is_empty() || c.conv_channels.contains(&0) {
                        out.push(("conv_channels", "need at least one positive channel count".into()));
                    } else if height % f != 0 || width % f != 0 || height < f || width < f {
                        out.push(("conv_channels", format!("{height}x{width} input does not halve {} times", c.conv_channels.len())));
                    }
                }
                InputLayout::Flat { .. } => out.push(("encoder", "conv encoder needs image input".into())),
            }
        }
        if let PriorSpec::Mog { components } = self.prior {
            if components == 0 {
                out.push(("components", "mixture needs at least one component".into()));
            }
        }
        out
    }

    /// Width of the stage whose posterior carries sigma (the projector
    /// output for deterministic models, where it is only nominal).
    pub fn stochastic_dim(&self) -> usize {
        match self.variant {
            Variant::Hprob => self.config.rep_dim,
            _ => self.config.proj_dim,
        }
    }

    fn conv_geoms(&self) -> Vec<(ConvGeom, PoolGeom)> {
        let InputLayout::Image { channels, height, width } = self.input else {
            return Vec::new();
        };
        let (mut c, mut h, mut w) = (channels, height, width);
        self.config
            .conv_channels
            .iter()
            .map(|&out| {
                let g = (
                    ConvGeom { in_ch: c, out_ch: out, height: h, width: w, kernel: 3 },
                    PoolGeom { ch: out, height: h, width: w },
                );
                c = out;
                h /= 2;
                w /= 2;
                g
            })
            .collect()
    }

    fn trunk_width(&self) -> usize {
        match self.config.encoder {
            EncoderKind::Mlp => self.config.hidden_dim,
            EncoderKind::Conv => {
                let (_, last) = *self.conv_geoms().last().expect("validated");
                last.ch * (last.height / 2) * (last.width / 2)
            }
        }
    }

    /// Fresh parameters with seeded fan-in uniform initialisation.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParamStore> {
        let c = &self.config;
        let mut store = ParamStore::new();
        match c.encoder {
            EncoderKind::Mlp => linear_params(&mut store, "enc.fc1", self.input.dim(), c.hidden_dim, rng)?,
            EncoderKind::Conv => {
                for (i, (g, _)) in self.conv_geoms().into_iter().enumerate() {
                    let fan_in = g.in_ch * g.kernel * g.kernel;
                    store.insert(format!("enc.conv{i}.weight"), uniform_fill((g.out_ch, fan_in), fan_in, 1.0, rng))?;
                    store.insert(format!("enc.conv{i}.bias"), uniform_fill((1, g.out_ch), fan_in, 1.0, rng))?;
                }
            }
        }
        let trunk = self.trunk_width();
        linear_params(&mut store, "enc.mu", trunk, c.rep_dim, rng)?;
        if self.variant == Variant::Hprob {
            sigma_head_params(&mut store, "enc.sigma", trunk, c.rep_dim, rng)?;
        }
        linear_params(&mut store, "proj.fc1", c.rep_dim, c.proj_hidden, rng)?;
        bn_params(&mut store, "proj.bn1", c.proj_hidden)?;
        linear_params(&mut store, "proj.fc2", c.proj_hidden, c.proj_hidden, rng)?;
        bn_params(&mut store, "proj.bn2", c.proj_hidden)?;
        linear_params(&mut store, "proj.mu", c.proj_hidden, c.proj_dim, rng)?;
        if self.variant == Variant::Zprob {
            sigma_head_params(&mut store, "proj.sigma", c.proj_hidden, c.proj_dim, rng)?;
        }
        if let PriorSpec::Mog { components } = self.prior {
            let d = self.stochastic_dim();
            let normal = Normal::new(0.0, MOG_MEAN_STD).expect("valid std");
            store.insert("prior.means", Array2::from_shape_simple_fn((components, d), || normal.sample(rng)))?;
            store.insert("prior.raw_sigmas", Array2::from_elem((components, d), softplus_inv(1.0 - SIGMA_MIN)))?;
        }
        Ok(store)
    }

    fn check_input(&self, s: &Session, x: Var) -> Result<()> {
        let (_, d) = s.tape.shape(x);
        if d != self.input.dim() {
            return Err(Error::Shape(format!("input has {d} columns, model expects {}", self.input.dim())));
        }
        Ok(())
    }

    /// Representation stage: a point `h`, or `(mu, sigma)` for H-prob.
    pub fn encoder_var(&self, s: &mut Session, store: &ParamStore, x: Var) -> Result<StageVars> {
        self.check_input(s, x)?;
        let trunk = match self.config.encoder {
            EncoderKind::Mlp => {
                let a = linear(s, store, "enc.fc1", x)?;
                s.tape.relu(a)
            }
            EncoderKind::Conv => {
                let mut a = x;
                for (i, (g, p)) in self.conv_geoms().into_iter().enumerate() {
                    let w = s.param(store, &format!("enc.conv{i}.weight"))?;
                    let b = s.param(store, &format!("enc.conv{i}.bias"))?;
                    let c = s.tape.conv2d(a, w, b, g);
                    let r = s.tape.relu(c);
                    a = s.tape.avg_pool2(r, p);
                }
                a
            }
        };
        let mu = linear(s, store, "enc.mu", trunk)?;
        if self.variant == Variant::Hprob {
            let sigma = sigma_head(s, store, "enc.sigma", trunk)?;
            Ok(StageVars::Dist(DistVars { mu, sigma }))
        } else {
            Ok(StageVars::Point(mu))
        }
    }

    /// Embedding stage: a point `z`, or `(mu, sigma)` for Z-prob.
    pub fn projector_var(&self, s: &mut Session, store: &ParamStore, h: Var) -> Result<StageVars> {
        let a = linear(s, store, "proj.fc1", h)?;
        let a = batch_norm(s, store, "proj.bn1", a)?;
        let a = s.tape.relu(a);
        let a = linear(s, store, "proj.fc2", a)?;
        let a = batch_norm(s, store, "proj.bn2", a)?;
        let a = s.tape.relu(a);
        let mu = linear(s, store, "proj.mu", a)?;
        if self.variant == Variant::Zprob {
            let sigma = sigma_head(s, store, "proj.sigma", a)?;
            Ok(StageVars::Dist(DistVars { mu, sigma }))
        } else {
            Ok(StageVars::Point(mu))
        }
    }

    /// Shape of one noise draw for a batch of `n` rows.
    pub fn noise_shape(&self, n: usize) -> Option<(usize, usize)> {
        self.variant.is_stochastic().then(|| (n, self.stochastic_dim()))
    }

    /// `k` standard-normal draws for a batch of `n` rows; none for the
    /// deterministic variant.
    pub fn draw_noise<R: Rng + ?Sized>(&self, n: usize, k: usize, rng: &mut R) -> Vec<Array2<f64>> {
        match self.noise_shape(n) {
            Some(shape) => (0..k).map(|_| standard_normal(shape, rng)).collect(),
            None => Vec::new(),
        }
    }

    fn check_noise(&self, n: usize, noise: &[Array2<f64>]) -> Result<()> {
        if let Some(shape) = self.noise_shape(n) {
            if noise.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "{} needs K >= 1 noise draws",
                    self.variant.name()
                )));
            }
            if let Some(e) = noise.iter().find(|e| e.dim() != shape) {
                return Err(Error::Shape(format!("noise {:?}, expected {shape:?}", e.dim())));
            }
        }
        Ok(())
    }

    /// Full pipeline for one view. Stochastic stages draw one sample per
    /// entry of `noise`; for H-prob the projector runs on every sample.
    pub fn pipeline_var(&self, s: &mut Session, store: &ParamStore, x: Var, noise: &[Array2<f64>]) -> Result<ForwardVars> {
        let n = s.tape.shape(x).0;
        self.check_noise(n, noise)?;
        let h = self.encoder_var(s, store, x)?;
        match (self.variant, h) {
            (Variant::Hprob, StageVars::Dist(h_dist)) => {
                let mut h_samples = Vec::with_capacity(noise.len());
                let mut z_samples = Vec::with_capacity(noise.len());
                for e in noise {
                    let hs = sample_reparam_var(&mut s.tape, h_dist, e);
                    let StageVars::Point(z) = self.projector_var(s, store, hs)? else {
                        return Err(Error::Variant("H-prob projector must be deterministic".into()));
                    };
                    h_samples.push(hs);
                    z_samples.push(z);
                }
                Ok(ForwardVars::Hprob { h_dist, h_samples, z_samples })
            }
            (Variant::Zprob, StageVars::Point(h)) => {
                let StageVars::Dist(z_dist) = self.projector_var(s, store, h)? else {
                    return Err(Error::Variant("Z-prob projector must be stochastic".into()));
                };
                let z_samples = noise.iter().map(|e| sample_reparam_var(&mut s.tape, z_dist, e)).collect();
                Ok(ForwardVars::Zprob { h, z_dist, z_samples })
            }
            (Variant::Deterministic, StageVars::Point(h)) => {
                let StageVars::Point(z) = self.projector_var(s, store, h)? else {
                    return Err(Error::Variant("deterministic projector must be a point".into()));
                };
                Ok(ForwardVars::Deterministic { h, z })
            }
            _ => Err(Error::Variant("encoder output does not match the variant".into())),
        }
    }

    pub fn prior_vars(&self, s: &mut Session, store: &ParamStore) -> Result<PriorVars> {
        match self.prior {
            PriorSpec::StandardNormal => Ok(PriorVars::StandardNormal),
            PriorSpec::Mog { .. } => {
                let means = s.param(store, "prior.means")?;
                let raw = s.param(store, "prior.raw_sigmas")?;
                let sp = s.tape.softplus(raw);
                let sigmas = s.tape.offset(sp, SIGMA_MIN);
                Ok(PriorVars::Mog { means, sigmas })
            }
        }
    }

    pub fn prior_value(&self, store: &ParamStore) -> Result<Prior> {
        match self.prior {
            PriorSpec::StandardNormal => Ok(Prior::StandardNormal),
            PriorSpec::Mog { .. } => {
                let means = store.value("prior.means")?.clone();
                let sigmas = store
                    .value("prior.raw_sigmas")?
                    .mapv(|r| r.max(0.0) + (-r.abs()).exp().ln_1p() + SIGMA_MIN);
                Ok(Prior::Mog(MoGPrior::new(means, sigmas)?))
            }
        }
    }

    fn stage_value(s: &Session, v: StageVars) -> Result<Stage> {
        Ok(match v {
            StageVars::Point(p) => Stage::Point(EmbeddingBatch::new(s.tape.value(p).clone())?),
            StageVars::Dist(d) => Stage::Dist(DiagGaussianBatch::new(
                s.tape.value(d.mu).clone(),
                s.tape.value(d.sigma).clone(),
            )?),
        })
    }

    pub fn encoder_forward(&self, store: &ParamStore, x: &Array2<f64>, mode: Mode) -> Result<Stage> {
        let mut s = Session::new(store, mode, false);
        let xv = s.tape.constant(x.clone());
        let h = self.encoder_var(&mut s, store, xv)?;
        Self::stage_value(&s, h)
    }

    pub fn projector_forward(&self, store: &ParamStore, h: &Array2<f64>, mode: Mode) -> Result<Stage> {
        let mut s = Session::new(store, mode, false);
        let hv = s.tape.constant(h.clone());
        let z = self.projector_var(&mut s, store, hv)?;
        Self::stage_value(&s, z)
    }

    /// Gradient-free pipeline forward. Batch-norm statistics observed in
    /// training mode are discarded.
    pub fn pipeline_forward(&self, store: &ParamStore, x: &Array2<f64>, noise: &[Array2<f64>], mode: Mode) -> Result<ForwardOutput> {
        let mut s = Session::new(store, mode, false);
        let xv = s.tape.constant(x.clone());
        let f = self.pipeline_var(&mut s, store, xv, noise)?;
        f.value(&s)
    }

    /// Eval-mode forward over `x` in chunks of `batch` rows, returning
    /// the point representation or the posterior at the encoder.
    pub fn encode_batched(&self, store: &ParamStore, x: &Array2<f64>, batch: usize) -> Result<Stage> {
        let batch = batch.max(1);
        let mut mus = Vec::new();
        let mut sigmas = Vec::new();
        for chunk in x.axis_chunks_iter(Axis(0), batch) {
            match self.encoder_forward(store, &chunk.to_owned(), Mode::Eval)? {
                Stage::Point(h) => mus.push(h.into_inner()),
                Stage::Dist(d) => {
                    mus.push(d.mu().clone());
                    sigmas.push(d.sigma().clone());
                }
            }
        }
        let cat = |v: &[Array2<f64>]| {
            let views: Vec<_> = v.iter().map(|a| a.view()).collect();
            ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
        };
        let mu = cat(&mus)?;
        if sigmas.is_empty() {
            Ok(Stage::Point(EmbeddingBatch::new(mu)?))
        } else {
            Ok(Stage::Dist(DiagGaussianBatch::new(mu, cat(&sigmas)?)?))
        }
    }
}

/// Value of one network stage.
#[derive(Clone, Debug, PartialEq)]
pub enum Stage {
    Point(EmbeddingBatch),
    Dist(DiagGaussianBatch),
}

impl Stage {
    /// The point output, or the posterior mean.
    pub fn mean(&self) -> &Array2<f64> {
        match self {
            Stage::Point(p) => p.as_array(),
            Stage::Dist(d) => d.mu(),
        }
    }

    pub fn sigma(&self) -> Option<&Array2<f64>> {
        match self {
            Stage::Point(_) => None,
            Stage::Dist(d) => Some(d.sigma()),
        }
    }
}
