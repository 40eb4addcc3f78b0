//! Representation extraction, linear probes and fine-tuning, and the
//! sigma analysis split by probe correctness.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::batchstats::EmbeddingBatch;
use crate::data::{shuffled_indices, Dataset};
use crate::error::{Error, Result};
use crate::gaussdist::standard_normal;
use crate::models::{Model, Stage, StageVars, Variant, BN_MOMENTUM};
use crate::optim::{cosine_schedule, step_decay, AdamW};
use crate::params::{Mode, OptimState, ParamStore, Session};
use crate::rng::{stream, tag};

const EVAL_BATCH: usize = 512;

/// How the H-prob representation is read out.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RepresentationMode {
    /// The analytic posterior mean.
    #[default]
    Mean,
    /// Average of `samples` reparameterized draws.
    Average { samples: usize, seed: u64 },
}

/// Eval-mode representation `h` for every row of `x`.
pub fn extract_representation(
    model: &Model,
    store: &ParamStore,
    x: &Array2<f64>,
    expected: Variant,
    mode: RepresentationMode,
) -> Result<EmbeddingBatch> {
    if model.variant != expected {
        return Err(Error::Variant(format!(
            "checkpoint is {}, expected {}",
            model.variant.name(),
            expected.name()
        )));
    }
    match (model.encode_batched(store, x, EVAL_BATCH)?, mode) {
        (Stage::Point(h), _) => Ok(h),
        (Stage::Dist(d), RepresentationMode::Mean) => EmbeddingBatch::new(d.mu().clone()),
        (Stage::Dist(d), RepresentationMode::Average { samples, seed }) => {
            if samples == 0 {
                return Err(Error::InvalidArgument("averaging needs at least one sample".into()));
            }
            let mut rng = stream(seed, &[tag::EVAL]);
            let mut acc = Array2::zeros(d.mu().dim());
            for _ in 0..samples {
                let e = standard_normal(d.mu().dim(), &mut rng);
                acc += &(d.mu() + &(d.sigma() * &e));
            }
            EmbeddingBatch::new(acc / samples as f64)
        }
    }
}

/// Scales every row to unit Euclidean norm.
pub fn l2_normalize(x: &EmbeddingBatch) -> Result<EmbeddingBatch> {
    let a = x.as_array();
    let mut out = a.clone();
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let norm = row.dot(&row).sqrt();
        if norm == 0.0 {
            return Err(Error::Degenerate(format!("row {i} has zero norm")));
        }
        row /= norm;
    }
    EmbeddingBatch::new(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Fractions of training at which the learning rate drops tenfold.
    pub milestones: Vec<f64>,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 256,
            lr: 1e-2,
            weight_decay: 1e-4,
            milestones: vec![0.3, 0.6, 0.9],
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_head: f64,
    /// Encoder learning rate; the head runs ten times faster by default.
    pub lr_backbone: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 256,
            lr_head: 1e-3,
            lr_backbone: 1e-4,
            weight_decay: 1e-5,
            seed: 0,
        }
    }
}

/// Softmax classifier on L2-normalized features: `logits = x·W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    pub weight: Array2<f64>,
    pub bias: Array2<f64>,
}

impl LinearProbe {
    pub fn classes(&self) -> usize {
        self.weight.ncols()
    }

    /// Logits for raw (unnormalized) features.
    pub fn logits(&self, features: &EmbeddingBatch) -> Result<Array2<f64>> {
        if features.dims() != self.weight.nrows() {
            return Err(Error::Shape(format!(
                "features have {} dims, probe expects {}",
                features.dims(),
                self.weight.nrows()
            )));
        }
        let x = l2_normalize(features)?;
        Ok(x.as_array().dot(&self.weight) + &self.bias)
    }

    pub fn predict(&self, features: &EmbeddingBatch) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(features)?))
    }
}

pub fn argmax_rows(a: &Array2<f64>) -> Vec<usize> {
    a.axis_iter(Axis(0))
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub accuracy: f64,
    /// Accuracy per class; `None` for classes absent from the test split.
    pub per_class: Vec<Option<f64>>,
    pub class_counts: Vec<usize>,
    pub probe: LinearProbe,
    /// Mean training loss per epoch.
    pub curve: Vec<f64>,
    pub predictions: Vec<usize>,
}

/// Top-1 and per-class accuracy of `predicted` against `labels`.
pub fn accuracy(predicted: &[usize], labels: &[usize], classes: usize) -> (f64, Vec<Option<f64>>, Vec<usize>) {
    let mut hits = vec![0usize; classes];
    let mut counts = vec![0usize; classes];
    for (&p, &y) in predicted.iter().zip(labels) {
        counts[y] += 1;
        hits[y] += usize::from(p == y);
    }
    let total: usize = hits.iter().sum();
    let per_class = hits
        .iter()
        .zip(&counts)
        .map(|(&h, &c)| (c > 0).then(|| h as f64 / c as f64))
        .collect();
    (total as f64 / labels.len().max(1) as f64, per_class, counts)
}

fn check_labels(labels: &[usize], classes: usize, rows: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::Shape(format!("{} labels for {rows} rows", labels.len())));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::InvalidArgument(format!("label {y} outside {classes} classes")));
    }
    let mut seen = vec![false; classes];
    labels.iter().for_each(|&y| seen[y] = true);
    if seen.iter().filter(|&&s| s).count() < 2 {
        return Err(Error::InvalidArgument("probe training needs at least two classes".into()));
    }
    Ok(())
}

fn one_hot(labels: &[usize], classes: usize) -> Array2<f64> {
    let mut y = Array2::zeros((labels.len(), classes));
    for (i, &c) in labels.iter().enumerate() {
        y[[i, c]] = 1.0;
    }
    y
}

fn probe_params(store: &mut ParamStore, dims: usize, classes: usize) -> Result<()> {
    store.insert("probe.weight", Array2::zeros((dims, classes)))?;
    store.insert("probe.bias", Array2::zeros((1, classes)))
}

/// Mean softmax cross-entropy of `logits` against one-hot `y`.
fn cross_entropy(s: &mut Session, logits: Var, y: Array2<f64>) -> Var {
    let n = y.nrows() as f64;
    let t = &mut s.tape;
    let ls = t.log_softmax(logits);
    let y = t.constant(y);
    let picked = t.mul(ls, y);
    let total = t.sum(picked);
    t.scale(total, -1.0 / n)
}

fn head(s: &mut Session, store: &ParamStore, x: Var) -> Result<Var> {
    let w = s.param(store, "probe.weight")?;
    let b = s.param(store, "probe.bias")?;
    let xw = s.tape.matmul(x, w);
    Ok(s.tape.add(xw, b))
}

fn batches(n: usize, batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let order = shuffled_indices(n, &mut stream(seed, &[tag::PROBE, epoch as u64]));
    order.chunks(batch.max(1)).map(|c| c.to_vec()).collect()
}

/// Trains a linear probe on frozen features and scores it on the test
/// features.
pub fn train_linear_probe(
    train: &EmbeddingBatch,
    train_labels: &[usize],
    test: &EmbeddingBatch,
    test_labels: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    check_labels(train_labels, classes, train.rows())?;
    if test_labels.len() != test.rows() {
        return Err(Error::Shape(format!("{} labels for {} test rows", test_labels.len(), test.rows())));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("probe needs positive epochs and batch size".into()));
    }
    let x = l2_normalize(train)?.into_inner();
    let mut store = ParamStore::new();
    probe_params(&mut store, train.dims(), classes)?;
    let opt = AdamW { weight_decay: cfg.weight_decay, ..Default::default() };
    let mut state = OptimState::default();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = step_decay(epoch, cfg.epochs, cfg.lr, &cfg.milestones);
        let mut sum = 0.0;
        for idx in batches(x.nrows(), cfg.batch_size, cfg.seed, epoch) {
            let mut s = Session::new(&store, Mode::Train, true);
            let xb = s.tape.constant(x.select(Axis(0), &idx));
            let logits = head(&mut s, &store, xb)?;
            let labels: Vec<usize> = idx.iter().map(|&i| train_labels[i]).collect();
            let loss = cross_entropy(&mut s, logits, one_hot(&labels, classes));
            sum += s.tape.scalar_value(loss) * idx.len() as f64;
            s.backward(loss, &mut store)?;
            opt.step(&mut store, &mut state, lr)?;
        }
        curve.push(sum / x.nrows() as f64);
    }
    let probe = LinearProbe {
        weight: store.value("probe.weight")?.clone(),
        bias: store.value("probe.bias")?.clone(),
    };
    let predictions = probe.predict(test)?;
    let (accuracy, per_class, class_counts) = accuracy(&predictions, test_labels, classes);
    Ok(ProbeResult { accuracy, per_class, class_counts, probe, curve, predictions })
}

/// Jointly trains the encoder and a linear head on labelled inputs. The
/// H-prob encoder is fine-tuned through its mean path.
pub fn finetune(model: &Model, store: &ParamStore, train: &Dataset, test: &Dataset, cfg: &FinetuneConfig) -> Result<(ProbeResult, ParamStore)> {
    let classes = train.classes;
    check_labels(&train.labels, classes, train.len())?;
    if cfg.epochs == 0 || cfg.batch_size < 2 {
        return Err(Error::InvalidArgument("fine-tuning needs positive epochs and batch size >= 2".into()));
    }
    if !(cfg.lr_head > 0.0 && cfg.lr_backbone >= 0.0) {
        return Err(Error::InvalidArgument("learning rates must be positive".into()));
    }
    let dims = model.config.rep_dim;
    let mut store = store.clone();
    probe_params(&mut store, dims, classes)?;
    let opt = AdamW { weight_decay: cfg.weight_decay, ..Default::default() };
    let ratio = cfg.lr_backbone / cfg.lr_head;
    let mut state = OptimState::default();
    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * per_epoch;
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut sum = 0.0;
        for idx in batches(train.len(), cfg.batch_size, cfg.seed, epoch) {
            let lr = cosine_schedule(step, total, 0, cfg.lr_head, 0.1 * cfg.lr_head)?;
            let mut s = Session::new(&store, Mode::Train, true);
            let xb = s.tape.constant(train.x.select(Axis(0), &idx));
            let h = match model.encoder_var(&mut s, &store, xb)? {
                StageVars::Point(h) => h,
                StageVars::Dist(d) => d.mu,
            };
            let sq = s.tape.square(h);
            let ss = s.tape.sum_cols(sq);
            let norm = s.tape.sqrt(ss);
            let hn = s.tape.div(h, norm);
            let logits = head(&mut s, &store, hn)?;
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let loss = cross_entropy(&mut s, logits, one_hot(&labels, classes));
            let value = s.tape.scalar_value(loss);
            if !value.is_finite() {
                return Err(Error::NonFinite { term: "cross_entropy".into(), step });
            }
            sum += value * idx.len() as f64;
            s.backward(loss, &mut store)?;
            opt.step_scaled(&mut store, &mut state, lr, |name| {
                if name.starts_with("probe.") {
                    Some(1.0)
                } else if name.starts_with("enc.") {
                    Some(ratio)
                } else {
                    None
                }
            })?;
            s.commit_batch_norm(&mut store, BN_MOMENTUM)?;
            step += 1;
        }
        curve.push(sum / train.len() as f64);
    }
    let probe = LinearProbe {
        weight: store.value("probe.weight")?.clone(),
        bias: store.value("probe.bias")?.clone(),
    };
    let feats = extract_representation(model, &store, &test.x, model.variant, RepresentationMode::Mean)?;
    let predictions = probe.predict(&feats)?;
    let (accuracy, per_class, class_counts) = accuracy(&predictions, &test.labels, classes);
    Ok((ProbeResult { accuracy, per_class, class_counts, probe, curve, predictions }, store))
}

/// Where a probe gets its inputs.
pub enum ProbeSource<'a> {
    Features { train: &'a EmbeddingBatch, test: &'a EmbeddingBatch },
    Model { model: &'a Model, store: &'a ParamStore },
}

/// Frozen probe (`freeze = true`) or fine-tuning (`freeze = false`, which
/// needs the model).
pub fn train_probe(
    source: ProbeSource<'_>,
    train: &Dataset,
    test: &Dataset,
    probe_cfg: &ProbeConfig,
    finetune_cfg: &FinetuneConfig,
    freeze: bool,
) -> Result<(ProbeResult, Option<ParamStore>)> {
    match (source, freeze) {
        (ProbeSource::Features { train: ft, test: fs }, true) => {
            Ok((train_linear_probe(ft, &train.labels, fs, &test.labels, train.classes, probe_cfg)?, None))
        }
        (ProbeSource::Features { .. }, false) => Err(Error::InvalidArgument("fine-tuning needs the model, not only features".into())),
        (ProbeSource::Model { model, store }, true) => {
            let ft = extract_representation(model, store, &train.x, model.variant, RepresentationMode::Mean)?;
            let fs = extract_representation(model, store, &test.x, model.variant, RepresentationMode::Mean)?;
            Ok((train_linear_probe(&ft, &train.labels, &fs, &test.labels, train.classes, probe_cfg)?, None))
        }
        (ProbeSource::Model { model, store }, false) => {
            let (r, s) = finetune(model, store, train, test, finetune_cfg)?;
            Ok((r, Some(s)))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SigmaRow {
    pub sample: usize,
    pub label: usize,
    pub predicted: usize,
    pub correct: bool,
    pub mean_sigma: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SigmaByCorrectness {
    /// `None` when no prediction was correct.
    pub mean_sigma_correct: Option<f64>,
    /// `None` when every prediction was correct.
    pub mean_sigma_incorrect: Option<f64>,
    pub rows: Vec<SigmaRow>,
}

/// Splits per-sample mean-over-dims sigma by prediction correctness.
pub fn partition_sigma(sigma: &Array2<f64>, predicted: &[usize], labels: &[usize]) -> Result<SigmaByCorrectness> {
    if predicted.len() != sigma.nrows() || labels.len() != sigma.nrows() {
        return Err(Error::Shape(format!(
            "{} sigma rows, {} predictions, {} labels",
            sigma.nrows(),
            predicted.len(),
            labels.len()
        )));
    }
    let means: Array1<f64> = sigma.mean_axis(Axis(1)).ok_or_else(|| Error::Shape("sigma has no columns".into()))?;
    let rows: Vec<SigmaRow> = (0..sigma.nrows())
        .map(|i| SigmaRow {
            sample: i,
            label: labels[i],
            predicted: predicted[i],
            correct: predicted[i] == labels[i],
            mean_sigma: means[i],
        })
        .collect();
    let avg = |want: bool| {
        let v: Vec<f64> = rows.iter().filter(|r| r.correct == want).map(|r| r.mean_sigma).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    Ok(SigmaByCorrectness {
        mean_sigma_correct: avg(true),
        mean_sigma_incorrect: avg(false),
        rows,
    })
}

/// Sigma at the variant's stochastic stage for every row of `x`, in
/// evaluation mode.
pub fn stochastic_sigma(model: &Model, store: &ParamStore, x: &Array2<f64>) -> Result<Array2<f64>> {
    match model.variant {
        Variant::Deterministic => Err(Error::Variant("deterministic checkpoint has no sigma".into())),
        Variant::Hprob => match model.encode_batched(store, x, EVAL_BATCH)? {
            Stage::Dist(d) => Ok(d.sigma().clone()),
            Stage::Point(_) => Err(Error::Variant("H-prob encoder returned a point".into())),
        },
        Variant::Zprob => {
            let h = model.encode_batched(store, x, EVAL_BATCH)?;
            let mut parts = Vec::new();
            for chunk in h.mean().axis_chunks_iter(Axis(0), EVAL_BATCH) {
                match model.projector_forward(store, &chunk.to_owned(), Mode::Eval)? {
                    Stage::Dist(d) => parts.push(d.sigma().clone()),
                    Stage::Point(_) => return Err(Error::Variant("Z-prob projector returned a point".into())),
                }
            }
            let views: Vec<_> = parts.iter().map(|a| a.view()).collect();
            ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
        }
    }
}

/// Probe predictions on `data` against the sigma of each sample.
pub fn sigma_by_correctness(model: &Model, store: &ParamStore, probe: &LinearProbe, data: &Dataset) -> Result<SigmaByCorrectness> {
    let sigma = stochastic_sigma(model, store, &data.x)?;
    let feats = extract_representation(model, store, &data.x, model.variant, RepresentationMode::Mean)?;
    let predicted = probe.predict(&feats)?;
    partition_sigma(&sigma, &predicted, &data.labels)
}
