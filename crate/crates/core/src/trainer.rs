//! The seeded training loop and its metrics history.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use serde_json::json;

use crate::config::RunConfig;
use crate::data::{make_views, shuffled_indices, Dataset};
use crate::error::{Error, Result};
use crate::models::{Model, BN_MOMENTUM};
use crate::objectives::{mc_objective_var, LossBreakdown};
use crate::optim::cosine_schedule;
use crate::params::{Checkpoint, Mode, OptimState, ParamStore, Session};
use crate::rng::{stream, tag};

pub const METRICS_HEADER: [&str; 11] = [
    "step",
    "epoch",
    "lr",
    "loss_total",
    "loss_inv",
    "loss_reg",
    "loss_reg_var",
    "loss_reg_cov",
    "loss_div",
    "mean_sigma",
    "std_sigma",
];

/// One optimizer step of history.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    /// Mean of every posterior sigma entry over both views.
    pub mean_sigma: Option<f64>,
    /// Population std of the same entries.
    pub std_sigma: Option<f64>,
}

impl MetricsRow {
    fn fields(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        vec![
            self.step.to_string(),
            self.epoch.to_string(),
            self.lr.to_string(),
            self.loss.total.to_string(),
            self.loss.inv.to_string(),
            self.loss.reg.to_string(),
            opt(self.loss.reg_var),
            opt(self.loss.reg_cov),
            self.loss.div.to_string(),
            opt(self.mean_sigma),
            opt(self.std_sigma),
        ]
    }
}

/// Streams metrics rows to CSV, flushing after every row so a crashed run
/// keeps its history.
pub struct MetricsWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl MetricsWriter<File> {
    pub fn create(path: &Path) -> Result<Self> {
        Self::new(File::create(path)?)
    }
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(w: W) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(w);
        inner.write_record(METRICS_HEADER)?;
        inner.flush()?;
        Ok(Self { inner })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        self.inner.write_record(row.fields())?;
        self.inner.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> Result<W> {
        self.inner
            .into_inner()
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> Result<String> {
    let mut w = MetricsWriter::new(Vec::new())?;
    for r in rows {
        w.write(r)?;
    }
    Ok(String::from_utf8(w.into_inner()?).expect("csv is utf-8"))
}

/// Step counts derived from the schedule section and the training size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepPlan {
    pub steps_per_epoch: usize,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

impl StepPlan {
    pub fn new(config: &RunConfig, train_len: usize) -> Result<Self> {
        let s = &config.schedule;
        if train_len < s.batch_size {
            return Err(Error::config(
                "schedule.batch_size",
                format!("{} exceeds the {train_len} training items", s.batch_size),
            ));
        }
        let steps_per_epoch = s.steps_per_epoch.unwrap_or(train_len / s.batch_size);
        Ok(Self {
            steps_per_epoch,
            total_steps: s.epochs * steps_per_epoch,
            warmup_steps: s.warmup_epochs * steps_per_epoch,
        })
    }
}

pub fn build_model(config: &RunConfig) -> Result<Model> {
    Model::new(config.model.clone(), config.input_layout(), config.variant, config.prior)
}

/// Everything a finished run produces.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub store: ParamStore,
    pub optim: OptimState,
    pub history: Vec<MetricsRow>,
}

impl TrainOutcome {
    pub fn checkpoint(&self, config: &RunConfig) -> Checkpoint {
        Checkpoint {
            store: self.store.clone(),
            optim: Some(self.optim.clone()),
            meta: json!({ "config": config }),
        }
    }
}

/// Rebuilds the config and model a checkpoint was trained with.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<(RunConfig, Model)> {
    let cfg = ckpt
        .meta
        .get("config")
        .cloned()
        .ok_or_else(|| Error::Checkpoint("metadata has no config".into()))?;
    let config = RunConfig::from_value(cfg)?;
    let model = build_model(&config)?;
    for name in model.init_params(&mut stream(0, &[]))?.names() {
        if !ckpt.store.contains(name) {
            return Err(Error::Checkpoint(format!("missing parameter {name}")));
        }
    }
    Ok((config, model))
}

fn sigma_stats(values: &[&Array2<f64>]) -> (f64, f64) {
    let n: usize = values.iter().map(|a| a.len()).sum();
    let mean = values.iter().map(|a| a.sum()).sum::<f64>() / n as f64;
    let var = values
        .iter()
        .map(|a| a.iter().map(|s| (s - mean).powi(2)).sum::<f64>())
        .sum::<f64>()
        / n as f64;
    (mean, var.sqrt())
}

pub fn train(config: &RunConfig, data: &Dataset) -> Result<TrainOutcome> {
    train_with(config, data, |_, _, _| Ok(()))
}

/// Runs the full schedule, calling `on_step` with the row and the updated
/// parameters after every optimizer step. A non-finite loss term aborts
/// the run before the update is applied.
pub fn train_with(
    config: &RunConfig,
    data: &Dataset,
    mut on_step: impl FnMut(&MetricsRow, &Model, &ParamStore) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.layout != config.input_layout() {
        return Err(Error::Shape(format!(
            "dataset layout {:?} does not match the config's {:?}",
            data.layout,
            config.input_layout()
        )));
    }
    let model = build_model(config)?;
    let plan = StepPlan::new(config, data.len())?;
    let coeffs = config.loss.coefficients();
    let adamw = config.optimizer.adamw();
    let k = if config.variant.is_stochastic() { config.loss.mc_samples } else { 1 };
    let bs = config.schedule.batch_size;

    let mut store = model.init_params(&mut stream(config.seed, &[tag::INIT]))?;
    let mut optim = OptimState::default();
    let mut history = Vec::with_capacity(plan.total_steps);
    let mut step = 0usize;
    for epoch in 0..config.schedule.epochs {
        let order = shuffled_indices(data.len(), &mut stream(config.seed, &[tag::SHUFFLE, epoch as u64]));
        for b in 0..plan.steps_per_epoch {
            let items: Vec<usize> = (0..bs).map(|i| order[(b * bs + i) % order.len()]).collect();
            let lr = cosine_schedule(step, plan.total_steps, plan.warmup_steps, config.optimizer.lr_peak, config.optimizer.lr_final)?;
            let views = make_views(data, &items, epoch, config.seed, &config.augment);
            let mut noise_rng = stream(config.seed, &[tag::NOISE, step as u64]);
            let noise_a = model.draw_noise(bs, k, &mut noise_rng);
            let noise_b = model.draw_noise(bs, k, &mut noise_rng);

            let mut s = Session::new(&store, Mode::Train, true);
            let xa = s.tape.constant(views.v);
            let xb = s.tape.constant(views.v_prime);
            let fa = model.pipeline_var(&mut s, &store, xa, &noise_a)?;
            let fb = model.pipeline_var(&mut s, &store, xb, &noise_b)?;
            let prior = model.prior_vars(&mut s, &store)?;
            let lv = mc_objective_var(&mut s.tape, config.method, &coeffs, prior, &fa.view_embedding(), &fb.view_embedding())?;
            let loss = lv.breakdown(&s.tape);
            if let Some(term) = loss.first_non_finite() {
                return Err(Error::NonFinite { term: term.to_string(), step });
            }
            let (mean_sigma, std_sigma) = match (fa.stochastic_dist(), fb.stochastic_dist()) {
                (Some(da), Some(db)) => {
                    let (m, sd) = sigma_stats(&[s.tape.value(da.sigma), s.tape.value(db.sigma)]);
                    (Some(m), Some(sd))
                }
                _ => (None, None),
            };

            s.backward(lv.total, &mut store)?;
            adamw.step(&mut store, &mut optim, lr)?;
            s.commit_batch_norm(&mut store, BN_MOMENTUM)?;

            let row = MetricsRow { step, epoch, lr, loss, mean_sigma, std_sigma };
            on_step(&row, &model, &store)?;
            history.push(row);
            step += 1;
        }
    }
    Ok(TrainOutcome { model, store, optim, history })
}

/// Eval-mode loss-space embedding (the posterior mean for Z-prob; the
/// projection of the encoder mean for H-prob).
pub fn embed_loss_space(model: &Model, store: &ParamStore, x: &Array2<f64>) -> Result<Array2<f64>> {
    let h = model.encoder_forward(store, x, Mode::Eval)?;
    let z = model.projector_forward(store, h.mean(), Mode::Eval)?;
    Ok(z.mean().clone())
}

/// Per-dimension population std of the rows of `z`.
pub fn per_dim_std(z: &Array2<f64>) -> Array1<f64> {
    z.std_axis(Axis(0), 0.0)
}
