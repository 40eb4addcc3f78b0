//! Run configuration: one JSON document fully determines a run.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{AugmentSpec, DataSpec};
use crate::error::{ConfigIssue, Error, Result};
use crate::models::{EncoderKind, InputLayout, ModelConfig, PriorSpec, Variant};
use crate::objectives::{LossCoefficients, Method};
use crate::optim::AdamW;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub lambda_bt: f64,
    pub alpha: f64,
    pub tau: f64,
    pub nu: f64,
    pub gamma: f64,
    pub beta: f64,
    pub eps: f64,
    /// Monte Carlo samples per view (K); ignored by the deterministic variant.
    pub mc_samples: usize,
}

impl Default for LossSection {
    fn default() -> Self {
        let c = LossCoefficients::default();
        Self {
            lambda_bt: c.lambda_bt,
            alpha: c.alpha,
            tau: c.tau,
            nu: c.nu,
            gamma: c.gamma,
            beta: c.beta,
            eps: c.eps,
            mc_samples: 12,
        }
    }
}

impl LossSection {
    pub fn coefficients(&self) -> LossCoefficients {
        LossCoefficients {
            lambda_bt: self.lambda_bt,
            alpha: self.alpha,
            tau: self.tau,
            nu: self.nu,
            gamma: self.gamma,
            beta: self.beta,
            eps: self.eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSection {
    pub lr_peak: f64,
    pub lr_final: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let a = AdamW::default();
        Self {
            lr_peak: 1e-3,
            lr_final: 5e-4,
            weight_decay: a.weight_decay,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
        }
    }
}

impl OptimizerSection {
    pub fn adamw(&self) -> AdamW {
        AdamW {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    /// Overrides the number of batches per epoch (default: full batches
    /// that fit in the training split).
    pub steps_per_epoch: Option<usize>,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            epochs: 20,
            warmup_epochs: 2,
            batch_size: 128,
            steps_per_epoch: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub method: Method,
    pub variant: Variant,
    #[serde(default)]
    pub prior: PriorSpec,
    #[serde(default)]
    pub loss: LossSection,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub data: DataSpec,
    #[serde(default)]
    pub augment: AugmentSpec,
    pub seed: u64,
}

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

fn issue(key: impl Into<String>, message: impl Into<String>) -> ConfigIssue {
    ConfigIssue {
        key: key.into(),
        message: message.into(),
    }
}

/// Short names accepted by [`RunConfig::with_override`].
const ALIASES: &[(&str, &str)] = &[
    ("beta", "loss.beta"),
    ("k", "loss.mc_samples"),
    ("K", "loss.mc_samples"),
    ("mc_samples", "loss.mc_samples"),
    ("lambda", "loss.lambda_bt"),
    ("lambda_bt", "loss.lambda_bt"),
    ("alpha", "loss.alpha"),
    ("tau", "loss.tau"),
    ("nu", "loss.nu"),
    ("epochs", "schedule.epochs"),
    ("batch_size", "schedule.batch_size"),
];

impl RunConfig {
    /// Minimal configuration with every default filled in.
    pub fn new(method: Method, variant: Variant, seed: u64) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            method,
            variant,
            prior: PriorSpec::default(),
            loss: LossSection::default(),
            model: ModelConfig::default(),
            optimizer: OptimizerSection::default(),
            schedule: ScheduleSection::default(),
            data: DataSpec::default(),
            augment: AugmentSpec::default(),
            seed,
        }
    }

    /// Parses and validates a configuration document.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)
            .map_err(|e| Error::config("<document>", e.to_string()))?;
        Self::from_value(value)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn from_value(value: Value) -> Result<Self> {
        let Value::Object(map) = &value else {
            return Err(Error::config("<document>", "expected a JSON object"));
        };
        if let Some(v) = map.get("schema_version") {
            match v.as_u64() {
                Some(n) if n as u32 as u64 == n && n as u32 <= SCHEMA_VERSION && n >= 1 => {}
                Some(n) if n > SCHEMA_VERSION as u64 => {
                    return Err(Error::Config(vec![issue(
                        "schema_version",
                        format!("version {n} is newer than the supported version {SCHEMA_VERSION}"),
                    )]))
                }
                _ => return Err(Error::Config(vec![issue("schema_version", format!("invalid version {v}"))])),
            }
        }
        let mut missing: Vec<ConfigIssue> = ["method", "variant", "seed"]
            .iter()
            .filter(|k| !map.contains_key(**k))
            .map(|k| issue(*k, "required"))
            .collect();
        let cfg: RunConfig = match serde_json::from_value(value) {
            Ok(c) => c,
            Err(e) => {
                if missing.is_empty() {
                    missing.push(issue("<document>", e.to_string()));
                }
                return Err(Error::Config(missing));
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_pretty(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// The input layout implied by the data section.
    pub fn input_layout(&self) -> InputLayout {
        match &self.data {
            DataSpec::Synthetic(s) => InputLayout::Flat { dim: s.observed_dim },
            DataSpec::Cifar(_) => InputLayout::Image { channels: 3, height: 32, width: 32 },
        }
    }

    /// Every constraint violation, keyed by dotted path.
    pub fn issues(&self) -> Vec<ConfigIssue> {
        let mut out = Vec::new();
        let mut section = |prefix: &str, list: Vec<(&'static str, String)>| {
            for (k, m) in list {
                out.push(issue(format!("{prefix}.{k}"), m));
            }
        };
        section("loss", self.loss.coefficients().issues());
        let mut extra = Vec::new();
        if self.loss.mc_samples == 0 {
            extra.push(issue("loss.mc_samples", "K must be at least 1"));
        }
        let model = crate::models::Model {
            config: self.model.clone(),
            input: self.input_layout(),
            variant: self.variant,
            prior: self.prior,
        };
        let mut model_issues = Vec::new();
        for (k, m) in model.issues() {
            let key = match k {
                "components" => "prior.components".to_string(),
                "input" => "data".to_string(),
                _ => format!("model.{k}"),
            };
            model_issues.push(issue(key, m));
        }
        let o = &self.optimizer;
        let mut opt = Vec::new();
        if !(o.lr_peak > 0.0 && o.lr_peak.is_finite()) {
            opt.push(("lr_peak", format!("must be > 0, got {}", o.lr_peak)));
        }
        if !(o.lr_final >= 0.0 && o.lr_final.is_finite()) {
            opt.push(("lr_final", format!("must be >= 0, got {}", o.lr_final)));
        }
        opt.extend(o.adamw().issues());
        let s = &self.schedule;
        let mut sched = Vec::new();
        if s.epochs == 0 {
            sched.push(("epochs", "must be positive".to_string()));
        }
        if s.warmup_epochs >= s.epochs.max(1) {
            sched.push(("warmup_epochs", format!("must be shorter than epochs ({})", s.epochs)));
        }
        if s.batch_size < 2 {
            sched.push(("batch_size", "batch statistics need at least two rows".to_string()));
        }
        if s.steps_per_epoch == Some(0) {
            sched.push(("steps_per_epoch", "must be positive".to_string()));
        }
        let data = match &self.data {
            DataSpec::Synthetic(sp) => {
                let mut d = sp.issues();
                if sp.train_samples < s.batch_size {
                    d.push(("train_samples", format!("smaller than batch_size {}", s.batch_size)));
                }
                d
            }
            DataSpec::Cifar(c) => {
                let mut d = Vec::new();
                if c.train_files.is_empty() {
                    d.push(("train_files", "at least one file required".to_string()));
                }
                if c.test_files.is_empty() {
                    d.push(("test_files", "at least one file required".to_string()));
                }
                if self.model.encoder != EncoderKind::Conv {
                    d.push(("kind", "image data needs model.encoder = \"conv\"".to_string()));
                }
                d
            }
        };
        let aug = self.augment.issues();

        let mut all = Vec::new();
        all.extend(out);
        all.extend(extra);
        all.extend(model_issues);
        all.extend(opt.into_iter().map(|(k, m)| issue(format!("optimizer.{k}"), m)));
        all.extend(sched.into_iter().map(|(k, m)| issue(format!("schedule.{k}"), m)));
        all.extend(data.into_iter().map(|(k, m)| issue(format!("data.{k}"), m)));
        all.extend(aug.into_iter().map(|(k, m)| issue(format!("augment.{k}"), m)));
        all
    }

    pub fn validate(&self) -> Result<()> {
        let issues = self.issues();
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(issues))
        }
    }

    /// Resolves an alias such as `beta` or `K` to its dotted path.
    pub fn resolve_key(key: &str) -> String {
        ALIASES
            .iter()
            .find(|(a, _)| *a == key)
            .map(|(_, p)| p.to_string())
            .unwrap_or_else(|| key.to_string())
    }

    /// Copy with one dotted-path value replaced. `raw` is parsed as JSON
    /// when possible and taken as a string otherwise. `prior` accepts the
    /// shorthands `standard_normal`, `mog` and `mogN`.
    pub fn with_override(&self, key: &str, raw: &str) -> Result<Self> {
        let path = Self::resolve_key(key);
        let value = if path == "prior" {
            prior_shorthand(raw)?
        } else {
            serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
        };
        let mut doc = serde_json::to_value(self)?;
        let mut cur = &mut doc;
        let parts: Vec<&str> = path.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let Value::Object(map) = cur else {
                return Err(Error::config(path.clone(), "not an object path"));
            };
            if i + 1 == parts.len() {
                if !map.contains_key(*part) && !is_optional_leaf(&path) {
                    return Err(Error::config(path.clone(), "unknown key"));
                }
                map.insert(part.to_string(), value.clone());
                break;
            }
            cur = map
                .get_mut(*part)
                .ok_or_else(|| Error::config(path.clone(), "unknown key"))?;
        }
        Self::from_value(doc)
    }
}

fn is_optional_leaf(path: &str) -> bool {
    matches!(path, "schedule.steps_per_epoch" | "data.limit" | "prior.components")
}

fn prior_shorthand(raw: &str) -> Result<Value> {
    if let Ok(v @ Value::Object(_)) = serde_json::from_str::<Value>(raw) {
        return Ok(v);
    }
    let raw = raw.trim();
    if raw == "standard_normal" || raw == "normal" {
        return Ok(serde_json::json!({"kind": "standard_normal"}));
    }
    if let Some(rest) = raw.strip_prefix("mog") {
        let components = if rest.is_empty() {
            8
        } else {
            rest.parse::<usize>()
                .map_err(|_| Error::config("prior", format!("cannot parse {raw}")))?
        };
        return Ok(serde_json::json!({"kind": "mog", "components": components}));
    }
    Err(Error::config("prior", format!("unknown prior {raw}")))
}
