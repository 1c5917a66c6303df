//! Training loop with early stopping, ablations and resumable state.

use std::io::Write;
use std::path::Path;

use learnds_autodiff::{AdamConfig, AdamState, Checkpoint, ParamStore, Tape};
use serde::{Deserialize, Deserializer, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{sample_nn_instance_with, DistributionSpec, NnInstance};
use crate::error::{config_err, Error, Result};
use crate::eval::{eval_instances, evaluate_model, EvalReport};
use crate::nn_model::{LossKind, ModelConfig, NnModel};
use crate::rng::{derive_seed, seeded, tag};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    None,
    /// Data processor left at its random initialization.
    Frozen,
    /// Sort removed; encoder outputs are the structure rows.
    NoPermute,
    /// Query networks see only the query.
    NonAdaptive,
    /// One query network reused for every lookup.
    SharedLoop,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::None,
        Ablation::Frozen,
        Ablation::NoPermute,
        Ablation::NonAdaptive,
        Ablation::SharedLoop,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "none" | "e2e" => Self::None,
            "frozen" => Self::Frozen,
            "no_permute" => Self::NoPermute,
            "non_adaptive" => Self::NonAdaptive,
            "shared_loop" => Self::SharedLoop,
            other => return config_err(format!("unknown ablation '{other}'")),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "e2e",
            Self::Frozen => "frozen",
            Self::NoPermute => "no_permute",
            Self::NonAdaptive => "non_adaptive",
            Self::SharedLoop => "shared_loop",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub distribution: DistributionSpec,
    pub model: ModelConfig,
    pub loss: LossKind,
    #[serde(default = "default_ablation")]
    pub ablation: Ablation,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub max_steps: u64,
    pub eval_every: u64,
    pub eval_instances: usize,
    pub patience: u32,
    pub seed: u64,
    /// Weight of the intermediate-lookup squared error; 0 disables it.
    #[serde(default)]
    pub aux_weight: f64,
    pub log_every: u64,
}

fn default_ablation() -> Ablation {
    Ablation::None
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.distribution.validate()?;
        self.model.validate()?;
        if self.model.n != self.distribution.n || self.model.d != self.distribution.d {
            return config_err("model N and d must match the distribution");
        }
        if self.batch_size == 0 || self.eval_instances == 0 || self.eval_every == 0 || self.log_every == 0 {
            return config_err("batch size, eval size and intervals must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.weight_decay < 0.0 || self.aux_weight < 0.0 {
            return config_err("lr must be positive; weight decay and aux weight nonnegative");
        }
        if self.ablation == Ablation::NoPermute && self.loss == LossKind::CrossEntropy {
            return config_err("the sort-free ablation has no position target; use the mse loss");
        }
        Ok(())
    }

    /// Model config with the ablation's switches applied.
    pub fn effective_model(&self) -> ModelConfig {
        let mut m = self.model.clone();
        match self.ablation {
            Ablation::NoPermute => m.permute = false,
            Ablation::NonAdaptive => m.adaptive = false,
            Ablation::SharedLoop => m.shared_weights = true,
            Ablation::None | Ablation::Frozen => {}
        }
        m
    }

    pub fn trains_data_processor(&self) -> bool {
        self.ablation != Ablation::Frozen
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let c: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }
}

// serde_json writes non-finite floats as null.
pub(crate) fn null_as_nan<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

fn null_as_neg_inf<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NEG_INFINITY))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    /// NaN when no step ran since the previous row.
    #[serde(deserialize_with = "null_as_nan")]
    pub train_loss: f64,
    pub eval_accuracy: Option<Vec<f64>>,
    pub eval_mse: Option<Vec<f64>>,
    pub sortedness: Option<f64>,
}

impl LogRow {
    pub fn csv_header(m: usize) -> String {
        let mut cols = vec!["step".to_string(), "train_loss".to_string()];
        cols.extend((1..=m).map(|i| format!("eval_acc_{i}")));
        cols.extend((1..=m).map(|i| format!("eval_mse_{i}")));
        cols.push("sortedness".into());
        cols.join(",")
    }

    pub fn csv_line(&self, m: usize) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        let mut cols = vec![self.step.to_string(), format!("{}", self.train_loss)];
        for i in 0..m {
            cols.push(opt(self.eval_accuracy.as_ref().map(|a| a[i])));
        }
        for i in 0..m {
            cols.push(opt(self.eval_mse.as_ref().map(|a| a[i])));
        }
        cols.push(opt(self.sortedness));
        cols.join(",")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopState {
    #[serde(deserialize_with = "null_as_neg_inf")]
    pub best_metric: f64,
    pub best_step: u64,
    pub evals_since_best: u32,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: NnModel,
    pub optimizer: AdamState,
    pub step: u64,
    pub early: EarlyStopState,
    pub best_params: ParamStore,
    pub log: Vec<LogRow>,
    pub stopped_early: bool,
    heldout: Vec<NnInstance>,
    loss_sum: f64,
    loss_count: u64,
}

/// Why [`Trainer::run`] returned.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    MaxSteps,
    EarlyStop,
    Paused,
}

const BEST_PREFIX: &str = "best/";

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = NnModel::new(config.effective_model(), config.seed)?;
        let optimizer = AdamState::new(
            AdamConfig {
                lr: config.lr,
                weight_decay: config.weight_decay,
                ..AdamConfig::default()
            },
            model.params.tensors(),
        );
        let heldout = heldout_instances(&config)?;
        Ok(Self {
            best_params: model.params.clone(),
            early: EarlyStopState {
                best_metric: f64::NEG_INFINITY,
                best_step: 0,
                evals_since_best: 0,
            },
            config,
            model,
            optimizer,
            step: 0,
            log: Vec::new(),
            stopped_early: false,
            heldout,
            loss_sum: 0.0,
            loss_count: 0,
        })
    }

    /// Training loss of one fresh batch; parameters are updated unless the
    /// pass diverges, in which case the state is left as it was.
    pub fn train_step(&mut self) -> Result<f64> {
        let c = &self.config;
        let mut data_rng = seeded(c.seed, &[tag::BATCH, self.step]);
        let batch: Vec<NnInstance> = (0..c.batch_size)
            .map(|_| sample_nn_instance_with(&c.distribution, &mut data_rng))
            .collect::<Result<_>>()?;
        let refs: Vec<&NnInstance> = batch.iter().collect();
        let mut noise_rng = seeded(c.seed, &[tag::NOISE, self.step]);
        let mut tape = Tape::new();
        let binding = self.model.bind(&mut tape, c.trains_data_processor(), true)?;
        let fwd = self
            .model
            .train_forward(&mut tape, &binding, &refs, c.loss, c.aux_weight, &mut noise_rng)
            .map_err(|e| self.diverged(e.to_string()))?;
        let loss = tape.value(fwd.loss).data()[0];
        if !loss.is_finite() {
            return Err(self.diverged(format!("loss is {loss}")));
        }
        let grads = tape.backward(fwd.loss)?;
        let grads = binding.gradients(&grads);
        let report = self.optimizer.step(self.model.params.tensors_mut(), &grads)?;
        if report.skipped_non_finite > 0 {
            log::warn!("step {}: skipped {} non-finite gradients", self.step, report.skipped_non_finite);
        }
        self.step += 1;
        self.loss_sum += loss;
        self.loss_count += 1;
        Ok(loss)
    }

    fn diverged(&self, reason: String) -> Error {
        Error::Diverged {
            step: self.step,
            reason,
        }
    }

    pub fn evaluate_heldout(&self) -> Result<EvalReport> {
        evaluate_model(&self.model, &self.heldout)
    }

    fn metric(report: &EvalReport) -> f64 {
        match report.final_accuracy() {
            Some(a) => a,
            None => -report.mse.last().copied().unwrap_or(f64::INFINITY),
        }
    }

    /// Evaluates on the held-out block, logs, and updates early stopping.
    fn checkpoint_eval(&mut self) -> Result<LogRow> {
        let report = self.evaluate_heldout()?;
        let metric = Self::metric(&report);
        if metric > self.early.best_metric {
            self.early = EarlyStopState {
                best_metric: metric,
                best_step: self.step,
                evals_since_best: 0,
            };
            self.best_params = self.model.params.clone();
        } else {
            self.early.evals_since_best += 1;
        }
        let row = LogRow {
            step: self.step,
            train_loss: self.take_mean_loss(),
            eval_accuracy: report.accuracy.clone(),
            eval_mse: Some(report.mse.clone()),
            sortedness: report.sortedness,
        };
        self.log.push(row.clone());
        Ok(row)
    }

    fn take_mean_loss(&mut self) -> f64 {
        let mean = if self.loss_count == 0 {
            f64::NAN
        } else {
            self.loss_sum / self.loss_count as f64
        };
        self.loss_sum = 0.0;
        self.loss_count = 0;
        mean
    }

    /// Trains until `max_steps`, early stopping, or `pause_at` (exclusive
    /// step count), calling `on_log` for every log row.
    pub fn run(&mut self, pause_at: Option<u64>, mut on_log: impl FnMut(&LogRow)) -> Result<StopReason> {
        if self.step == 0 && self.log.is_empty() {
            let row = self.checkpoint_eval()?;
            on_log(&row);
        }
        loop {
            if self.stopped_early {
                return Ok(StopReason::EarlyStop);
            }
            if self.step >= self.config.max_steps {
                if self.log.last().map(|r| r.step) != Some(self.step) {
                    let row = self.checkpoint_eval()?;
                    on_log(&row);
                }
                return Ok(StopReason::MaxSteps);
            }
            if pause_at.is_some_and(|p| self.step >= p) {
                return Ok(StopReason::Paused);
            }
            self.train_step()?;
            if self.step % self.config.eval_every == 0 {
                let row = self.checkpoint_eval()?;
                on_log(&row);
                if self.early.evals_since_best >= self.config.patience {
                    self.stopped_early = true;
                }
            } else if self.step % self.config.log_every == 0 {
                let row = LogRow {
                    step: self.step,
                    train_loss: self.take_mean_loss(),
                    eval_accuracy: None,
                    eval_mse: None,
                    sortedness: None,
                };
                self.log.push(row.clone());
                on_log(&row);
            }
        }
    }

    /// Model carrying the best held-out parameters seen so far.
    pub fn best_model(&self) -> NnModel {
        let mut m = self.model.clone();
        m.params = self.best_params.clone();
        m
    }

    /// Full resumable state: current and best parameters, optimizer moments,
    /// early-stopping bookkeeping and the log.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut params = self.model.params.clone();
        for (name, t) in self.best_params.names().iter().zip(self.best_params.tensors()) {
            params.add(format!("{BEST_PREFIX}{name}"), t.clone());
        }
        let mut opt = self.optimizer.clone();
        let zeros = |t: &learnds_autodiff::Tensor| vec![0.0; t.numel()];
        opt.m.extend(self.best_params.tensors().iter().map(zeros));
        opt.v.extend(self.best_params.tensors().iter().map(zeros));
        let meta = serde_json::json!({
            "kind": "nn_trainer",
            "config": self.config,
            "early": self.early,
            "stopped_early": self.stopped_early,
            "log": self.log,
            "loss_sum": self.loss_sum,
            "loss_count": self.loss_count,
        });
        Checkpoint::new(params, Some(opt), self.config.seed, self.config.hash(), self.step, meta)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = &ck.manifest.meta;
        if meta.get("kind").and_then(|k| k.as_str()) != Some("nn_trainer") {
            return Err(Error::Integrity("checkpoint does not hold trainer state".into()));
        }
        let config: TrainConfig = serde_json::from_value(meta["config"].clone())?;
        if config.hash() != ck.manifest.config_hash {
            return Err(Error::Integrity("config hash mismatch".into()));
        }
        let mut t = Self::new(config)?;
        let (cur, best) = split_best(&ck.params);
        t.model = NnModel::from_params(t.model.config.clone(), cur)?;
        t.best_params = NnModel::from_params(t.model.config.clone(), best)?.params;
        let mut opt = ck
            .optimizer
            .clone()
            .ok_or_else(|| Error::Integrity("checkpoint lacks optimizer state".into()))?;
        let n = t.model.params.len();
        opt.m.truncate(n);
        opt.v.truncate(n);
        t.optimizer = opt;
        t.step = ck.manifest.step;
        t.early = serde_json::from_value(meta["early"].clone())?;
        t.stopped_early = meta["stopped_early"].as_bool().unwrap_or(false);
        t.log = serde_json::from_value(meta["log"].clone())?;
        t.loss_sum = meta["loss_sum"].as_f64().unwrap_or(0.0);
        t.loss_count = meta["loss_count"].as_u64().unwrap_or(0);
        Ok(t)
    }

    pub fn write_log_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let m = self.model.config.lookups;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "{}", LogRow::csv_header(m))?;
        for r in &self.log {
            writeln!(f, "{}", r.csv_line(m))?;
        }
        f.flush()?;
        Ok(())
    }
}

fn split_best(all: &ParamStore) -> (ParamStore, ParamStore) {
    let mut cur = ParamStore::new();
    let mut best = ParamStore::new();
    for (name, t) in all.names().iter().zip(all.tensors()) {
        match name.strip_prefix(BEST_PREFIX) {
            Some(n) => best.add(n.to_string(), t.clone()),
            None => cur.add(name.clone(), t.clone()),
        };
    }
    (cur, best)
}

fn heldout_instances(c: &TrainConfig) -> Result<Vec<NnInstance>> {
    eval_instances(&c.distribution, c.eval_instances, derive_seed(c.seed, &[tag::HELDOUT]))
}

/// Saves a model-only checkpoint for evaluation and probing.
pub fn model_checkpoint(model: &NnModel, config: &TrainConfig, step: u64) -> Checkpoint {
    let meta = serde_json::json!({ "kind": "nn_model", "config": config, "model": model.config });
    Checkpoint::new(model.params.clone(), None, config.seed, config.hash(), step, meta)
}

/// Loads a model from either a model-only or a trainer checkpoint; trainer
/// checkpoints yield their best parameters.
pub fn load_model(ck: &Checkpoint) -> Result<(NnModel, TrainConfig)> {
    let meta = &ck.manifest.meta;
    let config: TrainConfig = serde_json::from_value(meta["config"].clone())?;
    if config.hash() != ck.manifest.config_hash {
        return Err(Error::Integrity("config hash mismatch".into()));
    }
    match meta.get("kind").and_then(|k| k.as_str()) {
        Some("nn_model") => {
            let mc: ModelConfig = serde_json::from_value(meta["model"].clone())?;
            Ok((NnModel::from_params(mc, ck.params.clone())?, config))
        }
        Some("nn_trainer") => {
            let t = Trainer::from_checkpoint(ck)?;
            Ok((t.best_model(), config))
        }
        _ => Err(Error::Integrity("checkpoint does not hold a nearest-neighbor model".into())),
    }
}
