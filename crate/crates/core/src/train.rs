//! Adam, the epoch loop, evaluation and metric logging.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::checkpoint::{Checkpoint, ADAM_M_PREFIX, ADAM_V_PREFIX};
use crate::data::{augment, AugmentConfig, Dataset, Split};
use crate::error::{CheckpointError, Error, Result};
use crate::loss::{self, FocalLossConfig};
use crate::metrics::{argmax_rows, ConfusionMatrix, MetricsReport};
use crate::model::Model;
use crate::nn::{Forward, Mode, ParamId};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Focal(FocalLossConfig),
    CrossEntropy,
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Focal(_) => "focal",
            LossKind::CrossEntropy => "cross_entropy",
        }
    }

    /// Mean loss of `logits` without recording gradients.
    pub fn evaluate<T: Element>(&self, logits: &Tensor<T>, targets: &[usize]) -> Result<f64> {
        match self {
            LossKind::Focal(cfg) => loss::focal_loss(logits, targets, cfg),
            LossKind::CrossEntropy => loss::cross_entropy(logits, targets),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub adam: AdamConfig,
    pub loss: LossKind,
    /// Drives batch order and augmentation.
    pub seed: u64,
    pub augment: AugmentConfig,
    pub eval_batch_size: usize,
    /// When false every record's `seconds` is 0, so repeated runs produce
    /// identical logs.
    pub log_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            learning_rate: 0.001,
            epochs: 20,
            adam: AdamConfig::default(),
            loss: LossKind::Focal(FocalLossConfig::default()),
            seed: 42,
            augment: AugmentConfig::default(),
            eval_batch_size: 64,
            log_wall_time: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::config("batch sizes must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::config(format!("invalid Adam constants {a:?}")));
        }
        if let LossKind::Focal(cfg) = &self.loss {
            cfg.validate()?;
        }
        Ok(())
    }
}

/// One split's metrics after one epoch. Epochs count from 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub seconds: f64,
}

/// One bias-corrected Adam update. Moments are kept in `f32`; the update
/// itself is computed in `f64`.
pub fn adam_step<T: Element>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    m: &mut Tensor<f32>,
    v: &mut Tensor<f32>,
    t: u64,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if t == 0 {
        return Err(Error::contract("Adam step count starts at 1"));
    }
    let shape = param.shape();
    if grad.shape() != shape || m.shape() != shape || v.shape() != shape {
        return Err(Error::contract(format!(
            "Adam shapes differ: param {shape:?}, grad {:?}, moments {:?} and {:?}",
            grad.shape(),
            m.shape(),
            v.shape()
        )));
    }
    let bc1 = 1.0 - cfg.beta1.powf(t as f64);
    let bc2 = 1.0 - cfg.beta2.powf(t as f64);
    let (m, v) = (m.data_mut(), v.data_mut());
    for (i, (w, g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
        let g = g.widen();
        m[i] = (cfg.beta1 * m[i] as f64 + (1.0 - cfg.beta1) * g) as f32;
        v[i] = (cfg.beta2 * v[i] as f64 + (1.0 - cfg.beta2) * g * g) as f32;
        let step = lr * (m[i] as f64 / bc1) / ((v[i] as f64 / bc2).sqrt() + cfg.eps);
        *w = T::cast(w.widen() - step);
    }
    Ok(())
}

/// Adam state for every trainable tensor of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub learning_rate: f64,
    /// Updates applied so far.
    pub step: u64,
    names: Vec<String>,
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
}

impl Adam {
    pub fn new<T: Element>(model: &Model<T>, learning_rate: f64, config: AdamConfig) -> Self {
        let store = model.store();
        let (mut names, mut m) = (Vec::new(), Vec::new());
        for id in store.trainable_ids() {
            let e = store.entry(id);
            names.push(e.name.clone());
            m.push(Tensor::zeros(e.value.shape()));
        }
        Self { config, learning_rate, step: 0, names, v: m.clone(), m }
    }

    /// Applies one update from `(id, gradient)` pairs. Trainable tensors
    /// without a gradient still advance their moments with a zero gradient.
    pub fn update<T: Element>(&mut self, model: &mut Model<T>, grads: &[(ParamId, Tensor<T>)]) -> Result<()> {
        self.step += 1;
        let store = model.store_mut();
        let ids: Vec<ParamId> = store.trainable_ids().collect();
        if ids.len() != self.m.len() {
            return Err(Error::contract(format!("optimizer tracks {} tensors, model has {}", self.m.len(), ids.len())));
        }
        for (slot, id) in ids.into_iter().enumerate() {
            let zero;
            let g = match grads.iter().find(|(gid, _)| *gid == id) {
                Some((_, g)) => g,
                None => {
                    zero = Tensor::zeros(store.value(id).shape());
                    &zero
                }
            };
            adam_step(store.value_mut(id), g, &mut self.m[slot], &mut self.v[slot], self.step, self.learning_rate, &self.config)?;
        }
        Ok(())
    }

    fn tensors(&self) -> Vec<(String, Tensor<f32>)> {
        let m = self.names.iter().zip(&self.m).map(|(n, t)| (format!("{ADAM_M_PREFIX}{n}"), t.clone()));
        let v = self.names.iter().zip(&self.v).map(|(n, t)| (format!("{ADAM_V_PREFIX}{n}"), t.clone()));
        m.chain(v).collect()
    }

    fn restore(&mut self, ckpt: &Checkpoint, step: u64) -> Result<()> {
        for (slot, name) in self.names.iter().enumerate() {
            for (prefix, dst) in [(ADAM_M_PREFIX, &mut self.m[slot]), (ADAM_V_PREFIX, &mut self.v[slot])] {
                let key = format!("{prefix}{name}");
                let t = ckpt.tensor(&key).ok_or_else(|| CheckpointError::Mismatch(format!("missing tensor {key}")))?;
                if t.shape() != dst.shape() {
                    return Err(CheckpointError::Mismatch(format!("{key} has shape {:?}", t.shape())).into());
                }
                *dst = t.clone();
            }
        }
        self.step = step;
        Ok(())
    }
}

/// Progress saved with a checkpoint so training can resume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub config: TrainConfig,
    pub epochs_completed: usize,
    pub optimizer_step: u64,
    pub best_val_accuracy: Option<f64>,
    pub best_epoch: Option<usize>,
    pub history: Vec<EpochRecord>,
}

/// Receives every record as soon as it is produced.
pub trait EpochSink {
    fn record(&mut self, record: &EpochRecord) -> Result<()>;
}

impl<F: FnMut(&EpochRecord) -> Result<()>> EpochSink for F {
    fn record(&mut self, record: &EpochRecord) -> Result<()> {
        self(record)
    }
}

pub const METRICS_HEADER: &str = "epoch,split,loss,accuracy,precision,recall,seconds";

/// Appends `epoch,split,loss,accuracy,precision,recall,seconds` rows.
pub struct CsvMetricsSink {
    path: PathBuf,
    out: BufWriter<File>,
}

impl CsvMetricsSink {
    /// Starts a new log, replacing any existing file.
    pub fn create(path: &Path) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        writeln!(out, "{METRICS_HEADER}").map_err(|e| Error::io(path, e))?;
        Ok(Self { path: path.to_path_buf(), out })
    }

    /// Continues an existing log, or starts one if `path` is missing.
    pub fn append(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Self::create(path);
        }
        let file = OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(Self { path: path.to_path_buf(), out: BufWriter::new(file) })
    }

    pub fn format_row(r: &EpochRecord) -> String {
        format!("{},{},{},{},{},{},{}", r.epoch, r.split, r.loss, r.accuracy, r.precision, r.recall, r.seconds)
    }
}

impl EpochSink for CsvMetricsSink {
    fn record(&mut self, r: &EpochRecord) -> Result<()> {
        writeln!(self.out, "{}", Self::format_row(r)).map_err(|e| Error::io(&self.path, e))?;
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Splits `n` samples into batches of `size`; a trailing batch of one sample
/// is merged into the previous batch because batch normalization needs at
/// least two samples.
pub fn batch_ranges(n: usize, size: usize) -> Vec<std::ops::Range<usize>> {
    let mut out: Vec<_> = (0..n).step_by(size.max(1)).map(|s| s..(s + size).min(n)).collect();
    if out.len() > 1 && out.last().is_some_and(|r| r.len() == 1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").end = last.end;
    }
    out
}

/// Eval-mode logits for `indices`, in order.
pub fn predict_logits(model: &mut Model<f32>, data: &Dataset, indices: &[usize], batch_size: usize) -> Result<Tensor<f32>> {
    let k = model.config().num_classes;
    let mut out = Vec::with_capacity(indices.len() * k);
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, _) = data.batch(chunk)?;
        out.extend_from_slice(model.logits(&x, Mode::Eval)?.data());
    }
    Tensor::from_vec(&[indices.len(), k], out)
}

/// Eval-mode loss and metrics over `indices`.
pub fn evaluate(
    model: &mut Model<f32>,
    data: &Dataset,
    indices: &[usize],
    loss: &LossKind,
    batch_size: usize,
) -> Result<(EpochRecord, MetricsReport)> {
    evaluate_split(model, data, indices, loss, batch_size, 0, Split::Test)
}

fn evaluate_split(
    model: &mut Model<f32>,
    data: &Dataset,
    indices: &[usize],
    loss: &LossKind,
    batch_size: usize,
    epoch: usize,
    split: Split,
) -> Result<(EpochRecord, MetricsReport)> {
    if indices.is_empty() {
        return Err(Error::contract(format!("cannot evaluate an empty {split} split")));
    }
    let start = Instant::now();
    let k = model.config().num_classes;
    let mut confusion = ConfusionMatrix::new(k);
    let mut total = 0.0;
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, labels) = data.batch(chunk)?;
        let logits = model.logits(&x, Mode::Eval)?;
        total += loss.evaluate(&logits, &labels)? * chunk.len() as f64;
        for (t, p) in labels.iter().zip(argmax_rows(logits.data(), k)) {
            confusion.record(*t, p)?;
        }
    }
    let report = confusion.report(&data.manifest().class_names);
    let record = EpochRecord {
        epoch,
        split,
        loss: total / indices.len() as f64,
        accuracy: report.accuracy,
        precision: report.macro_precision,
        recall: report.macro_recall,
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok((record, report))
}

/// Owns the optimizer and progress of one training run.
pub struct Trainer {
    config: TrainConfig,
    optimizer: Adam,
    state: TrainState,
    checkpoint_dir: Option<PathBuf>,
}

impl Trainer {
    pub fn new(config: TrainConfig, model: &Model<f32>) -> Result<Self> {
        config.validate()?;
        let optimizer = Adam::new(model, config.learning_rate, config.adam);
        let state = TrainState {
            config: config.clone(),
            epochs_completed: 0,
            optimizer_step: 0,
            best_val_accuracy: None,
            best_epoch: None,
            history: Vec::new(),
        };
        Ok(Self { config, optimizer, state, checkpoint_dir: None })
    }

    /// Continues the run saved in `ckpt`; `model` must already hold its
    /// weights (see [`Checkpoint::apply_to`]).
    pub fn resume(ckpt: &Checkpoint, model: &Model<f32>) -> Result<Self> {
        let state = ckpt
            .train_state
            .clone()
            .ok_or_else(|| CheckpointError::Malformed("checkpoint has no training state".into()))?;
        let mut trainer = Self::new(state.config.clone(), model)?;
        trainer.optimizer.restore(ckpt, state.optimizer_step)?;
        trainer.state = state;
        Ok(trainer)
    }

    /// Writes `last.ckpt` after every epoch and `best.ckpt` whenever
    /// validation accuracy improves.
    pub fn with_checkpoint_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.checkpoint_dir = Some(dir.into());
        self
    }

    /// Changes the total number of epochs, e.g. to extend a resumed run.
    pub fn set_epochs(&mut self, epochs: usize) -> Result<()> {
        if epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        self.config.epochs = epochs;
        self.state.config.epochs = epochs;
        Ok(())
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    /// Model weights plus optimizer moments and progress.
    pub fn checkpoint(&self, model: &Model<f32>) -> Checkpoint {
        let mut ckpt = Checkpoint::from_model(model);
        ckpt.tensors.extend(self.optimizer.tensors());
        ckpt.train_state = Some(self.state.clone());
        ckpt
    }

    /// Runs the remaining epochs and returns the full record history.
    pub fn fit(
        &mut self,
        model: &mut Model<f32>,
        data: &Dataset,
        train: &[usize],
        val: &[usize],
        sinks: &mut [&mut dyn EpochSink],
    ) -> Result<Vec<EpochRecord>> {
        if train.len() < 2 {
            return Err(Error::config(format!("training needs at least 2 samples, got {}", train.len())));
        }
        if val.is_empty() {
            return Err(Error::config("validation split is empty"));
        }
        if data.manifest().num_classes() != model.config().num_classes {
            return Err(Error::config(format!(
                "dataset has {} classes, model has {}",
                data.manifest().num_classes(),
                model.config().num_classes
            )));
        }
        let focal = match &self.config.loss {
            LossKind::Focal(cfg) => Some((cfg.gamma, cfg.alpha_vector(model.config().num_classes)?)),
            LossKind::CrossEntropy => None,
        };
        let mut order = train.to_vec();
        order.sort_unstable();
        for epoch in self.state.epochs_completed + 1..=self.config.epochs {
            let start = Instant::now();
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
            rng.set_stream(epoch as u64);
            let mut shuffled = order.clone();
            shuffled.shuffle(&mut rng);

            let k = model.config().num_classes;
            let mut confusion = ConfusionMatrix::new(k);
            let mut total = 0.0;
            for (b, range) in batch_ranges(shuffled.len(), self.config.batch_size).into_iter().enumerate() {
                let chunk = &shuffled[range];
                let (mut x, labels) = data.batch(chunk)?;
                if self.config.augment.enabled {
                    let seed = self.config.seed ^ ((epoch as u64) << 40) ^ ((b as u64) << 20);
                    x = augment(&x, &self.config.augment, seed)?;
                }
                let (value, logits, grads) = {
                    let (arch, store) = model.parts();
                    let mut g = Graph::new();
                    let mut f = Forward::new(&mut g, store, Mode::Train, true);
                    let xv = f.graph.constant(x);
                    let out = arch.forward(&mut f, xv)?;
                    let lv = match &focal {
                        Some((gamma, alpha)) => f.graph.focal_loss(out, &labels, *gamma, alpha)?,
                        None => f.graph.cross_entropy(out, &labels)?,
                    };
                    let value = f.graph.value(lv).data()[0].widen();
                    if !value.is_finite() {
                        return Err(Error::NonFiniteLoss { epoch, batch: b, value });
                    }
                    let grads = f.graph.backward(lv)?;
                    let pg = f.param_grads(&grads);
                    (value, f.graph.value(out).clone(), pg)
                };
                self.optimizer.update(model, &grads)?;
                total += value * chunk.len() as f64;
                for (t, p) in labels.iter().zip(argmax_rows(logits.data(), k)) {
                    confusion.record(*t, p)?;
                }
            }
            let train_seconds = start.elapsed().as_secs_f64();
            let train_record = EpochRecord {
                epoch,
                split: Split::Train,
                loss: total / shuffled.len() as f64,
                accuracy: confusion.accuracy(),
                precision: confusion.macro_precision(),
                recall: confusion.macro_recall(),
                seconds: if self.config.log_wall_time { train_seconds } else { 0.0 },
            };
            let (mut val_record, _) =
                evaluate_split(model, data, val, &self.config.loss, self.config.eval_batch_size, epoch, Split::Val)?;
            if !self.config.log_wall_time {
                val_record.seconds = 0.0;
            }
            log::info!(
                "epoch {epoch}: train loss {:.4} acc {:.4}, val loss {:.4} acc {:.4}",
                train_record.loss,
                train_record.accuracy,
                val_record.loss,
                val_record.accuracy
            );

            self.state.epochs_completed = epoch;
            self.state.optimizer_step = self.optimizer.step;
            let improved = self.state.best_val_accuracy.is_none_or(|b| val_record.accuracy > b);
            if improved {
                self.state.best_val_accuracy = Some(val_record.accuracy);
                self.state.best_epoch = Some(epoch);
            }
            for r in [&train_record, &val_record] {
                for s in sinks.iter_mut() {
                    s.record(r)?;
                }
            }
            self.state.history.push(train_record);
            self.state.history.push(val_record);
            if let Some(dir) = &self.checkpoint_dir {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let ckpt = self.checkpoint(model);
                ckpt.save(&dir.join("last.ckpt"))?;
                if improved {
                    ckpt.save(&dir.join("best.ckpt"))?;
                }
            }
        }
        Ok(self.state.history.clone())
    }
}

/// Trains a fresh run with `config`.
pub fn fit(
    model: &mut Model<f32>,
    data: &Dataset,
    train: &[usize],
    val: &[usize],
    config: &TrainConfig,
    sinks: &mut [&mut dyn EpochSink],
) -> Result<Vec<EpochRecord>> {
    Trainer::new(config.clone(), model)?.fit(model, data, train, val, sinks)
}
