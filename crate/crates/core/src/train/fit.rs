use std::fmt;
use std::path::PathBuf;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{cross_entropy, softmax_cross_entropy_grad};
use super::optim::{EarlyStopping, Sgd};
use crate::data::{mix_seed, AugmentConfig, Dataset, Split};
use crate::error::{Error, Result};
use crate::model::{save, ModelGraph, ParamFilter};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    ValLoss,
    ValAccuracy,
}

impl std::str::FromStr for Monitor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "val_loss" => Ok(Monitor::ValLoss),
            "val_accuracy" | "val_acc" => Ok(Monitor::ValAccuracy),
            other => Err(Error::config(format!("unknown monitor {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f32,
    pub momentum: f32,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub monitor: Monitor,
    pub augment: AugmentConfig,
    /// Where the best model is saved whenever the monitored metric improves.
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            momentum: 0.9,
            batch_size: 32,
            max_epochs: 50,
            patience: 3,
            seed: 0,
            monitor: Monitor::ValAccuracy,
            augment: AugmentConfig::default(),
            checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::config(
                "batch size, max epochs and patience must be at least 1",
            ));
        }
        self.augment.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub wall_ms: f64,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch {:>3}  train_loss {:.4}  train_acc {:.4}  val_loss {:.4}  val_acc {:.4}  {:.0} ms",
            self.epoch, self.train_loss, self.train_acc, self.val_loss, self.val_acc, self.wall_ms
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStopped,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub arch: String,
    pub config: TrainConfig,
    pub records: Vec<EpochRecord>,
    pub stop_reason: Option<StopReason>,
    /// 1-based epoch whose weights the model ends with; 0 if none finished.
    pub best_epoch: usize,
    pub best_metric: Option<f64>,
    pub best_checkpoint: Option<PathBuf>,
    pub trainable_params: usize,
    pub frozen_params: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub count: usize,
}

fn check_compatible(graph: &ModelGraph, data: &Dataset) -> Result<()> {
    if data.class_names() != graph.class_names.as_slice() {
        return Err(Error::config(format!(
            "dataset classes {:?} differ from model classes {:?}",
            data.class_names(),
            graph.class_names
        )));
    }
    let [h, w, _] = graph.input_shape;
    if (h, w) != (data.input_size(), data.input_size()) {
        return Err(Error::config(format!(
            "dataset images are {0}x{0}, model expects {h}x{w}",
            data.input_size()
        )));
    }
    Ok(())
}

/// Infer-mode loss, accuracy and confusion matrix over one split.
pub fn evaluate(graph: &ModelGraph, data: &Dataset, split: Split, batch_size: usize) -> Result<Evaluation> {
    check_compatible(graph, data)?;
    let k = graph.num_classes();
    let mut confusion = vec![vec![0usize; k]; k];
    let mut loss_sum = 0.0f64;
    let mut count = 0usize;
    for batch in data.batches(split, batch_size, None, 0, &AugmentConfig::disabled())? {
        let batch = batch?;
        let probs = graph.predict(&batch.images)?;
        let (loss, _) = cross_entropy(&probs, &batch.labels)?;
        loss_sum += loss as f64 * batch.labels.len() as f64;
        for (&truth, pred) in batch.labels.iter().zip(probs.argmax_rows()?) {
            confusion[truth][pred] += 1;
        }
        count += batch.labels.len();
    }
    if count == 0 {
        return Err(Error::config(format!("the {split} split is empty")));
    }
    let correct: usize = (0..k).map(|i| confusion[i][i]).sum();
    Ok(Evaluation {
        loss: loss_sum / count as f64,
        accuracy: correct as f64 / count as f64,
        confusion,
        count,
    })
}

fn score(monitor: Monitor, r: &EpochRecord) -> f64 {
    match monitor {
        Monitor::ValAccuracy => r.val_acc,
        Monitor::ValLoss => -r.val_loss,
    }
}

/// Trains `graph` on the train split with early stopping on the val split.
///
/// Each epoch runs a full pass of train-mode forward, fused softmax +
/// cross-entropy backward and a momentum step on trainable parameters, then
/// an infer-mode validation pass. On return the graph holds the weights of
/// the best epoch. `on_epoch` sees every finished epoch.
pub fn fit(
    graph: &mut ModelGraph,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    check_compatible(graph, data)?;
    if data.is_empty(Split::Train) {
        return Err(Error::config("the train split is empty"));
    }
    if data.is_empty(Split::Val) {
        return Err(Error::config("the val split is empty"));
    }
    let mut report = TrainReport {
        arch: graph.metadata.arch.clone(),
        config: cfg.clone(),
        records: Vec::new(),
        stop_reason: None,
        best_epoch: 0,
        best_metric: None,
        best_checkpoint: None,
        trainable_params: graph.param_count(ParamFilter::Trainable),
        frozen_params: graph.param_count(ParamFilter::Frozen),
    };
    let mut opt = Sgd::new(cfg.lr, cfg.momentum)?;
    let mut stopper = EarlyStopping::new(cfg.patience)?;
    let mut best = graph.clone();

    for epoch in 0..cfg.max_epochs {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, epoch as u64, 0xd409]));
        let (mut loss_sum, mut correct, mut seen) = (0.0f64, 0usize, 0usize);
        for batch in data.batches(Split::Train, cfg.batch_size, Some(cfg.seed), epoch as u64, &cfg.augment)? {
            let batch = batch?;
            let probs = graph.forward_train(&batch.images, &mut rng)?;
            let (loss, _) = cross_entropy(&probs, &batch.labels)?;
            if !loss.is_finite() || !probs.all_finite() {
                graph.clear_caches();
                *graph = best;
                return Err(Error::Numeric {
                    detail: format!("non-finite training loss in epoch {}", epoch + 1),
                    partial: Some(Box::new(report)),
                });
            }
            let n = batch.labels.len();
            loss_sum += loss as f64 * n as f64;
            correct += probs
                .argmax_rows()?
                .iter()
                .zip(&batch.labels)
                .filter(|(p, l)| p == l)
                .count();
            seen += n;
            let dlogits = softmax_cross_entropy_grad(&probs, &batch.labels)?;
            let grads = graph.backward_logits(dlogits)?;
            opt.step(graph, &grads)?;
        }
        let val = evaluate(graph, data, Split::Val, cfg.batch_size)?;
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / seen as f64,
            train_acc: correct as f64 / seen as f64,
            val_loss: val.loss,
            val_acc: val.accuracy,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        if !val.loss.is_finite() {
            report.records.push(record);
            *graph = best;
            return Err(Error::Numeric {
                detail: format!("non-finite validation loss in epoch {}", epoch + 1),
                partial: Some(Box::new(report)),
            });
        }
        on_epoch(&record);
        let improved = stopper.observe(score(cfg.monitor, &record));
        report.records.push(record);
        if improved {
            best = graph.clone();
            report.best_epoch = stopper.best_epoch();
            report.best_metric = Some(match cfg.monitor {
                Monitor::ValAccuracy => val.accuracy,
                Monitor::ValLoss => val.loss,
            });
            if let Some(path) = &cfg.checkpoint {
                save(graph, path)?;
                report.best_checkpoint = Some(path.clone());
            }
        }
        if stopper.should_stop() {
            report.stop_reason = Some(StopReason::EarlyStopped);
            break;
        }
    }
    if report.stop_reason.is_none() {
        report.stop_reason = Some(StopReason::MaxEpochs);
    }
    *graph = best;
    Ok(report)
}
