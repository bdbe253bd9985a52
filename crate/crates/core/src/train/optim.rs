use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelGraph, ParamGrad};
use crate::tensor::Tensor;

/// One classical momentum update in place: `v = momentum * v - lr * g`,
/// then `w = w + v`.
pub fn sgd_momentum_step(
    params: &mut Tensor,
    grads: &Tensor,
    velocity: &mut Tensor,
    lr: f32,
    momentum: f32,
) -> Result<()> {
    if params.shape() != grads.shape() || params.shape() != velocity.shape() {
        return Err(Error::shape(format!(
            "parameter {:?}, gradient {:?}, velocity {:?}",
            params.shape(),
            grads.shape(),
            velocity.shape()
        )));
    }
    for ((w, &g), v) in params
        .data_mut()
        .iter_mut()
        .zip(grads.data())
        .zip(velocity.data_mut())
    {
        *v = momentum * *v - lr * g;
        *w += *v;
    }
    Ok(())
}

/// Momentum SGD over a model's trainable parameters, with one velocity
/// buffer per parameter tensor.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    velocity: BTreeMap<(usize, String), Tensor>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::config(format!("learning rate {lr} must be positive")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config(format!("momentum {momentum} outside [0, 1)")));
        }
        Ok(Self {
            lr,
            momentum,
            velocity: BTreeMap::new(),
        })
    }

    /// Applies `grads` to the graph. Gradients of frozen layers are rejected.
    pub fn step(&mut self, graph: &mut ModelGraph, grads: &[ParamGrad]) -> Result<()> {
        for g in grads {
            let layer = graph
                .layers
                .get_mut(g.layer)
                .ok_or_else(|| Error::State(format!("gradient for missing layer {}", g.layer)))?;
            if !layer.trainable() {
                return Err(Error::State(format!("gradient for frozen layer {}", g.layer)));
            }
            let param = layer
                .state
                .params
                .iter_mut()
                .find(|p| p.name == g.name)
                .ok_or_else(|| Error::State(format!("layer {} has no {}", g.layer, g.name)))?;
            let w = param.data.as_dense_mut()?;
            let v = self
                .velocity
                .entry((g.layer, g.name.clone()))
                .or_insert_with(|| Tensor::zeros_like(w));
            sgd_momentum_step(w, &g.grad, v, self.lr, self.momentum)?;
        }
        Ok(())
    }
}

/// Patience-based early stopping on a metric where larger is better.
///
/// An epoch improves only if it beats the best so far strictly; ties keep the
/// earlier epoch. Training stops once `patience` consecutive epochs fail to
/// improve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    best: Option<f64>,
    best_epoch: usize,
    epochs: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Result<Self> {
        if patience == 0 {
            return Err(Error::config("patience must be at least 1"));
        }
        Ok(Self {
            patience,
            best: None,
            best_epoch: 0,
            epochs: 0,
            stale: 0,
        })
    }

    /// Records the next epoch's score. Returns whether it is a new best.
    pub fn observe(&mut self, score: f64) -> bool {
        self.epochs += 1;
        if self.best.is_none_or(|b| score > b) {
            self.best = Some(score);
            self.best_epoch = self.epochs;
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    /// 1-based epoch of the best score so far.
    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }
}
