//! Sequential model graphs, architecture presets, freezing and the model file
//! format.

mod format;
mod presets;

use std::collections::BTreeMap;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Layer, LayerKind, LayerSpec, Mode, ParamData};
use crate::tensor::{DType, Tensor};

pub use format::{load, read_model, save, write_model, FORMAT_VERSION, MAGIC};
pub use presets::{Arch, ArchPreset, DEFAULT_INPUT_SIZE, HEAD_WIDTHS};

/// How raw pixels are mapped onto the model input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    /// Bilinear resize target `[h, w]`.
    pub resize: [usize; 2],
    /// Pixels are divided by this value, giving the range `[0, 1]`.
    pub divisor: f32,
}

impl Normalization {
    pub fn for_input(input_shape: [usize; 3]) -> Self {
        Self {
            resize: [input_shape[0], input_shape[1]],
            divisor: 255.0,
        }
    }
}

/// Descriptive data stored alongside the layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub arch: String,
    pub seed: u64,
    pub width_multiplier: f64,
    /// Layers `[0, body_len)` form the feature extractor frozen by
    /// [`FreezeSelector::Body`].
    pub body_len: usize,
    pub dropout_rates: Vec<f32>,
    pub head_widths: Vec<usize>,
    pub normalization: Normalization,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezeSelector {
    Body,
    All,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamFilter {
    All,
    Trainable,
    Frozen,
}

/// Gradient of one parameter tensor, addressed by layer index and name.
#[derive(Debug, Clone)]
pub struct ParamGrad {
    pub layer: usize,
    pub name: String,
    pub grad: Tensor,
}

/// Ordered layers plus the metadata needed to use them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub layers: Vec<Layer>,
    pub input_shape: [usize; 3],
    pub class_names: Vec<String>,
    pub metadata: Metadata,
}

/// Checks that class names are non-empty, unique and sorted.
pub fn validate_class_names(names: &[String]) -> Result<()> {
    if names.is_empty() {
        return Err(Error::config("a model needs at least one class"));
    }
    if names.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config(format!(
            "class names must be unique and sorted: {names:?}"
        )));
    }
    Ok(())
}

impl ModelGraph {
    /// Initializes every layer from `specs` with a generator seeded by
    /// `metadata.seed`, then validates the graph.
    pub fn build(
        specs: Vec<LayerSpec>,
        input_shape: [usize; 3],
        class_names: Vec<String>,
        metadata: Metadata,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(metadata.seed);
        let layers = specs
            .into_iter()
            .map(|s| Layer::new(s, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(layers, input_shape, class_names, metadata)
    }

    pub fn from_layers(
        layers: Vec<Layer>,
        input_shape: [usize; 3],
        class_names: Vec<String>,
        metadata: Metadata,
    ) -> Result<Self> {
        let graph = Self {
            layers,
            input_shape,
            class_names,
            metadata,
        };
        graph.validate()?;
        Ok(graph)
    }

    /// Per-sample input shape of every layer, plus the final output shape.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.input_shape.to_vec()];
        for (i, layer) in self.layers.iter().enumerate() {
            let input = &shapes[i];
            if let LayerKind::ResidualAdd { from } = *layer.kind() {
                if from >= i {
                    return Err(Error::config(format!(
                        "residual add at layer {i} refers to layer {from}"
                    )));
                }
                if &shapes[from] != input {
                    return Err(Error::shape(format!(
                        "residual add at layer {i}: {:?} vs {input:?}",
                        shapes[from]
                    )));
                }
            }
            let out = layer.kind().output_shape(input).map_err(|e| match e {
                Error::Shape(m) => Error::shape(format!("layer {i}: {m}")),
                other => other,
            })?;
            shapes.push(out);
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_shape.contains(&0) {
            return Err(Error::shape(format!("input shape {:?}", self.input_shape)));
        }
        validate_class_names(&self.class_names)?;
        if self.metadata.body_len > self.layers.len() {
            return Err(Error::config("body extends past the last layer"));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            layer.kind().validate()?;
            for (name, shape) in layer.kind().param_shapes() {
                let p = layer.param(name)?;
                if p.shape() != shape.as_slice() {
                    return Err(Error::shape(format!(
                        "layer {i} parameter {name} has shape {:?}, expected {shape:?}",
                        p.shape()
                    )));
                }
            }
            for (name, shape) in layer.kind().buffer_shapes() {
                if layer.buffer(name)?.shape() != shape.as_slice() {
                    return Err(Error::shape(format!("layer {i} buffer {name} shape")));
                }
            }
        }
        let shapes = self.shapes()?;
        match self.layers.last().map(|l| *l.kind()) {
            Some(LayerKind::Softmax) => {}
            _ => return Err(Error::config("the final layer must be softmax")),
        }
        let out = shapes.last().expect("at least one layer");
        if out.as_slice() != [self.class_names.len()] {
            return Err(Error::shape(format!(
                "output {out:?} does not match {} classes",
                self.class_names.len()
            )));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn param_count(&self, filter: ParamFilter) -> usize {
        self.layers
            .iter()
            .filter(|l| match filter {
                ParamFilter::All => true,
                ParamFilter::Trainable => l.trainable(),
                ParamFilter::Frozen => !l.trainable(),
            })
            .map(|l| l.param_count())
            .sum()
    }

    /// Parameters of the body layers only.
    pub fn body_param_count(&self) -> usize {
        self.layers[..self.metadata.body_len]
            .iter()
            .map(|l| l.param_count())
            .sum()
    }

    pub fn freeze(&mut self, selector: FreezeSelector) {
        let body = self.metadata.body_len;
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.spec.trainable = match selector {
                FreezeSelector::Body => i >= body,
                FreezeSelector::All => false,
                FreezeSelector::None => true,
            };
        }
    }

    /// Storage type of the weights: f32, or f16/i8 when quantized.
    pub fn weight_dtype(&self) -> DType {
        self.layers
            .iter()
            .flat_map(|l| &l.state.params)
            .find_map(|p| match &p.data {
                ParamData::Quantized(q) => Some(q.dtype()),
                ParamData::Dense(_) => None,
            })
            .unwrap_or(DType::F32)
    }

    pub fn clear_caches(&mut self) {
        self.layers.iter_mut().for_each(Layer::clear_cache);
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        if batch.rank() != 4 || batch.shape()[1..] != self.input_shape {
            return Err(Error::shape(format!(
                "model expects [n, {}, {}, {}], got {:?}",
                self.input_shape[0],
                self.input_shape[1],
                self.input_shape[2],
                batch.shape()
            )));
        }
        Ok(())
    }

    /// Layer indices whose input a later residual add reads.
    fn skip_sources(&self) -> Vec<bool> {
        let mut used = vec![false; self.layers.len()];
        for l in &self.layers {
            if let LayerKind::ResidualAdd { from } = *l.kind() {
                used[from] = true;
            }
        }
        used
    }

    fn skip_for<'a>(&self, i: usize, saved: &'a BTreeMap<usize, Tensor>) -> Option<&'a Tensor> {
        match *self.layers[i].kind() {
            LayerKind::ResidualAdd { from } => saved.get(&from),
            _ => None,
        }
    }

    /// Infer-mode forward pass; rows of the result are class probabilities.
    /// Read-only, so one graph can serve concurrent callers.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_batch(batch)?;
        let sources = self.skip_sources();
        let mut saved = BTreeMap::new();
        let mut x = batch.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            if sources[i] {
                saved.insert(i, x.clone());
            }
            x = layer.infer(&x, self.skip_for(i, &saved))?;
        }
        Ok(x)
    }

    /// Index of the first trainable layer that owns parameters; backward
    /// passes stop there.
    pub fn first_trainable(&self) -> Option<usize> {
        self.layers
            .iter()
            .position(|l| l.trainable() && !l.state.params.is_empty())
    }

    /// Train-mode forward pass. Layers below the first trainable one keep no
    /// cache since no gradient will be taken through them.
    pub fn forward_train(&mut self, batch: &Tensor, rng: &mut dyn RngCore) -> Result<Tensor> {
        self.check_batch(batch)?;
        let start = self.first_trainable().unwrap_or(self.layers.len());
        let sources = self.skip_sources();
        let mut saved = BTreeMap::new();
        let mut x = batch.clone();
        for (i, &is_source) in sources.iter().enumerate() {
            if is_source {
                saved.insert(i, x.clone());
            }
            let skip = self.skip_for(i, &saved).cloned();
            let layer = &mut self.layers[i];
            x = layer.forward(&x, skip.as_ref(), Mode::Train, Some(&mut *rng))?;
            if i < start {
                layer.clear_cache();
            }
        }
        Ok(x)
    }

    /// Backpropagates the gradient of the loss with respect to the output of
    /// layer `top`, through layers `top..=first_trainable`.
    fn backward_from(&mut self, top: usize, upstream: Tensor) -> Result<Vec<ParamGrad>> {
        let Some(stop) = self.first_trainable() else {
            self.clear_caches();
            return Ok(Vec::new());
        };
        let mut pending: BTreeMap<usize, Tensor> = BTreeMap::new();
        let mut grads = Vec::new();
        let mut dy = upstream;
        for i in (stop..=top).rev() {
            let layer = &mut self.layers[i];
            let g = layer.backward_with(&dy, i > stop)?;
            for (name, grad) in g.params {
                grads.push(ParamGrad { layer: i, name, grad });
            }
            if let (LayerKind::ResidualAdd { from }, Some(s)) = (*layer.kind(), g.skip) {
                match pending.get_mut(&from) {
                    Some(acc) => acc.add_assign(&s)?,
                    None => {
                        pending.insert(from, s);
                    }
                }
            }
            if i == stop {
                break;
            }
            dy = g.input.ok_or_else(|| Error::State(format!("layer {i} returned no input gradient")))?;
            if let Some(extra) = pending.remove(&i) {
                dy.add_assign(&extra)?;
            }
        }
        grads.reverse();
        self.clear_caches();
        Ok(grads)
    }

    /// Backward pass from the gradient with respect to the output probabilities.
    pub fn backward(&mut self, dprobs: Tensor) -> Result<Vec<ParamGrad>> {
        let top = self.layers.len() - 1;
        self.backward_from(top, dprobs)
    }

    /// Backward pass from the gradient with respect to the logits feeding the
    /// final softmax (the fused softmax + cross-entropy path).
    pub fn backward_logits(&mut self, dlogits: Tensor) -> Result<Vec<ParamGrad>> {
        let top = self.layers.len() - 1;
        self.layers[top].clear_cache();
        if top == 0 {
            return Ok(Vec::new());
        }
        self.backward_from(top - 1, dlogits)
    }

    /// Copies parameters and buffers of the body layers from `source`, whose
    /// body must have identical layer kinds.
    pub fn transplant_body(&mut self, source: &ModelGraph) -> Result<()> {
        let n = self.metadata.body_len;
        if source.metadata.body_len != n || source.input_shape != self.input_shape {
            return Err(Error::config(format!(
                "backbone {} does not match this model's body",
                source.metadata.arch
            )));
        }
        for i in 0..n {
            if source.layers[i].kind() != self.layers[i].kind() {
                return Err(Error::config(format!("backbone layer {i} has a different kind")));
            }
        }
        for i in 0..n {
            self.layers[i].state = source.layers[i].state.clone();
            self.layers[i].clear_cache();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
