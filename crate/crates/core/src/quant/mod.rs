//! Post-training weight quantization and the threaded inference engine.
//!
//! Two storage modes are supported. `F16` stores weights as IEEE half
//! precision. `I8Dynamic` stores weights as symmetric per-tensor int8 with
//! `scale = max|w| / 127`. In both modes activations and arithmetic stay f32:
//! weights are widened back to f32, once, into a cache that inference reads.

mod engine;

use std::fmt;

use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{LayerKind, ParamData};
use crate::model::ModelGraph;
use crate::tensor::{DType, Element, Tensor};

pub use engine::{bench, infer, BenchRecord, BenchReport, InferenceEngine};

pub const I8_LIMIT: i8 = 127;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantMode {
    F16,
    I8Dynamic,
}

impl fmt::Display for QuantMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QuantMode::F16 => "f16",
            QuantMode::I8Dynamic => "i8",
        })
    }
}

impl std::str::FromStr for QuantMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f16" => Ok(QuantMode::F16),
            "i8" | "i8_dynamic" => Ok(QuantMode::I8Dynamic),
            other => Err(Error::config(format!("unknown quantization mode {other:?}"))),
        }
    }
}

/// A quantized parameter payload with an optional widened cache.
#[derive(Clone)]
pub struct QuantTensor<T: Element = f32> {
    mode: QuantMode,
    shape: Vec<usize>,
    /// Little-endian f16 pairs, or one two's-complement byte per i8 value.
    payload: Vec<u8>,
    /// Per-tensor scale; 1.0 for f16.
    scale: f32,
    cache: Option<Tensor<T>>,
}

impl<T: Element> PartialEq for QuantTensor<T> {
    /// Payload equality; the dequantization cache is derived state.
    fn eq(&self, other: &Self) -> bool {
        self.mode == other.mode
            && self.shape == other.shape
            && self.payload == other.payload
            && self.scale.to_bits() == other.scale.to_bits()
    }
}

impl<T: Element> fmt::Debug for QuantTensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("QuantTensor")
            .field("mode", &self.mode)
            .field("shape", &self.shape)
            .field("scale", &self.scale)
            .field("cached", &self.cache.is_some())
            .finish()
    }
}

/// Symmetric int8 scale for a tensor; 1.0 when every value is zero.
pub fn i8_scale(values: impl Iterator<Item = f64>) -> f32 {
    let max = values.fold(0.0f64, |m, v| m.max(v.abs()));
    if max == 0.0 {
        1.0
    } else {
        (max / I8_LIMIT as f64) as f32
    }
}

/// `round(w / scale)` clamped to `[-127, 127]`, computed in f64.
pub fn quantize_i8_value(w: f64, scale: f32) -> i8 {
    (w / scale as f64)
        .round()
        .clamp(-(I8_LIMIT as f64), I8_LIMIT as f64) as i8
}

impl<T: Element> QuantTensor<T> {
    pub fn quantize(t: &Tensor<T>, mode: QuantMode) -> Self {
        match mode {
            QuantMode::F16 => Self::quantize_f16(t),
            QuantMode::I8Dynamic => Self::quantize_i8(t),
        }
    }

    /// Round-to-nearest-even conversion to IEEE half precision.
    pub fn quantize_f16(t: &Tensor<T>) -> Self {
        let payload = t
            .data()
            .iter()
            .flat_map(|&v| f16::from_f64(Element::to_f64(v)).to_le_bytes())
            .collect();
        Self {
            mode: QuantMode::F16,
            shape: t.shape().to_vec(),
            payload,
            scale: 1.0,
            cache: None,
        }
    }

    pub fn quantize_i8(t: &Tensor<T>) -> Self {
        let scale = i8_scale(t.data().iter().map(|&v| Element::to_f64(v)));
        let payload = t
            .data()
            .iter()
            .map(|&v| quantize_i8_value(Element::to_f64(v), scale) as u8)
            .collect();
        Self {
            mode: QuantMode::I8Dynamic,
            shape: t.shape().to_vec(),
            payload,
            scale,
            cache: None,
        }
    }

    /// Rebuilds a tensor from a stored payload, validating its length and,
    /// for int8, the scale and value range.
    pub fn from_parts(mode: QuantMode, shape: Vec<usize>, payload: Vec<u8>, scale: f32) -> Result<Self> {
        let n: usize = shape.iter().product();
        let expected = match mode {
            QuantMode::F16 => n * 2,
            QuantMode::I8Dynamic => n,
        };
        if payload.len() != expected {
            return Err(Error::shape(format!(
                "{mode} payload of {} bytes for shape {shape:?}",
                payload.len()
            )));
        }
        if mode == QuantMode::I8Dynamic {
            if !(scale > 0.0 && scale.is_finite()) {
                return Err(Error::config(format!("int8 scale {scale} must be positive")));
            }
            if payload.iter().any(|&b| b as i8 == i8::MIN) {
                return Err(Error::config("int8 payload contains -128"));
            }
        }
        Ok(Self {
            mode,
            shape,
            payload,
            scale,
            cache: None,
        })
    }

    pub fn mode(&self) -> QuantMode {
        self.mode
    }

    pub fn dtype(&self) -> DType {
        match self.mode {
            QuantMode::F16 => DType::F16,
            QuantMode::I8Dynamic => DType::I8,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn i8_values(&self) -> Option<Vec<i8>> {
        (self.mode == QuantMode::I8Dynamic).then(|| self.payload.iter().map(|&b| b as i8).collect())
    }

    /// Widened values: `scale * q` for int8, exact widening for f16.
    pub fn dequantize(&self) -> Tensor<T> {
        let data: Vec<T> = match self.mode {
            QuantMode::F16 => self
                .payload
                .chunks_exact(2)
                .map(|b| T::from_f32(f16::from_le_bytes([b[0], b[1]]).to_f32()))
                .collect(),
            QuantMode::I8Dynamic => self
                .payload
                .iter()
                .map(|&b| T::from_f32(self.scale * (b as i8) as f32))
                .collect(),
        };
        Tensor::new(&self.shape, data).expect("payload length validated at construction")
    }

    pub fn cache(&self) -> Option<&Tensor<T>> {
        self.cache.as_ref()
    }

    /// Populates the cache if empty. Returns whether work was done.
    pub fn ensure_cache(&mut self) -> bool {
        if self.cache.is_some() {
            return false;
        }
        self.cache = Some(self.dequantize());
        true
    }

    pub fn drop_cache(&mut self) {
        self.cache = None;
    }
}

/// Whether a parameter is a weight tensor (quantized) rather than a bias or
/// batchnorm scale/shift (kept f32).
pub fn is_quantizable(kind: &LayerKind, param: &str) -> bool {
    param == "weight"
        && matches!(
            kind,
            LayerKind::Conv { .. }
                | LayerKind::DepthwiseConv { .. }
                | LayerKind::PointwiseConv { .. }
                | LayerKind::Dense { .. }
        )
}

/// Copy of `graph` with every weight tensor quantized. Biases, batchnorm
/// parameters and buffers are untouched.
pub fn quantize(graph: &ModelGraph, mode: QuantMode) -> Result<ModelGraph> {
    let mut out = graph.clone();
    for layer in &mut out.layers {
        let kind = layer.spec.kind;
        for p in &mut layer.state.params {
            if !is_quantizable(&kind, &p.name) {
                continue;
            }
            let ParamData::Dense(t) = &p.data else {
                return Err(Error::config("graph is already quantized"));
            };
            p.data = ParamData::Quantized(QuantTensor::quantize(t, mode));
        }
        layer.clear_cache();
    }
    Ok(out)
}

/// Materializes the f32 cache of every quantized weight. Idempotent; returns
/// the number of tensors that were widened by this call.
pub fn dequantize_once(graph: &mut ModelGraph) -> usize {
    graph
        .layers
        .iter_mut()
        .flat_map(|l| l.state.params.iter_mut())
        .filter_map(|p| match &mut p.data {
            ParamData::Quantized(q) => Some(q.ensure_cache()),
            ParamData::Dense(_) => None,
        })
        .filter(|&did| did)
        .count()
}
