//! Layer forward/backward passes with explicit train and infer modes.

mod gradcheck;

use std::borrow::Cow;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::QuantTensor;
use crate::tensor::kernels;
use crate::tensor::{ConvSpec, Element, Padding, PoolMode, Tensor};

pub use gradcheck::{grad_check, GRAD_CHECK_SEED};

pub const BN_EPSILON: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv { spec: ConvSpec, bias: bool },
    DepthwiseConv { spec: ConvSpec },
    PointwiseConv { spec: ConvSpec, bias: bool },
    BatchNorm { channels: usize, eps: f32, momentum: f32 },
    Relu,
    Relu6,
    Dense { inputs: usize, units: usize },
    Dropout { rate: f32 },
    MaxPool { window: usize, stride: usize },
    MeanPool { window: usize, stride: usize },
    Flatten,
    Softmax,
    /// Adds the input of layer `from` (an earlier layer) to this layer's input.
    ResidualAdd { from: usize },
}

impl LayerKind {
    pub fn batch_norm(channels: usize) -> Self {
        LayerKind::BatchNorm {
            channels,
            eps: BN_EPSILON,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn pointwise(cin: usize, cout: usize, bias: bool) -> Self {
        LayerKind::PointwiseConv {
            spec: ConvSpec::new(1, 1, Padding::Same, cin, cout),
            bias,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv { .. } => "conv",
            LayerKind::DepthwiseConv { .. } => "depthwise_conv",
            LayerKind::PointwiseConv { .. } => "pointwise_conv",
            LayerKind::BatchNorm { .. } => "batchnorm",
            LayerKind::Relu => "relu",
            LayerKind::Relu6 => "relu6",
            LayerKind::Dense { .. } => "dense",
            LayerKind::Dropout { .. } => "dropout",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::MeanPool { .. } => "meanpool",
            LayerKind::Flatten => "flatten",
            LayerKind::Softmax => "softmax",
            LayerKind::ResidualAdd { .. } => "residual_add",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LayerKind::Conv { spec, .. } => spec.validate(),
            LayerKind::DepthwiseConv { spec } => {
                spec.validate()?;
                if spec.in_channels != spec.out_channels {
                    return Err(Error::config("depthwise conv needs in == out channels"));
                }
                Ok(())
            }
            LayerKind::PointwiseConv { spec, .. } => {
                spec.validate()?;
                if spec.kernel_h != 1 || spec.kernel_w != 1 || spec.stride != 1 {
                    return Err(Error::config("pointwise conv must be 1x1 stride 1"));
                }
                Ok(())
            }
            LayerKind::BatchNorm { channels, eps, momentum } => {
                if channels == 0 || eps <= 0.0 || !(0.0..1.0).contains(&momentum) {
                    return Err(Error::config("invalid batchnorm hyperparameters"));
                }
                Ok(())
            }
            LayerKind::Dense { inputs, units } => {
                if inputs == 0 || units == 0 {
                    return Err(Error::config("dense layer needs inputs >= 1 and units >= 1"));
                }
                Ok(())
            }
            LayerKind::Dropout { rate } => {
                if !(0.0..1.0).contains(&rate) {
                    return Err(Error::config(format!("dropout rate {rate} outside [0, 1)")));
                }
                Ok(())
            }
            LayerKind::MaxPool { window, stride } | LayerKind::MeanPool { window, stride } => {
                if window == 0 || stride == 0 {
                    return Err(Error::config("pool window and stride must be positive"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Per-sample output shape (no batch axis) for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let spatial = |what: &str| -> Result<(usize, usize, usize)> {
            match input {
                [h, w, c] => Ok((*h, *w, *c)),
                _ => Err(Error::shape(format!("{what} expects [h, w, c], got {input:?}"))),
            }
        };
        match *self {
            LayerKind::Conv { spec, .. }
            | LayerKind::PointwiseConv { spec, .. }
            | LayerKind::DepthwiseConv { spec } => {
                let (h, w, c) = spatial(self.name())?;
                if c != spec.in_channels {
                    return Err(Error::shape(format!(
                        "{} expects {} channels, got {c}",
                        self.name(),
                        spec.in_channels
                    )));
                }
                let (oh, ow) = spec.output_hw(h, w)?;
                Ok(vec![oh, ow, spec.out_channels])
            }
            LayerKind::BatchNorm { channels, .. } => {
                if input.last() != Some(&channels) {
                    return Err(Error::shape(format!(
                        "batchnorm over {channels} channels got {input:?}"
                    )));
                }
                Ok(input.to_vec())
            }
            LayerKind::Dense { inputs, units } => {
                if input != [inputs] {
                    return Err(Error::shape(format!(
                        "dense expects [{inputs}], got {input:?}"
                    )));
                }
                Ok(vec![units])
            }
            LayerKind::MaxPool { window, stride } | LayerKind::MeanPool { window, stride } => {
                let (h, w, c) = spatial(self.name())?;
                if window > h || window > w {
                    return Err(Error::shape(format!(
                        "pool window {window} exceeds extent {h}x{w}"
                    )));
                }
                Ok(vec![(h - window) / stride + 1, (w - window) / stride + 1, c])
            }
            LayerKind::Flatten => Ok(vec![input.iter().product()]),
            LayerKind::Softmax => {
                if input.len() != 1 {
                    return Err(Error::shape(format!("softmax expects [k], got {input:?}")));
                }
                Ok(input.to_vec())
            }
            LayerKind::Relu
            | LayerKind::Relu6
            | LayerKind::Dropout { .. }
            | LayerKind::ResidualAdd { .. } => Ok(input.to_vec()),
        }
    }

    /// Names and shapes of the learnable parameters.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            LayerKind::Conv { spec, bias } | LayerKind::PointwiseConv { spec, bias } => {
                let mut v = vec![(
                    "weight",
                    vec![spec.kernel_h, spec.kernel_w, spec.in_channels, spec.out_channels],
                )];
                if bias {
                    v.push(("bias", vec![spec.out_channels]));
                }
                v
            }
            LayerKind::DepthwiseConv { spec } => {
                vec![("weight", vec![spec.kernel_h, spec.kernel_w, spec.in_channels])]
            }
            LayerKind::BatchNorm { channels, .. } => {
                vec![("gamma", vec![channels]), ("beta", vec![channels])]
            }
            LayerKind::Dense { inputs, units } => {
                vec![("weight", vec![inputs, units]), ("bias", vec![units])]
            }
            _ => Vec::new(),
        }
    }

    pub fn buffer_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            LayerKind::BatchNorm { channels, .. } => vec![
                ("running_mean", vec![channels]),
                ("running_var", vec![channels]),
            ],
            _ => Vec::new(),
        }
    }

    /// Fan-in used for He-uniform initialisation of the weight tensor.
    fn fan_in(&self) -> Option<usize> {
        match *self {
            LayerKind::Conv { spec, .. } | LayerKind::PointwiseConv { spec, .. } => {
                Some(spec.kernel_h * spec.kernel_w * spec.in_channels)
            }
            LayerKind::DepthwiseConv { spec } => Some(spec.kernel_h * spec.kernel_w),
            LayerKind::Dense { inputs, .. } => Some(inputs),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub trainable: bool,
}

impl LayerSpec {
    pub fn new(kind: LayerKind) -> Self {
        Self {
            kind,
            trainable: true,
        }
    }
}

/// Parameter storage: plain tensor, or a quantized payload.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamData<T: Element = f32> {
    Dense(Tensor<T>),
    Quantized(QuantTensor<T>),
}

impl<T: Element> ParamData<T> {
    /// The parameter as a float tensor. Quantized parameters without a
    /// populated cache are dequantized on the fly.
    pub fn view(&self) -> Cow<'_, Tensor<T>> {
        match self {
            ParamData::Dense(t) => Cow::Borrowed(t),
            ParamData::Quantized(q) => match q.cache() {
                Some(t) => Cow::Borrowed(t),
                None => Cow::Owned(q.dequantize()),
            },
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            ParamData::Dense(t) => t.shape(),
            ParamData::Quantized(q) => q.shape(),
        }
    }

    pub fn len(&self) -> usize {
        self.shape().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_dense(&self) -> Option<&Tensor<T>> {
        match self {
            ParamData::Dense(t) => Some(t),
            ParamData::Quantized(_) => None,
        }
    }

    pub fn as_dense_mut(&mut self) -> Result<&mut Tensor<T>> {
        match self {
            ParamData::Dense(t) => Ok(t),
            ParamData::Quantized(_) => Err(Error::config("cannot update a quantized parameter")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T: Element = f32> {
    pub name: String,
    pub data: ParamData<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Buffer<T: Element = f32> {
    pub name: String,
    pub data: Tensor<T>,
}

#[derive(Debug, Clone)]
enum Cache<T: Element> {
    Input(Tensor<T>),
    Norm { x_hat: Tensor<T>, inv_std: Vec<T> },
    FrozenNorm { scale: Vec<T> },
    Mask(Vec<T>),
    Argmax { input_shape: Vec<usize>, argmax: Vec<u32> },
    Shape(Vec<usize>),
    Output(Tensor<T>),
    Residual,
}

#[derive(Debug, Clone, Default)]
pub struct LayerState<T: Element = f32> {
    pub params: Vec<Param<T>>,
    pub buffers: Vec<Buffer<T>>,
    cache: Option<Cache<T>>,
}

impl<T: Element> PartialEq for LayerState<T> {
    /// Compares parameters and buffers; the transient cache is ignored.
    fn eq(&self, other: &Self) -> bool {
        self.params == other.params && self.buffers == other.buffers
    }
}

impl<T: Element> LayerState<T> {
    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }
}

/// Output of [`Layer::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T: Element = f32> {
    pub input: Option<Tensor<T>>,
    /// Gradient for the skip operand of a residual add.
    pub skip: Option<Tensor<T>>,
    /// Empty for frozen layers.
    pub params: Vec<(String, Tensor<T>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T: Element = f32> {
    pub spec: LayerSpec,
    pub state: LayerState<T>,
}

fn channel_rows<T: Element>(x: &Tensor<T>, channels: usize) -> Result<usize> {
    if x.rank() < 2 || x.shape().last() != Some(&channels) {
        return Err(Error::shape(format!(
            "batchnorm over {channels} channels got {:?}",
            x.shape()
        )));
    }
    Ok(x.len() / channels)
}

fn batch_of<T: Element>(x: &Tensor<T>) -> usize {
    x.shape()[0]
}

impl<T: Element> Layer<T> {
    /// Builds a layer with He-uniform weights, zero biases, unit gamma and
    /// identity batchnorm statistics.
    pub fn new<R: Rng + ?Sized>(spec: LayerSpec, rng: &mut R) -> Result<Self> {
        spec.kind.validate()?;
        let mut params = Vec::new();
        for (name, shape) in spec.kind.param_shapes() {
            let t = match name {
                "weight" => {
                    let fan_in = spec.kind.fan_in().unwrap_or(1) as f64;
                    let limit = (6.0 / fan_in).sqrt();
                    Tensor::from_fn(&shape, |_| {
                        T::from_f64((rng.random::<f64>() * 2.0 - 1.0) * limit)
                    })?
                }
                "gamma" => Tensor::full(&shape, T::one())?,
                _ => Tensor::zeros(&shape)?,
            };
            params.push(Param {
                name: name.to_string(),
                data: ParamData::Dense(t),
            });
        }
        let buffers = spec
            .kind
            .buffer_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let fill = if name == "running_var" { T::one() } else { T::zero() };
                Ok(Buffer {
                    name: name.to_string(),
                    data: Tensor::full(&shape, fill)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            spec,
            state: LayerState {
                params,
                buffers,
                cache: None,
            },
        })
    }

    pub fn kind(&self) -> &LayerKind {
        &self.spec.kind
    }

    pub fn trainable(&self) -> bool {
        self.spec.trainable
    }

    pub fn param(&self, name: &str) -> Result<&ParamData<T>> {
        self.state
            .params
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.data)
            .ok_or_else(|| Error::State(format!("{} has no parameter {name}", self.kind().name())))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor<T>> {
        self.state
            .buffers
            .iter()
            .find(|b| b.name == name)
            .map(|b| &b.data)
            .ok_or_else(|| Error::State(format!("{} has no buffer {name}", self.kind().name())))
    }

    fn buffer_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        let kind = self.kind().name();
        self.state
            .buffers
            .iter_mut()
            .find(|b| b.name == name)
            .map(|b| &mut b.data)
            .ok_or_else(|| Error::State(format!("{kind} has no buffer {name}")))
    }

    pub fn param_count(&self) -> usize {
        self.state.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn clear_cache(&mut self) {
        self.state.cache = None;
    }

    fn bias(&self) -> Result<Option<Cow<'_, Tensor<T>>>> {
        match self.state.params.iter().find(|p| p.name == "bias") {
            Some(p) => Ok(Some(p.data.view())),
            None => Ok(None),
        }
    }

    /// Infer-mode batchnorm as a per-channel affine map `x * scale + shift`.
    fn norm_affine(&self) -> Result<(Vec<T>, Vec<T>)> {
        let LayerKind::BatchNorm { eps, .. } = *self.kind() else {
            unreachable!("norm_affine on non-batchnorm layer");
        };
        let gamma = self.param("gamma")?.view();
        let beta = self.param("beta")?.view();
        let mean = self.buffer("running_mean")?;
        let var = self.buffer("running_var")?;
        let eps = T::from_f32(eps);
        let scale: Vec<T> = gamma
            .data()
            .iter()
            .zip(var.data())
            .map(|(&g, &v)| g / (v + eps).sqrt())
            .collect();
        let shift = beta
            .data()
            .iter()
            .zip(mean.data())
            .zip(&scale)
            .map(|((&b, &m), &s)| b - m * s)
            .collect();
        Ok((scale, shift))
    }

    /// Read-only inference pass. Safe to call concurrently on a shared layer.
    pub fn infer(&self, input: &Tensor<T>, skip: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        match *self.kind() {
            LayerKind::BatchNorm { channels, .. } => {
                channel_rows(input, channels)?;
                let (scale, shift) = self.norm_affine()?;
                Ok(apply_affine(input, &scale, &shift))
            }
            LayerKind::Dropout { .. } => Ok(input.clone()),
            _ => self.stateless_forward(input, skip),
        }
    }

    /// Forward passes that are identical in train and infer mode.
    fn stateless_forward(&self, x: &Tensor<T>, skip: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        match *self.kind() {
            LayerKind::Conv { spec, .. } | LayerKind::PointwiseConv { spec, .. } => {
                let w = self.param("weight")?.view();
                let b = self.bias()?;
                kernels::conv2d_forward(x, &spec, &w, b.as_ref().map(|b| b.data()))
            }
            LayerKind::DepthwiseConv { spec } => {
                let w = self.param("weight")?.view();
                kernels::depthwise_forward(x, &spec, &w)
            }
            LayerKind::Dense { .. } => {
                let w = self.param("weight")?.view();
                let b = self.param("bias")?.view();
                kernels::dense_forward(x, &w, b.data())
            }
            LayerKind::Relu => Ok(x.map(|v| if v > T::zero() { v } else { T::zero() })),
            LayerKind::Relu6 => {
                let six = T::from_f64(6.0);
                Ok(x.map(|v| v.max(T::zero()).min(six)))
            }
            LayerKind::MaxPool { window, stride } => {
                Ok(kernels::pool_forward(x, window, stride, PoolMode::Max)?.0)
            }
            LayerKind::MeanPool { window, stride } => {
                Ok(kernels::pool_forward(x, window, stride, PoolMode::Mean)?.0)
            }
            LayerKind::Flatten => {
                let n = batch_of(x);
                x.clone().reshape(&[n, x.len() / n])
            }
            LayerKind::Softmax => softmax_rows(x),
            LayerKind::ResidualAdd { .. } => {
                let skip = skip.ok_or_else(|| Error::config("residual add needs a skip input"))?;
                x.add(skip)
            }
            LayerKind::BatchNorm { .. } | LayerKind::Dropout { .. } => {
                unreachable!("stateful layers are handled by the caller")
            }
        }
    }

    /// Forward pass. In train mode the layer caches what `backward` needs and
    /// batchnorm updates its running statistics (unless frozen). Infer mode
    /// clears the cache.
    pub fn forward(
        &mut self,
        input: &Tensor<T>,
        skip: Option<&Tensor<T>>,
        mode: Mode,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Tensor<T>> {
        if mode == Mode::Infer {
            self.state.cache = None;
            return self.infer(input, skip);
        }
        let (out, cache) = match *self.kind() {
            LayerKind::BatchNorm { channels, momentum, eps } => {
                let rows = channel_rows(input, channels)?;
                if self.trainable() {
                    self.batch_norm_train(input, channels, rows, eps, momentum)?
                } else {
                    let (scale, shift) = self.norm_affine()?;
                    (apply_affine(input, &scale, &shift), Cache::FrozenNorm { scale })
                }
            }
            LayerKind::Dropout { rate } => {
                let rng = rng.ok_or_else(|| {
                    Error::config("dropout in train mode needs a random generator")
                })?;
                let keep = 1.0 - rate as f64;
                let scale = T::from_f64(1.0 / keep);
                let mask: Vec<T> = (0..input.len())
                    .map(|_| {
                        if rng.random::<f64>() < keep {
                            scale
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                let mut out = input.clone();
                for (o, &m) in out.data_mut().iter_mut().zip(&mask) {
                    *o = *o * m;
                }
                (out, Cache::Mask(mask))
            }
            LayerKind::MaxPool { window, stride } => {
                let (out, argmax) = kernels::pool_forward(input, window, stride, PoolMode::Max)?;
                (
                    out,
                    Cache::Argmax {
                        input_shape: input.shape().to_vec(),
                        argmax,
                    },
                )
            }
            LayerKind::MeanPool { .. } | LayerKind::Flatten => (
                self.stateless_forward(input, skip)?,
                Cache::Shape(input.shape().to_vec()),
            ),
            LayerKind::Softmax => {
                let out = self.stateless_forward(input, skip)?;
                (out.clone(), Cache::Output(out))
            }
            LayerKind::ResidualAdd { .. } => (self.stateless_forward(input, skip)?, Cache::Residual),
            _ => (
                self.stateless_forward(input, skip)?,
                Cache::Input(input.clone()),
            ),
        };
        self.state.cache = Some(cache);
        Ok(out)
    }

    fn batch_norm_train(
        &mut self,
        x: &Tensor<T>,
        c: usize,
        rows: usize,
        eps: f32,
        momentum: f32,
    ) -> Result<(Tensor<T>, Cache<T>)> {
        let mut mean = vec![0.0f64; c];
        for row in x.data().chunks(c) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v.to_f64();
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0f64; c];
        for row in x.data().chunks(c) {
            for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                let d = v.to_f64() - m;
                *s += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= rows as f64);

        let inv_std: Vec<T> = var
            .iter()
            .map(|&v| T::from_f64(1.0 / (v + eps as f64).sqrt()))
            .collect();
        let mean_t: Vec<T> = mean.iter().map(|&m| T::from_f64(m)).collect();
        let mut x_hat = x.clone();
        for row in x_hat.data_mut().chunks_mut(c) {
            for ((v, &m), &s) in row.iter_mut().zip(&mean_t).zip(&inv_std) {
                *v = (*v - m) * s;
            }
        }
        let gamma = self.param("gamma")?.view().into_owned();
        let beta = self.param("beta")?.view().into_owned();
        let mut out = x_hat.clone();
        for row in out.data_mut().chunks_mut(c) {
            for ((v, &g), &b) in row.iter_mut().zip(gamma.data()).zip(beta.data()) {
                *v = *v * g + b;
            }
        }

        let mom = T::from_f32(momentum);
        let rest = T::one() - mom;
        for (r, &m) in self.buffer_mut("running_mean")?.data_mut().iter_mut().zip(&mean) {
            *r = mom * *r + rest * T::from_f64(m);
        }
        for (r, &v) in self.buffer_mut("running_var")?.data_mut().iter_mut().zip(&var) {
            *r = mom * *r + rest * T::from_f64(v);
        }
        Ok((out, Cache::Norm { x_hat, inv_std }))
    }

    /// Gradients of the loss with respect to the input and every parameter,
    /// given the gradient with respect to this layer's output.
    pub fn backward(&mut self, upstream: &Tensor<T>) -> Result<Gradients<T>> {
        self.backward_with(upstream, true)
    }

    /// Like [`backward`](Self::backward), optionally skipping the input gradient.
    pub fn backward_with(&mut self, dy: &Tensor<T>, want_input: bool) -> Result<Gradients<T>> {
        let cache = self.state.cache.take().ok_or_else(|| {
            Error::State(format!(
                "{} backward without a cached train-mode forward",
                self.kind().name()
            ))
        })?;
        let trainable = self.trainable();
        let mut params = Vec::new();
        let mut skip = None;
        let input = match (*self.kind(), cache) {
            (LayerKind::Conv { spec, bias } | LayerKind::PointwiseConv { spec, bias }, Cache::Input(x)) => {
                let w = self.param("weight")?.view();
                let g = kernels::conv2d_backward(&x, &spec, &w, dy, want_input)?;
                if trainable {
                    params.push(("weight".to_string(), g.weight));
                    if bias {
                        params.push((
                            "bias".to_string(),
                            Tensor::new(&[spec.out_channels], g.bias)?,
                        ));
                    }
                }
                g.input
            }
            (LayerKind::DepthwiseConv { spec }, Cache::Input(x)) => {
                let w = self.param("weight")?.view();
                let (dx, dw) = kernels::depthwise_backward(&x, &spec, &w, dy, want_input)?;
                if trainable {
                    params.push(("weight".to_string(), dw));
                }
                dx
            }
            (LayerKind::Dense { units, .. }, Cache::Input(x)) => {
                let w = self.param("weight")?.view();
                let g = kernels::dense_backward(&x, &w, dy, want_input)?;
                if trainable {
                    params.push(("weight".to_string(), g.weight));
                    params.push(("bias".to_string(), Tensor::new(&[units], g.bias)?));
                }
                g.input
            }
            (LayerKind::BatchNorm { channels, .. }, Cache::Norm { x_hat, inv_std }) => {
                check_same(dy, &x_hat)?;
                let c = channels;
                let rows = (x_hat.len() / c) as f64;
                let gamma = self.param("gamma")?.view().into_owned();
                let mut sum_dy = vec![0.0f64; c];
                let mut sum_dy_xhat = vec![0.0f64; c];
                for (g_row, x_row) in dy.data().chunks(c).zip(x_hat.data().chunks(c)) {
                    for ch in 0..c {
                        let g = g_row[ch].to_f64();
                        sum_dy[ch] += g;
                        sum_dy_xhat[ch] += g * x_row[ch].to_f64();
                    }
                }
                if trainable {
                    let to_t = |v: &[f64]| v.iter().map(|&s| T::from_f64(s)).collect::<Vec<T>>();
                    params.push(("gamma".to_string(), Tensor::new(&[c], to_t(&sum_dy_xhat))?));
                    params.push(("beta".to_string(), Tensor::new(&[c], to_t(&sum_dy))?));
                }
                want_input.then(|| {
                    let mut dx = x_hat.clone();
                    for ((d_row, g_row), x_row) in dx
                        .data_mut()
                        .chunks_mut(c)
                        .zip(dy.data().chunks(c))
                        .zip(x_hat.data().chunks(c))
                    {
                        for ch in 0..c {
                            let gs = gamma.data()[ch].to_f64();
                            let k = gs * inv_std[ch].to_f64() / rows;
                            let v = rows * g_row[ch].to_f64()
                                - sum_dy[ch]
                                - x_row[ch].to_f64() * sum_dy_xhat[ch];
                            d_row[ch] = T::from_f64(k * v);
                        }
                    }
                    dx
                })
            }
            (LayerKind::BatchNorm { channels, .. }, Cache::FrozenNorm { scale }) => {
                channel_rows(dy, channels)?;
                let zero = vec![T::zero(); channels];
                Some(apply_affine(dy, &scale, &zero))
            }
            (LayerKind::Relu, Cache::Input(x)) => {
                check_same(dy, &x)?;
                Some(gate(dy, &x, |v| v > T::zero()))
            }
            (LayerKind::Relu6, Cache::Input(x)) => {
                check_same(dy, &x)?;
                let six = T::from_f64(6.0);
                Some(gate(dy, &x, |v| v > T::zero() && v < six))
            }
            (LayerKind::Dropout { .. }, Cache::Mask(mask)) => {
                if mask.len() != dy.len() {
                    return Err(Error::shape("dropout upstream gradient size mismatch"));
                }
                let mut dx = dy.clone();
                for (d, &m) in dx.data_mut().iter_mut().zip(&mask) {
                    *d = *d * m;
                }
                Some(dx)
            }
            (LayerKind::MaxPool { window, stride }, Cache::Argmax { input_shape, argmax }) => Some(
                kernels::pool_backward(&input_shape, window, stride, PoolMode::Max, &argmax, dy)?,
            ),
            (LayerKind::MeanPool { window, stride }, Cache::Shape(shape)) => Some(
                kernels::pool_backward(&shape, window, stride, PoolMode::Mean, &[], dy)?,
            ),
            (LayerKind::Flatten, Cache::Shape(shape)) => Some(dy.clone().reshape(&shape)?),
            (LayerKind::Softmax, Cache::Output(y)) => {
                check_same(dy, &y)?;
                let k = *y.shape().last().unwrap_or(&1);
                let mut dx = dy.clone();
                for (d_row, y_row) in dx.data_mut().chunks_mut(k).zip(y.data().chunks(k)) {
                    let dot = d_row
                        .iter()
                        .zip(y_row)
                        .fold(T::zero(), |a, (&d, &y)| a + d * y);
                    for (d, &yv) in d_row.iter_mut().zip(y_row) {
                        *d = yv * (*d - dot);
                    }
                }
                Some(dx)
            }
            (LayerKind::ResidualAdd { .. }, Cache::Residual) => {
                skip = Some(dy.clone());
                Some(dy.clone())
            }
            (kind, _) => {
                return Err(Error::State(format!(
                    "cache does not match layer kind {}",
                    kind.name()
                )))
            }
        };
        Ok(Gradients {
            input: if want_input { input } else { None },
            skip,
            params,
        })
    }
}

fn check_same<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "upstream gradient {:?} does not match cached {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn gate<T: Element>(dy: &Tensor<T>, x: &Tensor<T>, pass: impl Fn(T) -> bool) -> Tensor<T> {
    let mut dx = dy.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        if !pass(v) {
            *d = T::zero();
        }
    }
    dx
}

fn apply_affine<T: Element>(x: &Tensor<T>, scale: &[T], shift: &[T]) -> Tensor<T> {
    let c = scale.len();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c) {
        for ((v, &s), &b) in row.iter_mut().zip(scale).zip(shift) {
            *v = *v * s + b;
        }
    }
    out
}

/// Row-wise softmax over the last axis of a `[n, k]` tensor.
pub fn softmax_rows<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 2 {
        return Err(Error::shape(format!("softmax expects [n, k], got {:?}", x.shape())));
    }
    let k = x.shape()[1];
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(k) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    Ok(out)
}
