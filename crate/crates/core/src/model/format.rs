//! Binary model files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "BNLT" | u16 version | u16 flags (bit 0: f16 tensors, bit 1: i8 tensors)
//! u32 metadata length | metadata JSON (UTF-8)
//! u32 layer count | per layer: u8 kind tag, u16 hyperparameter length,
//!                              hyperparameters, u8 trainable
//! u32 tensor count | per tensor: u16 name length, name ("<layer>.<name>"),
//!                    u8 dtype (0 f32, 1 f16, 2 i8), u8 rank, u32 extents,
//!                    f32 scale (i8 only), payload
//! u32 CRC32 of every preceding byte
//! ```

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Metadata, ModelGraph};
use crate::error::{Error, FormatError, Result};
use crate::layers::{Buffer, Layer, LayerKind, LayerSpec, LayerState, Param, ParamData};
use crate::quant::{QuantMode, QuantTensor};
use crate::tensor::{ConvSpec, Padding, Tensor};

pub const MAGIC: [u8; 4] = *b"BNLT";
pub const FORMAT_VERSION: u16 = 1;

const FLAG_F16: u16 = 1;
const FLAG_I8: u16 = 2;

const DTYPE_F32: u8 = 0;
const DTYPE_F16: u8 = 1;
const DTYPE_I8: u8 = 2;

/// The JSON metadata block.
#[derive(Serialize, Deserialize)]
struct Header {
    input_shape: [usize; 3],
    class_names: Vec<String>,
    #[serde(flatten)]
    metadata: Metadata,
}

/// Writer that keeps a running CRC of everything written through it.
struct Checksummed<W> {
    inner: W,
    crc: crc32fast::Hasher,
}

impl<W: Write> Checksummed<W> {
    fn bytes(&mut self, b: &[u8]) -> std::io::Result<()> {
        self.crc.update(b);
        self.inner.write_all(b)
    }

    fn u8(&mut self, v: u8) -> std::io::Result<()> {
        self.bytes(&[v])
    }

    fn u16(&mut self, v: u16) -> std::io::Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    fn u32(&mut self, v: u32) -> std::io::Result<()> {
        self.bytes(&v.to_le_bytes())
    }
}

fn kind_tag(kind: &LayerKind) -> u8 {
    match kind {
        LayerKind::Conv { .. } => 0,
        LayerKind::DepthwiseConv { .. } => 1,
        LayerKind::PointwiseConv { .. } => 2,
        LayerKind::BatchNorm { .. } => 3,
        LayerKind::Relu => 4,
        LayerKind::Relu6 => 5,
        LayerKind::Dense { .. } => 6,
        LayerKind::Dropout { .. } => 7,
        LayerKind::MaxPool { .. } => 8,
        LayerKind::MeanPool { .. } => 9,
        LayerKind::Flatten => 10,
        LayerKind::Softmax => 11,
        LayerKind::ResidualAdd { .. } => 12,
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::config(format!("{what} {v} does not fit in u32")))
}

fn encode_conv(out: &mut Vec<u8>, spec: &ConvSpec) -> Result<()> {
    for v in [spec.kernel_h, spec.kernel_w, spec.stride] {
        out.extend(to_u32(v, "conv geometry")?.to_le_bytes());
    }
    out.push(match spec.padding {
        Padding::Same => 0,
        Padding::Valid => 1,
    });
    for v in [spec.in_channels, spec.out_channels] {
        out.extend(to_u32(v, "channel count")?.to_le_bytes());
    }
    Ok(())
}

fn encode_hyper(kind: &LayerKind) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let u32s = |vals: &[usize], out: &mut Vec<u8>| -> Result<()> {
        for &v in vals {
            out.extend(to_u32(v, "hyperparameter")?.to_le_bytes());
        }
        Ok(())
    };
    match kind {
        LayerKind::Conv { spec, bias } | LayerKind::PointwiseConv { spec, bias } => {
            encode_conv(&mut out, spec)?;
            out.push(*bias as u8);
        }
        LayerKind::DepthwiseConv { spec } => encode_conv(&mut out, spec)?,
        LayerKind::BatchNorm { channels, eps, momentum } => {
            u32s(&[*channels], &mut out)?;
            out.extend(eps.to_le_bytes());
            out.extend(momentum.to_le_bytes());
        }
        LayerKind::Dense { inputs, units } => u32s(&[*inputs, *units], &mut out)?,
        LayerKind::Dropout { rate } => out.extend(rate.to_le_bytes()),
        LayerKind::MaxPool { window, stride } | LayerKind::MeanPool { window, stride } => {
            u32s(&[*window, *stride], &mut out)?
        }
        LayerKind::ResidualAdd { from } => u32s(&[*from], &mut out)?,
        LayerKind::Relu | LayerKind::Relu6 | LayerKind::Flatten | LayerKind::Softmax => {}
    }
    Ok(out)
}

fn write_tensor<W: Write>(
    w: &mut Checksummed<W>,
    name: &str,
    data: &ParamData,
) -> Result<(), std::io::Error> {
    let name_len = u16::try_from(name.len()).expect("tensor names are short");
    w.u16(name_len)?;
    w.bytes(name.as_bytes())?;
    let shape = data.shape();
    let dtype = match data {
        ParamData::Dense(_) => DTYPE_F32,
        ParamData::Quantized(q) => match q.mode() {
            QuantMode::F16 => DTYPE_F16,
            QuantMode::I8Dynamic => DTYPE_I8,
        },
    };
    w.u8(dtype)?;
    w.u8(shape.len() as u8)?;
    for &d in shape {
        w.u32(d as u32)?;
    }
    match data {
        ParamData::Dense(t) => {
            let mut buf = Vec::with_capacity(t.len() * 4);
            for v in t.data() {
                buf.extend(v.to_le_bytes());
            }
            w.bytes(&buf)?;
        }
        ParamData::Quantized(q) => {
            if q.mode() == QuantMode::I8Dynamic {
                w.bytes(&q.scale().to_le_bytes())?;
            }
            w.bytes(q.payload())?;
        }
    }
    Ok(())
}

/// Serializes `graph` into `out`.
pub fn write_model<W: Write>(graph: &ModelGraph, out: W) -> Result<()> {
    graph.validate()?;
    let io = |e| Error::io("<model stream>", e);
    let mut w = Checksummed {
        inner: out,
        crc: crc32fast::Hasher::new(),
    };
    let mut flags = 0u16;
    for p in graph.layers.iter().flat_map(|l| &l.state.params) {
        if let ParamData::Quantized(q) = &p.data {
            flags |= match q.mode() {
                QuantMode::F16 => FLAG_F16,
                QuantMode::I8Dynamic => FLAG_I8,
            };
        }
    }
    w.bytes(&MAGIC).map_err(io)?;
    w.u16(FORMAT_VERSION).map_err(io)?;
    w.u16(flags).map_err(io)?;

    let header = serde_json::to_vec(&Header {
        input_shape: graph.input_shape,
        class_names: graph.class_names.clone(),
        metadata: graph.metadata.clone(),
    })?;
    w.u32(to_u32(header.len(), "metadata length")?).map_err(io)?;
    w.bytes(&header).map_err(io)?;

    w.u32(to_u32(graph.layers.len(), "layer count")?).map_err(io)?;
    for layer in &graph.layers {
        let hyper = encode_hyper(layer.kind())?;
        w.u8(kind_tag(layer.kind())).map_err(io)?;
        w.u16(hyper.len() as u16).map_err(io)?;
        w.bytes(&hyper).map_err(io)?;
        w.u8(layer.trainable() as u8).map_err(io)?;
    }

    let count: usize = graph
        .layers
        .iter()
        .map(|l| l.state.params.len() + l.state.buffers.len())
        .sum();
    w.u32(to_u32(count, "tensor count")?).map_err(io)?;
    for (i, layer) in graph.layers.iter().enumerate() {
        for p in &layer.state.params {
            write_tensor(&mut w, &format!("{i}.{}", p.name), &p.data).map_err(io)?;
        }
        for b in &layer.state.buffers {
            // Buffers are always stored as f32.
            write_tensor(&mut w, &format!("{i}.{}", b.name), &ParamData::Dense(b.data.clone()))
                .map_err(io)?;
        }
    }
    let crc = w.crc.clone().finalize();
    w.inner.write_all(&crc.to_le_bytes()).map_err(io)?;
    w.inner.flush().map_err(io)?;
    Ok(())
}

/// Writes `graph` to `path` through a temporary sibling file, so a reader
/// never observes a half-written model.
pub fn save(graph: &ModelGraph, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    write_model(graph, BufWriter::new(file))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], FormatError> {
        if self.buf.len() - self.pos < n {
            return Err(FormatError::Truncated(what));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, FormatError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &'static str) -> Result<f32, FormatError> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn usize(&mut self, what: &'static str) -> Result<usize, FormatError> {
        Ok(self.u32(what)? as usize)
    }
}

fn malformed(msg: impl Into<String>) -> FormatError {
    FormatError::Malformed(msg.into())
}

fn decode_conv(r: &mut Reader) -> Result<ConvSpec, FormatError> {
    let kernel_h = r.usize("conv hyperparameters")?;
    let kernel_w = r.usize("conv hyperparameters")?;
    let stride = r.usize("conv hyperparameters")?;
    let padding = match r.u8("conv hyperparameters")? {
        0 => Padding::Same,
        1 => Padding::Valid,
        other => return Err(malformed(format!("padding tag {other}"))),
    };
    Ok(ConvSpec {
        kernel_h,
        kernel_w,
        stride,
        padding,
        in_channels: r.usize("conv hyperparameters")?,
        out_channels: r.usize("conv hyperparameters")?,
    })
}

fn decode_kind(tag: u8, hyper: &[u8]) -> Result<LayerKind, FormatError> {
    let mut r = Reader { buf: hyper, pos: 0 };
    const H: &str = "layer hyperparameters";
    let kind = match tag {
        0 | 2 => {
            let spec = decode_conv(&mut r)?;
            let bias = r.u8(H)? != 0;
            if tag == 0 {
                LayerKind::Conv { spec, bias }
            } else {
                LayerKind::PointwiseConv { spec, bias }
            }
        }
        1 => LayerKind::DepthwiseConv {
            spec: decode_conv(&mut r)?,
        },
        3 => LayerKind::BatchNorm {
            channels: r.usize(H)?,
            eps: r.f32(H)?,
            momentum: r.f32(H)?,
        },
        4 => LayerKind::Relu,
        5 => LayerKind::Relu6,
        6 => LayerKind::Dense {
            inputs: r.usize(H)?,
            units: r.usize(H)?,
        },
        7 => LayerKind::Dropout { rate: r.f32(H)? },
        8 => LayerKind::MaxPool {
            window: r.usize(H)?,
            stride: r.usize(H)?,
        },
        9 => LayerKind::MeanPool {
            window: r.usize(H)?,
            stride: r.usize(H)?,
        },
        10 => LayerKind::Flatten,
        11 => LayerKind::Softmax,
        12 => LayerKind::ResidualAdd { from: r.usize(H)? },
        other => return Err(malformed(format!("unknown layer kind tag {other}"))),
    };
    if r.pos != hyper.len() {
        return Err(malformed(format!("trailing hyperparameter bytes for tag {tag}")));
    }
    Ok(kind)
}

struct Record {
    name: String,
    data: ParamData,
}

fn read_tensor(r: &mut Reader) -> Result<Record, FormatError> {
    let len = r.u16("tensor name length")? as usize;
    let name = std::str::from_utf8(r.take(len, "tensor name")?)
        .map_err(|_| malformed("tensor name is not UTF-8"))?
        .to_string();
    let dtype = r.u8("tensor dtype")?;
    let rank = r.u8("tensor rank")? as usize;
    if !(1..=crate::tensor::MAX_RANK).contains(&rank) {
        return Err(malformed(format!("tensor {name} has rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.usize("tensor extents")?);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| malformed(format!("tensor {name} is too large")))?;
    let bad = |e: Error| malformed(format!("tensor {name}: {e}"));
    let data = match dtype {
        DTYPE_F32 => {
            let bytes = r.take(n.checked_mul(4).ok_or_else(|| malformed("size overflow"))?, "tensor payload")?;
            let values = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            ParamData::Dense(Tensor::new(&shape, values).map_err(bad)?)
        }
        DTYPE_F16 => {
            let bytes = r.take(n.checked_mul(2).ok_or_else(|| malformed("size overflow"))?, "tensor payload")?;
            ParamData::Quantized(
                QuantTensor::from_parts(QuantMode::F16, shape, bytes.to_vec(), 1.0).map_err(bad)?,
            )
        }
        DTYPE_I8 => {
            let scale = r.f32("tensor scale")?;
            let bytes = r.take(n, "tensor payload")?;
            ParamData::Quantized(
                QuantTensor::from_parts(QuantMode::I8Dynamic, shape, bytes.to_vec(), scale)
                    .map_err(bad)?,
            )
        }
        other => return Err(malformed(format!("tensor {name} has dtype tag {other}"))),
    };
    Ok(Record { name, data })
}

/// Decodes a model from an in-memory file image.
///
/// Checks run in a fixed order so each failure maps to one error: magic,
/// version, structural truncation, checksum, then semantic validation.
pub fn read_model(bytes: &[u8]) -> Result<ModelGraph> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if magic != MAGIC {
        return Err(FormatError::BadMagic(magic).into());
    }
    let version = r.u16("version")?;
    if version != FORMAT_VERSION {
        return Err(FormatError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        }
        .into());
    }
    let flags = r.u16("flags")?;

    // The checksum trails the body; parse the body without it.
    if bytes.len() < r.pos + 4 {
        return Err(FormatError::Truncated("checksum").into());
    }
    let body_end = bytes.len() - 4;
    let mut r = Reader {
        buf: &bytes[..body_end],
        pos: r.pos,
    };

    let header_len = r.usize("metadata length")?;
    let header_bytes = r.take(header_len, "metadata")?;

    let layer_count = r.usize("layer count")?;
    let mut kinds = Vec::with_capacity(layer_count.min(1 << 16));
    for _ in 0..layer_count {
        let tag = r.u8("layer kind")?;
        let len = r.u16("hyperparameter length")? as usize;
        let hyper = r.take(len, "layer hyperparameters")?;
        let trainable = r.u8("trainable flag")?;
        kinds.push((tag, hyper, trainable));
    }

    let tensor_count = r.usize("tensor count")?;
    let mut records = Vec::with_capacity(tensor_count.min(1 << 16));
    for _ in 0..tensor_count {
        records.push(read_tensor(&mut r)?);
    }
    if r.pos != body_end {
        return Err(malformed(format!("{} unexpected bytes before the checksum", body_end - r.pos)).into());
    }

    let stored = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(FormatError::Checksum { stored, computed }.into());
    }

    let header: Header = serde_json::from_slice(header_bytes)
        .map_err(|e| malformed(format!("metadata: {e}")))?;

    let mut layers = Vec::with_capacity(kinds.len());
    for (tag, hyper, trainable) in kinds {
        let kind = decode_kind(tag, hyper)?;
        layers.push(Layer {
            spec: LayerSpec {
                kind,
                trainable: match trainable {
                    0 => false,
                    1 => true,
                    other => return Err(malformed(format!("trainable flag {other}")).into()),
                },
            },
            state: LayerState::default(),
        });
    }

    let mut seen_flags = 0u16;
    for rec in records {
        let (idx, name) = rec
            .name
            .split_once('.')
            .and_then(|(i, n)| Some((i.parse::<usize>().ok()?, n.to_string())))
            .ok_or_else(|| malformed(format!("tensor name {:?}", rec.name)))?;
        let layer = layers
            .get_mut(idx)
            .ok_or_else(|| malformed(format!("tensor {} names a missing layer", rec.name)))?;
        let kind = layer.spec.kind;
        let is_param = kind.param_shapes().iter().any(|(n, _)| *n == name);
        let is_buffer = kind.buffer_shapes().iter().any(|(n, _)| *n == name);
        if let ParamData::Quantized(q) = &rec.data {
            seen_flags |= match q.mode() {
                QuantMode::F16 => FLAG_F16,
                QuantMode::I8Dynamic => FLAG_I8,
            };
        }
        let duplicate = layer.state.params.iter().any(|p| p.name == name)
            || layer.state.buffers.iter().any(|b| b.name == name);
        if duplicate {
            return Err(malformed(format!("tensor {} appears twice", rec.name)).into());
        }
        if is_param {
            layer.state.params.push(Param { name, data: rec.data });
        } else if is_buffer {
            let ParamData::Dense(t) = rec.data else {
                return Err(malformed(format!("buffer {} must be f32", rec.name)).into());
            };
            layer.state.buffers.push(Buffer { name, data: t });
        } else {
            return Err(malformed(format!("unexpected tensor {}", rec.name)).into());
        }
    }
    if seen_flags != flags {
        return Err(malformed(format!("flags {flags:#x} disagree with tensor dtypes")).into());
    }
    // Restore canonical parameter order.
    for (i, layer) in layers.iter_mut().enumerate() {
        let kind = layer.spec.kind;
        let order = |n: &str, names: &[(&str, Vec<usize>)]| names.iter().position(|(m, _)| *m == n);
        let (pshapes, bshapes) = (kind.param_shapes(), kind.buffer_shapes());
        if layer.state.params.len() != pshapes.len() || layer.state.buffers.len() != bshapes.len() {
            return Err(malformed(format!("layer {i} is missing tensors")).into());
        }
        layer.state.params.sort_by_key(|p| order(&p.name, &pshapes));
        layer.state.buffers.sort_by_key(|b| order(&b.name, &bshapes));
    }

    ModelGraph::from_layers(layers, header.input_shape, header.class_names, header.metadata)
        .map_err(|e| malformed(format!("invalid graph: {e}")).into())
}

pub fn load(path: impl AsRef<Path>) -> Result<ModelGraph> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_model(&bytes)
}
