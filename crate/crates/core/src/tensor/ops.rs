use serde::{Deserialize, Serialize};

use super::{kernels, Element, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Max,
    Mean,
}

/// Geometry of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: Padding,
    pub in_channels: usize,
    pub out_channels: usize,
}

/// Resolved output extent and leading padding along one spatial axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AxisGeom {
    pub output: usize,
    pub pad_before: usize,
}

impl ConvSpec {
    pub fn new(kernel: usize, stride: usize, padding: Padding, cin: usize, cout: usize) -> Self {
        Self {
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            padding,
            in_channels: cin,
            out_channels: cout,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_h == 0
            || self.kernel_w == 0
            || self.stride == 0
            || self.in_channels == 0
            || self.out_channels == 0
        {
            return Err(Error::shape(format!("degenerate conv spec {self:?}")));
        }
        Ok(())
    }

    /// Output extent along an axis: `floor((in + pad_total - kernel) / stride) + 1`.
    ///
    /// `Same` picks `pad_total` so the output is `ceil(in / stride)`, with the
    /// odd pixel of padding going to the bottom/right.
    pub fn axis(&self, input: usize, kernel: usize) -> Result<AxisGeom> {
        let s = self.stride;
        match self.padding {
            Padding::Valid => {
                if input < kernel {
                    return Err(Error::shape(format!(
                        "input extent {input} smaller than kernel {kernel}"
                    )));
                }
                Ok(AxisGeom {
                    output: (input - kernel) / s + 1,
                    pad_before: 0,
                })
            }
            Padding::Same => {
                let output = input.div_ceil(s);
                let pad_total = ((output - 1) * s + kernel).saturating_sub(input);
                Ok(AxisGeom {
                    output,
                    pad_before: pad_total / 2,
                })
            }
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        Ok((
            self.axis(h, self.kernel_h)?.output,
            self.axis(w, self.kernel_w)?.output,
        ))
    }
}

fn as_batch<T: Element>(input: &Tensor<T>, what: &str) -> Result<Tensor<T>> {
    if input.rank() != 3 {
        return Err(Error::shape(format!(
            "{what} expects [h, w, c], got {:?}",
            input.shape()
        )));
    }
    let mut shape = vec![1];
    shape.extend_from_slice(input.shape());
    input.clone().reshape(&shape)
}

fn drop_batch<T: Element>(t: Tensor<T>) -> Result<Tensor<T>> {
    let shape = t.shape()[1..].to_vec();
    t.reshape(&shape)
}

/// Matrix product of `[m, k]` and `[k, n]`.
pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::shape(format!(
            "matmul {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![T::zero(); m * n];
    kernels::gemm(
        m,
        k,
        n,
        kernels::View::new(a.data(), k, 1),
        kernels::View::new(b.data(), n, 1),
        T::zero(),
        &mut out,
        n,
    );
    Tensor::new(&[m, n], out)
}

/// Cross-correlation of an `[h, w, c_in]` image with `[kh, kw, c_in, c_out]`
/// kernels plus a per-output-channel bias.
pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    spec: &ConvSpec,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let batch = as_batch(input, "conv2d")?;
    if bias.shape() != [spec.out_channels] {
        return Err(Error::shape(format!(
            "bias {:?} does not match {} output channels",
            bias.shape(),
            spec.out_channels
        )));
    }
    drop_batch(kernels::conv2d_forward(
        &batch,
        spec,
        kernels,
        Some(bias.data()),
    )?)
}

/// Per-channel convolution of an `[h, w, c]` image with `[kh, kw, c]` kernels.
pub fn depthwise_conv2d<T: Element>(
    input: &Tensor<T>,
    spec: &ConvSpec,
    kernels: &Tensor<T>,
) -> Result<Tensor<T>> {
    let batch = as_batch(input, "depthwise_conv2d")?;
    drop_batch(kernels::depthwise_forward(&batch, spec, kernels)?)
}

pub fn pool2d<T: Element>(
    input: &Tensor<T>,
    window: usize,
    stride: usize,
    mode: PoolMode,
) -> Result<Tensor<T>> {
    let batch = as_batch(input, "pool2d")?;
    drop_batch(kernels::pool_forward(&batch, window, stride, mode)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random<T: Element>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(-1.0..1.0))).unwrap()
    }

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
    }

    /// Direct summation over every output element, kernel tap and channel.
    fn conv_oracle(
        x: &Tensor<f64>,
        spec: &ConvSpec,
        k: &Tensor<f64>,
        bias: &[f64],
    ) -> Tensor<f64> {
        let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let gy = spec.axis(h, spec.kernel_h).unwrap();
        let gx = spec.axis(w, spec.kernel_w).unwrap();
        let cout = spec.out_channels;
        let mut out = vec![0.0; gy.output * gx.output * cout];
        for oy in 0..gy.output {
            for ox in 0..gx.output {
                for co in 0..cout {
                    let mut acc = bias[co];
                    for ky in 0..spec.kernel_h {
                        for kx in 0..spec.kernel_w {
                            for ci in 0..cin {
                                let iy = (oy * spec.stride + ky) as isize - gy.pad_before as isize;
                                let ix = (ox * spec.stride + kx) as isize - gx.pad_before as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x.data()[((iy as usize) * w + ix as usize) * cin + ci];
                                let kv = k.data()
                                    [((ky * spec.kernel_w + kx) * cin + ci) * cout + co];
                                acc += xv * kv;
                            }
                        }
                    }
                    out[(oy * gx.output + ox) * cout + co] = acc;
                }
            }
        }
        Tensor::new(&[gy.output, gx.output, cout], out).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_cases() {
        let i2 = Tensor::<f32>::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = Tensor::<f32>::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(matmul(&i2, &m).unwrap(), m);
        let a = Tensor::<f32>::new(&[1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::<f32>::new(&[2, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random::<f32>(&[7, 5], &mut rng);
        let b = random::<f32>(&[5, 3], &mut rng);
        let c = matmul(&a, &b).unwrap();
        for i in 0..7 {
            for j in 0..3 {
                let mut acc = 0.0f64;
                for k in 0..5 {
                    acc += a.data()[i * 5 + k] as f64 * b.data()[k * 3 + j] as f64;
                }
                assert!(rel_close(c.data()[i * 3 + j] as f64, acc, 1e-6));
            }
        }
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::<f32>::zeros(&[2, 3]).unwrap();
        let b = Tensor::<f32>::zeros(&[2, 3]).unwrap();
        assert!(matches!(matmul(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_is_associative_at_f64() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random::<f64>(&[5, 5], &mut rng);
        let b = random::<f64>(&[5, 5], &mut rng);
        let c = random::<f64>(&[5, 5], &mut rng);
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        for (l, r) in left.data().iter().zip(right.data()) {
            assert!(rel_close(*l, *r, 1e-9));
        }
    }

    #[test]
    fn conv_same_shape_at_full_resolution() {
        let x = Tensor::<f32>::zeros(&[224, 224, 3]).unwrap();
        let spec = ConvSpec::new(3, 1, Padding::Same, 3, 32);
        let k = Tensor::<f32>::zeros(&[3, 3, 3, 32]).unwrap();
        let b = Tensor::<f32>::zeros(&[32]).unwrap();
        assert_eq!(conv2d(&x, &spec, &k, &b).unwrap().shape(), &[224, 224, 32]);
    }

    #[test]
    fn conv_of_ones_sums_window() {
        let x = Tensor::<f32>::full(&[3, 3, 1], 1.0).unwrap();
        let spec = ConvSpec::new(3, 1, Padding::Valid, 1, 1);
        let k = Tensor::<f32>::full(&[3, 3, 1, 1], 1.0).unwrap();
        let b = Tensor::<f32>::zeros(&[1]).unwrap();
        let y = conv2d(&x, &spec, &k, &b).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn conv_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (stride, padding) in [(1, Padding::Same), (2, Padding::Same), (1, Padding::Valid), (2, Padding::Valid)] {
            let x = random::<f64>(&[8, 8, 2], &mut rng);
            let spec = ConvSpec::new(3, stride, padding, 2, 16);
            let k = random::<f64>(&[3, 3, 2, 16], &mut rng);
            let b = random::<f64>(&[16], &mut rng);
            let got = conv2d(&x, &spec, &k, &b).unwrap();
            let want = conv_oracle(&x, &spec, &k, b.data());
            assert_eq!(got.shape(), want.shape());
            assert!(got.max_abs_diff(&want).unwrap() < 1e-5);
        }
        // f32 path against the f64 oracle.
        let x = random::<f32>(&[8, 8, 2], &mut rng);
        let spec = ConvSpec::new(3, 1, Padding::Same, 2, 16);
        let k = random::<f32>(&[3, 3, 2, 16], &mut rng);
        let b = random::<f32>(&[16], &mut rng);
        let got = conv2d(&x, &spec, &k, &b).unwrap().cast::<f64>();
        let want = conv_oracle(&x.cast(), &spec, &k.cast(), &b.cast::<f64>().into_data());
        assert!(got.max_abs_diff(&want).unwrap() < 1e-5);
    }

    #[test]
    fn conv_errors() {
        let x = Tensor::<f32>::zeros(&[4, 4, 2]).unwrap();
        let spec = ConvSpec::new(3, 1, Padding::Same, 3, 4);
        let k = Tensor::<f32>::zeros(&[3, 3, 3, 4]).unwrap();
        let b = Tensor::<f32>::zeros(&[4]).unwrap();
        assert!(matches!(conv2d(&x, &spec, &k, &b), Err(Error::Shape(_))));
        let spec = ConvSpec::new(5, 1, Padding::Valid, 2, 4);
        let k = Tensor::<f32>::zeros(&[5, 5, 2, 4]).unwrap();
        assert!(matches!(conv2d(&x, &spec, &k, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn conv_same_stride_one_preserves_extent() {
        for k in [1, 3, 5] {
            let x = Tensor::<f32>::zeros(&[7, 9, 2]).unwrap();
            let spec = ConvSpec::new(k, 1, Padding::Same, 2, 3);
            let kern = Tensor::<f32>::zeros(&[k, k, 2, 3]).unwrap();
            let b = Tensor::<f32>::zeros(&[3]).unwrap();
            assert_eq!(conv2d(&x, &spec, &kern, &b).unwrap().shape(), &[7, 9, 3]);
        }
    }

    #[test]
    fn depthwise_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random::<f32>(&[4, 4, 2], &mut rng);
        let mut k = vec![0.0f32; 9 * 2];
        k[4 * 2] = 1.0;
        k[4 * 2 + 1] = 1.0;
        let k = Tensor::new(&[3, 3, 2], k).unwrap();
        let spec = ConvSpec::new(3, 1, Padding::Same, 2, 2);
        assert_eq!(depthwise_conv2d(&x, &spec, &k).unwrap(), x);
    }

    #[test]
    fn depthwise_matches_per_channel_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random::<f64>(&[8, 8, 3], &mut rng);
        let k = random::<f64>(&[3, 3, 3], &mut rng);
        for stride in [1, 2] {
            let spec = ConvSpec::new(3, stride, Padding::Same, 3, 3);
            let got = depthwise_conv2d(&x, &spec, &k).unwrap();
            let single = ConvSpec::new(3, stride, Padding::Same, 1, 1);
            let zero = Tensor::<f64>::zeros(&[1]).unwrap();
            for c in 0..3 {
                let xc = Tensor::from_fn(&[8, 8, 1], |i| x.data()[i * 3 + c]).unwrap();
                let kc = Tensor::from_fn(&[3, 3, 1, 1], |i| k.data()[i * 3 + c]).unwrap();
                let yc = conv2d(&xc, &single, &kc, &zero).unwrap();
                for (i, v) in yc.data().iter().enumerate() {
                    assert!((got.data()[i * 3 + c] - v).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn depthwise_rejects_wrong_channels() {
        let x = Tensor::<f32>::zeros(&[4, 4, 2]).unwrap();
        let k = Tensor::<f32>::zeros(&[3, 3, 3]).unwrap();
        let spec = ConvSpec::new(3, 1, Padding::Same, 2, 2);
        assert!(matches!(depthwise_conv2d(&x, &spec, &k), Err(Error::Shape(_))));
    }

    #[test]
    fn pool_hand_cases() {
        let x = Tensor::<f32>::new(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(pool2d(&x, 2, 2, PoolMode::Max).unwrap().data(), &[4.0]);
        assert_eq!(pool2d(&x, 2, 2, PoolMode::Mean).unwrap().data(), &[2.5]);
        assert!(matches!(pool2d(&x, 3, 1, PoolMode::Max), Err(Error::Shape(_))));
    }

    #[test]
    fn pool_matches_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = random::<f32>(&[6, 6, 4], &mut rng);
        let max = pool2d(&x, 2, 2, PoolMode::Max).unwrap();
        let mean = pool2d(&x, 2, 2, PoolMode::Mean).unwrap();
        assert_eq!(max.shape(), &[3, 3, 4]);
        for oy in 0..3 {
            for ox in 0..3 {
                for c in 0..4 {
                    let vals: Vec<f32> = (0..4)
                        .map(|t| x.data()[((oy * 2 + t / 2) * 6 + ox * 2 + t % 2) * 4 + c])
                        .collect();
                    let m = vals.iter().cloned().fold(f32::MIN, f32::max);
                    let a = vals.iter().sum::<f32>() / 4.0;
                    let i = (oy * 3 + ox) * 4 + c;
                    assert_eq!(max.data()[i], m);
                    assert!((mean.data()[i] - a).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn mean_pool_of_constant_is_exact() {
        let x = Tensor::<f32>::full(&[6, 6, 3], 0.3).unwrap();
        let y = pool2d(&x, 3, 3, PoolMode::Mean).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.3));
    }
}
