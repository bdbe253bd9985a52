//! Batched forward/backward kernels used by the layer implementations.
//!
//! Work is split into fixed-size units (by sample, output row, or a fixed
//! number of output pixels) whose boundaries never depend on the number of
//! worker threads, and every cross-unit reduction runs sequentially in unit
//! order. Results are therefore bitwise identical for any rayon pool size.

use rayon::prelude::*;

use super::{ConvSpec, Element, PoolMode, Tensor};
use crate::error::{Error, Result};

/// Output pixels per convolution work unit.
pub const CONV_CHUNK: usize = 256;
/// Output columns per dense work unit.
pub const DENSE_CHUNK: usize = 256;

/// A strided read-only matrix view over a slice.
#[derive(Clone, Copy)]
pub struct View<'a, T> {
    data: &'a [T],
    row_stride: usize,
    col_stride: usize,
}

impl<'a, T> View<'a, T> {
    pub fn new(data: &'a [T], row_stride: usize, col_stride: usize) -> Self {
        Self {
            data,
            row_stride,
            col_stride,
        }
    }

    /// The transpose of a row-major matrix whose rows are `ld` apart.
    pub fn transposed(data: &'a [T], ld: usize) -> Self {
        Self::new(data, 1, ld)
    }

    fn check(&self, rows: usize, cols: usize) {
        if rows == 0 || cols == 0 {
            return;
        }
        let last = (rows - 1) * self.row_stride + (cols - 1) * self.col_stride;
        assert!(last < self.data.len(), "gemm view out of bounds");
    }
}

/// `c[m, n] = a[m, k] * b[k, n] + beta * c`, with `c` row-major and rows `ldc` apart.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: View<'_, T>,
    b: View<'_, T>,
    beta: T,
    c: &mut [T],
    ldc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    a.check(m, k);
    b.check(k, n);
    assert!((m - 1) * ldc + n <= c.len(), "gemm output out of bounds");
    // SAFETY: all three views were bounds-checked above for the given
    // dimensions and strides; `c` is a unique borrow so it cannot alias.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    pad_top: usize,
    pad_left: usize,
}

impl ConvGeom {
    fn new(input: &[usize], spec: &ConvSpec, cout: usize) -> Result<Self> {
        spec.validate()?;
        if input.len() != 4 {
            return Err(Error::shape(format!(
                "convolution expects [n, h, w, c], got {input:?}"
            )));
        }
        if input[3] != spec.in_channels {
            return Err(Error::shape(format!(
                "input has {} channels, conv expects {}",
                input[3], spec.in_channels
            )));
        }
        let gy = spec.axis(input[1], spec.kernel_h)?;
        let gx = spec.axis(input[2], spec.kernel_w)?;
        Ok(Self {
            n: input[0],
            h: input[1],
            w: input[2],
            cin: input[3],
            cout,
            kh: spec.kernel_h,
            kw: spec.kernel_w,
            stride: spec.stride,
            oh: gy.output,
            ow: gx.output,
            pad_top: gy.pad_before,
            pad_left: gx.pad_before,
        })
    }

    fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn pixels(&self) -> usize {
        self.oh * self.ow
    }

    /// A 1x1 stride-1 convolution reads each input pixel as its own patch.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.oh == self.h && self.ow == self.w
    }

    /// Input coordinate for output index `o` and kernel tap `k`, if inside.
    #[inline]
    fn src(&self, o: usize, k: usize, pad: usize, extent: usize) -> Option<usize> {
        let i = (o * self.stride + k) as isize - pad as isize;
        (i >= 0 && (i as usize) < extent).then_some(i as usize)
    }

    /// Fills `cols` with the patches of output pixels `p0..p0 + rows`.
    fn im2col<T: Element>(&self, x: &[T], p0: usize, rows: usize, cols: &mut [T]) {
        let klen = self.patch_len();
        for r in 0..rows {
            let p = p0 + r;
            let (oy, ox) = (p / self.ow, p % self.ow);
            let row = &mut cols[r * klen..(r + 1) * klen];
            for ky in 0..self.kh {
                let iy = self.src(oy, ky, self.pad_top, self.h);
                for kx in 0..self.kw {
                    let dst = &mut row[(ky * self.kw + kx) * self.cin..][..self.cin];
                    match (iy, self.src(ox, kx, self.pad_left, self.w)) {
                        (Some(iy), Some(ix)) => {
                            dst.copy_from_slice(&x[(iy * self.w + ix) * self.cin..][..self.cin])
                        }
                        _ => dst.fill(T::zero()),
                    }
                }
            }
        }
    }

    /// Scatter-adds patch gradients back onto the input gradient.
    fn col2im<T: Element>(&self, dcols: &[T], p0: usize, rows: usize, dx: &mut [T]) {
        let klen = self.patch_len();
        for r in 0..rows {
            let p = p0 + r;
            let (oy, ox) = (p / self.ow, p % self.ow);
            let row = &dcols[r * klen..(r + 1) * klen];
            for ky in 0..self.kh {
                let Some(iy) = self.src(oy, ky, self.pad_top, self.h) else {
                    continue;
                };
                for kx in 0..self.kw {
                    let Some(ix) = self.src(ox, kx, self.pad_left, self.w) else {
                        continue;
                    };
                    let src = &row[(ky * self.kw + kx) * self.cin..][..self.cin];
                    let dst = &mut dx[(iy * self.w + ix) * self.cin..][..self.cin];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = *d + s;
                    }
                }
            }
        }
    }
}

/// Batched convolution: `[n, h, w, cin]` with `[kh, kw, cin, cout]` kernels.
pub fn conv2d_forward<T: Element>(
    x: &Tensor<T>,
    spec: &ConvSpec,
    weight: &Tensor<T>,
    bias: Option<&[T]>,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x.shape(), spec, spec.out_channels)?;
    let wshape = [g.kh, g.kw, g.cin, g.cout];
    if weight.shape() != wshape {
        return Err(Error::shape(format!(
            "kernel shape {:?}, expected {wshape:?}",
            weight.shape()
        )));
    }
    if let Some(b) = bias {
        if b.len() != g.cout {
            return Err(Error::shape(format!(
                "bias has {} entries, expected {}",
                b.len(),
                g.cout
            )));
        }
    }
    let klen = g.patch_len();
    let in_per = g.h * g.w * g.cin;
    let mut out = vec![T::zero(); g.n * g.pixels() * g.cout];
    let wdata = weight.data();
    out.par_chunks_mut(g.pixels() * g.cout)
        .enumerate()
        .for_each(|(s, out_s)| {
            let xs = &x.data()[s * in_per..(s + 1) * in_per];
            out_s
                .par_chunks_mut(CONV_CHUNK * g.cout)
                .enumerate()
                .for_each(|(ci, out_c)| {
                    let p0 = ci * CONV_CHUNK;
                    let rows = out_c.len() / g.cout;
                    let mut buf = Vec::new();
                    let cols: &[T] = if g.is_pointwise() {
                        &xs[p0 * g.cin..(p0 + rows) * g.cin]
                    } else {
                        buf.resize(rows * klen, T::zero());
                        g.im2col(xs, p0, rows, &mut buf);
                        &buf
                    };
                    let beta = match bias {
                        Some(b) => {
                            for row in out_c.chunks_mut(g.cout) {
                                row.copy_from_slice(b);
                            }
                            T::one()
                        }
                        None => T::zero(),
                    };
                    gemm(
                        rows,
                        klen,
                        g.cout,
                        View::new(cols, klen, 1),
                        View::new(wdata, g.cout, 1),
                        beta,
                        out_c,
                        g.cout,
                    );
                });
        });
    Tensor::new(&[g.n, g.oh, g.ow, g.cout], out)
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

/// Gradients of a batched convolution given the upstream gradient `dy`.
pub fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    spec: &ConvSpec,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    want_input: bool,
) -> Result<ConvGrads<T>> {
    let g = ConvGeom::new(x.shape(), spec, spec.out_channels)?;
    if dy.shape() != [g.n, g.oh, g.ow, g.cout] {
        return Err(Error::shape(format!(
            "upstream gradient {:?} does not match conv output",
            dy.shape()
        )));
    }
    let klen = g.patch_len();
    let in_per = g.h * g.w * g.cin;
    let out_per = g.pixels() * g.cout;
    let wdata = weight.data();

    let per_sample: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..g.n)
        .into_par_iter()
        .map(|s| {
            let xs = &x.data()[s * in_per..(s + 1) * in_per];
            let dys = &dy.data()[s * out_per..(s + 1) * out_per];
            let mut dw = vec![T::zero(); klen * g.cout];
            let mut db = vec![T::zero(); g.cout];
            let mut dx = if want_input {
                vec![T::zero(); in_per]
            } else {
                Vec::new()
            };
            let mut buf = Vec::new();
            let mut dbuf = Vec::new();
            for p0 in (0..g.pixels()).step_by(CONV_CHUNK) {
                let rows = CONV_CHUNK.min(g.pixels() - p0);
                let dyc = &dys[p0 * g.cout..(p0 + rows) * g.cout];
                for row in dyc.chunks(g.cout) {
                    for (b, &v) in db.iter_mut().zip(row) {
                        *b = *b + v;
                    }
                }
                let cols: &[T] = if g.is_pointwise() {
                    &xs[p0 * g.cin..(p0 + rows) * g.cin]
                } else {
                    buf.resize(rows * klen, T::zero());
                    g.im2col(xs, p0, rows, &mut buf);
                    &buf
                };
                // dW += cols^T . dy
                gemm(
                    klen,
                    rows,
                    g.cout,
                    View::transposed(cols, klen),
                    View::new(dyc, g.cout, 1),
                    T::one(),
                    &mut dw,
                    g.cout,
                );
                if want_input {
                    // dcols = dy . W^T
                    if g.is_pointwise() {
                        gemm(
                            rows,
                            g.cout,
                            klen,
                            View::new(dyc, g.cout, 1),
                            View::transposed(wdata, g.cout),
                            T::zero(),
                            &mut dx[p0 * g.cin..(p0 + rows) * g.cin],
                            klen,
                        );
                    } else {
                        dbuf.resize(rows * klen, T::zero());
                        gemm(
                            rows,
                            g.cout,
                            klen,
                            View::new(dyc, g.cout, 1),
                            View::transposed(wdata, g.cout),
                            T::zero(),
                            &mut dbuf,
                            klen,
                        );
                        g.col2im(&dbuf, p0, rows, &mut dx);
                    }
                }
            }
            (dx, dw, db)
        })
        .collect();

    let mut weight_grad = vec![T::zero(); klen * g.cout];
    let mut bias_grad = vec![T::zero(); g.cout];
    let mut input_grad = Vec::with_capacity(if want_input { g.n * in_per } else { 0 });
    for (dx, dw, db) in per_sample {
        add_into(&mut weight_grad, &dw);
        add_into(&mut bias_grad, &db);
        input_grad.extend_from_slice(&dx);
    }
    Ok(ConvGrads {
        input: if want_input {
            Some(Tensor::new(x.shape(), input_grad)?)
        } else {
            None
        },
        weight: Tensor::new(weight.shape(), weight_grad)?,
        bias: bias_grad,
    })
}

fn add_into<T: Element>(acc: &mut [T], v: &[T]) {
    for (a, &b) in acc.iter_mut().zip(v) {
        *a = *a + b;
    }
}

fn depthwise_geom<T: Element>(
    x: &Tensor<T>,
    spec: &ConvSpec,
    weight: &Tensor<T>,
) -> Result<ConvGeom> {
    if spec.in_channels != spec.out_channels {
        return Err(Error::shape(format!(
            "depthwise conv needs in == out channels, got {} and {}",
            spec.in_channels, spec.out_channels
        )));
    }
    let g = ConvGeom::new(x.shape(), spec, spec.out_channels)?;
    let wshape = [g.kh, g.kw, g.cin];
    if weight.shape() != wshape {
        return Err(Error::shape(format!(
            "depthwise kernel shape {:?}, expected {wshape:?}",
            weight.shape()
        )));
    }
    Ok(g)
}

/// Batched depthwise convolution: `[n, h, w, c]` with `[kh, kw, c]` kernels.
pub fn depthwise_forward<T: Element>(
    x: &Tensor<T>,
    spec: &ConvSpec,
    weight: &Tensor<T>,
) -> Result<Tensor<T>> {
    let g = depthwise_geom(x, spec, weight)?;
    let c = g.cin;
    let k = weight.data();
    let mut out = vec![T::zero(); g.n * g.pixels() * c];
    out.par_chunks_mut(g.ow * c)
        .enumerate()
        .for_each(|(row_idx, out_row)| {
            let (s, oy) = (row_idx / g.oh, row_idx % g.oh);
            let xs = &x.data()[s * g.h * g.w * c..(s + 1) * g.h * g.w * c];
            for ox in 0..g.ow {
                let acc = &mut out_row[ox * c..(ox + 1) * c];
                for ky in 0..g.kh {
                    let Some(iy) = g.src(oy, ky, g.pad_top, g.h) else {
                        continue;
                    };
                    for kx in 0..g.kw {
                        let Some(ix) = g.src(ox, kx, g.pad_left, g.w) else {
                            continue;
                        };
                        let xv = &xs[(iy * g.w + ix) * c..][..c];
                        let kv = &k[(ky * g.kw + kx) * c..][..c];
                        for ((a, &xi), &ki) in acc.iter_mut().zip(xv).zip(kv) {
                            *a = *a + xi * ki;
                        }
                    }
                }
            }
        });
    Tensor::new(&[g.n, g.oh, g.ow, c], out)
}

pub fn depthwise_backward<T: Element>(
    x: &Tensor<T>,
    spec: &ConvSpec,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    want_input: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>)> {
    let g = depthwise_geom(x, spec, weight)?;
    let c = g.cin;
    if dy.shape() != [g.n, g.oh, g.ow, c] {
        return Err(Error::shape(format!(
            "upstream gradient {:?} does not match depthwise output",
            dy.shape()
        )));
    }
    let k = weight.data();
    let in_per = g.h * g.w * c;
    let out_per = g.pixels() * c;
    let per_sample: Vec<(Vec<T>, Vec<T>)> = (0..g.n)
        .into_par_iter()
        .map(|s| {
            let xs = &x.data()[s * in_per..(s + 1) * in_per];
            let dys = &dy.data()[s * out_per..(s + 1) * out_per];
            let mut dk = vec![T::zero(); k.len()];
            let mut dx = if want_input {
                vec![T::zero(); in_per]
            } else {
                Vec::new()
            };
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let gv = &dys[(oy * g.ow + ox) * c..][..c];
                    for ky in 0..g.kh {
                        let Some(iy) = g.src(oy, ky, g.pad_top, g.h) else {
                            continue;
                        };
                        for kx in 0..g.kw {
                            let Some(ix) = g.src(ox, kx, g.pad_left, g.w) else {
                                continue;
                            };
                            let xi = (iy * g.w + ix) * c;
                            let ki = (ky * g.kw + kx) * c;
                            for ch in 0..c {
                                dk[ki + ch] = dk[ki + ch] + gv[ch] * xs[xi + ch];
                            }
                            if want_input {
                                for ch in 0..c {
                                    dx[xi + ch] = dx[xi + ch] + gv[ch] * k[ki + ch];
                                }
                            }
                        }
                    }
                }
            }
            (dx, dk)
        })
        .collect();
    let mut dk = vec![T::zero(); k.len()];
    let mut dx = Vec::with_capacity(if want_input { g.n * in_per } else { 0 });
    for (dxs, dks) in per_sample {
        add_into(&mut dk, &dks);
        dx.extend_from_slice(&dxs);
    }
    Ok((
        if want_input {
            Some(Tensor::new(x.shape(), dx)?)
        } else {
            None
        },
        Tensor::new(weight.shape(), dk)?,
    ))
}

fn pool_geom(shape: &[usize], window: usize, stride: usize) -> Result<(usize, usize)> {
    if shape.len() != 4 {
        return Err(Error::shape(format!("pooling expects [n, h, w, c], got {shape:?}")));
    }
    if window == 0 || stride == 0 {
        return Err(Error::shape("pool window and stride must be positive"));
    }
    if window > shape[1] || window > shape[2] {
        return Err(Error::shape(format!(
            "pool window {window} exceeds spatial extent {}x{}",
            shape[1], shape[2]
        )));
    }
    Ok(((shape[1] - window) / stride + 1, (shape[2] - window) / stride + 1))
}

/// Batched pooling. For `Max`, also returns the flat in-sample index of each
/// selected element (first maximum in scan order).
pub fn pool_forward<T: Element>(
    x: &Tensor<T>,
    window: usize,
    stride: usize,
    mode: PoolMode,
) -> Result<(Tensor<T>, Vec<u32>)> {
    let (oh, ow) = pool_geom(x.shape(), window, stride)?;
    let (n, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let in_per = h * w * c;
    let mut out = vec![T::zero(); n * oh * ow * c];
    let mut arg = vec![0u32; if mode == PoolMode::Max { out.len() } else { 0 }];
    let per_row = ow * c;
    let fill_row = |row_idx: usize, out_row: &mut [T], arg_row: Option<&mut [u32]>| {
        let (s, oy) = (row_idx / oh, row_idx % oh);
        let xs = &x.data()[s * in_per..(s + 1) * in_per];
        let mut arg_row = arg_row;
        for ox in 0..ow {
            for ch in 0..c {
                let mut best = T::neg_infinity();
                let mut best_i = 0usize;
                let mut mean = T::zero();
                let mut count = T::zero();
                for dy in 0..window {
                    for dx in 0..window {
                        let i = ((oy * stride + dy) * w + ox * stride + dx) * c + ch;
                        let v = xs[i];
                        match mode {
                            PoolMode::Max => {
                                if v > best || count == T::zero() {
                                    best = v;
                                    best_i = i;
                                }
                            }
                            // Running mean: exact for constant windows.
                            PoolMode::Mean => mean = mean + (v - mean) / (count + T::one()),
                        }
                        count = count + T::one();
                    }
                }
                out_row[ox * c + ch] = match mode {
                    PoolMode::Max => best,
                    PoolMode::Mean => mean,
                };
                if let Some(a) = arg_row.as_deref_mut() {
                    a[ox * c + ch] = best_i as u32;
                }
            }
        }
    };
    match mode {
        PoolMode::Max => out
            .par_chunks_mut(per_row)
            .zip(arg.par_chunks_mut(per_row))
            .enumerate()
            .for_each(|(r, (o, a))| fill_row(r, o, Some(a))),
        PoolMode::Mean => out
            .par_chunks_mut(per_row)
            .enumerate()
            .for_each(|(r, o)| fill_row(r, o, None)),
    }
    Ok((Tensor::new(&[n, oh, ow, c], out)?, arg))
}

pub fn pool_backward<T: Element>(
    input_shape: &[usize],
    window: usize,
    stride: usize,
    mode: PoolMode,
    argmax: &[u32],
    dy: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (oh, ow) = pool_geom(input_shape, window, stride)?;
    let (n, h, w, c) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    if dy.shape() != [n, oh, ow, c] {
        return Err(Error::shape(format!(
            "upstream gradient {:?} does not match pool output",
            dy.shape()
        )));
    }
    let in_per = h * w * c;
    let out_per = oh * ow * c;
    let inv = T::one() / T::from_f64((window * window) as f64);
    let mut dx = vec![T::zero(); n * in_per];
    dx.par_chunks_mut(in_per).enumerate().for_each(|(s, dxs)| {
        let dys = &dy.data()[s * out_per..(s + 1) * out_per];
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let o = (oy * ow + ox) * c + ch;
                    let g = dys[o];
                    match mode {
                        PoolMode::Max => {
                            let i = argmax[s * out_per + o] as usize;
                            dxs[i] = dxs[i] + g;
                        }
                        PoolMode::Mean => {
                            for ddy in 0..window {
                                for ddx in 0..window {
                                    let i = ((oy * stride + ddy) * w + ox * stride + ddx) * c + ch;
                                    dxs[i] = dxs[i] + g * inv;
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::new(input_shape, dx)
}

/// `y[n, out] = x[n, in] . w[in, out] + b`, computed in fixed column blocks.
pub fn dense_forward<T: Element>(x: &Tensor<T>, weight: &Tensor<T>, bias: &[T]) -> Result<Tensor<T>> {
    if x.rank() != 2 || weight.rank() != 2 || x.shape()[1] != weight.shape()[0] {
        return Err(Error::shape(format!(
            "dense input {:?} does not match weight {:?}",
            x.shape(),
            weight.shape()
        )));
    }
    let (n, fin, fout) = (x.shape()[0], x.shape()[1], weight.shape()[1]);
    if bias.len() != fout {
        return Err(Error::shape(format!("dense bias has {} entries, expected {fout}", bias.len())));
    }
    let blocks: Vec<Vec<T>> = (0..fout.div_ceil(DENSE_CHUNK))
        .into_par_iter()
        .map(|b| {
            let j0 = b * DENSE_CHUNK;
            let cols = DENSE_CHUNK.min(fout - j0);
            let mut c = Vec::with_capacity(n * cols);
            for _ in 0..n {
                c.extend_from_slice(&bias[j0..j0 + cols]);
            }
            gemm(
                n,
                fin,
                cols,
                View::new(x.data(), fin, 1),
                View::new(&weight.data()[j0..], fout, 1),
                T::one(),
                &mut c,
                cols,
            );
            c
        })
        .collect();
    let mut out = vec![T::zero(); n * fout];
    for (b, block) in blocks.iter().enumerate() {
        let j0 = b * DENSE_CHUNK;
        let cols = block.len() / n;
        for i in 0..n {
            out[i * fout + j0..i * fout + j0 + cols].copy_from_slice(&block[i * cols..(i + 1) * cols]);
        }
    }
    Tensor::new(&[n, fout], out)
}

pub struct DenseGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

pub fn dense_backward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    want_input: bool,
) -> Result<DenseGrads<T>> {
    let (n, fin, fout) = (x.shape()[0], x.shape()[1], weight.shape()[1]);
    if dy.shape() != [n, fout] {
        return Err(Error::shape(format!(
            "upstream gradient {:?} does not match dense output [{n}, {fout}]",
            dy.shape()
        )));
    }
    let mut dw = vec![T::zero(); fin * fout];
    // dW = x^T . dy, split along input features.
    dw.par_chunks_mut(DENSE_CHUNK * fout)
        .enumerate()
        .for_each(|(b, dwb)| {
            let i0 = b * DENSE_CHUNK;
            let rows = dwb.len() / fout;
            gemm(
                rows,
                n,
                fout,
                View::transposed(&x.data()[i0..], fin),
                View::new(dy.data(), fout, 1),
                T::zero(),
                dwb,
                fout,
            );
        });
    let mut db = vec![T::zero(); fout];
    for row in dy.data().chunks(fout) {
        add_into(&mut db, row);
    }
    let input = if want_input {
        let mut dx = vec![T::zero(); n * fin];
        gemm(
            n,
            fout,
            fin,
            View::new(dy.data(), fout, 1),
            View::transposed(weight.data(), fout),
            T::zero(),
            &mut dx,
            fin,
        );
        Some(Tensor::new(&[n, fin], dx)?)
    } else {
        None
    };
    Ok(DenseGrads {
        input,
        weight: Tensor::new(&[fin, fout], dw)?,
        bias: db,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Padding;

    #[test]
    fn pointwise_fast_path_matches_general_path() {
        let x = Tensor::<f64>::from_fn(&[2, 5, 5, 3], |i| ((i * 37) % 11) as f64 - 5.0).unwrap();
        let w = Tensor::<f64>::from_fn(&[1, 1, 3, 4], |i| (i as f64) * 0.1 - 0.5).unwrap();
        let spec = ConvSpec::new(1, 1, Padding::Same, 3, 4);
        let fast = conv2d_forward(&x, &spec, &w, None).unwrap();
        // A valid-padded 1x1 conv with stride 1 is the same operation; compare
        // against a manual per-pixel product.
        for p in 0..50 {
            for co in 0..4 {
                let mut acc = 0.0;
                for ci in 0..3 {
                    acc += x.data()[p * 3 + ci] * w.data()[ci * 4 + co];
                }
                assert!((fast.data()[p * 4 + co] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_chunking_covers_large_images() {
        // More than one CONV_CHUNK of output pixels per sample.
        let x = Tensor::<f32>::full(&[1, 20, 20, 1], 1.0).unwrap();
        let w = Tensor::<f32>::full(&[3, 3, 1, 1], 1.0).unwrap();
        let spec = ConvSpec::new(3, 1, Padding::Same, 1, 1);
        let y = conv2d_forward(&x, &spec, &w, None).unwrap();
        assert_eq!(y.data()[0], 4.0);
        assert_eq!(y.data()[21], 9.0);
        assert_eq!(y.data()[399], 4.0);
    }

    #[test]
    fn dense_blocks_cover_wide_outputs() {
        let fout = DENSE_CHUNK + 7;
        let x = Tensor::<f64>::full(&[3, 2], 1.0).unwrap();
        let w = Tensor::<f64>::from_fn(&[2, fout], |i| i as f64).unwrap();
        let b = vec![0.5; fout];
        let y = dense_forward(&x, &w, &b).unwrap();
        for i in 0..3 {
            for j in 0..fout {
                let want = j as f64 + (fout + j) as f64 + 0.5;
                assert_eq!(y.data()[i * fout + j], want);
            }
        }
    }
}
