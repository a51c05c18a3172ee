//! Dense row-major `f32` tensors and the numeric kernels the rest of the
//! crate builds on.
//!
//! Tensors are plain values: every kernel returns a fresh tensor and never
//! mutates its inputs. Matrix products go through `matrixmultiply::sgemm`,
//! convolutions are lowered to a single GEMM per batch via im2col.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if dims.is_empty() || dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape {
                dims,
                reason: "dims must be a non-empty list of positive integers".into(),
            });
        }
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidShape {
                dims,
                reason: format!("{} elements supplied", data.len()),
            });
        }
        Ok(Self { dims, data })
    }

    pub fn full(dims: &[usize], value: f32) -> Result<Self> {
        let numel = dims.iter().product();
        Self::new(dims.to_vec(), vec![value; numel])
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::full(dims, 0.0)
    }

    pub fn ones(dims: &[usize]) -> Result<Self> {
        Self::full(dims, 1.0)
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            dims: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f32>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f32> {
        if self.data.len() != 1 {
            return Err(Error::InvalidShape {
                dims: self.dims.clone(),
                reason: "expected a single element".into(),
            });
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Self> {
        Self::new(dims.to_vec(), self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    /// Rows `start..end` along the leading axis.
    pub fn slice_outer(&self, start: usize, end: usize) -> Result<Self> {
        let outer = self.dims[0];
        if start >= end || end > outer {
            return Err(Error::InvalidArgument(format!(
                "slice {start}..{end} out of range for leading dim {outer}"
            )));
        }
        let inner = self.numel() / outer;
        let mut dims = self.dims.clone();
        dims[0] = end - start;
        Self::new(dims, self.data[start * inner..end * inner].to_vec())
    }

    /// Gathers rows along the leading axis.
    pub fn gather_outer(&self, indices: &[usize]) -> Result<Self> {
        let outer = self.dims[0];
        let inner = self.numel() / outer;
        let mut data = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            if i >= outer {
                return Err(Error::InvalidArgument(format!(
                    "row {i} out of range for leading dim {outer}"
                )));
            }
            data.extend_from_slice(&self.data[i * inner..(i + 1) * inner]);
        }
        let mut dims = self.dims.clone();
        dims[0] = indices.len();
        Self::new(dims, data)
    }

    /// Stacks tensors with equal trailing dims along the leading axis.
    pub fn concat_outer(parts: &[&Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of no tensors".into()))?;
        if first.rank() == 0 {
            return Err(Error::InvalidShape {
                dims: vec![],
                reason: "concat needs rank ≥ 1".into(),
            });
        }
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.rank() != first.rank() || p.dims[1..] != first.dims[1..] {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.dims.clone(),
                    rhs: p.dims.clone(),
                });
            }
            lead += p.dims[0];
            data.extend_from_slice(&p.data);
        }
        let mut dims = first.dims.clone();
        dims[0] = lead;
        Self::new(dims, data)
    }

    /// Channels `start..start + len` of an `N×C×…` tensor.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Self> {
        if self.rank() < 2 || start + len > self.dims[1] {
            return Err(Error::InvalidShape {
                dims: self.dims.clone(),
                reason: format!("cannot take channels {start}..{}", start + len),
            });
        }
        let c = self.dims[1];
        let inner = self.numel() / (self.dims[0] * c).max(1);
        let mut data = Vec::with_capacity(self.dims[0] * len * inner);
        for plane in self.data.chunks(c * inner) {
            data.extend_from_slice(&plane[start * inner..(start + len) * inner]);
        }
        let mut dims = self.dims.clone();
        dims[1] = len;
        Self::new(dims, data)
    }

    /// Adjoint of [`Tensor::slice_channels`]: embeds `self` at channel
    /// `start` of a zero tensor with `channels` channels.
    pub fn pad_channels(&self, start: usize, channels: usize) -> Result<Self> {
        if self.rank() < 2 || start + self.dims[1] > channels {
            return Err(Error::InvalidShape {
                dims: self.dims.clone(),
                reason: format!("cannot place at channel {start} of {channels}"),
            });
        }
        let len = self.dims[1];
        let inner = self.numel() / (self.dims[0] * len).max(1);
        let mut dims = self.dims.clone();
        dims[1] = channels;
        let mut out = Self::zeros(&dims)?;
        for (dst, src) in out.data.chunks_mut(channels * inner).zip(self.data.chunks(len * inner)) {
            dst[start * inner..(start + len) * inner].copy_from_slice(src);
        }
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        ensure_same_dims(op, self, other)?;
        Ok(Self {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sum(&self) -> f32 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f32 {
        self.sum() / self.numel() as f32
    }
}

pub(crate) fn ensure_same_dims(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims != b.dims {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.dims.clone(),
            rhs: b.dims.clone(),
        });
    }
    Ok(())
}

/// `c = a·b + beta·c` where `a` is logically `m×k` and `b` is `k×n`.
/// The `*_t` flags say the operand is stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    beta: f32,
    c: &mut [f32],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover exactly the m×k, k×n and m×n extents described by
    // the strides above, as asserted.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.dims[1] != b.dims[0] {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.dims.clone(),
            rhs: b.dims.clone(),
        });
    }
    let (m, k, n) = (a.dims[0], a.dims[1], b.dims[1]);
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, &a.data, false, &b.data, false, 0.0, &mut out);
    Tensor::new(vec![m, n], out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Same,
    Valid,
}

/// Geometry of a stride-1 convolution over a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(x_dims: &[usize], w_dims: &[usize], padding: Padding) -> Result<Self> {
        let (n, c, h, w) = match *x_dims {
            [c, h, w] => (1, c, h, w),
            [n, c, h, w] => (n, c, h, w),
            _ => {
                return Err(Error::InvalidShape {
                    dims: x_dims.to_vec(),
                    reason: "conv2d input must be C×H×W or N×C×H×W".into(),
                })
            }
        };
        let [k_out, wc, kh, kw] = *w_dims else {
            return Err(Error::InvalidShape {
                dims: w_dims.to_vec(),
                reason: "conv2d kernel must be K×C×kh×kw".into(),
            });
        };
        if wc != c {
            return Err(Error::ShapeMismatch {
                op: "conv2d channels",
                lhs: x_dims.to_vec(),
                rhs: w_dims.to_vec(),
            });
        }
        let (pad_h, pad_w) = match padding {
            Padding::Valid => (0, 0),
            Padding::Same => {
                if kh % 2 == 0 || kw % 2 == 0 {
                    return Err(Error::InvalidArgument(
                        "same padding requires odd kernel sizes".into(),
                    ));
                }
                (kh / 2, kw / 2)
            }
        };
        if h + 2 * pad_h < kh || w + 2 * pad_w < kw {
            return Err(Error::InvalidArgument(format!(
                "kernel {kh}×{kw} does not fit input {h}×{w}"
            )));
        }
        Ok(Self {
            n,
            c,
            h,
            w,
            k_out,
            kh,
            kw,
            pad_h,
            pad_w,
            oh: h + 2 * pad_h - kh + 1,
            ow: w + 2 * pad_w - kw + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn out_pixels(&self) -> usize {
        self.oh * self.ow
    }

    /// Output columns `ox` in `lo..hi` whose input column `ox + kx − pad_w`
    /// lies inside the image.
    fn valid_ox(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad_w.saturating_sub(kx);
        let hi = (self.w + self.pad_w).saturating_sub(kx).min(self.ow);
        (lo, hi.max(lo))
    }

    /// Column matrix `[C·kh·kw, N·oh·ow]`.
    pub fn im2col(&self, x: &[f32]) -> Vec<f32> {
        let cols_n = self.n * self.out_pixels();
        let mut cols = vec![0.0; self.patch_len() * cols_n];
        for ci in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * cols_n..(row + 1) * cols_n];
                    for ni in 0..self.n {
                        let src = &x[(ni * self.c + ci) * self.h * self.w..][..self.h * self.w];
                        let base = ni * self.out_pixels();
                        for oy in 0..self.oh {
                            let iy = (oy + ky) as isize - self.pad_h as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            let (lo, hi) = self.valid_ox(kx);
                            let src_row = &src[iy as usize * self.w..][..self.w];
                            let dst_row = &mut dst[base + oy * self.ow..][..self.ow];
                            dst_row[lo..hi].copy_from_slice(&src_row[lo + kx - self.pad_w..hi + kx - self.pad_w]);
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatters-adds columns back to `N×C×H×W`.
    pub fn col2im(&self, cols: &[f32]) -> Vec<f32> {
        let cols_n = self.n * self.out_pixels();
        let mut x = vec![0.0; self.n * self.c * self.h * self.w];
        for ci in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * cols_n..(row + 1) * cols_n];
                    for ni in 0..self.n {
                        let dst = &mut x[(ni * self.c + ci) * self.h * self.w..][..self.h * self.w];
                        let base = ni * self.out_pixels();
                        for oy in 0..self.oh {
                            let iy = (oy + ky) as isize - self.pad_h as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            let (lo, hi) = self.valid_ox(kx);
                            let dst_row = &mut dst[iy as usize * self.w..][..self.w];
                            let src_row = &src[base + oy * self.ow..][..self.ow];
                            for (d, &v) in dst_row[lo + kx - self.pad_w..hi + kx - self.pad_w].iter_mut().zip(&src_row[lo..hi]) {
                                *d += v;
                            }
                        }
                    }
                }
            }
        }
        x
    }

    /// `[K, N·P]` → `[N, K, P]`.
    pub fn kn_to_nk(&self, src: &[f32]) -> Vec<f32> {
        let p = self.out_pixels();
        let mut out = vec![0.0; src.len()];
        for k in 0..self.k_out {
            for ni in 0..self.n {
                out[(ni * self.k_out + k) * p..][..p].copy_from_slice(&src[(k * self.n + ni) * p..][..p]);
            }
        }
        out
    }

    /// `[N, K, P]` → `[K, N·P]`.
    pub fn nk_to_kn(&self, src: &[f32]) -> Vec<f32> {
        let p = self.out_pixels();
        let mut out = vec![0.0; src.len()];
        for k in 0..self.k_out {
            for ni in 0..self.n {
                out[(k * self.n + ni) * p..][..p].copy_from_slice(&src[(ni * self.k_out + k) * p..][..p]);
            }
        }
        out
    }

    pub fn out_dims(&self, batched: bool) -> Vec<usize> {
        if batched {
            vec![self.n, self.k_out, self.oh, self.ow]
        } else {
            vec![self.k_out, self.oh, self.ow]
        }
    }
}

/// Stride-1 cross-correlation. Accepts `C×H×W` or `N×C×H×W` input and
/// returns a tensor of the same rank.
pub fn conv2d(x: &Tensor, w: &Tensor, padding: Padding) -> Result<Tensor> {
    Ok(conv2d_with_cols(x, w, padding)?.0)
}

pub(crate) fn conv2d_with_cols(x: &Tensor, w: &Tensor, padding: Padding) -> Result<(Tensor, Vec<f32>, ConvGeom)> {
    let g = ConvGeom::new(&x.dims, &w.dims, padding)?;
    let cols = g.im2col(&x.data);
    let np = g.n * g.out_pixels();
    let mut tmp = vec![0.0; g.k_out * np];
    gemm(g.k_out, g.patch_len(), np, &w.data, false, &cols, false, 0.0, &mut tmp);
    let out = Tensor::new(g.out_dims(x.rank() == 4), g.kn_to_nk(&tmp))?;
    Ok((out, cols, g))
}

/// Adds `bias[c]` to every element of channel `c` of an `N×C×…` tensor.
pub fn add_channel_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if x.rank() < 2 || bias.rank() != 1 || bias.dims[0] != x.dims[1] {
        return Err(Error::ShapeMismatch {
            op: "channel bias",
            lhs: x.dims.clone(),
            rhs: bias.dims.clone(),
        });
    }
    let c = x.dims[1];
    let inner = x.numel() / (x.dims[0] * c);
    let mut out = x.data.clone();
    for (i, chunk) in out.chunks_mut(inner).enumerate() {
        let b = bias.data[i % c];
        chunk.iter_mut().for_each(|v| *v += b);
    }
    Tensor::new(x.dims.clone(), out)
}

/// Temperature softmax `exp(v_i/τ) / Σ exp(v_j/τ)` with max subtraction.
pub fn softmax_temp(v: &[f32], tau: f32) -> Result<Vec<f32>> {
    if v.is_empty() {
        return Err(Error::InvalidArgument("softmax of an empty vector".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("softmax temperature must be positive, got {tau}")));
    }
    let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = v.iter().map(|&x| (((x - max) / tau) as f64).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.iter().map(|&e| (e / total) as f32).collect())
}

pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
    Relu,
    Sigmoid,
    Scale,
}

#[derive(Debug, Clone, Copy)]
pub enum Operand<'a> {
    Tensor(&'a Tensor),
    Scalar(f32),
    None,
}

/// Pointwise kernels. Binary kinds take an equally shaped tensor or a scalar;
/// `Scale` takes a scalar; `Relu` and `Sigmoid` ignore the operand.
pub fn elementwise(kind: ElementwiseKind, a: &Tensor, b: Operand<'_>) -> Result<Tensor> {
    use ElementwiseKind::*;
    let binary = |f: fn(f32, f32) -> f32, name: &'static str| -> Result<Tensor> {
        match b {
            Operand::Tensor(t) => a.zip_map(t, name, f),
            Operand::Scalar(s) => Ok(a.map(|x| f(x, s))),
            Operand::None => Err(Error::InvalidArgument(format!("{name} needs a second operand"))),
        }
    };
    match kind {
        Add => binary(|x, y| x + y, "add"),
        Sub => binary(|x, y| x - y, "sub"),
        Mul => binary(|x, y| x * y, "mul"),
        Scale => match b {
            Operand::Scalar(s) => Ok(a.map(|x| x * s)),
            _ => Err(Error::InvalidArgument("scale takes a scalar operand".into())),
        },
        Relu => Ok(a.map(|x| x.max(0.0))),
        Sigmoid => Ok(a.map(sigmoid)),
    }
}

/// 2×2 max pooling over `N×C×H×W` (even H and W). Returns the flat argmax
/// index into the input for every output cell.
pub fn max_pool2(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let [n, c, h, w] = *x.dims.as_slice() else {
        return Err(Error::InvalidShape {
            dims: x.dims.clone(),
            reason: "max pool expects N×C×H×W".into(),
        });
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidShape {
            dims: x.dims.clone(),
            reason: "max pool expects even spatial dims".into(),
        });
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x.data[idx] > x.data[best] {
                        best = idx;
                    }
                }
                out.push(x.data[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, arg))
}

/// Mean over spatial positions: `N×C×H×W` → `N×C`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = *x.dims.as_slice() else {
        return Err(Error::InvalidShape {
            dims: x.dims.clone(),
            reason: "global average pool expects N×C×H×W".into(),
        });
    };
    let p = h * w;
    let out = x.data.chunks(p).map(|ch| ch.iter().sum::<f32>() / p as f32).collect();
    Tensor::new(vec![n, c], out)
}
