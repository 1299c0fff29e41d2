//! Tensor layouts, layout transposition, im2col lowering and the reference
//! kernels every simulated result is checked against.
//!
//! Buffers are flat `f32` in row-major order of the tagged dimension order.
//! Reference accumulations run in `f64`, so with integer-valued data the
//! results are exact and independent of summation order.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::ConvLayerParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum LayoutTag {
    Nchw,
    Nhwc,
    Kcrs,
    Rsck,
    Npqk,
    Nkpq,
    /// Two-dimensional `rows x cols` matrix.
    Matrix,
}

impl LayoutTag {
    pub fn rank(self) -> usize {
        match self {
            LayoutTag::Matrix => 2,
            _ => 4,
        }
    }

    /// Permutation taking dimension positions of `self` to positions of
    /// `to`: `out_dims[i] = in_dims[perm[i]]`.
    fn permutation_to(self, to: LayoutTag) -> Option<[usize; 4]> {
        use LayoutTag::*;
        match (self, to) {
            // [n,c,h,w] -> [n,h,w,c]
            (Nchw, Nhwc) | (Nkpq, Npqk) => Some([0, 2, 3, 1]),
            // [n,h,w,c] -> [n,c,h,w]
            (Nhwc, Nchw) | (Npqk, Nkpq) => Some([0, 3, 1, 2]),
            // [k,c,r,s] -> [r,s,c,k]
            (Kcrs, Rsck) => Some([2, 3, 1, 0]),
            // [r,s,c,k] -> [k,c,r,s]
            (Rsck, Kcrs) => Some([3, 2, 0, 1]),
            _ => None,
        }
    }
}

impl fmt::Display for LayoutTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            LayoutTag::Nchw => "NCHW",
            LayoutTag::Nhwc => "NHWC",
            LayoutTag::Kcrs => "KCRS",
            LayoutTag::Rsck => "RSCK",
            LayoutTag::Npqk => "NPQK",
            LayoutTag::Nkpq => "NKPQ",
            LayoutTag::Matrix => "MATRIX",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("buffer length {len} does not match dims {dims:?}")]
    LengthMismatch { dims: Vec<usize>, len: usize },
    #[error("layout {tag} expects {expected} dims, got {got}")]
    RankMismatch {
        tag: LayoutTag,
        expected: usize,
        got: usize,
    },
    #[error("unsupported transpose {from} -> {to}")]
    UnsupportedTranspose { from: LayoutTag, to: LayoutTag },
    #[error("tensor is tagged {found}, expected {expected}")]
    TagMismatch { expected: LayoutTag, found: LayoutTag },
    #[error("shape mismatch: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    tag: LayoutTag,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, tag: LayoutTag, data: Vec<f32>) -> Result<Self, TensorError> {
        if dims.len() != tag.rank() {
            return Err(TensorError::RankMismatch {
                tag,
                expected: tag.rank(),
                got: dims.len(),
            });
        }
        let len: usize = dims.iter().product();
        if len != data.len() {
            return Err(TensorError::LengthMismatch { dims, len: data.len() });
        }
        Ok(Tensor { dims, tag, data })
    }

    pub fn zeros(dims: Vec<usize>, tag: LayoutTag) -> Result<Self, TensorError> {
        let len = dims.iter().product();
        Tensor::new(dims, tag, vec![0.0; len])
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, TensorError> {
        Tensor::new(vec![rows, cols], LayoutTag::Matrix, data)
    }

    /// Seeded tensor. Integer mode draws whole numbers from `int_range`,
    /// float mode draws uniformly from `[-1, 1)`.
    pub fn random(
        dims: Vec<usize>,
        tag: LayoutTag,
        seed: u64,
        mode: ValueMode,
        int_range: (i32, i32),
    ) -> Result<Self, TensorError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len: usize = dims.iter().product();
        let data = (0..len)
            .map(|_| match mode {
                ValueMode::Integer => rng.gen_range(int_range.0..=int_range.1) as f32,
                ValueMode::Float => rng.gen_range(-1.0f32..1.0),
            })
            .collect();
        Tensor::new(dims, tag, data)
    }

    /// Reads a raw little-endian `f32` blob.
    pub fn from_le_bytes(dims: Vec<usize>, tag: LayoutTag, bytes: &[u8]) -> Result<Self, TensorError> {
        if !bytes.len().is_multiple_of(4) {
            return Err(TensorError::Shape(format!(
                "blob length {} is not a multiple of 4",
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor::new(dims, tag, data)
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn tag(&self) -> LayoutTag {
        self.tag
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.dims[0]
    }

    pub fn cols(&self) -> usize {
        self.dims[1]
    }

    /// Same buffer under a new shape and tag.
    pub fn reshape(self, dims: Vec<usize>, tag: LayoutTag) -> Result<Self, TensorError> {
        Tensor::new(dims, tag, self.data)
    }

    /// Reinterprets the tag without touching data (e.g. NHWC as NPQK).
    pub fn retag(mut self, tag: LayoutTag) -> Result<Self, TensorError> {
        if tag.rank() != self.dims.len() {
            return Err(TensorError::RankMismatch {
                tag,
                expected: tag.rank(),
                got: self.dims.len(),
            });
        }
        self.tag = tag;
        Ok(self)
    }

    fn expect_tag(&self, expected: &[LayoutTag]) -> Result<(), TensorError> {
        if expected.contains(&self.tag) {
            Ok(())
        } else {
            Err(TensorError::TagMismatch {
                expected: expected[0],
                found: self.tag,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueMode {
    /// Small whole numbers; all comparisons are exact.
    #[default]
    Integer,
    Float,
}

/// Permutes a 4-D tensor between paired layouts.
pub fn transpose(t: &Tensor, from: LayoutTag, to: LayoutTag) -> Result<Tensor, TensorError> {
    if t.tag != from {
        return Err(TensorError::TagMismatch {
            expected: from,
            found: t.tag,
        });
    }
    let perm = from
        .permutation_to(to)
        .ok_or(TensorError::UnsupportedTranspose { from, to })?;
    let d = &t.dims;
    let out_dims: Vec<usize> = perm.iter().map(|&p| d[p]).collect();
    let in_strides = [d[1] * d[2] * d[3], d[2] * d[3], d[3], 1];
    let s = [
        in_strides[perm[0]],
        in_strides[perm[1]],
        in_strides[perm[2]],
        in_strides[perm[3]],
    ];
    let mut data = Vec::with_capacity(t.data.len());
    for a in 0..out_dims[0] {
        for b in 0..out_dims[1] {
            for c in 0..out_dims[2] {
                let base = a * s[0] + b * s[1] + c * s[2];
                for e in 0..out_dims[3] {
                    data.push(t.data[base + e * s[3]]);
                }
            }
        }
    }
    Tensor::new(out_dims, to, data)
}

/// Expected activation dims for a conv input in the given layout.
pub fn conv_input_dims(p: &ConvLayerParams, tag: LayoutTag) -> Vec<usize> {
    match tag {
        LayoutTag::Nhwc => vec![p.n, p.h, p.w, p.c],
        _ => vec![p.n, p.c, p.h, p.w],
    }
}

/// Expected kernel dims; the channel extent is per group.
pub fn conv_kernel_dims(p: &ConvLayerParams, tag: LayoutTag) -> Vec<usize> {
    match tag {
        LayoutTag::Rsck => vec![p.r, p.s, p.c_per_group(), p.k],
        _ => vec![p.k, p.c_per_group(), p.r, p.s],
    }
}

pub fn conv_output_dims(p: &ConvLayerParams, tag: LayoutTag) -> Vec<usize> {
    match tag {
        LayoutTag::Nhwc | LayoutTag::Npqk => vec![p.n, p.p, p.q, p.k],
        _ => vec![p.n, p.k, p.p, p.q],
    }
}

fn check_dims(t: &Tensor, expected: &[usize], what: &str) -> Result<(), TensorError> {
    if t.dims != expected {
        return Err(TensorError::Shape(format!(
            "{what} dims {:?} do not match expected {:?}",
            t.dims, expected
        )));
    }
    Ok(())
}

/// Maps an output coordinate plus kernel offset to an input coordinate,
/// `None` inside the zero padding.
#[inline]
fn padded_index(out: usize, stride: usize, k: usize, pad: usize, extent: usize) -> Option<usize> {
    let pos = out * stride + k;
    if pos < pad || pos - pad >= extent {
        None
    } else {
        Some(pos - pad)
    }
}

/// Direct convolution with logical zero padding. NCHW input pairs with a
/// KCRS kernel and produces NCHW; NHWC pairs with RSCK and produces NHWC.
pub fn conv2d_ref(input: &Tensor, kernel: &Tensor, p: &ConvLayerParams) -> Result<Tensor, TensorError> {
    let nhwc = match (input.tag, kernel.tag) {
        (LayoutTag::Nchw, LayoutTag::Kcrs) => false,
        (LayoutTag::Nhwc, LayoutTag::Rsck) => true,
        (i, k) => {
            return Err(TensorError::Shape(format!(
                "unsupported input/kernel layout pairing {i}/{k}"
            )))
        }
    };
    if !p.c.is_multiple_of(p.g) || !p.k.is_multiple_of(p.g) {
        return Err(TensorError::Shape(format!(
            "channels c={} k={} not divisible by groups g={}",
            p.c, p.k, p.g
        )));
    }
    check_dims(input, &conv_input_dims(p, input.tag), "input")?;
    check_dims(kernel, &conv_kernel_dims(p, kernel.tag), "kernel")?;
    let (cg, kg) = (p.c_per_group(), p.k_per_group());
    let out_tag = if nhwc { LayoutTag::Nhwc } else { LayoutTag::Nchw };
    let mut out = Tensor::zeros(conv_output_dims(p, out_tag), out_tag)?;
    let x = &input.data;
    let wt = &kernel.data;
    for oc in 0..p.k {
        let grp = oc / kg;
        for oy in 0..p.p {
            for ox in 0..p.q {
                let mut acc = 0f64;
                for ci in 0..cg {
                    let ic = grp * cg + ci;
                    for ry in 0..p.r {
                        let Some(iy) = padded_index(oy, p.stride_h, ry, p.pad_h, p.h) else {
                            continue;
                        };
                        for sx in 0..p.s {
                            let Some(ix) = padded_index(ox, p.stride_w, sx, p.pad_w, p.w) else {
                                continue;
                            };
                            let (xi, wi) = if nhwc {
                                ((iy * p.w + ix) * p.c + ic, ((ry * p.s + sx) * cg + ci) * p.k + oc)
                            } else {
                                ((ic * p.h + iy) * p.w + ix, ((oc * cg + ci) * p.r + ry) * p.s + sx)
                            };
                            acc += x[xi] as f64 * wt[wi] as f64;
                        }
                    }
                }
                let oi = if nhwc {
                    (oy * p.q + ox) * p.k + oc
                } else {
                    (oc * p.p + oy) * p.q + ox
                };
                out.data[oi] = acc as f32;
            }
        }
    }
    Ok(out)
}

/// Patch matrix of one channel group.
///
/// NCHW: `(c_g*r*s) x (p*q)`, one column per receptive field, rows ordered
/// `(c, r, s)`. NHWC: `(p*q) x (r*s*c_g)`, one row per receptive field,
/// columns ordered `(r, s, c)` to match a reshaped RSCK kernel.
pub fn im2col_group(input: &Tensor, p: &ConvLayerParams, group: usize) -> Result<Tensor, TensorError> {
    input.expect_tag(&[LayoutTag::Nchw, LayoutTag::Nhwc])?;
    check_dims(input, &conv_input_dims(p, input.tag), "input")?;
    if group >= p.g {
        return Err(TensorError::Shape(format!("group {group} out of range g={}", p.g)));
    }
    let cg = p.c_per_group();
    let patch = cg * p.r * p.s;
    let fields = p.p * p.q;
    let x = &input.data;
    let mut data = vec![0f32; patch * fields];
    let nhwc = input.tag == LayoutTag::Nhwc;
    for oy in 0..p.p {
        for ox in 0..p.q {
            let field = oy * p.q + ox;
            for ry in 0..p.r {
                let Some(iy) = padded_index(oy, p.stride_h, ry, p.pad_h, p.h) else {
                    continue;
                };
                for sx in 0..p.s {
                    let Some(ix) = padded_index(ox, p.stride_w, sx, p.pad_w, p.w) else {
                        continue;
                    };
                    for ci in 0..cg {
                        let ic = group * cg + ci;
                        if nhwc {
                            let col = (ry * p.s + sx) * cg + ci;
                            data[field * patch + col] = x[(iy * p.w + ix) * p.c + ic];
                        } else {
                            let row = (ci * p.r + ry) * p.s + sx;
                            data[row * fields + field] = x[(ic * p.h + iy) * p.w + ix];
                        }
                    }
                }
            }
        }
    }
    if nhwc {
        Tensor::matrix(fields, patch, data)
    } else {
        Tensor::matrix(patch, fields, data)
    }
}

/// Kernel matrix of one channel group: `k_g x (c_g*r*s)` from KCRS, or
/// `(r*s*c_g) x k_g` from RSCK.
pub fn kernel_matrix_group(kernel: &Tensor, p: &ConvLayerParams, group: usize) -> Result<Tensor, TensorError> {
    kernel.expect_tag(&[LayoutTag::Kcrs, LayoutTag::Rsck])?;
    check_dims(kernel, &conv_kernel_dims(p, kernel.tag), "kernel")?;
    let (cg, kg) = (p.c_per_group(), p.k_per_group());
    let patch = cg * p.r * p.s;
    match kernel.tag {
        LayoutTag::Kcrs => {
            let start = group * kg * patch;
            Tensor::matrix(kg, patch, kernel.data[start..start + kg * patch].to_vec())
        }
        _ => {
            let mut data = Vec::with_capacity(patch * kg);
            for row in 0..patch {
                let base = row * p.k + group * kg;
                data.extend_from_slice(&kernel.data[base..base + kg]);
            }
            Tensor::matrix(patch, kg, data)
        }
    }
}

/// Full patch matrix. For `g > 1` the per-group blocks are stacked along the
/// reduction axis (rows for NCHW, columns for NHWC) so that multiplying with
/// [`kernel_matrix`] (block diagonal) reproduces the grouped convolution.
pub fn im2col(input: &Tensor, p: &ConvLayerParams) -> Result<Tensor, TensorError> {
    let blocks = (0..p.g)
        .map(|g| im2col_group(input, p, g))
        .collect::<Result<Vec<_>, _>>()?;
    if p.g == 1 {
        return Ok(blocks.into_iter().next().expect("one group"));
    }
    let patch = p.c_per_group() * p.r * p.s;
    let fields = p.p * p.q;
    if input.tag == LayoutTag::Nhwc {
        let mut data = Vec::with_capacity(fields * patch * p.g);
        for f in 0..fields {
            for b in &blocks {
                data.extend_from_slice(&b.data[f * patch..(f + 1) * patch]);
            }
        }
        Tensor::matrix(fields, patch * p.g, data)
    } else {
        let data = blocks.into_iter().flat_map(|b| b.data).collect();
        Tensor::matrix(patch * p.g, fields, data)
    }
}

/// Reshaped kernel (block diagonal over groups) matching [`im2col`].
pub fn kernel_matrix(kernel: &Tensor, p: &ConvLayerParams) -> Result<Tensor, TensorError> {
    let (kg, patch) = (p.k_per_group(), p.c_per_group() * p.r * p.s);
    let blocks = (0..p.g)
        .map(|g| kernel_matrix_group(kernel, p, g))
        .collect::<Result<Vec<_>, _>>()?;
    let full = patch * p.g;
    match kernel.tag {
        LayoutTag::Kcrs => {
            let mut data = vec![0f32; p.k * full];
            for (g, b) in blocks.iter().enumerate() {
                for row in 0..kg {
                    let dst = (g * kg + row) * full + g * patch;
                    data[dst..dst + patch].copy_from_slice(&b.data[row * patch..(row + 1) * patch]);
                }
            }
            Tensor::matrix(p.k, full, data)
        }
        _ => {
            let mut data = vec![0f32; full * p.k];
            for (g, b) in blocks.iter().enumerate() {
                for row in 0..patch {
                    let dst = (g * patch + row) * p.k + g * kg;
                    data[dst..dst + kg].copy_from_slice(&b.data[row * kg..(row + 1) * kg]);
                }
            }
            Tensor::matrix(full, p.k, data)
        }
    }
}

/// Reference matrix product with `f64` accumulation.
pub fn gemm_ref(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    a.expect_tag(&[LayoutTag::Matrix])?;
    b.expect_tag(&[LayoutTag::Matrix])?;
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    if b.rows() != k {
        return Err(TensorError::Shape(format!(
            "inner dimensions differ: {m}x{k} times {}x{n}",
            b.rows()
        )));
    }
    let mut acc = vec![0f64; m * n];
    for i in 0..m {
        let row = &mut acc[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a.data[i * k + kk] as f64;
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[kk * n..(kk + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv as f64;
            }
        }
    }
    Tensor::matrix(m, n, acc.into_iter().map(|v| v as f32).collect())
}

pub fn relu(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    for v in &mut out.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

/// Window extent for pooling; `None` when the window exceeds the input.
pub fn pool_out_dim(extent: usize, pool: usize, stride: usize) -> Option<usize> {
    if pool == 0 || stride == 0 || pool > extent {
        None
    } else {
        Some((extent - pool) / stride + 1)
    }
}

/// Max pooling without padding over NCHW or NHWC activations.
pub fn maxpool2d(t: &Tensor, pool: usize, stride: usize) -> Result<Tensor, TensorError> {
    t.expect_tag(&[LayoutTag::Nchw, LayoutTag::Nhwc])?;
    let nhwc = t.tag == LayoutTag::Nhwc;
    let (c, h, w) = if nhwc {
        (t.dims[3], t.dims[1], t.dims[2])
    } else {
        (t.dims[1], t.dims[2], t.dims[3])
    };
    let (Some(oh), Some(ow)) = (pool_out_dim(h, pool, stride), pool_out_dim(w, pool, stride)) else {
        return Err(TensorError::Shape(format!(
            "pool window {pool} larger than input {h}x{w}"
        )));
    };
    let idx = |ch: usize, y: usize, x: usize, hh: usize, ww: usize| {
        if nhwc {
            (y * ww + x) * c + ch
        } else {
            (ch * hh + y) * ww + x
        }
    };
    let dims = if nhwc { vec![1, oh, ow, c] } else { vec![1, c, oh, ow] };
    let mut out = Tensor::zeros(dims, t.tag)?;
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let mut m = f32::NEG_INFINITY;
                for dy in 0..pool {
                    for dx in 0..pool {
                        m = m.max(t.data[idx(ch, y * stride + dy, x * stride + dx, h, w)]);
                    }
                }
                out.data[idx(ch, y, x, oh, ow)] = m;
            }
        }
    }
    Ok(out)
}

/// Adds a per-channel bias (channel axis per layout; columns for matrices).
pub fn bias_add(t: &Tensor, bias: &[f32]) -> Result<Tensor, TensorError> {
    let channels = match t.tag {
        LayoutTag::Nchw => t.dims[1],
        LayoutTag::Nhwc => t.dims[3],
        LayoutTag::Matrix => t.dims[1],
        other => {
            return Err(TensorError::Shape(format!("bias_add unsupported on {other}")));
        }
    };
    if bias.len() != channels {
        return Err(TensorError::Shape(format!(
            "bias length {} does not match {channels} channels",
            bias.len()
        )));
    }
    let mut out = t.clone();
    let plane = match t.tag {
        LayoutTag::Nchw => t.dims[2] * t.dims[3],
        _ => 1,
    };
    for (i, v) in out.data.iter_mut().enumerate() {
        let ch = if t.tag == LayoutTag::Nchw {
            (i / plane) % channels
        } else {
            i % channels
        };
        *v = (*v as f64 + bias[ch] as f64) as f32;
    }
    Ok(out)
}

/// Collapses everything but the batch axis into a `1 x n` matrix, keeping
/// the buffer order.
pub fn flatten(t: &Tensor) -> Result<Tensor, TensorError> {
    let n = t.dims[0];
    let rest = t.len() / n.max(1);
    t.clone().reshape(vec![n, rest], LayoutTag::Matrix)
}

/// Dense layer: `x (1 x in)` times `weights (in x out)`.
pub fn dense_ref(x: &Tensor, weights: &Tensor) -> Result<Tensor, TensorError> {
    gemm_ref(x, weights)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FallbackKind {
    Relu,
    MaxPool2d { pool: usize, stride: usize },
    BiasAdd,
    Flatten,
    Dense,
}

/// Host-side execution of a non-accelerated op. `Dense` and `BiasAdd` take
/// their parameter tensor as the second input.
pub fn fallback_op(kind: FallbackKind, inputs: &[&Tensor]) -> Result<Tensor, TensorError> {
    let first = inputs
        .first()
        .ok_or_else(|| TensorError::Shape("fallback op needs an input".into()))?;
    let second = || {
        inputs
            .get(1)
            .copied()
            .ok_or_else(|| TensorError::Shape("missing parameter tensor".into()))
    };
    match kind {
        FallbackKind::Relu => Ok(relu(first)),
        FallbackKind::MaxPool2d { pool, stride } => maxpool2d(first, pool, stride),
        FallbackKind::BiasAdd => bias_add(first, second()?.data()),
        FallbackKind::Flatten => flatten(first),
        FallbackKind::Dense => dense_ref(first, second()?),
    }
}
