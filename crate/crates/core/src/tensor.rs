//! Dense row-major `f32` tensors and the numeric kernels the autodiff graph
//! is built on.
//!
//! Every reduction here runs in a fixed order (row-major, sample by sample),
//! so identical inputs always produce bit-identical outputs.

use rand::Rng;

use crate::error::{Error, Result};

/// Largest `f32` strictly below one. Gate activations are clamped to it so
/// that they stay inside their open ranges even when the exact value rounds.
const BELOW_ONE: f32 = 1.0 - f32::EPSILON / 2.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) && !data.is_empty() {
            return Err(Error::shape("tensor", format!("{shape:?} with {} values", data.len())));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    /// Samples every element uniformly from `[low, high)`.
    pub fn rand_uniform<R: Rng + ?Sized>(shape: &[usize], low: f32, high: f32, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| rng.gen_range(low..high))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        same_shape(op, self, other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, factor: f32) -> Tensor {
        self.map(|v| v * factor)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.map(sigmoid)
    }

    pub fn tanh(&self) -> Tensor {
        self.map(tanh)
    }

    /// Row-major sum, accumulated in `f64`.
    pub fn sum(&self) -> f32 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() as f32
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Extent of `axis` and the number of contiguous elements per index of it.
    fn axis_layout(&self, axis: usize) -> (usize, usize, usize) {
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        (outer, self.shape[axis], inner)
    }

    /// Copies `len` indices of `axis` starting at `start`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.shape.len() || start + len > self.shape[axis] || len == 0 {
            return Err(Error::shape(
                "narrow",
                format!("axis {axis} range {start}..{} of {:?}", start + len, self.shape),
            ));
        }
        let (outer, extent, inner) = self.axis_layout(axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Tensor { shape, data })
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let rank = first.shape.len();
        if axis >= rank {
            return Err(Error::shape("concat", format!("axis {axis} of rank {rank}")));
        }
        for p in parts {
            let ok = p.shape.len() == rank
                && p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {:?} along axis {axis}", p.shape, first.shape),
                ));
            }
        }
        let (outer, _, inner) = first.axis_layout(axis);
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Ok(Tensor { shape, data })
    }

    /// Rearranges `[N, C, H, W]` into `[N, C*p*p, H/p, W/p]`.
    pub fn space_to_depth(&self, patch: usize) -> Result<Tensor> {
        let (n, c, h, w) = dims4("space_to_depth", self)?;
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(Error::shape(
                "space_to_depth",
                format!("{h}x{w} frame is not divisible by patch {patch}"),
            ));
        }
        if patch == 1 {
            return Ok(self.clone());
        }
        let (ho, wo) = (h / patch, w / patch);
        let co = c * patch * patch;
        let mut out = Tensor::zeros(&[n, co, ho, wo]);
        for b in 0..n {
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let oc = (ci * patch + y % patch) * patch + x % patch;
                        out.data[((b * co + oc) * ho + y / patch) * wo + x / patch] =
                            self.data[((b * c + ci) * h + y) * w + x];
                    }
                }
            }
        }
        Ok(out)
    }

    /// Inverse of [`Tensor::space_to_depth`].
    pub fn depth_to_space(&self, patch: usize) -> Result<Tensor> {
        let (n, co, ho, wo) = dims4("depth_to_space", self)?;
        if patch == 0 || co % (patch * patch) != 0 {
            return Err(Error::shape(
                "depth_to_space",
                format!("{co} channels are not divisible by {patch}^2"),
            ));
        }
        if patch == 1 {
            return Ok(self.clone());
        }
        let c = co / (patch * patch);
        let (h, w) = (ho * patch, wo * patch);
        let mut out = Tensor::zeros(&[n, c, h, w]);
        for b in 0..n {
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let oc = (ci * patch + y % patch) * patch + x % patch;
                        out.data[((b * c + ci) * h + y) * w + x] =
                            self.data[((b * co + oc) * ho + y / patch) * wo + x / patch];
                    }
                }
            }
        }
        Ok(out)
    }
}

pub fn sigmoid(x: f32) -> f32 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(f32::MIN_POSITIVE, BELOW_ONE)
}

pub fn tanh(x: f32) -> f32 {
    x.tanh().clamp(-BELOW_ONE, BELOW_ONE)
}

pub(crate) fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape, b.shape)));
    }
    Ok(())
}

pub(crate) fn dims4(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        ref s => Err(Error::shape(op, format!("expected [N, C, H, W], got {s:?}"))),
    }
}

/// Views an unbatched `[C, H, W]` tensor as a batch of one.
fn batched(op: &'static str, t: &Tensor) -> Result<(Tensor, bool)> {
    match t.shape().len() {
        3 => {
            let mut shape = vec![1];
            shape.extend_from_slice(t.shape());
            Ok((t.clone().reshape(&shape)?, true))
        }
        4 => Ok((t.clone(), false)),
        _ => Err(Error::shape(op, format!("expected rank 3 or 4, got {:?}", t.shape()))),
    }
}

/// Geometry of a stride-1, same-padded convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
}

impl ConvGeometry {
    pub fn check(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Self> {
        let (batch, c_in, height, width) = dims4("conv2d", input)?;
        let (c_out, wc_in, kh, kw) = match *weight.shape() {
            [a, b, c, d] => (a, b, c, d),
            ref s => return Err(Error::shape("conv2d", format!("kernel must be rank 4, got {s:?}"))),
        };
        if wc_in != c_in {
            return Err(Error::shape(
                "conv2d",
                format!("kernel expects {wc_in} input channels, input has {c_in}"),
            ));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::shape("conv2d", format!("kernel must be square and odd, got {kh}x{kw}")));
        }
        if let Some(b) = bias {
            if b.shape() != [c_out] {
                return Err(Error::shape("conv2d", format!("bias {:?} for {c_out} outputs", b.shape())));
            }
        }
        Ok(ConvGeometry {
            batch,
            c_in,
            c_out,
            height,
            width,
            kernel: kh,
        })
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }

    fn plane(&self) -> usize {
        self.height * self.width
    }
}

/// Unfolds the zero-padded receptive fields into `[C_in*k*k][N*H*W]`, so
/// one matrix product covers the whole batch.
pub(crate) fn im2col(input: &Tensor, g: &ConvGeometry) -> Vec<f32> {
    let (k, h, w) = (g.kernel, g.height, g.width);
    let pad = k / 2;
    let plane = g.plane();
    let wide = g.batch * plane;
    let mut cols = vec![0.0f32; g.patch_len() * wide];
    let src = input.data();
    for n in 0..g.batch {
        for ci in 0..g.c_in {
            let chan = &src[(n * g.c_in + ci) * plane..][..plane];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * wide + n * plane..][..plane];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - pad as isize;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let x_lo = pad.saturating_sub(kx);
                        let x_hi = (w + pad).saturating_sub(kx).min(w);
                        if x_lo >= x_hi {
                            continue;
                        }
                        let sx_lo = x_lo + kx - pad;
                        let srow = &chan[sy as usize * w..][..w];
                        dst[y * w + x_lo..y * w + x_hi]
                            .copy_from_slice(&srow[sx_lo..sx_lo + (x_hi - x_lo)]);
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds unfolded gradients back onto the input layout.
pub(crate) fn col2im(cols: &[f32], g: &ConvGeometry) -> Vec<f32> {
    let (k, h, w) = (g.kernel, g.height, g.width);
    let pad = k / 2;
    let plane = g.plane();
    let wide = g.batch * plane;
    let mut out = vec![0.0f32; g.batch * g.c_in * plane];
    for n in 0..g.batch {
        for ci in 0..g.c_in {
            let chan = &mut out[(n * g.c_in + ci) * plane..][..plane];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols[row * wide + n * plane..][..plane];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - pad as isize;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let x_lo = pad.saturating_sub(kx);
                        let x_hi = (w + pad).saturating_sub(kx).min(w);
                        if x_lo >= x_hi {
                            continue;
                        }
                        let sx_lo = x_lo + kx - pad;
                        let drow = &mut chan[sy as usize * w..][..w];
                        for (d, s) in drow[sx_lo..sx_lo + (x_hi - x_lo)]
                            .iter_mut()
                            .zip(&src[y * w + x_lo..y * w + x_hi])
                        {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
    out
}

/// `[A][B][P]` to `[B][A][P]`.
fn swap_outer(src: &[f32], a: usize, b: usize, plane: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; src.len()];
    for i in 0..a {
        for j in 0..b {
            out[(j * a + i) * plane..][..plane].copy_from_slice(&src[(i * b + j) * plane..][..plane]);
        }
    }
    out
}

/// `c[m x n] = beta * c + a[m x k] * b[k x n]` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: every caller passes slices covering the strided extents
    // described by (m, k, n) and the strides; c never aliases a or b.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

/// Forward convolution over already unfolded columns.
pub(crate) fn conv2d_from_cols(
    cols: &[f32],
    weight: &Tensor,
    bias: Option<&Tensor>,
    g: &ConvGeometry,
) -> Tensor {
    let plane = g.plane();
    let wide = g.batch * plane;
    let kk = g.patch_len();
    // [C_out][N*HW], then reordered to [N][C_out][HW].
    let mut wide_out = vec![0.0f32; g.c_out * wide];
    if let Some(b) = bias {
        for (co, chunk) in wide_out.chunks_mut(wide.max(1)).enumerate() {
            chunk.fill(b.data()[co]);
        }
    }
    gemm(
        g.c_out,
        kk,
        wide,
        weight.data(),
        (kk, 1),
        cols,
        (wide, 1),
        if bias.is_some() { 1.0 } else { 0.0 },
        &mut wide_out,
        wide,
    );
    Tensor {
        shape: vec![g.batch, g.c_out, g.height, g.width],
        data: swap_outer(&wide_out, g.c_out, g.batch, plane),
    }
}

pub(crate) struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

pub(crate) fn conv2d_backward(
    grad_out: &Tensor,
    cols: &[f32],
    weight: &Tensor,
    g: &ConvGeometry,
    want: (bool, bool, bool),
) -> ConvGrads {
    let plane = g.plane();
    let wide = g.batch * plane;
    let kk = g.patch_len();
    let go = grad_out.data();
    // [C_out][N*HW]
    let go_wide = if want.0 || want.1 {
        swap_outer(go, g.batch, g.c_out, plane)
    } else {
        Vec::new()
    };

    let input = want.0.then(|| {
        let mut dcols = vec![0.0f32; kk * wide];
        gemm(
            kk,
            g.c_out,
            wide,
            weight.data(),
            (1, kk),
            &go_wide,
            (wide, 1),
            0.0,
            &mut dcols,
            wide,
        );
        Tensor {
            shape: vec![g.batch, g.c_in, g.height, g.width],
            data: col2im(&dcols, g),
        }
    });

    let weight_grad = want.1.then(|| {
        let mut dw = vec![0.0f32; g.c_out * kk];
        gemm(
            g.c_out,
            wide,
            kk,
            &go_wide,
            (wide, 1),
            cols,
            (1, wide),
            0.0,
            &mut dw,
            kk,
        );
        Tensor {
            shape: weight.shape().to_vec(),
            data: dw,
        }
    });

    let bias = want.2.then(|| {
        let mut db = vec![0.0f32; g.c_out];
        for n in 0..g.batch {
            for (co, d) in db.iter_mut().enumerate() {
                let chunk = &go[(n * g.c_out + co) * plane..][..plane];
                *d += chunk.iter().map(|&v| v as f64).sum::<f64>() as f32;
            }
        }
        Tensor {
            shape: vec![g.c_out],
            data: db,
        }
    });

    ConvGrads {
        input,
        weight: weight_grad,
        bias,
    }
}

/// Stride-1 convolution with zero "same" padding.
///
/// `input` is `[C_in, H, W]` or batched `[N, C_in, H, W]`; `kernel` is
/// `[C_out, C_in, k, k]` with odd `k`. The output keeps the input's rank and
/// spatial extent.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (x, unbatched) = batched("conv2d", input)?;
    let g = ConvGeometry::check(&x, kernel, bias)?;
    let cols = im2col(&x, &g);
    let out = conv2d_from_cols(&cols, kernel, bias, &g);
    if unbatched {
        out.reshape(&[g.c_out, g.height, g.width])
    } else {
        Ok(out)
    }
}

/// Cached statistics of a grouped layer normalization.
pub(crate) struct LayerNormCache {
    pub normalized: Tensor,
    pub rstd: Vec<f32>,
}

pub(crate) struct LayerNormLayout {
    pub batch: usize,
    pub channels: usize,
    pub groups: usize,
    pub inner: usize,
}

impl LayerNormLayout {
    pub fn check(x: &Tensor, gain: &Tensor, bias: &Tensor, groups: usize) -> Result<Self> {
        if x.numel() == 0 {
            return Err(Error::shape("layer_norm", "zero-size tensor"));
        }
        if x.shape().len() < 2 {
            return Err(Error::shape(
                "layer_norm",
                format!("expected [N, C, ...], got {:?}", x.shape()),
            ));
        }
        let batch = x.shape()[0];
        let channels = x.shape()[1];
        if groups == 0 || !channels.is_multiple_of(groups) {
            return Err(Error::shape(
                "layer_norm",
                format!("{channels} channels in {groups} groups"),
            ));
        }
        if gain.shape() != [channels] || bias.shape() != [channels] {
            return Err(Error::shape(
                "layer_norm",
                format!("gain {:?} / bias {:?} for {channels} channels", gain.shape(), bias.shape()),
            ));
        }
        let inner = x.shape()[2..].iter().product();
        Ok(LayerNormLayout {
            batch,
            channels,
            groups,
            inner,
        })
    }

    fn group_len(&self) -> usize {
        self.channels / self.groups * self.inner
    }
}

pub(crate) fn layer_norm_forward(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    layout: &LayerNormLayout,
    eps: f32,
) -> (Tensor, LayerNormCache) {
    let len = layout.group_len();
    let per_channel = layout.inner;
    let mut normalized = vec![0.0f32; x.numel()];
    let mut out = vec![0.0f32; x.numel()];
    let mut rstd = Vec::with_capacity(layout.batch * layout.groups);
    for (gi, chunk) in x.data().chunks(len).enumerate() {
        let mean = chunk.iter().map(|&v| v as f64).sum::<f64>() / len as f64;
        let var = chunk
            .iter()
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / len as f64;
        let r = 1.0 / (var + eps as f64).sqrt();
        rstd.push(r as f32);
        let base = gi * len;
        for (j, &v) in chunk.iter().enumerate() {
            let idx = base + j;
            let c = (idx / per_channel) % layout.channels;
            let xhat = ((v as f64 - mean) * r) as f32;
            normalized[idx] = xhat;
            out[idx] = xhat * gain.data()[c] + bias.data()[c];
        }
    }
    let shape = x.shape().to_vec();
    (
        Tensor {
            shape: shape.clone(),
            data: out,
        },
        LayerNormCache {
            normalized: Tensor {
                shape,
                data: normalized,
            },
            rstd,
        },
    )
}

pub(crate) fn layer_norm_backward(
    grad_out: &Tensor,
    gain: &Tensor,
    cache: &LayerNormCache,
    layout: &LayerNormLayout,
) -> (Tensor, Tensor, Tensor) {
    let len = layout.group_len();
    let per_channel = layout.inner;
    let go = grad_out.data();
    let xhat = cache.normalized.data();
    let mut dx = vec![0.0f32; go.len()];
    let mut dgain = vec![0.0f32; layout.channels];
    let mut dbias = vec![0.0f32; layout.channels];
    for gi in 0..layout.batch * layout.groups {
        let base = gi * len;
        let mut mean_dxhat = 0.0f64;
        let mut mean_dxhat_xhat = 0.0f64;
        for j in 0..len {
            let idx = base + j;
            let c = (idx / per_channel) % layout.channels;
            let d = (go[idx] * gain.data()[c]) as f64;
            mean_dxhat += d;
            mean_dxhat_xhat += d * xhat[idx] as f64;
            dgain[c] += go[idx] * xhat[idx];
            dbias[c] += go[idx];
        }
        mean_dxhat /= len as f64;
        mean_dxhat_xhat /= len as f64;
        let r = cache.rstd[gi] as f64;
        for j in 0..len {
            let idx = base + j;
            let c = (idx / per_channel) % layout.channels;
            let d = (go[idx] * gain.data()[c]) as f64;
            dx[idx] = (r * (d - mean_dxhat - xhat[idx] as f64 * mean_dxhat_xhat)) as f32;
        }
    }
    (
        Tensor {
            shape: grad_out.shape().to_vec(),
            data: dx,
        },
        Tensor {
            shape: vec![layout.channels],
            data: dgain,
        },
        Tensor {
            shape: vec![layout.channels],
            data: dbias,
        },
    )
}

/// Layer normalization over every channel and spatial position of each
/// sample. `x` is `[N, C, ...]`; `gain` and `bias` are per-channel `[C]`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f32) -> Result<Tensor> {
    layer_norm_grouped(x, gain, bias, 1, eps)
}

/// Like [`layer_norm`], but the channels are split into `groups` equal
/// blocks, each normalized with its own statistic.
pub fn layer_norm_grouped(x: &Tensor, gain: &Tensor, bias: &Tensor, groups: usize, eps: f32) -> Result<Tensor> {
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("layer_norm eps must be positive, got {eps}")));
    }
    let layout = LayerNormLayout::check(x, gain, bias, groups)?;
    Ok(layer_norm_forward(x, gain, bias, &layout, eps).0)
}

/// Adds a per-channel bias `[C]` to `[N, C, ...]`.
pub fn add_channel_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if x.shape().len() < 2 || bias.shape() != [x.shape()[1]] {
        return Err(Error::shape(
            "add_channel_bias",
            format!("{:?} + {:?}", x.shape(), bias.shape()),
        ));
    }
    let inner: usize = x.shape()[2..].iter().product();
    let c = x.shape()[1];
    let mut out = x.clone();
    for (i, v) in out.data.iter_mut().enumerate() {
        *v += bias.data[(i / inner) % c];
    }
    Ok(out)
}

pub(crate) fn channel_sum(grad: &Tensor) -> Tensor {
    let c = grad.shape()[1];
    let inner: usize = grad.shape()[2..].iter().product();
    let mut acc = vec![0.0f64; c];
    for (i, &v) in grad.data.iter().enumerate() {
        acc[(i / inner) % c] += v as f64;
    }
    Tensor {
        shape: vec![c],
        data: acc.into_iter().map(|v| v as f32).collect(),
    }
}
