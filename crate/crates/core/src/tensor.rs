//! Dense row-major `f64` tensors and the convolution kernels built on them.
//!
//! Axis order for image-like data is `[channel, vertical, horizontal]`
//! everywhere; batched data prepends a sample axis. Convolutions are
//! cross-correlations (the kernel is not flipped).

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{shape_err, Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

/// Boundary handling for convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PaddingMode {
    /// Zero padding of `(d - 1) / 2` before and the rest after, so a stride-1
    /// pass keeps the extent.
    Same,
    /// No padding; the output shrinks by `d - 1`.
    Valid,
    /// Wrap-around indexing with the window anchored at the output position:
    /// `out[h] = sum_i x[(h + i) mod n] * k[i]`. This is the convention of the
    /// wrap-around Hankel matrices in [`crate::hankel`].
    Circular,
}

impl PaddingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PaddingMode::Same => "same",
            PaddingMode::Valid => "valid",
            PaddingMode::Circular => "circular",
        }
    }

    /// Zero padding inserted before the first element for a kernel of length `d`.
    pub fn pad_before(self, d: usize) -> usize {
        match self {
            PaddingMode::Same => (d - 1) / 2,
            PaddingMode::Valid | PaddingMode::Circular => 0,
        }
    }

    /// Output extent for an input extent `n`, kernel length `d` and `stride`.
    pub fn output_len(self, n: usize, d: usize, stride: usize) -> Result<usize> {
        if d == 0 || n == 0 || stride == 0 {
            return Err(Error::InvalidArgument(format!(
                "extent {n}, kernel {d} and stride {stride} must all be positive"
            )));
        }
        match self {
            PaddingMode::Same => Ok((n - 1) / stride + 1),
            PaddingMode::Valid | PaddingMode::Circular if d > n => Err(shape_err!(
                "kernel length {d} exceeds {} extent {n}",
                self.as_str()
            )),
            PaddingMode::Valid => Ok((n - d) / stride + 1),
            PaddingMode::Circular => Ok((n - 1) / stride + 1),
        }
    }

    /// Input index read by output position `out` at kernel tap `tap`, or `None`
    /// when it falls in the zero padding.
    #[inline]
    pub(crate) fn source(self, out: usize, tap: usize, stride: usize, d: usize, n: usize) -> Option<usize> {
        match self {
            PaddingMode::Circular => Some((out * stride + tap) % n),
            _ => {
                let pos = (out * stride + tap) as isize - self.pad_before(d) as isize;
                (pos >= 0 && (pos as usize) < n).then_some(pos as usize)
            }
        }
    }
}

impl std::str::FromStr for PaddingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "same" => Ok(PaddingMode::Same),
            "valid" => Ok(PaddingMode::Valid),
            "circular" => Ok(PaddingMode::Circular),
            other => Err(Error::InvalidArgument(format!("unknown padding mode `{other}`"))),
        }
    }
}

/// Axis of a 1-D convolution pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Contraction over all input channels (the lateral `t` factor).
    Channel,
    Vertical,
    Horizontal,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(shape_err!("zero extent in shape {shape:?}"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err!(
                "shape {shape:?} holds {n} elements but {} were given",
                data.len()
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

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero extent in shape {shape:?}");
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    /// Rank-1 tensor from a slice.
    pub fn vector(values: &[f64]) -> Self {
        assert!(!values.is_empty(), "empty vector");
        Tensor {
            shape: vec![values.len()],
            data: values.to_vec(),
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn random_uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let mut t = Self::zeros(shape);
        for v in &mut t.data {
            *v = rng.random_range(lo..hi);
        }
        t
    }

    pub fn random_normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let mut t = Self::zeros(shape);
        for v in &mut t.data {
            let z: f64 = StandardNormal.sample(rng);
            *v = std * z;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Flat row-major offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.shape.len() {
            return Err(shape_err!("index {index:?} has wrong rank for shape {:?}", self.shape));
        }
        let mut off = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            if i >= d {
                return Err(shape_err!("index {index:?} out of bounds for shape {:?}", self.shape));
            }
            off = off * d + i;
        }
        Ok(off)
    }

    /// Inverse of [`Tensor::offset`].
    pub fn unravel(&self, mut offset: usize) -> Result<Vec<usize>> {
        if offset >= self.data.len() {
            return Err(shape_err!("offset {offset} out of bounds for shape {:?}", self.shape));
        }
        let mut index = vec![0; self.shape.len()];
        for (slot, &d) in index.iter_mut().zip(&self.shape).rev() {
            *slot = offset % d;
            offset /= d;
        }
        Ok(index)
    }

    pub fn get(&self, index: &[usize]) -> Result<f64> {
        Ok(self.data[self.offset(index)?])
    }

    pub fn set(&mut self, index: &[usize], value: f64) -> Result<()> {
        let off = self.offset(index)?;
        self.data[off] = value;
        Ok(())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn into_reshape(self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data)
    }

    fn require_rank(&self, rank: usize, op: &str) -> Result<()> {
        if self.rank() != rank {
            return Err(shape_err!("{op} expects a rank-{rank} tensor, got shape {:?}", self.shape));
        }
        Ok(())
    }

    fn require_same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err!("{op}: {:?} vs {:?}", self.shape, other.shape));
        }
        Ok(())
    }

    /// Matrix transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Tensor> {
        self.require_rank(2, "transpose")?;
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.require_rank(2, "matmul")?;
        rhs.require_rank(2, "matmul")?;
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (rhs.shape[0], rhs.shape[1]);
        if k != k2 {
            return Err(shape_err!("matmul inner dimensions {k} and {k2} differ"));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(&self.data, &rhs.data, &mut out, m, k, n);
        Tensor::new(vec![m, n], out)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.require_same_shape(other, "add")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Tensor::new(self.shape.clone(), data)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.require_same_shape(other, "sub")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Tensor::new(self.shape.clone(), data)
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    /// `self += alpha * other`, in place.
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        self.require_same_shape(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.require_same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn reduce_sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Flat index of the largest element (first one on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.require_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// `max |a - b| / max(max |b|, tiny)`.
    pub fn rel_err(&self, reference: &Tensor) -> Result<f64> {
        let diff = self.max_abs_diff(reference)?;
        Ok(diff / reference.max_abs().max(f64::MIN_POSITIVE))
    }
}

/// `c += a * b` with row-major `a: m x k`, `b: k x n`.
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// `c += a * b^T` with row-major `a: m x k`, `b: n x k`.
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `c += a^T * b` with row-major `a: k x m`, `b: k x n`.
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += api * bv;
            }
        }
    }
}

fn require_vector(t: &Tensor, name: &str) -> Result<usize> {
    if t.rank() != 1 {
        return Err(shape_err!("{name} must be rank-1, got shape {:?}", t.shape()));
    }
    Ok(t.len())
}

/// Outer product of three vectors laid out as `[N, d1, d2]`:
/// `out[k, i, j] = p[i] * q[j] * t[k]`.
pub fn outer3(p: &Tensor, q: &Tensor, t: &Tensor) -> Result<Tensor> {
    let d1 = require_vector(p, "p")?;
    let d2 = require_vector(q, "q")?;
    let n = require_vector(t, "t")?;
    let mut out = Vec::with_capacity(n * d1 * d2);
    for &tk in t.data() {
        for &pi in p.data() {
            for &qj in q.data() {
                out.push(pi * qj * tk);
            }
        }
    }
    Tensor::new(vec![n, d1, d2], out)
}

/// Multi-channel 2-D cross-correlation of `input: [N, H, W]` with
/// `filter: [N, d1, d2]`, summed over channels. Returns `[H', W']`.
pub fn conv2d_multi(input: &Tensor, filter: &Tensor, padding: PaddingMode, stride: usize) -> Result<Tensor> {
    input.require_rank(3, "conv2d_multi input")?;
    filter.require_rank(3, "conv2d_multi filter")?;
    let (n, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    let (nf, d1, d2) = (filter.shape[0], filter.shape[1], filter.shape[2]);
    if n != nf {
        return Err(shape_err!("input has {n} channels but filter has {nf}"));
    }
    let ho = padding.output_len(h, d1, stride)?;
    let wo = padding.output_len(w, d2, stride)?;
    let x = input.data();
    let f = filter.data();
    let mut out = vec![0.0; ho * wo];
    for oy in 0..ho {
        for ox in 0..wo {
            let mut acc = 0.0;
            for i in 0..d1 {
                let Some(sy) = padding.source(oy, i, stride, d1, h) else { continue };
                for j in 0..d2 {
                    let Some(sx) = padding.source(ox, j, stride, d2, w) else { continue };
                    for k in 0..n {
                        acc += f[(k * d1 + i) * d2 + j] * x[(k * h + sy) * w + sx];
                    }
                }
            }
            out[oy * wo + ox] = acc;
        }
    }
    Tensor::new(vec![ho, wo], out)
}

/// One 1-D pass of a separable convolution.
///
/// `Axis::Channel` contracts `input: [N, H, W]` with a length-`N` kernel into
/// `[H, W]`. The spatial axes accept `[H, W]` or `[C, H, W]` and correlate
/// every row (horizontal) or column (vertical) independently.
pub fn conv1d_axis(input: &Tensor, kernel: &Tensor, axis: Axis, padding: PaddingMode) -> Result<Tensor> {
    let d = require_vector(kernel, "kernel")?;
    let k = kernel.data();
    match axis {
        Axis::Channel => {
            input.require_rank(3, "channel contraction")?;
            let (n, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
            if d != n {
                return Err(shape_err!("channel kernel has length {d} but input has {n} channels"));
            }
            let plane = h * w;
            let mut out = vec![0.0; plane];
            for (c, &kc) in k.iter().enumerate() {
                for (o, v) in out.iter_mut().zip(&input.data[c * plane..(c + 1) * plane]) {
                    *o += kc * v;
                }
            }
            Tensor::new(vec![h, w], out)
        }
        Axis::Vertical | Axis::Horizontal => {
            let (c, h, w) = match input.shape.as_slice() {
                &[h, w] => (1, h, w),
                &[c, h, w] => (c, h, w),
                s => return Err(shape_err!("spatial pass expects rank 2 or 3, got {s:?}")),
            };
            let (ho, wo) = if axis == Axis::Vertical {
                (padding.output_len(h, d, 1)?, w)
            } else {
                (h, padding.output_len(w, d, 1)?)
            };
            let mut out = vec![0.0; c * ho * wo];
            for ch in 0..c {
                let src = &input.data[ch * h * w..(ch + 1) * h * w];
                let dst = &mut out[ch * ho * wo..(ch + 1) * ho * wo];
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for (tap, &kv) in k.iter().enumerate() {
                            let idx = if axis == Axis::Vertical {
                                padding.source(oy, tap, 1, d, h).map(|sy| sy * w + ox)
                            } else {
                                padding.source(ox, tap, 1, d, w).map(|sx| oy * w + sx)
                            };
                            if let Some(idx) = idx {
                                acc += kv * src[idx];
                            }
                        }
                        dst[oy * wo + ox] = acc;
                    }
                }
            }
            let shape = if input.rank() == 2 { vec![ho, wo] } else { vec![c, ho, wo] };
            Tensor::new(shape, out)
        }
    }
}
