//! Convolution layer with three weight parameterisations.
//!
//! * [`ConvMode::Standard`]: one dense `[N, d1, d2]` filter per output channel.
//! * [`ConvMode::Rank1`]: each filter is `p ⊗ q ⊗ t`, recomposed on every
//!   forward pass and trained through the factors.
//! * [`ConvMode::Sequential`]: each output channel is a lateral (`N x 1 x 1`),
//!   vertical (`1 x d1 x 1`) and horizontal (`1 x 1 x d2`) pass in series,
//!   trained through that pipeline directly (the flattened baseline).
//!
//! The first two modes run through im2col + GEMM. The sequential mode never
//! materialises a 3-D filter, which is also how a trained rank-1 layer is
//! evaluated after [`ConvLayer::to_sequential`].

use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{shape_err, Error, Result};
use crate::layers::ParamSlot;
use crate::rank1::{FactorGrads, ParamCount, Rank1Filter};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, outer3, PaddingMode, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ConvMode {
    Standard,
    Rank1,
    Sequential,
}

impl ConvMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ConvMode::Standard => "standard",
            ConvMode::Rank1 => "rank1",
            ConvMode::Sequential => "sequential-1d",
        }
    }
}

impl FromStr for ConvMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(ConvMode::Standard),
            "rank1" | "rank1-composed" => Ok(ConvMode::Rank1),
            "sequential-1d" | "sequential" | "flattened" => Ok(ConvMode::Sequential),
            other => Err(Error::InvalidArgument(format!(
                "unknown conv mode `{other}` (expected standard, rank1 or sequential-1d)"
            ))),
        }
    }
}

/// Three independent 1-D kernels applied in series.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatChain {
    /// Length `N`, contracts the input channels.
    pub lateral: Tensor,
    /// Length `d1`.
    pub vertical: Tensor,
    /// Length `d2`.
    pub horizontal: Tensor,
}

impl FlatChain {
    fn zeros(n: usize, d1: usize, d2: usize) -> Self {
        FlatChain {
            lateral: Tensor::zeros(&[n]),
            vertical: Tensor::zeros(&[d1]),
            horizontal: Tensor::zeros(&[d2]),
        }
    }

    fn accumulate(&mut self, other: &FlatChain) {
        for (a, b) in [
            (&mut self.lateral, &other.lateral),
            (&mut self.vertical, &other.vertical),
            (&mut self.horizontal, &other.horizontal),
        ] {
            a.axpy(1.0, b).expect("matching chain shapes");
        }
    }

    /// The 3-D filter this chain is equivalent to.
    pub fn to_dense(&self) -> Tensor {
        outer3(&self.vertical, &self.horizontal, &self.lateral).expect("chain kernels are vectors")
    }
}

#[derive(Clone, Debug)]
pub enum ConvWeights {
    /// `weight` and `grad` are `[q, N, d1, d2]`.
    Standard { weight: Tensor, grad: Tensor },
    Rank1 {
        filters: Vec<Rank1Filter>,
        grads: Vec<FactorGrads>,
    },
    Sequential {
        chains: Vec<FlatChain>,
        grads: Vec<FlatChain>,
    },
}

#[derive(Clone, Debug)]
enum ConvCache {
    /// im2col matrices `[N d1 d2, H' W']`, one per sample.
    Columns { cols: Vec<Vec<f64>>, input_shape: Vec<usize> },
    /// Lateral (`z`) and vertical (`u`) intermediates per sample and output channel.
    Chains {
        input: Tensor,
        z: Vec<Vec<Vec<f64>>>,
        u: Vec<Vec<Vec<f64>>>,
    },
}

#[derive(Clone, Debug)]
pub struct ConvLayer {
    in_channels: usize,
    out_channels: usize,
    kernel: (usize, usize),
    padding: PaddingMode,
    stride: usize,
    weights: ConvWeights,
    bias: Tensor,
    bias_grad: Tensor,
    cache: Option<ConvCache>,
}

/// Parameter bookkeeping for one conv layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvParams {
    pub filters: usize,
    pub per_filter: ParamCount,
}

impl ConvParams {
    pub fn factored_total(&self) -> usize {
        self.filters * self.per_filter.factored
    }

    pub fn dense_total(&self) -> usize {
        self.filters * self.per_filter.dense
    }
}

impl ConvLayer {
    /// A freshly initialised layer (Glorot-uniform variance for the effective
    /// 3-D filters in every mode, zero bias).
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        mode: ConvMode,
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        padding: PaddingMode,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let (d1, d2) = kernel;
        if in_channels == 0 || out_channels == 0 || d1 == 0 || d2 == 0 || stride == 0 {
            return Err(Error::InvalidArgument(
                "conv channels, kernel extents and stride must be positive".into(),
            ));
        }
        let fan_in = in_channels * d1 * d2;
        let fan_out = out_channels * d1 * d2;
        let weights = match mode {
            ConvMode::Standard => {
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let shape = [out_channels, in_channels, d1, d2];
                ConvWeights::Standard {
                    weight: Tensor::random_uniform(&shape, -bound, bound, rng),
                    grad: Tensor::zeros(&shape),
                }
            }
            ConvMode::Rank1 => {
                let filters: Vec<_> = (0..out_channels)
                    .map(|_| Rank1Filter::init_glorot(in_channels, d1, d2, fan_in, fan_out, rng))
                    .collect();
                let grads = filters.iter().map(FactorGrads::zeros_like).collect();
                ConvWeights::Rank1 { filters, grads }
            }
            ConvMode::Sequential => {
                let chains = (0..out_channels)
                    .map(|_| {
                        let f = Rank1Filter::init_glorot(in_channels, d1, d2, fan_in, fan_out, rng);
                        FlatChain {
                            lateral: f.t().clone(),
                            vertical: f.p().clone(),
                            horizontal: f.q().clone(),
                        }
                    })
                    .collect();
                let grads = (0..out_channels).map(|_| FlatChain::zeros(in_channels, d1, d2)).collect();
                ConvWeights::Sequential { chains, grads }
            }
        };
        Ok(ConvLayer {
            in_channels,
            out_channels,
            kernel,
            padding,
            stride,
            weights,
            bias: Tensor::zeros(&[out_channels]),
            bias_grad: Tensor::zeros(&[out_channels]),
            cache: None,
        })
    }

    /// Layer from explicit weights. All filters must share `(N, d1, d2)` and
    /// `bias` must have one entry per filter.
    pub fn from_weights(weights: ConvWeights, bias: Tensor, padding: PaddingMode, stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::InvalidArgument("stride must be positive".into()));
        }
        let dims: Vec<(usize, usize, usize)> = match &weights {
            ConvWeights::Standard { weight, .. } => {
                let &[q, n, d1, d2] = weight.shape() else {
                    return Err(shape_err!("dense conv weight must be [q, N, d1, d2], got {:?}", weight.shape()));
                };
                vec![(n, d1, d2); q]
            }
            ConvWeights::Rank1 { filters, .. } => filters.iter().map(Rank1Filter::dims).collect(),
            ConvWeights::Sequential { chains, .. } => chains
                .iter()
                .map(|c| {
                    if c.lateral.rank() != 1 || c.vertical.rank() != 1 || c.horizontal.rank() != 1 {
                        return Err(shape_err!("sequential chain kernels must be vectors"));
                    }
                    Ok((c.lateral.len(), c.vertical.len(), c.horizontal.len()))
                })
                .collect::<Result<_>>()?,
        };
        let Some(&(n, d1, d2)) = dims.first() else {
            return Err(Error::InvalidArgument("a conv layer needs at least one filter".into()));
        };
        if dims.iter().any(|&d| d != (n, d1, d2)) {
            return Err(shape_err!("all filters in a layer must share (N, d1, d2)"));
        }
        let q = dims.len();
        if bias.shape() != [q] {
            return Err(shape_err!("bias has shape {:?}, expected [{q}]", bias.shape()));
        }
        let weights = match weights {
            ConvWeights::Standard { weight, .. } => ConvWeights::Standard {
                grad: Tensor::zeros(weight.shape()),
                weight,
            },
            ConvWeights::Rank1 { filters, .. } => ConvWeights::Rank1 {
                grads: filters.iter().map(FactorGrads::zeros_like).collect(),
                filters,
            },
            ConvWeights::Sequential { chains, .. } => ConvWeights::Sequential {
                grads: (0..q).map(|_| FlatChain::zeros(n, d1, d2)).collect(),
                chains,
            },
        };
        Ok(ConvLayer {
            in_channels: n,
            out_channels: q,
            kernel: (d1, d2),
            padding,
            stride,
            weights,
            bias_grad: Tensor::zeros(&[q]),
            bias,
            cache: None,
        })
    }

    pub fn mode(&self) -> ConvMode {
        match self.weights {
            ConvWeights::Standard { .. } => ConvMode::Standard,
            ConvWeights::Rank1 { .. } => ConvMode::Rank1,
            ConvWeights::Sequential { .. } => ConvMode::Sequential,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn kernel(&self) -> (usize, usize) {
        self.kernel
    }

    pub fn padding(&self) -> PaddingMode {
        self.padding
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn weights(&self) -> &ConvWeights {
        &self.weights
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn rank1_filters(&self) -> Option<&[Rank1Filter]> {
        match &self.weights {
            ConvWeights::Rank1 { filters, .. } => Some(filters),
            _ => None,
        }
    }

    pub fn rank1_grads(&self) -> Option<&[FactorGrads]> {
        match &self.weights {
            ConvWeights::Rank1 { grads, .. } => Some(grads),
            _ => None,
        }
    }

    /// The effective `[N, d1, d2]` filter of output channel `i`.
    pub fn dense_filter(&self, i: usize) -> Tensor {
        let (d1, d2) = self.kernel;
        let n = self.in_channels;
        match &self.weights {
            ConvWeights::Standard { weight, .. } => {
                let k = n * d1 * d2;
                Tensor::new(vec![n, d1, d2], weight.data()[i * k..(i + 1) * k].to_vec()).expect("slice of weight")
            }
            ConvWeights::Rank1 { filters, .. } => filters[i].composed().cloned().unwrap_or_else(|| filters[i].to_dense()),
            ConvWeights::Sequential { chains, .. } => chains[i].to_dense(),
        }
    }

    pub fn dense_filters(&self) -> Vec<Tensor> {
        (0..self.out_channels).map(|i| self.dense_filter(i)).collect()
    }

    /// The same factors as a sequential 1-D pipeline: the inference form of
    /// a trained rank-1 layer. Fails for dense layers.
    pub fn to_sequential(&self) -> Result<ConvLayer> {
        let chains = match &self.weights {
            ConvWeights::Rank1 { filters, .. } => filters
                .iter()
                .map(|f| FlatChain {
                    lateral: f.t().clone(),
                    vertical: f.p().clone(),
                    horizontal: f.q().clone(),
                })
                .collect(),
            ConvWeights::Sequential { chains, .. } => chains.clone(),
            ConvWeights::Standard { .. } => {
                return Err(Error::InvalidArgument(
                    "a dense conv layer has no 1-D decomposition".into(),
                ))
            }
        };
        ConvLayer::from_weights(
            ConvWeights::Sequential { chains, grads: Vec::new() },
            self.bias.clone(),
            self.padding,
            self.stride,
        )
    }

    pub fn param_count(&self) -> ConvParams {
        ConvParams {
            filters: self.out_channels,
            per_filter: ParamCount::for_shape(self.in_channels, self.kernel.0, self.kernel.1),
        }
    }

    /// Output extent `(H', W')` for an `H x W` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        Ok((
            self.padding.output_len(h, self.kernel.0, self.stride)?,
            self.padding.output_len(w, self.kernel.1, self.stride)?,
        ))
    }

    fn check_input(&self, x: &Tensor) -> Result<(usize, usize, usize)> {
        let &[b, n, h, w] = x.shape() else {
            return Err(shape_err!("conv input must be [B, N, H, W], got {:?}", x.shape()));
        };
        if n != self.in_channels {
            return Err(shape_err!("conv expects {} input channels, got {n}", self.in_channels));
        }
        Ok((b, h, w))
    }

    /// Filters as a `[q, N d1 d2]` row-major matrix, recomposing rank-1
    /// filters from their factors.
    fn weight_matrix(&mut self) -> Vec<f64> {
        match &mut self.weights {
            ConvWeights::Standard { weight, .. } => weight.data().to_vec(),
            ConvWeights::Rank1 { filters, .. } => {
                let mut m = Vec::with_capacity(self.out_channels * self.in_channels * self.kernel.0 * self.kernel.1);
                for f in filters.iter_mut() {
                    m.extend_from_slice(f.compose().data());
                }
                m
            }
            ConvWeights::Sequential { .. } => unreachable!("sequential layers do not use a weight matrix"),
        }
    }

    /// `x: [B, N, H, W]` to `[B, q, H', W']`.
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w) = self.check_input(x)?;
        let (ho, wo) = self.output_hw(h, w)?;
        let q = self.out_channels;
        let plane_in = self.in_channels * h * w;
        let plane_out = ho * wo;
        let mut out = vec![0.0; b * q * plane_out];
        if self.mode() == ConvMode::Sequential {
            let ConvWeights::Sequential { chains, .. } = &self.weights else { unreachable!() };
            let geom = Geometry::new(self, h, w, ho, wo);
            let per_sample: Vec<_> = x
                .data()
                .par_chunks(plane_in)
                .zip(out.par_chunks_mut(q * plane_out))
                .map(|(xs, ys)| {
                    let mut zs = Vec::with_capacity(q);
                    let mut us = Vec::with_capacity(q);
                    for (i, chain) in chains.iter().enumerate() {
                        let (z, u, y) = geom.chain_forward(chain, xs);
                        let bias = self.bias.data()[i];
                        for (dst, v) in ys[i * plane_out..(i + 1) * plane_out].iter_mut().zip(y) {
                            *dst = v + bias;
                        }
                        zs.push(z);
                        us.push(u);
                    }
                    (zs, us)
                })
                .collect();
            let (z, u) = per_sample.into_iter().unzip();
            self.cache = Some(ConvCache::Chains { input: x.clone(), z, u });
        } else {
            let wm = self.weight_matrix();
            let geom = Geometry::new(self, h, w, ho, wo);
            let k = geom.k();
            let bias = self.bias.data();
            let cols: Vec<Vec<f64>> = x
                .data()
                .par_chunks(plane_in)
                .zip(out.par_chunks_mut(q * plane_out))
                .map(|(xs, ys)| {
                    let cols = geom.im2col(xs);
                    gemm_nn(&wm, &cols, ys, q, k, plane_out);
                    for (i, row) in ys.chunks_mut(plane_out).enumerate() {
                        for v in row {
                            *v += bias[i];
                        }
                    }
                    cols
                })
                .collect();
            self.cache = Some(ConvCache::Columns {
                cols,
                input_shape: x.shape().to_vec(),
            });
        }
        Tensor::new(vec![b, q, ho, wo], out)
    }

    /// Consumes the forward cache; stores weight gradients and returns the
    /// gradient with respect to the input.
    pub fn backward(&mut self, dout: &Tensor) -> Result<Tensor> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::InvalidArgument("conv backward called without a forward pass".into()))?;
        let input_shape = match &cache {
            ConvCache::Columns { input_shape, .. } => input_shape.clone(),
            ConvCache::Chains { input, .. } => input.shape().to_vec(),
        };
        let (b, h, w) = (input_shape[0], input_shape[2], input_shape[3]);
        let (ho, wo) = self.output_hw(h, w)?;
        let q = self.out_channels;
        if dout.shape() != [b, q, ho, wo] {
            return Err(shape_err!(
                "conv output gradient has shape {:?}, expected [{b}, {q}, {ho}, {wo}]",
                dout.shape()
            ));
        }
        let plane_out = ho * wo;
        let plane_in = self.in_channels * h * w;
        let geom = Geometry::new(self, h, w, ho, wo);

        let mut db = vec![0.0; q];
        for sample in dout.data().chunks(q * plane_out) {
            for (i, row) in sample.chunks(plane_out).enumerate() {
                db[i] += row.iter().sum::<f64>();
            }
        }
        self.bias_grad = Tensor::vector(&db);

        let mut dx = vec![0.0; b * plane_in];
        match cache {
            ConvCache::Columns { cols, .. } => {
                let k = geom.k();
                let wm = match &self.weights {
                    ConvWeights::Standard { weight, .. } => weight.data().to_vec(),
                    ConvWeights::Rank1 { filters, .. } => {
                        filters.iter().flat_map(|f| f.to_dense().into_data()).collect()
                    }
                    ConvWeights::Sequential { .. } => unreachable!(),
                };
                let partial: Vec<Vec<f64>> = dout
                    .data()
                    .par_chunks(q * plane_out)
                    .zip(dx.par_chunks_mut(plane_in))
                    .zip(cols.par_iter())
                    .map(|((dy, dxs), cols)| {
                        let mut dw = vec![0.0; q * k];
                        gemm_nt(dy, cols, &mut dw, q, plane_out, k);
                        let mut dcols = vec![0.0; k * plane_out];
                        gemm_tn(&wm, dy, &mut dcols, k, q, plane_out);
                        geom.col2im(&dcols, dxs);
                        dw
                    })
                    .collect();
                let mut dw = vec![0.0; q * k];
                for p in &partial {
                    for (a, v) in dw.iter_mut().zip(p) {
                        *a += v;
                    }
                }
                let (n, (d1, d2)) = (self.in_channels, self.kernel);
                match &mut self.weights {
                    ConvWeights::Standard { grad, .. } => {
                        *grad = Tensor::new(vec![q, n, d1, d2], dw)?;
                    }
                    ConvWeights::Rank1 { filters, grads } => {
                        for (i, (f, g)) in filters.iter().zip(grads.iter_mut()).enumerate() {
                            let dwi = Tensor::new(vec![n, d1, d2], dw[i * k..(i + 1) * k].to_vec())?;
                            *g = f.backprop_factors(&dwi)?;
                        }
                    }
                    ConvWeights::Sequential { .. } => unreachable!(),
                }
            }
            ConvCache::Chains { input, z, u } => {
                let ConvWeights::Sequential { chains, grads } = &mut self.weights else {
                    unreachable!()
                };
                let chains_ref: &[FlatChain] = chains;
                let partial: Vec<Vec<FlatChain>> = dout
                    .data()
                    .par_chunks(q * plane_out)
                    .zip(dx.par_chunks_mut(plane_in))
                    .zip(input.data().par_chunks(plane_in))
                    .zip(z.par_iter().zip(u.par_iter()))
                    .map(|(((dy, dxs), xs), (zs, us))| {
                        chains_ref
                            .iter()
                            .enumerate()
                            .map(|(i, chain)| {
                                geom.chain_backward(chain, xs, &zs[i], &us[i], &dy[i * plane_out..(i + 1) * plane_out], dxs)
                            })
                            .collect()
                    })
                    .collect();
                let (n, (d1, d2)) = (self.in_channels, self.kernel);
                for g in grads.iter_mut() {
                    *g = FlatChain::zeros(n, d1, d2);
                }
                grads.resize_with(q, || FlatChain::zeros(n, d1, d2));
                for sample in &partial {
                    for (g, s) in grads.iter_mut().zip(sample) {
                        g.accumulate(s);
                    }
                }
            }
        }
        Tensor::new(input_shape, dx)
    }

    /// Plain SGD on every parameter; rank-1 filters go through
    /// [`Rank1Filter::projected_update`].
    pub fn step(&mut self, lr: f64) -> Result<()> {
        match &mut self.weights {
            ConvWeights::Standard { weight, grad } => weight.axpy(-lr, grad)?,
            ConvWeights::Rank1 { filters, grads } => {
                for (f, g) in filters.iter_mut().zip(grads.iter()) {
                    *f = f.projected_update(g, lr)?;
                }
            }
            ConvWeights::Sequential { chains, grads } => {
                for (c, g) in chains.iter_mut().zip(grads.iter()) {
                    c.lateral.axpy(-lr, &g.lateral)?;
                    c.vertical.axpy(-lr, &g.vertical)?;
                    c.horizontal.axpy(-lr, &g.horizontal)?;
                }
            }
        }
        self.bias.axpy(-lr, &self.bias_grad)?;
        Ok(())
    }

    pub fn params_mut(&mut self) -> Vec<ParamSlot<'_>> {
        let mut slots = Vec::new();
        match &mut self.weights {
            ConvWeights::Standard { weight, grad } => {
                slots.push(ParamSlot::new("weight", weight.data_mut(), grad.data_mut()));
            }
            ConvWeights::Rank1 { filters, grads } => {
                for (i, (f, g)) in filters.iter_mut().zip(grads.iter_mut()).enumerate() {
                    let (p, q, t) = f.factors_mut();
                    slots.push(ParamSlot::new(format!("filter{i}.p"), p.data_mut(), g.dp.data_mut()));
                    slots.push(ParamSlot::new(format!("filter{i}.q"), q.data_mut(), g.dq.data_mut()));
                    slots.push(ParamSlot::new(format!("filter{i}.t"), t.data_mut(), g.dt.data_mut()));
                }
            }
            ConvWeights::Sequential { chains, grads } => {
                let (n, (d1, d2)) = (self.in_channels, self.kernel);
                grads.resize_with(chains.len(), || FlatChain::zeros(n, d1, d2));
                for (i, (c, g)) in chains.iter_mut().zip(grads.iter_mut()).enumerate() {
                    slots.push(ParamSlot::new(format!("chain{i}.lateral"), c.lateral.data_mut(), g.lateral.data_mut()));
                    slots.push(ParamSlot::new(format!("chain{i}.vertical"), c.vertical.data_mut(), g.vertical.data_mut()));
                    slots.push(ParamSlot::new(
                        format!("chain{i}.horizontal"),
                        c.horizontal.data_mut(),
                        g.horizontal.data_mut(),
                    ));
                }
            }
        }
        slots.push(ParamSlot::new("bias", self.bias.data_mut(), self.bias_grad.data_mut()));
        slots
    }
}

/// Index bookkeeping shared by the per-sample kernels.
#[derive(Clone, Copy)]
struct Geometry {
    n: usize,
    d1: usize,
    d2: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    padding: PaddingMode,
}

impl Geometry {
    fn new(layer: &ConvLayer, h: usize, w: usize, ho: usize, wo: usize) -> Self {
        Geometry {
            n: layer.in_channels,
            d1: layer.kernel.0,
            d2: layer.kernel.1,
            h,
            w,
            ho,
            wo,
            stride: layer.stride,
            padding: layer.padding,
        }
    }

    fn k(&self) -> usize {
        self.n * self.d1 * self.d2
    }

    fn src_y(&self, oy: usize, i: usize) -> Option<usize> {
        self.padding.source(oy, i, self.stride, self.d1, self.h)
    }

    fn src_x(&self, ox: usize, j: usize) -> Option<usize> {
        self.padding.source(ox, j, self.stride, self.d2, self.w)
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let p = self.ho * self.wo;
        let mut cols = vec![0.0; self.k() * p];
        for c in 0..self.n {
            for i in 0..self.d1 {
                for j in 0..self.d2 {
                    let row = &mut cols[((c * self.d1 + i) * self.d2 + j) * p..][..p];
                    for oy in 0..self.ho {
                        let Some(sy) = self.src_y(oy, i) else { continue };
                        for ox in 0..self.wo {
                            if let Some(sx) = self.src_x(ox, j) {
                                row[oy * self.wo + ox] = x[(c * self.h + sy) * self.w + sx];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &[f64], dx: &mut [f64]) {
        let p = self.ho * self.wo;
        for c in 0..self.n {
            for i in 0..self.d1 {
                for j in 0..self.d2 {
                    let row = &dcols[((c * self.d1 + i) * self.d2 + j) * p..][..p];
                    for oy in 0..self.ho {
                        let Some(sy) = self.src_y(oy, i) else { continue };
                        for ox in 0..self.wo {
                            if let Some(sx) = self.src_x(ox, j) {
                                dx[(c * self.h + sy) * self.w + sx] += row[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Returns `(z: H x W, u: H' x W, y: H' x W')` for one sample.
    fn chain_forward(&self, chain: &FlatChain, x: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let plane = self.h * self.w;
        let mut z = vec![0.0; plane];
        for (c, &tc) in chain.lateral.data().iter().enumerate() {
            for (zv, xv) in z.iter_mut().zip(&x[c * plane..(c + 1) * plane]) {
                *zv += tc * xv;
            }
        }
        let p = chain.vertical.data();
        let mut u = vec![0.0; self.ho * self.w];
        for oy in 0..self.ho {
            for (i, &pi) in p.iter().enumerate() {
                let Some(sy) = self.src_y(oy, i) else { continue };
                for x in 0..self.w {
                    u[oy * self.w + x] += pi * z[sy * self.w + x];
                }
            }
        }
        let q = chain.horizontal.data();
        let mut y = vec![0.0; self.ho * self.wo];
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                let mut acc = 0.0;
                for (j, &qj) in q.iter().enumerate() {
                    if let Some(sx) = self.src_x(ox, j) {
                        acc += qj * u[oy * self.w + sx];
                    }
                }
                y[oy * self.wo + ox] = acc;
            }
        }
        (z, u, y)
    }

    /// Accumulates `dx` and returns the kernel gradients for one chain.
    fn chain_backward(&self, chain: &FlatChain, x: &[f64], z: &[f64], u: &[f64], dy: &[f64], dx: &mut [f64]) -> FlatChain {
        let q = chain.horizontal.data();
        let mut dq = vec![0.0; self.d2];
        let mut du = vec![0.0; self.ho * self.w];
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                let g = dy[oy * self.wo + ox];
                for (j, &qj) in q.iter().enumerate() {
                    if let Some(sx) = self.src_x(ox, j) {
                        dq[j] += g * u[oy * self.w + sx];
                        du[oy * self.w + sx] += g * qj;
                    }
                }
            }
        }
        let p = chain.vertical.data();
        let mut dp = vec![0.0; self.d1];
        let mut dz = vec![0.0; self.h * self.w];
        for oy in 0..self.ho {
            for (i, &pi) in p.iter().enumerate() {
                let Some(sy) = self.src_y(oy, i) else { continue };
                for xx in 0..self.w {
                    let g = du[oy * self.w + xx];
                    dp[i] += g * z[sy * self.w + xx];
                    dz[sy * self.w + xx] += g * pi;
                }
            }
        }
        let plane = self.h * self.w;
        let mut dt = vec![0.0; self.n];
        for (c, &tc) in chain.lateral.data().iter().enumerate() {
            let xs = &x[c * plane..(c + 1) * plane];
            let dxs = &mut dx[c * plane..(c + 1) * plane];
            let mut acc = 0.0;
            for ((dxv, &xv), &g) in dxs.iter_mut().zip(xs).zip(&dz) {
                acc += g * xv;
                *dxv += g * tc;
            }
            dt[c] = acc;
        }
        FlatChain {
            lateral: Tensor::vector(&dt),
            vertical: Tensor::vector(&dp),
            horizontal: Tensor::vector(&dq),
        }
    }
}
