//! Layers with explicit forward/backward passes over batched tensors.
//!
//! Activations are `[B, C, H, W]` for image-like data and `[B, F]` after
//! the first fully connected layer. Every layer caches what its backward
//! pass needs during `forward`; `backward` consumes that cache.

mod conv;

pub use conv::{ConvLayer, ConvMode, ConvParams, ConvWeights, FlatChain};

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

/// A trainable parameter block together with its gradient.
pub struct ParamSlot<'a> {
    pub name: String,
    pub value: &'a mut [f64],
    pub grad: &'a mut [f64],
}

impl<'a> ParamSlot<'a> {
    pub fn new(name: impl Into<String>, value: &'a mut [f64], grad: &'a mut [f64]) -> Self {
        ParamSlot {
            name: name.into(),
            value,
            grad,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let mask: Vec<bool> = x.data().iter().map(|&v| v > 0.0).collect();
        let data = x.data().iter().map(|&v| v.max(0.0)).collect();
        self.mask = Some(mask);
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let mask = self.mask.take().ok_or_else(|| missing_cache("relu"))?;
        if mask.len() != dy.len() {
            return Err(shape_err!("relu gradient has {} elements, expected {}", dy.len(), mask.len()));
        }
        let data = dy.data().iter().zip(&mask).map(|(&g, &m)| if m { g } else { 0.0 }).collect();
        Tensor::new(dy.shape().to_vec(), data)
    }
}

/// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
#[derive(Clone, Debug, Default)]
pub struct MaxPool2 {
    cache: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPool2 {
    pub fn output_hw(h: usize, w: usize) -> Result<(usize, usize)> {
        if h < 2 || w < 2 {
            return Err(shape_err!("max pooling needs at least 2x2 inputs, got {h}x{w}"));
        }
        Ok((h / 2, w / 2))
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let &[b, c, h, w] = x.shape() else {
            return Err(shape_err!("max pooling expects [B, C, H, W], got {:?}", x.shape()));
        };
        let (ho, wo) = Self::output_hw(h, w)?;
        let xd = x.data();
        let mut out = Vec::with_capacity(b * c * ho * wo);
        let mut argmax = Vec::with_capacity(b * c * ho * wo);
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        self.cache = Some((argmax, x.shape().to_vec()));
        Tensor::new(vec![b, c, ho, wo], out)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let (argmax, shape) = self.cache.take().ok_or_else(|| missing_cache("max pooling"))?;
        if argmax.len() != dy.len() {
            return Err(shape_err!("pooling gradient has {} elements, expected {}", dy.len(), argmax.len()));
        }
        let mut dx = Tensor::zeros(&shape);
        let dxd = dx.data_mut();
        for (&idx, &g) in argmax.iter().zip(dy.data()) {
            dxd[idx] += g;
        }
        Ok(dx)
    }
}

/// Inverted dropout: surviving activations are scaled by `1 / (1 - prob)` in
/// training, so evaluation is the identity.
#[derive(Clone, Debug)]
pub struct Dropout {
    prob: f64,
    mask: Option<Vec<f64>>,
}

impl Dropout {
    pub fn new(prob: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&prob) {
            return Err(Error::InvalidArgument(format!("dropout probability {prob} must lie in [0, 1)")));
        }
        Ok(Dropout { prob, mask: None })
    }

    pub fn prob(&self) -> f64 {
        self.prob
    }

    pub fn forward<R: Rng + ?Sized>(&mut self, x: &Tensor, train: bool, rng: &mut R) -> Tensor {
        if !train || self.prob == 0.0 {
            self.mask = None;
            return x.clone();
        }
        let keep = 1.0 - self.prob;
        let mask: Vec<f64> = (0..x.len())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        self.mask = Some(mask);
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        match self.mask.take() {
            None => Ok(dy.clone()),
            Some(mask) => {
                if mask.len() != dy.len() {
                    return Err(shape_err!("dropout gradient has {} elements, expected {}", dy.len(), mask.len()));
                }
                let data = dy.data().iter().zip(&mask).map(|(g, m)| g * m).collect();
                Tensor::new(dy.shape().to_vec(), data)
            }
        }
    }
}

pub const BATCHNORM_EPS: f64 = 1e-5;
pub const BATCHNORM_MOMENTUM: f64 = 0.9;

/// Per-channel batch normalisation over `[B, C]` or `[B, C, H, W]`.
///
/// Training mode normalises with the (biased) batch statistics and folds
/// them into the running estimates as
/// `running = momentum * running + (1 - momentum) * batch`;
/// evaluation mode uses the running estimates only.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    channels: usize,
    eps: f64,
    momentum: f64,
    gamma: Tensor,
    beta: Tensor,
    gamma_grad: Tensor,
    beta_grad: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    cache: Option<BnCache>,
}

#[derive(Clone, Debug)]
struct BnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    shape: Vec<usize>,
}

fn bn_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [b, c] => Ok((b, c, 1)),
        [b, c, h, w] => Ok((b, c, h * w)),
        _ => Err(shape_err!("batch norm expects [B, C] or [B, C, H, W], got {shape:?}")),
    }
}

impl BatchNorm {
    pub fn new(channels: usize, eps: f64, momentum: f64) -> Result<Self> {
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::InvalidArgument(format!("batch norm epsilon {eps} must be positive")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!("batch norm momentum {momentum} must lie in [0, 1)")));
        }
        if channels == 0 {
            return Err(Error::InvalidArgument("batch norm needs at least one channel".into()));
        }
        Ok(BatchNorm {
            channels,
            eps,
            momentum,
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            gamma_grad: Tensor::zeros(&[channels]),
            beta_grad: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            cache: None,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn running_mean(&self) -> &Tensor {
        &self.running_mean
    }

    pub fn running_var(&self) -> &Tensor {
        &self.running_var
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (b, c, s) = bn_layout(x.shape())?;
        if c != self.channels {
            return Err(shape_err!("batch norm has {} channels, input has {c}", self.channels));
        }
        let xd = x.data();
        let idx = |bi: usize, ci: usize, si: usize| (bi * c + ci) * s + si;
        let count = (b * s) as f64;
        let mut out = vec![0.0; x.len()];
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; c];
        for ci in 0..c {
            let (mean, var) = if train {
                let mut sum = 0.0;
                for bi in 0..b {
                    for si in 0..s {
                        sum += xd[idx(bi, ci, si)];
                    }
                }
                let mean = sum / count;
                let mut sq = 0.0;
                for bi in 0..b {
                    for si in 0..s {
                        let d = xd[idx(bi, ci, si)] - mean;
                        sq += d * d;
                    }
                }
                let var = sq / count;
                let m = self.momentum;
                self.running_mean.data_mut()[ci] = m * self.running_mean.data()[ci] + (1.0 - m) * mean;
                self.running_var.data_mut()[ci] = m * self.running_var.data()[ci] + (1.0 - m) * var;
                (mean, var)
            } else {
                (self.running_mean.data()[ci], self.running_var.data()[ci])
            };
            let is = 1.0 / (var + self.eps).sqrt();
            inv_std[ci] = is;
            let (g, be) = (self.gamma.data()[ci], self.beta.data()[ci]);
            for bi in 0..b {
                for si in 0..s {
                    let k = idx(bi, ci, si);
                    let xh = (xd[k] - mean) * is;
                    xhat[k] = xh;
                    out[k] = g * xh + be;
                }
            }
        }
        self.cache = train.then(|| BnCache {
            xhat,
            inv_std,
            shape: x.shape().to_vec(),
        });
        Tensor::new(x.shape().to_vec(), out)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let cache = self.cache.take().ok_or_else(|| missing_cache("batch norm"))?;
        if dy.shape() != cache.shape.as_slice() {
            return Err(shape_err!("batch norm gradient has shape {:?}, expected {:?}", dy.shape(), cache.shape));
        }
        let (b, c, s) = bn_layout(&cache.shape)?;
        let idx = |bi: usize, ci: usize, si: usize| (bi * c + ci) * s + si;
        let count = (b * s) as f64;
        let g = dy.data();
        let mut dx = vec![0.0; dy.len()];
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for ci in 0..c {
            let (mut sum_g, mut sum_gx) = (0.0, 0.0);
            for bi in 0..b {
                for si in 0..s {
                    let k = idx(bi, ci, si);
                    sum_g += g[k];
                    sum_gx += g[k] * cache.xhat[k];
                }
            }
            dgamma[ci] = sum_gx;
            dbeta[ci] = sum_g;
            let scale = self.gamma.data()[ci] * cache.inv_std[ci] / count;
            for bi in 0..b {
                for si in 0..s {
                    let k = idx(bi, ci, si);
                    dx[k] = scale * (count * g[k] - sum_g - cache.xhat[k] * sum_gx);
                }
            }
        }
        self.gamma_grad = Tensor::vector(&dgamma);
        self.beta_grad = Tensor::vector(&dbeta);
        Tensor::new(cache.shape, dx)
    }

    pub fn step(&mut self, lr: f64) -> Result<()> {
        self.gamma.axpy(-lr, &self.gamma_grad)?;
        self.beta.axpy(-lr, &self.beta_grad)
    }

    pub fn params_mut(&mut self) -> Vec<ParamSlot<'_>> {
        vec![
            ParamSlot::new("gamma", self.gamma.data_mut(), self.gamma_grad.data_mut()),
            ParamSlot::new("beta", self.beta.data_mut(), self.beta_grad.data_mut()),
        ]
    }

    /// Trained parameters followed by the running statistics.
    pub fn state_mut(&mut self) -> Vec<(String, &mut [f64])> {
        vec![
            ("gamma".into(), self.gamma.data_mut()),
            ("beta".into(), self.beta.data_mut()),
            ("running_mean".into(), self.running_mean.data_mut()),
            ("running_var".into(), self.running_var.data_mut()),
        ]
    }
}

/// Fully connected layer. Inputs of rank > 2 are flattened per sample.
#[derive(Clone, Debug)]
pub struct Linear {
    in_features: usize,
    out_features: usize,
    /// `[out, in]`.
    weight: Tensor,
    bias: Tensor,
    weight_grad: Tensor,
    bias_grad: Tensor,
    cache: Option<Tensor>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(in_features: usize, out_features: usize, rng: &mut R) -> Result<Self> {
        if in_features == 0 || out_features == 0 {
            return Err(Error::InvalidArgument("fully connected layers need positive widths".into()));
        }
        let bound = (6.0 / (in_features + out_features) as f64).sqrt();
        Ok(Linear {
            in_features,
            out_features,
            weight: Tensor::random_uniform(&[out_features, in_features], -bound, bound, rng),
            bias: Tensor::zeros(&[out_features]),
            weight_grad: Tensor::zeros(&[out_features, in_features]),
            bias_grad: Tensor::zeros(&[out_features]),
            cache: None,
        })
    }

    pub fn in_features(&self) -> usize {
        self.in_features
    }

    pub fn out_features(&self) -> usize {
        self.out_features
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let b = x.shape()[0];
        let features = x.len() / b;
        if x.rank() < 2 || features != self.in_features {
            return Err(shape_err!(
                "fully connected layer expects {} features per sample, got shape {:?}",
                self.in_features,
                x.shape()
            ));
        }
        let mut out = Vec::with_capacity(b * self.out_features);
        for _ in 0..b {
            out.extend_from_slice(self.bias.data());
        }
        gemm_nt(x.data(), self.weight.data(), &mut out, b, self.in_features, self.out_features);
        self.cache = Some(x.clone());
        Tensor::new(vec![b, self.out_features], out)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let x = self.cache.take().ok_or_else(|| missing_cache("fully connected"))?;
        let b = x.shape()[0];
        if dy.shape() != [b, self.out_features] {
            return Err(shape_err!(
                "fully connected gradient has shape {:?}, expected [{b}, {}]",
                dy.shape(),
                self.out_features
            ));
        }
        let (fi, fo) = (self.in_features, self.out_features);
        let mut dw = vec![0.0; fo * fi];
        gemm_tn(dy.data(), x.data(), &mut dw, fo, b, fi);
        let mut db = vec![0.0; fo];
        for row in dy.data().chunks(fo) {
            for (a, v) in db.iter_mut().zip(row) {
                *a += v;
            }
        }
        let mut dx = vec![0.0; b * fi];
        gemm_nn(dy.data(), self.weight.data(), &mut dx, b, fo, fi);
        self.weight_grad = Tensor::new(vec![fo, fi], dw)?;
        self.bias_grad = Tensor::vector(&db);
        Tensor::new(x.shape().to_vec(), dx)
    }

    pub fn step(&mut self, lr: f64) -> Result<()> {
        self.weight.axpy(-lr, &self.weight_grad)?;
        self.bias.axpy(-lr, &self.bias_grad)
    }

    pub fn params_mut(&mut self) -> Vec<ParamSlot<'_>> {
        vec![
            ParamSlot::new("weight", self.weight.data_mut(), self.weight_grad.data_mut()),
            ParamSlot::new("bias", self.bias.data_mut(), self.bias_grad.data_mut()),
        ]
    }
}

/// Mean softmax cross-entropy over a batch of `[B, C]` logits and the
/// gradient with respect to the logits.
pub fn softmax_xent(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let &[b, c] = logits.shape() else {
        return Err(shape_err!("logits must be [B, C], got {:?}", logits.shape()));
    };
    if labels.len() != b {
        return Err(shape_err!("{b} logit rows but {} labels", labels.len()));
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; b * c];
    for (bi, (row, &label)) in logits.data().chunks(c).zip(labels).enumerate() {
        if label >= c {
            return Err(Error::InvalidArgument(format!("label {label} out of range for {c} classes")));
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_sum = sum.ln() + max;
        loss += log_sum - row[label];
        for (j, &v) in row.iter().enumerate() {
            let p = (v - log_sum).exp();
            grad[bi * c + j] = (p - if j == label { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    Ok((loss / b as f64, Tensor::new(vec![b, c], grad)?))
}

fn missing_cache(layer: &str) -> Error {
    Error::InvalidArgument(format!("{layer} backward called without a training forward pass"))
}

/// One stage of a network.
#[derive(Clone, Debug)]
pub enum Layer {
    Conv(ConvLayer),
    BatchNorm(BatchNorm),
    Relu(Relu),
    MaxPool2(MaxPool2),
    Dropout(Dropout),
    Linear(Linear),
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::Relu(_) => "relu",
            Layer::MaxPool2(_) => "maxpool2",
            Layer::Dropout(_) => "dropout",
            Layer::Linear(_) => "fc",
        }
    }

    pub fn forward<R: Rng + ?Sized>(&mut self, x: &Tensor, train: bool, rng: &mut R) -> Result<Tensor> {
        match self {
            Layer::Conv(l) => l.forward(x),
            Layer::BatchNorm(l) => l.forward(x, train),
            Layer::Relu(l) => Ok(l.forward(x)),
            Layer::MaxPool2(l) => l.forward(x),
            Layer::Dropout(l) => Ok(l.forward(x, train, rng)),
            Layer::Linear(l) => l.forward(x),
        }
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Conv(l) => l.backward(dy),
            Layer::BatchNorm(l) => l.backward(dy),
            Layer::Relu(l) => l.backward(dy),
            Layer::MaxPool2(l) => l.backward(dy),
            Layer::Dropout(l) => l.backward(dy),
            Layer::Linear(l) => l.backward(dy),
        }
    }

    pub fn step(&mut self, lr: f64) -> Result<()> {
        match self {
            Layer::Conv(l) => l.step(lr),
            Layer::BatchNorm(l) => l.step(lr),
            Layer::Linear(l) => l.step(lr),
            Layer::Relu(_) | Layer::MaxPool2(_) | Layer::Dropout(_) => Ok(()),
        }
    }

    pub fn params_mut(&mut self) -> Vec<ParamSlot<'_>> {
        match self {
            Layer::Conv(l) => l.params_mut(),
            Layer::BatchNorm(l) => l.params_mut(),
            Layer::Linear(l) => l.params_mut(),
            Layer::Relu(_) | Layer::MaxPool2(_) | Layer::Dropout(_) => Vec::new(),
        }
    }
}
