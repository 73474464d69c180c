//! Declarative architectures and the trainable network built from them.
//!
//! A [`NetworkSpec`] has a one-line text form, one layer per `;`-separated
//! item (newlines also separate items and `#` starts a comment):
//!
//! ```text
//! input 1x28x28; conv 1->16 3x3; batchnorm; relu; maxpool2; fc 3136->10
//! ```
//!
//! Convolutions default to `same` padding and stride 1; other settings are
//! written as `conv 3->8 3x3 valid stride 2`.
//!
//! ```
//! use rank1cnn::network::NetworkSpec;
//!
//! let spec: NetworkSpec = "input 1x8x8; conv 1->4 3x3; relu; maxpool2; fc 64->3".parse().unwrap();
//! assert_eq!(spec.classes(), 3);
//! assert_eq!(spec.to_string().parse::<NetworkSpec>().unwrap(), spec);
//! ```

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{
    BatchNorm, ConvLayer, ConvMode, Dropout, Layer, Linear, MaxPool2, ParamSlot, Relu, BATCHNORM_EPS,
    BATCHNORM_MOMENTUM,
};
use crate::rank1::ParamCount;
use crate::tensor::{PaddingMode, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        padding: PaddingMode,
        stride: usize,
    },
    BatchNorm,
    Relu,
    MaxPool2,
    Dropout(f64),
    Fc {
        in_features: usize,
        out_features: usize,
    },
}

impl LayerSpec {
    pub fn conv(in_channels: usize, out_channels: usize) -> Self {
        LayerSpec::Conv {
            in_channels,
            out_channels,
            kernel: (3, 3),
            padding: PaddingMode::Same,
            stride: 1,
        }
    }

    pub fn fc(in_features: usize, out_features: usize) -> Self {
        LayerSpec::Fc {
            in_features,
            out_features,
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel: (d1, d2),
                padding,
                stride,
            } => {
                write!(f, "conv {in_channels}->{out_channels} {d1}x{d2}")?;
                if padding != PaddingMode::Same {
                    write!(f, " {}", padding.as_str())?;
                }
                if stride != 1 {
                    write!(f, " stride {stride}")?;
                }
                Ok(())
            }
            LayerSpec::BatchNorm => f.write_str("batchnorm"),
            LayerSpec::Relu => f.write_str("relu"),
            LayerSpec::MaxPool2 => f.write_str("maxpool2"),
            LayerSpec::Dropout(p) => write!(f, "dropout {p}"),
            LayerSpec::Fc {
                in_features,
                out_features,
            } => write!(f, "fc {in_features}->{out_features}"),
        }
    }
}

fn arch_err(msg: impl Into<String>) -> Error {
    Error::Architecture(msg.into())
}

fn parse_num(s: &str, what: &str) -> Result<usize> {
    s.parse().map_err(|_| arch_err(format!("invalid {what} `{s}`")))
}

fn parse_arrow(s: &str) -> Result<(usize, usize)> {
    let (a, b) = s
        .split_once("->")
        .ok_or_else(|| arch_err(format!("expected `in->out`, got `{s}`")))?;
    Ok((parse_num(a, "width")?, parse_num(b, "width")?))
}

fn parse_dims(s: &str) -> Result<Vec<usize>> {
    s.split('x').map(|p| parse_num(p, "extent")).collect()
}

impl FromStr for LayerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let words: Vec<&str> = s.split_whitespace().collect();
        match words.as_slice() {
            ["conv", io, kernel, rest @ ..] => {
                let (in_channels, out_channels) = parse_arrow(io)?;
                let kernel = match parse_dims(kernel)?.as_slice() {
                    &[d1, d2] => (d1, d2),
                    _ => return Err(arch_err(format!("kernel must be `d1xd2`, got `{kernel}`"))),
                };
                let mut padding = PaddingMode::Same;
                let mut stride = 1;
                let mut it = rest.iter();
                while let Some(&w) = it.next() {
                    if w == "stride" {
                        let v = it.next().ok_or_else(|| arch_err("`stride` needs a value"))?;
                        stride = parse_num(v, "stride")?;
                    } else {
                        padding = w.parse()?;
                    }
                }
                Ok(LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    padding,
                    stride,
                })
            }
            ["batchnorm"] => Ok(LayerSpec::BatchNorm),
            ["relu"] => Ok(LayerSpec::Relu),
            ["maxpool2"] => Ok(LayerSpec::MaxPool2),
            ["dropout", p] => {
                let p: f64 = p.parse().map_err(|_| arch_err(format!("invalid dropout probability `{p}`")))?;
                Ok(LayerSpec::Dropout(p))
            }
            ["fc", io] => {
                let (in_features, out_features) = parse_arrow(io)?;
                Ok(LayerSpec::fc(in_features, out_features))
            }
            _ => Err(arch_err(format!("unrecognised layer `{s}`"))),
        }
    }
}

/// Activation shape between layers (batch axis omitted).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActShape {
    Image { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl ActShape {
    pub fn len(self) -> usize {
        match self {
            ActShape::Image { c, h, w } => c * h * w,
            ActShape::Flat(f) => f,
        }
    }

    pub fn is_empty(self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    /// `(channels, height, width)`.
    pub input: (usize, usize, usize),
    pub layers: Vec<LayerSpec>,
}

/// Per-conv-layer parameter accounting.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvReport {
    /// 1-based position among the conv layers.
    pub conv_index: usize,
    pub filters: usize,
    pub shape: (usize, usize, usize),
    pub per_filter: ParamCount,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamReport {
    pub convs: Vec<ConvReport>,
    /// Fully connected and batch norm parameters plus conv biases.
    pub other: usize,
}

impl ParamReport {
    pub fn conv_factored(&self) -> usize {
        self.convs.iter().map(|c| c.filters * c.per_filter.factored).sum()
    }

    pub fn conv_dense(&self) -> usize {
        self.convs.iter().map(|c| c.filters * c.per_filter.dense).sum()
    }

    /// Trainable parameter count of the whole network in `mode`.
    pub fn trainable(&self, mode: ConvMode) -> usize {
        let conv = match mode {
            ConvMode::Standard => self.conv_dense(),
            ConvMode::Rank1 | ConvMode::Sequential => self.conv_factored(),
        };
        conv + self.other
    }
}

impl fmt::Display for ParamReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "layer   filters  filter     factored/filter  dense/filter")?;
        for c in &self.convs {
            let (n, d1, d2) = c.shape;
            writeln!(
                f,
                "conv{:<3} {:>7}  {:<9}  {:>15}  {:>12}",
                c.conv_index,
                c.filters,
                format!("{n}x{d1}x{d2}"),
                c.per_filter.factored,
                c.per_filter.dense
            )?;
        }
        writeln!(f, "conv total: factored {} dense {}", self.conv_factored(), self.conv_dense())?;
        write!(f, "other parameters: {}", self.other)
    }
}

impl NetworkSpec {
    pub fn new(input: (usize, usize, usize), layers: Vec<LayerSpec>) -> Result<Self> {
        let spec = NetworkSpec { input, layers };
        spec.shapes()?;
        Ok(spec)
    }

    /// Activation shapes: the input followed by the output of every layer.
    pub fn shapes(&self) -> Result<Vec<ActShape>> {
        let (c, h, w) = self.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(arch_err("input extents must be positive"));
        }
        if self.layers.is_empty() {
            return Err(arch_err("network has no layers"));
        }
        let mut cur = ActShape::Image { c, h, w };
        let mut shapes = vec![cur];
        for (i, layer) in self.layers.iter().enumerate() {
            let at = |msg: String| arch_err(format!("layer {} (`{layer}`): {msg}", i + 1));
            cur = match (*layer, cur) {
                (
                    LayerSpec::Conv {
                        in_channels,
                        out_channels,
                        kernel: (d1, d2),
                        padding,
                        stride,
                    },
                    ActShape::Image { c, h, w },
                ) => {
                    if in_channels != c {
                        return Err(at(format!("expects {in_channels} channels, receives {c}")));
                    }
                    if out_channels == 0 || d1 == 0 || d2 == 0 || stride == 0 {
                        return Err(at("channels, kernel and stride must be positive".into()));
                    }
                    let ho = padding.output_len(h, d1, stride).map_err(|e| at(e.to_string()))?;
                    let wo = padding.output_len(w, d2, stride).map_err(|e| at(e.to_string()))?;
                    ActShape::Image {
                        c: out_channels,
                        h: ho,
                        w: wo,
                    }
                }
                (LayerSpec::Conv { .. }, ActShape::Flat(_)) => {
                    return Err(at("convolution after a fully connected layer".into()))
                }
                (LayerSpec::MaxPool2, ActShape::Image { c, h, w }) => {
                    let (h, w) = MaxPool2::output_hw(h, w).map_err(|e| at(e.to_string()))?;
                    ActShape::Image { c, h, w }
                }
                (LayerSpec::MaxPool2, ActShape::Flat(_)) => {
                    return Err(at("pooling after a fully connected layer".into()))
                }
                (LayerSpec::Dropout(p), s) => {
                    if !(0.0..1.0).contains(&p) {
                        return Err(at(format!("dropout probability {p} must lie in [0, 1)")));
                    }
                    s
                }
                (LayerSpec::BatchNorm | LayerSpec::Relu, s) => s,
                (
                    LayerSpec::Fc {
                        in_features,
                        out_features,
                    },
                    s,
                ) => {
                    if in_features != s.len() {
                        return Err(at(format!("expects {in_features} features, receives {}", s.len())));
                    }
                    if out_features == 0 {
                        return Err(at("output width must be positive".into()));
                    }
                    ActShape::Flat(out_features)
                }
            };
            shapes.push(cur);
        }
        match cur {
            ActShape::Flat(n) if n >= 2 => Ok(shapes),
            ActShape::Flat(_) => Err(arch_err("the final layer must produce at least two classes")),
            ActShape::Image { .. } => Err(arch_err("the network must end in a fully connected layer")),
        }
    }

    /// Number of output classes. Panics on an invalid spec.
    pub fn classes(&self) -> usize {
        match self.shapes().expect("valid spec").last() {
            Some(ActShape::Flat(n)) => *n,
            _ => unreachable!(),
        }
    }

    pub fn param_report(&self) -> Result<ParamReport> {
        let shapes = self.shapes()?;
        let mut convs = Vec::new();
        let mut other = 0;
        for (layer, before) in self.layers.iter().zip(&shapes) {
            match *layer {
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel: (d1, d2),
                    ..
                } => {
                    convs.push(ConvReport {
                        conv_index: convs.len() + 1,
                        filters: out_channels,
                        shape: (in_channels, d1, d2),
                        per_filter: ParamCount::for_shape(in_channels, d1, d2),
                    });
                    other += out_channels;
                }
                LayerSpec::BatchNorm => {
                    let channels = match *before {
                        ActShape::Image { c, .. } => c,
                        ActShape::Flat(f) => f,
                    };
                    other += 2 * channels;
                }
                LayerSpec::Fc {
                    in_features,
                    out_features,
                } => other += (in_features + 1) * out_features,
                _ => {}
            }
        }
        Ok(ParamReport { convs, other })
    }

    /// Bundled architectures by name (see [`PRESETS`]).
    pub fn preset(name: &str) -> Result<Self> {
        let text = PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| *t)
            .ok_or_else(|| {
                let names: Vec<_> = PRESETS.iter().map(|(n, _)| *n).collect();
                arch_err(format!("unknown architecture `{name}` (known: {})", names.join(", ")))
            })?;
        text.parse()
    }
}

/// Named architectures. The `-large` presets are deep reference networks
/// used mainly for parameter accounting.
pub const PRESETS: &[(&str, &str)] = &[
    (
        "mnist-small",
        "input 1x28x28; conv 1->16 3x3; batchnorm; relu; maxpool2; \
         conv 16->32 3x3; batchnorm; relu; maxpool2; fc 1568->10",
    ),
    (
        "mnist-large",
        "input 1x28x28; conv 1->64 3x3; conv 64->64 3x3; maxpool2; \
         conv 64->144 3x3; conv 144->144 3x3; maxpool2; \
         conv 144->144 3x3; conv 144->256 3x3; conv 256->256 3x3; \
         fc 12544->2048; batchnorm; relu; dropout 0.5; \
         fc 2048->1024; batchnorm; relu; dropout 0.5; \
         fc 1024->10; relu; dropout 0.5",
    ),
    (
        "cifar-large",
        "input 3x32x32; conv 3->64 3x3; relu; batchnorm; conv 64->64 3x3; relu; maxpool2; dropout 0.5; \
         conv 64->144 3x3; relu; batchnorm; conv 144->144 3x3; relu; maxpool2; dropout 0.5; \
         conv 144->256 3x3; relu; batchnorm; conv 256->256 3x3; relu; maxpool2; dropout 0.5; \
         fc 4096->1024; batchnorm; relu; dropout 0.5; \
         fc 1024->512; batchnorm; relu; dropout 0.5; \
         fc 512->10",
    ),
    (
        "dogcat-large",
        "input 3x224x224; conv 3->64 3x3; conv 64->64 3x3; batchnorm; relu; maxpool2; \
         conv 64->144 3x3; relu; conv 144->144 3x3; batchnorm; relu; maxpool2; \
         conv 144->256 3x3; relu; conv 256->256 3x3; batchnorm; relu; maxpool2; \
         conv 256->256 3x3; relu; conv 256->484 3x3; relu; conv 484->484 3x3; batchnorm; relu; maxpool2; \
         conv 484->484 3x3; relu; conv 484->484 3x3; batchnorm; relu; maxpool2; \
         fc 23716->1024; batchnorm; relu; fc 1024->512; batchnorm; relu; fc 512->2",
    ),
];

impl fmt::Display for NetworkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (c, h, w) = self.input;
        write!(f, "input {c}x{h}x{w}")?;
        for layer in &self.layers {
            write!(f, "; {layer}")?;
        }
        Ok(())
    }
}

impl FromStr for NetworkSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut items = s
            .lines()
            .map(|l| l.split('#').next().unwrap_or(""))
            .flat_map(|l| l.split(';'))
            .map(str::trim)
            .filter(|l| !l.is_empty());
        let first = items.next().ok_or_else(|| arch_err("empty architecture"))?;
        let input = match first.split_whitespace().collect::<Vec<_>>().as_slice() {
            ["input", dims] => match parse_dims(dims)?.as_slice() {
                &[c, h, w] => (c, h, w),
                _ => return Err(arch_err(format!("input must be `CxHxW`, got `{dims}`"))),
            },
            _ => return Err(arch_err(format!("architecture must start with `input CxHxW`, got `{first}`"))),
        };
        let layers = items.map(str::parse).collect::<Result<Vec<_>>>()?;
        NetworkSpec::new(input, layers)
    }
}

/// A network instantiated from a [`NetworkSpec`] with one conv weight mode.
#[derive(Clone, Debug)]
pub struct Network {
    spec: NetworkSpec,
    mode: ConvMode,
    layers: Vec<Layer>,
    dropout_rng: ChaCha8Rng,
    velocity: Vec<Vec<f64>>,
}

impl Network {
    /// Initialises every layer from `seed`; dropout masks draw from a
    /// separate stream of the same seed.
    pub fn new(spec: &NetworkSpec, mode: ConvMode, seed: u64) -> Result<Self> {
        let shapes = spec.shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (layer, before) in spec.layers.iter().zip(&shapes) {
            layers.push(match *layer {
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    padding,
                    stride,
                } => Layer::Conv(ConvLayer::new(mode, in_channels, out_channels, kernel, padding, stride, &mut rng)?),
                LayerSpec::BatchNorm => {
                    let channels = match *before {
                        ActShape::Image { c, .. } => c,
                        ActShape::Flat(f) => f,
                    };
                    Layer::BatchNorm(BatchNorm::new(channels, BATCHNORM_EPS, BATCHNORM_MOMENTUM)?)
                }
                LayerSpec::Relu => Layer::Relu(Relu::default()),
                LayerSpec::MaxPool2 => Layer::MaxPool2(MaxPool2::default()),
                LayerSpec::Dropout(p) => Layer::Dropout(Dropout::new(p)?),
                LayerSpec::Fc {
                    in_features,
                    out_features,
                } => Layer::Linear(Linear::new(in_features, out_features, &mut rng)?),
            });
        }
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(seed);
        dropout_rng.set_stream(1);
        Ok(Network {
            spec: spec.clone(),
            mode,
            layers,
            dropout_rng,
            velocity: Vec::new(),
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn mode(&self) -> ConvMode {
        self.mode
    }

    pub fn classes(&self) -> usize {
        self.spec.classes()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn conv_layers(&self) -> impl Iterator<Item = &ConvLayer> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Conv(c) => Some(c),
            _ => None,
        })
    }

    pub fn param_report(&self) -> ParamReport {
        self.spec.param_report().expect("validated at construction")
    }

    /// Logits `[B, classes]` for a batch `[B, C, H, W]`.
    pub fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (c, h, w) = self.spec.input;
        if x.rank() != 4 || x.shape()[1..] != [c, h, w] {
            return Err(Error::Shape(format!(
                "network expects [B, {c}, {h}, {w}] inputs, got {:?}",
                x.shape()
            )));
        }
        let mut cur = x.clone();
        for layer in &mut self.layers {
            cur = layer.forward(&cur, train, &mut self.dropout_rng)?;
        }
        Ok(cur)
    }

    /// Propagates `dlogits` back through the layers of the last training
    /// forward pass, leaving gradients on every parameter.
    pub fn backward(&mut self, dlogits: &Tensor) -> Result<Tensor> {
        let mut grad = dlogits.clone();
        for layer in self.layers.iter_mut().rev() {
            grad = layer.backward(&grad)?;
        }
        Ok(grad)
    }

    /// One SGD step. With `momentum > 0` (an extension, off by default) each
    /// gradient is replaced by its velocity `v = momentum * v + g` before the
    /// layer applies it, so rank-1 layers still take a projected step.
    pub fn step(&mut self, lr: f64, momentum: f64) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {lr} must be finite and non-negative")));
        }
        if momentum != 0.0 {
            if !(0.0..1.0).contains(&momentum) {
                return Err(Error::InvalidArgument(format!("momentum {momentum} must lie in [0, 1)")));
            }
            let mut slot_index = 0;
            for layer in &mut self.layers {
                for slot in layer.params_mut() {
                    if self.velocity.len() <= slot_index {
                        self.velocity.push(vec![0.0; slot.grad.len()]);
                    }
                    let v = &mut self.velocity[slot_index];
                    for (vi, gi) in v.iter_mut().zip(slot.grad.iter_mut()) {
                        *vi = momentum * *vi + *gi;
                        *gi = *vi;
                    }
                    slot_index += 1;
                }
            }
        }
        for layer in &mut self.layers {
            layer.step(lr)?;
        }
        Ok(())
    }

    /// Argmax class per sample in evaluation mode.
    pub fn predict(&mut self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.forward(x, false)?;
        let classes = logits.shape()[1];
        Ok(logits
            .data()
            .chunks(classes)
            .map(|row| Tensor::vector(row).argmax())
            .collect())
    }

    pub fn params_mut(&mut self) -> Vec<ParamSlot<'_>> {
        let mut slots = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let kind = layer.kind();
            for mut slot in layer.params_mut() {
                slot.name = format!("layer{i}.{kind}.{}", slot.name);
                slots.push(slot);
            }
        }
        slots
    }

    /// Every trainable parameter and running statistic, by name.
    pub fn state(&self) -> Vec<(String, Vec<f64>)> {
        let mut copy = self.clone();
        copy.state_mut().into_iter().map(|(n, v)| (n, v.to_vec())).collect()
    }

    fn state_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let kind = layer.kind();
            let entries: Vec<(String, &mut [f64])> = match layer {
                Layer::BatchNorm(bn) => bn.state_mut(),
                other => other.params_mut().into_iter().map(|s| (s.name, s.value)).collect(),
            };
            for (name, values) in entries {
                out.push((format!("layer{i}.{kind}.{name}"), values));
            }
        }
        out
    }

    /// Overwrites parameters and running statistics from named records.
    /// Every state entry must be present with the right length.
    pub fn load_state(&mut self, records: &[(String, Vec<f64>)]) -> Result<()> {
        let mut entries = self.state_mut();
        if entries.len() != records.len() {
            return Err(Error::CorruptRecord(format!(
                "network has {} state entries, checkpoint has {}",
                entries.len(),
                records.len()
            )));
        }
        for (name, dest) in entries.iter_mut() {
            let (_, values) = records
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::CorruptRecord(format!("missing record `{name}`")))?;
            if values.len() != dest.len() {
                return Err(Error::CorruptRecord(format!(
                    "record `{name}` has {} values, expected {}",
                    values.len(),
                    dest.len()
                )));
            }
            dest.copy_from_slice(values);
        }
        Ok(())
    }
}
