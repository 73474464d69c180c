//! Wrap-around Hankel matrices and the rank of multi-channel convolution
//! outputs.
//!
//! For a signal `f` of length `n`, the wrap-around Hankel matrix with `d`
//! columns has rows that are cyclic windows of `f`:
//!
//! ```text
//! H[r, c] = f[(r + c) mod n]
//! ```
//!
//! so `H · k` is the circular cross-correlation of `f` with `k`, anchored
//! at the output position (the [`PaddingMode::Circular`] convention), and
//! `H · flip(w)` is the circular convolution with `w`. The 2-D version is a
//! Hankel matrix of Hankel blocks acting on column-major vectorised kernels,
//! and `N` input channels concatenate their blocks side by side. With one
//! vectorised filter per column of `W`, the stacked outputs satisfy
//! `Y = H · W`.
//!
//! ```
//! use rank1cnn::hankel::hankel_1d;
//! use rank1cnn::tensor::Tensor;
//!
//! let h = hankel_1d(&Tensor::vector(&[1.0, 2.0, 3.0]), 2).unwrap();
//! assert_eq!(h.data(), &[1.0, 2.0, 2.0, 3.0, 3.0, 1.0]);
//! ```

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::layers::{ConvLayer, ConvWeights};
use crate::rank1::{FactorGrads, Rank1Filter};
use crate::tensor::{PaddingMode, Tensor};

pub use crate::svd::{numerical_rank, singular_values};

/// Relative tolerance used for numerical ranks unless stated otherwise.
pub const DEFAULT_RANK_TOL: f64 = 1e-8;

/// Column-major vectorisation of a matrix.
pub fn vec_col_major(m: &Tensor) -> Result<Tensor> {
    let &[rows, cols] = m.shape() else {
        return Err(shape_err!("VEC needs a matrix, got {:?}", m.shape()));
    };
    let mut out = Vec::with_capacity(rows * cols);
    for c in 0..cols {
        for r in 0..rows {
            out.push(m.data()[r * cols + c]);
        }
    }
    Ok(Tensor::vector(&out))
}

/// Inverse of [`vec_col_major`].
pub fn unvec_col_major(v: &[f64], rows: usize, cols: usize) -> Result<Tensor> {
    if v.len() != rows * cols {
        return Err(shape_err!("{} values cannot fill a {rows}x{cols} matrix", v.len()));
    }
    let mut out = vec![0.0; rows * cols];
    for c in 0..cols {
        for r in 0..rows {
            out[r * cols + c] = v[c * rows + r];
        }
    }
    Tensor::new(vec![rows, cols], out)
}

/// `n x d` wrap-around Hankel matrix of a length-`n` signal.
pub fn hankel_1d(f: &Tensor, d: usize) -> Result<Tensor> {
    if f.rank() != 1 {
        return Err(shape_err!("hankel_1d needs a vector, got {:?}", f.shape()));
    }
    let n = f.len();
    if d == 0 || d > n {
        return Err(Error::InvalidArgument(format!("column count {d} must lie in 1..={n}")));
    }
    let mut out = Vec::with_capacity(n * d);
    for r in 0..n {
        for c in 0..d {
            out.push(f.data()[(r + c) % n]);
        }
    }
    Tensor::new(vec![n, d], out)
}

/// `n1 n2 x d1 d2` block Hankel matrix of an `n1 x n2` image.
///
/// Block `(b, c)` is the `n1 x d1` wrap-around Hankel matrix of image
/// column `(b + c) mod n2`, so that `H · VEC(k) = VEC(circular_xcorr(X, k))`.
pub fn hankel_2d(x: &Tensor, d1: usize, d2: usize) -> Result<Tensor> {
    let &[n1, n2] = x.shape() else {
        return Err(shape_err!("hankel_2d needs a matrix, got {:?}", x.shape()));
    };
    check_kernel(n1, n2, d1, d2)?;
    let mut out = vec![0.0; n1 * n2 * d1 * d2];
    fill_block(x.data(), n1, n2, d1, d2, &mut out, d1 * d2, 0);
    Tensor::new(vec![n1 * n2, d1 * d2], out)
}

/// Channel blocks `[H(X_1) ... H(X_N)]` of an `[N, n1, n2]` input.
pub fn hankel_multi(x: &Tensor, d1: usize, d2: usize) -> Result<Tensor> {
    let &[n, n1, n2] = x.shape() else {
        return Err(shape_err!("hankel_multi needs [N, n1, n2], got {:?}", x.shape()));
    };
    check_kernel(n1, n2, d1, d2)?;
    let width = n * d1 * d2;
    let mut out = vec![0.0; n1 * n2 * width];
    for s in 0..n {
        let plane = &x.data()[s * n1 * n2..(s + 1) * n1 * n2];
        fill_block(plane, n1, n2, d1, d2, &mut out, width, s * d1 * d2);
    }
    Tensor::new(vec![n1 * n2, width], out)
}

fn check_kernel(n1: usize, n2: usize, d1: usize, d2: usize) -> Result<()> {
    if d1 == 0 || d2 == 0 || d1 > n1 || d2 > n2 {
        return Err(Error::InvalidArgument(format!(
            "kernel {d1}x{d2} must be nonempty and fit in the {n1}x{n2} image"
        )));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn fill_block(plane: &[f64], n1: usize, n2: usize, d1: usize, d2: usize, out: &mut [f64], width: usize, col0: usize) {
    for b in 0..n2 {
        for a in 0..n1 {
            let row = (b * n1 + a) * width + col0;
            for c in 0..d2 {
                for e in 0..d1 {
                    out[row + c * d1 + e] = plane[((a + e) % n1) * n2 + (b + c) % n2];
                }
            }
        }
    }
}

/// `Y = H · W` for one multi-channel input and a conv layer.
#[derive(Clone, Debug)]
pub struct HankelSystem {
    /// `[n1 n2, N d1 d2]`.
    pub h: Tensor,
    /// `[N d1 d2, q]`: column `m` stacks `VEC` of filter `m`'s channel slices.
    pub w: Tensor,
    /// `[n1 n2, q]`: column `m` is `VEC` of output channel `m`.
    pub y: Tensor,
    pub channels: usize,
    pub kernel: (usize, usize),
}

impl HankelSystem {
    /// The `d1 d2 x q` rows of `W` acting on input channel `s`.
    pub fn w_block(&self, s: usize) -> Result<Tensor> {
        if s >= self.channels {
            return Err(Error::InvalidArgument(format!("channel {s} out of range for {}", self.channels)));
        }
        let (d1, d2) = self.kernel;
        let q = self.w.shape()[1];
        let rows = d1 * d2;
        Tensor::new(vec![rows, q], self.w.data()[s * rows * q..(s + 1) * rows * q].to_vec())
    }
}

/// Builds `H`, `W` and `Y = H · W` for `inputs` `[N, n1, n2]`. The layer
/// must use circular padding with stride 1.
pub fn assemble_system(inputs: &Tensor, layer: &ConvLayer) -> Result<HankelSystem> {
    if layer.padding() != PaddingMode::Circular || layer.stride() != 1 {
        return Err(Error::InvalidArgument(format!(
            "Hankel systems need circular padding with stride 1, layer has {} padding with stride {}",
            layer.padding().as_str(),
            layer.stride()
        )));
    }
    let &[n, _, _] = inputs.shape() else {
        return Err(shape_err!("inputs must be [N, n1, n2], got {:?}", inputs.shape()));
    };
    if n != layer.in_channels() {
        return Err(shape_err!("layer expects {} channels, inputs have {n}", layer.in_channels()));
    }
    let (d1, d2) = layer.kernel();
    let q = layer.out_channels();
    let h = hankel_multi(inputs, d1, d2)?;
    let rows = n * d1 * d2;
    let mut w = vec![0.0; rows * q];
    for m in 0..q {
        let filter = layer.dense_filter(m);
        for s in 0..n {
            let slice = Tensor::new(vec![d1, d2], filter.data()[s * d1 * d2..(s + 1) * d1 * d2].to_vec())?;
            for (e, v) in vec_col_major(&slice)?.data().iter().enumerate() {
                w[(s * d1 * d2 + e) * q + m] = *v;
            }
        }
    }
    let w = Tensor::new(vec![rows, q], w)?;
    let y = h.matmul(&w)?;
    Ok(HankelSystem {
        h,
        w,
        y,
        channels: n,
        kernel: (d1, d2),
    })
}

/// How the filters of a rank experiment are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FilterFamily {
    /// Independent rank-1 filters `p_m ⊗ q_m ⊗ t_m`.
    Rank1,
    /// Rank-1 filters `p ⊗ q ⊗ t_m` sharing one spatial factor pair.
    SharedSpatial,
    /// Unconstrained dense filters.
    Dense,
}

impl FilterFamily {
    pub const ALL: [FilterFamily; 3] = [FilterFamily::Rank1, FilterFamily::SharedSpatial, FilterFamily::Dense];

    pub fn as_str(self) -> &'static str {
        match self {
            FilterFamily::Rank1 => "rank1",
            FilterFamily::SharedSpatial => "rank1-shared",
            FilterFamily::Dense => "dense",
        }
    }
}

impl std::str::FromStr for FilterFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FilterFamily::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown filter family `{s}`")))
    }
}

/// A random circular conv layer whose filters come from `family`, with
/// standard normal entries in every factor (or dense weight).
pub fn random_layer<R: rand::Rng + ?Sized>(
    family: FilterFamily,
    channels: usize,
    filters: usize,
    kernel: (usize, usize),
    rng: &mut R,
) -> Result<ConvLayer> {
    let (d1, d2) = kernel;
    let normal = |len: usize, rng: &mut R| Tensor::random_normal(&[len], 1.0, rng);
    let weights = match family {
        FilterFamily::Dense => {
            let weight = Tensor::random_normal(&[filters, channels, d1, d2], 1.0, rng);
            let grad = Tensor::zeros(weight.shape());
            ConvWeights::Standard { weight, grad }
        }
        FilterFamily::Rank1 | FilterFamily::SharedSpatial => {
            let shared = (normal(d1, rng), normal(d2, rng));
            let filters: Vec<Rank1Filter> = (0..filters)
                .map(|_| {
                    let (p, q) = match family {
                        FilterFamily::SharedSpatial => shared.clone(),
                        _ => (normal(d1, rng), normal(d2, rng)),
                    };
                    Rank1Filter::new(p, q, normal(channels, rng))
                })
                .collect::<Result<_>>()?;
            let grads = filters.iter().map(FactorGrads::zeros_like).collect();
            ConvWeights::Rank1 { filters, grads }
        }
    };
    ConvLayer::from_weights(weights, Tensor::zeros(&[filters]), PaddingMode::Circular, 1)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankExperiment {
    pub channels: usize,
    pub filters: usize,
    pub image: (usize, usize),
    pub kernel: (usize, usize),
    pub trials: usize,
    pub seed: u64,
    pub rel_tol: f64,
}

impl RankExperiment {
    pub fn new(channels: usize, filters: usize, image: (usize, usize), trials: usize, seed: u64) -> Self {
        RankExperiment {
            channels,
            filters,
            image,
            kernel: (3, 3),
            trials,
            seed,
            rel_tol: DEFAULT_RANK_TOL,
        }
    }
}

/// One trial of one filter family.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RankRow {
    pub trial: usize,
    pub family: FilterFamily,
    pub rank_h: usize,
    pub rank_w: usize,
    pub rank_y: usize,
    /// `min(rank H, N, q)`.
    pub bound: usize,
}

impl RankRow {
    pub fn satisfied(&self) -> bool {
        self.rank_y <= self.bound
    }

    /// `rank Y <= min(rank H, rank W)`, which holds for any product.
    pub fn submultiplicative(&self) -> bool {
        self.rank_y <= self.rank_h.min(self.rank_w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankReport {
    pub params: RankExperiment,
    pub rows: Vec<RankRow>,
}

impl RankReport {
    pub fn family(&self, family: FilterFamily) -> impl Iterator<Item = &RankRow> {
        self.rows.iter().filter(move |r| r.family == family)
    }

    /// Fraction of `family` trials with `rank Y <= bound`.
    pub fn satisfied_fraction(&self, family: FilterFamily) -> f64 {
        let (hit, total) = self
            .family(family)
            .fold((0, 0), |(h, t), r| (h + usize::from(r.satisfied()), t + 1));
        if total == 0 {
            0.0
        } else {
            hit as f64 / total as f64
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["trial", "mode", "rank_H", "rank_W", "rank_Y", "bound", "satisfied"])?;
        for r in &self.rows {
            w.write_record([
                r.trial.to_string(),
                r.family.as_str().to_string(),
                r.rank_h.to_string(),
                r.rank_w.to_string(),
                r.rank_y.to_string(),
                r.bound.to_string(),
                r.satisfied().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Draws `trials` random inputs and, for each, one random layer per family;
/// records the numerical ranks of `H`, `W` and `Y`.
pub fn rank_bound_experiment(params: RankExperiment, families: &[FilterFamily]) -> Result<RankReport> {
    let RankExperiment {
        channels,
        filters,
        image: (n1, n2),
        kernel,
        trials,
        seed,
        rel_tol,
    } = params;
    if channels == 0 || filters == 0 || n1 == 0 || n2 == 0 || trials == 0 {
        return Err(Error::InvalidArgument("experiment sizes and trial count must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(trials * families.len());
    for trial in 1..=trials {
        let x = Tensor::random_normal(&[channels, n1, n2], 1.0, &mut rng);
        for &family in families {
            let layer = random_layer(family, channels, filters, kernel, &mut rng)?;
            let sys = assemble_system(&x, &layer)?;
            let rank_h = numerical_rank(&sys.h, rel_tol)?;
            rows.push(RankRow {
                trial,
                family,
                rank_h,
                rank_w: numerical_rank(&sys.w, rel_tol)?,
                rank_y: numerical_rank(&sys.y, rel_tol)?,
                bound: rank_h.min(channels).min(filters),
            });
        }
    }
    Ok(RankReport { params, rows })
}
