//! Rank-1 3-D filters `w = p ⊗ q ⊗ t`.
//!
//! A filter of shape `[N, d1, d2]` is stored as its three factors: `p`
//! (vertical, length `d1`), `q` (horizontal, length `d2`) and `t` (lateral,
//! length `N`). Training never touches the dense weights directly. The loss
//! gradient with respect to the composed filter is routed to the factors
//! ([`Rank1Filter::backprop_factors`]) and the factors are stepped and
//! recomposed ([`Rank1Filter::projected_update`]), which keeps the filter on
//! the rank-1 manifold after every step.

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::svd::singular_values;
use crate::tensor::{outer3, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Rank1Filter {
    p: Tensor,
    q: Tensor,
    t: Tensor,
    composed: Option<Tensor>,
}

/// Gradients of a scalar loss with respect to the three factors.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorGrads {
    pub dp: Tensor,
    pub dq: Tensor,
    pub dt: Tensor,
}

/// Parameter counts of one filter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCount {
    /// `d1 + d2 + N`.
    pub factored: usize,
    /// `d1 * d2 * N`.
    pub dense: usize,
}

impl ParamCount {
    pub fn for_shape(n: usize, d1: usize, d2: usize) -> Self {
        ParamCount {
            factored: d1 + d2 + n,
            dense: d1 * d2 * n,
        }
    }
}

fn check_vector(v: &Tensor, name: &str) -> Result<()> {
    if v.rank() != 1 {
        return Err(shape_err!("factor {name} must be rank-1, got shape {:?}", v.shape()));
    }
    Ok(())
}

impl Rank1Filter {
    pub fn new(p: Tensor, q: Tensor, t: Tensor) -> Result<Self> {
        check_vector(&p, "p")?;
        check_vector(&q, "q")?;
        check_vector(&t, "t")?;
        Ok(Rank1Filter { p, q, t, composed: None })
    }

    pub fn from_slices(p: &[f64], q: &[f64], t: &[f64]) -> Result<Self> {
        if p.is_empty() || q.is_empty() || t.is_empty() {
            return Err(Error::InvalidArgument("rank-1 factors must be nonempty".into()));
        }
        Self::new(Tensor::vector(p), Tensor::vector(q), Tensor::vector(t))
    }

    /// Random factors whose composed filter has Glorot-uniform variance
    /// `2 / (fan_in + fan_out)`.
    ///
    /// Each factor entry is drawn with unit variance and scaled by the cube
    /// root of the target standard deviation, so the product of three
    /// independent entries carries the target variance.
    pub fn init_glorot<R: Rng + ?Sized>(
        n: usize,
        d1: usize,
        d2: usize,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let std = bound / 3f64.sqrt();
        let s = std.cbrt() * 3f64.sqrt();
        let p = Tensor::random_uniform(&[d1], -s, s, rng);
        let q = Tensor::random_uniform(&[d2], -s, s, rng);
        let t = Tensor::random_uniform(&[n], -s, s, rng);
        Rank1Filter { p, q, t, composed: None }
    }

    pub fn p(&self) -> &Tensor {
        &self.p
    }

    pub fn q(&self) -> &Tensor {
        &self.q
    }

    pub fn t(&self) -> &Tensor {
        &self.t
    }

    /// `(N, d1, d2)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.t.len(), self.p.len(), self.q.len())
    }

    /// Mutable access to `(p, q, t)`. Drops the composed cache.
    pub fn factors_mut(&mut self) -> (&mut Tensor, &mut Tensor, &mut Tensor) {
        self.composed = None;
        (&mut self.p, &mut self.q, &mut self.t)
    }

    /// The cached composition, if [`Rank1Filter::compose`] ran since the last change.
    pub fn composed(&self) -> Option<&Tensor> {
        self.composed.as_ref()
    }

    /// Builds (and caches) the dense `[N, d1, d2]` filter.
    pub fn compose(&mut self) -> &Tensor {
        if self.composed.is_none() {
            self.composed = Some(self.to_dense());
        }
        self.composed.as_ref().expect("just composed")
    }

    /// Composition without touching the cache.
    pub fn to_dense(&self) -> Tensor {
        outer3(&self.p, &self.q, &self.t).expect("factors are rank-1 by construction")
    }

    /// Routes a gradient with respect to the composed filter to the factors:
    ///
    /// ```text
    /// dp[i] = Σ_j Σ_k dw[k,i,j] q[j] t[k]
    /// dq[j] = Σ_i Σ_k dw[k,i,j] p[i] t[k]
    /// dt[k] = Σ_i Σ_j dw[k,i,j] p[i] q[j]
    /// ```
    pub fn backprop_factors(&self, dw: &Tensor) -> Result<FactorGrads> {
        let (n, d1, d2) = self.dims();
        if dw.shape() != [n, d1, d2] {
            return Err(shape_err!(
                "filter gradient has shape {:?}, expected [{n}, {d1}, {d2}]",
                dw.shape()
            ));
        }
        let (p, q, t) = (self.p.data(), self.q.data(), self.t.data());
        let g = dw.data();
        let mut dp = vec![0.0; d1];
        let mut dq = vec![0.0; d2];
        let mut dt = vec![0.0; n];
        for k in 0..n {
            for i in 0..d1 {
                let row = &g[(k * d1 + i) * d2..(k * d1 + i + 1) * d2];
                let mut row_q = 0.0;
                for (j, &gv) in row.iter().enumerate() {
                    row_q += gv * q[j];
                    dq[j] += gv * p[i] * t[k];
                }
                dp[i] += row_q * t[k];
                dt[k] += row_q * p[i];
            }
        }
        Ok(FactorGrads {
            dp: Tensor::vector(&dp),
            dq: Tensor::vector(&dq),
            dt: Tensor::vector(&dt),
        })
    }

    /// One SGD step on the factors followed by recomposition.
    ///
    /// `alpha == 0` leaves the filter unchanged; negative or non-finite
    /// learning rates are rejected.
    pub fn projected_update(&self, grads: &FactorGrads, alpha: f64) -> Result<Rank1Filter> {
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {alpha} must be a finite non-negative number")));
        }
        grads.check_matches(self)?;
        let mut p = self.p.clone();
        let mut q = self.q.clone();
        let mut t = self.t.clone();
        p.axpy(-alpha, &grads.dp)?;
        q.axpy(-alpha, &grads.dq)?;
        t.axpy(-alpha, &grads.dt)?;
        let mut next = Rank1Filter { p, q, t, composed: None };
        next.compose();
        Ok(next)
    }

    pub fn param_count(&self) -> ParamCount {
        let (n, d1, d2) = self.dims();
        ParamCount::for_shape(n, d1, d2)
    }
}

impl FactorGrads {
    pub fn zeros(n: usize, d1: usize, d2: usize) -> Self {
        FactorGrads {
            dp: Tensor::zeros(&[d1]),
            dq: Tensor::zeros(&[d2]),
            dt: Tensor::zeros(&[n]),
        }
    }

    pub fn zeros_like(filter: &Rank1Filter) -> Self {
        let (n, d1, d2) = filter.dims();
        Self::zeros(n, d1, d2)
    }

    fn check_matches(&self, filter: &Rank1Filter) -> Result<()> {
        let (n, d1, d2) = filter.dims();
        if self.dp.shape() != [d1] || self.dq.shape() != [d2] || self.dt.shape() != [n] {
            return Err(shape_err!(
                "factor gradients {:?}/{:?}/{:?} do not match filter [{n}, {d1}, {d2}]",
                self.dp.shape(),
                self.dq.shape(),
                self.dt.shape()
            ));
        }
        Ok(())
    }

    /// `self += other`.
    pub fn accumulate(&mut self, other: &FactorGrads) -> Result<()> {
        self.dp.axpy(1.0, &other.dp)?;
        self.dq.axpy(1.0, &other.dq)?;
        self.dt.axpy(1.0, &other.dt)?;
        Ok(())
    }
}

/// The three matricizations of a `[N, d1, d2]` tensor: `N x (d1 d2)`,
/// `d1 x (N d2)` and `d2 x (N d1)`.
pub fn unfoldings(w: &Tensor) -> Result<[Tensor; 3]> {
    let &[n, d1, d2] = w.shape() else {
        return Err(shape_err!("unfoldings need a rank-3 tensor, got {:?}", w.shape()));
    };
    let x = w.data();
    let channel = Tensor::new(vec![n, d1 * d2], x.to_vec())?;
    let mut vertical = vec![0.0; d1 * n * d2];
    let mut horizontal = vec![0.0; d2 * n * d1];
    for k in 0..n {
        for i in 0..d1 {
            for j in 0..d2 {
                let v = x[(k * d1 + i) * d2 + j];
                vertical[i * n * d2 + k * d2 + j] = v;
                horizontal[j * n * d1 + k * d1 + i] = v;
            }
        }
    }
    Ok([
        channel,
        Tensor::new(vec![d1, n * d2], vertical)?,
        Tensor::new(vec![d2, n * d1], horizontal)?,
    ])
}

/// Largest `σ₂ / σ₁` over the three unfoldings (0 for the zero tensor and
/// for unfoldings with a single row or column).
pub fn rank1_residual(w: &Tensor) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for m in unfoldings(w)? {
        let sv = singular_values(&m)?;
        if sv.len() < 2 || sv[0] == 0.0 {
            continue;
        }
        worst = worst.max(sv[1] / sv[0]);
    }
    Ok(worst)
}

/// Whether every unfolding has `σ₂ <= rel_tol · σ₁`.
pub fn is_numerically_rank1(w: &Tensor, rel_tol: f64) -> Result<bool> {
    Ok(rank1_residual(w)? <= rel_tol)
}
