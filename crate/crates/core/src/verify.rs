//! Self-checks of the core identities, runnable from the command line.
//!
//! Each check draws its own random cases from a seed and reports the worst
//! deviation it saw next to the tolerance it was held to.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::synth_blobs;
use crate::error::Result;
use crate::hankel::{assemble_system, hankel_multi, rank_bound_experiment, vec_col_major, FilterFamily, RankExperiment};
use crate::layers::{ConvLayer, ConvMode, ParamSlot, Relu};
use crate::network::NetworkSpec;
use crate::rank1::{rank1_residual, FactorGrads, Rank1Filter};
use crate::tensor::{conv1d_axis, conv2d_multi, outer3, Axis, PaddingMode, Tensor};
use crate::train::{train_network, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    /// Informational checks never fail the run.
    pub informational: bool,
}

impl CheckOutcome {
    fn measured(name: &'static str, worst: f64, tol: f64, cases: usize) -> Self {
        CheckOutcome {
            name,
            passed: worst <= tol,
            detail: format!("worst {worst:.3e} <= {tol:.0e} over {cases} cases"),
            informational: false,
        }
    }
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = match (self.informational, self.passed) {
            (true, _) => "INFO",
            (false, true) => "PASS",
            (false, false) => "FAIL",
        };
        write!(f, "{status:<4}  {:<24} {}", self.name, self.detail)
    }
}

/// Runs every check; the run passes when every non-informational check does.
pub fn run_all(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = vec![
        separability(seed, 100)?,
        factor_gradients(seed, 10)?,
        layer_gradients(seed)?,
        rank1_preservation(seed)?,
        hankel_equivalence(seed, 60)?,
    ];
    out.extend(rank_bounds(seed, 20)?);
    Ok(out)
}

pub fn all_passed(outcomes: &[CheckOutcome]) -> bool {
    outcomes.iter().all(|o| o.informational || o.passed)
}

fn rel_diff(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(a.max_abs_diff(b)? / b.max_abs().max(f64::MIN_POSITIVE))
}

/// Composed rank-1 convolution against channel, vertical and horizontal
/// 1-D passes, in every padding mode.
pub fn separability(seed: u64, cases: usize) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let n = rng.random_range(1..=8);
        let (h, w) = (rng.random_range(3..=12), rng.random_range(3..=12));
        let padding = [PaddingMode::Same, PaddingMode::Valid, PaddingMode::Circular][case % 3];
        let p = Tensor::random_normal(&[3], 1.0, &mut rng);
        let q = Tensor::random_normal(&[3], 1.0, &mut rng);
        let t = Tensor::random_normal(&[n], 1.0, &mut rng);
        let x = Tensor::random_normal(&[n, h, w], 1.0, &mut rng);
        let direct = conv2d_multi(&x, &outer3(&p, &q, &t)?, padding, 1)?;
        let z = conv1d_axis(&x, &t, Axis::Channel, padding)?;
        let vh = conv1d_axis(&conv1d_axis(&z, &p, Axis::Vertical, padding)?, &q, Axis::Horizontal, padding)?;
        let hv = conv1d_axis(&conv1d_axis(&z, &q, Axis::Horizontal, padding)?, &p, Axis::Vertical, padding)?;
        worst = worst.max(rel_diff(&vh, &direct)?).max(rel_diff(&hv, &direct)?);
    }
    Ok(CheckOutcome::measured("separability", worst, 1e-10, cases))
}

/// Factor gradients of `<dw, p ⊗ q ⊗ t>` against central differences.
pub fn factor_gradients(seed: u64, cases: usize) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let (n, d1, d2) = (rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4));
        let f = Rank1Filter::new(
            Tensor::random_normal(&[d1], 1.0, &mut rng),
            Tensor::random_normal(&[d2], 1.0, &mut rng),
            Tensor::random_normal(&[n], 1.0, &mut rng),
        )?;
        let dw = Tensor::random_normal(&[n, d1, d2], 1.0, &mut rng);
        let g = f.backprop_factors(&dw)?;
        let loss = |f: &Rank1Filter| f.to_dense().dot(&dw);
        for which in 0..3 {
            let analytic = [&g.dp, &g.dq, &g.dt][which];
            for i in 0..analytic.len() {
                let shifted = |delta: f64| -> Result<f64> {
                    let mut c = f.clone();
                    let factors = c.factors_mut();
                    [factors.0, factors.1, factors.2][which].data_mut()[i] += delta;
                    loss(&c)
                };
                let fd = (shifted(h)? - shifted(-h)?) / (2.0 * h);
                let a = analytic.data()[i];
                worst = worst.max((fd - a).abs() / fd.abs().max(a.abs()).max(1.0));
            }
        }
    }
    Ok(CheckOutcome::measured("factor gradients", worst, 1e-6, cases))
}

/// Every parameter of a conv, relu, conv micro-net in each weight mode
/// against central differences of `<output, r>`.
pub fn layer_gradients(seed: u64) -> Result<CheckOutcome> {
    let mut worst: f64 = 0.0;
    for (k, mode) in [ConvMode::Standard, ConvMode::Rank1, ConvMode::Sequential].into_iter().enumerate() {
        worst = worst.max(micro_net_gradient_error(mode, seed.wrapping_add(k as u64))?);
    }
    Ok(CheckOutcome::measured("layer gradients", worst, 1e-4, 3))
}

fn micro_net_gradient_error(mode: ConvMode, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = [
        ConvLayer::new(mode, 4, 3, (3, 3), PaddingMode::Same, 1, &mut rng)?,
        ConvLayer::new(mode, 3, 2, (3, 3), PaddingMode::Same, 1, &mut rng)?,
    ];
    let x = Tensor::random_normal(&[2, 4, 6, 6], 1.0, &mut rng);
    let r = Tensor::random_normal(&[2, 2, 6, 6], 1.0, &mut rng);
    let loss = |layers: &mut [ConvLayer; 2]| -> Result<f64> {
        let a = Relu::default().forward(&layers[0].forward(&x)?);
        layers[1].forward(&a)?.dot(&r)
    };

    let mut relu = Relu::default();
    let a = relu.forward(&layers[0].forward(&x)?);
    layers[1].forward(&a)?;
    let da = layers[1].backward(&r)?;
    layers[0].backward(&relu.backward(&da)?)?;

    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for li in 0..2 {
        let analytic: Vec<Vec<f64>> = layers[li].params_mut().iter().map(|s: &ParamSlot| s.grad.to_vec()).collect();
        for (si, grads) in analytic.iter().enumerate() {
            for (i, &a) in grads.iter().enumerate() {
                layers[li].params_mut()[si].value[i] += h;
                let lp = loss(&mut layers)?;
                layers[li].params_mut()[si].value[i] -= 2.0 * h;
                let lm = loss(&mut layers)?;
                layers[li].params_mut()[si].value[i] += h;
                let fd = (lp - lm) / (2.0 * h);
                worst = worst.max((fd - a).abs() / fd.abs().max(a.abs()).max(1e-3));
            }
        }
    }
    Ok(worst)
}

/// Trains a small rank-1 net on synthetic blobs and checks every filter
/// after every step, plus random projected updates of a single filter.
pub fn rank1_preservation(seed: u64) -> Result<CheckOutcome> {
    let data = synth_blobs(3, 20, (2, 8, 8), seed)?;
    let spec: NetworkSpec = "input 2x8x8; conv 2->4 3x3; relu; maxpool2; conv 4->4 3x3; relu; fc 64->3".parse()?;
    let cfg = TrainConfig {
        learning_rate: 0.1,
        batch_size: 10,
        epochs: 3,
        seed,
        mode: ConvMode::Rank1,
        ..TrainConfig::default()
    };
    let mut net = crate::network::Network::new(&spec, ConvMode::Rank1, seed)?;
    let mut worst: f64 = 0.0;
    let mut steps = 0;
    train_network(&mut net, &data, None, &cfg, |info| {
        for conv in info.network.conv_layers() {
            for f in conv.dense_filters() {
                worst = worst.max(rank1_residual(&f)?);
            }
        }
        steps += 1;
        Ok(())
    })?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    let mut f = Rank1Filter::new(
        Tensor::random_normal(&[3], 1.0, &mut rng),
        Tensor::random_normal(&[3], 1.0, &mut rng),
        Tensor::random_normal(&[5], 1.0, &mut rng),
    )?;
    for _ in 0..50 {
        let g = FactorGrads {
            dp: Tensor::random_normal(&[3], 1.0, &mut rng),
            dq: Tensor::random_normal(&[3], 1.0, &mut rng),
            dt: Tensor::random_normal(&[5], 1.0, &mut rng),
        };
        f = f.projected_update(&g, rng.random_range(0.0..0.5))?;
        worst = worst.max(rank1_residual(f.composed().expect("recomposed"))?);
        steps += 1;
    }
    Ok(CheckOutcome::measured("rank-1 preservation", worst, 1e-10, steps))
}

/// `Y = H W` against the spatial circular convolution of the conv layer.
pub fn hankel_equivalence(seed: u64, cases: usize) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(3));
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let (n1, n2) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let (d1, d2) = (rng.random_range(1..=n1), rng.random_range(1..=n2));
        let (n, q) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let mut layer = ConvLayer::new(ConvMode::Standard, n, q, (d1, d2), PaddingMode::Circular, 1, &mut rng)?;
        let x = Tensor::random_normal(&[n, n1, n2], 1.0, &mut rng);
        let sys = assemble_system(&x, &layer)?;
        debug_assert_eq!(sys.h, hankel_multi(&x, d1, d2)?);
        let out = layer.forward(&x.reshape(&[1, n, n1, n2])?)?;
        for m in 0..q {
            let plane = Tensor::new(vec![n1, n2], out.data()[m * n1 * n2..(m + 1) * n1 * n2].to_vec())?;
            for (r, v) in vec_col_major(&plane)?.data().iter().enumerate() {
                worst = worst.max((sys.y.data()[r * q + m] - v).abs());
            }
        }
    }
    Ok(CheckOutcome::measured("hankel equivalence", worst, 1e-12, cases))
}

/// Output-rank bounds at `N = 4`, `q = 8` on 6x6 inputs.
///
/// The `min(N, q)` bound is enforced for rank-1 filters that share their
/// spatial factors. Independent rank-1 filters are reported without
/// failing the run: each contributes its own spatial direction, so their
/// `W` generically has rank `min(q, N d1 d2)`.
pub fn rank_bounds(seed: u64, trials: usize) -> Result<Vec<CheckOutcome>> {
    let report = rank_bound_experiment(RankExperiment::new(4, 8, (6, 6), trials, seed), &FilterFamily::ALL)?;
    let frac = |f| report.satisfied_fraction(f);
    let submult = report.rows.iter().all(|r| r.submultiplicative());
    let max_rank = |f| report.family(f).map(|r| r.rank_y).max().unwrap_or(0);
    Ok(vec![
        CheckOutcome {
            name: "rank inequality",
            passed: submult,
            detail: format!("rank Y <= min(rank H, rank W) on all {} systems", report.rows.len()),
            informational: false,
        },
        CheckOutcome {
            name: "shared rank-1 bound",
            passed: frac(FilterFamily::SharedSpatial) == 1.0,
            detail: format!(
                "{:.0}% of trials with rank Y <= min(rank H, N, q), max rank Y = {}",
                100.0 * frac(FilterFamily::SharedSpatial),
                max_rank(FilterFamily::SharedSpatial)
            ),
            informational: false,
        },
        CheckOutcome {
            name: "dense contrast",
            passed: frac(FilterFamily::Dense) <= 0.2,
            detail: format!(
                "{:.0}% of dense trials exceed the bound, max rank Y = {}",
                100.0 * (1.0 - frac(FilterFamily::Dense)),
                max_rank(FilterFamily::Dense)
            ),
            informational: false,
        },
        CheckOutcome {
            name: "independent rank-1",
            passed: frac(FilterFamily::Rank1) == 1.0,
            detail: format!(
                "{:.0}% of trials within the bound, max rank Y = {}",
                100.0 * frac(FilterFamily::Rank1),
                max_rank(FilterFamily::Rank1)
            ),
            informational: true,
        },
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        let outcomes = run_all(0).unwrap();
        for o in &outcomes {
            assert!(o.informational || o.passed, "{o}");
        }
        assert!(all_passed(&outcomes));
        assert!(outcomes.iter().any(|o| o.informational));
    }

    #[test]
    fn failing_check_fails_the_run() {
        let mut outcomes = run_all(1).unwrap();
        outcomes[0].passed = false;
        assert!(!all_passed(&outcomes));
        assert!(outcomes[0].to_string().starts_with("FAIL"));
    }
}
