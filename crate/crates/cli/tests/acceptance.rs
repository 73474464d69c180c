//! One test per acceptance criterion. Each prints a single PASS/FAIL line to
//! stderr (visible without `--nocapture`) and then asserts.
//!
//! Run with `cargo test -p rank1cnn-cli --test acceptance`.

use std::io::Write;
use std::path::PathBuf;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rank1cnn::data::{load_idx, Dataset};
use rank1cnn::hankel::{assemble_system, numerical_rank, random_layer, FilterFamily, DEFAULT_RANK_TOL};
use rank1cnn::layers::{softmax_xent, ConvLayer, ConvMode, ConvWeights};
use rank1cnn::network::{Network, NetworkSpec};
use rank1cnn::rank1::{FactorGrads, Rank1Filter};
use rank1cnn::tensor::{PaddingMode, Tensor};
use rank1cnn::train::{train, train_network, TrainConfig};

fn report(id: u32, title: &str, passed: bool, detail: &str) {
    let status = if passed { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "acceptance [{id}] {status} {title}: {detail}");
    assert!(passed, "criterion {id} ({title}) failed: {detail}");
}

fn uniform(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn rel(diff: f64, scale: f64) -> f64 {
    diff / scale.max(f64::MIN_POSITIVE)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn mnist_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-desk")
}

fn mnist(split: &str) -> Dataset {
    let dir = mnist_dir();
    load_idx(
        dir.join(format!("{split}-images-idx3-ubyte")),
        dir.join(format!("{split}-labels-idx1-ubyte")),
    )
    .expect("bundled MNIST subset")
}

/// Input index read at output `o`, tap `k`, or `None` inside zero padding.
fn tap(padding: PaddingMode, o: usize, k: usize, d: usize, n: usize) -> Option<usize> {
    match padding {
        PaddingMode::Circular => Some((o + k) % n),
        PaddingMode::Valid => Some(o + k),
        PaddingMode::Same => {
            let pos = (o + k) as isize - ((d - 1) / 2) as isize;
            (pos >= 0 && (pos as usize) < n).then_some(pos as usize)
        }
    }
}

fn out_len(padding: PaddingMode, n: usize, d: usize) -> usize {
    match padding {
        PaddingMode::Valid => n - d + 1,
        _ => n,
    }
}

/// Direct 3-D cross-correlation of one sample `[N, h, w]` with one dense
/// filter `[N, d1, d2]`.
#[allow(clippy::too_many_arguments)]
fn direct_conv3(x: &[f64], n: usize, h: usize, w: usize, f: &[f64], d1: usize, d2: usize, padding: PaddingMode) -> Vec<f64> {
    let (ho, wo) = (out_len(padding, h, d1), out_len(padding, w, d2));
    let mut out = vec![0.0; ho * wo];
    for a in 0..ho {
        for b in 0..wo {
            let mut acc = 0.0;
            for k in 0..n {
                for i in 0..d1 {
                    let Some(r) = tap(padding, a, i, d1, h) else { continue };
                    for j in 0..d2 {
                        let Some(c) = tap(padding, b, j, d2, w) else { continue };
                        acc += x[(k * h + r) * w + c] * f[(k * d1 + i) * d2 + j];
                    }
                }
            }
            out[a * wo + b] = acc;
        }
    }
    out
}

/// Lateral contraction with `t`, then a vertical pass with `p`, then a
/// horizontal pass with `q`.
#[allow(clippy::too_many_arguments)]
fn direct_sequential(x: &[f64], n: usize, h: usize, w: usize, p: &[f64], q: &[f64], t: &[f64], padding: PaddingMode) -> Vec<f64> {
    let (d1, d2) = (p.len(), q.len());
    let mut z = vec![0.0; h * w];
    for k in 0..n {
        for (zi, xi) in z.iter_mut().zip(&x[k * h * w..(k + 1) * h * w]) {
            *zi += t[k] * xi;
        }
    }
    let ho = out_len(padding, h, d1);
    let mut u = vec![0.0; ho * w];
    for a in 0..ho {
        for c in 0..w {
            u[a * w + c] = (0..d1).filter_map(|i| tap(padding, a, i, d1, h).map(|r| p[i] * z[r * w + c])).sum();
        }
    }
    let wo = out_len(padding, w, d2);
    let mut y = vec![0.0; ho * wo];
    for a in 0..ho {
        for b in 0..wo {
            y[a * wo + b] = (0..d2).filter_map(|j| tap(padding, b, j, d2, w).map(|c| q[j] * u[a * w + c])).sum();
        }
    }
    y
}

#[test]
fn separable_forward_matches_1d_pipeline() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let paddings = [PaddingMode::Same, PaddingMode::Valid, PaddingMode::Circular];
    let (mut worst_lib, mut worst_oracle) = (0.0f64, 0.0f64);
    let cases = 200;
    for case in 0..cases {
        let n = rng.random_range(1..=8);
        let q = rng.random_range(1..=3);
        let (h, w) = (rng.random_range(3..=12), rng.random_range(3..=12));
        let padding = paddings[case % 3];
        let filters: Vec<Rank1Filter> = (0..q)
            .map(|_| Rank1Filter::from_slices(&uniform(3, &mut rng), &uniform(3, &mut rng), &uniform(n, &mut rng)).unwrap())
            .collect();
        let grads = filters.iter().map(FactorGrads::zeros_like).collect();
        let mut composed = ConvLayer::from_weights(
            ConvWeights::Rank1 {
                filters: filters.clone(),
                grads,
            },
            Tensor::zeros(&[q]),
            padding,
            1,
        )
        .unwrap();
        let mut sequential = composed.to_sequential().unwrap();
        let batch = 2;
        let x = Tensor::new(vec![batch, n, h, w], uniform(batch * n * h * w, &mut rng)).unwrap();
        let y3 = composed.forward(&x).unwrap();
        let y1 = sequential.forward(&x).unwrap();
        worst_lib = worst_lib.max(rel(max_abs_diff(y3.data(), y1.data()), max_abs(y1.data())));

        let plane = y3.len() / (batch * q);
        for s in 0..batch {
            let xs = &x.data()[s * n * h * w..(s + 1) * n * h * w];
            for (m, f) in filters.iter().enumerate() {
                let dense = direct_conv3(xs, n, h, w, f.to_dense().data(), 3, 3, padding);
                let seq = direct_sequential(xs, n, h, w, f.p().data(), f.q().data(), f.t().data(), padding);
                let got = &y3.data()[(s * q + m) * plane..(s * q + m + 1) * plane];
                let scale = max_abs(&dense);
                worst_oracle = worst_oracle
                    .max(rel(max_abs_diff(&dense, &seq), scale))
                    .max(rel(max_abs_diff(got, &dense), scale));
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    let worst = worst_lib.max(worst_oracle);
    report(
        1,
        "separability",
        worst <= 1e-10 && secs < 5.0,
        &format!(
            "{cases} cases, worst rel err {worst:.2e} (layers {worst_lib:.2e}, direct oracles {worst_oracle:.2e}) <= 1e-10, {secs:.2}s < 5s"
        ),
    );
}

fn micro_loss(net: &mut Network, x: &Tensor, labels: &[usize]) -> f64 {
    let logits = net.forward(x, true).unwrap();
    softmax_xent(&logits, labels).unwrap().0
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

#[test]
fn factor_gradients_match_finite_differences() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let step = 1e-6;
    let nets = 50;
    let (mut worst, mut entries) = (0.0f64, 0usize);
    for k in 0..nets {
        let n = rng.random_range(1..=3);
        let (c1, c2) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let (h, w) = (rng.random_range(4..=6), rng.random_range(4..=6));
        let classes = 3;
        let fc_in = c2 * (h - 2) * (w - 2);
        let spec: NetworkSpec = format!(
            "input {n}x{h}x{w}; conv {n}->{c1} 3x3; conv {c1}->{c2} 3x3 valid; fc {fc_in}->{classes}"
        )
        .parse()
        .unwrap();
        let mut net = Network::new(&spec, ConvMode::Rank1, 1000 + k).unwrap();
        for slot in net.params_mut() {
            slot.value.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        }
        let batch = 3;
        let x = Tensor::new(vec![batch, n, h, w], (0..batch * n * h * w).map(|_| rng.random::<f64>()).collect()).unwrap();
        let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..classes)).collect();

        let logits = net.forward(&x, true).unwrap();
        let (_, dlogits) = softmax_xent(&logits, &labels).unwrap();
        net.backward(&dlogits).unwrap();
        let analytic: Vec<(usize, Vec<f64>)> = net
            .params_mut()
            .into_iter()
            .enumerate()
            .filter(|(_, s)| s.name.contains(".filter"))
            .map(|(i, s)| (i, s.grad.to_vec()))
            .collect();

        for (slot, grad) in analytic {
            let mut numeric = vec![0.0; grad.len()];
            for (e, g) in numeric.iter_mut().enumerate() {
                let base = net.params_mut()[slot].value[e];
                net.params_mut()[slot].value[e] = base + step;
                let up = micro_loss(&mut net, &x, &labels);
                net.params_mut()[slot].value[e] = base - step;
                let down = micro_loss(&mut net, &x, &labels);
                net.params_mut()[slot].value[e] = base;
                *g = (up - down) / (2.0 * step);
            }
            let diff: Vec<f64> = grad.iter().zip(&numeric).map(|(a, b)| a - b).collect();
            worst = worst.max(norm(&diff) / norm(&grad).max(norm(&numeric)).max(1e-8));
            entries += grad.len();
        }
    }
    let secs = started.elapsed().as_secs_f64();
    report(
        2,
        "factor gradients",
        worst <= 1e-5 && secs < 30.0,
        &format!("{nets} micro-nets, {entries} factor entries, worst rel err {worst:.2e} <= 1e-5, {secs:.2}s < 30s"),
    );
}

#[test]
fn projected_update_matches_expansion() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let cases = 100;
    let (mut worst_expansion, mut worst_residual, mut worst_grads) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..cases {
        let (n, d1, d2) = (rng.random_range(1..=6), rng.random_range(1..=5), rng.random_range(1..=5));
        let (p, q, t) = (uniform(d1, &mut rng), uniform(d2, &mut rng), uniform(n, &mut rng));
        let alpha = rng.random_range(0.01..1.0);
        let dw = uniform(n * d1 * d2, &mut rng);
        let filter = Rank1Filter::from_slices(&p, &q, &t).unwrap();
        let g = filter.backprop_factors(&Tensor::new(vec![n, d1, d2], dw.clone()).unwrap()).unwrap();
        let (dp, dq, dt) = (g.dp.data(), g.dq.data(), g.dt.data());

        let idx = |k: usize, i: usize, j: usize| (k * d1 + i) * d2 + j;
        let mut want = vec![0.0; d1];
        for i in 0..d1 {
            want[i] = (0..n).flat_map(|k| (0..d2).map(move |j| (k, j))).map(|(k, j)| dw[idx(k, i, j)] * q[j] * t[k]).sum();
        }
        worst_grads = worst_grads.max(max_abs_diff(dp, &want));
        let mut want = vec![0.0; d2];
        for j in 0..d2 {
            want[j] = (0..n).flat_map(|k| (0..d1).map(move |i| (k, i))).map(|(k, i)| dw[idx(k, i, j)] * p[i] * t[k]).sum();
        }
        worst_grads = worst_grads.max(max_abs_diff(dq, &want));
        let mut want = vec![0.0; n];
        for k in 0..n {
            want[k] = (0..d1).flat_map(|i| (0..d2).map(move |j| (i, j))).map(|(i, j)| dw[idx(k, i, j)] * p[i] * q[j]).sum();
        }
        worst_grads = worst_grads.max(max_abs_diff(dt, &want));

        let updated = filter.projected_update(&g, alpha).unwrap().to_dense();
        for k in 0..n {
            for i in 0..d1 {
                for j in 0..d2 {
                    let w = p[i] * q[j] * t[k];
                    let first = p[i] * q[j] * dt[k] + q[j] * t[k] * dp[i] + p[i] * t[k] * dq[j];
                    let second = p[i] * dq[j] * dt[k] + q[j] * dp[i] * dt[k] + t[k] * dp[i] * dq[j];
                    let third = dp[i] * dq[j] * dt[k];
                    let expanded = w - alpha * first + alpha * alpha * second - alpha.powi(3) * third;
                    let got = updated.data()[idx(k, i, j)];
                    worst_expansion = worst_expansion.max((got - expanded).abs());

                    let delta = first - alpha * second + alpha * alpha * third;
                    let dense_step = w - alpha * dw[idx(k, i, j)];
                    let residual = got - dense_step;
                    worst_residual = worst_residual.max((residual + alpha * (delta - dw[idx(k, i, j)])).abs());
                }
            }
        }
    }
    let worst = worst_expansion.max(worst_residual).max(worst_grads);
    report(
        3,
        "projected update",
        worst <= 1e-12,
        &format!(
            "{cases} cases, expansion {worst_expansion:.2e}, residual identity {worst_residual:.2e}, factor grads {worst_grads:.2e} (abs, <= 1e-12)"
        ),
    );
}

/// `||A - s1 u v^T||_F / s1` from power iteration; bounds `s2 / s1` from above.
fn rank1_defect(a: &[f64], rows: usize, cols: usize) -> f64 {
    let mut v: Vec<f64> = (0..cols).map(|j| 1.0 / (j + 1) as f64).collect();
    let mut u = vec![0.0; rows];
    for _ in 0..30 {
        for (r, ur) in u.iter_mut().enumerate() {
            *ur = (0..cols).map(|c| a[r * cols + c] * v[c]).sum();
        }
        let nu = norm(&u);
        if nu == 0.0 {
            return 0.0;
        }
        u.iter_mut().for_each(|x| *x /= nu);
        for (c, vc) in v.iter_mut().enumerate() {
            *vc = (0..rows).map(|r| a[r * cols + c] * u[r]).sum();
        }
        let nv = norm(&v);
        v.iter_mut().for_each(|x| *x /= nv);
    }
    let s1 = (0..rows).map(|r| u[r] * (0..cols).map(|c| a[r * cols + c] * v[c]).sum::<f64>()).sum::<f64>();
    let residual: f64 = (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r, c)))
        .map(|(r, c)| (a[r * cols + c] - s1 * u[r] * v[c]).powi(2))
        .sum();
    residual.sqrt() / s1.abs()
}

/// The three mode unfoldings of `[N, d1, d2]`, each as (data, rows, cols).
fn unfold(w: &Tensor) -> [(Vec<f64>, usize, usize); 3] {
    let &[n, d1, d2] = w.shape() else { panic!("filter must be 3-D") };
    let at = |k: usize, i: usize, j: usize| w.data()[(k * d1 + i) * d2 + j];
    let mut lateral = Vec::new();
    let mut vertical = Vec::new();
    let mut horizontal = Vec::new();
    for k in 0..n {
        for i in 0..d1 {
            for j in 0..d2 {
                lateral.push(at(k, i, j));
            }
        }
    }
    for i in 0..d1 {
        for k in 0..n {
            for j in 0..d2 {
                vertical.push(at(k, i, j));
            }
        }
    }
    for j in 0..d2 {
        for k in 0..n {
            for i in 0..d1 {
                horizontal.push(at(k, i, j));
            }
        }
    }
    [(lateral, n, d1 * d2), (vertical, d1, n * d2), (horizontal, d2, n * d1)]
}

#[test]
fn rank1_survives_every_training_step() {
    let data = mnist("train").take(4800).unwrap();
    let spec = NetworkSpec::preset("mnist-small").unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        seed: 1,
        mode: ConvMode::Rank1,
        ..TrainConfig::default()
    };
    let mut net = Network::new(&spec, cfg.mode, cfg.seed).unwrap();
    let (mut steps, mut checked, mut worst) = (0usize, 0usize, 0.0f64);
    train_network(&mut net, &data, None, &cfg, |info| {
        steps += 1;
        for layer in info.network.conv_layers() {
            for filter in layer.dense_filters() {
                for (m, rows, cols) in unfold(&filter) {
                    worst = worst.max(rank1_defect(&m, rows, cols));
                    checked += 1;
                }
            }
        }
        Ok(())
    })
    .unwrap();
    report(
        4,
        "rank-1 preservation",
        steps == 300 && worst <= 1e-10,
        &format!("{steps} steps, {checked} unfoldings, worst s2/s1 bound {worst:.2e} <= 1e-10"),
    );
}

/// Circular multi-channel cross-correlation, output in column-major `VEC`.
fn circular_vec(x: &[f64], n: usize, n1: usize, n2: usize, f: &[f64], d1: usize, d2: usize) -> Vec<f64> {
    let mut out = vec![0.0; n1 * n2];
    for a in 0..n1 {
        for b in 0..n2 {
            let mut acc = 0.0;
            for k in 0..n {
                for e in 0..d1 {
                    for c in 0..d2 {
                        acc += x[(k * n1 + (a + e) % n1) * n2 + (b + c) % n2] * f[(k * d1 + e) * d2 + c];
                    }
                }
            }
            out[b * n1 + a] = acc;
        }
    }
    out
}

#[test]
fn hankel_product_matches_circular_convolution() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let (mut cases, mut worst) = (0usize, 0.0f64);
    for n1 in 1..=8usize {
        for n2 in 1..=8usize {
            for d1 in [1, n1.div_ceil(2), n1] {
                for d2 in [1, n2.div_ceil(2), n2] {
                    let n = cases % 4 + 1;
                    let q = (cases / 4) % 4 + 1;
                    let dense = cases % 2 == 0;
                    let filters: Vec<Vec<f64>> = if dense {
                        (0..q).map(|_| uniform(n * d1 * d2, &mut rng)).collect()
                    } else {
                        (0..q)
                            .map(|_| {
                                let (p, qv, t) = (uniform(d1, &mut rng), uniform(d2, &mut rng), uniform(n, &mut rng));
                                (0..n)
                                    .flat_map(|k| (0..d1).flat_map(move |i| (0..d2).map(move |j| (k, i, j))))
                                    .map(|(k, i, j)| p[i] * qv[j] * t[k])
                                    .collect()
                            })
                            .collect()
                    };
                    let weight = Tensor::new(vec![q, n, d1, d2], filters.concat()).unwrap();
                    let grad = Tensor::zeros(weight.shape());
                    let mut layer = ConvLayer::from_weights(
                        ConvWeights::Standard { weight, grad },
                        Tensor::zeros(&[q]),
                        PaddingMode::Circular,
                        1,
                    )
                    .unwrap();
                    let x = uniform(n * n1 * n2, &mut rng);
                    let xt = Tensor::new(vec![n, n1, n2], x.clone()).unwrap();
                    let sys = assemble_system(&xt, &layer).unwrap();
                    let hw = sys.h.matmul(&sys.w).unwrap();
                    let spatial = layer.forward(&xt.reshape(&[1, n, n1, n2]).unwrap()).unwrap();
                    for (m, f) in filters.iter().enumerate() {
                        let want = circular_vec(&x, n, n1, n2, f, d1, d2);
                        let scale = max_abs(&want).max(1.0);
                        let col = |t: &Tensor| (0..n1 * n2).map(|r| t.data()[r * q + m]).collect::<Vec<_>>();
                        let plane = &spatial.data()[m * n1 * n2..(m + 1) * n1 * n2];
                        let spatial_vec: Vec<f64> = (0..n1 * n2).map(|r| plane[(r % n1) * n2 + r / n1]).collect();
                        worst = worst
                            .max(max_abs_diff(&col(&hw), &want) / scale)
                            .max(max_abs_diff(&col(&sys.y), &want) / scale)
                            .max(max_abs_diff(&spatial_vec, &want) / scale);
                    }
                    cases += 1;
                }
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    report(
        5,
        "hankel equivalence",
        worst <= 1e-12 && secs < 10.0,
        &format!("{cases} systems (n1,n2,d1,d2 <= 8; N,q <= 4), worst err {worst:.2e} <= 1e-12, {secs:.2}s < 10s"),
    );
}

/// Rank from Gram-Schmidt with column pivoting.
fn pivoted_rank(m: &Tensor, rel_tol: f64) -> usize {
    let (rows, cols) = (m.shape()[0], m.shape()[1]);
    let mut columns: Vec<Vec<f64>> = (0..cols).map(|c| (0..rows).map(|r| m.data()[r * cols + c]).collect()).collect();
    let mut first = None;
    let mut rank = 0;
    while !columns.is_empty() {
        let (best, size) = columns
            .iter()
            .enumerate()
            .map(|(i, c)| (i, norm(c)))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        let first = *first.get_or_insert(size);
        if size <= rel_tol * first || size == 0.0 {
            break;
        }
        let pivot: Vec<f64> = columns.swap_remove(best).iter().map(|v| v / size).collect();
        for c in columns.iter_mut() {
            let proj: f64 = c.iter().zip(&pivot).map(|(a, b)| a * b).sum();
            c.iter_mut().zip(&pivot).for_each(|(a, b)| *a -= proj * b);
        }
        rank += 1;
    }
    rank
}

#[test]
fn rank_bound_on_output_matrix() {
    let (channels, filters, trials) = (4, 8, 50);
    let bound = channels.min(filters);
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut within = [0usize; 3];
    let mut max_rank = [0usize; 3];
    let mut disagreements = 0;
    let families = [FilterFamily::Rank1, FilterFamily::Dense, FilterFamily::SharedSpatial];
    for _ in 0..trials {
        let x = Tensor::new(vec![channels, 6, 6], uniform(channels * 36, &mut rng)).unwrap();
        for (f, &family) in families.iter().enumerate() {
            let layer = random_layer(family, channels, filters, (3, 3), &mut rng).unwrap();
            let sys = assemble_system(&x, &layer).unwrap();
            let rank = numerical_rank(&sys.y, DEFAULT_RANK_TOL).unwrap();
            if rank != pivoted_rank(&sys.y, DEFAULT_RANK_TOL) {
                disagreements += 1;
            }
            within[f] += usize::from(rank <= bound);
            max_rank[f] = max_rank[f].max(rank);
        }
    }
    let dense_exceed = trials - within[1];
    let passed = disagreements == 0 && within[0] == trials && dense_exceed * 10 >= trials * 8;
    report(
        6,
        "rank bound",
        passed,
        &format!(
            "rank-1 filters: {}/{trials} trials with rank(Y) <= {bound} (max {}); dense: {dense_exceed}/{trials} exceed {bound} (max {}); \
             shared spatial factors (informational): {}/{trials} within (max {}); rank oracle disagreements {disagreements}",
            within[0], max_rank[0], max_rank[1], within[2], max_rank[2]
        ),
    );
}

#[test]
fn desk_scale_mnist_training() {
    let train_data = mnist("train");
    let test_data = mnist("t10k");
    let spec = NetworkSpec::preset("mnist-small").unwrap();
    let config = |mode| TrainConfig {
        learning_rate: 0.05,
        batch_size: 32,
        epochs: 5,
        seed: 1,
        mode,
        ..TrainConfig::default()
    };
    let started = Instant::now();
    let (_, rank1) = train(&spec, &train_data, Some(&test_data), &config(ConvMode::Rank1)).unwrap();
    let rank1_secs = started.elapsed().as_secs_f64();
    let (_, standard) = train(&spec, &train_data, Some(&test_data), &config(ConvMode::Standard)).unwrap();
    let sequential = train(&spec, &train_data, Some(&test_data), &config(ConvMode::Sequential));

    let acc_r = rank1.final_accuracy().unwrap();
    let acc_s = standard.final_accuracy().unwrap();
    let (seq_ok, seq_detail) = match &sequential {
        Ok((_, run)) => {
            let finite = run.metrics.iter().all(|m| m.loss.is_finite());
            (finite && run.epochs_completed == 5, format!("{:.2}%", 100.0 * run.final_accuracy().unwrap()))
        }
        Err(e) => (false, format!("error: {e}")),
    };
    let gap = (acc_r - acc_s).abs();
    report(
        7,
        "desk-scale training",
        acc_r >= 0.95 && gap <= 0.02 && seq_ok && rank1_secs < 900.0,
        &format!(
            "{} train / {} test, 5 epochs: rank1 {:.2}% (>= 95%) in {rank1_secs:.0}s (< 900s, one thread), standard {:.2}% (gap {:.2} <= 2 points), sequential-1d {seq_detail} without divergence: {seq_ok}",
            train_data.len(),
            test_data.len(),
            100.0 * acc_r,
            100.0 * acc_s,
            100.0 * gap
        ),
    );
}

#[test]
fn table_conv2_parameter_counts() {
    let out = Command::new(env!("CARGO_BIN_EXE_rank1cnn")).args(["params", "mnist-large"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let row: Vec<String> = text
        .lines()
        .find(|l| l.starts_with("conv2 "))
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .unwrap_or_default();
    let (n, d1, d2) = (64, 3, 3);
    let (factored, dense) = (n + d1 + d2, n * d1 * d2);
    let shape_ok = row.get(2).map(String::as_str) == Some("64x3x3");
    let got = (row.get(3).and_then(|v| v.parse::<usize>().ok()), row.get(4).and_then(|v| v.parse::<usize>().ok()));
    report(
        8,
        "parameter counts",
        shape_ok && got == (Some(factored), Some(dense)) && (factored, dense) == (70, 576),
        &format!(
            "conv2 64x3x3 reports {} factored / {} dense per filter, expected {factored} / {dense}",
            got.0.map_or("?".into(), |v| v.to_string()),
            got.1.map_or("?".into(), |v| v.to_string())
        ),
    );
}

#[test]
fn repeated_cli_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let prefix = mnist_dir();
    let mut logs = Vec::new();
    for run in ["first", "second"] {
        let cfg = dir.path().join(format!("{run}.conf"));
        std::fs::write(
            &cfg,
            format!(
                "mode = rank1\narch = mnist-small\n\
                 data.train = {train}\ndata.test = {test}\n\
                 train_limit = 1000\ntest_limit = 300\neval_every = 10\n\
                 lr = 0.05\nbatch_size = 32\nepochs = 1\nseed = 9\n\
                 out_dir = {run}\ndeterministic = true\n",
                train = prefix.join("train").display(),
                test = prefix.join("t10k").display(),
            ),
        )
        .unwrap();
        let out = Command::new(env!("CARGO_BIN_EXE_rank1cnn")).arg("train").arg(&cfg).output().unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        logs.push(std::fs::read(dir.path().join(run).join("metrics.csv")).unwrap());
    }
    let rows = logs[0].iter().filter(|&&b| b == b'\n').count();
    report(
        9,
        "determinism",
        logs[0] == logs[1] && rows > 1,
        &format!("two CLI runs, metrics.csv {} and {} bytes, {rows} lines, identical: {}", logs[0].len(), logs[1].len(), logs[0] == logs[1]),
    );
}
