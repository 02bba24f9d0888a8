//! Independent reference implementations shared by the integration tests
//! and the acceptance harness.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use ssr::nn::{softmax_xent, LayerKind, LayerSpec, Mode, Network, NetworkSpec, ParamSelect};
use ssr::prox::{prox, ProxInput, RegularizerKind};
use ssr::prune::{compact_all, prunable_layers, zero_masked, MaskOrigin, PruneMask};
use ssr::tensor::{Matrix, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<f64> {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
}

pub fn uniform_tensor<T: ssr::tensor::Scalar>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| T::lit(rng.random_range(-1.0..1.0))).collect()).unwrap()
}

// ---------------------------------------------------------------- prox

/// Per row: the better of keeping `t` (cost λ) and zeroing it (cost ρ/2‖t‖²).
/// Equal costs resolve to zero.
pub fn l20_two_candidate(t: &Matrix<f64>, lambda: f64, rho: f64) -> Matrix<f64> {
    let mut out = t.clone();
    for i in 0..t.rows() {
        let sq: f64 = t.row(i).iter().map(|v| v * v).sum();
        if lambda >= 0.5 * rho * sq {
            out.row_mut(i).fill(0.0);
        }
    }
    out
}

/// Minimizes `φ` on `[lo, hi]` by a coarse grid followed by a fine grid
/// around the coarse winner.
fn grid_min(lo: f64, hi: f64, phi: impl Fn(f64) -> f64) -> f64 {
    let search = |lo: f64, hi: f64, steps: usize| {
        let h = (hi - lo) / steps as f64;
        (0..=steps)
            .map(|k| lo + h * k as f64)
            .min_by(|a, b| phi(*a).total_cmp(&phi(*b)))
            .unwrap()
    };
    if hi <= lo {
        return lo;
    }
    let coarse = search(lo, hi, 2000);
    let h = (hi - lo) / 2000.0;
    search((coarse - h).max(lo), (coarse + h).min(hi), 2000)
}

/// Row-wise minimization of `λ‖f‖ + ρ/2‖f − t‖²`, searched along the ray
/// through `t` (any off-ray component only adds cost).
pub fn l21_row_search(t: &Matrix<f64>, lambda: f64, rho: f64) -> Matrix<f64> {
    let mut out = t.clone();
    for i in 0..t.rows() {
        let norm = t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        let s = grid_min(0.0, norm, |s| lambda * s + 0.5 * rho * (s - norm).powi(2));
        let scale = if norm > 0.0 { s / norm } else { 0.0 };
        for v in out.row_mut(i) {
            *v *= scale;
        }
    }
    out
}

/// Entry-wise minimization of `λ|f| + ρ/2(f − t)²` over `[−2|t|, 2|t|]`.
pub fn l1_scalar_search(t: &Matrix<f64>, lambda: f64, rho: f64) -> Matrix<f64> {
    t.map(|v| grid_min(-2.0 * v.abs(), 2.0 * v.abs(), |f| lambda * f.abs() + 0.5 * rho * (f - v).powi(2)))
}

pub struct ProxOracleResult {
    pub cases: usize,
    pub l20_exact: usize,
    pub l21_max_err: f64,
    pub l1_max_err: f64,
}

/// Random matrices with up to 8 rows and 16 columns against all three
/// reference minimizers, cycling λ over {0, 0.1, 1, 10} and ρ over {0.5, 1, 2}.
pub fn prox_oracle(cases: usize, seed: u64) -> ProxOracleResult {
    let mut rng = rng(seed);
    let lambdas = [0.0, 0.1, 1.0, 10.0];
    let rhos = [0.5, 1.0, 2.0];
    let mut res = ProxOracleResult {
        cases,
        l20_exact: 0,
        l21_max_err: 0.0,
        l1_max_err: 0.0,
    };
    for case in 0..cases {
        let rows = rng.random_range(1..=8);
        let cols = rng.random_range(1..=16);
        let t = normal_matrix(&mut rng, rows, cols);
        let lambda = lambdas[case % 4];
        let rho = rhos[(case / 4) % 3];
        let input = ProxInput::new(t.clone(), lambda, rho).unwrap();
        if prox(RegularizerKind::L20, &input) == l20_two_candidate(&t, lambda, rho) {
            res.l20_exact += 1;
        }
        let max_diff = |a: &Matrix<f64>, b: &Matrix<f64>| {
            a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
        };
        res.l21_max_err = res
            .l21_max_err
            .max(max_diff(&prox(RegularizerKind::L21, &input), &l21_row_search(&t, lambda, rho)));
        res.l1_max_err = res
            .l1_max_err
            .max(max_diff(&prox(RegularizerKind::L1, &input), &l1_scalar_search(&t, lambda, rho)));
    }
    res
}

// ---------------------------------------------------------------- conv

/// Straight quadruple-loop convolution of one `C×H×W` sample with zero
/// padding; returns `F×H'×W'`.
pub fn direct_conv(
    x: &[f64],
    [c, h, w]: [usize; 3],
    weights: &dyn Fn(usize, usize, usize, usize) -> f64,
    bias: &[f64],
    kernel: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = h + 2 * pad - kernel + 1;
    let ow = w + 2 * pad - kernel + 1;
    let mut out = vec![0.0; bias.len() * oh * ow];
    for (f, b) in bias.iter().enumerate() {
        for i in 0..oh {
            for j in 0..ow {
                let mut s = *b;
                for ch in 0..c {
                    for u in 0..kernel {
                        for v in 0..kernel {
                            let (r, q) = (i + u, j + v);
                            if r < pad || q < pad || r - pad >= h || q - pad >= w {
                                continue;
                            }
                            s += weights(f, ch, u, v) * x[ch * h * w + (r - pad) * w + (q - pad)];
                        }
                    }
                }
                out[f * oh * ow + i * ow + j] = s;
            }
        }
    }
    out
}

/// Largest absolute gap between the network's conv layer and
/// [`direct_conv`] over `geometries` random shapes.
pub fn conv_oracle(geometries: usize, seed: u64) -> f64 {
    let mut rng = rng(seed);
    let mut worst = 0.0f64;
    for g in 0..geometries {
        let c = rng.random_range(1..=4);
        let kernel: usize = rng.random_range(1..=5);
        let pad: usize = rng.random_range(0..=2).min(kernel - 1);
        let h = rng.random_range(kernel.saturating_sub(2 * pad).max(1)..=12);
        let w = rng.random_range(kernel.saturating_sub(2 * pad).max(1)..=12);
        let filters = rng.random_range(1..=5);
        let n = rng.random_range(1..=3);
        let spec = NetworkSpec::new(
            [c, h, w],
            vec![
                LayerSpec::new("conv", LayerKind::Conv { filters, kernel, pad }),
                LayerSpec::new("fc", LayerKind::Fc { outputs: 2 }),
                LayerSpec::new("loss", LayerKind::SoftmaxXent),
            ],
        )
        .unwrap();
        let mut net = Network::<f32>::init(spec, g as u64).unwrap();
        for b in net.bias_mut(0).unwrap().iter_mut() {
            *b = rng.random_range(-1.0..1.0);
        }
        let x: Tensor<f32> = uniform_tensor(&mut rng, &[n, c, h, w]);
        let got = net.forward_until(&x, 0).unwrap();
        let k = net.filter_matrix(0).unwrap().clone();
        let bias: Vec<f64> = net.bias_mut(0).unwrap().iter().map(|&v| v as f64).collect();
        let weight = |f: usize, ch: usize, u: usize, v: usize| k.get(f, ch * kernel * kernel + u * kernel + v) as f64;
        let per = c * h * w;
        let out_len = got.len() / n;
        for s in 0..n {
            let xs: Vec<f64> = x.data()[s * per..(s + 1) * per].iter().map(|&v| v as f64).collect();
            let expect = direct_conv(&xs, [c, h, w], &weight, &bias, kernel, pad);
            assert_eq!(expect.len(), out_len, "geometry {g}");
            for (a, b) in got.data()[s * out_len..(s + 1) * out_len].iter().zip(&expect) {
                worst = worst.max((*a as f64 - b).abs());
            }
        }
    }
    worst
}

// ---------------------------------------------------------------- gradients

/// Relative tolerance of the finite-difference comparison.
pub const GRAD_RTOL: f64 = 1e-4;
/// Gradients smaller than this in both estimates count as agreeing zeros.
pub const GRAD_ATOL: f64 = 1e-8;
pub const GRAD_EPS: f64 = 1e-3;
/// Step used to re-probe entries whose `GRAD_EPS` stencil straddles a ReLU
/// or max-pool kink.
pub const KINK_EPS: f64 = 1e-6;

pub struct GradCheck {
    pub name: &'static str,
    pub params: usize,
    pub checked: usize,
    pub worst_rel: f64,
    /// Disagree at `GRAD_EPS` but agree at `KINK_EPS`.
    pub kinks: usize,
    pub failures: usize,
}

fn loss_of(net: &Network<f64>, x: &Tensor<f64>, labels: &[usize]) -> f64 {
    let (logits, _) = net.forward(x, Mode::Train).unwrap();
    softmax_xent(&logits, labels).unwrap().0
}

fn agree(a: f64, n: f64) -> (bool, f64) {
    let diff = (a - n).abs();
    let rel = diff / a.abs().max(n.abs()).max(f64::MIN_POSITIVE);
    (diff <= GRAD_ATOL || rel <= GRAD_RTOL, if diff <= GRAD_ATOL { 0.0 } else { rel })
}

/// Central differences on every parameter and every input entry of `net`.
pub fn grad_check(name: &'static str, spec: NetworkSpec, batch: usize, seed: u64) -> GradCheck {
    let mut rng = rng(seed);
    let mut net = Network::<f64>::init(spec, seed).unwrap();
    for p in net.params_mut() {
        if let Some((w, b)) = p.trainable_mut() {
            for v in w.iter_mut().chain(b.iter_mut()) {
                *v += rng.random_range(-0.3..0.3);
            }
        }
    }
    let [c, h, w] = net.spec().input;
    let x: Tensor<f64> = uniform_tensor(&mut rng, &[batch, c, h, w]);
    let classes = net.num_classes();
    let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..classes)).collect();

    let (logits, acts) = net.forward(&x, Mode::Train).unwrap();
    let (_, dlogits) = softmax_xent(&logits, &labels).unwrap();
    let (grads, dx) = net.backward(&acts, &dlogits, ParamSelect::All, true).unwrap();
    let dx = dx.unwrap();

    let mut out = GradCheck {
        name,
        params: net.params().iter().map(|p| p.len()).sum(),
        checked: 0,
        worst_rel: 0.0,
        kinks: 0,
        failures: 0,
    };
    let mut record = |a: f64, probe: &dyn Fn(f64) -> f64| {
        let central = |eps: f64| (probe(eps) - probe(-eps)) / (2.0 * eps);
        out.checked += 1;
        let (ok, rel) = agree(a, central(GRAD_EPS));
        if ok {
            out.worst_rel = out.worst_rel.max(rel);
        } else if agree(a, central(KINK_EPS)).0 {
            out.kinks += 1;
        } else {
            out.worst_rel = out.worst_rel.max(rel);
            out.failures += 1;
        }
    };
    for l in 0..net.params().len() {
        let Some(g) = grads.layers[l].clone() else { continue };
        let (nw, nb) = {
            let (w, b) = net.params()[l].trainable().unwrap();
            (w.len(), b.len())
        };
        for (which, len, analytic) in [(0, nw, &g.weight), (1, nb, &g.bias)] {
            for i in 0..len {
                let probe = |delta: f64| {
                    let mut n2 = net.clone();
                    let (w, b) = n2.params_mut()[l].trainable_mut().unwrap();
                    if which == 0 {
                        w[i] += delta;
                    } else {
                        b[i] += delta;
                    }
                    loss_of(&n2, &x, &labels)
                };
                record(analytic[i], &probe);
            }
        }
    }
    for i in 0..x.len() {
        let probe = |delta: f64| {
            let mut x2 = x.clone();
            x2.data_mut()[i] += delta;
            loss_of(&net, &x2, &labels)
        };
        record(dx.data()[i], &probe);
    }
    out
}

/// Micro-nets that between them contain every layer kind.
pub fn grad_check_nets() -> Vec<(&'static str, NetworkSpec, usize)> {
    use LayerKind::*;
    let l = LayerSpec::new;
    vec![
        (
            "conv/relu/maxpool/fc",
            NetworkSpec::new(
                [1, 6, 6],
                vec![
                    l("conv", Conv { filters: 2, kernel: 3, pad: 1 }),
                    l("relu", Relu),
                    l("pool", MaxPool { size: 2 }),
                    l("fc1", Fc { outputs: 4 }),
                    l("relu2", Relu),
                    l("fc2", Fc { outputs: 3 }),
                    l("loss", SoftmaxXent),
                ],
            )
            .unwrap(),
            3,
        ),
        (
            "batchnorm/residual/gap",
            NetworkSpec::new(
                [2, 4, 4],
                vec![
                    l("stem", Conv { filters: 3, kernel: 1, pad: 0 }),
                    l("stem_bn", BatchNorm),
                    l("stem_relu", Relu),
                    l("b1_begin", ResidualBegin { projection: Some(4) }),
                    l("b1_a", Conv { filters: 2, kernel: 3, pad: 1 }),
                    l("b1_bn", BatchNorm),
                    l("b1_relu", Relu),
                    l("b1_b", Conv { filters: 4, kernel: 1, pad: 0 }),
                    l("b1_add", ResidualAdd),
                    l("b1_out", Relu),
                    l("b2_begin", ResidualBegin { projection: None }),
                    l("b2_a", Conv { filters: 2, kernel: 1, pad: 0 }),
                    l("b2_relu", Relu),
                    l("b2_b", Conv { filters: 4, kernel: 1, pad: 0 }),
                    l("b2_add", ResidualAdd),
                    l("gap", Gap),
                    l("fc", Fc { outputs: 3 }),
                    l("loss", SoftmaxXent),
                ],
            )
            .unwrap(),
            4,
        ),
    ]
}

// ---------------------------------------------------------------- masks

pub fn random_masks(net: &Network, rng: &mut ChaCha8Rng) -> Vec<PruneMask> {
    let mut masks = Vec::new();
    for name in prunable_layers(net) {
        let width = net.spec().width(net.layer_index(&name).unwrap()).unwrap();
        let mut keep: Vec<bool> = (0..width).map(|_| rng.random_bool(0.5)).collect();
        if !keep.iter().any(|&k| k) {
            keep[rng.random_range(0..width)] = true;
        }
        masks.push(PruneMask::new(name, keep, MaskOrigin::Random));
    }
    masks
}

/// Largest output gap between zero-masking and compaction over `trials`
/// random mask sets, each on `inputs` random samples.
pub fn masked_vs_compacted(net: &Network, trials: usize, inputs: usize, seed: u64) -> f64 {
    let mut rng = rng(seed);
    let [c, h, w] = net.spec().input;
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let masks = random_masks(net, &mut rng);
        let mut masked = net.clone();
        for m in &masks {
            masked = zero_masked(&masked, m).unwrap();
        }
        let compacted = compact_all(net, &masks).unwrap();
        let x: Tensor = uniform_tensor(&mut rng, &[inputs, c, h, w]);
        let a = masked.predict(&x).unwrap();
        let b = compacted.predict(&x).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            worst = worst.max((p - q).abs() as f64);
        }
    }
    worst
}

/// A network with randomized biases and batch-norm statistics so that
/// masking has something to get wrong.
pub fn perturbed(spec: NetworkSpec, seed: u64) -> Network {
    let mut rng = rng(seed);
    let mut net = Network::init(spec, seed).unwrap();
    for p in net.params_mut() {
        match p {
            ssr::nn::LayerParams::BatchNorm(bn) => {
                for v in bn.gamma.iter_mut().chain(bn.beta.iter_mut()).chain(bn.running_mean.iter_mut()) {
                    *v = rng.random_range(-0.5..0.5);
                }
                for v in bn.running_var.iter_mut() {
                    *v = rng.random_range(0.5..1.5);
                }
            }
            other => {
                if let Some((_, b)) = other.trainable_mut() {
                    for v in b.iter_mut() {
                        *v = rng.random_range(-0.2..0.2);
                    }
                }
            }
        }
    }
    net
}
