//! Alternating solver for the structured-sparsity problem
//! `min L_D(K) + λ·g(F)  s.t.  K = F`, one layer at a time.
//!
//! Each outer iteration runs
//!
//! 1. K-step: SGD on `L_D(K) + (ρ/2)‖K − T₁‖²` with `T₁ = F̂ − Ŷ/ρ`,
//! 2. F-step: `F = prox_g(K + Ŷ/ρ)`,
//! 3. Y-step: `Y = Ŷ + ρ(K − F)`,
//! 4. overrelaxation: `Ŷ = Y + γ(Y − Y_prev)`, `F̂ = F + γ(F − F_prev)`
//!    with `γ = k/(k + r)` for the (post-increment) iteration `k`,
//!
//! and stops once `‖K − F‖_F` or `‖F − F_prev‖_F`, divided by the square
//! root of the element count, falls to `epsilon`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Error, Result};
use crate::nn::{softmax_xent, Dataset, Grads, Mode, Network, ParamGrads, ParamSelect, Sgd, SgdConfig};
use crate::prox::{prox, row_support, ProxInput, RegularizerKind};
use crate::prune::{self, MaskOrigin, PruneMask};
use crate::tensor::{row_l2_norms, Matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AulmConfig {
    /// Tolerance on the element-normalized Frobenius residuals.
    pub epsilon: f32,
    pub max_outer_iters: usize,
    pub sgd_epochs_per_kstep: usize,
    pub sgd: SgdConfig,
    pub rho: f32,
    pub r: f32,
    /// Caps the mini-batches of each K-step pass; `None` means full passes.
    pub kstep_max_batches: Option<usize>,
    /// Let the other layers take plain SGD steps during a K-step.
    pub train_other_layers: bool,
    /// Pins `γ` to zero, which turns the method into plain ADMM.
    pub force_zero_gamma: bool,
    /// Mini-batches of all-layer SGD run after each layer is compacted in
    /// [`solve_network`], before the next layer is solved. Zero disables it.
    pub layer_update_batches: usize,
}

impl Default for AulmConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            max_outer_iters: 30,
            sgd_epochs_per_kstep: 1,
            sgd: SgdConfig::solver_default(),
            rho: 1.0,
            r: 3.0,
            kstep_max_batches: None,
            train_other_layers: false,
            force_zero_gamma: false,
            layer_update_batches: 0,
        }
    }
}

impl AulmConfig {
    pub fn validate(&self) -> Result<()> {
        self.sgd.validate()?;
        if !(self.epsilon > 0.0) {
            return input_err("epsilon must be positive");
        }
        if self.max_outer_iters == 0 || self.sgd_epochs_per_kstep == 0 {
            return input_err("max_outer_iters and sgd_epochs_per_kstep must be at least 1");
        }
        if self.kstep_max_batches == Some(0) {
            return input_err("kstep_max_batches must be at least 1");
        }
        if !(self.rho > 0.0) {
            return input_err("rho must be positive");
        }
        if !(self.r >= 3.0) {
            return input_err("r must be at least 3");
        }
        Ok(())
    }
}

/// Solver variables for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AulmLayerState {
    pub layer: usize,
    pub name: String,
    pub k: Matrix,
    pub f: Matrix,
    pub y: Matrix,
    pub f_hat: Matrix,
    pub y_hat: Matrix,
    pub f_prev: Matrix,
    pub y_prev: Matrix,
    pub lambda: f32,
    pub rho: f32,
    pub r: f32,
    pub iter: usize,
    /// The most recent overrelaxation factor.
    pub gamma: f32,
}

impl AulmLayerState {
    pub fn primal_residual(&self) -> f32 {
        frob_diff(&self.k, &self.f)
    }

    /// `ρ‖F − F_prev‖_F`.
    pub fn dual_residual(&self) -> f32 {
        self.rho * frob_diff(&self.f, &self.f_prev)
    }

    pub fn zero_rows(&self) -> usize {
        row_support(&self.f).iter().filter(|&&s| !s).count()
    }

    /// `T₁ = F̂ − Ŷ/ρ`.
    pub fn t1(&self) -> Matrix {
        let inv = 1.0 / self.rho;
        self.f_hat.zip_with(&self.y_hat, |f, y| f - inv * y).expect("same shape")
    }

    /// `T₂ = K + Ŷ/ρ`.
    pub fn t2(&self) -> Matrix {
        let inv = 1.0 / self.rho;
        self.k.zip_with(&self.y_hat, |k, y| k + inv * y).expect("same shape")
    }

    /// `λ·g(F) + ⟨Y, K − F⟩ + (ρ/2)‖K − F‖²`, i.e. the augmented
    /// Lagrangian without the data loss.
    pub fn coupling_terms(&self, kind: RegularizerKind) -> f32 {
        let mut inner = 0.0f64;
        let mut sq = 0.0f64;
        for ((&k, &f), &y) in self.k.data().iter().zip(self.f.data()).zip(self.y.data()) {
            let d = (k - f) as f64;
            inner += y as f64 * d;
            sq += d * d;
        }
        (self.lambda as f64 * kind.penalty(&self.f) as f64 + inner + 0.5 * self.rho as f64 * sq) as f32
    }
}

fn frob_diff(a: &Matrix, b: &Matrix) -> f32 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        .sqrt() as f32
}

/// The data loss `L_D` as seen by the K-step.
pub trait DataTerm {
    /// Index batches for one pass.
    fn schedule(&self, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>>;

    /// Loss and the selected parameter gradients on one batch. May update
    /// non-trainable state such as batch-norm running statistics.
    fn loss_and_grads(&self, net: &mut Network, batch: &[usize], select: ParamSelect) -> Result<(f32, Grads)>;

    /// Loss on a fixed probe batch, used for the Lagrangian trace.
    fn probe_loss(&self, net: &Network) -> Result<f32>;
}

const PROBE_SIZE: usize = 256;

impl DataTerm for Dataset {
    fn schedule(&self, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
        self.batches(batch_size, Some(rng))
    }

    fn loss_and_grads(&self, net: &mut Network, batch: &[usize], select: ParamSelect) -> Result<(f32, Grads)> {
        let (x, y) = self.batch(batch)?;
        let (logits, acts) = net.forward(&x, Mode::Train)?;
        let (loss, dlogits) = softmax_xent(&logits, &y)?;
        let (grads, _) = net.backward(&acts, &dlogits, select, false)?;
        net.update_running_stats(&acts);
        Ok((loss, grads))
    }

    fn probe_loss(&self, net: &Network) -> Result<f32> {
        let idx: Vec<usize> = (0..self.len().min(PROBE_SIZE)).collect();
        let (x, y) = self.batch(&idx)?;
        Ok(softmax_xent(&net.predict(&x)?, &y)?.0)
    }
}

/// `L_D ≡ 0`: each pass is `steps` empty batches.
#[derive(Clone, Copy, Debug)]
pub struct ZeroLoss {
    pub steps: usize,
}

impl DataTerm for ZeroLoss {
    fn schedule(&self, _: usize, _: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
        vec![Vec::new(); self.steps]
    }

    fn loss_and_grads(&self, net: &mut Network, _: &[usize], _: ParamSelect) -> Result<(f32, Grads)> {
        Ok((0.0, Grads::zeros_like(net)))
    }

    fn probe_loss(&self, _: &Network) -> Result<f32> {
        Ok(0.0)
    }
}

/// `Ŷ = Y = 0`, `F̂ = F = K`.
pub fn init_state(net: &Network, layer: &str, lambda: f32, cfg: &AulmConfig) -> Result<AulmLayerState> {
    let idx = net.layer_index(layer)?;
    if !net.spec().layers[idx].kind.has_filter_rows() {
        return input_err(format!("layer {layer:?} is not a conv or fc layer"));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return input_err("lambda must be nonnegative");
    }
    let k = net.filter_matrix(idx)?.clone();
    let zeros = Matrix::zeros(k.rows(), k.cols());
    Ok(AulmLayerState {
        layer: idx,
        name: layer.to_string(),
        f: k.clone(),
        f_hat: k.clone(),
        f_prev: k.clone(),
        k,
        y: zeros.clone(),
        y_hat: zeros.clone(),
        y_prev: zeros,
        lambda,
        rho: cfg.rho,
        r: cfg.r,
        iter: 0,
        gamma: 0.0,
    })
}

/// Momentum buffers, shuffling and the pass counter shared by the K-steps of
/// one solve.
pub struct KStepDriver {
    sgd: Sgd,
    rng: ChaCha8Rng,
    passes: usize,
    /// Mini-batches processed, for the per-epoch learning-rate schedule.
    steps: usize,
}

impl KStepDriver {
    pub fn new(net: &Network, seed: u64) -> Self {
        Self {
            sgd: Sgd::new(net),
            rng: ChaCha8Rng::seed_from_u64(seed),
            passes: 0,
            steps: 0,
        }
    }

    pub fn passes(&self) -> usize {
        self.passes
    }

    /// Draws the batches of one (possibly capped) pass and the learning rate
    /// for it. The schedule advances once per full pass worth of batches.
    fn next_pass(&mut self, data: &dyn DataTerm, cfg: &AulmConfig) -> (Vec<Vec<usize>>, f32) {
        let mut batches = data.schedule(cfg.sgd.batch_size, &mut self.rng);
        let epoch = self.steps / batches.len().max(1);
        if let Some(cap) = cfg.kstep_max_batches {
            batches.truncate(cap);
        }
        self.steps += batches.len();
        self.passes += 1;
        (batches, cfg.sgd.lr_at(epoch))
    }
}

/// Runs the configured SGD passes on `L_D + Σ (ρ/2)‖Kˡ − T₁ˡ‖²` over the
/// layers in `states`, then refreshes each `state.k`. Returns the mean data
/// loss of the last pass.
pub fn k_step(
    states: &mut [AulmLayerState],
    net: &mut Network,
    data: &dyn DataTerm,
    cfg: &AulmConfig,
    driver: &mut KStepDriver,
) -> Result<f32> {
    // ρ(K − T₁) = ρ(K − F̂) + Ŷ, which stays finite at ρ = 0.
    let targets: Vec<(usize, &Matrix, &Matrix, f32)> =
        states.iter().map(|s| (s.layer, &s.f_hat, &s.y_hat, s.rho)).collect();
    let select = match (cfg.train_other_layers, &*states) {
        (false, [single]) => ParamSelect::Only(single.layer),
        _ => ParamSelect::All,
    };
    let mut mean_loss = 0.0;
    for _ in 0..cfg.sgd_epochs_per_kstep {
        let (batches, lr) = driver.next_pass(data, cfg);
        let mut sum = 0.0f64;
        for batch in &batches {
            let (loss, mut grads) = data.loss_and_grads(net, batch, select)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("K-step loss became {loss}")));
            }
            sum += loss as f64;
            if !cfg.train_other_layers {
                for (l, g) in grads.layers.iter_mut().enumerate() {
                    if !targets.iter().any(|t| t.0 == l) {
                        *g = None;
                    }
                }
            }
            let mut extra = Grads { layers: vec![None; grads.layers.len()] };
            for &(layer, f_hat, y_hat, rho) in &targets {
                let k = net.filter_matrix(layer)?;
                let weight = k
                    .data()
                    .iter()
                    .zip(f_hat.data())
                    .zip(y_hat.data())
                    .map(|((&k, &f), &y)| rho * (k - f) + y)
                    .collect();
                let Some(g) = &grads.layers[layer] else {
                    return Err(Error::Shape(format!("data term gave no gradient for layer {layer}")));
                };
                extra.layers[layer] = Some(ParamGrads {
                    weight,
                    bias: vec![0.0; g.bias.len()],
                });
            }
            driver.sgd.step(net, &grads, &cfg.sgd, lr, Some(&extra))?;
        }
        mean_loss = if batches.is_empty() { 0.0 } else { (sum / batches.len() as f64) as f32 };
    }
    for s in states.iter_mut() {
        s.k = net.filter_matrix(s.layer)?.clone();
    }
    Ok(mean_loss)
}

/// `F = prox(K + Ŷ/ρ)`; the old `F` moves to `f_prev`.
pub fn f_step(state: &mut AulmLayerState, kind: RegularizerKind) -> Result<()> {
    let input = ProxInput::new(state.t2(), state.lambda, state.rho)?;
    let f = prox(kind, &input);
    state.f_prev = std::mem::replace(&mut state.f, f);
    Ok(())
}

/// `Y = Ŷ + ρ(K − F)`; the old `Y` moves to `y_prev`.
pub fn y_step(state: &mut AulmLayerState) {
    let rho = state.rho;
    let diff = state.k.sub(&state.f).expect("same shape");
    let y = state.y_hat.zip_with(&diff, |yh, d| yh + rho * d).expect("same shape");
    state.y_prev = std::mem::replace(&mut state.y, y);
}

/// `γ = k/(k + r)` for the iteration number `k ≥ 1`.
pub fn gamma(k: usize, r: f32) -> f32 {
    k as f32 / (k as f32 + r)
}

/// Advances the iteration counter and forms `F̂`, `Ŷ`.
pub fn overrelax(state: &mut AulmLayerState, force_zero_gamma: bool) {
    state.iter += 1;
    let g = if force_zero_gamma { 0.0 } else { gamma(state.iter, state.r) };
    state.gamma = g;
    if g == 0.0 {
        state.y_hat = state.y.clone();
        state.f_hat = state.f.clone();
        return;
    }
    state.y_hat = state.y.zip_with(&state.y_prev, |y, p| y + g * (y - p)).expect("same shape");
    state.f_hat = state.f.zip_with(&state.f_prev, |f, p| f + g * (f - p)).expect("same shape");
}

/// Either residual test passes, or the iteration cap is reached.
pub fn converged(state: &AulmLayerState, cfg: &AulmConfig) -> bool {
    residuals_small(state, cfg.epsilon) || state.iter >= cfg.max_outer_iters
}

pub fn residuals_small(state: &AulmLayerState, epsilon: f32) -> bool {
    let scale = (state.k.data().len().max(1) as f32).sqrt();
    state.primal_residual() / scale <= epsilon || frob_diff(&state.f, &state.f_prev) / scale <= epsilon
}

/// One line of the solver trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub layer: String,
    pub iteration: usize,
    pub gamma: f32,
    pub primal_residual: f32,
    pub dual_residual: f32,
    pub zero_rows: usize,
    pub train_loss: f32,
    pub lagrangian: f32,
}

#[derive(Clone, Debug)]
pub struct LayerSolve {
    pub f: Matrix,
    pub mask: PruneMask,
    pub trace: Vec<IterationRecord>,
    /// Whether a residual test passed before the iteration cap.
    pub converged: bool,
    pub iterations: usize,
    /// The mask would have emptied the layer and one filter was restored.
    pub floor_applied: bool,
}

/// Iterates the four steps jointly over several layers until every layer
/// passes a residual test or the cap is hit. The trace holds one record per
/// layer per iteration.
pub fn solve_layers(
    net: &mut Network,
    targets: &[(&str, f32)],
    kind: RegularizerKind,
    cfg: &AulmConfig,
    data: &dyn DataTerm,
    seed: u64,
) -> Result<(Vec<AulmLayerState>, Vec<IterationRecord>, bool)> {
    cfg.validate()?;
    if targets.is_empty() {
        return input_err("no layers to solve");
    }
    let mut states = targets
        .iter()
        .map(|&(name, lambda)| init_state(net, name, lambda, cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut driver = KStepDriver::new(net, seed);
    let mut trace = Vec::new();
    loop {
        let loss = k_step(&mut states, net, data, cfg, &mut driver)?;
        let probe = data.probe_loss(net)?;
        for s in states.iter_mut() {
            f_step(s, kind)?;
            y_step(s);
            overrelax(s, cfg.force_zero_gamma);
        }
        let coupling: f32 = states.iter().map(|s| s.coupling_terms(kind)).sum();
        for s in &states {
            trace.push(IterationRecord {
                layer: s.name.clone(),
                iteration: s.iter,
                gamma: s.gamma,
                primal_residual: s.primal_residual(),
                dual_residual: s.dual_residual(),
                zero_rows: s.zero_rows(),
                train_loss: loss,
                lagrangian: probe + coupling,
            });
        }
        let small = states.iter().all(|s| residuals_small(s, cfg.epsilon));
        if small {
            return Ok((states, trace, true));
        }
        if states[0].iter >= cfg.max_outer_iters {
            return Ok((states, trace, false));
        }
    }
}

/// Solves one layer from the current (pre-trained) weights and reads the
/// keep mask off the support of `F`.
pub fn solve_layer(
    net: &mut Network,
    layer: &str,
    lambda: f32,
    kind: RegularizerKind,
    cfg: &AulmConfig,
    data: &dyn DataTerm,
    seed: u64,
) -> Result<LayerSolve> {
    let (mut states, trace, converged) = solve_layers(net, &[(layer, lambda)], kind, cfg, data, seed)?;
    let state = states.pop().expect("one state");
    let mut keep = row_support(&state.f);
    let floor_applied = !keep.iter().any(|&k| k);
    if floor_applied {
        let norms = row_l2_norms(&state.k);
        keep[prune::argmax_first(&norms)] = true;
    }
    Ok(LayerSolve {
        mask: PruneMask::new(layer, keep, MaskOrigin::from(kind)),
        iterations: state.iter,
        f: state.f,
        trace,
        converged,
        floor_applied,
    })
}

#[derive(Clone, Debug)]
pub struct NetworkSolve {
    pub net: Network,
    pub masks: Vec<PruneMask>,
    pub layers: Vec<LayerSolve>,
}

/// Solves, prunes and compacts each prunable layer in order, so later
/// layers are solved on the already compacted network. `lambdas` pairs up
/// with [`prune::prunable_layers`].
pub fn solve_network(
    net: &Network,
    lambdas: &[f32],
    kind: RegularizerKind,
    cfg: &AulmConfig,
    data: &dyn DataTerm,
    seed: u64,
) -> Result<NetworkSolve> {
    let names = prune::prunable_layers(net);
    if names.len() != lambdas.len() {
        return input_err(format!(
            "{} lambdas for {} prunable layers ({})",
            lambdas.len(),
            names.len(),
            names.join(", ")
        ));
    }
    let mut net = net.clone();
    let mut masks = Vec::with_capacity(names.len());
    let mut layers = Vec::with_capacity(names.len());
    for (i, (name, &lambda)) in names.iter().zip(lambdas).enumerate() {
        let solve = solve_layer(&mut net, name, lambda, kind, cfg, data, seed.wrapping_add(i as u64))?;
        net = prune::compact(&net, &solve.mask)?;
        if cfg.layer_update_batches > 0 && i + 1 < names.len() {
            update_all_layers(&mut net, data, cfg, seed.wrapping_add(i as u64))?;
        }
        masks.push(solve.mask.clone());
        layers.push(solve);
    }
    Ok(NetworkSolve { net, masks, layers })
}

/// Plain SGD on every layer for `cfg.layer_update_batches` mini-batches at
/// the solver's base learning rate.
fn update_all_layers(net: &mut Network, data: &dyn DataTerm, cfg: &AulmConfig, seed: u64) -> Result<()> {
    let mut sgd = Sgd::new(net);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut left = cfg.layer_update_batches;
    while left > 0 {
        let batches = data.schedule(cfg.sgd.batch_size, &mut rng);
        if batches.is_empty() {
            return input_err("no training batches");
        }
        for batch in batches.iter().take(left) {
            let (_, grads) = data.loss_and_grads(net, batch, ParamSelect::All)?;
            sgd.step(net, &grads, &cfg.sgd, cfg.sgd.lr_at(0), None)?;
            left -= 1;
        }
    }
    Ok(())
}

/// Runs [`solve_network`] once per λ group, each from the same starting
/// weights.
pub fn sweep_network(
    net: &Network,
    groups: &[Vec<f32>],
    kind: RegularizerKind,
    cfg: &AulmConfig,
    data: &dyn DataTerm,
    seed: u64,
) -> Result<Vec<NetworkSolve>> {
    groups.iter().map(|g| solve_network(net, g, kind, cfg, data, seed)).collect()
}

/// Zero-row count per pass of the direct subgradient baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubgradientRecord {
    pub epoch: usize,
    pub zero_rows: usize,
    pub train_loss: f32,
}

/// Direct SGD on `L_D + Σ λˡ‖Kˡ‖₂,₁`, using `λ·Kᵢ/‖Kᵢ‖` as the penalty
/// subgradient (zero on zero rows). A row counts as zero once its norm is at
/// most `zero_threshold`. Pass sizes and the learning-rate schedule follow
/// `cfg`, so `epochs` passes match `epochs` AULM iterations.
pub fn subgradient_l21(
    net: &mut Network,
    targets: &[(&str, f32)],
    cfg: &AulmConfig,
    data: &dyn DataTerm,
    epochs: usize,
    seed: u64,
    zero_threshold: f32,
) -> Result<Vec<SubgradientRecord>> {
    cfg.validate()?;
    let layers = targets
        .iter()
        .map(|&(name, lambda)| Ok((net.layer_index(name)?, lambda)))
        .collect::<Result<Vec<_>>>()?;
    for &(l, _) in &layers {
        net.filter_matrix(l)?;
    }
    let mut driver = KStepDriver::new(net, seed);
    let mut out = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let (batches, lr) = driver.next_pass(data, cfg);
        let mut sum = 0.0f64;
        for batch in &batches {
            let (loss, mut grads) = data.loss_and_grads(net, batch, ParamSelect::All)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("training loss became {loss}")));
            }
            sum += loss as f64;
            if !cfg.train_other_layers {
                for (l, g) in grads.layers.iter_mut().enumerate() {
                    if !layers.iter().any(|t| t.0 == l) {
                        *g = None;
                    }
                }
            }
            for &(l, lambda) in &layers {
                let k = net.filter_matrix(l)?;
                let norms = row_l2_norms(k);
                let g = grads.layers[l].as_mut().expect("target layer has gradients");
                let cols = k.cols();
                for (i, &n) in norms.iter().enumerate() {
                    if n > 0.0 {
                        for (gw, &w) in g.weight[i * cols..(i + 1) * cols].iter_mut().zip(k.row(i)) {
                            *gw += lambda * w / n;
                        }
                    }
                }
            }
            driver.sgd.step(net, &grads, &cfg.sgd, lr, None)?;
        }
        let zero_rows = layers
            .iter()
            .map(|&(l, _)| {
                let k = net.filter_matrix(l).expect("checked above");
                row_l2_norms(k).iter().filter(|&&n| n <= zero_threshold).count()
            })
            .sum();
        out.push(SubgradientRecord {
            epoch: epoch + 1,
            zero_rows,
            train_loss: if batches.is_empty() { 0.0 } else { (sum / batches.len() as f64) as f32 },
        });
    }
    Ok(out)
}
