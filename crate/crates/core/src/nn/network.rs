//! Parameter state plus the forward and backward passes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use super::spec::{LayerKind, NetworkSpec, ResidualGroup, Shape3};
use crate::error::{input_err, shape_err, Result};
use crate::tensor::{col2im_add, gemm_slices, im2col_into, ConvGeometry, FilterBank, Matrix, Scalar, Tensor};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormParams<T = f32> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Scalar> BatchNormParams<T> {
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
        }
    }

    pub fn select(&self, keep: &[bool]) -> Self {
        let pick = |v: &[T]| -> Vec<T> {
            v.iter()
                .zip(keep)
                .filter(|(_, &k)| k)
                .map(|(&x, _)| x)
                .collect()
        };
        Self {
            gamma: pick(&self.gamma),
            beta: pick(&self.beta),
            running_mean: pick(&self.running_mean),
            running_var: pick(&self.running_var),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LayerParams<T = f32> {
    None,
    /// Conv filters, also used for a residual shortcut projection.
    Conv { weight: FilterBank<T>, bias: Vec<T> },
    /// `outputs × inputs` weights.
    Fc { weight: Matrix<T>, bias: Vec<T> },
    BatchNorm(BatchNormParams<T>),
}

impl<T: Scalar> LayerParams<T> {
    pub fn len(&self) -> usize {
        match self {
            LayerParams::None => 0,
            LayerParams::Conv { weight, bias } => weight.matrix().data().len() + bias.len(),
            LayerParams::Fc { weight, bias } => weight.data().len() + bias.len(),
            LayerParams::BatchNorm(bn) => bn.gamma.len() + bn.beta.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The trainable tensors as `(weight, bias)` slices. For batch-norm
    /// these are `(gamma, beta)`.
    pub fn trainable(&self) -> Option<(&[T], &[T])> {
        match self {
            LayerParams::None => None,
            LayerParams::Conv { weight, bias } => Some((weight.matrix().data(), bias)),
            LayerParams::Fc { weight, bias } => Some((weight.data(), bias)),
            LayerParams::BatchNorm(bn) => Some((&bn.gamma, &bn.beta)),
        }
    }

    pub fn trainable_mut(&mut self) -> Option<(&mut [T], &mut [T])> {
        match self {
            LayerParams::None => None,
            LayerParams::Conv { weight, bias } => Some((weight.matrix_mut().data_mut(), bias)),
            LayerParams::Fc { weight, bias } => Some((weight.data_mut(), bias)),
            LayerParams::BatchNorm(bn) => Some((&mut bn.gamma, &mut bn.beta)),
        }
    }

    /// Whether weight decay applies to the first trainable tensor.
    pub fn decays(&self) -> bool {
        matches!(self, LayerParams::Conv { .. } | LayerParams::Fc { .. })
    }

    fn cast<U: Scalar>(&self) -> LayerParams<U> {
        let c = |v: &Vec<T>| v.iter().map(|&x| U::from(x).unwrap()).collect::<Vec<U>>();
        match self {
            LayerParams::None => LayerParams::None,
            LayerParams::Conv { weight, bias } => LayerParams::Conv {
                weight: weight.cast(),
                bias: c(bias),
            },
            LayerParams::Fc { weight, bias } => LayerParams::Fc {
                weight: weight.cast(),
                bias: c(bias),
            },
            LayerParams::BatchNorm(bn) => LayerParams::BatchNorm(BatchNormParams {
                gamma: c(&bn.gamma),
                beta: c(&bn.beta),
                running_mean: c(&bn.running_mean),
                running_var: c(&bn.running_var),
            }),
        }
    }
}

/// Gradients of one layer's trainable tensors, same layout as
/// [`LayerParams::trainable`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads<T = f32> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// Per-layer gradients; `None` for parameter-free or skipped layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Grads<T = f32> {
    pub layers: Vec<Option<ParamGrads<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn zeros_like(net: &Network<T>) -> Self {
        Self {
            layers: net
                .params
                .iter()
                .map(|p| {
                    p.trainable().map(|(w, b)| ParamGrads {
                        weight: vec![T::zero(); w.len()],
                        bias: vec![T::zero(); b.len()],
                    })
                })
                .collect(),
        }
    }

    fn empty(n: usize) -> Self {
        Self {
            layers: vec![None; n],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics for batch-norm.
    Train,
    /// Running statistics for batch-norm.
    Eval,
}

/// Which parameter gradients a backward pass should produce.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamSelect {
    All,
    /// Only this layer; propagation stops once it is reached.
    Only(usize),
    None,
}

enum LayerCache<T> {
    None,
    Conv { cols: Vec<T>, geom: ConvGeometry },
    Pool { argmax: Vec<u32>, input_len: usize },
    Fc { input: Vec<T> },
    Relu { output: Vec<T> },
    BatchNorm { xhat: Vec<T>, inv_std: Vec<T>, mean: Vec<T>, var: Vec<T> },
    Gap { hw: usize },
    Projection { cols: Vec<T>, geom: ConvGeometry },
}

/// What the backward pass needs from a forward pass.
pub struct Activations<T = f32> {
    batch: usize,
    mode: Mode,
    caches: Vec<LayerCache<T>>,
}

impl<T: Scalar> Activations<T> {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Post-ReLU output of layer `i`, if `i` is a ReLU layer.
    pub fn relu_output(&self, i: usize) -> Option<&[T]> {
        match self.caches.get(i)? {
            LayerCache::Relu { output } => Some(output),
            _ => None,
        }
    }
}

/// Weight initialization scheme. Biases start at zero either way.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// Normal, `std = sqrt(2 / fan_in)`.
    #[default]
    Kaiming,
    /// Normal, `std = sqrt(1 / fan_in)`, the variance of Caffe's `xavier` filler.
    Lecun,
    /// Uniform on `±sqrt(6 / (fan_in + fan_out))`, where a conv filter's
    /// fan-out is `filters * kernel²`.
    Glorot,
}

/// A network description together with its parameter state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network<T = f32> {
    spec: NetworkSpec,
    params: Vec<LayerParams<T>>,
    residual_groups: Vec<ResidualGroup>,
}

impl<T: Scalar> Network<T> {
    /// Kaiming-normal weights (`std = sqrt(2 / fan_in)`), zero biases,
    /// identity batch-norm.
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        Self::init_scaled(spec, seed, Init::Kaiming)
    }

    pub fn init_scaled(spec: NetworkSpec, seed: u64, init: Init) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |rows: usize, cols: usize, fan_out: usize| -> Matrix<T> {
            let data: Vec<T> = match init {
                Init::Kaiming | Init::Lecun => {
                    let gain = if init == Init::Kaiming { 2.0 } else { 1.0 };
                    let normal = Normal::new(0.0, (gain / cols as f64).sqrt()).expect("valid std");
                    (0..rows * cols).map(|_| T::lit(normal.sample(&mut rng))).collect()
                }
                Init::Glorot => {
                    let a = (6.0 / (cols + fan_out) as f64).sqrt();
                    let uniform = Uniform::new_inclusive(-a, a).expect("valid range");
                    (0..rows * cols).map(|_| T::lit(uniform.sample(&mut rng))).collect()
                }
            };
            Matrix::from_vec(rows, cols, data).expect("sized")
        };
        let mut params = Vec::with_capacity(spec.layers.len());
        for (i, layer) in spec.layers.iter().enumerate() {
            let [c, h, w] = spec.input_shape(&shapes, i);
            params.push(match layer.kind {
                LayerKind::Conv { filters, kernel, .. } => LayerParams::Conv {
                    weight: FilterBank::from_matrix(c, kernel, draw(filters, c * kernel * kernel, filters * kernel * kernel))?,
                    bias: vec![T::zero(); filters],
                },
                LayerKind::ResidualBegin { projection: Some(p) } => LayerParams::Conv {
                    weight: FilterBank::from_matrix(c, 1, draw(p, c, p))?,
                    bias: vec![T::zero(); p],
                },
                LayerKind::Fc { outputs } => LayerParams::Fc {
                    weight: draw(outputs, c * h * w, outputs),
                    bias: vec![T::zero(); outputs],
                },
                LayerKind::BatchNorm => LayerParams::BatchNorm(BatchNormParams::identity(c)),
                _ => LayerParams::None,
            });
        }
        Self::from_parts(spec, params)
    }

    /// Assembles a network from explicit parameters, checking every shape.
    pub fn from_parts(spec: NetworkSpec, params: Vec<LayerParams<T>>) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.layers.len() {
            return shape_err(format!(
                "{} parameter entries for {} layers",
                params.len(),
                spec.layers.len()
            ));
        }
        let shapes = spec.shapes()?;
        for (i, (layer, p)) in spec.layers.iter().zip(&params).enumerate() {
            let [c, h, w] = spec.input_shape(&shapes, i);
            let ok = match (&layer.kind, p) {
                (LayerKind::Conv { filters, kernel, .. }, LayerParams::Conv { weight, bias }) => {
                    weight.out_channels() == *filters
                        && weight.in_channels() == c
                        && weight.kernel() == *kernel
                        && bias.len() == *filters
                }
                (LayerKind::ResidualBegin { projection: Some(p) }, LayerParams::Conv { weight, bias }) => {
                    weight.out_channels() == *p
                        && weight.in_channels() == c
                        && weight.kernel() == 1
                        && bias.len() == *p
                }
                (LayerKind::Fc { outputs }, LayerParams::Fc { weight, bias }) => {
                    weight.shape() == (*outputs, c * h * w) && bias.len() == *outputs
                }
                (LayerKind::BatchNorm, LayerParams::BatchNorm(bn)) => {
                    bn.gamma.len() == c
                        && bn.beta.len() == c
                        && bn.running_mean.len() == c
                        && bn.running_var.len() == c
                        && bn.running_var.iter().all(|&v| v > T::zero())
                }
                (kind, LayerParams::None) => !kind.is_parameterized(),
                _ => false,
            };
            if !ok {
                return shape_err(format!(
                    "parameters of layer `{}` do not match its spec",
                    layer.name
                ));
            }
        }
        let residual_groups = spec.residual_groups()?;
        Ok(Self {
            spec,
            params,
            residual_groups,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[LayerParams<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [LayerParams<T>] {
        &mut self.params
    }

    pub fn residual_groups(&self) -> &[ResidualGroup] {
        &self.residual_groups
    }

    pub fn into_parts(self) -> (NetworkSpec, Vec<LayerParams<T>>) {
        (self.spec, self.params)
    }

    pub fn layer_index(&self, name: &str) -> Result<usize> {
        self.spec.index_of(name)
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes()
    }

    /// Matrix view `K^l` of a conv or fc layer: one row per filter/node.
    pub fn filter_matrix(&self, layer: usize) -> Result<&Matrix<T>> {
        match self.params.get(layer) {
            Some(LayerParams::Conv { weight, .. })
                if matches!(self.spec.layers[layer].kind, LayerKind::Conv { .. }) =>
            {
                Ok(weight.matrix())
            }
            Some(LayerParams::Fc { weight, .. }) => Ok(weight),
            _ => input_err(format!("layer {layer} has no filter matrix")),
        }
    }

    pub fn filter_matrix_mut(&mut self, layer: usize) -> Result<&mut Matrix<T>> {
        let is_conv = matches!(self.spec.layers.get(layer).map(|l| &l.kind), Some(LayerKind::Conv { .. }));
        match self.params.get_mut(layer) {
            Some(LayerParams::Conv { weight, .. }) if is_conv => Ok(weight.matrix_mut()),
            Some(LayerParams::Fc { weight, .. }) => Ok(weight),
            _ => input_err(format!("layer {layer} has no filter matrix")),
        }
    }

    pub fn bias_mut(&mut self, layer: usize) -> Option<&mut Vec<T>> {
        match self.params.get_mut(layer)? {
            LayerParams::Conv { bias, .. } | LayerParams::Fc { bias, .. } => Some(bias),
            _ => None,
        }
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            spec: self.spec.clone(),
            params: self.params.iter().map(LayerParams::cast).collect(),
            residual_groups: self.residual_groups.clone(),
        }
    }

    fn check_batch(&self, batch: &Tensor<T>) -> Result<usize> {
        match batch.shape() {
            [n, c, h, w] if [*c, *h, *w] == self.spec.input => Ok(*n),
            s => shape_err(format!(
                "batch shape {s:?} does not match network input N×{:?}",
                self.spec.input
            )),
        }
    }

    /// Inference-mode logits.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Matrix<T>> {
        let (out, acts) = self.run(batch, Mode::Eval, false, None)?;
        Matrix::from_vec(acts.batch, self.num_classes(), out)
    }

    /// Logits plus everything the backward pass needs.
    pub fn forward(&self, batch: &Tensor<T>, mode: Mode) -> Result<(Matrix<T>, Activations<T>)> {
        let (out, acts) = self.run(batch, mode, true, None)?;
        Ok((Matrix::from_vec(acts.batch, self.num_classes(), out)?, acts))
    }

    /// Output of layer `upto` (inclusive) in inference mode, as `N×C×H×W`.
    pub fn forward_until(&self, batch: &Tensor<T>, upto: usize) -> Result<Tensor<T>> {
        if upto >= self.spec.layers.len() {
            return input_err(format!("layer index {upto} out of range"));
        }
        let (out, acts) = self.run(batch, Mode::Eval, false, Some(upto))?;
        let [c, h, w] = self.spec.shapes()?[upto];
        Tensor::from_vec(&[acts.batch, c, h, w], out)
    }

    fn run(
        &self,
        batch: &Tensor<T>,
        mode: Mode,
        keep: bool,
        stop: Option<usize>,
    ) -> Result<(Vec<T>, Activations<T>)> {
        let n = self.check_batch(batch)?;
        let shapes = self.spec.shapes()?;
        let mut x: Vec<T> = batch.data().to_vec();
        let mut shortcuts: Vec<Vec<T>> = Vec::new();
        let mut caches = Vec::with_capacity(self.spec.layers.len());

        for (i, layer) in self.spec.layers.iter().enumerate() {
            let in_shape = self.spec.input_shape(&shapes, i);
            let out_shape = shapes[i];
            let (y, cache) = match (&layer.kind, &self.params[i]) {
                (LayerKind::Conv { kernel, pad, .. }, LayerParams::Conv { weight, bias }) => {
                    let geom = ConvGeometry::new(in_shape[0], in_shape[1], in_shape[2], *kernel, *pad)?;
                    let (y, cols) = conv_forward(&x, n, &geom, weight, bias, keep);
                    (y, if keep { LayerCache::Conv { cols, geom } } else { LayerCache::None })
                }
                (LayerKind::MaxPool { size }, _) => {
                    let (y, argmax) = maxpool_forward(&x, n, in_shape, *size, keep);
                    let len = x.len();
                    (y, if keep { LayerCache::Pool { argmax, input_len: len } } else { LayerCache::None })
                }
                (LayerKind::Fc { outputs }, LayerParams::Fc { weight, bias }) => {
                    let fan_in = weight.cols();
                    let mut y = vec![T::zero(); n * outputs];
                    for r in 0..n {
                        y[r * outputs..(r + 1) * outputs].copy_from_slice(bias);
                    }
                    gemm_slices(n, fan_in, *outputs, T::one(), &x, false, weight.data(), true, T::one(), &mut y);
                    let cache = if keep { LayerCache::Fc { input: std::mem::take(&mut x) } } else { LayerCache::None };
                    (y, cache)
                }
                (LayerKind::Relu, _) => {
                    let mut y = std::mem::take(&mut x);
                    y.iter_mut().for_each(|v| *v = v.max(T::zero()));
                    let cache = if keep {
                        LayerCache::Relu { output: y.clone() }
                    } else {
                        LayerCache::None
                    };
                    (y, cache)
                }
                (LayerKind::BatchNorm, LayerParams::BatchNorm(bn)) => {
                    batchnorm_forward(&x, n, in_shape, bn, mode, keep)
                }
                (LayerKind::Gap, _) => {
                    let hw = in_shape[1] * in_shape[2];
                    let inv = T::one() / T::from(hw).unwrap();
                    let y: Vec<T> = x.chunks(hw).map(|p| p.iter().copied().sum::<T>() * inv).collect();
                    (y, LayerCache::Gap { hw })
                }
                (LayerKind::ResidualBegin { projection }, p) => {
                    match (projection, p) {
                        (Some(_), LayerParams::Conv { weight, bias }) => {
                            let geom = ConvGeometry::new(in_shape[0], in_shape[1], in_shape[2], 1, 0)?;
                            let (s, cols) = conv_forward(&x, n, &geom, weight, bias, keep);
                            shortcuts.push(s);
                            let y = std::mem::take(&mut x);
                            (y, if keep { LayerCache::Projection { cols, geom } } else { LayerCache::None })
                        }
                        _ => {
                            shortcuts.push(x.clone());
                            (std::mem::take(&mut x), LayerCache::None)
                        }
                    }
                }
                (LayerKind::ResidualAdd, _) => {
                    let s = shortcuts.pop().expect("validated residual pairing");
                    let mut y = std::mem::take(&mut x);
                    y.iter_mut().zip(&s).for_each(|(a, &b)| *a = *a + b);
                    (y, LayerCache::None)
                }
                (LayerKind::SoftmaxXent, _) => (std::mem::take(&mut x), LayerCache::None),
                (kind, _) => return shape_err(format!("layer {i} ({kind:?}) lacks parameters")),
            };
            debug_assert_eq!(y.len(), n * out_shape.iter().product::<usize>());
            x = y;
            caches.push(cache);
            if stop == Some(i) {
                break;
            }
        }
        Ok((x, Activations { batch: n, mode, caches }))
    }

    /// Backpropagates `dlogits` through the network.
    ///
    /// Returns the selected parameter gradients and, if requested, the
    /// gradient with respect to the input batch.
    pub fn backward(
        &self,
        acts: &Activations<T>,
        dlogits: &Matrix<T>,
        select: ParamSelect,
        want_input_grad: bool,
    ) -> Result<(Grads<T>, Option<Tensor<T>>)> {
        let n = acts.batch;
        if dlogits.shape() != (n, self.num_classes()) {
            return shape_err("dlogits shape does not match the forward batch");
        }
        let shapes = self.spec.shapes()?;
        let mut grads = Grads::empty(self.params.len());
        let mut g: Vec<T> = dlogits.data().to_vec();
        let mut short_grads: Vec<Vec<T>> = Vec::new();
        let floor = match (select, want_input_grad) {
            (_, true) => 0,
            (ParamSelect::All, false) => self.first_trainable().unwrap_or(0),
            (ParamSelect::Only(i), false) => i,
            (ParamSelect::None, false) => return Ok((grads, None)),
        };
        let wants = |i: usize| match select {
            ParamSelect::All => true,
            ParamSelect::Only(j) => i == j,
            ParamSelect::None => false,
        };

        for i in (floor..self.spec.layers.len()).rev() {
            let in_shape = self.spec.input_shape(&shapes, i);
            let need_dx = i > floor || want_input_grad;
            let layer = &self.spec.layers[i];
            g = match (&layer.kind, &self.params[i], &acts.caches[i]) {
                (LayerKind::SoftmaxXent, _, _) => g,
                (LayerKind::Conv { .. }, LayerParams::Conv { weight, .. }, LayerCache::Conv { cols, geom }) => {
                    let (pg, dx) = conv_backward(&g, n, geom, weight, cols, wants(i), need_dx);
                    grads.layers[i] = pg;
                    dx
                }
                (LayerKind::MaxPool { .. }, _, LayerCache::Pool { argmax, input_len }) => {
                    let mut dx = vec![T::zero(); *input_len];
                    for (o, &a) in argmax.iter().enumerate() {
                        dx[a as usize] = dx[a as usize] + g[o];
                    }
                    dx
                }
                (LayerKind::Fc { outputs }, LayerParams::Fc { weight, .. }, LayerCache::Fc { input }) => {
                    let fan_in = weight.cols();
                    if wants(i) {
                        let mut dw = vec![T::zero(); outputs * fan_in];
                        gemm_slices(*outputs, n, fan_in, T::one(), &g, true, input, false, T::zero(), &mut dw);
                        let mut db = vec![T::zero(); *outputs];
                        for row in g.chunks(*outputs) {
                            db.iter_mut().zip(row).for_each(|(b, &v)| *b = *b + v);
                        }
                        grads.layers[i] = Some(ParamGrads { weight: dw, bias: db });
                    }
                    if need_dx {
                        let mut dx = vec![T::zero(); n * fan_in];
                        gemm_slices(n, *outputs, fan_in, T::one(), &g, false, weight.data(), false, T::zero(), &mut dx);
                        dx
                    } else {
                        Vec::new()
                    }
                }
                (LayerKind::Relu, _, LayerCache::Relu { output }) => {
                    g.iter_mut()
                        .zip(output)
                        .for_each(|(d, &y)| if y <= T::zero() { *d = T::zero() });
                    g
                }
                (LayerKind::BatchNorm, LayerParams::BatchNorm(bn), cache) => {
                    let (pg, dx) = batchnorm_backward(&g, n, in_shape, bn, cache, acts.mode)?;
                    if wants(i) {
                        grads.layers[i] = Some(pg);
                    }
                    dx
                }
                (LayerKind::Gap, _, LayerCache::Gap { hw }) => {
                    let inv = T::one() / T::from(*hw).unwrap();
                    g.iter().flat_map(|&v| std::iter::repeat_n(v * inv, *hw)).collect()
                }
                (LayerKind::ResidualAdd, _, _) => {
                    short_grads.push(g.clone());
                    g
                }
                (LayerKind::ResidualBegin { .. }, p, cache) => {
                    let gs = short_grads.pop().expect("validated residual pairing");
                    match (p, cache) {
                        (LayerParams::Conv { weight, .. }, LayerCache::Projection { cols, geom }) => {
                            let (pg, dx) = conv_backward(&gs, n, geom, weight, cols, wants(i), need_dx);
                            grads.layers[i] = pg;
                            if need_dx {
                                g.iter_mut().zip(&dx).for_each(|(a, &b)| *a = *a + b);
                            }
                        }
                        _ => g.iter_mut().zip(&gs).for_each(|(a, &b)| *a = *a + b),
                    }
                    g
                }
                _ => return shape_err(format!("layer `{}` has no cached activations", layer.name)),
            };
        }
        let input_grad = if want_input_grad {
            let [c, h, w] = self.spec.input;
            Some(Tensor::from_vec(&[n, c, h, w], g)?)
        } else {
            None
        };
        Ok((grads, input_grad))
    }

    fn first_trainable(&self) -> Option<usize> {
        self.params.iter().position(|p| p.trainable().is_some())
    }

    /// Folds the batch statistics recorded by a training-mode forward pass
    /// into the batch-norm running averages.
    pub fn update_running_stats(&mut self, acts: &Activations<T>) {
        let m = T::lit(BN_MOMENTUM);
        for (p, cache) in self.params.iter_mut().zip(&acts.caches) {
            if let (LayerParams::BatchNorm(bn), LayerCache::BatchNorm { mean, var, .. }) = (p, cache) {
                for c in 0..bn.gamma.len() {
                    bn.running_mean[c] = m * bn.running_mean[c] + (T::one() - m) * mean[c];
                    bn.running_var[c] = m * bn.running_var[c] + (T::one() - m) * var[c];
                }
            }
        }
    }
}

fn conv_forward<T: Scalar>(
    x: &[T],
    n: usize,
    geom: &ConvGeometry,
    weight: &FilterBank<T>,
    bias: &[T],
    keep_cols: bool,
) -> (Vec<T>, Vec<T>) {
    let (plen, pos, cout) = (geom.patch_len(), geom.positions(), weight.out_channels());
    let in_len = geom.input_len();
    let mut y = vec![T::zero(); n * cout * pos];
    let mut all_cols = if keep_cols { vec![T::zero(); n * plen * pos] } else { Vec::new() };
    let mut scratch = if keep_cols { Vec::new() } else { vec![T::zero(); plen * pos] };
    for s in 0..n {
        let cols: &mut [T] = if keep_cols {
            &mut all_cols[s * plen * pos..(s + 1) * plen * pos]
        } else {
            &mut scratch
        };
        im2col_into(&x[s * in_len..(s + 1) * in_len], geom, cols);
        let out = &mut y[s * cout * pos..(s + 1) * cout * pos];
        for (o, chunk) in out.chunks_mut(pos).enumerate() {
            chunk.fill(bias[o]);
        }
        gemm_slices(cout, plen, pos, T::one(), weight.matrix().data(), false, cols, false, T::one(), out);
    }
    (y, all_cols)
}

fn conv_backward<T: Scalar>(
    g: &[T],
    n: usize,
    geom: &ConvGeometry,
    weight: &FilterBank<T>,
    cols: &[T],
    want_params: bool,
    want_dx: bool,
) -> (Option<ParamGrads<T>>, Vec<T>) {
    let (plen, pos, cout) = (geom.patch_len(), geom.positions(), weight.out_channels());
    let in_len = geom.input_len();
    let mut dw = vec![T::zero(); if want_params { cout * plen } else { 0 }];
    let mut db = vec![T::zero(); if want_params { cout } else { 0 }];
    let mut dx = vec![T::zero(); if want_dx { n * in_len } else { 0 }];
    let mut dcols = vec![T::zero(); if want_dx { plen * pos } else { 0 }];
    for s in 0..n {
        let gs = &g[s * cout * pos..(s + 1) * cout * pos];
        if want_params {
            let cs = &cols[s * plen * pos..(s + 1) * plen * pos];
            gemm_slices(cout, pos, plen, T::one(), gs, false, cs, true, T::one(), &mut dw);
            for (o, row) in gs.chunks(pos).enumerate() {
                db[o] = db[o] + row.iter().copied().sum::<T>();
            }
        }
        if want_dx {
            gemm_slices(plen, cout, pos, T::one(), weight.matrix().data(), true, gs, false, T::zero(), &mut dcols);
            col2im_add(&dcols, geom, &mut dx[s * in_len..(s + 1) * in_len]);
        }
    }
    let pg = want_params.then_some(ParamGrads { weight: dw, bias: db });
    (pg, dx)
}

#[inline(always)]
fn larger<T: Scalar>(a: T, b: T) -> T {
    if b > a {
        b
    } else {
        a
    }
}

fn maxpool_forward<T: Scalar>(x: &[T], n: usize, shape: Shape3, size: usize, keep: bool) -> (Vec<T>, Vec<u32>) {
    let [c, h, w] = shape;
    let (oh, ow) = (h / size, w / size);
    if !keep {
        let mut y = vec![T::zero(); n * c * oh * ow];
        for (src, dst) in x.chunks_exact(h * w).zip(y.chunks_exact_mut(oh * ow)) {
            for (oy, out) in dst.chunks_exact_mut(ow).enumerate() {
                let rows = &src[oy * size * w..(oy * size + size) * w];
                if size == 2 {
                    let (r0, r1) = rows.split_at(w);
                    for (o, (a, b)) in out.iter_mut().zip(r0.chunks_exact(2).zip(r1.chunks_exact(2))) {
                        *o = larger(larger(a[0], a[1]), larger(b[0], b[1]));
                    }
                    continue;
                }
                for (o, v) in out.iter_mut().zip(rows[..w].chunks_exact(size)) {
                    *o = v[0];
                }
                for row in rows.chunks_exact(w) {
                    for (o, win) in out.iter_mut().zip(row.chunks_exact(size)) {
                        *o = win.iter().fold(*o, |m, &v| larger(m, v));
                    }
                }
            }
        }
        return (y, Vec::new());
    }
    let mut y = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * size * w + ox * size;
                for dy in 0..size {
                    for dx in 0..size {
                        let idx = base + (oy * size + dy) * w + ox * size + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                y.push(x[best]);
                argmax.push(best as u32);
            }
        }
    }
    (y, argmax)
}

fn batchnorm_forward<T: Scalar>(
    x: &[T],
    n: usize,
    shape: Shape3,
    bn: &BatchNormParams<T>,
    mode: Mode,
    keep: bool,
) -> (Vec<T>, LayerCache<T>) {
    let [c, h, w] = shape;
    let hw = h * w;
    let eps = T::lit(BN_EPSILON);
    let count = T::from(n * hw).unwrap();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    match mode {
        Mode::Train => {
            for s in 0..n {
                for ch in 0..c {
                    let p = &x[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                    mean[ch] = mean[ch] + p.iter().copied().sum::<T>();
                }
            }
            mean.iter_mut().for_each(|m| *m = *m / count);
            for s in 0..n {
                for ch in 0..c {
                    let p = &x[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                    var[ch] = var[ch] + p.iter().map(|&v| (v - mean[ch]) * (v - mean[ch])).sum::<T>();
                }
            }
            var.iter_mut().for_each(|v| *v = *v / count);
        }
        Mode::Eval => {
            mean.copy_from_slice(&bn.running_mean);
            var.copy_from_slice(&bn.running_var);
        }
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    for s in 0..n {
        for ch in 0..c {
            let off = (s * c + ch) * hw;
            for k in off..off + hw {
                xhat[k] = (x[k] - mean[ch]) * inv_std[ch];
                y[k] = bn.gamma[ch] * xhat[k] + bn.beta[ch];
            }
        }
    }
    let cache = if keep {
        // Running variance tracks the unbiased estimate.
        let unbiased = if mode == Mode::Train && n * hw > 1 {
            let f = count / (count - T::one());
            var.iter().map(|&v| v * f).collect()
        } else {
            var
        };
        LayerCache::BatchNorm { xhat, inv_std, mean, var: unbiased }
    } else {
        LayerCache::None
    };
    (y, cache)
}

fn batchnorm_backward<T: Scalar>(
    g: &[T],
    n: usize,
    shape: Shape3,
    bn: &BatchNormParams<T>,
    cache: &LayerCache<T>,
    mode: Mode,
) -> Result<(ParamGrads<T>, Vec<T>)> {
    let LayerCache::BatchNorm { xhat, inv_std, .. } = cache else {
        return shape_err("batch-norm cache missing");
    };
    let [c, h, w] = shape;
    let hw = h * w;
    let count = T::from(n * hw).unwrap();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for s in 0..n {
        for ch in 0..c {
            let off = (s * c + ch) * hw;
            for k in off..off + hw {
                dgamma[ch] = dgamma[ch] + g[k] * xhat[k];
                dbeta[ch] = dbeta[ch] + g[k];
            }
        }
    }
    let mut dx = vec![T::zero(); g.len()];
    for s in 0..n {
        for ch in 0..c {
            let off = (s * c + ch) * hw;
            let scale = bn.gamma[ch] * inv_std[ch];
            for k in off..off + hw {
                dx[k] = match mode {
                    Mode::Train => {
                        scale / count * (count * g[k] - dbeta[ch] - xhat[k] * dgamma[ch])
                    }
                    Mode::Eval => scale * g[k],
                };
            }
        }
    }
    Ok((ParamGrads { weight: dgamma, bias: dbeta }, dx))
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
/// Uses max-subtraction for stability.
pub fn softmax_xent<T: Scalar>(logits: &Matrix<T>, labels: &[usize]) -> Result<(T, Matrix<T>)> {
    let (n, k) = logits.shape();
    if labels.len() != n {
        return input_err(format!("{} labels for {n} samples", labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return input_err(format!("label {bad} out of range for {k} classes"));
    }
    let inv_n = T::one() / T::from(n.max(1)).unwrap();
    let mut loss = T::zero();
    let mut grad = Matrix::zeros(n, k);
    for (r, &label) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss = loss + (log_z - row[label]);
        let grow = grad.row_mut(r);
        for (j, gv) in grow.iter_mut().enumerate() {
            let p = (row[j] - log_z).exp();
            *gv = (p - if j == label { T::one() } else { T::zero() }) * inv_n;
        }
    }
    Ok((loss * inv_n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::spec::LayerSpec;

    fn tiny_conv_net() -> Network<f32> {
        let spec = NetworkSpec::new(
            [1, 1, 1],
            vec![
                LayerSpec::new("conv", LayerKind::Conv { filters: 2, kernel: 1, pad: 0 }),
                LayerSpec::new("relu", LayerKind::Relu),
                LayerSpec::new("fc", LayerKind::Fc { outputs: 2 }),
                LayerSpec::new("loss", LayerKind::SoftmaxXent),
            ],
        )
        .unwrap();
        Network::init(spec, 0).unwrap()
    }

    #[test]
    fn relu_response_need_not_follow_l1_norm() {
        // Input c = (1, 0, 0) over three channels; filter a = (0.1, 0.5, 1)
        // has the larger l1 norm, b = (0.2, 0.1, 0) the larger response.
        let spec = NetworkSpec::new(
            [3, 1, 1],
            vec![
                LayerSpec::new("conv", LayerKind::Conv { filters: 2, kernel: 1, pad: 0 }),
                LayerSpec::new("relu", LayerKind::Relu),
                LayerSpec::new("fc", LayerKind::Fc { outputs: 1 }),
                LayerSpec::new("loss", LayerKind::SoftmaxXent),
            ],
        )
        .unwrap();
        let mut net = Network::<f32>::init(spec, 0).unwrap();
        *net.filter_matrix_mut(0).unwrap() =
            Matrix::from_rows(&[vec![0.1, 0.5, 1.0], vec![0.2, 0.1, 0.0]]).unwrap();
        let x = Tensor::from_vec(&[1, 3, 1, 1], vec![1.0, 0.0, 0.0]).unwrap();
        let relu = net.forward_until(&x, 1).unwrap();
        assert!((relu.data()[0] - 0.1).abs() < 1e-7);
        assert!((relu.data()[1] - 0.2).abs() < 1e-7);
        assert!(relu.data()[0] < relu.data()[1]);
    }

    #[test]
    fn zero_weights_give_uniform_softmax() {
        let mut net = Network::<f32>::init(NetworkSpec::lenet(), 1).unwrap();
        for p in net.params_mut() {
            if let Some((w, b)) = p.trainable_mut() {
                w.fill(0.0);
                b.fill(0.0);
            }
        }
        let x = Tensor::from_vec(&[2, 1, 28, 28], vec![0.3; 2 * 784]).unwrap();
        let logits = net.predict(&x).unwrap();
        assert_eq!(logits.shape(), (2, 10));
        assert!(logits.data().iter().all(|&v| v == 0.0));
        let (loss, _) = softmax_xent(&logits, &[3, 7]).unwrap();
        assert!((loss - 10f32.ln()).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_batch_shape_and_labels() {
        let net = tiny_conv_net();
        let bad = Tensor::<f32>::zeros(&[1, 2, 1, 1]);
        assert!(matches!(net.predict(&bad), Err(crate::Error::Shape(_))));
        let logits = Matrix::<f32>::zeros(1, 2);
        assert!(matches!(softmax_xent(&logits, &[2]), Err(crate::Error::Input(_))));
    }

    #[test]
    fn duplicated_sample_keeps_mean_loss() {
        let net = tiny_conv_net();
        let one = Tensor::from_vec(&[1, 1, 1, 1], vec![0.7]).unwrap();
        let two = Tensor::from_vec(&[2, 1, 1, 1], vec![0.7, 0.7]).unwrap();
        let (l1, _) = softmax_xent(&net.predict(&one).unwrap(), &[1]).unwrap();
        let (l2, _) = softmax_xent(&net.predict(&two).unwrap(), &[1, 1]).unwrap();
        assert!((l1 - l2).abs() < 1e-7);
    }

    #[test]
    fn batchnorm_eval_is_per_channel_affine() {
        let mut bn = BatchNormParams::<f64>::identity(2);
        let x: Vec<f64> = (0..16).map(|v| v as f64 * 0.37 - 2.0).collect();
        // var = 1 scales by exactly 1/sqrt(1 + eps).
        let (y, _) = batchnorm_forward(&x, 2, [2, 2, 2], &bn, Mode::Eval, false);
        let s = 1.0 / (1.0 + BN_EPSILON).sqrt();
        for (a, b) in x.iter().zip(&y) {
            assert!((a * s - b).abs() < 1e-12);
        }
        // Folding eps into the running variance gives the identity.
        bn.running_var = vec![1.0 - BN_EPSILON; 2];
        let (y, _) = batchnorm_forward(&x, 2, [2, 2, 2], &bn, Mode::Eval, false);
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn maxpool_commutes_with_positive_scaling() {
        let x: Vec<f32> = (0..32).map(|v| ((v * 7919) % 13) as f32 - 6.0).collect();
        let (y, _) = maxpool_forward(&x, 2, [1, 4, 4], 2, true);
        let scaled: Vec<f32> = x.iter().map(|v| v * 2.5).collect();
        let (ys, _) = maxpool_forward(&scaled, 2, [1, 4, 4], 2, true);
        for (a, b) in y.iter().zip(&ys) {
            assert_eq!(a * 2.5, *b);
        }
    }

    #[test]
    fn maxpool_paths_agree() {
        let x: Vec<f32> = (0..3 * 2 * 7 * 9).map(|v| ((v * 7919) % 23) as f32 - 11.0).collect();
        for size in [2, 3] {
            let (a, argmax) = maxpool_forward(&x, 3, [2, 7, 9], size, true);
            let (b, none) = maxpool_forward(&x, 3, [2, 7, 9], size, false);
            assert_eq!(a, b);
            assert_eq!(a.len(), 3 * 2 * (7 / size) * (9 / size));
            assert!(none.is_empty());
            assert!(argmax.iter().zip(&a).all(|(&i, &v)| x[i as usize] == v));
        }
    }

    #[test]
    fn relu_is_idempotent() {
        let net = tiny_conv_net();
        let x = Tensor::from_vec(&[3, 1, 1, 1], vec![-1.0, 0.5, 2.0]).unwrap();
        let once = net.forward_until(&x, 1).unwrap();
        let twice: Vec<f32> = once.data().iter().map(|v| v.max(0.0)).collect();
        assert_eq!(once.data(), &twice[..]);
    }

    #[test]
    fn from_parts_rejects_wrong_shapes() {
        let net = tiny_conv_net();
        let (spec, mut params) = net.into_parts();
        params[2] = LayerParams::Fc {
            weight: Matrix::zeros(2, 3),
            bias: vec![0.0; 2],
        };
        assert!(Network::from_parts(spec, params).is_err());
    }
}
