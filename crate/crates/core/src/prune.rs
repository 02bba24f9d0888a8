//! Filter masks, baseline importance criteria and network surgery.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::aulm::{solve_layer, AulmConfig, DataTerm};
use crate::error::{input_err, Error, Result};
use crate::nn::{evaluate, train, Dataset, LayerKind, LayerParams, LayerSpec, Network, SgdConfig};
use crate::prox::RegularizerKind;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskOrigin {
    SsrL21,
    SsrL20,
    SsrL1,
    Random,
    FilterL1,
    Apoz,
}

impl From<RegularizerKind> for MaskOrigin {
    fn from(kind: RegularizerKind) -> Self {
        match kind {
            RegularizerKind::L21 => Self::SsrL21,
            RegularizerKind::L20 => Self::SsrL20,
            RegularizerKind::L1 => Self::SsrL1,
        }
    }
}

impl fmt::Display for MaskOrigin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::SsrL21 => "ssr_l21",
            Self::SsrL20 => "ssr_l20",
            Self::SsrL1 => "ssr_l1",
            Self::Random => "random",
            Self::FilterL1 => "filter_l1",
            Self::Apoz => "apoz",
        })
    }
}

/// Which output filters of one layer survive.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneMask {
    pub layer: String,
    pub keep: Vec<bool>,
    pub origin: MaskOrigin,
}

impl PruneMask {
    pub fn new(layer: impl Into<String>, keep: Vec<bool>, origin: MaskOrigin) -> Self {
        Self {
            layer: layer.into(),
            keep,
            origin,
        }
    }

    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriterionScore {
    pub layer: String,
    pub scores: Vec<f32>,
    pub criterion: MaskOrigin,
}

/// Which convs of a residual block may be pruned.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResidualConstraint {
    pub block: String,
    pub prunable: Vec<usize>,
    /// The last main-branch conv and the shortcut projection, if any.
    pub frozen: Vec<usize>,
}

pub fn residual_constraints(net: &Network) -> Vec<ResidualConstraint> {
    net.residual_groups()
        .iter()
        .map(|g| {
            let (last, rest) = g.convs.split_last().map_or((None, &[][..]), |(l, r)| (Some(*l), r));
            ResidualConstraint {
                block: net.spec().layers[g.begin].name.clone(),
                prunable: rest.to_vec(),
                frozen: last.into_iter().chain(g.projection).collect(),
            }
        })
        .collect()
}

/// Index of the largest value; the first one wins ties.
pub fn argmax_first(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Where a layer's output channels are consumed, found by walking forward
/// through channel-transparent layers.
struct Consumer {
    /// Batch-norm layers passed on the way, pruned in lockstep.
    batchnorms: Vec<usize>,
    /// The next conv or fc layer.
    next: usize,
}

fn find_consumer(net: &Network, layer: usize) -> Result<Consumer> {
    let layers = &net.spec().layers;
    let name = &layers[layer].name;
    if !layers[layer].kind.has_filter_rows() {
        return input_err(format!("layer `{name}` has no filters to prune"));
    }
    if net.spec().classifier_index() == Some(layer) {
        return Err(Error::Constraint(format!("`{name}` is the classifier and cannot be pruned")));
    }
    let mut batchnorms = Vec::new();
    for (j, l) in layers.iter().enumerate().skip(layer + 1) {
        match l.kind {
            LayerKind::Relu | LayerKind::MaxPool { .. } | LayerKind::Gap => {}
            LayerKind::BatchNorm => batchnorms.push(j),
            LayerKind::Conv { .. } | LayerKind::Fc { .. } => return Ok(Consumer { batchnorms, next: j }),
            LayerKind::ResidualBegin { .. } | LayerKind::ResidualAdd => {
                return Err(Error::Constraint(format!(
                    "`{name}` feeds the residual merge at `{}`; its channel count is frozen",
                    l.name
                )))
            }
            LayerKind::SoftmaxXent => break,
        }
    }
    Err(Error::Constraint(format!("`{name}` has no downstream consumer")))
}

/// Conv/fc layers that [`compact`] accepts, in network order.
pub fn prunable_layers(net: &Network) -> Vec<String> {
    net.spec()
        .layers
        .iter()
        .enumerate()
        .filter(|(i, _)| find_consumer(net, *i).is_ok())
        .map(|(_, l)| l.name.clone())
        .collect()
}

fn checked_layer(net: &Network, mask: &PruneMask) -> Result<(usize, Consumer)> {
    let l = net.layer_index(&mask.layer)?;
    let consumer = find_consumer(net, l)?;
    let width = net.spec().width(l).expect("filter layer");
    if mask.keep.len() != width {
        return Err(Error::Shape(format!(
            "mask for `{}` has {} entries, layer has {width} filters",
            mask.layer,
            mask.keep.len()
        )));
    }
    if mask.kept() == 0 {
        return Err(Error::Constraint(format!("mask would empty layer `{}`", mask.layer)));
    }
    Ok((l, consumer))
}

/// Per-input-column keep flags of the consumer layer.
fn consumer_columns(net: &Network, consumer: usize, keep: &[bool]) -> Result<Vec<bool>> {
    let shapes = net.spec().shapes()?;
    let [c, h, w] = net.spec().input_shape(&shapes, consumer);
    debug_assert_eq!(c, keep.len());
    Ok(match net.spec().layers[consumer].kind {
        LayerKind::Fc { .. } => keep.iter().flat_map(|&k| std::iter::repeat(k).take(h * w)).collect(),
        _ => keep.to_vec(),
    })
}

/// Removes the dropped filters of one layer together with their biases,
/// batch-norm channels and the matching input channels of the next layer.
pub fn compact(net: &Network, mask: &PruneMask) -> Result<Network> {
    let (l, consumer) = checked_layer(net, mask)?;
    let keep = &mask.keep;
    let cols = consumer_columns(net, consumer.next, keep)?;
    let (mut spec, mut params) = net.clone().into_parts();
    let kept = mask.kept();
    match &mut spec.layers[l].kind {
        LayerKind::Conv { filters, .. } => *filters = kept,
        LayerKind::Fc { outputs } => *outputs = kept,
        _ => unreachable!("checked filter layer"),
    }
    params[l] = match &params[l] {
        LayerParams::Conv { weight, bias } => LayerParams::Conv {
            weight: weight.select_out_channels(keep),
            bias: select(bias, keep),
        },
        LayerParams::Fc { weight, bias } => LayerParams::Fc {
            weight: weight.select_rows(keep),
            bias: select(bias, keep),
        },
        _ => unreachable!("checked filter layer"),
    };
    for &b in &consumer.batchnorms {
        if let LayerParams::BatchNorm(bn) = &params[b] {
            params[b] = LayerParams::BatchNorm(bn.select(keep));
        }
    }
    params[consumer.next] = match &params[consumer.next] {
        LayerParams::Conv { weight, bias } => LayerParams::Conv {
            weight: weight.select_in_channels(keep),
            bias: bias.clone(),
        },
        LayerParams::Fc { weight, bias } => LayerParams::Fc {
            weight: weight.select_cols(&cols),
            bias: bias.clone(),
        },
        _ => unreachable!("consumer is conv or fc"),
    };
    Network::from_parts(spec, params)
}

fn select(v: &[f32], keep: &[bool]) -> Vec<f32> {
    v.iter().zip(keep).filter(|(_, &k)| k).map(|(&x, _)| x).collect()
}

/// The same network with the dropped filters, their biases and the
/// consumer's matching input channels set to zero instead of removed.
pub fn zero_masked(net: &Network, mask: &PruneMask) -> Result<Network> {
    let (l, consumer) = checked_layer(net, mask)?;
    let cols = consumer_columns(net, consumer.next, &mask.keep)?;
    let mut out = net.clone();
    {
        let m = out.filter_matrix_mut(l)?;
        for (i, &k) in mask.keep.iter().enumerate() {
            if !k {
                m.row_mut(i).fill(0.0);
            }
        }
    }
    if let Some(bias) = out.bias_mut(l) {
        for (b, &k) in bias.iter_mut().zip(&mask.keep) {
            if !k {
                *b = 0.0;
            }
        }
    }
    let next = out.filter_matrix_mut(consumer.next)?;
    let per_channel = match net.spec().layers[consumer.next].kind {
        LayerKind::Conv { kernel, .. } => kernel * kernel,
        _ => 1,
    };
    for r in 0..next.rows() {
        let row = next.row_mut(r);
        for (c, &k) in cols.iter().enumerate() {
            if !k {
                row[c * per_channel..(c + 1) * per_channel].fill(0.0);
            }
        }
    }
    Ok(out)
}

/// Applies masks one after another.
pub fn compact_all(net: &Network, masks: &[PruneMask]) -> Result<Network> {
    masks.iter().try_fold(net.clone(), |n, m| compact(&n, m))
}

fn filter_layer(net: &Network, layer: &str) -> Result<usize> {
    let l = net.layer_index(layer)?;
    net.filter_matrix(l)?;
    Ok(l)
}

/// I.i.d. uniform scores, deterministic per seed.
pub fn score_random(net: &Network, layer: &str, seed: u64) -> Result<CriterionScore> {
    let l = filter_layer(net, layer)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = net.filter_matrix(l)?.rows();
    Ok(CriterionScore {
        layer: layer.to_string(),
        scores: (0..n).map(|_| rng.random::<f32>()).collect(),
        criterion: MaskOrigin::Random,
    })
}

/// `sᵢ = ‖Kᵢ‖₁`.
pub fn score_filter_l1(net: &Network, layer: &str) -> Result<CriterionScore> {
    let k = net.filter_matrix(filter_layer(net, layer)?)?;
    Ok(CriterionScore {
        layer: layer.to_string(),
        scores: (0..k.rows()).map(|i| k.row(i).iter().map(|v| v.abs()).sum()).collect(),
        criterion: MaskOrigin::FilterL1,
    })
}

/// Fraction of nonzero post-ReLU activations per output channel, averaged
/// over the probe samples. Batch-norm between the layer and its ReLU is
/// allowed.
pub fn score_apoz(net: &Network, layer: &str, probe: &Dataset) -> Result<CriterionScore> {
    let l = filter_layer(net, layer)?;
    if probe.is_empty() {
        return input_err("APoZ needs a nonempty probe set");
    }
    let layers = &net.spec().layers;
    let relu = layers
        .iter()
        .enumerate()
        .skip(l + 1)
        .find(|(_, s)| s.kind != LayerKind::BatchNorm)
        .filter(|(_, s)| s.kind == LayerKind::Relu)
        .map(|(i, _)| i)
        .ok_or_else(|| Error::Input(format!("`{layer}` is not followed by a ReLU")))?;
    let channels = net.spec().width(l).expect("filter layer");
    let mut nonzero = vec![0usize; channels];
    let mut per_channel = 0usize;
    for idx in probe.batches(500, None) {
        let (x, _) = probe.batch(&idx)?;
        let out = net.forward_until(&x, relu)?;
        let [n, c, h, w] = out.shape() else {
            unreachable!("forward_until returns NCHW")
        };
        let hw = h * w;
        for s in 0..*n {
            for (ch, count) in nonzero.iter_mut().enumerate().take(*c) {
                let base = (s * c + ch) * hw;
                *count += out.data()[base..base + hw].iter().filter(|&&v| v != 0.0).count();
            }
        }
        per_channel += n * hw;
    }
    Ok(CriterionScore {
        layer: layer.to_string(),
        scores: nonzero.iter().map(|&z| z as f32 / per_channel as f32).collect(),
        criterion: MaskOrigin::Apoz,
    })
}

/// Keeps the `keep_count` highest scores; among equal scores the lower
/// index is kept first.
pub fn mask_from_scores(score: &CriterionScore, keep_count: usize) -> Result<PruneMask> {
    let n = score.scores.len();
    if keep_count == 0 || keep_count > n {
        return input_err(format!("keep_count {keep_count} outside 1..={n}"));
    }
    if score.scores.iter().any(|s| !s.is_finite()) {
        return input_err("scores must be finite");
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| score.scores[b].total_cmp(&score.scores[a]).then(a.cmp(&b)));
    let mut keep = vec![false; n];
    for &i in &order[..keep_count] {
        keep[i] = true;
    }
    Ok(PruneMask::new(score.layer.clone(), keep, score.criterion))
}

/// Replaces the fully-connected head with global average pooling followed
/// by a single freshly initialized classifier.
pub fn replace_head_with_gap(net: &Network, seed: u64) -> Result<Network> {
    let layers = &net.spec().layers;
    let first_fc = layers
        .iter()
        .position(|l| matches!(l.kind, LayerKind::Fc { .. }))
        .ok_or_else(|| Error::Input("network has no fully-connected head".into()))?;
    if first_fc == 0 || layers[first_fc - 1].kind == LayerKind::Gap {
        return input_err("network has no spatial feature map feeding its fc head");
    }
    let shapes = net.spec().shapes()?;
    let [channels, _, _] = net.spec().input_shape(&shapes, first_fc);
    let classes = net.num_classes();
    let (spec, params) = net.clone().into_parts();
    let unique = |base: &str| {
        let mut name = base.to_string();
        while spec.layers[..first_fc].iter().any(|l| l.name == name) {
            name.push('_');
        }
        name
    };
    let mut new_layers: Vec<LayerSpec> = spec.layers[..first_fc].to_vec();
    let mut new_params: Vec<LayerParams> = params[..first_fc].to_vec();
    new_layers.push(LayerSpec::new(unique("gap"), LayerKind::Gap));
    new_params.push(LayerParams::None);
    new_layers.push(LayerSpec::new(unique("fc_gap"), LayerKind::Fc { outputs: classes }));
    let normal = Normal::new(0.0, (2.0 / channels as f64).sqrt()).expect("valid std");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..classes * channels).map(|_| normal.sample(&mut rng) as f32).collect();
    new_params.push(LayerParams::Fc {
        weight: Matrix::from_vec(classes, channels, data)?,
        bias: vec![0.0; classes],
    });
    new_layers.push(spec.layers.last().expect("nonempty").clone());
    new_params.push(LayerParams::None);
    Network::from_parts(crate::nn::NetworkSpec::new(spec.input, new_layers)?, new_params)
}

/// Global fine-tuning of a (compacted) network. Returns the per-epoch mean
/// training loss.
pub fn finetune(net: &mut Network, data: &Dataset, cfg: &SgdConfig, epochs: usize, seed: u64) -> Result<Vec<f64>> {
    train(net, data, cfg, epochs, seed, |_, _| {})
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityPoint {
    pub lambda: f32,
    pub kept: usize,
    pub top1_error: f64,
    pub floor_applied: bool,
}

/// The default λ grid `0.1, 0.2, …, 0.8`.
pub fn default_lambda_grid() -> Vec<f32> {
    (1..=8).map(|i| i as f32 / 10.0).collect()
}

/// Solves, compacts and evaluates a single layer for each λ, always from
/// the original weights and without fine-tuning. `λ = 0` leaves the layer
/// untouched.
#[allow(clippy::too_many_arguments)]
pub fn sensitivity_sweep(
    net: &Network,
    layer: &str,
    grid: &[f32],
    kind: RegularizerKind,
    cfg: &AulmConfig,
    train_data: &dyn DataTerm,
    eval_data: &Dataset,
    seed: u64,
) -> Result<Vec<SensitivityPoint>> {
    let l = net.layer_index(layer)?;
    find_consumer(net, l)?;
    let mut out = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let (pruned, floor_applied) = if lambda == 0.0 {
            (net.clone(), false)
        } else {
            let mut work = net.clone();
            let solve = solve_layer(&mut work, layer, lambda, kind, cfg, train_data, seed)?;
            (compact(&work, &solve.mask)?, solve.floor_applied)
        };
        out.push(SensitivityPoint {
            lambda,
            kept: pruned.spec().width(l).expect("filter layer"),
            top1_error: evaluate(&pruned, eval_data)?.top1_error,
            floor_applied,
        });
    }
    Ok(out)
}
