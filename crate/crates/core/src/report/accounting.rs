//! Parameter and FLOP counts computed from a network description.
//!
//! One multiply-accumulate counts as one FLOP. Conv and fc layers also
//! count one addition per output element for their bias. Pooling, ReLU,
//! batch-norm, GAP and residual adds are free.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::{LayerKind, NetworkSpec};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub weights: usize,
    pub biases: usize,
    /// Batch-norm scale and shift.
    pub affine: usize,
    pub macs: usize,
    pub bias_adds: usize,
}

impl LayerCost {
    pub fn params(&self) -> usize {
        self.weights + self.biases + self.affine
    }

    pub fn flops(&self) -> usize {
        self.macs + self.bias_adds
    }
}

/// Per-layer costs, in layer order.
pub fn layer_costs(spec: &NetworkSpec) -> Result<Vec<LayerCost>> {
    let shapes = spec.shapes()?;
    Ok(spec
        .layers
        .iter()
        .enumerate()
        .map(|(i, layer)| {
            let [c, h, w] = spec.input_shape(&shapes, i);
            let [oc, oh, ow] = shapes[i];
            match layer.kind {
                LayerKind::Conv { filters, kernel, .. } => conv_cost(c, filters, kernel, oh * ow),
                LayerKind::ResidualBegin { projection: Some(p) } => conv_cost(c, p, 1, h * w),
                LayerKind::Fc { outputs } => LayerCost {
                    weights: c * h * w * outputs,
                    biases: outputs,
                    macs: c * h * w * outputs,
                    bias_adds: outputs,
                    ..LayerCost::default()
                },
                LayerKind::BatchNorm => LayerCost {
                    affine: 2 * oc,
                    ..LayerCost::default()
                },
                _ => LayerCost::default(),
            }
        })
        .collect())
}

fn conv_cost(in_ch: usize, out_ch: usize, kernel: usize, positions: usize) -> LayerCost {
    let weights = out_ch * in_ch * kernel * kernel;
    LayerCost {
        weights,
        biases: out_ch,
        affine: 0,
        macs: weights * positions,
        bias_adds: out_ch * positions,
    }
}

/// Weights, biases and batch-norm scale/shift.
pub fn count_params(spec: &NetworkSpec) -> Result<usize> {
    Ok(layer_costs(spec)?.iter().map(LayerCost::params).sum())
}

/// Conv and fc weights only.
pub fn count_weights(spec: &NetworkSpec) -> Result<usize> {
    Ok(layer_costs(spec)?.iter().map(|c| c.weights).sum())
}

/// Multiply-accumulates plus bias additions for one sample.
pub fn count_flops(spec: &NetworkSpec) -> Result<usize> {
    Ok(layer_costs(spec)?.iter().map(LayerCost::flops).sum())
}

/// Multiply-accumulates alone.
pub fn count_macs(spec: &NetworkSpec) -> Result<usize> {
    Ok(layer_costs(spec)?.iter().map(|c| c.macs).sum())
}

/// Renders a count the way tables usually do: `2.3M`, `67K`, `512`.
pub fn human_count(n: usize) -> String {
    if n >= 1_000_000 {
        format!("{:.2}M", n as f64 / 1e6)
    } else if n >= 1_000 {
        format!("{:.0}K", n as f64 / 1e3)
    } else {
        n.to_string()
    }
}
