//! Layer-graph descriptions and shape chaining.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{input_err, shape_err, Result};

/// Per-sample activation shape, channel-major: `[channels, height, width]`.
pub type Shape3 = [usize; 3];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    /// Square-kernel, unit-stride convolution with symmetric zero padding.
    Conv { filters: usize, kernel: usize, pad: usize },
    /// Non-overlapping max pooling (`stride == size`).
    MaxPool { size: usize },
    /// Fully-connected layer over the flattened (channel-major) input.
    Fc { outputs: usize },
    Relu,
    BatchNorm,
    /// Global average pooling over the spatial axes.
    Gap,
    /// Opens a residual block. The shortcut is the identity, or a 1×1
    /// projection to `projection` channels.
    ResidualBegin { projection: Option<usize> },
    /// Closes the innermost residual block by summing both branches.
    ResidualAdd,
    /// Softmax cross-entropy head; must be the last layer.
    SoftmaxXent,
}

impl LayerKind {
    pub fn is_parameterized(&self) -> bool {
        matches!(
            self,
            LayerKind::Conv { .. }
                | LayerKind::Fc { .. }
                | LayerKind::BatchNorm
                | LayerKind::ResidualBegin {
                    projection: Some(_)
                }
        )
    }

    /// Layers whose outputs are filters/nodes that can be pruned.
    pub fn has_filter_rows(&self) -> bool {
        matches!(self, LayerKind::Conv { .. } | LayerKind::Fc { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        Self {
            name: name.into(),
            kind,
        }
    }
}

/// Indices of the layers that make up one residual block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResidualGroup {
    pub begin: usize,
    pub add: usize,
    /// Conv layers on the main branch, in order.
    pub convs: Vec<usize>,
    /// The `ResidualBegin` index when the shortcut carries a projection.
    pub projection: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input: Shape3,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn new(input: Shape3, layers: Vec<LayerSpec>) -> Result<Self> {
        let spec = Self { input, layers };
        spec.validate()?;
        Ok(spec)
    }

    /// LeNet as `(20)C5 - MP2 - (50)C5 - MP2 - 500FC - 10FC - S` on 28×28×1
    /// input, with ReLU after both convolutions and the hidden FC layer.
    pub fn lenet() -> Self {
        use LayerKind::*;
        let layers = vec![
            LayerSpec::new("conv1", Conv { filters: 20, kernel: 5, pad: 0 }),
            LayerSpec::new("relu1", Relu),
            LayerSpec::new("pool1", MaxPool { size: 2 }),
            LayerSpec::new("conv2", Conv { filters: 50, kernel: 5, pad: 0 }),
            LayerSpec::new("relu2", Relu),
            LayerSpec::new("pool2", MaxPool { size: 2 }),
            LayerSpec::new("fc1", Fc { outputs: 500 }),
            LayerSpec::new("relu3", Relu),
            LayerSpec::new("fc2", Fc { outputs: 10 }),
            LayerSpec::new("loss", SoftmaxXent),
        ];
        Self::new([1, 28, 28], layers).expect("lenet spec is valid")
    }

    /// A small two-block bottleneck network used to exercise the
    /// residual pruning constraint. The first block projects its shortcut,
    /// the second uses the identity.
    pub fn toy_resnet(input: Shape3, classes: usize) -> Self {
        use LayerKind::*;
        let mut layers = vec![
            LayerSpec::new("stem", Conv { filters: 8, kernel: 3, pad: 0 }),
            LayerSpec::new("stem_bn", BatchNorm),
            LayerSpec::new("stem_relu", Relu),
        ];
        for (b, projection) in [(1, Some(16)), (2, None)] {
            let p = |s: &str| format!("block{b}_{s}");
            layers.extend([
                LayerSpec::new(p("begin"), ResidualBegin { projection }),
                LayerSpec::new(p("conv_a"), Conv { filters: 6, kernel: 1, pad: 0 }),
                LayerSpec::new(p("bn_a"), BatchNorm),
                LayerSpec::new(p("relu_a"), Relu),
                LayerSpec::new(p("conv_b"), Conv { filters: 6, kernel: 3, pad: 1 }),
                LayerSpec::new(p("bn_b"), BatchNorm),
                LayerSpec::new(p("relu_b"), Relu),
                LayerSpec::new(p("conv_c"), Conv { filters: 16, kernel: 1, pad: 0 }),
                LayerSpec::new(p("bn_c"), BatchNorm),
                LayerSpec::new(p("add"), ResidualAdd),
                LayerSpec::new(p("relu_out"), Relu),
            ]);
        }
        layers.extend([
            LayerSpec::new("gap", Gap),
            LayerSpec::new("fc", Fc { outputs: classes }),
            LayerSpec::new("loss", SoftmaxXent),
        ]);
        Self::new(input, layers).expect("toy resnet spec is valid")
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.layers
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| crate::Error::Input(format!("unknown layer `{name}`")))
    }

    /// Output shape of every layer.
    pub fn shapes(&self) -> Result<Vec<Shape3>> {
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut cur = self.input;
        let mut shortcut: Vec<Shape3> = Vec::new();
        for layer in &self.layers {
            let [c, h, w] = cur;
            cur = match layer.kind {
                LayerKind::Conv { filters, kernel, pad } => {
                    if filters == 0 {
                        return shape_err(format!("{}: zero filters", layer.name));
                    }
                    if h + 2 * pad < kernel || w + 2 * pad < kernel {
                        return shape_err(format!(
                            "{}: kernel {kernel} exceeds input {h}x{w}",
                            layer.name
                        ));
                    }
                    [filters, h + 2 * pad - kernel + 1, w + 2 * pad - kernel + 1]
                }
                LayerKind::MaxPool { size } => {
                    if size == 0 || h < size || w < size {
                        return shape_err(format!("{}: pool {size} on {h}x{w}", layer.name));
                    }
                    [c, h / size, w / size]
                }
                LayerKind::Fc { outputs } => {
                    if outputs == 0 {
                        return shape_err(format!("{}: zero outputs", layer.name));
                    }
                    [outputs, 1, 1]
                }
                LayerKind::Relu | LayerKind::BatchNorm | LayerKind::SoftmaxXent => cur,
                LayerKind::Gap => [c, 1, 1],
                LayerKind::ResidualBegin { projection } => {
                    shortcut.push(match projection {
                        Some(p) => [p, h, w],
                        None => cur,
                    });
                    cur
                }
                LayerKind::ResidualAdd => {
                    let s = shortcut.pop().ok_or_else(|| {
                        crate::Error::Shape(format!("{}: residual_add without begin", layer.name))
                    })?;
                    if s != cur {
                        return shape_err(format!(
                            "{}: branch shapes differ: main {cur:?}, shortcut {s:?}",
                            layer.name
                        ));
                    }
                    cur
                }
            };
            shapes.push(cur);
        }
        Ok(shapes)
    }

    /// Input shape of layer `i`.
    pub fn input_shape(&self, shapes: &[Shape3], i: usize) -> Shape3 {
        if i == 0 {
            self.input
        } else {
            shapes[i - 1]
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for l in &self.layers {
            if !seen.insert(l.name.as_str()) {
                return input_err(format!("duplicate layer name `{}`", l.name));
            }
        }
        match self.layers.last() {
            Some(LayerSpec {
                kind: LayerKind::SoftmaxXent,
                ..
            }) => {}
            _ => return input_err("network must end with softmax_xent"),
        }
        if self
            .layers
            .iter()
            .filter(|l| l.kind == LayerKind::SoftmaxXent)
            .count()
            != 1
        {
            return input_err("exactly one softmax_xent layer is allowed");
        }
        self.residual_groups()?;
        let shapes = self.shapes()?;
        let logits = shapes[shapes.len() - 1];
        if logits[1] != 1 || logits[2] != 1 {
            return shape_err("softmax_xent input must be a vector (end with fc)");
        }
        Ok(())
    }

    /// Matched residual blocks. Nested blocks are rejected.
    pub fn residual_groups(&self) -> Result<Vec<ResidualGroup>> {
        let mut groups = Vec::new();
        let mut open: Option<ResidualGroup> = None;
        for (i, l) in self.layers.iter().enumerate() {
            match (&l.kind, open.as_mut()) {
                (LayerKind::ResidualBegin { projection }, None) => {
                    open = Some(ResidualGroup {
                        begin: i,
                        add: 0,
                        convs: Vec::new(),
                        projection: projection.map(|_| i),
                    })
                }
                (LayerKind::ResidualBegin { .. }, Some(_)) => {
                    return input_err(format!("{}: nested residual blocks are unsupported", l.name))
                }
                (LayerKind::ResidualAdd, Some(g)) => {
                    g.add = i;
                    groups.push(open.take().expect("open block"));
                }
                (LayerKind::ResidualAdd, None) => {
                    return input_err(format!("{}: residual_add without begin", l.name))
                }
                (LayerKind::Conv { .. }, Some(g)) => g.convs.push(i),
                (LayerKind::Fc { .. } | LayerKind::Gap | LayerKind::MaxPool { .. }, Some(_)) => {
                    return input_err(format!("{}: not allowed inside a residual block", l.name))
                }
                _ => {}
            }
        }
        if open.is_some() {
            return input_err("unterminated residual block");
        }
        Ok(groups)
    }

    /// Index of the final classifier layer (the fc feeding softmax).
    pub fn classifier_index(&self) -> Option<usize> {
        self.layers
            .iter()
            .rposition(|l| matches!(l.kind, LayerKind::Fc { .. }))
    }

    pub fn num_classes(&self) -> usize {
        match self.layers.get(self.classifier_index().unwrap_or(0)).map(|l| &l.kind) {
            Some(LayerKind::Fc { outputs }) => *outputs,
            _ => 0,
        }
    }

    /// Output width (filters or nodes) of a conv / fc layer.
    pub fn width(&self, i: usize) -> Option<usize> {
        match self.layers.get(i)?.kind {
            LayerKind::Conv { filters, .. } => Some(filters),
            LayerKind::Fc { outputs } => Some(outputs),
            _ => None,
        }
    }

    /// The same spec with one conv/fc layer resized.
    pub fn with_width(mut self, layer: &str, width: usize) -> Result<Self> {
        let i = self.index_of(layer)?;
        match &mut self.layers[i].kind {
            LayerKind::Conv { filters, .. } => *filters = width,
            LayerKind::Fc { outputs } => *outputs = width,
            _ => return input_err(format!("`{layer}` is not a conv or fc layer")),
        }
        self.validate()?;
        Ok(self)
    }

    /// Surviving widths of all conv/fc layers except the classifier,
    /// joined as `a-b-c`.
    pub fn filter_counts(&self) -> String {
        let cls = self.classifier_index();
        self.layers
            .iter()
            .enumerate()
            .filter(|(i, l)| l.kind.has_filter_rows() && Some(*i) != cls)
            .map(|(i, _)| self.width(i).unwrap().to_string())
            .collect::<Vec<_>>()
            .join("-")
    }
}
