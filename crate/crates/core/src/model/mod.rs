//! Layered network definition, forward execution and parameter/FLOP census.

pub mod arch;
pub(crate) mod engine;
pub mod format;

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{Dense, FilterBank, Shape3, Tensor3};

pub use arch::Architecture;
pub use format::{load_model, read_model, save_model, write_model};

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Conv { filters: FilterBank, padding: usize },
    Relu,
    MaxPool { window: usize, stride: usize },
    FullyConnected(Dense),
    Softmax,
}

impl LayerKind {
    pub fn tag(&self) -> &'static str {
        match self {
            LayerKind::Conv { .. } => "conv",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::FullyConnected(_) => "fully_connected",
            LayerKind::Softmax => "softmax",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        LayerSpec {
            name: name.into(),
            kind,
        }
    }
}

/// Geometry of one conv layer: `M` output maps of `Hout × Wout` computed
/// from `N` input maps with a `K × K` kernel at stride `S`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerShape {
    pub name: String,
    /// Position of the conv layer in the model's layer list.
    pub layer_index: usize,
    pub input: Shape3,
    pub output: Shape3,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl LayerShape {
    pub fn m(&self) -> usize {
        self.output.channels
    }

    pub fn n(&self) -> usize {
        self.input.channels
    }

    pub fn hout(&self) -> usize {
        self.output.height
    }

    pub fn wout(&self) -> usize {
        self.output.width
    }

    /// MACs of one output location, `N·K²`.
    pub fn macs_per_location(&self) -> u64 {
        (self.n() * self.kernel * self.kernel) as u64
    }

    pub fn macs(&self) -> u64 {
        self.output.len() as u64 * self.macs_per_location()
    }
}

/// Per-sample forward result. `conv_outputs` holds one post-activation OFM
/// per conv layer when recording was requested, and is empty otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub conv_outputs: Vec<Tensor3>,
    pub logits: Vec<f32>,
    pub probabilities: Vec<f32>,
    pub predicted: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    input_shape: Shape3,
    layers: Vec<LayerSpec>,
    class_labels: Vec<String>,
    conv_shapes: Vec<LayerShape>,
}

impl Model {
    /// Validates layer compatibility and records conv geometry.
    pub fn new(input_shape: Shape3, layers: Vec<LayerSpec>, class_labels: Vec<String>) -> Result<Self> {
        if input_shape.is_empty() {
            return Err(Error::invalid("model input shape must be non-empty"));
        }
        let mut shape = input_shape;
        let mut conv_shapes = Vec::new();
        let last = layers.len().saturating_sub(1);
        for (idx, layer) in layers.iter().enumerate() {
            shape = match &layer.kind {
                LayerKind::Conv { filters, padding } => {
                    if shape.channels != filters.in_channels() {
                        return Err(Error::shape(
                            &layer.name,
                            format!("input {shape} but filters expect {} channels", filters.in_channels()),
                        ));
                    }
                    let (ho, wo) = filters
                        .output_dims(shape.height, shape.width, *padding)
                        .ok_or_else(|| {
                            Error::shape(
                                &layer.name,
                                format!("input {shape} too small for kernel {}", filters.kernel()),
                            )
                        })?;
                    let out = Shape3::new(filters.out_channels(), ho, wo);
                    conv_shapes.push(LayerShape {
                        name: layer.name.clone(),
                        layer_index: idx,
                        input: shape,
                        output: out,
                        kernel: filters.kernel(),
                        stride: filters.stride(),
                        padding: *padding,
                    });
                    out
                }
                LayerKind::Relu => shape,
                LayerKind::MaxPool { window, stride } => {
                    if *window == 0 || *stride == 0 || *window > shape.height || *window > shape.width {
                        return Err(Error::shape(
                            &layer.name,
                            format!("pool window {window}/stride {stride} invalid for input {shape}"),
                        ));
                    }
                    Shape3::new(
                        shape.channels,
                        (shape.height - window) / stride + 1,
                        (shape.width - window) / stride + 1,
                    )
                }
                LayerKind::FullyConnected(dense) => {
                    if dense.inputs() != shape.len() {
                        return Err(Error::shape(
                            &layer.name,
                            format!(
                                "input {shape} has {} values, layer expects {}",
                                shape.len(),
                                dense.inputs()
                            ),
                        ));
                    }
                    Shape3::new(dense.outputs(), 1, 1)
                }
                LayerKind::Softmax => {
                    if idx != last {
                        return Err(Error::shape(&layer.name, "softmax must be the final layer"));
                    }
                    shape
                }
            };
        }
        if !matches!(
            layers.last(),
            Some(LayerSpec {
                kind: LayerKind::Softmax,
                ..
            })
        ) {
            return Err(Error::invalid("model must end with exactly one softmax layer"));
        }
        if class_labels.len() != shape.len() {
            return Err(Error::invalid(format!(
                "{} class labels for a classifier of width {}",
                class_labels.len(),
                shape.len()
            )));
        }
        Ok(Model {
            input_shape,
            layers,
            class_labels,
            conv_shapes,
        })
    }

    pub fn input_shape(&self) -> Shape3 {
        self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn class_labels(&self) -> &[String] {
        &self.class_labels
    }

    /// Number of classes (α).
    pub fn num_classes(&self) -> usize {
        self.class_labels.len()
    }

    pub fn conv_shapes(&self) -> &[LayerShape] {
        &self.conv_shapes
    }

    pub fn conv_count(&self) -> usize {
        self.conv_shapes.len()
    }

    /// Runs inference; with `record`, keeps every conv layer's post-ReLU OFM.
    pub fn forward(&self, input: &Tensor3, record: bool) -> Result<ForwardTrace> {
        let opts = engine::ExecOptions {
            record,
            ..Default::default()
        };
        engine::execute(self, input, &opts).map(|e| e.trace)
    }

    /// Weights plus biases of all conv and fully connected layers.
    pub fn param_count(&self) -> u64 {
        self.layers
            .iter()
            .map(|l| match &l.kind {
                LayerKind::Conv { filters, .. } => (filters.weights().len() + filters.biases().len()) as u64,
                LayerKind::FullyConnected(d) => (d.weights().len() + d.biases().len()) as u64,
                _ => 0,
            })
            .sum()
    }

    /// Dense multiply-accumulate count of one inference.
    pub fn mac_count(&self) -> u64 {
        let conv: u64 = self.conv_shapes.iter().map(LayerShape::macs).sum();
        let fc: u64 = self
            .layers
            .iter()
            .map(|l| match &l.kind {
                LayerKind::FullyConnected(d) => (d.inputs() * d.outputs()) as u64,
                _ => 0,
            })
            .sum();
        conv + fc
    }

    /// Two FLOPs per MAC over conv and fully connected layers.
    pub fn flop_count(&self) -> u64 {
        2 * self.mac_count()
    }
}

impl fmt::Display for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "input {}", self.input_shape)?;
        for l in &self.layers {
            match &l.kind {
                LayerKind::Conv { filters, padding } => writeln!(
                    f,
                    "  {:<8} conv  M={} N={} K={} S={} pad={}",
                    l.name,
                    filters.out_channels(),
                    filters.in_channels(),
                    filters.kernel(),
                    filters.stride(),
                    padding
                )?,
                LayerKind::MaxPool { window, stride } => {
                    writeln!(f, "  {:<8} maxpool window={window} stride={stride}", l.name)?
                }
                LayerKind::FullyConnected(d) => writeln!(f, "  {:<8} fc    {}→{}", l.name, d.inputs(), d.outputs())?,
                other => writeln!(f, "  {:<8} {}", l.name, other.tag())?,
            }
        }
        write!(
            f,
            "{} classes, {} parameters, {} FLOPs",
            self.num_classes(),
            self.param_count(),
            self.flop_count()
        )
    }
}
