//! The single forward path shared by dense inference, cutoff evaluation
//! during threshold search and bitmap-guided distilled execution.
//!
//! A conv "stage" is a conv layer plus the ReLU directly after it, if any.
//! Masks and cutoffs act on the stage output, which is also what gets
//! recorded.

use super::{ForwardTrace, LayerKind, Model};
use crate::error::{Error, Result};
use crate::tensor::{argmax, conv_execute, maxpool, relu_in_place, softmax, ConvMask, Shape3, Tensor3};

#[derive(Default)]
pub(crate) struct ExecOptions<'a> {
    /// One mask per conv layer.
    pub masks: Option<&'a [ConvMask<'a>]>,
    /// Per conv layer: stage outputs `≤ cutoff` are replaced by zero.
    pub cutoffs: Option<&'a [f32]>,
    pub record: bool,
}

pub(crate) struct Execution {
    pub trace: ForwardTrace,
    /// MACs actually performed.
    pub macs: u64,
    /// Largest stage output per conv layer, before cutoffs.
    pub stage_max: Vec<f32>,
}

pub(crate) fn execute(model: &Model, input: &Tensor3, opts: &ExecOptions<'_>) -> Result<Execution> {
    if input.shape() != model.input_shape() {
        return Err(Error::shape(
            "input",
            format!("expected {}, got {}", model.input_shape(), input.shape()),
        ));
    }
    execute_from(model, 0, input.clone(), opts)
}

/// Replaces values `≤ th` by zero.
pub(crate) fn cutoff_in_place(t: &mut Tensor3, th: f32) {
    for v in t.data_mut() {
        if *v <= th {
            *v = 0.0;
        }
    }
}

/// Runs layers `start..` on `x`, which must be the activation entering
/// layer `start`. Per-stage statistics of skipped stages stay zero.
pub(crate) fn execute_from(model: &Model, start: usize, x: Tensor3, opts: &ExecOptions<'_>) -> Result<Execution> {
    let conv_count = model.conv_count();
    if let Some(m) = opts.masks {
        if m.len() != conv_count {
            return Err(Error::PlanMismatch(format!(
                "{} layer masks for {conv_count} conv layers",
                m.len()
            )));
        }
    }
    if let Some(c) = opts.cutoffs {
        if c.len() != conv_count {
            return Err(Error::invalid(format!(
                "{} cutoffs for {conv_count} conv layers",
                c.len()
            )));
        }
    }

    let layers = model.layers();
    let mut x = x;
    // Channels of `x` known to be entirely zero.
    let mut dead: Option<Vec<bool>> = None;
    let mut conv_outputs = Vec::new();
    let mut stage_max = vec![0.0f32; conv_count];
    let mut macs = 0u64;
    let mut conv_idx = layers[..start.min(layers.len())]
        .iter()
        .filter(|l| matches!(l.kind, LayerKind::Conv { .. }))
        .count();
    let mut probabilities = None;
    let mut i = start;
    while i < layers.len() {
        let layer = &layers[i];
        match &layer.kind {
            LayerKind::Conv { filters, padding } => {
                let mask = opts.masks.map(|m| &m[conv_idx]);
                let (mut out, used) = conv_execute(&layer.name, &x, filters, *padding, mask, dead.as_deref())?;
                macs += used;
                if matches!(layers.get(i + 1).map(|l| &l.kind), Some(LayerKind::Relu)) {
                    relu_in_place(&mut out);
                    i += 1;
                }
                stage_max[conv_idx] = out.max_value();
                if let Some(cutoffs) = opts.cutoffs {
                    cutoff_in_place(&mut out, cutoffs[conv_idx]);
                }
                if opts.record {
                    conv_outputs.push(out.clone());
                }
                dead = mask.map(|m| m.removed.to_vec());
                x = out;
                conv_idx += 1;
            }
            LayerKind::Relu => relu_in_place(&mut x),
            LayerKind::MaxPool { window, stride } => {
                x = maxpool(&x, *window, *stride).map_err(|e| Error::shape(&layer.name, e.to_string()))?;
            }
            LayerKind::FullyConnected(dense) => {
                if dense.inputs() != x.len() {
                    return Err(Error::shape(
                        &layer.name,
                        format!(
                            "input {} has {} values, layer expects {}",
                            x.shape(),
                            x.len(),
                            dense.inputs()
                        ),
                    ));
                }
                let skip = dead.as_ref().filter(|d| d.iter().any(|&v| v)).map(|d| {
                    let plane = x.shape().plane();
                    d.iter()
                        .flat_map(|&v| std::iter::repeat_n(v, plane))
                        .collect::<Vec<bool>>()
                });
                let (out, used) = dense.apply(x.data(), skip.as_deref());
                macs += used;
                x = Tensor3::from_vec(Shape3::new(out.len(), 1, 1), out)
                    .map_err(|e| Error::shape(&layer.name, e.to_string()))?;
                dead = None;
            }
            LayerKind::Softmax => probabilities = Some(softmax(x.data())),
        }
        i += 1;
    }

    let logits = x.into_data();
    let probabilities = probabilities.unwrap_or_else(|| softmax(&logits));
    let predicted = argmax(&logits);
    Ok(Execution {
        trace: ForwardTrace {
            conv_outputs,
            logits,
            probabilities,
            predicted,
        },
        macs,
        stage_max,
    })
}
