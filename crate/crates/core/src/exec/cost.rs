//! MAC accounting for removal plans.

use crate::distill::RemovalPlan;
use crate::error::Result;
use crate::model::{LayerKind, LayerShape, Model};

/// MACs skipped by removing `removed` whole channels of layer `l`: in `l`
/// itself (`Wout·Hout·N·K²/S²` each) and in the next conv layer, which no
/// longer reads them (`Wout′·Hout′·M′·K′²/S′²` each).
///
/// With output dimensions this is exact for stride 1. [`plan_cost`] counts
/// what the executor performs for any stride.
pub fn skipped_macs(layer: &LayerShape, next: Option<&LayerShape>, removed: usize) -> (u64, u64) {
    let per = |s: &LayerShape, fan: usize| -> u64 {
        let k2 = (s.kernel * s.kernel) as u64;
        s.wout() as u64 * s.hout() as u64 * fan as u64 * k2 / (s.stride * s.stride) as u64
    };
    let r = removed as u64;
    (r * per(layer, layer.n()), next.map_or(0, |n| r * per(n, n.m())))
}

/// `W·H·M / (W·H·M − cr·W·H − pr)`. When nothing would remain the ratio is
/// `f64::INFINITY`.
pub fn compression_ratio(layer: &LayerShape, cr: usize, pr: usize) -> f64 {
    let plane = (layer.wout() * layer.hout()) as i128;
    let total = plane * layer.m() as i128;
    let left = total - cr as i128 * plane - pr as i128;
    if left <= 0 {
        f64::INFINITY
    } else {
        total as f64 / left as f64
    }
}

/// Removal statistics of one conv layer under a plan.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSavings {
    pub name: String,
    /// Completely removed channels.
    pub cr: usize,
    /// Clear bits in the remaining channels.
    pub pr: usize,
    pub compression_ratio: f64,
    /// MACs not performed for this layer's skipped outputs.
    pub skipped_here: u64,
    /// MACs the following layer saves by not reading removed channels.
    pub skipped_next: u64,
}

/// Exact MAC budget of a plan, input-independent.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanCost {
    pub layers: Vec<LayerSavings>,
    pub total_macs: u64,
    pub performed_macs: u64,
}

impl PlanCost {
    pub fn skipped_macs(&self) -> u64 {
        self.total_macs - self.performed_macs
    }

    pub fn total_flops(&self) -> u64 {
        2 * self.total_macs
    }

    pub fn skipped_flops(&self) -> u64 {
        2 * self.skipped_macs()
    }

    pub fn skipped_fraction(&self) -> f64 {
        if self.total_macs == 0 {
            0.0
        } else {
            self.skipped_macs() as f64 / self.total_macs as f64
        }
    }

    /// `total / (total − skipped)` FLOPs.
    pub fn ideal_speedup(&self) -> f64 {
        if self.performed_macs == 0 {
            f64::INFINITY
        } else {
            self.total_macs as f64 / self.performed_macs as f64
        }
    }
}

/// Counts the MACs [`forward_distilled`](super::forward_distilled) performs
/// under `plan`: computed locations of live channels times live input
/// channels times `K²`, plus fully connected inputs that are not removed.
pub fn plan_cost(model: &Model, plan: &RemovalPlan) -> Result<PlanCost> {
    plan.check(model)?;
    let shapes = model.conv_shapes();
    let mut layers: Vec<LayerSavings> = Vec::with_capacity(shapes.len());
    let mut performed = 0u64;
    // (conv index, removed channel count) of the stage feeding the current layer.
    let mut dead: Option<(usize, usize)> = None;
    let mut conv_idx = 0;
    for layer in model.layers() {
        match &layer.kind {
            LayerKind::Conv { .. } => {
                let s = &shapes[conv_idx];
                let lp = &plan.layers()[conv_idx];
                let k2 = (s.kernel * s.kernel) as u64;
                let ones = lp.bitmap().count_ones() as u64;
                let zeros = lp.bitmap().count_zeros() as u64;
                let gone = dead.map_or(0, |(_, d)| d);
                performed += ones * (s.n() - gone) as u64 * k2;
                if let Some((p, d)) = dead {
                    layers[p].skipped_next += ones * d as u64 * k2;
                }
                let cr = lp.complete_count();
                let pr = lp.partial_count();
                layers.push(LayerSavings {
                    name: s.name.clone(),
                    cr,
                    pr,
                    compression_ratio: compression_ratio(s, cr, pr),
                    skipped_here: zeros * s.n() as u64 * k2,
                    skipped_next: 0,
                });
                dead = Some((conv_idx, cr));
                conv_idx += 1;
            }
            LayerKind::FullyConnected(d) => {
                let (inputs, outputs) = (d.inputs() as u64, d.outputs() as u64);
                match dead {
                    Some((p, gone)) if gone > 0 => {
                        let plane = inputs / shapes[p].m() as u64;
                        let cut = gone as u64 * plane;
                        performed += (inputs - cut) * outputs;
                        layers[p].skipped_next += cut * outputs;
                    }
                    _ => performed += inputs * outputs,
                }
                dead = None;
            }
            _ => {}
        }
    }
    Ok(PlanCost {
        layers,
        total_macs: model.mac_count(),
        performed_macs: performed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape3;

    fn shape(n: usize, m: usize, hw: usize, k: usize, s: usize) -> LayerShape {
        LayerShape {
            name: "c".into(),
            layer_index: 0,
            input: Shape3::new(n, hw * s, hw * s),
            output: Shape3::new(m, hw, hw),
            kernel: k,
            stride: s,
            padding: k / 2,
        }
    }

    #[test]
    fn skipped_mac_examples() {
        let l = shape(16, 32, 14, 3, 1);
        let next = shape(32, 32, 14, 3, 1);
        assert_eq!(skipped_macs(&l, Some(&next), 1), (28224, 56448));
        assert_eq!(skipped_macs(&l, Some(&next), 0), (0, 0));
        assert_eq!(skipped_macs(&l, None, 2), (56448, 0));
    }

    #[test]
    fn compression_ratio_examples() {
        let l = shape(1, 8, 4, 3, 1);
        assert_eq!(compression_ratio(&l, 1, 16), 128.0 / 96.0);
        assert_eq!(compression_ratio(&l, 0, 0), 1.0);
        assert_eq!(compression_ratio(&l, 8, 0), f64::INFINITY);
        assert_eq!(compression_ratio(&l, 7, 16), f64::INFINITY);
    }
}
