//! Bitmap-guided inference that skips removed computations, its cost
//! accounting and wall-clock comparison against the dense path.

mod cost;
mod energy;
mod report;

use std::hint::black_box;
use std::time::Instant;

use crate::distill::RemovalPlan;
use crate::error::{Error, Result};
use crate::model::engine::{execute, ExecOptions};
use crate::model::Model;
use crate::tensor::Tensor3;

pub use cost::{compression_ratio, plan_cost, skipped_macs, LayerSavings, PlanCost};
pub use energy::{energy_saving, EnergyModel};
pub use report::CompressionReport;

#[derive(Debug, Clone, PartialEq)]
pub struct DistilledOutput {
    pub logits: Vec<f32>,
    pub predicted: usize,
    /// MACs actually performed.
    pub macs: u64,
}

/// Forward pass that computes only the conv outputs whose keep-bit is set.
/// Skipped outputs are zero; channels removed for every kept class are
/// neither computed nor read by the next layer.
pub fn forward_distilled(model: &Model, plan: &RemovalPlan, input: &Tensor3) -> Result<DistilledOutput> {
    plan.check(model)?;
    run(model, Some(plan), input)
}

/// Dense forward with the same MAC accounting.
pub fn forward_dense(model: &Model, input: &Tensor3) -> Result<DistilledOutput> {
    run(model, None, input)
}

fn run(model: &Model, plan: Option<&RemovalPlan>, input: &Tensor3) -> Result<DistilledOutput> {
    let masks = plan.map(RemovalPlan::masks);
    let opts = ExecOptions {
        masks: masks.as_deref(),
        ..Default::default()
    };
    let e = execute(model, input, &opts)?;
    Ok(DistilledOutput {
        logits: e.trace.logits,
        predicted: e.trace.predicted,
        macs: e.macs,
    })
}

/// Mean and sample standard deviation of per-inference wall-clock time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timing {
    pub mean_secs: f64,
    pub std_secs: f64,
}

impl Timing {
    fn of(samples: &[f64]) -> Self {
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        Timing {
            mean_secs: mean,
            std_secs: var.sqrt(),
        }
    }
}

impl std::fmt::Display for Timing {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.3} ± {:.3} ms", self.mean_secs * 1e3, self.std_secs * 1e3)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub baseline: Timing,
    pub distilled: Timing,
    pub repetitions: usize,
    pub inputs: usize,
}

impl BenchResult {
    pub fn speedup(&self) -> f64 {
        self.baseline.mean_secs / self.distilled.mean_secs
    }
}

/// Times the dense and distilled paths over `inputs`, `repetitions` times
/// each, single-threaded. Repetitions alternate between the two paths
/// (and their order) so drift affects both alike; one warm-up pass of each
/// is discarded.
pub fn benchmark(model: &Model, plan: &RemovalPlan, inputs: &[Tensor3], repetitions: usize) -> Result<BenchResult> {
    if repetitions < 3 {
        return Err(Error::invalid(format!(
            "at least 3 repetitions required, got {repetitions}"
        )));
    }
    if inputs.is_empty() {
        return Err(Error::Empty("no benchmark inputs".into()));
    }
    plan.check(model)?;
    let pass = |p: Option<&RemovalPlan>| -> Result<f64> {
        let start = Instant::now();
        for x in inputs {
            black_box(run(model, p, black_box(x))?);
        }
        Ok(start.elapsed().as_secs_f64() / inputs.len() as f64)
    };
    pass(None)?;
    pass(Some(plan))?;
    let (mut dense, mut distilled) = (Vec::with_capacity(repetitions), Vec::with_capacity(repetitions));
    for r in 0..repetitions {
        if r % 2 == 0 {
            dense.push(pass(None)?);
            distilled.push(pass(Some(plan))?);
        } else {
            distilled.push(pass(Some(plan))?);
            dense.push(pass(None)?);
        }
    }
    Ok(BenchResult {
        baseline: Timing::of(&dense),
        distilled: Timing::of(&distilled),
        repetitions,
        inputs: inputs.len(),
    })
}

#[cfg(test)]
mod tests;
