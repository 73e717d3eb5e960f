use std::fmt::Write as _;

use super::{BenchResult, PlanCost};
use crate::data::ClassSubset;

/// Everything known about one distilled model, printable as a table or as
/// `key=value` lines.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressionReport {
    pub kept: ClassSubset,
    pub cost: PlanCost,
    /// Kept-class accuracy, dense then distilled.
    pub accuracy: Option<(f64, f64)>,
    pub timing: Option<BenchResult>,
}

fn ratio(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.3}")
    }
}

impl CompressionReport {
    pub fn new(kept: ClassSubset, cost: PlanCost) -> Self {
        CompressionReport {
            kept,
            cost,
            accuracy: None,
            timing: None,
        }
    }

    /// True when some layer would have nothing left to compute.
    pub fn has_infinite_ratio(&self) -> bool {
        self.cost.layers.iter().any(|l| l.compression_ratio.is_infinite())
    }

    pub fn to_text(&self) -> String {
        let c = &self.cost;
        let mut s = String::new();
        let _ = writeln!(s, "kept classes: {} of {}", self.kept, self.kept.universe());
        let _ = writeln!(
            s,
            "{:<10} {:>6} {:>10} {:>10} {:>14} {:>14}",
            "layer", "cr", "pr", "CR", "skipped MACs", "next-layer MACs"
        );
        for l in &c.layers {
            let _ = writeln!(
                s,
                "{:<10} {:>6} {:>10} {:>9}X {:>14} {:>14}",
                l.name,
                l.cr,
                l.pr,
                ratio(l.compression_ratio),
                l.skipped_here,
                l.skipped_next
            );
        }
        if self.has_infinite_ratio() {
            let _ = writeln!(s, "warning: a layer has every output removed");
        }
        let _ = writeln!(s, "total FLOPs:   {}", c.total_flops());
        let _ = writeln!(
            s,
            "skipped FLOPs: {} ({:.2}%)",
            c.skipped_flops(),
            100.0 * c.skipped_fraction()
        );
        let _ = writeln!(s, "ideal speedup: {}X", ratio(c.ideal_speedup()));
        if let Some((before, after)) = self.accuracy {
            let _ = writeln!(s, "accuracy:      {:.2}% -> {:.2}%", 100.0 * before, 100.0 * after);
        }
        if let Some(t) = &self.timing {
            let _ = writeln!(s, "baseline:      {}", t.baseline);
            let _ = writeln!(s, "distilled:     {}", t.distilled);
            let _ = writeln!(
                s,
                "speedup:       {:.2}X ({} reps × {} inputs)",
                t.speedup(),
                t.repetitions,
                t.inputs
            );
        }
        s
    }

    pub fn to_key_values(&self) -> String {
        let c = &self.cost;
        let kept: Vec<String> = self.kept.kept().iter().map(usize::to_string).collect();
        let mut s = String::new();
        let _ = writeln!(s, "kept_classes={}", kept.join(","));
        let _ = writeln!(s, "class_universe={}", self.kept.universe());
        for l in &c.layers {
            let _ = writeln!(s, "layer.{}.cr={}", l.name, l.cr);
            let _ = writeln!(s, "layer.{}.pr={}", l.name, l.pr);
            let _ = writeln!(s, "layer.{}.compression_ratio={}", l.name, ratio(l.compression_ratio));
            let _ = writeln!(s, "layer.{}.skipped_macs={}", l.name, l.skipped_here);
            let _ = writeln!(s, "layer.{}.skipped_next_macs={}", l.name, l.skipped_next);
        }
        let _ = writeln!(s, "total_flops={}", c.total_flops());
        let _ = writeln!(s, "skipped_flops={}", c.skipped_flops());
        let _ = writeln!(s, "skipped_fraction={:.6}", c.skipped_fraction());
        let _ = writeln!(s, "ideal_speedup={}", ratio(c.ideal_speedup()));
        if let Some((before, after)) = self.accuracy {
            let _ = writeln!(s, "accuracy_before={before:.6}");
            let _ = writeln!(s, "accuracy_after={after:.6}");
        }
        if let Some(t) = &self.timing {
            let _ = writeln!(s, "baseline_ms_mean={:.6}", t.baseline.mean_secs * 1e3);
            let _ = writeln!(s, "baseline_ms_std={:.6}", t.baseline.std_secs * 1e3);
            let _ = writeln!(s, "distilled_ms_mean={:.6}", t.distilled.mean_secs * 1e3);
            let _ = writeln!(s, "distilled_ms_std={:.6}", t.distilled.std_secs * 1e3);
            let _ = writeln!(s, "speedup={:.6}", t.speedup());
            let _ = writeln!(s, "repetitions={}", t.repetitions);
        }
        s
    }
}
