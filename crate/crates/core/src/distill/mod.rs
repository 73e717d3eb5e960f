//! Class-specific neuron removal: per-class activity heatmaps, thresholded
//! keep-bitmaps, their fusion over the kept classes and the resulting
//! [`RemovalPlan`].

mod format;

use crate::bitmap::BitTensor3;
use crate::data::{partition_by_class, ClassSubset, Dataset, LabeledSample};
use crate::error::{Error, Result};
use crate::exec::plan_cost;
use crate::model::engine::{execute, ExecOptions};
use crate::model::{ForwardTrace, Model};
use crate::par::map_ordered;
use crate::sparsity::{search_thresholds, ThresholdSearch};
use crate::tensor::{lane_units, ConvMask, LaneMask, Shape3, Tensor3};

pub use format::{load_plan, read_plan, save_plan, write_plan, MAGIC as DBMP_MAGIC, VERSION as DBMP_VERSION};

/// Every `CALIBRATION_STRIDE`-th training sample is held out for threshold
/// search and plan validation.
pub const CALIBRATION_STRIDE: usize = 10;

/// Bisection steps for the global threshold multiplier.
const MULTIPLIER_STEPS: usize = 12;

/// Share of the accuracy budget a plan may spend on the calibration slice.
/// Loss measured on held-out training samples runs 1.3 to 2 times lower than
/// on the MNIST test writers, so half is kept in reserve.
const CALIBRATION_SHARE: f64 = 0.5;

/// Standard errors of the paired loss estimate added before comparing with
/// the budget.
const CONFIDENCE_Z: f64 = 2.0;

/// Streams recorded forward traces of `samples`, which must all carry the
/// same label. Only one trace is alive at a time.
pub fn record_activity<'a, S: AsRef<LabeledSample>>(
    model: &'a Model,
    samples: &'a [S],
) -> Result<impl Iterator<Item = Result<ForwardTrace>> + 'a> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Empty("no samples to record activity from".into()))?
        .as_ref()
        .label;
    if let Some(other) = samples.iter().map(|s| s.as_ref().label).find(|&l| l != first) {
        return Err(Error::invalid(format!(
            "activity must be recorded one class at a time (found labels {first} and {other})"
        )));
    }
    Ok(samples.iter().map(move |s| model.forward(&s.as_ref().image, true)))
}

/// Running per-layer sums of recorded conv outputs, in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapAccumulator {
    shapes: Vec<Shape3>,
    sums: Vec<Vec<f64>>,
    count: usize,
}

impl HeatmapAccumulator {
    pub fn new(shapes: Vec<Shape3>) -> Self {
        let sums = shapes.iter().map(|s| vec![0.0; s.len()]).collect();
        HeatmapAccumulator { shapes, sums, count: 0 }
    }

    pub fn for_model(model: &Model) -> Self {
        Self::new(model.conv_shapes().iter().map(|s| s.output).collect())
    }

    pub fn add(&mut self, conv_outputs: &[Tensor3]) -> Result<()> {
        if conv_outputs.len() != self.shapes.len() {
            return Err(Error::shape(
                "heatmap",
                format!("{} recorded layers, expected {}", conv_outputs.len(), self.shapes.len()),
            ));
        }
        for (l, (ofm, sum)) in conv_outputs.iter().zip(&mut self.sums).enumerate() {
            if ofm.shape() != self.shapes[l] {
                return Err(Error::shape(
                    format!("conv layer {l}"),
                    format!("recorded {} but heatmap is {}", ofm.shape(), self.shapes[l]),
                ));
            }
            for (acc, &v) in sum.iter_mut().zip(ofm.data()) {
                *acc += v as f64;
            }
        }
        self.count += 1;
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Element-wise mean of everything added so far.
    pub fn finish(&self) -> Result<Heatmap> {
        if self.count == 0 {
            return Err(Error::Empty("heatmap of zero traces".into()));
        }
        let n = self.count as f64;
        let layers = self
            .shapes
            .iter()
            .zip(&self.sums)
            .map(|(&shape, sum)| Tensor3::from_vec(shape, sum.iter().map(|&v| (v / n) as f32).collect()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Heatmap {
            samples: self.count,
            layers,
        })
    }
}

/// Average conv-stage activity of one class, one tensor per conv layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub samples: usize,
    pub layers: Vec<Tensor3>,
}

/// Averages a stream of traces.
pub fn build_heatmap<I: IntoIterator<Item = Result<ForwardTrace>>>(traces: I) -> Result<Heatmap> {
    let mut acc: Option<HeatmapAccumulator> = None;
    for trace in traces {
        let trace = trace?;
        let acc =
            acc.get_or_insert_with(|| HeatmapAccumulator::new(trace.conv_outputs.iter().map(Tensor3::shape).collect()));
        acc.add(&trace.conv_outputs)?;
    }
    acc.ok_or_else(|| Error::Empty("heatmap of zero traces".into()))?
        .finish()
}

/// Heatmaps of each class in `classes`, computed from `samples` (in subset
/// order). Classes are independent and run on up to `threads` workers.
pub fn class_heatmaps<S: AsRef<LabeledSample> + Sync>(
    model: &Model,
    samples: &[S],
    classes: &ClassSubset,
    threads: usize,
) -> Result<Vec<Heatmap>> {
    let partition = partition_by_class(samples, classes);
    for (class, members) in partition.classes.iter().zip(&partition.members) {
        if members.is_empty() {
            return Err(Error::Empty(format!("no training samples for class {class}")));
        }
    }
    let jobs: Vec<(usize, &Vec<usize>)> = partition.classes.iter().copied().zip(&partition.members).collect();
    map_ordered(&jobs, threads, |(class, members)| {
        let class_samples: Vec<&LabeledSample> = members.iter().map(|&i| samples[i].as_ref()).collect();
        let heat = build_heatmap(record_activity(model, &class_samples)?)?;
        log::debug!("heatmap of class {class}: {} samples", heat.samples);
        Ok(heat)
    })
    .into_iter()
    .collect()
}

/// Keep-bit is set where the heatmap is `≥ th`.
pub fn threshold_layer(heat: &Tensor3, th: f32) -> BitTensor3 {
    let data = heat.data();
    let plane = heat.shape().plane();
    let w = heat.width();
    BitTensor3::from_fn(heat.shape(), |c, y, x| data[c * plane + y * w + x] >= th)
}

/// One keep-bitmap per conv layer.
pub fn build_bitmap(heatmap: &Heatmap, thresholds: &[f32]) -> Result<Vec<BitTensor3>> {
    if heatmap.layers.len() != thresholds.len() {
        return Err(Error::invalid(format!(
            "{} thresholds for a heatmap of {} layers",
            thresholds.len(),
            heatmap.layers.len()
        )));
    }
    if let Some(bad) = thresholds.iter().find(|t| !(**t >= 0.0 && t.is_finite())) {
        return Err(Error::invalid(format!(
            "threshold {bad} is not a finite nonnegative number"
        )));
    }
    Ok(heatmap
        .layers
        .iter()
        .zip(thresholds)
        .map(|(h, &th)| threshold_layer(h, th))
        .collect())
}

/// A location must be computed if any kept class needs it: the complement
/// of the product of the complements, i.e. the union.
pub fn fuse_bitmaps(per_class: &[Vec<BitTensor3>]) -> Result<Vec<BitTensor3>> {
    let (first, rest) = per_class
        .split_first()
        .ok_or_else(|| Error::Empty("no class bitmaps to fuse".into()))?;
    let mut fused = first.clone();
    for bitmaps in rest {
        if bitmaps.len() != fused.len() {
            return Err(Error::shape(
                "bitmap",
                format!("{} layers vs {}", bitmaps.len(), fused.len()),
            ));
        }
        for (f, b) in fused.iter_mut().zip(bitmaps) {
            f.union_with(b)?;
        }
    }
    Ok(fused)
}

/// Channels whose whole slab is clear, per layer.
pub fn find_complete_removals(fused: &[BitTensor3]) -> Vec<Vec<usize>> {
    fused
        .iter()
        .map(|b| {
            (0..b.shape().channels)
                .filter(|&c| b.channel_count_ones(c) == 0)
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerPlan {
    pub name: String,
    pub threshold: f32,
    bitmap: BitTensor3,
    removed: Vec<bool>,
    units: Vec<Vec<(u32, LaneMask)>>,
}

impl LayerPlan {
    pub fn new(name: impl Into<String>, bitmap: BitTensor3, threshold: f32) -> Self {
        let removed = (0..bitmap.shape().channels)
            .map(|c| bitmap.channel_count_ones(c) == 0)
            .collect();
        LayerPlan {
            name: name.into(),
            threshold,
            units: lane_units(&bitmap),
            bitmap,
            removed,
        }
    }

    pub fn bitmap(&self) -> &BitTensor3 {
        &self.bitmap
    }

    /// Per channel: is the whole slab clear?
    pub fn removed_mask(&self) -> &[bool] {
        &self.removed
    }

    pub fn complete_removals(&self) -> Vec<usize> {
        (0..self.removed.len()).filter(|&c| self.removed[c]).collect()
    }

    /// `cr`: number of completely removed channels.
    pub fn complete_count(&self) -> usize {
        self.removed.iter().filter(|&&r| r).count()
    }

    /// `pr`: clear bits outside completely removed channels.
    pub fn partial_count(&self) -> usize {
        let plane = self.bitmap.shape().plane();
        self.bitmap.count_zeros() - self.complete_count() * plane
    }
}

/// Which conv outputs to compute for a kept-class subset.
#[derive(Debug, Clone, PartialEq)]
pub struct RemovalPlan {
    kept: ClassSubset,
    layers: Vec<LayerPlan>,
}

impl RemovalPlan {
    pub fn new(kept: ClassSubset, layers: Vec<LayerPlan>) -> Self {
        RemovalPlan { kept, layers }
    }

    /// The plan that removes nothing.
    pub fn all_ones(model: &Model, kept: ClassSubset) -> Self {
        let layers = model
            .conv_shapes()
            .iter()
            .map(|s| LayerPlan::new(s.name.clone(), BitTensor3::ones(s.output), 0.0))
            .collect();
        RemovalPlan { kept, layers }
    }

    pub fn from_bitmaps(
        model: &Model,
        kept: ClassSubset,
        bitmaps: Vec<BitTensor3>,
        thresholds: &[f32],
    ) -> Result<Self> {
        if bitmaps.len() != thresholds.len() {
            return Err(Error::invalid("one threshold per bitmap required"));
        }
        let layers = model
            .conv_shapes()
            .iter()
            .zip(bitmaps)
            .zip(thresholds)
            .map(|((s, b), &th)| LayerPlan::new(s.name.clone(), b, th))
            .collect();
        let plan = RemovalPlan { kept, layers };
        plan.check(model)?;
        Ok(plan)
    }

    pub fn kept(&self) -> &ClassSubset {
        &self.kept
    }

    pub fn layers(&self) -> &[LayerPlan] {
        &self.layers
    }

    /// Checks that the plan has one bitmap of the right shape per conv layer.
    pub fn check(&self, model: &Model) -> Result<()> {
        let shapes = model.conv_shapes();
        if shapes.len() != self.layers.len() {
            return Err(Error::PlanMismatch(format!(
                "plan has {} layers, model has {} conv layers",
                self.layers.len(),
                shapes.len()
            )));
        }
        for (s, l) in shapes.iter().zip(&self.layers) {
            if s.output != l.bitmap.shape() {
                return Err(Error::PlanMismatch(format!(
                    "layer `{}` produces {}, bitmap `{}` is {}",
                    s.name,
                    s.output,
                    l.name,
                    l.bitmap.shape()
                )));
            }
        }
        if self.kept.universe() != model.num_classes() {
            return Err(Error::PlanMismatch(format!(
                "plan is for {} classes, model has {}",
                self.kept.universe(),
                model.num_classes()
            )));
        }
        Ok(())
    }

    pub(crate) fn masks(&self) -> Vec<ConvMask<'_>> {
        self.layers
            .iter()
            .map(|l| ConvMask {
                bits: &l.bitmap,
                removed: &l.removed,
                units: &l.units,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    /// Allowed accuracy loss as a fraction (0.01 = one percentage point).
    pub budget: f64,
    /// Bitmap thresholds; searched on the calibration slice when absent.
    pub thresholds: Option<Vec<f32>>,
    pub threads: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            budget: 0.01,
            thresholds: None,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DistillOutcome {
    pub plan: RemovalPlan,
    /// Factor the thresholds were scaled by to meet the budget.
    pub multiplier: f32,
    /// Kept-class accuracy on the calibration slice, dense and distilled.
    pub baseline_accuracy: f64,
    pub accuracy: f64,
    pub calibration_samples: usize,
    pub warnings: Vec<String>,
}

/// Heatmaps and thresholds computed once and reused for any number of
/// kept-class subsets.
pub struct Distiller<'a> {
    model: &'a Model,
    classes: ClassSubset,
    heatmaps: Vec<Heatmap>,
    calibration: Vec<&'a LabeledSample>,
    thresholds: Vec<f32>,
    search: Option<ThresholdSearch>,
}

impl<'a> Distiller<'a> {
    /// Splits the training data into a fitting part (heatmaps) and a
    /// calibration slice (threshold search and validation), then builds
    /// heatmaps for `classes`.
    pub fn prepare(model: &'a Model, dataset: &'a Dataset, classes: &ClassSubset, cfg: &DistillConfig) -> Result<Self> {
        if !(cfg.budget >= 0.0 && cfg.budget.is_finite()) {
            return Err(Error::invalid(format!(
                "budget {} is not a finite nonnegative number",
                cfg.budget
            )));
        }
        if classes.universe() != model.num_classes() {
            return Err(Error::invalid(format!(
                "class subset is over {} classes, model has {}",
                classes.universe(),
                model.num_classes()
            )));
        }
        let (fit, calibration) = dataset.holdout(CALIBRATION_STRIDE);
        let (thresholds, search) = match &cfg.thresholds {
            Some(t) => {
                if t.len() != model.conv_count() {
                    return Err(Error::invalid(format!(
                        "{} thresholds for {} conv layers",
                        t.len(),
                        model.conv_count()
                    )));
                }
                (t.clone(), None)
            }
            None => {
                let r = search_thresholds(model, &calibration, &calibration, cfg.budget)?;
                (r.thresholds.clone(), Some(r))
            }
        };
        let heatmaps = class_heatmaps(model, &fit, classes, cfg.threads)?;
        Ok(Distiller {
            model,
            classes: classes.clone(),
            heatmaps,
            calibration,
            thresholds,
            search,
        })
    }

    pub fn thresholds(&self) -> &[f32] {
        &self.thresholds
    }

    pub fn threshold_search(&self) -> Option<&ThresholdSearch> {
        self.search.as_ref()
    }

    pub fn heatmap(&self, class: usize) -> Option<&Heatmap> {
        self.classes
            .kept()
            .iter()
            .position(|&c| c == class)
            .map(|i| &self.heatmaps[i])
    }

    /// Fused plan for `kept` with every threshold scaled by `multiplier`.
    pub fn plan(&self, kept: &ClassSubset, multiplier: f32) -> Result<RemovalPlan> {
        let scaled: Vec<f32> = self.thresholds.iter().map(|t| t * multiplier).collect();
        let per_class = kept
            .kept()
            .iter()
            .map(|&c| {
                let heat = self
                    .heatmap(c)
                    .ok_or_else(|| Error::invalid(format!("no heatmap prepared for class {c}")))?;
                build_bitmap(heat, &scaled)
            })
            .collect::<Result<Vec<_>>>()?;
        RemovalPlan::from_bitmaps(self.model, kept.clone(), fuse_bitmaps(&per_class)?, &scaled)
    }

    /// Builds the plan for `kept` and, if its kept-class accuracy loss on the
    /// calibration slice does not fit the budget with a safety margin
    /// (half the budget, minus two standard errors), shrinks all thresholds by
    /// a common factor found by bisection.
    pub fn distill(&self, kept: &ClassSubset, budget: f64) -> Result<DistillOutcome> {
        self.distill_capped(kept, budget, None)
    }

    /// Like [`Distiller::distill`], but the plan may skip no more MACs than
    /// `cap`, the outcome for a subset of `kept`. Distilling a chain of
    /// growing subsets this way makes the skipped work non-increasing as
    /// classes are added back. Lowering the multiplier only adds keep-bits,
    /// so the cap is always reachable.
    pub fn distill_capped(
        &self,
        kept: &ClassSubset,
        budget: f64,
        cap: Option<&DistillOutcome>,
    ) -> Result<DistillOutcome> {
        let floor = match cap {
            Some(c) => {
                if !c.plan.kept().kept().iter().all(|&k| kept.contains(k)) {
                    return Err(Error::invalid(format!(
                        "capping plan keeps {}, not a subset of {kept}",
                        c.plan.kept()
                    )));
                }
                plan_cost(self.model, &c.plan)?.performed_macs
            }
            None => 0,
        };
        let samples: Vec<&LabeledSample> = self
            .calibration
            .iter()
            .copied()
            .filter(|s| kept.contains(s.label))
            .collect();
        if samples.is_empty() {
            return Err(Error::Empty(format!("no calibration samples of classes {kept}")));
        }
        let n = samples.len();
        let dense_right = samples
            .iter()
            .map(|s| Ok(execute(self.model, &s.image, &ExecOptions::default())?.trace.predicted == s.label))
            .collect::<Result<Vec<bool>>>()?;
        let dense_wrong = dense_right.iter().filter(|r| !**r).count();
        let baseline = (n - dense_wrong) as f64 / n as f64;
        let allowed = budget * CALIBRATION_SHARE * n as f64;
        let within = |plan: &RemovalPlan| -> Result<bool> {
            if plan_cost(self.model, plan)?.performed_macs < floor {
                return Ok(false);
            }
            let masks = plan.masks();
            let opts = ExecOptions {
                masks: Some(&masks),
                ..Default::default()
            };
            let (mut lost, mut gained, mut wrong_left) = (0usize, 0usize, dense_wrong);
            for (s, &was_right) in samples.iter().zip(&dense_right) {
                let right = execute(self.model, &s.image, &opts)?.trace.predicted == s.label;
                if !was_right {
                    wrong_left -= 1;
                }
                match (was_right, right) {
                    (true, false) => lost += 1,
                    (false, true) => gained += 1,
                    _ => {}
                }
                if lost as f64 - (gained + wrong_left) as f64 > allowed {
                    return Ok(false);
                }
            }
            Ok(meets_budget(lost, gained, allowed))
        };

        let mut warnings = Vec::new();
        let mut multiplier = 1.0f32;
        let mut plan = self.plan(kept, 1.0)?;
        if !within(&plan)? {
            let (mut lo, mut hi) = (0.0f32, 1.0f32);
            let mut best = None;
            for _ in 0..MULTIPLIER_STEPS {
                let mid = (lo + hi) / 2.0;
                let candidate = self.plan(kept, mid)?;
                if within(&candidate)? {
                    lo = mid;
                    best = Some(candidate);
                } else {
                    hi = mid;
                }
            }
            multiplier = lo;
            plan = match best {
                Some(b) => b,
                None => {
                    let msg = format!(
                        "no threshold scaling meets the {budget} budget for classes {kept}; nothing is removed"
                    );
                    log::warn!("{msg}");
                    warnings.push(msg);
                    RemovalPlan::all_ones(self.model, kept.clone())
                }
            };
        }
        let wrong = count_errors(self.model, Some(&plan), &samples, n)?;
        Ok(DistillOutcome {
            plan,
            multiplier,
            baseline_accuracy: baseline,
            accuracy: (n - wrong) as f64 / n as f64,
            calibration_samples: n,
            warnings,
        })
    }
}

/// Whether a loss of `lost − gained` samples stays within `allowed` even
/// after adding `CONFIDENCE_Z` standard errors of the paired difference.
fn meets_budget(lost: usize, gained: usize, allowed: f64) -> bool {
    let net = lost as f64 - gained as f64;
    net + CONFIDENCE_Z * ((lost + gained) as f64).sqrt() <= allowed
}

/// End-to-end: prepare heatmaps for `kept`, search thresholds unless given,
/// and build the budget-validated plan.
pub fn distill(model: &Model, dataset: &Dataset, kept: &ClassSubset, cfg: &DistillConfig) -> Result<DistillOutcome> {
    Distiller::prepare(model, dataset, kept, cfg)?.distill(kept, cfg.budget)
}

/// Misclassifications on `samples`, counting stops once `limit` is exceeded.
fn count_errors(model: &Model, plan: Option<&RemovalPlan>, samples: &[&LabeledSample], limit: usize) -> Result<usize> {
    let masks = plan.map(|p| p.masks());
    let opts = ExecOptions {
        masks: masks.as_deref(),
        ..Default::default()
    };
    let mut wrong = 0;
    for s in samples {
        if execute(model, &s.image, &opts)?.trace.predicted != s.label {
            wrong += 1;
            if wrong > limit {
                break;
            }
        }
    }
    Ok(wrong)
}
