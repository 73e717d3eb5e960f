//! Dormant-activation statistics of conv stage outputs: exact-zero
//! fraction `τ`, at-or-below-cutoff fraction `τ′`, per-layer cutoff search
//! under an accuracy budget, and value histograms.

use std::fmt::Write as _;

use crate::data::LabeledSample;
use crate::error::{Error, Result};
use crate::model::engine::{cutoff_in_place, execute, execute_from, ExecOptions};
use crate::model::{LayerKind, Model};
use crate::tensor::Tensor3;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSparsity {
    pub name: String,
    /// Fraction of stage outputs that are exactly zero.
    pub tau: f64,
    /// Fraction of stage outputs `≤ threshold`.
    pub tau_prime: f64,
    pub threshold: f32,
    /// Tiles per sample: non-overlapping `K×K` spatial blocks spanning all channels.
    pub tiles: usize,
    /// Largest `τ′` of any single tile over all samples.
    pub max_tile_tau_prime: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparsityProfile {
    pub layers: Vec<LayerSparsity>,
    pub samples: usize,
}

impl SparsityProfile {
    /// `layer,tau,tau_prime,TH` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,tau,tau_prime,TH\n");
        for l in &self.layers {
            let _ = writeln!(out, "{},{:.6},{:.6},{}", l.name, l.tau, l.tau_prime, l.threshold);
        }
        out
    }
}

/// Counts for one tensor against one cutoff.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub(crate) struct Tally {
    pub zeros: u64,
    pub at_or_below: u64,
    pub total: u64,
    pub max_tile_fraction: f64,
}

impl Tally {
    pub fn of(t: &Tensor3, th: f32, tile: usize) -> Tally {
        let s = t.shape();
        let data = t.data();
        let zeros = data.iter().filter(|&&v| v == 0.0).count() as u64;
        let at_or_below = data.iter().filter(|&&v| v <= th).count() as u64;
        let mut max_tile_fraction = 0.0f64;
        for ty in (0..s.height).step_by(tile) {
            for tx in (0..s.width).step_by(tile) {
                let (mut hit, mut n) = (0u64, 0u64);
                for c in 0..s.channels {
                    for y in ty..(ty + tile).min(s.height) {
                        for x in tx..(tx + tile).min(s.width) {
                            n += 1;
                            if t.get(c, y, x) <= th {
                                hit += 1;
                            }
                        }
                    }
                }
                max_tile_fraction = max_tile_fraction.max(hit as f64 / n as f64);
            }
        }
        Tally {
            zeros,
            at_or_below,
            total: data.len() as u64,
            max_tile_fraction,
        }
    }
}

fn check_thresholds(model: &Model, thresholds: &[f32]) -> Result<()> {
    if thresholds.len() != model.conv_count() {
        return Err(Error::invalid(format!(
            "{} thresholds for {} conv layers",
            thresholds.len(),
            model.conv_count()
        )));
    }
    if let Some(bad) = thresholds.iter().find(|t| !(**t >= 0.0 && t.is_finite())) {
        return Err(Error::invalid(format!(
            "threshold {bad} is not a finite nonnegative number"
        )));
    }
    Ok(())
}

/// Measures `τ` and `τ′` of every conv stage on the dense forward pass.
pub fn measure_sparsity<S: AsRef<LabeledSample>>(
    model: &Model,
    samples: &[S],
    thresholds: &[f32],
) -> Result<SparsityProfile> {
    check_thresholds(model, thresholds)?;
    if samples.is_empty() {
        return Err(Error::Empty("no samples to measure sparsity on".into()));
    }
    let shapes = model.conv_shapes();
    let mut sums = vec![Tally::default(); shapes.len()];
    for s in samples {
        let trace = model.forward(&s.as_ref().image, true)?;
        for (l, ofm) in trace.conv_outputs.iter().enumerate() {
            let t = Tally::of(ofm, thresholds[l], shapes[l].kernel);
            let acc = &mut sums[l];
            acc.zeros += t.zeros;
            acc.at_or_below += t.at_or_below;
            acc.total += t.total;
            acc.max_tile_fraction = acc.max_tile_fraction.max(t.max_tile_fraction);
        }
    }
    let layers = shapes
        .iter()
        .zip(&sums)
        .zip(thresholds)
        .map(|((shape, t), &th)| LayerSparsity {
            name: shape.name.clone(),
            tau: t.zeros as f64 / t.total as f64,
            tau_prime: t.at_or_below as f64 / t.total as f64,
            threshold: th,
            tiles: shape.hout().div_ceil(shape.kernel) * shape.wout().div_ceil(shape.kernel),
            max_tile_tau_prime: t.max_tile_fraction,
        })
        .collect();
    Ok(SparsityProfile {
        layers,
        samples: samples.len(),
    })
}

/// Largest number of misclassifications that keeps accuracy within
/// `budget` of `baseline` on `n` samples.
pub(crate) fn allowed_errors(n: usize, baseline: f64, budget: f64) -> usize {
    let floor = baseline - budget;
    (0..=n).rev().find(|&w| (n - w) as f64 / n as f64 >= floor).unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdSearch {
    pub thresholds: Vec<f32>,
    /// Accuracy on the evaluation samples without cutoffs.
    pub baseline: f64,
    /// Accuracy on the evaluation samples with all searched cutoffs applied.
    pub accuracy: f64,
}

/// Binary iterations for a search range: at least 20, more if needed to
/// reach a resolution of 1e-4.
fn iterations(range: f32) -> usize {
    let needed = (range as f64 / 1e-4).log2().ceil();
    if needed.is_finite() && needed > 20.0 {
        needed as usize
    } else {
        20
    }
}

/// Finds one cutoff per conv layer, shallow to deep with earlier cutoffs
/// frozen: the largest `TH_l` such that zeroing stage outputs `≤ TH_l` keeps
/// accuracy on `eval` within `budget·(l+1)/L` of the uncut baseline, so no
/// single layer can spend the whole budget and the last layer ends within
/// `budget`. The search range of each layer is `[0, max stage output on calib]`.
pub fn search_thresholds<S: AsRef<LabeledSample>>(
    model: &Model,
    calib: &[S],
    eval: &[S],
    budget: f64,
) -> Result<ThresholdSearch> {
    if !(budget >= 0.0 && budget.is_finite()) {
        return Err(Error::invalid(format!(
            "budget {budget} is not a finite nonnegative number"
        )));
    }
    if eval.is_empty() {
        return Err(Error::Empty("no evaluation samples for threshold search".into()));
    }
    if calib.is_empty() {
        return Err(Error::Empty("no calibration samples for threshold search".into()));
    }
    let conv_count = model.conv_count();
    let mut range = vec![0.0f32; conv_count];
    for s in calib {
        let e = execute(model, &s.as_ref().image, &ExecOptions::default())?;
        for (r, m) in range.iter_mut().zip(&e.stage_max) {
            *r = r.max(*m);
        }
    }

    let n = eval.len();
    let mut correct = 0usize;
    for s in eval {
        let s = s.as_ref();
        if model.forward(&s.image, false)?.predicted == s.label {
            correct += 1;
        }
    }
    let baseline = correct as f64 / n as f64;

    let layers = model.layers();
    let mut cutoffs = vec![0.0f32; conv_count];
    for (l, shape) in model.conv_shapes().iter().enumerate() {
        let max_wrong = allowed_errors(n, baseline, budget * (l + 1) as f64 / conv_count as f64);
        let resume = match layers.get(shape.layer_index + 1).map(|x| &x.kind) {
            Some(LayerKind::Relu) => shape.layer_index + 2,
            _ => shape.layer_index + 1,
        };
        // Stage outputs of layer l with earlier cutoffs applied; cutoffs of
        // l and deeper are zero here, which leaves nonnegative values alone.
        let mut cache = Vec::with_capacity(n);
        for s in eval {
            let s = s.as_ref();
            let opts = ExecOptions {
                cutoffs: Some(&cutoffs),
                record: true,
                ..Default::default()
            };
            let mut e = execute(model, &s.image, &opts)?;
            cache.push((e.trace.conv_outputs.swap_remove(l), s.label));
        }
        let admissible = |th: f32| -> Result<bool> {
            let mut wrong = 0usize;
            for (ofm, label) in &cache {
                let mut x = ofm.clone();
                cutoff_in_place(&mut x, th);
                let opts = ExecOptions {
                    cutoffs: Some(&cutoffs),
                    ..Default::default()
                };
                if execute_from(model, resume, x, &opts)?.trace.predicted != *label {
                    wrong += 1;
                    if wrong > max_wrong {
                        return Ok(false);
                    }
                }
            }
            Ok(true)
        };
        let hi = range[l];
        let th = if admissible(hi)? {
            hi
        } else {
            let (mut lo, mut hi) = (0.0f32, hi);
            for _ in 0..iterations(hi) {
                let mid = lo + (hi - lo) / 2.0;
                if mid <= lo || mid >= hi {
                    break;
                }
                if admissible(mid)? {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            lo
        };
        log::info!("{}: cutoff {th} (range {})", shape.name, range[l]);
        cutoffs[l] = th;
    }

    let mut correct = 0usize;
    for s in eval {
        let s = s.as_ref();
        let opts = ExecOptions {
            cutoffs: Some(&cutoffs),
            ..Default::default()
        };
        if execute(model, &s.image, &opts)?.trace.predicted == s.label {
            correct += 1;
        }
    }
    Ok(ThresholdSearch {
        thresholds: cutoffs,
        baseline,
        accuracy: correct as f64 / n as f64,
    })
}

/// Accuracy on `samples` with stage outputs `≤ thresholds[l]` zeroed.
pub fn accuracy_with_cutoffs<S: AsRef<LabeledSample>>(model: &Model, samples: &[S], thresholds: &[f32]) -> Result<f64> {
    check_thresholds(model, thresholds)?;
    if samples.is_empty() {
        return Err(Error::Empty("no samples to evaluate".into()));
    }
    let mut correct = 0usize;
    for s in samples {
        let s = s.as_ref();
        let opts = ExecOptions {
            cutoffs: Some(thresholds),
            ..Default::default()
        };
        if execute(model, &s.image, &opts)?.trace.predicted == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerHistogram {
    pub name: String,
    /// Number of values exactly equal to zero.
    pub zero_count: u64,
    /// `bins + 1` ascending edges over `[smallest nonzero, largest]`.
    pub edges: Vec<f32>,
    pub counts: Vec<u64>,
}

impl LayerHistogram {
    pub fn total(&self) -> u64 {
        self.zero_count + self.counts.iter().sum::<u64>()
    }

    /// Share of all values that are exactly zero.
    pub fn zero_fraction(&self) -> f64 {
        self.zero_count as f64 / self.total().max(1) as f64
    }

    /// Buckets values (all finite) with a separate exact-zero bin.
    pub fn from_values(name: impl Into<String>, values: impl Iterator<Item = f32> + Clone, bins: usize) -> Self {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        let mut zero_count = 0u64;
        for v in values.clone() {
            if v == 0.0 {
                zero_count += 1;
            } else {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        let mut h = LayerHistogram {
            name: name.into(),
            zero_count,
            edges: Vec::new(),
            counts: vec![0; bins],
        };
        h.edges = edges(lo, hi, bins);
        if lo > hi {
            return h;
        }
        for v in values.filter(|v| *v != 0.0) {
            h.counts[bin_of(v, lo, hi, bins)] += 1;
        }
        h
    }
}

fn edges(lo: f32, hi: f32, bins: usize) -> Vec<f32> {
    if lo > hi {
        return vec![0.0; bins + 1];
    }
    let mut e: Vec<f32> = (0..=bins).map(|i| lo + (hi - lo) * (i as f32 / bins as f32)).collect();
    e[bins] = hi;
    e
}

fn bin_of(v: f32, lo: f32, hi: f32, bins: usize) -> usize {
    if hi <= lo {
        return 0;
    }
    let f = ((v - lo) as f64 / (hi - lo) as f64 * bins as f64).floor();
    (f.max(0.0) as usize).min(bins - 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationHistogram {
    pub layers: Vec<LayerHistogram>,
}

impl ActivationHistogram {
    /// `layer,bin_lo,bin_hi,count` rows; the exact-zero bin is `0,0`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,bin_lo,bin_hi,count\n");
        for l in &self.layers {
            let _ = writeln!(out, "{},0,0,{}", l.name, l.zero_count);
            for (i, c) in l.counts.iter().enumerate() {
                let _ = writeln!(out, "{},{},{},{}", l.name, l.edges[i], l.edges[i + 1], c);
            }
        }
        out
    }
}

/// Histograms of every conv stage output over `samples`. Two passes: the
/// first finds each layer's value range, the second fills the bins.
pub fn histogram<S: AsRef<LabeledSample>>(model: &Model, samples: &[S], bins: usize) -> Result<ActivationHistogram> {
    if bins < 2 {
        return Err(Error::invalid(format!("histogram needs at least 2 bins, got {bins}")));
    }
    let shapes = model.conv_shapes();
    let mut lo = vec![f32::INFINITY; shapes.len()];
    let mut hi = vec![f32::NEG_INFINITY; shapes.len()];
    for s in samples {
        let trace = model.forward(&s.as_ref().image, true)?;
        for (l, ofm) in trace.conv_outputs.iter().enumerate() {
            for &v in ofm.data().iter().filter(|v| **v != 0.0) {
                lo[l] = lo[l].min(v);
                hi[l] = hi[l].max(v);
            }
        }
    }
    let mut layers: Vec<LayerHistogram> = shapes
        .iter()
        .enumerate()
        .map(|(l, shape)| LayerHistogram {
            name: shape.name.clone(),
            zero_count: 0,
            edges: edges(lo[l], hi[l], bins),
            counts: vec![0; bins],
        })
        .collect();
    for s in samples {
        let trace = model.forward(&s.as_ref().image, true)?;
        for (l, ofm) in trace.conv_outputs.iter().enumerate() {
            let h = &mut layers[l];
            for &v in ofm.data() {
                if v == 0.0 {
                    h.zero_count += 1;
                } else {
                    h.counts[bin_of(v, lo[l], hi[l], bins)] += 1;
                }
            }
        }
    }
    Ok(ActivationHistogram { layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::LabeledSample;
    use crate::model::{LayerKind, LayerSpec};
    use crate::tensor::{Dense, FilterBank, Shape3};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ramp() -> Tensor3 {
        Tensor3::from_vec(Shape3::new(1, 1, 10), vec![0., 0., 0., 1., 2., 3., 4., 5., 6., 7.]).unwrap()
    }

    #[test]
    fn tally_examples() {
        let t = Tally::of(&ramp(), 0.0, 1);
        assert_eq!((t.zeros, t.at_or_below, t.total), (3, 3, 10));
        let t = Tally::of(&ramp(), 2.0, 1);
        assert_eq!(t.at_or_below, 5);
        assert_eq!(t.max_tile_fraction, 1.0);
        let t = Tally::of(&ramp(), 2.0, 10);
        assert_eq!(t.max_tile_fraction, 0.5);
    }

    proptest! {
        #[test]
        fn tile_bound_and_threshold_monotonicity(
            vals in proptest::collection::vec(prop_oneof![Just(0.0f32), 0.0f32..4.0], 2 * 5 * 6),
            th in 0.0f32..4.0,
            k in 1usize..4,
        ) {
            let t = Tensor3::from_vec(Shape3::new(2, 5, 6), vals).unwrap();
            let a = Tally::of(&t, th, k);
            let b = Tally::of(&t, th + 0.5, k);
            prop_assert!(a.zeros <= a.at_or_below);
            prop_assert!(a.at_or_below <= b.at_or_below);
            prop_assert_eq!(a.zeros, b.zeros);
            prop_assert!(a.at_or_below as f64 / a.total as f64 <= a.max_tile_fraction + 1e-12);
        }
    }

    #[test]
    fn allowed_error_count() {
        assert_eq!(allowed_errors(100, 0.9, 0.0), 10);
        assert_eq!(allowed_errors(100, 0.9, 0.01), 11);
        assert_eq!(allowed_errors(100, 0.9, 1.0), 100);
        assert_eq!(allowed_errors(3, 1.0, 0.0), 0);
    }

    /// Input `v` passes through a unit 1×1 conv; class 0 wins iff the conv
    /// output is at least `bias_gap`, so a cutoff that zeroes `v` flips it.
    fn pass_through_model(bias_gap: f32) -> Model {
        let layers = vec![
            LayerSpec::new(
                "c",
                LayerKind::Conv {
                    filters: FilterBank::new(1, 1, 1, 1, vec![1.0], vec![0.0]).unwrap(),
                    padding: 0,
                },
            ),
            LayerSpec::new("r", LayerKind::Relu),
            LayerSpec::new(
                "f",
                LayerKind::FullyConnected(Dense::new(1, 2, vec![1.0, 0.0], vec![0.0, bias_gap]).unwrap()),
            ),
            LayerSpec::new("s", LayerKind::Softmax),
        ];
        Model::new(Shape3::new(1, 1, 1), layers, vec!["0".into(), "1".into()]).unwrap()
    }

    fn scalar_samples(values: &[f32]) -> Vec<LabeledSample> {
        values
            .iter()
            .map(|&v| LabeledSample {
                image: Tensor3::filled(Shape3::new(1, 1, 1), v),
                label: 0,
            })
            .collect()
    }

    #[test]
    fn full_budget_gives_layer_maximum() {
        let model = pass_through_model(1e-7);
        let samples = scalar_samples(&[0.2, 0.5, 0.9]);
        let r = search_thresholds(&model, &samples, &samples, 1.0).unwrap();
        assert_eq!(r.thresholds, vec![0.9]);
    }

    #[test]
    fn zero_budget_with_every_value_needed_gives_zero() {
        // Smallest activation is below the search resolution, and zeroing it
        // flips that sample.
        let model = pass_through_model(1e-9);
        let samples = scalar_samples(&[1e-8, 0.5, 0.9]);
        let r = search_thresholds(&model, &samples, &samples, 0.0).unwrap();
        assert_eq!(r.thresholds, vec![0.0]);
        assert_eq!(r.accuracy, r.baseline);
    }

    #[test]
    fn searched_cutoff_reproduces_search_accuracy() {
        let model = pass_through_model(0.3);
        // Correct iff the activation survives and exceeds 0.3.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let values: Vec<f32> = (0..200).map(|_| rng.gen_range(0.0..1.0)).collect();
        let samples = scalar_samples(&values);
        let r = search_thresholds(&model, &samples, &samples, 0.05).unwrap();
        assert!(r.accuracy >= r.baseline - 0.05);
        assert_eq!(
            accuracy_with_cutoffs(&model, &samples, &r.thresholds).unwrap(),
            r.accuracy
        );
        assert!(r.thresholds[0] > 0.3, "cutoff {}", r.thresholds[0]);
    }

    #[test]
    fn argument_errors() {
        let model = pass_through_model(0.0);
        let samples = scalar_samples(&[0.5]);
        let none: Vec<LabeledSample> = vec![];
        assert!(matches!(
            search_thresholds(&model, &samples, &none, 0.01),
            Err(Error::Empty(_))
        ));
        assert!(search_thresholds(&model, &samples, &samples, -0.1).is_err());
        assert!(measure_sparsity(&model, &samples, &[0.0, 1.0]).is_err());
        assert!(measure_sparsity(&model, &samples, &[-1.0]).is_err());
        assert!(matches!(measure_sparsity(&model, &none, &[0.0]), Err(Error::Empty(_))));
        assert!(histogram(&model, &samples, 1).is_err());
    }

    #[test]
    fn histogram_of_zero_and_uniform_values() {
        let h = LayerHistogram::from_values("z", std::iter::repeat_n(0.0, 50), 4);
        assert_eq!(h.zero_count, 50);
        assert_eq!(h.counts, vec![0; 4]);

        let vals: Vec<f32> = (1..=1000).map(|i| i as f32).collect();
        let h = LayerHistogram::from_values("u", vals.iter().copied(), 10);
        assert_eq!(h.total(), 1000);
        for &c in &h.counts {
            assert!((c as i64 - 100).abs() <= 1, "{:?}", h.counts);
        }
        assert!(h.to_csv_row_count() == 11);
    }

    impl LayerHistogram {
        fn to_csv_row_count(&self) -> usize {
            ActivationHistogram {
                layers: vec![self.clone()],
            }
            .to_csv()
            .lines()
            .count()
                - 1
        }
    }

    #[test]
    fn model_histogram_counts_every_value() {
        let model = pass_through_model(0.0);
        let samples = scalar_samples(&[0.0, 0.0, 0.25, 0.75, 1.0]);
        let h = histogram(&model, &samples, 2).unwrap();
        let l = &h.layers[0];
        assert_eq!(l.zero_count, 2);
        assert_eq!(l.counts, vec![1, 2]);
        assert_eq!(l.edges, vec![0.25, 0.625, 1.0]);
        let csv = h.to_csv();
        assert!(csv.starts_with("layer,bin_lo,bin_hi,count\nc,0,0,2\n"));
    }
}
