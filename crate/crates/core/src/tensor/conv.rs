use super::{FilterBank, Shape3, Tensor3};
use crate::bitmap::BitTensor3;
use crate::error::{Error, Result};

/// Output channels evaluated together, one per lane. Each lane keeps its
/// own accumulator and sums in ascending `l`, so an output computed in any
/// lane is bit-identical to the same output computed alone.
pub(crate) const LANES: usize = 16;

/// Output locations in flight at once; their accumulator chains are
/// independent and overlap in the pipeline.
const SPAN: usize = 8;

/// Which lanes of a channel group are kept at one location.
pub(crate) type LaneMask = u16;

/// Which outputs of a conv layer must be computed.
pub(crate) struct ConvMask<'a> {
    pub bits: &'a BitTensor3,
    /// Channels whose bitmap slab is empty.
    pub removed: &'a [bool],
    /// Per group of [`LANES`] channels: the locations where any of them is
    /// kept, with the kept lanes. Built by [`lane_units`].
    pub units: &'a [Vec<(u32, LaneMask)>],
}

/// Regroups a keep-bitmap by channel group and location. Groups whose
/// channels are all removed have no units and cost nothing.
pub(crate) fn lane_units(bits: &BitTensor3) -> Vec<Vec<(u32, LaneMask)>> {
    let s = bits.shape();
    let plane = s.plane();
    (0..s.channels.div_ceil(LANES))
        .map(|g| {
            let channels = g * LANES..((g + 1) * LANES).min(s.channels);
            (0..plane)
                .filter_map(|loc| {
                    let mut lanes: LaneMask = 0;
                    for (t, c) in channels.clone().enumerate() {
                        if bits.get_linear(c * plane + loc) {
                            lanes |= 1 << t;
                        }
                    }
                    (lanes != 0).then_some((loc as u32, lanes))
                })
                .collect()
        })
        .collect()
}

/// Direct convolution with zero padding: `out[m][y][x] = Σ_l W′_l·X′_l + b_m`,
/// summed in ascending `l = K·(n·K + i) + j`, bias added last.
pub fn conv_forward(input: &Tensor3, fb: &FilterBank, padding: usize) -> Result<Tensor3> {
    conv_execute("conv", input, fb, padding, None, None).map(|(t, _)| t)
}

/// Convolution that skips masked outputs and input channels known to be zero.
///
/// Skipped outputs are written as `0.0`. Returns the output and the number
/// of MACs actually performed.
pub(crate) fn conv_execute(
    layer: &str,
    input: &Tensor3,
    fb: &FilterBank,
    padding: usize,
    mask: Option<&ConvMask<'_>>,
    dead_inputs: Option<&[bool]>,
) -> Result<(Tensor3, u64)> {
    let s_in = input.shape();
    if s_in.channels != fb.in_channels() {
        return Err(Error::shape(
            layer,
            format!(
                "input has {} channels, filters expect {}",
                s_in.channels,
                fb.in_channels()
            ),
        ));
    }
    let (ho, wo) = fb.output_dims(s_in.height, s_in.width, padding).ok_or_else(|| {
        Error::shape(
            layer,
            format!(
                "padded input {}×{} smaller than kernel {}",
                s_in.height + 2 * padding,
                s_in.width + 2 * padding,
                fb.kernel()
            ),
        )
    })?;
    let m_count = fb.out_channels();
    let out_shape = Shape3::new(m_count, ho, wo);
    if let Some(mask) = mask {
        if mask.bits.shape() != out_shape || mask.removed.len() != m_count {
            return Err(Error::PlanMismatch(format!(
                "layer `{layer}` produces {out_shape}, bitmap is {}",
                mask.bits.shape()
            )));
        }
    }

    let (k, s) = (fb.kernel(), fb.stride());
    let live_inputs: Vec<usize> = (0..s_in.channels)
        .filter(|&c| !dead_inputs.is_some_and(|d| d[c]))
        .collect();
    let (hp, wp) = (s_in.height + 2 * padding, s_in.width + 2 * padding);
    let chan = hp * wp;
    let mut padded = vec![0.0f32; s_in.channels * chan];
    for &c in &live_inputs {
        let src = input.channel(c);
        for y in 0..s_in.height {
            let dst = c * chan + (y + padding) * wp + padding;
            padded[dst..dst + s_in.width].copy_from_slice(&src[y * s_in.width..(y + 1) * s_in.width]);
        }
    }

    // (input offset from a location's top-left corner, weight row) per `l`
    let stride_w = fb.lane_stride();
    let taps: Vec<(usize, usize)> = live_inputs
        .iter()
        .flat_map(|&n| {
            (0..k).flat_map(move |i| (0..k).map(move |j| (n * chan + i * wp + j, ((n * k + i) * k + j) * stride_w)))
        })
        .collect();
    let kernel = Span {
        padded: &padded,
        taps: &taps,
        weights: fb.lane_weights(),
    };
    let per_location = taps.len() as u64;
    let plane = ho * wo;
    let base_of = |loc: usize| (loc / wo) * s * wp + (loc % wo) * s;
    let mut out = vec![0.0f32; out_shape.len()];
    let mut macs = 0u64;
    let mut store = |g0: usize, locs: &[(u32, LaneMask)], acc: &[[f32; LANES]; SPAN]| {
        for (&(loc, lanes), a) in locs.iter().zip(acc) {
            for (t, &v) in a.iter().enumerate() {
                if (lanes >> t) & 1 == 1 {
                    let m = g0 + t;
                    out[m * plane + loc as usize] = v + fb.biases()[m];
                }
            }
            macs += lanes.count_ones() as u64 * per_location;
        }
    };

    for g in 0..m_count.div_ceil(LANES) {
        let g0 = g * LANES;
        match mask {
            Some(mk) => {
                for chunk in mk.units[g].chunks(SPAN) {
                    let mut bases = [0usize; SPAN];
                    for (b, &(loc, _)) in bases.iter_mut().zip(chunk) {
                        *b = base_of(loc as usize);
                    }
                    store(g0, chunk, &kernel.eval(g0, &bases));
                }
            }
            None => {
                let valid = (m_count - g0).min(LANES);
                let lanes = (((1u32 << valid) - 1) & LaneMask::MAX as u32) as LaneMask;
                let mut chunk = [(0u32, lanes); SPAN];
                for start in (0..plane).step_by(SPAN) {
                    let n = (plane - start).min(SPAN);
                    let mut bases = [0usize; SPAN];
                    for p in 0..n {
                        chunk[p].0 = (start + p) as u32;
                        bases[p] = base_of(start + p);
                    }
                    store(g0, &chunk[..n], &kernel.eval(g0, &bases));
                }
            }
        }
    }

    Ok((
        Tensor3 {
            shape: out_shape,
            data: out,
        },
        macs,
    ))
}

struct Span<'a> {
    padded: &'a [f32],
    taps: &'a [(usize, usize)],
    weights: &'a [f32],
}

impl Span<'_> {
    /// Accumulators of channels `g0..g0 + LANES` at the [`SPAN`] locations
    /// whose receptive fields start at `bases`.
    #[inline(always)]
    fn eval(&self, g0: usize, bases: &[usize; SPAN]) -> [[f32; LANES]; SPAN] {
        let mut acc = [[0.0f32; LANES]; SPAN];
        for &(off, row) in self.taps {
            let w: &[f32; LANES] = self.weights[row + g0..row + g0 + LANES].try_into().unwrap();
            for (a, &b) in acc.iter_mut().zip(bases) {
                let x = self.padded[b + off];
                for t in 0..LANES {
                    a[t] += w[t] * x;
                }
            }
        }
        acc
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent direct convolution: explicit zero padding by bounds test.
    fn oracle(input: &Tensor3, fb: &FilterBank, padding: usize) -> Tensor3 {
        let (k, s) = (fb.kernel(), fb.stride());
        let (h, w) = (input.height() as isize, input.width() as isize);
        let ho = (input.height() + 2 * padding - k) / s + 1;
        let wo = (input.width() + 2 * padding - k) / s + 1;
        Tensor3::from_fn(Shape3::new(fb.out_channels(), ho, wo), |m, y, x| {
            let mut acc = 0.0f32;
            for n in 0..fb.in_channels() {
                for i in 0..k {
                    for j in 0..k {
                        let iy = (y * s + i) as isize - padding as isize;
                        let ix = (x * s + j) as isize - padding as isize;
                        let v = if iy < 0 || ix < 0 || iy >= h || ix >= w {
                            0.0
                        } else {
                            input.get(n, iy as usize, ix as usize)
                        };
                        acc += fb.weights()[((m * fb.in_channels() + n) * k + i) * k + j] * v;
                    }
                }
            }
            acc + fb.biases()[m]
        })
    }

    fn random_bank(rng: &mut ChaCha8Rng, m: usize, n: usize, k: usize, s: usize) -> FilterBank {
        let w = (0..m * n * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b = (0..m).map(|_| rng.gen_range(-0.5..0.5)).collect();
        FilterBank::new(m, n, k, s, w, b).unwrap()
    }

    #[test]
    fn sum_of_inputs_with_ones_filter() {
        let input = Tensor3::from_vec(Shape3::new(1, 3, 3), (1..=9).map(|v| v as f32).collect()).unwrap();
        let fb = FilterBank::new(1, 1, 3, 1, vec![1.0; 9], vec![0.0]).unwrap();
        let out = conv_forward(&input, &fb, 0).unwrap();
        assert_eq!(out.shape(), Shape3::new(1, 1, 1));
        assert_eq!(out.data(), &[45.0]);
    }

    #[test]
    fn identity_filter() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = Tensor3::from_fn(Shape3::new(1, 11, 13), |_, _, _| rng.gen_range(-2.0..2.0));
        let fb = FilterBank::new(1, 1, 1, 1, vec![1.0], vec![0.0]).unwrap();
        assert_eq!(conv_forward(&input, &fb, 0).unwrap(), input);
    }

    #[test]
    fn matches_oracle_two_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let input = Tensor3::from_fn(Shape3::new(2, 5, 5), |_, _, _| rng.gen_range(-1.0..1.0));
        let fb = random_bank(&mut rng, 3, 2, 3, 1);
        let out = conv_forward(&input, &fb, 0).unwrap();
        assert_eq!(out, oracle(&input, &fb, 0));
    }

    #[test]
    fn matches_oracle_on_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..300 {
            let n = rng.gen_range(1..=4);
            let m = rng.gen_range(1..=4);
            let k = rng.gen_range(1..=5);
            let s = rng.gen_range(1..=3);
            let p = rng.gen_range(0..=k / 2 + 1);
            let h = rng.gen_range(1..=8);
            let w = rng.gen_range(1..=8);
            if h + 2 * p < k || w + 2 * p < k {
                continue;
            }
            let input = Tensor3::from_fn(Shape3::new(n, h, w), |_, _, _| rng.gen_range(-1.0..1.0));
            let fb = random_bank(&mut rng, m, n, k, s);
            let out = conv_forward(&input, &fb, p).unwrap();
            let expected = oracle(&input, &fb, p);
            assert_eq!(
                out, expected,
                "trial {trial}: n={n} m={m} k={k} s={s} p={p} h={h} w={w}"
            );
        }
    }

    #[test]
    fn masked_locations_match_dense_and_count_macs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let input = Tensor3::from_fn(Shape3::new(3, 12, 19), |_, _, _| rng.gen_range(0.0..1.0));
        let fb = random_bank(&mut rng, 4, 3, 3, 1);
        let dense = conv_forward(&input, &fb, 1).unwrap();
        let bits = BitTensor3::from_fn(dense.shape(), |m, y, x| m != 2 && (x * 7 + y * 3 + m) % 5 != 0);
        let removed: Vec<bool> = (0..4).map(|m| bits.channel_count_ones(m) == 0).collect();
        let units = lane_units(&bits);
        let mask = ConvMask {
            bits: &bits,
            removed: &removed,
            units: &units,
        };
        let (out, macs) = conv_execute("t", &input, &fb, 1, Some(&mask), None).unwrap();
        for m in 0..4 {
            for y in 0..12 {
                for x in 0..19 {
                    let want = if bits.get(m, y, x) { dense.get(m, y, x) } else { 0.0 };
                    assert_eq!(out.get(m, y, x).to_bits(), want.to_bits());
                }
            }
        }
        assert_eq!(macs, bits.count_ones() as u64 * 27);
    }

    #[test]
    fn dead_inputs_are_skipped_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut input = Tensor3::from_fn(Shape3::new(3, 9, 9), |_, _, _| rng.gen_range(0.0..1.0));
        for v in &mut input.data_mut()[81..162] {
            *v = 0.0;
        }
        let fb = random_bank(&mut rng, 2, 3, 5, 1);
        let (dense, full_macs) = conv_execute("t", &input, &fb, 2, None, None).unwrap();
        let dead = [false, true, false];
        let (skipped, macs) = conv_execute("t", &input, &fb, 2, None, Some(&dead)).unwrap();
        assert_eq!(dense, skipped);
        assert_eq!(full_macs - macs, 2 * 81 * 25);
    }

    #[test]
    fn shape_errors_name_layer() {
        let input = Tensor3::zeros(Shape3::new(2, 4, 4));
        let fb = FilterBank::new(1, 3, 3, 1, vec![0.0; 27], vec![0.0]).unwrap();
        let err = conv_execute("conv7", &input, &fb, 0, None, None).unwrap_err();
        assert!(err.to_string().contains("conv7"));
        let fb = FilterBank::new(1, 2, 5, 1, vec![0.0; 50], vec![0.0]).unwrap();
        assert!(conv_forward(&input, &fb, 0).is_err());
    }
}
