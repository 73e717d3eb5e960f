//! Dense activation volumes and the arithmetic of a convolutional neuron.
//!
//! All volumes are stored channel-major, then row-major. A [`FilterBank`]
//! holds `M` neurons, each a `N × K × K` filter with a restricted receptive
//! field; flattened, filter `m` is exactly the `W′` vector of the tile
//! formulation in [`tile`].

mod conv;
mod dense;
pub mod tile;

use std::fmt;

use crate::error::{Error, Result};

pub use conv::conv_forward;
pub(crate) use conv::{conv_execute, lane_units, ConvMask, LaneMask};
pub use dense::Dense;
pub use tile::{flatten_tile, sorted_eval, sparse_eval, FlatTile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape3 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape3 {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Shape3 {
            channels,
            height,
            width,
        }
    }

    pub const fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.height * self.width
    }
}

impl fmt::Display for Shape3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}×{}×{}", self.channels, self.height, self.width)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    shape: Shape3,
    data: Vec<f32>,
}

impl Tensor3 {
    pub fn zeros(shape: Shape3) -> Self {
        Tensor3 {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn filled(shape: Shape3, value: f32) -> Self {
        Tensor3 {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape3, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::shape(
                "tensor",
                format!("{shape} needs {} values, got {}", shape.len(), data.len()),
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite value at index {pos}")));
        }
        Ok(Tensor3 { shape, data })
    }

    pub fn from_fn(shape: Shape3, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for c in 0..shape.channels {
            for y in 0..shape.height {
                for x in 0..shape.width {
                    data.push(f(c, y, x));
                }
            }
        }
        Tensor3 { shape, data }
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.shape.height + y) * self.shape.width + x]
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.shape.plane();
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn max_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    /// Reinterprets the data with a new shape of the same length.
    pub fn reshape(self, shape: Shape3) -> Result<Self> {
        if shape.len() != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {} values as {shape}", self.data.len()),
            ));
        }
        Ok(Tensor3 { shape, data: self.data })
    }
}

/// `M` convolution filters of size `N × K × K`, applied with stride `S`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    out_channels: usize,
    in_channels: usize,
    kernel: usize,
    stride: usize,
    weights: Vec<f32>,
    biases: Vec<f32>,
    /// Weights as `[l][m]`, each row padded to a whole number of lane groups.
    lanes: Vec<f32>,
}

impl FilterBank {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
        stride: usize,
        weights: Vec<f32>,
        biases: Vec<f32>,
    ) -> Result<Self> {
        if kernel == 0 || stride == 0 || out_channels == 0 || in_channels == 0 {
            return Err(Error::invalid(format!(
                "filter bank needs positive M, N, K and S (got M={out_channels}, N={in_channels}, K={kernel}, S={stride})"
            )));
        }
        let expected = out_channels * in_channels * kernel * kernel;
        if weights.len() != expected {
            return Err(Error::invalid(format!(
                "filter bank {out_channels}×{in_channels}×{kernel}×{kernel} needs {expected} weights, got {}",
                weights.len()
            )));
        }
        if biases.len() != out_channels {
            return Err(Error::invalid(format!(
                "filter bank needs {out_channels} biases, got {}",
                biases.len()
            )));
        }
        if weights.iter().chain(&biases).any(|v| !v.is_finite()) {
            return Err(Error::invalid("filter bank contains non-finite parameters"));
        }
        let row = out_channels.next_multiple_of(conv::LANES);
        let len = in_channels * kernel * kernel;
        let mut lanes = vec![0.0f32; len * row];
        for m in 0..out_channels {
            for l in 0..len {
                lanes[l * row + m] = weights[m * len + l];
            }
        }
        Ok(FilterBank {
            out_channels,
            in_channels,
            kernel,
            stride,
            weights,
            biases,
            lanes,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn biases(&self) -> &[f32] {
        &self.biases
    }

    /// Length of one flattened filter, `N·K²`.
    pub fn filter_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub(crate) fn lane_weights(&self) -> &[f32] {
        &self.lanes
    }

    pub(crate) fn lane_stride(&self) -> usize {
        self.out_channels.next_multiple_of(conv::LANES)
    }

    /// Flattened weights of neuron `m` in `l = K·(n·K + i) + j` order.
    pub fn filter(&self, m: usize) -> &[f32] {
        let len = self.filter_len();
        &self.weights[m * len..(m + 1) * len]
    }

    /// Output spatial size for an input of `h × w` with zero padding `padding`.
    pub fn output_dims(&self, h: usize, w: usize, padding: usize) -> Option<(usize, usize)> {
        let (ph, pw) = (h + 2 * padding, w + 2 * padding);
        if ph < self.kernel || pw < self.kernel {
            return None;
        }
        Some((
            (ph - self.kernel) / self.stride + 1,
            (pw - self.kernel) / self.stride + 1,
        ))
    }
}

/// Positive part, element-wise.
pub fn relu(input: &Tensor3) -> Tensor3 {
    let mut out = input.clone();
    relu_in_place(&mut out);
    out
}

pub(crate) fn relu_in_place(t: &mut Tensor3) {
    for v in &mut t.data {
        *v = if *v > 0.0 { *v } else { 0.0 };
    }
}

/// Max over `window × window` windows placed every `stride` positions (no padding).
pub fn maxpool(input: &Tensor3, window: usize, stride: usize) -> Result<Tensor3> {
    let s = input.shape();
    if window == 0 || stride == 0 {
        return Err(Error::invalid("maxpool window and stride must be positive"));
    }
    if window > s.height || window > s.width {
        return Err(Error::shape("maxpool", format!("window {window} exceeds input {s}")));
    }
    let ho = (s.height - window) / stride + 1;
    let wo = (s.width - window) / stride + 1;
    let out_shape = Shape3::new(s.channels, ho, wo);
    let mut out = Vec::with_capacity(out_shape.len());
    for c in 0..s.channels {
        let plane = input.channel(c);
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f32::NEG_INFINITY;
                for dy in 0..window {
                    let row = &plane[(oy * stride + dy) * s.width + ox * stride..][..window];
                    for &v in row {
                        if v > best {
                            best = v;
                        }
                    }
                }
                out.push(best);
            }
        }
    }
    Ok(Tensor3 {
        shape: out_shape,
        data: out,
    })
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f32 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
