//! One neuron evaluated on one input tile, in flattened, sorted and
//! truncated form.
//!
//! A tile of `N` channels and `K × K` spatial extent is flattened with index
//! `l = K·(n·K + i) + j`, which is the same order in which a [`FilterBank`]
//! stores each filter. Sorting the tile in descending order pushes zero
//! (dormant) activations to the end, and [`sparse_eval`] drops that tail.
//!
//! [`FilterBank`]: super::FilterBank

use super::Tensor3;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct FlatTile(Vec<f32>);

impl FlatTile {
    pub fn new(values: Vec<f32>) -> Self {
        FlatTile(values)
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Fraction of exactly-zero entries.
    pub fn zero_fraction(&self) -> f64 {
        if self.0.is_empty() {
            return 0.0;
        }
        self.0.iter().filter(|&&v| v == 0.0).count() as f64 / self.0.len() as f64
    }

    /// Plain dot product in ascending index order.
    pub fn dot(&self, other: &FlatTile) -> Result<f32> {
        check_len(self, other)?;
        let mut acc = 0.0f32;
        for (&a, &b) in self.0.iter().zip(&other.0) {
            acc += a * b;
        }
        Ok(acc)
    }
}

impl From<&[f32]> for FlatTile {
    fn from(v: &[f32]) -> Self {
        FlatTile(v.to_vec())
    }
}

fn check_len(a: &FlatTile, b: &FlatTile) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "tile and filter lengths differ ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Flattens the `K × K` tile whose top-left corner sits at `(top, left)` in
/// input coordinates. Positions inside the zero-padding border read as `0`;
/// the tile must lie within the padded input.
pub fn flatten_tile(input: &Tensor3, top: isize, left: isize, kernel: usize, padding: usize) -> Result<FlatTile> {
    let p = padding as isize;
    let (h, w) = (input.height() as isize, input.width() as isize);
    let k = kernel as isize;
    if kernel == 0 || top < -p || left < -p || top + k > h + p || left + k > w + p {
        return Err(Error::invalid(format!(
            "tile at ({top}, {left}) of size {kernel} falls outside the {}×{} input padded by {padding}",
            h, w
        )));
    }
    let mut values = Vec::with_capacity(input.channels() * kernel * kernel);
    for n in 0..input.channels() {
        for i in 0..k {
            for j in 0..k {
                let (y, x) = (top + i, left + j);
                let v = if y < 0 || x < 0 || y >= h || x >= w {
                    0.0
                } else {
                    input.get(n, y as usize, x as usize)
                };
                values.push(v);
            }
        }
    }
    Ok(FlatTile(values))
}

/// Stable descending order of the tile; ties keep their original order.
fn descending_order(tile: &FlatTile) -> Vec<usize> {
    let mut order: Vec<usize> = (0..tile.len()).collect();
    order.sort_by(|&a, &b| tile.0[b].total_cmp(&tile.0[a]));
    order
}

fn permuted_sum(tile: &FlatTile, weights: &FlatTile, order: &[usize], bias: f32) -> f32 {
    let mut acc = 0.0f32;
    for &idx in order {
        acc += weights.0[idx] * tile.0[idx];
    }
    let v = acc + bias;
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// `ReLU(Σ W″·X″ + b)` where `X″` is the tile sorted in descending order and
/// `W″` the weights permuted alongside. Summation follows the sorted order.
pub fn sorted_eval(tile: &FlatTile, weights: &FlatTile, bias: f32) -> Result<f32> {
    check_len(tile, weights)?;
    let order = descending_order(tile);
    Ok(permuted_sum(tile, weights, &order, bias))
}

/// Like [`sorted_eval`] but only the first `⌈(1 − τ)·len⌉` sorted terms are
/// accumulated. The bias is always added.
pub fn sparse_eval(tile: &FlatTile, weights: &FlatTile, bias: f32, tau: f64) -> Result<f32> {
    check_len(tile, weights)?;
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::invalid(format!("sparsity ratio {tau} outside [0, 1]")));
    }
    let order = descending_order(tile);
    // tau·len is an integer count in practice; absorb representation error.
    let dropped = ((tau * tile.len() as f64) + 1e-9).floor() as usize;
    let kept = tile.len() - dropped.min(tile.len());
    Ok(permuted_sum(tile, weights, &order[..kept], bias))
}
