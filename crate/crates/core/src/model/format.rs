//! DNET model container. Byte layout (all integers `u32` little-endian,
//! all floats IEEE-754 `f32` little-endian, strings `u32` length + UTF-8):
//!
//! ```text
//! "DNET"  version=1
//! input channels, height, width
//! class count, class label strings
//! layer count
//! per layer: u8 kind tag, name string, then
//!   0 conv     M, N, K, S, padding, M·N·K² weights, M biases
//!   1 relu     -
//!   2 maxpool  window, stride
//!   3 fc       outputs, inputs, outputs·inputs weights (row-major), outputs biases
//!   4 softmax  -
//! ```
//!
//! See `docs/FORMATS.md` for the full description.

use std::fs;
use std::path::Path;

use super::{LayerKind, LayerSpec, Model};
use crate::binio::{Reader, Writer};
use crate::error::{FormatError, Result};
use crate::tensor::{Dense, FilterBank, Shape3};

pub const MAGIC: &[u8; 4] = b"DNET";
pub const VERSION: u32 = 1;

const TAG_CONV: u8 = 0;
const TAG_RELU: u8 = 1;
const TAG_MAXPOOL: u8 = 2;
const TAG_FC: u8 = 3;
const TAG_SOFTMAX: u8 = 4;

pub fn write_model(model: &Model) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(MAGIC);
    w.u32(VERSION);
    let s = model.input_shape();
    w.usize(s.channels);
    w.usize(s.height);
    w.usize(s.width);
    w.usize(model.class_labels().len());
    for label in model.class_labels() {
        w.string(label);
    }
    w.usize(model.layers().len());
    for layer in model.layers() {
        match &layer.kind {
            LayerKind::Conv { filters, padding } => {
                w.u8(TAG_CONV);
                w.string(&layer.name);
                w.usize(filters.out_channels());
                w.usize(filters.in_channels());
                w.usize(filters.kernel());
                w.usize(filters.stride());
                w.usize(*padding);
                w.f32s(filters.weights());
                w.f32s(filters.biases());
            }
            LayerKind::Relu => {
                w.u8(TAG_RELU);
                w.string(&layer.name);
            }
            LayerKind::MaxPool { window, stride } => {
                w.u8(TAG_MAXPOOL);
                w.string(&layer.name);
                w.usize(*window);
                w.usize(*stride);
            }
            LayerKind::FullyConnected(d) => {
                w.u8(TAG_FC);
                w.string(&layer.name);
                w.usize(d.outputs());
                w.usize(d.inputs());
                w.f32s(d.weights());
                w.f32s(d.biases());
            }
            LayerKind::Softmax => {
                w.u8(TAG_SOFTMAX);
                w.string(&layer.name);
            }
        }
    }
    w.finish()
}

fn invalid(e: crate::error::Error) -> crate::error::Error {
    match e {
        crate::error::Error::Format(f) => f.into(),
        other => FormatError::Invalid(other.to_string()).into(),
    }
}

pub fn read_model(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader::new(bytes);
    r.header(MAGIC, VERSION)?;
    let input = Shape3::new(
        r.usize("input channels")?,
        r.usize("input height")?,
        r.usize("input width")?,
    );
    let nclasses = r.usize("class count")?;
    let mut labels = Vec::with_capacity(nclasses.min(1 << 16));
    for _ in 0..nclasses {
        labels.push(r.string("class label")?);
    }
    let nlayers = r.usize("layer count")?;
    let mut layers = Vec::with_capacity(nlayers.min(1 << 12));
    for _ in 0..nlayers {
        let tag = r.u8("layer tag")?;
        let name = r.string("layer name")?;
        let kind = match tag {
            TAG_CONV => {
                let m = r.usize("conv M")?;
                let n = r.usize("conv N")?;
                let k = r.usize("conv K")?;
                let s = r.usize("conv S")?;
                let padding = r.usize("conv padding")?;
                let count = m
                    .checked_mul(n)
                    .and_then(|v| v.checked_mul(k))
                    .and_then(|v| v.checked_mul(k))
                    .ok_or_else(|| FormatError::Invalid(format!("layer `{name}`: weight count overflows")))?;
                let weights = r.f32s(count, "conv weights")?;
                let biases = r.f32s(m, "conv biases")?;
                let filters = FilterBank::new(m, n, k, s, weights, biases).map_err(invalid)?;
                LayerKind::Conv { filters, padding }
            }
            TAG_RELU => LayerKind::Relu,
            TAG_MAXPOOL => LayerKind::MaxPool {
                window: r.usize("pool window")?,
                stride: r.usize("pool stride")?,
            },
            TAG_FC => {
                let outputs = r.usize("fc outputs")?;
                let inputs = r.usize("fc inputs")?;
                let count = outputs
                    .checked_mul(inputs)
                    .ok_or_else(|| FormatError::Invalid(format!("layer `{name}`: weight count overflows")))?;
                let weights = r.f32s(count, "fc weights")?;
                let biases = r.f32s(outputs, "fc biases")?;
                LayerKind::FullyConnected(Dense::new(inputs, outputs, weights, biases).map_err(invalid)?)
            }
            TAG_SOFTMAX => LayerKind::Softmax,
            other => return Err(FormatError::Invalid(format!("unknown layer tag {other}")).into()),
        };
        layers.push(LayerSpec { name, kind });
    }
    r.finish()?;
    Model::new(input, layers, labels).map_err(invalid)
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, write_model(model))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    read_model(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::model::Architecture;

    #[test]
    fn round_trip_is_lossless_and_idempotent() {
        let model = Architecture::Cifar10.build(5);
        let bytes = write_model(&model);
        let back = read_model(&bytes).unwrap();
        assert_eq!(back, model);
        assert_eq!(write_model(&back), bytes);
    }

    #[test]
    fn truncation_is_reported() {
        let bytes = write_model(&Architecture::Mnist.build(1));
        for cut in [0, 3, 7, 20, bytes.len() / 2, bytes.len() - 1] {
            match read_model(&bytes[..cut]) {
                Err(Error::Format(FormatError::Truncated(_))) => {}
                other => panic!("cut at {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = write_model(&Architecture::Mnist.build(1));
        bytes[0] = b'X';
        assert!(matches!(
            read_model(&bytes),
            Err(Error::Format(FormatError::BadMagic { .. }))
        ));
        bytes[0] = b'D';
        bytes[4..8].copy_from_slice(&VERSION.to_be_bytes());
        assert!(matches!(
            read_model(&bytes),
            Err(Error::Format(FormatError::EndiannessMismatch))
        ));
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            read_model(&bytes),
            Err(Error::Format(FormatError::UnsupportedVersion { found: 7, .. }))
        ));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = write_model(&Architecture::Mnist.build(1));
        bytes.push(0);
        assert!(read_model(&bytes).is_err());
    }
}
