//! DBMP removal-plan container. Integers are `u32` little-endian, floats
//! IEEE-754 `f32` little-endian, strings `u32` length + UTF-8:
//!
//! ```text
//! "DBMP"  version=1
//! universe (class count of the model)
//! kept count, kept class ids (ascending)
//! layer count
//! per layer: name string, M, H, W, TH (f32),
//!            ⌈M·H·W/8⌉ bytes of keep-bits, row-major, LSB-first
//! ```

use std::fs;
use std::path::Path;

use super::{LayerPlan, RemovalPlan};
use crate::binio::{Reader, Writer};
use crate::bitmap::BitTensor3;
use crate::data::ClassSubset;
use crate::error::{FormatError, Result};
use crate::tensor::Shape3;

pub const MAGIC: &[u8; 4] = b"DBMP";
pub const VERSION: u32 = 1;

pub fn write_plan(plan: &RemovalPlan) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.usize(plan.kept().universe());
    w.usize(plan.kept().len());
    for &c in plan.kept().kept() {
        w.usize(c);
    }
    w.usize(plan.layers().len());
    for layer in plan.layers() {
        let s = layer.bitmap().shape();
        w.string(&layer.name);
        w.usize(s.channels);
        w.usize(s.height);
        w.usize(s.width);
        w.f32(layer.threshold);
        w.bytes(&layer.bitmap().to_bytes());
    }
    w.finish()
}

pub fn read_plan(bytes: &[u8]) -> Result<RemovalPlan> {
    let mut r = Reader::new(bytes);
    r.header(MAGIC, VERSION)?;
    let universe = r.usize("class universe")?;
    let count = r.usize("kept class count")?;
    let mut kept = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let c = r.usize("kept class id")?;
        if kept.last().is_some_and(|&p| p >= c) {
            return Err(FormatError::Invalid("kept class ids must be strictly ascending".into()).into());
        }
        kept.push(c);
    }
    let kept = ClassSubset::new(kept, universe).map_err(|e| FormatError::Invalid(e.to_string()))?;
    let nlayers = r.usize("layer count")?;
    let mut layers = Vec::with_capacity(nlayers.min(1 << 12));
    for _ in 0..nlayers {
        let name = r.string("layer name")?;
        let shape = Shape3::new(r.usize("bitmap M")?, r.usize("bitmap H")?, r.usize("bitmap W")?);
        let threshold = r.f32("threshold")?;
        if !(threshold >= 0.0 && threshold.is_finite()) {
            return Err(FormatError::Invalid(format!("layer `{name}`: threshold {threshold}")).into());
        }
        let len = shape
            .channels
            .checked_mul(shape.height)
            .and_then(|v| v.checked_mul(shape.width))
            .ok_or_else(|| FormatError::Invalid(format!("layer `{name}`: bitmap size overflows")))?;
        let raw = r.take(len.div_ceil(8), "bitmap bits")?;
        let bits = BitTensor3::from_bytes(shape, raw).map_err(|e| FormatError::Invalid(e.to_string()))?;
        layers.push(LayerPlan::new(name, bits, threshold));
    }
    r.finish()?;
    Ok(RemovalPlan::new(kept, layers))
}

pub fn save_plan(plan: &RemovalPlan, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, write_plan(plan))?;
    Ok(())
}

pub fn load_plan(path: impl AsRef<Path>) -> Result<RemovalPlan> {
    read_plan(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn sample_plan() -> RemovalPlan {
        let a = BitTensor3::from_fn(Shape3::new(3, 2, 5), |c, y, x| c != 1 && (x + y) % 3 != 0);
        let b = BitTensor3::from_fn(Shape3::new(2, 1, 1), |c, _, _| c == 0);
        RemovalPlan::new(
            ClassSubset::new([1, 4, 9], 10).unwrap(),
            vec![LayerPlan::new("conv1", a, 0.25), LayerPlan::new("conv2", b, 1.5)],
        )
    }

    #[test]
    fn round_trip_is_lossless() {
        let plan = sample_plan();
        let bytes = write_plan(&plan);
        let back = read_plan(&bytes).unwrap();
        assert_eq!(back, plan);
        assert_eq!(write_plan(&back), bytes);
        assert_eq!(back.layers()[0].complete_removals(), vec![1]);
    }

    #[test]
    fn corruption_is_reported() {
        let bytes = write_plan(&sample_plan());
        for cut in [0, 2, 6, 11, bytes.len() - 1] {
            assert!(
                matches!(read_plan(&bytes[..cut]), Err(Error::Format(FormatError::Truncated(_)))),
                "cut {cut}"
            );
        }
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(
            read_plan(&bad),
            Err(Error::Format(FormatError::BadMagic { .. }))
        ));
        let mut swapped = bytes.clone();
        swapped[4..8].copy_from_slice(&VERSION.to_be_bytes());
        assert!(matches!(
            read_plan(&swapped),
            Err(Error::Format(FormatError::EndiannessMismatch))
        ));
        let mut extra = bytes.clone();
        extra.push(7);
        assert!(read_plan(&extra).is_err());
        // kept id 9 → 10 is outside the universe
        let mut out_of_range = bytes;
        out_of_range[24..28].copy_from_slice(&10u32.to_le_bytes());
        assert!(matches!(
            read_plan(&out_of_range),
            Err(Error::Format(FormatError::Invalid(_)))
        ));
    }
}
