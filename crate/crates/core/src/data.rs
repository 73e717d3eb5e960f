//! MNIST (IDX) and CIFAR-10 (binary batch) ingestion, class subsets and
//! per-class partitioning.
//!
//! Pixels are normalized to `[0, 1]` by dividing by 255; no mean is
//! subtracted, so network inputs stay nonnegative.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, FormatError, Result};
use crate::model::Architecture;
use crate::tensor::{Shape3, Tensor3};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD_LEN: usize = 1 + 3 * 32 * 32;

pub const MNIST_TRAIN_COUNT: usize = 60_000;
pub const MNIST_TEST_COUNT: usize = 10_000;
pub const CIFAR_TRAIN_COUNT: usize = 50_000;
pub const CIFAR_TEST_COUNT: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub image: Tensor3,
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub kind: Architecture,
    pub train: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        10
    }

    /// Loads whichever dataset `kind` names from `dir`.
    pub fn load(kind: Architecture, dir: impl AsRef<Path>) -> Result<Self> {
        match kind {
            Architecture::Mnist => load_mnist(dir),
            Architecture::Cifar10 => load_cifar10(dir),
        }
    }

    /// Splits the training samples into a fitting part and a held-out
    /// calibration part: every `stride`-th sample (index `stride - 1`,
    /// `2·stride - 1`, ...) goes to calibration. `stride = 10` holds out 10%.
    pub fn holdout(&self, stride: usize) -> (Vec<&LabeledSample>, Vec<&LabeledSample>) {
        assert!(stride >= 2, "holdout stride must be at least 2");
        let mut fit = Vec::new();
        let mut calib = Vec::new();
        for (i, s) in self.train.iter().enumerate() {
            if i % stride == stride - 1 {
                calib.push(s);
            } else {
                fit.push(s);
            }
        }
        (fit, calib)
    }
}

/// The kept classes `B ⊆ A` out of a universe of `α` classes.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ClassSubset {
    kept: Vec<usize>,
    universe: usize,
}

impl ClassSubset {
    pub fn new(kept: impl IntoIterator<Item = usize>, universe: usize) -> Result<Self> {
        let kept: BTreeSet<usize> = kept.into_iter().collect();
        if kept.is_empty() {
            return Err(Error::invalid("class subset must keep at least one class"));
        }
        if let Some(&bad) = kept.iter().find(|&&c| c >= universe) {
            return Err(Error::invalid(format!(
                "class id {bad} out of range for {universe} classes"
            )));
        }
        Ok(ClassSubset {
            kept: kept.into_iter().collect(),
            universe,
        })
    }

    pub fn all(universe: usize) -> Self {
        ClassSubset {
            kept: (0..universe).collect(),
            universe,
        }
    }

    /// Ascending kept class ids.
    pub fn kept(&self) -> &[usize] {
        &self.kept
    }

    pub fn universe(&self) -> usize {
        self.universe
    }

    pub fn len(&self) -> usize {
        self.kept.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept.is_empty()
    }

    pub fn contains(&self, class: usize) -> bool {
        self.kept.binary_search(&class).is_ok()
    }

    /// Classes in the universe that are not kept.
    pub fn removed(&self) -> Vec<usize> {
        (0..self.universe).filter(|c| !self.contains(*c)).collect()
    }

    pub fn removed_fraction(&self) -> f64 {
        (self.universe - self.kept.len()) as f64 / self.universe as f64
    }
}

impl fmt::Display for ClassSubset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ids: Vec<String> = self.kept.iter().map(|c| c.to_string()).collect();
        write!(f, "{{{}}}", ids.join(","))
    }
}

/// Parses a comma-separated class list such as `0,1,7`.
pub fn parse_class_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| usize::from_str(t).map_err(|_| Error::invalid(format!("`{t}` is not a class id"))))
        .collect()
}

/// Per-class sample index lists, one per kept class, in subset order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassPartition {
    pub classes: Vec<usize>,
    pub members: Vec<Vec<usize>>,
}

impl ClassPartition {
    pub fn cardinalities(&self) -> Vec<usize> {
        self.members.iter().map(Vec::len).collect()
    }

    pub fn of(&self, class: usize) -> Option<&[usize]> {
        self.classes
            .iter()
            .position(|&c| c == class)
            .map(|i| self.members[i].as_slice())
    }
}

/// Indices of the samples of each kept class, in original order.
pub fn partition_by_class<S: AsRef<LabeledSample>>(samples: &[S], subset: &ClassSubset) -> ClassPartition {
    let mut members = vec![Vec::new(); subset.len()];
    for (i, s) in samples.iter().enumerate() {
        if let Ok(pos) = subset.kept().binary_search(&s.as_ref().label) {
            members[pos].push(i);
        }
    }
    ClassPartition {
        classes: subset.kept().to_vec(),
        members,
    }
}

impl AsRef<LabeledSample> for LabeledSample {
    fn as_ref(&self) -> &LabeledSample {
        self
    }
}

fn be_u32(b: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Parses an IDX3 image file and its IDX1 label file.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Vec<LabeledSample>> {
    if images.len() < 16 {
        return Err(FormatError::Truncated("IDX image header".into()).into());
    }
    if labels.len() < 8 {
        return Err(FormatError::Truncated("IDX label header".into()).into());
    }
    let magic = be_u32(images, 0);
    if magic != IDX_IMAGES_MAGIC {
        return Err(FormatError::BadMagic {
            expected: IDX_IMAGES_MAGIC.to_be_bytes().to_vec(),
            found: images[..4].to_vec(),
        }
        .into());
    }
    let magic = be_u32(labels, 0);
    if magic != IDX_LABELS_MAGIC {
        return Err(FormatError::BadMagic {
            expected: IDX_LABELS_MAGIC.to_be_bytes().to_vec(),
            found: labels[..4].to_vec(),
        }
        .into());
    }
    let count = be_u32(images, 4) as usize;
    let rows = be_u32(images, 8) as usize;
    let cols = be_u32(images, 12) as usize;
    let label_count = be_u32(labels, 4) as usize;
    if count != label_count {
        return Err(FormatError::Invalid(format!("{count} images but {label_count} labels")).into());
    }
    let pixels = rows * cols;
    let need = 16 + count * pixels;
    if images.len() < need {
        return Err(FormatError::Truncated(format!("IDX images: need {need} bytes, file has {}", images.len())).into());
    }
    if labels.len() < 8 + count {
        return Err(FormatError::Truncated(format!(
            "IDX labels: need {} bytes, file has {}",
            8 + count,
            labels.len()
        ))
        .into());
    }
    if images.len() != need || labels.len() != 8 + count {
        return Err(FormatError::Invalid("IDX file longer than its header declares".into()).into());
    }
    let shape = Shape3::new(1, rows, cols);
    (0..count)
        .map(|i| {
            let label = labels[8 + i] as usize;
            if label > 9 {
                return Err(FormatError::Invalid(format!("label {label} at record {i}")).into());
            }
            let raw = &images[16 + i * pixels..16 + (i + 1) * pixels];
            let data = raw.iter().map(|&b| b as f32 / 255.0).collect();
            Ok(LabeledSample {
                image: Tensor3::from_vec(shape, data)?,
                label,
            })
        })
        .collect()
}

/// Parses an IDX3 image file on its own, e.g. inputs for a single inference.
pub fn parse_idx_images(images: &[u8]) -> Result<Vec<Tensor3>> {
    if images.len() < 16 {
        return Err(FormatError::Truncated("IDX image header".into()).into());
    }
    if be_u32(images, 0) != IDX_IMAGES_MAGIC {
        return Err(FormatError::BadMagic {
            expected: IDX_IMAGES_MAGIC.to_be_bytes().to_vec(),
            found: images[..4].to_vec(),
        }
        .into());
    }
    let (count, rows, cols) = (
        be_u32(images, 4) as usize,
        be_u32(images, 8) as usize,
        be_u32(images, 12) as usize,
    );
    let pixels = rows * cols;
    let need = 16 + count * pixels;
    if images.len() < need {
        return Err(FormatError::Truncated(format!("IDX images: need {need} bytes, file has {}", images.len())).into());
    }
    if images.len() != need {
        return Err(FormatError::Invalid("IDX file longer than its header declares".into()).into());
    }
    let shape = Shape3::new(1, rows, cols);
    images[16..]
        .chunks_exact(pixels.max(1))
        .take(count)
        .map(|raw| Tensor3::from_vec(shape, raw.iter().map(|&b| b as f32 / 255.0).collect()))
        .collect()
}

/// Parses concatenated CIFAR-10 binary records (label byte + 3072 pixels).
pub fn parse_cifar(bytes: &[u8]) -> Result<Vec<LabeledSample>> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD_LEN) {
        return Err(FormatError::Truncated(format!(
            "CIFAR batch of {} bytes is not a whole number of {CIFAR_RECORD_LEN}-byte records",
            bytes.len()
        ))
        .into());
    }
    let shape = Shape3::new(3, 32, 32);
    bytes
        .chunks_exact(CIFAR_RECORD_LEN)
        .enumerate()
        .map(|(i, rec)| {
            let label = rec[0] as usize;
            if label > 9 {
                return Err(FormatError::Invalid(format!("label {label} at record {i}")).into());
            }
            let data = rec[1..].iter().map(|&b| b as f32 / 255.0).collect();
            Ok(LabeledSample {
                image: Tensor3::from_vec(shape, data)?,
                label,
            })
        })
        .collect()
}

fn read(dir: &Path, name: &str) -> Result<Vec<u8>> {
    let path = dir.join(name);
    fs::read(&path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn check_count(split: &str, got: usize, expected: usize) -> Result<()> {
    if got != expected {
        return Err(FormatError::Invalid(format!("{split} split has {got} samples, expected {expected}")).into());
    }
    Ok(())
}

/// Loads `train-images-idx3-ubyte`, `train-labels-idx1-ubyte`,
/// `t10k-images-idx3-ubyte` and `t10k-labels-idx1-ubyte` from `dir`.
pub fn load_mnist(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let train = parse_idx(
        &read(dir, "train-images-idx3-ubyte")?,
        &read(dir, "train-labels-idx1-ubyte")?,
    )?;
    let test = parse_idx(
        &read(dir, "t10k-images-idx3-ubyte")?,
        &read(dir, "t10k-labels-idx1-ubyte")?,
    )?;
    check_count("MNIST train", train.len(), MNIST_TRAIN_COUNT)?;
    check_count("MNIST test", test.len(), MNIST_TEST_COUNT)?;
    if train
        .iter()
        .chain(&test)
        .any(|s| s.image.shape() != Shape3::new(1, 28, 28))
    {
        return Err(FormatError::Invalid("MNIST images must be 28×28".into()).into());
    }
    Ok(Dataset {
        kind: Architecture::Mnist,
        train,
        test,
    })
}

/// Loads `data_batch_1.bin` … `data_batch_5.bin` and `test_batch.bin` from `dir`.
pub fn load_cifar10(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let mut train = Vec::with_capacity(CIFAR_TRAIN_COUNT);
    for i in 1..=5 {
        train.extend(parse_cifar(&read(dir, &format!("data_batch_{i}.bin"))?)?);
    }
    let test = parse_cifar(&read(dir, "test_batch.bin")?)?;
    check_count("CIFAR-10 train", train.len(), CIFAR_TRAIN_COUNT)?;
    check_count("CIFAR-10 test", test.len(), CIFAR_TEST_COUNT)?;
    Ok(Dataset {
        kind: Architecture::Cifar10,
        train,
        test,
    })
}

/// Builds IDX image and label file contents; used for fixtures and tooling.
pub fn encode_idx(rows: usize, cols: usize, samples: &[(Vec<u8>, u8)]) -> (Vec<u8>, Vec<u8>) {
    let mut images = Vec::with_capacity(16 + samples.len() * rows * cols);
    images.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    images.extend_from_slice(&(samples.len() as u32).to_be_bytes());
    images.extend_from_slice(&(rows as u32).to_be_bytes());
    images.extend_from_slice(&(cols as u32).to_be_bytes());
    let mut labels = Vec::with_capacity(8 + samples.len());
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(samples.len() as u32).to_be_bytes());
    for (px, label) in samples {
        assert_eq!(px.len(), rows * cols);
        images.extend_from_slice(px);
        labels.push(*label);
    }
    (images, labels)
}
