//! The two fixed reference architectures and their random initialization.
//!
//! MNIST (1×28×28):
//! `conv1(32, K=5) → relu → pool2 → conv2(64, K=5) → relu → pool2 → fc1(512) → relu → fc2(10) → softmax`
//!
//! CIFAR-10 (3×32×32):
//! `conv1(32, K=3) → relu → pool2 → conv2(64, K=3) → relu → pool2 → conv3(64, K=3) → relu → fc1(128) → relu → fc2(10) → softmax`
//!
//! All convolutions use stride 1 and "same" zero padding (`⌊K/2⌋`).

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{LayerKind, LayerSpec, Model};
use crate::error::{Error, Result};
use crate::tensor::{Dense, FilterBank, Shape3};

pub const MNIST_LABELS: [&str; 10] = ["0", "1", "2", "3", "4", "5", "6", "7", "8", "9"];
pub const CIFAR10_LABELS: [&str; 10] = [
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Architecture {
    Mnist,
    Cifar10,
}

impl Architecture {
    pub fn input_shape(self) -> Shape3 {
        match self {
            Architecture::Mnist => Shape3::new(1, 28, 28),
            Architecture::Cifar10 => Shape3::new(3, 32, 32),
        }
    }

    pub fn labels(self) -> Vec<String> {
        let src: &[&str] = match self {
            Architecture::Mnist => &MNIST_LABELS,
            Architecture::Cifar10 => &CIFAR10_LABELS,
        };
        src.iter().map(|s| s.to_string()).collect()
    }

    /// Builds the architecture with He-uniform weights and zero biases.
    pub fn build(self, seed: u64) -> Model {
        let mut init = Init(ChaCha8Rng::seed_from_u64(seed));
        let layers = match self {
            Architecture::Mnist => vec![
                init.conv("conv1", 32, 1, 5),
                relu("relu1"),
                pool("pool1"),
                init.conv("conv2", 64, 32, 5),
                relu("relu2"),
                pool("pool2"),
                init.dense("fc1", 64 * 7 * 7, 512),
                relu("relu3"),
                init.dense("fc2", 512, 10),
                LayerSpec::new("prob", LayerKind::Softmax),
            ],
            Architecture::Cifar10 => vec![
                init.conv("conv1", 32, 3, 3),
                relu("relu1"),
                pool("pool1"),
                init.conv("conv2", 64, 32, 3),
                relu("relu2"),
                pool("pool2"),
                init.conv("conv3", 64, 64, 3),
                relu("relu3"),
                init.dense("fc1", 64 * 8 * 8, 128),
                relu("relu4"),
                init.dense("fc2", 128, 10),
                LayerSpec::new("prob", LayerKind::Softmax),
            ],
        };
        Model::new(self.input_shape(), layers, self.labels()).expect("reference architecture is consistent")
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::Mnist => "mnist",
            Architecture::Cifar10 => "cifar10",
        })
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mnist" => Ok(Architecture::Mnist),
            "cifar10" | "cifar-10" | "cifar" => Ok(Architecture::Cifar10),
            other => Err(Error::invalid(format!(
                "unknown dataset `{other}` (expected mnist or cifar10)"
            ))),
        }
    }
}

fn relu(name: &str) -> LayerSpec {
    LayerSpec::new(name, LayerKind::Relu)
}

fn pool(name: &str) -> LayerSpec {
    LayerSpec::new(name, LayerKind::MaxPool { window: 2, stride: 2 })
}

struct Init(ChaCha8Rng);

impl Init {
    fn uniform(&mut self, n: usize, fan_in: usize) -> Vec<f32> {
        let limit = (6.0 / fan_in as f64).sqrt() as f32;
        (0..n).map(|_| self.0.gen_range(-limit..limit)).collect()
    }

    fn conv(&mut self, name: &str, m: usize, n: usize, k: usize) -> LayerSpec {
        let w = self.uniform(m * n * k * k, n * k * k);
        let filters = FilterBank::new(m, n, k, 1, w, vec![0.0; m]).expect("valid filter bank");
        LayerSpec::new(
            name,
            LayerKind::Conv {
                filters,
                padding: k / 2,
            },
        )
    }

    fn dense(&mut self, name: &str, inputs: usize, outputs: usize) -> LayerSpec {
        let w = self.uniform(inputs * outputs, inputs);
        let d = Dense::new(inputs, outputs, w, vec![0.0; outputs]).expect("valid dense layer");
        LayerSpec::new(name, LayerKind::FullyConnected(d))
    }
}
