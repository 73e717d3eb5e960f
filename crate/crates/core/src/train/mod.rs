//! Minibatch SGD with momentum and softmax cross-entropy, used to produce
//! the trained reference models.

mod gemm;
mod network;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{ClassSubset, LabeledSample};
use crate::error::{Error, Result};
use crate::model::{Architecture, Model};

pub use gemm::Scalar;
pub use network::{Network, Params};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub seed: u64,
    pub dataset: Architecture,
}

impl TrainConfig {
    /// Defaults for the reference architectures (about 99% MNIST test
    /// accuracy after two epochs).
    pub fn for_dataset(dataset: Architecture) -> Self {
        TrainConfig {
            epochs: 2,
            batch_size: 32,
            learning_rate: 0.01,
            momentum: 0.9,
            seed: 1,
            dataset,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate {} is not a finite nonnegative number",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Trains a copy of `template` on `samples`. Shuffling is driven by
/// `cfg.seed`; the run is single-threaded and therefore reproducible.
pub fn train<S: AsRef<LabeledSample>>(template: &Model, samples: &[S], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Empty("training set has no samples".into()));
    }
    let classes = template.num_classes();
    for s in samples {
        let s = s.as_ref();
        if s.image.shape() != template.input_shape() {
            return Err(Error::shape(
                "input",
                format!(
                    "sample is {}, model expects {}",
                    s.image.shape(),
                    template.input_shape()
                ),
            ));
        }
        if s.label >= classes {
            return Err(Error::invalid(format!(
                "label {} out of range for {classes} classes",
                s.label
            )));
        }
    }

    let mut net = Network::<f32>::from_model(template)?;
    let mut velocity = net.zero_params();
    let mut ws = network::Workspace::new(&net);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let in_len = net.input_len();
    let mut inputs = Vec::with_capacity(cfg.batch_size * in_len);
    let mut labels = Vec::with_capacity(cfg.batch_size);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            inputs.clear();
            labels.clear();
            for &i in chunk {
                let s = samples[i].as_ref();
                inputs.extend_from_slice(s.image.data());
                labels.push(s.label);
            }
            let loss = ws.batch(&net, &inputs, &labels) as f64;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, batch: bi, loss });
            }
            total += loss * chunk.len() as f64;
            net.step(&ws.grads, &mut velocity, cfg.learning_rate, cfg.momentum);
            if bi % 200 == 0 {
                log::debug!("epoch {epoch} batch {bi}: loss {loss:.4}");
            }
        }
        let mean = total / samples.len() as f64;
        log::info!("epoch {}/{}: mean loss {mean:.5}", epoch + 1, cfg.epochs);
        epoch_losses.push(mean);
    }
    Ok(TrainOutcome {
        model: net.to_model(template)?,
        epoch_losses,
    })
}

/// Top-1 accuracy over `samples`, optionally restricted to samples whose
/// label is in `subset`. The full argmax over all outputs is used either way.
pub fn evaluate_accuracy<S: AsRef<LabeledSample>>(
    model: &Model,
    samples: &[S],
    subset: Option<&ClassSubset>,
) -> Result<f64> {
    let mut seen = 0usize;
    let mut correct = 0usize;
    for s in samples {
        let s = s.as_ref();
        if subset.is_some_and(|b| !b.contains(s.label)) {
            continue;
        }
        seen += 1;
        if model.forward(&s.image, false)?.predicted == s.label {
            correct += 1;
        }
    }
    if seen == 0 {
        return Err(Error::Empty("no samples to evaluate".into()));
    }
    Ok(correct as f64 / seen as f64)
}
