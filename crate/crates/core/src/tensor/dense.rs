use crate::error::{Error, Result};

/// Fully connected layer, `out = W·x + b` with `W` stored `outputs × inputs`.
///
/// A transposed copy of the weights is kept so that the matrix-vector
/// product can run across all outputs at once while still summing each
/// output in ascending input order.
#[derive(Debug, Clone)]
pub struct Dense {
    inputs: usize,
    outputs: usize,
    weights: Vec<f32>,
    biases: Vec<f32>,
    transposed: Vec<f32>,
}

impl PartialEq for Dense {
    fn eq(&self, other: &Self) -> bool {
        self.inputs == other.inputs
            && self.outputs == other.outputs
            && self.weights == other.weights
            && self.biases == other.biases
    }
}

impl Dense {
    pub fn new(inputs: usize, outputs: usize, weights: Vec<f32>, biases: Vec<f32>) -> Result<Self> {
        if inputs == 0 || outputs == 0 {
            return Err(Error::invalid("dense layer needs positive input and output sizes"));
        }
        if weights.len() != inputs * outputs {
            return Err(Error::invalid(format!(
                "dense layer {outputs}×{inputs} needs {} weights, got {}",
                inputs * outputs,
                weights.len()
            )));
        }
        if biases.len() != outputs {
            return Err(Error::invalid(format!(
                "dense layer needs {outputs} biases, got {}",
                biases.len()
            )));
        }
        if weights.iter().chain(&biases).any(|v| !v.is_finite()) {
            return Err(Error::invalid("dense layer contains non-finite parameters"));
        }
        let mut transposed = vec![0.0; weights.len()];
        for o in 0..outputs {
            for i in 0..inputs {
                transposed[i * outputs + o] = weights[o * inputs + i];
            }
        }
        Ok(Dense {
            inputs,
            outputs,
            weights,
            biases,
            transposed,
        })
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn biases(&self) -> &[f32] {
        &self.biases
    }

    /// Computes `W·x + b`. Inputs flagged in `skip` are known to be zero and
    /// are not read; the result is bit-identical to including them.
    /// Returns the output vector and the number of MACs performed.
    pub(crate) fn apply(&self, x: &[f32], skip: Option<&[bool]>) -> (Vec<f32>, u64) {
        debug_assert_eq!(x.len(), self.inputs);
        let mut acc = vec![0.0f32; self.outputs];
        let mut used = 0u64;
        for (i, &xi) in x.iter().enumerate() {
            if skip.is_some_and(|s| s[i]) {
                continue;
            }
            used += 1;
            let col = &self.transposed[i * self.outputs..(i + 1) * self.outputs];
            for (a, &w) in acc.iter_mut().zip(col) {
                *a += w * xi;
            }
        }
        for (a, &b) in acc.iter_mut().zip(&self.biases) {
            *a += b;
        }
        (acc, used * self.outputs as u64)
    }
}
