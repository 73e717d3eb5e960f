//! Energy of one multiplication relative to loading its weight operand.

use crate::error::{Error, Result};

/// Per-access energies in pJ (32-bit operands, 45 nm) and the cache hit rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyModel {
    pub op_pj: f64,
    pub cache_pj: f64,
    pub dram_pj: f64,
    hit_rate: f64,
}

impl EnergyModel {
    pub fn new(hit_rate: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&hit_rate) {
            return Err(Error::invalid(format!("hit rate {hit_rate} is outside [0, 1]")));
        }
        Ok(EnergyModel {
            op_pj: 1.0,
            cache_pj: 6.0,
            dram_pj: 640.0,
            hit_rate,
        })
    }

    pub fn hit_rate(&self) -> f64 {
        self.hit_rate
    }

    /// Share of the energy spent on a weight-times-activation that is saved
    /// by skipping only the multiplication, in percent.
    pub fn saving_percent(&self) -> f64 {
        let h = self.hit_rate;
        100.0 * self.op_pj / (self.op_pj + self.cache_pj * h + self.dram_pj * (1.0 - h))
    }
}

/// [`EnergyModel::saving_percent`] with the default energies.
pub fn energy_saving(hit_rate: f64) -> Result<f64> {
    Ok(EnergyModel::new(hit_rate)?.saving_percent())
}
