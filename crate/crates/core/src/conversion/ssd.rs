//! Scheduled sliding-window dropout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::SeededRng;

/// Per-epoch dropout rates and window sizes. Epoch `k` (1-based) uses entry
/// `k`; past the end of a list its last entry is held.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SSDSchedule {
    pub dropout_per_epoch: Vec<f64>,
    pub window_per_epoch: Vec<usize>,
}

impl SSDSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.dropout_per_epoch.is_empty() {
            return Err(Error::config("dropout_per_epoch", "schedule is empty"));
        }
        if self.window_per_epoch.is_empty() {
            return Err(Error::config("window_per_epoch", "schedule is empty"));
        }
        if let Some(r) = self.dropout_per_epoch.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(Error::config("dropout_per_epoch", format!("rate {r} is outside [0, 1]")));
        }
        if self.window_per_epoch.contains(&0) {
            return Err(Error::config("window_per_epoch", "windows must be positive"));
        }
        Ok(())
    }

    fn held<T: Copy>(list: &[T], epoch: usize) -> T {
        list[(epoch - 1).min(list.len() - 1)]
    }

    pub fn rate(&self, epoch: usize) -> Result<f64> {
        self.check(epoch)?;
        Ok(Self::held(&self.dropout_per_epoch, epoch))
    }

    pub fn window(&self, epoch: usize) -> Result<usize> {
        self.check(epoch)?;
        Ok(Self::held(&self.window_per_epoch, epoch))
    }

    fn check(&self, epoch: usize) -> Result<()> {
        self.validate()?;
        if epoch == 0 {
            return Err(Error::contract("epochs are numbered from 1"));
        }
        Ok(())
    }
}

/// One step's draw: whether to drop the sliding-window branch, and the
/// window to use.
pub fn ssd_sample(s: &SSDSchedule, epoch: usize, rng: &mut SeededRng) -> Result<(bool, usize)> {
    let rate = s.rate(epoch)?;
    let window = s.window(epoch)?;
    Ok((rng.bernoulli(rate), window))
}
