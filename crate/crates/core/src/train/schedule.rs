use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Learning-rate schedule, evaluated per epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
#[derive(Default)]
pub enum Schedule {
    #[default]
    Constant,
    /// Multiply by `factor` every `every` epochs.
    StepDecay { factor: f64, every: usize },
    /// Multiply by `1 - rate` each epoch.
    PerEpochDecay { rate: f64 },
    /// Multiply by `factor` once the metric has failed to drop by more than
    /// `threshold` for more than `patience` consecutive epochs.
    Plateau {
        factor: f64,
        patience: usize,
        #[serde(default)]
        threshold: f64,
    },
}


impl Schedule {
    pub fn validate(&self) -> Result<()> {
        let factor_ok = |f: f64| f > 0.0 && f <= 1.0;
        match *self {
            Schedule::Constant => Ok(()),
            Schedule::StepDecay { factor, every } if factor_ok(factor) && every > 0 => Ok(()),
            Schedule::PerEpochDecay { rate } if (0.0..1.0).contains(&rate) => Ok(()),
            Schedule::Plateau { factor, threshold, .. } if factor_ok(factor) && threshold >= 0.0 => Ok(()),
            ref s => Err(Error::Config(format!("invalid schedule {s:?}"))),
        }
    }

    /// Learning rate for `epoch` (0-based) given the metric recorded after
    /// each earlier epoch; lower metric values are better.
    pub fn lr(&self, base: f64, epoch: usize, history: &[f64]) -> f64 {
        match *self {
            Schedule::Constant => base,
            Schedule::StepDecay { factor, every } => base * factor.powi((epoch / every) as i32),
            Schedule::PerEpochDecay { rate } => base * (1.0 - rate).powi(epoch as i32),
            Schedule::Plateau {
                factor,
                patience,
                threshold,
            } => {
                let mut lr = base;
                let mut best = f64::INFINITY;
                let mut stale = 0;
                for &m in history.iter().take(epoch) {
                    if m < best - threshold {
                        best = m;
                        stale = 0;
                    } else {
                        stale += 1;
                        if stale > patience {
                            lr *= factor;
                            stale = 0;
                        }
                    }
                }
                lr
            }
        }
    }
}
