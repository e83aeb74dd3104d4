//! Optimizers, learning-rate schedules, the training loop and checkpoints.

mod checkpoint;
mod optim;
mod schedule;

pub use checkpoint::{checkpoint_topology, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use optim::{OptimConfig, Optimizer, OptimizerKind};
pub use schedule::Schedule;

use std::collections::BTreeMap;
use std::fmt::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{Network, RunOptions};
use crate::data::{argmax_classes, augment, AugmentPolicy, Confusion, Dataset, Metrics};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimConfig,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub augment: AugmentPolicy,
    /// Stop once validation mIoU reaches this value.
    #[serde(default)]
    pub target_miou: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(epochs: usize, batch_size: usize, lr: f64, seed: u64) -> Self {
        TrainConfig {
            epochs,
            batch_size,
            optimizer: OptimConfig::adam(lr),
            schedule: Schedule::Constant,
            augment: AugmentPolicy::identity(),
            target_miou: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        self.optimizer.validate()?;
        self.schedule.validate()
    }
}

/// One row of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub lr: f64,
    pub val_miou: f64,
    pub val_dice: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,lr,val_mIoU,val_DICE\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{},{},{},{}", r.epoch, r.train_loss, r.lr, r.val_miou, r.val_dice);
        }
        s
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.train_loss).collect()
    }
}

/// Validation result in evaluation mode.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub loss: f64,
    pub metrics: Metrics,
}

/// Scores `net` on `data` with running normalization statistics.
pub fn evaluate<T: Real>(net: &mut Network<T>, data: &Dataset, batch_size: usize) -> Result<Evaluation> {
    let mut confusion = Confusion::new(data.classes);
    let mut loss_sum = 0.0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = data.batch::<T>(chunk);
        let mut tape = Tape::new();
        let xv = tape.constant(x)?;
        let logits = net.forward(&mut tape, xv, false)?;
        let loss = tape.softmax_cross_entropy(logits, &y)?;
        loss_sum += tape.value(loss).item().to_f64_lossy() * chunk.len() as f64;
        confusion.add(&argmax_classes(tape.value(logits))?, &y)?;
    }
    Ok(Evaluation {
        loss: loss_sum / data.len().max(1) as f64,
        metrics: confusion.metrics(),
    })
}

/// Epoch-resumable training state.
#[derive(Clone, Debug)]
pub struct Trainer<T: Real> {
    pub net: Network<T>,
    pub optimizer: Optimizer,
    pub config: TrainConfig,
    pub history: History,
    pub best: Option<(usize, f64, Network<T>)>,
}

impl<T: Real> Trainer<T> {
    pub fn new(net: Network<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = Optimizer::new(config.optimizer.clone(), &net.store)?;
        Ok(Trainer {
            net,
            optimizer,
            config,
            history: History::default(),
            best: None,
        })
    }

    pub fn epoch(&self) -> usize {
        self.history.records.len()
    }

    pub fn done(&self) -> bool {
        self.epoch() >= self.config.epochs
            || matches!((self.config.target_miou, self.history.records.last()),
                (Some(t), Some(r)) if r.val_miou >= t)
    }

    /// Learning rate for the next epoch.
    pub fn current_lr(&self) -> f64 {
        self.config
            .schedule
            .lr(self.config.optimizer.lr, self.epoch(), &self.history.losses())
    }

    /// Trains one epoch and validates.
    pub fn run_epoch(&mut self, train: &Dataset, val: &Dataset) -> Result<&EpochRecord> {
        let epoch = self.epoch();
        let lr = self.current_lr();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (step, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let batch = if self.config.augment.is_identity() {
                train.batch::<T>(chunk)
            } else {
                let view = Dataset {
                    samples: chunk
                        .iter()
                        .map(|&i| augment(&train.samples[i], train.height, train.width, &self.config.augment, &mut rng))
                        .collect(),
                    ..train.clone_header()
                };
                view.batch::<T>(&(0..chunk.len()).collect::<Vec<_>>())
            };
            let l = self
                .train_step(batch, lr)
                .map_err(|e| e.context(format!("epoch {epoch} step {step}")))?;
            loss_sum += l * chunk.len() as f64;
        }
        let eval = evaluate(&mut self.net, val, self.config.batch_size)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len().max(1) as f64,
            lr,
            val_miou: eval.metrics.miou,
            val_dice: eval.metrics.dice,
        };
        if self.best.as_ref().is_none_or(|b| record.val_miou > b.1) {
            self.best = Some((epoch, record.val_miou, self.net.clone()));
        }
        self.history.records.push(record);
        Ok(self.history.records.last().unwrap())
    }

    fn train_step(&mut self, (x, y): (crate::tensor::Tensor<T>, Vec<u32>), lr: f64) -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(x)?;
        let f = self
            .net
            .run(&mut tape, None, Some(xv), &BTreeMap::new(), &RunOptions::training(true))?;
        let loss = tape.softmax_cross_entropy(f.logits.expect("full run yields logits"), &y)?;
        let value = tape.value(loss).item().to_f64_lossy();
        if !value.is_finite() {
            return Err(Error::Numeric(format!("loss is {value}")));
        }
        self.net.store.zero_grad();
        tape.backward(loss, &mut self.net.store)?;
        self.optimizer.step(&mut self.net.store, lr)?;
        Ok(value)
    }

    /// Runs until the epoch budget or the target mIoU is reached.
    pub fn run(&mut self, train: &Dataset, val: &Dataset) -> Result<()> {
        while !self.done() {
            self.run_epoch(train, val)?;
        }
        Ok(())
    }

    /// Best network by validation mIoU, or the current one before any epoch.
    pub fn best_network(&self) -> &Network<T> {
        self.best.as_ref().map_or(&self.net, |b| &b.2)
    }
}

/// Trained model plus its history.
#[derive(Clone, Debug)]
pub struct Trained<T: Real> {
    pub net: Network<T>,
    pub history: History,
    pub best_epoch: Option<usize>,
    pub best_miou: Option<f64>,
}

/// Trains `net` and returns the best network by validation mIoU.
pub fn train<T: Real>(net: Network<T>, train: &Dataset, val: &Dataset, config: &TrainConfig) -> Result<Trained<T>> {
    let mut t = Trainer::new(net, config.clone())?;
    t.run(train, val)?;
    let (best_epoch, best_miou, net) = match t.best {
        Some((e, m, n)) => (Some(e), Some(m), n),
        None => (None, None, t.net),
    };
    Ok(Trained {
        net,
        history: t.history,
        best_epoch,
        best_miou,
    })
}
