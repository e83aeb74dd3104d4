use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{ArchConfig, Network, RunOptions, SkipEdge, Topology};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::{GumbelOptions, ParamId, Real, Tape, Tensor, Var};
use crate::train::{OptimConfig, Optimizer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase1Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimConfig,
    #[serde(default = "one")]
    pub temperature: f64,
    /// Linear anneal target reached at the last epoch.
    #[serde(default)]
    pub final_temperature: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

impl Phase1Config {
    pub fn new(epochs: usize, batch_size: usize, lr: f64, seed: u64) -> Self {
        Phase1Config {
            epochs,
            batch_size,
            optimizer: OptimConfig::adam(lr),
            temperature: 1.0,
            final_temperature: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("phase 1 batch_size must be positive".into()));
        }
        for t in std::iter::once(self.temperature).chain(self.final_temperature) {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Config(format!("temperature must be positive, got {t}")));
            }
        }
        self.optimizer.validate()
    }

    /// Temperature used during `epoch`.
    pub fn temperature_at(&self, epoch: usize) -> f64 {
        match self.final_temperature {
            Some(end) if self.epochs > 1 => {
                let f = epoch as f64 / (self.epochs - 1) as f64;
                self.temperature + (end - self.temperature) * f
            }
            _ => self.temperature,
        }
    }
}

/// Learnable `N × (N−2)` selection logits of one searching block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SelectionMatrix {
    pub stage: usize,
    pub level: usize,
    pub streams: usize,
    pub param: ParamId,
}

/// Selection share of one stream at one block during one epoch.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrequencyRow {
    pub epoch: usize,
    pub stage: usize,
    pub level: usize,
    pub stream: usize,
    pub frequency: f64,
}

#[derive(Clone, Debug)]
pub struct Phase1Outcome {
    /// Candidate skips `C`, one argmax set per searching block.
    pub topology: Topology,
    /// Final logits keyed by block.
    pub logits: BTreeMap<(usize, usize), Tensor<f64>>,
    pub frequencies: Vec<FrequencyRow>,
    pub losses: Vec<f64>,
}

impl Phase1Outcome {
    pub fn frequency_csv(&self) -> String {
        let mut s = String::from("epoch,block,stream,frequency\n");
        for r in &self.frequencies {
            let _ = writeln!(s, "{},s{}.l{},{},{}", r.epoch, r.stage, r.level, r.stream, r.frequency);
        }
        s
    }
}

/// Gumbel-sampled selection followed by the mean of the unique selected streams.
pub fn phi<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    streams: &[Var],
    logits: Var,
    opts: GumbelOptions,
    rng: &mut R,
) -> Result<Var> {
    let sel = tape.gumbel_softmax(logits, opts, rng)?;
    tape.select_average(streams, sel)
}

/// Unique rows holding the maximum of each column, ascending.
pub fn selected_streams<T: Real>(m: &Tensor<T>) -> Vec<usize> {
    let (rows, cols) = (m.shape()[0], m.shape()[1]);
    let d = m.data();
    let mut out = BTreeSet::new();
    for c in 0..cols {
        let mut best = 0;
        for r in 1..rows {
            if d[r * cols + c] > d[best * cols + c] {
                best = r;
            }
        }
        out.insert(best);
    }
    out.into_iter().collect()
}

/// Blocks whose incoming skips are searched: every block of stages `2..=2T`.
pub fn searching_blocks(cfg: &ArchConfig) -> Vec<(usize, usize)> {
    (2..=cfg.stages())
        .flat_map(|s| (0..=cfg.depth).map(move |l| (s, l)))
        .collect()
}

/// Adds zero-mean selection logits for every searching block to `net`.
pub fn attach_selections<T: Real, R: Rng + ?Sized>(net: &mut Network<T>, rng: &mut R) -> Result<Vec<SelectionMatrix>> {
    let cfg = net.config().clone();
    let n = cfg.depth + 1;
    if n < 3 {
        return Err(Error::Config(format!(
            "skip selection needs at least 3 candidate streams per block (depth >= 2), got depth {}",
            cfg.depth
        )));
    }
    let dense = Topology::dense(&cfg)?;
    if net.topology() != &dense {
        return Err(Error::Topology("phase 1 runs on the dense supernet".into()));
    }
    Ok(searching_blocks(&cfg)
        .into_iter()
        .map(|(stage, level)| {
            let init = Tensor::from_fn(vec![n, n - 2], |_| T::from_f64_lossy(rng.gen_range(-1e-2..1e-2)));
            SelectionMatrix {
                stage,
                level,
                streams: n,
                param: net.store.add(format!("select.s{stage}.l{level}"), init),
            }
        })
        .collect())
}

/// Candidate topology from argmax selections, one edge per unique row.
pub fn extract_candidates(cfg: &ArchConfig, logits: &BTreeMap<(usize, usize), Tensor<f64>>) -> Result<Topology> {
    let mut edges = Vec::new();
    for (&(stage, level), m) in logits {
        for from in selected_streams(m) {
            edges.push(SkipEdge::new(stage - 1, from, level));
        }
    }
    Topology::new("phase1", cfg.clone(), edges)
}

/// Jointly trains SuperNet weights and selection logits with one optimizer.
pub fn phase1_search<T: Real>(mut net: Network<T>, data: &Dataset, cfg: &Phase1Config) -> Result<Phase1Outcome> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let matrices = attach_selections(&mut net, &mut rng)?;
    let mut opt = Optimizer::new(cfg.optimizer.clone(), &net.store)?;
    let mut frequencies = Vec::new();
    let mut losses = Vec::new();
    for epoch in 0..cfg.epochs {
        let opts = GumbelOptions {
            temperature: cfg.temperature_at(epoch),
            hard: true,
            noise: true,
        };
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let mut counts: BTreeMap<(usize, usize), Vec<usize>> =
            matrices.iter().map(|m| ((m.stage, m.level), vec![0; m.streams])).collect();
        let (mut loss_sum, mut steps) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = data.batch::<T>(chunk);
            let l = search_step(&mut net, &mut opt, &matrices, &mut counts, x, &y, opts, cfg.optimizer.lr, &mut rng)
                .map_err(|e| e.context(format!("phase 1 epoch {epoch}")))?;
            loss_sum += l * chunk.len() as f64;
            steps += 1;
        }
        losses.push(loss_sum / data.len().max(1) as f64);
        for ((stage, level), c) in counts {
            for (stream, n) in c.into_iter().enumerate() {
                frequencies.push(FrequencyRow {
                    epoch,
                    stage,
                    level,
                    stream,
                    frequency: n as f64 / steps.max(1) as f64,
                });
            }
        }
    }
    let logits: BTreeMap<(usize, usize), Tensor<f64>> = matrices
        .iter()
        .map(|m| ((m.stage, m.level), net.store.value(m.param).cast::<f64>()))
        .collect();
    Ok(Phase1Outcome {
        topology: extract_candidates(net.config(), &logits)?,
        logits,
        frequencies,
        losses,
    })
}

#[allow(clippy::too_many_arguments)]
fn search_step<T: Real>(
    net: &mut Network<T>,
    opt: &mut Optimizer,
    matrices: &[SelectionMatrix],
    counts: &mut BTreeMap<(usize, usize), Vec<usize>>,
    x: Tensor<T>,
    y: &[u32],
    opts: GumbelOptions,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut tape = Tape::new();
    let xv = tape.constant(x)?;
    let mut sels = BTreeMap::new();
    for m in matrices {
        let lg = tape.param(&net.store, m.param);
        let g = tape.gumbel_softmax(lg, opts, rng)?;
        for s in selected_streams(tape.value(g)) {
            counts.get_mut(&(m.stage, m.level)).expect("block counted")[s] += 1;
        }
        sels.insert((m.stage, m.level), g);
    }
    let run = RunOptions {
        training: true,
        selections: Some(&sels),
        ..Default::default()
    };
    let f = net.run(&mut tape, None, Some(xv), &BTreeMap::new(), &run)?;
    let loss = tape.softmax_cross_entropy(f.logits.expect("full pass"), y)?;
    let l = tape.value(loss).item().to_f64_lossy();
    if !l.is_finite() {
        return Err(Error::Numeric(format!("loss is {l}")));
    }
    net.store.zero_grad();
    tape.backward(loss, &mut net.store)?;
    opt.step(&mut net.store, lr)?;
    Ok(l)
}
