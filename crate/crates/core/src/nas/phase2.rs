use std::collections::BTreeMap;
use std::fmt::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::pareto::{pareto_front, ParetoPoint};
use crate::arch::{Network, Plan, RunOptions, Site, SkipEdge, Topology};
use crate::cost::count_macs;
use crate::data::{argmax_classes, Confusion, Dataset};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};
use crate::train::{OptimConfig, Optimizer, Schedule};

/// Search strategy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// Progressive search with shared head and averaged loss.
    #[default]
    None,
    /// Whole topologies sampled from the candidates, no progression.
    Random,
    /// Progressive search, but each candidate trains on its own head pass.
    Independent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase2Config {
    /// Samples drawn per retained architecture.
    pub population: usize,
    #[serde(default = "retain")]
    pub retain: usize,
    pub epochs_per_pair: usize,
    pub batch_size: usize,
    pub optimizer: OptimConfig,
    #[serde(default)]
    pub schedule: Schedule,
    /// Channel multiplier applied to the supernet while searching.
    #[serde(default = "width")]
    pub search_width_mult: f64,
    #[serde(default)]
    pub baseline: Baseline,
    #[serde(default)]
    pub seed: u64,
}

fn retain() -> usize {
    3
}
fn width() -> f64 {
    0.75
}

impl Phase2Config {
    pub fn new(population: usize, epochs_per_pair: usize, batch_size: usize, lr: f64, seed: u64) -> Self {
        Phase2Config {
            population,
            retain: retain(),
            epochs_per_pair,
            batch_size,
            optimizer: OptimConfig::adam(lr),
            schedule: Schedule::Constant,
            search_width_mult: width(),
            baseline: Baseline::None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.population == 0 || self.retain == 0 || self.batch_size == 0 {
            return Err(Error::Config("population, retain and batch_size must be positive".into()));
        }
        if !(self.search_width_mult > 0.0 && self.search_width_mult.is_finite()) {
            return Err(Error::Config(format!(
                "search_width_mult must be positive, got {}",
                self.search_width_mult
            )));
        }
        self.optimizer.validate()?;
        self.schedule.validate()
    }
}

/// Skip subsets for the blocks of one stage pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CandidateSample {
    pub pair: usize,
    pub choices: BTreeMap<(usize, usize), Vec<SkipEdge>>,
}

impl CandidateSample {
    pub fn edges(&self) -> impl Iterator<Item = SkipEdge> + '_ {
        self.choices.values().flatten().copied()
    }
}

/// Candidate skips of every block entered by stage pair `t`.
pub fn pair_candidates(c: &Topology, t: usize) -> BTreeMap<(usize, usize), Vec<SkipEdge>> {
    (0..=c.config.depth)
        .map(|l| ((t + 1, l), c.incoming(t + 1, l)))
        .collect()
}

/// `s` samples with one uniformly drawn non-empty subset per block.
pub fn sample_population<R: Rng + ?Sized>(
    pair: usize,
    candidates: &BTreeMap<(usize, usize), Vec<SkipEdge>>,
    s: usize,
    rng: &mut R,
) -> Result<Vec<CandidateSample>> {
    if let Some((b, _)) = candidates.iter().find(|(_, c)| c.is_empty()) {
        return Err(Error::Search(format!("block s{}.l{} has no candidate skips", b.0, b.1)));
    }
    if let Some((b, c)) = candidates.iter().find(|(_, c)| c.len() > 63) {
        return Err(Error::Search(format!("block s{}.l{} has {} candidates", b.0, b.1, c.len())));
    }
    Ok((0..s)
        .map(|_| CandidateSample {
            pair,
            choices: candidates
                .iter()
                .map(|(&b, c)| {
                    let mask: u64 = rng.gen_range(1..(1u64 << c.len()));
                    let pick = c.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, e)| *e).collect();
                    (b, pick)
                })
                .collect(),
        })
        .collect())
}

/// Digests of the head features each tail consumed during one step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub pair: usize,
    /// Per tail: site → hex digest.
    pub tails: Vec<BTreeMap<String, String>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FairnessTrace {
    pub steps: Vec<StepTrace>,
}

impl FairnessTrace {
    /// One JSON object per step, newline separated.
    pub fn to_jsonl(&self) -> String {
        self.steps
            .iter()
            .map(|s| serde_json::to_string(s).expect("trace serializes") + "\n")
            .collect()
    }
}

/// True iff, at every step, every site seen by several tails carries one digest.
pub fn check_skip_fairness(trace: &FairnessTrace) -> bool {
    trace.steps.iter().all(|step| {
        let mut seen: BTreeMap<&str, &str> = BTreeMap::new();
        step.tails.iter().flatten().all(|(site, d)| *seen.entry(site).or_insert(d) == d.as_str())
    })
}

fn digest<T: Real>(t: &Tensor<T>) -> String {
    let mut h = Sha256::new();
    for d in t.shape() {
        h.update((*d as u64).to_le_bytes());
    }
    for v in t.data() {
        h.update(v.to_f64_lossy().to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Stage forwards executed during one step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct StageCount {
    pub head: usize,
    pub tails: usize,
}

impl StageCount {
    pub fn total(&self) -> usize {
        self.head + self.tails
    }
}

/// Averaged loss of one shared-head step; the head is forwarded once.
pub struct SharedStep {
    pub loss: Var,
    pub tail_losses: Vec<f64>,
    pub logits: Vec<Var>,
    pub counts: StageCount,
    pub trace: StepTrace,
}

/// Forwards stages `1..=t` once with `head`, then every tail plan from stage `t+1` on the same features.
#[allow(clippy::too_many_arguments)]
pub fn shared_forward<T: Real>(
    net: &mut Network<T>,
    tape: &mut Tape<T>,
    head: &Plan,
    tails: &[Plan],
    x: Var,
    targets: Option<&[u32]>,
    t: usize,
    training: bool,
) -> Result<SharedStep> {
    let head_opts = RunOptions {
        training,
        to_stage: Some(t),
        all_instructions: true,
        ..Default::default()
    };
    let h = net.run(tape, Some(head), Some(x), &BTreeMap::new(), &head_opts)?;
    let tail_opts = RunOptions {
        training,
        from_stage: t + 1,
        ..Default::default()
    };
    let cfg = head.config.clone();
    let mut counts = StageCount { head: h.stages_run, tails: 0 };
    let mut logits = Vec::with_capacity(tails.len());
    let mut losses = Vec::with_capacity(tails.len());
    let mut trace = StepTrace { pair: t, tails: Vec::new() };
    for (i, plan) in tails.iter().enumerate() {
        trace.tails.push(consumed_digests(tape, plan, &h.sites, t, &cfg));
        let f = net.run(tape, Some(plan), None, &h.sites, &tail_opts)?;
        counts.tails += f.stages_run;
        let lg = f.logits.expect("tail reaches the head");
        if let Some(y) = targets {
            let l = tape.softmax_cross_entropy(lg, y)?;
            let v = tape.value(l).item().to_f64_lossy();
            if !v.is_finite() {
                return Err(Error::Numeric(format!("tail {i} loss is {v}")));
            }
            losses.push(l);
        }
        logits.push(lg);
    }
    let tail_losses = losses.iter().map(|&l| tape.value(l).item().to_f64_lossy()).collect();
    let loss = if losses.is_empty() {
        tape.constant(Tensor::scalar(T::zero()))?
    } else {
        tape.average(&losses)?
    };
    Ok(SharedStep {
        loss,
        tail_losses,
        logits,
        counts,
        trace,
    })
}

fn consumed_digests<T: Real>(
    tape: &Tape<T>,
    plan: &Plan,
    env: &BTreeMap<Site, Var>,
    t: usize,
    cfg: &crate::arch::ArchConfig,
) -> BTreeMap<String, String> {
    plan.exports
        .iter()
        .filter(|(site, &idx)| site.stage(cfg) <= t && plan.is_live(idx))
        .filter_map(|(site, _)| env.get(site).map(|&v| (site.to_string(), digest(tape.value(v)))))
        .collect()
}

/// One scored candidate in the search log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRow {
    pub pair: usize,
    pub candidate: usize,
    pub parent: usize,
    pub iou: f64,
    pub macs: u64,
    pub retained: bool,
}

#[derive(Clone, Debug)]
pub struct Phase2Outcome {
    /// Best retained architecture, in the phase-1 configuration.
    pub topology: Topology,
    pub log: Vec<LogRow>,
    pub trace: FairnessTrace,
    /// Stage pairs searched, in order.
    pub pairs: Vec<usize>,
    /// Stage forwards of every training step, with the population size.
    pub counts: Vec<(usize, usize, StageCount)>,
    pub losses: Vec<f64>,
    pub fair: bool,
}

impl Phase2Outcome {
    pub fn log_csv(&self) -> String {
        let mut s = String::from("pair,candidate,parent,iou,macs,retained\n");
        for r in &self.log {
            let _ = writeln!(s, "{},{},{},{},{},{}", r.pair, r.candidate, r.parent, r.iou, r.macs, r.retained);
        }
        s
    }
}

struct Search<'a, T: Real> {
    net: Network<T>,
    opt: Optimizer,
    cfg: &'a Phase2Config,
    rng: ChaCha8Rng,
    trace: FairnessTrace,
    counts: Vec<(usize, usize, StageCount)>,
    losses: Vec<f64>,
}

impl<T: Real> Search<'_, T> {
    /// Trains the supernet on `tails` for one epoch budget.
    fn train(&mut self, head: &Plan, tails: &[Plan], t: usize, data: &Dataset) -> Result<()> {
        for epoch in 0..self.cfg.epochs_per_pair {
            let lr = self.cfg.schedule.lr(self.cfg.optimizer.lr, epoch, &[]);
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut self.rng);
            let mut sum = 0.0;
            for chunk in order.chunks(self.cfg.batch_size) {
                let (x, y) = data.batch::<T>(chunk);
                let l = match self.cfg.baseline {
                    Baseline::Independent => self.independent_step(head, tails, t, x, &y, lr)?,
                    _ => self.shared_step(head, tails, t, x, &y, lr)?,
                };
                sum += l * chunk.len() as f64;
            }
            self.losses.push(sum / data.len().max(1) as f64);
        }
        Ok(())
    }

    fn shared_step(&mut self, head: &Plan, tails: &[Plan], t: usize, x: Tensor<T>, y: &[u32], lr: f64) -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(x)?;
        let step = shared_forward(&mut self.net, &mut tape, head, tails, xv, Some(y), t, true)?;
        let l = tape.value(step.loss).item().to_f64_lossy();
        self.net.store.zero_grad();
        tape.backward(step.loss, &mut self.net.store)?;
        self.opt.step(&mut self.net.store, lr)?;
        self.counts.push((t, tails.len(), step.counts));
        self.trace.steps.push(step.trace);
        Ok(l)
    }

    fn independent_step(&mut self, head: &Plan, tails: &[Plan], t: usize, x: Tensor<T>, y: &[u32], lr: f64) -> Result<f64> {
        let mut trace = StepTrace { pair: t, tails: Vec::new() };
        let mut counts = StageCount { head: 0, tails: 0 };
        let mut sum = 0.0;
        for tail in tails {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone())?;
            let step = shared_forward(&mut self.net, &mut tape, head, std::slice::from_ref(tail), xv, Some(y), t, true)?;
            sum += tape.value(step.loss).item().to_f64_lossy();
            self.net.store.zero_grad();
            tape.backward(step.loss, &mut self.net.store)?;
            self.opt.step(&mut self.net.store, lr)?;
            trace.tails.extend(step.trace.tails);
            counts.head += step.counts.head;
            counts.tails += step.counts.tails;
        }
        self.counts.push((t, tails.len(), counts));
        self.trace.steps.push(trace);
        Ok(sum / tails.len() as f64)
    }

    /// Validation mIoU of every tail in evaluation mode.
    fn score(&mut self, head: &Plan, tails: &[Plan], t: usize, val: &Dataset) -> Result<Vec<f64>> {
        let mut conf = vec![Confusion::new(val.classes); tails.len()];
        let idx: Vec<usize> = (0..val.len()).collect();
        for chunk in idx.chunks(self.cfg.batch_size) {
            let (x, y) = val.batch::<T>(chunk);
            let mut tape = Tape::new();
            let xv = tape.constant(x)?;
            let step = shared_forward(&mut self.net, &mut tape, head, tails, xv, None, t, false)?;
            for (c, lg) in conf.iter_mut().zip(&step.logits) {
                c.add(&argmax_classes(tape.value(*lg))?, &y)?;
            }
        }
        Ok(conf.iter().map(|c| c.metrics().miou).collect())
    }
}

/// Progressive evolutionary search over the phase-1 candidates `c`.
///
/// Pairs are searched from `2T−1` down to `1`; evolved pairs stay frozen.
/// Supernet weights are freshly initialized at `search_width_mult` width.
pub fn progressive_search<T: Real>(c: &Topology, train: &Dataset, val: &Dataset, cfg: &Phase2Config) -> Result<Phase2Outcome> {
    cfg.validate()?;
    let orig = c.config.clone();
    let scaled_cfg = orig.scaled_width(cfg.search_width_mult);
    let c_scaled = Topology::new(c.name.clone(), scaled_cfg.clone(), c.edges().copied())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let net = Network::<T>::from_topology(Topology::dense(&scaled_cfg)?, &mut rng)?;
    let opt = Optimizer::new(cfg.optimizer.clone(), &net.store)?;
    let mut s = Search {
        net,
        opt,
        cfg,
        rng,
        trace: FairnessTrace::default(),
        counts: Vec::new(),
        losses: Vec::new(),
    };
    let head_plan = Plan::compile(&c_scaled);
    let (h, w) = (val.height, val.width);
    let macs_of = |topo: &Topology| -> Result<u64> {
        count_macs(&Plan::compile(&Topology::new("m", orig.clone(), topo.edges().copied())?), h, w)
    };
    let mut log = Vec::new();
    let mut pairs = Vec::new();
    let mut retained: Vec<Topology> = vec![c_scaled.clone()];

    let search_pairs: Vec<usize> = match cfg.baseline {
        Baseline::Random => vec![0],
        _ => (1..orig.stage_pairs() + 1).rev().collect(),
    };
    for &t in &search_pairs {
        let mut pop: Vec<(usize, Topology)> = Vec::new();
        for (p, parent) in retained.iter().enumerate() {
            for _ in 0..cfg.population {
                let topo = if t == 0 {
                    random_topology(&c_scaled, &mut s.rng)?
                } else {
                    let cands = pair_candidates(&c_scaled, t);
                    let sample = sample_population(t, &cands, 1, &mut s.rng)
                        .map_err(|e| e.context(format!("stage pair {t}")))?
                        .remove(0);
                    parent.with_pair(t, sample.edges())?
                };
                pop.push((p, topo));
            }
        }
        let plans: Vec<Plan> = pop.iter().map(|(_, tp)| Plan::compile(tp)).collect();
        let budget_pairs = if t == 0 { orig.stage_pairs() } else { 1 };
        for _ in 0..budget_pairs {
            s.train(&head_plan, &plans, t, train)
                .map_err(|e| e.context(format!("stage pair {t}")))?;
        }
        let ious = s.score(&head_plan, &plans, t, val)?;
        let points: Vec<ParetoPoint> = pop
            .iter()
            .zip(&ious)
            .enumerate()
            .map(|(id, ((_, tp), &iou))| Ok(ParetoPoint { id, iou, macs: macs_of(tp)? }))
            .collect::<Result<_>>()?;
        let front = pareto_front(&points, Some(cfg.retain));
        for (pt, (parent, _)) in points.iter().zip(&pop) {
            log.push(LogRow {
                pair: t,
                candidate: pt.id,
                parent: *parent,
                iou: pt.iou,
                macs: pt.macs,
                retained: front.iter().any(|f| f.id == pt.id),
            });
        }
        retained = front.iter().map(|f| pop[f.id].1.clone()).collect();
        pairs.push(t);
    }
    let best = &retained[0];
    let topology = Topology::new("bix", orig, best.edges().copied())?;
    let fair = check_skip_fairness(&s.trace);
    Ok(Phase2Outcome {
        topology,
        log,
        trace: s.trace,
        pairs,
        counts: s.counts,
        losses: s.losses,
        fair,
    })
}

/// Every pair drawn independently from the candidates.
fn random_topology<R: Rng + ?Sized>(c: &Topology, rng: &mut R) -> Result<Topology> {
    let mut topo = c.clone();
    for t in 1..=c.config.stage_pairs() {
        let cands = pair_candidates(c, t);
        let sample = sample_population(t, &cands, 1, rng)?.remove(0);
        topo = topo.with_pair(t, sample.edges())?;
    }
    Ok(topo)
}
