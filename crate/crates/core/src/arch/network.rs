use std::collections::BTreeMap;

use rand::Rng;

use super::config::{ArchConfig, Family};
use super::plan::{ConvKey, NormKey, Op, Plan, Site};
use super::topology::Topology;
use crate::error::{Error, Result};
use crate::nn::{BatchNormState, ConvParams};
use crate::tensor::{ParamStore, Real, Tape, Tensor, Var};

/// An unrolled, weight-shared network: parameter tables plus the compiled
/// plan of its topology.
///
/// Convolutions are keyed by (role, level, unit) and shared by every
/// iteration; normalization layers are keyed additionally by stage so each
/// iteration owns its own instance.
#[derive(Clone, Debug)]
pub struct Network<T: Real = f64> {
    topology: Topology,
    plan: Plan,
    pub store: ParamStore<T>,
    convs: BTreeMap<ConvKey, ConvParams>,
    norms: BTreeMap<NormKey, BatchNormState<T>>,
}

/// Execution controls for [`Network::run`].
#[derive(Clone, Debug)]
#[derive(Default)]
pub struct RunOptions<'a> {
    pub training: bool,
    /// First stage to execute; block outputs of earlier stages are read
    /// from the provided environment.
    pub from_stage: usize,
    /// Last stage to execute; `None` runs through post-processing.
    pub to_stage: Option<usize>,
    /// Execute dead instructions too (needed when the outputs feed other
    /// topologies).
    pub all_instructions: bool,
    /// Replace every decoder-to-encoder stream by zeros.
    pub zero_backward_skips: bool,
    /// Selection matrices keyed by searching block `(stage, level)`.
    pub selections: Option<&'a BTreeMap<(usize, usize), Var>>,
}


impl RunOptions<'_> {
    pub fn training(training: bool) -> Self {
        RunOptions {
            training,
            ..Default::default()
        }
    }
}

/// Result of a (partial) forward pass.
#[derive(Clone, Debug, Default)]
pub struct Forward {
    /// Present when post-processing ran.
    pub logits: Option<Var>,
    /// Output of every executed block.
    pub sites: BTreeMap<Site, Var>,
    /// Extraction stages entered.
    pub stages_run: usize,
}

impl<T: Real> Network<T> {
    /// Single-scale recurrent network with every admissible skip.
    pub fn build_bionet<R: Rng + ?Sized>(cfg: &ArchConfig, rng: &mut R) -> Result<Self> {
        if cfg.family != Family::Bionet {
            return Err(Error::Config("build_bionet needs a single-scale configuration".into()));
        }
        Self::build(Topology::dense(cfg)?, false, rng)
    }

    /// Dense multi-scale SuperNet.
    pub fn build_bionet_pp<R: Rng + ?Sized>(cfg: &ArchConfig, rng: &mut R) -> Result<Self> {
        if cfg.family != Family::Bionetpp {
            return Err(Error::Config("build_bionet_pp needs a multi-scale configuration".into()));
        }
        Self::build(Topology::dense(cfg)?, false, rng)
    }

    /// Network for an arbitrary topology holding parameters for every
    /// block the topology mentions, reachable or not.
    pub fn from_topology<R: Rng + ?Sized>(topo: Topology, rng: &mut R) -> Result<Self> {
        Self::build(topo, false, rng)
    }

    /// Keeps only `topo`'s edges and drops every block without a path to
    /// the output, parameters included.
    pub fn instantiate_subnet<R: Rng + ?Sized>(supernet: &ArchConfig, topo: &Topology, rng: &mut R) -> Result<Self> {
        if &topo.config != supernet {
            return Err(Error::Topology(format!(
                "topology `{}` was made for a different configuration",
                topo.name
            )));
        }
        Self::build(topo.clone(), true, rng)
    }

    fn build<R: Rng + ?Sized>(topo: Topology, live_only: bool, rng: &mut R) -> Result<Self> {
        topo.config.validate()?;
        let plan = Plan::compile(&topo);
        if !plan.live_sites().iter().any(|s| matches!(s, Site::Block { .. })) {
            return Err(Error::Topology("no block reaches the output".into()));
        }
        let (conv_specs, norm_specs) = if live_only {
            (plan.live_convs(), plan.live_norms())
        } else {
            (plan.convs.clone(), plan.all_norms())
        };
        let mut store = ParamStore::new();
        let mut convs = BTreeMap::new();
        for (key, spec) in conv_specs {
            let p = ConvParams::new(
                &mut store,
                &conv_name(&key),
                spec.in_ch,
                spec.out_ch,
                spec.kernel,
                spec.stride,
                spec.padding,
                spec.transposed,
                rng,
            );
            convs.insert(key, p);
        }
        let mut norms = BTreeMap::new();
        for (key, channels) in norm_specs {
            let name = format!("{}.bn.s{}", conv_name(&key.conv), key.stage);
            norms.insert(key, BatchNormState::new(&mut store, &name, channels));
        }
        Ok(Network {
            topology: topo,
            plan,
            store,
            convs,
            norms,
        })
    }

    pub fn config(&self) -> &ArchConfig {
        &self.topology.config
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn plan(&self) -> &Plan {
        &self.plan
    }

    pub fn convs(&self) -> &BTreeMap<ConvKey, ConvParams> {
        &self.convs
    }

    pub fn norms(&self) -> &BTreeMap<NormKey, BatchNormState<T>> {
        &self.norms
    }

    pub fn norms_mut(&mut self) -> &mut BTreeMap<NormKey, BatchNormState<T>> {
        &mut self.norms
    }

    /// Compiles another topology over this network's configuration; the
    /// result can be executed with [`Network::run`] as long as its blocks
    /// are covered by this network's tables.
    pub fn compile(&self, topo: &Topology) -> Result<Plan> {
        if topo.config != self.topology.config {
            return Err(Error::Topology("topology configuration differs from the network's".into()));
        }
        Ok(Plan::compile(topo))
    }

    /// Full forward pass returning B×K×H×W logits.
    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, training: bool) -> Result<Var> {
        let f = self.run(tape, None, Some(x), &BTreeMap::new(), &RunOptions::training(training))?;
        Ok(f.logits.expect("full pass reaches the head"))
    }

    /// Executes `plan` (default: the network's own) over a stage range.
    pub fn run(
        &mut self,
        tape: &mut Tape<T>,
        plan: Option<&Plan>,
        input: Option<Var>,
        env: &BTreeMap<Site, Var>,
        opts: &RunOptions<'_>,
    ) -> Result<Forward> {
        let Network {
            plan: own,
            store,
            convs,
            norms,
            ..
        } = self;
        execute(plan.unwrap_or(own), store, convs, norms, tape, input, env, opts)
    }

    /// As [`Network::run`] but reading weights from `store`, which must be
    /// laid out like this network's own.
    pub fn run_with(
        &mut self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        plan: Option<&Plan>,
        input: Option<Var>,
        env: &BTreeMap<Site, Var>,
        opts: &RunOptions<'_>,
    ) -> Result<Forward> {
        let Network {
            plan: own, convs, norms, ..
        } = self;
        execute(plan.unwrap_or(own), store, convs, norms, tape, input, env, opts)
    }

    /// Re-draws every weight and resets normalization state.
    pub fn reinitialize<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Self> {
        let live_only = self.convs.len() < self.plan.convs.len() || self.norms.len() < self.plan.all_norms().len();
        Self::build(self.topology.clone(), live_only, rng)
    }

    /// Copies parameter values and running statistics from `other` for every
    /// layer both networks share.
    pub fn copy_shared_from(&mut self, other: &Network<T>) -> Result<()> {
        for (k, p) in &self.convs {
            if let Some(q) = other.convs.get(k) {
                self.store.set_value(p.weight, other.store.value(q.weight).clone())?;
                if let (Some(a), Some(b)) = (p.bias, q.bias) {
                    self.store.set_value(a, other.store.value(b).clone())?;
                }
            }
        }
        for (k, bn) in self.norms.iter_mut() {
            if let Some(o) = other.norms.get(k) {
                self.store.set_value(bn.gamma, other.store.value(o.gamma).clone())?;
                self.store.set_value(bn.beta, other.store.value(o.beta).clone())?;
                bn.stats = o.stats.clone();
            }
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn execute<T: Real>(
    plan: &Plan,
    store: &ParamStore<T>,
    convs: &BTreeMap<ConvKey, ConvParams>,
    norms: &mut BTreeMap<NormKey, BatchNormState<T>>,
    tape: &mut Tape<T>,
    input: Option<Var>,
    env: &BTreeMap<Site, Var>,
    opts: &RunOptions<'_>,
) -> Result<Forward> {
    let cfg = &plan.config;
    let base = match (input, env.get(&Site::Pre)) {
        (Some(x), _) => {
            let (_, c, h, w) = tape.value(x).dims4()?;
            if c != cfg.in_channels {
                return Err(Error::Shape(format!(
                    "input has {c} channels, network expects {}",
                    cfg.in_channels
                )));
            }
            cfg.check_input(h, w)?;
            (h, w)
        }
        (None, Some(&p)) => {
            let s = tape.shape(p);
            (s[2], s[3])
        }
        (None, None) => return Err(Error::Contract("run needs an input or a pre-processed environment".into())),
    };
    let last_stage = opts.to_stage.unwrap_or(cfg.stages() + 1);
    let mut values: Vec<Option<Var>> = vec![None; plan.instrs.len()];
    for (site, &idx) in &plan.exports {
        if site.stage(cfg) < opts.from_stage {
            values[idx] = env.get(site).copied();
        }
    }
    let mut out = Forward::default();
    let mut stages_seen = std::collections::BTreeSet::new();
    for (i, ins) in plan.instrs.iter().enumerate() {
        if ins.stage < opts.from_stage || ins.stage > last_stage {
            continue;
        }
        if (1..=cfg.stages()).contains(&ins.stage) {
            stages_seen.insert(ins.stage);
        }
        if !plan.live[i] && !opts.all_instructions {
            continue;
        }
        let get = |v: usize| -> Result<Var> {
            values[v].ok_or_else(|| Error::Contract(format!("value {v} needed by {} was not computed", ins.site)))
        };
        let y = match &ins.op {
            Op::Input => input.ok_or_else(|| Error::Contract("pre-processing needs the input".into()))?,
            Op::Unit { conv, norm, input } => {
                let x = get(*input)?;
                let p = convs.get(conv).ok_or_else(|| missing(conv))?;
                let z = tape.apply_conv(store, p, x)?;
                let bn = norms
                    .get_mut(norm)
                    .ok_or_else(|| Error::Topology(format!("no normalization instance for {norm:?}")))?;
                let z = tape.apply_batch_norm(store, bn, z, opts.training)?;
                tape.relu(z)?
            }
            Op::Head { conv, input } | Op::UpTranspose { conv, input } => {
                let x = get(*input)?;
                let p = convs.get(conv).ok_or_else(|| missing(conv))?;
                tape.apply_conv(store, p, x)?
            }
            Op::Pool { input } => {
                let x = get(*input)?;
                tape.max_pool2d(x)?
            }
            Op::Resize { input, level } => {
                let x = get(*input)?;
                tape.bilinear_resize(x, base.0 >> level, base.1 >> level)?
            }
            Op::Fuse { mode, inputs } => {
                let mut xs = Vec::with_capacity(inputs.len());
                for &v in inputs {
                    xs.push(masked(tape, plan, ins.stage, v, get(v)?, opts)?);
                }
                tape.fuse(&xs, *mode)?
            }
            Op::SkipFuse { seq, skips } => {
                let s = get(*seq)?;
                let mut xs = Vec::with_capacity(skips.len());
                for &(_, v) in skips {
                    xs.push(masked(tape, plan, ins.stage, v, get(v)?, opts)?);
                }
                let block = match ins.site {
                    Site::Block { stage, level } => (stage, level),
                    _ => unreachable!("skip fusion only inside blocks"),
                };
                let skip_mean = match opts.selections.and_then(|m| m.get(&block)) {
                    Some(&g) => tape.select_average(&xs, g)?,
                    None => tape.average(&xs)?,
                };
                tape.average(&[s, skip_mean])?
            }
        };
        values[i] = Some(y);
    }
    for (site, &idx) in &plan.exports {
        let st = site.stage(cfg);
        if st >= opts.from_stage && st <= last_stage {
            if let Some(v) = values[idx] {
                out.sites.insert(*site, v);
            }
        }
    }
    if last_stage > cfg.stages() {
        out.logits = values[plan.output];
    }
    out.stages_run = stages_seen.len();
    Ok(out)
}

fn missing(key: &ConvKey) -> Error {
    Error::Topology(format!("no convolution for {key:?} in this network"))
}

/// Applies the zero-backward hook to a stream entering a fusion.
fn masked<T: Real>(tape: &mut Tape<T>, plan: &Plan, stage: usize, v: usize, x: Var, opts: &RunOptions<'_>) -> Result<Var> {
    if !opts.zero_backward_skips || !ArchConfig::is_encoder_stage(stage) {
        return Ok(x);
    }
    let src = plan.instrs[plan.root(v)].stage;
    if src >= 2 && src.is_multiple_of(2) && src <= plan.config.stages() {
        let z = Tensor::zeros(tape.shape(x).to_vec());
        tape.constant(z)
    } else {
        Ok(x)
    }
}

pub(crate) fn conv_name(k: &ConvKey) -> String {
    format!("{:?}.l{}.u{}", k.role, k.level, k.unit).to_lowercase()
}
