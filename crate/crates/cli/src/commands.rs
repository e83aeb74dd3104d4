use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use bionet::arch::{ArchConfig, Family, Network, Topology};
use bionet::cost::{count_macs, count_stored_params, report};
use bionet::data::{generate_split, Dataset, Metrics};
use bionet::nas::{phase1_search, progressive_search, Baseline};
use bionet::tensor::Real;
use bionet::train::{checkpoint_topology, evaluate, load_checkpoint, save_checkpoint, Trainer};
use bionet::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{ExperimentConfig, Precision};
use crate::exit::{Failure, OrExit, CHECKPOINT, CONFIG, SEARCH, TOPOLOGY};
use crate::{ArchArg, BaselineArg, Common, PhaseArg, SplitArg};

/// Validated configuration and its output directory.
struct Run {
    cfg: ExperimentConfig,
    out: PathBuf,
}

impl Run {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&self, name: &str, text: &str) -> Result<()> {
        let p = self.path(name);
        std::fs::write(&p, text).with_context(|| format!("cannot write {}", p.display()))
    }

    fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.cfg.init_seed())
    }

    fn datasets(&self) -> Result<(Dataset, Dataset)> {
        generate_split(&self.cfg.data_spec(), self.cfg.data.train, self.cfg.data.val).or_exit(CONFIG)
    }
}

fn prepare(common: &Common, adjust: impl FnOnce(&mut ExperimentConfig)) -> Result<Run> {
    if common.threads == 0 {
        return Err(Failure::new(CONFIG, "--threads must be at least 1").into());
    }
    if common.threads > 1 {
        eprintln!("note: execution is single-threaded; --threads {} has no effect", common.threads);
    }
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Ok(v) = std::env::var("ENGINE_SEED") {
        cfg.seed = v
            .trim()
            .parse()
            .map_err(|_| Failure::new(CONFIG, format!("ENGINE_SEED must be an unsigned integer, got `{v}`")))?;
    }
    cfg.apply_seed(cfg.seed);
    if cfg.output_dir.is_relative() {
        let base = common.config.parent().unwrap_or(Path::new(""));
        cfg.output_dir = base.join(&cfg.output_dir);
    }
    adjust(&mut cfg);
    cfg.validate()?;
    let out = cfg.output_dir.clone();
    std::fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
    let run = Run { cfg, out };
    run.write("resolved_config.json", &run.cfg.to_json())?;
    Ok(run)
}

/// Loads a topology and checks it against the `[arch]` section.
fn load_topology(path: &Path, cfg: &ExperimentConfig) -> Result<Topology> {
    let topo = Topology::load(path).or_exit(TOPOLOGY)?;
    if topo.config != cfg.arch(topo.config.family) {
        return Err(Failure::new(
            TOPOLOGY,
            format!("{}: topology was made for a different configuration than [arch]", path.display()),
        )
        .into());
    }
    Ok(topo)
}

fn dense(cfg: &ArchConfig) -> Result<Topology> {
    Topology::dense(cfg).or_exit(CONFIG)
}

fn instantiate<T: Real>(topo: &Topology, rng: &mut ChaCha8Rng) -> Result<Network<T>> {
    Network::instantiate_subnet(&topo.config, topo, rng).or_exit(TOPOLOGY)
}

pub fn build(common: &Common, arch: Option<ArchArg>, topology: Option<&Path>) -> Result<()> {
    let run = prepare(common, |_| ())?;
    let cfg = &run.cfg;
    let arch = arch.unwrap_or(match cfg.arch.family {
        Family::Bionet => ArchArg::Bionet,
        Family::Bionetpp => ArchArg::Bionetpp,
    });
    let topo = match (arch, topology) {
        (ArchArg::Sub, Some(p)) => load_topology(p, cfg)?,
        (ArchArg::Sub, None) => return Err(Failure::new(CONFIG, "--arch sub requires --topology FILE").into()),
        (_, Some(_)) => return Err(Failure::new(CONFIG, "--topology only applies to --arch sub").into()),
        (ArchArg::Bionet, None) => dense(&cfg.arch(Family::Bionet))?,
        (ArchArg::Bionetpp, None) => dense(&cfg.arch(Family::Bionetpp))?,
    };
    match cfg.precision {
        Precision::F32 => build_with::<f32>(&run, &topo),
        Precision::F64 => build_with::<f64>(&run, &topo),
    }
}

fn build_with<T: Real>(run: &Run, topo: &Topology) -> Result<()> {
    let net = instantiate::<T>(topo, &mut run.rng())?;
    let r = report(&topo.name, net.plan(), run.cfg.data.height, run.cfg.data.width).or_exit(CONFIG)?;
    let stored = count_stored_params(&net);
    if stored != r.params {
        anyhow::bail!("stored parameters ({stored}) disagree with the planned count ({})", r.params);
    }
    print!("{}", r.to_table());
    run.write(&format!("cost_{}.json", topo.name), &r.to_json())?;
    run.write(&format!("topology_{}.json", topo.name), &topo.to_json())?;
    Ok(())
}

pub fn train(common: &Common, topology: Option<&Path>) -> Result<()> {
    let run = prepare(common, |_| ())?;
    if run.cfg.train.is_none() {
        return Err(Failure::new(CONFIG, "the config has no [train] section").into());
    }
    let topo = match topology {
        Some(p) => load_topology(p, &run.cfg)?,
        None => dense(&run.cfg.arch(run.cfg.arch.family))?,
    };
    match run.cfg.precision {
        Precision::F32 => train_with::<f32>(&run, &topo),
        Precision::F64 => train_with::<f64>(&run, &topo),
    }
}

fn train_with<T: Real>(run: &Run, topo: &Topology) -> Result<()> {
    let tc = run.cfg.train.clone().expect("checked by caller");
    let (train, val) = run.datasets()?;
    let net = instantiate::<T>(topo, &mut run.rng())?;
    let mut trainer = Trainer::new(net, tc).or_exit(CONFIG)?;
    let start = Instant::now();
    while !trainer.done() {
        let r = trainer.run_epoch(&train, &val)?;
        println!(
            "epoch {:>3}  loss {:.4}  lr {:.2e}  val mIoU {:.4}  val DICE {:.4}  ({:.0}s)",
            r.epoch,
            r.train_loss,
            r.lr,
            r.val_miou,
            r.val_dice,
            start.elapsed().as_secs_f64()
        );
    }
    save_checkpoint(&trainer, run.path("checkpoint.bin"))?;
    run.write("history.csv", &trainer.history.to_csv())?;
    run.write("curve.svg", &crate::plot::curve_svg(&trainer.history))?;
    run.write("topology.json", &topo.to_json())?;
    if let Some((e, m, _)) = &trainer.best {
        println!("best val mIoU {m:.4} at epoch {e}");
    }
    Ok(())
}

fn search_failure(e: Error) -> anyhow::Error {
    let code = if matches!(e, Error::Config(_)) { CONFIG } else { SEARCH };
    Failure::new(code, e.to_string()).into()
}

#[derive(Serialize)]
struct MacSummary {
    supernet: u64,
    phase1: u64,
    bix: Option<u64>,
}

#[derive(Serialize)]
struct StepCounts {
    pair: usize,
    population: usize,
    head: usize,
    tails: usize,
}

#[derive(Serialize)]
struct SearchSummary {
    baseline: Baseline,
    input_shape: [usize; 3],
    pairs: Vec<usize>,
    fairness: Option<bool>,
    phase1_edges: usize,
    bix_edges: Option<usize>,
    macs: MacSummary,
    step_counts: Vec<StepCounts>,
}

pub fn search(common: &Common, phase: PhaseArg, baseline: Option<BaselineArg>, candidates: Option<&Path>) -> Result<()> {
    let run = prepare(common, |cfg| {
        if let (Some(b), Some(s)) = (baseline, cfg.search.as_mut()) {
            s.phase2.baseline = match b {
                BaselineArg::None => Baseline::None,
                BaselineArg::Random => Baseline::Random,
                BaselineArg::Independent => Baseline::Independent,
            };
        }
    })?;
    if run.cfg.search.is_none() {
        return Err(Failure::new(CONFIG, "the config has no [search] section").into());
    }
    if phase == PhaseArg::One && candidates.is_some() {
        return Err(Failure::new(CONFIG, "--candidates only applies to phase 2").into());
    }
    match run.cfg.precision {
        Precision::F32 => search_with::<f32>(&run, phase, candidates),
        Precision::F64 => search_with::<f64>(&run, phase, candidates),
    }
}

fn search_with<T: Real>(run: &Run, phase: PhaseArg, candidates: Option<&Path>) -> Result<()> {
    let sc = run.cfg.search.clone().expect("checked by caller");
    let sup_cfg = run.cfg.arch(Family::Bionetpp);
    let supernet = dense(&sup_cfg)?;
    let (train, val) = run.datasets()?;
    let (h, w) = (run.cfg.data.height, run.cfg.data.width);
    let macs = |t: &Topology| count_macs(&bionet::arch::Plan::compile(t), h, w).or_exit(CONFIG);
    let start = Instant::now();

    let c = if phase == PhaseArg::Two {
        let path = candidates.map_or_else(|| run.path("phase1.json"), Path::to_path_buf);
        load_topology(&path, &run.cfg)?
    } else {
        let net = Network::<T>::build_bionet_pp(&sup_cfg, &mut run.rng()).or_exit(CONFIG)?;
        let outcome = phase1_search(net, &train, &sc.phase1).map_err(search_failure)?;
        run.write("phase1.json", &outcome.topology.to_json())?;
        run.write("phase1_frequency.csv", &outcome.frequency_csv())?;
        let mut losses = String::from("epoch,loss\n");
        for (e, l) in outcome.losses.iter().enumerate() {
            let _ = writeln!(losses, "{e},{l}");
        }
        run.write("phase1_loss.csv", &losses)?;
        println!(
            "phase 1: {} of {} edges kept ({:.0}s)",
            outcome.topology.len(),
            supernet.len(),
            start.elapsed().as_secs_f64()
        );
        outcome.topology
    };

    let mut summary = SearchSummary {
        baseline: sc.phase2.baseline,
        input_shape: [run.cfg.data.channels, h, w],
        pairs: Vec::new(),
        fairness: None,
        phase1_edges: c.len(),
        bix_edges: None,
        macs: MacSummary {
            supernet: macs(&supernet)?,
            phase1: macs(&c)?,
            bix: None,
        },
        step_counts: Vec::new(),
    };
    if phase != PhaseArg::One {
        let outcome = progressive_search::<T>(&c, &train, &val, &sc.phase2).map_err(search_failure)?;
        run.write("bix.json", &outcome.topology.to_json())?;
        run.write("search_log.csv", &outcome.log_csv())?;
        run.write("fairness.jsonl", &outcome.trace.to_jsonl())?;
        summary.pairs = outcome.pairs.clone();
        summary.fairness = Some(outcome.fair);
        summary.bix_edges = Some(outcome.topology.len());
        summary.macs.bix = Some(macs(&outcome.topology)?);
        summary.step_counts = outcome
            .counts
            .iter()
            .map(|&(pair, population, c)| StepCounts {
                pair,
                population,
                head: c.head,
                tails: c.tails,
            })
            .collect();
        println!(
            "phase 2: searched pairs {:?}, bix keeps {} edges, fairness {} ({:.0}s)",
            outcome.pairs,
            outcome.topology.len(),
            outcome.fair,
            start.elapsed().as_secs_f64()
        );
    }
    println!(
        "MACs: supernet {}  phase1 {}  bix {}",
        summary.macs.supernet,
        summary.macs.phase1,
        summary.macs.bix.map_or("-".to_string(), |m| m.to_string())
    );
    run.write(
        "search_summary.json",
        &(serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n"),
    )
}

pub fn eval(common: &Common, checkpoint: &Path, split: SplitArg) -> Result<()> {
    let run = prepare(common, |_| ())?;
    let topo = checkpoint_topology(checkpoint).or_exit(CHECKPOINT)?;
    if topo.config != run.cfg.arch(topo.config.family) {
        return Err(Failure::new(
            CHECKPOINT,
            format!("{}: checkpoint was trained with a different [arch] configuration", checkpoint.display()),
        )
        .into());
    }
    match run.cfg.precision {
        Precision::F32 => eval_with::<f32>(&run, &topo, checkpoint, split),
        Precision::F64 => eval_with::<f64>(&run, &topo, checkpoint, split),
    }
}

fn eval_with<T: Real>(run: &Run, topo: &Topology, checkpoint: &Path, split: SplitArg) -> Result<()> {
    let template = instantiate::<T>(topo, &mut run.rng()).map_err(|e| Failure::new(CHECKPOINT, e.to_string()))?;
    let trainer = load_checkpoint(checkpoint, template).or_exit(CHECKPOINT)?;
    let (train, val) = run.datasets()?;
    let data = match split {
        SplitArg::Train => &train,
        SplitArg::Val => &val,
    };
    let mut net = trainer.best_network().clone();
    let ev = evaluate(&mut net, data, trainer.config.batch_size)?;
    if let Some((e, m, _)) = &trainer.best {
        println!("checkpoint best val mIoU {m:.4} at epoch {e}");
    }
    print!("{}", metrics_table(&ev.metrics));
    run.write("eval.csv", &metrics_csv(&ev.metrics))
}

fn metrics_table(m: &Metrics) -> String {
    let mut s = format!("{:<6} {:>8} {:>8} {:>8} {:>8}\n", "class", "IoU", "DICE", "sens", "spec");
    for c in &m.classes {
        let flag = if c.empty { "  (absent)" } else { "" };
        let _ = writeln!(
            s,
            "{:<6} {:>8.4} {:>8.4} {:>8.4} {:>8.4}{flag}",
            c.class, c.iou, c.dice, c.sensitivity, c.specificity
        );
    }
    let _ = writeln!(
        s,
        "{:<6} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
        "mean", m.miou, m.dice, m.sensitivity, m.specificity
    );
    s
}

fn metrics_csv(m: &Metrics) -> String {
    let mut s = String::from("class,iou,dice,sensitivity,specificity,empty\n");
    for c in &m.classes {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            c.class, c.iou, c.dice, c.sensitivity, c.specificity, c.empty
        );
    }
    let _ = writeln!(s, "mean,{},{},{},{},false", m.miou, m.dice, m.sensitivity, m.specificity);
    s
}
