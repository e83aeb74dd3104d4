//! Parameter, multiply-accumulate and search-cost accounting.
//!
//! MAC conventions, per sample:
//! - convolution: `out·in·k²` per output pixel (transposed: per input pixel);
//! - normalization: 2 per element; rectifier, pooling, concatenation: 0;
//! - bilinear resize: 4 per output element (0 when the size is unchanged);
//! - averaging `k ≥ 2` streams: `k` per element.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use num_bigint::BigUint;
use serde::Serialize;

use crate::arch::{ConvSpec, Family, Network, Op, Plan, Site};
use crate::error::{Error, Result};
use crate::nn::FusionMode;
use crate::tensor::Real;

pub const CONVENTIONS: &str = "1 MAC per multiply-accumulate; conv out*in*k*k per output pixel (transposed: per input pixel); \
batch-norm 2/elem; bilinear resize 4/output elem; averaging k>=2 streams k/elem; relu, max-pool, concat 0";

/// Cost of one block instance.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockCost {
    pub site: String,
    pub params: u64,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub name: String,
    /// Convolution weights and biases, each shared layer once.
    pub conv_params: u64,
    /// Normalization affine parameters, once per instance.
    pub norm_params: u64,
    pub params: u64,
    pub macs: u64,
    /// Channels × height × width of the costed input.
    pub input_shape: [usize; 3],
    pub stage_pairs: usize,
    pub edges: usize,
    pub live_blocks: usize,
    pub conventions: String,
    /// Known departures from the reference description, per family.
    pub deviations: Vec<String>,
    pub breakdown: Vec<BlockCost>,
}

/// Departures from the reference network description.
pub fn deviations(family: Family) -> &'static [&'static str] {
    match family {
        Family::Bionet => &[
            "normalization layers are instanced per iteration; only convolutions are shared",
            "MACs follow the stated conventions; the reference counter is unspecified",
        ],
        Family::Bionetpp => &[
            "one channel width at every level, so cross-level averaging needs no projection",
            "skips are bilinearly resized to the target level before averaging",
            "normalization layers are instanced per stage; convolutions are shared per role, level and unit",
            "MACs follow the stated conventions and exceed the reference figure; only orderings are comparable",
        ],
    }
}

fn conv_params(spec: &ConvSpec) -> u64 {
    (spec.out_ch * spec.in_ch * spec.kernel * spec.kernel + spec.out_ch) as u64
}

/// Convolution plus normalization parameters of the live blocks.
pub fn count_params(plan: &Plan) -> u64 {
    count_conv_params(plan) + count_norm_params(plan)
}

pub fn count_conv_params(plan: &Plan) -> u64 {
    plan.live_convs().values().map(conv_params).sum()
}

pub fn count_norm_params(plan: &Plan) -> u64 {
    plan.live_norms().values().map(|&c| 2 * c as u64).sum()
}

/// Parameter count from the materialized weight arrays of the live layers.
pub fn count_stored_params<T: Real>(net: &Network<T>) -> u64 {
    let plan = net.plan();
    let live = plan.live_convs();
    let mut total = 0u64;
    for (k, p) in net.convs() {
        if live.contains_key(k) {
            total += net.store.value(p.weight).shape().iter().product::<usize>() as u64;
            if let Some(b) = p.bias {
                total += net.store.value(b).shape().iter().product::<usize>() as u64;
            }
        }
    }
    let norms = plan.live_norms();
    for (k, bn) in net.norms() {
        if norms.contains_key(k) {
            total += (net.store.value(bn.gamma).numel() + net.store.value(bn.beta).numel()) as u64;
        }
    }
    total
}

/// MACs of one instruction at base spatial size `h × w`.
fn instr_macs(plan: &Plan, i: usize, h: usize, w: usize) -> u64 {
    let ins = &plan.instrs[i];
    let numel = |level: usize, ch: usize| (ch * (h >> level) * (w >> level)) as u64;
    let out = numel(ins.level, ins.channels);
    match &ins.op {
        Op::Input | Op::Pool { .. } => 0,
        Op::Unit { conv, .. } | Op::Head { conv, .. } => {
            let s = &plan.convs[conv];
            let conv_macs = (s.out_ch * s.in_ch * s.kernel * s.kernel) as u64 * ((h >> ins.level) * (w >> ins.level)) as u64;
            let norm = if matches!(ins.op, Op::Unit { .. }) { 2 * out } else { 0 };
            conv_macs + norm
        }
        Op::UpTranspose { conv, input } => {
            let s = &plan.convs[conv];
            let lv = plan.instrs[*input].level;
            (s.out_ch * s.in_ch * s.kernel * s.kernel) as u64 * ((h >> lv) * (w >> lv)) as u64
        }
        Op::Resize { .. } => 4 * out,
        Op::Fuse { mode, inputs } => match mode {
            FusionMode::Concat => 0,
            FusionMode::Average if inputs.len() >= 2 => inputs.len() as u64 * out,
            FusionMode::Average => 0,
        },
        Op::SkipFuse { skips, .. } => {
            let inner = if skips.len() >= 2 { skips.len() as u64 * out } else { 0 };
            inner + 2 * out
        }
    }
}

/// Per-sample MACs of the live instructions at input size `h × w`.
pub fn count_macs(plan: &Plan, h: usize, w: usize) -> Result<u64> {
    plan.config.check_input(h, w)?;
    Ok((0..plan.instrs.len())
        .filter(|&i| plan.live[i])
        .map(|i| instr_macs(plan, i, h, w))
        .sum())
}

/// Full report with a per-block breakdown; shared convolution parameters
/// are attributed to the first live block using them.
pub fn report(name: &str, plan: &Plan, h: usize, w: usize) -> Result<CostReport> {
    plan.config.check_input(h, w)?;
    let mut by_site: BTreeMap<Site, (u64, u64)> = BTreeMap::new();
    let mut order: Vec<Site> = Vec::new();
    let mut seen_convs = std::collections::BTreeSet::new();
    for (i, ins) in plan.instrs.iter().enumerate() {
        if !plan.live[i] {
            continue;
        }
        let entry = by_site.entry(ins.site).or_insert_with(|| {
            order.push(ins.site);
            (0, 0)
        });
        entry.1 += instr_macs(plan, i, h, w);
        if let Op::Unit { conv, .. } | Op::Head { conv, .. } | Op::UpTranspose { conv, .. } = &ins.op {
            if seen_convs.insert(*conv) {
                entry.0 += conv_params(&plan.convs[conv]);
            }
        }
        if let Op::Unit { .. } = &ins.op {
            entry.0 += 2 * ins.channels as u64;
        }
    }
    let breakdown: Vec<BlockCost> = order
        .iter()
        .map(|s| BlockCost {
            site: s.to_string(),
            params: by_site[s].0,
            macs: by_site[s].1,
        })
        .collect();
    let edges = plan
        .instrs
        .iter()
        .map(|ins| match &ins.op {
            Op::SkipFuse { skips, .. } => skips.len(),
            _ => 0,
        })
        .sum::<usize>();
    let r = CostReport {
        name: name.to_string(),
        conv_params: count_conv_params(plan),
        norm_params: count_norm_params(plan),
        params: count_params(plan),
        macs: count_macs(plan, h, w)?,
        input_shape: [plan.config.in_channels, h, w],
        stage_pairs: plan.config.stage_pairs(),
        edges,
        live_blocks: order.iter().filter(|s| matches!(s, Site::Block { .. })).count(),
        conventions: CONVENTIONS.to_string(),
        deviations: deviations(plan.config.family).iter().map(|d| d.to_string()).collect(),
        breakdown,
    };
    debug_assert_eq!(r.params, r.breakdown.iter().map(|b| b.params).sum::<u64>());
    debug_assert_eq!(r.macs, r.breakdown.iter().map(|b| b.macs).sum::<u64>());
    Ok(r)
}

impl CostReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Terminal table.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let [c, h, w] = self.input_shape;
        let _ = writeln!(s, "# {}", self.conventions);
        let _ = writeln!(s, "network      {}", self.name);
        let _ = writeln!(s, "input        {c}x{h}x{w}");
        let _ = writeln!(s, "stage pairs  {}", self.stage_pairs);
        let _ = writeln!(s, "live blocks  {}", self.live_blocks);
        let _ = writeln!(s, "conv params  {}", self.conv_params);
        let _ = writeln!(s, "norm params  {}", self.norm_params);
        let _ = writeln!(s, "params       {}", self.params);
        let _ = writeln!(s, "macs         {}", self.macs);
        for d in &self.deviations {
            let _ = writeln!(s, "# deviation: {d}");
        }
        let _ = writeln!(s, "{:<10} {:>12} {:>16}", "block", "params", "macs");
        for b in &self.breakdown {
            let _ = writeln!(s, "{:<10} {:>12} {:>16}", b.site, b.params, b.macs);
        }
        s
    }
}

fn binomial(n: u64, k: u64) -> BigUint {
    let mut r = BigUint::from(1u32);
    for i in 0..k {
        r = r * BigUint::from(n - i) / BigUint::from(i + 1);
    }
    r
}

/// `Σ_{k=1}^{N−2} C(N, k)^{L·(2T−1)}` in exact integer arithmetic.
pub fn search_space_size(n: u64, l: u64, t: u64) -> Result<BigUint> {
    if n < 3 {
        return Err(Error::Domain(format!("search space needs N >= 3, got {n}")));
    }
    if t < 1 {
        return Err(Error::Domain("search space needs T >= 1".into()));
    }
    let exp = u32::try_from(l * (2 * t - 1)).map_err(|_| Error::Domain("exponent too large".into()))?;
    Ok((1..=n - 2).map(|k| binomial(n, k).pow(exp)).sum())
}

/// `2·T·|P|·(I_F + I_B)`: training every candidate separately for a step.
pub fn conventional_search_cost(t: u64, p: u64, i_f: u64, i_b: u64) -> u128 {
    2 * t as u128 * p as u128 * (i_f as u128 + i_b as u128)
}

/// `I_B + Σ_{t=1}^{2T−1} (t·I_F + (2T−t)·I_F·|P|)`.
pub fn progressive_search_cost(t: u64, p: u64, i_f: u64, i_b: u64) -> u128 {
    let (t, p, i_f) = (t as u128, p as u128, i_f as u128);
    let stages = 2 * t;
    i_b as u128 + (1..stages).map(|s| s * i_f + (stages - s) * i_f * p).sum::<u128>()
}
