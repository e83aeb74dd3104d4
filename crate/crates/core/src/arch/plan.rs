//! Unrolled instruction list for a topology.
//!
//! Every instruction defines one value, addressed by its index. Block
//! outputs are exported under a [`Site`] so partial executions can resume
//! from precomputed features. Liveness is computed backwards from the
//! logits; dead instructions are skipped by execution and by cost
//! accounting alike.

use std::collections::BTreeMap;

use serde::Serialize;

use super::config::{ArchConfig, Family, UpsampleMode};
use super::topology::{Direction, Topology};
use crate::nn::FusionMode;

/// Position of a building block in the unrolled network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Site {
    Pre,
    Block { stage: usize, level: usize },
    Post,
}

impl Site {
    /// Stage index: 0 for pre-processing, `2T + 1` for post-processing.
    pub fn stage(&self, cfg: &ArchConfig) -> usize {
        match *self {
            Site::Pre => 0,
            Site::Block { stage, .. } => stage,
            Site::Post => cfg.stages() + 1,
        }
    }
}

impl std::fmt::Display for Site {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Site::Pre => write!(f, "pre"),
            Site::Block { stage, level } => write!(f, "s{stage}.l{level}"),
            Site::Post => write!(f, "post"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Role {
    Pre,
    Encoder,
    Bridge,
    Decoder,
    Up,
    Post,
    Head,
}

/// Identifies one shared convolution layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct ConvKey {
    pub role: Role,
    pub level: usize,
    pub unit: usize,
}

/// Identifies one normalization instance: a layer at a given stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct NormKey {
    pub conv: ConvKey,
    pub stage: usize,
}

/// Geometry of a convolution layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub transposed: bool,
}

impl ConvSpec {
    fn unit(in_ch: usize, out_ch: usize) -> Self {
        ConvSpec {
            in_ch,
            out_ch,
            kernel: 3,
            stride: 1,
            padding: 1,
            transposed: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Input,
    /// Convolution, normalization and rectifier.
    Unit { conv: ConvKey, norm: NormKey, input: usize },
    /// 1×1 projection to class logits.
    Head { conv: ConvKey, input: usize },
    Pool { input: usize },
    UpTranspose { conv: ConvKey, input: usize },
    /// Bilinear resize to the spatial size of `level`.
    Resize { input: usize, level: usize },
    Fuse { mode: FusionMode, inputs: Vec<usize> },
    /// Mean of the sequential stream and the mean of the skip streams;
    /// `skips` lists `(from_level, value)` ascending.
    SkipFuse { seq: usize, skips: Vec<(usize, usize)> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instr {
    pub op: Op,
    pub site: Site,
    pub stage: usize,
    /// Spatial level of the produced value.
    pub level: usize,
    /// Channel count of the produced value.
    pub channels: usize,
}

/// Compiled unrolled network.
#[derive(Clone, Debug)]
pub struct Plan {
    pub config: ArchConfig,
    pub instrs: Vec<Instr>,
    pub live: Vec<bool>,
    pub output: usize,
    /// Block output value per site.
    pub exports: BTreeMap<Site, usize>,
    pub convs: BTreeMap<ConvKey, ConvSpec>,
}

struct Builder {
    cfg: ArchConfig,
    instrs: Vec<Instr>,
    exports: BTreeMap<Site, usize>,
    convs: BTreeMap<ConvKey, ConvSpec>,
}

impl Builder {
    fn push(&mut self, op: Op, site: Site, level: usize, channels: usize) -> usize {
        let stage = site.stage(&self.cfg);
        self.instrs.push(Instr {
            op,
            site,
            stage,
            level,
            channels,
        });
        self.instrs.len() - 1
    }

    fn conv(&mut self, key: ConvKey, spec: ConvSpec) -> ConvKey {
        let prev = self.convs.insert(key, spec);
        debug_assert!(prev.is_none() || prev == Some(spec), "conv {key:?} reused with new geometry");
        key
    }

    fn unit(&mut self, role: Role, level: usize, unit: usize, input: usize, out_ch: usize, site: Site) -> usize {
        let in_ch = self.instrs[input].channels;
        let conv = self.conv(ConvKey { role, level, unit }, ConvSpec::unit(in_ch, out_ch));
        let stage = site.stage(&self.cfg);
        let lv = self.instrs[input].level;
        self.push(
            Op::Unit {
                conv,
                norm: NormKey { conv, stage },
                input,
            },
            site,
            lv,
            out_ch,
        )
    }

    fn pool(&mut self, input: usize, site: Site) -> usize {
        let (l, c) = (self.instrs[input].level, self.instrs[input].channels);
        self.push(Op::Pool { input }, site, l + 1, c)
    }

    fn resize(&mut self, input: usize, level: usize, site: Site) -> usize {
        if self.instrs[input].level == level {
            return input;
        }
        let c = self.instrs[input].channels;
        self.push(Op::Resize { input, level }, site, level, c)
    }

    fn fuse(&mut self, inputs: Vec<usize>, site: Site) -> usize {
        let mode = self.cfg.fusion;
        let level = self.instrs[inputs[0]].level;
        let channels = match mode {
            FusionMode::Concat => inputs.iter().map(|&i| self.instrs[i].channels).sum(),
            FusionMode::Average => self.instrs[inputs[0]].channels,
        };
        self.push(Op::Fuse { mode, inputs }, site, level, channels)
    }

    fn export(&mut self, site: Site, value: usize) {
        self.exports.insert(site, value);
    }

    fn pre(&mut self) -> usize {
        let w0 = self.cfg.width(0);
        let mut x = self.push(Op::Input, Site::Pre, 0, self.cfg.in_channels);
        for u in 0..3 {
            x = self.unit(Role::Pre, 0, u, x, w0, Site::Pre);
        }
        self.export(Site::Pre, x);
        x
    }

    fn post(&mut self, x: usize) -> usize {
        let w0 = self.cfg.width(0);
        let mut x = x;
        for u in 0..2 {
            x = self.unit(Role::Post, 0, u, x, w0, Site::Post);
        }
        let k = self.cfg.num_classes;
        let conv = self.conv(
            ConvKey {
                role: Role::Head,
                level: 0,
                unit: 0,
            },
            ConvSpec {
                in_ch: w0,
                out_ch: k,
                kernel: 1,
                stride: 1,
                padding: 0,
                transposed: false,
            },
        );
        let y = self.push(Op::Head { conv, input: x }, Site::Post, 0, k);
        self.export(Site::Post, y);
        y
    }

    fn finish(self, output: usize) -> Plan {
        let mut live = vec![false; self.instrs.len()];
        live[output] = true;
        for i in (0..self.instrs.len()).rev() {
            if !live[i] {
                continue;
            }
            for d in deps(&self.instrs[i].op) {
                live[d] = true;
            }
        }
        Plan {
            config: self.cfg,
            instrs: self.instrs,
            live,
            output,
            exports: self.exports,
            convs: self.convs,
        }
    }
}

/// Operand values of an instruction.
pub fn deps(op: &Op) -> Vec<usize> {
    match op {
        Op::Input => vec![],
        Op::Unit { input, .. } | Op::Head { input, .. } | Op::Pool { input } => vec![*input],
        Op::UpTranspose { input, .. } | Op::Resize { input, .. } => vec![*input],
        Op::Fuse { inputs, .. } => inputs.clone(),
        Op::SkipFuse { seq, skips } => std::iter::once(*seq).chain(skips.iter().map(|s| s.1)).collect(),
    }
}

impl Plan {
    pub fn compile(topo: &Topology) -> Plan {
        let cfg = topo.config.clone();
        let mut b = Builder {
            cfg: cfg.clone(),
            instrs: Vec::new(),
            exports: BTreeMap::new(),
            convs: BTreeMap::new(),
        };
        let out = match cfg.family {
            Family::Bionet => compile_single_scale(&mut b, topo),
            Family::Bionetpp => compile_multi_scale(&mut b, topo),
        };
        b.finish(out)
    }

    pub fn is_live(&self, i: usize) -> bool {
        self.live[i]
    }

    /// Live block sites in execution order.
    pub fn live_sites(&self) -> Vec<Site> {
        let mut seen = Vec::new();
        for (i, ins) in self.instrs.iter().enumerate() {
            if self.live[i] && !seen.contains(&ins.site) {
                seen.push(ins.site);
            }
        }
        seen
    }

    /// Convolution layers used by at least one live instruction.
    pub fn live_convs(&self) -> BTreeMap<ConvKey, ConvSpec> {
        let mut out = BTreeMap::new();
        for (i, ins) in self.instrs.iter().enumerate() {
            if !self.live[i] {
                continue;
            }
            if let Op::Unit { conv, .. } | Op::Head { conv, .. } | Op::UpTranspose { conv, .. } = &ins.op {
                out.insert(*conv, self.convs[conv]);
            }
        }
        out
    }

    /// Normalization instances of live units with their channel counts.
    pub fn live_norms(&self) -> BTreeMap<NormKey, usize> {
        let mut out = BTreeMap::new();
        for (i, ins) in self.instrs.iter().enumerate() {
            if let (true, Op::Unit { norm, .. }) = (self.live[i], &ins.op) {
                out.insert(*norm, ins.channels);
            }
        }
        out
    }

    /// Every normalization instance, live or not.
    pub fn all_norms(&self) -> BTreeMap<NormKey, usize> {
        let mut out = BTreeMap::new();
        for ins in &self.instrs {
            if let Op::Unit { norm, .. } = &ins.op {
                out.insert(*norm, ins.channels);
            }
        }
        out
    }

    /// Fusion points that consume a backward skip plus the decoder blocks
    /// that emit one: each backward edge touches one of each.
    pub fn backward_fusion_sites(&self) -> usize {
        let mut sites = std::collections::BTreeSet::new();
        for e in self.edges_used() {
            if e.1 == Direction::Backward {
                sites.insert(e.0);
                sites.insert(e.2);
            }
        }
        sites.len()
    }

    fn edges_used(&self) -> Vec<(Site, Direction, Site)> {
        let mut out = Vec::new();
        for ins in &self.instrs {
            let inputs = match &ins.op {
                Op::Fuse { inputs, .. } => inputs.clone(),
                Op::SkipFuse { skips, .. } => skips.iter().map(|s| s.1).collect(),
                _ => continue,
            };
            for v in inputs {
                let src = self.root(v);
                let from = self.instrs[src].site;
                if from != ins.site && matches!(from, Site::Block { .. }) && self.exports.get(&from) == Some(&src) {
                    let dir = if ArchConfig::is_encoder_stage(from.stage(&self.config)) {
                        Direction::Forward
                    } else {
                        Direction::Backward
                    };
                    if from.stage(&self.config) + 1 == ins.stage {
                        out.push((from, dir, ins.site));
                    }
                }
            }
        }
        out
    }

    /// Follows resize chains back to the value being resampled.
    pub fn root(&self, mut v: usize) -> usize {
        while let Op::Resize { input, .. } = self.instrs[v].op {
            v = input;
        }
        v
    }
}

fn compile_single_scale(b: &mut Builder, topo: &Topology) -> usize {
    let cfg = topo.config.clone();
    let (l_max, t_max) = (cfg.depth, cfg.iterations);
    let pre = b.pre();
    let mut dec_prev: Vec<Option<usize>> = vec![None; l_max];
    let mut last = pre;
    for i in 1..=t_max {
        let (se, sd) = (2 * i - 1, 2 * i);
        let mut enc = Vec::with_capacity(l_max);
        let mut seq = pre;
        for l in 0..l_max {
            let site = Site::Block { stage: se, level: l };
            if l > 0 {
                seq = b.pool(seq, site);
            }
            let back = match dec_prev[l] {
                Some(d) if topo.contains(&super::SkipEdge::new(sd - 2, l, l)) => d,
                _ => seq,
            };
            let fused = b.fuse(vec![back, seq], site);
            let u1 = b.unit(Role::Encoder, l, 0, fused, cfg.width(l), site);
            let u2 = b.unit(Role::Encoder, l, 1, u1, cfg.width(l + 1), site);
            b.export(site, u2);
            enc.push(u2);
            seq = u2;
        }
        let bridge_site = Site::Block {
            stage: se,
            level: l_max,
        };
        let p = b.pool(seq, bridge_site);
        let wl = cfg.width(l_max);
        let bridge = b.unit(Role::Bridge, l_max, 0, p, wl, bridge_site);
        b.export(bridge_site, bridge);

        let mut x = bridge;
        for l in (0..l_max).rev() {
            let site = Site::Block { stage: sd, level: l };
            let c = cfg.width(l + 1);
            let up = match cfg.upsample {
                UpsampleMode::Transpose => {
                    let conv = b.conv(
                        ConvKey {
                            role: Role::Up,
                            level: l,
                            unit: 0,
                        },
                        ConvSpec {
                            in_ch: b.instrs[x].channels,
                            out_ch: c,
                            kernel: 2,
                            stride: 2,
                            padding: 0,
                            transposed: true,
                        },
                    );
                    b.push(Op::UpTranspose { conv, input: x }, site, l, c)
                }
                UpsampleMode::Bilinear => b.resize(x, l, site),
            };
            let skip = if topo.contains(&super::SkipEdge::new(se, l, l)) {
                enc[l]
            } else {
                up
            };
            let fused = b.fuse(vec![skip, up], site);
            let u1 = b.unit(Role::Decoder, l, 0, fused, c, site);
            let u2 = b.unit(Role::Decoder, l, 1, u1, cfg.width(l), site);
            b.export(site, u2);
            dec_prev[l] = Some(u2);
            x = u2;
        }
        last = x;
    }
    b.post(last)
}

fn compile_multi_scale(b: &mut Builder, topo: &Topology) -> usize {
    let cfg = topo.config.clone();
    let (l_max, stages) = (cfg.depth, cfg.stages());
    let c = cfg.width(0);
    let pre = b.pre();
    let mut prev: Vec<usize> = Vec::new();
    for s in 1..=stages {
        let encoder = ArchConfig::is_encoder_stage(s);
        let role = if encoder { Role::Encoder } else { Role::Decoder };
        let mut out = vec![0usize; l_max + 1];
        let levels: Vec<usize> = if encoder {
            (0..=l_max).collect()
        } else {
            (0..=l_max).rev().collect()
        };
        for &l in &levels {
            let site = Site::Block { stage: s, level: l };
            let seq = if encoder {
                if l == 0 {
                    pre
                } else {
                    b.pool(out[l - 1], site)
                }
            } else if l == l_max {
                prev[l_max]
            } else {
                b.resize(out[l + 1], l, site)
            };
            let mut skips = Vec::new();
            for e in topo.incoming(s, l) {
                let r = b.resize(prev[e.from_level], l, site);
                skips.push((e.from_level, r));
            }
            let fused = if skips.is_empty() {
                seq
            } else {
                b.push(Op::SkipFuse { seq, skips }, site, l, c)
            };
            let u1 = b.unit(role, l, 0, fused, 2 * c, site);
            let u2 = b.unit(role, l, 1, u1, c, site);
            b.export(site, u2);
            out[l] = u2;
        }
        prev = out;
    }
    b.post(prev[0])
}
