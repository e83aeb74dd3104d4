use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{ArchConfig, Family};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Encoder stage to the following decoder stage.
    Forward,
    /// Decoder stage to the following encoder stage.
    Backward,
}

/// A directed skip between consecutive extraction stages (1-based).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkipEdge {
    pub from_stage: usize,
    pub from_level: usize,
    pub to_stage: usize,
    pub to_level: usize,
    pub direction: Direction,
}

impl SkipEdge {
    pub fn new(from_stage: usize, from_level: usize, to_level: usize) -> Self {
        SkipEdge {
            from_stage,
            from_level,
            to_stage: from_stage + 1,
            to_level,
            direction: if ArchConfig::is_encoder_stage(from_stage) {
                Direction::Forward
            } else {
                Direction::Backward
            },
        }
    }

    /// Stage-pair index `t` for an edge from stage `t` to `t + 1`.
    pub fn pair(&self) -> usize {
        self.from_stage
    }

    pub fn block(&self) -> (usize, usize) {
        (self.to_stage, self.to_level)
    }
}

/// A configuration plus its kept skip edges, held in canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct Topology {
    pub name: String,
    pub config: ArchConfig,
    edges: BTreeSet<SkipEdge>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TopologyFile {
    schema: u32,
    name: String,
    config: ArchConfig,
    edges: Vec<SkipEdge>,
}

const SCHEMA: u32 = 1;

impl Topology {
    /// Validates every edge against the configuration; duplicates collapse.
    pub fn new(name: impl Into<String>, config: ArchConfig, edges: impl IntoIterator<Item = SkipEdge>) -> Result<Self> {
        config.validate()?;
        let edges: BTreeSet<SkipEdge> = edges.into_iter().collect();
        for e in &edges {
            check_edge(&config, e)?;
        }
        Ok(Topology {
            name: name.into(),
            config,
            edges,
        })
    }

    /// Every admissible edge of the configuration.
    pub fn dense(config: &ArchConfig) -> Result<Self> {
        config.validate()?;
        let name = match config.family {
            Family::Bionet => "bionet",
            Family::Bionetpp => "supernet",
        };
        Self::new(name, config.clone(), admissible_edges(config))
    }

    pub fn edges(&self) -> impl Iterator<Item = &SkipEdge> + '_ {
        self.edges.iter()
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn contains(&self, e: &SkipEdge) -> bool {
        self.edges.contains(e)
    }

    /// Edges entering block `(stage, level)`, ascending by source level.
    pub fn incoming(&self, stage: usize, level: usize) -> Vec<SkipEdge> {
        self.edges.iter().filter(|e| e.block() == (stage, level)).copied().collect()
    }

    /// Edges of stage pair `t` (from stage `t` to `t + 1`).
    pub fn pair_edges(&self, t: usize) -> Vec<SkipEdge> {
        self.edges.iter().filter(|e| e.pair() == t).copied().collect()
    }

    /// Copy with the edges of stage pair `t` replaced.
    pub fn with_pair(&self, t: usize, edges: impl IntoIterator<Item = SkipEdge>) -> Result<Self> {
        let kept = self.edges.iter().filter(|e| e.pair() != t).copied();
        let new: Vec<SkipEdge> = edges.into_iter().collect();
        if let Some(e) = new.iter().find(|e| e.pair() != t) {
            return Err(Error::Topology(format!("edge {e:?} does not belong to stage pair {t}")));
        }
        Self::new(self.name.clone(), self.config.clone(), kept.chain(new))
    }

    pub fn renamed(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn is_subset_of(&self, other: &Topology) -> bool {
        self.edges.is_subset(&other.edges)
    }

    /// Canonical JSON text, newline terminated.
    pub fn to_json(&self) -> String {
        let file = TopologyFile {
            schema: SCHEMA,
            name: self.name.clone(),
            config: self.config.clone(),
            edges: self.edges.iter().copied().collect(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("topology serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let file: TopologyFile = serde_json::from_str(text).map_err(|e| Error::Parse {
            location: format!("{origin}:{}:{}", e.line(), e.column()),
            message: e.to_string(),
        })?;
        if file.schema != SCHEMA {
            return Err(Error::Parse {
                location: format!("{origin}: field `schema`"),
                message: format!("unsupported schema {} (expected {SCHEMA})", file.schema),
            });
        }
        Self::new(file.name, file.config, file.edges)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }
}

fn admissible_edges(cfg: &ArchConfig) -> Vec<SkipEdge> {
    let l = cfg.depth;
    let mut out = Vec::new();
    for s in 1..cfg.stages() {
        match cfg.family {
            Family::Bionetpp => {
                for from in 0..=l {
                    for to in 0..=l {
                        out.push(SkipEdge::new(s, from, to));
                    }
                }
            }
            Family::Bionet => {
                let levels = if ArchConfig::is_encoder_stage(s) {
                    0..l
                } else {
                    l - cfg.backward_skips..l
                };
                out.extend(levels.map(|v| SkipEdge::new(s, v, v)));
            }
        }
    }
    out
}

fn check_edge(cfg: &ArchConfig, e: &SkipEdge) -> Result<()> {
    let fail = |why: &str| Err(Error::Topology(format!("edge {e:?}: {why}")));
    if e.from_stage < 1 || e.from_stage >= cfg.stages() {
        return fail(&format!("from_stage must lie in 1..{}", cfg.stages() - 1));
    }
    if e.to_stage != e.from_stage + 1 {
        return fail("to_stage must equal from_stage + 1");
    }
    if e.from_level > cfg.depth || e.to_level > cfg.depth {
        return fail(&format!("levels must lie in 0..={}", cfg.depth));
    }
    let expected = SkipEdge::new(e.from_stage, e.from_level, e.to_level).direction;
    if e.direction != expected {
        return fail("direction disagrees with the source stage");
    }
    if cfg.family == Family::Bionet {
        if e.from_level != e.to_level {
            return fail("single-scale networks only skip within a level");
        }
        if e.from_level >= cfg.depth {
            return fail("the bridge level carries no skips");
        }
        if e.direction == Direction::Backward && e.from_level < cfg.depth - cfg.backward_skips {
            return fail("level has no backward skip under W_back");
        }
    }
    Ok(())
}
