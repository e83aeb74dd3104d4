//! Two-phase search over skip connections: differentiable narrowing of the
//! dense supernet, then progressive evolutionary selection per stage pair.

mod pareto;
mod phase1;
mod phase2;

pub use pareto::{dominates, pareto_front, ParetoPoint};
pub use phase1::{
    attach_selections, extract_candidates, phase1_search, phi, searching_blocks, selected_streams, FrequencyRow,
    Phase1Config, Phase1Outcome, SelectionMatrix,
};
pub use phase2::{
    check_skip_fairness, pair_candidates, progressive_search, sample_population, shared_forward, Baseline,
    CandidateSample, FairnessTrace, LogRow, Phase2Config, Phase2Outcome, SharedStep, StageCount, StepTrace,
};
