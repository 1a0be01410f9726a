//! Two-stage training orchestration, optimizer, checkpoints, and the
//! ablation grid runner.

mod ablate;
mod checkpoint;
mod optim;
mod stages;

pub use ablate::{
    default_grid, find_cell, run_ablation, run_cell, AblationCell, AblationReport, CellResult,
    MixKind, SeedScores,
};
pub use checkpoint::{
    component_of, load_checkpoint, save_checkpoint, verify_fingerprints, BlobEntry, BlobMap,
    Checkpoint, CheckpointMeta, RngState, SaveSpec, CKPT_VERSION,
};
pub use optim::AdamW;
pub use stages::{
    Branch, BranchSet, FinetunePlan, FinetuneRun, OptimizerSpec, Pipeline, PretrainOutcome,
    PretrainPlan, StagePlan,
};

use std::collections::BTreeSet;

use crate::tensor::Mat;

/// Components whose parameters changed between two named-parameter maps
/// (bitwise at the f32 grid), grouped via [`component_of`].
pub fn changed_components(
    before: &std::collections::BTreeMap<String, Mat>,
    after: &std::collections::BTreeMap<String, Mat>,
) -> BTreeSet<String> {
    let mut changed = BTreeSet::new();
    for (name, b) in before {
        match after.get(name) {
            Some(a) if a == b => {}
            _ => {
                changed.insert(component_of(name));
            }
        }
    }
    for name in after.keys() {
        if !before.contains_key(name) {
            changed.insert(component_of(name));
        }
    }
    changed
}
