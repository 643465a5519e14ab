//! Stage orchestration, checkpoints and training loops.

pub mod checkpoint;
pub mod recipe;
pub mod train;

pub use checkpoint::{Checkpoint, LineageEntry, ModelKind, OptimizerState};
pub use recipe::{
    check_lineage, run_recipe, InitMode, Recipe, RecipeOutcome, Runner, StageConfig, StageKind, StageSummary,
};
