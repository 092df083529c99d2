//! Two-cycle adversarial training: joint generator updates, history-pooled
//! discriminator updates, checkpoints and per-epoch metrics.

mod bundle;
mod config;
mod pool;
mod run;
mod step;

pub use bundle::{Direction, ModelBundle};
pub use config::{Architecture, Mode, ModelConfig, TrainConfig};
pub use pool::HistoryPool;
pub use run::{
    read_metrics, run_training, EpochMetrics, ResolvedRun, RunOptions, RunOutcome, CHECKPOINT_DIR, LATEST_FILE,
    METRICS_FILE, RESOLVED_CONFIG_FILE,
};
pub use step::{
    evaluate_objective, load_bundle, resolve_checkpoint, CheckpointState, GeneratorOutput, StepReport, Trainer, STATE_FILE,
};

use crate::error::Result;
use crate::networks::ImageBatch;
use std::path::Path;

/// Runs `images` through one generator of a checkpoint. With `expected`, the
/// checkpoint must match that architecture.
pub fn translate(
    checkpoint: &Path,
    images: &ImageBatch,
    direction: Direction,
    expected: Option<&Architecture>,
) -> Result<ImageBatch> {
    let (bundle, _) = load_bundle(checkpoint, expected)?;
    bundle.translate(images, direction)
}
