//! Training orchestration, evaluation, checkpoint and metrics files, SVG
//! plots and the `casnet` command-line tool, on top of `casnet-core`.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod plot;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{Algo, EnvSelection, PolicyKind, TrainConfig};
pub use error::{HarnessError, Result};
pub use eval::{eval_policy, normalized_score, random_baseline, EvalResult, Score};
pub use metrics::MetricsRow;
pub use train::{train, train_expert, train_general, TrainOutcome};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent generator number `stream` under `seed`.
pub fn seeded_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
