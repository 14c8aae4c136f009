//! End-to-end training, inference, evaluation and prototype inspection.

mod check;
mod infer;
mod inspect;
mod train;

pub use check::{gradient_check, CheckInstance};
pub use infer::{argmax, evaluate, infer_video, top_k, BestMatch, EvalReport, Prediction, Scorer, VideoResult};
pub use inspect::{inspect, InspectReport, KernelSummary, SubgraphHit};
pub use train::{train, train_with, EpochRecord};

use crate::config::RunConfig;
use crate::data::DatasetMeta;
use crate::error::{Error, Result};

/// Fails unless the dataset shape matches what the config (and hence the
/// bank's `D_x` per scale) expects.
pub(crate) fn check_meta(cfg: &RunConfig, meta: &DatasetMeta) -> Result<()> {
    let pairs = [
        ("num_classes", cfg.num_classes, meta.num_classes),
        ("L", cfg.l, meta.l),
        ("T", cfg.t, meta.t),
        ("M", cfg.m, meta.m),
        ("D_vis", cfg.d_vis, meta.d_vis),
    ];
    for (name, want, got) in pairs {
        if want != got {
            return Err(Error::InvalidData(format!(
                "dataset {name} = {got} but the configuration expects {want}"
            )));
        }
    }
    Ok(())
}

/// Maps canonical node ids to `(clip, slot)` via `inv[canonical] = storage`.
pub(crate) fn storage_positions(nodes: &[usize], inv: &[usize], m: usize) -> Vec<(usize, usize)> {
    nodes.iter().map(|&n| (inv[n] / m, inv[n] % m)).collect()
}
