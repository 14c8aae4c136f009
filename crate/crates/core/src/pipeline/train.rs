//! The training loop over (class, scale) cells.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::check_meta;
use crate::autodiff::{clip_grad_norm, grad_norm, sgd_step_on, OptimizerConfig, ParamId, ParamStore, Tape};
use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gmm::{batch_loss, prune_kernels, update_ema, CellState, MembershipNet, MixtureParams, PrototypeBank};
use crate::graph::{subgraph_rows, GraphInputs, GraphParams};
use crate::seed::{derive_seed, subgraph_seed};
use crate::subgraph::{select_ranks, unrank_lex};

const TAG_INIT: u64 = 0x11;
const TAG_EPOCH: u64 = 0x12;
const TAG_STATS: u64 = 0x13;
/// Sub-graphs drawn per cell to fix the membership input statistics.
const STATS_SAMPLES: usize = 512;

/// One per-epoch, per-cell progress line.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub class: usize,
    pub scale: usize,
    pub steps: usize,
    pub mean_loss: f64,
    pub mean_nll: f64,
    /// Kernels alive after this epoch's pruning.
    pub k: usize,
}

struct VideoPool {
    inputs: GraphInputs,
    /// Lexicographic sub-graph ranks, one list per configured scale.
    ranks: Vec<Vec<u64>>,
}

struct CellRun {
    class: usize,
    scale: usize,
    scale_idx: usize,
    net: MembershipNet,
    ema: Option<MixtureParams>,
    k_history: Vec<usize>,
    videos: Vec<usize>,
    loss_sum: f64,
    nll_sum: f64,
    steps: usize,
}

fn with_context(e: Error, epoch: usize, class: usize, scale: usize) -> Error {
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!("epoch {epoch}, class {class}, scale {scale}: {m}")),
        other => other,
    }
}

/// Trains a bank, logging one line per epoch and cell through `log`.
pub fn train(cfg: &RunConfig, ds: &Dataset) -> Result<PrototypeBank> {
    train_with(cfg, ds, |r| {
        log::info!(
            "epoch {:>3} class {} scale {} steps {:>3} loss {:>12.4} nll {:>12.4} K {}",
            r.epoch,
            r.class,
            r.scale,
            r.steps,
            r.mean_loss,
            r.mean_nll,
            r.k
        )
    })
}

/// [`train`] with a caller-supplied progress sink.
///
/// Each epoch shuffles every cell's videos into chunks of
/// `videos_per_batch`; every chunk yields one step of `batch_size`
/// sub-graphs drawn from the chunk's sampled pools, or of the whole pool
/// when it fits in one batch. Steps interleave cells
/// round-robin in a seeded per-epoch order. Kernels below the pruning
/// threshold are dropped at the end of each epoch.
pub fn train_with(cfg: &RunConfig, ds: &Dataset, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<PrototypeBank> {
    cfg.validate()?;
    check_meta(cfg, &ds.meta)?;
    let report = crate::data::validate(ds);
    if !report.is_valid() {
        let v = &report.violations[0];
        return Err(Error::InvalidData(format!(
            "training data invalid ({} violations), first: {}",
            report.violations.len(),
            v.message
        )));
    }
    if let Some(r) = ds.records.iter().find(|r| r.label >= cfg.num_classes) {
        return Err(Error::InvalidData(format!(
            "video {} has label {} outside [0, {})",
            r.video_id, r.label, cfg.num_classes
        )));
    }

    let pools: Vec<VideoPool> = ds
        .records
        .par_iter()
        .map(|r| {
            let inputs = GraphInputs::from_video(r)?;
            let n = inputs.num_nodes();
            let ranks = cfg
                .scales
                .iter()
                .map(|&s| select_ranks(n, s, cfg.subgraph_budget, subgraph_seed(cfg.seed, &r.video_id, s)))
                .collect::<Result<_>>()?;
            Ok(VideoPool { inputs, ranks })
        })
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, TAG_INIT]));
    let mut store = ParamStore::new();
    let dims = cfg.graph_dims();
    let graph = GraphParams::init(&mut store, dims, &mut rng)?;
    let graph_ids = graph.ids();
    let mut cells = Vec::new();
    for class in 0..cfg.num_classes {
        let videos: Vec<usize> = (0..ds.records.len()).filter(|&i| ds.records[i].label == class).collect();
        for (scale_idx, &scale) in cfg.scales.iter().enumerate() {
            let net = MembershipNet::init(
                &mut store,
                class,
                scale,
                dims.d_x(scale),
                cfg.membership_hidden,
                cfg.k_init,
                &mut rng,
            )?;
            if videos.is_empty() {
                log::warn!("class {class} has no training videos; cell (class {class}, scale {scale}) skipped");
                continue;
            }
            cells.push(CellRun {
                class,
                scale,
                scale_idx,
                net,
                ema: None,
                k_history: Vec::new(),
                videos: videos.clone(),
                loss_sum: 0.0,
                nll_sum: 0.0,
                steps: 0,
            });
        }
    }
    if cells.is_empty() {
        return Err(Error::InvalidData("no class has training videos".into()));
    }
    {
        // any scale of at least two nodes exercises every feature block
        let (si, &scale) = cfg.scales.iter().enumerate().max_by_key(|(_, &s)| s).expect("validated scales");
        let all: Vec<usize> = (0..ds.records.len()).collect();
        let mut crng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, TAG_STATS]));
        let drawn = draw(&all, scale, si, &pools, STATS_SAMPLES, &mut crng)?;
        let items: Vec<(&GraphInputs, &[usize])> =
            drawn.iter().map(|(v, n)| (&pools[*v].inputs, n.as_slice())).collect();
        graph.calibrate(&mut store, &items)?;
    }
    for cell in &cells {
        let mut srng = ChaCha8Rng::seed_from_u64(derive_seed(&[
            cfg.seed,
            TAG_STATS,
            cell.class as u64,
            cell.scale as u64,
        ]));
        let drawn = draw(&cell.videos, cell.scale, cell.scale_idx, &pools, STATS_SAMPLES, &mut srng)?;
        let items: Vec<(&GraphInputs, &[usize])> =
            drawn.iter().map(|(v, n)| (&pools[*v].inputs, n.as_slice())).collect();
        let mut tape = Tape::new();
        let x = subgraph_rows(&mut tape, &store, &graph, &items)?;
        let rows = tape.value(x).clone();
        cell.net.update_input_stats(&mut store, &rows, 0.0)?;
    }

    let opt = cfg.optimizer();
    let mix = cfg.mixture();
    for epoch in 0..cfg.epochs {
        let mut erng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, TAG_EPOCH, epoch as u64]));
        let plans: Vec<Vec<Vec<usize>>> = cells
            .iter()
            .map(|c| {
                let mut v = c.videos.clone();
                v.shuffle(&mut erng);
                v.chunks(cfg.videos_per_batch).map(<[usize]>::to_vec).collect()
            })
            .collect();
        let mut order: Vec<usize> = (0..cells.len()).collect();
        order.shuffle(&mut erng);
        let rounds = plans.iter().map(Vec::len).max().unwrap_or(0);
        for round in 0..rounds {
            for &ci in &order {
                let Some(chunk) = plans[ci].get(round) else {
                    continue;
                };
                let cell = &mut cells[ci];
                step(cell, chunk, &pools, &mut store, &graph, &graph_ids, cfg, &opt, &mix, epoch, &mut erng)
                    .map_err(|e| with_context(e, epoch, cell.class, cell.scale))?;
            }
        }
        for cell in &mut cells {
            let Some(ema) = cell.ema.take() else {
                continue;
            };
            let k_before = ema.k();
            let (pruned, keep) = prune_kernels(&ema, cfg.prune_threshold);
            if keep.len() < k_before {
                cell.net.retain_kernels(&mut store, &keep)?;
                log::debug!(
                    "epoch {epoch} class {} scale {}: pruned K {} -> {}",
                    cell.class,
                    cell.scale,
                    k_before,
                    keep.len()
                );
            }
            cell.k_history.push(pruned.k());
            cell.ema = Some(pruned);
            let n = cell.steps.max(1) as f64;
            on_epoch(&EpochRecord {
                epoch,
                class: cell.class,
                scale: cell.scale,
                steps: cell.steps,
                mean_loss: cell.loss_sum / n,
                mean_nll: cell.nll_sum / n,
                k: cell.k_history.last().copied().unwrap_or(0),
            });
            cell.loss_sum = 0.0;
            cell.nll_sum = 0.0;
            cell.steps = 0;
        }
    }

    let mut out = Vec::with_capacity(cells.len());
    for c in cells {
        let ema = match c.ema {
            Some(e) => e,
            None => {
                log::warn!("cell (class {}, scale {}) never trained; skipped", c.class, c.scale);
                continue;
            }
        };
        out.push(CellState {
            class: c.class,
            scale: c.scale,
            net: c.net,
            ema,
            k_history: c.k_history,
        });
    }
    out.sort_by_key(|c| (c.class, c.scale));
    Ok(PrototypeBank {
        config: cfg.clone(),
        store,
        graph,
        cells: out,
    })
}

/// Draws `n` (video, sub-graph) pairs uniformly from the videos' pools.
fn draw(
    videos: &[usize],
    scale: usize,
    scale_idx: usize,
    pools: &[VideoPool],
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(usize, Vec<usize>)>> {
    (0..n)
        .map(|_| {
            let v = videos[rng.random_range(0..videos.len())];
            let ranks = &pools[v].ranks[scale_idx];
            let r = ranks[rng.random_range(0..ranks.len())];
            Ok((v, unrank_lex(pools[v].inputs.num_nodes(), scale, r)?))
        })
        .collect()
}

/// Every sampled sub-graph of the videos, in pool order.
fn whole_pool(videos: &[usize], scale: usize, scale_idx: usize, pools: &[VideoPool]) -> Result<Vec<(usize, Vec<usize>)>> {
    let mut out = Vec::new();
    for &v in videos {
        for &r in &pools[v].ranks[scale_idx] {
            out.push((v, unrank_lex(pools[v].inputs.num_nodes(), scale, r)?));
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn step(
    cell: &mut CellRun,
    chunk: &[usize],
    pools: &[VideoPool],
    store: &mut ParamStore,
    graph: &GraphParams,
    graph_ids: &[ParamId],
    cfg: &RunConfig,
    opt: &crate::autodiff::OptimizerConfig,
    mix: &crate::gmm::MixtureConfig,
    epoch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let pooled: usize = chunk.iter().map(|&v| pools[v].ranks[cell.scale_idx].len()).sum();
    let drawn = if pooled <= cfg.batch_size {
        whole_pool(chunk, cell.scale, cell.scale_idx, pools)?
    } else {
        draw(chunk, cell.scale, cell.scale_idx, pools, cfg.batch_size, rng)?
    };
    let items: Vec<(&GraphInputs, &[usize])> = drawn.iter().map(|(v, n)| (&pools[*v].inputs, n.as_slice())).collect();

    let mut tape = Tape::new();
    let x = subgraph_rows(&mut tape, store, graph, &items)?;
    let bl = batch_loss(&mut tape, store, &cell.net, x, mix)?;
    let grads = tape.backward(bl.loss)?;
    cell.net.update_input_stats(store, tape.value(x), cfg.ema_decay)?;
    store.accumulate(&tape, &grads);
    let mut ids = graph_ids.to_vec();
    ids.extend(cell.net.mlp.ids());
    let norm = match cfg.grad_clip {
        Some(c) => clip_grad_norm(store, &ids, c),
        None => grad_norm(store, &ids),
    };
    log::trace!(
        "epoch {epoch} class {} scale {}: loss {:.4e} nll {:.4e} grad norm {norm:.4e} degenerate {:?}",
        cell.class,
        cell.scale,
        tape.value(bl.loss).item(),
        bl.nll,
        bl.degenerate
    );
    let graph_opt = OptimizerConfig {
        learning_rate: opt.learning_rate * cfg.graph_lr_scale,
        ..opt.clone()
    };
    sgd_step_on(store, graph_ids, &graph_opt, epoch)?;
    sgd_step_on(store, &ids[graph_ids.len()..], opt, epoch)?;

    cell.ema = Some(match cell.ema.take() {
        None => {
            let mut first = bl.fresh;
            first.renormalize();
            first
        }
        Some(prev) => update_ema(&prev, &bl.fresh, cfg.ema_decay, cfg.var_floor, &bl.degenerate)?,
    });
    cell.loss_sum += tape.value(bl.loss).item();
    cell.nll_sum += bl.nll;
    cell.steps += 1;
    Ok(())
}
