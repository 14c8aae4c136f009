//! Prototype dumps: kernel summaries and the sub-graphs each kernel likes best.

use rayon::prelude::*;
use serde::Serialize;

use super::{storage_positions, Scorer};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gmm::{CompiledMixture, PrototypeBank};
use crate::graph::{invert, GraphInputs};
use crate::subgraph::vectorize_into;
use crate::autodiff::logsumexp;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KernelSummary {
    pub weight: f64,
    pub mean_norm: f64,
    pub var_min: f64,
    pub var_mean: f64,
    pub var_max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SubgraphHit {
    pub video_id: String,
    pub label: usize,
    pub nodes: Vec<usize>,
    pub positions: Vec<(usize, usize)>,
    pub loglik: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InspectReport {
    pub class: usize,
    pub scale: usize,
    pub k: usize,
    pub k_history: Vec<usize>,
    pub kernels: Vec<KernelSummary>,
    /// Per kernel, the sub-graphs with the highest `log φ_k N_k(x)`.
    pub per_kernel: Vec<Vec<SubgraphHit>>,
    /// The sub-graphs with the highest mixture log-likelihood.
    pub overall: Vec<SubgraphHit>,
}

/// Summarizes one cell and, given data, ranks the sub-graphs of the cell's
/// class videos by likelihood. Each list holds at most one sub-graph per
/// video, so `top` hits come from `top` different videos.
pub fn inspect(
    bank: &PrototypeBank,
    class: usize,
    scale: usize,
    data: Option<&Dataset>,
    top: usize,
) -> Result<InspectReport> {
    let cell = bank
        .cell(class, scale)
        .ok_or_else(|| Error::InvalidArgument(format!("no cell for class {class} at scale {scale}")))?;
    let vars = cell.ema.variances();
    let kernels: Vec<KernelSummary> = (0..cell.ema.k())
        .map(|k| {
            let v = vars.row_slice(k);
            KernelSummary {
                weight: cell.ema.weights[k],
                mean_norm: cell.ema.means.row_slice(k).iter().map(|m| m * m).sum::<f64>().sqrt(),
                var_min: v.iter().copied().fold(f64::INFINITY, f64::min),
                var_mean: v.iter().sum::<f64>() / v.len().max(1) as f64,
                var_max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect();
    let k = cell.ema.k();
    let mut report = InspectReport {
        class,
        scale,
        k,
        k_history: cell.k_history.clone(),
        kernels,
        per_kernel: vec![Vec::new(); k],
        overall: Vec::new(),
    };
    let Some(ds) = data else {
        return Ok(report);
    };
    super::check_meta(&bank.config, &ds.meta)?;
    let scorer = Scorer::with_scales(bank, &[scale])?;
    let mix = CompiledMixture::new(&cell.ema)?;
    let videos: Vec<usize> = (0..ds.records.len()).filter(|&i| ds.records[i].label == class).collect();

    // per video: best hit per kernel, then the best overall
    let per_video: Vec<Vec<SubgraphHit>> = videos
        .par_iter()
        .map(|&vi| {
            let r = &ds.records[vi];
            let inputs = GraphInputs::from_video(r)?;
            let graph = scorer.graph(&inputs)?;
            let inv = invert(&graph.order);
            let cands = scorer.candidates(&r.video_id, graph.num_nodes(), scale)?;
            let mut best: Vec<(f64, usize)> = vec![(f64::NEG_INFINITY, 0); k + 1];
            let (mut x, mut terms) = (Vec::new(), Vec::new());
            for (ci, idx) in cands.iter().enumerate() {
                vectorize_into(&graph, idx, &mut x)?;
                mix.kernel_log_terms(&x, &mut terms)?;
                terms.push(logsumexp(&terms));
                for (slot, &t) in terms.iter().enumerate() {
                    if t > best[slot].0 {
                        best[slot] = (t, ci);
                    }
                }
            }
            Ok(best
                .into_iter()
                .map(|(loglik, ci)| {
                    let nodes = cands[ci].nodes.clone();
                    SubgraphHit {
                        video_id: r.video_id.clone(),
                        label: r.label,
                        positions: storage_positions(&nodes, &inv, r.clips.first().map_or(1, Vec::len)),
                        nodes,
                        loglik,
                    }
                })
                .collect())
        })
        .collect::<Result<_>>()?;

    let rank = |slot: usize| {
        let mut hits: Vec<SubgraphHit> = per_video.iter().map(|h| h[slot].clone()).collect();
        hits.sort_by(|a, b| b.loglik.total_cmp(&a.loglik));
        hits.truncate(top);
        hits
    };
    report.per_kernel = (0..k).map(rank).collect();
    report.overall = rank(k);
    Ok(report)
}

impl InspectReport {
    pub fn summary(&self) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        let _ = writeln!(s, "class {} scale {}  K = {}", self.class, self.scale, self.k);
        let hist: Vec<String> = self.k_history.iter().map(ToString::to_string).collect();
        let _ = writeln!(s, "K per epoch: {}", hist.join(" "));
        let wsum: f64 = self.kernels.iter().map(|k| k.weight).sum();
        let _ = writeln!(s, "weights sum to {wsum:.12}");
        let _ = writeln!(s, "kernel  weight    |mean|      var min     var mean    var max");
        for (i, k) in self.kernels.iter().enumerate() {
            let _ = writeln!(
                s,
                "{i:>6}  {:.6}  {:>10.4}  {:>10.4e}  {:>10.4e}  {:>10.4e}",
                k.weight, k.mean_norm, k.var_min, k.var_mean, k.var_max
            );
        }
        let fmt_hit = |s: &mut String, h: &SubgraphHit| {
            let pos: Vec<String> = h.positions.iter().map(|(c, p)| format!("{c}:{p}")).collect();
            let _ = writeln!(
                s,
                "    {:<14} loglik {:>14.4}  nodes {:?}  clip:slot {}",
                h.video_id,
                h.loglik,
                h.nodes,
                pos.join(" ")
            );
        };
        for (i, hits) in self.per_kernel.iter().enumerate() {
            if hits.is_empty() {
                continue;
            }
            let _ = writeln!(s, "kernel {i} top sub-graphs:");
            for h in hits {
                fmt_hit(&mut s, h);
            }
        }
        if !self.overall.is_empty() {
            let _ = writeln!(s, "mixture top sub-graphs:");
            for h in &self.overall {
                fmt_hit(&mut s, h);
            }
        }
        s
    }
}
