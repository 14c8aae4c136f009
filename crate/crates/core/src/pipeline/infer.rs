//! Maximum-likelihood classification and dataset evaluation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_meta, storage_positions};
use crate::config::RunConfig;
use crate::data::{Dataset, VideoRecord};
use crate::error::{Error, Result};
use crate::gmm::{CompiledMixture, PrototypeBank};
use crate::graph::{build_graph_from_inputs, CompleteGraph, GraphInputs};
use crate::seed::subgraph_seed;
use crate::subgraph::{select_subgraphs, vectorize_into, SubGraphIndex};

/// The sub-graph that realized a class score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestMatch {
    pub class: usize,
    pub scale: usize,
    /// Canonical node ids, ascending.
    pub nodes: Vec<usize>,
    /// `(clip, slot)` storage positions of `nodes`.
    pub positions: Vec<(usize, usize)>,
    pub loglik: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Per-class max log-likelihood; `-inf` for a class without cells.
    pub scores: Vec<f64>,
    pub prediction: usize,
    pub top5: Vec<usize>,
    /// Per-class best sub-graph, `None` for a class without cells.
    pub best: Vec<Option<BestMatch>>,
}

/// A bank with its mixtures compiled for scoring, optionally restricted to
/// a subset of its scales.
pub struct Scorer<'a> {
    bank: &'a PrototypeBank,
    scales: Vec<usize>,
    /// `mixtures[scale index][class]`.
    mixtures: Vec<Vec<Option<CompiledMixture>>>,
    budget: usize,
}

impl<'a> Scorer<'a> {
    pub fn new(bank: &'a PrototypeBank) -> Result<Self> {
        Self::with_scales(bank, &bank.config.scales)
    }

    pub fn with_scales(bank: &'a PrototypeBank, scales: &[usize]) -> Result<Self> {
        if scales.is_empty() {
            return Err(Error::InvalidArgument("no scales selected".into()));
        }
        if let Some(s) = scales.iter().find(|s| !bank.config.scales.contains(s)) {
            return Err(Error::InvalidArgument(format!("scale {s} not in the bank")));
        }
        let c = bank.num_classes();
        let mixtures = scales
            .iter()
            .map(|&s| {
                (0..c)
                    .map(|class| bank.cell(class, s).map(|cell| CompiledMixture::new(&cell.ema)).transpose())
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        Ok(Scorer {
            bank,
            scales: scales.to_vec(),
            mixtures,
            budget: bank.config.test_budget(),
        })
    }

    /// Overrides the test-time sub-graph budget.
    pub fn budget(mut self, budget: usize) -> Self {
        self.budget = budget.max(1);
        self
    }

    pub fn bank(&self) -> &PrototypeBank {
        self.bank
    }

    pub fn scales(&self) -> &[usize] {
        &self.scales
    }

    /// The sampled candidate sub-graphs of one video at one scale, identical
    /// to the training draw when the budgets agree.
    pub fn candidates(&self, video_id: &str, n: usize, scale: usize) -> Result<Vec<SubGraphIndex>> {
        select_subgraphs(n, scale, self.budget, subgraph_seed(self.bank.config.seed, video_id, scale))
    }

    pub fn graph(&self, inputs: &GraphInputs) -> Result<CompleteGraph> {
        build_graph_from_inputs(inputs, &self.bank.store, &self.bank.graph)
    }

    /// Class scores as the max over the given candidates, one list per
    /// selected scale.
    pub fn score_candidates(&self, graph: &CompleteGraph, candidates: &[Vec<SubGraphIndex>]) -> Result<Prediction> {
        if candidates.len() != self.scales.len() {
            return Err(Error::InvalidArgument(format!(
                "{} candidate lists for {} scales",
                candidates.len(),
                self.scales.len()
            )));
        }
        let c = self.bank.num_classes();
        let mut scores = vec![f64::NEG_INFINITY; c];
        let mut best: Vec<Option<(usize, usize, f64)>> = vec![None; c];
        let mut x = Vec::new();
        for (si, cands) in candidates.iter().enumerate() {
            for (ci, idx) in cands.iter().enumerate() {
                vectorize_into(graph, idx, &mut x)?;
                for (class, mix) in self.mixtures[si].iter().enumerate() {
                    let Some(mix) = mix else { continue };
                    let ll = mix.log_likelihood(&x)?;
                    if ll > scores[class] || best[class].is_none() {
                        scores[class] = ll;
                        best[class] = Some((si, ci, ll));
                    }
                }
            }
        }
        if best.iter().all(Option::is_none) {
            return Err(Error::InvalidArgument("no candidate sub-graphs scored".into()));
        }
        let inv = crate::graph::invert(&graph.order);
        let best = best
            .into_iter()
            .enumerate()
            .map(|(class, b)| {
                b.map(|(si, ci, loglik)| {
                    let nodes = candidates[si][ci].nodes.clone();
                    BestMatch {
                        class,
                        scale: self.scales[si],
                        positions: storage_positions(&nodes, &inv, self.bank.config.m),
                        nodes,
                        loglik,
                    }
                })
            })
            .collect();
        Ok(Prediction {
            prediction: argmax(&scores),
            top5: top_k(&scores, 5),
            scores,
            best,
        })
    }

    pub fn infer(&self, video: &VideoRecord) -> Result<Prediction> {
        let inputs = GraphInputs::from_video(video)?;
        let graph = self.graph(&inputs)?;
        let n = graph.num_nodes();
        let cands = self
            .scales
            .iter()
            .map(|&s| self.candidates(&video.video_id, n, s))
            .collect::<Result<Vec<_>>>()?;
        self.score_candidates(&graph, &cands)
    }
}

/// First index of the maximum; ties go to the smallest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Indices of the `k` largest scores, descending, ties by index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

pub fn infer_video(video: &VideoRecord, bank: &PrototypeBank) -> Result<Prediction> {
    Scorer::new(bank)?.infer(video)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoResult {
    pub video_id: String,
    pub label: usize,
    pub prediction: usize,
    pub top5: Vec<usize>,
    pub scores: Vec<f64>,
    /// Best sub-graph of the predicted class.
    pub best: Option<BestMatch>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: RunConfig,
    pub scales: Vec<usize>,
    pub test_budget: usize,
    pub num_videos: usize,
    pub top1: f64,
    pub top5: f64,
    /// Accuracy per class, `None` when the class has no test videos.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// `confusion[label][prediction]`.
    pub confusion: Vec<Vec<usize>>,
    pub videos: Vec<VideoResult>,
}

/// Scores every record against the bank; evaluation runs in parallel over
/// videos and results keep dataset order.
pub fn evaluate(ds: &Dataset, scorer: &Scorer<'_>) -> Result<EvalReport> {
    let bank = scorer.bank();
    check_meta(&bank.config, &ds.meta)?;
    let c = bank.num_classes();
    if let Some(r) = ds.records.iter().find(|r| r.label >= c) {
        return Err(Error::InvalidData(format!(
            "video {} has label {} outside the bank's {c} classes",
            r.video_id, r.label
        )));
    }
    let preds: Vec<Prediction> = ds.records.par_iter().map(|r| scorer.infer(r)).collect::<Result<_>>()?;

    let mut confusion = vec![vec![0usize; c]; c];
    let (mut hit1, mut hit5) = (0usize, 0usize);
    let mut videos = Vec::with_capacity(preds.len());
    for (r, p) in ds.records.iter().zip(preds) {
        confusion[r.label][p.prediction] += 1;
        hit1 += usize::from(p.prediction == r.label);
        hit5 += usize::from(p.top5.contains(&r.label));
        videos.push(VideoResult {
            video_id: r.video_id.clone(),
            label: r.label,
            prediction: p.prediction,
            top5: p.top5,
            best: p.best[p.prediction].clone(),
            scores: p.scores,
        });
    }
    let n = ds.records.len();
    let frac = |h: usize| if n == 0 { 0.0 } else { h as f64 / n as f64 };
    let per_class_accuracy = confusion
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let total: usize = row.iter().sum();
            (total > 0).then(|| row[i] as f64 / total as f64)
        })
        .collect();
    Ok(EvalReport {
        config: bank.config.clone(),
        scales: scorer.scales().to_vec(),
        test_budget: scorer.budget,
        num_videos: n,
        top1: frac(hit1),
        top5: frac(hit5),
        per_class_accuracy,
        confusion,
        videos,
    })
}

impl EvalReport {
    /// Plain-text summary: headline accuracies, per-class accuracy and the
    /// confusion matrix.
    pub fn summary(&self) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        let scales: Vec<String> = self.scales.iter().map(ToString::to_string).collect();
        let _ = writeln!(s, "videos  {}", self.num_videos);
        let _ = writeln!(s, "scales  {}   test budget {}", scales.join(","), self.test_budget);
        let _ = writeln!(s, "top-1   {:.4}", self.top1);
        let _ = writeln!(s, "top-5   {:.4}", self.top5);
        let _ = writeln!(s);
        let _ = write!(s, "class  acc     |");
        for j in 0..self.confusion.len() {
            let _ = write!(s, " {j:>5}");
        }
        let _ = writeln!(s);
        for (i, row) in self.confusion.iter().enumerate() {
            let acc = self.per_class_accuracy[i].map_or("   -  ".to_string(), |a| format!("{a:.4}"));
            let _ = write!(s, "{i:>5}  {acc} |");
            for v in row {
                let _ = write!(s, " {v:>5}");
            }
            let _ = writeln!(s);
        }
        s
    }
}
