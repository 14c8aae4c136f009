//! Fixed-size node subsets of a complete graph and their serialization into
//! the sample vector `x`.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::CompleteGraph;

/// Strictly increasing canonical node numbers of one sub-graph.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SubGraphIndex {
    pub nodes: Vec<usize>,
}

impl SubGraphIndex {
    pub fn new(nodes: Vec<usize>) -> Result<Self> {
        if nodes.is_empty() || nodes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(format!(
                "sub-graph node ids must be strictly increasing: {nodes:?}"
            )));
        }
        Ok(SubGraphIndex { nodes })
    }

    pub fn scale(&self) -> usize {
        self.nodes.len()
    }

    /// Pairs `(i, j)`, `i < j`, in lexicographic order.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let n = &self.nodes;
        (0..n.len()).flat_map(move |a| (a + 1..n.len()).map(move |b| (n[a], n[b])))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubGraphVector {
    pub index: SubGraphIndex,
    pub x: Vec<f64>,
}

/// `C(n, k)`, or `None` when it does not fit in a `u64`.
pub fn binomial(n: usize, k: usize) -> Option<u64> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        // acc * (n - i) / (i + 1) stays integral at every step
        acc = acc.checked_mul((n - i) as u128)? / (i as u128 + 1);
        if acc > u64::MAX as u128 {
            return None;
        }
    }
    Some(acc as u64)
}

/// The `rank`-th `s`-subset of `[0, n)` in lexicographic order.
pub fn unrank_lex(n: usize, s: usize, mut rank: u64) -> Result<Vec<usize>> {
    let total = binomial(n, s).ok_or_else(|| Error::InvalidArgument("C(n, s) overflows".into()))?;
    if rank >= total {
        return Err(Error::InvalidArgument(format!(
            "rank {rank} out of range for C({n}, {s}) = {total}"
        )));
    }
    let mut out = Vec::with_capacity(s);
    let mut v = 0;
    for i in 0..s {
        loop {
            let count = binomial(n - v - 1, s - i - 1).expect("smaller than total");
            if rank < count {
                break;
            }
            rank -= count;
            v += 1;
        }
        out.push(v);
        v += 1;
    }
    Ok(out)
}

/// Inverse of [`unrank_lex`].
pub fn rank_lex(n: usize, comb: &[usize]) -> u64 {
    let s = comb.len();
    let mut rank = 0;
    let mut start = 0;
    for (i, &c) in comb.iter().enumerate() {
        for v in start..c {
            rank += binomial(n - v - 1, s - i - 1).unwrap_or(0);
        }
        start = c + 1;
    }
    rank
}

/// All `s`-subsets of `[0, n)` when there are at most `budget` of them;
/// otherwise `budget` distinct subsets drawn uniformly without replacement
/// (Floyd's algorithm over lexicographic ranks). Output is always sorted
/// lexicographically.
pub fn select_subgraphs(n: usize, s: usize, budget: usize, seed: u64) -> Result<Vec<SubGraphIndex>> {
    select_ranks(n, s, budget, seed)?
        .into_iter()
        .map(|r| Ok(SubGraphIndex { nodes: unrank_lex(n, s, r)? }))
        .collect()
}

/// The lexicographic ranks behind [`select_subgraphs`], ascending.
pub fn select_ranks(n: usize, s: usize, budget: usize, seed: u64) -> Result<Vec<u64>> {
    if s == 0 || s > n {
        return Err(Error::InvalidArgument(format!(
            "sub-graph size {s} must lie in [1, {n}]"
        )));
    }
    if budget == 0 {
        return Err(Error::InvalidArgument("sub-graph budget must be >= 1".into()));
    }
    let total = binomial(n, s);
    Ok(match total {
        Some(t) if t <= budget as u64 => (0..t).collect(),
        _ => {
            let t = total.ok_or_else(|| Error::InvalidArgument("C(n, s) overflows".into()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut chosen = BTreeSet::new();
            for j in t - budget as u64..t {
                let r = rng.random_range(0..=j);
                if !chosen.insert(r) {
                    chosen.insert(j);
                }
            }
            chosen.into_iter().collect()
        }
    })
}

/// `D_x(s) = s·d_node + C(s,2)·d_edge`.
pub fn subgraph_dim(s: usize, d_node: usize, d_edge: usize) -> usize {
    s * d_node + s * (s.saturating_sub(1)) / 2 * d_edge
}

/// Node features in ascending id order, then edge features for every pair
/// in lexicographic order.
pub fn vectorize(graph: &CompleteGraph, idx: &SubGraphIndex) -> Result<SubGraphVector> {
    let mut x = Vec::with_capacity(subgraph_dim(idx.scale(), graph.d_node(), graph.d_edge()));
    vectorize_into(graph, idx, &mut x)?;
    Ok(SubGraphVector { index: idx.clone(), x })
}

/// [`vectorize`] into a caller-owned buffer, which is cleared first.
pub fn vectorize_into(graph: &CompleteGraph, idx: &SubGraphIndex, x: &mut Vec<f64>) -> Result<()> {
    let n = graph.num_nodes();
    if let Some(&bad) = idx.nodes.iter().find(|&&i| i >= n) {
        return Err(Error::InvalidArgument(format!(
            "node id {bad} out of range for a {n}-node graph"
        )));
    }
    x.clear();
    for &i in &idx.nodes {
        x.extend_from_slice(&graph.nodes[i].full);
    }
    for (i, j) in idx.pairs() {
        x.extend_from_slice(&graph.edge(i, j).full);
    }
    Ok(())
}
