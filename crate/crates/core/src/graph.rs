//! Spatio-temporal complete graphs over the tubelets of one video.
//!
//! Nodes carry `[visual, coord_net(coord_raw)]`; the edge between canonical
//! nodes `i < j` carries `[φ(v_i)ᵀφ(v_j), edge_coord_net(c_i − c_j)]`. All
//! three networks live in a [`ParamStore`] and are evaluated on a [`Tape`],
//! so the same code serves plain graph construction and training.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::data::{Tubelet, VideoRecord};
use crate::error::{Error, Result};
use crate::subgraph::subgraph_dim;

/// Widths of the graph feature networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphDims {
    pub d_vis: usize,
    /// Frames per clip; coordinate inputs have length `4T`.
    pub t: usize,
    pub d_phi: usize,
    pub d_coord: usize,
    pub d_edge_c: usize,
    pub hidden: usize,
}

impl GraphDims {
    pub fn coord_in(&self) -> usize {
        4 * self.t
    }

    pub fn d_node(&self) -> usize {
        self.d_vis + self.d_coord
    }

    pub fn d_edge(&self) -> usize {
        1 + self.d_edge_c
    }

    pub fn d_x(&self, s: usize) -> usize {
        subgraph_dim(s, self.d_node(), self.d_edge())
    }
}

/// Handles to the graph networks inside a parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphParams {
    pub dims: GraphDims,
    pub phi_w: ParamId,
    pub phi_b: ParamId,
    pub coord: Mlp2,
    pub edge: Mlp2,
}

/// Two affine layers with a rectifier in between.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mlp2 {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Mlp2 {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        sizes: (usize, usize, usize),
        rng: &mut R,
    ) -> Result<Self> {
        let (a, h, b) = sizes;
        Ok(Mlp2 {
            w1: store.insert_glorot(format!("{prefix}.w1"), a, h, rng)?,
            b1: store.insert(format!("{prefix}.b1"), Tensor::zeros(1, h))?,
            w2: store.insert_glorot(format!("{prefix}.w2"), h, b, rng)?,
            b2: store.insert(format!("{prefix}.b2"), Tensor::zeros(1, b))?,
        })
    }

    pub fn lookup(store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(Mlp2 {
            w1: lookup(store, &format!("{prefix}.w1"))?,
            b1: lookup(store, &format!("{prefix}.b1"))?,
            w2: lookup(store, &format!("{prefix}.w2"))?,
            b2: lookup(store, &format!("{prefix}.b2"))?,
        })
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w1 = tape.param(store, self.w1)?;
        let b1 = tape.param(store, self.b1)?;
        let w2 = tape.param(store, self.w2)?;
        let b2 = tape.param(store, self.b2)?;
        let h = tape.affine(x, w1, b1)?;
        let h = tape.relu(h)?;
        tape.affine(h, w2, b2)
    }
}

pub(crate) fn lookup(store: &ParamStore, name: &str) -> Result<ParamId> {
    store
        .id(name)
        .ok_or_else(|| Error::BankFormat(format!("missing parameter {name}")))
}

fn expect_shape(store: &ParamStore, id: ParamId, shape: (usize, usize)) -> Result<()> {
    let got = store.value(id).shape();
    if got != shape {
        return Err(Error::shape(
            "graph params",
            format!("{} is {got:?}, expected {shape:?}", store.name(id)),
        ));
    }
    Ok(())
}

impl GraphParams {
    pub fn init<R: Rng>(store: &mut ParamStore, dims: GraphDims, rng: &mut R) -> Result<Self> {
        let phi_w = store.insert_glorot("graph.phi.w", dims.d_vis, dims.d_phi, rng)?;
        let phi_b = store.insert("graph.phi.b", Tensor::zeros(1, dims.d_phi))?;
        let coord = Mlp2::init(
            store,
            "graph.coord",
            (dims.coord_in(), dims.hidden, dims.d_coord),
            rng,
        )?;
        let edge = Mlp2::init(
            store,
            "graph.edge",
            (dims.coord_in(), dims.hidden, dims.d_edge_c),
            rng,
        )?;
        Ok(GraphParams {
            dims,
            phi_w,
            phi_b,
            coord,
            edge,
        })
    }

    /// Re-attaches to parameters already present in `store`, checking shapes.
    pub fn lookup(store: &ParamStore, dims: GraphDims) -> Result<Self> {
        let p = GraphParams {
            dims,
            phi_w: lookup(store, "graph.phi.w")?,
            phi_b: lookup(store, "graph.phi.b")?,
            coord: Mlp2::lookup(store, "graph.coord")?,
            edge: Mlp2::lookup(store, "graph.edge")?,
        };
        let c = dims.coord_in();
        expect_shape(store, p.phi_w, (dims.d_vis, dims.d_phi))?;
        expect_shape(store, p.phi_b, (1, dims.d_phi))?;
        expect_shape(store, p.coord.w1, (c, dims.hidden))?;
        expect_shape(store, p.coord.w2, (dims.hidden, dims.d_coord))?;
        expect_shape(store, p.edge.w1, (c, dims.hidden))?;
        expect_shape(store, p.edge.w2, (dims.hidden, dims.d_edge_c))?;
        Ok(p)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.phi_w, self.phi_b];
        ids.extend(self.coord.ids());
        ids.extend(self.edge.ids());
        ids
    }

    /// Rescales the output layers of the coordinate networks and the
    /// projection so that, over `items`, each learned feature block has unit
    /// pooled standard deviation. Raw visual columns are left alone.
    pub fn calibrate(&self, store: &mut ParamStore, items: &[(&GraphInputs, &[usize])]) -> Result<()> {
        let mut tape = Tape::new();
        let x = subgraph_rows(&mut tape, store, self, items)?;
        let x = tape.value(x);
        let s = items[0].1.len();
        let (dn, d) = (self.dims.d_node(), self.dims.d_vis);
        let node_cols: Vec<usize> = (0..s).flat_map(|a| a * dn + d..(a + 1) * dn).collect();
        let pairs = s * (s - 1) / 2;
        let de = self.dims.d_edge();
        let sem_cols: Vec<usize> = (0..pairs).map(|p| s * dn + p * de).collect();
        let edge_cols: Vec<usize> = (0..pairs).flat_map(|p| s * dn + p * de + 1..s * dn + (p + 1) * de).collect();
        let coord_f = 1.0 / pooled_std(x, &node_cols);
        let edge_f = 1.0 / pooled_std(x, &edge_cols);
        // sem is quadratic in the projection
        let phi_f = if sem_cols.is_empty() { 1.0 } else { pooled_std(x, &sem_cols).sqrt().recip() };
        for (ids, f) in [
            ([self.coord.w2, self.coord.b2], coord_f),
            ([self.edge.w2, self.edge.b2], edge_f),
            ([self.phi_w, self.phi_b], phi_f),
        ] {
            if !f.is_finite() {
                continue;
            }
            for id in ids {
                store.value_mut(id).data_mut().iter_mut().for_each(|v| *v *= f);
            }
        }
        Ok(())
    }

    fn phi(&self, tape: &mut Tape, store: &ParamStore, v: Var) -> Result<Var> {
        let w = tape.param(store, self.phi_w)?;
        let b = tape.param(store, self.phi_b)?;
        tape.affine(v, w, b)
    }

    /// Node feature rows `[visual, coord_net(coord_raw)]` for stacked inputs.
    pub fn node_rows(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        visual: Tensor,
        coord_raw: Tensor,
    ) -> Result<Var> {
        self.check_inputs(&visual, &coord_raw)?;
        let v = tape.constant(visual)?;
        let c = tape.constant(coord_raw)?;
        let coord = self.coord.forward(tape, store, c)?;
        tape.concat_cols(&[v, coord])
    }

    /// Edge feature rows `[φ(v_i)ᵀφ(v_j), edge_coord_net(c_i − c_j)]` for
    /// stacked endpoint inputs.
    pub fn edge_rows(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        vis_i: Tensor,
        vis_j: Tensor,
        coord_diff: Tensor,
    ) -> Result<Var> {
        self.check_inputs(&vis_i, &coord_diff)?;
        self.check_inputs(&vis_j, &coord_diff)?;
        let vi = tape.constant(vis_i)?;
        let vj = tape.constant(vis_j)?;
        let pi = self.phi(tape, store, vi)?;
        let pj = self.phi(tape, store, vj)?;
        let prod = tape.mul(pi, pj)?;
        let sem = tape.sum_rows(prod)?;
        let d = tape.constant(coord_diff)?;
        let rel = self.edge.forward(tape, store, d)?;
        tape.concat_cols(&[sem, rel])
    }

    fn check_inputs(&self, visual: &Tensor, coord: &Tensor) -> Result<()> {
        if visual.cols() != self.dims.d_vis
            || coord.cols() != self.dims.coord_in()
            || visual.rows() != coord.rows()
        {
            return Err(Error::shape(
                "graph features",
                format!(
                    "visual {:?}, coords {:?}; expected D_vis={} and 4T={}",
                    visual.shape(),
                    coord.shape(),
                    self.dims.d_vis,
                    self.dims.coord_in()
                ),
            ));
        }
        Ok(())
    }
}

/// Root of the mean per-column variance over `cols`; infinite reciprocal
/// guards happen at the caller.
fn pooled_std(x: &Tensor, cols: &[usize]) -> f64 {
    let n = x.rows() as f64;
    let mut total = 0.0;
    for &c in cols {
        let mean = (0..x.rows()).map(|r| x.get(r, c)).sum::<f64>() / n;
        total += (0..x.rows()).map(|r| (x.get(r, c) - mean).powi(2)).sum::<f64>() / n;
    }
    (total / cols.len().max(1) as f64).sqrt()
}

/// Sort key of the canonical numbering: clip, then first-frame `cx+cy`,
/// then `cx`, then descending score. Remaining ties fall back to the full
/// box path and the visual feature so the order never depends on storage.
fn canonical_cmp(a: &Tubelet, b: &Tubelet) -> Ordering {
    let first = |t: &Tubelet| t.boxes.first().map_or([0.0; 4], |b| b.to_array());
    let (fa, fb) = (first(a), first(b));
    a.clip_index
        .cmp(&b.clip_index)
        .then((fa[0] + fa[1]).total_cmp(&(fb[0] + fb[1])))
        .then(fa[0].total_cmp(&fb[0]))
        .then(b.score.total_cmp(&a.score))
        .then_with(|| {
            let ca = a.boxes.iter().flat_map(|b| b.to_array());
            let cb = b.boxes.iter().flat_map(|b| b.to_array());
            ca.zip(cb)
                .map(|(x, y)| x.total_cmp(&y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
        .then_with(|| {
            a.visual
                .iter()
                .zip(&b.visual)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
}

/// `order[storage_index] = canonical_number`, where storage index counts
/// tubelets clip-major.
pub fn canonical_order(video: &VideoRecord) -> Vec<usize> {
    let tubs: Vec<&Tubelet> = video.tubelets().collect();
    let mut by_rank: Vec<usize> = (0..tubs.len()).collect();
    by_rank.sort_by(|&a, &b| canonical_cmp(tubs[a], tubs[b]));
    let mut order = vec![0; tubs.len()];
    for (canon, &storage) in by_rank.iter().enumerate() {
        order[storage] = canon;
    }
    order
}

/// Inverts a permutation given as `order[storage] = canonical`.
pub fn invert(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; order.len()];
    for (s, &c) in order.iter().enumerate() {
        inv[c] = s;
    }
    inv
}

/// Parameter-free per-video inputs in canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphInputs {
    pub order: Vec<usize>,
    /// `N_g × D_vis`.
    pub visual: Tensor,
    /// `N_g × 4T`.
    pub coord_raw: Tensor,
}

impl GraphInputs {
    pub fn from_video(video: &VideoRecord) -> Result<Self> {
        let order = canonical_order(video);
        let tubs: Vec<&Tubelet> = video.tubelets().collect();
        let by_rank = invert(&order);
        let vis: Vec<Vec<f64>> = by_rank.iter().map(|&s| tubs[s].visual.clone()).collect();
        let coords: Vec<Vec<f64>> = by_rank.iter().map(|&s| tubs[s].coord_raw()).collect();
        if vis.is_empty() {
            return Err(Error::InvalidData(format!("video {} has no tubelets", video.video_id)));
        }
        Ok(GraphInputs {
            order,
            visual: Tensor::from_rows(&vis)?,
            coord_raw: Tensor::from_rows(&coords)?,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.visual.rows()
    }

    fn coord_diff_row(&self, i: usize, j: usize) -> Vec<f64> {
        self.coord_raw
            .row_slice(i)
            .iter()
            .zip(self.coord_raw.row_slice(j))
            .map(|(a, b)| a - b)
            .collect()
    }
}

/// Serializes many same-scale sub-graphs, possibly from different videos,
/// into an `N × D_x` matrix on the tape.
///
/// Node rows are computed slot-major and edge rows pair-major so each slot
/// and each pair position is a contiguous row block.
pub fn subgraph_rows(
    tape: &mut Tape,
    store: &ParamStore,
    params: &GraphParams,
    items: &[(&GraphInputs, &[usize])],
) -> Result<Var> {
    let Some((_, first)) = items.first() else {
        return Err(Error::InvalidArgument("empty sub-graph batch".into()));
    };
    let s = first.len();
    let n = items.len();
    for (inp, nodes) in items {
        if nodes.len() != s {
            return Err(Error::shape("subgraph_rows", "mixed scales in one batch"));
        }
        if nodes.iter().any(|&i| i >= inp.num_nodes()) {
            return Err(Error::InvalidArgument(format!("node id out of range: {nodes:?}")));
        }
    }
    let mut vis = Vec::with_capacity(s * n);
    let mut crd = Vec::with_capacity(s * n);
    for a in 0..s {
        for (inp, nodes) in items {
            vis.push(inp.visual.row_slice(nodes[a]).to_vec());
            crd.push(inp.coord_raw.row_slice(nodes[a]).to_vec());
        }
    }
    let node_all = params.node_rows(tape, store, Tensor::from_rows(&vis)?, Tensor::from_rows(&crd)?)?;

    let pairs: Vec<(usize, usize)> = (0..s).flat_map(|a| (a + 1..s).map(move |b| (a, b))).collect();
    let mut parts = Vec::with_capacity(s + pairs.len());
    for a in 0..s {
        parts.push(tape.slice_rows(node_all, a * n, n)?);
    }
    if !pairs.is_empty() {
        let mut vi = Vec::with_capacity(pairs.len() * n);
        let mut vj = Vec::with_capacity(pairs.len() * n);
        let mut diff = Vec::with_capacity(pairs.len() * n);
        for &(a, b) in &pairs {
            for (inp, nodes) in items {
                let (i, j) = (nodes[a], nodes[b]);
                vi.push(inp.visual.row_slice(i).to_vec());
                vj.push(inp.visual.row_slice(j).to_vec());
                diff.push(inp.coord_diff_row(i, j));
            }
        }
        let edge_all = params.edge_rows(
            tape,
            store,
            Tensor::from_rows(&vi)?,
            Tensor::from_rows(&vj)?,
            Tensor::from_rows(&diff)?,
        )?;
        for p in 0..pairs.len() {
            parts.push(tape.slice_rows(edge_all, p * n, n)?);
        }
    }
    tape.concat_cols(&parts)
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodeFeature {
    pub visual: Vec<f64>,
    pub coord_raw: Vec<f64>,
    pub coord: Vec<f64>,
    pub full: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdgeFeature {
    pub sem: f64,
    pub coord_rel: Vec<f64>,
    pub full: Vec<f64>,
}

/// Canonically numbered nodes with dense edges stored for `i < j` in
/// lexicographic pair order.
#[derive(Clone, Debug, PartialEq)]
pub struct CompleteGraph {
    pub nodes: Vec<NodeFeature>,
    pub edges: Vec<EdgeFeature>,
    pub order: Vec<usize>,
}

/// Position of pair `(i, j)`, `i < j`, among the lexicographic pairs of an
/// `n`-node graph.
pub fn edge_index(n: usize, i: usize, j: usize) -> usize {
    debug_assert!(i < j && j < n);
    i * (2 * n - i - 1) / 2 + (j - i - 1)
}

impl CompleteGraph {
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge(&self, i: usize, j: usize) -> &EdgeFeature {
        &self.edges[edge_index(self.nodes.len(), i, j)]
    }

    pub fn d_node(&self) -> usize {
        self.nodes.first().map_or(0, |n| n.full.len())
    }

    pub fn d_edge(&self) -> usize {
        self.edges.first().map_or(0, |e| e.full.len())
    }
}

/// Evaluates all node and edge features of one video.
pub fn build_graph(video: &VideoRecord, store: &ParamStore, params: &GraphParams) -> Result<CompleteGraph> {
    build_graph_from_inputs(&GraphInputs::from_video(video)?, store, params)
}

pub fn build_graph_from_inputs(
    inputs: &GraphInputs,
    store: &ParamStore,
    params: &GraphParams,
) -> Result<CompleteGraph> {
    let n = inputs.num_nodes();
    let d = params.dims;
    let mut tape = Tape::new();
    let node_var = params.node_rows(&mut tape, store, inputs.visual.clone(), inputs.coord_raw.clone())?;
    let node_vals = tape.value(node_var);
    let nodes = (0..n)
        .map(|i| {
            let full = node_vals.row_slice(i).to_vec();
            NodeFeature {
                visual: full[..d.d_vis].to_vec(),
                coord_raw: inputs.coord_raw.row_slice(i).to_vec(),
                coord: full[d.d_vis..].to_vec(),
                full,
            }
        })
        .collect();

    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let edges = if pairs.is_empty() {
        Vec::new()
    } else {
        let vi: Vec<Vec<f64>> = pairs.iter().map(|&(i, _)| inputs.visual.row_slice(i).to_vec()).collect();
        let vj: Vec<Vec<f64>> = pairs.iter().map(|&(_, j)| inputs.visual.row_slice(j).to_vec()).collect();
        let diff: Vec<Vec<f64>> = pairs.iter().map(|&(i, j)| inputs.coord_diff_row(i, j)).collect();
        let edge_var = params.edge_rows(
            &mut tape,
            store,
            Tensor::from_rows(&vi)?,
            Tensor::from_rows(&vj)?,
            Tensor::from_rows(&diff)?,
        )?;
        let vals = tape.value(edge_var);
        (0..pairs.len())
            .map(|p| {
                let full = vals.row_slice(p).to_vec();
                EdgeFeature {
                    sem: full[0],
                    coord_rel: full[1..].to_vec(),
                    full,
                }
            })
            .collect()
    };
    Ok(CompleteGraph {
        nodes,
        edges,
        order: inputs.order.clone(),
    })
}

/// Features of a single tubelet.
pub fn node_features(tubelet: &Tubelet, store: &ParamStore, params: &GraphParams) -> Result<NodeFeature> {
    let coord_raw = tubelet.coord_raw();
    let mut tape = Tape::new();
    let v = params.node_rows(
        &mut tape,
        store,
        Tensor::row(tubelet.visual.clone()),
        Tensor::row(coord_raw.clone()),
    )?;
    let full = tape.value(v).data().to_vec();
    Ok(NodeFeature {
        visual: tubelet.visual.clone(),
        coord: full[params.dims.d_vis..].to_vec(),
        coord_raw,
        full,
    })
}

/// `φ(v_i)ᵀφ(v_j)` on the visual parts of two nodes.
pub fn semantic_similarity(
    vi: &NodeFeature,
    vj: &NodeFeature,
    store: &ParamStore,
    params: &GraphParams,
) -> Result<f64> {
    let mut tape = Tape::new();
    let e = params.edge_rows(
        &mut tape,
        store,
        Tensor::row(vi.visual.clone()),
        Tensor::row(vj.visual.clone()),
        Tensor::zeros(1, params.dims.coord_in()),
    )?;
    Ok(tape.value(e).data()[0])
}

/// `edge_coord_net(c_i − c_j)`.
pub fn relative_coord_feature(
    ci: &[f64],
    cj: &[f64],
    store: &ParamStore,
    params: &GraphParams,
) -> Result<Vec<f64>> {
    if ci.len() != params.dims.coord_in() || cj.len() != ci.len() {
        return Err(Error::shape(
            "relative_coord_feature",
            format!("{} and {} vs 4T={}", ci.len(), cj.len(), params.dims.coord_in()),
        ));
    }
    let diff: Vec<f64> = ci.iter().zip(cj).map(|(a, b)| a - b).collect();
    let mut tape = Tape::new();
    let d = tape.constant(Tensor::row(diff))?;
    let out = params.edge.forward(&mut tape, store, d)?;
    Ok(tape.value(out).data().to_vec())
}
