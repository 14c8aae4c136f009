//! Finite-difference check of the full training loss on a small instance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, GradCheckReport, ParamStore, Tape};
use crate::error::Result;
use crate::gmm::{batch_loss, MembershipNet, MixtureConfig};
use crate::graph::{subgraph_rows, GraphDims, GraphInputs, GraphParams};
use crate::subgraph::select_subgraphs;
use crate::synth::{generate, GeneratorConfig};

/// Sizes of the gradient-check instance.
#[derive(Clone, Copy, Debug)]
pub struct CheckInstance {
    pub classes: usize,
    pub scale: usize,
    pub k: usize,
    pub batch: usize,
    pub dims: GraphDims,
    pub membership_hidden: usize,
}

impl Default for CheckInstance {
    fn default() -> Self {
        CheckInstance {
            classes: 2,
            scale: 3,
            k: 3,
            batch: 8,
            dims: GraphDims {
                d_vis: 8,
                t: 4,
                d_phi: 8,
                d_coord: 4,
                d_edge_c: 4,
                hidden: 8,
            },
            membership_hidden: 8,
        }
    }
}

/// Checks the gradient of the summed per-class batch losses with respect to
/// the projection, both coordinate networks and every membership network.
pub fn gradient_check(inst: &CheckInstance, seed: u64, eps: f64, tol: f64) -> Result<GradCheckReport> {
    let d = inst.dims;
    let gen = GeneratorConfig {
        num_classes: inst.classes,
        train_per_class: 1,
        test_per_class: 0,
        l: 2,
        t: d.t,
        m: 4,
        d_vis: d.d_vis,
        motif_sizes: vec![3],
        pool_spread: 1.0,
        background_sigma: 1.0,
        archetype_scale: 1.0,
        feature_noise_sigma: 0.1,
        coord_noise_sigma: 0.01,
        seed,
        ..Default::default()
    };
    let data = generate(&gen)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let graph = GraphParams::init(&mut store, d, &mut rng)?;
    // non-zero biases so their gradients are exercised away from symmetry
    for id in graph.ids() {
        if store.value(id).rows() == 1 {
            for v in store.value_mut(id).data_mut() {
                *v = rng.random_range(-0.1..0.1);
            }
        }
    }
    let mut cells = Vec::new();
    for class in 0..inst.classes {
        let net = MembershipNet::init(&mut store, class, inst.scale, d.d_x(inst.scale), inst.membership_hidden, inst.k, &mut rng)?;
        let video = data.train.records.iter().find(|r| r.label == class).expect("one video per class");
        let inputs = GraphInputs::from_video(video)?;
        let pool = select_subgraphs(inputs.num_nodes(), inst.scale, inst.batch, rng.random())?;
        cells.push((net, inputs, pool));
    }
    let mut ids = graph.ids();
    for (net, _, _) in &cells {
        ids.extend(net.mlp.ids());
    }
    let mix = MixtureConfig::default();
    grad_check(
        &store,
        &ids,
        |store: &ParamStore, tape: &mut Tape| {
            let mut total = None;
            for (net, inputs, pool) in &cells {
                let items: Vec<(&GraphInputs, &[usize])> = pool.iter().map(|p| (inputs, p.nodes.as_slice())).collect();
                let x = subgraph_rows(tape, store, &graph, &items)?;
                let bl = batch_loss(tape, store, net, x, &mix)?;
                total = Some(match total {
                    None => bl.loss,
                    Some(t) => tape.add(t, bl.loss)?,
                });
            }
            Ok(total.expect("at least one class"))
        },
        eps,
        tol,
    )
}
