#![allow(dead_code)]

use musle::config::RunConfig;
use musle::data::{Dataset, VideoRecord};
use musle::synth::{generate, Generated, GeneratorConfig};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Two short clips of four tubelets, eight visual dims.
pub fn tiny_gen(classes: usize, train: usize, test: usize, seed: u64) -> GeneratorConfig {
    GeneratorConfig {
        num_classes: classes,
        train_per_class: train,
        test_per_class: test,
        l: 2,
        t: 4,
        m: 4,
        d_vis: 8,
        motif_sizes: vec![3],
        seed,
        ..Default::default()
    }
}

pub fn tiny_run(gen: &GeneratorConfig) -> RunConfig {
    RunConfig {
        num_classes: gen.num_classes,
        l: gen.l,
        t: gen.t,
        m: gen.m,
        d_vis: gen.d_vis,
        scales: vec![3],
        k_init: 3,
        epochs: 3,
        d_phi: 8,
        d_coord: 4,
        d_edge_c: 4,
        graph_hidden: 8,
        membership_hidden: 8,
        subgraph_budget: 32,
        batch_size: 16,
        ..Default::default()
    }
}

pub fn tiny_data(classes: usize, train: usize, test: usize, seed: u64) -> (GeneratorConfig, Generated) {
    let gen = tiny_gen(classes, train, test, seed);
    let data = generate(&gen).expect("tiny generator config is valid");
    (gen, data)
}

/// The same video with every clip's tubelets stored in a shuffled order.
pub fn shuffle_storage(video: &VideoRecord, seed: u64) -> VideoRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = video.clone();
    for clip in &mut v.clips {
        clip.shuffle(&mut rng);
    }
    v
}

pub fn with_records(ds: &Dataset, records: Vec<VideoRecord>) -> Dataset {
    Dataset {
        meta: ds.meta.clone(),
        records,
    }
}

pub fn jaccard(a: &[(usize, usize)], b: &[(usize, usize)]) -> f64 {
    let inter = a.iter().filter(|p| b.contains(p)).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}
