mod common;

use common::{shuffle_storage, tiny_data, tiny_run, with_records};
use musle::gmm::{decode_bank, encode_bank, load_bank, save_bank, Covariance, MixtureParams, PrototypeBank};
use musle::autodiff::Tensor;
use musle::pipeline::{evaluate, infer_video, inspect, train, train_with, Scorer};
use musle::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn trained(classes: usize, seed: u64) -> (musle::synth::Generated, PrototypeBank) {
    let (gen, data) = tiny_data(classes, 6, 3, seed);
    let bank = train(&tiny_run(&gen), &data.train).unwrap();
    (data, bank)
}

#[test]
fn same_seed_gives_identical_bank_bytes_and_reports() {
    let (gen, data) = tiny_data(2, 5, 2, 3);
    let cfg = tiny_run(&gen);
    let a = train(&cfg, &data.train).unwrap();
    let b = train(&cfg, &data.train).unwrap();
    assert_eq!(encode_bank(&a).unwrap(), encode_bank(&b).unwrap());
    let ra = evaluate(&data.test, &Scorer::new(&a).unwrap()).unwrap();
    let rb = evaluate(&data.test, &Scorer::new(&b).unwrap()).unwrap();
    assert_eq!(serde_json::to_string(&ra).unwrap(), serde_json::to_string(&rb).unwrap());
}

#[test]
fn different_seed_changes_the_bank() {
    let (gen, data) = tiny_data(2, 5, 2, 3);
    let cfg = tiny_run(&gen);
    let a = train(&cfg, &data.train).unwrap();
    let b = train(&musle::config::RunConfig { seed: 1, ..cfg }, &data.train).unwrap();
    assert_ne!(encode_bank(&a).unwrap(), encode_bank(&b).unwrap());
}

#[test]
fn bank_file_round_trips_bit_exactly() {
    let (_, bank) = trained(2, 4);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bank.mus");
    save_bank(&bank, &path).unwrap();
    let back = load_bank(&path).unwrap();
    assert_eq!(back, bank);
    assert_eq!(std::fs::read(&path).unwrap(), encode_bank(&back).unwrap());
}

#[test]
fn corrupted_bank_is_rejected() {
    let (_, bank) = trained(2, 4);
    let bytes = encode_bank(&bank).unwrap();
    assert!(decode_bank(&bytes[..bytes.len() - 3]).is_err());
    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    assert!(decode_bank(&bad).is_err());
}

#[test]
fn bank_and_report_echo_the_config() {
    let (gen, data) = tiny_data(2, 4, 2, 5);
    let cfg = tiny_run(&gen);
    let bank = train(&cfg, &data.train).unwrap();
    assert_eq!(bank.config, cfg);
    let rep = evaluate(&data.test, &Scorer::new(&bank).unwrap()).unwrap();
    assert_eq!(rep.config, cfg);
}

#[test]
fn overfit_loss_decreases_over_first_epochs() {
    let (gen, data) = tiny_data(1, 1, 0, 6);
    // the whole pool fits in one batch, so every step is full-batch
    let cfg = musle::config::RunConfig {
        epochs: 5,
        subgraph_budget: 16,
        batch_size: 16,
        ..tiny_run(&gen)
    };
    let mut losses = Vec::new();
    train_with(&cfg, &data.train, |r| losses.push(r.mean_loss)).unwrap();
    assert_eq!(losses.len(), 5);
    for w in losses.windows(2) {
        assert!(w[1] <= w[0] + 1e-9 * w[0].abs(), "losses {losses:?}");
    }
}

#[test]
fn defaults_for_kernel_count_and_pruning() {
    let cfg = musle::config::RunConfig::default();
    assert_eq!(cfg.k_init, 6);
    assert_eq!(cfg.prune_threshold, 0.02);
    assert_eq!(cfg.scales, vec![3, 4, 5]);
}

#[test]
fn kernel_count_never_grows_and_stays_positive() {
    let (_, bank) = trained(2, 7);
    for cell in &bank.cells {
        assert!(cell.k_history.windows(2).all(|w| w[1] <= w[0]));
        assert!(cell.k_history.iter().all(|&k| k >= 1 && k <= bank.config.k_init));
        assert_eq!(cell.ema.k(), *cell.k_history.last().unwrap());
        assert!(cell.ema.weights.iter().all(|&w| w >= bank.config.prune_threshold));
    }
}

#[test]
fn single_class_bank_predicts_that_class() {
    let (_, bank) = trained(1, 8);
    let (_, other) = tiny_data(3, 2, 2, 9);
    for r in &other.test.records {
        assert_eq!(infer_video(r, &bank).unwrap().prediction, 0);
    }
}

#[test]
fn identical_cells_tie_to_class_zero() {
    let (data, mut bank) = trained(2, 10);
    let src = bank.cell(0, 3).unwrap().ema.clone();
    for cell in &mut bank.cells {
        cell.ema = src.clone();
    }
    for r in &data.test.records {
        let p = infer_video(r, &bank).unwrap();
        assert_eq!(p.scores[0], p.scores[1]);
        assert_eq!(p.prediction, 0);
    }
}

#[test]
fn overfit_run_classifies_its_own_training_set() {
    // one video per class, every 3-subset of its 8 nodes in each full batch
    let (gen, data) = tiny_data(3, 1, 0, 11);
    let cfg = musle::config::RunConfig {
        epochs: 30,
        subgraph_budget: 56,
        batch_size: 56,
        ..tiny_run(&gen)
    };
    let bank = train(&cfg, &data.train).unwrap();
    let rep = evaluate(&data.train, &Scorer::new(&bank).unwrap()).unwrap();
    assert_eq!(rep.top1, 1.0, "confusion {:?}", rep.confusion);
}

fn random_mixture(d: usize, rng: &mut ChaCha8Rng) -> MixtureParams {
    let means: Vec<f64> = (0..d).map(|_| rng.random_range(-0.05..0.05)).collect();
    MixtureParams {
        weights: vec![1.0],
        means: Tensor::from_rows(&[means]).unwrap(),
        cov: Covariance::Diagonal(Tensor::filled(1, d, 1.0)),
    }
}

#[test]
fn untrained_symmetric_bank_sits_at_chance() {
    let (_, mut bank) = trained(5, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for cell in &mut bank.cells {
        cell.ema = random_mixture(cell.ema.dim(), &mut rng);
    }
    let (_, data) = tiny_data(5, 1, 40, 13);
    let rep = evaluate(&data.test, &Scorer::new(&bank).unwrap()).unwrap();
    // 99% binomial interval around 0.2 for n = 200
    let half = 2.576 * (0.2f64 * 0.8 / 200.0).sqrt();
    assert!((rep.top1 - 0.2).abs() <= half, "top-1 {}", rep.top1);
    assert_eq!(rep.top5, 1.0);
}

#[test]
fn report_is_consistent() {
    let (data, bank) = trained(3, 14);
    let rep = evaluate(&data.test, &Scorer::new(&bank).unwrap()).unwrap();
    assert!(rep.top1 <= rep.top5);
    assert_eq!(rep.top5, 1.0);
    for (label, row) in rep.confusion.iter().enumerate() {
        let n = data.test.records.iter().filter(|r| r.label == label).count();
        assert_eq!(row.iter().sum::<usize>(), n);
    }
    assert!(rep.summary().contains("top-1"));
}

#[test]
fn more_candidates_never_lower_a_score() {
    let (data, bank) = trained(2, 15);
    let scorer = Scorer::new(&bank).unwrap();
    for r in data.test.records.iter().take(3) {
        let inputs = musle::graph::GraphInputs::from_video(r).unwrap();
        let graph = scorer.graph(&inputs).unwrap();
        let all = scorer.candidates(&r.video_id, graph.num_nodes(), 3).unwrap();
        let mut prev = vec![f64::NEG_INFINITY; 2];
        for n in [1, 4, 16, all.len()] {
            let p = scorer.score_candidates(&graph, &[all[..n].to_vec()]).unwrap();
            for (a, b) in p.scores.iter().zip(&prev) {
                assert!(a >= b);
            }
            prev = p.scores;
        }
    }
}

#[test]
fn storage_order_does_not_change_scores() {
    let (data, bank) = trained(2, 16);
    for (i, r) in data.test.records.iter().enumerate() {
        let a = infer_video(r, &bank).unwrap();
        let b = infer_video(&shuffle_storage(r, i as u64), &bank).unwrap();
        assert_eq!(a.scores, b.scores);
    }
}

#[test]
fn evaluate_rejects_foreign_labels_and_shapes() {
    let (data, bank) = trained(2, 17);
    let mut records = data.test.records.clone();
    records[0].label = 5;
    let bad = with_records(&data.test, records);
    assert!(matches!(
        evaluate(&bad, &Scorer::new(&bank).unwrap()),
        Err(Error::InvalidData(_))
    ));
    let wide = musle::synth::generate(&musle::synth::GeneratorConfig {
        d_vis: 16,
        ..common::tiny_gen(2, 1, 1, 17)
    })
    .unwrap();
    assert!(evaluate(&wide.test, &Scorer::new(&bank).unwrap()).is_err());
}

#[test]
fn train_rejects_mismatched_class_count() {
    let (gen, data) = tiny_data(2, 2, 0, 18);
    let cfg = musle::config::RunConfig {
        num_classes: 3,
        ..tiny_run(&gen)
    };
    assert!(train(&cfg, &data.train).is_err());
}

#[test]
fn inspect_weights_sum_to_one_and_k_matches() {
    let (data, bank) = trained(2, 19);
    let rep = inspect(&bank, 1, 3, Some(&data.train), 5).unwrap();
    let cell = bank.cell(1, 3).unwrap();
    assert_eq!(rep.k, cell.ema.k());
    assert_eq!(rep.k, *rep.k_history.last().unwrap());
    let total: f64 = rep.kernels.iter().map(|k| k.weight).sum();
    assert!((total - 1.0).abs() <= 1e-10);
    assert!(rep.overall.len() <= 5 && !rep.overall.is_empty());
    assert!(rep.overall.windows(2).all(|w| w[0].loglik >= w[1].loglik));
    assert!(rep.overall.iter().all(|h| h.label == 1 && h.nodes.len() == 3));
    assert!(inspect(&bank, 2, 3, None, 5).is_err());
    assert!(inspect(&bank, 0, 4, None, 5).is_err());
}
