use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use musle::autodiff::Tensor;
use musle::config::RunConfig;
use musle::gmm::{estimate_mixture, CompiledMixture, Covariance, CovarianceKind, MixtureParams};
use musle::pipeline::{train, Scorer};
use musle::sketch::{bilinear_approx, FeatureGrid, SketchParams, TensorSketch};
use musle::subgraph::select_subgraphs;
use musle::synth::{generate, GeneratorConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(rows, cols, data).unwrap()
}

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = c.benchmark_group("matmul");
    for n in [32, 128, 256] {
        let a = random_tensor(n, n, &mut rng);
        let b = random_tensor(n, n, &mut rng);
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bch, _| {
            bch.iter(|| black_box(a.matmul(&b).unwrap()))
        });
    }
    g.finish();
}

fn sketch(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let d = 64;
    let ft = FeatureGrid::random(3, 3, d, &mut rng);
    let ft1 = FeatureGrid::random(3, 3, d, &mut rng);
    let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut g = c.benchmark_group("tensor_sketch");
    for ds in [64, 256, 1024] {
        let ts = TensorSketch::new(SketchParams::new(d, ds, 7).unwrap());
        g.bench_with_input(BenchmarkId::new("fft", ds), &ds, |bch, _| bch.iter(|| black_box(ts.apply(&v).unwrap())));
        g.bench_with_input(BenchmarkId::new("direct", ds), &ds, |bch, _| {
            bch.iter(|| black_box(ts.params().tensor_sketch_direct(&v).unwrap()))
        });
        g.bench_with_input(BenchmarkId::new("bilinear_grid", ds), &ds, |bch, _| {
            bch.iter(|| black_box(bilinear_approx(&ft, &ft1, &ts).unwrap()))
        });
    }
    g.finish();
}

fn mixture(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (n, d, k) = (256, 48, 6);
    let xs = random_tensor(n, d, &mut rng);
    let mut gam = random_tensor(n, k, &mut rng).map(|v| v.abs() + 0.1);
    for r in 0..n {
        let s: f64 = gam.row_slice(r).iter().sum();
        gam.row_slice_mut(r).iter_mut().for_each(|v| *v /= s);
    }
    let mut g = c.benchmark_group("mixture");
    for kind in [CovarianceKind::Diagonal, CovarianceKind::Full] {
        g.bench_function(format!("estimate_{kind:?}"), |bch| {
            bch.iter(|| black_box(estimate_mixture(&xs, &gam, 1e-6, kind).unwrap()))
        });
    }
    let mix = MixtureParams {
        weights: vec![1.0 / k as f64; k],
        means: random_tensor(k, d, &mut rng),
        cov: Covariance::Diagonal(Tensor::filled(k, d, 1.0)),
    };
    let compiled = CompiledMixture::new(&mix).unwrap();
    let x = xs.row_slice(0).to_vec();
    g.bench_function("log_likelihood_diag", |bch| bch.iter(|| black_box(compiled.log_likelihood(&x).unwrap())));
    g.finish();
}

fn subgraphs(c: &mut Criterion) {
    c.bench_function("select_subgraphs n64 s4 b512", |bch| {
        bch.iter(|| black_box(select_subgraphs(64, 4, 512, 3).unwrap()))
    });
}

fn inference(c: &mut Criterion) {
    let gen = GeneratorConfig {
        num_classes: 3,
        train_per_class: 4,
        test_per_class: 1,
        l: 2,
        t: 4,
        m: 4,
        d_vis: 16,
        motif_sizes: vec![3],
        seed: 4,
        ..Default::default()
    };
    let data = generate(&gen).unwrap();
    let cfg = RunConfig {
        num_classes: 3,
        l: 2,
        t: 4,
        m: 4,
        d_vis: 16,
        scales: vec![3, 4],
        epochs: 1,
        subgraph_budget: 64,
        batch_size: 32,
        ..Default::default()
    };
    let bank = train(&cfg, &data.train).unwrap();
    let scorer = Scorer::new(&bank).unwrap();
    let video = &data.test.records[0];
    c.bench_function("infer_video 3 classes 2 scales", |bch| bch.iter(|| black_box(scorer.infer(video).unwrap())));
}

criterion_group!(benches, matmul, sketch, mixture, subgraphs, inference);
criterion_main!(benches);
