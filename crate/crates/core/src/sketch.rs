//! Tensor-sketch approximation of the bilinear frame-to-frame kernel and a
//! small movement regressor over pooled sketches.
//!
//! For two frames with `S` spatial locations the exact kernel is
//! `K = (1/S²) Σ_i Σ_j (a_iᵀ b_j)²`. With `Φ` a tensor sketch,
//! `⟨Φ(a), Φ(b)⟩ ≈ (aᵀb)²`, and because the inner product is bilinear,
//! `(1/S²) Σ_i Σ_j ⟨Φ(a_i), Φ(b_j)⟩ = ⟨(1/S) Σ_i Φ(a_i), (1/S) Σ_j Φ(b_j)⟩`.
//! So each frame is sketched location by location, averaged once, and the
//! kernel is a single `d_sketch`-dimensional inner product.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::autodiff::{sgd_step, OptimizerConfig, ParamId, ParamStore, Tape, Tensor};
use crate::error::{Error, Result};
use crate::seed::derive_seed;

/// `w × h` locations, each holding a `d`-dimensional feature.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub w: usize,
    pub h: usize,
    pub d: usize,
    /// Location-major, `w·h·d` values.
    pub values: Vec<f64>,
}

impl FeatureGrid {
    pub fn new(w: usize, h: usize, d: usize, values: Vec<f64>) -> Result<Self> {
        if w == 0 || h == 0 {
            return Err(Error::InvalidArgument("feature grid needs w, h >= 1".into()));
        }
        if values.len() != w * h * d {
            return Err(Error::shape("feature_grid", format!("{} values for {w}×{h}×{d}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature grid".into()));
        }
        Ok(FeatureGrid { w, h, d, values })
    }

    pub fn zeros(w: usize, h: usize, d: usize) -> Self {
        FeatureGrid {
            w,
            h,
            d,
            values: vec![0.0; w * h * d],
        }
    }

    /// Standard-normal features.
    pub fn random<R: Rng>(w: usize, h: usize, d: usize, rng: &mut R) -> Self {
        let values = (0..w * h * d).map(|_| rng.sample(StandardNormal)).collect();
        FeatureGrid { w, h, d, values }
    }

    pub fn locations(&self) -> usize {
        self.w * self.h
    }

    /// Feature at location `i` (row-major over `(y, x)`).
    pub fn at(&self, i: usize) -> &[f64] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    pub fn scaled(&self, c: f64) -> Self {
        FeatureGrid {
            values: self.values.iter().map(|v| v * c).collect(),
            ..self.clone()
        }
    }

    fn same_shape(&self, other: &FeatureGrid) -> Result<()> {
        if (self.w, self.h, self.d) != (other.w, other.h, other.d) {
            return Err(Error::shape(
                "bilinear",
                format!("{}×{}×{} vs {}×{}×{}", self.w, self.h, self.d, other.w, other.h, other.d),
            ));
        }
        Ok(())
    }
}

/// Which of the two independent count-sketch tables to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Table {
    First,
    Second,
}

/// Hash and sign tables of a degree-two tensor sketch.
#[derive(Clone, Debug, PartialEq)]
pub struct SketchParams {
    pub d: usize,
    pub d_sketch: usize,
    pub h1: Vec<usize>,
    pub h2: Vec<usize>,
    pub s1: Vec<f64>,
    pub s2: Vec<f64>,
    pub seed: u64,
}

impl SketchParams {
    pub fn new(d: usize, d_sketch: usize, seed: u64) -> Result<Self> {
        if d == 0 || d_sketch == 0 {
            return Err(Error::InvalidArgument("sketch needs d, d_sketch >= 1".into()));
        }
        let table = |tag: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, tag]));
            let h: Vec<usize> = (0..d).map(|_| rng.random_range(0..d_sketch)).collect();
            let s: Vec<f64> = (0..d).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
            (h, s)
        };
        let (h1, s1) = table(1);
        let (h2, s2) = table(2);
        Ok(SketchParams {
            d,
            d_sketch,
            h1,
            h2,
            s1,
            s2,
            seed,
        })
    }

    fn check(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.d {
            return Err(Error::shape("sketch", format!("vector of length {}, sketch expects {}", v.len(), self.d)));
        }
        Ok(())
    }

    /// `out[j] = Σ_{i : h(i) = j} s(i)·v_i`.
    pub fn count_sketch(&self, v: &[f64], table: Table) -> Result<Vec<f64>> {
        self.check(v)?;
        let (h, s) = match table {
            Table::First => (&self.h1, &self.s1),
            Table::Second => (&self.h2, &self.s2),
        };
        let mut out = vec![0.0; self.d_sketch];
        for i in 0..self.d {
            out[h[i]] += s[i] * v[i];
        }
        Ok(out)
    }

    /// `Φ(v)` by direct `O(d_sketch²)` circular convolution.
    pub fn tensor_sketch_direct(&self, v: &[f64]) -> Result<Vec<f64>> {
        let a = self.count_sketch(v, Table::First)?;
        let b = self.count_sketch(v, Table::Second)?;
        let n = self.d_sketch;
        let mut out = vec![0.0; n];
        for (i, &ai) in a.iter().enumerate() {
            if ai == 0.0 {
                continue;
            }
            for (j, &bj) in b.iter().enumerate() {
                out[(i + j) % n] += ai * bj;
            }
        }
        Ok(out)
    }
}

/// A [`SketchParams`] with FFT plans for the transform-domain path.
#[derive(Clone)]
pub struct TensorSketch {
    params: SketchParams,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl TensorSketch {
    pub fn new(params: SketchParams) -> Self {
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(params.d_sketch);
        let inv = planner.plan_fft_inverse(params.d_sketch);
        TensorSketch { params, fwd, inv }
    }

    pub fn params(&self) -> &SketchParams {
        &self.params
    }

    /// `Φ(v) = IFFT(FFT(C₁v) ⊙ FFT(C₂v))`.
    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        let p = &self.params;
        let to_c = |x: Vec<f64>| x.into_iter().map(|r| Complex::new(r, 0.0)).collect::<Vec<_>>();
        let mut a = to_c(p.count_sketch(v, Table::First)?);
        let mut b = to_c(p.count_sketch(v, Table::Second)?);
        self.fwd.process(&mut a);
        self.fwd.process(&mut b);
        for (x, y) in a.iter_mut().zip(&b) {
            *x *= y;
        }
        self.inv.process(&mut a);
        let n = p.d_sketch as f64;
        Ok(a.into_iter().map(|c| c.re / n).collect())
    }

    /// Mean of `Φ` over the grid's locations.
    pub fn pooled(&self, grid: &FeatureGrid) -> Result<Vec<f64>> {
        if grid.d != self.params.d {
            return Err(Error::shape("pooled_sketch", format!("grid depth {} vs sketch d {}", grid.d, self.params.d)));
        }
        let mut acc = vec![0.0; self.params.d_sketch];
        for i in 0..grid.locations() {
            for (a, v) in acc.iter_mut().zip(self.apply(grid.at(i))?) {
                *a += v;
            }
        }
        let s = grid.locations() as f64;
        Ok(acc.into_iter().map(|a| a / s).collect())
    }
}

/// `Φ(v)` through the transform path, planning a fresh FFT.
pub fn tensor_sketch(v: &[f64], params: &SketchParams) -> Result<Vec<f64>> {
    TensorSketch::new(params.clone()).apply(v)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `(1/S²) Σ_i Σ_j (a_iᵀ b_j)²`.
pub fn bilinear_exact(ft: &FeatureGrid, ft1: &FeatureGrid) -> Result<f64> {
    ft.same_shape(ft1)?;
    let s = ft.locations();
    let mut sum = 0.0;
    for i in 0..s {
        for j in 0..s {
            let k = dot(ft.at(i), ft1.at(j));
            sum += k * k;
        }
    }
    Ok(sum / (s * s) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BilinearApprox {
    pub value: f64,
    pub p_t: Vec<f64>,
    pub p_t1: Vec<f64>,
}

/// Pooled sketches of both frames and their inner product.
pub fn bilinear_approx(ft: &FeatureGrid, ft1: &FeatureGrid, sketch: &TensorSketch) -> Result<BilinearApprox> {
    ft.same_shape(ft1)?;
    let p_t = sketch.pooled(ft)?;
    let p_t1 = sketch.pooled(ft1)?;
    Ok(BilinearApprox {
        value: dot(&p_t, &p_t1),
        p_t,
        p_t1,
    })
}

/// `(Δcx, Δcy, Δlog w, Δlog h)`.
pub type Movement = [f64; 4];

/// Affine map from `p_t ⊙ p_{t+1}` to a box movement. Inputs are
/// standardized per dimension with statistics fixed at fit time, which keeps
/// the whole map affine in the product.
#[derive(Clone, Debug)]
pub struct MovementRegressor {
    pub store: ParamStore,
    w: ParamId,
    b: ParamId,
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl MovementRegressor {
    pub fn zeros(d_sketch: usize) -> Result<Self> {
        let mut store = ParamStore::new();
        let w = store.insert("move.w", Tensor::zeros(d_sketch, 4))?;
        let b = store.insert("move.b", Tensor::zeros(1, 4))?;
        Ok(MovementRegressor {
            store,
            w,
            b,
            shift: vec![0.0; d_sketch],
            scale: vec![1.0; d_sketch],
        })
    }

    pub fn random<R: Rng>(d_sketch: usize, rng: &mut R) -> Result<Self> {
        let mut r = Self::zeros(d_sketch)?;
        let mut store = ParamStore::new();
        r.w = store.insert_glorot("move.w", d_sketch, 4, rng)?;
        r.b = store.insert("move.b", Tensor::zeros(1, 4))?;
        r.store = store;
        Ok(r)
    }

    pub fn d_sketch(&self) -> usize {
        self.shift.len()
    }

    fn features(&self, p_t: &[f64], p_t1: &[f64]) -> Result<Vec<f64>> {
        let d = self.d_sketch();
        if p_t.len() != d || p_t1.len() != d {
            return Err(Error::shape(
                "movement_regress",
                format!("sketches of length {} and {}, regressor expects {d}", p_t.len(), p_t1.len()),
            ));
        }
        Ok((0..d).map(|k| (p_t[k] * p_t1[k] - self.shift[k]) * self.scale[k]).collect())
    }

    fn forward(&self, tape: &mut Tape, x: Tensor) -> Result<crate::autodiff::Var> {
        let xv = tape.constant(x)?;
        let w = tape.param(&self.store, self.w)?;
        let b = tape.param(&self.store, self.b)?;
        tape.affine(xv, w, b)
    }

    pub fn predict(&self, p_t: &[f64], p_t1: &[f64]) -> Result<Movement> {
        let x = self.features(p_t, p_t1)?;
        let mut tape = Tape::new();
        let y = self.forward(&mut tape, Tensor::row(x))?;
        let d = tape.value(y).data();
        Ok([d[0], d[1], d[2], d[3]])
    }

    /// Mean squared error over all four outputs.
    pub fn loss(&self, pairs: &[ShiftPair]) -> Result<f64> {
        let mut tape = Tape::new();
        let l = self.loss_on(&mut tape, pairs)?;
        Ok(tape.value(l).item())
    }

    fn design(&self, pairs: &[ShiftPair]) -> Result<(Tensor, Tensor)> {
        let rows: Vec<Vec<f64>> = pairs.iter().map(|p| self.features(&p.p_t, &p.p_t1)).collect::<Result<_>>()?;
        let targets: Vec<Vec<f64>> = pairs.iter().map(|p| p.target.to_vec()).collect();
        Ok((Tensor::from_rows(&rows)?, Tensor::from_rows(&targets)?))
    }

    fn loss_on(&self, tape: &mut Tape, pairs: &[ShiftPair]) -> Result<crate::autodiff::Var> {
        if pairs.is_empty() {
            return Err(Error::InvalidArgument("no training pairs".into()));
        }
        let (x, t) = self.design(pairs)?;
        let y = self.forward(tape, x)?;
        let tv = tape.constant(t)?;
        let r = tape.sub(y, tv)?;
        let sq = tape.square(r)?;
        tape.mean_all(sq)
    }

    /// Fixes the standardization from `pairs` and runs full-batch SGD.
    /// Returns the final training loss.
    pub fn fit(&mut self, pairs: &[ShiftPair], steps: usize, learning_rate: f64) -> Result<f64> {
        if pairs.is_empty() {
            return Err(Error::InvalidArgument("no training pairs".into()));
        }
        let d = self.d_sketch();
        let n = pairs.len() as f64;
        let prods: Vec<Vec<f64>> = pairs
            .iter()
            .map(|p| p.p_t.iter().zip(&p.p_t1).map(|(a, b)| a * b).collect())
            .collect();
        for k in 0..d {
            let mean = prods.iter().map(|r| r[k]).sum::<f64>() / n;
            let var = prods.iter().map(|r| (r[k] - mean).powi(2)).sum::<f64>() / n;
            self.shift[k] = mean;
            self.scale[k] = if var > 1e-24 { 1.0 / var.sqrt() } else { 0.0 };
        }
        let cfg = OptimizerConfig {
            learning_rate,
            momentum: 0.9,
            weight_decay: 0.0,
            lr_decay: 1.0,
            decay_every: 1,
            epochs: steps,
        };
        cfg.validate()?;
        for _ in 0..steps {
            let mut tape = Tape::new();
            let l = self.loss_on(&mut tape, pairs)?;
            let g = tape.backward(l)?;
            self.store.accumulate(&tape, &g);
            sgd_step(&mut self.store, &cfg, 0)?;
        }
        self.loss(pairs)
    }
}

/// Pooled sketches of one frame pair with its true movement.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftPair {
    pub p_t: Vec<f64>,
    pub p_t1: Vec<f64>,
    pub target: Movement,
}

/// A `w × h` window over a random field, and the same window after the
/// content moved by `(dx, dy)` cells; cells entering the window are fresh.
pub fn shifted_grids<R: Rng>(w: usize, h: usize, d: usize, dx: usize, dy: usize, rng: &mut R) -> (FeatureGrid, FeatureGrid) {
    let field = FeatureGrid::random(w + dx, h + dy, d, rng);
    let window = |ox: usize, oy: usize| {
        let mut values = Vec::with_capacity(w * h * d);
        for y in 0..h {
            for x in 0..w {
                values.extend_from_slice(field.at((y + oy) * field.w + x + ox));
            }
        }
        FeatureGrid { w, h, d, values }
    };
    (window(dx, dy), window(0, 0))
}

/// `n` sketched frame pairs whose content moves by `(dx, dy)` cells.
pub fn shift_corpus(
    sketch: &TensorSketch,
    n: usize,
    (w, h): (usize, usize),
    (dx, dy): (usize, usize),
    seed: u64,
) -> Result<Vec<ShiftPair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = sketch.params().d;
    (0..n)
        .map(|_| {
            let (a, b) = shifted_grids(w, h, d, dx, dy, &mut rng);
            Ok(ShiftPair {
                p_t: sketch.pooled(&a)?,
                p_t1: sketch.pooled(&b)?,
                target: [dx as f64 / w as f64, dy as f64 / h as f64, 0.0, 0.0],
            })
        })
        .collect()
}

/// Relative RMSE `sqrt(mean(((approx − exact)/exact)²))` of the sketched
/// kernel over `pairs` random grid pairs, one fresh sketch per pair.
pub fn relative_rmse(pairs: usize, (w, h, d): (usize, usize, usize), d_sketch: usize, seed: u64) -> Result<f64> {
    let mut sq = 0.0;
    for p in 0..pairs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, p as u64]));
        let a = FeatureGrid::random(w, h, d, &mut rng);
        let b = FeatureGrid::random(w, h, d, &mut rng);
        let ts = TensorSketch::new(SketchParams::new(d, d_sketch, derive_seed(&[seed, p as u64, d_sketch as u64]))?);
        let exact = bilinear_exact(&a, &b)?;
        let approx = bilinear_approx(&a, &b, &ts)?.value;
        sq += ((approx - exact) / exact).powi(2);
    }
    Ok((sq / pairs as f64).sqrt())
}

/// Mean and standard error of `⟨Φ(x), Φ(y)⟩` over `seeds` independent
/// sketches.
pub fn sketch_inner_product_stats(x: &[f64], y: &[f64], d_sketch: usize, seeds: u64, base: u64) -> Result<(f64, f64)> {
    let mut vals = Vec::with_capacity(seeds as usize);
    for s in 0..seeds {
        let ts = TensorSketch::new(SketchParams::new(x.len(), d_sketch, derive_seed(&[base, s]))?);
        vals.push(dot(&ts.apply(x)?, &ts.apply(y)?));
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    Ok((mean, (var / n).sqrt()))
}

/// Movement regression benchmark: fit on a mix of +1-cell horizontal shifts
/// and static pairs, then count held-out shifted pairs whose predicted
/// `Δcx` is positive.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftBench {
    pub train_loss: f64,
    pub positive: usize,
    pub held_out: usize,
}

pub fn shift_benchmark(d: usize, d_sketch: usize, per_set: usize, seed: u64) -> Result<ShiftBench> {
    let ts = TensorSketch::new(SketchParams::new(d, d_sketch, seed)?);
    let mut train = shift_corpus(&ts, per_set, (3, 3), (1, 0), derive_seed(&[seed, 1]))?;
    train.extend(shift_corpus(&ts, per_set, (3, 3), (0, 0), derive_seed(&[seed, 2]))?);
    let held = shift_corpus(&ts, per_set, (3, 3), (1, 0), derive_seed(&[seed, 3]))?;
    let mut reg = MovementRegressor::zeros(d_sketch)?;
    let train_loss = reg.fit(&train, 400, 0.01)?;
    let mut positive = 0;
    for p in &held {
        if reg.predict(&p.p_t, &p.p_t1)?[0] > 0.0 {
            positive += 1;
        }
    }
    Ok(ShiftBench {
        train_loss,
        positive,
        held_out: held.len(),
    })
}

/// Two standard-normal vectors of length `d`.
pub fn random_pair(d: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let y = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    (x, y)
}
