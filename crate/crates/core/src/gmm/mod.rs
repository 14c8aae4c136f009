//! Gaussian mixture prototypes: batch estimation from soft memberships,
//! log-domain likelihood, covariance penalty, EMA persistence and pruning.

mod bank;
mod layer;

pub use bank::{decode_bank, encode_bank, load_bank, save_bank, CellState, PrototypeBank, BANK_MAGIC, BANK_VERSION};
pub use layer::{batch_loss, estimate_mixture_tape, BatchLoss, MembershipNet, MixtureConfig};

use serde::{Deserialize, Serialize};

use crate::autodiff::{logsumexp, Tensor};
use crate::error::{Error, Result};
use crate::linalg::Cholesky;

/// Responsibility mass below which a kernel is treated as empty.
pub const MIN_KERNEL_MASS: f64 = 1e-12;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceKind {
    #[default]
    Diagonal,
    Full,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Covariance {
    /// `K × D` variances.
    Diagonal(Tensor),
    /// One `D × D` matrix per kernel.
    Full(Vec<Tensor>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixtureParams {
    pub weights: Vec<f64>,
    /// `K × D`.
    pub means: Tensor,
    pub cov: Covariance,
}

impl MixtureParams {
    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.cols()
    }

    pub fn kind(&self) -> CovarianceKind {
        match self.cov {
            Covariance::Diagonal(_) => CovarianceKind::Diagonal,
            Covariance::Full(_) => CovarianceKind::Full,
        }
    }

    /// Per-kernel variances (the diagonal in the full case), `K × D`.
    pub fn variances(&self) -> Tensor {
        match &self.cov {
            Covariance::Diagonal(v) => v.clone(),
            Covariance::Full(mats) => {
                let d = self.dim();
                let mut out = Tensor::zeros(mats.len(), d);
                for (k, m) in mats.iter().enumerate() {
                    for i in 0..d {
                        out.set(k, i, m.get(i, i));
                    }
                }
                out
            }
        }
    }

    /// Checks shapes, the simplex, finiteness and the variance floor.
    pub fn validate(&self, var_floor: f64) -> Result<()> {
        let (k, d) = (self.k(), self.dim());
        if k == 0 || self.means.rows() != k {
            return Err(Error::shape("mixture", format!("{k} weights, means {:?}", self.means.shape())));
        }
        match &self.cov {
            Covariance::Diagonal(v) if v.shape() != (k, d) => {
                return Err(Error::shape("mixture", format!("variances {:?}", v.shape())));
            }
            Covariance::Full(m) if m.len() != k || m.iter().any(|c| c.shape() != (d, d)) => {
                return Err(Error::shape("mixture", "full covariance shapes"));
            }
            _ => {}
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-10 || self.weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::InvalidData(format!("mixture weights sum to {sum}")));
        }
        if !self.means.is_finite() {
            return Err(Error::NonFinite("mixture means".into()));
        }
        let vars = self.variances();
        if let Some(v) = vars.data().iter().find(|&&v| !(v >= var_floor) || !v.is_finite()) {
            return Err(Error::InvalidData(format!("variance {v} below floor {var_floor}")));
        }
        Ok(())
    }

    /// Keeps the listed kernels, in order.
    pub fn select(&self, keep: &[usize]) -> MixtureParams {
        MixtureParams {
            weights: keep.iter().map(|&k| self.weights[k]).collect(),
            means: self.means.select_rows(keep),
            cov: match &self.cov {
                Covariance::Diagonal(v) => Covariance::Diagonal(v.select_rows(keep)),
                Covariance::Full(m) => Covariance::Full(keep.iter().map(|&k| m[k].clone()).collect()),
            },
        }
    }

    /// Rescales the weights to sum to one.
    pub fn renormalize(&mut self) {
        let s: f64 = self.weights.iter().sum();
        for w in &mut self.weights {
            *w /= s;
        }
    }
}

fn check_batch(xs: &Tensor, gammas: &Tensor) -> Result<()> {
    if xs.rows() == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if gammas.rows() != xs.rows() || gammas.cols() == 0 {
        return Err(Error::shape(
            "estimate_mixture",
            format!("xs {:?} vs memberships {:?}", xs.shape(), gammas.shape()),
        ));
    }
    Ok(())
}

/// Weighted batch statistics under soft memberships:
/// `φ_k = mean_n γ_nk`, `μ_k = Σ γ_nk x_n / Σ γ_nk`, and the γ-weighted
/// centered covariance floored at `var_floor` (diagonal entries clamped, or
/// `var_floor·I` added in the full case).
pub fn estimate_mixture(
    xs: &Tensor,
    gammas: &Tensor,
    var_floor: f64,
    kind: CovarianceKind,
) -> Result<MixtureParams> {
    check_batch(xs, gammas)?;
    let (n, d, k) = (xs.rows(), xs.cols(), gammas.cols());
    let mut weights = vec![0.0; k];
    let mut means = Tensor::zeros(k, d);
    let mut vars = Tensor::zeros(k, d);
    let mut fulls = Vec::new();
    for kk in 0..k {
        let mass: f64 = (0..n).map(|r| gammas.get(r, kk)).sum();
        if mass < MIN_KERNEL_MASS {
            return Err(Error::DegenerateKernel { kernel: kk, mass });
        }
        weights[kk] = mass / n as f64;
        let omega: Vec<f64> = (0..n).map(|r| gammas.get(r, kk) / mass).collect();
        let mu = means.row_slice_mut(kk);
        for (r, w) in omega.iter().enumerate() {
            for (m, x) in mu.iter_mut().zip(xs.row_slice(r)) {
                *m += w * x;
            }
        }
        let mu = means.row_slice(kk).to_vec();
        match kind {
            CovarianceKind::Diagonal => {
                let v = vars.row_slice_mut(kk);
                for (r, w) in omega.iter().enumerate() {
                    for ((vi, x), m) in v.iter_mut().zip(xs.row_slice(r)).zip(&mu) {
                        *vi += w * (x - m) * (x - m);
                    }
                }
                for vi in v.iter_mut() {
                    *vi = vi.max(var_floor);
                }
            }
            CovarianceKind::Full => {
                let mut c = Tensor::zeros(d, d);
                for (r, w) in omega.iter().enumerate() {
                    let x = xs.row_slice(r);
                    for i in 0..d {
                        let di = x[i] - mu[i];
                        for j in 0..d {
                            let cur = c.get(i, j);
                            c.set(i, j, cur + w * di * (x[j] - mu[j]));
                        }
                    }
                }
                for i in 0..d {
                    c.set(i, i, c.get(i, i) + var_floor);
                }
                fulls.push(c);
            }
        }
    }
    let cov = match kind {
        CovarianceKind::Diagonal => Covariance::Diagonal(vars),
        CovarianceKind::Full => Covariance::Full(fulls),
    };
    Ok(MixtureParams { weights, means, cov })
}

/// A mixture prepared for repeated scoring.
#[derive(Clone, Debug)]
pub struct CompiledMixture {
    dim: usize,
    kernels: Vec<CompiledKernel>,
}

#[derive(Clone, Debug)]
enum CompiledKernel {
    Diagonal {
        /// `log φ_k − ½ Σ log(2π Σ_ki)`.
        offset: f64,
        mean: Vec<f64>,
        half_inv_var: Vec<f64>,
    },
    Full {
        offset: f64,
        mean: Vec<f64>,
        chol: Cholesky,
    },
}

impl CompiledMixture {
    pub fn new(mix: &MixtureParams) -> Result<Self> {
        let d = mix.dim();
        let kernels = (0..mix.k())
            .map(|k| {
                let log_w = mix.weights[k].ln();
                let mean = mix.means.row_slice(k).to_vec();
                Ok(match &mix.cov {
                    Covariance::Diagonal(v) => {
                        let row = v.row_slice(k);
                        let log_det: f64 = row.iter().map(|s| LN_2PI + s.ln()).sum();
                        CompiledKernel::Diagonal {
                            offset: log_w - 0.5 * log_det,
                            mean,
                            half_inv_var: row.iter().map(|s| 0.5 / s).collect(),
                        }
                    }
                    Covariance::Full(m) => {
                        let chol = Cholesky::new(&m[k])?;
                        CompiledKernel::Full {
                            offset: log_w - 0.5 * (d as f64 * LN_2PI + chol.log_det()),
                            mean,
                            chol,
                        }
                    }
                })
            })
            .collect::<Result<_>>()?;
        Ok(CompiledMixture { dim: d, kernels })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `log(φ_k N(x; μ_k, Σ_k))` for every kernel.
    pub fn kernel_log_terms(&self, x: &[f64], out: &mut Vec<f64>) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::shape(
                "log_likelihood",
                format!("x has {} entries, mixture expects {}", x.len(), self.dim),
            ));
        }
        out.clear();
        for kern in &self.kernels {
            out.push(match kern {
                CompiledKernel::Diagonal {
                    offset,
                    mean,
                    half_inv_var,
                } => {
                    let mut q = 0.0;
                    for ((xi, m), h) in x.iter().zip(mean).zip(half_inv_var) {
                        let dlt = xi - m;
                        q += dlt * dlt * h;
                    }
                    offset - q
                }
                CompiledKernel::Full { offset, mean, chol } => {
                    let diff: Vec<f64> = x.iter().zip(mean).map(|(a, b)| a - b).collect();
                    offset - 0.5 * chol.quad_form(&diff)
                }
            });
        }
        Ok(())
    }

    pub fn log_likelihood(&self, x: &[f64]) -> Result<f64> {
        let mut terms = Vec::with_capacity(self.kernels.len());
        self.kernel_log_terms(x, &mut terms)?;
        Ok(logsumexp(&terms))
    }
}

/// `log p(x) = logsumexp_k [log φ_k − ½ Σ_i (x_i − μ_ki)²/Σ_ki − ½ Σ_i log(2πΣ_ki)]`.
pub fn log_likelihood(x: &[f64], mix: &MixtureParams) -> Result<f64> {
    CompiledMixture::new(mix)?.log_likelihood(x)
}

/// `R = Σ_k Σ_i 1/Σ_ki` over the (diagonal) variances.
pub fn covariance_penalty(mix: &MixtureParams) -> f64 {
    mix.variances().data().iter().map(|v| 1.0 / v).sum()
}

/// `ema ← decay·ema + (1−decay)·fresh`; kernels listed in `skip` blend only
/// their weight and keep their previous means and variances. Weights are
/// then renormalized and floors reapplied.
pub fn update_ema(
    ema: &MixtureParams,
    fresh: &MixtureParams,
    decay: f64,
    var_floor: f64,
    skip: &[usize],
) -> Result<MixtureParams> {
    if !(0.0..1.0).contains(&decay) {
        return Err(Error::InvalidArgument(format!("ema decay {decay} outside [0, 1)")));
    }
    if ema.k() != fresh.k() || ema.dim() != fresh.dim() || ema.kind() != fresh.kind() {
        return Err(Error::shape(
            "update_ema",
            format!("K {} vs {}, D {} vs {}", ema.k(), fresh.k(), ema.dim(), fresh.dim()),
        ));
    }
    let blend = |a: f64, b: f64| decay * a + (1.0 - decay) * b;
    let mut out = ema.clone();
    for k in 0..ema.k() {
        out.weights[k] = blend(ema.weights[k], fresh.weights[k]);
        if skip.contains(&k) {
            continue;
        }
        for (o, f) in out.means.row_slice_mut(k).iter_mut().zip(fresh.means.row_slice(k)) {
            *o = blend(*o, *f);
        }
        match (&mut out.cov, &fresh.cov) {
            (Covariance::Diagonal(o), Covariance::Diagonal(f)) => {
                for (a, b) in o.row_slice_mut(k).iter_mut().zip(f.row_slice(k)) {
                    *a = blend(*a, *b).max(var_floor);
                }
            }
            (Covariance::Full(o), Covariance::Full(f)) => {
                for (a, b) in o[k].data_mut().iter_mut().zip(f[k].data()) {
                    *a = blend(*a, *b);
                }
                let d = o[k].rows();
                for i in 0..d {
                    let v = o[k].get(i, i).max(var_floor);
                    o[k].set(i, i, v);
                }
            }
            _ => unreachable!("kinds checked above"),
        }
    }
    out.renormalize();
    Ok(out)
}

/// Drops kernels whose weight is below `th` and renormalizes. At least the
/// heaviest kernel always survives. Returns the survivors' original indices.
pub fn prune_kernels(mix: &MixtureParams, th: f64) -> (MixtureParams, Vec<usize>) {
    let mut keep: Vec<usize> = (0..mix.k()).filter(|&k| mix.weights[k] >= th).collect();
    if keep.is_empty() {
        let best = (0..mix.k())
            .max_by(|&a, &b| mix.weights[a].total_cmp(&mix.weights[b]).then(b.cmp(&a)))
            .expect("mixture has at least one kernel");
        keep.push(best);
    }
    let mut out = mix.select(&keep);
    out.renormalize();
    (out, keep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn diag(weights: Vec<f64>, means: Vec<Vec<f64>>, vars: Vec<Vec<f64>>) -> MixtureParams {
        MixtureParams {
            weights,
            means: Tensor::from_rows(&means).unwrap(),
            cov: Covariance::Diagonal(Tensor::from_rows(&vars).unwrap()),
        }
    }

    fn random_simplex_rows(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Tensor {
        let mut t = Tensor::zeros(n, k);
        for r in 0..n {
            let row: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
            let s: f64 = row.iter().sum();
            for (c, v) in row.iter().enumerate() {
                t.set(r, c, v / s);
            }
        }
        t
    }

    fn random_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize, scale: f64) -> Tensor {
        Tensor::from_vec(n, d, (0..n * d).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
    }

    #[test]
    fn two_points_one_kernel() {
        let xs = Tensor::from_rows(&[vec![0.0], vec![2.0]]).unwrap();
        let g = Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let m = estimate_mixture(&xs, &g, 1e-6, CovarianceKind::Diagonal).unwrap();
        assert_eq!(m.weights, vec![1.0]);
        assert_eq!(m.means.data(), &[1.0]);
        assert_eq!(m.variances().data(), &[1.0]);
    }

    #[test]
    fn one_hot_memberships_give_group_means() {
        let xs = Tensor::from_rows(&[vec![1.0, 0.0], vec![3.0, 2.0], vec![10.0, 10.0], vec![12.0, 14.0]]).unwrap();
        let g = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]]).unwrap();
        let m = estimate_mixture(&xs, &g, 1e-6, CovarianceKind::Diagonal).unwrap();
        assert_eq!(m.means.row_slice(0), &[2.0, 1.0]);
        assert_eq!(m.means.row_slice(1), &[11.0, 12.0]);
        assert_eq!(m.weights, vec![0.5, 0.5]);
    }

    #[test]
    fn empty_kernel_is_degenerate() {
        let xs = Tensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        let g = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert!(matches!(
            estimate_mixture(&xs, &g, 1e-6, CovarianceKind::Diagonal),
            Err(Error::DegenerateKernel { kernel: 1, .. })
        ));
    }

    #[test]
    fn identical_points_hit_the_floor() {
        let xs = Tensor::from_rows(&vec![vec![0.5, 0.5]; 4]).unwrap();
        let g = Tensor::filled(4, 1, 1.0);
        let m = estimate_mixture(&xs, &g, 1e-6, CovarianceKind::Diagonal).unwrap();
        assert!(m.variances().data().iter().all(|&v| v == 1e-6));
    }

    #[test]
    fn standard_normal_at_mean() {
        let m = diag(vec![1.0], vec![vec![0.0]], vec![vec![1.0]]);
        let ll = log_likelihood(&[0.0], &m).unwrap();
        assert!((ll + 0.918_938_533_204_672_7).abs() < 1e-15);
        assert!((ll + 0.9189385).abs() < 1e-7);
    }

    #[test]
    fn at_the_mean_only_the_normalizer_remains() {
        let vars = vec![0.5, 2.0, 3.0];
        let m = diag(vec![1.0], vec![vec![1.0, -2.0, 0.3]], vec![vars.clone()]);
        let ll = log_likelihood(&[1.0, -2.0, 0.3], &m).unwrap();
        let expect: f64 = vars.iter().map(|v| -0.5 * (2.0 * std::f64::consts::PI * v).ln()).sum();
        assert!((ll - expect).abs() < 1e-12);
    }

    #[test]
    fn two_kernel_density_matches_direct_sum() {
        let m = diag(vec![0.3, 0.7], vec![vec![-1.0], vec![2.0]], vec![vec![0.5], vec![1.5]]);
        for x in [-3.0, -1.0, 0.0, 0.7, 2.0, 4.0] {
            let pdf = |w: f64, mu: f64, v: f64| {
                w * (-(x - mu) * (x - mu) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt()
            };
            let direct = (pdf(0.3, -1.0, 0.5) + pdf(0.7, 2.0, 1.5)).ln();
            assert!((log_likelihood(&[x], &m).unwrap() - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn wrong_dimension_is_rejected() {
        let m = diag(vec![1.0], vec![vec![0.0, 0.0]], vec![vec![1.0, 1.0]]);
        assert!(log_likelihood(&[0.0], &m).is_err());
    }

    #[test]
    fn far_points_stay_finite() {
        let m = diag(vec![0.5, 0.5], vec![vec![0.0; 3], vec![1.0; 3]], vec![vec![1e-6; 3], vec![1e-6; 3]]);
        let ll = log_likelihood(&[1e6, -1e6, 1e6], &m).unwrap();
        assert!(ll.is_finite());
    }

    #[test]
    fn penalty_examples() {
        let m = diag(vec![0.5, 0.5], vec![vec![0.0; 3]; 2], vec![vec![1.0; 3]; 2]);
        assert_eq!(covariance_penalty(&m), 6.0);
        let m = diag(vec![1.0], vec![vec![0.0; 2]], vec![vec![0.5, 0.25]]);
        assert_eq!(covariance_penalty(&m), 6.0);
    }

    #[test]
    fn penalty_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vars: Vec<Vec<f64>> = (0..4).map(|_| (0..7).map(|_| rng.random_range(0.1..3.0)).collect()).collect();
        let m = diag(vec![0.25; 4], vec![vec![0.0; 7]; 4], vars.clone());
        let mut r = 0.0;
        for row in &vars {
            for v in row {
                r += 1.0 / v;
            }
        }
        assert!((covariance_penalty(&m) - r).abs() < 1e-12);
    }

    #[test]
    fn ema_special_cases() {
        let a = diag(vec![0.4, 0.6], vec![vec![1.0], vec![2.0]], vec![vec![1.0], vec![2.0]]);
        let b = diag(vec![0.7, 0.3], vec![vec![-1.0], vec![5.0]], vec![vec![0.5], vec![4.0]]);
        assert_eq!(update_ema(&a, &b, 0.0, 1e-6, &[]).unwrap(), b);
        assert_eq!(update_ema(&a, &a, 0.9, 1e-6, &[]).unwrap(), a);
        let kept = update_ema(&a, &b, 0.5, 1e-6, &[1]).unwrap();
        assert_eq!(kept.means.row_slice(1), a.means.row_slice(1));
        assert_eq!(kept.variances().row_slice(1), a.variances().row_slice(1));
        // weights 0.55 and 0.45 blend for both kernels, already summing to 1
        assert!((kept.weights[1] - 0.45).abs() < 1e-12);
        assert!(update_ema(&a, &b, 1.0, 1e-6, &[]).is_err());
    }

    #[test]
    fn ema_gap_shrinks_geometrically() {
        let mut e = diag(vec![1.0], vec![vec![0.0]], vec![vec![1.0]]);
        let f = diag(vec![1.0], vec![vec![10.0]], vec![vec![3.0]]);
        for t in 1..=20 {
            e = update_ema(&e, &f, 0.9, 1e-6, &[]).unwrap();
            let gap = 10.0 - e.means.data()[0];
            assert!((gap - 10.0 * 0.9f64.powi(t)).abs() < 1e-10);
        }
    }

    #[test]
    fn prune_example() {
        let m = diag(vec![0.5, 0.3, 0.19, 0.01], vec![vec![0.0]; 4], vec![vec![1.0]; 4]);
        let (p, keep) = prune_kernels(&m, 0.02);
        assert_eq!(keep, vec![0, 1, 2]);
        for (w, e) in p.weights.iter().zip([0.5051, 0.3030, 0.1919]) {
            assert!((w - e).abs() < 1e-4, "{w}");
        }
        let (same, _) = prune_kernels(&p, 0.02);
        assert_eq!(same, p);
    }

    #[test]
    fn prune_never_empties() {
        let m = diag(vec![0.2; 5], vec![vec![0.0]; 5], vec![vec![1.0]; 5]);
        let (p, keep) = prune_kernels(&m, 0.5);
        assert_eq!(keep, vec![0]);
        assert_eq!(p.weights, vec![1.0]);
    }

    #[test]
    fn full_covariance_reduces_to_diagonal_for_diagonal_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let xs = random_matrix(&mut rng, 30, 3, 2.0);
        let g = random_simplex_rows(&mut rng, 30, 2);
        let d = estimate_mixture(&xs, &g, 1e-6, CovarianceKind::Diagonal).unwrap();
        let f = estimate_mixture(&xs, &g, 1e-6, CovarianceKind::Full).unwrap();
        f.validate(1e-6).unwrap();
        for (a, b) in d.variances().data().iter().zip(f.variances().data()) {
            assert!((a + 1e-6 - b).abs() < 1e-12);
        }
        // an axis-aligned full covariance scores like the diagonal one
        let mut fd = f.clone();
        if let Covariance::Full(m) = &mut fd.cov {
            for (k, c) in m.iter_mut().enumerate() {
                *c = Tensor::zeros(3, 3);
                for i in 0..3 {
                    c.set(i, i, d.variances().get(k, i));
                }
            }
        }
        let x = [0.3, -0.2, 1.1];
        assert!((log_likelihood(&x, &fd).unwrap() - log_likelihood(&x, &d).unwrap()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn weights_lie_on_simplex(n in 1usize..40, k in 1usize..7, d in 1usize..6, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let xs = random_matrix(&mut rng, n, d, 5.0);
            let g = random_simplex_rows(&mut rng, n, k);
            let m = estimate_mixture(&xs, &g, 1e-6, CovarianceKind::Diagonal).unwrap();
            prop_assert!((m.weights.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            m.validate(1e-6).unwrap();
        }

        #[test]
        fn shift_moves_means_only(n in 2usize..30, k in 1usize..5, d in 1usize..5, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let xs = random_matrix(&mut rng, n, d, 3.0);
            let g = random_simplex_rows(&mut rng, n, k);
            let t: Vec<f64> = (0..d).map(|_| rng.random_range(-10.0..10.0)).collect();
            let mut shifted = xs.clone();
            for r in 0..n {
                for (v, s) in shifted.row_slice_mut(r).iter_mut().zip(&t) {
                    *v += s;
                }
            }
            let a = estimate_mixture(&xs, &g, 1e-6, CovarianceKind::Diagonal).unwrap();
            let b = estimate_mixture(&shifted, &g, 1e-6, CovarianceKind::Diagonal).unwrap();
            for kk in 0..k {
                for i in 0..d {
                    prop_assert!((b.means.get(kk, i) - a.means.get(kk, i) - t[i]).abs() < 1e-10);
                    prop_assert!((b.variances().get(kk, i) - a.variances().get(kk, i)).abs() < 1e-10);
                }
                prop_assert!((a.weights[kk] - b.weights[kk]).abs() < 1e-15);
            }
        }

        #[test]
        fn variance_scaling_shifts_peak_by_half_d_log_c(d in 1usize..20, c in 0.01f64..100.0, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mu: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(0.1..4.0)).collect();
            let a = diag(vec![1.0], vec![mu.clone()], vec![v.clone()]);
            let b = diag(vec![1.0], vec![mu.clone()], vec![v.iter().map(|x| x * c).collect()]);
            let diff = log_likelihood(&mu, &a).unwrap() - log_likelihood(&mu, &b).unwrap();
            prop_assert!((diff - 0.5 * d as f64 * c.ln()).abs() < 1e-9);
        }

        #[test]
        fn likelihood_is_monotone_in_weights(x in -5.0f64..5.0, w in 0.05f64..0.9, bump in 0.01f64..0.09) {
            let lo = diag(vec![w, 1.0 - w], vec![vec![0.0], vec![1.0]], vec![vec![1.0], vec![2.0]]);
            let hi = MixtureParams { weights: vec![w + bump, 1.0 - w], ..lo.clone() };
            prop_assert!(log_likelihood(&[x], &hi).unwrap() > log_likelihood(&[x], &lo).unwrap());
        }
    }
}
