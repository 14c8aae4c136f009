//! The differentiable mixture layer: membership prediction, batch-fresh
//! parameter estimation and the regularized negative log-likelihood.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Covariance, CovarianceKind, MixtureParams, MIN_KERNEL_MASS};
use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::Mlp2;

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureConfig {
    pub lambda: f64,
    pub var_floor: f64,
    pub covariance: CovarianceKind,
    /// Kernels whose batch mass `Σ_n γ_nk` falls below this are left out of
    /// the batch loss; their variances cannot be estimated from so little.
    pub min_mass: f64,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        MixtureConfig {
            lambda: 0.05,
            var_floor: 1e-6,
            covariance: CovarianceKind::Diagonal,
            min_mass: 1.0,
        }
    }
}

/// `x ↦ softmax(W₂ relu(W₁z + b₁) + b₂)` with `z = (x - shift) ⊙ scale`,
/// for one (class, scale) cell.
///
/// `shift` and `scale` are fixed input statistics, not trained.
#[derive(Clone, Debug, PartialEq)]
pub struct MembershipNet {
    pub mlp: Mlp2,
    pub shift: ParamId,
    pub scale: ParamId,
    pub d_x: usize,
    pub hidden: usize,
}

impl MembershipNet {
    pub fn prefix(class: usize, scale: usize) -> String {
        format!("member.c{class}.s{scale}")
    }

    pub fn init<R: Rng>(
        store: &mut ParamStore,
        class: usize,
        scale: usize,
        d_x: usize,
        hidden: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("membership net needs K >= 1".into()));
        }
        let prefix = Self::prefix(class, scale);
        let mlp = Mlp2::init(store, &prefix, (d_x, hidden, k), rng)?;
        let shift = store.insert(format!("{prefix}.in_shift"), Tensor::zeros(1, d_x))?;
        let scale = store.insert(format!("{prefix}.in_scale"), Tensor::row(vec![1.0; d_x]))?;
        Ok(MembershipNet {
            mlp,
            shift,
            scale,
            d_x,
            hidden,
        })
    }

    pub fn lookup(store: &ParamStore, class: usize, scale: usize) -> Result<Self> {
        let prefix = Self::prefix(class, scale);
        let mlp = Mlp2::lookup(store, &prefix)?;
        let find = |name: &str| {
            store
                .id(&format!("{prefix}.{name}"))
                .ok_or_else(|| Error::BankFormat(format!("missing parameter {prefix}.{name}")))
        };
        let (shift, in_scale) = (find("in_shift")?, find("in_scale")?);
        let (d_x, hidden) = store.value(mlp.w1).shape();
        let k = store.value(mlp.w2).cols();
        if store.value(mlp.w2).rows() != hidden
            || store.value(mlp.b1).shape() != (1, hidden)
            || store.value(mlp.b2).shape() != (1, k)
            || store.value(shift).shape() != (1, d_x)
            || store.value(in_scale).shape() != (1, d_x)
        {
            return Err(Error::BankFormat(format!(
                "inconsistent membership net shapes for class {class} scale {scale}"
            )));
        }
        Ok(MembershipNet {
            mlp,
            shift,
            scale: in_scale,
            d_x,
            hidden,
        })
    }

    /// Blends the input statistics toward the column means and standard
    /// deviations of `rows`: `stat ← keep·stat + (1 − keep)·batch`.
    /// `keep = 0` replaces them. Constant columns keep their previous scale.
    pub fn update_input_stats(&self, store: &mut ParamStore, rows: &Tensor, keep: f64) -> Result<()> {
        if rows.cols() != self.d_x || rows.rows() == 0 {
            return Err(Error::shape(
                "update_input_stats",
                format!("{}x{} rows for d_x {}", rows.rows(), rows.cols(), self.d_x),
            ));
        }
        let n = rows.rows() as f64;
        let mut mean = vec![0.0; self.d_x];
        for r in 0..rows.rows() {
            for (m, v) in mean.iter_mut().zip(rows.row_slice(r)) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; self.d_x];
        for r in 0..rows.rows() {
            for ((s, v), m) in var.iter_mut().zip(rows.row_slice(r)).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        let old_shift = store.value(self.shift).data().to_vec();
        let old_scale = store.value(self.scale).data().to_vec();
        let shift: Vec<f64> = old_shift.iter().zip(&mean).map(|(o, m)| keep * o + (1.0 - keep) * m).collect();
        let scale: Vec<f64> = old_scale
            .iter()
            .zip(&var)
            .map(|(&o, &v)| {
                if v > 1e-24 {
                    1.0 / (keep / o + (1.0 - keep) * v.sqrt())
                } else {
                    o
                }
            })
            .collect();
        if shift.iter().chain(&scale).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("membership input statistics".into()));
        }
        *store.value_mut(self.shift) = Tensor::row(shift);
        *store.value_mut(self.scale) = Tensor::row(scale);
        Ok(())
    }

    pub fn k(&self, store: &ParamStore) -> usize {
        store.value(self.mlp.w2).cols()
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        if tape.value(x).cols() != self.d_x {
            return Err(Error::shape(
                "predict_membership",
                format!("x has {} columns, net expects {}", tape.value(x).cols(), self.d_x),
            ));
        }
        let shift = tape.constant(store.value(self.shift).clone())?;
        let scale = tape.constant(store.value(self.scale).clone())?;
        let centered = tape.sub_row(x, shift)?;
        let z = tape.mul_row(centered, scale)?;
        let logits = self.mlp.forward(tape, store, z)?;
        tape.softmax_rows(logits)
    }

    /// Membership `γ̂` for a single sample.
    pub fn predict(&self, store: &ParamStore, x: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::row(x.to_vec()))?;
        let g = self.forward(&mut tape, store, xv)?;
        Ok(tape.value(g).data().to_vec())
    }

    /// Deletes the output units of pruned kernels.
    pub fn retain_kernels(&self, store: &mut ParamStore, keep: &[usize]) -> Result<()> {
        store.retain_cols(self.mlp.w2, keep)?;
        store.retain_cols(self.mlp.b2, keep)
    }
}

/// Mixture parameters as tape variables.
pub struct FreshVars {
    /// `1 × K`.
    pub weights: Var,
    /// One `1 × D` row per kernel.
    pub means: Vec<Var>,
    /// One `1 × D` row of (floored) variances per kernel; the diagonal in
    /// the full case.
    pub variances: Vec<Var>,
    /// Full covariances, when requested.
    pub full: Option<Vec<Var>>,
    /// `x − μ_k` for each kernel.
    centered: Vec<Var>,
}

/// Differentiable counterpart of [`super::estimate_mixture`]. No kernel may
/// be empty; callers filter degenerate kernels first.
pub fn estimate_mixture_tape(
    tape: &mut Tape,
    x: Var,
    gamma: Var,
    var_floor: f64,
    kind: CovarianceKind,
) -> Result<FreshVars> {
    let (n, d) = tape.value(x).shape();
    let k = tape.value(gamma).cols();
    if tape.value(gamma).rows() != n || n == 0 {
        return Err(Error::shape(
            "estimate_mixture",
            format!("x {:?} vs memberships {:?}", (n, d), tape.value(gamma).shape()),
        ));
    }
    let mut masses = Vec::with_capacity(k);
    let mut means = Vec::with_capacity(k);
    let mut variances = Vec::with_capacity(k);
    let mut centered = Vec::with_capacity(k);
    let mut full = Vec::new();
    for kk in 0..k {
        let g = tape.slice_cols(gamma, kk, 1)?;
        let mass = tape.sum_all(g)?;
        let inv_mass = tape.recip(mass)?;
        let omega = tape.mul_row(g, inv_mass)?;
        let omega_t = tape.transpose(omega)?;
        let mu = tape.matmul(omega_t, x)?;
        let c = tape.sub_row(x, mu)?;
        let sq = tape.square(c)?;
        let raw_var = tape.matmul(omega_t, sq)?;
        let var = match kind {
            CovarianceKind::Diagonal => tape.clamp_min(raw_var, var_floor)?,
            CovarianceKind::Full => {
                let wc = tape.mul_col(c, omega)?;
                let wct = tape.transpose(wc)?;
                let s = tape.matmul(wct, c)?;
                let floor = tape.constant(Tensor::identity(d).map(|v| v * var_floor))?;
                full.push(tape.add(s, floor)?);
                tape.add_scalar(raw_var, var_floor)?
            }
        };
        masses.push(mass);
        means.push(mu);
        variances.push(var);
        centered.push(c);
    }
    let mass_row = tape.concat_cols(&masses)?;
    let weights = tape.scale(mass_row, 1.0 / n as f64)?;
    Ok(FreshVars {
        weights,
        means,
        variances,
        full: matches!(kind, CovarianceKind::Full).then_some(full),
        centered,
    })
}

pub struct BatchLoss {
    pub loss: Var,
    pub nll: f64,
    pub penalty: f64,
    /// Batch-fresh parameters over all `K` kernels. Weights are `mass / N`
    /// for every kernel; means and covariances of degenerate kernels are
    /// placeholders and must not be folded into the EMA.
    pub fresh: MixtureParams,
    pub degenerate: Vec<usize>,
}

/// `−(1/N) Σ_n log p(x_n) + λ R(Σ)` with the mixture estimated from this
/// batch's memberships. `x` is `N × D_x`.
pub fn batch_loss(
    tape: &mut Tape,
    store: &ParamStore,
    net: &MembershipNet,
    x: Var,
    cfg: &MixtureConfig,
) -> Result<BatchLoss> {
    let (n, d) = tape.value(x).shape();
    if n == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let gamma = net.forward(tape, store, x)?;
    let k = tape.value(gamma).cols();
    let gv = tape.value(gamma);
    let masses: Vec<f64> = (0..k).map(|c| (0..n).map(|r| gv.get(r, c)).sum()).collect();
    let mut floor = cfg.min_mass.max(MIN_KERNEL_MASS);
    if masses.iter().all(|&m| m < floor) {
        floor = MIN_KERNEL_MASS;
    }
    let live: Vec<usize> = (0..k).filter(|&c| masses[c] >= floor).collect();
    let degenerate: Vec<usize> = (0..k).filter(|&c| masses[c] < floor).collect();
    let gamma_live = if degenerate.is_empty() {
        gamma
    } else {
        let t = tape.transpose(gamma)?;
        let picked = tape.gather_rows(t, &live)?;
        tape.transpose(picked)?
    };
    let fv = estimate_mixture_tape(tape, x, gamma_live, cfg.var_floor, cfg.covariance)?;

    let log_w = tape.log(fv.weights)?;
    let mut terms = Vec::with_capacity(live.len());
    for j in 0..live.len() {
        let lw = tape.slice_cols(log_w, j, 1)?;
        let term = match &fv.full {
            None => {
                let var = fv.variances[j];
                let inv = tape.recip(var)?;
                let sq = tape.square(fv.centered[j])?;
                let scaled = tape.mul_row(sq, inv)?;
                let q = tape.sum_rows(scaled)?;
                let half_q = tape.scale(q, -0.5)?;
                let v2pi = tape.scale(var, TWO_PI)?;
                let logs = tape.log(v2pi)?;
                let logdet = tape.sum_all(logs)?;
                let half_logdet = tape.scale(logdet, -0.5)?;
                let offset = tape.add(lw, half_logdet)?;
                tape.add_row(half_q, offset)?
            }
            Some(full) => {
                let lp = tape.gauss_logpdf(x, fv.means[j], full[j])?;
                tape.add_row(lp, lw)?
            }
        };
        terms.push(term);
    }
    let all = tape.concat_cols(&terms)?;
    let lse = tape.logsumexp_rows(all)?;
    let mean_ll = tape.mean_all(lse)?;
    let nll = tape.scale(mean_ll, -1.0)?;
    let vars = tape.concat_rows(&fv.variances)?;
    let inv_vars = tape.recip(vars)?;
    let r = tape.sum_all(inv_vars)?;
    let pen = tape.scale(r, cfg.lambda)?;
    let loss = tape.add(nll, pen)?;

    let mut fresh = collect_fresh(tape, &fv, &live, k, d, cfg)?;
    // weights over all kernels, so starved ones can decay towards pruning
    for (w, m) in fresh.weights.iter_mut().zip(&masses) {
        *w = m / n as f64;
    }
    Ok(BatchLoss {
        loss,
        nll: tape.value(nll).item(),
        penalty: tape.value(r).item(),
        fresh,
        degenerate,
    })
}

fn collect_fresh(
    tape: &Tape,
    fv: &FreshVars,
    live: &[usize],
    k: usize,
    d: usize,
    cfg: &MixtureConfig,
) -> Result<MixtureParams> {
    let mut weights = vec![0.0; k];
    let mut means = Tensor::zeros(k, d);
    let mut vars = Tensor::filled(k, d, cfg.var_floor);
    let mut fulls: Vec<Tensor> = match cfg.covariance {
        CovarianceKind::Full => (0..k).map(|_| Tensor::identity(d).map(|v| v * cfg.var_floor)).collect(),
        CovarianceKind::Diagonal => Vec::new(),
    };
    let w = tape.value(fv.weights);
    for (j, &kk) in live.iter().enumerate() {
        weights[kk] = w.data()[j];
        means.row_slice_mut(kk).copy_from_slice(tape.value(fv.means[j]).data());
        vars.row_slice_mut(kk).copy_from_slice(tape.value(fv.variances[j]).data());
        if let Some(full) = &fv.full {
            fulls[kk] = tape.value(full[j]).clone();
        }
    }
    let cov = match cfg.covariance {
        CovarianceKind::Diagonal => Covariance::Diagonal(vars),
        CovarianceKind::Full => Covariance::Full(fulls),
    };
    Ok(MixtureParams { weights, means, cov })
}
