//! Reverse-mode differentiation, parameter storage and SGD.

mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, rel_error, GradCheckReport, ParamCheck};
pub use optim::{clip_grad_norm, grad_norm, sgd_step, sgd_step_on, OptimizerConfig};
pub use params::{ParamId, ParamStore};
pub use tape::{logsumexp, Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(vec![0.0, 0.0, 0.0])).unwrap();
        let y = tape.softmax_rows(x).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_survives_large_logits() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(vec![700.0, 699.0, 650.0])).unwrap();
        let y = tape.softmax_rows(x).unwrap();
        let s: f64 = tape.value(y).data().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(tape.value(y).data().iter().all(|&p| p > 0.0));
    }

    #[test]
    fn identity_affine_is_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(vec![1.5, -2.0, 0.25])).unwrap();
        let w = tape.constant(Tensor::identity(3)).unwrap();
        let b = tape.constant(Tensor::zeros(1, 3)).unwrap();
        let y = tape.affine(x, w, b).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn dot_gradient_is_other_operand() {
        let mut store = ParamStore::new();
        let w = store.insert("w", Tensor::row(vec![0.3, -0.7, 2.0])).unwrap();
        let xs = Tensor::row(vec![4.0, 5.0, -6.0]);
        let mut tape = Tape::new();
        let wv = tape.param(&store, w).unwrap();
        let xv = tape.constant(xs.clone()).unwrap();
        let root = tape.dot(wv, xv).unwrap();
        let grads = tape.backward(root).unwrap();
        store.accumulate(&tape, &grads);
        assert_eq!(store.grad(w), &xs);
    }

    #[test]
    fn unused_parameter_has_zero_gradient() {
        let mut store = ParamStore::new();
        let a = store.insert("a", Tensor::scalar(2.0)).unwrap();
        let b = store.insert("b", Tensor::scalar(3.0)).unwrap();
        let mut tape = Tape::new();
        let av = tape.param(&store, a).unwrap();
        let _bv = tape.param(&store, b).unwrap();
        let root = tape.square(av).unwrap();
        let grads = tape.backward(root).unwrap();
        store.accumulate(&tape, &grads);
        assert_eq!(store.grad(a).item(), 4.0);
        assert_eq!(store.grad(b).item(), 0.0);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(vec![1.0, 2.0])).unwrap();
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn log_of_zero_is_reported() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(vec![0.0])).unwrap();
        assert!(matches!(tape.log(x), Err(crate::Error::NonFinite(_))));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(2, 3)).unwrap();
        let b = tape.constant(Tensor::zeros(2, 2)).unwrap();
        assert!(tape.add(a, b).is_err());
        assert!(tape.matmul(a, b).is_err());
    }

    /// Straight-line evaluation of the composite used below.
    fn composite_direct(x: &Tensor, w: &Tensor, b: &Tensor) -> f64 {
        let mut total = 0.0;
        for r in 0..x.rows() {
            let mut z = vec![0.0; w.cols()];
            for (c, zc) in z.iter_mut().enumerate() {
                *zc = b.data()[c] + (0..x.cols()).map(|k| x.get(r, k) * w.get(k, c)).sum::<f64>();
                *zc = zc.max(0.0);
            }
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            let p: Vec<f64> = e.iter().map(|v| v / s).collect();
            let lse = m + s.ln();
            total += p.iter().zip(&z).map(|(p, z)| p * z).sum::<f64>() + (1.0 + lse).ln();
        }
        total / x.rows() as f64
    }

    fn composite_tape(store: &ParamStore, tape: &mut Tape, x: &Tensor) -> crate::Result<Var> {
        let xv = tape.constant(x.clone())?;
        let w = tape.param(store, store.id("w").unwrap())?;
        let b = tape.param(store, store.id("b").unwrap())?;
        let z = tape.affine(xv, w, b)?;
        let z = tape.relu(z)?;
        let p = tape.softmax_rows(z)?;
        let pz = tape.mul(p, z)?;
        let s = tape.sum_rows(pz)?;
        let lse = tape.logsumexp_rows(z)?;
        let l1 = tape.add_scalar(lse, 1.0)?;
        let l = tape.log(l1)?;
        let t = tape.add(s, l)?;
        tape.mean_all(t)
    }

    #[test]
    fn composite_matches_direct_and_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_tensor(&mut rng, 5, 4);
        let mut store = ParamStore::new();
        store.insert("w", rand_tensor(&mut rng, 4, 3)).unwrap();
        store.insert("b", rand_tensor(&mut rng, 1, 3)).unwrap();
        let mut tape = Tape::new();
        let root = composite_tape(&store, &mut tape, &x).unwrap();
        let direct = composite_direct(
            &x,
            store.value(store.id("w").unwrap()),
            store.value(store.id("b").unwrap()),
        );
        assert!((tape.value(root).item() - direct).abs() < 1e-12);

        let ids: Vec<_> = store.ids().collect();
        let report =
            grad_check(&store, &ids, |s, t| composite_tape(s, t, &x), 1e-5, 1e-6).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn every_op_passes_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let a = store.insert("a", rand_tensor(&mut rng, 3, 4)).unwrap();
        let b = store.insert("b", rand_tensor(&mut rng, 3, 4)).unwrap();
        let row = store.insert("row", rand_tensor(&mut rng, 1, 4)).unwrap();
        let col = store.insert("col", rand_tensor(&mut rng, 3, 1)).unwrap();
        let f = |s: &ParamStore, t: &mut Tape| -> crate::Result<Var> {
            let a = t.param(s, a)?;
            let b = t.param(s, b)?;
            let row = t.param(s, row)?;
            let col = t.param(s, col)?;
            let bt = t.transpose(b)?;
            let mm = t.matmul(a, bt)?; // 3x3
            let sq = t.square(b)?;
            let pos = t.add_scalar(sq, 0.5)?;
            let dv = t.div(a, pos)?;
            let lg = t.log(pos)?;
            let rc = t.recip(pos)?;
            let e = t.exp(a)?;
            let m1 = t.mul_row(dv, row)?;
            let m2 = t.sub_row(m1, row)?;
            let m3 = t.add_row(m2, row)?;
            let m4 = t.mul_col(m3, col)?;
            let m5 = t.add_col(m4, col)?;
            let cc = t.concat_cols(&[m5, lg, mm])?;
            let cr = t.concat_rows(&[rc, e])?;
            let g = t.gather_rows(cr, &[0, 5, 5, 2])?;
            let sc = t.slice_cols(cc, 2, 7)?;
            let sr = t.slice_rows(sc, 1, 2)?;
            let cl = t.clamp_min(sr, -10.0)?;
            let lse = t.logsumexp_rows(cl)?;
            let sm = t.softmax_rows(g)?;
            let scol = t.sum_cols(sm)?;
            let sub = t.sub(scol, row)?;
            let d = t.dot(sub, row)?;
            let s1 = t.sum_all(lse)?;
            let s2 = t.scale(d, 0.7)?;
            t.add(s1, s2)
        };
        let ids: Vec<_> = store.ids().collect();
        let report = grad_check(&store, &ids, f, 1e-5, 1e-6).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn gauss_logpdf_passes_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let x = store.insert("x", rand_tensor(&mut rng, 4, 3)).unwrap();
        let m = store.insert("m", rand_tensor(&mut rng, 1, 3)).unwrap();
        let a = store.insert("a", rand_tensor(&mut rng, 3, 3)).unwrap();
        let f = |s: &ParamStore, t: &mut Tape| -> crate::Result<Var> {
            let x = t.param(s, x)?;
            let m = t.param(s, m)?;
            let a = t.param(s, a)?;
            // symmetric positive definite by construction: A Aᵀ + I
            let at = t.transpose(a)?;
            let aat = t.matmul(a, at)?;
            let eye = t.constant(Tensor::identity(3))?;
            let cov = t.add(aat, eye)?;
            let lp = t.gauss_logpdf(x, m, cov)?;
            t.sum_all(lp)
        };
        let ids: Vec<_> = store.ids().collect();
        let report = grad_check(&store, &ids, f, 1e-5, 1e-6).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn quadratic_errors_at_noise_level() {
        let mut store = ParamStore::new();
        let w = store.insert("w", Tensor::row(vec![0.4, -1.3, 2.2])).unwrap();
        let f = |s: &ParamStore, t: &mut Tape| {
            let w = t.param(s, w)?;
            let sq = t.square(w)?;
            t.sum_all(sq)
        };
        let report = grad_check(&store, &[w], f, 1e-5, 1e-4).unwrap();
        assert!(report.max_rel_error() < 1e-8, "{report:?}");
    }

    #[test]
    fn kink_at_zero_is_excluded() {
        let mut store = ParamStore::new();
        let w = store.insert("w", Tensor::row(vec![0.0, 1.0])).unwrap();
        let f = |s: &ParamStore, t: &mut Tape| {
            let w = t.param(s, w)?;
            let r = t.relu(w)?;
            t.sum_all(r)
        };
        let report = grad_check(&store, &[w], f, 1e-5, 1e-4).unwrap();
        assert_eq!(report.params[0].excluded, 1);
        assert_eq!(report.params[0].checked, 1);
        assert!(report.passed());
    }

    #[test]
    fn nondeterministic_function_is_rejected() {
        use std::cell::Cell;
        let mut store = ParamStore::new();
        let w = store.insert("w", Tensor::scalar(1.0)).unwrap();
        let calls = Cell::new(0.0);
        let f = |s: &ParamStore, t: &mut Tape| {
            calls.set(calls.get() + 1.0);
            let w = t.param(s, w)?;
            t.add_scalar(w, calls.get())
        };
        assert!(grad_check(&store, &[w], f, 1e-5, 1e-4).is_err());
    }
}
