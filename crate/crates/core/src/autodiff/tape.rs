//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Every operation appends a node holding its forward value and the indices
//! of its inputs. Inputs always precede their consumers, so a single reverse
//! sweep over the node list propagates adjoints.

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// `R × C` with a `1 × C` row broadcast down the rows.
    AddRow(Var, Var),
    SubRow(Var, Var),
    MulRow(Var, Var),
    /// `R × C` with an `R × 1` column broadcast across the columns.
    AddCol(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Recip(Var),
    ClampMin(Var, f64),
    SoftmaxRows(Var),
    LogSumExpRows(Var),
    SumAll(Var),
    SumCols(Var),
    SumRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Dot(Var, Var),
    /// Per-row full-covariance Gaussian log density; inputs are
    /// `(x: N×D, mean: 1×D, cov: D×D)`. The cached factor is the inverse
    /// covariance used by the backward pass.
    GaussLogPdf {
        x: Var,
        mean: Var,
        cov: Var,
        inv: Tensor,
    },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    /// Downstream of some parameter; only such nodes receive adjoints.
    needs: bool,
}

/// Records a computation for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    min_kink_distance: f64,
}

/// Adjoints produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_vec(a.rows(), a.cols(), data).expect("same shape")
}

fn add_into(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            min_kink_distance: f64::INFINITY,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Smallest |pre-activation| seen by any rectifier or clamp on this tape.
    /// Finite-difference checks use it to recognize non-differentiable points.
    pub fn min_kink_distance(&self) -> f64 {
        self.min_kink_distance
    }

    fn push(&mut self, value: Tensor, op: Op, name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("autodiff op {name}")));
        }
        let needs = match &op {
            Op::Param(_) => true,
            Op::Constant => false,
            other => op_inputs(other).iter().any(|v| self.nodes[v.0].needs),
        };
        self.nodes.push(Node { value, op, needs });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Constant, "constant")
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        let value = store.value(id).clone();
        self.push(value, Op::Param(id), store.name(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a), "transpose")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("add", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("sub", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("mul", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b), "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("div", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x / y);
        self.push(out, Op::Div(a, b), "div")
    }

    fn row_broadcast(
        &mut self,
        a: Var,
        row: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(Error::shape(
                name,
                format!("{:?} with row {:?}", av.shape(), rv.shape()),
            ));
        }
        let mut out = av.clone();
        let cols = av.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = f(*v, rv.data()[i % cols]);
        }
        Ok(out)
    }

    fn col_broadcast(
        &mut self,
        a: Var,
        col: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (av, cv) = (self.value(a), self.value(col));
        if cv.cols() != 1 || cv.rows() != av.rows() {
            return Err(Error::shape(
                name,
                format!("{:?} with column {:?}", av.shape(), cv.shape()),
            ));
        }
        let mut out = av.clone();
        let cols = av.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = f(*v, cv.data()[i / cols]);
        }
        Ok(out)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast(a, row, "add_row", |x, r| x + r)?;
        self.push(out, Op::AddRow(a, row), "add_row")
    }

    pub fn sub_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast(a, row, "sub_row", |x, r| x - r)?;
        self.push(out, Op::SubRow(a, row), "sub_row")
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast(a, row, "mul_row", |x, r| x * r)?;
        self.push(out, Op::MulRow(a, row), "mul_row")
    }

    pub fn add_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let out = self.col_broadcast(a, col, "add_col", |x, c| x + c)?;
        self.push(out, Op::AddCol(a, col), "add_col")
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let out = self.col_broadcast(a, col, "mul_col", |x, c| x * c)?;
        self.push(out, Op::MulCol(a, col), "mul_col")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c), "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddScalar(a), "add_scalar")
    }

    /// Rectifier with `relu(0) = 0` and derivative 0 at the kink.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let kink = v.data().iter().fold(f64::INFINITY, |m, x| m.min(x.abs()));
        let out = v.map(|x| if x > 0.0 { x } else { 0.0 });
        self.min_kink_distance = self.min_kink_distance.min(kink);
        self.push(out, Op::Relu(a), "relu")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a), "exp")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Log(a), "log")
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x * x);
        self.push(out, Op::Square(a), "square")
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| 1.0 / x);
        self.push(out, Op::Recip(a), "recip")
    }

    /// `max(x, floor)`; the gradient is zero wherever the floor is active.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        let v = self.value(a);
        let kink = v
            .data()
            .iter()
            .fold(f64::INFINITY, |m, x| m.min((x - floor).abs()));
        let out = v.map(|x| if x > floor { x } else { floor });
        self.min_kink_distance = self.min_kink_distance.min(kink);
        self.push(out, Op::ClampMin(a, floor), "clamp_min")
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let mut out = v.clone();
        for r in 0..v.rows() {
            let row = out.row_slice_mut(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        self.push(out, Op::SoftmaxRows(a), "softmax_rows")
    }

    /// Row-wise log-sum-exp, `R × C → R × 1`.
    pub fn logsumexp_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let data = (0..v.rows())
            .map(|r| logsumexp(v.row_slice(r)))
            .collect::<Vec<_>>();
        let out = Tensor::from_vec(v.rows(), 1, data)?;
        self.push(out, Op::LogSumExpRows(a), "logsumexp_rows")
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), "sum_all")
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::shape("mean_all", "empty tensor"));
        }
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Sums over rows, `R × C → 1 × C`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let mut out = Tensor::zeros(1, v.cols());
        for r in 0..v.rows() {
            for (o, x) in out.data_mut().iter_mut().zip(v.row_slice(r)) {
                *o += x;
            }
        }
        self.push(out, Op::SumCols(a), "sum_cols")
    }

    /// Sums over columns, `R × C → R × 1`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let data = (0..v.rows()).map(|r| v.row_slice(r).iter().sum()).collect();
        let out = Tensor::from_vec(v.rows(), 1, data)?;
        self.push(out, Op::SumRows(a), "sum_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_cols", "no inputs"));
        };
        let rows = self.value(first).rows();
        let mut cols = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(Error::shape(
                    "concat_cols",
                    format!("{} rows vs {rows}", v.rows()),
                ));
            }
            cols += v.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let out = Tensor::from_vec(rows, cols, data)?;
        self.push(out, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_rows", "no inputs"));
        };
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(Error::shape(
                    "concat_rows",
                    format!("{} cols vs {cols}", v.cols()),
                ));
            }
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        let out = Tensor::from_vec(rows, cols, data)?;
        self.push(out, Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    /// Picks rows by index (repeats allowed); backward scatter-adds.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let v = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= v.rows()) {
            return Err(Error::shape(
                "gather_rows",
                format!("row {bad} of {}", v.rows()),
            ));
        }
        let out = v.select_rows(idx);
        self.push(out, Op::GatherRows(a, idx.to_vec()), "gather_rows")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a);
        if start + len > v.cols() {
            return Err(Error::shape(
                "slice_cols",
                format!("{start}+{len} of {}", v.cols()),
            ));
        }
        let keep: Vec<usize> = (start..start + len).collect();
        let out = v.select_cols(&keep);
        self.push(out, Op::SliceCols(a, start), "slice_cols")
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a);
        if start + len > v.rows() {
            return Err(Error::shape(
                "slice_rows",
                format!("{start}+{len} of {}", v.rows()),
            ));
        }
        let keep: Vec<usize> = (start..start + len).collect();
        let out = v.select_rows(&keep);
        self.push(out, Op::SliceRows(a, start), "slice_rows")
    }

    /// Inner product of two equally shaped tensors, as a `1 × 1`.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("dot", self.value(a), self.value(b))?;
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .sum();
        self.push(Tensor::scalar(s), Op::Dot(a, b), "dot")
    }

    /// `x W + b` for row-major batches `x: N × in`, `W: in × out`, `b: 1 × out`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    /// Log density of each row of `x` under `N(mean, cov)` with a full
    /// covariance. `cov` must be symmetric positive definite.
    pub fn gauss_logpdf(&mut self, x: Var, mean: Var, cov: Var) -> Result<Var> {
        let (xv, mv, cv) = (self.value(x), self.value(mean), self.value(cov));
        let d = xv.cols();
        if mv.shape() != (1, d) || cv.shape() != (d, d) {
            return Err(Error::shape(
                "gauss_logpdf",
                format!("x {:?}, mean {:?}, cov {:?}", xv.shape(), mv.shape(), cv.shape()),
            ));
        }
        let chol = crate::linalg::Cholesky::new(cv)?;
        let inv = chol.inverse();
        let logdet = chol.log_det();
        let half_log_2pi_d = 0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln();
        let mut out = Vec::with_capacity(xv.rows());
        let mut diff = vec![0.0; d];
        for r in 0..xv.rows() {
            for (i, slot) in diff.iter_mut().enumerate() {
                *slot = xv.get(r, i) - mv.data()[i];
            }
            let q = chol.quad_form(&diff);
            out.push(-0.5 * q - 0.5 * logdet - half_log_2pi_d);
        }
        let value = Tensor::from_vec(xv.rows(), 1, out)?;
        self.push(
            value,
            Op::GaussLogPdf { x, mean, cov, inv },
            "gauss_logpdf",
        )
    }

    /// Reverse sweep from a scalar root. Nodes that depend on no parameter
    /// get no adjoint.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).shape() != (1, 1) {
            return Err(Error::shape(
                "backward",
                format!("root must be 1x1, got {:?}", self.value(root).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::scalar(1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs {
                continue;
            }
            for input in op_inputs(&node.op) {
                if input.0 >= i {
                    return Err(Error::InvalidArgument(format!(
                        "cycle in op graph: node {i} reads node {}",
                        input.0
                    )));
                }
            }
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.nodes[a.0].needs {
                    add_into(&mut grads[a.0], g.matmul_t(false, bv, true)?);
                }
                if self.nodes[b.0].needs {
                    add_into(&mut grads[b.0], av.matmul_t(true, g, false)?);
                }
            }
            Op::Transpose(a) => add_into(&mut grads[a.0], g.transpose()),
            Op::Add(a, b) => {
                add_into(&mut grads[a.0], g.clone());
                add_into(&mut grads[b.0], g.clone());
            }
            Op::Sub(a, b) => {
                add_into(&mut grads[a.0], g.clone());
                add_into(&mut grads[b.0], g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                add_into(&mut grads[a.0], zip_map(g, self.value(*b), |g, y| g * y));
                add_into(&mut grads[b.0], zip_map(g, self.value(*a), |g, x| g * x));
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                add_into(&mut grads[a.0], zip_map(g, bv, |g, y| g / y));
                let t = zip_map(g, out, |g, o| g * o);
                add_into(&mut grads[b.0], zip_map(&t, bv, |t, y| -t / y));
            }
            Op::AddRow(a, row) | Op::SubRow(a, row) => {
                add_into(&mut grads[a.0], g.clone());
                let mut gr = column_sums(g);
                if matches!(node.op, Op::SubRow(..)) {
                    gr = gr.map(|x| -x);
                }
                add_into(&mut grads[row.0], gr);
            }
            Op::MulRow(a, row) => {
                let av = self.value(*a);
                let rv = self.value(*row);
                let cols = av.cols();
                let mut ga = g.clone();
                let mut gr = Tensor::zeros(1, cols);
                for (k, gv) in ga.data_mut().iter_mut().enumerate() {
                    let c = k % cols;
                    gr.data_mut()[c] += *gv * av.data()[k];
                    *gv *= rv.data()[c];
                }
                add_into(&mut grads[a.0], ga);
                add_into(&mut grads[row.0], gr);
            }
            Op::AddCol(a, col) => {
                add_into(&mut grads[a.0], g.clone());
                let data = (0..g.rows()).map(|r| g.row_slice(r).iter().sum()).collect();
                add_into(&mut grads[col.0], Tensor::from_vec(g.rows(), 1, data)?);
            }
            Op::MulCol(a, col) => {
                let av = self.value(*a);
                let cv = self.value(*col);
                let cols = av.cols();
                let mut ga = g.clone();
                let mut gc = Tensor::zeros(av.rows(), 1);
                for (k, gv) in ga.data_mut().iter_mut().enumerate() {
                    let r = k / cols;
                    gc.data_mut()[r] += *gv * av.data()[k];
                    *gv *= cv.data()[r];
                }
                add_into(&mut grads[a.0], ga);
                add_into(&mut grads[col.0], gc);
            }
            Op::Scale(a, c) => add_into(&mut grads[a.0], g.map(|x| x * c)),
            Op::AddScalar(a) => add_into(&mut grads[a.0], g.clone()),
            Op::Relu(a) => {
                let av = self.value(*a);
                add_into(
                    &mut grads[a.0],
                    zip_map(g, av, |g, x| if x > 0.0 { g } else { 0.0 }),
                );
            }
            Op::Exp(a) => add_into(&mut grads[a.0], zip_map(g, out, |g, o| g * o)),
            Op::Log(a) => {
                add_into(&mut grads[a.0], zip_map(g, self.value(*a), |g, x| g / x))
            }
            Op::Square(a) => add_into(
                &mut grads[a.0],
                zip_map(g, self.value(*a), |g, x| 2.0 * g * x),
            ),
            Op::Recip(a) => add_into(&mut grads[a.0], zip_map(g, out, |g, o| -g * o * o)),
            Op::ClampMin(a, floor) => {
                let floor = *floor;
                add_into(
                    &mut grads[a.0],
                    zip_map(g, self.value(*a), |g, x| if x > floor { g } else { 0.0 }),
                );
            }
            Op::SoftmaxRows(a) => {
                let mut ga = Tensor::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let y = out.row_slice(r);
                    let gr = g.row_slice(r);
                    let s: f64 = y.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for (c, slot) in ga.row_slice_mut(r).iter_mut().enumerate() {
                        *slot = y[c] * (gr[c] - s);
                    }
                }
                add_into(&mut grads[a.0], ga);
            }
            Op::LogSumExpRows(a) => {
                let av = self.value(*a);
                let mut ga = Tensor::zeros(av.rows(), av.cols());
                for r in 0..av.rows() {
                    let lse = out.data()[r];
                    let gr = g.data()[r];
                    for (slot, x) in ga.row_slice_mut(r).iter_mut().zip(av.row_slice(r)) {
                        *slot = gr * (x - lse).exp();
                    }
                }
                add_into(&mut grads[a.0], ga);
            }
            Op::SumAll(a) => {
                let (r, c) = self.value(*a).shape();
                add_into(&mut grads[a.0], Tensor::filled(r, c, g.item()));
            }
            Op::SumCols(a) => {
                let (r, c) = self.value(*a).shape();
                let mut ga = Tensor::zeros(r, c);
                for row in 0..r {
                    ga.row_slice_mut(row).copy_from_slice(g.data());
                }
                add_into(&mut grads[a.0], ga);
            }
            Op::SumRows(a) => {
                let (r, c) = self.value(*a).shape();
                let mut ga = Tensor::zeros(r, c);
                for row in 0..r {
                    ga.row_slice_mut(row).fill(g.data()[row]);
                }
                add_into(&mut grads[a.0], ga);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    let keep: Vec<usize> = (offset..offset + w).collect();
                    add_into(&mut grads[p.0], g.select_cols(&keep));
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let h = self.value(*p).rows();
                    let keep: Vec<usize> = (offset..offset + h).collect();
                    add_into(&mut grads[p.0], g.select_rows(&keep));
                    offset += h;
                }
            }
            Op::GatherRows(a, idx) => {
                let (r, c) = self.value(*a).shape();
                let mut ga = Tensor::zeros(r, c);
                for (k, &src) in idx.iter().enumerate() {
                    for (slot, x) in ga.row_slice_mut(src).iter_mut().zip(g.row_slice(k)) {
                        *slot += x;
                    }
                }
                add_into(&mut grads[a.0], ga);
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.value(*a).shape();
                let mut ga = Tensor::zeros(r, c);
                for row in 0..r {
                    ga.row_slice_mut(row)[*start..*start + g.cols()]
                        .copy_from_slice(g.row_slice(row));
                }
                add_into(&mut grads[a.0], ga);
            }
            Op::SliceRows(a, start) => {
                let (r, c) = self.value(*a).shape();
                let mut ga = Tensor::zeros(r, c);
                ga.data_mut()[start * c..(start + g.rows()) * c].copy_from_slice(g.data());
                add_into(&mut grads[a.0], ga);
            }
            Op::Dot(a, b) => {
                let s = g.item();
                add_into(&mut grads[a.0], self.value(*b).map(|x| x * s));
                add_into(&mut grads[b.0], self.value(*a).map(|x| x * s));
            }
            Op::GaussLogPdf { x, mean, cov, inv } => {
                let xv = self.value(*x);
                let mv = self.value(*mean);
                let d = xv.cols();
                let mut gx = Tensor::zeros(xv.rows(), d);
                let mut gm = Tensor::zeros(1, d);
                let mut gc = Tensor::zeros(d, d);
                let mut diff = vec![0.0; d];
                let mut sol = vec![0.0; d];
                for r in 0..xv.rows() {
                    let gr = g.data()[r];
                    for (i, slot) in diff.iter_mut().enumerate() {
                        *slot = xv.get(r, i) - mv.data()[i];
                    }
                    for (i, slot) in sol.iter_mut().enumerate() {
                        *slot = (0..d).map(|j| inv.get(i, j) * diff[j]).sum();
                    }
                    for i in 0..d {
                        gx.set(r, i, -gr * sol[i]);
                        gm.data_mut()[i] += gr * sol[i];
                        for j in 0..d {
                            let v = gc.get(i, j) + 0.5 * gr * (sol[i] * sol[j] - inv.get(i, j));
                            gc.set(i, j, v);
                        }
                    }
                }
                add_into(&mut grads[x.0], gx);
                add_into(&mut grads[mean.0], gm);
                add_into(&mut grads[cov.0], gc);
            }
        }
        Ok(())
    }

    /// Parameter leaves recorded on this tape, in recording order.
    pub(crate) fn param_leaves(&self) -> impl Iterator<Item = (Var, ParamId)> + '_ {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match n.op {
            Op::Param(id) => Some((Var(i), id)),
            _ => None,
        })
    }
}

fn column_sums(g: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, x) in out.data_mut().iter_mut().zip(g.row_slice(r)) {
            *o += x;
        }
    }
    out
}

fn op_inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Constant | Op::Param(_) => vec![],
        Op::MatMul(a, b)
        | Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::Div(a, b)
        | Op::AddRow(a, b)
        | Op::SubRow(a, b)
        | Op::MulRow(a, b)
        | Op::AddCol(a, b)
        | Op::MulCol(a, b)
        | Op::Dot(a, b) => vec![*a, *b],
        Op::Transpose(a)
        | Op::Scale(a, _)
        | Op::AddScalar(a)
        | Op::Relu(a)
        | Op::Exp(a)
        | Op::Log(a)
        | Op::Square(a)
        | Op::Recip(a)
        | Op::ClampMin(a, _)
        | Op::SoftmaxRows(a)
        | Op::LogSumExpRows(a)
        | Op::SumAll(a)
        | Op::SumCols(a)
        | Op::SumRows(a)
        | Op::GatherRows(a, _)
        | Op::SliceCols(a, _)
        | Op::SliceRows(a, _) => vec![*a],
        Op::ConcatCols(parts) | Op::ConcatRows(parts) => parts.clone(),
        Op::GaussLogPdf { x, mean, cov, .. } => vec![*x, *mean, *cov],
    }
}

/// Numerically stable `log Σ exp(v)`.
pub fn logsumexp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}
