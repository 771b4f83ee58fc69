//! Minimal reverse-mode automatic differentiation over 2-D `f64` matrices.
//!
//! Every operation appends a node to a [`Tape`]; [`Tape::backward`] walks the
//! tape in reverse and accumulates gradients for nodes that depend on a
//! trainable leaf. Evaluation order is fixed, so results are bitwise
//! reproducible for a given sequence of calls.

use ndarray::{s, Array2, Axis};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Array2<f64>),
    ScaleRows(Var, Vec<f64>),
    OuterConst(Vec<f64>, Var),
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, xhat: Array2<f64>, rstd: Vec<f64> },
    L2NormRows { x: Var, norms: Vec<f64> },
    NormCols { x: Var, norms: Vec<f64> },
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    Transpose(Var),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn row_vec(v: Vec<f64>) -> Array2<f64> {
    let n = v.len();
    Array2::from_shape_vec((1, n), v).expect("row shape")
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMulT(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) + self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::AddRow(a, row), rg)
    }

    /// Multiplies every row of `a` element-wise by a `1×n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) * self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::MulRow(a, row), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) * k;
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, k), rg)
    }

    pub fn mul_const(&mut self, a: Var, c: Array2<f64>) -> Var {
        assert_eq!(self.value(a).dim(), c.dim(), "mul_const shape");
        let value = self.value(a) * &c;
        let rg = self.rg(a);
        self.push(value, Op::MulConst(a, c), rg)
    }

    /// Row `i` of `a` multiplied by `c[i]`.
    pub fn scale_rows(&mut self, a: Var, c: Vec<f64>) -> Var {
        let mut value = self.value(a).clone();
        assert_eq!(value.nrows(), c.len(), "scale_rows length");
        for (mut r, &k) in value.rows_mut().into_iter().zip(&c) {
            r *= k;
        }
        let rg = self.rg(a);
        self.push(value, Op::ScaleRows(a, c), rg)
    }

    /// Outer product of a constant column `c` with a `1×d` row variable.
    pub fn outer_const(&mut self, c: Vec<f64>, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.nrows(), 1, "outer_const expects a row");
        let d = r.ncols();
        let mut value = Array2::zeros((c.len(), d));
        for (mut out, &k) in value.rows_mut().into_iter().zip(&c) {
            out.assign(&(&r.row(0) * k));
        }
        let rg = self.rg(row);
        self.push(value, Op::OuterConst(c, row), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .mapv(|x| 0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh()));
        let rg = self.rg(a);
        self.push(value, Op::Gelu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        let rg = self.rg(a);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid(a), rg)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut r in value.rows_mut() {
            let m = r.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            r.mapv_inplace(|x| (x - m).exp());
            let z = r.sum();
            r /= z;
        }
        let rg = self.rg(a);
        self.push(value, Op::Softmax(a), rg)
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut r in value.rows_mut() {
            let m = r.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = m + r.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            r.mapv_inplace(|x| x - lse);
        }
        let rg = self.rg(a);
        self.push(value, Op::LogSoftmax(a), rg)
    }

    /// Row-wise standardisation (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let n = x.ncols() as f64;
        let mut xhat = x.clone();
        let mut rstd = Vec::with_capacity(x.nrows());
        for mut r in xhat.rows_mut() {
            let mean = r.sum() / n;
            let var = r.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let rs = 1.0 / (var + eps).sqrt();
            r.mapv_inplace(|v| (v - mean) * rs);
            rstd.push(rs);
        }
        let rg = self.rg(a);
        self.push(
            xhat.clone(),
            Op::LayerNorm { x: a, xhat, rstd },
            rg,
        )
    }

    /// Scales each row to unit Euclidean norm (norm floored at `eps`).
    pub fn l2_normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let mut value = self.value(a).clone();
        let mut norms = Vec::with_capacity(value.nrows());
        for mut r in value.rows_mut() {
            let nrm = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
            r /= nrm;
            norms.push(nrm);
        }
        let rg = self.rg(a);
        self.push(value, Op::L2NormRows { x: a, norms }, rg)
    }

    /// Scales each column to unit Euclidean norm (weight normalisation, g = 1).
    pub fn normalize_cols(&mut self, a: Var, eps: f64) -> Var {
        let mut value = self.value(a).clone();
        let mut norms = Vec::with_capacity(value.ncols());
        for mut c in value.columns_mut() {
            let nrm = c.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
            c /= nrm;
            norms.push(nrm);
        }
        let rg = self.rg(a);
        self.push(value, Op::NormCols { x: a, norms }, rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![start..start + len, ..]).to_owned();
        let rg = self.rg(a);
        self.push(value, Op::SliceRows(a, start), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        let rg = self.rg(a);
        self.push(value, Op::SliceCols(a, start), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows shapes");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols shapes");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let value = self.value(a).select(Axis(0), idx);
        let rg = self.rg(a);
        self.push(value, Op::GatherRows(a, idx.to_vec()), rg)
    }

    /// Sum of all elements as a `1×1` matrix.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    /// Reverse pass from a scalar (`1×1`) node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let mut acc = |v: Var, d: Array2<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &d,
                slot => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.dot(&self.value(*b).t()));
                }
                if self.rg(*b) {
                    acc(*b, self.value(*a).t().dot(g));
                }
            }
            Op::MatMulT(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.dot(self.value(*b)));
                }
                if self.rg(*b) {
                    acc(*b, g.t().dot(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                if self.rg(*row) {
                    acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(a, row) => {
                if self.rg(*a) {
                    acc(*a, g * self.value(*row));
                }
                if self.rg(*row) {
                    let prod = g * self.value(*a);
                    acc(*row, prod.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g * self.value(*b));
                }
                if self.rg(*b) {
                    acc(*b, g * self.value(*a));
                }
            }
            Op::Scale(a, k) => acc(*a, g * *k),
            Op::MulConst(a, c) => acc(*a, g * c),
            Op::ScaleRows(a, c) => {
                let mut d = g.clone();
                for (mut r, &k) in d.rows_mut().into_iter().zip(c) {
                    r *= k;
                }
                acc(*a, d);
            }
            Op::OuterConst(c, row) => {
                let mut d = Array2::zeros((1, g.ncols()));
                for (r, &k) in g.rows().into_iter().zip(c) {
                    d.row_mut(0).scaled_add(k, &r);
                }
                acc(*row, d);
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let mut d = g.clone();
                ndarray::Zip::from(&mut d).and(x).for_each(|d, &x| {
                    let u = GELU_K * (x + GELU_C * x * x * x);
                    let t = u.tanh();
                    let du = GELU_K * (1.0 + 3.0 * GELU_C * x * x);
                    *d *= 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
                });
                acc(*a, d);
            }
            Op::Tanh(a) => {
                let y = &node.value;
                let mut d = g.clone();
                ndarray::Zip::from(&mut d).and(y).for_each(|d, &y| *d *= 1.0 - y * y);
                acc(*a, d);
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let mut d = g.clone();
                ndarray::Zip::from(&mut d).and(y).for_each(|d, &y| *d *= y * (1.0 - y));
                acc(*a, d);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut d = g * y;
                for (mut dr, yr) in d.rows_mut().into_iter().zip(y.rows()) {
                    let s = dr.sum();
                    dr.scaled_add(-s, &yr);
                }
                acc(*a, d);
            }
            Op::LogSoftmax(a) => {
                let y = &node.value;
                let mut d = g.clone();
                for ((mut dr, yr), gr) in d.rows_mut().into_iter().zip(y.rows()).zip(g.rows()) {
                    let s = gr.sum();
                    ndarray::Zip::from(&mut dr)
                        .and(&yr)
                        .for_each(|d, &y| *d -= y.exp() * s);
                }
                acc(*a, d);
            }
            Op::LayerNorm { x, xhat, rstd } => {
                let n = xhat.ncols() as f64;
                let mut d = g.clone();
                for ((mut dr, xr), &rs) in d.rows_mut().into_iter().zip(xhat.rows()).zip(rstd) {
                    let sum_g = dr.sum();
                    let sum_gx = dr.iter().zip(xr.iter()).map(|(a, b)| a * b).sum::<f64>();
                    ndarray::Zip::from(&mut dr).and(&xr).for_each(|d, &xh| {
                        *d = rs / n * (n * *d - sum_g - xh * sum_gx);
                    });
                }
                acc(*x, d);
            }
            Op::L2NormRows { x, norms } => {
                let y = &node.value;
                let mut d = g.clone();
                for ((mut dr, yr), &nrm) in d.rows_mut().into_iter().zip(y.rows()).zip(norms) {
                    let dot = dr.iter().zip(yr.iter()).map(|(a, b)| a * b).sum::<f64>();
                    dr.scaled_add(-dot, &yr);
                    dr /= nrm;
                }
                acc(*x, d);
            }
            Op::NormCols { x, norms } => {
                let y = &node.value;
                let mut d = g.clone();
                for ((mut dc, yc), &nrm) in d
                    .columns_mut()
                    .into_iter()
                    .zip(y.columns())
                    .zip(norms)
                {
                    let dot = dc.iter().zip(yc.iter()).map(|(a, b)| a * b).sum::<f64>();
                    dc.scaled_add(-dot, &yc);
                    dc /= nrm;
                }
                acc(*x, d);
            }
            Op::SliceRows(a, start) => {
                let mut d = Array2::zeros(self.value(*a).dim());
                d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                acc(*a, d);
            }
            Op::SliceCols(a, start) => {
                let mut d = Array2::zeros(self.value(*a).dim());
                d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                acc(*a, d);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).nrows();
                    if self.rg(p) {
                        acc(p, g.slice(s![off..off + n, ..]).to_owned());
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).ncols();
                    if self.rg(p) {
                        acc(p, g.slice(s![.., off..off + n]).to_owned());
                    }
                    off += n;
                }
            }
            Op::GatherRows(a, idx) => {
                let mut d = Array2::zeros(self.value(*a).dim());
                for (r, &i) in g.rows().into_iter().zip(idx) {
                    d.row_mut(i).scaled_add(1.0, &r);
                }
                acc(*a, d);
            }
            Op::Sum(a) => {
                let k = g[[0, 0]];
                acc(*a, Array2::from_elem(self.value(*a).dim(), k));
            }
            Op::Transpose(a) => acc(*a, g.t().to_owned()),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Convenience for building a `1×n` row from a slice.
pub fn row(values: &[f64]) -> Array2<f64> {
    row_vec(values.to_vec())
}
