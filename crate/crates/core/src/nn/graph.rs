//! Tape-based reverse-mode differentiation over dense `f64` matrices.
//!
//! The op set is closed: every node is one of the [`Op`] variants below, so a graph
//! containing anything else cannot be built. Shape checks happen when a node is
//! added, not during the backward pass.

use ndarray::{s, Array2, Axis, Zip};

use crate::error::{shape_err, Error, Result};

pub type Tensor = Array2<f64>;

/// Inputs to `exp` are clamped to this value.
pub const EXP_CLAMP: f64 = 60.0;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    LogSumExp(Var),
    RowLogSumExp(Var),
    PairSum(Var, Var),
    Reshape(Var),
    Diagonal(Var),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    exp_clamps: usize,
}

/// Gradients of a scalar with respect to every node that influenced it.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn scalar(x: f64) -> Tensor {
    Array2::from_elem((1, 1), x)
}

fn dims(t: &Tensor) -> String {
    format!("{}x{}", t.nrows(), t.ncols())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of `exp` input entries that were clamped so far.
    pub fn exp_clamps(&self) -> usize {
        self.exp_clamps
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dim() != vb.dim() {
            return Err(shape_err(op, format!("{} vs {}", dims(va), dims(vb))));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(shape_err("matmul", format!("{} x {}", dims(va), dims(vb))));
        }
        let out = va.dot(vb);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a + b` where `b` is a single row broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if vb.nrows() != 1 || vb.ncols() != va.ncols() {
            return Err(shape_err("add_row", format!("{} + {}", dims(va), dims(vb))));
        }
        let out = va + vb;
        Ok(self.push(out, Op::AddRow(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a) + self.value(b);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a) - self.value(b);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a) * self.value(b);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        self.push(out, Op::Scale(a, c))
    }

    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) + c;
        self.push(out, Op::Shift(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    /// Elementwise `exp` with inputs clamped to [`EXP_CLAMP`].
    pub fn exp(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let clamped = va.iter().filter(|&&x| x > EXP_CLAMP).count();
        let out = va.mapv(|x| x.min(EXP_CLAMP).exp());
        if clamped > 0 {
            self.exp_clamps += clamped;
            log::trace!("exp clamped {clamped} entries");
        }
        self.push(out, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::ln);
        self.push(out, Op::Log(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(0.0) + (-x.abs()).exp().ln_1p());
        self.push(out, Op::Softplus(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::abs);
        self.push(out, Op::Abs(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.is_empty() {
            return Err(shape_err("mean", "empty input"));
        }
        let out = scalar(va.sum() / va.len() as f64);
        Ok(self.push(out, Op::Mean(a)))
    }

    /// `log(sum(exp(a)))` over all entries, shifted by the maximum.
    pub fn log_sum_exp(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.is_empty() {
            return Err(shape_err("log_sum_exp", "empty input"));
        }
        let out = scalar(lse(va.iter().copied()));
        Ok(self.push(out, Op::LogSumExp(a)))
    }

    /// Row-wise log-sum-exp: `n x m -> n x 1`.
    pub fn row_log_sum_exp(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.ncols() == 0 {
            return Err(shape_err("row_log_sum_exp", "no columns"));
        }
        let out: Vec<f64> = va.rows().into_iter().map(|r| lse(r.iter().copied())).collect();
        let out = Array2::from_shape_vec((va.nrows(), 1), out).expect("row count");
        Ok(self.push(out, Op::RowLogSumExp(a)))
    }

    /// All pairwise row sums: row `i * m + j` of the result is `a[i] + b[j]`.
    pub fn pair_sum(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.ncols() {
            return Err(shape_err("pair_sum", format!("{} vs {}", dims(va), dims(vb))));
        }
        let (n, m, h) = (va.nrows(), vb.nrows(), va.ncols());
        let (a_std, b_std) = (va.as_standard_layout(), vb.as_standard_layout());
        let (sa, sb) = (a_std.as_slice().expect("standard layout"), b_std.as_slice().expect("standard layout"));
        let mut flat = Vec::with_capacity(n * m * h);
        for ai in sa.chunks_exact(h.max(1)).take(n) {
            for bj in sb.chunks_exact(h.max(1)).take(m) {
                flat.extend(ai.iter().zip(bj).map(|(x, y)| x + y));
            }
        }
        let out = Array2::from_shape_vec((n * m, h), flat).expect("pair_sum length");
        Ok(self.push(out, Op::PairSum(a, b)))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let va = self.value(a);
        if va.len() != rows * cols {
            return Err(shape_err(
                "reshape",
                format!("{} into {rows}x{cols}", dims(va)),
            ));
        }
        let flat: Vec<f64> = va.iter().copied().collect();
        let out = Array2::from_shape_vec((rows, cols), flat).expect("checked length");
        Ok(self.push(out, Op::Reshape(a)))
    }

    /// Diagonal of a square matrix as a column.
    pub fn diagonal(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.nrows() != va.ncols() {
            return Err(shape_err("diagonal", format!("{} is not square", dims(va))));
        }
        let out = va.diag().to_owned().insert_axis(Axis(1));
        Ok(self.push(out, Op::Diagonal(a)))
    }

    /// Rows `start..end` of `a`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let va = self.value(a);
        if start > end || end > va.nrows() {
            return Err(shape_err(
                "slice_rows",
                format!("rows {start}..{end} of {}", dims(va)),
            ));
        }
        let out = va.slice(s![start..end, ..]).to_owned();
        Ok(self.push(out, Op::SliceRows(a, start)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat_cols", "no inputs"))?;
        let rows = self.value(*first).nrows();
        if let Some(bad) = parts.iter().find(|v| self.value(**v).nrows() != rows) {
            return Err(shape_err(
                "concat_cols",
                format!("{rows} rows vs {}", dims(self.value(*bad))),
            ));
        }
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).map_err(|e| shape_err("concat_cols", e.to_string()))?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    /// Mean squared difference between two same-shape nodes.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }

    /// Mean absolute difference between two same-shape nodes.
    pub fn mae(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let ad = self.abs(d);
        self.mean(ad)
    }

    /// Reverse pass from a 1x1 node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.dim() != (1, 1) {
            return Err(Error::Shape {
                op: "backward",
                detail: format!("loss must be 1x1, got {}", dims(lv)),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(scalar(1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let out = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddRow(a, b) => {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *b, gb);
                    accumulate(&mut grads, *a, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, -g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g * *c),
                Op::Shift(a) => accumulate(&mut grads, *a, g),
                Op::Relu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|g, &x| if x <= 0.0 { *g = 0.0 });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(out).for_each(|g, &y| *g *= 1.0 - y * y);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(out)
                        .and(self.value(*a))
                        .for_each(|g, &y, &x| *g = if x > EXP_CLAMP { 0.0 } else { *g * y });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Log(a) => {
                    let ga = g / self.value(*a);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Softplus(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|g, &x| *g *= sigmoid(x));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Abs(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|g, &x| {
                        *g *= if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let ga = Array2::from_elem(self.value(*a).dim(), g[[0, 0]]);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Mean(a) => {
                    let va = self.value(*a);
                    let ga = Array2::from_elem(va.dim(), g[[0, 0]] / va.len() as f64);
                    accumulate(&mut grads, *a, ga);
                }
                Op::LogSumExp(a) => {
                    let m = out[[0, 0]];
                    let scale = g[[0, 0]];
                    let ga = self.value(*a).mapv(|x| scale * (x - m).exp());
                    accumulate(&mut grads, *a, ga);
                }
                Op::RowLogSumExp(a) => {
                    let mut ga = self.value(*a).clone();
                    for (i, mut row) in ga.rows_mut().into_iter().enumerate() {
                        let (m, gi) = (out[[i, 0]], g[[i, 0]]);
                        row.mapv_inplace(|x| gi * (x - m).exp());
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::PairSum(a, b) => {
                    let (n, m) = (self.value(*a).nrows(), self.value(*b).nrows());
                    let h = g.ncols();
                    let mut ga = vec![0.0; n * h];
                    let mut gb = vec![0.0; m * h];
                    let g_std = g.as_standard_layout();
                    let rows = g_std.as_slice().expect("standard layout").chunks_exact(h.max(1));
                    for (k, row) in rows.enumerate().take(n * m) {
                        let (i, j) = (k / m, k % m);
                        for ((x, y), &v) in ga[i * h..(i + 1) * h].iter_mut().zip(&mut gb[j * h..(j + 1) * h]).zip(row) {
                            *x += v;
                            *y += v;
                        }
                    }
                    accumulate(&mut grads, *a, Array2::from_shape_vec((n, h), ga).expect("shape"));
                    accumulate(&mut grads, *b, Array2::from_shape_vec((m, h), gb).expect("shape"));
                }
                Op::Reshape(a) => {
                    let shape = self.value(*a).dim();
                    let flat: Vec<f64> = g.iter().copied().collect();
                    let ga = Array2::from_shape_vec(shape, flat).expect("same length");
                    accumulate(&mut grads, *a, ga);
                }
                Op::Diagonal(a) => {
                    let n = self.value(*a).nrows();
                    let mut ga = Array2::zeros((n, n));
                    for k in 0..n {
                        ga[[k, k]] = g[[k, 0]];
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SliceRows(a, start) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    ga.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut col = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        let gp = g.slice(s![.., col..col + w]).to_owned();
                        accumulate(&mut grads, *p, gp);
                        col += w;
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-shifted log-sum-exp of a sequence.
pub fn lse(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + values.map(|x| (x - m).exp()).sum::<f64>().ln()
}
