//! Dense matrix graph with two evaluators.
//!
//! Model code is written once against [`Graph`]. [`Eager`] evaluates it
//! directly (inference, finite differences); [`Tape`] records every op and
//! runs reverse-mode differentiation for the trainable parameters. Both
//! evaluators share the forward kernels in [`kernels`], so tape values are
//! bitwise equal to eager values.

use std::sync::Arc;

use ndarray::{concatenate, s, Array2, Axis};

pub type Mat = Array2<f64>;

pub trait Graph {
    type T: Clone;

    fn constant(&mut self, m: Arc<Mat>) -> Self::T;
    /// A leaf that gradients are tracked for. Eager evaluation treats it like a constant.
    fn param(&mut self, m: Arc<Mat>) -> Self::T {
        self.constant(m)
    }
    fn value<'a>(&'a self, t: &'a Self::T) -> &'a Mat;

    fn matmul(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
    /// `a · bᵀ`
    fn matmul_nt(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
    fn add(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
    /// Adds a `1 × m` row (or `1 × 1` scalar) to every row.
    fn add_row(&mut self, a: &Self::T, row: &Self::T) -> Self::T;
    fn mul_row(&mut self, a: &Self::T, row: &Self::T) -> Self::T;
    fn scale(&mut self, a: &Self::T, c: f64) -> Self::T;
    /// Divides every entry by the `1 × 1` value `s`.
    fn div_scalar(&mut self, a: &Self::T, s: &Self::T) -> Self::T;
    fn softmax_rows(&mut self, a: &Self::T, causal: bool) -> Self::T;
    fn log_softmax_rows(&mut self, a: &Self::T) -> Self::T;
    fn rms_norm(&mut self, a: &Self::T, eps: f64) -> Self::T;
    fn silu(&mut self, a: &Self::T) -> Self::T;
    fn leaky_relu(&mut self, a: &Self::T, slope: f64) -> Self::T;
    fn vstack(&mut self, parts: &[Self::T]) -> Self::T;
    fn slice_rows(&mut self, a: &Self::T, start: usize, len: usize) -> Self::T;
    fn transpose(&mut self, a: &Self::T) -> Self::T;
    /// Column sums as a `1 × m` row.
    fn sum_rows(&mut self, a: &Self::T) -> Self::T;
    fn sum_all(&mut self, a: &Self::T) -> Self::T;
    /// Picks the listed `(row, col)` entries into a `1 × len` row.
    fn gather(&mut self, a: &Self::T, idx: &[(usize, usize)]) -> Self::T;
    /// `log Σ exp` over every entry, as `1 × 1`.
    fn logsumexp(&mut self, a: &Self::T) -> Self::T;

    fn scalar(&self, t: &Self::T) -> f64 {
        self.value(t)[[0, 0]]
    }
}

pub mod kernels {
    use super::*;

    pub fn softmax_rows(a: &Mat, causal: bool) -> Mat {
        let mut out = Mat::zeros(a.raw_dim());
        for (i, (row, mut dst)) in a.rows().into_iter().zip(out.rows_mut()).enumerate() {
            let width = if causal { (i + 1).min(row.len()) } else { row.len() };
            let live = row.slice(s![..width]);
            let max = live.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (j, &x) in live.iter().enumerate() {
                let e = (x - max).exp();
                dst[j] = e;
                total += e;
            }
            dst.slice_mut(s![..width]).mapv_inplace(|e| e / total);
        }
        out
    }

    pub fn log_softmax_rows(a: &Mat) -> Mat {
        let mut out = a.clone();
        for mut row in out.rows_mut() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        out
    }

    pub fn rms(a: &Mat, eps: f64) -> Vec<f64> {
        a.rows()
            .into_iter()
            .map(|r| (r.iter().map(|x| x * x).sum::<f64>() / r.len() as f64 + eps).sqrt())
            .collect()
    }

    pub fn rms_norm(a: &Mat, eps: f64) -> Mat {
        let r = rms(a, eps);
        let mut out = a.clone();
        for (mut row, ri) in out.rows_mut().into_iter().zip(r) {
            row.mapv_inplace(|x| x / ri);
        }
        out
    }

    pub fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    pub fn logsumexp(a: &Mat) -> f64 {
        let max = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return max;
        }
        max + a.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
    }

    pub fn gather(a: &Mat, idx: &[(usize, usize)]) -> Mat {
        Mat::from_shape_fn((1, idx.len()), |(_, k)| a[idx[k]])
    }

    pub fn vstack(parts: &[&Mat]) -> Mat {
        let views: Vec<_> = parts.iter().map(|m| m.view()).collect();
        concatenate(Axis(0), &views).expect("vstack: column count mismatch")
    }
}

/// Direct evaluation; handles are shared matrices.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eager;

impl Graph for Eager {
    type T = Arc<Mat>;

    fn constant(&mut self, m: Arc<Mat>) -> Arc<Mat> {
        m
    }
    fn value<'a>(&'a self, t: &'a Arc<Mat>) -> &'a Mat {
        t
    }
    fn matmul(&mut self, a: &Arc<Mat>, b: &Arc<Mat>) -> Arc<Mat> {
        Arc::new(a.dot(&**b))
    }
    fn matmul_nt(&mut self, a: &Arc<Mat>, b: &Arc<Mat>) -> Arc<Mat> {
        Arc::new(a.dot(&b.t()))
    }
    fn add(&mut self, a: &Arc<Mat>, b: &Arc<Mat>) -> Arc<Mat> {
        Arc::new(&**a + &**b)
    }
    fn add_row(&mut self, a: &Arc<Mat>, row: &Arc<Mat>) -> Arc<Mat> {
        Arc::new(&**a + &**row)
    }
    fn mul_row(&mut self, a: &Arc<Mat>, row: &Arc<Mat>) -> Arc<Mat> {
        Arc::new(&**a * &**row)
    }
    fn scale(&mut self, a: &Arc<Mat>, c: f64) -> Arc<Mat> {
        Arc::new(&**a * c)
    }
    fn div_scalar(&mut self, a: &Arc<Mat>, s: &Arc<Mat>) -> Arc<Mat> {
        Arc::new(&**a / s[[0, 0]])
    }
    fn softmax_rows(&mut self, a: &Arc<Mat>, causal: bool) -> Arc<Mat> {
        Arc::new(kernels::softmax_rows(a, causal))
    }
    fn log_softmax_rows(&mut self, a: &Arc<Mat>) -> Arc<Mat> {
        Arc::new(kernels::log_softmax_rows(a))
    }
    fn rms_norm(&mut self, a: &Arc<Mat>, eps: f64) -> Arc<Mat> {
        Arc::new(kernels::rms_norm(a, eps))
    }
    fn silu(&mut self, a: &Arc<Mat>) -> Arc<Mat> {
        Arc::new(a.mapv(|x| x * kernels::sigmoid(x)))
    }
    fn leaky_relu(&mut self, a: &Arc<Mat>, slope: f64) -> Arc<Mat> {
        Arc::new(a.mapv(|x| if x >= 0.0 { x } else { slope * x }))
    }
    fn vstack(&mut self, parts: &[Arc<Mat>]) -> Arc<Mat> {
        let refs: Vec<&Mat> = parts.iter().map(|p| &**p).collect();
        Arc::new(kernels::vstack(&refs))
    }
    fn slice_rows(&mut self, a: &Arc<Mat>, start: usize, len: usize) -> Arc<Mat> {
        Arc::new(a.slice(s![start..start + len, ..]).to_owned())
    }
    fn transpose(&mut self, a: &Arc<Mat>) -> Arc<Mat> {
        Arc::new(a.t().to_owned())
    }
    fn sum_rows(&mut self, a: &Arc<Mat>) -> Arc<Mat> {
        Arc::new(a.sum_axis(Axis(0)).insert_axis(Axis(0)))
    }
    fn sum_all(&mut self, a: &Arc<Mat>) -> Arc<Mat> {
        Arc::new(Mat::from_elem((1, 1), a.sum()))
    }
    fn gather(&mut self, a: &Arc<Mat>, idx: &[(usize, usize)]) -> Arc<Mat> {
        Arc::new(kernels::gather(a, idx))
    }
    fn logsumexp(&mut self, a: &Arc<Mat>) -> Arc<Mat> {
        Arc::new(Mat::from_elem((1, 1), kernels::logsumexp(a)))
    }
}

/// Handle into a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, f64),
    DivScalar(usize, usize),
    Softmax(usize),
    LogSoftmax(usize),
    RmsNorm(usize, f64),
    Silu(usize),
    LeakyRelu(usize, f64),
    VStack(Vec<usize>),
    SliceRows(usize, usize),
    Transpose(usize),
    SumRows(usize),
    SumAll(usize),
    Gather(usize, Vec<(usize, usize)>),
    LogSumExp(usize),
}

#[derive(Debug)]
struct Node {
    value: Arc<Mat>,
    op: Op,
    tracked: bool,
}

/// Reverse-mode recorder.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every tracked node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, like: &Mat) -> Mat {
        self.get(v).cloned().unwrap_or_else(|| Mat::zeros(like.raw_dim()))
    }
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

    fn push(&mut self, value: Mat, op: Op) -> Var {
        let tracked = match &op {
            Op::Leaf => false,
            Op::VStack(parts) => parts.iter().any(|&p| self.nodes[p].tracked),
            other => other.inputs().iter().any(|&i| self.nodes[i].tracked),
        };
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Backpropagates from a `1 × 1` node.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::ones(self.nodes[loss.0].value.raw_dim()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let y = &*node.value;
            let mut send = |target: usize, delta: Mat| {
                if !self.nodes[target].tracked {
                    return;
                }
                match &mut grads[target] {
                    Some(acc) => *acc += &delta,
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    send(*a, g.dot(&self.nodes[*b].value.t()));
                    send(*b, self.nodes[*a].value.t().dot(&g));
                }
                Op::MatMulNt(a, b) => {
                    send(*a, g.dot(&*self.nodes[*b].value));
                    send(*b, g.t().dot(&*self.nodes[*a].value));
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::AddRow(a, row) => {
                    let r = &self.nodes[*row].value;
                    let mut gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    if r.ncols() == 1 && gr.ncols() != 1 {
                        gr = Mat::from_elem((1, 1), gr.sum());
                    }
                    send(*row, gr);
                    send(*a, g);
                }
                Op::MulRow(a, row) => {
                    let r = &*self.nodes[*row].value;
                    let x = &*self.nodes[*a].value;
                    send(*row, (&g * x).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    send(*a, &g * r);
                }
                Op::Scale(a, c) => send(*a, &g * *c),
                Op::DivScalar(a, s) => {
                    let sv = self.nodes[*s].value[[0, 0]];
                    let x = &*self.nodes[*a].value;
                    let gs = -(&g * x).sum() / (sv * sv);
                    send(*s, Mat::from_elem((1, 1), gs));
                    send(*a, &g / sv);
                }
                Op::Softmax(a) => {
                    let mut ga = Mat::zeros(y.raw_dim());
                    for ((gy, yr), mut out) in g.rows().into_iter().zip(y.rows()).zip(ga.rows_mut()) {
                        let dot: f64 = gy.iter().zip(yr.iter()).map(|(p, q)| p * q).sum();
                        for j in 0..yr.len() {
                            out[j] = yr[j] * (gy[j] - dot);
                        }
                    }
                    send(*a, ga);
                }
                Op::LogSoftmax(a) => {
                    let mut ga = g.clone();
                    for ((gy, yr), mut out) in g.rows().into_iter().zip(y.rows()).zip(ga.rows_mut()) {
                        let total: f64 = gy.sum();
                        for j in 0..yr.len() {
                            out[j] = gy[j] - yr[j].exp() * total;
                        }
                    }
                    send(*a, ga);
                }
                Op::RmsNorm(a, eps) => {
                    let x = &*self.nodes[*a].value;
                    let r = kernels::rms(x, *eps);
                    let mut ga = Mat::zeros(y.raw_dim());
                    for (k, ((gy, yr), mut out)) in g
                        .rows()
                        .into_iter()
                        .zip(y.rows())
                        .zip(ga.rows_mut())
                        .enumerate()
                    {
                        let n = yr.len() as f64;
                        let m: f64 = gy.iter().zip(yr.iter()).map(|(p, q)| p * q).sum::<f64>() / n;
                        for j in 0..yr.len() {
                            out[j] = (gy[j] - yr[j] * m) / r[k];
                        }
                    }
                    send(*a, ga);
                }
                Op::Silu(a) => {
                    let x = &*self.nodes[*a].value;
                    let mut ga = g.clone();
                    ga.zip_mut_with(x, |gv, &xv| {
                        let sg = kernels::sigmoid(xv);
                        *gv *= sg * (1.0 + xv * (1.0 - sg));
                    });
                    send(*a, ga);
                }
                Op::LeakyRelu(a, slope) => {
                    let x = &*self.nodes[*a].value;
                    let mut ga = g.clone();
                    ga.zip_mut_with(x, |gv, &xv| {
                        if xv < 0.0 {
                            *gv *= *slope;
                        }
                    });
                    send(*a, ga);
                }
                Op::VStack(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let rows = self.nodes[p].value.nrows();
                        send(p, g.slice(s![start..start + rows, ..]).to_owned());
                        start += rows;
                    }
                }
                Op::SliceRows(a, start) => {
                    let x = &*self.nodes[*a].value;
                    let mut ga = Mat::zeros(x.raw_dim());
                    ga.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    send(*a, ga);
                }
                Op::Transpose(a) => send(*a, g.t().to_owned()),
                Op::SumRows(a) => {
                    let x = &*self.nodes[*a].value;
                    let ga = Mat::from_shape_fn(x.raw_dim(), |(_, j)| g[[0, j]]);
                    send(*a, ga);
                }
                Op::SumAll(a) => {
                    let x = &*self.nodes[*a].value;
                    send(*a, Mat::from_elem(x.raw_dim(), g[[0, 0]]));
                }
                Op::Gather(a, idx) => {
                    let x = &*self.nodes[*a].value;
                    let mut ga = Mat::zeros(x.raw_dim());
                    for (k, &pos) in idx.iter().enumerate() {
                        ga[pos] += g[[0, k]];
                    }
                    send(*a, ga);
                }
                Op::LogSumExp(a) => {
                    let x = &*self.nodes[*a].value;
                    let lse = y[[0, 0]];
                    let g0 = g[[0, 0]];
                    send(*a, x.mapv(|v| g0 * (v - lse).exp()));
                }
            }
        }
        Gradients { grads }
    }
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatMulNt(a, b)
            | Op::Add(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::DivScalar(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::RmsNorm(a, _)
            | Op::Silu(a)
            | Op::LeakyRelu(a, _)
            | Op::SliceRows(a, _)
            | Op::Transpose(a)
            | Op::SumRows(a)
            | Op::SumAll(a)
            | Op::Gather(a, _)
            | Op::LogSumExp(a) => vec![*a],
            Op::VStack(parts) => parts.clone(),
        }
    }
}

impl Graph for Tape {
    type T = Var;

    fn constant(&mut self, m: Arc<Mat>) -> Var {
        self.nodes.push(Node {
            value: m,
            op: Op::Leaf,
            tracked: false,
        });
        Var(self.nodes.len() - 1)
    }
    fn param(&mut self, m: Arc<Mat>) -> Var {
        self.nodes.push(Node {
            value: m,
            op: Op::Leaf,
            tracked: true,
        });
        Var(self.nodes.len() - 1)
    }
    fn value<'a>(&'a self, t: &'a Var) -> &'a Mat {
        self.val(*t)
    }
    fn matmul(&mut self, a: &Var, b: &Var) -> Var {
        let v = self.val(*a).dot(self.val(*b));
        self.push(v, Op::MatMul(a.0, b.0))
    }
    fn matmul_nt(&mut self, a: &Var, b: &Var) -> Var {
        let v = self.val(*a).dot(&self.val(*b).t());
        self.push(v, Op::MatMulNt(a.0, b.0))
    }
    fn add(&mut self, a: &Var, b: &Var) -> Var {
        let v = self.val(*a) + self.val(*b);
        self.push(v, Op::Add(a.0, b.0))
    }
    fn add_row(&mut self, a: &Var, row: &Var) -> Var {
        let v = self.val(*a) + self.val(*row);
        self.push(v, Op::AddRow(a.0, row.0))
    }
    fn mul_row(&mut self, a: &Var, row: &Var) -> Var {
        let v = self.val(*a) * self.val(*row);
        self.push(v, Op::MulRow(a.0, row.0))
    }
    fn scale(&mut self, a: &Var, c: f64) -> Var {
        let v = self.val(*a) * c;
        self.push(v, Op::Scale(a.0, c))
    }
    fn div_scalar(&mut self, a: &Var, s: &Var) -> Var {
        let v = self.val(*a) / self.val(*s)[[0, 0]];
        self.push(v, Op::DivScalar(a.0, s.0))
    }
    fn softmax_rows(&mut self, a: &Var, causal: bool) -> Var {
        let v = kernels::softmax_rows(self.val(*a), causal);
        self.push(v, Op::Softmax(a.0))
    }
    fn log_softmax_rows(&mut self, a: &Var) -> Var {
        let v = kernels::log_softmax_rows(self.val(*a));
        self.push(v, Op::LogSoftmax(a.0))
    }
    fn rms_norm(&mut self, a: &Var, eps: f64) -> Var {
        let v = kernels::rms_norm(self.val(*a), eps);
        self.push(v, Op::RmsNorm(a.0, eps))
    }
    fn silu(&mut self, a: &Var) -> Var {
        let v = self.val(*a).mapv(|x| x * kernels::sigmoid(x));
        self.push(v, Op::Silu(a.0))
    }
    fn leaky_relu(&mut self, a: &Var, slope: f64) -> Var {
        let v = self.val(*a).mapv(|x| if x >= 0.0 { x } else { slope * x });
        self.push(v, Op::LeakyRelu(a.0, slope))
    }
    fn vstack(&mut self, parts: &[Var]) -> Var {
        let refs: Vec<&Mat> = parts.iter().map(|p| self.val(*p)).collect();
        let v = kernels::vstack(&refs);
        self.push(v, Op::VStack(parts.iter().map(|p| p.0).collect()))
    }
    fn slice_rows(&mut self, a: &Var, start: usize, len: usize) -> Var {
        let v = self.val(*a).slice(s![start..start + len, ..]).to_owned();
        self.push(v, Op::SliceRows(a.0, start))
    }
    fn transpose(&mut self, a: &Var) -> Var {
        let v = self.val(*a).t().to_owned();
        self.push(v, Op::Transpose(a.0))
    }
    fn sum_rows(&mut self, a: &Var) -> Var {
        let v = self.val(*a).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(v, Op::SumRows(a.0))
    }
    fn sum_all(&mut self, a: &Var) -> Var {
        let v = Mat::from_elem((1, 1), self.val(*a).sum());
        self.push(v, Op::SumAll(a.0))
    }
    fn gather(&mut self, a: &Var, idx: &[(usize, usize)]) -> Var {
        let v = kernels::gather(self.val(*a), idx);
        self.push(v, Op::Gather(a.0, idx.to_vec()))
    }
    fn logsumexp(&mut self, a: &Var) -> Var {
        let v = Mat::from_elem((1, 1), kernels::logsumexp(self.val(*a)));
        self.push(v, Op::LogSumExp(a.0))
    }
}

/// Wraps a slice as a `1 × n` row.
pub fn row(values: &[f64]) -> Mat {
    Mat::from_shape_vec((1, values.len()), values.to_vec()).expect("row shape")
}

/// Stacks equal-length slices into a matrix.
pub fn stack_rows<R: AsRef<[f64]>>(rows: &[R], cols: usize) -> Mat {
    let mut m = Mat::zeros((rows.len(), cols));
    for (i, r) in rows.iter().enumerate() {
        for (j, v) in r.as_ref().iter().enumerate() {
            m[[i, j]] = *v;
        }
    }
    m
}
