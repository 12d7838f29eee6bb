//! A small reverse-mode automatic differentiation tape over dense `f64`
//! matrices.
//!
//! Every value in the graph is a 2-D array. Vectors are `1×n` rows, scalars
//! are `1×1`. The graph is append-only: each operation pushes a node that
//! records its parents, and [`Graph::backward`] walks the tape in reverse.
//!
//! Frozen weights enter through [`Graph::constant`] and never accumulate
//! gradients. Trainable tensors enter through [`Graph::param`].

use std::sync::Arc;

use ndarray::{s, Array2, Axis};

pub type Tensor = Array2<f64>;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    /// tanh approximation of GELU.
    Gelu,
    /// `x * sigmoid(1.702 x)`, used by the original CLIP weights.
    QuickGelu,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Activate(Var, Activation),
    Standardize { x: Var, inv_std: Vec<f64> },
    SoftmaxRows(Var),
    LogClamped(Var, f64),
    Powf(Var, f64),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    NormalizeRowsSum { x: Var, sums: Vec<f64> },
    Bilinear { x: Var, plan: Arc<BilinearPlan> },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Sparse plan for bilinear resampling of a row-major `src_h×src_w` grid
/// (one row per position, one column per channel) onto `dst_h×dst_w`.
///
/// Uses half-pixel centres with edge clamping.
#[derive(Debug, Clone)]
pub struct BilinearPlan {
    pub src: (usize, usize),
    pub dst: (usize, usize),
    taps: Vec<[(usize, f64); 4]>,
}

impl BilinearPlan {
    pub fn new(src: (usize, usize), dst: (usize, usize)) -> Self {
        let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
            (0..out)
                .map(|o| {
                    let pos = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5)
                        .clamp(0.0, (inp - 1) as f64);
                    let lo = pos.floor() as usize;
                    let hi = (lo + 1).min(inp - 1);
                    (lo, hi, pos - lo as f64)
                })
                .collect()
        };
        let ys = axis(dst.0, src.0);
        let xs = axis(dst.1, src.1);
        let mut taps = Vec::with_capacity(dst.0 * dst.1);
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                taps.push([
                    (y0 * src.1 + x0, (1.0 - fy) * (1.0 - fx)),
                    (y0 * src.1 + x1, (1.0 - fy) * fx),
                    (y1 * src.1 + x0, fy * (1.0 - fx)),
                    (y1 * src.1 + x1, fy * fx),
                ]);
            }
        }
        Self { src, dst, taps }
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        let mut out = Tensor::zeros((self.taps.len(), x.ncols()));
        for (mut row, taps) in out.rows_mut().into_iter().zip(&self.taps) {
            for &(i, w) in taps {
                if w != 0.0 {
                    row.scaled_add(w, &x.row(i));
                }
            }
        }
        out
    }

    fn apply_transpose(&self, g: &Tensor) -> Tensor {
        let mut out = Tensor::zeros((self.src.0 * self.src.1, g.ncols()));
        for (row, taps) in g.rows().into_iter().zip(&self.taps) {
            for &(i, w) in taps {
                if w != 0.0 {
                    out.row_mut(i).scaled_add(w, &row);
                }
            }
        }
        out
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_of(&self, parents: &[Var]) -> bool {
        parents.iter().any(|p| self.nodes[p.0].requires_grad)
    }

    /// A frozen input: shares storage, never receives a gradient.
    pub fn constant(&mut self, value: Arc<Tensor>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable leaf. Its gradient is available after `backward`.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shared_value(&self, v: Var) -> Arc<Tensor> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.grad_of(&[a, b]);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        let rg = self.grad_of(&[a]);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let rg = self.grad_of(&[a, b]);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let rg = self.grad_of(&[a, b]);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let rg = self.grad_of(&[a, b]);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) / self.value(b);
        let rg = self.grad_of(&[a, b]);
        self.push(value, Op::Div(a, b), rg)
    }

    /// `a + row`, broadcasting a `1×m` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) + self.value(row);
        let rg = self.grad_of(&[a, row]);
        self.push(value, Op::AddRow(a, row), rg)
    }

    /// `a ⊙ row`, broadcasting a `1×m` row over every row of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) * self.value(row);
        let rg = self.grad_of(&[a, row]);
        self.push(value, Op::MulRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) * k;
        let rg = self.grad_of(&[a]);
        self.push(value, Op::Scale(a, k), rg)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) + k;
        let rg = self.grad_of(&[a]);
        self.push(value, Op::AddScalar(a), rg)
    }

    pub fn activate(&mut self, a: Var, act: Activation) -> Var {
        let value = self.value(a).mapv(|x| match act {
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
            Activation::QuickGelu => x * sigmoid(1.702 * x),
        });
        let rg = self.grad_of(&[a]);
        self.push(value, Op::Activate(a, act), rg)
    }

    /// Per-row zero mean, unit variance (biased variance, `eps` inside the root).
    pub fn standardize(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let cols = x.ncols() as f64;
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in out.rows_mut() {
            let mean = row.sum() / cols;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / cols;
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| v * inv);
            inv_std.push(inv);
        }
        let rg = self.grad_of(&[a]);
        self.push(out, Op::Standardize { x: a, inv_std }, rg)
    }

    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let z = self.standardize(a, eps);
        let z = self.mul_row(z, gain);
        self.add_row(z, bias)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        let rg = self.grad_of(&[a]);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log_clamped(&mut self, a: Var, floor: f64) -> Var {
        let value = self.value(a).mapv(|x| x.max(floor).ln());
        let rg = self.grad_of(&[a]);
        self.push(value, Op::LogClamped(a, floor), rg)
    }

    /// Elementwise `x^p` for non-negative `x`.
    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0).powf(p));
        let rg = self.grad_of(&[a]);
        self.push(value, Op::Powf(a, p), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![start..end, ..]).to_owned();
        let rg = self.grad_of(&[a]);
        self.push(value, Op::SliceRows(a, start), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        let rg = self.grad_of(&[a]);
        self.push(value, Op::SliceCols(a, start), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        let rg = self.grad_of(parts);
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        let rg = self.grad_of(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::from_elem((1, 1), self.value(a).sum());
        let rg = self.grad_of(&[a]);
        self.push(value, Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Column sums, `n×m → 1×m`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        let rg = self.grad_of(&[a]);
        self.push(value, Op::SumRows(a), rg)
    }

    /// Row sums, `n×m → n×1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let rg = self.grad_of(&[a]);
        self.push(value, Op::SumCols(a), rg)
    }

    /// Scales each row to unit Euclidean norm. All-zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let mut norms = Vec::with_capacity(out.nrows());
        for mut row in out.rows_mut() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                row.mapv_inplace(|v| v / n);
            }
            norms.push(n);
        }
        let rg = self.grad_of(&[a]);
        self.push(out, Op::L2NormalizeRows { x: a, norms }, rg)
    }

    /// Divides each row by its sum.
    pub fn normalize_rows_sum(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let mut sums = Vec::with_capacity(out.nrows());
        for mut row in out.rows_mut() {
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
            sums.push(s);
        }
        let rg = self.grad_of(&[a]);
        self.push(out, Op::NormalizeRowsSum { x: a, sums }, rg)
    }

    pub fn bilinear(&mut self, a: Var, plan: Arc<BilinearPlan>) -> Var {
        let value = plan.apply(self.value(a));
        let rg = self.grad_of(&[a]);
        self.push(value, Op::Bilinear { x: a, plan }, rg)
    }

    /// Reverse pass from a `1×1` node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward expects a scalar node");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones((1, 1)));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, delta: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot => *slot = Some(delta),
            }
        };
        let val = |v: Var| -> &Tensor { &self.nodes[v.0].value };
        let rg = |v: Var| self.nodes[v.0].requires_grad;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if rg(*a) {
                    acc(*a, g.dot(&val(*b).t()));
                }
                if rg(*b) {
                    acc(*b, val(*a).t().dot(g));
                }
            }
            Op::Transpose(a) => acc(*a, g.t().to_owned()),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, -g);
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    acc(*a, g * val(*b));
                }
                if rg(*b) {
                    acc(*b, g * val(*a));
                }
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                if rg(*a) {
                    acc(*a, g / bv);
                }
                if rg(*b) {
                    let out = &node.value;
                    acc(*b, -(g * out.as_ref()) / bv);
                }
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                if rg(*row) {
                    acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(a, row) => {
                if rg(*a) {
                    acc(*a, g * val(*row));
                }
                if rg(*row) {
                    let prod = g * val(*a);
                    acc(*row, prod.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Scale(a, k) => acc(*a, g * *k),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Activate(a, act) => {
                let mut d = val(*a).clone();
                d.mapv_inplace(|x| match act {
                    Activation::Gelu => {
                        let inner = GELU_C * (x + 0.044715 * x * x * x);
                        let t = inner.tanh();
                        0.5 * (1.0 + t)
                            + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
                    }
                    Activation::QuickGelu => {
                        let s = sigmoid(1.702 * x);
                        s + 1.702 * x * s * (1.0 - s)
                    }
                });
                acc(*a, d * g);
            }
            Op::Standardize { x, inv_std } => {
                let z = &node.value;
                let cols = z.ncols() as f64;
                let mut dx = Tensor::zeros(z.dim());
                for (r, inv) in inv_std.iter().enumerate() {
                    let gr = g.row(r);
                    let zr = z.row(r);
                    let mean_g = gr.sum() / cols;
                    let mean_gz = gr.dot(&zr) / cols;
                    for c in 0..z.ncols() {
                        dx[[r, c]] = inv * (gr[c] - mean_g - zr[c] * mean_gz);
                    }
                }
                acc(*x, dx);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut dx = y.as_ref() * g;
                for (mut row, yr) in dx.rows_mut().into_iter().zip(y.rows()) {
                    let dot = row.sum();
                    row.zip_mut_with(&yr, |d, &yv| *d -= yv * dot);
                }
                acc(*a, dx);
            }
            Op::LogClamped(a, floor) => {
                let d = ndarray::Zip::from(val(*a))
                    .and(g)
                    .map_collect(|&x, &gv| if x > *floor { gv / x } else { 0.0 });
                acc(*a, d);
            }
            Op::Powf(a, p) => {
                let d = ndarray::Zip::from(val(*a)).and(g).map_collect(|&x, &gv| {
                    if *p == 1.0 {
                        gv
                    } else if x <= 0.0 {
                        0.0
                    } else {
                        gv * p * x.powf(p - 1.0)
                    }
                });
                acc(*a, d);
            }
            Op::SliceRows(a, start) => {
                if rg(*a) {
                    let mut d = Tensor::zeros(val(*a).dim());
                    d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                    acc(*a, d);
                }
            }
            Op::SliceCols(a, start) => {
                if rg(*a) {
                    let mut d = Tensor::zeros(val(*a).dim());
                    d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                    acc(*a, d);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = val(*p).nrows();
                    if rg(*p) {
                        acc(*p, g.slice(s![offset..offset + n, ..]).to_owned());
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = val(*p).ncols();
                    if rg(*p) {
                        acc(*p, g.slice(s![.., offset..offset + n]).to_owned());
                    }
                    offset += n;
                }
            }
            Op::SumAll(a) => acc(*a, Tensor::from_elem(val(*a).dim(), g[[0, 0]])),
            Op::SumRows(a) => {
                let shape = val(*a).dim();
                let d = g.broadcast(shape).expect("sum_rows broadcast").to_owned();
                acc(*a, d);
            }
            Op::SumCols(a) => {
                let shape = val(*a).dim();
                let d = g.broadcast(shape).expect("sum_cols broadcast").to_owned();
                acc(*a, d);
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = &node.value;
                let mut dx = g.clone();
                for ((mut row, yr), n) in dx.rows_mut().into_iter().zip(y.rows()).zip(norms) {
                    if *n == 0.0 {
                        row.fill(0.0);
                        continue;
                    }
                    let dot = row.dot(&yr);
                    row.zip_mut_with(&yr, |d, &yv| *d = (*d - yv * dot) / n);
                }
                acc(*x, dx);
            }
            Op::NormalizeRowsSum { x, sums } => {
                let y = &node.value;
                let mut dx = g.clone();
                for ((mut row, yr), s) in dx.rows_mut().into_iter().zip(y.rows()).zip(sums) {
                    let dot = row.dot(&yr);
                    row.mapv_inplace(|d| (d - dot) / s);
                }
                acc(*x, dx);
            }
            Op::Bilinear { x, plan } => acc(*x, plan.apply_transpose(g)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
    }

    /// Central-difference check of d(build)/d(input) at every entry.
    fn check<F>(input: Tensor, build: F)
    where
        F: Fn(&mut Graph, Var) -> Var,
    {
        let mut g = Graph::new();
        let x = g.param(input.clone());
        let out = build(&mut g, x);
        let grads = g.backward(out);
        let analytic = grads.get(x).cloned().unwrap_or_else(|| Tensor::zeros(input.dim()));

        let eval = |t: Tensor| {
            let mut g = Graph::new();
            let x = g.param(t);
            let out = build(&mut g, x);
            g.scalar(out)
        };
        let h = 1e-6;
        for idx in ndarray::indices(input.dim()) {
            let mut plus = input.clone();
            plus[idx] += h;
            let mut minus = input.clone();
            minus[idx] -= h;
            let numeric = (eval(plus) - eval(minus)) / (2.0 * h);
            let a = analytic[idx];
            assert!(
                (a - numeric).abs() <= 1e-5 * a.abs().max(numeric.abs()) + 1e-7,
                "{idx:?}: analytic {a} vs numeric {numeric}"
            );
        }
    }

    /// Weighted sum so each output entry contributes a distinct gradient.
    fn probe(g: &mut Graph, y: Var, seed: u64) -> Var {
        let (r, c) = g.shape(y);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = g.input(random(r, c, &mut rng));
        let p = g.mul(y, w);
        g.sum(p)
    }

    #[test]
    fn matmul_and_transpose_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = random(4, 3, &mut rng);
        check(random(2, 4, &mut rng), move |g, x| {
            let bv = g.input(b.clone());
            let y = g.matmul(x, bv);
            let t = g.transpose(y);
            probe(g, t, 2)
        });
    }

    #[test]
    fn elementwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let other = random(3, 4, &mut rng).mapv(|v| v + 2.5);
        check(random(3, 4, &mut rng), move |g, x| {
            let o = g.input(other.clone());
            let a = g.mul(x, o);
            let b = g.div(a, o);
            let c = g.div(o, b);
            let d = g.sub(c, x);
            let e = g.add(d, a);
            let f = g.scale(e, 0.3);
            let h = g.add_scalar(f, 1.0);
            probe(g, h, 4)
        });
    }

    #[test]
    fn activation_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for act in [Activation::Gelu, Activation::QuickGelu] {
            check(random(3, 5, &mut rng).mapv(|v| v * 3.0), move |g, x| {
                let y = g.activate(x, act);
                probe(g, y, 6)
            });
        }
    }

    #[test]
    fn layer_norm_gradients_for_input_and_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let gain = random(1, 6, &mut rng);
        let bias = random(1, 6, &mut rng);
        let input = random(4, 6, &mut rng);
        {
            let (gain, bias) = (gain.clone(), bias.clone());
            check(input.clone(), move |g, x| {
                let ga = g.input(gain.clone());
                let bi = g.input(bias.clone());
                let y = g.layer_norm(x, ga, bi, 1e-5);
                probe(g, y, 8)
            });
        }
        let inp = input.clone();
        check(gain, move |g, ga| {
            let x = g.input(inp.clone());
            let bi = g.input(bias.clone());
            let y = g.layer_norm(x, ga, bi, 1e-5);
            probe(g, y, 8)
        });
    }

    #[test]
    fn softmax_log_pow_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        check(random(3, 4, &mut rng), |g, x| {
            let p = g.softmax_rows(x);
            let l = g.log_clamped(p, 1e-12);
            let q = g.scale(p, -1.0);
            let q = g.add_scalar(q, 1.0);
            let q = g.powf(q, 2.0);
            let m = g.mul(q, l);
            probe(g, m, 10)
        });
    }

    #[test]
    fn structural_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let extra = random(2, 5, &mut rng);
        check(random(4, 5, &mut rng), move |g, x| {
            let e = g.input(extra.clone());
            let top = g.slice_rows(x, 1, 3);
            let left = g.slice_cols(x, 0, 2);
            let right = g.slice_cols(x, 2, 5);
            let cols = g.concat_cols(&[right, left]);
            let rows = g.concat_rows(&[top, e, cols]);
            let a = g.sum_rows(rows);
            let b = g.sum_cols(rows);
            let pa = probe(g, a, 12);
            let pb = probe(g, b, 13);
            g.add(pa, pb)
        });
    }

    #[test]
    fn normalization_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        check(random(3, 4, &mut rng), |g, x| {
            let y = g.l2_normalize_rows(x);
            probe(g, y, 15)
        });
        check(random(3, 4, &mut rng).mapv(|v| v.abs() + 0.1), |g, x| {
            let y = g.normalize_rows_sum(x);
            probe(g, y, 16)
        });
    }

    #[test]
    fn row_broadcast_and_bilinear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let base = random(6, 3, &mut rng);
        check(random(1, 3, &mut rng), move |g, r| {
            let b = g.input(base.clone());
            let y = g.add_row(b, r);
            let y = g.mul_row(y, r);
            probe(g, y, 18)
        });
        let plan = Arc::new(BilinearPlan::new((2, 3), (5, 4)));
        check(random(6, 2, &mut rng), move |g, x| {
            let y = g.bilinear(x, Arc::clone(&plan));
            probe(g, y, 19)
        });
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.input(array![[1.0, 2.0]]);
        let p = g.param(array![[3.0, 4.0]]);
        let y = g.mul(c, p);
        let s = g.sum(y);
        let grads = g.backward(s);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap(), &array![[1.0, 2.0]]);
    }

    #[test]
    fn bilinear_constant_and_identity() {
        let plan = BilinearPlan::new((3, 3), (7, 5));
        let out = plan.apply(&Tensor::from_elem((9, 2), 0.25));
        assert!(out.iter().all(|v| (v - 0.25).abs() < 1e-15));
        let same = BilinearPlan::new((3, 4), (3, 4));
        let x = Tensor::from_shape_fn((12, 1), |(i, _)| i as f64);
        assert_eq!(same.apply(&x), x);
    }
}
