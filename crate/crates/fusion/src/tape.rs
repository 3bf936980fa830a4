//! Row-major 2-D tensors and a reverse-mode differentiation tape.
//!
//! Every operation appends a node holding its value and the indices of its
//! inputs. [`Tape::backward`] walks the nodes in reverse and accumulates
//! gradients only into nodes that (transitively) depend on a leaf created
//! with `requires_grad = true`, so frozen weights cost no gradient work.

use std::rc::Rc;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data does not match shape");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Self::new(1, data.len(), data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(rows.len(), cols, data)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `self · other`
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        Tensor::new(
            self.rows,
            other.cols,
            mm(&self.data, self.rows, self.cols, &other.data, other.cols),
        )
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.cols, other.cols, "matmul_t shape mismatch");
        Tensor::new(
            self.rows,
            other.rows,
            mm_t(&self.data, self.rows, self.cols, &other.data, other.rows),
        )
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `a (m×k) · b (k×n)`
fn mm(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a (m×k) · bᵀ` with `b` stored `n×k`
fn mm_t(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `aᵀ · g` with `a` stored `m×k` and `g` stored `m×n`; result `k×n`.
fn t_mm(a: &[f64], m: usize, k: usize, g: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub const ROPE_BASE: f64 = 10_000.0;

/// Rotates consecutive column pairs of each head; row index is the position.
fn rope_apply(x: &Tensor, head_dim: usize, sign: f64) -> Tensor {
    let mut out = x.clone();
    let n_heads = x.cols / head_dim;
    for pos in 0..x.rows {
        for h in 0..n_heads {
            for i in 0..head_dim / 2 {
                let theta = pos as f64 * ROPE_BASE.powf(-2.0 * i as f64 / head_dim as f64);
                let (s, c) = (sign * theta).sin_cos();
                let base = pos * x.cols + h * head_dim + 2 * i;
                let (a, b) = (x.data[base], x.data[base + 1]);
                out.data[base] = a * c - b * s;
                out.data[base + 1] = a * s + b * c;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Composite loss details recorded by [`Tape::composite_loss`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub mae: f64,
    pub correlation: f64,
    pub degenerate: bool,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    MulRow(usize, usize),
    MulConst(usize, Rc<Vec<f64>>),
    Scale(usize, f64),
    Silu(usize),
    Gelu(usize),
    Sigmoid(usize),
    RmsNorm(usize, f64),
    Rope(usize, usize),
    Softmax(usize),
    SliceCols(usize, usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    Gather(usize, Vec<usize>),
    MeanRows(usize),
    /// Per-prediction gradient of the loss, precomputed in the forward pass.
    Loss(usize, Vec<f64>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[usize]) -> Var {
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a.0, b.0), &[a.0, b.0])
    }

    /// `a · bᵀ`, the layout used for `x · Wᵀ` with `W` stored `d_out × d_in`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        self.push(v, Op::MatMulT(a.0, b.0), &[a.0, b.0])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "add shape mismatch");
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p + q).collect();
        let v = Tensor::new(x.rows, x.cols, data);
        self.push(v, Op::Add(a.0, b.0), &[a.0, b.0])
    }

    /// Adds the `1×n` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (x, r) = (self.value(a), self.value(b));
        assert!(r.rows == 1 && r.cols == x.cols, "add_row shape mismatch");
        let mut v = x.clone();
        for row in v.data.chunks_mut(x.cols) {
            row.iter_mut().zip(&r.data).for_each(|(p, q)| *p += q);
        }
        self.push(v, Op::AddRow(a.0, b.0), &[a.0, b.0])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "mul shape mismatch");
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p * q).collect();
        let v = Tensor::new(x.rows, x.cols, data);
        self.push(v, Op::Mul(a.0, b.0), &[a.0, b.0])
    }

    /// Multiplies every row of `a` elementwise by the `1×n` row `b`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let (x, r) = (self.value(a), self.value(b));
        assert!(r.rows == 1 && r.cols == x.cols, "mul_row shape mismatch");
        let mut v = x.clone();
        for row in v.data.chunks_mut(x.cols) {
            row.iter_mut().zip(&r.data).for_each(|(p, q)| *p *= q);
        }
        self.push(v, Op::MulRow(a.0, b.0), &[a.0, b.0])
    }

    /// Elementwise product with a constant mask (used for dropout).
    pub fn mul_const(&mut self, a: Var, mask: Vec<f64>) -> Var {
        let x = self.value(a);
        assert_eq!(x.data.len(), mask.len(), "mask shape mismatch");
        let data = x.data.iter().zip(&mask).map(|(p, q)| p * q).collect();
        let v = Tensor::new(x.rows, x.cols, data);
        self.push(v, Op::MulConst(a.0, Rc::new(mask)), &[a.0])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let x = self.value(a);
        let v = Tensor::new(x.rows, x.cols, x.data.iter().map(|p| p * s).collect());
        self.push(v, Op::Scale(a.0, s), &[a.0])
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let x = self.value(a);
        let v = Tensor::new(x.rows, x.cols, x.data.iter().map(|&p| f(p)).collect());
        self.push(v, op, &[a.0])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.map(a, |x| x * sigmoid(x), Op::Silu(a.0))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, gelu, Op::Gelu(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a.0))
    }

    /// Row-wise `x / sqrt(mean(x^2) + eps)`, without a gain.
    pub fn rms_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let mut v = x.clone();
        for row in v.data.chunks_mut(x.cols) {
            let ms = row.iter().map(|p| p * p).sum::<f64>() / row.len() as f64;
            let r = 1.0 / (ms + eps).sqrt();
            row.iter_mut().for_each(|p| *p *= r);
        }
        self.push(v, Op::RmsNorm(a.0, eps), &[a.0])
    }

    /// Rotary position encoding over heads of width `head_dim`.
    pub fn rope(&mut self, a: Var, head_dim: usize) -> Var {
        let x = self.value(a);
        assert!(
            head_dim.is_multiple_of(2) && x.cols.is_multiple_of(head_dim),
            "rope shape mismatch"
        );
        let v = rope_apply(x, head_dim, 1.0);
        self.push(v, Op::Rope(a.0, head_dim), &[a.0])
    }

    /// Row-wise softmax; with `causal`, entry `(i, j)` for `j > i` is masked.
    pub fn softmax(&mut self, a: Var, causal: bool) -> Var {
        let x = self.value(a);
        let mut v = Tensor::zeros(x.rows, x.cols);
        for i in 0..x.rows {
            let upto = if causal { (i + 1).min(x.cols) } else { x.cols };
            let row = &x.row(i)[..upto];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|p| (p - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            for (j, e) in exps.into_iter().enumerate() {
                v.data[i * x.cols + j] = e / z;
            }
        }
        self.push(v, Op::Softmax(a.0), &[a.0])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols, "slice out of range");
        let mut data = Vec::with_capacity(x.rows * len);
        for r in 0..x.rows {
            data.extend_from_slice(&x.row(r)[start..start + len]);
        }
        let v = Tensor::new(x.rows, len, data);
        self.push(v, Op::SliceCols(a.0, start), &[a.0])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                let t = self.value(*p);
                assert_eq!(t.rows, rows, "concat_cols row mismatch");
                data.extend_from_slice(t.row(r));
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(Tensor::new(rows, cols, data), Op::ConcatCols(ids.clone()), &ids)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            assert_eq!(t.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&t.data);
            rows += t.rows;
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(Tensor::new(rows, cols, data), Op::ConcatRows(ids.clone()), &ids)
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * t.cols);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let v = Tensor::new(ids.len(), t.cols, data);
        self.push(v, Op::Gather(table.0, ids.to_vec()), &[table.0])
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = vec![0.0; x.cols];
        for r in 0..x.rows {
            out.iter_mut().zip(x.row(r)).for_each(|(o, p)| *o += p);
        }
        let n = x.rows as f64;
        out.iter_mut().for_each(|o| *o /= n);
        self.push(Tensor::row_vector(out), Op::MeanRows(a.0), &[a.0])
    }

    /// `lambda * MAE + (1 - lambda) * (1 - pearson)` over a column (or row)
    /// of predictions. When either side has variance below `1e-12` the
    /// correlation term is 1 and passes no gradient.
    pub fn composite_loss(&mut self, pred: Var, target: &[f64], lambda: f64) -> (Var, LossParts) {
        let p = &self.value(pred).data;
        let n = p.len();
        assert_eq!(n, target.len(), "loss length mismatch");
        let nf = n as f64;
        let mae = p.iter().zip(target).map(|(a, b)| (a - b).abs()).sum::<f64>() / nf;
        let mut grad: Vec<f64> = p.iter().zip(target).map(|(a, b)| lambda * sign(a - b) / nf).collect();
        let mp = p.iter().sum::<f64>() / nf;
        let mt = target.iter().sum::<f64>() / nf;
        let dp: Vec<f64> = p.iter().map(|a| a - mp).collect();
        let dt: Vec<f64> = target.iter().map(|b| b - mt).collect();
        let spp: f64 = dp.iter().map(|a| a * a).sum();
        let stt: f64 = dt.iter().map(|b| b * b).sum();
        let spt: f64 = dp.iter().zip(&dt).map(|(a, b)| a * b).sum();
        let degenerate = spp / nf < 1e-12 || stt / nf < 1e-12;
        let rho = if degenerate {
            0.0
        } else {
            let denom = (spp * stt).sqrt();
            for i in 0..n {
                let drho = dt[i] / denom - spt * dp[i] / (denom * spp);
                grad[i] -= (1.0 - lambda) * drho;
            }
            (spt / denom).clamp(-1.0, 1.0)
        };
        let loss = lambda * mae + (1.0 - lambda) * (1.0 - rho);
        let v = self.push(Tensor::new(1, 1, vec![loss]), Op::Loss(pred.0, grad), &[pred.0]);
        (
            v,
            LossParts {
                mae,
                correlation: rho,
                degenerate,
            },
        )
    }

    /// Gradients of the scalar `out` with respect to every node; entries are
    /// `None` for nodes that do not require gradients.
    pub fn backward(&self, out: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let o = &self.nodes[out.0].value;
        assert_eq!(o.data.len(), 1, "backward needs a scalar output");
        grads[out.0] = Some(Tensor::new(o.rows, o.cols, vec![1.0]));
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let needs = |p: usize| self.nodes[p].requires_grad;
        let acc = |grads: &mut [Option<Tensor>], p: usize, t: Tensor| match &mut grads[p] {
            Some(e) => e.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        let val = |p: usize| &self.nodes[p].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                if needs(*a) {
                    acc(
                        grads,
                        *a,
                        Tensor::new(x.rows, x.cols, mm_t(&g.data, g.rows, g.cols, &y.data, y.rows)),
                    );
                }
                if needs(*b) {
                    acc(
                        grads,
                        *b,
                        Tensor::new(y.rows, y.cols, t_mm(&x.data, x.rows, x.cols, &g.data, g.cols)),
                    );
                }
            }
            Op::MatMulT(a, b) => {
                let (x, y) = (val(*a), val(*b));
                if needs(*a) {
                    acc(
                        grads,
                        *a,
                        Tensor::new(x.rows, x.cols, mm(&g.data, g.rows, g.cols, &y.data, y.cols)),
                    );
                }
                if needs(*b) {
                    acc(
                        grads,
                        *b,
                        Tensor::new(y.rows, y.cols, t_mm(&g.data, g.rows, g.cols, &x.data, x.cols)),
                    );
                }
            }
            Op::Add(a, b) => {
                for p in [*a, *b] {
                    if needs(p) {
                        acc(grads, p, g.clone());
                    }
                }
            }
            Op::AddRow(a, b) => {
                if needs(*a) {
                    acc(grads, *a, g.clone());
                }
                if needs(*b) {
                    let mut r = vec![0.0; g.cols];
                    for row in g.data.chunks(g.cols) {
                        r.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                    }
                    acc(grads, *b, Tensor::row_vector(r));
                }
            }
            Op::Mul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                if needs(*a) {
                    let d = g.data.iter().zip(&y.data).map(|(p, q)| p * q).collect();
                    acc(grads, *a, Tensor::new(g.rows, g.cols, d));
                }
                if needs(*b) {
                    let d = g.data.iter().zip(&x.data).map(|(p, q)| p * q).collect();
                    acc(grads, *b, Tensor::new(g.rows, g.cols, d));
                }
            }
            Op::MulRow(a, b) => {
                let (x, r) = (val(*a), val(*b));
                if needs(*a) {
                    let mut d = g.clone();
                    for row in d.data.chunks_mut(g.cols) {
                        row.iter_mut().zip(&r.data).for_each(|(p, q)| *p *= q);
                    }
                    acc(grads, *a, d);
                }
                if needs(*b) {
                    let mut d = vec![0.0; g.cols];
                    for (grow, xrow) in g.data.chunks(g.cols).zip(x.data.chunks(x.cols)) {
                        for j in 0..g.cols {
                            d[j] += grow[j] * xrow[j];
                        }
                    }
                    acc(grads, *b, Tensor::row_vector(d));
                }
            }
            Op::MulConst(a, mask) => {
                let d = g.data.iter().zip(mask.iter()).map(|(p, q)| p * q).collect();
                acc(grads, *a, Tensor::new(g.rows, g.cols, d));
            }
            Op::Scale(a, s) => {
                let d = g.data.iter().map(|p| p * s).collect();
                acc(grads, *a, Tensor::new(g.rows, g.cols, d));
            }
            Op::Silu(a) => {
                let x = val(*a);
                let d = g
                    .data
                    .iter()
                    .zip(&x.data)
                    .map(|(gv, &xv)| {
                        let s = sigmoid(xv);
                        gv * (s + xv * s * (1.0 - s))
                    })
                    .collect();
                acc(grads, *a, Tensor::new(g.rows, g.cols, d));
            }
            Op::Gelu(a) => {
                let x = val(*a);
                let d = g.data.iter().zip(&x.data).map(|(gv, &xv)| gv * gelu_grad(xv)).collect();
                acc(grads, *a, Tensor::new(g.rows, g.cols, d));
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[i].value;
                let d = g.data.iter().zip(&y.data).map(|(gv, s)| gv * s * (1.0 - s)).collect();
                acc(grads, *a, Tensor::new(g.rows, g.cols, d));
            }
            Op::RmsNorm(a, eps) => {
                let x = val(*a);
                let y = &self.nodes[i].value;
                let n = x.cols as f64;
                let mut d = Tensor::zeros(x.rows, x.cols);
                for r in 0..x.rows {
                    let xr = x.row(r);
                    let ms = xr.iter().map(|p| p * p).sum::<f64>() / n;
                    let inv = 1.0 / (ms + eps).sqrt();
                    let (gr, yr) = (g.row(r), y.row(r));
                    let dot = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / n;
                    for j in 0..x.cols {
                        d.data[r * x.cols + j] = inv * (gr[j] - yr[j] * dot);
                    }
                }
                acc(grads, *a, d);
            }
            Op::Rope(a, head_dim) => {
                acc(grads, *a, rope_apply(g, *head_dim, -1.0));
            }
            Op::Softmax(a) => {
                let y = &self.nodes[i].value;
                let mut d = Tensor::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let (gr, yr) = (g.row(r), y.row(r));
                    let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                    for j in 0..y.cols {
                        d.data[r * y.cols + j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(grads, *a, d);
            }
            Op::SliceCols(a, start) => {
                let x = val(*a);
                let mut d = Tensor::zeros(x.rows, x.cols);
                for r in 0..x.rows {
                    d.data[r * x.cols + start..r * x.cols + start + g.cols].copy_from_slice(g.row(r));
                }
                acc(grads, *a, d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = val(p).cols;
                    if needs(p) {
                        let mut data = Vec::with_capacity(g.rows * w);
                        for r in 0..g.rows {
                            data.extend_from_slice(&g.row(r)[off..off + w]);
                        }
                        acc(grads, p, Tensor::new(g.rows, w, data));
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let h = val(p).rows;
                    if needs(p) {
                        let data = g.data[off * g.cols..(off + h) * g.cols].to_vec();
                        acc(grads, p, Tensor::new(h, g.cols, data));
                    }
                    off += h;
                }
            }
            Op::Gather(table, ids) => {
                let t = val(*table);
                let mut d = Tensor::zeros(t.rows, t.cols);
                for (r, &id) in ids.iter().enumerate() {
                    d.data[id * t.cols..(id + 1) * t.cols]
                        .iter_mut()
                        .zip(g.row(r))
                        .for_each(|(o, v)| *o += v);
                }
                acc(grads, *table, d);
            }
            Op::MeanRows(a) => {
                let x = val(*a);
                let n = x.rows as f64;
                let mut d = Tensor::zeros(x.rows, x.cols);
                for row in d.data.chunks_mut(x.cols) {
                    row.iter_mut().zip(&g.data).for_each(|(o, v)| *o = v / n);
                }
                acc(grads, *a, d);
            }
            Op::Loss(a, per) => {
                let x = val(*a);
                let s = g.data[0];
                acc(
                    grads,
                    *a,
                    Tensor::new(x.rows, x.cols, per.iter().map(|p| p * s).collect()),
                );
            }
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}
