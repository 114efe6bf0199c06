//! A small reverse-mode automatic differentiation tape over dense `f64`
//! matrices. Every activation in the crate is a 2-D array (rows = tokens,
//! columns = channels), which is all the transformer blocks need.

use std::cell::Cell;
use std::sync::OnceLock;

use ndarray::{s, Axis};

use crate::params::{Matrix, ParamGrads, ParamId, ParamStore};

/// `tanh` through a single `exp`; accurate to a few ulp in absolute terms,
/// which is what GELU needs, and several times cheaper than `f64::tanh`.
fn tanh(u: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

fn softmax_rows(m: &mut Matrix) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut total = 0.0;
        row.mapv_inplace(|v| {
            let e = (v - max).exp();
            total += e;
            e
        });
        let inv = 1.0 / total;
        row.mapv_inplace(|v| v * inv);
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

thread_local! {
    static FAULT: Cell<bool> = const { Cell::new(false) };
}

/// Test hook: while enabled on the current thread, the GELU backward pass is
/// deliberately wrong. Used as a negative control by the gradient checker.
#[doc(hidden)]
pub fn set_fault_injection(enabled: bool) {
    FAULT.with(|f| f.set(enabled));
}

fn fault_enabled() -> bool {
    FAULT.with(|f| f.get())
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;
pub const LN_EPS: f64 = 1e-6;

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    /// a · bᵀ
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    RowScale(Var, Vec<f64>),
    Gelu(Var),
    Softmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        scale: f64,
        probs: Matrix,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore: Option<usize>,
        probs: Matrix,
    },
}

enum Value {
    Owned(Matrix),
    Param(ParamId),
}

struct Node {
    value: Value,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation so it can be differentiated.
pub struct Tape<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
}

fn empty_store() -> &'static ParamStore {
    static EMPTY: OnceLock<ParamStore> = OnceLock::new();
    EMPTY.get_or_init(|| ParamStore::new(0))
}

impl Tape<'static> {
    /// A tape with no parameters, for pure functions of inputs.
    pub fn detached() -> Self {
        Tape::new(empty_store())
    }
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(256),
            param_nodes: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        match &self.nodes[v.0].value {
            Value::Owned(m) => m,
            Value::Param(id) => self.store.get(*id),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    /// A parameter leaf. Repeated calls with the same id share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(v);
        v
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMulT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// Adds the `1 × n` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::AddRow(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    /// Multiplies row `i` of `a` by the constant `weights[i]`.
    pub fn row_scale(&mut self, a: Var, weights: Vec<f64>) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.nrows(), weights.len(), "row_scale length mismatch");
        for (mut row, w) in out.rows_mut().into_iter().zip(&weights) {
            row.mapv_inplace(|v| v * w);
        }
        let ng = self.ng(a);
        self.push(out, Op::RowScale(a, weights), ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| {
            let u = GELU_K * (x + GELU_C * x * x * x);
            0.5 * x * (1.0 + tanh(u))
        });
        let ng = self.ng(a);
        self.push(out, Op::Gelu(a), ng)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        softmax_rows(&mut out);
        let ng = self.ng(a);
        self.push(out, Op::Softmax(a), ng)
    }

    /// Fused single-head attention `softmax(scale · q kᵀ + bias) · v`. The
    /// probabilities stay on the node; see [`Tape::attention_probs`].
    pub fn attention(&mut self, q: Var, k: Var, v: Var, scale: f64, bias: Option<Var>) -> Var {
        let mut probs = self.value(q).dot(&self.value(k).t());
        match bias {
            Some(b) => {
                let bv = self.value(b);
                assert_eq!(bv.dim(), probs.dim(), "attention bias shape");
                probs.zip_mut_with(bv, |x, &b| *x = *x * scale + b);
            }
            None => probs.mapv_inplace(|x| x * scale),
        }
        softmax_rows(&mut probs);
        let out = probs.dot(self.value(v));
        let ng = self.ng(q) || self.ng(k) || self.ng(v) || bias.is_some_and(|b| self.ng(b));
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                bias,
                scale,
                probs,
            },
            ng,
        )
    }

    /// Attention probabilities of a node created by [`Tape::attention`].
    pub fn attention_probs(&self, v: Var) -> Option<&Matrix> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (`1 × n`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
            inv_std.push(inv);
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let out = self.value(a).slice(s![.., start..start + width]).to_owned();
        let ng = self.ng(a);
        self.push(out, Op::SliceCols(a, start), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("column counts agree");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Selects rows by index; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, indices: Vec<usize>) -> Var {
        let out = self.value(a).select(Axis(0), &indices);
        let ng = self.ng(a);
        self.push(out, Op::GatherRows(a, indices), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Matrix::from_elem((1, 1), self.value(a).sum());
        let ng = self.ng(a);
        self.push(out, Op::Sum(a), ng)
    }

    /// Summed negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`. Rows whose target equals `ignore` contribute nothing.
    pub fn cross_entropy_sum(
        &mut self,
        logits: Var,
        targets: Vec<usize>,
        ignore: Option<usize>,
    ) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), targets.len(), "one target per logit row");
        let mut probs = lv.clone();
        let mut loss = 0.0;
        for (mut row, &t) in probs.rows_mut().into_iter().zip(&targets) {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            if Some(t) != ignore {
                loss += lse - row[t];
            }
            row.mapv_inplace(|v| (v - lse).exp());
        }
        let ng = self.ng(logits);
        self.push(
            Matrix::from_elem((1, 1), loss),
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
                probs,
            },
            ng,
        )
    }

    /// Reverse pass from the scalar `root` (seeded with 1).
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward root must be a scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::ones((1, 1)));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(&node.op, idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut param_grads = vec![None; self.store.len()];
        for (pid, var) in self.param_nodes.iter().enumerate() {
            if let Some(v) = var {
                param_grads[pid] = grads[v.0].take();
            }
        }
        Gradients {
            nodes: grads,
            params: ParamGrads::from_vec(param_grads),
        }
    }

    fn propagate(&self, op: &Op, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let acc = |grads: &mut [Option<Matrix>], v: Var, delta: Matrix| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot => *slot = Some(delta),
            }
        };
        match op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    acc(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.ng(*b) {
                    acc(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::MatMulT(a, b) => {
                if self.ng(*a) {
                    acc(grads, *a, g.dot(self.value(*b)));
                }
                if self.ng(*b) {
                    acc(grads, *b, g.t().dot(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    acc(grads, *a, g * self.value(*b));
                }
                if self.ng(*b) {
                    acc(grads, *b, g * self.value(*a));
                }
            }
            Op::AddRow(a, b) => {
                acc(grads, *a, g.clone());
                if self.ng(*b) {
                    acc(grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Scale(a, c) => acc(grads, *a, g * *c),
            Op::RowScale(a, w) => {
                let mut d = g.clone();
                for (mut row, wi) in d.rows_mut().into_iter().zip(w) {
                    row.mapv_inplace(|v| v * wi);
                }
                acc(grads, *a, d);
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let mut d = ndarray::Zip::from(x).and(g).map_collect(|&x, &gy| {
                    let u = GELU_K * (x + GELU_C * x * x * x);
                    let t = tanh(u);
                    let du = GELU_K * (1.0 + 3.0 * GELU_C * x * x);
                    gy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                });
                if fault_enabled() {
                    d.mapv_inplace(|v| v * 1.1 + 1e-3);
                }
                acc(grads, *a, d);
            }
            Op::Softmax(a) => {
                let y = self.value(Var(idx));
                let mut d = y * g;
                for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                    let dot = drow.sum();
                    ndarray::Zip::from(&mut drow)
                        .and(&yrow)
                        .for_each(|dv, &yv| *dv -= yv * dot);
                }
                acc(grads, *a, d);
            }
            Op::Attention {
                q,
                k,
                v,
                bias,
                scale,
                probs,
            } => {
                if self.ng(*v) {
                    acc(grads, *v, probs.t().dot(g));
                }
                let bias_ng = bias.is_some_and(|b| self.ng(b));
                if self.ng(*q) || self.ng(*k) || bias_ng {
                    let mut ds = g.dot(&self.value(*v).t());
                    for (mut drow, prow) in ds.rows_mut().into_iter().zip(probs.rows()) {
                        let dot = drow.dot(&prow);
                        ndarray::Zip::from(&mut drow)
                            .and(&prow)
                            .for_each(|d, &p| *d = p * (*d - dot));
                    }
                    if let (Some(b), true) = (bias, bias_ng) {
                        acc(grads, *b, ds.clone());
                    }
                    ds.mapv_inplace(|x| x * scale);
                    if self.ng(*q) {
                        acc(grads, *q, ds.dot(self.value(*k)));
                    }
                    if self.ng(*k) {
                        acc(grads, *k, ds.t().dot(self.value(*q)));
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                if self.ng(*beta) {
                    acc(grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.ng(*gamma) {
                    acc(grads, *gamma, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.ng(*x) {
                    let dxhat = g * self.value(*gamma);
                    let n = xhat.ncols() as f64;
                    let mut dx = Matrix::zeros(xhat.dim());
                    for r in 0..xhat.nrows() {
                        let dh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let sum_dh = dh.sum();
                        let sum_dh_xh = dh.dot(&xh);
                        let inv = inv_std[r];
                        for c in 0..xhat.ncols() {
                            dx[[r, c]] = inv / n * (n * dh[c] - sum_dh - xh[c] * sum_dh_xh);
                        }
                    }
                    acc(grads, *x, dx);
                }
            }
            Op::SliceCols(a, start) => {
                let mut d = Matrix::zeros(self.shape(*a));
                d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                acc(grads, *a, d);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if self.ng(p) {
                        acc(grads, p, g.slice(s![.., offset..offset + w]).to_owned());
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let h = self.shape(p).0;
                    if self.ng(p) {
                        acc(grads, p, g.slice(s![offset..offset + h, ..]).to_owned());
                    }
                    offset += h;
                }
            }
            Op::GatherRows(a, indices) => {
                let mut d = Matrix::zeros(self.shape(*a));
                for (i, &src) in indices.iter().enumerate() {
                    let mut row = d.row_mut(src);
                    row += &g.row(i);
                }
                acc(grads, *a, d);
            }
            Op::Sum(a) => acc(grads, *a, Matrix::from_elem(self.shape(*a), g[[0, 0]])),
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
                probs,
            } => {
                let mut d = probs.clone();
                for (mut row, &t) in d.rows_mut().into_iter().zip(targets) {
                    if Some(t) == *ignore {
                        row.fill(0.0);
                    } else {
                        row[t] -= 1.0;
                        row.mapv_inplace(|v| v * g[[0, 0]]);
                    }
                }
                acc(grads, *logits, d);
            }
        }
    }
}

/// Result of a reverse pass.
pub struct Gradients {
    nodes: Vec<Option<Matrix>>,
    params: ParamGrads,
}

impl Gradients {
    /// Gradient with respect to an input leaf (or any intermediate node).
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn params(&self) -> &ParamGrads {
        &self.params
    }

    pub fn into_params(self) -> ParamGrads {
        self.params
    }
}
