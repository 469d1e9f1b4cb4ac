//! Reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation of one forward pass. [`Tape::backward`] walks it in
//! reverse and returns gradients for every parameter leaf that was not frozen.

use std::collections::HashMap;

use crate::kernels;
use crate::params::{ParamId, ParameterStore};
use crate::scalar::Scalar;
use crate::tensor::{softmax, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    ScaleBy(Var, Var),
    Relu(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    CircCorr(Var, Var),
    AttentionPool {
        query: Var,
        keys: Vec<Var>,
        values: Vec<Var>,
        heads: usize,
        scale: T,
        weights: Vec<Vec<Vec<T>>>,
    },
    SparseMatMul {
        rows: Vec<Vec<(usize, T)>>,
        weight: Var,
    },
    Nll {
        input: Var,
        targets: Vec<usize>,
        weights: Vec<T>,
        floor: T,
    },
    SupCon {
        input: Var,
        labels: Vec<bool>,
        temperature: T,
    },
    BceLogits {
        input: Var,
        targets: Vec<T>,
    },
    L2NormRows(Var),
    Reshape(Var),
    Sum(Var),
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

/// Gradients keyed by parameter id.
#[derive(Debug, Default)]
pub struct Gradients<T> {
    by_param: HashMap<ParamId, Matrix<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Matrix<T>> {
        self.by_param.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Matrix<T>)> {
        self.by_param.iter()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf for a stored parameter; repeated requests return the same node.
    pub fn param(&mut self, store: &ParameterStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Leaf, !store.is_frozen(id));
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let rg = self.grad_any(&[a, b]);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_bt(self.value(b));
        let rg = self.grad_any(&[a, b]);
        self.push(value, Op::MatMulBt(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.grad_any(&[a, b]);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.grad_any(&[a, b]);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.grad_any(&[a, b]);
        self.push(value, Op::Mul(a, b), rg)
    }

    /// Adds a `1 × cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let mut value = self.value(a).clone();
        let bias = self.value(row).data().to_vec();
        for r in 0..value.rows() {
            for (v, &b) in value.row_mut(r).iter_mut().zip(&bias) {
                *v += b;
            }
        }
        let rg = self.grad_any(&[a, row]);
        self.push(value, Op::AddRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let value = self.value(a).scale(k);
        let rg = self.grad_any(&[a]);
        self.push(value, Op::Scale(a, k), rg)
    }

    /// Multiplies `a` by the single value held in the 1×1 node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let k = self.value(s).item();
        let value = self.value(a).scale(k);
        let rg = self.grad_any(&[a, s]);
        self.push(value, Op::ScaleBy(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(T::zero()));
        let rg = self.grad_any(&[a]);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(T::tanh);
        let rg = self.grad_any(&[a]);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let mut value = Matrix::zeros(src.rows(), src.cols());
        for r in 0..src.rows() {
            value.row_mut(r).copy_from_slice(&softmax(src.row(r)));
        }
        let rg = self.grad_any(&[a]);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let mut value = Matrix::zeros(src.rows(), src.cols());
        for r in 0..src.rows() {
            let row = src.row(r);
            let lse = crate::tensor::log_sum_exp(row.iter().copied());
            for (o, &x) in value.row_mut(r).iter_mut().zip(row) {
                *o = x - lse;
            }
        }
        let rg = self.grad_any(&[a]);
        self.push(value, Op::LogSoftmaxRows(a), rg)
    }

    /// Row-wise log-softmax over the entries where `support` (row-major, same shape as `a`)
    /// is true; the rest are `-inf`, and a row with empty support is all `-inf`.
    pub fn masked_log_softmax_rows(&mut self, a: Var, support: &[bool]) -> Var {
        let src = self.value(a);
        let cols = src.cols();
        assert_eq!(support.len(), src.rows() * cols, "support shape mismatch");
        let mut value = Matrix::zeros(src.rows(), cols);
        for r in 0..src.rows() {
            let keep = &support[r * cols..(r + 1) * cols];
            let row = src.row(r);
            let lse = crate::tensor::log_sum_exp(
                row.iter().zip(keep).filter(|(_, &k)| k).map(|(&x, _)| x),
            );
            for ((o, &x), &k) in value.row_mut(r).iter_mut().zip(row).zip(keep) {
                *o = if k { x - lse } else { T::neg_infinity() };
            }
        }
        let rg = self.grad_any(&[a]);
        // the log-softmax backward only reads the output, and exp(-inf) = 0 off the support
        self.push(value, Op::LogSoftmaxRows(a), rg)
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let value = self.value(a).gather_rows(&idx);
        let rg = self.grad_any(&[a]);
        self.push(value, Op::GatherRows(a, idx), rg)
    }

    /// Sums row `i` of `a` into output row `idx[i]` of an `out_rows`-row result.
    pub fn scatter_add_rows(&mut self, a: Var, idx: Vec<usize>, out_rows: usize) -> Var {
        let src = self.value(a);
        let mut value = Matrix::zeros(out_rows, src.cols());
        for (i, &dst) in idx.iter().enumerate() {
            for (o, &x) in value.row_mut(dst).iter_mut().zip(src.row(i)) {
                *o += x;
            }
        }
        let rg = self.grad_any(&[a]);
        self.push(value, Op::ScatterAddRows(a, idx), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::concat_cols(&mats).expect("concat_cols row mismatch");
        let rg = self.grad_any(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Row-wise circular correlation of `a` and `b`.
    pub fn circular_correlation(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let mut value = Matrix::zeros(va.rows(), va.cols());
        for r in 0..va.rows() {
            kernels::circular_correlation(va.row(r), vb.row(r), value.row_mut(r));
        }
        let rg = self.grad_any(&[a, b]);
        self.push(value, Op::CircCorr(a, b), rg)
    }

    pub fn attention_pool(
        &mut self,
        query: Var,
        keys: &[Var],
        values: &[Var],
        heads: usize,
        scale: T,
    ) -> Var {
        let ks: Vec<&Matrix<T>> = keys.iter().map(|&k| self.value(k)).collect();
        let vs: Vec<&Matrix<T>> = values.iter().map(|&v| self.value(v)).collect();
        let out = kernels::attention_pool(self.value(query), &ks, &vs, heads, scale);
        let mut all = vec![query];
        all.extend_from_slice(keys);
        all.extend_from_slice(values);
        let rg = self.grad_any(&all);
        self.push(
            out.pooled,
            Op::AttentionPool {
                query,
                keys: keys.to_vec(),
                values: values.to_vec(),
                heads,
                scale,
                weights: out.weights,
            },
            rg,
        )
    }

    /// `out[i] = Σ_(col, x) ∈ rows[i]  x · weight[col]` for sparse constant rows.
    pub fn sparse_matmul(&mut self, rows: Vec<Vec<(usize, T)>>, weight: Var) -> Var {
        let w = self.value(weight);
        let mut value = Matrix::zeros(rows.len(), w.cols());
        for (i, row) in rows.iter().enumerate() {
            for &(col, x) in row {
                for (o, &wv) in value.row_mut(i).iter_mut().zip(w.row(col)) {
                    *o += x * wv;
                }
            }
        }
        let rg = self.grad_any(&[weight]);
        self.push(value, Op::SparseMatMul { rows, weight }, rg)
    }

    /// `Σ_i weights[i] · −max(input[i, targets[i]], floor)` as a 1×1 node.
    pub fn weighted_nll(
        &mut self,
        input: Var,
        targets: Vec<usize>,
        weights: Vec<T>,
        floor: T,
    ) -> Var {
        let src = self.value(input);
        let mut total = T::zero();
        for (i, (&t, &w)) in targets.iter().zip(&weights).enumerate() {
            if w != T::zero() {
                total -= w * src.get(i, t).max(floor);
            }
        }
        let rg = self.grad_any(&[input]);
        self.push(
            Matrix::scalar(total),
            Op::Nll {
                input,
                targets,
                weights,
                floor,
            },
            rg,
        )
    }

    pub fn supervised_contrastive(&mut self, input: Var, labels: Vec<bool>, temperature: T) -> Var {
        let total = kernels::supervised_contrastive(self.value(input), &labels, temperature);
        let rg = self.grad_any(&[input]);
        self.push(
            Matrix::scalar(total),
            Op::SupCon {
                input,
                labels,
                temperature,
            },
            rg,
        )
    }

    /// Mean binary cross-entropy of an `n × 1` logit column.
    pub fn bce_with_logits(&mut self, input: Var, targets: Vec<T>) -> Var {
        let total = kernels::bce_with_logits(self.value(input).data(), &targets);
        let rg = self.grad_any(&[input]);
        self.push(Matrix::scalar(total), Op::BceLogits { input, targets }, rg)
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let mut value = src.clone();
        for r in 0..value.rows() {
            let n = row_norm(src.row(r));
            for x in value.row_mut(r) {
                *x /= n;
            }
        }
        let rg = self.grad_any(&[a]);
        self.push(value, Op::L2NormRows(a), rg)
    }

    /// Same data, new shape (row-major order is kept).
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let value =
            Matrix::from_vec(rows, cols, self.value(a).data().to_vec()).expect("reshape size");
        let rg = self.grad_any(&[a]);
        self.push(value, Op::Reshape(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        let rg = self.grad_any(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    /// Back-propagates from the 1×1 node `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let send = |v: Var, delta: Matrix<T>, grads: &mut Vec<Option<Matrix<T>>>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&delta),
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    if self.nodes[a.0].requires_grad {
                        send(*a, g.matmul_bt(vb), &mut grads);
                    }
                    if self.nodes[b.0].requires_grad {
                        send(*b, va.matmul_at(&g), &mut grads);
                    }
                }
                Op::MatMulBt(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    if self.nodes[a.0].requires_grad {
                        send(*a, g.matmul(vb), &mut grads);
                    }
                    if self.nodes[b.0].requires_grad {
                        send(*b, g.matmul_at(va), &mut grads);
                    }
                }
                Op::Add(a, b) => {
                    send(*a, g.clone(), &mut grads);
                    send(*b, g, &mut grads);
                }
                Op::Sub(a, b) => {
                    send(*a, g.clone(), &mut grads);
                    send(*b, g.scale(-T::one()), &mut grads);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    send(*a, g.zip_map(vb, |x, y| x * y), &mut grads);
                    send(*b, g.zip_map(va, |x, y| x * y), &mut grads);
                }
                Op::AddRow(a, row) => {
                    let mut col_sums = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (s, &x) in col_sums.row_mut(0).iter_mut().zip(g.row(r)) {
                            *s += x;
                        }
                    }
                    send(*row, col_sums, &mut grads);
                    send(*a, g, &mut grads);
                }
                Op::Scale(a, k) => send(*a, g.scale(*k), &mut grads),
                Op::ScaleBy(a, s) => {
                    let k = self.value(*s).item();
                    let ds = g
                        .data()
                        .iter()
                        .zip(self.value(*a).data())
                        .fold(T::zero(), |acc, (&x, &y)| acc + x * y);
                    send(*s, Matrix::scalar(ds), &mut grads);
                    send(*a, g.scale(k), &mut grads);
                }
                Op::Relu(a) => {
                    let va = self.value(*a);
                    send(
                        *a,
                        g.zip_map(va, |x, y| if y > T::zero() { x } else { T::zero() }),
                        &mut grads,
                    );
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    send(*a, g.zip_map(y, |x, t| x * (T::one() - t * t)), &mut grads);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut d = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let inner = crate::tensor::dot(g.row(r), y.row(r));
                        for ((o, &gy), &yy) in d.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                            *o = yy * (gy - inner);
                        }
                    }
                    send(*a, d, &mut grads);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &node.value;
                    let mut d = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let gsum: T = g.row(r).iter().copied().sum();
                        for ((o, &gy), &ly) in d.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                            *o = gy - ly.exp() * gsum;
                        }
                    }
                    send(*a, d, &mut grads);
                }
                Op::GatherRows(a, idx) => {
                    let src = self.value(*a);
                    let mut d = Matrix::zeros(src.rows(), src.cols());
                    for (k, &r) in idx.iter().enumerate() {
                        for (o, &x) in d.row_mut(r).iter_mut().zip(g.row(k)) {
                            *o += x;
                        }
                    }
                    send(*a, d, &mut grads);
                }
                Op::ScatterAddRows(a, idx) => {
                    send(*a, g.gather_rows(idx), &mut grads);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        if self.nodes[p.0].requires_grad {
                            let mut d = Matrix::zeros(g.rows(), w);
                            for r in 0..g.rows() {
                                d.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + w]);
                            }
                            send(p, d, &mut grads);
                        }
                        offset += w;
                    }
                }
                Op::CircCorr(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let dim = va.cols();
                    let mut da = Matrix::zeros(va.rows(), dim);
                    let mut db = Matrix::zeros(vb.rows(), dim);
                    for r in 0..va.rows() {
                        let (ga, ar, br) = (g.row(r), va.row(r), vb.row(r));
                        for k in 0..dim {
                            for i in 0..dim {
                                let j = (i + k) % dim;
                                let da_i = da.get(r, i) + ga[k] * br[j];
                                da.set(r, i, da_i);
                                let db_j = db.get(r, j) + ga[k] * ar[i];
                                db.set(r, j, db_j);
                            }
                        }
                    }
                    send(*a, da, &mut grads);
                    send(*b, db, &mut grads);
                }
                Op::AttentionPool {
                    query,
                    keys,
                    values,
                    heads,
                    scale,
                    weights,
                } => {
                    let q = self.value(*query);
                    let (rows, cols) = q.shape();
                    let width = cols / heads;
                    let mut dq = Matrix::zeros(rows, cols);
                    let mut dk: Vec<Matrix<T>> =
                        keys.iter().map(|_| Matrix::zeros(rows, cols)).collect();
                    let mut dv: Vec<Matrix<T>> =
                        values.iter().map(|_| Matrix::zeros(rows, cols)).collect();
                    for r in 0..rows {
                        for h in 0..*heads {
                            let span = h * width..(h + 1) * width;
                            let w = &weights[r][h];
                            let gr = &g.row(r)[span.clone()];
                            let dw: Vec<T> = values
                                .iter()
                                .map(|&v| {
                                    crate::tensor::dot(gr, &self.value(v).row(r)[span.clone()])
                                })
                                .collect();
                            let inner = w
                                .iter()
                                .zip(&dw)
                                .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                            for j in 0..keys.len() {
                                let ds = w[j] * (dw[j] - inner) * *scale;
                                let kr = self.value(keys[j]).row(r);
                                for c in span.clone() {
                                    let x = dq.get(r, c) + ds * kr[c];
                                    dq.set(r, c, x);
                                    let y = dk[j].get(r, c) + ds * q.get(r, c);
                                    dk[j].set(r, c, y);
                                    let z = dv[j].get(r, c) + w[j] * g.get(r, c);
                                    dv[j].set(r, c, z);
                                }
                            }
                        }
                    }
                    send(*query, dq, &mut grads);
                    for (&k, d) in keys.iter().zip(dk) {
                        send(k, d, &mut grads);
                    }
                    for (&v, d) in values.iter().zip(dv) {
                        send(v, d, &mut grads);
                    }
                }
                Op::SparseMatMul { rows, weight } => {
                    let w = self.value(*weight);
                    let mut d = Matrix::zeros(w.rows(), w.cols());
                    for (i, row) in rows.iter().enumerate() {
                        for &(col, x) in row {
                            for (o, &gv) in d.row_mut(col).iter_mut().zip(g.row(i)) {
                                *o += x * gv;
                            }
                        }
                    }
                    send(*weight, d, &mut grads);
                }
                Op::Nll {
                    input,
                    targets,
                    weights,
                    floor,
                } => {
                    let src = self.value(*input);
                    let up = g.item();
                    let mut d = Matrix::zeros(src.rows(), src.cols());
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w != T::zero() && src.get(r, t) > *floor {
                            d.set(r, t, -w * up);
                        }
                    }
                    send(*input, d, &mut grads);
                }
                Op::SupCon {
                    input,
                    labels,
                    temperature,
                } => {
                    let d = kernels::supervised_contrastive_grad(
                        self.value(*input),
                        labels,
                        *temperature,
                    );
                    send(*input, d.scale(g.item()), &mut grads);
                }
                Op::BceLogits { input, targets } => {
                    let z = self.value(*input);
                    let n = T::of(targets.len().max(1) as f64);
                    let up = g.item();
                    let data = z
                        .data()
                        .iter()
                        .zip(targets)
                        .map(|(&zi, &y)| (kernels::sigmoid(zi) - y) / n * up)
                        .collect();
                    send(
                        *input,
                        Matrix::from_vec(z.rows(), z.cols(), data).expect("shape"),
                        &mut grads,
                    );
                }
                Op::L2NormRows(a) => {
                    let x = self.value(*a);
                    let y = &node.value;
                    let mut d = Matrix::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let n = row_norm(x.row(r));
                        let inner = crate::tensor::dot(y.row(r), g.row(r));
                        for ((o, &gy), &yy) in d.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                            *o = (gy - yy * inner) / n;
                        }
                    }
                    send(*a, d, &mut grads);
                }
                Op::Reshape(a) => {
                    let (r, c) = self.value(*a).shape();
                    send(
                        *a,
                        Matrix::from_vec(r, c, g.into_vec()).expect("shape"),
                        &mut grads,
                    );
                }
                Op::Sum(a) => {
                    let src = self.value(*a);
                    send(
                        *a,
                        Matrix::filled(src.rows(), src.cols(), g.item()),
                        &mut grads,
                    );
                }
            }
        }

        let by_param = self
            .params
            .iter()
            .filter_map(|(&id, &v)| grads[v.0].take().map(|g| (id, g)))
            .collect();
        Gradients { by_param }
    }
}

fn row_norm<T: Scalar>(row: &[T]) -> T {
    let n = row.iter().map(|&x| x * x).sum::<T>().sqrt();
    n.max(T::of(1e-12))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;

    const PROB_FLOOR_LN: f64 = -27.631021115928547;

    fn finite_difference(
        store: &mut ParameterStore<f64>,
        id: ParamId,
        f: &dyn Fn(&ParameterStore<f64>) -> f64,
    ) -> Matrix<f64> {
        let h = 1e-6;
        let shape = store.value(id).shape();
        let mut out = Matrix::zeros(shape.0, shape.1);
        for k in 0..shape.0 * shape.1 {
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + h;
            let up = f(store);
            store.value_mut(id).data_mut()[k] = orig - h;
            let down = f(store);
            store.value_mut(id).data_mut()[k] = orig;
            out.data_mut()[k] = (up - down) / (2.0 * h);
        }
        out
    }

    fn rel_err(a: &Matrix<f64>, b: &Matrix<f64>) -> f64 {
        let diff = a.zip_map(b, |x, y| x - y).norm();
        diff / a.norm().max(b.norm()).max(1e-12)
    }

    #[test]
    fn composite_graph_matches_finite_differences() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut store = ParameterStore::<f64>::new();
        let x = store.insert_glorot("x", ParamGroup::Structural, 4, 4, &mut rng);
        let w = store.insert_glorot("w", ParamGroup::Temporal, 4, 4, &mut rng);
        let b = store.insert_glorot("b", ParamGroup::Temporal, 1, 4, &mut rng);
        let k = store.insert_glorot("k", ParamGroup::Decoder, 4, 4, &mut rng);

        let forward = |store: &ParameterStore<f64>| -> (Tape<f64>, Var) {
            let mut t = Tape::new();
            let (xv, wv, bv, kv) = (
                t.param(store, x),
                t.param(store, w),
                t.param(store, b),
                t.param(store, k),
            );
            let h = t.matmul(xv, wv);
            let h = t.add_row(h, bv);
            let h = t.tanh(h);
            let c = t.circular_correlation(h, xv);
            let g = t.gather_rows(c, vec![0, 2, 2, 3]);
            let s = t.scatter_add_rows(g, vec![1, 1, 0, 3], 4);
            let keys = [t.matmul(xv, kv), t.matmul(h, kv)];
            let pooled = t.attention_pool(s, &keys, &[h, xv], 2, 0.5);
            let cat = t.concat_cols(&[pooled, h]);
            let n = t.l2_normalize_rows(cat);
            let sc = t.supervised_contrastive(n, vec![true, false, true, true], 0.3);
            let lg = t.matmul_bt(h, s);
            let ls = t.log_softmax_rows(lg);
            let nll = t.weighted_nll(ls, vec![0, 1, 2, 3], vec![1.0, 0.5, 0.0, 2.0], -1e9);
            let sm = t.softmax_rows(lg);
            let r = t.relu(sm);
            let rs = t.sum(r);
            let mut total = t.add(sc, nll);
            total = t.add(total, rs);
            let sp = t.sparse_matmul(vec![vec![(0, 1.0), (3, 2.0)], vec![(1, 4.0)]], wv);
            let spsum = t.sum(sp);
            let first = bv_first(&mut t, bv);
            let spsum = t.scale_by(spsum, first);
            total = t.add(total, spsum);
            let col = t.matmul(h, kv);
            let col = t.gather_rows(col, vec![0, 1]);
            let logits = t.concat_cols(&[col]);
            let logits = t.matmul(logits, wv);
            let z = t.sub(logits, logits);
            let zz = t.mul(z, logits);
            let bsum = t.sum(zz);
            total = t.add(total, bsum);
            (t, total)
        };

        fn bv_first(t: &mut Tape<f64>, bv: Var) -> Var {
            let c = t.constant(Matrix::from_f64(4, 1, &[1.0, 0.0, 0.0, 0.0]).unwrap());
            t.matmul(bv, c)
        }

        let (tape, loss) = forward(&store);
        let grads = tape.backward(loss);
        for id in [x, w, b, k] {
            let fd = finite_difference(&mut store, id, &|s| {
                let (t, l) = forward(s);
                t.value(l).item()
            });
            let err = rel_err(grads.get(id).unwrap(), &fd);
            assert!(err < 1e-6, "param {:?} rel err {err}", id);
        }
    }

    #[test]
    fn bce_gradient_matches_finite_differences() {
        let mut store = ParameterStore::<f64>::new();
        let z = store.insert(
            "z",
            ParamGroup::Classifier,
            Matrix::from_f64(3, 1, &[0.3, -2.0, 5.0]).unwrap(),
        );
        let f = |s: &ParameterStore<f64>| {
            let mut t = Tape::new();
            let v = t.param(s, z);
            let l = t.bce_with_logits(v, vec![1.0, 0.0, 0.0]);
            (t, l)
        };
        let (t, l) = f(&store);
        let g = t.backward(l);
        let fd = finite_difference(&mut store, z, &|s| {
            let (t, l) = f(s);
            t.value(l).item()
        });
        assert!(rel_err(g.get(z).unwrap(), &fd) < 1e-7);
    }

    #[test]
    fn masked_log_softmax_ignores_scale_outside_support() {
        let mut store = ParameterStore::<f64>::new();
        let x = store.insert(
            "x",
            ParamGroup::Decoder,
            Matrix::from_f64(3, 3, &[0.2, 5e12, -1.0, 0.0, 1.0, 2.0, 4.0, 4.0, 4.0]).unwrap(),
        );
        let support = [true, false, true, false, true, true, false, false, false];
        let f = |s: &ParameterStore<f64>| {
            let mut t = Tape::new();
            let v = t.param(s, x);
            let lp = t.masked_log_softmax_rows(v, &support);
            let l = t.weighted_nll(lp, vec![0, 2, 1], vec![1.0, 0.5, 0.0], PROB_FLOOR_LN);
            (t, l)
        };
        let (t, l) = f(&store);
        // row 0 is a two-way softmax over (0.2, -1.0), unaffected by the huge masked logit
        let want = (1.0 + (-1.2f64).exp()).ln() + 0.5 * (1.0 + (-1.0f64).exp()).ln();
        assert!((t.value(l).item() - want).abs() < 1e-12);
        let g = t.backward(l);
        let fd = finite_difference(&mut store, x, &|s| {
            let (t, l) = f(s);
            t.value(l).item()
        });
        assert!(g.get(x).unwrap().data().iter().all(|v| v.is_finite()));
        // the 5e12 entry makes finite differences meaningless there; compare the rest
        let (mut a, mut b) = (g.get(x).unwrap().clone(), fd);
        a.data_mut()[1] = 0.0;
        b.data_mut()[1] = 0.0;
        assert!(rel_err(&a, &b) < 1e-6);
    }

    #[test]
    fn frozen_leaves_receive_no_gradient() {
        let mut store = ParameterStore::<f64>::new();
        let a = store.insert(
            "a",
            ParamGroup::Decoder,
            Matrix::from_f64(1, 2, &[1.0, 2.0]).unwrap(),
        );
        let b = store.insert(
            "b",
            ParamGroup::Classifier,
            Matrix::from_f64(1, 2, &[3.0, 4.0]).unwrap(),
        );
        store.freeze_all_except(ParamGroup::Classifier);
        let mut t = Tape::new();
        let (va, vb) = (t.param(&store, a), t.param(&store, b));
        let m = t.mul(va, vb);
        let s = t.sum(m);
        let g = t.backward(s);
        assert!(g.get(a).is_none());
        assert_eq!(g.get(b).unwrap().data(), &[1.0, 2.0]);
    }
}
