//! Reverse-mode automatic differentiation over small dense matrices.
//!
//! Every operation appends a node holding its forward value; [`Tape::backward`]
//! walks the nodes in reverse and accumulates adjoints. Parameters enter the
//! tape through [`Tape::param`], which remembers where the slice lives in its
//! [`ParamStore`] so that [`Grads::wrt`] can scatter gradients back into a
//! flat vector aligned with the store.

use super::matrix::gemm;
use super::{Matrix, NnError, ParamStore, SliceId};
use std::sync::atomic::{AtomicUsize, Ordering};

static NEXT_TAPE_ID: AtomicUsize = AtomicUsize::new(1);

/// Handle to a node on a particular tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: usize,
    idx: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param { store: usize, offset: usize },
    MatMul(usize, usize),
    AddRow(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Min(usize, usize),
    Affine(usize, f64),
    Tanh(usize),
    Exp(usize),
    Sigmoid(usize),
    Ln(usize),
    Square(usize),
    Recip(usize),
    Clamp(usize, f64, f64),
    Sum(usize),
    Mean(usize),
    SumCols(usize),
    MeanCols(usize),
    LogSoftmax(usize),
    Gather(usize, Vec<usize>),
    SelectCols(usize, Vec<usize>),
    QuantileHuber {
        pred: usize,
        targets: Matrix,
        fractions: Vec<f64>,
        kappa: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Recording of a computation graph.
#[derive(Debug)]
pub struct Tape {
    id: usize,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "variable used on a foreign tape");
        v.idx
    }

    fn val(&self, v: Var) -> &Matrix {
        &self.nodes[self.idx(v)].value
    }

    pub fn value(&self, v: Var) -> &Matrix {
        self.val(v)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.val(v);
        assert!(m.is_scalar(), "not a scalar node");
        m.data[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; receives no gradient outside the tape.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Differentiable view of a parameter slice.
    pub fn param(&mut self, store: &ParamStore, id: SliceId) -> Var {
        let offset = store.meta(id).offset;
        let value = store.matrix(id);
        self.push(
            value,
            Op::Param {
                store: store.id(),
                offset,
            },
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let (ma, mb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let mut out = Matrix::zeros(ma.rows, mb.cols);
        gemm(1.0, ma, false, mb, false, 0.0, &mut out);
        self.push(out, Op::MatMul(ia, ib))
    }

    /// `a` is `n x m`, `bias` is `1 x m`; adds `bias` to every row.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (ia, ib) = (self.idx(a), self.idx(bias));
        let (ma, mb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        assert_eq!(mb.rows, 1, "bias must be a row vector");
        assert_eq!(ma.cols, mb.cols, "bias width");
        let mut out = ma.clone();
        for r in 0..out.rows {
            for (x, b) in out.row_mut(r).iter_mut().zip(&mb.data) {
                *x += *b;
            }
        }
        self.push(out, Op::AddRow(ia, ib))
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ma, mb) = (self.val(a), self.val(b));
        assert_eq!(ma.shape(), mb.shape(), "elementwise shape mismatch");
        let data = ma.data.iter().zip(&mb.data).map(|(&x, &y)| f(x, y)).collect();
        let out = Matrix::from_vec(ma.rows, ma.cols, data);
        self.push(out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let op = Op::Add(self.idx(a), self.idx(b));
        self.zip(a, b, |x, y| x + y, op)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let op = Op::Sub(self.idx(a), self.idx(b));
        self.zip(a, b, |x, y| x - y, op)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let op = Op::Mul(self.idx(a), self.idx(b));
        self.zip(a, b, |x, y| x * y, op)
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Var {
        let op = Op::Min(self.idx(a), self.idx(b));
        self.zip(a, b, f64::min, op)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.val(a).map(f);
        self.push(out, op)
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let ia = self.idx(a);
        self.unary(a, |x| scale * x + shift, Op::Affine(ia, scale))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.affine(a, -1.0, 0.0)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        self.unary(a, f64::tanh, Op::Tanh(ia))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        self.unary(a, f64::exp, Op::Exp(ia))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        self.unary(a, sigmoid, Op::Sigmoid(ia))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        self.unary(a, f64::ln, Op::Ln(ia))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        self.unary(a, |x| x * x, Op::Square(ia))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        self.unary(a, |x| 1.0 / x, Op::Recip(ia))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let ia = self.idx(a);
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(ia, lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        let s: f64 = self.val(a).data.iter().sum();
        self.push(Matrix::scalar(s), Op::Sum(ia))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        let m = self.val(a);
        let n = m.data.len().max(1) as f64;
        let s: f64 = m.data.iter().sum::<f64>() / n;
        self.push(Matrix::scalar(s), Op::Mean(ia))
    }

    /// Row sums, `n x m -> n x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        let m = self.val(a);
        let data = (0..m.rows).map(|r| m.row(r).iter().sum()).collect();
        self.push(Matrix::column(data), Op::SumCols(ia))
    }

    /// Row means, `n x m -> n x 1`.
    pub fn mean_cols(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        let m = self.val(a);
        let c = m.cols as f64;
        let data = (0..m.rows)
            .map(|r| m.row(r).iter().sum::<f64>() / c)
            .collect();
        self.push(Matrix::column(data), Op::MeanCols(ia))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        let m = self.val(a);
        let mut out = m.clone();
        for r in 0..out.rows {
            let row = out.row_mut(r);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        self.push(out, Op::LogSoftmax(ia))
    }

    /// Picks column `cols[r]` from each row `r`, `n x m -> n x 1`.
    pub fn gather(&mut self, a: Var, cols: &[usize]) -> Var {
        let ia = self.idx(a);
        let m = self.val(a);
        assert_eq!(cols.len(), m.rows, "gather index count");
        let data = cols.iter().enumerate().map(|(r, &c)| m.get(r, c)).collect();
        self.push(Matrix::column(data), Op::Gather(ia, cols.to_vec()))
    }

    /// Keeps the listed columns, `n x m -> n x k`.
    pub fn select_cols(&mut self, a: Var, cols: &[usize]) -> Var {
        let ia = self.idx(a);
        let m = self.val(a);
        let mut out = Matrix::zeros(m.rows, cols.len());
        for r in 0..m.rows {
            for (k, &c) in cols.iter().enumerate() {
                out.set(r, k, m.get(r, c));
            }
        }
        self.push(out, Op::SelectCols(ia, cols.to_vec()))
    }

    /// Mean quantile-Huber loss over all `(i, j)` pairs and rows:
    /// `1/(n * nq^2) * sum_r sum_i sum_j |u_i - 1{d<0}| L_kappa(d) / kappa`
    /// with `d = targets[r][j] - pred[r][i]`.
    pub fn quantile_huber(
        &mut self,
        pred: Var,
        targets: Matrix,
        fractions: &[f64],
        kappa: f64,
    ) -> Var {
        let ip = self.idx(pred);
        let p = self.val(pred);
        assert_eq!(p.cols, fractions.len(), "prediction width");
        assert_eq!(p.rows, targets.rows, "target rows");
        let nq = p.cols;
        let nt = targets.cols;
        let mut total = 0.0;
        for r in 0..p.rows {
            let pr = p.row(r);
            let tr = targets.row(r);
            for (i, &u) in fractions.iter().enumerate() {
                for &t in tr {
                    total += pinball_huber(t - pr[i], u, kappa);
                }
            }
        }
        let denom = (p.rows.max(1) * nq * nt) as f64;
        self.push(
            Matrix::scalar(total / denom),
            Op::QuantileHuber {
                pred: ip,
                targets,
                fractions: fractions.to_vec(),
                kappa,
            },
        )
    }

    /// Adjoints of every node with respect to the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads, NnError> {
        if loss.tape != self.id || loss.idx >= self.nodes.len() {
            return Err(NnError::UntapedVariable);
        }
        let lv = &self.nodes[loss.idx].value;
        if !lv.is_scalar() {
            return Err(NnError::NotScalar {
                rows: lv.rows,
                cols: lv.cols,
            });
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; loss.idx + 1];
        adj[loss.idx] = Some(Matrix::scalar(1.0));

        for i in (0..=loss.idx).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            let out = &node.value;
            match &node.op {
                Op::Leaf | Op::Param { .. } => {
                    adj[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (ma, mb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let ga = acc(&mut adj, *a, ma.rows, ma.cols);
                    gemm(1.0, &g, false, mb, true, 1.0, ga);
                    let gb = acc(&mut adj, *b, mb.rows, mb.cols);
                    gemm(1.0, ma, true, &g, false, 1.0, gb);
                }
                Op::AddRow(a, b) => {
                    acc(&mut adj, *a, g.rows, g.cols).add_assign(&g);
                    let gb = acc(&mut adj, *b, 1, g.cols);
                    for r in 0..g.rows {
                        for (x, y) in gb.data.iter_mut().zip(g.row(r)) {
                            *x += *y;
                        }
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut adj, *a, g.rows, g.cols).add_assign(&g);
                    acc(&mut adj, *b, g.rows, g.cols).add_assign(&g);
                }
                Op::Sub(a, b) => {
                    acc(&mut adj, *a, g.rows, g.cols).add_assign(&g);
                    let gb = acc(&mut adj, *b, g.rows, g.cols);
                    for (x, y) in gb.data.iter_mut().zip(&g.data) {
                        *x -= *y;
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    {
                        let ga = acc(&mut adj, *a, g.rows, g.cols);
                        for k in 0..g.data.len() {
                            ga.data[k] += g.data[k] * vb.data[k];
                        }
                    }
                    let gb = acc(&mut adj, *b, g.rows, g.cols);
                    for k in 0..g.data.len() {
                        gb.data[k] += g.data[k] * va.data[k];
                    }
                }
                Op::Min(a, b) => {
                    let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let pick_a: Vec<bool> =
                        va.data.iter().zip(&vb.data).map(|(x, y)| x <= y).collect();
                    {
                        let ga = acc(&mut adj, *a, g.rows, g.cols);
                        for k in 0..g.data.len() {
                            if pick_a[k] {
                                ga.data[k] += g.data[k];
                            }
                        }
                    }
                    let gb = acc(&mut adj, *b, g.rows, g.cols);
                    for k in 0..g.data.len() {
                        if !pick_a[k] {
                            gb.data[k] += g.data[k];
                        }
                    }
                }
                Op::Affine(a, s) => {
                    let ga = acc(&mut adj, *a, g.rows, g.cols);
                    for (x, y) in ga.data.iter_mut().zip(&g.data) {
                        *x += s * y;
                    }
                }
                Op::Tanh(a) => {
                    elementwise(&mut adj, *a, &g, |k| 1.0 - out.data[k] * out.data[k]);
                }
                Op::Exp(a) => elementwise(&mut adj, *a, &g, |k| out.data[k]),
                Op::Sigmoid(a) => {
                    elementwise(&mut adj, *a, &g, |k| out.data[k] * (1.0 - out.data[k]))
                }
                Op::Ln(a) => {
                    let x = &self.nodes[*a].value;
                    elementwise(&mut adj, *a, &g, |k| 1.0 / x.data[k]);
                }
                Op::Square(a) => {
                    let x = &self.nodes[*a].value;
                    elementwise(&mut adj, *a, &g, |k| 2.0 * x.data[k]);
                }
                Op::Recip(a) => {
                    elementwise(&mut adj, *a, &g, |k| -out.data[k] * out.data[k]);
                }
                Op::Clamp(a, lo, hi) => {
                    let x = &self.nodes[*a].value;
                    elementwise(&mut adj, *a, &g, |k| {
                        let v = x.data[k];
                        if v < *lo || v > *hi {
                            0.0
                        } else {
                            1.0
                        }
                    });
                }
                Op::Sum(a) => {
                    let s = g.data[0];
                    let x = &self.nodes[*a].value;
                    let ga = acc(&mut adj, *a, x.rows, x.cols);
                    for v in ga.data.iter_mut() {
                        *v += s;
                    }
                }
                Op::Mean(a) => {
                    let x = &self.nodes[*a].value;
                    let s = g.data[0] / (x.data.len().max(1) as f64);
                    let ga = acc(&mut adj, *a, x.rows, x.cols);
                    for v in ga.data.iter_mut() {
                        *v += s;
                    }
                }
                Op::SumCols(a) | Op::MeanCols(a) => {
                    let x = &self.nodes[*a].value;
                    let w = if matches!(node.op, Op::MeanCols(_)) {
                        1.0 / x.cols as f64
                    } else {
                        1.0
                    };
                    let ga = acc(&mut adj, *a, x.rows, x.cols);
                    for r in 0..x.rows {
                        let gr = g.data[r] * w;
                        for v in ga.row_mut(r) {
                            *v += gr;
                        }
                    }
                }
                Op::LogSoftmax(a) => {
                    let ga = acc(&mut adj, *a, g.rows, g.cols);
                    for r in 0..g.rows {
                        let gs: f64 = g.row(r).iter().sum();
                        let yr = out.row(r);
                        let gr = g.row(r);
                        for (c, v) in ga.row_mut(r).iter_mut().enumerate() {
                            *v += gr[c] - yr[c].exp() * gs;
                        }
                    }
                }
                Op::Gather(a, cols) => {
                    let x = &self.nodes[*a].value;
                    let ga = acc(&mut adj, *a, x.rows, x.cols);
                    for (r, &c) in cols.iter().enumerate() {
                        ga.data[r * x.cols + c] += g.data[r];
                    }
                }
                Op::SelectCols(a, cols) => {
                    let x = &self.nodes[*a].value;
                    let ga = acc(&mut adj, *a, x.rows, x.cols);
                    for r in 0..x.rows {
                        for (k, &c) in cols.iter().enumerate() {
                            ga.data[r * x.cols + c] += g.get(r, k);
                        }
                    }
                }
                Op::QuantileHuber {
                    pred,
                    targets,
                    fractions,
                    kappa,
                } => {
                    let p = &self.nodes[*pred].value;
                    let denom = (p.rows.max(1) * p.cols * targets.cols) as f64;
                    let s = g.data[0] / denom;
                    let gp = acc(&mut adj, *pred, p.rows, p.cols);
                    for r in 0..p.rows {
                        let tr = targets.row(r);
                        for (i, &u) in fractions.iter().enumerate() {
                            let q = p.get(r, i);
                            let d: f64 = tr.iter().map(|&t| pinball_huber_grad(t - q, u, *kappa)).sum();
                            // d(loss)/d(pred) = -d(loss)/d(delta)
                            gp.data[r * p.cols + i] -= s * d;
                        }
                    }
                }
            }
            adj[i] = Some(g);
        }
        Ok(Grads {
            tape: self.id,
            adj,
            params: self
                .nodes
                .iter()
                .enumerate()
                .filter_map(|(i, n)| match n.op {
                    Op::Param { store, offset } => Some((i, store, offset)),
                    _ => None,
                })
                .collect(),
        })
    }
}

fn acc(adj: &mut [Option<Matrix>], i: usize, rows: usize, cols: usize) -> &mut Matrix {
    adj[i].get_or_insert_with(|| Matrix::zeros(rows, cols))
}

fn elementwise(adj: &mut [Option<Matrix>], a: usize, g: &Matrix, d: impl Fn(usize) -> f64) {
    let ga = acc(adj, a, g.rows, g.cols);
    for k in 0..g.data.len() {
        ga.data[k] += g.data[k] * d(k);
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn pinball_huber(d: f64, u: f64, kappa: f64) -> f64 {
    let w = if d < 0.0 { 1.0 - u } else { u };
    let a = d.abs();
    let l = if a <= kappa {
        0.5 * d * d
    } else {
        kappa * (a - 0.5 * kappa)
    };
    w * l / kappa
}

fn pinball_huber_grad(d: f64, u: f64, kappa: f64) -> f64 {
    let w = if d < 0.0 { 1.0 - u } else { u };
    w * d.clamp(-kappa, kappa) / kappa
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Grads {
    tape: usize,
    adj: Vec<Option<Matrix>>,
    params: Vec<(usize, usize, usize)>,
}

impl Grads {
    /// Adjoint of any node, or `None` if the loss does not depend on it.
    pub fn of(&self, v: Var) -> Option<&Matrix> {
        if v.tape != self.tape {
            return None;
        }
        self.adj.get(v.idx).and_then(|m| m.as_ref())
    }

    /// Flat gradient aligned with `store`; parameters of other stores are ignored.
    pub fn wrt(&self, store: &ParamStore) -> Vec<f64> {
        let mut out = vec![0.0; store.len()];
        for &(node, sid, offset) in &self.params {
            if sid != store.id() {
                continue;
            }
            if let Some(Some(g)) = self.adj.get(node) {
                for (k, v) in g.data.iter().enumerate() {
                    out[offset + k] += *v;
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let mut store = ParamStore::new();
        let id = store.add_zeros("p", 1, 2);
        store.slice_mut(id).copy_from_slice(&[1.0, 2.0]);
        let mut t = Tape::new();
        let p = t.param(&store, id);
        let sq = t.square(p);
        let loss = t.sum(sq);
        assert_eq!(t.scalar(loss), 5.0);
        let g = t.backward(loss).unwrap().wrt(&store);
        assert_eq!(g, vec![2.0, 4.0]);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("p", 1, 3, || 0.7);
        let mut t = Tape::new();
        let _p = t.param(&store, id);
        let c = t.constant(Matrix::scalar(3.0));
        let g = t.backward(c).unwrap().wrt(&store);
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn non_scalar_and_foreign_losses_are_rejected() {
        let mut t = Tape::new();
        let v = t.constant(Matrix::zeros(2, 2));
        assert_eq!(
            t.backward(v).unwrap_err(),
            NnError::NotScalar { rows: 2, cols: 2 }
        );
        let mut other = Tape::new();
        let w = other.constant(Matrix::scalar(1.0));
        assert_eq!(t.backward(w).unwrap_err(), NnError::UntapedVariable);
    }

    #[test]
    fn gradients_of_two_stores_are_separated() {
        let mut a = ParamStore::new();
        let ia = a.add("a", 1, 1, || 3.0);
        let mut b = ParamStore::new();
        let ib = b.add("b", 1, 1, || 5.0);
        let mut t = Tape::new();
        let va = t.param(&a, ia);
        let vb = t.param(&b, ib);
        let prod = t.mul(va, vb);
        let loss = t.sum(prod);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.wrt(&a), vec![5.0]);
        assert_eq!(g.wrt(&b), vec![3.0]);
    }

    fn check_fd(build: impl Fn(&mut Tape, Var) -> Var, x0: Matrix) {
        let mut t = Tape::new();
        let x = t.constant(x0.clone());
        let loss = build(&mut t, x);
        let g = t.backward(loss).unwrap().of(x).cloned().unwrap_or(Matrix::zeros(x0.rows, x0.cols));
        let h = 1e-6;
        for k in 0..x0.data.len() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.data[k] += delta;
                let mut t = Tape::new();
                let x = t.constant(xp);
                let l = build(&mut t, x);
                t.scalar(l)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            assert!(
                (fd - g.data[k]).abs() <= 1e-6 * (1.0 + fd.abs()),
                "component {k}: fd {fd} vs tape {}",
                g.data[k]
            );
        }
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let x0 = Matrix::from_vec(2, 3, vec![0.3, -0.7, 1.2, 0.5, 2.0, -1.5]);
        check_fd(
            |t, x| {
                let a = t.tanh(x);
                let b = t.sigmoid(x);
                let c = t.mul(a, b);
                let e = t.exp(c);
                let sq = t.square(x);
                let s = t.affine(sq, 0.5, 1.0);
                let l = t.ln(s);
                let r = t.recip(s);
                let m = t.min(l, r);
                let z = t.add(e, m);
                let z = t.sub(z, a);
                t.mean(z)
            },
            x0,
        );
    }

    #[test]
    fn reductions_and_selection_match_finite_differences() {
        let x0 = Matrix::from_vec(3, 4, (0..12).map(|k| (k as f64 * 0.37).sin()).collect());
        check_fd(
            |t, x| {
                let ls = t.log_softmax(x);
                let g = t.gather(ls, &[0, 3, 2]);
                let sel = t.select_cols(x, &[1, 2]);
                let rs = t.sum_cols(sel);
                let rm = t.mean_cols(x);
                let a = t.add(g, rs);
                let b = t.mul(a, rm);
                let c = t.clamp(b, -0.2, 0.2);
                let d = t.add(b, c);
                t.sum(d)
            },
            x0,
        );
    }

    #[test]
    fn matmul_and_bias_match_finite_differences() {
        let w = Matrix::from_vec(3, 2, vec![0.2, -0.4, 0.9, 0.1, -0.3, 0.5]);
        let x0 = Matrix::from_vec(2, 3, vec![1.0, 0.5, -0.5, 0.25, -1.0, 2.0]);
        check_fd(
            move |t, x| {
                let wv = t.constant(w.clone());
                let b = t.constant(Matrix::row_vector(vec![0.1, -0.2]));
                let h = t.matmul(x, wv);
                let h = t.add_row(h, b);
                let h = t.tanh(h);
                let hs = t.square(h);
                t.sum(hs)
            },
            x0.clone(),
        );
        // gradient with respect to the right-hand factor too
        let x = Matrix::from_vec(2, 3, vec![1.0, 0.5, -0.5, 0.25, -1.0, 2.0]);
        check_fd(
            move |t, w| {
                let xv = t.constant(x.clone());
                let h = t.matmul(xv, w);
                let h = t.sigmoid(h);
                t.sum(h)
            },
            Matrix::from_vec(3, 2, vec![0.2, -0.4, 0.9, 0.1, -0.3, 0.5]),
        );
    }

    #[test]
    fn quantile_huber_matches_finite_differences() {
        let targets = Matrix::from_vec(2, 3, vec![0.1, 0.9, 2.5, -0.3, 0.0, 1.0]);
        let fr = [0.2, 0.5, 0.8];
        // predictions chosen away from kinks at |d| = kappa and d = 0
        let x0 = Matrix::from_vec(2, 3, vec![0.33, 1.17, 1.93, 0.41, -0.62, 0.77]);
        check_fd(
            move |t, x| t.quantile_huber(x, targets.clone(), &fr, 0.5),
            x0,
        );
    }

    #[test]
    fn quantile_huber_zero_when_all_deltas_zero() {
        let mut t = Tape::new();
        let p = t.constant(Matrix::zeros(4, 2));
        let l = t.quantile_huber(p, Matrix::zeros(4, 2), &[0.25, 0.75], 1.0);
        assert_eq!(t.scalar(l), 0.0);
    }
}
