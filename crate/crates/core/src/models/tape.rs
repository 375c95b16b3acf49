//! Reverse-mode automatic differentiation over 2-D arrays.
//!
//! A [`Tape`] records each operation with its forward value; [`Tape::backward`]
//! walks the records in reverse and accumulates gradients. Leaves are either
//! trainable (gradients requested) or constants. Nodes that depend on no
//! trainable leaf skip gradient work entirely, which is how a frozen model
//! participates in a composite graph.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use ndarray::{s, Array2, Axis, LinalgScalar, ScalarOperand, Zip};
use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type usable on the tape.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    /// Name recorded in checkpoints.
    const DTYPE: &'static str;
    const BYTES: usize;

    fn from_f64_lossy(x: f64) -> Self;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn from_f64_lossy(x: f64) -> Self {
        x as f32
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn from_f64_lossy(x: f64) -> Self {
        x
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    /// `x + row` with `row` broadcast over the rows of `x`.
    AddRow(Var, Var),
    Relu(Var),
    /// Elementwise product with a constant (dropout masks).
    Mask(Var, Array2<T>),
    TileRows(Var, usize),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<T>,
        inv_std: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        batch: usize,
        probs: Vec<Array2<T>>,
    },
    /// Mean squared error against a constant target; value is `[1 x 1]`.
    Mse(Var, Array2<T>),
}

struct Node<T> {
    value: Array2<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Gradients returned by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Array2<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Array2<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<T>> {
        self.grads[v.0].take()
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Array2<T>>], v: Var, g: Array2<T>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is wanted.
    pub fn param(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let ng = self.any(&[a, b]);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let ng = self.any(&[a, b]);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row expects a [1 x n] row");
        let value = self.value(x) + self.value(row);
        let ng = self.any(&[x, row]);
        self.push(value, Op::AddRow(x, row), ng)
    }

    /// `x . w + b`
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| if v > T::zero() { v } else { T::zero() });
        let ng = self.any(&[x]);
        self.push(value, Op::Relu(x), ng)
    }

    pub fn mask(&mut self, x: Var, mask: Array2<T>) -> Var {
        let value = self.value(x) * &mask;
        let ng = self.any(&[x]);
        self.push(value, Op::Mask(x, mask), ng)
    }

    /// Stack `times` copies of `x` vertically.
    pub fn tile_rows(&mut self, x: Var, times: usize) -> Var {
        let src = self.value(x);
        let (r, c) = src.dim();
        let mut value = Array2::<T>::zeros((r * times, c));
        for t in 0..times {
            value.slice_mut(s![t * r..(t + 1) * r, ..]).assign(src);
        }
        let ng = self.any(&[x]);
        self.push(value, Op::TileRows(x, times), ng)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` rows.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, d) = xv.dim();
        let eps = T::from_f64_lossy(LN_EPS);
        let dn = T::from_usize(d).unwrap();
        let mut xhat = Array2::<T>::zeros((rows, d));
        let mut inv_std = Vec::with_capacity(rows);
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (o, &v) in xhat.row_mut(i).iter_mut().zip(row.iter()) {
                *o = (v - mean) * is;
            }
        }
        let value = &xhat * self.value(gamma) + self.value(beta);
        let ng = self.any(&[x, gamma, beta]);
        self.push(
            value,
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

    /// Multi-head scaled dot-product attention over `batch` independent
    /// samples stacked along the rows. `q` is `[batch*tq x d]`, `k` and `v`
    /// are `[batch*tk x d]`. No masking: every query sees every key.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, batch: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.ncols();
        assert!(d % heads == 0 && kv.ncols() == d && vv.ncols() == d);
        assert!(qv.nrows() % batch == 0 && kv.nrows() % batch == 0);
        assert_eq!(kv.nrows(), vv.nrows());
        let (tq, tk, dh) = (qv.nrows() / batch, kv.nrows() / batch, d / heads);
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let mut out = Array2::<T>::zeros(qv.dim());
        let mut probs = Vec::with_capacity(batch * heads);
        for b in 0..batch {
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let qb = qv.slice(s![b * tq..(b + 1) * tq, cols.clone()]);
                let kb = kv.slice(s![b * tk..(b + 1) * tk, cols.clone()]);
                let vb = vv.slice(s![b * tk..(b + 1) * tk, cols.clone()]);
                let mut p = qb.dot(&kb.t()) * scale;
                for mut row in p.rows_mut() {
                    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                    row.mapv_inplace(|x| (x - m).exp());
                    let z = row.sum();
                    row.mapv_inplace(|x| x / z);
                }
                out.slice_mut(s![b * tq..(b + 1) * tq, cols]).assign(&p.dot(&vb));
                probs.push(p);
            }
        }
        let ng = self.any(&[q, k, v]);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                batch,
                probs,
            },
            ng,
        )
    }

    pub fn mse(&mut self, pred: Var, target: Array2<T>) -> Var {
        assert_eq!(self.value(pred).dim(), target.dim(), "mse shape mismatch");
        let n = T::from_usize(target.len()).unwrap();
        let sum: T = Zip::from(self.value(pred))
            .and(&target)
            .fold(T::zero(), |acc, &p, &t| acc + (p - t) * (p - t));
        let value = Array2::from_elem((1, 1), sum / n);
        let ng = self.any(&[pred]);
        self.push(value, Op::Mse(pred, target), ng)
    }

    /// Back-propagate from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Array2<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::from_elem((1, 1), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let wants = |v: Var| self.nodes[v.0].needs_grad;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    if wants(*a) {
                        accumulate(&mut grads, *a, g.dot(&self.value(*b).t()));
                    }
                    if wants(*b) {
                        accumulate(&mut grads, *b, self.value(*a).t().dot(&g));
                    }
                }
                Op::Add(a, b) => {
                    if wants(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if wants(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::AddRow(x, row) => {
                    if wants(*row) {
                        accumulate(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if wants(*x) {
                        accumulate(&mut grads, *x, g);
                    }
                }
                Op::Relu(x) => {
                    let mut gx = g;
                    Zip::from(&mut gx).and(&node.value).for_each(|gx, &y| {
                        if y <= T::zero() {
                            *gx = T::zero();
                        }
                    });
                    accumulate(&mut grads, *x, gx);
                }
                Op::Mask(x, mask) => {
                    accumulate(&mut grads, *x, g * mask);
                }
                Op::TileRows(x, times) => {
                    let r = self.value(*x).nrows();
                    let mut gx = g.slice(s![0..r, ..]).to_owned();
                    for t in 1..*times {
                        gx += &g.slice(s![t * r..(t + 1) * r, ..]);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    if wants(*gamma) {
                        let gg = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads, *gamma, gg);
                    }
                    if wants(*beta) {
                        accumulate(&mut grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if wants(*x) {
                        let dxhat = &g * self.value(*gamma);
                        let d = T::from_usize(dxhat.ncols()).unwrap();
                        let mut gx = Array2::<T>::zeros(dxhat.dim());
                        for i in 0..dxhat.nrows() {
                            let dr = dxhat.row(i);
                            let xr = xhat.row(i);
                            let sum_d = dr.sum();
                            let sum_dx = dr.iter().zip(xr.iter()).map(|(&a, &b)| a * b).sum::<T>();
                            let k = inv_std[i] / d;
                            for ((o, &dv), &xv) in gx.row_mut(i).iter_mut().zip(dr.iter()).zip(xr.iter()) {
                                *o = k * (d * dv - sum_d - xv * sum_dx);
                            }
                        }
                        accumulate(&mut grads, *x, gx);
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    batch,
                    probs,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let d = qv.ncols();
                    let (tq, tk, dh) = (qv.nrows() / batch, kv.nrows() / batch, d / heads);
                    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
                    let (wq, wk, wv) = (wants(*q), wants(*k), wants(*v));
                    let mut gq = Array2::<T>::zeros(qv.dim());
                    let mut gk = Array2::<T>::zeros(kv.dim());
                    let mut gv = Array2::<T>::zeros(vv.dim());
                    for b in 0..*batch {
                        for h in 0..*heads {
                            let p = &probs[b * heads + h];
                            let qr = b * tq..(b + 1) * tq;
                            let kr = b * tk..(b + 1) * tk;
                            let cols = h * dh..(h + 1) * dh;
                            let go = g.slice(s![qr.clone(), cols.clone()]);
                            if wv {
                                gv.slice_mut(s![kr.clone(), cols.clone()]).assign(&p.t().dot(&go));
                            }
                            if wq || wk {
                                let vb = vv.slice(s![kr.clone(), cols.clone()]);
                                let dp = go.dot(&vb.t());
                                let mut ds = Array2::<T>::zeros(p.dim());
                                for i in 0..p.nrows() {
                                    let dot = p.row(i).iter().zip(dp.row(i).iter()).map(|(&a, &b)| a * b).sum::<T>();
                                    for j in 0..p.ncols() {
                                        ds[[i, j]] = p[[i, j]] * (dp[[i, j]] - dot) * scale;
                                    }
                                }
                                if wq {
                                    let kb = kv.slice(s![kr.clone(), cols.clone()]);
                                    gq.slice_mut(s![qr.clone(), cols.clone()]).assign(&ds.dot(&kb));
                                }
                                if wk {
                                    let qb = qv.slice(s![qr.clone(), cols.clone()]);
                                    gk.slice_mut(s![kr.clone(), cols.clone()]).assign(&ds.t().dot(&qb));
                                }
                            }
                        }
                    }
                    if wq {
                        accumulate(&mut grads, *q, gq);
                    }
                    if wk {
                        accumulate(&mut grads, *k, gk);
                    }
                    if wv {
                        accumulate(&mut grads, *v, gv);
                    }
                }
                Op::Mse(pred, target) => {
                    let n = T::from_usize(target.len()).unwrap();
                    let c = g[[0, 0]] * T::from_f64_lossy(2.0) / n;
                    let gp = (self.value(*pred) - target) * c;
                    accumulate(&mut grads, *pred, gp);
                }
            }
        }
        Gradients { grads }
    }
}
