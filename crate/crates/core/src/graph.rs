//! A define-by-run reverse-mode autodiff tape.
//!
//! Each operation appends a node holding its forward value; `backward` walks
//! the tape in reverse and accumulates gradients into every node that
//! (transitively) depends on a trainable parameter or a differentiable input.
//! Only the operations the models in this crate need are provided.

use std::collections::HashMap;
use std::rc::Rc;

use crate::params::{Grads, ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Rc<Vec<f64>>),
    Gelu(Var),
    Silu(Var),
    Softplus(Var),
    LayerNorm { x: Var, rstd: Vec<f64> },
    Softmax(Var),
    AttnSoftmax(Var),
    Gather { table: Var, rows: Vec<Option<usize>> },
    Rope { x: Var, cos: Rc<Vec<f64>>, sin: Rc<Vec<f64>> },
    RepeatPairs(Var),
    Permute { x: Var, in_shape: [usize; 4], perm: [usize; 4] },
    Reshape(Var),
    ConcatCols(Var, Var),
    SliceCols { x: Var, start: usize },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Mse { x: Var, target: Rc<Tensor> },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    store: Option<(u64, usize)>,
    param_cache: HashMap<(u64, usize), Var>,
}

pub const LN_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

fn permute_shape(shape: [usize; 4], perm: [usize; 4]) -> [usize; 4] {
    [shape[perm[0]], shape[perm[1]], shape[perm[2]], shape[perm[3]]]
}

fn permute_data(data: &[f64], shape: [usize; 4], perm: [usize; 4]) -> Vec<f64> {
    let strides = [
        shape[1] * shape[2] * shape[3],
        shape[2] * shape[3],
        shape[3],
        1,
    ];
    let out_shape = permute_shape(shape, perm);
    let s = [
        strides[perm[0]],
        strides[perm[1]],
        strides[perm[2]],
        strides[perm[3]],
    ];
    let mut out = Vec::with_capacity(data.len());
    for i0 in 0..out_shape[0] {
        for i1 in 0..out_shape[1] {
            for i2 in 0..out_shape[2] {
                let base = i0 * s[0] + i1 * s[1] + i2 * s[2];
                for i3 in 0..out_shape[3] {
                    out.push(data[base + i3 * s[3]]);
                }
            }
        }
    }
    out
}

fn inverse_perm(perm: [usize; 4]) -> [usize; 4] {
    let mut inv = [0; 4];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    /// A differentiable leaf that is not a stored parameter.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a stored parameter. Frozen parameters enter as constants.
    /// At most one store may contribute trainable parameters to a graph.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.store_id(), id.0);
        if let Some(&v) = self.param_cache.get(&key) {
            return v;
        }
        let trainable = store.is_trainable(id);
        if trainable {
            match self.store {
                None => self.store = Some((store.store_id(), store.len())),
                Some((sid, _)) => assert_eq!(
                    sid,
                    store.store_id(),
                    "trainable parameters from two stores in one graph"
                ),
            }
        }
        self.nodes.push(Node {
            value: store.get(id).clone(),
            op: Op::Leaf,
            requires_grad: trainable,
            param: trainable.then_some(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_cache.insert(key, v);
        v
    }

    /// `a · b` (or `a · bᵀ` when `trans_b`), leading dims of `a` flattened.
    pub fn matmul_ext(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(bv.shape().len(), 2, "right operand must be 2-D");
        let (m, k) = (av.rows(), av.cols());
        let (bk, n) = if trans_b {
            (bv.shape()[1], bv.shape()[0])
        } else {
            (bv.shape()[0], bv.shape()[1])
        };
        assert_eq!(k, bk, "matmul inner dimension mismatch");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), trans_b, &mut out, 0.0);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        self.push(Tensor::new(shape, out), Op::MatMul { a, b, trans_b }, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_ext(a, b, false)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        self.matmul_ext(a, b, true)
    }

    /// Batched `a[i] · b[i]` (or `a[i] · b[i]ᵀ`) over the leading dimension.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        assert_eq!(sa.len(), 3);
        assert_eq!(sb.len(), 3);
        assert_eq!(sa[0], sb[0]);
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (bk, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        assert_eq!(k, bk);
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &av.data()[i * m * k..],
                false,
                &bv.data()[i * k * n..],
                trans_b,
                &mut out[i * m * n..],
                0.0,
            );
        }
        self.push(
            Tensor::new(vec![batch, m, n], out),
            Op::BatchMatMul { a, b, trans_b },
            &[a, b],
        )
    }

    fn zip_same(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.numel(), bv.numel(), "elementwise shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(av.shape().to_vec(), data);
        self.push(t, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `x + v` with `v` broadcast over rows.
    pub fn add_row(&mut self, x: Var, v: Var) -> Var {
        let (xv, vv) = (self.value(x), self.value(v));
        let c = xv.cols();
        assert_eq!(vv.numel(), c);
        let mut t = xv.clone();
        for r in 0..t.rows() {
            for (a, b) in t.row_mut(r).iter_mut().zip(vv.data()) {
                *a += b;
            }
        }
        self.push(t, Op::AddRow(x, v), &[x, v])
    }

    /// `x ⊙ v` with `v` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, v: Var) -> Var {
        let (xv, vv) = (self.value(x), self.value(v));
        assert_eq!(vv.numel(), xv.cols());
        let mut t = xv.clone();
        for r in 0..t.rows() {
            for (a, b) in t.row_mut(r).iter_mut().zip(vv.data()) {
                *a *= b;
            }
        }
        self.push(t, Op::MulRow(x, v), &[x, v])
    }

    /// `x ⊙ c` with one scalar `c[r]` per row.
    pub fn mul_col(&mut self, x: Var, c: Var) -> Var {
        let (xv, cv) = (self.value(x), self.value(c));
        assert_eq!(cv.numel(), xv.rows());
        let mut t = xv.clone();
        for r in 0..t.rows() {
            let s = cv.data()[r];
            t.row_mut(r).iter_mut().for_each(|a| *a *= s);
        }
        self.push(t, Op::MulCol(x, c), &[x, c])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = self.value(x).map(|a| a * s);
        self.push(t, Op::Scale(x, s), &[x])
    }

    /// Elementwise product with a constant (dropout masks, padding masks).
    pub fn mul_const(&mut self, x: Var, mask: Rc<Vec<f64>>) -> Var {
        let xv = self.value(x);
        assert_eq!(mask.len(), xv.numel());
        let data = xv.data().iter().zip(mask.iter()).map(|(a, m)| a * m).collect();
        let t = Tensor::new(xv.shape().to_vec(), data);
        self.push(t, Op::MulConst(x, mask), &[x])
    }

    /// Zeroes whole rows: `keep[r]` is 1.0 or 0.0.
    pub fn mask_rows(&mut self, x: Var, keep: &[f64]) -> Var {
        let c = self.value(x).cols();
        let mask: Vec<f64> = keep.iter().flat_map(|&k| std::iter::repeat_n(k, c)).collect();
        self.mul_const(x, Rc::new(mask))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(gelu);
        self.push(t, Op::Gelu(x), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(silu);
        self.push(t, Op::Silu(x), &[x])
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let t = self.value(x).map(softplus);
        self.push(t, Op::Softplus(x), &[x])
    }

    /// Layer normalization over the last dimension, without affine terms.
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut t = xv.clone();
        let mut rstd = Vec::with_capacity(t.rows());
        for r in 0..t.rows() {
            let row = t.row_mut(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + LN_EPS).sqrt();
            row.iter_mut().for_each(|a| *a = (*a - mean) * s);
            rstd.push(s);
        }
        self.push(t, Op::LayerNorm { x, rstd }, &[x])
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        for r in 0..t.rows() {
            softmax_in_place(t.row_mut(r));
        }
        self.push(t, Op::Softmax(x), &[x])
    }

    /// Row softmax of attention logits `[batch·heads, L, L]` where key `j` of
    /// sequence `b` participates only if `key_valid[b·L + j]`. Masked entries
    /// get probability exactly zero.
    pub fn attn_softmax(&mut self, x: Var, key_valid: &[bool], heads: usize) -> Var {
        let xv = self.value(x);
        let s = xv.shape();
        assert_eq!(s.len(), 3);
        let len = s[2];
        assert_eq!(s[1], len);
        let mut t = xv.clone();
        for r in 0..t.rows() {
            let b = r / (heads * len);
            let valid = &key_valid[b * len..(b + 1) * len];
            let row = t.row_mut(r);
            let max = row
                .iter()
                .zip(valid)
                .filter(|(_, &ok)| ok)
                .map(|(&a, _)| a)
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(max.is_finite(), "attention row without any valid key");
            let mut sum = 0.0;
            for (a, &ok) in row.iter_mut().zip(valid) {
                *a = if ok { (*a - max).exp() } else { 0.0 };
                sum += *a;
            }
            row.iter_mut().for_each(|a| *a /= sum);
        }
        self.push(t, Op::AttnSoftmax(x), &[x])
    }

    /// Row lookup; `None` yields a zero row that never receives gradient.
    pub fn gather(&mut self, table: Var, rows: Vec<Option<usize>>) -> Var {
        let tv = self.value(table);
        let c = tv.cols();
        let mut data = vec![0.0; rows.len() * c];
        for (i, r) in rows.iter().enumerate() {
            if let Some(r) = *r {
                data[i * c..(i + 1) * c].copy_from_slice(tv.row(r));
            }
        }
        let t = Tensor::matrix(rows.len(), c, data);
        self.push(t, Op::Gather { table, rows }, &[table])
    }

    /// Rotates consecutive column pairs of each row: pair `p` of row `r` is
    /// rotated by the angle whose cosine/sine are `cos/sin[r·(cols/2) + p]`.
    pub fn rope(&mut self, x: Var, cos: Rc<Vec<f64>>, sin: Rc<Vec<f64>>) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        assert_eq!(c % 2, 0);
        let half = c / 2;
        assert_eq!(cos.len(), xv.rows() * half);
        let mut t = xv.clone();
        for r in 0..t.rows() {
            let row = t.row_mut(r);
            for p in 0..half {
                let (co, si) = (cos[r * half + p], sin[r * half + p]);
                let (a, b) = (row[2 * p], row[2 * p + 1]);
                row[2 * p] = a * co - b * si;
                row[2 * p + 1] = a * si + b * co;
            }
        }
        self.push(t, Op::Rope { x, cos, sin }, &[x])
    }

    /// `[R, P] -> [R, 2P]`, duplicating every column into a pair.
    pub fn repeat_pairs(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut data = Vec::with_capacity(xv.numel() * 2);
        for &a in xv.data() {
            data.push(a);
            data.push(a);
        }
        let t = Tensor::matrix(xv.rows(), xv.cols() * 2, data);
        self.push(t, Op::RepeatPairs(x), &[x])
    }

    /// Reorders the axes of a tensor viewed with the 4-D `shape`.
    pub fn permute(&mut self, x: Var, shape: [usize; 4], perm: [usize; 4]) -> Var {
        let xv = self.value(x);
        assert_eq!(shape.iter().product::<usize>(), xv.numel());
        let data = permute_data(xv.data(), shape, perm);
        let t = Tensor::new(permute_shape(shape, perm).to_vec(), data);
        self.push(t, Op::Permute { x, in_shape: shape, perm }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshape(shape);
        self.push(t, Op::Reshape(x), &[x])
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.rows(), bv.rows());
        let (ca, cb) = (av.cols(), bv.cols());
        let mut data = Vec::with_capacity(av.numel() + bv.numel());
        for r in 0..av.rows() {
            data.extend_from_slice(av.row(r));
            data.extend_from_slice(bv.row(r));
        }
        let t = Tensor::matrix(av.rows(), ca + cb, data);
        self.push(t, Op::ConcatCols(a, b), &[a, b])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.cols());
        let mut data = Vec::with_capacity(xv.rows() * len);
        for r in 0..xv.rows() {
            data.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let t = Tensor::matrix(xv.rows(), len, data);
        self.push(t, Op::SliceCols { x, start }, &[x])
    }

    /// Mean negative log-softmax of the target column of each row.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), targets.len());
        let mut probs = lv.clone();
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|a| (a - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            softmax_in_place(probs.row_mut(r));
        }
        loss /= targets.len() as f64;
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets,
                probs: probs.into_data(),
            },
            &[logits],
        )
    }

    /// Mean of squared differences against a constant target.
    pub fn mse(&mut self, x: Var, target: Rc<Tensor>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.numel(), target.numel());
        let n = xv.numel() as f64;
        let loss = xv
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        self.push(Tensor::scalar(loss), Op::Mse { x, target }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Reverse pass from a scalar; returns the gradient of every node that
    /// requires one.
    pub fn backward_all(&self, loss: Var) -> Vec<Option<Tensor>> {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape().to_vec(), vec![1.0]));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(dout) = grads[i].take() else { continue };
            self.backward_node(i, &dout, &mut grads);
            grads[i] = Some(dout);
        }
        grads
    }

    /// Reverse pass collecting gradients of trainable parameters.
    pub fn backward(&self, loss: Var) -> Grads {
        let all = self.backward_all(loss);
        let (store_id, len) = self.store.unwrap_or((0, 0));
        let mut grads: Vec<Option<Tensor>> = (0..len).map(|_| None).collect();
        for (node, g) in self.nodes.iter().zip(all) {
            if let (Some(id), Some(g)) = (node.param, g) {
                match &mut grads[id.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Grads { store_id, grads }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, i: usize, dout: &Tensor, grads: &mut [Option<Tensor>]) {
        let acc = |grads: &mut [Option<Tensor>], v: Var, g: Tensor| match &mut grads[v.0] {
            Some(a) => a.add_assign(&g),
            slot @ None => *slot = Some(g),
        };
        let like = |v: Var, data: Vec<f64>| Tensor::new(self.value(v).shape().to_vec(), data);
        let d = dout.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.rows(), av.cols());
                let n = dout.cols();
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, d, false, bv.data(), !trans_b, &mut da, 0.0);
                    acc(grads, *a, like(*a, da));
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    if *trans_b {
                        gemm(n, m, k, d, true, av.data(), false, &mut db, 0.0);
                    } else {
                        gemm(k, m, n, av.data(), true, d, false, &mut db, 0.0);
                    }
                    acc(grads, *b, like(*b, db));
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = dout.shape()[2];
                if self.needs(*a) {
                    let mut da = vec![0.0; batch * m * k];
                    for s in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            &d[s * m * n..],
                            false,
                            &bv.data()[s * k * n..],
                            !trans_b,
                            &mut da[s * m * k..],
                            0.0,
                        );
                    }
                    acc(grads, *a, like(*a, da));
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; batch * k * n];
                    for s in 0..batch {
                        if *trans_b {
                            gemm(
                                n,
                                m,
                                k,
                                &d[s * m * n..],
                                true,
                                &av.data()[s * m * k..],
                                false,
                                &mut db[s * k * n..],
                                0.0,
                            );
                        } else {
                            gemm(
                                k,
                                m,
                                n,
                                &av.data()[s * m * k..],
                                true,
                                &d[s * m * n..],
                                false,
                                &mut db[s * k * n..],
                                0.0,
                            );
                        }
                    }
                    acc(grads, *b, like(*b, db));
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    acc(grads, *a, like(*a, d.to_vec()));
                }
                if self.needs(*b) {
                    acc(grads, *b, like(*b, d.to_vec()));
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    acc(grads, *a, like(*a, d.to_vec()));
                }
                if self.needs(*b) {
                    acc(grads, *b, like(*b, d.iter().map(|x| -x).collect()));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let g = d.iter().zip(bv.data()).map(|(g, y)| g * y).collect();
                    acc(grads, *a, like(*a, g));
                }
                if self.needs(*b) {
                    let g = d.iter().zip(av.data()).map(|(g, x)| g * x).collect();
                    acc(grads, *b, like(*b, g));
                }
            }
            Op::AddRow(x, v) => {
                if self.needs(*x) {
                    acc(grads, *x, like(*x, d.to_vec()));
                }
                if self.needs(*v) {
                    let c = dout.cols();
                    let mut g = vec![0.0; c];
                    for r in 0..dout.rows() {
                        for (a, b) in g.iter_mut().zip(dout.row(r)) {
                            *a += b;
                        }
                    }
                    acc(grads, *v, like(*v, g));
                }
            }
            Op::MulRow(x, v) => {
                let (xv, vv) = (self.value(*x), self.value(*v));
                let c = dout.cols();
                if self.needs(*x) {
                    let g = d
                        .iter()
                        .enumerate()
                        .map(|(j, g)| g * vv.data()[j % c])
                        .collect();
                    acc(grads, *x, like(*x, g));
                }
                if self.needs(*v) {
                    let mut g = vec![0.0; c];
                    for (j, (dg, xx)) in d.iter().zip(xv.data()).enumerate() {
                        g[j % c] += dg * xx;
                    }
                    acc(grads, *v, like(*v, g));
                }
            }
            Op::MulCol(x, cvar) => {
                let (xv, cv) = (self.value(*x), self.value(*cvar));
                let c = dout.cols();
                if self.needs(*x) {
                    let g = d
                        .iter()
                        .enumerate()
                        .map(|(j, g)| g * cv.data()[j / c])
                        .collect();
                    acc(grads, *x, like(*x, g));
                }
                if self.needs(*cvar) {
                    let g = (0..dout.rows())
                        .map(|r| dout.row(r).iter().zip(xv.row(r)).map(|(a, b)| a * b).sum())
                        .collect();
                    acc(grads, *cvar, like(*cvar, g));
                }
            }
            Op::Scale(x, s) => {
                acc(grads, *x, like(*x, d.iter().map(|g| g * s).collect()));
            }
            Op::MulConst(x, m) => {
                acc(grads, *x, like(*x, d.iter().zip(m.iter()).map(|(g, k)| g * k).collect()));
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let g = d.iter().zip(xv.data()).map(|(g, &a)| g * gelu_grad(a)).collect();
                acc(grads, *x, like(*x, g));
            }
            Op::Silu(x) => {
                let xv = self.value(*x);
                let g = d
                    .iter()
                    .zip(xv.data())
                    .map(|(g, &a)| {
                        let s = sigmoid(a);
                        g * (s + a * s * (1.0 - s))
                    })
                    .collect();
                acc(grads, *x, like(*x, g));
            }
            Op::Softplus(x) => {
                let xv = self.value(*x);
                let g = d.iter().zip(xv.data()).map(|(g, &a)| g * sigmoid(a)).collect();
                acc(grads, *x, like(*x, g));
            }
            Op::LayerNorm { x, rstd } => {
                let y = &self.nodes[i].value;
                let c = y.cols();
                let mut g = vec![0.0; y.numel()];
                for r in 0..y.rows() {
                    let (yr, dr) = (y.row(r), dout.row(r));
                    let mean_d = dr.iter().sum::<f64>() / c as f64;
                    let mean_dy = dr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        g[r * c + j] = rstd[r] * (dr[j] - mean_d - yr[j] * mean_dy);
                    }
                }
                acc(grads, *x, like(*x, g));
            }
            Op::Softmax(x) | Op::AttnSoftmax(x) => {
                let p = &self.nodes[i].value;
                let c = p.cols();
                let mut g = vec![0.0; p.numel()];
                for r in 0..p.rows() {
                    let (pr, dr) = (p.row(r), dout.row(r));
                    let dot: f64 = pr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        g[r * c + j] = pr[j] * (dr[j] - dot);
                    }
                }
                acc(grads, *x, like(*x, g));
            }
            Op::Gather { table, rows } => {
                let tv = self.value(*table);
                let c = tv.cols();
                let mut g = vec![0.0; tv.numel()];
                for (k, r) in rows.iter().enumerate() {
                    if let Some(r) = *r {
                        for j in 0..c {
                            g[r * c + j] += d[k * c + j];
                        }
                    }
                }
                acc(grads, *table, like(*table, g));
            }
            Op::Rope { x, cos, sin } => {
                let half = dout.cols() / 2;
                let mut g = d.to_vec();
                for r in 0..dout.rows() {
                    for p in 0..half {
                        let (co, si) = (cos[r * half + p], sin[r * half + p]);
                        let base = r * 2 * half + 2 * p;
                        let (ga, gb) = (d[base], d[base + 1]);
                        g[base] = ga * co + gb * si;
                        g[base + 1] = -ga * si + gb * co;
                    }
                }
                acc(grads, *x, like(*x, g));
            }
            Op::RepeatPairs(x) => {
                let g = d.chunks_exact(2).map(|p| p[0] + p[1]).collect();
                acc(grads, *x, like(*x, g));
            }
            Op::Permute { x, in_shape, perm } => {
                let out_shape = permute_shape(*in_shape, *perm);
                let g = permute_data(d, out_shape, inverse_perm(*perm));
                acc(grads, *x, like(*x, g));
            }
            Op::Reshape(x) => {
                acc(grads, *x, like(*x, d.to_vec()));
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).cols();
                let c = dout.cols();
                if self.needs(*a) {
                    let g = (0..dout.rows())
                        .flat_map(|r| dout.row(r)[..ca].to_vec())
                        .collect();
                    acc(grads, *a, like(*a, g));
                }
                if self.needs(*b) {
                    let g = (0..dout.rows())
                        .flat_map(|r| dout.row(r)[ca..c].to_vec())
                        .collect();
                    acc(grads, *b, like(*b, g));
                }
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (c, len) = (xv.cols(), dout.cols());
                let mut g = vec![0.0; xv.numel()];
                for r in 0..dout.rows() {
                    g[r * c + start..r * c + start + len].copy_from_slice(dout.row(r));
                }
                acc(grads, *x, like(*x, g));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = self.value(*logits).cols();
                let scale = d[0] / targets.len() as f64;
                let mut g: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    g[r * c + t] -= scale;
                }
                acc(grads, *logits, like(*logits, g));
            }
            Op::Mse { x, target } => {
                let xv = self.value(*x);
                let s = 2.0 * d[0] / xv.numel() as f64;
                let g = xv
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(a, b)| s * (a - b))
                    .collect();
                acc(grads, *x, like(*x, g));
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                acc(grads, *x, like(*x, vec![d[0]; n]));
            }
        }
    }
}
