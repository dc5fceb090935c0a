//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records one forward pass. Parameters enter the tape through
//! [`Tape::param`], which reads them from a borrowed [`ParamStore`]; frozen
//! parameters enter as constants and never receive gradients.

use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

/// Sparse linear map applied along the last axis: output column `o` is
/// `sum(w * input[src])` over `taps[o]`.
#[derive(Debug, Clone)]
pub struct SparseMap {
    pub in_cols: usize,
    pub taps: Vec<Vec<(usize, f64)>>,
}

impl SparseMap {
    pub fn out_cols(&self) -> usize {
        self.taps.len()
    }

    pub fn apply_row(&self, input: &[f64], out: &mut [f64]) {
        for (o, taps) in self.taps.iter().enumerate() {
            out[o] = taps.iter().map(|&(s, w)| w * input[s]).sum();
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Softmax(Var),
    LogSumExpRows(Var),
    Transpose(Var),
    Reshape(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows { x: Var, idx: Rc<Vec<usize>> },
    Sparse { x: Var, map: Rc<SparseMap> },
    RowNormalize { x: Var, norms: Vec<f64> },
    Sum(Var),
    Mean(Var),
    LinComb(Vec<(Var, f64)>),
    BceWithLogits { x: Var, target: Rc<Vec<f64>> },
    Dice { x: Var, target: Rc<Vec<f64>>, smooth: f64 },
    CrossEntropy { x: Var, targets: Vec<usize>, weights: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// One recorded forward computation.
pub struct Tape<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

/// Gradients of one scalar with respect to every tape node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self { store, nodes: Vec::new(), param_vars: vec![None; store.len()] }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives gradients but is not a stored parameter; used by
    /// gradient checks on raw inputs.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let p = self.store.get(id);
        let trainable = p.group != ParamGroup::Frozen;
        let v = self.push(p.value.clone(), Op::Leaf, trainable);
        self.param_vars[id.index()] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` where `op` optionally transposes a 2-D operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (ar, ac) = (av.rows(), av.cols());
        let (br, bc) = (bv.rows(), bv.cols());
        let (m, k, sa) = if ta { (ac, ar, (1, ac as isize)) } else { (ar, ac, (ac as isize, 1)) };
        let (k2, n, sb) = if tb { (bc, br, (1, bc as isize)) } else { (br, bc, (bc as isize, 1)) };
        assert_eq!(k, k2, "matmul inner dimension mismatch: {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, av.data(), sa, bv.data(), sb, 0.0, &mut out, (n as isize, 1));
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_vec(&[m, n], out), Op::MatMul { a, b, ta, tb }, rg)
    }

    fn zip_same(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.len(), bv.len(), "elementwise shape mismatch {:?} vs {:?}", av.shape(), bv.shape());
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::from_vec(av.shape(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, op, rg)
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

    /// `a[m, n] + row[n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        let n = av.cols();
        assert_eq!(rv.len(), n, "add_row width mismatch");
        let mut t = av.clone();
        for r in 0..t.rows() {
            for (x, b) in t.row_mut(r).iter_mut().zip(rv.data()) {
                *x += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(t, Op::AddRow(a, row), rg)
    }

    /// `a[m, n] * row[n]` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        let n = av.cols();
        assert_eq!(rv.len(), n, "mul_row width mismatch");
        let mut t = av.clone();
        for r in 0..t.rows() {
            for (x, s) in t.row_mut(r).iter_mut().zip(rv.data()) {
                *x *= s;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(t, Op::MulRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let av = self.value(a);
        let t = Tensor::from_vec(av.shape(), av.data().iter().map(|x| x * s).collect());
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, s), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let t = Tensor::from_vec(
            av.shape(),
            av.data().iter().map(|&x| 0.5 * x * (1.0 + math::erf(x * core::f64::consts::FRAC_1_SQRT_2))).collect(),
        );
        let rg = self.rg(a);
        self.push(t, Op::Gelu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let t = Tensor::from_vec(av.shape(), av.data().iter().map(|&x| math::sigmoid(x)).collect());
        let rg = self.rg(a);
        self.push(t, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let t = Tensor::from_vec(av.shape(), av.data().iter().map(|&x| math::tanh(x)).collect());
        let rg = self.rg(a);
        self.push(t, Op::Tanh(a), rg)
    }

    /// Zero-mean, unit-variance normalization of each row (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let av = self.value(a);
        let n = av.cols();
        let mut t = av.clone();
        let mut inv_std = Vec::with_capacity(t.rows());
        for r in 0..t.rows() {
            let row = t.row_mut(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / math::sqrt(var + eps);
            for x in row.iter_mut() {
                *x = (*x - mean) * is;
            }
            inv_std.push(is);
        }
        let rg = self.rg(a);
        self.push(t, Op::LayerNorm { x: a, inv_std }, rg)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let mut t = self.value(a).clone();
        for r in 0..t.rows() {
            math::softmax_in_place(t.row_mut(r));
        }
        let rg = self.rg(a);
        self.push(t, Op::Softmax(a), rg)
    }

    /// Row-wise log-sum-exp: `[m, n] -> [m]`.
    pub fn log_sum_exp_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data: Vec<f64> = (0..av.rows()).map(|r| math::log_sum_exp(av.row(r))).collect();
        let m = data.len();
        let rg = self.rg(a);
        self.push(Tensor::from_vec(&[m], data), Op::LogSumExpRows(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a).transpose2();
        let rg = self.rg(a);
        self.push(t, Op::Transpose(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self.value(a).clone().reshaped(shape);
        let rg = self.rg(a);
        self.push(t, Op::Reshape(a), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        let (r, c) = (av.rows(), av.cols());
        assert!(start + len <= c, "slice_cols out of range");
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&av.row(i)[start..start + len]);
        }
        let rg = self.rg(a);
        self.push(Tensor::from_vec(&[r, len], data), Op::SliceCols { x: a, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let r = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let pv = self.value(p);
                assert_eq!(pv.rows(), r, "concat_cols row mismatch");
                data.extend_from_slice(pv.row(i));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::from_vec(&[r, total], data), Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), c, "concat_rows col mismatch");
            data.extend_from_slice(pv.data());
        }
        let r = data.len() / c;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::from_vec(&[r, c], data), Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn gather_rows(&mut self, a: Var, idx: Rc<Vec<usize>>) -> Var {
        let av = self.value(a);
        let c = av.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            data.extend_from_slice(av.row(i));
        }
        let rg = self.rg(a);
        self.push(Tensor::from_vec(&[idx.len(), c], data), Op::GatherRows { x: a, idx }, rg)
    }

    pub fn sparse_map(&mut self, a: Var, map: Rc<SparseMap>) -> Var {
        let av = self.value(a);
        assert_eq!(av.cols(), map.in_cols, "sparse map width mismatch");
        let r = av.rows();
        let oc = map.out_cols();
        let mut data = vec![0.0; r * oc];
        for i in 0..r {
            map.apply_row(av.row(i), &mut data[i * oc..(i + 1) * oc]);
        }
        let rg = self.rg(a);
        self.push(Tensor::from_vec(&[r, oc], data), Op::Sparse { x: a, map }, rg)
    }

    /// Divides each row by `sqrt(|row|^2 + eps^2)`.
    pub fn row_normalize(&mut self, a: Var, eps: f64) -> Var {
        let mut t = self.value(a).clone();
        let mut norms = Vec::with_capacity(t.rows());
        for r in 0..t.rows() {
            let row = t.row_mut(r);
            let n = math::sqrt(row.iter().map(|x| x * x).sum::<f64>() + eps * eps);
            for x in row.iter_mut() {
                *x /= n;
            }
            norms.push(n);
        }
        let rg = self.rg(a);
        self.push(t, Op::RowNormalize { x: a, norms }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let s = av.data().iter().sum::<f64>() / av.len().max(1) as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// `sum(w_i * x_i)` over same-shaped terms.
    pub fn lin_comb(&mut self, terms: &[(Var, f64)]) -> Var {
        let shape = self.value(terms[0].0).shape().to_vec();
        let mut t = Tensor::zeros(&shape);
        for &(v, w) in terms {
            let vv = self.value(v);
            assert_eq!(vv.len(), t.len(), "lin_comb shape mismatch");
            for (o, x) in t.data_mut().iter_mut().zip(vv.data()) {
                *o += w * x;
            }
        }
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        self.push(t, Op::LinComb(terms.to_vec()), rg)
    }

    /// Mean binary cross-entropy between logits and `{0, 1}` targets.
    pub fn bce_with_logits(&mut self, x: Var, target: Rc<Vec<f64>>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), target.len(), "bce shape mismatch");
        let n = xv.len() as f64;
        let s: f64 = xv.data().iter().zip(target.iter()).map(|(&l, &t)| math::softplus(l) - l * t).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s / n), Op::BceWithLogits { x, target }, rg)
    }

    /// `1 - (2 sum(p t) + s) / (sum(p) + sum(t) + s)` with `p = sigmoid(x)`.
    pub fn dice_loss(&mut self, x: Var, target: Rc<Vec<f64>>, smooth: f64) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), target.len(), "dice shape mismatch");
        let (mut pt, mut ps, mut ts) = (0.0, 0.0, 0.0);
        for (&l, &t) in xv.data().iter().zip(target.iter()) {
            let p = math::sigmoid(l);
            pt += p * t;
            ps += p;
            ts += t;
        }
        let v = 1.0 - (2.0 * pt + smooth) / (ps + ts + smooth);
        let rg = self.rg(x);
        self.push(Tensor::scalar(v), Op::Dice { x, target, smooth }, rg)
    }

    /// Weighted mean of row-wise softmax cross-entropy.
    pub fn cross_entropy(&mut self, x: Var, targets: Vec<usize>, weights: Vec<f64>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows(), targets.len());
        assert_eq!(weights.len(), targets.len());
        let wsum: f64 = weights.iter().sum();
        let mut s = 0.0;
        for (r, (&t, &w)) in targets.iter().zip(&weights).enumerate() {
            let row = xv.row(r);
            s += w * (math::log_sum_exp(row) - row[t]);
        }
        let v = if wsum > 0.0 { s / wsum } else { 0.0 };
        let rg = self.rg(x);
        self.push(Tensor::scalar(v), Op::CrossEntropy { x, targets, weights }, rg)
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward() needs a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> Option<&'g mut Tensor> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[v.0].value.shape()));
        }
        slot.as_mut()
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (ar, ac) = (av.rows(), av.cols());
                let (br, bc) = (bv.rows(), bv.cols());
                let (m, k, sa) = if *ta { (ac, ar, (1isize, ac as isize)) } else { (ar, ac, (ac as isize, 1isize)) };
                let (_, n, sb) = if *tb { (bc, br, (1isize, bc as isize)) } else { (br, bc, (bc as isize, 1isize)) };
                let sg = (n as isize, 1isize);
                if let Some(ga) = self.acc(grads, *a) {
                    // d op(A) = G · op(B)^T, written through op's strides.
                    let sout = if *ta { (1, m as isize) } else { (k as isize, 1) };
                    gemm(m, n, k, 1.0, g.data(), sg, bv.data(), (sb.1, sb.0), 1.0, ga.data_mut(), sout);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    let sout = if *tb { (1, k as isize) } else { (n as isize, 1) };
                    gemm(k, m, n, 1.0, av.data(), (sa.1, sa.0), g.data(), sg, 1.0, gb.data_mut(), sout);
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.add_assign(g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.add_assign(g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.add_assign(g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (x, y) in gb.data_mut().iter_mut().zip(g.data()) {
                        *x -= y;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, gi), bi) in ga.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *x += gi * bi;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((x, gi), ai) in gb.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *x += gi * ai;
                    }
                }
            }
            Op::AddRow(a, row) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.add_assign(g);
                }
                if let Some(gr) = self.acc(grads, *row) {
                    let n = g.cols();
                    for r in 0..g.rows() {
                        for j in 0..n {
                            gr.data_mut()[j] += g.row(r)[j];
                        }
                    }
                }
            }
            Op::MulRow(a, row) => {
                let rv = self.value(*row);
                let av = self.value(*a);
                let n = g.cols();
                if let Some(ga) = self.acc(grads, *a) {
                    for r in 0..g.rows() {
                        let gr = g.row(r);
                        let dst = ga.row_mut(r);
                        for j in 0..n {
                            dst[j] += gr[j] * rv.data()[j];
                        }
                    }
                }
                if let Some(gr) = self.acc(grads, *row) {
                    for r in 0..g.rows() {
                        for j in 0..n {
                            gr.data_mut()[j] += g.row(r)[j] * av.row(r)[j];
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (x, gi) in ga.data_mut().iter_mut().zip(g.data()) {
                        *x += s * gi;
                    }
                }
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    let inv_sqrt_2pi = 0.398_942_280_401_432_7;
                    for ((x, gi), &xi) in ga.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        let cdf = 0.5 * (1.0 + math::erf(xi * core::f64::consts::FRAC_1_SQRT_2));
                        let pdf = inv_sqrt_2pi * math::exp(-0.5 * xi * xi);
                        *x += gi * (cdf + xi * pdf);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, gi), &y) in ga.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                        *x += gi * y * (1.0 - y);
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, gi), &y) in ga.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                        *x += gi * (1.0 - y * y);
                    }
                }
            }
            Op::LayerNorm { x, inv_std } => {
                if let Some(gx) = self.acc(grads, *x) {
                    let n = out.cols() as f64;
                    for r in 0..out.rows() {
                        let y = out.row(r);
                        let gy = g.row(r);
                        let mean_g = gy.iter().sum::<f64>() / n;
                        let mean_gy = gy.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n;
                        let dst = gx.row_mut(r);
                        for j in 0..y.len() {
                            dst[j] += inv_std[r] * (gy[j] - mean_g - y[j] * mean_gy);
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for r in 0..out.rows() {
                        let y = out.row(r);
                        let gy = g.row(r);
                        let dotp: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                        let dst = ga.row_mut(r);
                        for j in 0..y.len() {
                            dst[j] += y[j] * (gy[j] - dotp);
                        }
                    }
                }
            }
            Op::LogSumExpRows(a) => {
                let av = self.value(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for r in 0..av.rows() {
                        let lse = out.data()[r];
                        let gr = g.data()[r];
                        let src = av.row(r);
                        let dst = ga.row_mut(r);
                        for j in 0..src.len() {
                            dst[j] += gr * math::exp(src[j] - lse);
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.add_assign(&g.transpose2());
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (x, gi) in ga.data_mut().iter_mut().zip(g.data()) {
                        *x += gi;
                    }
                }
            }
            Op::SliceCols { x, start } => {
                if let Some(gx) = self.acc(grads, *x) {
                    let len = g.cols();
                    for r in 0..g.rows() {
                        let dst = &mut gx.row_mut(r)[*start..*start + len];
                        for (d, s) in dst.iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if let Some(gp) = self.acc(grads, p) {
                        for r in 0..g.rows() {
                            let src = &g.row(r)[off..off + w];
                            for (d, s) in gp.row_mut(r).iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if let Some(gp) = self.acc(grads, p) {
                        for (d, s) in gp.data_mut().iter_mut().zip(&g.data()[off..off + n]) {
                            *d += s;
                        }
                    }
                    off += n;
                }
            }
            Op::GatherRows { x, idx } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, &src) in idx.iter().enumerate() {
                        let dst = gx.row_mut(src);
                        for (d, s) in dst.iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Sparse { x, map } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for r in 0..g.rows() {
                        let gr = g.row(r);
                        let dst = gx.row_mut(r);
                        for (o, taps) in map.taps.iter().enumerate() {
                            for &(s, w) in taps {
                                dst[s] += w * gr[o];
                            }
                        }
                    }
                }
            }
            Op::RowNormalize { x, norms } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for r in 0..out.rows() {
                        let y = out.row(r);
                        let gy = g.row(r);
                        let d: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                        let dst = gx.row_mut(r);
                        for j in 0..y.len() {
                            dst[j] += (gy[j] - y[j] * d) / norms[r];
                        }
                    }
                }
            }
            Op::Sum(a) => {
                let gs = g.item();
                if let Some(ga) = self.acc(grads, *a) {
                    for x in ga.data_mut() {
                        *x += gs;
                    }
                }
            }
            Op::Mean(a) => {
                let n = self.value(*a).len().max(1) as f64;
                let gs = g.item() / n;
                if let Some(ga) = self.acc(grads, *a) {
                    for x in ga.data_mut() {
                        *x += gs;
                    }
                }
            }
            Op::LinComb(terms) => {
                for &(v, w) in terms {
                    if let Some(gv) = self.acc(grads, v) {
                        for (x, gi) in gv.data_mut().iter_mut().zip(g.data()) {
                            *x += w * gi;
                        }
                    }
                }
            }
            Op::BceWithLogits { x, target } => {
                let xv = self.value(*x);
                let gs = g.item() / xv.len() as f64;
                if let Some(gx) = self.acc(grads, *x) {
                    for ((d, &l), &t) in gx.data_mut().iter_mut().zip(xv.data()).zip(target.iter()) {
                        *d += gs * (math::sigmoid(l) - t);
                    }
                }
            }
            Op::Dice { x, target, smooth } => {
                let xv = self.value(*x);
                if let Some(gx) = self.acc(grads, *x) {
                    let p: Vec<f64> = xv.data().iter().map(|&l| math::sigmoid(l)).collect();
                    let pt: f64 = p.iter().zip(target.iter()).map(|(a, b)| a * b).sum();
                    let den: f64 = p.iter().sum::<f64>() + target.iter().sum::<f64>() + smooth;
                    let num = 2.0 * pt + smooth;
                    let gs = g.item();
                    for ((d, &pi), &ti) in gx.data_mut().iter_mut().zip(&p).zip(target.iter()) {
                        let dl_dp = -(2.0 * ti * den - num) / (den * den);
                        *d += gs * dl_dp * pi * (1.0 - pi);
                    }
                }
            }
            Op::CrossEntropy { x, targets, weights } => {
                let xv = self.value(*x);
                let wsum: f64 = weights.iter().sum();
                if wsum <= 0.0 {
                    return;
                }
                let gs = g.item() / wsum;
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        let mut row = xv.row(r).to_vec();
                        math::softmax_in_place(&mut row);
                        row[t] -= 1.0;
                        for (d, s) in gx.row_mut(r).iter_mut().zip(&row) {
                            *d += gs * w * s;
                        }
                    }
                }
            }
        }
    }

    /// Adds the gradient of every trainable parameter touched by this tape
    /// into `acc` (indexed like the store).
    pub fn accumulate_param_grads(&self, grads: &Gradients, acc: &mut [Tensor]) {
        for (i, slot) in self.param_vars.iter().enumerate() {
            let Some(v) = slot else { continue };
            if !self.rg(*v) {
                continue;
            }
            if let Some(g) = grads.get(*v) {
                acc[i].add_assign(g);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_vec, seeded};

    fn rand_t(seed: u64, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, normal_vec(&mut seeded(seed), n, 1.0))
    }

    /// Reduces an arbitrary node to a scalar with fixed random weights so that
    /// every output element contributes a distinct gradient.
    fn probe(t: &mut Tape, y: Var) -> Var {
        let shape = t.value(y).shape().to_vec();
        let w = t.constant(rand_t(999, &shape));
        let p = t.mul(y, w);
        t.sum(p)
    }

    /// Central-difference check of `f` with respect to every input; returns the
    /// worst norm-wise relative error.
    fn gradcheck(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let vars: Vec<Var> = inputs.iter().map(|x| tape.input(x.clone())).collect();
        let out = f(&mut tape, &vars);
        let grads = tape.backward(out);
        let eval = |xs: &[Tensor]| {
            let mut t = Tape::new(&store);
            let vs: Vec<Var> = xs.iter().map(|x| t.input(x.clone())).collect();
            let o = f(&mut t, &vs);
            t.value(o).item()
        };
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for (k, v) in vars.iter().enumerate() {
            let analytic = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
            let mut xs = inputs.to_vec();
            let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
            for i in 0..inputs[k].len() {
                let x0 = inputs[k].data()[i];
                xs[k].data_mut()[i] = x0 + h;
                let fp = eval(&xs);
                xs[k].data_mut()[i] = x0 - h;
                let fm = eval(&xs);
                xs[k].data_mut()[i] = x0;
                let num = (fp - fm) / (2.0 * h);
                let a = analytic.data()[i];
                diff += (a - num) * (a - num);
                na += a * a;
                nn += num * num;
            }
            let denom = math::sqrt(na).max(math::sqrt(nn)).max(1e-12);
            worst = worst.max(math::sqrt(diff) / denom);
        }
        worst
    }

    const TOL: f64 = 1e-6;

    #[test]
    fn matmul_all_transpose_combinations() {
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a = rand_t(1, if ta { &[4, 3] } else { &[3, 4] });
            let b = rand_t(2, if tb { &[5, 4] } else { &[4, 5] });
            let e = gradcheck(&[a, b], |t, v| {
                let y = t.matmul_t(v[0], v[1], ta, tb);
                probe(t, y)
            });
            assert!(e < TOL, "ta={ta} tb={tb} err={e}");
        }
    }

    #[test]
    fn elementwise_ops() {
        let a = rand_t(3, &[3, 4]);
        let b = rand_t(4, &[3, 4]);
        type F = fn(&mut Tape, Var, Var) -> Var;
        let ops: [(&str, F); 8] = [
            ("add", |t, a, b| t.add(a, b)),
            ("sub", |t, a, b| t.sub(a, b)),
            ("mul", |t, a, b| t.mul(a, b)),
            ("scale", |t, a, _| t.scale(a, -1.7)),
            ("gelu", |t, a, _| t.gelu(a)),
            ("sigmoid", |t, a, _| t.sigmoid(a)),
            ("tanh", |t, a, _| t.tanh(a)),
            ("lincomb", |t, a, b| t.lin_comb(&[(a, 0.3), (b, -2.0)])),
        ];
        for (name, op) in ops {
            let e = gradcheck(&[a.clone(), b.clone()], |t, v| {
                let y = op(t, v[0], v[1]);
                probe(t, y)
            });
            assert!(e < TOL, "{name}: {e}");
        }
    }

    #[test]
    fn row_broadcast_ops() {
        let a = rand_t(5, &[4, 3]);
        let r = rand_t(6, &[3]);
        for mul in [false, true] {
            let e = gradcheck(&[a.clone(), r.clone()], |t, v| {
                let y = if mul { t.mul_row(v[0], v[1]) } else { t.add_row(v[0], v[1]) };
                probe(t, y)
            });
            assert!(e < TOL, "mul={mul}: {e}");
        }
    }

    #[test]
    fn row_reductions_and_normalizations() {
        let a = rand_t(7, &[3, 5]);
        type F = fn(&mut Tape, Var) -> Var;
        let ops: [(&str, F); 6] = [
            ("layer_norm", |t, a| t.layer_norm(a, 1e-5)),
            ("softmax", |t, a| t.softmax(a)),
            ("lse", |t, a| t.log_sum_exp_rows(a)),
            ("row_normalize", |t, a| t.row_normalize(a, 1e-8)),
            ("sum", |t, a| t.sum(a)),
            ("mean", |t, a| t.mean(a)),
        ];
        for (name, op) in ops {
            let e = gradcheck(std::slice::from_ref(&a), |t, v| {
                let y = op(t, v[0]);
                probe(t, y)
            });
            assert!(e < TOL, "{name}: {e}");
        }
    }

    #[test]
    fn structural_ops() {
        let a = rand_t(8, &[3, 4]);
        let b = rand_t(9, &[3, 2]);
        let c = rand_t(10, &[2, 4]);
        let e = gradcheck(&[a.clone(), b.clone(), c.clone()], |t, v| {
            let x = t.transpose(v[0]);
            let x = t.reshape(x, &[3, 4]);
            let s = t.slice_cols(x, 1, 2);
            let cc = t.concat_cols(&[s, v[1], x]);
            let x2 = t.slice_cols(cc, 4, 4);
            let rr = t.concat_rows(&[x2, v[2]]);
            let g = t.gather_rows(rr, Rc::new(vec![4, 0, 0, 2, 1]));
            probe(t, g)
        });
        assert!(e < TOL, "{e}");
    }

    #[test]
    fn sparse_map_matches_gradient() {
        let a = rand_t(11, &[2, 4]);
        let map = Rc::new(SparseMap { in_cols: 4, taps: vec![vec![(0, 0.5), (1, 0.5)], vec![(3, 1.0)], vec![], vec![(2, 0.25), (0, -1.0)]] });
        let e = gradcheck(&[a], |t, v| {
            let y = t.sparse_map(v[0], map.clone());
            probe(t, y)
        });
        assert!(e < TOL, "{e}");
    }

    #[test]
    fn losses() {
        let x = rand_t(12, &[2, 6]);
        let target = Rc::new(vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0]);
        let tb = target.clone();
        let e = gradcheck(std::slice::from_ref(&x), |t, v| t.bce_with_logits(v[0], tb.clone()));
        assert!(e < TOL, "bce {e}");
        let e = gradcheck(std::slice::from_ref(&x), |t, v| t.dice_loss(v[0], target.clone(), 1.0));
        assert!(e < TOL, "dice {e}");
        let e = gradcheck(&[x], |t, v| t.cross_entropy(v[0], vec![5, 2], vec![0.1, 1.0]));
        assert!(e < TOL, "ce {e}");
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", ParamGroup::Frozen, rand_t(13, &[3, 3]));
        let u = store.add("u", ParamGroup::Other, rand_t(14, &[3, 3]));
        let mut t = Tape::new(&store);
        let wv = t.param(w);
        let uv = t.param(u);
        let y = t.matmul(wv, uv);
        let s = t.sum(y);
        let g = t.backward(s);
        assert!(g.get(wv).is_none());
        assert!(g.get(uv).is_some());
        let mut acc = store.zeros_like();
        t.accumulate_param_grads(&g, &mut acc);
        assert!(acc[w.index()].data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn param_is_memoized() {
        let mut store = ParamStore::new();
        let w = store.add("w", ParamGroup::Other, rand_t(15, &[2]));
        let mut t = Tape::new(&store);
        assert_eq!(t.param(w), t.param(w));
    }
}
