//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one forward pass. Values live on
//! the tape; callers hold [`Var`] handles. [`Tape::backward`] walks the tape
//! in reverse and returns [`Grads`] for every node that requires a
//! gradient. Parameters enter through [`Tape::param`], which binds each
//! [`ParamId`] to a single leaf so repeated uses accumulate into one
//! gradient.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{layer_norm_rows, log_softmax_row, masked_softmax_row, AttnMask};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Shape of a batched multi-head attention call.
#[derive(Clone, Copy, Debug)]
pub struct AttnShape {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow {
        x: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        s: T,
    },
    Relu(Var),
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    MaskedSoftmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    GatherRows {
        src: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    Sum(Var),
    SoftCrossEntropy {
        logits: Var,
        target: Var,
        log_probs: Vec<T>,
    },
    RowNorm(Var),
    BceWithLogits {
        logits: Var,
        labels: Vec<T>,
    },
    GradReverse {
        x: Var,
        scale: T,
    },
    StopGrad,
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: AttnShape,
        probs: Vec<T>,
    },
    Unfold {
        x: Var,
        len: usize,
        width: usize,
        lengths: Vec<usize>,
    },
    SegmentMax {
        x: Var,
        cols: usize,
        argmax: Vec<usize>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Values seen at `stop_grad` and `grad_reverse` sites, in call order.
///
/// A finite-difference check cannot see either operator, since both are
/// identities forward. Replaying the values recorded at the unperturbed
/// point turns each site into a function whose true derivative is the one
/// backward uses: a constant for `stop_grad`, and `(1+s)·x0 − s·x` for
/// `grad_reverse`.
#[derive(Clone, Debug, Default)]
pub enum Sites<T> {
    #[default]
    Off,
    Record(Vec<Tensor<T>>),
    Replay(Vec<Tensor<T>>, usize),
}

/// Recording of one forward computation.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
    param_grad: bool,
    sites: Sites<T>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            param_vars: Vec::new(),
            param_grad: true,
            sites: Sites::Off,
        }
    }

    /// A gradient tape that records its stop-gradient and reversal sites.
    pub fn recording() -> Self {
        Tape {
            sites: Sites::Record(Vec::new()),
            ..Tape::new()
        }
    }

    /// A gradient tape that linearizes its sites around recorded values.
    pub fn replaying(values: Vec<Tensor<T>>) -> Self {
        Tape {
            sites: Sites::Replay(values, 0),
            ..Tape::new()
        }
    }

    /// Values recorded so far by a [`Tape::recording`] tape.
    pub fn recorded_sites(&self) -> Vec<Tensor<T>> {
        match &self.sites {
            Sites::Record(v) => v.clone(),
            _ => Vec::new(),
        }
    }

    /// The replayed value for the next site, recording if asked to.
    fn site(&mut self, x: Var) -> Option<Tensor<T>> {
        match &mut self.sites {
            Sites::Off => None,
            Sites::Record(v) => {
                v.push(self.nodes[x.0].value.clone());
                None
            }
            Sites::Replay(v, k) => {
                *k += 1;
                v.get(*k - 1).cloned()
            }
        }
    }

    /// A tape whose parameters are bound as constants (inference).
    pub fn inference() -> Self {
        Tape {
            param_grad: false,
            ..Tape::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Binds a parameter; every call with the same id returns the same leaf.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if self.param_vars.len() <= id.index() {
            self.param_vars.resize(id.index() + 1, None);
        }
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let v = self.leaf(store.get(id).clone(), self.param_grad);
        self.param_vars[id.index()] = Some(v);
        v
    }

    /// The leaf bound to a parameter, if it was used on this tape.
    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.param_vars.get(id.index()).copied().flatten()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        let (k2, n) = if trans_b {
            (bv.cols(), bv.rows())
        } else {
            (bv.rows(), bv.cols())
        };
        if k != k2 || bv.shape().len() != 2 {
            return Err(shape_err("matmul", av.shape(), bv.shape()));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, av.data(), false, bv.data(), trans_b, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul { a, b, trans_b },
            rg,
        ))
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(name, av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(av.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// Adds a `[c]` bias to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let c = xv.cols();
        if bv.len() != c {
            return Err(shape_err("add_row", xv.shape(), bv.shape()));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(c) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let t = Tensor::from_parts(xv.shape().to_vec(), data);
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(t, Op::AddRow { x, bias }, rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let xv = self.value(x);
        let t = Tensor::from_parts(xv.shape().to_vec(), xv.data().iter().map(|&v| v * s).collect());
        let rg = self.rg(x);
        self.push(t, Op::Scale { x, s }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let t = Tensor::from_parts(
            xv.shape().to_vec(),
            xv.data().iter().map(|&v| v.max(T::zero())).collect(),
        );
        let rg = self.rg(x);
        self.push(t, Op::Relu(x), rg)
    }

    /// Multiplies by a fixed mask (inverted dropout: entries are 0 or 1/(1-p)).
    pub fn dropout_mask(&mut self, x: Var, mask: Vec<T>) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.len() {
            return Err(shape_err("dropout", xv.shape(), &[mask.len()]));
        }
        let t = Tensor::from_parts(
            xv.shape().to_vec(),
            xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect(),
        );
        let rg = self.rg(x);
        Ok(self.push(t, Op::Dropout { x, mask }, rg))
    }

    /// Row-wise softmax; forbidden entries get probability exactly zero.
    pub fn masked_softmax(&mut self, x: Var, mask: Option<Arc<AttnMask>>) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        if let Some(m) = &mask {
            if m.batch() * m.rows() != r || m.cols() != c {
                return Err(shape_err(
                    "masked_softmax",
                    xv.shape(),
                    &[m.batch() * m.rows(), m.cols()],
                ));
            }
        }
        let mut data = xv.data().to_vec();
        for (i, row) in data.chunks_mut(c).enumerate() {
            let f = mask.as_ref().map(|m| m.row(0, i));
            masked_softmax_row(row, f);
        }
        let t = Tensor::from_parts(xv.shape().to_vec(), data);
        let rg = self.rg(x);
        Ok(self.push(t, Op::MaskedSoftmax { x }, rg))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        self.masked_softmax(x, None).expect("unmasked softmax")
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let d = xv.cols();
        if gv.len() != d || bv.len() != d {
            return Err(shape_err("layer_norm", xv.shape(), gv.shape()));
        }
        let mut out = vec![T::zero(); xv.len()];
        let (xhat, inv_std) = layer_norm_rows(xv.data(), d, gv.data(), bv.data(), eps, &mut out);
        let t = Tensor::from_parts(xv.shape().to_vec(), out);
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// `out[i] = src[idx[i]]` row-wise. Backs embedding lookup, row
    /// selection and row reversal.
    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let sv = self.value(src);
        let (r, c) = (sv.rows(), sv.cols());
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::InvalidArgument(format!(
                    "gather_rows: index {i} out of range for {r} rows"
                )));
            }
            data.extend_from_slice(sv.row(i));
        }
        let t = Tensor::from_parts(vec![idx.len(), c], data);
        let rg = self.rg(src);
        Ok(self.push(
            t,
            Op::GatherRows {
                src,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    /// Reverses the row order of `x`.
    pub fn reverse_rows(&mut self, x: Var) -> Var {
        let r = self.value(x).rows();
        let idx: Vec<usize> = (0..r).rev().collect();
        self.gather_rows(x, &idx).expect("in-range reversal")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != c {
                return Err(shape_err("concat_rows", self.value(parts[0]).shape(), pv.shape()));
            }
            data.extend_from_slice(pv.data());
        }
        let rows = data.len() / c.max(1);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::from_parts(vec![rows, c], data),
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// `−Σ_rows Σ_cols target · log_softmax(logits)`.
    ///
    /// One-hot targets give ordinary cross-entropy; soft targets give the
    /// distillation loss. Zero target rows contribute nothing. The gradient
    /// reaches `target` too, so a teacher must be wrapped in
    /// [`Tape::stop_grad`] to stay untouched.
    pub fn soft_cross_entropy(&mut self, logits: Var, target: Var) -> Result<Var> {
        let (lv, tv) = (self.value(logits), self.value(target));
        if lv.shape() != tv.shape() {
            return Err(shape_err("soft_cross_entropy", lv.shape(), tv.shape()));
        }
        let c = lv.cols();
        let mut log_probs = vec![T::zero(); lv.len()];
        for (row, out) in lv.data().chunks(c).zip(log_probs.chunks_mut(c)) {
            log_softmax_row(row, out);
        }
        let mut loss = T::zero();
        for (&t, &lp) in tv.data().iter().zip(&log_probs) {
            if t != T::zero() {
                loss -= t * lp;
            }
        }
        let rg = self.rg(logits) || self.rg(target);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftCrossEntropy {
                logits,
                target,
                log_probs,
            },
            rg,
        ))
    }

    /// Euclidean norm of every row, `[r × 1]`.
    pub fn row_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let data: Vec<T> = xv
            .data()
            .chunks(c)
            .map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt())
            .collect();
        let n = data.len();
        let rg = self.rg(x);
        self.push(Tensor::from_parts(vec![n, 1], data), Op::RowNorm(x), rg)
    }

    /// Summed binary cross-entropy of logits against fixed 0/1 labels.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[T]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.len() != labels.len() {
            return Err(shape_err("bce_with_logits", lv.shape(), &[labels.len()]));
        }
        let mut loss = T::zero();
        for (&z, &y) in lv.data().iter().zip(labels) {
            loss += z.max(T::zero()) - z * y + (T::one() + (-z.abs()).exp()).ln();
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Identity forward; backward multiplies the gradient by `−scale`.
    pub fn grad_reverse(&mut self, x: Var, scale: T) -> Var {
        if let Some(x0) = self.site(x) {
            let c = self.constant(x0);
            let c = self.scale(c, T::one() + scale);
            let sx = self.scale(x, T::zero() - scale);
            return self.add(c, sx).expect("replayed site keeps its shape");
        }
        let t = self.value(x).clone();
        let rg = self.rg(x);
        self.push(t, Op::GradReverse { x, scale }, rg)
    }

    /// Identity forward; no gradient passes backward.
    pub fn stop_grad(&mut self, x: Var) -> Var {
        if let Some(x0) = self.site(x) {
            return self.constant(x0);
        }
        let t = self.value(x).clone();
        self.push(t, Op::StopGrad, false)
    }

    /// Batched multi-head scaled dot-product attention.
    ///
    /// `q` is `[batch·q_len × d]`, `k` and `v` are `[batch·k_len × d]`; the
    /// mask has one `[q_len × k_len]` block per batch entry and is shared by
    /// all heads.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        shape: AttnShape,
        mask: Arc<AttnMask>,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        let AttnShape {
            batch,
            q_len,
            k_len,
            heads,
        } = shape;
        if d % heads != 0 {
            return Err(Error::HeadDivisibility {
                d_model: d,
                n_heads: heads,
            });
        }
        if qv.rows() != batch * q_len
            || kv.rows() != batch * k_len
            || vv.rows() != batch * k_len
            || kv.cols() != d
            || vv.cols() != d
        {
            return Err(shape_err("attention", qv.shape(), kv.shape()));
        }
        if mask.batch() != batch || mask.rows() != q_len || mask.cols() != k_len {
            return Err(shape_err(
                "attention mask",
                &[batch, q_len, k_len],
                &[mask.batch(), mask.rows(), mask.cols()],
            ));
        }
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let mut probs = vec![T::zero(); batch * heads * q_len * k_len];
        let mut out = vec![T::zero(); batch * q_len * d];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..q_len {
                    let qrow = &qd[(b * q_len + i) * d + off..][..dh];
                    let p = &mut probs[((b * heads + h) * q_len + i) * k_len..][..k_len];
                    for (j, pj) in p.iter_mut().enumerate() {
                        let krow = &kd[(b * k_len + j) * d + off..][..dh];
                        *pj = qrow.iter().zip(krow).map(|(&x, &y)| x * y).sum::<T>() * scale;
                    }
                    masked_softmax_row(p, Some(mask.row(b, i)));
                    let orow = &mut out[(b * q_len + i) * d + off..][..dh];
                    for (j, &pj) in p.iter().enumerate() {
                        if pj == T::zero() {
                            continue;
                        }
                        let vrow = &vd[(b * k_len + j) * d + off..][..dh];
                        for (o, &x) in orow.iter_mut().zip(vrow) {
                            *o += pj * x;
                        }
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            Tensor::from_parts(vec![batch * q_len, d], out),
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            },
            rg,
        ))
    }

    /// Sliding windows of `width` rows (zero padded, centred) inside each
    /// length-`len` segment; rows at or past a segment's length are zero.
    /// Output is `[rows × width·c]`, the im2col form of a 1-D convolution.
    pub fn unfold(&mut self, x: Var, len: usize, width: usize, lengths: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if width % 2 == 0 || xv.rows() != len * lengths.len() {
            return Err(shape_err("unfold", xv.shape(), &[len * lengths.len(), width]));
        }
        let half = width / 2;
        let mut out = vec![T::zero(); xv.rows() * width * c];
        for (b, &lb) in lengths.iter().enumerate() {
            for t in 0..lb.min(len) {
                for o in 0..width {
                    let src = t as isize + o as isize - half as isize;
                    if src < 0 || src as usize >= lb {
                        continue;
                    }
                    let from = xv.row(b * len + src as usize);
                    out[((b * len + t) * width + o) * c..][..c].copy_from_slice(from);
                }
            }
        }
        let rows = xv.rows();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![rows, width * c], out),
            Op::Unfold {
                x,
                len,
                width,
                lengths: lengths.to_vec(),
            },
            rg,
        ))
    }

    /// Column-wise max over the first `lengths[b]` rows of each segment.
    pub fn segment_max(&mut self, x: Var, len: usize, lengths: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if xv.rows() != len * lengths.len() || lengths.iter().any(|&l| l == 0 || l > len) {
            return Err(shape_err("segment_max", xv.shape(), &[len * lengths.len(), c]));
        }
        let mut out = vec![T::zero(); lengths.len() * c];
        let mut argmax = vec![0usize; lengths.len() * c];
        for (b, &lb) in lengths.iter().enumerate() {
            for j in 0..c {
                let mut best = T::neg_infinity();
                let mut at = b * len;
                for t in 0..lb {
                    let r = b * len + t;
                    let val = xv.get(r, j);
                    if val > best {
                        best = val;
                        at = r;
                    }
                }
                out[b * c + j] = best;
                argmax[b * c + j] = at;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![lengths.len(), c], out),
            Op::SegmentMax { x, cols: c, argmax },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut g: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Ok(Grads { grads: g });
        }
        g[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(dy) = g[i].take() else { continue };
            let node = &self.nodes[i];
            self.backprop_node(node, &dy, &mut g);
            g[i] = Some(dy);
        }
        Ok(Grads { grads: g })
    }

    fn slot<'g>(&self, g: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.rg(v) {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(g[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn backprop_node(&self, node: &Node<T>, dy: &[T], g: &mut [Option<Vec<T>>]) {
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf | Op::StopGrad => {}
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.rows(), av.cols());
                let n = out_shape[1];
                if let Some(ga) = self.slot(g, *a) {
                    // da[m×k] = dy[m×n] · op(b)ᵀ
                    gemm(m, n, k, dy, false, bv.data(), !trans_b, ga, true);
                }
                if let Some(gb) = self.slot(g, *b) {
                    if *trans_b {
                        // db[n×k] = dyᵀ · a
                        gemm(n, m, k, dy, true, av.data(), false, gb, true);
                    } else {
                        // db[k×n] = aᵀ · dy
                        gemm(k, m, n, av.data(), true, dy, false, gb, true);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.slot(g, v) {
                        gv.iter_mut().zip(dy).for_each(|(o, &d)| *o += d);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(g, *a) {
                    ga.iter_mut().zip(dy).for_each(|(o, &d)| *o += d);
                }
                if let Some(gb) = self.slot(g, *b) {
                    gb.iter_mut().zip(dy).for_each(|(o, &d)| *o -= d);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(g, *a) {
                    for ((o, &d), &y) in ga.iter_mut().zip(dy).zip(bv) {
                        *o += d * y;
                    }
                }
                if let Some(gb) = self.slot(g, *b) {
                    for ((o, &d), &x) in gb.iter_mut().zip(dy).zip(av) {
                        *o += d * x;
                    }
                }
            }
            Op::AddRow { x, bias } => {
                if let Some(gx) = self.slot(g, *x) {
                    gx.iter_mut().zip(dy).for_each(|(o, &d)| *o += d);
                }
                if let Some(gb) = self.slot(g, *bias) {
                    let c = gb.len();
                    for row in dy.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(o, &d)| *o += d);
                    }
                }
            }
            Op::Scale { x, s } => {
                if let Some(gx) = self.slot(g, *x) {
                    gx.iter_mut().zip(dy).for_each(|(o, &d)| *o += d * *s);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.slot(g, *x) {
                    for ((o, &d), &v) in gx.iter_mut().zip(dy).zip(xv) {
                        if v > T::zero() {
                            *o += d;
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(gx) = self.slot(g, *x) {
                    for ((o, &d), &m) in gx.iter_mut().zip(dy).zip(mask) {
                        *o += d * m;
                    }
                }
            }
            Op::MaskedSoftmax { x, .. } => {
                let p = node.value.data();
                let c = node.value.cols();
                if let Some(gx) = self.slot(g, *x) {
                    for ((gr, dr), pr) in gx.chunks_mut(c).zip(dy.chunks(c)).zip(p.chunks(c)) {
                        let dot: T = pr.iter().zip(dr).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            gr[j] += pr[j] * (dr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = node.value.cols();
                let gv = self.value(*gain).data().to_vec();
                if let Some(gg) = self.slot(g, *gain) {
                    for (dr, hr) in dy.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += dr[j] * hr[j];
                        }
                    }
                }
                if let Some(gb) = self.slot(g, *bias) {
                    for dr in dy.chunks(d) {
                        gb.iter_mut().zip(dr).for_each(|(o, &v)| *o += v);
                    }
                }
                if let Some(gx) = self.slot(g, *x) {
                    let dn = T::lit(d as f64);
                    for (r, (dr, hr)) in dy.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..d {
                            let dh = dr[j] * gv[j];
                            s1 += dh;
                            s2 += dh * hr[j];
                        }
                        let inv = inv_std[r];
                        for j in 0..d {
                            let dh = dr[j] * gv[j];
                            gx[r * d + j] += inv / dn * (dn * dh - s1 - hr[j] * s2);
                        }
                    }
                }
            }
            Op::GatherRows { src, idx } => {
                let c = node.value.cols();
                if let Some(gs) = self.slot(g, *src) {
                    for (k, &i) in idx.iter().enumerate() {
                        let dr = &dy[k * c..(k + 1) * c];
                        gs[i * c..(i + 1) * c]
                            .iter_mut()
                            .zip(dr)
                            .for_each(|(o, &v)| *o += v);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if let Some(gp) = self.slot(g, p) {
                        gp.iter_mut()
                            .zip(&dy[off..off + n])
                            .for_each(|(o, &v)| *o += v);
                    }
                    off += n;
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.slot(g, *x) {
                    gx.iter_mut().for_each(|o| *o += dy[0]);
                }
            }
            Op::SoftCrossEntropy {
                logits,
                target,
                log_probs,
            } => {
                let c = node_cols(self.value(*logits));
                let tv = self.value(*target).data();
                let d0 = dy[0];
                if let Some(gl) = self.slot(g, *logits) {
                    for ((gr, tr), lr) in gl.chunks_mut(c).zip(tv.chunks(c)).zip(log_probs.chunks(c)) {
                        let mass: T = tr.iter().copied().sum();
                        if mass == T::zero() {
                            continue;
                        }
                        for j in 0..c {
                            gr[j] += d0 * (lr[j].exp() * mass - tr[j]);
                        }
                    }
                }
                if let Some(gt) = self.slot(g, *target) {
                    gt.iter_mut()
                        .zip(log_probs)
                        .for_each(|(o, &lp)| *o -= d0 * lp);
                }
            }
            Op::RowNorm(x) => {
                let xv = self.value(*x);
                let c = xv.cols();
                let norms = node.value.data();
                if let Some(gx) = self.slot(g, *x) {
                    for (r, (gr, xr)) in gx.chunks_mut(c).zip(xv.data().chunks(c)).enumerate() {
                        if norms[r] == T::zero() {
                            continue;
                        }
                        let f = dy[r] / norms[r];
                        gr.iter_mut().zip(xr).for_each(|(o, &v)| *o += f * v);
                    }
                }
            }
            Op::BceWithLogits { logits, labels } => {
                let lv = self.value(*logits).data();
                if let Some(gl) = self.slot(g, *logits) {
                    for ((o, &z), &y) in gl.iter_mut().zip(lv).zip(labels) {
                        let s = T::one() / (T::one() + (-z).exp());
                        *o += dy[0] * (s - y);
                    }
                }
            }
            Op::GradReverse { x, scale } => {
                if let Some(gx) = self.slot(g, *x) {
                    gx.iter_mut().zip(dy).for_each(|(o, &d)| *o -= *scale * d);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            } => self.attention_backward(*q, *k, *v, *shape, probs, dy, g),
            Op::Unfold {
                x,
                len,
                width,
                lengths,
            } => {
                let c = self.value(*x).cols();
                let half = width / 2;
                if let Some(gx) = self.slot(g, *x) {
                    for (b, &lb) in lengths.iter().enumerate() {
                        for t in 0..lb.min(*len) {
                            for o in 0..*width {
                                let src = t as isize + o as isize - half as isize;
                                if src < 0 || src as usize >= lb {
                                    continue;
                                }
                                let dr = &dy[((b * len + t) * width + o) * c..][..c];
                                let gr = &mut gx[(b * len + src as usize) * c..][..c];
                                gr.iter_mut().zip(dr).for_each(|(a, &d)| *a += d);
                            }
                        }
                    }
                }
            }
            Op::SegmentMax { x, cols, argmax } => {
                if let Some(gx) = self.slot(g, *x) {
                    for (k, &r) in argmax.iter().enumerate() {
                        gx[r * cols + k % cols] += dy[k];
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        shape: AttnShape,
        probs: &[T],
        dy: &[T],
        g: &mut [Option<Vec<T>>],
    ) {
        let AttnShape {
            batch,
            q_len,
            k_len,
            heads,
        } = shape;
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let d = self.value(q).cols();
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let mut gq = vec![T::zero(); qd.len()];
        let mut gk = vec![T::zero(); kd.len()];
        let mut gv = vec![T::zero(); vd.len()];
        let mut dp = vec![T::zero(); k_len];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..q_len {
                    let p = &probs[((b * heads + h) * q_len + i) * k_len..][..k_len];
                    let dout = &dy[(b * q_len + i) * d + off..][..dh];
                    let mut dot = T::zero();
                    for j in 0..k_len {
                        if p[j] == T::zero() {
                            dp[j] = T::zero();
                            continue;
                        }
                        let vrow = &vd[(b * k_len + j) * d + off..][..dh];
                        dp[j] = dout.iter().zip(vrow).map(|(&x, &y)| x * y).sum();
                        dot += p[j] * dp[j];
                        let gvrow = &mut gv[(b * k_len + j) * d + off..][..dh];
                        gvrow.iter_mut().zip(dout).for_each(|(o, &x)| *o += p[j] * x);
                    }
                    let qrow = &qd[(b * q_len + i) * d + off..][..dh];
                    for j in 0..k_len {
                        if p[j] == T::zero() {
                            continue;
                        }
                        let dl = p[j] * (dp[j] - dot) * scale;
                        let krow = &kd[(b * k_len + j) * d + off..][..dh];
                        let gqrow = &mut gq[(b * q_len + i) * d + off..][..dh];
                        gqrow.iter_mut().zip(krow).for_each(|(o, &x)| *o += dl * x);
                        let gkrow = &mut gk[(b * k_len + j) * d + off..][..dh];
                        gkrow.iter_mut().zip(qrow).for_each(|(o, &x)| *o += dl * x);
                    }
                }
            }
        }
        for (var, local) in [(q, gq), (k, gk), (v, gv)] {
            if let Some(slot) = self.slot(g, var) {
                slot.iter_mut().zip(&local).for_each(|(o, &x)| *o += x);
            }
        }
    }
}

fn node_cols<T: Scalar>(t: &Tensor<T>) -> usize {
    t.cols()
}

/// Gradients from one backward sweep, indexed by tape node.
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Grads<T> {
    /// Gradient of `v`; `None` when no gradient reached it.
    pub fn get(&self, tape: &Tape<T>, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_parts(tape.value(v).shape().to_vec(), g.clone()))
    }

    pub fn raw(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of a parameter bound on `tape`.
    pub fn param(&self, tape: &Tape<T>, id: ParamId) -> Option<Tensor<T>> {
        tape.param_var(id).and_then(|v| self.get(tape, v))
    }

    /// Per-parameter gradients for every parameter of `store`, `None` where
    /// the parameter was unused or received nothing.
    pub fn params(&self, tape: &Tape<T>, store: &ParamStore<T>) -> Vec<Option<Tensor<T>>> {
        store.ids().map(|id| self.param(tape, id)).collect()
    }
}
