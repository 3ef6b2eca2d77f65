//! Reverse-mode differentiation on a recorded operation list.
//!
//! Forward calls (`matmul`, `softmax_last`, ...) evaluate eagerly and
//! append one record per primitive. [`Tape::backward`] replays the
//! records in reverse exactly once, accumulating adjoints; inputs that
//! never influence the loss keep a gradient of exactly zero.
//!
//! Shape agreement between operands is the caller's contract and is
//! enforced with assertions; user-facing validation happens in the
//! module layer above. Accumulation order is fixed, so identical inputs
//! reproduce identical results bit for bit.

use crate::numerics::array::DenseArray;
use crate::numerics::funcs::{softmax_row, KL_FLOOR};
use crate::scalar::{real, Real};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Reshape { x: NodeId },
    Transpose2d { x: NodeId },
    ConcatCols { a: NodeId, b: NodeId },
    SplitHeads { x: NodeId, batch: usize, seq: usize, heads: usize, head_dim: usize },
    MergeHeads { x: NodeId, batch: usize, seq: usize, heads: usize, head_dim: usize },
    Matmul { a: NodeId, b: NodeId },
    MatmulTb { a: NodeId, b: NodeId },
    BatchMatmul { a: NodeId, b: NodeId, transpose_b: bool },
    BatchOuter { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    AddBroadcast { x: NodeId, p: NodeId },
    ScalarAffine { x: NodeId, mul: T },
    MulScalarNode { x: NodeId, s: NodeId },
    Exp { x: NodeId, clamp: Option<T> },
    Sigmoid { x: NodeId },
    Silu { x: NodeId },
    Recip { x: NodeId },
    SumLast { x: NodeId },
    MeanLast { x: NodeId },
    MeanMid { x: NodeId },
    SumAll { x: NodeId },
    SoftmaxLast { x: NodeId },
    L2NormalizeRows { x: NodeId },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId },
    WeightedChannelMean { stack: NodeId, w: NodeId },
    CrossEntropyRows { logits: NodeId, targets: Vec<usize> },
    SymKlRows { p: NodeId, q: NodeId },
}

struct Node<T> {
    op: Op<T>,
    val: DenseArray<T>,
}

/// Recorded computation; values live for the whole forward/backward cycle.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

/// Adjoints produced by [`Tape::backward`]. Only leaf gradients are
/// retained; interior records are consumed during the reverse sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    dims: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&[T]> {
        self.grads[id.0].as_deref()
    }

    /// Gradient with respect to a node; exact zeros if nothing flowed to it.
    pub fn wrt(&self, id: NodeId) -> DenseArray<T> {
        match &self.grads[id.0] {
            Some(g) => DenseArray::from_vec(&self.dims[id.0], g.clone()).expect("grad dims"),
            None => DenseArray::zeros(&self.dims[id.0]),
        }
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn val(&self, id: NodeId) -> &DenseArray<T> {
        &self.nodes[id.0].val
    }

    pub fn dims(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].val.dims()
    }

    /// Value of a one-element node.
    pub fn scalar_val(&self, id: NodeId) -> T {
        let v = self.val(id);
        assert_eq!(v.len(), 1, "scalar_val on {:?}", v.dims());
        v.data()[0]
    }

    fn push(&mut self, op: Op<T>, val: DenseArray<T>) -> NodeId {
        self.nodes.push(Node { op, val });
        NodeId(self.nodes.len() - 1)
    }

    // ── leaves ─────────────────────────────────────────────────────

    pub fn leaf(&mut self, val: DenseArray<T>) -> NodeId {
        self.push(Op::Leaf, val)
    }

    pub fn scalar_leaf(&mut self, v: T) -> NodeId {
        self.leaf(DenseArray::scalar(v))
    }

    // ── shape ops ──────────────────────────────────────────────────

    pub fn reshape(&mut self, x: NodeId, dims: &[usize]) -> NodeId {
        let v = self.val(x).clone().reshape(dims).expect("reshape on tape");
        self.push(Op::Reshape { x }, v)
    }

    pub fn transpose2d(&mut self, x: NodeId) -> NodeId {
        let xv = self.val(x);
        let (r, c) = (xv.rows(), xv.cols());
        let out = transpose(xv.data(), r, c);
        let val = DenseArray::from_vec(&[c, r], out).unwrap();
        self.push(Op::Transpose2d { x }, val)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.val(a), self.val(b));
        assert_eq!(av.rows(), bv.rows(), "concat_cols row mismatch");
        let (r, ca, cb) = (av.rows(), av.cols(), bv.cols());
        let mut out = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            out.extend_from_slice(av.row(i));
            out.extend_from_slice(bv.row(i));
        }
        let val = DenseArray::from_vec(&[r, ca + cb], out).unwrap();
        self.push(Op::ConcatCols { a, b }, val)
    }

    /// `[(batch*seq) x (heads*head_dim)]` -> `[(batch*heads), seq, head_dim]`.
    pub fn split_heads(&mut self, x: NodeId, batch: usize, seq: usize, heads: usize, head_dim: usize) -> NodeId {
        let xv = self.val(x);
        assert_eq!(xv.dims(), &[batch * seq, heads * head_dim], "split_heads input");
        let mut out = vec![T::zero(); xv.len()];
        let src = xv.data();
        for b in 0..batch {
            for h in 0..heads {
                for s in 0..seq {
                    let dst_base = ((b * heads + h) * seq + s) * head_dim;
                    let src_base = (b * seq + s) * (heads * head_dim) + h * head_dim;
                    out[dst_base..dst_base + head_dim]
                        .copy_from_slice(&src[src_base..src_base + head_dim]);
                }
            }
        }
        let val = DenseArray::from_vec(&[batch * heads, seq, head_dim], out).unwrap();
        self.push(Op::SplitHeads { x, batch, seq, heads, head_dim }, val)
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, x: NodeId, batch: usize, seq: usize, heads: usize, head_dim: usize) -> NodeId {
        let xv = self.val(x);
        assert_eq!(xv.dims(), &[batch * heads, seq, head_dim], "merge_heads input");
        let mut out = vec![T::zero(); xv.len()];
        let src = xv.data();
        for b in 0..batch {
            for h in 0..heads {
                for s in 0..seq {
                    let src_base = ((b * heads + h) * seq + s) * head_dim;
                    let dst_base = (b * seq + s) * (heads * head_dim) + h * head_dim;
                    out[dst_base..dst_base + head_dim]
                        .copy_from_slice(&src[src_base..src_base + head_dim]);
                }
            }
        }
        let val = DenseArray::from_vec(&[batch * seq, heads * head_dim], out).unwrap();
        self.push(Op::MergeHeads { x, batch, seq, heads, head_dim }, val)
    }

    // ── linear algebra ─────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.val(a), self.val(b));
        let (m, k) = (av.rows(), av.cols());
        let (k2, n) = (bv.rows(), bv.cols());
        assert_eq!(k, k2, "matmul inner dims");
        let out = matmul(av.data(), bv.data(), m, k, n);
        let val = DenseArray::from_vec(&[m, n], out).unwrap();
        self.push(Op::Matmul { a, b }, val)
    }

    /// `a @ b^T` with `a: [m,k]`, `b: [n,k]`.
    pub fn matmul_tb(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.val(a), self.val(b));
        let (m, k) = (av.rows(), av.cols());
        let (n, k2) = (bv.rows(), bv.cols());
        assert_eq!(k, k2, "matmul_tb inner dims");
        let out = matmul_tb(av.data(), bv.data(), m, k, n);
        let val = DenseArray::from_vec(&[m, n], out).unwrap();
        self.push(Op::MatmulTb { a, b }, val)
    }

    /// Per-slice matmul over the leading axis. With `transpose_b`,
    /// `a: [g,m,k]` and `b: [g,n,k]`; otherwise `b: [g,k,n]`.
    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId, transpose_b: bool) -> NodeId {
        let (av, bv) = (self.val(a), self.val(b));
        assert_eq!(av.rank(), 3);
        assert_eq!(bv.rank(), 3);
        let (g, m, k) = (av.dims()[0], av.dims()[1], av.dims()[2]);
        assert_eq!(bv.dims()[0], g, "batch_matmul group count");
        let n = if transpose_b {
            assert_eq!(bv.dims()[2], k, "batch_matmul inner dims");
            bv.dims()[1]
        } else {
            assert_eq!(bv.dims()[1], k, "batch_matmul inner dims");
            bv.dims()[2]
        };
        let mut out = vec![T::zero(); g * m * n];
        for i in 0..g {
            let sa = &av.data()[i * m * k..(i + 1) * m * k];
            let sb = &bv.data()[i * n * k..(i + 1) * n * k];
            let done = if transpose_b {
                matmul_tb(sa, sb, m, k, n)
            } else {
                matmul(sa, sb, m, k, n)
            };
            out[i * m * n..(i + 1) * m * n].copy_from_slice(&done);
        }
        let val = DenseArray::from_vec(&[g, m, n], out).unwrap();
        self.push(Op::BatchMatmul { a, b, transpose_b }, val)
    }

    /// Per-sample outer product: `[b,p] x [b,q] -> [b,p,q]`.
    pub fn batch_outer(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.val(a), self.val(b));
        assert_eq!(av.rows(), bv.rows(), "batch_outer batch");
        let (bs, p, q) = (av.rows(), av.cols(), bv.cols());
        let mut out = vec![T::zero(); bs * p * q];
        for s in 0..bs {
            let (ra, rb) = (av.row(s), bv.row(s));
            let base = s * p * q;
            for i in 0..p {
                let o = &mut out[base + i * q..base + (i + 1) * q];
                let ai = ra[i];
                for j in 0..q {
                    o[j] = ai * rb[j];
                }
            }
        }
        let val = DenseArray::from_vec(&[bs, p, q], out).unwrap();
        self.push(Op::BatchOuter { a, b }, val)
    }

    // ── elementwise ────────────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.val(a), self.val(b));
        assert_eq!(av.dims(), bv.dims(), "add shape");
        let out: Vec<T> = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let val = DenseArray::from_vec(av.dims(), out).unwrap();
        self.push(Op::Add { a, b }, val)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.val(a), self.val(b));
        assert_eq!(av.dims(), bv.dims(), "mul shape");
        let out: Vec<T> = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let val = DenseArray::from_vec(av.dims(), out).unwrap();
        self.push(Op::Mul { a, b }, val)
    }

    /// `x[i, ..] + p[..]` for every leading index; covers bias rows and
    /// per-sample prior matrices alike.
    pub fn add_broadcast(&mut self, x: NodeId, p: NodeId) -> NodeId {
        let (xv, pv) = (self.val(x), self.val(p));
        assert_eq!(&xv.dims()[1..], pv.dims(), "add_broadcast trailing dims");
        let stride = pv.len();
        let mut out = xv.data().to_vec();
        for chunk in out.chunks_mut(stride) {
            for (o, &b) in chunk.iter_mut().zip(pv.data()) {
                *o += b;
            }
        }
        let val = DenseArray::from_vec(xv.dims(), out).unwrap();
        self.push(Op::AddBroadcast { x, p }, val)
    }

    pub fn scalar_affine(&mut self, x: NodeId, mul: T, add: T) -> NodeId {
        let xv = self.val(x);
        let out: Vec<T> = xv.data().iter().map(|&v| mul * v + add).collect();
        let val = DenseArray::from_vec(xv.dims(), out).unwrap();
        self.push(Op::ScalarAffine { x, mul }, val)
    }

    /// Multiply every element of `x` by the one-element node `s`.
    pub fn mul_scalar_node(&mut self, x: NodeId, s: NodeId) -> NodeId {
        let sv = self.scalar_val(s);
        let xv = self.val(x);
        let out: Vec<T> = xv.data().iter().map(|&v| v * sv).collect();
        let val = DenseArray::from_vec(xv.dims(), out).unwrap();
        self.push(Op::MulScalarNode { x, s }, val)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.exp_impl(x, None)
    }

    /// `exp` with the argument clamped into `[-limit, limit]` first.
    pub fn exp_clamped(&mut self, x: NodeId, limit: T) -> NodeId {
        self.exp_impl(x, Some(limit))
    }

    fn exp_impl(&mut self, x: NodeId, clamp: Option<T>) -> NodeId {
        let xv = self.val(x);
        let out: Vec<T> = xv
            .data()
            .iter()
            .map(|&v| match clamp {
                Some(c) => v.max(-c).min(c).exp(),
                None => v.exp(),
            })
            .collect();
        let val = DenseArray::from_vec(xv.dims(), out).unwrap();
        self.push(Op::Exp { x, clamp }, val)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let xv = self.val(x);
        let out: Vec<T> = xv.data().iter().map(|&v| sigmoid(v)).collect();
        let val = DenseArray::from_vec(xv.dims(), out).unwrap();
        self.push(Op::Sigmoid { x }, val)
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let xv = self.val(x);
        let out: Vec<T> = xv.data().iter().map(|&v| v * sigmoid(v)).collect();
        let val = DenseArray::from_vec(xv.dims(), out).unwrap();
        self.push(Op::Silu { x }, val)
    }

    pub fn recip(&mut self, x: NodeId) -> NodeId {
        let xv = self.val(x);
        let out: Vec<T> = xv.data().iter().map(|&v| T::one() / v).collect();
        let val = DenseArray::from_vec(xv.dims(), out).unwrap();
        self.push(Op::Recip { x }, val)
    }

    // ── reductions ─────────────────────────────────────────────────

    pub fn sum_last(&mut self, x: NodeId) -> NodeId {
        let (dims, out) = self.reduce_last(x, false);
        let val = DenseArray::from_vec(&dims, out).unwrap();
        self.push(Op::SumLast { x }, val)
    }

    pub fn mean_last(&mut self, x: NodeId) -> NodeId {
        let (dims, out) = self.reduce_last(x, true);
        let val = DenseArray::from_vec(&dims, out).unwrap();
        self.push(Op::MeanLast { x }, val)
    }

    fn reduce_last(&self, x: NodeId, mean: bool) -> (Vec<usize>, Vec<T>) {
        let xv = self.val(x);
        assert!(xv.rank() >= 2, "reduce_last needs rank >= 2");
        let d = *xv.dims().last().unwrap();
        let lead = xv.len() / d;
        let scale = if mean { real::<T>(1.0 / d as f64) } else { T::one() };
        let mut out = vec![T::zero(); lead];
        for (i, chunk) in xv.data().chunks(d).enumerate() {
            let mut acc = T::zero();
            for &v in chunk {
                acc += v;
            }
            out[i] = acc * scale;
        }
        (xv.dims()[..xv.rank() - 1].to_vec(), out)
    }

    /// Mean over the middle axis of a rank-3 array: `[b,c,d] -> [b,d]`.
    pub fn mean_mid(&mut self, x: NodeId) -> NodeId {
        let xv = self.val(x);
        assert_eq!(xv.rank(), 3, "mean_mid needs rank 3");
        let (b, c, d) = (xv.dims()[0], xv.dims()[1], xv.dims()[2]);
        let inv = real::<T>(1.0 / c as f64);
        let mut out = vec![T::zero(); b * d];
        for bi in 0..b {
            for ci in 0..c {
                let src = &xv.data()[(bi * c + ci) * d..(bi * c + ci + 1) * d];
                let dst = &mut out[bi * d..(bi + 1) * d];
                for (o, &v) in dst.iter_mut().zip(src) {
                    *o += v;
                }
            }
        }
        for o in out.iter_mut() {
            *o *= inv;
        }
        let val = DenseArray::from_vec(&[b, d], out).unwrap();
        self.push(Op::MeanMid { x }, val)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let xv = self.val(x);
        let mut acc = T::zero();
        for &v in xv.data() {
            acc += v;
        }
        self.push(Op::SumAll { x }, DenseArray::scalar(acc))
    }

    // ── structured ─────────────────────────────────────────────────

    /// Softmax over the trailing axis (any leading shape).
    pub fn softmax_last(&mut self, x: NodeId) -> NodeId {
        let xv = self.val(x);
        let d = *xv.dims().last().unwrap();
        let mut out = vec![T::zero(); xv.len()];
        for (src, dst) in xv.data().chunks(d).zip(out.chunks_mut(d)) {
            softmax_row(src, dst);
        }
        let val = DenseArray::from_vec(xv.dims(), out).unwrap();
        self.push(Op::SoftmaxLast { x }, val)
    }

    /// Row L2 normalization of a rank-2 array (norm floored at 1e-12).
    pub fn l2_normalize_rows(&mut self, x: NodeId) -> NodeId {
        let xv = self.val(x);
        let (r, d) = (xv.rows(), xv.cols());
        let mut out = xv.data().to_vec();
        for i in 0..r {
            let row = &mut out[i * d..(i + 1) * d];
            let norm = row_norm(row);
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        let val = DenseArray::from_vec(&[r, d], out).unwrap();
        self.push(Op::L2NormalizeRows { x }, val)
    }

    /// Layer normalization over the trailing axis with learnable gain/bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let (xv, gv, bv) = (self.val(x), self.val(gain), self.val(bias));
        let d = *xv.dims().last().unwrap();
        assert_eq!(gv.len(), d, "layer_norm gain");
        assert_eq!(bv.len(), d, "layer_norm bias");
        let mut out = vec![T::zero(); xv.len()];
        for (src, dst) in xv.data().chunks(d).zip(out.chunks_mut(d)) {
            let (mu, inv_sigma) = moments(src);
            for k in 0..d {
                dst[k] = gv.data()[k] * (src[k] - mu) * inv_sigma + bv.data()[k];
            }
        }
        let val = DenseArray::from_vec(xv.dims(), out).unwrap();
        self.push(Op::LayerNorm { x, gain, bias }, val)
    }

    /// Normalized weighted sum over channels:
    /// `out[b,k] = sum_c w[b,c] stack[b,c,k] / sum_c w[b,c]`.
    pub fn weighted_channel_mean(&mut self, stack: NodeId, w: NodeId) -> NodeId {
        let (sv, wv) = (self.val(stack), self.val(w));
        assert_eq!(sv.rank(), 3, "weighted_channel_mean stack rank");
        let (b, c, k) = (sv.dims()[0], sv.dims()[1], sv.dims()[2]);
        assert_eq!(wv.dims(), &[b, c], "weighted_channel_mean weights");
        let mut out = vec![T::zero(); b * k];
        for bi in 0..b {
            let wrow = wv.row(bi);
            let mut wsum = T::zero();
            for &wc in wrow {
                wsum += wc;
            }
            let dst = &mut out[bi * k..(bi + 1) * k];
            for (ci, &wc) in wrow.iter().enumerate() {
                let src = &sv.data()[(bi * c + ci) * k..(bi * c + ci + 1) * k];
                for (o, &v) in dst.iter_mut().zip(src) {
                    *o += wc * v;
                }
            }
            for o in dst.iter_mut() {
                *o /= wsum;
            }
        }
        let val = DenseArray::from_vec(&[b, k], out).unwrap();
        self.push(Op::WeightedChannelMean { stack, w }, val)
    }

    /// Mean cross-entropy of row `r` against class `targets[r]`.
    pub fn cross_entropy_rows(&mut self, logits: NodeId, targets: Vec<usize>) -> NodeId {
        let lv = self.val(logits);
        let (r, c) = (lv.rows(), lv.cols());
        assert_eq!(targets.len(), r, "cross_entropy_rows targets");
        let mut row_losses = Vec::with_capacity(r);
        for i in 0..r {
            let row = lv.row(i);
            assert!(targets[i] < c, "target class out of range");
            // shifted form: uniform logits give exactly ln(c)
            let mut max = row[0];
            for &v in row {
                if v > max {
                    max = v;
                }
            }
            let mut sum = T::zero();
            for &v in row {
                sum += (v - max).exp();
            }
            row_losses.push(sum.ln() - (row[targets[i]] - max));
        }
        // pairwise reduction: identical rows at power-of-two batch sizes
        // average without rounding
        let val = DenseArray::scalar(pairwise_sum(&row_losses) / real::<T>(r as f64));
        self.push(Op::CrossEntropyRows { logits, targets }, val)
    }

    /// Mean over rows of the symmetric KL divergence between row
    /// distributions `p` and `q` (entries floored at [`KL_FLOOR`]).
    pub fn sym_kl_rows(&mut self, p: NodeId, q: NodeId) -> NodeId {
        let (pv, qv) = (self.val(p), self.val(q));
        assert_eq!(pv.dims(), qv.dims(), "sym_kl_rows shape");
        let (r, d) = (pv.rows(), pv.cols());
        let floor = real::<T>(KL_FLOOR);
        let mut total = T::zero();
        for i in 0..r {
            let (pr, qr) = (pv.row(i), qv.row(i));
            for k in 0..d {
                let a = pr[k].max(floor);
                let b = qr[k].max(floor);
                total += (a - b) * (a.ln() - b.ln());
            }
        }
        let val = DenseArray::scalar(total / real::<T>(r as f64));
        self.push(Op::SymKlRows { p, q }, val)
    }

    // ── reverse sweep ──────────────────────────────────────────────

    /// Propagate adjoints from the one-element node `loss` back to every
    /// leaf. Each recorded op is visited exactly once.
    pub fn backward(&self, loss: NodeId) -> Gradients<T> {
        assert_eq!(self.val(loss).len(), 1, "backward seed must be scalar");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..n).rev() {
            let is_leaf = matches!(self.nodes[i].op, Op::Leaf);
            if is_leaf {
                continue;
            }
            let gout = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_op(i, &gout, &mut grads);
        }

        Gradients {
            grads,
            dims: self.nodes.iter().map(|n| n.val.dims().to_vec()).collect(),
        }
    }

    fn backward_op(&self, i: usize, gout: &[T], grads: &mut [Option<Vec<T>>]) {
        let acc = |grads: &mut [Option<Vec<T>>], id: NodeId, contrib: Vec<T>| {
            match &mut grads[id.0] {
                Some(existing) => {
                    for (e, g) in existing.iter_mut().zip(&contrib) {
                        *e += *g;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };

        match &self.nodes[i].op {
            Op::Leaf => unreachable!("leaf handled by caller"),

            Op::Reshape { x } => acc(grads, *x, gout.to_vec()),

            Op::Transpose2d { x } => {
                let (r, c) = (self.val(*x).rows(), self.val(*x).cols());
                // output is [c, r]; transpose the adjoint back to [r, c]
                acc(grads, *x, transpose(gout, c, r));
            }

            Op::ConcatCols { a, b } => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (r, ca, cb) = (av.rows(), av.cols(), bv.cols());
                let mut ga = vec![T::zero(); r * ca];
                let mut gb = vec![T::zero(); r * cb];
                for ri in 0..r {
                    let row = &gout[ri * (ca + cb)..(ri + 1) * (ca + cb)];
                    ga[ri * ca..(ri + 1) * ca].copy_from_slice(&row[..ca]);
                    gb[ri * cb..(ri + 1) * cb].copy_from_slice(&row[ca..]);
                }
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }

            Op::SplitHeads { x, batch, seq, heads, head_dim } => {
                let (batch, seq, heads, head_dim) = (*batch, *seq, *heads, *head_dim);
                let mut gx = vec![T::zero(); self.val(*x).len()];
                for b in 0..batch {
                    for h in 0..heads {
                        for s in 0..seq {
                            let split_base = ((b * heads + h) * seq + s) * head_dim;
                            let flat_base = (b * seq + s) * (heads * head_dim) + h * head_dim;
                            gx[flat_base..flat_base + head_dim]
                                .copy_from_slice(&gout[split_base..split_base + head_dim]);
                        }
                    }
                }
                acc(grads, *x, gx);
            }

            Op::MergeHeads { x, batch, seq, heads, head_dim } => {
                let (batch, seq, heads, head_dim) = (*batch, *seq, *heads, *head_dim);
                let mut gx = vec![T::zero(); self.val(*x).len()];
                for b in 0..batch {
                    for h in 0..heads {
                        for s in 0..seq {
                            let split_base = ((b * heads + h) * seq + s) * head_dim;
                            let flat_base = (b * seq + s) * (heads * head_dim) + h * head_dim;
                            gx[split_base..split_base + head_dim]
                                .copy_from_slice(&gout[flat_base..flat_base + head_dim]);
                        }
                    }
                }
                acc(grads, *x, gx);
            }

            Op::Matmul { a, b } => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                // dA = dC @ B^T ; dB = A^T @ dC
                acc(grads, *a, matmul_tb(gout, bv.data(), m, n, k));
                let at = transpose(av.data(), m, k);
                acc(grads, *b, matmul(&at, gout, k, m, n));
            }

            Op::MatmulTb { a, b } => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (m, k) = (av.rows(), av.cols());
                let n = bv.rows();
                // C = A @ B^T: dA = dC @ B ; dB = dC^T @ A
                acc(grads, *a, matmul(gout, bv.data(), m, n, k));
                let gt = transpose(gout, m, n);
                acc(grads, *b, matmul(&gt, av.data(), n, m, k));
            }

            Op::BatchMatmul { a, b, transpose_b } => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (g, m, k) = (av.dims()[0], av.dims()[1], av.dims()[2]);
                let n = if *transpose_b { bv.dims()[1] } else { bv.dims()[2] };
                let mut ga = vec![T::zero(); av.len()];
                let mut gb = vec![T::zero(); bv.len()];
                for s in 0..g {
                    let go = &gout[s * m * n..(s + 1) * m * n];
                    let sa = &av.data()[s * m * k..(s + 1) * m * k];
                    let sb = &bv.data()[s * n * k..(s + 1) * n * k];
                    if *transpose_b {
                        ga[s * m * k..(s + 1) * m * k]
                            .copy_from_slice(&matmul(go, sb, m, n, k));
                        let gt = transpose(go, m, n);
                        gb[s * n * k..(s + 1) * n * k]
                            .copy_from_slice(&matmul(&gt, sa, n, m, k));
                    } else {
                        ga[s * m * k..(s + 1) * m * k]
                            .copy_from_slice(&matmul_tb(go, sb, m, n, k));
                        let at = transpose(sa, m, k);
                        gb[s * k * n..(s + 1) * k * n]
                            .copy_from_slice(&matmul(&at, go, k, m, n));
                    }
                }
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }

            Op::BatchOuter { a, b } => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (bs, p, q) = (av.rows(), av.cols(), bv.cols());
                let mut ga = vec![T::zero(); bs * p];
                let mut gb = vec![T::zero(); bs * q];
                for s in 0..bs {
                    let base = s * p * q;
                    let (ra, rb) = (av.row(s), bv.row(s));
                    for ii in 0..p {
                        let grow = &gout[base + ii * q..base + (ii + 1) * q];
                        let mut da = T::zero();
                        for j in 0..q {
                            da += grow[j] * rb[j];
                            gb[s * q + j] += grow[j] * ra[ii];
                        }
                        ga[s * p + ii] += da;
                    }
                }
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }

            Op::Add { a, b } => {
                acc(grads, *a, gout.to_vec());
                acc(grads, *b, gout.to_vec());
            }

            Op::Mul { a, b } => {
                let (av, bv) = (self.val(*a), self.val(*b));
                acc(grads, *a, gout.iter().zip(bv.data()).map(|(&g, &v)| g * v).collect());
                acc(grads, *b, gout.iter().zip(av.data()).map(|(&g, &v)| g * v).collect());
            }

            Op::AddBroadcast { x, p } => {
                let stride = self.val(*p).len();
                acc(grads, *x, gout.to_vec());
                let mut gp = vec![T::zero(); stride];
                for chunk in gout.chunks(stride) {
                    for (o, &g) in gp.iter_mut().zip(chunk) {
                        *o += g;
                    }
                }
                acc(grads, *p, gp);
            }

            Op::ScalarAffine { x, mul } => {
                acc(grads, *x, gout.iter().map(|&g| g * *mul).collect());
            }

            Op::MulScalarNode { x, s } => {
                let sv = self.scalar_val(*s);
                let xv = self.val(*x);
                acc(grads, *x, gout.iter().map(|&g| g * sv).collect());
                let mut ds = T::zero();
                for (&g, &v) in gout.iter().zip(xv.data()) {
                    ds += g * v;
                }
                acc(grads, *s, vec![ds]);
            }

            Op::Exp { x, clamp } => {
                let xv = self.val(*x);
                let yv = self.val(NodeId(i));
                let gx: Vec<T> = match clamp {
                    None => gout.iter().zip(yv.data()).map(|(&g, &y)| g * y).collect(),
                    Some(c) => gout
                        .iter()
                        .zip(yv.data())
                        .zip(xv.data())
                        .map(|((&g, &y), &v)| if v.abs() <= *c { g * y } else { T::zero() })
                        .collect(),
                };
                acc(grads, *x, gx);
            }

            Op::Sigmoid { x } => {
                let yv = self.val(NodeId(i));
                acc(
                    grads,
                    *x,
                    gout.iter()
                        .zip(yv.data())
                        .map(|(&g, &y)| g * y * (T::one() - y))
                        .collect(),
                );
            }

            Op::Silu { x } => {
                let xv = self.val(*x);
                let gx: Vec<T> = gout
                    .iter()
                    .zip(xv.data())
                    .map(|(&g, &v)| {
                        let s = sigmoid(v);
                        g * (s + v * s * (T::one() - s))
                    })
                    .collect();
                acc(grads, *x, gx);
            }

            Op::Recip { x } => {
                let yv = self.val(NodeId(i));
                acc(
                    grads,
                    *x,
                    gout.iter()
                        .zip(yv.data())
                        .map(|(&g, &y)| -g * y * y)
                        .collect(),
                );
            }

            Op::SumLast { x } | Op::MeanLast { x } => {
                let xv = self.val(*x);
                let d = *xv.dims().last().unwrap();
                let scale = if matches!(self.nodes[i].op, Op::MeanLast { .. }) {
                    real::<T>(1.0 / d as f64)
                } else {
                    T::one()
                };
                let mut gx = vec![T::zero(); xv.len()];
                for (lead, chunk) in gx.chunks_mut(d).enumerate() {
                    let g = gout[lead] * scale;
                    for o in chunk {
                        *o = g;
                    }
                }
                acc(grads, *x, gx);
            }

            Op::MeanMid { x } => {
                let xv = self.val(*x);
                let (b, c, d) = (xv.dims()[0], xv.dims()[1], xv.dims()[2]);
                let inv = real::<T>(1.0 / c as f64);
                let mut gx = vec![T::zero(); xv.len()];
                for bi in 0..b {
                    for ci in 0..c {
                        let dst = &mut gx[(bi * c + ci) * d..(bi * c + ci + 1) * d];
                        let src = &gout[bi * d..(bi + 1) * d];
                        for (o, &g) in dst.iter_mut().zip(src) {
                            *o = g * inv;
                        }
                    }
                }
                acc(grads, *x, gx);
            }

            Op::SumAll { x } => {
                let xv = self.val(*x);
                acc(grads, *x, vec![gout[0]; xv.len()]);
            }

            Op::SoftmaxLast { x } => {
                let yv = self.val(NodeId(i));
                let d = *yv.dims().last().unwrap();
                let mut gx = vec![T::zero(); yv.len()];
                for ((grow, yrow), out) in gout
                    .chunks(d)
                    .zip(yv.data().chunks(d))
                    .zip(gx.chunks_mut(d))
                {
                    let mut dot = T::zero();
                    for k in 0..d {
                        dot += grow[k] * yrow[k];
                    }
                    for k in 0..d {
                        out[k] = yrow[k] * (grow[k] - dot);
                    }
                }
                acc(grads, *x, gx);
            }

            Op::L2NormalizeRows { x } => {
                let xv = self.val(*x);
                let yv = self.val(NodeId(i));
                let (r, d) = (xv.rows(), xv.cols());
                let mut gx = vec![T::zero(); xv.len()];
                for ri in 0..r {
                    let norm = row_norm(xv.row(ri));
                    let yrow = yv.row(ri);
                    let grow = &gout[ri * d..(ri + 1) * d];
                    let mut dot = T::zero();
                    for k in 0..d {
                        dot += grow[k] * yrow[k];
                    }
                    for k in 0..d {
                        gx[ri * d + k] = (grow[k] - yrow[k] * dot) / norm;
                    }
                }
                acc(grads, *x, gx);
            }

            Op::LayerNorm { x, gain, bias } => {
                let (xv, gv) = (self.val(*x), self.val(*gain));
                let d = *xv.dims().last().unwrap();
                let inv_d = real::<T>(1.0 / d as f64);
                let mut gx = vec![T::zero(); xv.len()];
                let mut gg = vec![T::zero(); d];
                let mut gb = vec![T::zero(); d];
                for (row, (src, grow)) in xv.data().chunks(d).zip(gout.chunks(d)).enumerate() {
                    let base = row * d;
                    let (mu, inv_sigma) = moments(src);
                    // dxhat, plus running gain/bias grads
                    let mut mean_dxhat = T::zero();
                    let mut mean_dxhat_xhat = T::zero();
                    for k in 0..d {
                        let xhat = (src[k] - mu) * inv_sigma;
                        let dxhat = grow[k] * gv.data()[k];
                        gg[k] += grow[k] * xhat;
                        gb[k] += grow[k];
                        mean_dxhat += dxhat;
                        mean_dxhat_xhat += dxhat * xhat;
                    }
                    mean_dxhat *= inv_d;
                    mean_dxhat_xhat *= inv_d;
                    for k in 0..d {
                        let xhat = (src[k] - mu) * inv_sigma;
                        let dxhat = grow[k] * gv.data()[k];
                        gx[base + k] = (dxhat - mean_dxhat - xhat * mean_dxhat_xhat) * inv_sigma;
                    }
                }
                acc(grads, *x, gx);
                acc(grads, *gain, gg);
                acc(grads, *bias, gb);
            }

            Op::WeightedChannelMean { stack, w } => {
                let (sv, wv) = (self.val(*stack), self.val(*w));
                let yv = self.val(NodeId(i));
                let (b, c, k) = (sv.dims()[0], sv.dims()[1], sv.dims()[2]);
                let mut gs = vec![T::zero(); sv.len()];
                let mut gw = vec![T::zero(); wv.len()];
                for bi in 0..b {
                    let wrow = wv.row(bi);
                    let mut wsum = T::zero();
                    for &wc in wrow {
                        wsum += wc;
                    }
                    let grow = &gout[bi * k..(bi + 1) * k];
                    let yrow = yv.row(bi);
                    for ci in 0..c {
                        let src = &sv.data()[(bi * c + ci) * k..(bi * c + ci + 1) * k];
                        let dst = &mut gs[(bi * c + ci) * k..(bi * c + ci + 1) * k];
                        let wc = wrow[ci];
                        let mut dw = T::zero();
                        for j in 0..k {
                            dst[j] = grow[j] * wc / wsum;
                            dw += grow[j] * (src[j] - yrow[j]);
                        }
                        gw[bi * c + ci] = dw / wsum;
                    }
                }
                acc(grads, *stack, gs);
                acc(grads, *w, gw);
            }

            Op::CrossEntropyRows { logits, targets } => {
                let lv = self.val(*logits);
                let (r, c) = (lv.rows(), lv.cols());
                let g = gout[0] / real::<T>(r as f64);
                let mut gl = vec![T::zero(); lv.len()];
                for ri in 0..r {
                    let row = lv.row(ri);
                    softmax_row(row, &mut gl[ri * c..(ri + 1) * c]);
                    for (j, v) in gl[ri * c..(ri + 1) * c].iter_mut().enumerate() {
                        let indicator = if j == targets[ri] { T::one() } else { T::zero() };
                        *v = g * (*v - indicator);
                    }
                }
                acc(grads, *logits, gl);
            }

            Op::SymKlRows { p, q } => {
                let (pv, qv) = (self.val(*p), self.val(*q));
                let (r, d) = (pv.rows(), pv.cols());
                let floor = real::<T>(KL_FLOOR);
                let g = gout[0] / real::<T>(r as f64);
                let mut gp = vec![T::zero(); pv.len()];
                let mut gq = vec![T::zero(); qv.len()];
                for idx in 0..r * d {
                    let (praw, qraw) = (pv.data()[idx], qv.data()[idx]);
                    let a = praw.max(floor);
                    let b = qraw.max(floor);
                    let log_ratio = a.ln() - b.ln();
                    if praw > floor {
                        gp[idx] = g * (log_ratio + (a - b) / a);
                    }
                    if qraw > floor {
                        gq[idx] = g * (-log_ratio + (b - a) / b);
                    }
                }
                acc(grads, *p, gp);
                acc(grads, *q, gq);
            }
        }
    }
}

// ── kernels ────────────────────────────────────────────────────────

#[inline]
fn sigmoid<T: Real>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

fn row_norm<T: Real>(row: &[T]) -> T {
    let mut acc = T::zero();
    for &v in row {
        acc += v * v;
    }
    acc.sqrt().max(real::<T>(1e-12))
}

/// Mean and reciprocal standard deviation of one slice (eps = 1e-5).
fn moments<T: Real>(src: &[T]) -> (T, T) {
    let inv_d = real::<T>(1.0 / src.len() as f64);
    let mut mu = T::zero();
    for &v in src {
        mu += v;
    }
    mu *= inv_d;
    let mut var = T::zero();
    for &v in src {
        let c = v - mu;
        var += c * c;
    }
    var *= inv_d;
    (mu, T::one() / (var + real::<T>(1e-5)).sqrt())
}

pub(crate) fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `a [m,k] @ b[n,k]^T -> [m,n]` via contiguous row dot products.
pub(crate) fn matmul_tb<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut dot = T::zero();
            for (x, y) in arow.iter().zip(brow) {
                dot += *x * *y;
            }
            c[i * n + j] = dot;
        }
    }
    c
}

fn pairwise_sum<T: Real>(v: &[T]) -> T {
    match v.len() {
        0 => T::zero(),
        1 => v[0],
        2 => v[0] + v[1],
        n => pairwise_sum(&v[..n / 2]) + pairwise_sum(&v[n / 2..]),
    }
}

pub(crate) fn transpose<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arr(dims: &[usize], v: &[f64]) -> DenseArray<f64> {
        DenseArray::from_vec(dims, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_forward_value() {
        let mut t = Tape::new();
        let a = t.leaf(arr(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = t.leaf(arr(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let c = t.matmul(a, b);
        assert_eq!(t.val(c).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn unused_leaf_has_zero_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(arr(&[2], &[1.0, 2.0]));
        let unused = t.leaf(arr(&[3], &[1.0, 1.0, 1.0]));
        let y = t.mul(x, x);
        let loss = t.sum_all(y);
        let g = t.backward(loss);
        assert_eq!(g.wrt(unused).data(), &[0.0, 0.0, 0.0]);
        assert_eq!(g.wrt(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(arr(&[2, 3], &[-50.0, 0.0, 50.0, 1.0, 1.0, 1.0]));
        let s = t.softmax_last(x);
        for row in t.val(s).data().chunks(3) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cross_entropy_uniform_rows() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(arr(&[2, 2], &[0.3, 0.3, -1.0, -1.0]));
        let l = t.cross_entropy_rows(x, vec![0, 1]);
        assert_eq!(t.scalar_val(l), 2.0f64.ln());
    }

    #[test]
    fn split_merge_heads_roundtrip() {
        let mut t = Tape::<f64>::new();
        let data: Vec<f64> = (0..24).map(|i| i as f64).collect();
        let x = t.leaf(arr(&[6, 4], &data)); // batch 2, seq 3, heads 2, hd 2
        let s = t.split_heads(x, 2, 3, 2, 2);
        assert_eq!(t.dims(s), &[4, 3, 2]);
        let m = t.merge_heads(s, 2, 3, 2, 2);
        assert_eq!(t.val(m).data(), t.val(x).data());
    }

    #[test]
    fn weighted_channel_mean_selects_channel() {
        let mut t = Tape::<f64>::new();
        let stack = t.leaf(arr(&[1, 2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let w = t.leaf(arr(&[1, 2], &[1.0, 0.0]));
        let y = t.weighted_channel_mean(stack, w);
        assert_eq!(t.val(y).data(), &[1.0, 0.0]);

        let mut t = Tape::<f64>::new();
        let stack = t.leaf(arr(&[1, 2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let w = t.leaf(arr(&[1, 2], &[0.75, 0.25]));
        let y = t.weighted_channel_mean(stack, w);
        assert_eq!(t.val(y).data(), &[0.75, 0.25]);
    }

    #[test]
    fn backward_touches_each_op_once() {
        // A diamond: loss = sum(x*x + x*x); the shared subnode receives
        // two adjoint contributions but is replayed once (no double count).
        let mut t = Tape::<f64>::new();
        let x = t.leaf(arr(&[2], &[3.0, -1.0]));
        let sq = t.mul(x, x);
        let twice = t.add(sq, sq);
        let loss = t.sum_all(twice);
        let g = t.backward(loss);
        assert_eq!(g.wrt(x).data(), &[12.0, -4.0]);
    }
}
