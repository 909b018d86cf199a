//! Tape-based reverse-mode differentiation over dense row-major matrices.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs for the backward sweep. Parameters enter the tape as borrowed leaves,
//! so building a graph never copies weights.

use rand::Rng;

use crate::error::{Error, Result};
use crate::phy::C64;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor shape does not match data");
        Self { rows, cols, data }
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_vec(1, 1, vec![value])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn add_scaled(&mut self, other: &Tensor, factor: f64) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
    }
}

/// `out (+)= op(a) * op(b)` where `op` optionally transposes.
#[allow(clippy::too_many_arguments)]
fn gemm(
    a: &Tensor,
    trans_a: bool,
    b: &Tensor,
    trans_b: bool,
    out: &mut [f64],
    accumulate: bool,
) -> (usize, usize) {
    let (m, k) = if trans_a {
        (a.cols, a.rows)
    } else {
        (a.rows, a.cols)
    };
    let (k2, n) = if trans_b {
        (b.cols, b.rows)
    } else {
        (b.rows, b.cols)
    };
    assert_eq!(k, k2, "inner dimensions differ in matmul");
    assert_eq!(out.len(), m * n);
    let (rsa, csa) = if trans_a {
        (1, a.cols as isize)
    } else {
        (a.cols as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, b.cols as isize)
    } else {
        (b.cols as isize, 1)
    };
    if m == 0 || n == 0 {
        return (m, n);
    }
    if k == 0 {
        if !accumulate {
            out.iter_mut().for_each(|x| *x = 0.0);
        }
        return (m, n);
    }
    // SAFETY: the strides above describe the row-major buffers of `a` and `b`
    // (optionally transposed) and `out` holds exactly m*n elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            if accumulate { 1.0 } else { 0.0 },
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    (m, n)
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = vec![0.0; a.rows * b.cols];
    let (m, n) = gemm(a, false, b, false, &mut out, false);
    Tensor::from_vec(m, n, out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value<'p> {
    Owned(Tensor),
    Borrowed(&'p Tensor),
}

impl Value<'_> {
    fn get(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

struct RatesCache {
    w: usize,
    mask: usize,
    gamma: usize,
    n_users: usize,
    n_tx: usize,
    /// `h` for every sample and user, flattened `[b][u][i]`.
    channels: Vec<C64>,
    /// Masked gains `h_u^H (m .* w_j)` without the power scale, `[b][u][j]`.
    gains: Vec<C64>,
    /// Signal-plus-disturbance and disturbance per `[b][u]`.
    total: Vec<f64>,
    disturbance: Vec<f64>,
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    AddBias(usize, usize),
    Add(usize, usize),
    Scale(usize, f64),
    Gelu(usize),
    Sigmoid(usize),
    StraightThrough(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        seq_len: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    Dropout(usize, Vec<f64>),
    ConcatRows(usize, usize),
    GatherRows(usize, Vec<usize>),
    BlockMean(usize, usize),
    SliceCols(usize, usize),
    PowerNormalize {
        x: usize,
        block: usize,
        amplitude: f64,
        norms: Vec<f64>,
    },
    BlockSoftmax(usize, usize),
    Sqrt(usize),
    ScaleRows(usize, usize),
    Rates(Box<RatesCache>),
    Square(usize),
    Shift(usize),
    Mean(usize),
    RowSum(usize),
    WeightedSum(usize, Tensor),
    Combine(Vec<(usize, f64)>),
}

struct Node<'p> {
    value: Value<'p>,
    op: Op,
}

/// Gradients of a scalar with respect to every node of a consumed tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads[var.0].as_ref()
    }

    /// Gradient of `var`, or zeros of the right shape if it did not influence the loss.
    pub fn take(&mut self, var: Var) -> Tensor {
        let (r, c) = self.shapes[var.0];
        self.grads[var.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(r, c))
    }
}

#[derive(Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    consumed: bool,
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.get()
    }

    /// Differentiable leaf that borrows its storage.
    pub fn param(&mut self, t: &'p Tensor) -> Var {
        self.nodes.push(Node {
            value: Value::Borrowed(t),
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf holding an owned value (inputs, targets, fixed masks).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn ensure_finite(&self, v: Var, layer: usize) -> Result<()> {
        if self.value(v).is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { layer })
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = matmul(self.value(a), self.value(b));
        self.push(out, Op::MatMul(a.0, b.0))
    }

    /// Adds a `1 x n` bias to every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let bv = self.value(bias);
        assert_eq!((bv.rows, bv.cols), (1, xv.cols), "bias shape");
        let mut out = xv.clone();
        for row in out.data.chunks_mut(xv.cols) {
            for (o, b) in row.iter_mut().zip(&bv.data) {
                *o += b;
            }
        }
        self.push(out, Op::AddBias(x.0, bias.0))
    }

    /// `x W + b` with `W: in x out` and `b: 1 x out`.
    pub fn affine(&mut self, x: Var, weight: Var, bias: Var) -> Var {
        let y = self.matmul(x, weight);
        self.add_bias(y, bias)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a.0, b.0))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let mut out = self.value(x).clone();
        out.data.iter_mut().for_each(|v| *v *= factor);
        self.push(out, Op::Scale(x.0, factor))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data.iter_mut() {
            let t = (GELU_K * (*v + GELU_C * *v * *v * *v)).tanh();
            *v = 0.5 * *v * (1.0 + t);
        }
        self.push(out, Op::Gelu(x.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data.iter_mut().for_each(|v| *v = sigmoid(*v));
        self.push(out, Op::Sigmoid(x.0))
    }

    /// Hard 0.5 threshold whose backward pass is the identity, so composed
    /// with a sigmoid it back-propagates the sigmoid derivative.
    ///
    /// With `anchor`, the forward value is `x + anchor` instead. Freezing
    /// `anchor = threshold(x0) - x0` at a base point gives a smooth function
    /// with the same value and gradient as the straight-through estimator at
    /// that point, which is what finite-difference checks need.
    pub fn straight_through(&mut self, x: Var, anchor: Option<&[f64]>) -> Var {
        let mut out = self.value(x).clone();
        match anchor {
            Some(offsets) => {
                assert_eq!(offsets.len(), out.len(), "anchor length");
                for (v, a) in out.data.iter_mut().zip(offsets) {
                    *v += a;
                }
            }
            None => out.data.iter_mut().for_each(|v| *v = threshold(*v)),
        }
        self.push(out, Op::StraightThrough(x.0))
    }

    /// Row-wise layer normalization with learned gain and bias (`1 x n`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows, xv.cols);
        let g = &self.value(gain).data;
        let b = &self.value(bias).data;
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = s;
            for c in 0..cols {
                let h = (row[c] - mean) * s;
                xhat[r * cols + c] = h;
                out.data[r * cols + c] = h * g[c] + b[c];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                rstd,
            },
        )
    }

    /// Multi-head scaled dot-product self-attention applied independently to
    /// consecutive blocks of `seq_len` rows (one block per sample).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq_len: usize, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, dim) = (qv.rows, qv.cols);
        assert!(rows % seq_len == 0 && dim % heads == 0, "attention shapes");
        let dh = dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let batch = rows / seq_len;
        let mut probs = vec![0.0; batch * heads * seq_len * seq_len];
        let mut out = Tensor::zeros(rows, dim);
        for b in 0..batch {
            let base = b * seq_len;
            for h in 0..heads {
                let off = h * dh;
                let p = &mut probs[(b * heads + h) * seq_len * seq_len..][..seq_len * seq_len];
                for i in 0..seq_len {
                    let qi = &qv.row(base + i)[off..off + dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..seq_len {
                        let kj = &kv.row(base + j)[off..off + dh];
                        let s = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                        p[i * seq_len + j] = s;
                        max = max.max(s);
                    }
                    let mut z = 0.0;
                    for j in 0..seq_len {
                        let e = (p[i * seq_len + j] - max).exp();
                        p[i * seq_len + j] = e;
                        z += e;
                    }
                    for j in 0..seq_len {
                        p[i * seq_len + j] /= z;
                    }
                    let o = &mut out.data[(base + i) * dim + off..][..dh];
                    for j in 0..seq_len {
                        let w = p[i * seq_len + j];
                        for (oc, vc) in o.iter_mut().zip(&vv.row(base + j)[off..off + dh]) {
                            *oc += w * vc;
                        }
                    }
                }
            }
        }
        self.push(
            out,
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                seq_len,
                heads,
                probs,
            },
        )
    }

    /// Inverted dropout; a no-op when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - p);
        let mut out = self.value(x).clone();
        let mask: Vec<f64> = (0..out.len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        for (v, m) in out.data.iter_mut().zip(&mask) {
            *v *= m;
        }
        self.push(out, Op::Dropout(x.0, mask))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols, bv.cols, "concat_rows column count");
        let mut data = av.data.clone();
        data.extend_from_slice(&bv.data);
        let out = Tensor::from_vec(av.rows + bv.rows, av.cols, data);
        self.push(out, Op::ConcatRows(a.0, b.0))
    }

    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Var {
        let xv = self.value(x);
        let mut data = Vec::with_capacity(index.len() * xv.cols);
        for &r in &index {
            data.extend_from_slice(xv.row(r));
        }
        let out = Tensor::from_vec(index.len(), xv.cols, data);
        self.push(out, Op::GatherRows(x.0, index))
    }

    /// Mean over consecutive blocks of `block` rows.
    pub fn block_mean(&mut self, x: Var, block: usize) -> Var {
        let xv = self.value(x);
        assert!(block > 0 && xv.rows.is_multiple_of(block), "block_mean shape");
        let groups = xv.rows / block;
        let mut out = Tensor::zeros(groups, xv.cols);
        for r in 0..xv.rows {
            let dst = &mut out.data[(r / block) * xv.cols..][..xv.cols];
            for (d, s) in dst.iter_mut().zip(xv.row(r)) {
                *d += s / block as f64;
            }
        }
        self.push(out, Op::BlockMean(x.0, block))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.cols, "slice_cols range");
        let mut data = Vec::with_capacity(xv.rows * len);
        for r in 0..xv.rows {
            data.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let out = Tensor::from_vec(xv.rows, len, data);
        self.push(out, Op::SliceCols(x.0, start))
    }

    /// Rescales every block of `block` rows to squared norm `power`.
    pub fn power_normalize(&mut self, x: Var, block: usize, power: f64) -> Result<Var> {
        let xv = self.value(x);
        assert!(block > 0 && xv.rows.is_multiple_of(block), "power_normalize shape");
        let amplitude = power.sqrt();
        let chunk = block * xv.cols;
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows / block);
        for part in out.data.chunks_mut(chunk) {
            let n = part.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(n > 0.0) || !n.is_finite() {
                return Err(Error::Numerical(format!(
                    "cannot normalize precoder with norm {n}"
                )));
            }
            part.iter_mut().for_each(|v| *v *= amplitude / n);
            norms.push(n);
        }
        Ok(self.push(
            out,
            Op::PowerNormalize {
                x: x.0,
                block,
                amplitude,
                norms,
            },
        ))
    }

    /// Softmax down each column within consecutive blocks of `block` rows.
    pub fn block_softmax(&mut self, x: Var, block: usize) -> Var {
        let xv = self.value(x);
        assert!(block > 0 && xv.rows.is_multiple_of(block), "block_softmax shape");
        let cols = xv.cols;
        let mut out = xv.clone();
        for part in out.data.chunks_mut(block * cols) {
            for c in 0..cols {
                let top = (0..block)
                    .map(|r| part[r * cols + c])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for r in 0..block {
                    let e = (part[r * cols + c] - top).exp();
                    part[r * cols + c] = e;
                    total += e;
                }
                for r in 0..block {
                    part[r * cols + c] /= total;
                }
            }
        }
        self.push(out, Op::BlockSoftmax(x.0, block))
    }

    /// Elementwise square root of strictly positive entries.
    pub fn sqrt(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data.iter_mut().for_each(|v| *v = v.sqrt());
        self.push(out, Op::Sqrt(x.0))
    }

    /// Multiplies row `r` of `x` by `s[r]`, where `s` is a column.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Var {
        let sv = self.value(s);
        let xv = self.value(x);
        assert!(sv.cols == 1 && sv.rows == xv.rows, "scale_rows shape");
        let mut out = xv.clone();
        let cols = out.cols;
        for (row, f) in out.data.chunks_mut(cols).zip(&sv.data) {
            row.iter_mut().for_each(|v| *v *= f);
        }
        self.push(out, Op::ScaleRows(x.0, s.0))
    }

    /// Per-user rates `log2(1 + SINR)` for a batch.
    ///
    /// * `w`: `(B*N_U) x (2*N_T)`, row `b*N_U + j` is `[Re w_j, Im w_j]`
    /// * `mask`: `B x N_T`, `gamma`: `B x 1`
    /// * `channels`: `h` for every sample and user, `[b][u][i]`
    ///
    /// Output is `B x N_U`.
    pub fn rates(
        &mut self,
        w: Var,
        mask: Var,
        gamma: Var,
        channels: Vec<C64>,
        n_users: usize,
        noise: f64,
    ) -> Var {
        let (wv, mv, gv) = (self.value(w), self.value(mask), self.value(gamma));
        let n_tx = wv.cols / 2;
        let batch = mv.rows;
        assert_eq!(wv.rows, batch * n_users, "rates: precoder rows");
        assert_eq!(mv.cols, n_tx, "rates: mask columns");
        assert_eq!((gv.rows, gv.cols), (batch, 1), "rates: gamma shape");
        assert_eq!(
            channels.len(),
            batch * n_users * n_tx,
            "rates: channel count"
        );

        let mut gains = vec![C64::new(0.0, 0.0); batch * n_users * n_users];
        let mut total = vec![0.0; batch * n_users];
        let mut disturbance = vec![0.0; batch * n_users];
        let mut out = Tensor::zeros(batch, n_users);
        for b in 0..batch {
            let m = mv.row(b);
            let g = gv.data[b];
            for u in 0..n_users {
                let h = &channels[(b * n_users + u) * n_tx..][..n_tx];
                for j in 0..n_users {
                    let wr = wv.row(b * n_users + j);
                    let mut acc = C64::new(0.0, 0.0);
                    for i in 0..n_tx {
                        acc += h[i].conj() * C64::new(wr[i], wr[n_tx + i]) * m[i];
                    }
                    gains[(b * n_users + u) * n_users + j] = acc;
                }
                let row = &gains[(b * n_users + u) * n_users..][..n_users];
                let signal = g * row[u].norm_sqr();
                let dist = noise
                    + row
                        .iter()
                        .enumerate()
                        .filter(|&(j, _)| j != u)
                        .map(|(_, c)| g * c.norm_sqr())
                        .sum::<f64>();
                total[b * n_users + u] = signal + dist;
                disturbance[b * n_users + u] = dist;
                out.data[b * n_users + u] = (signal / dist).ln_1p() / std::f64::consts::LN_2;
            }
        }
        self.push(
            out,
            Op::Rates(Box::new(RatesCache {
                w: w.0,
                mask: mask.0,
                gamma: gamma.0,
                n_users,
                n_tx,
                channels,
                gains,
                total,
                disturbance,
            })),
        )
    }

    pub fn square(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data.iter_mut().for_each(|v| *v *= *v);
        self.push(out, Op::Square(x.0))
    }

    /// `x - c` for a constant `c` of the same shape.
    pub fn sub_const(&mut self, x: Var, c: &Tensor) -> Var {
        let mut out = self.value(x).clone();
        assert_eq!((out.rows, out.cols), (c.rows, c.cols), "sub_const shape");
        for (v, s) in out.data.iter_mut().zip(&c.data) {
            *v -= s;
        }
        self.push(out, Op::Shift(x.0))
    }

    /// Mean of all entries, as a `1 x 1` tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let m = xv.data.iter().sum::<f64>() / xv.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(x.0))
    }

    pub fn row_sum(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = (0..xv.rows).map(|r| xv.row(r).iter().sum()).collect();
        let out = Tensor::from_vec(xv.rows, 1, data);
        self.push(out, Op::RowSum(x.0))
    }

    /// `sum(x .* w)` for a constant `w` of the same shape, as a `1 x 1` tensor.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor) -> Var {
        let xv = self.value(x);
        assert_eq!(
            (xv.rows, xv.cols),
            (weights.rows, weights.cols),
            "weighted_sum shape"
        );
        let s = xv.data.iter().zip(&weights.data).map(|(a, b)| a * b).sum();
        self.push(Tensor::scalar(s), Op::WeightedSum(x.0, weights))
    }

    /// `sum_i c_i x_i` over same-shaped operands.
    pub fn combine(&mut self, terms: &[(Var, f64)]) -> Var {
        assert!(!terms.is_empty(), "combine needs at least one term");
        let first = self.value(terms[0].0);
        let mut out = Tensor::zeros(first.rows, first.cols);
        for &(v, c) in terms {
            out.add_scaled(self.value(v), c);
        }
        self.push(
            out,
            Op::Combine(terms.iter().map(|&(v, c)| (v.0, c)).collect()),
        )
    }

    /// Reverse sweep from the scalar `loss`. A tape can be swept only once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        self.consumed = true;
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got {}x{}",
                lv.rows, lv.cols
            )));
        }
        let shapes: Vec<(usize, usize)> = self
            .nodes
            .iter()
            .map(|n| {
                let t = n.value.get();
                (t.rows, t.cols)
            })
            .collect();
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads, &shapes);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }

    fn propagate(
        &self,
        node: &Node<'_>,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        shapes: &[(usize, usize)],
    ) {
        let val = |i: usize| self.nodes[i].value.get();
        fn acc<'g>(
            grads: &'g mut [Option<Tensor>],
            shapes: &[(usize, usize)],
            i: usize,
        ) -> &'g mut Tensor {
            let (r, c) = shapes[i];
            grads[i].get_or_insert_with(|| Tensor::zeros(r, c))
        }

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                gemm(g, false, bv, true, &mut acc(grads, shapes, *a).data, true);
                gemm(av, true, g, false, &mut acc(grads, shapes, *b).data, true);
            }
            Op::AddBias(x, bias) => {
                acc(grads, shapes, *x).add_assign(g);
                let gb = acc(grads, shapes, *bias);
                for row in g.data.chunks(g.cols) {
                    for (d, s) in gb.data.iter_mut().zip(row) {
                        *d += s;
                    }
                }
            }
            Op::Add(a, b) => {
                acc(grads, shapes, *a).add_assign(g);
                acc(grads, shapes, *b).add_assign(g);
            }
            Op::Scale(x, f) => acc(grads, shapes, *x).add_scaled(g, *f),
            Op::Gelu(x) => {
                let xv = val(*x);
                let gx = acc(grads, shapes, *x);
                for ((d, &v), &up) in gx.data.iter_mut().zip(&xv.data).zip(&g.data) {
                    let t = (GELU_K * (v + GELU_C * v * v * v)).tanh();
                    let dt = (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * v * v);
                    *d += up * (0.5 * (1.0 + t) + 0.5 * v * dt);
                }
            }
            Op::Sigmoid(x) => {
                let y = node.value.get();
                let gx = acc(grads, shapes, *x);
                for ((d, &s), &up) in gx.data.iter_mut().zip(&y.data).zip(&g.data) {
                    *d += up * s * (1.0 - s);
                }
            }
            Op::StraightThrough(x) => acc(grads, shapes, *x).add_assign(g),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let cols = g.cols;
                let gain_v = val(*gain).data.clone();
                {
                    let gg = acc(grads, shapes, *gain);
                    for (r, row) in g.data.chunks(cols).enumerate() {
                        for c in 0..cols {
                            gg.data[c] += row[c] * xhat[r * cols + c];
                        }
                    }
                }
                {
                    let gb = acc(grads, shapes, *bias);
                    for row in g.data.chunks(cols) {
                        for (d, s) in gb.data.iter_mut().zip(row) {
                            *d += s;
                        }
                    }
                }
                let gx = acc(grads, shapes, *x);
                let mut dxhat = vec![0.0; cols];
                for (r, row) in g.data.chunks(cols).enumerate() {
                    let xh = &xhat[r * cols..(r + 1) * cols];
                    for c in 0..cols {
                        dxhat[c] = row[c] * gain_v[c];
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / cols as f64;
                    let mean_dx =
                        dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                    for c in 0..cols {
                        gx.data[r * cols + c] += rstd[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                seq_len,
                heads,
                probs,
            } => {
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let (rows, dim) = (qv.rows, qv.cols);
                let (s, nh) = (*seq_len, *heads);
                let dh = dim / nh;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut gq = vec![0.0; rows * dim];
                let mut gk = vec![0.0; rows * dim];
                let mut gv = vec![0.0; rows * dim];
                let mut dp = vec![0.0; s * s];
                for b in 0..rows / s {
                    let base = b * s;
                    for h in 0..nh {
                        let off = h * dh;
                        let p = &probs[(b * nh + h) * s * s..][..s * s];
                        for i in 0..s {
                            let go = &g.data[(base + i) * dim + off..][..dh];
                            for j in 0..s {
                                let vj = &vv.data[(base + j) * dim + off..][..dh];
                                dp[i * s + j] = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                                let pij = p[i * s + j];
                                let gvj = &mut gv[(base + j) * dim + off..][..dh];
                                for (d, o) in gvj.iter_mut().zip(go) {
                                    *d += pij * o;
                                }
                            }
                        }
                        for i in 0..s {
                            let dot: f64 = (0..s).map(|j| p[i * s + j] * dp[i * s + j]).sum();
                            for j in 0..s {
                                let ds = p[i * s + j] * (dp[i * s + j] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                for c in 0..dh {
                                    gq[(base + i) * dim + off + c] +=
                                        ds * kv.data[(base + j) * dim + off + c];
                                    gk[(base + j) * dim + off + c] +=
                                        ds * qv.data[(base + i) * dim + off + c];
                                }
                            }
                        }
                    }
                }
                for (dst, src) in [(*q, gq), (*k, gk), (*v, gv)] {
                    let t = acc(grads, shapes, dst);
                    for (d, s) in t.data.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            Op::Dropout(x, mask) => {
                let gx = acc(grads, shapes, *x);
                for ((d, up), m) in gx.data.iter_mut().zip(&g.data).zip(mask) {
                    *d += up * m;
                }
            }
            Op::ConcatRows(a, b) => {
                let split = shapes[*a].0 * g.cols;
                for (d, s) in acc(grads, shapes, *a).data.iter_mut().zip(&g.data[..split]) {
                    *d += s;
                }
                for (d, s) in acc(grads, shapes, *b).data.iter_mut().zip(&g.data[split..]) {
                    *d += s;
                }
            }
            Op::GatherRows(x, index) => {
                let cols = g.cols;
                let gx = acc(grads, shapes, *x);
                for (r, &src) in index.iter().enumerate() {
                    for c in 0..cols {
                        gx.data[src * cols + c] += g.data[r * cols + c];
                    }
                }
            }
            Op::BlockMean(x, block) => {
                let cols = g.cols;
                let gx = acc(grads, shapes, *x);
                let inv = 1.0 / *block as f64;
                for r in 0..gx.rows {
                    let src = g.row(r / block);
                    for (d, s) in gx.data[r * cols..(r + 1) * cols].iter_mut().zip(src) {
                        *d += s * inv;
                    }
                }
            }
            Op::SliceCols(x, start) => {
                let width = shapes[*x].1;
                let gx = acc(grads, shapes, *x);
                for r in 0..g.rows {
                    for c in 0..g.cols {
                        gx.data[r * width + start + c] += g.data[r * g.cols + c];
                    }
                }
            }
            Op::PowerNormalize {
                x,
                block,
                amplitude,
                norms,
            } => {
                let xv = val(*x);
                let chunk = block * xv.cols;
                let gx = acc(grads, shapes, *x);
                for (p, n) in norms.iter().enumerate() {
                    let xs = &xv.data[p * chunk..][..chunk];
                    let gs = &g.data[p * chunk..][..chunk];
                    let proj = xs.iter().zip(gs).map(|(a, b)| a * b).sum::<f64>() / (n * n);
                    let dst = &mut gx.data[p * chunk..][..chunk];
                    for c in 0..chunk {
                        dst[c] += amplitude / n * (gs[c] - proj * xs[c]);
                    }
                }
            }
            Op::BlockSoftmax(x, block) => {
                let y = node.value.get();
                let cols = y.cols;
                let gx = acc(grads, shapes, *x);
                let chunk = block * cols;
                for start in (0..y.data.len()).step_by(chunk) {
                    for c in 0..cols {
                        let idx = |r: usize| start + r * cols + c;
                        let dot: f64 = (0..*block).map(|r| y.data[idx(r)] * g.data[idx(r)]).sum();
                        for r in 0..*block {
                            gx.data[idx(r)] += y.data[idx(r)] * (g.data[idx(r)] - dot);
                        }
                    }
                }
            }
            Op::Sqrt(x) => {
                let y = node.value.get();
                let gx = acc(grads, shapes, *x);
                for ((d, &v), &up) in gx.data.iter_mut().zip(&y.data).zip(&g.data) {
                    *d += up * 0.5 / v;
                }
            }
            Op::ScaleRows(x, s) => {
                let (xv, sv) = (val(*x), val(*s));
                let cols = xv.cols;
                {
                    let gx = acc(grads, shapes, *x);
                    for ((dst, up), f) in gx
                        .data
                        .chunks_mut(cols)
                        .zip(g.data.chunks(cols))
                        .zip(&sv.data)
                    {
                        for (d, u) in dst.iter_mut().zip(up) {
                            *d += u * f;
                        }
                    }
                }
                let gs = acc(grads, shapes, *s);
                for ((d, up), row) in gs
                    .data
                    .iter_mut()
                    .zip(g.data.chunks(cols))
                    .zip(xv.data.chunks(cols))
                {
                    *d += up.iter().zip(row).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            Op::Rates(cache) => self.rates_backward(cache, g, grads, shapes),
            Op::Square(x) => {
                let xv = val(*x);
                let gx = acc(grads, shapes, *x);
                for ((d, v), up) in gx.data.iter_mut().zip(&xv.data).zip(&g.data) {
                    *d += 2.0 * v * up;
                }
            }
            Op::Shift(x) => acc(grads, shapes, *x).add_assign(g),
            Op::Mean(x) => {
                let gx = acc(grads, shapes, *x);
                let share = g.data[0] / gx.len() as f64;
                gx.data.iter_mut().for_each(|d| *d += share);
            }
            Op::RowSum(x) => {
                let gx = acc(grads, shapes, *x);
                let cols = gx.cols;
                for r in 0..gx.rows {
                    for c in 0..cols {
                        gx.data[r * cols + c] += g.data[r];
                    }
                }
            }
            Op::WeightedSum(x, w) => acc(grads, shapes, *x).add_scaled(w, g.data[0]),
            Op::Combine(terms) => {
                for &(i, c) in terms {
                    acc(grads, shapes, i).add_scaled(g, c);
                }
            }
        }
    }

    fn rates_backward(
        &self,
        cache: &RatesCache,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        shapes: &[(usize, usize)],
    ) {
        let (nu, nt) = (cache.n_users, cache.n_tx);
        let wv = self.nodes[cache.w].value.get();
        let mv = self.nodes[cache.mask].value.get();
        let gv = self.nodes[cache.gamma].value.get();
        let batch = mv.rows;
        let mut gw = Tensor::zeros(wv.rows, wv.cols);
        let mut gm = Tensor::zeros(mv.rows, mv.cols);
        let mut gg = Tensor::zeros(gv.rows, gv.cols);
        let inv_ln2 = 1.0 / std::f64::consts::LN_2;

        // dL/dc for every gain, as a complex number (dRe + i dIm)
        let mut dgain = vec![C64::new(0.0, 0.0); nu * nu];
        for b in 0..batch {
            let gamma = gv.data[b];
            let mut dgamma = 0.0;
            for u in 0..nu {
                let up = g.data[b * nu + u] * inv_ln2;
                let t = cache.total[b * nu + u];
                let d = cache.disturbance[b * nu + u];
                let row = &cache.gains[(b * nu + u) * nu..][..nu];
                let signal = gamma * row[u].norm_sqr();
                for j in 0..nu {
                    // dR_u/dp_uj: 1/T for j == u, 1/T - 1/D = -signal/(T D) otherwise
                    let dp = if j == u {
                        up / t
                    } else {
                        -up * signal / (t * d)
                    };
                    dgamma += dp * row[j].norm_sqr();
                    dgain[u * nu + j] = row[j] * (2.0 * gamma * dp);
                }
            }
            gg.data[b] = dgamma;

            let m = mv.row(b);
            for u in 0..nu {
                let h = &cache.channels[(b * nu + u) * nt..][..nt];
                for j in 0..nu {
                    let dc = dgain[u * nu + j];
                    if dc == C64::new(0.0, 0.0) {
                        continue;
                    }
                    let wr = wv.row(b * nu + j);
                    let gw_row = &mut gw.data[(b * nu + j) * 2 * nt..][..2 * nt];
                    for i in 0..nt {
                        let hc = h[i].conj();
                        // z = conj(h_i) m_i multiplies w; v = conj(h_i) w_i multiplies m_i
                        let z = hc * m[i];
                        gw_row[i] += dc.re * z.re + dc.im * z.im;
                        gw_row[nt + i] += -dc.re * z.im + dc.im * z.re;
                        let v = hc * C64::new(wr[i], wr[nt + i]);
                        gm.data[b * nt + i] += dc.re * v.re + dc.im * v.im;
                    }
                }
            }
        }
        for (i, t) in [(cache.w, gw), (cache.mask, gm), (cache.gamma, gg)] {
            let (r, c) = shapes[i];
            grads[i]
                .get_or_insert_with(|| Tensor::zeros(r, c))
                .add_assign(&t);
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Antenna decision: on when the activation reaches 0.5 (ties go to 1).
pub fn threshold(s: f64) -> f64 {
    if s >= 0.5 {
        1.0
    } else {
        0.0
    }
}
