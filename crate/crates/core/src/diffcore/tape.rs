//! Reverse-mode automatic differentiation over a per-forward-pass op tape.
//!
//! Every forward call records one node; `backward` walks the tape in reverse
//! and accumulates exact gradients of a scalar loss into every node,
//! including leaves. Heavy ops (conv, LSTM, matmul) run through gemm.

use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{MilcError, Result};

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

struct Node<F: Scalar> {
    value: Tensor<F>,
    op: Op<F>,
}

struct LstmCache<F: Scalar> {
    /// Activated gates per step, (T, B, 4H), gate order [input, forget, cell, output].
    gates: Tensor<F>,
    /// Cell states per step, (T, B, H).
    cells: Tensor<F>,
}

enum Op<F: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Relu(Var),
    Tanh(Var),
    /// x:(m,k) w:(k,n) b:(n) -> (m,n)
    Linear { x: Var, w: Var, b: Var },
    /// (m,k) @ (k,n) -> (m,n)
    Matmul(Var, Var),
    /// (m,k) @ (n,k)^T -> (m,n)
    MatmulTransB(Var, Var),
    Reshape(Var),
    /// (a,b,...) -> (b,a,...)
    SwapAxes01(Var),
    /// Concatenate along the last axis.
    ConcatLast(Vec<Var>),
    ReverseAxis0(Var),
    /// x:(B,Ci,L) w:(Co,Ci,k) b:(Co) -> (B,Co,L-k+1); `patches` is the
    /// cached im2col matrix (B*Lo, Ci*k).
    Conv1d { x: Var, w: Var, b: Var, patches: Tensor<F> },
    /// x:(B,Ci,L) w:(Ci,Co,k) b:(Co) -> (B,Co,L+k-1); `xrows` caches the
    /// (B*L, Ci) transpose of the input.
    ConvTranspose1d { x: Var, w: Var, b: Var, xrows: Tensor<F> },
    /// x:(T,B,D) wx:(D,4H) wh:(H,4H) b:(4H) -> hidden states (T,B,H),
    /// starting from zero initial state.
    LstmSeq { x: Var, wx: Var, wh: Var, b: Var, cache: LstmCache<F> },
    /// Softmax over the last axis.
    SoftmaxLast(Var),
    /// (T,B): softmax over axis 0, independently per column.
    SoftmaxAxis0(Var),
    /// (m,n) -> (m,): log sum exp over each row, max-shifted.
    LogSumExpLast(Var),
    /// (m,n) -> (m,): picks x[r, idx[r]].
    GatherCols { x: Var, idx: Vec<usize> },
    /// h:(T,B,H) w:(T,B) -> (B,H): sum_t w[t,b] * h[t,b,:].
    WeightedPoolTime { h: Var, w: Var },
    /// -> scalar mean of all elements.
    MeanAll(Var),
}

/// Gradients produced by one backward pass, indexed by `Var`.
pub struct Grads<F: Scalar> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Grads<F> {
    /// Gradient of the loss w.r.t. the node, if the node influenced the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads[v.0].take()
    }
}

pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, details: String) -> MilcError {
    MilcError::ShapeMismatch { op, details }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Register an input or parameter tensor. Gradients are tracked for all leaves.
    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn binary_elementwise(&mut self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(mismatch(op, format!("{:?} vs {:?}", sa, sb)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("sub", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: F) -> Var {
        let t = self.value(a).map(|v| v * factor);
        self.push(t, Op::Scale(a, factor))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|v| v.max_with(F::ZERO));
        self.push(t, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|v| v.tanh());
        self.push(t, Op::Tanh(a))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.value(x).shape(), self.value(w).shape(), self.value(b).shape());
        if sx.len() != 2 || sw.len() != 2 || sb.len() != 1 || sx[1] != sw[0] || sw[1] != sb[0] {
            return Err(mismatch("linear", format!("x {:?}, w {:?}, b {:?}", sx, sw, sb)));
        }
        let (m, k, n) = (sx[0], sx[1], sw[1]);
        let mut out = Tensor::zeros(&[m, n]);
        F::gemm(
            m, k, n, F::ONE,
            self.value(x).data(), k as isize, 1,
            self.value(w).data(), n as isize, 1,
            F::ZERO, out.data_mut(), n as isize, 1,
        );
        let bias = self.value(b).data().to_vec();
        for r in 0..m {
            let row = &mut out.data_mut()[r * n..(r + 1) * n];
            for (o, &bv) in row.iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::Linear { x, w, b }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", format!("{:?} @ {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(&[m, n]);
        F::gemm(
            m, k, n, F::ONE,
            self.value(a).data(), k as isize, 1,
            self.value(b).data(), n as isize, 1,
            F::ZERO, out.data_mut(), n as isize, 1,
        );
        Ok(self.push(out, Op::Matmul(a, b)))
    }

    /// `a @ b^T` without materializing the transpose.
    pub fn matmul_trans_b(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(mismatch("matmul_trans_b", format!("{:?} @ {:?}^T", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = Tensor::zeros(&[m, n]);
        F::gemm(
            m, k, n, F::ONE,
            self.value(a).data(), k as isize, 1,
            self.value(b).data(), 1, k as isize,
            F::ZERO, out.data_mut(), n as isize, 1,
        );
        Ok(self.push(out, Op::MatmulTransB(a, b)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(a)))
    }

    pub fn swap_axes_01(&mut self, a: Var) -> Result<Var> {
        let t = swap01(self.value(a))?;
        Ok(self.push(t, Op::SwapAxes01(a)))
    }

    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(mismatch("concat", "no inputs".into()));
        }
        let first = self.value(parts[0]).shape().to_vec();
        let lead = &first[..first.len() - 1];
        let mut total_last = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if &s[..s.len() - 1] != lead {
                return Err(mismatch("concat", format!("{:?} vs {:?}", s, first)));
            }
            total_last += s[s.len() - 1];
        }
        let rows: usize = lead.iter().product();
        let mut shape = lead.to_vec();
        shape.push(total_last);
        let mut out = Tensor::zeros(&shape);
        let mut col = 0;
        for &p in parts {
            let pv = self.value(p);
            let w = *pv.shape().last().unwrap();
            let (src, dst) = (pv.data(), out.data_mut());
            for r in 0..rows {
                dst[r * total_last + col..r * total_last + col + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            col += w;
        }
        Ok(self.push(out, Op::ConcatLast(parts.to_vec())))
    }

    pub fn reverse_axis0(&mut self, a: Var) -> Result<Var> {
        let t = reverse0(self.value(a))?;
        Ok(self.push(t, Op::ReverseAxis0(a)))
    }

    /// Valid (no-padding) cross-correlation over a batch of 1-d multichannel inputs.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.value(x).shape(), self.value(w).shape(), self.value(b).shape());
        if sx.len() != 3 || sw.len() != 3 || sb.len() != 1 {
            return Err(mismatch("conv1d", format!("x {:?}, w {:?}, b {:?}", sx, sw, sb)));
        }
        let (bsz, ci, l) = (sx[0], sx[1], sx[2]);
        let (co, wci, k) = (sw[0], sw[1], sw[2]);
        if wci != ci || sb[0] != co {
            return Err(mismatch("conv1d", format!("x {:?} incompatible with w {:?}", sx, sw)));
        }
        if l < k {
            return Err(mismatch("conv1d", format!("input length {} < kernel {}", l, k)));
        }
        let lo = l - k + 1;
        let cik = ci * k;

        // im2col: patches[(b*lo + t), (c*k + j)] = x[b, c, t + j]
        let mut patches = Tensor::zeros(&[bsz * lo, cik]);
        {
            let xd = self.value(x).data();
            let pd = patches.data_mut();
            for bi in 0..bsz {
                for c in 0..ci {
                    let xrow = &xd[(bi * ci + c) * l..(bi * ci + c + 1) * l];
                    for t in 0..lo {
                        let dst = (bi * lo + t) * cik + c * k;
                        pd[dst..dst + k].copy_from_slice(&xrow[t..t + k]);
                    }
                }
            }
        }

        // out_rows = patches @ w_mat^T, w_mat = (co, ci*k) view of w
        let mut out_rows = vec![F::ZERO; bsz * lo * co];
        F::gemm(
            bsz * lo, cik, co, F::ONE,
            patches.data(), cik as isize, 1,
            self.value(w).data(), 1, cik as isize,
            F::ZERO, &mut out_rows, co as isize, 1,
        );

        let mut out = Tensor::zeros(&[bsz, co, lo]);
        {
            let bias = self.value(b).data();
            let od = out.data_mut();
            for bi in 0..bsz {
                for t in 0..lo {
                    let src = &out_rows[(bi * lo + t) * co..(bi * lo + t + 1) * co];
                    for o in 0..co {
                        od[(bi * co + o) * lo + t] = src[o] + bias[o];
                    }
                }
            }
        }
        Ok(self.push(out, Op::Conv1d { x, w, b, patches }))
    }

    /// Transposed counterpart of `conv1d`; restores length L+k-1.
    pub fn conv_transpose1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.value(x).shape(), self.value(w).shape(), self.value(b).shape());
        if sx.len() != 3 || sw.len() != 3 || sb.len() != 1 {
            return Err(mismatch("conv_transpose1d", format!("x {:?}, w {:?}, b {:?}", sx, sw, sb)));
        }
        let (bsz, ci, l) = (sx[0], sx[1], sx[2]);
        let (wci, co, k) = (sw[0], sw[1], sw[2]);
        if wci != ci || sb[0] != co {
            return Err(mismatch(
                "conv_transpose1d",
                format!("x {:?} incompatible with w {:?}", sx, sw),
            ));
        }
        let lo = l + k - 1;
        let cok = co * k;

        // xrows[(b*l + t), c] = x[b, c, t]
        let mut xrows = Tensor::zeros(&[bsz * l, ci]);
        {
            let xd = self.value(x).data();
            let xr = xrows.data_mut();
            for bi in 0..bsz {
                for c in 0..ci {
                    for t in 0..l {
                        xr[(bi * l + t) * ci + c] = xd[(bi * ci + c) * l + t];
                    }
                }
            }
        }

        // out_rows = xrows @ w_mat, w_mat = (ci, co*k) view of w
        let mut out_rows = vec![F::ZERO; bsz * l * cok];
        F::gemm(
            bsz * l, ci, cok, F::ONE,
            xrows.data(), ci as isize, 1,
            self.value(w).data(), cok as isize, 1,
            F::ZERO, &mut out_rows, cok as isize, 1,
        );

        let mut out = Tensor::zeros(&[bsz, co, lo]);
        {
            let bias = self.value(b).data();
            let od = out.data_mut();
            for bi in 0..bsz {
                for o in 0..co {
                    let orow = &mut od[(bi * co + o) * lo..(bi * co + o + 1) * lo];
                    for v in orow.iter_mut() {
                        *v = bias[o];
                    }
                }
                for t in 0..l {
                    let src = &out_rows[(bi * l + t) * cok..(bi * l + t + 1) * cok];
                    for o in 0..co {
                        for j in 0..k {
                            od[(bi * co + o) * lo + t + j] += src[o * k + j];
                        }
                    }
                }
            }
        }
        Ok(self.push(out, Op::ConvTranspose1d { x, w, b, xrows }))
    }

    /// Unidirectional LSTM over a (T, B, D) sequence from zero initial state.
    /// Standard four-gate cell; returns all hidden states (T, B, H).
    pub fn lstm_seq(&mut self, x: Var, wx: Var, wh: Var, b: Var) -> Result<Var> {
        let (sx, swx, swh, sb) =
            (self.value(x).shape(), self.value(wx).shape(), self.value(wh).shape(), self.value(b).shape());
        if sx.len() != 3 || swx.len() != 2 || swh.len() != 2 || sb.len() != 1 {
            return Err(mismatch("lstm", format!("x {:?}, wx {:?}, wh {:?}, b {:?}", sx, swx, swh, sb)));
        }
        let (t_len, bsz, d) = (sx[0], sx[1], sx[2]);
        let h = swh[0];
        if swx[0] != d || swx[1] != 4 * h || swh[1] != 4 * h || sb[0] != 4 * h {
            return Err(mismatch("lstm", format!("x {:?}, wx {:?}, wh {:?}, b {:?}", sx, swx, swh, sb)));
        }
        if t_len == 0 {
            return Err(mismatch("lstm", "empty sequence".into()));
        }

        let mut gates = Tensor::zeros(&[t_len, bsz, 4 * h]);
        let mut cells = Tensor::zeros(&[t_len, bsz, h]);
        let mut hidden = Tensor::zeros(&[t_len, bsz, h]);
        let mut h_prev = vec![F::ZERO; bsz * h];
        let mut c_prev = vec![F::ZERO; bsz * h];
        let mut g_buf = vec![F::ZERO; bsz * 4 * h];

        for t in 0..t_len {
            let x_t = &self.value(x).data()[t * bsz * d..(t + 1) * bsz * d];
            // G = x_t @ wx + h_prev @ wh + b
            F::gemm(
                bsz, d, 4 * h, F::ONE,
                x_t, d as isize, 1,
                self.value(wx).data(), (4 * h) as isize, 1,
                F::ZERO, &mut g_buf, (4 * h) as isize, 1,
            );
            F::gemm(
                bsz, h, 4 * h, F::ONE,
                &h_prev, h as isize, 1,
                self.value(wh).data(), (4 * h) as isize, 1,
                F::ONE, &mut g_buf, (4 * h) as isize, 1,
            );
            let bias = self.value(b).data();
            let gs = &mut gates.data_mut()[t * bsz * 4 * h..(t + 1) * bsz * 4 * h];
            let cs = &mut cells.data_mut()[t * bsz * h..(t + 1) * bsz * h];
            let hs = &mut hidden.data_mut()[t * bsz * h..(t + 1) * bsz * h];
            for bi in 0..bsz {
                for u in 0..h {
                    let base = bi * 4 * h;
                    let ig = sigmoid(g_buf[base + u] + bias[u]);
                    let fg = sigmoid(g_buf[base + h + u] + bias[h + u]);
                    let gg = (g_buf[base + 2 * h + u] + bias[2 * h + u]).tanh();
                    let og = sigmoid(g_buf[base + 3 * h + u] + bias[3 * h + u]);
                    let c_new = fg * c_prev[bi * h + u] + ig * gg;
                    gs[base + u] = ig;
                    gs[base + h + u] = fg;
                    gs[base + 2 * h + u] = gg;
                    gs[base + 3 * h + u] = og;
                    cs[bi * h + u] = c_new;
                    hs[bi * h + u] = og * c_new.tanh();
                }
            }
            h_prev.copy_from_slice(hs);
            c_prev.copy_from_slice(cs);
        }

        Ok(self.push(hidden, Op::LstmSeq { x, wx, wh, b, cache: LstmCache { gates, cells } }))
    }

    pub fn softmax_last(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.rank() == 0 {
            return Err(mismatch("softmax", "rank-0 input".into()));
        }
        let n = *v.shape().last().unwrap();
        let mut out = v.clone();
        for row in out.data_mut().chunks_mut(n) {
            softmax_inplace(row);
        }
        Ok(self.push(out, Op::SoftmaxLast(a)))
    }

    /// Softmax over axis 0 of a (T, B) tensor, independently per column.
    pub fn softmax_axis0(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.rank() != 2 {
            return Err(mismatch("softmax_axis0", format!("want rank 2, got {:?}", v.shape())));
        }
        let (t_len, bsz) = (v.shape()[0], v.shape()[1]);
        let mut out = v.clone();
        let mut col = vec![F::ZERO; t_len];
        for bi in 0..bsz {
            for t in 0..t_len {
                col[t] = out.data()[t * bsz + bi];
            }
            softmax_inplace(&mut col);
            for t in 0..t_len {
                out.data_mut()[t * bsz + bi] = col[t];
            }
        }
        Ok(self.push(out, Op::SoftmaxAxis0(a)))
    }

    /// Overflow-safe log-sum-exp of each row of a (m, n) tensor.
    pub fn logsumexp_last(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.rank() != 2 {
            return Err(mismatch("logsumexp", format!("want rank 2, got {:?}", v.shape())));
        }
        let (m, n) = (v.shape()[0], v.shape()[1]);
        let mut out = Tensor::zeros(&[m]);
        for r in 0..m {
            out.data_mut()[r] = logsumexp(&v.data()[r * n..(r + 1) * n]);
        }
        Ok(self.push(out, Op::LogSumExpLast(a)))
    }

    /// Picks one column per row: out[r] = x[r, idx[r]].
    pub fn gather_cols(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let v = self.value(x);
        if v.rank() != 2 || idx.len() != v.shape()[0] {
            return Err(mismatch(
                "gather_cols",
                format!("x {:?} with {} indices", v.shape(), idx.len()),
            ));
        }
        let n = v.shape()[1];
        if let Some(&bad) = idx.iter().find(|&&c| c >= n) {
            return Err(mismatch("gather_cols", format!("column {} out of {}", bad, n)));
        }
        let data = idx.iter().enumerate().map(|(r, &c)| v.at2(r, c)).collect();
        let t = Tensor::new(vec![idx.len()], data)?;
        Ok(self.push(t, Op::GatherCols { x, idx }))
    }

    /// Convex combination over time: out[b,:] = sum_t w[t,b] * h[t,b,:].
    pub fn weighted_pool_time(&mut self, h: Var, w: Var) -> Result<Var> {
        let (sh, sw) = (self.value(h).shape(), self.value(w).shape());
        if sh.len() != 3 || sw.len() != 2 || sh[0] != sw[0] || sh[1] != sw[1] {
            return Err(mismatch("weighted_pool", format!("h {:?}, w {:?}", sh, sw)));
        }
        let (t_len, bsz, dim) = (sh[0], sh[1], sh[2]);
        let mut out = Tensor::zeros(&[bsz, dim]);
        {
            let hd = self.value(h).data();
            let wd = self.value(w).data();
            let od = out.data_mut();
            for t in 0..t_len {
                for bi in 0..bsz {
                    let coef = wd[t * bsz + bi];
                    let src = &hd[(t * bsz + bi) * dim..(t * bsz + bi + 1) * dim];
                    let dst = &mut od[bi * dim..(bi + 1) * dim];
                    for (o, &s) in dst.iter_mut().zip(src) {
                        *o += coef * s;
                    }
                }
            }
        }
        Ok(self.push(out, Op::WeightedPoolTime { h, w }))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let n = F::from_f64(v.len() as f64);
        let sum: F = v.data().iter().copied().sum();
        self.push(Tensor::scalar(sum / n), Op::MeanAll(a))
    }

    /// Reverse-mode sweep from a scalar loss node; returns per-node gradients.
    pub fn backward(&self, loss: Var) -> Result<Grads<F>> {
        if self.value(loss).len() != 1 {
            return Err(mismatch(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(F::ONE));

        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.accumulate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    /// Propagate node i's gradient `g` into its parents.
    fn accumulate(&self, i: usize, g: &Tensor<F>, grads: &mut Vec<Option<Tensor<F>>>) -> Result<()> {
        let ensure = |grads: &mut Vec<Option<Tensor<F>>>, v: Var, shape: &[usize]| {
            if grads[v.0].is_none() {
                grads[v.0] = Some(Tensor::zeros(shape));
            }
        };
        macro_rules! gbuf {
            ($grads:expr, $v:expr) => {
                $grads[$v.0].as_mut().unwrap()
            };
        }

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &p in [a, b].iter() {
                    ensure(grads, *p, self.value(*p).shape());
                    for (o, &gv) in gbuf!(grads, *p).data_mut().iter_mut().zip(g.data()) {
                        *o += gv;
                    }
                }
            }
            Op::Sub(a, b) => {
                ensure(grads, *a, self.value(*a).shape());
                for (o, &gv) in gbuf!(grads, *a).data_mut().iter_mut().zip(g.data()) {
                    *o += gv;
                }
                ensure(grads, *b, self.value(*b).shape());
                for (o, &gv) in gbuf!(grads, *b).data_mut().iter_mut().zip(g.data()) {
                    *o -= gv;
                }
            }
            Op::Mul(a, b) => {
                let bv = self.value(*b).data().to_vec();
                ensure(grads, *a, self.value(*a).shape());
                for ((o, &gv), &other) in gbuf!(grads, *a).data_mut().iter_mut().zip(g.data()).zip(&bv) {
                    *o += gv * other;
                }
                let av = self.value(*a).data().to_vec();
                ensure(grads, *b, self.value(*b).shape());
                for ((o, &gv), &other) in gbuf!(grads, *b).data_mut().iter_mut().zip(g.data()).zip(&av) {
                    *o += gv * other;
                }
            }
            Op::Scale(a, factor) => {
                ensure(grads, *a, self.value(*a).shape());
                let f = *factor;
                for (o, &gv) in gbuf!(grads, *a).data_mut().iter_mut().zip(g.data()) {
                    *o += gv * f;
                }
            }
            Op::Relu(a) => {
                ensure(grads, *a, self.value(*a).shape());
                let y = self.nodes[i].value.data();
                for ((o, &gv), &yv) in gbuf!(grads, *a).data_mut().iter_mut().zip(g.data()).zip(y) {
                    if yv > F::ZERO {
                        *o += gv;
                    }
                }
            }
            Op::Tanh(a) => {
                ensure(grads, *a, self.value(*a).shape());
                let y = self.nodes[i].value.data();
                for ((o, &gv), &yv) in gbuf!(grads, *a).data_mut().iter_mut().zip(g.data()).zip(y) {
                    *o += gv * (F::ONE - yv * yv);
                }
            }
            Op::Linear { x, w, b } => {
                let (m, k) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                let n = self.value(*w).shape()[1];
                // dx += g @ w^T
                ensure(grads, *x, &[m, k]);
                F::gemm(
                    m, n, k, F::ONE,
                    g.data(), n as isize, 1,
                    self.value(*w).data(), 1, n as isize,
                    F::ONE, gbuf!(grads, *x).data_mut(), k as isize, 1,
                );
                // dw += x^T @ g
                ensure(grads, *w, &[k, n]);
                F::gemm(
                    k, m, n, F::ONE,
                    self.value(*x).data(), 1, k as isize,
                    g.data(), n as isize, 1,
                    F::ONE, gbuf!(grads, *w).data_mut(), n as isize, 1,
                );
                // db += column sums of g
                ensure(grads, *b, &[n]);
                let db = gbuf!(grads, *b).data_mut();
                for r in 0..m {
                    for c in 0..n {
                        db[c] += g.data()[r * n + c];
                    }
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[1];
                ensure(grads, *a, &[m, k]);
                F::gemm(
                    m, n, k, F::ONE,
                    g.data(), n as isize, 1,
                    self.value(*b).data(), 1, n as isize,
                    F::ONE, gbuf!(grads, *a).data_mut(), k as isize, 1,
                );
                ensure(grads, *b, &[k, n]);
                F::gemm(
                    k, m, n, F::ONE,
                    self.value(*a).data(), 1, k as isize,
                    g.data(), n as isize, 1,
                    F::ONE, gbuf!(grads, *b).data_mut(), n as isize, 1,
                );
            }
            Op::MatmulTransB(a, b) => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[0];
                // out = a @ b^T; da += g @ b; db += g^T @ a
                ensure(grads, *a, &[m, k]);
                F::gemm(
                    m, n, k, F::ONE,
                    g.data(), n as isize, 1,
                    self.value(*b).data(), k as isize, 1,
                    F::ONE, gbuf!(grads, *a).data_mut(), k as isize, 1,
                );
                ensure(grads, *b, &[n, k]);
                F::gemm(
                    n, m, k, F::ONE,
                    g.data(), 1, n as isize,
                    self.value(*a).data(), k as isize, 1,
                    F::ONE, gbuf!(grads, *b).data_mut(), k as isize, 1,
                );
            }
            Op::Reshape(a) => {
                ensure(grads, *a, self.value(*a).shape());
                for (o, &gv) in gbuf!(grads, *a).data_mut().iter_mut().zip(g.data()) {
                    *o += gv;
                }
            }
            Op::SwapAxes01(a) => {
                let back = swap01(g)?;
                ensure(grads, *a, self.value(*a).shape());
                for (o, &gv) in gbuf!(grads, *a).data_mut().iter_mut().zip(back.data()) {
                    *o += gv;
                }
            }
            Op::ConcatLast(parts) => {
                let total_last = *self.nodes[i].value.shape().last().unwrap();
                let rows = self.nodes[i].value.len() / total_last;
                let mut col = 0;
                for &p in parts {
                    let w = *self.value(p).shape().last().unwrap();
                    ensure(grads, p, self.value(p).shape());
                    let dst = gbuf!(grads, p).data_mut();
                    for r in 0..rows {
                        for c in 0..w {
                            dst[r * w + c] += g.data()[r * total_last + col + c];
                        }
                    }
                    col += w;
                }
            }
            Op::ReverseAxis0(a) => {
                let back = reverse0(g)?;
                ensure(grads, *a, self.value(*a).shape());
                for (o, &gv) in gbuf!(grads, *a).data_mut().iter_mut().zip(back.data()) {
                    *o += gv;
                }
            }
            Op::Conv1d { x, w, b, patches } => {
                self.conv1d_backward(i, *x, *w, *b, patches, g, grads)?;
            }
            Op::ConvTranspose1d { x, w, b, xrows } => {
                self.conv_transpose1d_backward(i, *x, *w, *b, xrows, g, grads)?;
            }
            Op::LstmSeq { x, wx, wh, b, cache } => {
                self.lstm_backward(i, *x, *wx, *wh, *b, cache, g, grads)?;
            }
            Op::SoftmaxLast(a) => {
                let y = self.nodes[i].value.data();
                let n = *self.nodes[i].value.shape().last().unwrap();
                ensure(grads, *a, self.value(*a).shape());
                let dst = gbuf!(grads, *a).data_mut();
                for r in 0..y.len() / n {
                    let ys = &y[r * n..(r + 1) * n];
                    let gs = &g.data()[r * n..(r + 1) * n];
                    let dot: F = ys.iter().zip(gs).map(|(&yv, &gv)| yv * gv).sum();
                    for c in 0..n {
                        dst[r * n + c] += ys[c] * (gs[c] - dot);
                    }
                }
            }
            Op::SoftmaxAxis0(a) => {
                let y = self.nodes[i].value.data();
                let (t_len, bsz) = (self.nodes[i].value.shape()[0], self.nodes[i].value.shape()[1]);
                ensure(grads, *a, self.value(*a).shape());
                let dst = gbuf!(grads, *a).data_mut();
                for bi in 0..bsz {
                    let mut dot = F::ZERO;
                    for t in 0..t_len {
                        dot += y[t * bsz + bi] * g.data()[t * bsz + bi];
                    }
                    for t in 0..t_len {
                        let idx = t * bsz + bi;
                        dst[idx] += y[idx] * (g.data()[idx] - dot);
                    }
                }
            }
            Op::LogSumExpLast(a) => {
                let xv = self.value(*a);
                let (m, n) = (xv.shape()[0], xv.shape()[1]);
                let lse = self.nodes[i].value.data();
                ensure(grads, *a, &[m, n]);
                let dst = gbuf!(grads, *a).data_mut();
                for r in 0..m {
                    let gr = g.data()[r];
                    for c in 0..n {
                        dst[r * n + c] += gr * (xv.at2(r, c) - lse[r]).exp();
                    }
                }
            }
            Op::GatherCols { x, idx } => {
                ensure(grads, *x, self.value(*x).shape());
                let n = self.value(*x).shape()[1];
                let dst = gbuf!(grads, *x).data_mut();
                for (r, &c) in idx.iter().enumerate() {
                    dst[r * n + c] += g.data()[r];
                }
            }
            Op::WeightedPoolTime { h, w } => {
                let (t_len, bsz, dim) = {
                    let s = self.value(*h).shape();
                    (s[0], s[1], s[2])
                };
                let hv = self.value(*h).data().to_vec();
                let wv = self.value(*w).data().to_vec();
                ensure(grads, *h, &[t_len, bsz, dim]);
                {
                    let dh = gbuf!(grads, *h).data_mut();
                    for t in 0..t_len {
                        for bi in 0..bsz {
                            let coef = wv[t * bsz + bi];
                            let go = &g.data()[bi * dim..(bi + 1) * dim];
                            let dst = &mut dh[(t * bsz + bi) * dim..(t * bsz + bi + 1) * dim];
                            for (o, &gv) in dst.iter_mut().zip(go) {
                                *o += coef * gv;
                            }
                        }
                    }
                }
                ensure(grads, *w, &[t_len, bsz]);
                let dw = gbuf!(grads, *w).data_mut();
                for t in 0..t_len {
                    for bi in 0..bsz {
                        let hrow = &hv[(t * bsz + bi) * dim..(t * bsz + bi + 1) * dim];
                        let go = &g.data()[bi * dim..(bi + 1) * dim];
                        let dot: F = hrow.iter().zip(go).map(|(&a, &b)| a * b).sum();
                        dw[t * bsz + bi] += dot;
                    }
                }
            }
            Op::MeanAll(a) => {
                ensure(grads, *a, self.value(*a).shape());
                let scale = g.data()[0] / F::from_f64(self.value(*a).len() as f64);
                for o in gbuf!(grads, *a).data_mut() {
                    *o += scale;
                }
            }
        }
        Ok(())
    }

    fn conv1d_backward(
        &self,
        node: usize,
        x: Var,
        w: Var,
        b: Var,
        patches: &Tensor<F>,
        g: &Tensor<F>,
        grads: &mut Vec<Option<Tensor<F>>>,
    ) -> Result<()> {
        let (bsz, co, lo) = {
            let s = self.nodes[node].value.shape();
            (s[0], s[1], s[2])
        };
        let (ci, l) = (self.value(x).shape()[1], self.value(x).shape()[2]);
        let k = self.value(w).shape()[2];
        let cik = ci * k;

        // (B, Co, Lo) -> row layout matching patches
        let mut g_rows = vec![F::ZERO; bsz * lo * co];
        for bi in 0..bsz {
            for o in 0..co {
                for t in 0..lo {
                    g_rows[(bi * lo + t) * co + o] = g.data()[(bi * co + o) * lo + t];
                }
            }
        }

        if grads[b.0].is_none() {
            grads[b.0] = Some(Tensor::zeros(&[co]));
        }
        {
            let db = grads[b.0].as_mut().unwrap().data_mut();
            for r in 0..bsz * lo {
                for o in 0..co {
                    db[o] += g_rows[r * co + o];
                }
            }
        }

        if grads[w.0].is_none() {
            grads[w.0] = Some(Tensor::zeros(self.value(w).shape()));
        }
        F::gemm(
            co, bsz * lo, cik, F::ONE,
            &g_rows, 1, co as isize,
            patches.data(), cik as isize, 1,
            F::ONE, grads[w.0].as_mut().unwrap().data_mut(), cik as isize, 1,
        );

        // dP = g_rows @ w_mat, then col2im
        let mut d_patches = vec![F::ZERO; bsz * lo * cik];
        F::gemm(
            bsz * lo, co, cik, F::ONE,
            &g_rows, co as isize, 1,
            self.value(w).data(), cik as isize, 1,
            F::ZERO, &mut d_patches, cik as isize, 1,
        );
        if grads[x.0].is_none() {
            grads[x.0] = Some(Tensor::zeros(self.value(x).shape()));
        }
        let dx = grads[x.0].as_mut().unwrap().data_mut();
        for bi in 0..bsz {
            for t in 0..lo {
                let row = &d_patches[(bi * lo + t) * cik..(bi * lo + t + 1) * cik];
                for c in 0..ci {
                    let dst = &mut dx[(bi * ci + c) * l + t..(bi * ci + c) * l + t + k];
                    for (o, &v) in dst.iter_mut().zip(&row[c * k..(c + 1) * k]) {
                        *o += v;
                    }
                }
            }
        }
        Ok(())
    }

    fn conv_transpose1d_backward(
        &self,
        node: usize,
        x: Var,
        w: Var,
        b: Var,
        xrows: &Tensor<F>,
        g: &Tensor<F>,
        grads: &mut Vec<Option<Tensor<F>>>,
    ) -> Result<()> {
        let (bsz, co, lo) = {
            let s = self.nodes[node].value.shape();
            (s[0], s[1], s[2])
        };
        let (ci, l) = (self.value(x).shape()[1], self.value(x).shape()[2]);
        let k = self.value(w).shape()[2];
        let cok = co * k;

        if grads[b.0].is_none() {
            grads[b.0] = Some(Tensor::zeros(&[co]));
        }
        {
            let db = grads[b.0].as_mut().unwrap().data_mut();
            for bi in 0..bsz {
                for o in 0..co {
                    for t in 0..lo {
                        db[o] += g.data()[(bi * co + o) * lo + t];
                    }
                }
            }
        }

        // d_out_rows[(b*l + t), (o*k + j)] = g[b, o, t + j]
        let mut d_rows = vec![F::ZERO; bsz * l * cok];
        for bi in 0..bsz {
            for t in 0..l {
                let dst = &mut d_rows[(bi * l + t) * cok..(bi * l + t + 1) * cok];
                for o in 0..co {
                    for j in 0..k {
                        dst[o * k + j] = g.data()[(bi * co + o) * lo + t + j];
                    }
                }
            }
        }

        if grads[w.0].is_none() {
            grads[w.0] = Some(Tensor::zeros(self.value(w).shape()));
        }
        F::gemm(
            ci, bsz * l, cok, F::ONE,
            xrows.data(), 1, ci as isize,
            &d_rows, cok as isize, 1,
            F::ONE, grads[w.0].as_mut().unwrap().data_mut(), cok as isize, 1,
        );

        let mut d_xrows = vec![F::ZERO; bsz * l * ci];
        F::gemm(
            bsz * l, cok, ci, F::ONE,
            &d_rows, cok as isize, 1,
            self.value(w).data(), 1, cok as isize,
            F::ZERO, &mut d_xrows, ci as isize, 1,
        );
        if grads[x.0].is_none() {
            grads[x.0] = Some(Tensor::zeros(self.value(x).shape()));
        }
        let dx = grads[x.0].as_mut().unwrap().data_mut();
        for bi in 0..bsz {
            for t in 0..l {
                for c in 0..ci {
                    dx[(bi * ci + c) * l + t] += d_xrows[(bi * l + t) * ci + c];
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn lstm_backward(
        &self,
        node: usize,
        x: Var,
        wx: Var,
        wh: Var,
        b: Var,
        cache: &LstmCache<F>,
        g: &Tensor<F>,
        grads: &mut Vec<Option<Tensor<F>>>,
    ) -> Result<()> {
        let hidden = &self.nodes[node].value;
        let (t_len, bsz, h) = (hidden.shape()[0], hidden.shape()[1], hidden.shape()[2]);
        let d = self.value(x).shape()[2];

        for &(v, shape) in [
            (x, self.value(x).shape()),
            (wx, self.value(wx).shape()),
            (wh, self.value(wh).shape()),
            (b, self.value(b).shape()),
        ]
        .iter()
        {
            if grads[v.0].is_none() {
                grads[v.0] = Some(Tensor::zeros(shape));
            }
        }

        let mut dh_rec = vec![F::ZERO; bsz * h];
        let mut dc_rec = vec![F::ZERO; bsz * h];
        let mut d_gates = vec![F::ZERO; bsz * 4 * h];

        for t in (0..t_len).rev() {
            let gates = &cache.gates.data()[t * bsz * 4 * h..(t + 1) * bsz * 4 * h];
            let cells = &cache.cells.data()[t * bsz * h..(t + 1) * bsz * h];
            let g_out = &g.data()[t * bsz * h..(t + 1) * bsz * h];

            for bi in 0..bsz {
                for u in 0..h {
                    let base = bi * 4 * h;
                    let ig = gates[base + u];
                    let fg = gates[base + h + u];
                    let gg = gates[base + 2 * h + u];
                    let og = gates[base + 3 * h + u];
                    let c_t = cells[bi * h + u];
                    let tc = c_t.tanh();
                    let c_prev = if t == 0 {
                        F::ZERO
                    } else {
                        cache.cells.data()[(t - 1) * bsz * h + bi * h + u]
                    };

                    let dh = g_out[bi * h + u] + dh_rec[bi * h + u];
                    let d_og = dh * tc;
                    let dct = dh * og * (F::ONE - tc * tc) + dc_rec[bi * h + u];
                    let d_ig = dct * gg;
                    let d_gg = dct * ig;
                    let d_fg = dct * c_prev;
                    dc_rec[bi * h + u] = dct * fg;

                    d_gates[base + u] = d_ig * ig * (F::ONE - ig);
                    d_gates[base + h + u] = d_fg * fg * (F::ONE - fg);
                    d_gates[base + 2 * h + u] = d_gg * (F::ONE - gg * gg);
                    d_gates[base + 3 * h + u] = d_og * og * (F::ONE - og);
                }
            }

            // db += column sums of d_gates
            {
                let db = grads[b.0].as_mut().unwrap().data_mut();
                for bi in 0..bsz {
                    for c in 0..4 * h {
                        db[c] += d_gates[bi * 4 * h + c];
                    }
                }
            }

            let x_t = &self.value(x).data()[t * bsz * d..(t + 1) * bsz * d];
            // dwx += x_t^T @ d_gates
            F::gemm(
                d, bsz, 4 * h, F::ONE,
                x_t, 1, d as isize,
                &d_gates, (4 * h) as isize, 1,
                F::ONE, grads[wx.0].as_mut().unwrap().data_mut(), (4 * h) as isize, 1,
            );
            // dx_t += d_gates @ wx^T
            {
                let dx = grads[x.0].as_mut().unwrap().data_mut();
                F::gemm(
                    bsz, 4 * h, d, F::ONE,
                    &d_gates, (4 * h) as isize, 1,
                    self.value(wx).data(), 1, (4 * h) as isize,
                    F::ONE, &mut dx[t * bsz * d..(t + 1) * bsz * d], d as isize, 1,
                );
            }
            if t > 0 {
                let h_prev = &hidden.data()[(t - 1) * bsz * h..t * bsz * h];
                // dwh += h_prev^T @ d_gates
                F::gemm(
                    h, bsz, 4 * h, F::ONE,
                    h_prev, 1, h as isize,
                    &d_gates, (4 * h) as isize, 1,
                    F::ONE, grads[wh.0].as_mut().unwrap().data_mut(), (4 * h) as isize, 1,
                );
                // dh_rec = d_gates @ wh^T
                F::gemm(
                    bsz, 4 * h, h, F::ONE,
                    &d_gates, (4 * h) as isize, 1,
                    self.value(wh).data(), 1, (4 * h) as isize,
                    F::ZERO, &mut dh_rec, h as isize, 1,
                );
            }
        }
        Ok(())
    }
}

fn sigmoid<F: Scalar>(x: F) -> F {
    F::ONE / (F::ONE + (-x).exp())
}

fn softmax_inplace<F: Scalar>(row: &mut [F]) {
    let mut max = row[0];
    for &v in row.iter() {
        max = max.max_with(v);
    }
    let mut sum = F::ZERO;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn logsumexp<F: Scalar>(row: &[F]) -> F {
    let mut max = row[0];
    for &v in row.iter() {
        max = max.max_with(v);
    }
    let sum: F = row.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

fn swap01<F: Scalar>(t: &Tensor<F>) -> Result<Tensor<F>> {
    let s = t.shape();
    if s.len() < 2 {
        return Err(MilcError::ShapeMismatch { op: "swap_axes_01", details: format!("{:?}", s) });
    }
    let (a, b) = (s[0], s[1]);
    let inner: usize = s[2..].iter().product();
    let mut shape = s.to_vec();
    shape.swap(0, 1);
    let mut out = Tensor::zeros(&shape);
    for i in 0..a {
        for j in 0..b {
            let src = &t.data()[(i * b + j) * inner..(i * b + j + 1) * inner];
            out.data_mut()[(j * a + i) * inner..(j * a + i + 1) * inner].copy_from_slice(src);
        }
    }
    Ok(out)
}

fn reverse0<F: Scalar>(t: &Tensor<F>) -> Result<Tensor<F>> {
    let s = t.shape();
    if s.is_empty() {
        return Err(MilcError::ShapeMismatch { op: "reverse_axis0", details: "rank 0".into() });
    }
    let n = s[0];
    let inner: usize = s[1..].iter().product();
    let mut out = Tensor::zeros(s);
    for i in 0..n {
        let src = &t.data()[i * inner..(i + 1) * inner];
        out.data_mut()[(n - 1 - i) * inner..(n - i) * inner].copy_from_slice(src);
    }
    Ok(out)
}
