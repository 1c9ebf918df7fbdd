//! Operation set: forward evaluation and vector-Jacobian products.
//!
//! Every op is a pure function of its input tensors. Reductions and
//! normalizations act on the trailing axis. The only broadcast is `add` with a
//! right operand whose shape equals the trailing dims of the left operand
//! (bias add).

use std::fmt;
use std::str::FromStr;

use super::tensor::Tensor;
use crate::ctc;
use crate::error::{Error, Result};
use crate::kernels;

/// Name-only identifier of an op, as accepted on the command line and in
/// tests that iterate over the whole op set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpId {
    MatMul,
    Add,
    Mul,
    Scale,
    Softmax,
    LogSoftmax,
    LogSumExp,
    LayerNorm,
    Relu,
    EmbeddingLookup,
    Concat,
    Slice,
    Transpose,
    MaskedFill,
    ReduceSum,
    ReduceMean,
    Conv1dStrided,
    DepthwiseConv1d,
    CtcLoss,
}

impl OpId {
    pub const ALL: [OpId; 19] = [
        OpId::MatMul,
        OpId::Add,
        OpId::Mul,
        OpId::Scale,
        OpId::Softmax,
        OpId::LogSoftmax,
        OpId::LogSumExp,
        OpId::LayerNorm,
        OpId::Relu,
        OpId::EmbeddingLookup,
        OpId::Concat,
        OpId::Slice,
        OpId::Transpose,
        OpId::MaskedFill,
        OpId::ReduceSum,
        OpId::ReduceMean,
        OpId::Conv1dStrided,
        OpId::DepthwiseConv1d,
        OpId::CtcLoss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpId::MatMul => "matmul",
            OpId::Add => "add",
            OpId::Mul => "mul",
            OpId::Scale => "scale",
            OpId::Softmax => "softmax",
            OpId::LogSoftmax => "log_softmax",
            OpId::LogSumExp => "logsumexp",
            OpId::LayerNorm => "layer_norm",
            OpId::Relu => "relu",
            OpId::EmbeddingLookup => "embedding_lookup",
            OpId::Concat => "concat",
            OpId::Slice => "slice",
            OpId::Transpose => "transpose",
            OpId::MaskedFill => "masked_fill",
            OpId::ReduceSum => "reduce_sum",
            OpId::ReduceMean => "reduce_mean",
            OpId::Conv1dStrided => "conv1d_strided",
            OpId::DepthwiseConv1d => "depthwise_conv1d",
            OpId::CtcLoss => "ctc_loss",
        }
    }
}

impl fmt::Display for OpId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpId::ALL
            .iter()
            .copied()
            .find(|op| op.name() == s)
            .ok_or_else(|| Error::UnknownOp(s.to_string()))
    }
}

/// An op together with its non-tensor attributes.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    /// `[m,k] · [k,n]`
    MatMul,
    /// Elementwise sum; the right operand may match only the trailing dims.
    Add,
    /// Elementwise product of equal shapes.
    Mul,
    Scale(f64),
    Softmax,
    LogSoftmax,
    /// Drops the trailing axis.
    LogSumExp,
    /// Inputs: `x [.., d]`, `gamma [d]`, `beta [d]`.
    LayerNorm { eps: f64 },
    Relu,
    /// Input: table `[V, D]`; output `[ids.len(), D]`.
    EmbeddingLookup(Vec<usize>),
    Concat { axis: usize },
    Slice { axis: usize, start: usize, end: usize },
    /// 2-D transpose.
    Transpose,
    /// Replaces entries whose mask bit is set with `value`.
    MaskedFill { mask: Vec<bool>, value: f64 },
    /// Sum of all entries; output shape `[]`.
    ReduceSum,
    ReduceMean,
    /// Inputs: `x [T, Cin]`, `w [K, Cin, Cout]`; valid padding.
    Conv1dStrided { stride: usize },
    /// Inputs: `x [T, C]`, `w [K, C]` with odd `K`; zero "same" padding.
    DepthwiseConv1d,
    /// Input: log-probabilities `[T, C]`; output `−log P(target)` as `[]`.
    CtcLoss { target: Vec<usize>, blank: usize },
}

impl Op {
    pub fn id(&self) -> OpId {
        match self {
            Op::MatMul => OpId::MatMul,
            Op::Add => OpId::Add,
            Op::Mul => OpId::Mul,
            Op::Scale(_) => OpId::Scale,
            Op::Softmax => OpId::Softmax,
            Op::LogSoftmax => OpId::LogSoftmax,
            Op::LogSumExp => OpId::LogSumExp,
            Op::LayerNorm { .. } => OpId::LayerNorm,
            Op::Relu => OpId::Relu,
            Op::EmbeddingLookup(_) => OpId::EmbeddingLookup,
            Op::Concat { .. } => OpId::Concat,
            Op::Slice { .. } => OpId::Slice,
            Op::Transpose => OpId::Transpose,
            Op::MaskedFill { .. } => OpId::MaskedFill,
            Op::ReduceSum => OpId::ReduceSum,
            Op::ReduceMean => OpId::ReduceMean,
            Op::Conv1dStrided { .. } => OpId::Conv1dStrided,
            Op::DepthwiseConv1d => OpId::DepthwiseConv1d,
            Op::CtcLoss { .. } => OpId::CtcLoss,
        }
    }

    fn name(&self) -> &'static str {
        self.id().name()
    }

    /// Evaluates the op on concrete inputs.
    pub fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        match self {
            Op::MatMul => {
                let (a, b) = two(self, inputs)?;
                let (m, k) = as_matrix(self, a)?;
                let (k2, n) = as_matrix(self, b)?;
                if k != k2 {
                    return Err(mismatch(self, a, b));
                }
                Ok(Tensor::from_parts(
                    vec![m, n],
                    kernels::matmul(a.data(), b.data(), m, k, n),
                ))
            }
            Op::Add => {
                let (a, b) = two(self, inputs)?;
                check_add(a, b)?;
                let n = b.numel();
                let data = a
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v + b.data()[i % n])
                    .collect();
                Ok(Tensor::from_parts(a.shape().to_vec(), data))
            }
            Op::Mul => {
                let (a, b) = two(self, inputs)?;
                if a.shape() != b.shape() {
                    return Err(mismatch(self, a, b));
                }
                let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
                Ok(Tensor::from_parts(a.shape().to_vec(), data))
            }
            Op::Scale(c) => {
                let x = one(self, inputs)?;
                Ok(Tensor::from_parts(
                    x.shape().to_vec(),
                    x.data().iter().map(|v| v * c).collect(),
                ))
            }
            Op::Softmax | Op::LogSoftmax => {
                let x = one(self, inputs)?;
                let c = x.cols();
                let mut data = x.data().to_vec();
                if c > 0 {
                    for row in data.chunks_mut(c) {
                        if matches!(self, Op::Softmax) {
                            kernels::softmax_in_place(row);
                        } else {
                            kernels::log_softmax_in_place(row);
                        }
                    }
                }
                Ok(Tensor::from_parts(x.shape().to_vec(), data))
            }
            Op::LogSumExp => {
                let x = one(self, inputs)?;
                if x.shape().is_empty() {
                    return Ok(x.clone());
                }
                let c = x.cols();
                let data = if c == 0 {
                    vec![f64::NEG_INFINITY; x.rows()]
                } else {
                    x.data().chunks(c).map(kernels::log_sum_exp).collect()
                };
                let shape = x.shape()[..x.shape().len() - 1].to_vec();
                Ok(Tensor::from_parts(shape, data))
            }
            Op::LayerNorm { eps } => {
                let (x, gamma, beta) = three(self, inputs)?;
                let d = x.cols();
                if gamma.shape() != [d] || beta.shape() != [d] {
                    return Err(mismatch(self, x, gamma));
                }
                let mut data = Vec::with_capacity(x.numel());
                for row in x.data().chunks(d.max(1)) {
                    data.extend(kernels::layer_norm_row(row, gamma.data(), beta.data(), *eps));
                }
                Ok(Tensor::from_parts(x.shape().to_vec(), data))
            }
            Op::Relu => {
                let x = one(self, inputs)?;
                Ok(Tensor::from_parts(
                    x.shape().to_vec(),
                    x.data().iter().map(|v| v.max(0.0)).collect(),
                ))
            }
            Op::EmbeddingLookup(ids) => {
                let table = one(self, inputs)?;
                let (v, d) = as_matrix(self, table)?;
                let mut data = Vec::with_capacity(ids.len() * d);
                for &id in ids {
                    if id >= v {
                        return Err(Error::IndexOutOfRange {
                            what: "embedding table",
                            index: id,
                            size: v,
                        });
                    }
                    data.extend_from_slice(&table.data()[id * d..(id + 1) * d]);
                }
                Ok(Tensor::from_parts(vec![ids.len(), d], data))
            }
            Op::Concat { axis } => concat(inputs, *axis),
            Op::Slice { axis, start, end } => {
                let x = one(self, inputs)?;
                let (outer, len, inner) = split_axis(self, x.shape(), *axis)?;
                if start > end || *end > len {
                    return Err(Error::IndexOutOfRange {
                        what: "slice bound",
                        index: *end,
                        size: len,
                    });
                }
                let w = end - start;
                let mut data = Vec::with_capacity(outer * w * inner);
                for o in 0..outer {
                    let base = o * len * inner;
                    data.extend_from_slice(&x.data()[base + start * inner..base + end * inner]);
                }
                let mut shape = x.shape().to_vec();
                shape[*axis] = w;
                Ok(Tensor::from_parts(shape, data))
            }
            Op::Transpose => {
                let x = one(self, inputs)?;
                let (r, c) = as_matrix(self, x)?;
                let mut data = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        data[j * r + i] = x.data()[i * c + j];
                    }
                }
                Ok(Tensor::from_parts(vec![c, r], data))
            }
            Op::MaskedFill { mask, value } => {
                let x = one(self, inputs)?;
                if mask.len() != x.numel() {
                    return Err(Error::ShapeMismatch {
                        op: self.name(),
                        lhs: x.shape().to_vec(),
                        rhs: vec![mask.len()],
                    });
                }
                let data = x
                    .data()
                    .iter()
                    .zip(mask)
                    .map(|(&v, &m)| if m { *value } else { v })
                    .collect();
                Ok(Tensor::from_parts(x.shape().to_vec(), data))
            }
            Op::ReduceSum => {
                let x = one(self, inputs)?;
                Ok(Tensor::scalar(x.data().iter().sum()))
            }
            Op::ReduceMean => {
                let x = one(self, inputs)?;
                let n = x.numel().max(1) as f64;
                Ok(Tensor::scalar(x.data().iter().sum::<f64>() / n))
            }
            Op::Conv1dStrided { stride } => {
                let (x, w) = two(self, inputs)?;
                let (t, cin, k, cout) = conv_dims(self, x, w)?;
                if *stride == 0 {
                    return Err(Error::InvalidConfig("conv stride must be positive".into()));
                }
                if t < k {
                    return Err(Error::InputTooShort {
                        what: "conv1d_strided",
                        len: t,
                        field: k,
                    });
                }
                let t_out = (t - k) / stride + 1;
                let mut out = vec![0.0; t_out * cout];
                for to in 0..t_out {
                    let orow = &mut out[to * cout..(to + 1) * cout];
                    for kk in 0..k {
                        let xrow = x.row(to * stride + kk);
                        for (c, &xv) in xrow.iter().enumerate() {
                            let wrow = &w.data()[(kk * cin + c) * cout..(kk * cin + c + 1) * cout];
                            for (o, wv) in orow.iter_mut().zip(wrow) {
                                *o += xv * wv;
                            }
                        }
                    }
                }
                Ok(Tensor::from_parts(vec![t_out, cout], out))
            }
            Op::DepthwiseConv1d => {
                let (x, w) = two(self, inputs)?;
                let (t, c) = as_matrix(self, x)?;
                let (k, c2) = as_matrix(self, w)?;
                if c != c2 || k % 2 == 0 {
                    return Err(mismatch(self, x, w));
                }
                let half = k / 2;
                let mut out = vec![0.0; t * c];
                for ti in 0..t {
                    for kk in 0..k {
                        let src = ti + kk;
                        if src < half || src - half >= t {
                            continue;
                        }
                        let xrow = x.row(src - half);
                        let wrow = &w.data()[kk * c..(kk + 1) * c];
                        for ch in 0..c {
                            out[ti * c + ch] += xrow[ch] * wrow[ch];
                        }
                    }
                }
                Ok(Tensor::from_parts(vec![t, c], out))
            }
            Op::CtcLoss { target, blank } => {
                let lp = one(self, inputs)?;
                let (t, c) = as_matrix(self, lp)?;
                let nll = ctc::ctc_nll(lp.data(), t, c, target, *blank)?;
                Ok(Tensor::scalar(nll))
            }
        }
    }

    /// Gradients of `⟨out_grad, op(inputs)⟩` with respect to each input.
    /// Entries of `needs` that are false yield `None`.
    pub fn vjp(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        out_grad: &[f64],
        needs: &[bool],
    ) -> Result<Vec<Option<Vec<f64>>>> {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; inputs.len()];
        let want = |i: usize| needs.get(i).copied().unwrap_or(false);
        match self {
            Op::MatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                if want(0) {
                    grads[0] = Some(kernels::matmul_bt(out_grad, b.data(), m, k, n));
                }
                if want(1) {
                    grads[1] = Some(kernels::matmul_at(a.data(), out_grad, m, k, n));
                }
            }
            Op::Add => {
                if want(0) {
                    grads[0] = Some(out_grad.to_vec());
                }
                if want(1) {
                    let n = inputs[1].numel();
                    let mut gb = vec![0.0; n];
                    for (i, g) in out_grad.iter().enumerate() {
                        gb[i % n] += g;
                    }
                    grads[1] = Some(gb);
                }
            }
            Op::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                if want(0) {
                    grads[0] = Some(out_grad.iter().zip(b.data()).map(|(g, y)| g * y).collect());
                }
                if want(1) {
                    grads[1] = Some(out_grad.iter().zip(a.data()).map(|(g, x)| g * x).collect());
                }
            }
            Op::Scale(c) => {
                if want(0) {
                    grads[0] = Some(out_grad.iter().map(|g| g * c).collect());
                }
            }
            Op::Softmax => {
                if want(0) {
                    let c = output.cols();
                    let mut gx = vec![0.0; output.numel()];
                    if c > 0 {
                        for ((y, g), o) in output
                            .data()
                            .chunks(c)
                            .zip(out_grad.chunks(c))
                            .zip(gx.chunks_mut(c))
                        {
                            let s = kernels::dot(y, g);
                            for j in 0..c {
                                o[j] = y[j] * (g[j] - s);
                            }
                        }
                    }
                    grads[0] = Some(gx);
                }
            }
            Op::LogSoftmax => {
                if want(0) {
                    let c = output.cols();
                    let mut gx = vec![0.0; output.numel()];
                    if c > 0 {
                        for ((y, g), o) in output
                            .data()
                            .chunks(c)
                            .zip(out_grad.chunks(c))
                            .zip(gx.chunks_mut(c))
                        {
                            let s: f64 = g.iter().sum();
                            for j in 0..c {
                                o[j] = g[j] - y[j].exp() * s;
                            }
                        }
                    }
                    grads[0] = Some(gx);
                }
            }
            Op::LogSumExp => {
                if want(0) {
                    let x = inputs[0];
                    if x.shape().is_empty() {
                        grads[0] = Some(out_grad.to_vec());
                    } else {
                        let c = x.cols();
                        let mut gx = vec![0.0; x.numel()];
                        if c > 0 {
                            for (r, (xr, o)) in x.data().chunks(c).zip(gx.chunks_mut(c)).enumerate() {
                                let lse = output.data()[r];
                                for j in 0..c {
                                    o[j] = out_grad[r] * (xr[j] - lse).exp();
                                }
                            }
                        }
                        grads[0] = Some(gx);
                    }
                }
            }
            Op::LayerNorm { eps } => {
                let (x, gamma) = (inputs[0], inputs[1]);
                let d = x.cols();
                let mut gx = vec![0.0; x.numel()];
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                if d > 0 {
                    for (r, xr) in x.data().chunks(d).enumerate() {
                        let g = &out_grad[r * d..(r + 1) * d];
                        let (xhat, inv_std) = kernels::normalize_row(xr, *eps);
                        let mut gxhat = vec![0.0; d];
                        for j in 0..d {
                            gb[j] += g[j];
                            gg[j] += g[j] * xhat[j];
                            gxhat[j] = g[j] * gamma.data()[j];
                        }
                        let mean_g = gxhat.iter().sum::<f64>() / d as f64;
                        let mean_gx = kernels::dot(&gxhat, &xhat) / d as f64;
                        for j in 0..d {
                            gx[r * d + j] = inv_std * (gxhat[j] - mean_g - xhat[j] * mean_gx);
                        }
                    }
                }
                if want(0) {
                    grads[0] = Some(gx);
                }
                if want(1) {
                    grads[1] = Some(gg);
                }
                if want(2) {
                    grads[2] = Some(gb);
                }
            }
            Op::Relu => {
                if want(0) {
                    grads[0] = Some(
                        inputs[0]
                            .data()
                            .iter()
                            .zip(out_grad)
                            .map(|(&x, g)| if x > 0.0 { *g } else { 0.0 })
                            .collect(),
                    );
                }
            }
            Op::EmbeddingLookup(ids) => {
                if want(0) {
                    let table = inputs[0];
                    let d = table.cols();
                    let mut gt = vec![0.0; table.numel()];
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += out_grad[r * d + j];
                        }
                    }
                    grads[0] = Some(gt);
                }
            }
            Op::Concat { axis } => {
                let (outer, total, inner) = split_axis(self, output.shape(), *axis)?;
                let mut offset = 0;
                for (i, x) in inputs.iter().enumerate() {
                    let len = x.shape()[*axis];
                    if want(i) {
                        let mut g = Vec::with_capacity(x.numel());
                        for o in 0..outer {
                            let base = o * total * inner + offset * inner;
                            g.extend_from_slice(&out_grad[base..base + len * inner]);
                        }
                        grads[i] = Some(g);
                    }
                    offset += len;
                }
            }
            Op::Slice { axis, start, end } => {
                if want(0) {
                    let x = inputs[0];
                    let (outer, len, inner) = split_axis(self, x.shape(), *axis)?;
                    let w = end - start;
                    let mut g = vec![0.0; x.numel()];
                    for o in 0..outer {
                        let dst = o * len * inner + start * inner;
                        let src = o * w * inner;
                        g[dst..dst + w * inner].copy_from_slice(&out_grad[src..src + w * inner]);
                    }
                    grads[0] = Some(g);
                }
            }
            Op::Transpose => {
                if want(0) {
                    let (c, r) = (output.shape()[0], output.shape()[1]);
                    let mut g = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            g[i * c + j] = out_grad[j * r + i];
                        }
                    }
                    grads[0] = Some(g);
                }
            }
            Op::MaskedFill { mask, .. } => {
                if want(0) {
                    grads[0] = Some(
                        out_grad
                            .iter()
                            .zip(mask)
                            .map(|(g, &m)| if m { 0.0 } else { *g })
                            .collect(),
                    );
                }
            }
            Op::ReduceSum => {
                if want(0) {
                    grads[0] = Some(vec![out_grad[0]; inputs[0].numel()]);
                }
            }
            Op::ReduceMean => {
                if want(0) {
                    let n = inputs[0].numel();
                    grads[0] = Some(vec![out_grad[0] / n.max(1) as f64; n]);
                }
            }
            Op::Conv1dStrided { stride } => {
                let (x, w) = (inputs[0], inputs[1]);
                let (_, cin, k, cout) = conv_dims(self, x, w)?;
                let t_out = output.shape()[0];
                let mut gx = vec![0.0; x.numel()];
                let mut gw = vec![0.0; w.numel()];
                for to in 0..t_out {
                    let g = &out_grad[to * cout..(to + 1) * cout];
                    for kk in 0..k {
                        let ti = to * stride + kk;
                        for c in 0..cin {
                            let widx = (kk * cin + c) * cout;
                            let wrow = &w.data()[widx..widx + cout];
                            gx[ti * cin + c] += kernels::dot(g, wrow);
                            let xv = x.data()[ti * cin + c];
                            for (gwv, gv) in gw[widx..widx + cout].iter_mut().zip(g) {
                                *gwv += xv * gv;
                            }
                        }
                    }
                }
                if want(0) {
                    grads[0] = Some(gx);
                }
                if want(1) {
                    grads[1] = Some(gw);
                }
            }
            Op::DepthwiseConv1d => {
                let (x, w) = (inputs[0], inputs[1]);
                let (t, c) = (x.shape()[0], x.shape()[1]);
                let k = w.shape()[0];
                let half = k / 2;
                let mut gx = vec![0.0; x.numel()];
                let mut gw = vec![0.0; w.numel()];
                for ti in 0..t {
                    for kk in 0..k {
                        let src = ti + kk;
                        if src < half || src - half >= t {
                            continue;
                        }
                        let s = src - half;
                        for ch in 0..c {
                            let g = out_grad[ti * c + ch];
                            gx[s * c + ch] += g * w.data()[kk * c + ch];
                            gw[kk * c + ch] += g * x.data()[s * c + ch];
                        }
                    }
                }
                if want(0) {
                    grads[0] = Some(gx);
                }
                if want(1) {
                    grads[1] = Some(gw);
                }
            }
            Op::CtcLoss { target, blank } => {
                if want(0) {
                    let lp = inputs[0];
                    let (t, c) = (lp.shape()[0], lp.shape()[1]);
                    let mut g = ctc::ctc_nll_grad(lp.data(), t, c, target, *blank)?;
                    for v in g.iter_mut() {
                        *v *= out_grad[0];
                    }
                    grads[0] = Some(g);
                }
            }
        }
        Ok(grads)
    }
}

fn mismatch(op: &Op, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op: op.name(),
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn arity(op: &Op, expected: usize, actual: usize) -> Error {
    Error::Arity {
        op: op.name(),
        expected,
        actual,
    }
}

fn one<'a>(op: &Op, inputs: &[&'a Tensor]) -> Result<&'a Tensor> {
    match inputs {
        [x] => Ok(x),
        _ => Err(arity(op, 1, inputs.len())),
    }
}

fn two<'a>(op: &Op, inputs: &[&'a Tensor]) -> Result<(&'a Tensor, &'a Tensor)> {
    match inputs {
        [a, b] => Ok((a, b)),
        _ => Err(arity(op, 2, inputs.len())),
    }
}

fn three<'a>(op: &Op, inputs: &[&'a Tensor]) -> Result<(&'a Tensor, &'a Tensor, &'a Tensor)> {
    match inputs {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(arity(op, 3, inputs.len())),
    }
}

fn as_matrix(op: &Op, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::ShapeMismatch {
            op: op.name(),
            lhs: other.to_vec(),
            rhs: vec![0, 0],
        }),
    }
}

fn check_add(a: &Tensor, b: &Tensor) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            op: "add",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        })
    }
}

fn conv_dims(op: &Op, x: &Tensor, w: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let (t, cin) = as_matrix(op, x)?;
    match w.shape() {
        [k, c, cout] if *c == cin && *k > 0 => Ok((t, cin, *k, *cout)),
        _ => Err(mismatch(op, x, w)),
    }
}

/// `(outer, len, inner)` extents around `axis`.
fn split_axis(op: &Op, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::IndexOutOfRange {
            what: match op.id() {
                OpId::Concat => "concat axis",
                _ => "slice axis",
            },
            index: axis,
            size: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn concat(inputs: &[&Tensor], axis: usize) -> Result<Tensor> {
    let op = Op::Concat { axis };
    let first = inputs.first().ok_or_else(|| arity(&op, 1, 0))?;
    let (outer, _, inner) = split_axis(&op, first.shape(), axis)?;
    let mut total = 0;
    for x in inputs {
        let s = x.shape();
        let compatible = s.len() == first.shape().len()
            && s.iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(mismatch(&op, first, x));
        }
        total += s[axis];
    }
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for x in inputs {
            let len = x.shape()[axis];
            let base = o * len * inner;
            data.extend_from_slice(&x.data()[base..base + len * inner]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Ok(Tensor::from_parts(shape, data))
}
