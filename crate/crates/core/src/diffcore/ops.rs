//! Primitive forward kernels and their vector-Jacobian products.

use super::tensor::Tensor;

/// Norm guard added inside every square root of a sum of squares.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul { trans_b: bool },
    Transpose,
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddScalar(f64),
    Neg,
    Concat,
    Slice { start: usize, len: usize },
    Stack,
    Select { index: usize },
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Softmax { temp: f64 },
    LogSoftmax { temp: f64 },
    MaskedSoftmax { mask: Vec<bool> },
    Sum,
    Mean,
    SumCols,
    Cosine,
    Normalize,
    Nll { targets: Vec<usize>, weights: Vec<f64> },
    Gather { ids: Vec<usize> },
    LstmCell,
    AttnScores,
    AttnContext,
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Transpose => "transpose",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Neg => "neg",
            Op::Concat => "concat",
            Op::Slice { .. } => "slice",
            Op::Stack => "stack",
            Op::Select { .. } => "select",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::MaskedSoftmax { .. } => "masked_softmax",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::SumCols => "sum_cols",
            Op::Cosine => "cosine",
            Op::Normalize => "normalize",
            Op::Nll { .. } => "nll",
            Op::Gather { .. } => "gather",
            Op::LstmCell => "lstm_cell",
            Op::AttnScores => "attn_scores",
            Op::AttnContext => "attn_context",
        }
    }
}

/// `c = a(m x k) * b(k x n) + beta * c` with explicit strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above bound every index reached with these strides,
    // since each operand is a dense row-major buffer of the stated extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
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

#[inline]
fn bidx(i: usize, j: usize, r: usize, c: usize) -> usize {
    (if r == 1 { 0 } else { i }) * c + if c == 1 { 0 } else { j }
}

fn broadcast_shape(a: &Tensor, b: &Tensor) -> Option<Vec<usize>> {
    let (ra, ca, rb, cb) = (a.rows(), a.cols(), b.rows(), b.cols());
    let ok = |x: usize, y: usize| x == y || x == 1 || y == 1;
    if !ok(ra, rb) || !ok(ca, cb) {
        return None;
    }
    let (r, c) = (ra.max(rb), ca.max(cb));
    if a.rows() == r && a.cols() == c {
        Some(a.shape().to_vec())
    } else if b.rows() == r && b.cols() == c {
        Some(b.shape().to_vec())
    } else {
        Some(vec![r, c])
    }
}

fn binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, String> {
    let shape = broadcast_shape(a, b).ok_or_else(|| {
        format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape())
    })?;
    let (ra, ca, rb, cb) = (a.rows(), a.cols(), b.rows(), b.cols());
    let (r, c) = (ra.max(rb), ca.max(cb));
    let (ad, bd) = (a.data(), b.data());
    let mut out = Vec::with_capacity(r * c);
    if ra == rb && ca == cb {
        out.extend(ad.iter().zip(bd).map(|(&x, &y)| f(x, y)));
    } else {
        for i in 0..r {
            for j in 0..c {
                out.push(f(ad[bidx(i, j, ra, ca)], bd[bidx(i, j, rb, cb)]));
            }
        }
    }
    Ok(Tensor::from_parts(shape, out))
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect())
}

fn row_softmax(x: &[f64], cols: usize, temp: f64, log: bool) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (xr, yr) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let m = xr.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)) / temp;
        let mut s = 0.0;
        for (y, &v) in yr.iter_mut().zip(xr) {
            *y = v / temp - m;
            s += y.exp();
        }
        if log {
            let ls = s.ln();
            yr.iter_mut().for_each(|y| *y -= ls);
        } else {
            yr.iter_mut().for_each(|y| *y = y.exp() / s);
        }
    }
    out
}

fn norm_eps(v: &[f64]) -> f64 {
    (v.iter().map(|x| x * x).sum::<f64>() + NORM_EPS).sqrt()
}

/// Computes the value of `op` applied to `xs`, or a description of the shape fault.
pub(crate) fn compute(op: &Op, xs: &[&Tensor]) -> Result<Tensor, String> {
    Ok(match op {
        Op::Leaf => unreachable!("leaves are bound, not computed"),
        Op::MatMul { trans_b } => {
            let (a, b) = (xs[0], xs[1]);
            if b.shape().len() != 2 {
                return Err(format!("right operand must be 2-d, got {:?}", b.shape()));
            }
            let (m, k) = (a.rows(), a.cols());
            let (bk, n) = if *trans_b {
                (b.shape()[1], b.shape()[0])
            } else {
                (b.shape()[0], b.shape()[1])
            };
            if k != bk {
                return Err(format!(
                    "inner dims differ: {:?} x {:?}{}",
                    a.shape(),
                    b.shape(),
                    if *trans_b { "^T" } else { "" }
                ));
            }
            let mut out = vec![0.0; m * n];
            let (rsb, csb) = if *trans_b { (1, k as isize) } else { (n as isize, 1) };
            gemm(m, k, n, a.data(), k as isize, 1, b.data(), rsb, csb, 0.0, &mut out);
            let mut shape = a.shape().to_vec();
            if shape.is_empty() {
                shape = vec![1, n];
            } else {
                *shape.last_mut().unwrap() = n;
            }
            Tensor::from_parts(shape, out)
        }
        Op::Transpose => {
            let a = xs[0];
            let (r, c) = (a.rows(), a.cols());
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = a.data()[i * c + j];
                }
            }
            Tensor::from_parts(vec![c, r], out)
        }
        Op::Add => binary(xs[0], xs[1], |x, y| x + y)?,
        Op::Sub => binary(xs[0], xs[1], |x, y| x - y)?,
        Op::Mul => binary(xs[0], xs[1], |x, y| x * y)?,
        Op::Scale(s) => map(xs[0], |x| x * s),
        Op::AddScalar(s) => map(xs[0], |x| x + s),
        Op::Neg => map(xs[0], |x| -x),
        Op::Concat => {
            let rows = xs[0].rows();
            if let Some(bad) = xs.iter().find(|t| t.rows() != rows) {
                return Err(format!(
                    "row counts differ: {:?} vs {:?}",
                    xs[0].shape(),
                    bad.shape()
                ));
            }
            let total: usize = xs.iter().map(|t| t.cols()).sum();
            let mut out = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for t in xs {
                    out.extend_from_slice(t.row_slice(r));
                }
            }
            let mut shape = xs[0].shape().to_vec();
            if shape.is_empty() {
                shape = vec![1, total];
            } else {
                *shape.last_mut().unwrap() = total;
            }
            Tensor::from_parts(shape, out)
        }
        Op::Slice { start, len } => {
            let a = xs[0];
            if *len == 0 || start + len > a.cols() {
                return Err(format!(
                    "slice [{start}, {}) out of range for width {}",
                    start + len,
                    a.cols()
                ));
            }
            let mut out = Vec::with_capacity(a.rows() * len);
            for r in 0..a.rows() {
                out.extend_from_slice(&a.row_slice(r)[*start..start + len]);
            }
            let mut shape = a.shape().to_vec();
            if shape.is_empty() {
                shape = vec![1, *len];
            } else {
                *shape.last_mut().unwrap() = *len;
            }
            Tensor::from_parts(shape, out)
        }
        Op::Stack => {
            let s = xs[0].shape();
            if let Some(bad) = xs.iter().find(|t| t.shape() != s) {
                return Err(format!("stack of {:?} with {:?}", s, bad.shape()));
            }
            let mut shape = vec![xs.len()];
            shape.extend_from_slice(s);
            let mut out = Vec::with_capacity(xs.len() * xs[0].len());
            for t in xs {
                out.extend_from_slice(t.data());
            }
            Tensor::from_parts(shape, out)
        }
        Op::Select { index } => {
            let a = xs[0];
            if a.shape().len() < 2 || *index >= a.shape()[0] {
                return Err(format!("select {index} from {:?}", a.shape()));
            }
            let block = a.len() / a.shape()[0];
            Tensor::from_parts(
                a.shape()[1..].to_vec(),
                a.data()[index * block..(index + 1) * block].to_vec(),
            )
        }
        Op::Tanh => map(xs[0], f64::tanh),
        Op::Sigmoid => map(xs[0], sigmoid),
        Op::Exp => map(xs[0], f64::exp),
        Op::Log => map(xs[0], f64::ln),
        Op::Softmax { temp } => Tensor::from_parts(
            xs[0].shape().to_vec(),
            row_softmax(xs[0].data(), xs[0].cols(), *temp, false),
        ),
        Op::LogSoftmax { temp } => Tensor::from_parts(
            xs[0].shape().to_vec(),
            row_softmax(xs[0].data(), xs[0].cols(), *temp, true),
        ),
        Op::MaskedSoftmax { mask } => {
            let a = xs[0];
            if mask.len() != a.len() {
                return Err(format!("mask has {} entries for {:?}", mask.len(), a.shape()));
            }
            let c = a.cols();
            let mut out = vec![0.0; a.len()];
            for (r, (xr, yr)) in a.data().chunks(c).zip(out.chunks_mut(c)).enumerate() {
                let mr = &mask[r * c..(r + 1) * c];
                let m = xr
                    .iter()
                    .zip(mr)
                    .filter(|(_, &k)| k)
                    .fold(f64::NEG_INFINITY, |acc, (&v, _)| acc.max(v));
                if m == f64::NEG_INFINITY {
                    return Err(format!("row {r} has every position masked"));
                }
                let mut s = 0.0;
                for ((y, &v), &k) in yr.iter_mut().zip(xr).zip(mr) {
                    if k {
                        *y = (v - m).exp();
                        s += *y;
                    }
                }
                yr.iter_mut().for_each(|y| *y /= s);
            }
            Tensor::from_parts(a.shape().to_vec(), out)
        }
        Op::Sum => Tensor::scalar(xs[0].data().iter().sum()),
        Op::Mean => Tensor::scalar(xs[0].data().iter().sum::<f64>() / xs[0].len() as f64),
        Op::SumCols => {
            let a = xs[0];
            let out: Vec<f64> = a.data().chunks(a.cols()).map(|r| r.iter().sum()).collect();
            Tensor::from_parts(vec![a.rows(), 1], out)
        }
        Op::Cosine => {
            let (a, b) = (xs[0], xs[1]);
            if a.rows() != b.rows() || a.cols() != b.cols() {
                return Err(format!("cosine of {:?} and {:?}", a.shape(), b.shape()));
            }
            let c = a.cols();
            let out = a
                .data()
                .chunks(c)
                .zip(b.data().chunks(c))
                .map(|(u, v)| {
                    let dot: f64 = u.iter().zip(v).map(|(x, y)| x * y).sum();
                    dot / (norm_eps(u) * norm_eps(v))
                })
                .collect();
            Tensor::from_parts(vec![a.rows(), 1], out)
        }
        Op::Normalize => {
            let a = xs[0];
            let mut out = a.data().to_vec();
            for r in out.chunks_mut(a.cols()) {
                let n = norm_eps(r);
                r.iter_mut().for_each(|x| *x /= n);
            }
            Tensor::from_parts(a.shape().to_vec(), out)
        }
        Op::Nll { targets, weights } => {
            let a = xs[0];
            if targets.len() != a.rows() || weights.len() != a.rows() {
                return Err(format!(
                    "{} targets / {} weights for {} rows",
                    targets.len(),
                    weights.len(),
                    a.rows()
                ));
            }
            let mut s = 0.0;
            for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                if t >= a.cols() {
                    return Err(format!("target {t} out of range for width {}", a.cols()));
                }
                if w != 0.0 {
                    s -= w * a.get(r, t);
                }
            }
            Tensor::scalar(s)
        }
        Op::Gather { ids } => {
            let a = xs[0];
            let mut out = Vec::with_capacity(ids.len() * a.cols());
            for &i in ids {
                if i >= a.rows() {
                    return Err(format!("row {i} out of range for {:?}", a.shape()));
                }
                out.extend_from_slice(a.row_slice(i));
            }
            Tensor::from_parts(vec![ids.len(), a.cols()], out)
        }
        Op::LstmCell => {
            let (z, c) = (xs[0], xs[1]);
            let h = c.cols();
            if z.cols() != 4 * h || z.rows() != c.rows() {
                return Err(format!("gates {:?} for cell {:?}", z.shape(), c.shape()));
            }
            let mut out = vec![0.0; c.rows() * 2 * h];
            for r in 0..c.rows() {
                let zr = z.row_slice(r);
                let cr = c.row_slice(r);
                let o = &mut out[r * 2 * h..(r + 1) * 2 * h];
                for j in 0..h {
                    let i = sigmoid(zr[j]);
                    let f = sigmoid(zr[h + j]);
                    let g = zr[2 * h + j].tanh();
                    let og = sigmoid(zr[3 * h + j]);
                    let cn = f * cr[j] + i * g;
                    o[h + j] = cn;
                    o[j] = og * cn.tanh();
                }
            }
            Tensor::from_parts(vec![c.rows(), 2 * h], out)
        }
        Op::AttnScores => {
            let (q, k, w) = (xs[0], xs[1], xs[2]);
            let (b, a) = (q.rows(), q.cols());
            if k.shape().len() != 3 || k.shape()[1] != b || k.shape()[2] != a || w.len() != a {
                return Err(format!(
                    "query {:?}, keys {:?}, vector {:?}",
                    q.shape(),
                    k.shape(),
                    w.shape()
                ));
            }
            let n = k.shape()[0];
            let mut out = vec![0.0; b * n];
            for t in 0..n {
                for bi in 0..b {
                    let kr = &k.data()[(t * b + bi) * a..(t * b + bi + 1) * a];
                    let qr = q.row_slice(bi);
                    out[bi * n + t] = (0..a).map(|j| w.data()[j] * (qr[j] + kr[j]).tanh()).sum();
                }
            }
            Tensor::from_parts(vec![b, n], out)
        }
        Op::AttnContext => {
            let (wt, v) = (xs[0], xs[1]);
            let (b, n) = (wt.rows(), wt.cols());
            if v.shape().len() != 3 || v.shape()[0] != n || v.shape()[1] != b {
                return Err(format!("weights {:?}, values {:?}", wt.shape(), v.shape()));
            }
            let e = v.shape()[2];
            let mut out = vec![0.0; b * e];
            for t in 0..n {
                for bi in 0..b {
                    let wv = wt.data()[bi * n + t];
                    let vr = &v.data()[(t * b + bi) * e..(t * b + bi + 1) * e];
                    for (o, &x) in out[bi * e..(bi + 1) * e].iter_mut().zip(vr) {
                        *o += wv * x;
                    }
                }
            }
            Tensor::from_parts(vec![b, e], out)
        }
    })
}

fn reduce_into(dst: &mut [f64], g: &[f64], r: usize, c: usize, dr: usize, dc: usize, f: impl Fn(usize, f64) -> f64) {
    if dr == r && dc == c {
        for (k, (d, &gv)) in dst.iter_mut().zip(g).enumerate() {
            *d += f(k, gv);
        }
    } else {
        for i in 0..r {
            for j in 0..c {
                let k = i * c + j;
                dst[bidx(i, j, dr, dc)] += f(k, g[k]);
            }
        }
    }
}

/// Accumulates the input adjoints of one node. `with(i, f)` runs `f` on the
/// adjoint buffer of input `i`, and skips it when that input needs no gradient.
pub(crate) fn vjp(
    op: &Op,
    xs: &[&Tensor],
    out: &Tensor,
    g: &[f64],
    with: &mut dyn FnMut(usize, &mut dyn FnMut(&mut [f64])),
) {
    match op {
        Op::Leaf => {}
        Op::MatMul { trans_b } => {
            let (a, b) = (xs[0], xs[1]);
            let (m, k) = (a.rows(), a.cols());
            let n = out.cols();
            with(0, &mut |da| {
                // dA = G * B^T
                let (rs, cs) = if *trans_b { (k as isize, 1) } else { (1, n as isize) };
                gemm(m, n, k, g, n as isize, 1, b.data(), rs, cs, 1.0, da);
            });
            with(1, &mut |db| {
                if *trans_b {
                    // dB (n x k) = G^T * A
                    gemm(n, m, k, g, 1, n as isize, a.data(), k as isize, 1, 1.0, db);
                } else {
                    // dB (k x n) = A^T * G
                    gemm(k, m, n, a.data(), 1, k as isize, g, n as isize, 1, 1.0, db);
                }
            });
        }
        Op::Transpose => with(0, &mut |da| {
            let (r, c) = (xs[0].rows(), xs[0].cols());
            for i in 0..r {
                for j in 0..c {
                    da[i * c + j] += g[j * r + i];
                }
            }
        }),
        Op::Add | Op::Sub | Op::Mul => {
            let (a, b) = (xs[0], xs[1]);
            let (r, c) = (out.rows(), out.cols());
            let (ra, ca, rb, cb) = (a.rows(), a.cols(), b.rows(), b.cols());
            let (ad, bd) = (a.data(), b.data());
            let mul = matches!(op, Op::Mul);
            with(0, &mut |da| {
                reduce_into(da, g, r, c, ra, ca, |k, gv| {
                    if mul {
                        gv * bd[bidx(k / c, k % c, rb, cb)]
                    } else {
                        gv
                    }
                })
            });
            let sub = matches!(op, Op::Sub);
            with(1, &mut |db| {
                reduce_into(db, g, r, c, rb, cb, |k, gv| {
                    if mul {
                        gv * ad[bidx(k / c, k % c, ra, ca)]
                    } else if sub {
                        -gv
                    } else {
                        gv
                    }
                })
            });
        }
        Op::Scale(s) => with(0, &mut |da| da.iter_mut().zip(g).for_each(|(d, &x)| *d += s * x)),
        Op::AddScalar(_) => with(0, &mut |da| da.iter_mut().zip(g).for_each(|(d, &x)| *d += x)),
        Op::Neg => with(0, &mut |da| da.iter_mut().zip(g).for_each(|(d, &x)| *d -= x)),
        Op::Concat => {
            let total = out.cols();
            let mut off = 0;
            for (i, t) in xs.iter().enumerate() {
                let w = t.cols();
                with(i, &mut |da| {
                    for r in 0..t.rows() {
                        for j in 0..w {
                            da[r * w + j] += g[r * total + off + j];
                        }
                    }
                });
                off += w;
            }
        }
        Op::Slice { start, len } => with(0, &mut |da| {
            let w = xs[0].cols();
            for r in 0..xs[0].rows() {
                for j in 0..*len {
                    da[r * w + start + j] += g[r * len + j];
                }
            }
        }),
        Op::Stack => {
            let n = xs[0].len();
            for i in 0..xs.len() {
                with(i, &mut |da| {
                    da.iter_mut().zip(&g[i * n..(i + 1) * n]).for_each(|(d, &x)| *d += x)
                });
            }
        }
        Op::Select { index } => with(0, &mut |da| {
            let block = g.len();
            da[index * block..(index + 1) * block]
                .iter_mut()
                .zip(g)
                .for_each(|(d, &x)| *d += x);
        }),
        Op::Tanh => with(0, &mut |da| {
            for ((d, &y), &gv) in da.iter_mut().zip(out.data()).zip(g) {
                *d += gv * (1.0 - y * y);
            }
        }),
        Op::Sigmoid => with(0, &mut |da| {
            for ((d, &y), &gv) in da.iter_mut().zip(out.data()).zip(g) {
                *d += gv * y * (1.0 - y);
            }
        }),
        Op::Exp => with(0, &mut |da| {
            for ((d, &y), &gv) in da.iter_mut().zip(out.data()).zip(g) {
                *d += gv * y;
            }
        }),
        Op::Log => with(0, &mut |da| {
            for ((d, &x), &gv) in da.iter_mut().zip(xs[0].data()).zip(g) {
                *d += gv / x;
            }
        }),
        Op::Softmax { temp } => with(0, &mut |da| {
            let c = out.cols();
            for ((dr, pr), gr) in da.chunks_mut(c).zip(out.data().chunks(c)).zip(g.chunks(c)) {
                let dot: f64 = pr.iter().zip(gr).map(|(p, g)| p * g).sum();
                for ((d, &p), &gv) in dr.iter_mut().zip(pr).zip(gr) {
                    *d += p * (gv - dot) / temp;
                }
            }
        }),
        Op::MaskedSoftmax { .. } => with(0, &mut |da| {
            let c = out.cols();
            for ((dr, pr), gr) in da.chunks_mut(c).zip(out.data().chunks(c)).zip(g.chunks(c)) {
                let dot: f64 = pr.iter().zip(gr).map(|(p, g)| p * g).sum();
                for ((d, &p), &gv) in dr.iter_mut().zip(pr).zip(gr) {
                    *d += p * (gv - dot);
                }
            }
        }),
        Op::LogSoftmax { temp } => with(0, &mut |da| {
            let c = out.cols();
            for ((dr, yr), gr) in da.chunks_mut(c).zip(out.data().chunks(c)).zip(g.chunks(c)) {
                let gs: f64 = gr.iter().sum();
                for ((d, &y), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                    *d += (gv - y.exp() * gs) / temp;
                }
            }
        }),
        Op::Sum => with(0, &mut |da| da.iter_mut().for_each(|d| *d += g[0])),
        Op::Mean => {
            let s = g[0] / xs[0].len() as f64;
            with(0, &mut |da| da.iter_mut().for_each(|d| *d += s))
        }
        Op::SumCols => with(0, &mut |da| {
            let c = xs[0].cols();
            for (dr, &gv) in da.chunks_mut(c).zip(g) {
                dr.iter_mut().for_each(|d| *d += gv);
            }
        }),
        Op::Cosine => {
            let (a, b) = (xs[0], xs[1]);
            let c = a.cols();
            for side in 0..2 {
                let (u, v) = if side == 0 { (a, b) } else { (b, a) };
                with(side, &mut |du| {
                    for r in 0..u.rows() {
                        let (ur, vr) = (u.row_slice(r), v.row_slice(r));
                        let (nu, nv) = (norm_eps(ur), norm_eps(vr));
                        let cosv = out.data()[r];
                        for j in 0..c {
                            du[r * c + j] += g[r] * (vr[j] / (nu * nv) - cosv * ur[j] / (nu * nu));
                        }
                    }
                });
            }
        }
        Op::Normalize => with(0, &mut |da| {
            let a = xs[0];
            let c = a.cols();
            for r in 0..a.rows() {
                let ar = a.row_slice(r);
                let gr = &g[r * c..(r + 1) * c];
                let n = norm_eps(ar);
                let ag: f64 = ar.iter().zip(gr).map(|(x, y)| x * y).sum();
                for j in 0..c {
                    da[r * c + j] += gr[j] / n - ar[j] * ag / (n * n * n);
                }
            }
        }),
        Op::Nll { targets, weights } => with(0, &mut |da| {
            let c = xs[0].cols();
            for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                da[r * c + t] -= w * g[0];
            }
        }),
        Op::Gather { ids } => with(0, &mut |da| {
            let c = xs[0].cols();
            for (r, &i) in ids.iter().enumerate() {
                for j in 0..c {
                    da[i * c + j] += g[r * c + j];
                }
            }
        }),
        Op::LstmCell => {
            let (z, c) = (xs[0], xs[1]);
            let h = c.cols();
            let rows = c.rows();
            let mut dz = vec![0.0; z.len()];
            let mut dc = vec![0.0; c.len()];
            for r in 0..rows {
                let zr = z.row_slice(r);
                let cr = c.row_slice(r);
                let o = &out.data()[r * 2 * h..(r + 1) * 2 * h];
                let gr = &g[r * 2 * h..(r + 1) * 2 * h];
                for j in 0..h {
                    let i = sigmoid(zr[j]);
                    let f = sigmoid(zr[h + j]);
                    let gg = zr[2 * h + j].tanh();
                    let og = sigmoid(zr[3 * h + j]);
                    let tc = o[h + j].tanh();
                    let dcn = gr[h + j] + gr[j] * og * (1.0 - tc * tc);
                    let dz_row = &mut dz[r * 4 * h..(r + 1) * 4 * h];
                    dz_row[j] = dcn * gg * i * (1.0 - i);
                    dz_row[h + j] = dcn * cr[j] * f * (1.0 - f);
                    dz_row[2 * h + j] = dcn * i * (1.0 - gg * gg);
                    dz_row[3 * h + j] = gr[j] * tc * og * (1.0 - og);
                    dc[r * h + j] = dcn * f;
                }
            }
            with(0, &mut |d| d.iter_mut().zip(&dz).for_each(|(a, b)| *a += b));
            with(1, &mut |d| d.iter_mut().zip(&dc).for_each(|(a, b)| *a += b));
        }
        Op::AttnScores => {
            let (q, k, w) = (xs[0], xs[1], xs[2]);
            let (b, a) = (q.rows(), q.cols());
            let n = k.shape()[0];
            let mut dq = vec![0.0; q.len()];
            let mut dk = vec![0.0; k.len()];
            let mut dw = vec![0.0; a];
            for t in 0..n {
                for bi in 0..b {
                    let gv = g[bi * n + t];
                    let base = (t * b + bi) * a;
                    for j in 0..a {
                        let th = (q.data()[bi * a + j] + k.data()[base + j]).tanh();
                        let d = gv * w.data()[j] * (1.0 - th * th);
                        dq[bi * a + j] += d;
                        dk[base + j] += d;
                        dw[j] += gv * th;
                    }
                }
            }
            with(0, &mut |d| d.iter_mut().zip(&dq).for_each(|(a, b)| *a += b));
            with(1, &mut |d| d.iter_mut().zip(&dk).for_each(|(a, b)| *a += b));
            with(2, &mut |d| d.iter_mut().zip(&dw).for_each(|(a, b)| *a += b));
        }
        Op::AttnContext => {
            let (wt, v) = (xs[0], xs[1]);
            let (b, n) = (wt.rows(), wt.cols());
            let e = v.shape()[2];
            with(0, &mut |dw| {
                for t in 0..n {
                    for bi in 0..b {
                        let vr = &v.data()[(t * b + bi) * e..(t * b + bi + 1) * e];
                        let gr = &g[bi * e..(bi + 1) * e];
                        dw[bi * n + t] += vr.iter().zip(gr).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            });
            with(1, &mut |dv| {
                for t in 0..n {
                    for bi in 0..b {
                        let wv = wt.data()[bi * n + t];
                        let base = (t * b + bi) * e;
                        for j in 0..e {
                            dv[base + j] += wv * g[bi * e + j];
                        }
                    }
                }
            });
        }
    }
}
