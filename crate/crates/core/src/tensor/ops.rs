use std::rc::Rc;

use super::instrument::record_macs;
use super::{numel_of, Tensor};
use crate::error::{Error, Result};

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// (outer, len, inner) extents around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::Index {
            op,
            index: axis,
            extent: shape.len(),
        });
    }
    Ok(())
}

/// Number of times `rhs` repeats over `lhs` when `rhs` is a trailing suffix
/// of `lhs` (leading-dimension broadcast only).
fn suffix_reps(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<usize> {
    if rhs.len() > lhs.len() || lhs[lhs.len() - rhs.len()..] != *rhs {
        return Err(shape_err(op, lhs, rhs));
    }
    Ok(numel_of(lhs) / numel_of(rhs))
}

fn reduce_reps(g: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for chunk in g.chunks_exact(n) {
        out.iter_mut().zip(chunk).for_each(|(o, c)| *o += c);
    }
    out
}

/// C = op(A)·op(B) (+ beta·C). `a` is logically m×k, `b` is k×n, row-major;
/// the transpose flags describe how they are stored.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover the strided extents asserted above and `c`
    // does not alias `a` or `b`.
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

#[derive(Clone, Copy)]
enum BatchMode {
    /// rhs has no batch dims; lhs batch folded into rows.
    Flat,
    /// Equal batch dims on both sides.
    Paired(usize),
    /// lhs has no batch dims; rhs batched.
    SharedLeft(usize),
}

impl Tensor {
    /// Batched matrix product `[.., m, k] x [.., k, n]`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let n = sb[sb.len() - 1];
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let (mode, batch_shape) = if bb.is_empty() {
            (BatchMode::Flat, ba.to_vec())
        } else if ba == bb {
            (BatchMode::Paired(numel_of(ba)), ba.to_vec())
        } else if ba.is_empty() {
            (BatchMode::SharedLeft(numel_of(bb)), bb.to_vec())
        } else {
            return Err(shape_err("matmul", sa, sb));
        };
        let batch = numel_of(&batch_shape);
        record_macs((batch * m * k * n) as u64);

        let a = self.data_rc();
        let b = rhs.data_rc();
        let mut out = vec![0.0; batch * m * n];
        match mode {
            BatchMode::Flat => gemm(batch * m, k, n, &a, false, &b, false, &mut out, 0.0),
            BatchMode::Paired(nb) | BatchMode::SharedLeft(nb) => {
                let shared = matches!(mode, BatchMode::SharedLeft(_));
                for i in 0..nb {
                    let ai = if shared { &a[..] } else { &a[i * m * k..(i + 1) * m * k] };
                    let bi = &b[i * k * n..(i + 1) * k * n];
                    gemm(m, k, n, ai, false, bi, false, &mut out[i * m * n..(i + 1) * m * n], 0.0);
                }
            }
        }
        let mut shape = batch_shape;
        shape.extend([m, n]);
        Ok(Tensor::from_op(
            out,
            shape,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g, needs| {
                let mut ga = needs[0].then(|| vec![0.0; a.len()]);
                let mut gb = needs[1].then(|| vec![0.0; b.len()]);
                match mode {
                    BatchMode::Flat => {
                        let rows = batch * m;
                        if let Some(ga) = ga.as_mut() {
                            gemm(rows, n, k, g, false, &b, true, ga, 0.0);
                        }
                        if let Some(gb) = gb.as_mut() {
                            gemm(k, rows, n, &a, true, g, false, gb, 0.0);
                        }
                    }
                    BatchMode::Paired(nb) | BatchMode::SharedLeft(nb) => {
                        let shared = matches!(mode, BatchMode::SharedLeft(_));
                        for i in 0..nb {
                            let gi = &g[i * m * n..(i + 1) * m * n];
                            let bi = &b[i * k * n..(i + 1) * k * n];
                            if let Some(ga) = ga.as_mut() {
                                if shared {
                                    gemm(m, n, k, gi, false, bi, true, ga, 1.0);
                                } else {
                                    let slot = &mut ga[i * m * k..(i + 1) * m * k];
                                    gemm(m, n, k, gi, false, bi, true, slot, 0.0);
                                }
                            }
                            if let Some(gb) = gb.as_mut() {
                                let ai = if shared { &a[..] } else { &a[i * m * k..(i + 1) * m * k] };
                                let slot = &mut gb[i * k * n..(i + 1) * k * n];
                                gemm(k, m, n, ai, true, gi, false, slot, 0.0);
                            }
                        }
                    }
                }
                vec![ga, gb]
            }),
        ))
    }

    /// Elementwise sum; `rhs` may be a trailing suffix of `self`'s shape.
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        let reps = suffix_reps("add", self.shape(), rhs.shape())?;
        let nb = rhs.numel();
        let b = rhs.data();
        let out: Vec<f64> = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, a)| a + b[i % nb])
            .collect();
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), rhs.clone()],
            Box::new(move |g, needs| {
                let gb = needs[1].then(|| if reps == 1 { g.to_vec() } else { reduce_reps(g, nb) });
                vec![needs[0].then(|| g.to_vec()), gb]
            }),
        ))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.add(&rhs.neg())
    }

    /// Elementwise product; `rhs` may be a trailing suffix of `self`'s shape
    /// (a rank-0 `rhs` scales every element).
    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        suffix_reps("mul", self.shape(), rhs.shape())?;
        let nb = rhs.numel();
        let (a, b) = (self.data_rc(), rhs.data_rc());
        let out: Vec<f64> = a.iter().enumerate().map(|(i, x)| x * b[i % nb]).collect();
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), rhs.clone()],
            Box::new(move |g, needs| {
                let ga = needs[0].then(|| g.iter().enumerate().map(|(i, gi)| gi * b[i % nb]).collect());
                let gb = needs[1].then(|| {
                    let mut acc = vec![0.0; nb];
                    g.iter().zip(a.iter()).enumerate().for_each(|(i, (gi, ai))| acc[i % nb] += gi * ai);
                    acc
                });
                vec![ga, gb]
            }),
        ))
    }

    fn unary(&self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Tensor {
        let x = self.data_rc();
        let y: Rc<Vec<f64>> = Rc::new(x.iter().map(|&v| f(v)).collect());
        let y_saved = y.clone();
        Tensor::from_op_shared(
            y,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g, _| {
                let gx = g
                    .iter()
                    .zip(x.iter().zip(y_saved.iter()))
                    .map(|(gi, (&xi, &yi))| gi * df(xi, yi))
                    .collect();
                vec![Some(gx)]
            }),
        )
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.unary(move |v| v * c, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary(move |v| v + c, |_, _| 1.0)
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn exp(&self) -> Tensor {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Tensor {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    /// ln(1 + e^x), computed without overflow.
    pub fn softplus(&self) -> Tensor {
        self.unary(
            |x| if x > 0.0 { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() },
            |x, _| sigmoid(x),
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Tensor {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        self.unary(
            |x| 0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh()),
            |x, _| {
                let u = C * (x + 0.044715 * x * x * x);
                let t = u.tanh();
                let du = C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            },
        )
    }

    pub fn sum_all(&self) -> Tensor {
        let n = self.numel();
        let s = self.data().iter().sum();
        Tensor::from_op(
            vec![s],
            vec![],
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        self.sum_all().scale(1.0 / self.numel() as f64)
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        check_axis("sum_axis", self.shape(), axis)?;
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += x[base + i];
                }
            }
        }
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        Ok(Tensor::from_op(
            out,
            shape,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        gx[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        check_axis("mean_axis", self.shape(), axis)?;
        let len = self.shape()[axis] as f64;
        Ok(self.sum_axis(axis)?.scale(1.0 / len))
    }

    /// Softmax along `axis`, stabilised by max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        check_axis("softmax", self.shape(), axis)?;
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| x[idx(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for l in 0..len {
                    let e = (x[idx(l)] - max).exp();
                    y[idx(l)] = e;
                    z += e;
                }
                for l in 0..len {
                    y[idx(l)] /= z;
                }
            }
        }
        let y = Rc::new(y);
        let ys = y.clone();
        Ok(Tensor::from_op_shared(
            y,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + i;
                        let dot: f64 = (0..len).map(|l| g[idx(l)] * ys[idx(l)]).sum();
                        for l in 0..len {
                            gx[idx(l)] = ys[idx(l)] * (g[idx(l)] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Tensor> {
        check_axis("log_softmax", self.shape(), axis)?;
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let lse = logsumexp_slice((0..len).map(|l| x[idx(l)]));
                for l in 0..len {
                    y[idx(l)] = x[idx(l)] - lse;
                }
            }
        }
        let y = Rc::new(y);
        let ys = y.clone();
        Ok(Tensor::from_op_shared(
            y,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + i;
                        let total: f64 = (0..len).map(|l| g[idx(l)]).sum();
                        for l in 0..len {
                            gx[idx(l)] = g[idx(l)] - ys[idx(l)].exp() * total;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// log(sum(exp(x))) along `axis`, removing it. Entries equal to -inf
    /// are treated as absent.
    pub fn logsumexp(&self, axis: usize) -> Result<Tensor> {
        check_axis("logsumexp", self.shape(), axis)?;
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let x = self.data_rc();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                out[o * inner + i] = logsumexp_slice((0..len).map(|l| x[(o * len + l) * inner + i]));
            }
        }
        let out = Rc::new(out);
        let saved = out.clone();
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        Ok(Tensor::from_op_shared(
            out,
            shape,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; x.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let lse = saved[o * inner + i];
                        let go = g[o * inner + i];
                        for l in 0..len {
                            let j = (o * len + l) * inner + i;
                            gx[j] = go * (x[j] - lse).exp();
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Normalises over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        let d = *self.shape().last().ok_or_else(|| shape_err("layer_norm", self.shape(), &[]))?;
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(shape_err("layer_norm", self.shape(), gain.shape()));
        }
        let rows = self.numel() / d;
        let x = self.data();
        let gv = gain.data_rc();
        let bv = bias.data();
        let mut xhat = vec![0.0; x.len()];
        let mut rstd = vec![0.0; rows];
        let mut y = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                y[r * d + c] = h * gv[c] + bv[c];
            }
        }
        Ok(Tensor::from_op(
            y,
            self.shape().to_vec(),
            vec![self.clone(), gain.clone(), bias.clone()],
            Box::new(move |g, needs| {
                let mut gx = needs[0].then(|| vec![0.0; xhat.len()]);
                let mut gg = needs[1].then(|| vec![0.0; d]);
                let mut gb = needs[2].then(|| vec![0.0; d]);
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    if let Some(gg) = gg.as_mut() {
                        for c in 0..d {
                            gg[c] += gr[c] * hr[c];
                        }
                    }
                    if let Some(gb) = gb.as_mut() {
                        for c in 0..d {
                            gb[c] += gr[c];
                        }
                    }
                    if let Some(gx) = gx.as_mut() {
                        let dh: Vec<f64> = (0..d).map(|c| gr[c] * gv[c]).collect();
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for c in 0..d {
                            gx[r * d + c] = rstd[r] * (dh[c] - mean_dh - hr[c] * mean_dh_h);
                        }
                    }
                }
                vec![gx, gg, gb]
            }),
        ))
    }

    /// Scales each row along the last axis to unit Euclidean length.
    pub fn l2_normalize(&self) -> Result<Tensor> {
        let d = *self.shape().last().ok_or_else(|| shape_err("l2_normalize", self.shape(), &[]))?;
        let rows = self.numel() / d;
        let x = self.data();
        let mut norms = vec![0.0; rows];
        let mut y = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms[r] = norm;
            for c in 0..d {
                y[r * d + c] = row[c] / norm;
            }
        }
        let y = Rc::new(y);
        let ys = y.clone();
        Ok(Tensor::from_op_shared(
            y,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; g.len()];
                for r in 0..rows {
                    let yr = &ys[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..d {
                        gx[r * d + c] = (gr[c] - yr[c] * dot) / norms[r];
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != self.numel() || shape.iter().any(|&s| s == 0) {
            return Err(shape_err("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op_shared(
            self.data_rc(),
            shape.to_vec(),
            vec![self.clone()],
            Box::new(|g, _| vec![Some(g.to_vec())]),
        ))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let shape = self.shape();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(shape_err("permute", shape, axes));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let map = permute_index_map(shape, axes);
        let x = self.data();
        let out: Vec<f64> = map.iter().map(|&src| x[src]).collect();
        Ok(Tensor::from_op(
            out,
            out_shape,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; g.len()];
                for (dst, &src) in map.iter().enumerate() {
                    gx[src] = g[dst];
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor> {
        let mut axes: Vec<usize> = (0..self.rank()).collect();
        if a >= axes.len() || b >= axes.len() {
            return Err(shape_err("transpose", self.shape(), &[a, b]));
        }
        axes.swap(a, b);
        self.permute(&axes)
    }

    /// Gathers `indices` along `axis`; repeated indices are allowed.
    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Result<Tensor> {
        check_axis("index_select", self.shape(), axis)?;
        let (outer, len, inner) = split_axis(self.shape(), axis);
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return Err(Error::Index {
                op: "index_select",
                index: bad,
                extent: len,
            });
        }
        if indices.is_empty() {
            return Err(shape_err("index_select", self.shape(), &[]));
        }
        let x = self.data();
        let k = indices.len();
        let mut out = Vec::with_capacity(outer * k * inner);
        for o in 0..outer {
            for &i in indices {
                let base = (o * len + i) * inner;
                out.extend_from_slice(&x[base..base + inner]);
            }
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = k;
        let idx = indices.to_vec();
        Ok(Tensor::from_op(
            out,
            shape,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for (j, &i) in idx.iter().enumerate() {
                        let src = (o * k + j) * inner;
                        let dst = (o * len + i) * inner;
                        for c in 0..inner {
                            gx[dst + c] += g[src + c];
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn logsumexp_slice(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// For each output position (row-major over the permuted shape), the flat
/// source index in the input.
fn permute_index_map(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = numel_of(shape);
    let mut map = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..n {
        map.push(src);
        for d in (0..rank).rev() {
            counter[d] += 1;
            src += strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            src -= strides[d] * out_shape[d];
            counter[d] = 0;
        }
    }
    map
}

/// Concatenates tensors along `axis`; all other extents must agree.
pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| shape_err("concat", &[], &[]))?;
    check_axis("concat", first.shape(), axis)?;
    for p in &parts[1..] {
        let ok = p.rank() == first.rank()
            && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(shape_err("concat", first.shape(), p.shape()));
        }
    }
    let (outer, _, inner) = split_axis(first.shape(), axis);
    let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
    let total: usize = lens.iter().sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (p, &l) in parts.iter().zip(&lens) {
            out.extend_from_slice(&p.data()[o * l * inner..(o + 1) * l * inner]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    let lens_saved = lens.clone();
    Ok(Tensor::from_op(
        out,
        shape,
        parts.to_vec(),
        Box::new(move |g, needs| {
            let mut grads: Vec<Option<Vec<f64>>> = lens_saved
                .iter()
                .zip(needs)
                .map(|(&l, &need)| need.then(|| Vec::with_capacity(outer * l * inner)))
                .collect();
            let mut offset = 0;
            for _ in 0..outer {
                for (slot, &l) in grads.iter_mut().zip(&lens_saved) {
                    if let Some(buf) = slot.as_mut() {
                        buf.extend_from_slice(&g[offset..offset + l * inner]);
                    }
                    offset += l * inner;
                }
            }
            grads
        }),
    ))
}

/// Rows of `table` (`[vocab, d]`) selected by `ids`, as `[ids.len(), d]`.
pub fn embedding_lookup(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    if table.rank() != 2 {
        return Err(shape_err("embedding_lookup", table.shape(), &[]));
    }
    table.index_select(0, ids).map_err(|e| match e {
        Error::Index { index, extent, .. } => Error::Index {
            op: "embedding_lookup",
            index,
            extent,
        },
        other => other,
    })
}
