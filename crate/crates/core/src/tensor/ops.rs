//! Differentiable ops on [`Var`].
//!
//! Every op computes its output eagerly and records a backward closure that
//! captures the values it needs. Reductions and contractions always run in a
//! fixed index order so results are bit-reproducible.

use std::rc::Rc;

use super::{strides, Tensor, Var};
use crate::error::{contract_err, dim_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Max,
    Mean,
}

/// `(outer, len, inner)` split of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(shape: &[usize], axis: usize, op: &str) -> Result<()> {
    if axis >= shape.len() {
        return dim_err(format!("{op}: axis {axis} invalid for shape {shape:?}"));
    }
    Ok(())
}

/// `out[M,P] += a[M,K] * b[K,P]`.
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let orow = &mut out[i * p..(i + 1) * p];
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * p..(kk + 1) * p];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[M,K] += g[M,P] * b[K,P]^T`.
fn gemm_acc_bt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let grow = &g[i * p..(i + 1) * p];
        let orow = &mut out[i * k..(i + 1) * k];
        for (kk, o) in orow.iter_mut().enumerate() {
            let brow = &b[kk * p..(kk + 1) * p];
            let mut s = 0.0;
            for (x, y) in grow.iter().zip(brow) {
                s += x * y;
            }
            *o += s;
        }
    }
}

/// `out[K,P] += a[M,K]^T * g[M,P]`.
fn gemm_acc_at(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * p..(i + 1) * p];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[kk * p..(kk + 1) * p];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

impl<'t> Var<'t> {
    fn unary(
        self,
        out: Tensor,
        backward: impl Fn(&[f64]) -> Vec<f64> + 'static,
    ) -> Var<'t> {
        self.tape
            .custom(&[self], out, move |g, _| vec![Some(backward(g))])
    }

    fn same_shape(self, other: Var<'t>, op: &str) -> Result<(Rc<Tensor>, Rc<Tensor>)> {
        if !std::ptr::eq(self.tape, other.tape) {
            return contract_err(format!("{op}: operands live on different tapes"));
        }
        let a = self.value();
        let b = other.value();
        if a.shape() != b.shape() {
            return dim_err(format!("{op}: shapes {:?} and {:?} differ", a.shape(), b.shape()));
        }
        Ok((a, b))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.same_shape(other, "add")?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_parts(a.shape().to_vec(), data);
        Ok(self.tape.custom(&[self, other], out, |g, need| {
            vec![need[0].then(|| g.to_vec()), need[1].then(|| g.to_vec())]
        }))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.same_shape(other, "sub")?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::from_parts(a.shape().to_vec(), data);
        Ok(self.tape.custom(&[self, other], out, |g, need| {
            vec![
                need[0].then(|| g.to_vec()),
                need[1].then(|| g.iter().map(|v| -v).collect()),
            ]
        }))
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.same_shape(other, "mul")?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_parts(a.shape().to_vec(), data);
        Ok(self.tape.custom(&[self, other], out, move |g, need| {
            vec![
                need[0].then(|| g.iter().zip(b.data()).map(|(g, y)| g * y).collect()),
                need[1].then(|| g.iter().zip(a.data()).map(|(g, x)| g * x).collect()),
            ]
        }))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let a = self.value();
        let out = Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|x| x * c).collect());
        self.unary(out, move |g| g.iter().map(|v| v * c).collect())
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let a = self.value();
        let out = Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|x| x + c).collect());
        self.unary(out, |g| g.to_vec())
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn relu(self) -> Var<'t> {
        let a = self.value();
        let out = Tensor::from_parts(
            a.shape().to_vec(),
            a.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect(),
        );
        self.unary(out, move |g| {
            g.iter()
                .zip(a.data())
                .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                .collect()
        })
    }

    /// Elementwise absolute value; the subgradient at 0 is 0.
    pub fn abs(self) -> Var<'t> {
        let a = self.value();
        let out = Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|x| x.abs()).collect());
        self.unary(out, move |g| {
            g.iter()
                .zip(a.data())
                .map(|(&g, &x)| if x > 0.0 { g } else if x < 0.0 { -g } else { 0.0 })
                .collect()
        })
    }

    /// Adds a bias vector along the last axis: `x[..., C] + b[C]`.
    pub fn add_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        let x = self.value();
        let b = bias.value();
        let c = *x.shape().last().unwrap_or(&1);
        if b.shape() != [c] {
            return dim_err(format!(
                "add_bias: bias {:?} does not match last axis of {:?}",
                b.shape(),
                x.shape()
            ));
        }
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(c.max(1)) {
            row.iter_mut().zip(b.data()).for_each(|(v, bv)| *v += bv);
        }
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        Ok(self.tape.custom(&[self, bias], out, move |g, need| {
            let gb = need[1].then(|| {
                let mut acc = vec![0.0; c];
                for row in g.chunks(c.max(1)) {
                    acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                }
                acc
            });
            vec![need[0].then(|| g.to_vec()), gb]
        }))
    }

    /// Batched matrix product `[.., M, K] x [.., K, P] -> [.., M, P]`.
    ///
    /// Leading batch dimensions broadcast with the usual rules (equal extents
    /// or one of them is 1; missing leading dimensions count as 1).
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        if !std::ptr::eq(self.tape, other.tape) {
            return contract_err("matmul: operands live on different tapes");
        }
        let a = self.value();
        let b = other.value();
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return dim_err(format!("matmul needs rank >= 2, got {sa:?} x {sb:?}"));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, p) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return dim_err(format!("matmul: inner dimensions differ in {sa:?} x {sb:?}"));
        }
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        let rank = ba.len().max(bb.len());
        let pad = |s: &[usize]| {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(ba), pad(bb));
        let mut batch = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            if x == y || y == 1 {
                batch.push(x);
            } else if x == 1 {
                batch.push(y);
            } else {
                return dim_err(format!("matmul: batch dims of {sa:?} and {sb:?} do not broadcast"));
            }
        }
        let nb: usize = batch.iter().product();
        let bstr = strides(&batch);
        let (astr, bstr_in) = (strides(&pa), strides(&pb));
        let mut a_off = Vec::with_capacity(nb);
        let mut b_off = Vec::with_capacity(nb);
        for lin in 0..nb {
            let (mut oa, mut ob) = (0, 0);
            for d in 0..rank {
                let idx = (lin / bstr[d]) % batch[d];
                if pa[d] != 1 {
                    oa += idx * astr[d];
                }
                if pb[d] != 1 {
                    ob += idx * bstr_in[d];
                }
            }
            a_off.push(oa * m * k);
            b_off.push(ob * k * p);
        }
        let mut out = vec![0.0; nb * m * p];
        for bi in 0..nb {
            gemm_acc(
                &a.data()[a_off[bi]..a_off[bi] + m * k],
                &b.data()[b_off[bi]..b_off[bi] + k * p],
                &mut out[bi * m * p..(bi + 1) * m * p],
                m,
                k,
                p,
            );
        }
        let mut shape = batch;
        shape.extend([m, p]);
        let out = Tensor::from_parts(shape, out);
        Ok(self.tape.custom(&[self, other], out, move |g, need| {
            let ga = need[0].then(|| {
                let mut ga = vec![0.0; a.len()];
                for bi in 0..nb {
                    gemm_acc_bt(
                        &g[bi * m * p..(bi + 1) * m * p],
                        &b.data()[b_off[bi]..b_off[bi] + k * p],
                        &mut ga[a_off[bi]..a_off[bi] + m * k],
                        m,
                        k,
                        p,
                    );
                }
                ga
            });
            let gb = need[1].then(|| {
                let mut gb = vec![0.0; b.len()];
                for bi in 0..nb {
                    gemm_acc_at(
                        &a.data()[a_off[bi]..a_off[bi] + m * k],
                        &g[bi * m * p..(bi + 1) * m * p],
                        &mut gb[b_off[bi]..b_off[bi] + k * p],
                        m,
                        k,
                        p,
                    );
                }
                gb
            });
            vec![ga, gb]
        }))
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        check_axis(x.shape(), axis, "softmax")?;
        let (outer, len, inner) = split_axis(x.shape(), axis);
        if len == 0 {
            return dim_err("softmax over an empty axis");
        }
        let mut y = vec![0.0; x.len()];
        let xd = x.data();
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let mx = (0..len).map(|a| xd[at(a)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for a in 0..len {
                    let e = (xd[at(a)] - mx).exp();
                    y[at(a)] = e;
                    s += e;
                }
                for a in 0..len {
                    y[at(a)] /= s;
                }
            }
        }
        let out = Tensor::from_parts(x.shape().to_vec(), y);
        let yv = Rc::new(out.data().to_vec());
        Ok(self.unary(out, move |g| {
            let mut gx = vec![0.0; g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |a: usize| (o * len + a) * inner + i;
                    let dot: f64 = (0..len).map(|a| g[at(a)] * yv[at(a)]).sum();
                    for a in 0..len {
                        gx[at(a)] = yv[at(a)] * (g[at(a)] - dot);
                    }
                }
            }
            gx
        }))
    }

    /// Reduces `axis` away. Max routes its gradient to the first maximal index.
    pub fn reduce(self, axis: usize, kind: ReduceKind) -> Result<Var<'t>> {
        let x = self.value();
        check_axis(x.shape(), axis, "reduce")?;
        let (outer, len, inner) = split_axis(x.shape(), axis);
        if len == 0 {
            return dim_err("reduction over an empty axis");
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        let xd = x.data();
        let mut out = vec![0.0; outer * inner];
        match kind {
            ReduceKind::Sum | ReduceKind::Mean => {
                for o in 0..outer {
                    for a in 0..len {
                        let src = &xd[(o * len + a) * inner..(o * len + a + 1) * inner];
                        out[o * inner..(o + 1) * inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, s)| *d += s);
                    }
                }
                let scale = if kind == ReduceKind::Mean { 1.0 / len as f64 } else { 1.0 };
                if kind == ReduceKind::Mean {
                    out.iter_mut().for_each(|v| *v *= scale);
                }
                let t = Tensor::from_parts(shape, out);
                Ok(self.unary(t, move |g| {
                    let mut gx = vec![0.0; outer * len * inner];
                    for o in 0..outer {
                        for a in 0..len {
                            gx[(o * len + a) * inner..(o * len + a + 1) * inner]
                                .iter_mut()
                                .zip(&g[o * inner..(o + 1) * inner])
                                .for_each(|(d, s)| *d = s * scale);
                        }
                    }
                    gx
                }))
            }
            ReduceKind::Max => {
                let mut arg = vec![0usize; outer * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut best = xd[o * len * inner + i];
                        let mut bi = 0;
                        for a in 1..len {
                            let v = xd[(o * len + a) * inner + i];
                            if v > best {
                                best = v;
                                bi = a;
                            }
                        }
                        out[o * inner + i] = best;
                        arg[o * inner + i] = bi;
                    }
                }
                let t = Tensor::from_parts(shape, out);
                Ok(self.unary(t, move |g| {
                    let mut gx = vec![0.0; outer * len * inner];
                    for o in 0..outer {
                        for i in 0..inner {
                            gx[(o * len + arg[o * inner + i]) * inner + i] = g[o * inner + i];
                        }
                    }
                    gx
                }))
            }
        }
    }

    pub fn sum(self, axis: usize) -> Result<Var<'t>> {
        self.reduce(axis, ReduceKind::Sum)
    }

    pub fn max(self, axis: usize) -> Result<Var<'t>> {
        self.reduce(axis, ReduceKind::Max)
    }

    pub fn mean(self, axis: usize) -> Result<Var<'t>> {
        self.reduce(axis, ReduceKind::Mean)
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(self) -> Var<'t> {
        let x = self.value();
        let n = x.len();
        let out = Tensor::scalar(x.data().iter().sum());
        self.unary(out, move |g| vec![g[0]; n])
    }

    pub fn mean_all(self) -> Var<'t> {
        let n = self.value().len().max(1);
        self.sum_all().scale(1.0 / n as f64)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let out = x.reshaped(shape)?;
        Ok(self.unary(out, |g| g.to_vec()))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(self, axes: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let s = x.shape();
        let mut seen = vec![false; s.len()];
        if axes.len() != s.len() || axes.iter().any(|&a| a >= s.len() || std::mem::replace(&mut seen[a], true)) {
            return dim_err(format!("permute: {axes:?} is not a permutation of rank {}", s.len()));
        }
        let in_str = strides(s);
        let out_shape: Vec<usize> = axes.iter().map(|&a| s[a]).collect();
        let out_str = strides(&out_shape);
        let src: Vec<usize> = (0..x.len())
            .map(|lin| {
                axes.iter()
                    .enumerate()
                    .map(|(d, &a)| ((lin / out_str[d]) % out_shape[d]) * in_str[a])
                    .sum()
            })
            .collect();
        let data = src.iter().map(|&i| x.data()[i]).collect();
        let out = Tensor::from_parts(out_shape, data);
        Ok(self.unary(out, move |g| {
            let mut gx = vec![0.0; g.len()];
            for (lin, &i) in src.iter().enumerate() {
                gx[i] = g[lin];
            }
            gx
        }))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let Some(first) = parts.first() else {
            return contract_err("concat of zero tensors");
        };
        let tape = first.tape;
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|v| v.value()).collect();
        let s0 = vals[0].shape().to_vec();
        check_axis(&s0, axis, "concat")?;
        for v in &vals {
            let s = v.shape();
            if s.len() != s0.len() || s.iter().zip(&s0).enumerate().any(|(d, (a, b))| d != axis && a != b) {
                return dim_err(format!("concat: {:?} incompatible with {:?} on axis {axis}", s, s0));
            }
        }
        let outer: usize = s0[..axis].iter().product();
        let inner: usize = s0[axis + 1..].iter().product();
        let widths: Vec<usize> = vals.iter().map(|v| v.shape()[axis] * inner).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (v, &w) in vals.iter().zip(&widths) {
                data.extend_from_slice(&v.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = s0;
        shape[axis] = total / inner.max(1);
        if inner == 0 {
            shape[axis] = vals.iter().map(|v| v.shape()[axis]).sum();
        }
        let out = Tensor::from_parts(shape, data);
        Ok(tape.custom(parts, out, move |g, need| {
            let mut offset = 0;
            let mut res = Vec::with_capacity(widths.len());
            for (pi, &w) in widths.iter().enumerate() {
                if need[pi] {
                    let mut gp = Vec::with_capacity(outer * w);
                    for o in 0..outer {
                        let base = o * total + offset;
                        gp.extend_from_slice(&g[base..base + w]);
                    }
                    res.push(Some(gp));
                } else {
                    res.push(None);
                }
                offset += w;
            }
            res
        }))
    }

    /// Selects rows along axis 0: `[N, ...] -> [idx.len(), ...]`.
    pub fn index_select(self, idx: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let s = x.shape();
        if s.is_empty() {
            return dim_err("index_select on a scalar");
        }
        let n = s[0];
        let w: usize = s[1..].iter().product();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return contract_err(format!("index {bad} out of range for {n} rows"));
        }
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            data.extend_from_slice(&x.data()[i * w..(i + 1) * w]);
        }
        let mut shape = s.to_vec();
        shape[0] = idx.len();
        let out = Tensor::from_parts(shape, data);
        let idx = idx.to_vec();
        let len = x.len();
        Ok(self.unary(out, move |g| {
            let mut gx = vec![0.0; len];
            for (r, &i) in idx.iter().enumerate() {
                gx[i * w..(i + 1) * w]
                    .iter_mut()
                    .zip(&g[r * w..(r + 1) * w])
                    .for_each(|(d, s)| *d += s);
            }
            gx
        }))
    }

    /// Inserts a new axis of extent `n` at `axis`, repeating the input.
    pub fn expand(self, axis: usize, n: usize) -> Result<Var<'t>> {
        let x = self.value();
        let s = x.shape();
        if axis > s.len() {
            return dim_err(format!("expand: axis {axis} invalid for shape {s:?}"));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis..].iter().product();
        let mut data = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            let src = &x.data()[o * inner..(o + 1) * inner];
            for _ in 0..n {
                data.extend_from_slice(src);
            }
        }
        let mut shape = s.to_vec();
        shape.insert(axis, n);
        let out = Tensor::from_parts(shape, data);
        Ok(self.unary(out, move |g| {
            let mut gx = vec![0.0; outer * inner];
            for o in 0..outer {
                let dst = &mut gx[o * inner..(o + 1) * inner];
                for r in 0..n {
                    let base = (o * n + r) * inner;
                    dst.iter_mut().zip(&g[base..base + inner]).for_each(|(d, s)| *d += s);
                }
            }
            gx
        }))
    }

    /// Repeats the last axis `reps` times: `[.., C] -> [.., reps*C]`,
    /// output channel `t*C + c` copies input channel `c`.
    pub fn tile_last(self, reps: usize) -> Result<Var<'t>> {
        let x = self.value();
        let s = x.shape();
        let Some(&c) = s.last() else {
            return dim_err("tile_last on a scalar");
        };
        let rows = x.len() / c.max(1);
        let mut data = Vec::with_capacity(x.len() * reps);
        for r in 0..rows {
            let src = &x.data()[r * c..(r + 1) * c];
            for _ in 0..reps {
                data.extend_from_slice(src);
            }
        }
        let mut shape = s.to_vec();
        *shape.last_mut().unwrap() = c * reps;
        let out = Tensor::from_parts(shape, data);
        Ok(self.unary(out, move |g| {
            let mut gx = vec![0.0; rows * c];
            for r in 0..rows {
                for t in 0..reps {
                    let base = (r * reps + t) * c;
                    gx[r * c..(r + 1) * c]
                        .iter_mut()
                        .zip(&g[base..base + c])
                        .for_each(|(d, s)| *d += s);
                }
            }
            gx
        }))
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(self, eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        let Some(&c) = x.shape().last() else {
            return dim_err("layer_norm on a scalar");
        };
        if c == 0 {
            return dim_err("layer_norm over an empty axis");
        }
        let rows = x.len() / c;
        let mut y = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &x.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (d, v) in y[r * c..(r + 1) * c].iter_mut().zip(row) {
                *d = (v - mean) * is;
            }
        }
        let out = Tensor::from_parts(x.shape().to_vec(), y);
        let yv = out.data().to_vec();
        Ok(self.unary(out, move |g| {
            let mut gx = vec![0.0; g.len()];
            for r in 0..rows {
                let gr = &g[r * c..(r + 1) * c];
                let yr = &yv[r * c..(r + 1) * c];
                let mg = gr.iter().sum::<f64>() / c as f64;
                let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                for ((d, &gi), &yi) in gx[r * c..(r + 1) * c].iter_mut().zip(gr).zip(yr) {
                    *d = inv_std[r] * (gi - mg - yi * mgy);
                }
            }
            gx
        }))
    }

    /// Scales each last-axis vector to unit Euclidean length.
    pub fn l2_normalize(self) -> Result<Var<'t>> {
        const FLOOR: f64 = 1e-12;
        let x = self.value();
        let Some(&c) = x.shape().last() else {
            return dim_err("l2_normalize on a scalar");
        };
        let rows = x.len() / c.max(1);
        let mut y = vec![0.0; x.len()];
        let mut norms = vec![0.0; rows];
        for r in 0..rows {
            let row = &x.data()[r * c..(r + 1) * c];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(FLOOR);
            norms[r] = n;
            for (d, v) in y[r * c..(r + 1) * c].iter_mut().zip(row) {
                *d = v / n;
            }
        }
        let out = Tensor::from_parts(x.shape().to_vec(), y);
        let yv = out.data().to_vec();
        Ok(self.unary(out, move |g| {
            let mut gx = vec![0.0; g.len()];
            for r in 0..rows {
                let gr = &g[r * c..(r + 1) * c];
                let yr = &yv[r * c..(r + 1) * c];
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for ((d, &gi), &yi) in gx[r * c..(r + 1) * c].iter_mut().zip(gr).zip(yr) {
                    *d = (gi - yi * dot) / norms[r];
                }
            }
            gx
        }))
    }

    /// Mean softmax cross-entropy of `[B, C]` logits against class labels.
    pub fn cross_entropy(self, labels: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return dim_err(format!(
                "cross_entropy: logits {s:?} vs {} labels",
                labels.len()
            ));
        }
        let (b, c) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return contract_err(format!("label {bad} out of range for {c} classes"));
        }
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for r in 0..b {
            let row = &x.data()[r * c..(r + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let lse = mx + s.ln();
            loss += lse - row[labels[r]];
            for (p, v) in probs[r * c..(r + 1) * c].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        let inv_b = 1.0 / b.max(1) as f64;
        let out = Tensor::scalar(loss * inv_b);
        if !out.all_finite() {
            return Err(Error::Numeric("cross_entropy produced a non-finite loss".into()));
        }
        let labels = labels.to_vec();
        Ok(self.unary(out, move |g| {
            let mut gx = probs.clone();
            for (r, &l) in labels.iter().enumerate() {
                gx[r * c + l] -= 1.0;
            }
            gx.iter_mut().for_each(|v| *v *= g[0] * inv_b);
            gx
        }))
    }

    /// Fails with a numeric error if the value holds NaN or infinity.
    pub fn check_finite(self, what: &str) -> Result<Var<'t>> {
        let v = self.value();
        if let Some(pos) = v.data().iter().position(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("{what}: non-finite value at flat index {pos}")));
        }
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::super::{Rng, Tape};
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    fn triple_loop(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let p = b.shape()[1];
        let mut out = vec![0.0; m * p];
        for i in 0..m {
            for j in 0..p {
                let mut s = 0.0;
                for kk in 0..k {
                    s += a.at(&[i, kk]) * b.at(&[kk, j]);
                }
                out[i * p + j] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_identity() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        assert_eq!(a.matmul(b).unwrap().value().data(), &[3.0, 4.0]);
    }

    #[test]
    fn matmul_row_times_column() {
        let tape = Tape::new();
        let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        assert_eq!(a.matmul(b).unwrap().value().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(42);
        for (m, k, p) in [(4, 3, 2), (8, 8, 8), (1, 7, 5), (5, 1, 3)] {
            let a = Tensor::uniform(&[m, k], 1.0, &mut rng);
            let b = Tensor::uniform(&[k, p], 1.0, &mut rng);
            let tape = Tape::new();
            let c = tape.constant(a.clone()).matmul(tape.constant(b.clone())).unwrap();
            let oracle = triple_loop(&a, &b);
            for (x, y) in c.value().data().iter().zip(&oracle) {
                assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = a.matmul(b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn matmul_broadcasts_batch() {
        let mut rng = Rng::new(1);
        let a = Tensor::uniform(&[3, 2, 4], 1.0, &mut rng);
        let b = Tensor::uniform(&[4, 5], 1.0, &mut rng);
        let tape = Tape::new();
        let c = tape.constant(a.clone()).matmul(tape.constant(b.clone())).unwrap();
        assert_eq!(c.shape(), vec![3, 2, 5]);
        for bi in 0..3 {
            let ai = Tensor::new(&[2, 4], a.data()[bi * 8..(bi + 1) * 8].to_vec()).unwrap();
            let oracle = triple_loop(&ai, &b);
            for (x, y) in c.value().data()[bi * 10..(bi + 1) * 10].iter().zip(&oracle) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        let bad = tape.constant(Tensor::zeros(&[2, 4, 5]));
        assert!(tape.constant(a).matmul(bad).is_err());
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[4]));
        assert_eq!(x.softmax(0).unwrap().value().data(), &[0.25; 4]);
        let y = tape.constant(t(&[2], &[1000.0, 1000.0]));
        assert_eq!(y.softmax(0).unwrap().value().data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_matches_direct_evaluation() {
        let tape = Tape::new();
        let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let y = x.softmax(0).unwrap().value();
        // Reference values from exp(k)/(e + e^2 + e^3) evaluated in 50-digit arithmetic.
        let expect = [
            0.090_030_573_170_380_46,
            0.244_728_471_054_797_64,
            0.665_240_955_774_821_9,
        ];
        for (a, b) in y.data().iter().zip(expect) {
            assert!((a - b).abs() / b <= 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn softmax_empty_axis_errors() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 0]));
        assert!(x.softmax(1).is_err());
        assert!(x.softmax(2).is_err());
    }

    #[test]
    fn reductions() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[1.0, 5.0, 2.0, 2.0]));
        assert_eq!(x.max(1).unwrap().value().data(), &[5.0, 2.0]);
        let z = tape.constant(Tensor::zeros(&[3, 2]));
        assert_eq!(z.sum_all().value().item(), 0.0);
        let m = tape.constant(t(&[4], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(m.mean(0).unwrap().value().data(), &[2.5]);
        let e = tape.constant(Tensor::zeros(&[0, 2]));
        assert!(e.sum(0).is_err());
    }

    #[test]
    fn max_grad_goes_to_first_tie() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[2.0, 2.0, 1.0]));
        let y = x.max(0).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_sum_and_square() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 0.5]));
        let g = tape.backward(x.sum_all()).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0; 3]);

        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 0.5]));
        let sq = x.mul(x).unwrap().sum_all();
        let g = tape.backward(sq).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn permute_and_concat_shapes() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]));
        let p = x.permute(&[1, 0]).unwrap();
        assert_eq!(p.value().data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        let c = Var::concat(&[x, x], 1).unwrap();
        assert_eq!(c.shape(), vec![2, 6]);
        assert_eq!(c.value().row(1), &[3.0, 4.0, 5.0, 3.0, 4.0, 5.0]);
        assert!(x.permute(&[0, 0]).is_err());
    }

    #[test]
    fn expand_and_tile() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let e = x.expand(1, 3).unwrap();
        assert_eq!(e.shape(), vec![2, 3, 2]);
        assert_eq!(e.value().row(1), &[3.0, 4.0, 3.0, 4.0, 3.0, 4.0]);
        let tl = x.tile_last(2).unwrap();
        assert_eq!(tl.value().row(0), &[1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn index_select_bounds() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(x.index_select(&[0, 3]).is_err());
        assert_eq!(x.index_select(&[2, 2, 0]).unwrap().shape(), vec![3, 2]);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 4]));
        let l = x.cross_entropy(&[0, 3]).unwrap();
        assert!((l.value().item() - 4f64.ln()).abs() < 1e-15);
        assert!(x.cross_entropy(&[4, 0]).is_err());
    }
}
