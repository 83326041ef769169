//! Differentiable primitives. Sequence tensors are channels-last:
//! `(batch, time, channels)`.

use rand::Rng;

use super::tape::{Tape, Var};
use super::tensor::{gemm, Real, Tensor};
use super::DiffError;

type R = Result<Var, DiffError>;

fn mismatch(layer: &str, expected: &[usize], got: &[usize]) -> DiffError {
    DiffError::ShapeMismatch {
        layer: layer.to_string(),
        expected: expected.to_vec(),
        got: got.to_vec(),
    }
}

fn col_sums<T: Real>(g: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); cols];
    for r in 0..rows {
        for (o, &v) in out.iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
            *o += v;
        }
    }
    out
}

/// `x @ w + b` applied over the trailing axis. `w` is `(in, out)`.
pub fn linear<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, b: Option<Var>) -> R {
    let xs = tape.shape(x).to_vec();
    let ws = tape.shape(w).to_vec();
    if ws.len() != 2 || xs.last() != Some(&ws[0]) {
        return Err(mismatch("linear", &[ws.first().copied().unwrap_or(0)], &xs));
    }
    let (k, n) = (ws[0], ws[1]);
    if let Some(b) = b {
        if tape.shape(b) != [n] {
            return Err(mismatch("linear.bias", &[n], tape.shape(b)));
        }
    }
    let rows = tape.value(x).len() / k;
    let mut out = vec![T::zero(); rows * n];
    gemm(
        rows,
        k,
        n,
        tape.value(x).data(),
        false,
        tape.value(w).data(),
        false,
        &mut out,
        false,
    );
    if let Some(b) = b {
        let bd = tape.value(b).data();
        for r in 0..rows {
            for (o, &bv) in out[r * n..(r + 1) * n].iter_mut().zip(bd) {
                *o += bv;
            }
        }
    }
    let mut oshape = xs.clone();
    *oshape.last_mut().unwrap() = n;
    let mut inputs = vec![x, w];
    if let Some(b) = b {
        inputs.push(b);
    }
    let has_bias = b.is_some();
    Ok(tape.push_op(
        Tensor::new(&oshape, out),
        &inputs,
        Box::new(move |c| {
            let g = c.grad.data();
            let xv = c.inputs[0];
            let wv = c.inputs[1];
            let mut dx = vec![T::zero(); rows * k];
            gemm(rows, n, k, g, false, wv.data(), true, &mut dx, false);
            let mut dw = vec![T::zero(); k * n];
            gemm(k, rows, n, xv.data(), true, g, false, &mut dw, false);
            let mut res = vec![
                Some(Tensor::new(xv.shape(), dx)),
                Some(Tensor::new(wv.shape(), dw)),
            ];
            if has_bias {
                res.push(Some(Tensor::new(&[n], col_sums(g, rows, n))));
            }
            res
        }),
    ))
}

pub fn add<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> R {
    if tape.shape(a) != tape.shape(b) {
        return Err(mismatch("add", tape.shape(a), tape.shape(b)));
    }
    let v = tape.value(a).zip_map(tape.value(b), |x, y| x + y);
    Ok(tape.push_op(
        v,
        &[a, b],
        Box::new(|c| vec![Some(c.grad.clone()), Some(c.grad.clone())]),
    ))
}

/// `x + p` where `p`'s shape equals the trailing axes of `x`.
pub fn add_broadcast<T: Real>(tape: &mut Tape<T>, x: Var, p: Var) -> R {
    let xs = tape.shape(x).to_vec();
    let ps = tape.shape(p).to_vec();
    if ps.len() > xs.len() || xs[xs.len() - ps.len()..] != ps[..] {
        return Err(mismatch("add_broadcast", &ps, &xs));
    }
    let inner = tape.value(p).len();
    let mut out = tape.value(x).clone();
    let pd = tape.value(p).data().to_vec();
    for chunk in out.data_mut().chunks_mut(inner) {
        for (o, &v) in chunk.iter_mut().zip(&pd) {
            *o += v;
        }
    }
    Ok(tape.push_op(
        out,
        &[x, p],
        Box::new(move |c| {
            let mut dp = vec![T::zero(); inner];
            for chunk in c.grad.data().chunks(inner) {
                for (d, &v) in dp.iter_mut().zip(chunk) {
                    *d += v;
                }
            }
            vec![
                Some(c.grad.clone()),
                Some(Tensor::new(c.inputs[1].shape(), dp)),
            ]
        }),
    ))
}

pub fn mul<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> R {
    if tape.shape(a) != tape.shape(b) {
        return Err(mismatch("mul", tape.shape(a), tape.shape(b)));
    }
    let v = tape.value(a).zip_map(tape.value(b), |x, y| x * y);
    Ok(tape.push_op(
        v,
        &[a, b],
        Box::new(|c| {
            vec![
                Some(c.grad.zip_map(c.inputs[1], |g, y| g * y)),
                Some(c.grad.zip_map(c.inputs[0], |g, x| g * x)),
            ]
        }),
    ))
}

pub fn scale<T: Real>(tape: &mut Tape<T>, x: Var, s: f64) -> R {
    let s = T::lit(s);
    let v = tape.value(x).map(|a| a * s);
    Ok(tape.push_op(
        v,
        &[x],
        Box::new(move |c| vec![Some(c.grad.map(|g| g * s))]),
    ))
}

pub fn relu<T: Real>(tape: &mut Tape<T>, x: Var) -> R {
    let v = tape
        .value(x)
        .map(|a| if a > T::zero() { a } else { T::zero() });
    Ok(tape.push_op(
        v,
        &[x],
        Box::new(|c| {
            vec![Some(c.grad.zip_map(c.inputs[0], |g, a| {
                if a > T::zero() {
                    g
                } else {
                    T::zero()
                }
            }))]
        }),
    ))
}

pub fn sigmoid<T: Real>(tape: &mut Tape<T>, x: Var) -> R {
    let v = tape.value(x).map(|a| T::one() / (T::one() + (-a).exp()));
    Ok(tape.push_op(
        v,
        &[x],
        Box::new(|c| vec![Some(c.grad.zip_map(c.out, |g, y| g * y * (T::one() - y)))]),
    ))
}

pub fn tanh<T: Real>(tape: &mut Tape<T>, x: Var) -> R {
    let v = tape.value(x).map(|a| a.tanh());
    Ok(tape.push_op(
        v,
        &[x],
        Box::new(|c| vec![Some(c.grad.zip_map(c.out, |g, y| g * (T::one() - y * y)))]),
    ))
}

pub fn reshape<T: Real>(tape: &mut Tape<T>, x: Var, shape: &[usize]) -> R {
    let xs = tape.shape(x).to_vec();
    if shape.iter().product::<usize>() != tape.value(x).len() {
        return Err(mismatch("reshape", shape, &xs));
    }
    let v = tape.value(x).clone().reshaped(shape);
    Ok(tape.push_op(
        v,
        &[x],
        Box::new(move |c| vec![Some(c.grad.clone().reshaped(&xs))]),
    ))
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Reorders axes: output axis `i` is input axis `perm[i]`.
fn permute_data<T: Real>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let xs = x.shape();
    let in_strides = strides(xs);
    let oshape: Vec<usize> = perm.iter().map(|&p| xs[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = x.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; oshape.len()];
    let xd = x.data();
    for _ in 0..n {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(xd[off]);
        for ax in (0..idx.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < oshape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Tensor::new(&oshape, out)
}

pub fn permute<T: Real>(tape: &mut Tape<T>, x: Var, perm: &[usize]) -> R {
    let xs = tape.shape(x).to_vec();
    let mut check = perm.to_vec();
    check.sort_unstable();
    if check != (0..xs.len()).collect::<Vec<_>>() {
        return Err(mismatch("permute", &xs, perm));
    }
    let v = permute_data(tape.value(x), perm);
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    Ok(tape.push_op(
        v,
        &[x],
        Box::new(move |c| vec![Some(permute_data(c.grad, &inv))]),
    ))
}

/// Batched matrix product: `(N, M, K) @ (N, K, P)`, or with `trans_b`
/// `(N, M, K) @ (N, P, K)ᵀ`.
pub fn bmm<T: Real>(tape: &mut Tape<T>, a: Var, b: Var, trans_b: bool) -> R {
    let sa = tape.shape(a).to_vec();
    let sb = tape.shape(b).to_vec();
    if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
        return Err(mismatch("bmm", &sa, &sb));
    }
    let (nb, m, k) = (sa[0], sa[1], sa[2]);
    let (kb, p) = if trans_b {
        (sb[2], sb[1])
    } else {
        (sb[1], sb[2])
    };
    if kb != k {
        return Err(mismatch("bmm", &sa, &sb));
    }
    let mut out = vec![T::zero(); nb * m * p];
    {
        let ad = tape.value(a).data();
        let bd = tape.value(b).data();
        for i in 0..nb {
            gemm(
                m,
                k,
                p,
                &ad[i * m * k..(i + 1) * m * k],
                false,
                &bd[i * k * p..(i + 1) * k * p],
                trans_b,
                &mut out[i * m * p..(i + 1) * m * p],
                false,
            );
        }
    }
    Ok(tape.push_op(
        Tensor::new(&[nb, m, p], out),
        &[a, b],
        Box::new(move |c| {
            let g = c.grad.data();
            let ad = c.inputs[0].data();
            let bd = c.inputs[1].data();
            let mut da = vec![T::zero(); nb * m * k];
            let mut db = vec![T::zero(); nb * k * p];
            for i in 0..nb {
                let gi = &g[i * m * p..(i + 1) * m * p];
                let ai = &ad[i * m * k..(i + 1) * m * k];
                let bi = &bd[i * k * p..(i + 1) * k * p];
                let dai = &mut da[i * m * k..(i + 1) * m * k];
                let dbi = &mut db[i * k * p..(i + 1) * k * p];
                if trans_b {
                    // b stored (p, k)
                    gemm(m, p, k, gi, false, bi, false, dai, false);
                    gemm(p, m, k, gi, true, ai, false, dbi, false);
                } else {
                    gemm(m, p, k, gi, false, bi, true, dai, false);
                    gemm(k, m, p, ai, true, gi, false, dbi, false);
                }
            }
            vec![
                Some(Tensor::new(c.inputs[0].shape(), da)),
                Some(Tensor::new(c.inputs[1].shape(), db)),
            ]
        }),
    ))
}

/// Numerically stable softmax over the trailing axis.
pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let d = x.last_dim();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(d) {
        let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

pub fn softmax<T: Real>(tape: &mut Tape<T>, x: Var) -> R {
    let v = softmax_rows(tape.value(x));
    let d = v.last_dim();
    Ok(tape.push_op(
        v,
        &[x],
        Box::new(move |c| {
            let mut dx = c.grad.clone();
            for (gr, yr) in dx.data_mut().chunks_mut(d).zip(c.out.data().chunks(d)) {
                let dot: T = gr.iter().zip(yr).map(|(&g, &y)| g * y).sum();
                for (g, &y) in gr.iter_mut().zip(yr) {
                    *g = y * (*g - dot);
                }
            }
            vec![Some(dx)]
        }),
    ))
}

/// Shared normalization backward: rows of `xhat` normalized over groups.
/// Returns dx given dxhat for normalization over the trailing axis.
fn norm_backward_rows<T: Real>(dxhat: &[T], xhat: &[T], inv_std: &[T], d: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); dxhat.len()];
    let nd = T::from_usize(d).unwrap();
    for (r, ((dxr, dhr), xhr)) in dx
        .chunks_mut(d)
        .zip(dxhat.chunks(d))
        .zip(xhat.chunks(d))
        .enumerate()
    {
        let m1: T = dhr.iter().copied().sum::<T>() / nd;
        let m2: T = dhr.iter().zip(xhr).map(|(&a, &b)| a * b).sum::<T>() / nd;
        for ((o, &dh), &xh) in dxr.iter_mut().zip(dhr).zip(xhr) {
            *o = inv_std[r] * (dh - m1 - xh * m2);
        }
    }
    dx
}

/// Layer normalization over the trailing axis with affine `gamma`, `beta`.
pub fn layer_norm<T: Real>(tape: &mut Tape<T>, x: Var, gamma: Var, beta: Var, eps: f64) -> R {
    let d = tape.value(x).last_dim();
    if tape.shape(gamma) != [d] || tape.shape(beta) != [d] {
        return Err(mismatch("layer_norm", &[d], tape.shape(gamma)));
    }
    let eps = T::lit(eps);
    let xv = tape.value(x);
    let rows = xv.len() / d;
    let nd = T::from_usize(d).unwrap();
    let mut xhat = vec![T::zero(); xv.len()];
    let mut inv_std = vec![T::zero(); rows];
    for (r, (xr, hr)) in xv.data().chunks(d).zip(xhat.chunks_mut(d)).enumerate() {
        let mean = xr.iter().copied().sum::<T>() / nd;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nd;
        let is = T::one() / (var + eps).sqrt();
        inv_std[r] = is;
        for (h, &v) in hr.iter_mut().zip(xr) {
            *h = (v - mean) * is;
        }
    }
    let gd = tape.value(gamma).data().to_vec();
    let bd = tape.value(beta).data().to_vec();
    let mut out = xhat.clone();
    for row in out.chunks_mut(d) {
        for ((o, &g), &b) in row.iter_mut().zip(&gd).zip(&bd) {
            *o = *o * g + b;
        }
    }
    let shape = xv.shape().to_vec();
    Ok(tape.push_op(
        Tensor::new(&shape, out),
        &[x, gamma, beta],
        Box::new(move |c| {
            let g = c.grad.data();
            let gam = c.inputs[1].data();
            let mut dxhat = g.to_vec();
            for row in dxhat.chunks_mut(d) {
                for (v, &gm) in row.iter_mut().zip(gam) {
                    *v *= gm;
                }
            }
            let dx = norm_backward_rows(&dxhat, &xhat, &inv_std, d);
            let mut dg = vec![T::zero(); d];
            let mut db = vec![T::zero(); d];
            for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                for j in 0..d {
                    dg[j] += gr[j] * hr[j];
                    db[j] += gr[j];
                }
            }
            vec![
                Some(Tensor::new(c.inputs[0].shape(), dx)),
                Some(Tensor::new(&[d], dg)),
                Some(Tensor::new(&[d], db)),
            ]
        }),
    ))
}

/// Batch normalization over every axis but the trailing (channel) axis,
/// using batch statistics. Returns the output and the biased batch mean
/// and variance per channel.
pub fn batch_norm_train<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    eps: f64,
) -> Result<(Var, Vec<T>, Vec<T>), DiffError> {
    let c = tape.value(x).last_dim();
    if tape.shape(gamma) != [c] || tape.shape(beta) != [c] {
        return Err(mismatch("batch_norm", &[c], tape.shape(gamma)));
    }
    let eps = T::lit(eps);
    let xv = tape.value(x);
    let rows = xv.len() / c;
    let nr = T::from_usize(rows).unwrap();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for row in xv.data().chunks(c) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= nr);
    for row in xv.data().chunks(c) {
        for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= nr);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = xv.data().to_vec();
    for row in xhat.chunks_mut(c) {
        for ((h, &m), &is) in row.iter_mut().zip(&mean).zip(&inv_std) {
            *h = (*h - m) * is;
        }
    }
    let gd = tape.value(gamma).data().to_vec();
    let bd = tape.value(beta).data().to_vec();
    let mut out = xhat.clone();
    for row in out.chunks_mut(c) {
        for ((o, &g), &b) in row.iter_mut().zip(&gd).zip(&bd) {
            *o = *o * g + b;
        }
    }
    let shape = xv.shape().to_vec();
    let var_out = tape.push_op(
        Tensor::new(&shape, out),
        &[x, gamma, beta],
        Box::new(move |ctx| {
            let g = ctx.grad.data();
            let gam = ctx.inputs[1].data();
            let mut dg = vec![T::zero(); c];
            let mut db = vec![T::zero(); c];
            let mut m1 = vec![T::zero(); c];
            let mut m2 = vec![T::zero(); c];
            for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                for j in 0..c {
                    dg[j] += gr[j] * hr[j];
                    db[j] += gr[j];
                }
            }
            // dxhat = g * gamma; means over rows
            for j in 0..c {
                m1[j] = db[j] * gam[j] / nr;
                m2[j] = dg[j] * gam[j] / nr;
            }
            let mut dx = vec![T::zero(); g.len()];
            for ((dr, gr), hr) in dx.chunks_mut(c).zip(g.chunks(c)).zip(xhat.chunks(c)) {
                for j in 0..c {
                    dr[j] = inv_std[j] * (gr[j] * gam[j] - m1[j] - hr[j] * m2[j]);
                }
            }
            vec![
                Some(Tensor::new(ctx.inputs[0].shape(), dx)),
                Some(Tensor::new(&[c], dg)),
                Some(Tensor::new(&[c], db)),
            ]
        }),
    );
    Ok((var_out, mean, var))
}

/// Batch normalization with fixed (running) statistics.
pub fn batch_norm_infer<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    running_mean: &[T],
    running_var: &[T],
    eps: f64,
) -> R {
    let c = tape.value(x).last_dim();
    if tape.shape(gamma) != [c] || running_mean.len() != c {
        return Err(mismatch("batch_norm", &[c], tape.shape(gamma)));
    }
    let eps = T::lit(eps);
    let inv_std: Vec<T> = running_var
        .iter()
        .map(|&v| T::one() / (v + eps).sqrt())
        .collect();
    let mean = running_mean.to_vec();
    let xv = tape.value(x);
    let mut xhat = xv.data().to_vec();
    for row in xhat.chunks_mut(c) {
        for ((h, &m), &is) in row.iter_mut().zip(&mean).zip(&inv_std) {
            *h = (*h - m) * is;
        }
    }
    let gd = tape.value(gamma).data().to_vec();
    let bd = tape.value(beta).data().to_vec();
    let mut out = xhat.clone();
    for row in out.chunks_mut(c) {
        for ((o, &g), &b) in row.iter_mut().zip(&gd).zip(&bd) {
            *o = *o * g + b;
        }
    }
    let shape = xv.shape().to_vec();
    Ok(tape.push_op(
        Tensor::new(&shape, out),
        &[x, gamma, beta],
        Box::new(move |ctx| {
            let g = ctx.grad.data();
            let gam = ctx.inputs[1].data();
            let mut dg = vec![T::zero(); c];
            let mut db = vec![T::zero(); c];
            let mut dx = vec![T::zero(); g.len()];
            for ((dr, gr), hr) in dx.chunks_mut(c).zip(g.chunks(c)).zip(xhat.chunks(c)) {
                for j in 0..c {
                    dg[j] += gr[j] * hr[j];
                    db[j] += gr[j];
                    dr[j] = gr[j] * gam[j] * inv_std[j];
                }
            }
            vec![
                Some(Tensor::new(ctx.inputs[0].shape(), dx)),
                Some(Tensor::new(&[c], dg)),
                Some(Tensor::new(&[c], db)),
            ]
        }),
    ))
}

/// Output length of a 1D convolution.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if padded < kernel || stride == 0 {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    b: usize,
    l: usize,
    cin: usize,
    lout: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<T> {
    let row = k * cin;
    let mut cols = vec![T::zero(); b * lout * row];
    for bi in 0..b {
        for t in 0..lout {
            let dst = &mut cols[(bi * lout + t) * row..(bi * lout + t + 1) * row];
            for kk in 0..k {
                let pos = (t * stride + kk) as isize - pad as isize;
                if pos >= 0 && (pos as usize) < l {
                    let src = (bi * l + pos as usize) * cin;
                    dst[kk * cin..(kk + 1) * cin].copy_from_slice(&x[src..src + cin]);
                }
            }
        }
    }
    cols
}

/// 1D convolution. `x`: `(B, L, Cin)`; `w`: `(K*Cin, Cout)` with row index
/// `k*Cin + c`; `b`: `(Cout)`.
pub fn conv1d<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    w: Var,
    b: Var,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> R {
    let xs = tape.shape(x).to_vec();
    let ws = tape.shape(w).to_vec();
    if xs.len() != 3 || ws.len() != 2 || ws[0] != kernel * xs[2] {
        return Err(mismatch(
            "conv1d",
            &[kernel * xs.get(2).copied().unwrap_or(0)],
            &ws,
        ));
    }
    let (bsz, l, cin) = (xs[0], xs[1], xs[2]);
    let cout = ws[1];
    let lout = conv_out_len(l, kernel, stride, pad)
        .ok_or_else(|| mismatch("conv1d input length", &[kernel], &xs))?;
    let cols = im2col(tape.value(x).data(), bsz, l, cin, lout, kernel, stride, pad);
    let rows = bsz * lout;
    let kc = kernel * cin;
    let mut out = vec![T::zero(); rows * cout];
    gemm(
        rows,
        kc,
        cout,
        &cols,
        false,
        tape.value(w).data(),
        false,
        &mut out,
        false,
    );
    let bd = tape.value(b).data();
    for r in 0..rows {
        for (o, &bv) in out[r * cout..(r + 1) * cout].iter_mut().zip(bd) {
            *o += bv;
        }
    }
    Ok(tape.push_op(
        Tensor::new(&[bsz, lout, cout], out),
        &[x, w, b],
        Box::new(move |c| {
            let g = c.grad.data();
            let cols = im2col(c.inputs[0].data(), bsz, l, cin, lout, kernel, stride, pad);
            let mut dw = vec![T::zero(); kc * cout];
            gemm(kc, rows, cout, &cols, true, g, false, &mut dw, false);
            let mut dcols = vec![T::zero(); rows * kc];
            gemm(
                rows,
                cout,
                kc,
                g,
                false,
                c.inputs[1].data(),
                true,
                &mut dcols,
                false,
            );
            let mut dx = vec![T::zero(); bsz * l * cin];
            for bi in 0..bsz {
                for t in 0..lout {
                    let src = &dcols[(bi * lout + t) * kc..(bi * lout + t + 1) * kc];
                    for kk in 0..kernel {
                        let pos = (t * stride + kk) as isize - pad as isize;
                        if pos >= 0 && (pos as usize) < l {
                            let dst = (bi * l + pos as usize) * cin;
                            for ci in 0..cin {
                                dx[dst + ci] += src[kk * cin + ci];
                            }
                        }
                    }
                }
            }
            vec![
                Some(Tensor::new(&[bsz, l, cin], dx)),
                Some(Tensor::new(&[kc, cout], dw)),
                Some(Tensor::new(&[cout], col_sums(g, rows, cout))),
            ]
        }),
    ))
}

/// Transposed 1D convolution without padding. `x`: `(B, L, Cin)`; `w`:
/// `(Cin, K*Cout)` with column index `k*Cout + o`. Output length is
/// `(L-1)*stride + K`.
pub fn conv_transpose1d<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    w: Var,
    b: Var,
    kernel: usize,
    stride: usize,
) -> R {
    let xs = tape.shape(x).to_vec();
    let ws = tape.shape(w).to_vec();
    if xs.len() != 3 || ws.len() != 2 || ws[0] != xs[2] || !ws[1].is_multiple_of(kernel) {
        return Err(mismatch(
            "conv_transpose1d",
            &[xs.get(2).copied().unwrap_or(0)],
            &ws,
        ));
    }
    let (bsz, l, cin) = (xs[0], xs[1], xs[2]);
    let cout = ws[1] / kernel;
    let lout = (l - 1) * stride + kernel;
    let rows = bsz * l;
    let kc = kernel * cout;
    let mut y = vec![T::zero(); rows * kc];
    gemm(
        rows,
        cin,
        kc,
        tape.value(x).data(),
        false,
        tape.value(w).data(),
        false,
        &mut y,
        false,
    );
    let mut out = vec![T::zero(); bsz * lout * cout];
    let bd = tape.value(b).data();
    for bi in 0..bsz {
        for t in 0..lout {
            out[(bi * lout + t) * cout..(bi * lout + t + 1) * cout].copy_from_slice(bd);
        }
        for t in 0..l {
            let src = &y[(bi * l + t) * kc..(bi * l + t + 1) * kc];
            for kk in 0..kernel {
                let dst = (bi * lout + t * stride + kk) * cout;
                for o in 0..cout {
                    out[dst + o] += src[kk * cout + o];
                }
            }
        }
    }
    Ok(tape.push_op(
        Tensor::new(&[bsz, lout, cout], out),
        &[x, w, b],
        Box::new(move |c| {
            let g = c.grad.data();
            let mut dy = vec![T::zero(); rows * kc];
            for bi in 0..bsz {
                for t in 0..l {
                    let dst = &mut dy[(bi * l + t) * kc..(bi * l + t + 1) * kc];
                    for kk in 0..kernel {
                        let src = (bi * lout + t * stride + kk) * cout;
                        dst[kk * cout..(kk + 1) * cout].copy_from_slice(&g[src..src + cout]);
                    }
                }
            }
            let mut dx = vec![T::zero(); rows * cin];
            gemm(
                rows,
                kc,
                cin,
                &dy,
                false,
                c.inputs[1].data(),
                true,
                &mut dx,
                false,
            );
            let mut dw = vec![T::zero(); cin * kc];
            gemm(
                cin,
                rows,
                kc,
                c.inputs[0].data(),
                true,
                &dy,
                false,
                &mut dw,
                false,
            );
            vec![
                Some(Tensor::new(&[bsz, l, cin], dx)),
                Some(Tensor::new(&[cin, kc], dw)),
                Some(Tensor::new(&[cout], col_sums(g, bsz * lout, cout))),
            ]
        }),
    ))
}

/// Max pooling over time with floor semantics. Ties resolve to the
/// earliest position.
pub fn max_pool1d<T: Real>(tape: &mut Tape<T>, x: Var, kernel: usize, stride: usize) -> R {
    let xs = tape.shape(x).to_vec();
    if xs.len() != 3 || xs[1] < kernel {
        return Err(mismatch("max_pool1d", &[kernel], &xs));
    }
    let (bsz, l, c) = (xs[0], xs[1], xs[2]);
    let lout = (l - kernel) / stride + 1;
    let xd = tape.value(x).data();
    let mut out = vec![T::zero(); bsz * lout * c];
    let mut arg = vec![0usize; bsz * lout * c];
    for bi in 0..bsz {
        for t in 0..lout {
            for ch in 0..c {
                let mut best = T::neg_infinity();
                let mut bi_idx = 0;
                for kk in 0..kernel {
                    let idx = (bi * l + t * stride + kk) * c + ch;
                    if xd[idx] > best {
                        best = xd[idx];
                        bi_idx = idx;
                    }
                }
                let o = (bi * lout + t) * c + ch;
                out[o] = best;
                arg[o] = bi_idx;
            }
        }
    }
    let n_in = xd.len();
    Ok(tape.push_op(
        Tensor::new(&[bsz, lout, c], out),
        &[x],
        Box::new(move |ctx| {
            let mut dx = vec![T::zero(); n_in];
            for (&a, &g) in arg.iter().zip(ctx.grad.data()) {
                dx[a] += g;
            }
            vec![Some(Tensor::new(&[bsz, l, c], dx))]
        }),
    ))
}

/// Mean over the time axis: `(B, L, C)` → `(B, C)`.
pub fn mean_time<T: Real>(tape: &mut Tape<T>, x: Var) -> R {
    let xs = tape.shape(x).to_vec();
    if xs.len() != 3 {
        return Err(mismatch("mean_time", &[0, 0, 0], &xs));
    }
    let (bsz, l, c) = (xs[0], xs[1], xs[2]);
    let nl = T::from_usize(l).unwrap();
    let xd = tape.value(x).data();
    let mut out = vec![T::zero(); bsz * c];
    for bi in 0..bsz {
        for t in 0..l {
            for ch in 0..c {
                out[bi * c + ch] += xd[(bi * l + t) * c + ch];
            }
        }
    }
    out.iter_mut().for_each(|v| *v /= nl);
    Ok(tape.push_op(
        Tensor::new(&[bsz, c], out),
        &[x],
        Box::new(move |ctx| {
            let g = ctx.grad.data();
            let mut dx = vec![T::zero(); bsz * l * c];
            for bi in 0..bsz {
                for t in 0..l {
                    for ch in 0..c {
                        dx[(bi * l + t) * c + ch] = g[bi * c + ch] / nl;
                    }
                }
            }
            vec![Some(Tensor::new(&[bsz, l, c], dx))]
        }),
    ))
}

/// Concatenates along `axis`. All other axes must agree.
pub fn concat<T: Real>(tape: &mut Tape<T>, xs: &[Var], axis: usize) -> R {
    let first = tape.shape(xs[0]).to_vec();
    let mut sizes = Vec::with_capacity(xs.len());
    for &v in xs {
        let s = tape.shape(v);
        if s.len() != first.len()
            || s.iter()
                .zip(&first)
                .enumerate()
                .any(|(i, (a, b))| i != axis && a != b)
        {
            return Err(mismatch("concat", &first, s));
        }
        sizes.push(s[axis]);
    }
    let outer: usize = first[..axis].iter().product();
    let inner: usize = first[axis + 1..].iter().product();
    let total: usize = sizes.iter().sum();
    let mut oshape = first.clone();
    oshape[axis] = total;
    let mut out = vec![T::zero(); outer * total * inner];
    let mut offset = 0;
    for (&v, &sz) in xs.iter().zip(&sizes) {
        let d = tape.value(v).data();
        for o in 0..outer {
            let src = &d[o * sz * inner..(o + 1) * sz * inner];
            let dst = (o * total + offset) * inner;
            out[dst..dst + sz * inner].copy_from_slice(src);
        }
        offset += sz;
    }
    Ok(tape.push_op(
        Tensor::new(&oshape, out),
        xs,
        Box::new(move |ctx| {
            let g = ctx.grad.data();
            let mut offset = 0;
            let mut res = Vec::with_capacity(sizes.len());
            for (i, &sz) in sizes.iter().enumerate() {
                let mut d = vec![T::zero(); outer * sz * inner];
                for o in 0..outer {
                    let src = (o * total + offset) * inner;
                    d[o * sz * inner..(o + 1) * sz * inner]
                        .copy_from_slice(&g[src..src + sz * inner]);
                }
                offset += sz;
                res.push(Some(Tensor::new(ctx.inputs[i].shape(), d)));
            }
            res
        }),
    ))
}

/// Contiguous slice `[start, start+len)` along `axis`.
pub fn slice<T: Real>(tape: &mut Tape<T>, x: Var, axis: usize, start: usize, len: usize) -> R {
    let xs = tape.shape(x).to_vec();
    if axis >= xs.len() || start + len > xs[axis] {
        return Err(mismatch("slice", &[start + len], &xs));
    }
    let outer: usize = xs[..axis].iter().product();
    let inner: usize = xs[axis + 1..].iter().product();
    let full = xs[axis];
    let d = tape.value(x).data();
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let s = (o * full + start) * inner;
        out.extend_from_slice(&d[s..s + len * inner]);
    }
    let mut oshape = xs.clone();
    oshape[axis] = len;
    Ok(tape.push_op(
        Tensor::new(&oshape, out),
        &[x],
        Box::new(move |ctx| {
            let g = ctx.grad.data();
            let mut dx = vec![T::zero(); outer * full * inner];
            for o in 0..outer {
                let s = (o * full + start) * inner;
                dx[s..s + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(Tensor::new(&xs, dx))]
        }),
    ))
}

/// Gathers time steps: `(B, L, C)` → `(B, idx.len(), C)`.
pub fn index_time<T: Real>(tape: &mut Tape<T>, x: Var, idx: &[usize]) -> R {
    let xs = tape.shape(x).to_vec();
    if xs.len() != 3 || idx.iter().any(|&i| i >= xs[1]) {
        return Err(mismatch(
            "index_time",
            &[xs.get(1).copied().unwrap_or(0)],
            idx,
        ));
    }
    let (bsz, l, c) = (xs[0], xs[1], xs[2]);
    let n = idx.len();
    let d = tape.value(x).data();
    let mut out = vec![T::zero(); bsz * n * c];
    for bi in 0..bsz {
        for (j, &t) in idx.iter().enumerate() {
            out[(bi * n + j) * c..(bi * n + j + 1) * c]
                .copy_from_slice(&d[(bi * l + t) * c..(bi * l + t + 1) * c]);
        }
    }
    let idx = idx.to_vec();
    Ok(tape.push_op(
        Tensor::new(&[bsz, n, c], out),
        &[x],
        Box::new(move |ctx| {
            let g = ctx.grad.data();
            let mut dx = vec![T::zero(); bsz * l * c];
            for bi in 0..bsz {
                for (j, &t) in idx.iter().enumerate() {
                    for ch in 0..c {
                        dx[(bi * l + t) * c + ch] += g[(bi * n + j) * c + ch];
                    }
                }
            }
            vec![Some(Tensor::new(&[bsz, l, c], dx))]
        }),
    ))
}

/// Tiles `x` along a new leading batch axis.
pub fn repeat_batch<T: Real>(tape: &mut Tape<T>, x: Var, batch: usize) -> R {
    let xs = tape.shape(x).to_vec();
    let n = tape.value(x).len();
    let mut out = Vec::with_capacity(n * batch);
    for _ in 0..batch {
        out.extend_from_slice(tape.value(x).data());
    }
    let mut oshape = vec![batch];
    oshape.extend_from_slice(&xs);
    Ok(tape.push_op(
        Tensor::new(&oshape, out),
        &[x],
        Box::new(move |ctx| {
            let mut d = vec![T::zero(); n];
            for chunk in ctx.grad.data().chunks(n) {
                for (a, &b) in d.iter_mut().zip(chunk) {
                    *a += b;
                }
            }
            vec![Some(Tensor::new(&xs, d))]
        }),
    ))
}

/// Inverted dropout; identity in inference mode or when `p == 0`.
pub fn dropout<T: Real>(tape: &mut Tape<T>, x: Var, p: f64) -> R {
    if p <= 0.0 || tape.mode() == super::tape::Mode::Infer {
        return Ok(x);
    }
    let keep = 1.0 - p;
    let n = tape.value(x).len();
    let scale = T::lit(1.0 / keep);
    let mask: Vec<T> = (0..n)
        .map(|_| {
            if tape.rng().random::<f64>() < keep {
                scale
            } else {
                T::zero()
            }
        })
        .collect();
    let mut out = tape.value(x).clone();
    for (o, &m) in out.data_mut().iter_mut().zip(&mask) {
        *o *= m;
    }
    Ok(tape.push_op(
        out,
        &[x],
        Box::new(move |ctx| {
            let mut d = ctx.grad.clone();
            for (o, &m) in d.data_mut().iter_mut().zip(&mask) {
                *o *= m;
            }
            vec![Some(d)]
        }),
    ))
}

/// Mean softmax cross-entropy over a `(B, C)` batch of logits.
pub fn softmax_cross_entropy<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> R {
    let s = tape.shape(logits).to_vec();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(mismatch("cross_entropy", &[labels.len(), 0], &s));
    }
    let (bsz, nc) = (s[0], s[1]);
    if let Some(&bad) = labels.iter().find(|&&y| y >= nc) {
        return Err(DiffError::LabelOutOfRange {
            label: bad,
            classes: nc,
        });
    }
    let probs = softmax_rows(tape.value(logits));
    let nb = T::from_usize(bsz).unwrap();
    let mut loss = T::zero();
    let ld = tape.value(logits).data();
    for (i, &y) in labels.iter().enumerate() {
        let row = &ld[i * nc..(i + 1) * nc];
        let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
        loss += lse - row[y];
    }
    loss /= nb;
    let labels = labels.to_vec();
    Ok(tape.push_op(
        Tensor::scalar(loss),
        &[logits],
        Box::new(move |ctx| {
            let g = ctx.grad.data()[0];
            let mut d = probs.clone();
            for (i, &y) in labels.iter().enumerate() {
                d.data_mut()[i * nc + y] -= T::one();
            }
            for v in d.data_mut() {
                *v = *v * g / nb;
            }
            vec![Some(d)]
        }),
    ))
}

/// Mean squared error against a constant target.
pub fn mse<T: Real>(tape: &mut Tape<T>, x: Var, target: &Tensor<T>) -> R {
    if tape.shape(x) != target.shape() {
        return Err(mismatch("mse", target.shape(), tape.shape(x)));
    }
    let n = T::from_usize(target.len()).unwrap();
    let diff = tape.value(x).zip_map(target, |a, b| a - b);
    let loss = diff.data().iter().map(|&d| d * d).sum::<T>() / n;
    Ok(tape.push_op(
        Tensor::scalar(loss),
        &[x],
        Box::new(move |ctx| {
            let g = ctx.grad.data()[0];
            let two = T::lit(2.0);
            vec![Some(diff.map(|d| two * d * g / n))]
        }),
    ))
}

/// `sum(x * w)` for a constant weight tensor; used to scalarize outputs in
/// gradient checks and to pick a logit for attribution.
pub fn weighted_sum<T: Real>(tape: &mut Tape<T>, x: Var, w: &Tensor<T>) -> R {
    if tape.shape(x) != w.shape() {
        return Err(mismatch("weighted_sum", w.shape(), tape.shape(x)));
    }
    let s: T = tape
        .value(x)
        .data()
        .iter()
        .zip(w.data())
        .map(|(&a, &b)| a * b)
        .sum();
    let w = w.clone();
    Ok(tape.push_op(
        Tensor::scalar(s),
        &[x],
        Box::new(move |ctx| {
            let g = ctx.grad.data()[0];
            vec![Some(w.map(|v| v * g))]
        }),
    ))
}
