//! Differentiable primitives.
//!
//! Every op is a method on [`Tape`]: it runs the forward kernel in f64,
//! rounds the output to the op's dtype, and (when the tape records) pushes a
//! backward closure that maps the upstream gradient to one partial per input.
//! Gradients themselves always stay in f64.
//!
//! Binary ops require matching dtypes; mixing is almost always a bug in the
//! caller, so it is rejected rather than promoted.


use crate::error::{Error, Result};
use crate::numerics::{Dtype, Tape, Tensor};

// ─── raw matmul kernels (f64 slices, single-threaded, ikj order) ───────────

/// c[m,n] += a[m,k] · b[k,n]
pub(crate) fn mm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// c[m,n] += a[m,k] · b[n,k]ᵀ  (rows of b are the contraction vectors)
pub(crate) fn mm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            crow[j] += acc;
        }
    }
}

/// c[k,n] += a[m,k]ᵀ · b[m,n]
pub(crate) fn mm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

// ─── scalar math helpers ────────────────────────────────────────────────────

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn softplus_scalar(x: f64) -> f64 {
    // max(x,0) + ln1p(exp(-|x|)), stable at both tails
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn same_dtype(inputs: &[&Tensor]) -> Result<Dtype> {
    let dt = inputs[0].dtype();
    for t in &inputs[1..] {
        if t.dtype() != dt {
            return Err(Error::shape(format!("dtype mismatch: {:?} vs {:?}", dt, t.dtype())));
        }
    }
    Ok(dt)
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("shape mismatch: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Shape helper: split a tensor into (rows, last-dim) treating all leading
/// dims as rows.
fn rows_cols(t: &Tensor) -> Result<(usize, usize)> {
    let shape = t.shape();
    if shape.is_empty() {
        return Err(Error::shape("expected at least 1-d tensor"));
    }
    let cols = *shape.last().unwrap();
    let rows = t.numel() / cols.max(1);
    Ok((rows, cols))
}

impl Tape {
    // ─── linear algebra ─────────────────────────────────────────────────────

    /// Standard matrix product: `a[m,k] · b[k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let dt = same_dtype(&[a, b])?;
        let (ash, bsh) = (a.shape(), b.shape());
        if ash.len() != 2 || bsh.len() != 2 {
            return Err(Error::shape(format!("matmul expects 2-d tensors, got {ash:?} x {bsh:?}")));
        }
        let (m, k, k2, n) = (ash[0], ash[1], bsh[0], bsh[1]);
        if k != k2 {
            return Err(Error::shape(format!("matmul inner dims disagree: {ash:?} x {bsh:?}")));
        }
        let mut out = vec![0.0; m * n];
        mm_nn(a.data(), b.data(), &mut out, m, k, n);
        dt.round_slice(&mut out);
        let y = Tensor::from_raw(vec![m, n], dt, out);
        let (ad, bd) = (a.data_arc(), b.data_arc());
        self.push_op(
            &[a, b],
            &y,
            Box::new(move |g| {
                let mut da = vec![0.0; m * k];
                mm_nt(g, &bd, &mut da, m, n, k); // dA = G · Bᵀ
                let mut db = vec![0.0; k * n];
                mm_tn(&ad, g, &mut db, m, k, n); // dB = Aᵀ · G
                vec![da, db]
            }),
        );
        Ok(y)
    }

    /// `a[m,k] · b[n,k]ᵀ -> [m,n]`; the natural layout for `x · Wᵀ` linears
    /// with weights stored `[out, in]`.
    pub fn matmul_tb(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let dt = same_dtype(&[a, b])?;
        let (ash, bsh) = (a.shape(), b.shape());
        if ash.len() != 2 || bsh.len() != 2 {
            return Err(Error::shape(format!("matmul_tb expects 2-d tensors, got {ash:?} x {bsh:?}")));
        }
        let (m, k, n, k2) = (ash[0], ash[1], bsh[0], bsh[1]);
        if k != k2 {
            return Err(Error::shape(format!("matmul_tb inner dims disagree: {ash:?} x {bsh:?}")));
        }
        let mut out = vec![0.0; m * n];
        mm_nt(a.data(), b.data(), &mut out, m, k, n);
        dt.round_slice(&mut out);
        let y = Tensor::from_raw(vec![m, n], dt, out);
        let (ad, bd) = (a.data_arc(), b.data_arc());
        self.push_op(
            &[a, b],
            &y,
            Box::new(move |g| {
                let mut da = vec![0.0; m * k];
                mm_nn(g, &bd, &mut da, m, n, k); // dA = G · B
                let mut db = vec![0.0; n * k];
                mm_tn(g, &ad, &mut db, m, n, k); // dB = Gᵀ · A
                vec![da, db]
            }),
        );
        Ok(y)
    }

    /// `x[l,din] · w[dout,din]ᵀ (+ bias)` — the standard linear layer.
    pub fn linear(&mut self, x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let y = self.matmul_tb(x, w)?;
        match bias {
            Some(b) => self.add_bias(&y, b),
            None => Ok(y),
        }
    }

    // ─── elementwise ────────────────────────────────────────────────────────

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let dt = same_dtype(&[a, b])?;
        same_shape(a, b)?;
        let mut out: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        dt.round_slice(&mut out);
        let y = Tensor::from_raw(a.shape().to_vec(), dt, out);
        self.push_op(&[a, b], &y, Box::new(move |g| vec![g.to_vec(), g.to_vec()]));
        Ok(y)
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let dt = same_dtype(&[a, b])?;
        same_shape(a, b)?;
        let mut out: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        dt.round_slice(&mut out);
        let y = Tensor::from_raw(a.shape().to_vec(), dt, out);
        self.push_op(
            &[a, b],
            &y,
            Box::new(move |g| vec![g.to_vec(), g.iter().map(|v| -v).collect()]),
        );
        Ok(y)
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let dt = same_dtype(&[a, b])?;
        same_shape(a, b)?;
        let mut out: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        dt.round_slice(&mut out);
        let y = Tensor::from_raw(a.shape().to_vec(), dt, out);
        let (ad, bd) = (a.data_arc(), b.data_arc());
        self.push_op(
            &[a, b],
            &y,
            Box::new(move |g| {
                let da = g.iter().zip(bd.iter()).map(|(gv, bv)| gv * bv).collect();
                let db = g.iter().zip(ad.iter()).map(|(gv, av)| gv * av).collect();
                vec![da, db]
            }),
        );
        Ok(y)
    }

    pub fn neg(&mut self, a: &Tensor) -> Result<Tensor> {
        self.scale(a, -1.0)
    }

    pub fn scale(&mut self, a: &Tensor, c: f64) -> Result<Tensor> {
        let dt = a.dtype();
        let mut out: Vec<f64> = a.data().iter().map(|x| x * c).collect();
        dt.round_slice(&mut out);
        let y = Tensor::from_raw(a.shape().to_vec(), dt, out);
        self.push_op(&[a], &y, Box::new(move |g| vec![g.iter().map(|v| v * c).collect()]));
        Ok(y)
    }

    /// Broadcast-add a `[d]` bias over the last dim of `x[.., d]`.
    pub fn add_bias(&mut self, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let dt = same_dtype(&[x, bias])?;
        let (rows, cols) = rows_cols(x)?;
        if bias.shape() != [cols] {
            return Err(Error::shape(format!(
                "bias shape {:?} does not match last dim {} of {:?}",
                bias.shape(),
                cols,
                x.shape()
            )));
        }
        let bd = bias.data();
        let mut out = x.data().to_vec();
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] += bd[c];
            }
        }
        dt.round_slice(&mut out);
        let y = Tensor::from_raw(x.shape().to_vec(), dt, out);
        self.push_op(
            &[x, bias],
            &y,
            Box::new(move |g| {
                let mut db = vec![0.0; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        db[c] += g[r * cols + c];
                    }
                }
                vec![g.to_vec(), db]
            }),
        );
        Ok(y)
    }

    pub fn silu(&mut self, x: &Tensor) -> Result<Tensor> {
        let dt = x.dtype();
        let mut out: Vec<f64> = x.data().iter().map(|&v| v * sigmoid(v)).collect();
        dt.round_slice(&mut out);
        let y = Tensor::from_raw(x.shape().to_vec(), dt, out);
        let xd = x.data_arc();
        self.push_op(
            &[x],
            &y,
            Box::new(move |g| {
                let dx = g
                    .iter()
                    .zip(xd.iter())
                    .map(|(gv, &v)| {
                        let s = sigmoid(v);
                        gv * (s * (1.0 + v * (1.0 - s)))
                    })
                    .collect();
                vec![dx]
            }),
        );
        Ok(y)
    }

    pub fn softplus(&mut self, x: &Tensor) -> Result<Tensor> {
        let dt = x.dtype();
        let mut out: Vec<f64> = x.data().iter().map(|&v| softplus_scalar(v)).collect();
        dt.round_slice(&mut out);
        let y = Tensor::from_raw(x.shape().to_vec(), dt, out);
        let xd = x.data_arc();
        self.push_op(
            &[x],
            &y,
            Box::new(move |g| {
                vec![g.iter().zip(xd.iter()).map(|(gv, &v)| gv * sigmoid(v)).collect()]
            }),
        );
        Ok(y)
    }

    pub fn exp(&mut self, x: &Tensor) -> Result<Tensor> {
        let dt = x.dtype();
        let mut out: Vec<f64> = x.data().iter().map(|&v| v.exp()).collect();
        dt.round_slice(&mut out);
        let y = Tensor::from_raw(x.shape().to_vec(), dt, out);
        let yd = y.data_arc();
        self.push_op(
            &[x],
            &y,
            Box::new(move |g| vec![g.iter().zip(yd.iter()).map(|(gv, yv)| gv * yv).collect()]),
        );
        Ok(y)
    }

    /// Row-wise softmax over the last dim. Shift-invariant by construction
    /// (the row max is subtracted before exponentiation).
    pub fn softmax_lastdim(&mut self, x: &Tensor) -> Result<Tensor> {
        let dt = x.dtype();
        let (rows, cols) = rows_cols(x)?;
        let xd = x.data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let orow = &mut out[r * cols..(r + 1) * cols];
            let mut sum = 0.0;
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = (v - max).exp();
                sum += *o;
            }
            for o in orow.iter_mut() {
                *o /= sum;
            }
        }
        dt.round_slice(&mut out);
        let y = Tensor::from_raw(x.shape().to_vec(), dt, out);
        let yd = y.data_arc();
        self.push_op(
            &[x],
            &y,
            Box::new(move |g| {
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    let yrow = &yd[r * cols..(r + 1) * cols];
                    let grow = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = yrow.iter().zip(grow).map(|(yv, gv)| yv * gv).sum();
                    for c in 0..cols {
                        dx[r * cols + c] = yrow[c] * (grow[c] - dot);
                    }
                }
                vec![dx]
            }),
        );
        Ok(y)
    }

    /// RMS normalization over the last dim: `y = x * weight / sqrt(mean(x²)+eps)`.
    pub fn rmsnorm(&mut self, x: &Tensor, weight: &Tensor, eps: f64) -> Result<Tensor> {
        let dt = same_dtype(&[x, weight])?;
        let (rows, cols) = rows_cols(x)?;
        if weight.shape() != [cols] {
            return Err(Error::shape(format!(
                "rmsnorm weight {:?} does not match last dim {} of {:?}",
                weight.shape(),
                cols,
                x.shape()
            )));
        }
        let (xd, wd) = (x.data(), weight.data());
        let mut out = vec![0.0; rows * cols];
        let mut rinv = vec![0.0; rows];
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / cols as f64;
            let rv = 1.0 / (ms + eps).sqrt();
            rinv[r] = rv;
            for c in 0..cols {
                out[r * cols + c] = row[c] * wd[c] * rv;
            }
        }
        dt.round_slice(&mut out);
        let y = Tensor::from_raw(x.shape().to_vec(), dt, out);
        let (xa, wa) = (x.data_arc(), weight.data_arc());
        self.push_op(
            &[x, weight],
            &y,
            Box::new(move |g| {
                let mut dx = vec![0.0; rows * cols];
                let mut dw = vec![0.0; cols];
                for r in 0..rows {
                    let row = &xa[r * cols..(r + 1) * cols];
                    let grow = &g[r * cols..(r + 1) * cols];
                    let rv = rinv[r];
                    let mut dot = 0.0; // Σ g_i w_i x_i
                    for c in 0..cols {
                        dot += grow[c] * wa[c] * row[c];
                        dw[c] += grow[c] * row[c] * rv;
                    }
                    let k = rv * rv * rv * dot / cols as f64;
                    for c in 0..cols {
                        dx[r * cols + c] = grow[c] * wa[c] * rv - row[c] * k;
                    }
                }
                vec![dx, dw]
            }),
        );
        Ok(y)
    }

    // ─── shaping ────────────────────────────────────────────────────────────

    /// Zero-copy reshape; gradient passes through unchanged.
    pub fn reshape(&mut self, x: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
        let y = x.reshaped(shape)?;
        self.push_op(&[x], &y, Box::new(move |g| vec![g.to_vec()]));
        Ok(y)
    }

    /// Copy columns `[start, start+len)` of a 2-d tensor.
    pub fn narrow_cols(&mut self, x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        let shape = x.shape();
        if shape.len() != 2 {
            return Err(Error::shape(format!("narrow_cols expects 2-d, got {shape:?}")));
        }
        let (rows, cols) = (shape[0], shape[1]);
        if start + len > cols {
            return Err(Error::shape(format!(
                "narrow_cols [{start}, {}) out of bounds for {cols} columns",
                start + len
            )));
        }
        let xd = x.data();
        let mut out = vec![0.0; rows * len];
        for r in 0..rows {
            out[r * len..(r + 1) * len].copy_from_slice(&xd[r * cols + start..r * cols + start + len]);
        }
        let y = Tensor::from_raw(vec![rows, len], x.dtype(), out);
        self.push_op(
            &[x],
            &y,
            Box::new(move |g| {
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    dx[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                vec![dx]
            }),
        );
        Ok(y)
    }

    /// Concatenate 2-d tensors along the last dim.
    pub fn concat_cols(&mut self, xs: &[&Tensor]) -> Result<Tensor> {
        if xs.is_empty() {
            return Err(Error::shape("concat_cols of zero tensors"));
        }
        let dt = same_dtype(xs)?;
        let rows = xs[0].shape()[0];
        for t in xs {
            if t.shape().len() != 2 || t.shape()[0] != rows {
                return Err(Error::shape(format!(
                    "concat_cols row mismatch: {:?} vs {} rows",
                    t.shape(),
                    rows
                )));
            }
        }
        let widths: Vec<usize> = xs.iter().map(|t| t.shape()[1]).collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (t, &w) in xs.iter().zip(&widths) {
            let td = t.data();
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&td[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let y = Tensor::from_raw(vec![rows, total], dt, out);
        let widths_bk = widths.clone();
        self.push_op(
            &xs.to_vec(),
            &y,
            Box::new(move |g| {
                let mut parts = Vec::with_capacity(widths_bk.len());
                let mut offset = 0;
                for &w in &widths_bk {
                    let mut dx = vec![0.0; rows * w];
                    for r in 0..rows {
                        dx[r * w..(r + 1) * w]
                            .copy_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    parts.push(dx);
                    offset += w;
                }
                parts
            }),
        );
        Ok(y)
    }

    // ─── reductions ─────────────────────────────────────────────────────────

    pub fn sum_all(&mut self, x: &Tensor) -> Result<Tensor> {
        let dt = x.dtype();
        let s = dt.round(x.data().iter().sum());
        let y = Tensor::from_raw(vec![1], dt, vec![s]);
        let n = x.numel();
        self.push_op(&[x], &y, Box::new(move |g| vec![vec![g[0]; n]]));
        Ok(y)
    }

    pub fn mean_all(&mut self, x: &Tensor) -> Result<Tensor> {
        let n = x.numel() as f64;
        let s = self.sum_all(x)?;
        self.scale(&s, 1.0 / n)
    }

    // ─── embedding and loss ─────────────────────────────────────────────────

    /// Row-gather: `table[V,d]`, `ids[L]` -> `[L,d]`.
    pub fn embedding(&mut self, table: &Tensor, ids: &[u32]) -> Result<Tensor> {
        let shape = table.shape();
        if shape.len() != 2 {
            return Err(Error::shape(format!("embedding table must be 2-d, got {shape:?}")));
        }
        let (vocab, d) = (shape[0], shape[1]);
        for &id in ids {
            if id as usize >= vocab {
                return Err(Error::Input(format!("token id {id} out of range (vocab {vocab})")));
            }
        }
        let td = table.data();
        let mut out = vec![0.0; ids.len() * d];
        for (l, &id) in ids.iter().enumerate() {
            out[l * d..(l + 1) * d].copy_from_slice(&td[id as usize * d..(id as usize + 1) * d]);
        }
        let y = Tensor::from_raw(vec![ids.len(), d], table.dtype(), out);
        let ids_bk: Vec<u32> = ids.to_vec();
        self.push_op(
            &[table],
            &y,
            Box::new(move |g| {
                let mut dt = vec![0.0; vocab * d];
                for (l, &id) in ids_bk.iter().enumerate() {
                    let dst = &mut dt[id as usize * d..(id as usize + 1) * d];
                    for (dv, gv) in dst.iter_mut().zip(&g[l * d..(l + 1) * d]) {
                        *dv += gv;
                    }
                }
                vec![dt]
            }),
        );
        Ok(y)
    }

    /// Mean next-token cross-entropy with a numerically stable log-sum-exp.
    /// `mask`, when given, selects which positions contribute to the mean.
    pub fn cross_entropy_mean(
        &mut self,
        logits: &Tensor,
        targets: &[u32],
        mask: Option<&[bool]>,
    ) -> Result<Tensor> {
        let shape = logits.shape();
        if shape.len() != 2 {
            return Err(Error::shape(format!("logits must be 2-d, got {shape:?}")));
        }
        let (rows, vocab) = (shape[0], shape[1]);
        if targets.len() != rows {
            return Err(Error::shape(format!("{} targets for {rows} rows", targets.len())));
        }
        if let Some(m) = mask {
            if m.len() != rows {
                return Err(Error::shape(format!("{} mask entries for {rows} rows", m.len())));
            }
        }
        let active: Vec<usize> = (0..rows).filter(|&r| mask.map_or(true, |m| m[r])).collect();
        if active.is_empty() {
            return Err(Error::Input("cross entropy over zero active positions".into()));
        }
        for &r in &active {
            if targets[r] as usize >= vocab {
                return Err(Error::Input(format!(
                    "target id {} out of range (vocab {vocab})",
                    targets[r]
                )));
            }
        }
        let ld = logits.data();
        let mut total = 0.0;
        for &r in &active {
            let row = &ld[r * vocab..(r + 1) * vocab];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[targets[r] as usize];
        }
        let n = active.len() as f64;
        let loss = Tensor::from_raw(vec![1], logits.dtype(), vec![logits.dtype().round(total / n)]);
        let la = logits.data_arc();
        let targets_bk: Vec<u32> = targets.to_vec();
        self.push_op(
            &[logits],
            &loss,
            Box::new(move |g| {
                let gv = g[0] / n;
                let mut dx = vec![0.0; rows * vocab];
                for &r in &active {
                    let row = &la[r * vocab..(r + 1) * vocab];
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    let drow = &mut dx[r * vocab..(r + 1) * vocab];
                    for (d, &v) in drow.iter_mut().zip(row) {
                        *d = (v - max).exp();
                        sum += *d;
                    }
                    for d in drow.iter_mut() {
                        *d = *d / sum * gv;
                    }
                    drow[targets_bk[r] as usize] -= gv;
                }
                vec![dx]
            }),
        );
        Ok(loss)
    }

    // ─── causal depthwise convolution ───────────────────────────────────────

    /// Depthwise causal 1-d convolution over `x[L,C]` with kernel `[w,C]`.
    /// Output at position `t` sees only `x[t-w+1 ..= t]`. The left context is
    /// zero unless `tail` supplies the previous `w-1` rows (used when
    /// continuing a sequence); the tail is treated as a constant.
    pub fn causal_conv1d(
        &mut self,
        x: &Tensor,
        kernel: &Tensor,
        bias: &Tensor,
        tail: Option<&Tensor>,
    ) -> Result<Tensor> {
        let dt = same_dtype(&[x, kernel, bias])?;
        let (xs, ks) = (x.shape(), kernel.shape());
        if xs.len() != 2 || ks.len() != 2 {
            return Err(Error::shape(format!("conv expects 2-d x and kernel, got {xs:?}, {ks:?}")));
        }
        let (len, channels) = (xs[0], xs[1]);
        let (width, kc) = (ks[0], ks[1]);
        if width < 1 {
            return Err(Error::contract("conv width must be >= 1"));
        }
        if kc != channels || bias.shape() != [channels] {
            return Err(Error::shape(format!(
                "conv kernel {ks:?} / bias {:?} do not match {channels} channels",
                bias.shape()
            )));
        }
        if let Some(t) = tail {
            if t.shape() != [width - 1, channels] {
                return Err(Error::shape(format!(
                    "conv tail {:?}, expected [{}, {channels}]",
                    t.shape(),
                    width - 1
                )));
            }
        }
        let (xd, kd, bd) = (x.data(), kernel.data(), bias.data());
        let td = tail.map(|t| t.data().to_vec());
        let hist = width - 1;
        let mut out = vec![0.0; len * channels];
        for t in 0..len {
            let orow = &mut out[t * channels..(t + 1) * channels];
            orow.copy_from_slice(bd);
            for j in 0..width {
                // input position t - (w-1) + j
                let pos = t as isize - hist as isize + j as isize;
                let krow = &kd[j * channels..(j + 1) * channels];
                if pos >= 0 {
                    let xrow = &xd[pos as usize * channels..(pos as usize + 1) * channels];
                    for c in 0..channels {
                        orow[c] += krow[c] * xrow[c];
                    }
                } else if let Some(tl) = &td {
                    let tpos = (pos + hist as isize) as usize; // index into tail rows
                    let trow = &tl[tpos * channels..(tpos + 1) * channels];
                    for c in 0..channels {
                        orow[c] += krow[c] * trow[c];
                    }
                }
            }
        }
        dt.round_slice(&mut out);
        let y = Tensor::from_raw(vec![len, channels], dt, out);
        let (xa, ka) = (x.data_arc(), kernel.data_arc());
        let inputs: Vec<&Tensor> = vec![x, kernel, bias];
        let td_bk = td;
        self.push_op(
            &inputs,
            &y,
            Box::new(move |g| {
                let mut dx = vec![0.0; len * channels];
                let mut dk = vec![0.0; width * channels];
                let mut db = vec![0.0; channels];
                for t in 0..len {
                    let grow = &g[t * channels..(t + 1) * channels];
                    for c in 0..channels {
                        db[c] += grow[c];
                    }
                    for j in 0..width {
                        let pos = t as isize - hist as isize + j as isize;
                        if pos >= 0 {
                            let xrow = &xa[pos as usize * channels..(pos as usize + 1) * channels];
                            let krow = &ka[j * channels..(j + 1) * channels];
                            let dxrow = pos as usize * channels;
                            for c in 0..channels {
                                dk[j * channels + c] += grow[c] * xrow[c];
                                dx[dxrow + c] += grow[c] * krow[c];
                            }
                        } else if let Some(tl) = &td_bk {
                            let tpos = (pos + hist as isize) as usize;
                            let trow = &tl[tpos * channels..(tpos + 1) * channels];
                            for c in 0..channels {
                                dk[j * channels + c] += grow[c] * trow[c];
                            }
                        }
                    }
                }
                vec![dx, dk, db]
            }),
        );
        Ok(y)
    }

    // ─── rotary position embedding ──────────────────────────────────────────

    /// Rotate consecutive channel pairs of each head chunk by
    /// `positions[l] * theta[pair]`. `x` is `[L, n_heads * d_head]` with
    /// `theta` of length `d_head/2`. Exact isometry per pair; the backward
    /// pass rotates the gradient by the negated angles.
    pub fn apply_rotary(
        &mut self,
        x: &Tensor,
        positions: &[usize],
        theta: &[f64],
        d_head: usize,
    ) -> Result<Tensor> {
        let shape = x.shape();
        if shape.len() != 2 {
            return Err(Error::shape(format!("apply_rotary expects 2-d, got {shape:?}")));
        }
        let (len, width) = (shape[0], shape[1]);
        if d_head == 0 || d_head % 2 != 0 || width % d_head != 0 {
            return Err(Error::shape(format!(
                "width {width} not divisible into even heads of {d_head}"
            )));
        }
        if positions.len() != len {
            return Err(Error::shape(format!("{} positions for {len} rows", positions.len())));
        }
        if theta.len() != d_head / 2 {
            return Err(Error::shape(format!(
                "theta has {} entries, expected {}",
                theta.len(),
                d_head / 2
            )));
        }
        let n_heads = width / d_head;
        let dt = x.dtype();
        let half = d_head / 2;
        let mut out = x.data().to_vec();
        let rotate = |buf: &mut [f64], sign: f64, positions: &[usize], theta: &[f64]| {
            for (l, &pos) in positions.iter().enumerate() {
                for h in 0..n_heads {
                    let base = l * width + h * d_head;
                    for i in 0..half {
                        let angle = sign * pos as f64 * theta[i];
                        let (sin, cos) = angle.sin_cos();
                        let a = buf[base + 2 * i];
                        let b = buf[base + 2 * i + 1];
                        buf[base + 2 * i] = a * cos - b * sin;
                        buf[base + 2 * i + 1] = a * sin + b * cos;
                    }
                }
            }
        };
        rotate(&mut out, 1.0, positions, theta);
        dt.round_slice(&mut out);
        let y = Tensor::from_raw(shape.to_vec(), dt, out);
        let pos_bk: Vec<usize> = positions.to_vec();
        let theta_bk: Vec<f64> = theta.to_vec();
        self.push_op(
            &[x],
            &y,
            Box::new(move |g| {
                let mut dx = g.to_vec();
                for (l, &pos) in pos_bk.iter().enumerate() {
                    for h in 0..n_heads {
                        let base = l * width + h * d_head;
                        for i in 0..half {
                            let angle = -(pos as f64) * theta_bk[i];
                            let (sin, cos) = angle.sin_cos();
                            let a = dx[base + 2 * i];
                            let b = dx[base + 2 * i + 1];
                            dx[base + 2 * i] = a * cos - b * sin;
                            dx[base + 2 * i + 1] = a * sin + b * cos;
                        }
                    }
                }
                vec![dx]
            }),
        );
        Ok(y)
    }
}

/// Detached helper used by inference code: builds a constant tensor from rows
/// of raw data without touching any tape.
pub fn tensor_from_rows(rows: &[&[f64]], dtype: Dtype) -> Tensor {
    let r = rows.len();
    let c = if r == 0 { 0 } else { rows[0].len() };
    let mut data = Vec::with_capacity(r * c);
    for row in rows {
        debug_assert_eq!(row.len(), c);
        data.extend_from_slice(row);
    }
    Tensor::from_raw(vec![r, c], dtype, data)
}
