//! Mamba2-style selective state-space block.
//!
//! The block keeps a fixed-size recurrent state per head (`[n_heads, d_head,
//! d_state]` plus a short convolution tail) and supports two numerically
//! equivalent execution modes: a parallel scan over whole sequences
//! (training, prefill) and a single-token recurrent step (decode). The
//! parallel path uses the chunked matmul form of the scan; the recurrent path
//! is the plain per-step recurrence over the same state.
//!
//! Per head the recurrence is
//!
//! ```text
//! h_t = exp(dt_t · A) · h_{t-1} + dt_t · (x_t ⊗ B_t)
//! y_t = h_t · C_t + D · x_t
//! ```
//!
//! with a scalar decay `A = -exp(A_log) < 0` per head.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::init;
use crate::numerics::ops::{mm_nn, mm_nt, mm_tn};
use crate::numerics::{Dtype, Tape, Tensor};

/// RMS-norm epsilon used across the model.
pub const RMS_EPS: f64 = 1e-5;

/// Chunk length for the parallel scan inside block forward.
const PARALLEL_CHUNK: usize = 16;

// ─── dimensions and parameters ──────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SsmDims {
    pub d_model: usize,
    /// Expanded width, `expand * d_model`; equals `n_heads * d_head`.
    pub d_inner: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_state: usize,
    pub conv_width: usize,
}

impl SsmDims {
    pub fn validate(&self) -> Result<()> {
        if self.d_inner != self.n_heads * self.d_head {
            return Err(Error::config(
                "ssm.d_inner",
                format!("{} != n_heads {} * d_head {}", self.d_inner, self.n_heads, self.d_head),
            ));
        }
        if self.conv_width < 1 {
            return Err(Error::config("ssm.conv_width", "must be >= 1"));
        }
        if self.d_model == 0 || self.d_state == 0 || self.n_heads == 0 {
            return Err(Error::config("ssm", "zero-sized dimension"));
        }
        Ok(())
    }

    /// Channels fed through the causal conv: the x stream plus B and C.
    pub fn conv_channels(&self) -> usize {
        self.d_inner + 2 * self.n_heads * self.d_state
    }

    /// Output width of the input projection: gate z, then the conv channels.
    pub fn in_proj_rows(&self) -> usize {
        self.d_inner + self.conv_channels()
    }
}

/// Parameters of one Mamba2 block. `a_log` parameterizes the per-head decay
/// as `A = -exp(a_log)`, which keeps `A < 0` for any parameter value.
#[derive(Debug, Clone)]
pub struct SsmBlockParams {
    pub dims: SsmDims,
    pub in_proj: Tensor,
    pub conv_kernel: Tensor,
    pub conv_bias: Tensor,
    pub a_log: Tensor,
    pub dt_w: Tensor,
    pub dt_b: Tensor,
    pub d_skip: Tensor,
    pub norm_w: Tensor,
    pub out_proj: Tensor,
}

impl SsmBlockParams {
    /// Deterministic init. `out_scale` damps the residual-writing projection
    /// (set from the layer count at model level).
    pub fn init(dims: SsmDims, dtype: Dtype, out_scale: f64, rng: &mut ChaCha8Rng) -> SsmBlockParams {
        let d = dims.d_model;
        let dt0: Vec<f64> =
            (0..dims.n_heads).map(|_| init::log_uniform(rng, 1e-3, 1e-1)).collect();
        let a0: Vec<f64> = (0..dims.n_heads)
            .map(|_| init::log_uniform(rng, 1.0, 16.0).ln())
            .collect();
        SsmBlockParams {
            dims,
            in_proj: init::randn(rng, vec![dims.in_proj_rows(), d], (d as f64).powf(-0.5), dtype)
                .requires_grad(true),
            conv_kernel: init::randn(
                rng,
                vec![dims.conv_width, dims.conv_channels()],
                (dims.conv_width as f64).powf(-0.5),
                dtype,
            )
            .requires_grad(true),
            conv_bias: Tensor::zeros(vec![dims.conv_channels()], dtype).requires_grad(true),
            a_log: Tensor::from_vec(vec![dims.n_heads], dtype, a0)
                .expect("shape matches")
                .requires_grad(true),
            dt_w: init::randn(rng, vec![dims.n_heads, d], 0.01, dtype).requires_grad(true),
            dt_b: Tensor::from_vec(
                vec![dims.n_heads],
                dtype,
                dt0.iter().map(|&v| init::softplus_inverse(v)).collect(),
            )
            .expect("shape matches")
            .requires_grad(true),
            d_skip: init::ones(vec![dims.n_heads], dtype).requires_grad(true),
            norm_w: init::ones(vec![dims.d_inner], dtype).requires_grad(true),
            out_proj: init::randn(
                rng,
                vec![d, dims.d_inner],
                out_scale * (dims.d_inner as f64).powf(-0.5),
                dtype,
            )
            .requires_grad(true),
        }
    }
}

/// Fixed-size recurrent state: SSM hidden state plus the last `conv_width-1`
/// pre-conv rows. Its size depends only on the block dimensions, never on how
/// many tokens have been processed.
#[derive(Debug, Clone)]
pub struct SsmState {
    /// `[n_heads, d_head, d_state]`
    pub h: Tensor,
    /// `[conv_width-1, conv_channels]`
    pub conv_tail: Tensor,
}

impl SsmState {
    pub fn zeros(dims: &SsmDims, dtype: Dtype) -> SsmState {
        SsmState {
            h: Tensor::zeros(vec![dims.n_heads, dims.d_head, dims.d_state], dtype),
            conv_tail: Tensor::zeros(vec![dims.conv_width - 1, dims.conv_channels()], dtype),
        }
    }

    /// Logical storage size at the state's dtype.
    pub fn bytes(&self) -> usize {
        self.h.logical_bytes() + self.conv_tail.logical_bytes()
    }
}

// ─── SSD scan ────────────────────────────────────────────────────────────────

struct ScanShapes {
    len: usize,
    heads: usize,
    head_dim: usize,
    state_dim: usize,
}

fn check_scan_inputs(
    x: &Tensor,
    dt: &Tensor,
    a: &Tensor,
    b: &Tensor,
    c: &Tensor,
    d_skip: &Tensor,
    h0: &Tensor,
) -> Result<ScanShapes> {
    let xs = x.shape();
    if xs.len() != 3 {
        return Err(Error::shape(format!("scan x must be [L,H,P], got {xs:?}")));
    }
    let (len, heads, head_dim) = (xs[0], xs[1], xs[2]);
    if dt.shape() != [len, heads] {
        return Err(Error::shape(format!("scan dt shape {:?}, expected [{len},{heads}]", dt.shape())));
    }
    if a.shape() != [heads] || d_skip.shape() != [heads] {
        return Err(Error::shape(format!(
            "scan A {:?} / D {:?}, expected [{heads}]",
            a.shape(),
            d_skip.shape()
        )));
    }
    let bs = b.shape();
    if bs.len() != 3 || bs[0] != len || bs[1] != heads || c.shape() != bs {
        return Err(Error::shape(format!("scan B {:?} / C {:?} inconsistent", bs, c.shape())));
    }
    let state_dim = bs[2];
    if h0.shape() != [heads, head_dim, state_dim] {
        return Err(Error::shape(format!(
            "scan h0 {:?}, expected [{heads},{head_dim},{state_dim}]",
            h0.shape()
        )));
    }
    for &v in dt.data() {
        if v <= 0.0 {
            return Err(Error::contract(format!("scan requires dt > 0, got {v}")));
        }
    }
    for &v in a.data() {
        if v >= 0.0 {
            return Err(Error::contract(format!("scan requires A < 0, got {v}")));
        }
    }
    Ok(ScanShapes { len, heads, head_dim, state_dim })
}

/// Plain per-token recurrence. Used for decode and as the reference half of
/// the dual-route scan check.
pub fn ssd_scan_sequential(
    tape: &mut Tape,
    x: &Tensor,
    dt: &Tensor,
    a: &Tensor,
    b: &Tensor,
    c: &Tensor,
    d_skip: &Tensor,
    h0: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let sh = check_scan_inputs(x, dt, a, b, c, d_skip, h0)?;
    let (len, heads, p, n) = (sh.len, sh.heads, sh.head_dim, sh.state_dim);
    let (xd, dtd, ad, bd, cd, dd) = (x.data(), dt.data(), a.data(), b.data(), c.data(), d_skip.data());
    let mut state = h0.data().to_vec();
    let mut y = vec![0.0; len * heads * p];
    for t in 0..len {
        for h in 0..heads {
            let dtv = dtd[t * heads + h];
            let decay = (dtv * ad[h]).exp();
            let brow = &bd[(t * heads + h) * n..(t * heads + h + 1) * n];
            let crow = &cd[(t * heads + h) * n..(t * heads + h + 1) * n];
            for pi in 0..p {
                let xv = xd[(t * heads + h) * p + pi];
                let srow = &mut state[(h * p + pi) * n..(h * p + pi + 1) * n];
                let inject = dtv * xv;
                let mut acc = 0.0;
                for (s, (&bv, &cv)) in srow.iter_mut().zip(brow.iter().zip(crow)) {
                    *s = *s * decay + inject * bv;
                    acc += *s * cv;
                }
                y[(t * heads + h) * p + pi] = acc + dd[h] * xv;
            }
        }
    }
    finish_scan(tape, x, dt, a, b, c, d_skip, h0, y, state, sh)
}

/// Chunked matmul-form scan: within each chunk the output is a masked
/// `[chunk, chunk]` product of decays and `C·Bᵀ` Gram terms applied to the
/// chunk inputs; across chunks only the `[P,N]` state is carried. Equal to
/// the sequential scan up to float re-association.
#[allow(clippy::too_many_arguments)]
pub fn ssd_scan_chunked(
    tape: &mut Tape,
    x: &Tensor,
    dt: &Tensor,
    a: &Tensor,
    b: &Tensor,
    c: &Tensor,
    d_skip: &Tensor,
    h0: &Tensor,
    chunk_len: usize,
) -> Result<(Tensor, Tensor)> {
    if chunk_len < 1 {
        return Err(Error::contract("chunk_len must be >= 1"));
    }
    let sh = check_scan_inputs(x, dt, a, b, c, d_skip, h0)?;
    let (len, heads, p, n) = (sh.len, sh.heads, sh.head_dim, sh.state_dim);
    let (xd, dtd, ad, bd, cd, dd) = (x.data(), dt.data(), a.data(), b.data(), c.data(), d_skip.data());
    let mut state = h0.data().to_vec(); // [H,P,N]
    let mut y = vec![0.0; len * heads * p];

    // per-head scratch, sized for the largest chunk
    let cmax = chunk_len.min(len.max(1));
    let mut xc = vec![0.0; cmax * p];
    let mut bc = vec![0.0; cmax * n];
    let mut cc = vec![0.0; cmax * n];
    let mut logdecay = vec![0.0; cmax];
    let mut gram = vec![0.0; cmax * cmax];
    let mut mixed = vec![0.0; cmax * p];
    let mut carry = vec![0.0; cmax * p];
    let mut wb = vec![0.0; cmax * n];

    let mut t0 = 0;
    while t0 < len {
        let cl = chunk_len.min(len - t0);
        for h in 0..heads {
            // gather per-head chunk slices
            for i in 0..cl {
                let t = t0 + i;
                xc[i * p..(i + 1) * p]
                    .copy_from_slice(&xd[(t * heads + h) * p..(t * heads + h + 1) * p]);
                bc[i * n..(i + 1) * n]
                    .copy_from_slice(&bd[(t * heads + h) * n..(t * heads + h + 1) * n]);
                cc[i * n..(i + 1) * n]
                    .copy_from_slice(&cd[(t * heads + h) * n..(t * heads + h + 1) * n]);
            }
            // cumulative log-decay within the chunk
            let mut run = 0.0;
            for i in 0..cl {
                run += dtd[(t0 + i) * heads + h] * ad[h];
                logdecay[i] = run;
            }
            // intra-chunk: masked (decay ⊙ CBᵀ ⊙ dt) applied to x
            gram[..cl * cl].fill(0.0);
            mm_nt(&cc[..cl * n], &bc[..cl * n], &mut gram[..cl * cl], cl, n, cl);
            for i in 0..cl {
                for j in 0..cl {
                    gram[i * cl + j] = if j <= i {
                        gram[i * cl + j]
                            * (logdecay[i] - logdecay[j]).exp()
                            * dtd[(t0 + j) * heads + h]
                    } else {
                        0.0
                    };
                }
            }
            mixed[..cl * p].fill(0.0);
            mm_nn(&gram[..cl * cl], &xc[..cl * p], &mut mixed[..cl * p], cl, cl, p);
            // inter-chunk: incoming state read through C, decayed to each row
            let hin = &state[h * p * n..(h + 1) * p * n];
            carry[..cl * p].fill(0.0);
            mm_nt(&cc[..cl * n], hin, &mut carry[..cl * p], cl, n, p);
            for i in 0..cl {
                let scale = logdecay[i].exp();
                let t = t0 + i;
                let yrow = &mut y[(t * heads + h) * p..(t * heads + h + 1) * p];
                for pi in 0..p {
                    yrow[pi] = mixed[i * p + pi]
                        + scale * carry[i * p + pi]
                        + dd[h] * xc[i * p + pi];
                }
            }
            // state carry: h_out = exp(S_cl)·h_in + Xᵀ·(w ⊙ B)
            let total = logdecay[cl - 1];
            for i in 0..cl {
                let w = (total - logdecay[i]).exp() * dtd[(t0 + i) * heads + h];
                for nn in 0..n {
                    wb[i * n + nn] = w * bc[i * n + nn];
                }
            }
            let hout = &mut state[h * p * n..(h + 1) * p * n];
            let decay_all = total.exp();
            for v in hout.iter_mut() {
                *v *= decay_all;
            }
            mm_tn(&xc[..cl * p], &wb[..cl * n], hout, cl, p, n);
        }
        t0 += cl;
    }
    finish_scan(tape, x, dt, a, b, c, d_skip, h0, y, state, sh)
}

/// Round outputs, build tensors, and record the shared backward pass.
///
/// Both scan algorithms compute the same function, so they share one
/// backward: the adjoint of the recurrence, which re-runs the state sweep
/// forward and then walks it in reverse. The returned final state is
/// detached — recurrent chaining across calls is an inference-path contract,
/// training always differentiates through whole sequences from `h0`.
#[allow(clippy::too_many_arguments)]
fn finish_scan(
    tape: &mut Tape,
    x: &Tensor,
    dt: &Tensor,
    a: &Tensor,
    b: &Tensor,
    c: &Tensor,
    d_skip: &Tensor,
    h0: &Tensor,
    mut y: Vec<f64>,
    mut h_final: Vec<f64>,
    sh: ScanShapes,
) -> Result<(Tensor, Tensor)> {
    let dtype = x.dtype();
    let (len, heads, p, n) = (sh.len, sh.heads, sh.head_dim, sh.state_dim);
    dtype.round_slice(&mut y);
    dtype.round_slice(&mut h_final);
    let y_t = Tensor::from_raw(vec![len, heads, p], dtype, y);
    let h_t = Tensor::from_raw(vec![heads, p, n], dtype, h_final);

    let (xa, dta, aa, ba, ca, da, h0a) = (
        x.data_arc(),
        dt.data_arc(),
        a.data_arc(),
        b.data_arc(),
        c.data_arc(),
        d_skip.data_arc(),
        h0.data_arc(),
    );
    tape.push_op(
        &[x, dt, a, b, c, d_skip],
        &y_t,
        Box::new(move |g| {
            // recompute all states h_0..h_L (per head [P,N]) for the reverse sweep
            let mut states = vec![0.0; (len + 1) * heads * p * n];
            states[..heads * p * n].copy_from_slice(&h0a);
            for t in 0..len {
                let (prev, cur) = states.split_at_mut((t + 1) * heads * p * n);
                let prev = &prev[t * heads * p * n..];
                let cur = &mut cur[..heads * p * n];
                for h in 0..heads {
                    let dtv = dta[t * heads + h];
                    let decay = (dtv * aa[h]).exp();
                    let brow = &ba[(t * heads + h) * n..(t * heads + h + 1) * n];
                    for pi in 0..p {
                        let xv = xa[(t * heads + h) * p + pi];
                        let inject = dtv * xv;
                        let base = (h * p + pi) * n;
                        for nn in 0..n {
                            cur[base + nn] = prev[base + nn] * decay + inject * brow[nn];
                        }
                    }
                }
            }

            let mut dx = vec![0.0; len * heads * p];
            let mut ddt = vec![0.0; len * heads];
            let mut dav = vec![0.0; heads];
            let mut db = vec![0.0; len * heads * n];
            let mut dc = vec![0.0; len * heads * n];
            let mut dd = vec![0.0; heads];
            // adjoint of the state, per head
            let mut lambda = vec![0.0; heads * p * n];

            for t in (0..len).rev() {
                let h_cur = &states[(t + 1) * heads * p * n..(t + 2) * heads * p * n];
                let h_prev = &states[t * heads * p * n..(t + 1) * heads * p * n];
                for h in 0..heads {
                    let dtv = dta[t * heads + h];
                    let decay = (dtv * aa[h]).exp();
                    let brow = &ba[(t * heads + h) * n..(t * heads + h + 1) * n];
                    let crow = &ca[(t * heads + h) * n..(t * heads + h + 1) * n];
                    let grow = &g[(t * heads + h) * p..(t * heads + h + 1) * p];
                    let lam = &mut lambda[h * p * n..(h + 1) * p * n];

                    let mut ddecay = 0.0;
                    let mut ddt_acc = 0.0;
                    for pi in 0..p {
                        let gv = grow[pi];
                        let xv = xa[(t * heads + h) * p + pi];
                        dd[h] += gv * xv;
                        let hrow = &h_cur[(h * p + pi) * n..(h * p + pi + 1) * n];
                        let prow = &h_prev[(h * p + pi) * n..(h * p + pi + 1) * n];
                        let lrow = &mut lam[pi * n..(pi + 1) * n];
                        let mut dx_state = 0.0;
                        for nn in 0..n {
                            // y_t = h_t · C_t (+ D x): direct contributions
                            dc[(t * heads + h) * n + nn] += gv * hrow[nn];
                            lrow[nn] += gv * crow[nn];
                            // h_t = decay·h_{t-1} + dt·x·B
                            let l = lrow[nn];
                            ddecay += l * prow[nn];
                            dx_state += l * brow[nn];
                            db[(t * heads + h) * n + nn] += l * dtv * xv;
                            ddt_acc += l * xv * brow[nn];
                            // propagate adjoint to h_{t-1}
                            lrow[nn] = l * decay;
                        }
                        dx[(t * heads + h) * p + pi] = dtv * dx_state + da[h] * gv;
                    }
                    // decay = exp(dt·A): chain rule into dt and A
                    ddt[t * heads + h] = ddt_acc + ddecay * aa[h] * decay;
                    dav[h] += ddecay * dtv * decay;
                }
            }
            vec![dx, ddt, dav, db, dc, dd]
        }),
    );
    Ok((y_t, h_t.detached()))
}

// ─── block forward ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    /// Whole-sequence scan (training / prefill).
    Parallel,
    /// Single-token step over a carried state (decode).
    Recurrent,
}

/// Full Mamba2 block: in-projection → causal conv + silu → SSD scan (dt via
/// `softplus(dt_w·x + dt_b)`) → silu-gated multiplicative branch → RMS norm →
/// out-projection. Returns the output and the state to continue the sequence.
pub fn mamba2_block_forward(
    tape: &mut Tape,
    x: &Tensor,
    params: &SsmBlockParams,
    mode: ExecMode,
    state: Option<&SsmState>,
) -> Result<(Tensor, SsmState)> {
    let dims = &params.dims;
    let xs = x.shape();
    if xs.len() != 2 || xs[1] != dims.d_model {
        return Err(Error::shape(format!(
            "block input {:?}, expected [L, {}]",
            xs, dims.d_model
        )));
    }
    let len = xs[0];
    if mode == ExecMode::Recurrent {
        if len != 1 {
            return Err(Error::contract(format!("recurrent mode requires L == 1, got {len}")));
        }
        if state.is_none() {
            return Err(Error::contract("recurrent mode requires a state"));
        }
    }
    let dtype = x.dtype();
    let (d_inner, heads, hn) = (dims.d_inner, dims.n_heads, dims.n_heads * dims.d_state);

    let zxbc = tape.linear(x, &params.in_proj, None)?;
    let z = tape.narrow_cols(&zxbc, 0, d_inner)?;
    let xbc = tape.narrow_cols(&zxbc, d_inner, dims.conv_channels())?;

    let tail = state.map(|s| &s.conv_tail);
    let conv = tape.causal_conv1d(&xbc, &params.conv_kernel, &params.conv_bias, tail)?;
    let conv = tape.silu(&conv)?;

    // next conv tail: last conv_width-1 pre-conv rows, including the previous
    // tail when this call saw fewer rows than that
    let new_tail = next_conv_tail(&xbc, tail, dims.conv_width, dtype);

    let x_in = tape.narrow_cols(&conv, 0, d_inner)?;
    let x_in = tape.reshape(&x_in, vec![len, heads, dims.d_head])?;
    let b = tape.narrow_cols(&conv, d_inner, hn)?;
    let b = tape.reshape(&b, vec![len, heads, dims.d_state])?;
    let c = tape.narrow_cols(&conv, d_inner + hn, hn)?;
    let c = tape.reshape(&c, vec![len, heads, dims.d_state])?;

    let dt_raw = tape.linear(x, &params.dt_w, Some(&params.dt_b))?;
    let dt = tape.softplus(&dt_raw)?;
    let a_pos = tape.exp(&params.a_log)?;
    let a = tape.neg(&a_pos)?;

    let h0_zeros;
    let h0 = match state {
        Some(s) => &s.h,
        None => {
            h0_zeros = Tensor::zeros(vec![heads, dims.d_head, dims.d_state], dtype);
            &h0_zeros
        }
    };

    let (y, h_final) = match mode {
        ExecMode::Parallel => {
            ssd_scan_chunked(tape, &x_in, &dt, &a, &b, &c, &params.d_skip, h0, PARALLEL_CHUNK)?
        }
        ExecMode::Recurrent => {
            ssd_scan_sequential(tape, &x_in, &dt, &a, &b, &c, &params.d_skip, h0)?
        }
    };

    let y = tape.reshape(&y, vec![len, d_inner])?;
    let gate = tape.silu(&z)?;
    let y = tape.mul(&y, &gate)?;
    let y = tape.rmsnorm(&y, &params.norm_w, RMS_EPS)?;
    let out = tape.linear(&y, &params.out_proj, None)?;

    Ok((out, SsmState { h: h_final, conv_tail: new_tail }))
}

/// Assemble the next conv tail from the previous tail and the new pre-conv
/// rows. Pure data movement on detached values.
fn next_conv_tail(xbc: &Tensor, tail: Option<&Tensor>, conv_width: usize, dtype: Dtype) -> Tensor {
    let hist = conv_width - 1;
    let channels = xbc.shape()[1];
    let len = xbc.shape()[0];
    let mut rows: Vec<f64> = Vec::with_capacity(hist * channels);
    if len >= hist {
        rows.extend_from_slice(&xbc.data()[(len - hist) * channels..]);
    } else {
        let need = hist - len;
        match tail {
            Some(t) => rows.extend_from_slice(&t.data()[(hist - need) * channels..]),
            None => rows.resize(need * channels, 0.0),
        }
        rows.extend_from_slice(xbc.data());
    }
    Tensor::from_raw(vec![hist, channels], dtype, rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randu(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel).map(|_| lo + rng.gen::<f64>() * (hi - lo)).collect();
        Tensor::from_vec(shape, Dtype::F64, data).unwrap()
    }

    struct ScanCase {
        x: Tensor,
        dt: Tensor,
        a: Tensor,
        b: Tensor,
        c: Tensor,
        d: Tensor,
        h0: Tensor,
    }

    fn random_case(rng: &mut ChaCha8Rng, len: usize, heads: usize, p: usize, n: usize) -> ScanCase {
        ScanCase {
            x: randu(rng, vec![len, heads, p], -1.0, 1.0),
            dt: randu(rng, vec![len, heads], 0.01, 0.8),
            a: randu(rng, vec![heads], -4.0, -0.1),
            b: randu(rng, vec![len, heads, n], -1.0, 1.0),
            c: randu(rng, vec![len, heads, n], -1.0, 1.0),
            d: randu(rng, vec![heads], -0.5, 1.5),
            h0: randu(rng, vec![heads, p, n], -0.5, 0.5),
        }
    }

    /// Independent oracle: per-(head, p, n) scalar recurrence, different loop
    /// structure from both production scans.
    fn scalar_oracle(case: &ScanCase) -> (Vec<f64>, Vec<f64>) {
        let (len, heads, p) = (case.x.shape()[0], case.x.shape()[1], case.x.shape()[2]);
        let n = case.b.shape()[2];
        let (x, dt, a, b, c, d, h0) = (
            case.x.data(),
            case.dt.data(),
            case.a.data(),
            case.b.data(),
            case.c.data(),
            case.d.data(),
            case.h0.data(),
        );
        let mut y = vec![0.0; len * heads * p];
        let mut ht = vec![0.0; heads * p * n];
        for h in 0..heads {
            for pi in 0..p {
                for nn in 0..n {
                    let mut s = h0[(h * p + pi) * n + nn];
                    for t in 0..len {
                        let dtv = dt[t * heads + h];
                        s = (dtv * a[h]).exp() * s
                            + dtv * b[(t * heads + h) * n + nn] * x[(t * heads + h) * p + pi];
                        y[(t * heads + h) * p + pi] += s * c[(t * heads + h) * n + nn];
                    }
                    ht[(h * p + pi) * n + nn] = s;
                }
                for t in 0..len {
                    y[(t * heads + h) * p + pi] += d[h] * x[(t * heads + h) * p + pi];
                }
            }
        }
        (y, ht)
    }

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn single_step_closed_form() {
        // L=1, h0=0, dt=1, A=-1: y = (x ⊗ B)·C + D·x
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (p, n) = (3, 4);
        let x = randu(&mut rng, vec![1, 1, p], -1.0, 1.0);
        let b = randu(&mut rng, vec![1, 1, n], -1.0, 1.0);
        let c = randu(&mut rng, vec![1, 1, n], -1.0, 1.0);
        let d = randu(&mut rng, vec![1], -1.0, 1.0);
        let dt = Tensor::from_vec(vec![1, 1], Dtype::F64, vec![1.0]).unwrap();
        let a = Tensor::from_vec(vec![1], Dtype::F64, vec![-1.0]).unwrap();
        let h0 = Tensor::zeros(vec![1, p, n], Dtype::F64);
        let mut tape = Tape::inference();
        let (y, _) = ssd_scan_sequential(&mut tape, &x, &dt, &a, &b, &c, &d, &h0).unwrap();
        let bc: f64 = b.data().iter().zip(c.data()).map(|(u, v)| u * v).sum();
        for pi in 0..p {
            let want = x.data()[pi] * bc + d.data()[0] * x.data()[pi];
            assert!((y.data()[pi] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn full_decay_limit_forgets_the_past() {
        // A very negative: h_t ≈ dt·(x ⊗ B), no memory of t-1
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let case = ScanCase {
            a: Tensor::from_vec(vec![2], Dtype::F64, vec![-1e9, -1e9]).unwrap(),
            ..random_case(&mut rng, 3, 2, 2, 3)
        };
        let mut tape = Tape::inference();
        let (y, _) = ssd_scan_sequential(
            &mut tape, &case.x, &case.dt, &case.a, &case.b, &case.c, &case.d, &case.h0,
        )
        .unwrap();
        let (len, heads, p) = (3, 2, 2);
        let n = 3;
        for t in 0..len {
            for h in 0..heads {
                let dtv = case.dt.data()[t * heads + h];
                for pi in 0..p {
                    let xv = case.x.data()[(t * heads + h) * p + pi];
                    let mut want = case.d.data()[h] * xv;
                    for nn in 0..n {
                        want += dtv
                            * case.b.data()[(t * heads + h) * n + nn]
                            * xv
                            * case.c.data()[(t * heads + h) * n + nn];
                    }
                    assert!((y.data()[(t * heads + h) * p + pi] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn sequential_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let case = random_case(&mut rng, 16, 3, 4, 5);
        let (want_y, want_h) = scalar_oracle(&case);
        let mut tape = Tape::inference();
        let (y, ht) = ssd_scan_sequential(
            &mut tape, &case.x, &case.dt, &case.a, &case.b, &case.c, &case.d, &case.h0,
        )
        .unwrap();
        assert!(max_abs_diff(y.data(), &want_y) < 1e-10);
        assert!(max_abs_diff(ht.data(), &want_h) < 1e-10);
    }

    #[test]
    fn chunked_matches_sequential_for_all_chunk_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let len = 64;
        let case = random_case(&mut rng, len, 2, 3, 4);
        let mut tape = Tape::inference();
        let (want_y, want_h) = {
            let (y, h) = ssd_scan_sequential(
                &mut tape, &case.x, &case.dt, &case.a, &case.b, &case.c, &case.d, &case.h0,
            )
            .unwrap();
            (y.data().to_vec(), h.data().to_vec())
        };
        for chunk in [1, 2, 4, 16, len] {
            let (y, h) = ssd_scan_chunked(
                &mut tape, &case.x, &case.dt, &case.a, &case.b, &case.c, &case.d, &case.h0, chunk,
            )
            .unwrap();
            assert!(
                max_abs_diff(y.data(), &want_y) < 1e-10,
                "chunk {chunk} output diverges"
            );
            assert!(max_abs_diff(h.data(), &want_h) < 1e-10, "chunk {chunk} state diverges");
        }
    }

    #[test]
    fn scan_contract_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut case = random_case(&mut rng, 4, 1, 2, 2);
        let mut tape = Tape::inference();
        assert!(ssd_scan_chunked(
            &mut tape, &case.x, &case.dt, &case.a, &case.b, &case.c, &case.d, &case.h0, 0
        )
        .is_err());
        case.dt = Tensor::zeros(vec![4, 1], Dtype::F64);
        assert!(ssd_scan_sequential(
            &mut tape, &case.x, &case.dt, &case.a, &case.b, &case.c, &case.d, &case.h0
        )
        .is_err());
    }

    #[test]
    fn scan_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let case = random_case(&mut rng, 6, 2, 2, 3);
        let weights = randu(&mut rng, vec![6, 2, 2], -1.0, 1.0);
        // check gradients w.r.t. every scan input, through the chunked path
        let run = |tape: &mut Tape, x: &Tensor, dt: &Tensor, a: &Tensor, b: &Tensor, c: &Tensor, d: &Tensor| -> crate::Result<Tensor> {
            let h0 = Tensor::zeros(vec![2, 2, 3], Dtype::F64);
            let (y, _) = ssd_scan_chunked(tape, x, dt, a, b, c, d, &h0, 4)?;
            let y = tape.mul(&y, &weights)?;
            tape.sum_all(&y)
        };
        let err = grad_check(
            |t, v| run(t, v, &case.dt, &case.a, &case.b, &case.c, &case.d),
            &case.x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "x grad {err}");
        let err = grad_check(
            |t, v| run(t, &case.x, v, &case.a, &case.b, &case.c, &case.d),
            &case.dt,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "dt grad {err}");
        let err = grad_check(
            |t, v| run(t, &case.x, &case.dt, v, &case.b, &case.c, &case.d),
            &case.a,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "A grad {err}");
        let err = grad_check(
            |t, v| run(t, &case.x, &case.dt, &case.a, v, &case.c, &case.d),
            &case.b,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "B grad {err}");
        let err = grad_check(
            |t, v| run(t, &case.x, &case.dt, &case.a, &case.b, v, &case.d),
            &case.c,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "C grad {err}");
        let err = grad_check(
            |t, v| run(t, &case.x, &case.dt, &case.a, &case.b, &case.c, v),
            &case.d,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "D grad {err}");
    }

    fn test_dims() -> SsmDims {
        SsmDims { d_model: 8, d_inner: 16, n_heads: 2, d_head: 8, d_state: 4, conv_width: 4 }
    }

    #[test]
    fn block_parallel_equals_recurrent_fold() {
        for dtype in [Dtype::F64, Dtype::F32] {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let params = SsmBlockParams::init(test_dims(), dtype, 1.0, &mut rng);
            let len = 24;
            let x = {
                let t = randu(&mut rng, vec![len, 8], -1.0, 1.0);
                t.to_dtype(dtype)
            };
            let mut tape = Tape::inference();
            let (y_par, state_par) =
                mamba2_block_forward(&mut tape, &x, &params, ExecMode::Parallel, None).unwrap();

            let mut state = SsmState::zeros(&params.dims, dtype);
            let mut y_rec = Vec::new();
            for t in 0..len {
                let row = Tensor::from_vec(
                    vec![1, 8],
                    dtype,
                    x.data()[t * 8..(t + 1) * 8].to_vec(),
                )
                .unwrap();
                let (y, s) =
                    mamba2_block_forward(&mut tape, &row, &params, ExecMode::Recurrent, Some(&state))
                        .unwrap();
                y_rec.extend_from_slice(y.data());
                state = s;
            }
            let tol = if dtype == Dtype::F64 { 1e-10 } else { 1e-5 };
            assert!(
                max_abs_diff(y_par.data(), &y_rec) < tol,
                "mode equivalence at {dtype:?}: {}",
                max_abs_diff(y_par.data(), &y_rec)
            );
            assert!(max_abs_diff(state_par.h.data(), state.h.data()) < tol);
            assert!(max_abs_diff(state_par.conv_tail.data(), state.conv_tail.data()) < tol);
        }
    }

    #[test]
    fn block_is_deterministic_on_zero_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let params = SsmBlockParams::init(test_dims(), Dtype::F64, 1.0, &mut rng);
        let x = Tensor::zeros(vec![4, 8], Dtype::F64);
        let mut tape = Tape::inference();
        let (y1, _) = mamba2_block_forward(&mut tape, &x, &params, ExecMode::Parallel, None).unwrap();
        let (y2, _) = mamba2_block_forward(&mut tape, &x, &params, ExecMode::Parallel, None).unwrap();
        assert_eq!(y1.data(), y2.data());
        assert!(y1.is_finite());
    }

    #[test]
    fn block_mode_contract_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = SsmBlockParams::init(test_dims(), Dtype::F64, 1.0, &mut rng);
        let mut tape = Tape::inference();
        let x2 = Tensor::zeros(vec![2, 8], Dtype::F64);
        assert!(mamba2_block_forward(&mut tape, &x2, &params, ExecMode::Recurrent, None).is_err());
        let x1 = Tensor::zeros(vec![1, 8], Dtype::F64);
        assert!(mamba2_block_forward(&mut tape, &x1, &params, ExecMode::Recurrent, None).is_err());
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let params = SsmBlockParams::init(test_dims(), Dtype::F64, 1.0, &mut rng);
        let x = randu(&mut rng, vec![5, 8], -1.0, 1.0);
        let err = grad_check(
            |tape, v| {
                let (y, _) = mamba2_block_forward(tape, v, &params, ExecMode::Parallel, None)?;
                tape.sum_all(&y)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "block input grad {err}");
        // and through a parameter
        let err = grad_check(
            |tape, v| {
                let p = SsmBlockParams { a_log: v.clone(), ..params.clone() };
                let (y, _) = mamba2_block_forward(tape, &x, &p, ExecMode::Parallel, None)?;
                tape.sum_all(&y)
            },
            &params.a_log,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "block a_log grad {err}");
    }

    #[test]
    fn block_is_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let params = SsmBlockParams::init(test_dims(), Dtype::F64, 1.0, &mut rng);
        let len = 10;
        let base = randu(&mut rng, vec![len, 8], -1.0, 1.0);
        let mut tape = Tape::inference();
        let (y0, _) = mamba2_block_forward(&mut tape, &base, &params, ExecMode::Parallel, None).unwrap();
        for t in 1..len {
            let mut data = base.data().to_vec();
            for v in data[t * 8..(t + 1) * 8].iter_mut() {
                *v += 1.0;
            }
            let x = Tensor::from_vec(vec![len, 8], Dtype::F64, data).unwrap();
            let (y, _) = mamba2_block_forward(&mut tape, &x, &params, ExecMode::Parallel, None).unwrap();
            assert_eq!(&y.data()[..t * 8], &y0.data()[..t * 8], "perturbing x[{t}] leaked backwards");
        }
    }

    #[test]
    fn state_bytes_do_not_depend_on_tokens_processed() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let params = SsmBlockParams::init(test_dims(), Dtype::F32, 1.0, &mut rng);
        let mut state = SsmState::zeros(&params.dims, Dtype::F32);
        let size0 = state.bytes();
        let mut tape = Tape::inference();
        for t in 0..50 {
            let x = randu(&mut rng, vec![1, 8], -1.0, 1.0).to_dtype(Dtype::F32);
            let (_, s) =
                mamba2_block_forward(&mut tape, &x, &params, ExecMode::Recurrent, Some(&state))
                    .unwrap();
            state = s;
            assert_eq!(state.bytes(), size0, "state grew at step {t}");
        }
    }
}
